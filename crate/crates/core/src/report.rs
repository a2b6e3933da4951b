//! Report emission for completed runs: metric tables, translation example
//! grids, segmentation overlays and training curves.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{accuracy_table, efficiency_table, MetricsReport};
use crate::pipeline::{class_names, seg_dir, AblationReport, Arm, Pipeline, PipelineConfig, Split, RESOLVED_CONFIG};
use crate::segmentation::{Segmenter, SegmentationModel};
use crate::tensor::Tensor;
use crate::translation::{Translator, TranslationModel};
use crate::volume::{write_atomic, DomainTag, LabeledVolume};

/// Label colours; index 0 (background) is transparent.
const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

const GRID_SCALE: usize = 3;

/// RGB raster assembled from equally sized tiles.
pub struct Canvas {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            rgb: vec![255; 3 * w * h],
        }
    }

    pub fn blit(&mut self, x0: usize, y0: usize, tw: usize, tile: &[[u8; 3]]) {
        for (i, px) in tile.iter().enumerate() {
            let (x, y) = (x0 + i % tw, y0 + i / tw);
            if x < self.w && y < self.h {
                let o = 3 * (y * self.w + x);
                self.rgb[o..o + 3].copy_from_slice(px);
            }
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, f: usize) -> Canvas {
        let (w, h) = (self.w * f, self.h * f);
        let mut rgb = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                let o = 3 * ((y / f) * self.w + x / f);
                rgb.extend_from_slice(&self.rgb[o..o + 3]);
            }
        }
        Canvas { w, h, rgb }
    }

    /// Writes an 8-bit RGB PNG with provenance text chunks.
    pub fn save(&self, path: &Path, provenance: &[(&str, String)]) -> Result<()> {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, self.w as u32, self.h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            for (k, v) in provenance {
                enc.add_text_chunk(k.to_string(), v.clone()).map_err(|e| Error::format(path, e.to_string()))?;
            }
            let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
            writer.write_image_data(&self.rgb).map_err(|e| Error::format(path, e.to_string()))?;
        }
        write_atomic(path, &bytes)
    }
}

/// Grayscale tile scaled so that `[lo, hi]` maps to `[0, 255]`.
pub fn gray(slice: &[f32], lo: f32, hi: f32) -> Vec<[u8; 3]> {
    let span = (hi - lo).max(1e-6);
    slice
        .iter()
        .map(|&v| {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect()
}

/// Blends label colours over a grayscale tile.
pub fn overlay(base: &[[u8; 3]], labels: &[u8], alpha: f32) -> Vec<[u8; 3]> {
    base.iter()
        .zip(labels)
        .map(|(px, &l)| {
            if l == 0 || l as usize >= PALETTE.len() {
                return *px;
            }
            let c = PALETTE[l as usize];
            std::array::from_fn(|i| ((1.0 - alpha) * px[i] as f32 + alpha * c[i] as f32).round() as u8)
        })
        .collect()
}

fn min_max(xs: &[f32]) -> (f32, f32) {
    xs.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)))
}

fn slice_tensor(v: &LabeledVolume, z: usize) -> Tensor<f32> {
    let [_, h, w] = v.shape;
    Tensor::new(vec![1, 1, 1, h, w], v.slice_intensities(z).to_vec()).expect("slice tensor")
}

/// Rows of `[x^a, x^{a→a}, x^{a→b}, x^{a→b→a}]` for the middle slice of each
/// source volume, with the style of the paired target volume.
pub fn translation_grid<M: Translator + ?Sized>(model: &M, sources: &[LabeledVolume], targets: &[LabeledVolume]) -> Result<Canvas> {
    let rows = sources.len();
    if rows == 0 || targets.is_empty() {
        return Err(Error::InvalidArgument("translation grid needs source and target volumes".into()));
    }
    let [_, h, w] = sources[0].shape;
    let mut canvas = Canvas::new(4 * w + 3, rows * h + rows.saturating_sub(1));
    for (r, xa) in sources.iter().enumerate() {
        let xb = &targets[r % targets.len()];
        let x = slice_tensor(xa, xa.depth() / 2);
        let sa = model.encode_style(&x, DomainTag::A)?;
        let sb = model.encode_style(&slice_tensor(xb, xb.depth() / 2), DomainTag::B)?;
        let c = model.encode_content(&x)?;
        let aa = model.decode(&c, &sa)?;
        let ab = model.decode(&c, &sb)?;
        let aba = model.decode(&model.encode_content(&ab)?, &sa)?;
        let (lo, hi) = min_max(x.data());
        let (blo, bhi) = min_max(ab.data());
        let tiles = [gray(x.data(), lo, hi), gray(aa.data(), lo, hi), gray(ab.data(), blo, bhi), gray(aba.data(), lo, hi)];
        for (col, t) in tiles.iter().enumerate() {
            canvas.blit(col * (w + 1), r * (h + 1), w, t);
        }
    }
    Ok(canvas)
}

/// Columns `[image, ground truth, prediction per model]` for the middle
/// slice of each volume.
pub fn overlay_grid(vols: &[LabeledVolume], preds: &[Vec<Vec<u8>>]) -> Result<Canvas> {
    if vols.is_empty() {
        return Err(Error::InvalidArgument("overlay grid needs volumes".into()));
    }
    let [_, h, w] = vols[0].shape;
    let cols = 2 + preds.len();
    let mut canvas = Canvas::new(cols * (w + 1) - 1, vols.len() * (h + 1) - 1);
    for (r, v) in vols.iter().enumerate() {
        let z = v.depth() / 2;
        let (lo, hi) = min_max(v.slice_intensities(z));
        let base = gray(v.slice_intensities(z), lo, hi);
        canvas.blit(0, r * (h + 1), w, &base);
        canvas.blit(w + 1, r * (h + 1), w, &overlay(&base, v.slice_labels(z), 0.5));
        for (m, p) in preds.iter().enumerate() {
            let sl = &p[r][z * h * w..(z + 1) * h * w];
            canvas.blit((2 + m) * (w + 1), r * (h + 1), w, &overlay(&base, sl, 0.5));
        }
    }
    Ok(canvas)
}

/// Line plot of several series (no text; series colours follow the palette).
pub fn line_plot(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let pts = series.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(Error::InvalidArgument("line plot has no finite points".into()));
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let (w, h) = (640u32, 400u32);
    let mut buf = vec![0u8; (3 * w * h) as usize];
    let err = |e: String| Error::format(path, e);
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
            .map_err(|e| err(e.to_string()))?;
        chart.configure_mesh().draw().map_err(|e| err(e.to_string()))?;
        for (i, s) in series.iter().enumerate() {
            let c = PALETTE[1 + i % (PALETTE.len() - 1)];
            chart
                .draw_series(LineSeries::new(s.iter().copied(), RGBColor(c[0], c[1], c[2]).stroke_width(2)))
                .map_err(|e| err(e.to_string()))?;
        }
        root.present().map_err(|e| err(e.to_string()))?;
    }
    Canvas {
        w: w as usize,
        h: h as usize,
        rgb: buf,
    }
    .save(path, &[])
}

/// Reads the numeric columns of a history CSV, skipping `#` lines.
pub fn read_history(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty history"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| {
            l.split(',')
                .map(|c| c.parse::<f64>().map_err(|e| Error::format(path, e.to_string())))
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<f64>], x: &str, y: &str) -> Vec<(f64, f64)> {
    let (Some(i), Some(j)) = (header.iter().position(|h| h == x), header.iter().position(|h| h == y)) else {
        return vec![];
    };
    rows.iter().map(|r| (r[i], r[j])).collect()
}

/// Moving average over a window, for noisy per-iteration losses.
fn smooth(s: &[(f64, f64)], win: usize) -> Vec<(f64, f64)> {
    if s.len() <= win {
        return s.to_vec();
    }
    s.windows(win)
        .step_by((win / 2).max(1))
        .map(|w| (w[w.len() / 2].0, w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64))
        .collect()
}

/// Tables from a persisted ablation report.
pub fn tables(report: &AblationReport, num_classes: usize) -> (String, String) {
    let names = class_names(num_classes);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let rows: Vec<(&str, &MetricsReport)> = report.arms.iter().map(|a| (a.arm.name(), &a.report)).collect();
    let eff = report.arms.last().map(|a| a.efficiency.clone()).unwrap_or_default();
    (accuracy_table(&rows, &names), efficiency_table(&eff))
}

/// Emits every report artifact of one run directory into `<run>/report`.
pub fn report_run(run: &Path) -> Result<Vec<PathBuf>> {
    let cfg_path = run.join(RESOLVED_CONFIG);
    if !cfg_path.exists() {
        return Err(Error::MissingInput(format!("{} is not a run directory (no {RESOLVED_CONFIG})", run.display())));
    }
    let mut cfg = PipelineConfig::load(&cfg_path)?;
    cfg.output_dir = run.to_path_buf();
    let p = Pipeline::new(cfg, false)?;
    let ablation = p.load_ablation()?;
    let out = run.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let prov = |upstream: String| vec![("config_hash", p.config_hash.clone()), ("upstream", upstream)];
    let mut written = Vec::new();

    let k = p.cfg.data.phantom.num_classes;
    let (acc, eff) = tables(&ablation, k);
    let head = format!("# config_hash={} upstream={}\n", p.config_hash, ablation.data_manifest_hash);
    for (name, body) in [("accuracy.csv", acc), ("efficiency.csv", eff)] {
        write_atomic(&out.join(name), (head.clone() + &body).as_bytes())?;
        written.push(out.join(name));
    }

    let oracle_a = p.volumes(Split::OracleA)?;
    let oracle_b = p.volumes(Split::OracleB)?;
    let rows = oracle_a.len().min(4);
    let tdir = run.join("translation");
    if tdir.join("model.ckpt").exists() {
        let model = TranslationModel::load(&tdir.join("model.ckpt"))?;
        let grid = translation_grid(&model, &oracle_a[..rows], &oracle_b[..rows])?;
        let path = out.join("translation_grid.png");
        grid.upscale(GRID_SCALE).save(&path, &prov(tdir.join("model.ckpt").display().to_string()))?;
        written.push(path);
        let (h, r) = read_history(&tdir.join("history.csv"))?;
        let series: Vec<_> = ["rec", "total_gen", "total_disc"]
            .iter()
            .map(|c| smooth(&column(&h, &r, "iteration", c), 20))
            .collect();
        let path = out.join("translation_loss.png");
        line_plot(&path, &series)?;
        written.push(path);
    }

    let mut preds = Vec::new();
    let mut seg_series = Vec::new();
    for a in &ablation.arms {
        let model = SegmentationModel::load(Path::new(&a.checkpoint))?;
        preds.push(
            oracle_b[..rows]
                .iter()
                .map(|v| model.predict(v).map(|m| m.labels))
                .collect::<Result<Vec<_>>>()?,
        );
        let hist = match a.arm {
            Arm::DrlSt => run.join(format!("st/round_{}/model/history.csv", p.cfg.self_training.rounds)),
            arm => run.join(seg_dir(arm)).join("history.csv"),
        };
        if hist.exists() {
            let (h, r) = read_history(&hist)?;
            seg_series.push(column(&h, &r, "epoch", "loss"));
        }
    }
    let grid = overlay_grid(&oracle_b[..rows], &preds)?;
    let path = out.join("segmentation_overlays.png");
    let ids: Vec<String> = ablation.arms.iter().map(|a| format!("{}={}", a.arm, a.checkpoint_id)).collect();
    grid.upscale(GRID_SCALE).save(&path, &prov(ids.join(";")))?;
    written.push(path);
    if !seg_series.is_empty() {
        let path = out.join("segmentation_loss.png");
        line_plot(&path, &seg_series)?;
        written.push(path);
    }
    if let Some(st) = ablation.arm(Arm::DrlSt).filter(|a| !a.round_dsc.is_empty()) {
        let mut s = vec![(0.0, ablation.arm(Arm::Drl).map_or(f64::NAN, |d| d.report.mean_dsc))];
        s.extend(st.round_dsc.iter().enumerate().map(|(i, &d)| ((i + 1) as f64, d)));
        let s: Vec<_> = s.into_iter().filter(|p| p.1.is_finite()).collect();
        let path = out.join("self_training_dsc.png");
        line_plot(&path, &[s])?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_background() {
        let base = gray(&[0.0, 1.0], 0.0, 1.0);
        assert_eq!(base, vec![[0, 0, 0], [255, 255, 255]]);
        let o = overlay(&base, &[0, 1], 1.0);
        assert_eq!(o[0], [0, 0, 0]);
        assert_eq!(o[1], PALETTE[1]);
    }

    #[test]
    fn png_carries_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut c = Canvas::new(3, 2);
        c.blit(0, 0, 1, &[[1, 2, 3]]);
        c.save(&path, &[("config_hash", "abc".into())]).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let reader = dec.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (3, 2));
        assert!(info.uncompressed_latin1_text.iter().any(|t| t.keyword == "config_hash" && t.text == "abc"));
        let big = c.upscale(2);
        assert_eq!((big.w, big.h), (6, 4));
        assert_eq!(&big.rgb[..6], &[1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn plots_and_history_parse() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("h.csv");
        std::fs::write(&csv, "# config_hash=x upstream=\nepoch,loss\n0,1.5\n1,1.0\n").unwrap();
        let (h, r) = read_history(&csv).unwrap();
        let s = column(&h, &r, "epoch", "loss");
        assert_eq!(s, vec![(0.0, 1.5), (1.0, 1.0)]);
        let png = dir.path().join("p.png");
        line_plot(&png, &[s]).unwrap();
        assert!(std::fs::metadata(&png).unwrap().len() > 100);
        assert!(line_plot(&png, &[vec![]]).is_err());
    }
}
