//! Accuracy metrics (Dice, normalized surface Dice) and efficiency
//! accounting (runtime, peak memory, memory-time area).
//!
//! Masks are flat `u8` label maps in `[D, H, W]` order. Boundaries use
//! face connectivity: a voxel of the mask is on the boundary if any face
//! neighbour lies outside the mask or outside the grid. Axes of extent 1 are
//! skipped, so a single-slice volume uses the 4-neighbourhood.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::Segmenter;
use crate::volume::LabeledVolume;

/// Relative slack when comparing squared distances against a tolerance, so
/// that a distance equal to the tolerance counts as within it regardless of
/// rounding in the distance transform.
pub const TOLERANCE_SLACK: f64 = 1e-9;

fn check_pair(pred: &[u8], gt: &[u8], shape: Option<[usize; 3]>) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metric masks", &[gt.len()], &[pred.len()]));
    }
    if let Some(s) = shape {
        let n: usize = s.iter().product();
        if n != pred.len() {
            return Err(Error::shape("metric mask vs grid", &s, &[pred.len()]));
        }
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` for class `class`; 1 when both are empty.
pub fn dsc(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    check_pair(pred, gt, None)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

pub fn binary_mask(labels: &[u8], class: u8) -> Vec<bool> {
    labels.iter().map(|&l| l == class).collect()
}

/// Boundary voxels of `mask` (face connectivity, grid border counts as
/// outside).
pub fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let outside = |dz: isize, dy: isize, dx: isize| {
                    let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                        return true;
                    }
                    !mask[((zz as usize) * h + yy as usize) * w + xx as usize]
                };
                let mut edge = false;
                if d > 1 {
                    edge |= outside(-1, 0, 0) || outside(1, 0, 0);
                }
                if h > 1 {
                    edge |= outside(0, -1, 0) || outside(0, 1, 0);
                }
                if w > 1 {
                    edge |= outside(0, 0, -1) || outside(0, 0, 1);
                }
                out[i] = edge;
            }
        }
    }
    out
}

/// One pass of the lower-envelope distance transform along a line with
/// sample spacing `s`. `f` holds squared distances (infinite where unset).
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    zs.clear();
    let pos = |q: usize| q as f64 * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zs.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (xq, xp) = (pos(q), pos(p));
                    let cross = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if cross <= *zs.last().unwrap() {
                        v.pop();
                        zs.pop();
                    } else {
                        v.push(q);
                        zs.push(cross);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && zs[k + 1] < x {
            k += 1;
        }
        let dx = x - pos(v[k]);
        *o = dx * dx + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest
/// `true` voxel of `seeds`; infinite if there are none.
pub fn squared_distance_transform(seeds: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut dist: Vec<f64> = seeds.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    let longest = d.max(h).max(w);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        for start in 0..dist.len() {
            // visit each line once, from its first element
            if (start / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = dist[start + i * stride];
            }
            edt_line(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut zs);
            for i in 0..n {
                dist[start + i * stride] = out[i];
            }
        }
    }
    dist
}

/// Whether a squared distance lies within `tolerance_mm`.
pub fn within(d2: f64, tolerance_mm: f64) -> bool {
    d2 <= tolerance_mm * tolerance_mm * (1.0 + TOLERANCE_SLACK)
}

/// Normalized surface Dice of class `class` at `tolerance_mm`.
pub fn nsd(pred: &[u8], gt: &[u8], shape: [usize; 3], class: u8, tolerance_mm: f64, spacing: [f64; 3]) -> Result<f64> {
    check_pair(pred, gt, Some(shape))?;
    if !(tolerance_mm >= 0.0) {
        return Err(Error::InvalidArgument(format!("NSD tolerance must be >= 0, got {tolerance_mm}")));
    }
    let bp = boundary(&binary_mask(pred, class), shape);
    let bg = boundary(&binary_mask(gt, class), shape);
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let to_g = squared_distance_transform(&bg, shape, spacing);
    let to_p = squared_distance_transform(&bp, shape, spacing);
    let close_p = bp.iter().zip(&to_g).filter(|(&b, &d2)| b && within(d2, tolerance_mm)).count();
    let close_g = bg.iter().zip(&to_p).filter(|(&b, &d2)| b && within(d2, tolerance_mm)).count();
    Ok((close_p + close_g) as f64 / (np + ng) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u8,
    pub dsc: f64,
    pub nsd: f64,
    /// Whether the class occurs in the ground truth of this case.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub id: String,
    pub scores: Vec<ClassScore>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: u8,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub nsd_mean: f64,
    pub nsd_std: f64,
    /// Number of cases whose ground truth contains the class.
    pub present: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseScores>,
    pub per_class: Vec<ClassSummary>,
    /// Mean over classes of the per-class mean.
    pub mean_dsc: f64,
    pub mean_nsd: f64,
}

/// NSD tolerance: a default in mm (or one voxel-equivalent, the largest
/// spacing of the case, when unset) plus optional per-class overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerance {
    pub default_mm: Option<f64>,
    #[serde(with = "class_keys")]
    pub per_class_mm: BTreeMap<u8, f64>,
}

/// Class-id map keys as strings, since TOML keys cannot be integers.
mod class_keys {
    use std::collections::BTreeMap;

    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<u8, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u8, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<u8>()
                    .map(|c| (c, v))
                    .map_err(|_| D::Error::custom(format!("class key '{k}' is not an integer in 0..=255")))
            })
            .collect()
    }
}

impl Tolerance {
    pub fn for_class(&self, class: u8, spacing: [f64; 3]) -> f64 {
        if let Some(&t) = self.per_class_mm.get(&class) {
            return t;
        }
        self.default_mm.unwrap_or_else(|| spacing.iter().cloned().fold(0.0, f64::max))
    }
}

/// One evaluated volume.
#[derive(Clone, Copy, Debug)]
pub struct Case<'a> {
    pub id: &'a str,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub pred: &'a [u8],
    pub gt: &'a [u8],
}

pub fn score_case(case: &Case<'_>, classes: &[u8], tol: &Tolerance) -> Result<CaseScores> {
    let scores = classes
        .iter()
        .map(|&c| {
            Ok(ClassScore {
                class: c,
                dsc: dsc(case.pred, case.gt, c)?,
                nsd: nsd(case.pred, case.gt, case.shape, c, tol.for_class(c, case.spacing), case.spacing)?,
                present: case.gt.contains(&c),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseScores {
        id: case.id.to_string(),
        scores,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn summarize(cases: Vec<CaseScores>, classes: &[u8]) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("metrics report needs at least one case".into()));
    }
    let per_class: Vec<ClassSummary> = classes
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let d: Vec<f64> = cases.iter().map(|cs| cs.scores[j].dsc).collect();
            let s: Vec<f64> = cases.iter().map(|cs| cs.scores[j].nsd).collect();
            let (dsc_mean, dsc_std) = mean_std(&d);
            let (nsd_mean, nsd_std) = mean_std(&s);
            ClassSummary {
                class: c,
                dsc_mean,
                dsc_std,
                nsd_mean,
                nsd_std,
                present: cases.iter().filter(|cs| cs.scores[j].present).count(),
            }
        })
        .collect();
    let n = per_class.len() as f64;
    let (mean_dsc, mean_nsd) = if per_class.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            per_class.iter().map(|c| c.dsc_mean).sum::<f64>() / n,
            per_class.iter().map(|c| c.nsd_mean).sum::<f64>() / n,
        )
    };
    Ok(MetricsReport {
        cases,
        per_class,
        mean_dsc,
        mean_nsd,
    })
}

/// Scores every case and aggregates per class.
pub fn aggregate_report(cases: &[Case<'_>], classes: &[u8], tol: &Tolerance) -> Result<MetricsReport> {
    let scored = cases.iter().map(|c| score_case(c, classes, tol)).collect::<Result<Vec<_>>>()?;
    summarize(scored, classes)
}

/// Predicts every volume with `model` and scores the foreground classes
/// against the volume's own labels.
pub fn evaluate<S: Segmenter + ?Sized>(model: &S, vols: &[LabeledVolume], tol: &Tolerance) -> Result<MetricsReport> {
    let classes = foreground(model.num_classes());
    let preds = vols.iter().map(|v| model.predict(v)).collect::<Result<Vec<_>>>()?;
    let cases: Vec<Case<'_>> = vols
        .iter()
        .zip(&preds)
        .map(|(v, p)| Case {
            id: v.id(),
            shape: v.shape,
            spacing: v.spacing,
            pred: &p.labels,
            gt: &v.labels,
        })
        .collect();
    aggregate_report(&cases, &classes, tol)
}

/// Foreground classes `1..k`.
pub fn foreground(k: usize) -> Vec<u8> {
    (1..k as u8).collect()
}

// ---------------------------------------------------------------- resources

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceTrace {
    pub interval_s: f64,
    /// `(time_s, memory_mb)` with strictly increasing times.
    pub samples: Vec<(f64, f64)>,
    pub runtime_s: f64,
    /// False when memory could not be sampled on this platform.
    pub memory_available: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceSummary {
    pub runtime_s: f64,
    pub max_mb: f64,
    pub area_mb_s: f64,
}

/// Trapezoidal integral of memory over time, in MB·s.
pub fn trapezoid_area(samples: &[(f64, f64)]) -> f64 {
    samples.windows(2).map(|p| 0.5 * (p[0].1 + p[1].1) * (p[1].0 - p[0].0)).sum()
}

impl ResourceTrace {
    pub fn summary(&self) -> ResourceSummary {
        ResourceSummary {
            runtime_s: self.runtime_s,
            max_mb: self.samples.iter().map(|s| s.1).fold(0.0, f64::max),
            area_mb_s: trapezoid_area(&self.samples),
        }
    }
}

/// Resident set size of this process in MB, if the platform exposes it.
pub fn current_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// Runs `task` while a background thread samples process memory every
/// `interval`.
pub fn profile_run<R>(interval: Duration, task: impl FnOnce() -> R) -> (R, ResourceTrace) {
    let start = Instant::now();
    let samples = Arc::new(Mutex::new(Vec::<(f64, f64)>::new()));
    let done = Arc::new(AtomicBool::new(false));
    let available = current_rss_mb().is_some();
    let push = move |samples: &Mutex<Vec<(f64, f64)>>| {
        if let Some(mb) = current_rss_mb() {
            let t = start.elapsed().as_secs_f64();
            let mut s = samples.lock().unwrap();
            if s.last().is_none_or(|&(last, _)| t > last) {
                s.push((t, mb));
            }
        }
    };
    let sampler = available.then(|| {
        let (samples, done) = (samples.clone(), done.clone());
        std::thread::spawn(move || {
            while !done.load(Ordering::Relaxed) {
                push(&samples);
                std::thread::sleep(interval);
            }
        })
    });
    let out = task();
    done.store(true, Ordering::Relaxed);
    if let Some(h) = sampler {
        let _ = h.join();
    }
    if available {
        push(&samples);
    } else {
        log::warn!("memory sampling unavailable; recording runtime only");
    }
    let runtime_s = start.elapsed().as_secs_f64();
    let samples = Arc::try_unwrap(samples).map(|m| m.into_inner().unwrap()).unwrap_or_default();
    (
        out,
        ResourceTrace {
            interval_s: interval.as_secs_f64(),
            samples,
            runtime_s,
            memory_available: available,
        },
    )
}

// ------------------------------------------------------------------- tables

fn pm(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

/// Per-class DSC and NSD (percent, mean ± std) for each method, followed by
/// the class-averaged means.
pub fn accuracy_table(rows: &[(&str, &MetricsReport)], class_names: &[&str]) -> String {
    let mut head = vec!["Method".to_string()];
    for metric in ["DSC", "NSD"] {
        for n in class_names {
            head.push(format!("{n} {metric} (%)"));
        }
        head.push(format!("Mean {metric} (%)"));
    }
    let mut out = head.join(",");
    out.push('\n');
    for (name, r) in rows {
        let mut cells = vec![name.to_string()];
        cells.extend(r.per_class.iter().map(|c| pm(c.dsc_mean, c.dsc_std)));
        cells.push(format!("{:.2}", 100.0 * r.mean_dsc));
        cells.extend(r.per_class.iter().map(|c| pm(c.nsd_mean, c.nsd_std)));
        cells.push(format!("{:.2}", 100.0 * r.mean_nsd));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub case_id: String,
    pub image_size: [usize; 3],
    pub summary: ResourceSummary,
}

pub const EFFICIENCY_HEADER: &str = "Case ID,Image Size,Running Time (s),Max Memory (MB),Total Memory (MB·s)";

pub fn efficiency_table(rows: &[EfficiencyRow]) -> String {
    let mut out = String::from(EFFICIENCY_HEADER);
    out.push('\n');
    for r in rows {
        let [d, h, w] = r.image_size;
        out.push_str(&format!(
            "{},{}x{}x{},{:.3},{:.1},{:.1}\n",
            r.case_id, w, h, d, r.summary.runtime_s, r.summary.max_mb, r.summary.area_mb_s
        ));
    }
    out
}
