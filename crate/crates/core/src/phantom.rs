//! Synthetic two-modality "abdominal" phantoms.
//!
//! An anatomy is a label grid of disjoint, connected organ blobs on a
//! background. A [`DomainStyle`] renders it into one modality: per-label base
//! intensity, a smooth multiplicative bias field, in-plane blur and additive
//! Gaussian noise. The source and target styles invert the organ contrast so
//! a model trained on one modality fails on the other.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::gaussian_blur;
use crate::volume::{sha256_hex, DomainTag, LabeledVolume};

pub const MIN_GRID_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// `[D, H, W]` voxels. In-plane dims must be at least 16.
    pub grid_shape: [usize; 3],
    pub num_classes: usize,
    /// Relative in-plane blob radii per organ (fraction of half the grid),
    /// cycled when shorter than the organ count.
    pub organ_scale: Vec<f64>,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_shape: [8, 64, 64],
            num_classes: 5,
            organ_scale: vec![0.34, 0.26, 0.21, 0.16],
            spacing: [3.0, 1.5, 1.5],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InfeasibleSpec(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 255 {
            return Err(Error::InfeasibleSpec("num_classes must be < 256".into()));
        }
        if self.grid_shape[0] < 1 || self.grid_shape[1] < MIN_GRID_DIM || self.grid_shape[2] < MIN_GRID_DIM {
            return Err(Error::InfeasibleSpec(format!(
                "grid {:?} too small: in-plane dims must be >= {MIN_GRID_DIM}",
                self.grid_shape
            )));
        }
        if self.organ_scale.is_empty() || self.organ_scale.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::InfeasibleSpec(format!(
                "organ_scale entries must lie in (0, 1], got {:?}",
                self.organ_scale
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InfeasibleSpec("spacing must be positive".into()));
        }
        Ok(())
    }

    fn scale_of(&self, organ: usize) -> f64 {
        self.organ_scale[(organ - 1) % self.organ_scale.len()]
    }
}

/// SplitMix64-style seed derivation so every (stream, index) pair gets an
/// independent generator.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Build a label-only volume (intensities zero) for one anatomy.
pub fn generate_anatomy(spec: &PhantomSpec, seed: u64) -> Result<LabeledVolume> {
    spec.validate()?;
    let [d, h, w] = spec.grid_shape;
    let mut rng = rng_from(seed);
    let mut labels = vec![0u8; d * h * w];
    let mut occupied = vec![false; d * h * w];
    let half = h.min(w) as f64 / 2.0;

    // Larger organs first so placement is most constrained early.
    let mut organs: Vec<usize> = (1..spec.num_classes).collect();
    organs.sort_by(|&a, &b| spec.scale_of(b).total_cmp(&spec.scale_of(a)).then(a.cmp(&b)));

    for organ in organs {
        let r = spec.scale_of(organ) * half;
        if r < 1.5 {
            return Err(Error::InfeasibleSpec(format!(
                "organ {organ} radius {r:.2} voxels is below 1.5 on grid {:?}",
                spec.grid_shape
            )));
        }
        let mut placed = false;
        for _ in 0..500 {
            let ry = r * rng.random_range(0.8..1.2);
            let rx = r * rng.random_range(0.8..1.2);
            let ext = ry.max(rx) * 1.15 + 1.0;
            if 2.0 * ext >= h.min(w) as f64 {
                continue;
            }
            let cy = rng.random_range(ext..h as f64 - ext);
            let cx = rng.random_range(ext..w as f64 - ext);
            let cz = (d as f64 - 1.0) / 2.0 + rng.random_range(-0.15..0.15) * d as f64;
            let rz = (d as f64 * rng.random_range(0.45..0.7)).max(0.75);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let wobble = rng.random_range(0.0..0.12);
            let (st, ct) = theta.sin_cos();
            let mut voxels = Vec::new();
            for z in 0..d {
                let dz = (z as f64 - cz) / rz;
                if dz.abs() >= 1.0 {
                    continue;
                }
                let shrink = (1.0 - dz * dz).sqrt();
                let (ylo, yhi) = ((cy - ext).floor().max(0.0) as usize, ((cy + ext).ceil() as usize).min(h));
                let (xlo, xhi) = ((cx - ext).floor().max(0.0) as usize, ((cx + ext).ceil() as usize).min(w));
                for y in ylo..yhi {
                    for x in xlo..xhi {
                        let (py, px) = (y as f64 - cy, x as f64 - cx);
                        let u = (ct * px + st * py) / rx;
                        let v = (-st * px + ct * py) / ry;
                        let ang = v.atan2(u);
                        let lim = shrink * (1.0 + wobble * (2.0 * ang + phase).sin());
                        if u * u + v * v <= lim * lim {
                            voxels.push((z * h + y) * w + x);
                        }
                    }
                }
            }
            let voxels = largest_component(&voxels, spec.grid_shape);
            if voxels.len() < 8 {
                continue;
            }
            // keep a one-voxel gap to every other organ
            let clash = voxels.iter().any(|&i| {
                occupied[i] || neighbors6(i, spec.grid_shape).any(|j| occupied[j])
            });
            if clash {
                continue;
            }
            for &i in &voxels {
                labels[i] = organ as u8;
                occupied[i] = true;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InfeasibleSpec(format!(
                "could not place organ {organ} without overlap on grid {:?}",
                spec.grid_shape
            )));
        }
    }

    let mut vol = LabeledVolume::new(spec.grid_shape, spec.spacing, vec![0.0; d * h * w], labels, DomainTag::A)?;
    vol.meta.id = format!("anat-{seed:016x}");
    vol.meta.anatomy_id = Some(vol.meta.id.clone());
    vol.meta.seed = Some(seed);
    Ok(vol)
}

pub(crate) fn neighbors6(i: usize, shape: [usize; 3]) -> impl Iterator<Item = usize> {
    let [d, h, w] = shape;
    let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
    let mut out = [usize::MAX; 6];
    if z > 0 {
        out[0] = i - h * w;
    }
    if z + 1 < d {
        out[1] = i + h * w;
    }
    if y > 0 {
        out[2] = i - w;
    }
    if y + 1 < h {
        out[3] = i + w;
    }
    if x > 0 {
        out[4] = i - 1;
    }
    if x + 1 < w {
        out[5] = i + 1;
    }
    out.into_iter().filter(|&j| j != usize::MAX)
}

/// Largest 6-connected component of a voxel index set.
pub(crate) fn largest_component(voxels: &[usize], shape: [usize; 3]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut inside = vec![false; n];
    for &v in voxels {
        inside[v] = true;
    }
    let mut best = Vec::new();
    for &start in voxels {
        if !inside[start] {
            continue;
        }
        inside[start] = false;
        let mut comp = vec![start];
        let mut k = 0;
        while k < comp.len() {
            let cur = comp[k];
            k += 1;
            for nb in neighbors6(cur, shape) {
                if inside[nb] {
                    inside[nb] = false;
                    comp.push(nb);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

/// Smooth multiplicative field `1 + strength · s(y, x)` with `|s| <= 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasField {
    pub strength: f64,
    /// Maximum spatial frequency in cycles per field of view.
    pub max_cycles: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub domain: DomainTag,
    /// Base intensity per label value; index 0 is background.
    pub intensity_lut: Vec<f64>,
    pub bias_field: BiasField,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl DomainStyle {
    /// "CT-like" source style: organs brighter than background, brightest
    /// for the largest organ.
    pub fn source(num_classes: usize) -> Self {
        let mut lut = vec![0.35];
        let span = (num_classes.saturating_sub(2)).max(1) as f64;
        lut.extend((1..num_classes).map(|k| 0.95 - 0.45 * (k - 1) as f64 / span));
        DomainStyle {
            domain: DomainTag::A,
            intensity_lut: lut,
            bias_field: BiasField {
                strength: 0.05,
                max_cycles: 0.6,
            },
            noise_sigma: 0.02,
            blur_sigma: 0.5,
        }
    }

    /// "MRI-like" target style: bright background, organ contrast order
    /// reversed and every organ darker than the background.
    pub fn target(num_classes: usize) -> Self {
        let mut lut = vec![0.70];
        let span = (num_classes.saturating_sub(2)).max(1) as f64;
        lut.extend((1..num_classes).map(|k| 0.15 + 0.45 * (k - 1) as f64 / span));
        DomainStyle {
            domain: DomainTag::B,
            intensity_lut: lut,
            bias_field: BiasField {
                strength: 0.15,
                max_cycles: 0.8,
            },
            noise_sigma: 0.03,
            blur_sigma: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise and blur sigmas must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.bias_field.strength) {
            return Err(Error::InvalidArgument("bias strength must lie in [0, 1)".into()));
        }
        if self.intensity_lut.is_empty() {
            return Err(Error::InvalidArgument("empty intensity LUT".into()));
        }
        Ok(())
    }
}

/// `intensities = blur(lut(labels) × bias) + noise`; labels pass through.
pub fn render_modality(anatomy: &LabeledVolume, style: &DomainStyle, seed: u64) -> Result<LabeledVolume> {
    style.validate()?;
    anatomy.validate()?;
    if let Some(&l) = anatomy.labels.iter().find(|&&l| l as usize >= style.intensity_lut.len()) {
        return Err(Error::InvalidArgument(format!(
            "label {l} has no entry in the {}-entry intensity LUT",
            style.intensity_lut.len()
        )));
    }
    let [d, h, w] = anatomy.shape;
    let mut rng = rng_from(seed);
    let bf = &style.bias_field;
    let mut comps = Vec::new();
    for _ in 0..2 {
        comps.push((
            rng.random_range(0.0..bf.max_cycles.max(1e-9)),
            rng.random_range(0.0..bf.max_cycles.max(1e-9)),
            rng.random_range(0.0..std::f64::consts::TAU),
        ));
    }
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("valid sigma");
    let mut out = vec![0f32; d * h * w];
    for z in 0..d {
        let slice = &mut out[z * h * w..(z + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                let s: f64 = comps
                    .iter()
                    .map(|&(a, b, p)| (std::f64::consts::TAU * (a * fy + b * fx) + p).sin())
                    .sum::<f64>()
                    / comps.len() as f64;
                let bias = 1.0 + bf.strength * s;
                let l = anatomy.labels[(z * h + y) * w + x] as usize;
                slice[y * w + x] = (style.intensity_lut[l] * bias) as f32;
            }
        }
        gaussian_blur(slice, h, w, style.blur_sigma);
        if style.noise_sigma > 0.0 {
            for v in slice.iter_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
        }
    }
    let mut vol = LabeledVolume::new(anatomy.shape, anatomy.spacing, out, anatomy.labels.clone(), style.domain)?;
    vol.meta = anatomy.meta.clone();
    vol.meta.seed = Some(seed);
    vol.meta.id = format!("{}-{}", anatomy.id(), domain_suffix(style.domain));
    Ok(vol)
}

fn domain_suffix(d: DomainTag) -> &'static str {
    match d {
        DomainTag::A => "A",
        DomainTag::B => "B",
        DomainTag::SyntheticAB => "AB",
        DomainTag::PseudoB => "pB",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRef {
    pub id: String,
    pub anatomy_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePair {
    pub anatomy_id: String,
    pub a: VolumeRef,
    pub b: VolumeRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    /// Domain A scans with labels.
    pub source_train: Vec<VolumeRef>,
    /// Domain B scans; their labels are stored for evaluation only.
    pub target_train: Vec<VolumeRef>,
    /// Held-out anatomies rendered in both domains, evaluation only.
    pub paired_oracle: Vec<OraclePair>,
}

impl DatasetManifest {
    pub fn check_invariants(&self) -> Result<()> {
        let src: HashSet<&str> = self.source_train.iter().map(|v| v.anatomy_id.as_str()).collect();
        let tgt: HashSet<&str> = self.target_train.iter().map(|v| v.anatomy_id.as_str()).collect();
        let orc: HashSet<&str> = self.paired_oracle.iter().map(|p| p.anatomy_id.as_str()).collect();
        if src.len() != self.source_train.len() || tgt.len() != self.target_train.len() || orc.len() != self.paired_oracle.len() {
            return Err(Error::InvalidArgument("duplicate anatomy within a split".into()));
        }
        if !src.is_disjoint(&tgt) || !src.is_disjoint(&orc) || !tgt.is_disjoint(&orc) {
            return Err(Error::InvalidArgument("anatomy shared between splits".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::volume::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load_volume(&self, root: &Path, r: &VolumeRef) -> Result<LabeledVolume> {
        LabeledVolume::load(&root.join(&r.path))
    }
}

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_ORACLE: u64 = 3;
const STREAM_RENDER: u64 = 4;

/// Generate the three splits and write every volume under `root`
/// (`source/`, `target/`, `oracle/`) plus `manifest.json`.
pub fn build_dataset(
    spec: &PhantomSpec,
    n_source: usize,
    n_target: usize,
    n_oracle: usize,
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_source == 0 || n_target == 0 || n_oracle == 0 {
        return Err(Error::InvalidArgument("split counts must be >= 1".into()));
    }
    let source_style = DomainStyle::source(spec.num_classes);
    let target_style = DomainStyle::target(spec.num_classes);
    let base = derive_seed(seed, spec.seed, 0);

    let write = |vol: &LabeledVolume, rel: PathBuf| -> Result<VolumeRef> {
        let sha256 = vol.save(&root.join(&rel))?;
        Ok(VolumeRef {
            id: vol.meta.id.clone(),
            anatomy_id: vol.meta.anatomy_id.clone().unwrap_or_default(),
            path: rel,
            seed: vol.meta.seed.unwrap_or_default(),
            sha256,
        })
    };
    let render = |anat: &LabeledVolume, style: &DomainStyle, stream: u64, i: u64| {
        render_modality(anat, style, derive_seed(base, STREAM_RENDER + stream, i))
    };

    let mut source_train = Vec::with_capacity(n_source);
    for i in 0..n_source as u64 {
        let anat = generate_anatomy(spec, derive_seed(base, STREAM_SOURCE, i))?;
        let v = render(&anat, &source_style, STREAM_SOURCE, i)?;
        source_train.push(write(&v, PathBuf::from(format!("source/{}.vol", v.meta.id)))?);
    }
    let mut target_train = Vec::with_capacity(n_target);
    for i in 0..n_target as u64 {
        let anat = generate_anatomy(spec, derive_seed(base, STREAM_TARGET, i))?;
        let v = render(&anat, &target_style, STREAM_TARGET, i)?;
        target_train.push(write(&v, PathBuf::from(format!("target/{}.vol", v.meta.id)))?);
    }
    let mut paired_oracle = Vec::with_capacity(n_oracle);
    for i in 0..n_oracle as u64 {
        let anat = generate_anatomy(spec, derive_seed(base, STREAM_ORACLE, i))?;
        let va = render(&anat, &source_style, STREAM_ORACLE, 2 * i)?;
        let vb = render(&anat, &target_style, STREAM_ORACLE, 2 * i + 1)?;
        paired_oracle.push(OraclePair {
            anatomy_id: anat.meta.id.clone(),
            a: write(&va, PathBuf::from(format!("oracle/{}.vol", va.meta.id)))?,
            b: write(&vb, PathBuf::from(format!("oracle/{}.vol", vb.meta.id)))?,
        });
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        seed,
        source_style,
        target_style,
        source_train,
        target_train,
        paired_oracle,
    };
    manifest.check_invariants()?;
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}
