//! U-Net segmentation: Dice + cross-entropy training with a poly schedule
//! and overlapping sliding-window inference.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, SegTarget, Var, IGNORE_LABEL};
use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{Error, Result};
use crate::kernels::softmax_channels;
use crate::nn::{Conv, ConvSpec, Dims};
use crate::optim::NesterovSgd;
use crate::phantom::{derive_seed, rng_from};
use crate::preprocess::{augment_with, AugmentConfig};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{sha256_hex, DomainTag, LabeledVolume};

const LEAK: f64 = 0.01;
const IN_EPS: f64 = 1e-5;
pub const POLY_EXPONENT: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub dims: Dims,
    /// `[D, H, W]`; `D` must be 1 for 2D networks.
    pub patch_size: [usize; 3],
    pub num_classes: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Resolution stages; each one after the first halves `H` and `W`.
    pub levels: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub include_background: bool,
    pub dice_smooth: f64,
    pub window_overlap: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            dims: Dims::Two,
            patch_size: [1, 64, 64],
            num_classes: 5,
            base_channels: 8,
            max_channels: 64,
            levels: 3,
            batch_size: 2,
            epochs: 30,
            iters_per_epoch: 50,
            lr0: 0.01,
            momentum: 0.99,
            weight_decay: 3e-5,
            grad_clip: 12.0,
            include_background: false,
            dice_smooth: 1e-5,
            window_overlap: 0.5,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl SegConfig {
    /// Training protocol values at full scale.
    pub fn full_scale() -> Self {
        SegConfig {
            dims: Dims::Three,
            patch_size: [48, 192, 192],
            base_channels: 32,
            max_channels: 320,
            levels: 5,
            epochs: 800,
            iters_per_epoch: 250,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("segmentation: {m}")));
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes {} outside [2, 255]", self.num_classes));
        }
        if self.epochs == 0 || self.iters_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, iters_per_epoch and batch_size must be >= 1".into());
        }
        if self.levels == 0 || self.base_channels == 0 {
            return bad("levels and base_channels must be >= 1".into());
        }
        if self.dims == Dims::Two && self.patch_size[0] != 1 {
            return bad(format!("2d networks need patch depth 1, got {:?}", self.patch_size));
        }
        let f = 1usize << (self.levels - 1);
        if self.patch_size.iter().any(|&p| p == 0) || self.patch_size[1] % f != 0 || self.patch_size[2] % f != 0 {
            return bad(format!("patch {:?} must be divisible by {f} in-plane", self.patch_size));
        }
        if !(0.0..1.0).contains(&self.window_overlap) {
            return bad("window_overlap must lie in [0, 1)".into());
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr0 must be > 0 and momentum in [0, 1)".into());
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels.max(self.base_channels))
    }
}

/// `lr0 · (1 − epoch/total)^0.9`.
pub fn poly_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 || epoch >= total {
        return 0.0;
    }
    lr0 * (1.0 - epoch as f64 / total as f64).powf(POLY_EXPONENT)
}

#[derive(Clone, Debug)]
struct Stage {
    a: Conv,
    b: Conv,
}

#[derive(Clone, Debug)]
pub struct UNet {
    enc: Vec<Stage>,
    up: Vec<Conv>,
    dec: Vec<Stage>,
    head: Conv,
}

impl UNet {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &SegConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims;
        let mut enc = Vec::new();
        let mut prev = 1;
        for l in 0..cfg.levels {
            let ch = cfg.channels(l);
            let stride = if l == 0 { 1 } else { 2 };
            enc.push(Stage {
                a: Conv::new(store, rng, &format!("enc{l}.a"), ConvSpec::new(d, prev, ch, 3, stride).slope(LEAK)),
                b: Conv::new(store, rng, &format!("enc{l}.b"), ConvSpec::new(d, ch, ch, 3, 1).slope(LEAK)),
            });
            prev = ch;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.levels - 1 {
            let (ch, deeper) = (cfg.channels(l), cfg.channels(l + 1));
            up.push(Conv::new(store, rng, &format!("up{l}"), ConvSpec::new(d, deeper, ch, 1, 1).slope(LEAK)));
            dec.push(Stage {
                a: Conv::new(store, rng, &format!("dec{l}.a"), ConvSpec::new(d, 2 * ch, ch, 3, 1).slope(LEAK)),
                b: Conv::new(store, rng, &format!("dec{l}.b"), ConvSpec::new(d, ch, ch, 3, 1).slope(LEAK)),
            });
        }
        let head = Conv::new(store, rng, "head", ConvSpec::new(d, cfg.channels(0), cfg.num_classes, 1, 1).slope(1.0));
        Ok(UNet { enc, up, dec, head })
    }

    fn block<T: Scalar>(g: &mut Graph<'_, T>, conv: &Conv, x: Var) -> Result<Var> {
        let h = conv.forward(g, x)?;
        let h = g.instance_norm(h, T::from_f64c(IN_EPS));
        Ok(g.leaky_relu(h, T::from_f64c(LEAK)))
    }

    /// Logits `[N, K, D, H, W]` for input `[N, 1, D, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for s in &self.enc {
            h = Self::block(g, &s.a, h)?;
            h = Self::block(g, &s.b, h)?;
            skips.push(h);
        }
        for l in (0..self.dec.len()).rev() {
            h = g.upsample(h, [1, 2, 2]);
            h = Self::block(g, &self.up[l], h)?;
            h = g.concat_channels(h, skips[l])?;
            h = Self::block(g, &self.dec[l].a, h)?;
            h = Self::block(g, &self.dec[l].b, h)?;
        }
        self.head.forward(g, h)
    }
}

/// Per-voxel class probabilities `[K, D, H, W]` and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub probs: Vec<f32>,
    pub labels: Vec<u8>,
}

impl PredictionMap {
    pub fn from_probs(shape: [usize; 3], num_classes: usize, probs: Vec<f32>) -> Self {
        let m: usize = shape.iter().product();
        let labels = (0..m)
            .map(|v| {
                let mut best = 0;
                for c in 1..num_classes {
                    if probs[c * m + v] > probs[best * m + v] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        PredictionMap {
            shape,
            num_classes,
            probs,
            labels,
        }
    }

    /// Max class probability per voxel.
    pub fn confidence(&self) -> Vec<f32> {
        let m = self.labels.len();
        (0..m)
            .map(|v| (0..self.num_classes).map(|c| self.probs[c * m + v]).fold(0.0, f32::max))
            .collect()
    }
}

/// Full-volume segmentation, implemented by trained networks and stubs.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn predict(&self, v: &LabeledVolume) -> Result<PredictionMap>;
    /// Identifier of the weights that produced a prediction.
    fn checkpoint_id(&self) -> String;
}

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub cfg: SegConfig,
    pub net: UNet,
    pub store: ParamStore<f32>,
}

pub const CHECKPOINT_KIND: &str = "segmentation";

impl SegmentationModel {
    pub fn new(cfg: &SegConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_from(derive_seed(cfg.seed, 21, 0));
        let net = UNet::new(&mut store, &mut rng, cfg)?;
        Ok(SegmentationModel {
            cfg: cfg.clone(),
            net,
            store,
        })
    }

    /// Logits for a batch of patches `[N, 1, pd, ph, pw]`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = x.shape();
        let p = self.cfg.patch_size;
        if s.len() != 5 || s[1] != 1 || s[2..] != p || s[0] == 0 {
            let n = s.first().copied().unwrap_or(1).max(1);
            return Err(Error::shape("seg_forward patch", &[n, 1, p[0], p[1], p[2]], s));
        }
        let mut g = Graph::new(&self.store);
        g.freeze(self.store.ids());
        let xv = g.input(x.clone());
        let out = self.net.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// Probabilities for the whole volume via overlapping windows with
    /// uniform averaging; volumes smaller than a patch are zero-padded.
    pub fn predict_with_overlap(&self, v: &LabeledVolume, overlap: f64) -> Result<PredictionMap> {
        v.validate()?;
        let k = self.cfg.num_classes;
        let p = self.cfg.patch_size;
        let orig = v.shape;
        let padded: [usize; 3] = std::array::from_fn(|a| orig[a].max(p[a]));
        let mut vol = vec![0f32; padded.iter().product()];
        for z in 0..orig[0] {
            for y in 0..orig[1] {
                let src = (z * orig[1] + y) * orig[2];
                let dst = (z * padded[1] + y) * padded[2];
                vol[dst..dst + orig[2]].copy_from_slice(&v.intensities[src..src + orig[2]]);
            }
        }
        let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(padded[a], p[a], overlap)).collect();
        let mut corners = Vec::new();
        for &z in &starts[0] {
            for &y in &starts[1] {
                for &x in &starts[2] {
                    corners.push([z, y, x]);
                }
            }
        }
        let pm: usize = p.iter().product();
        let m: usize = padded.iter().product();
        let mut acc = vec![0f32; k * m];
        let mut hits = vec![0u32; m];
        for chunk in corners.chunks(8) {
            let mut data = Vec::with_capacity(chunk.len() * pm);
            for c in chunk {
                for dz in 0..p[0] {
                    for dy in 0..p[1] {
                        let off = ((c[0] + dz) * padded[1] + c[1] + dy) * padded[2] + c[2];
                        data.extend_from_slice(&vol[off..off + p[2]]);
                    }
                }
            }
            let x = Tensor::new(vec![chunk.len(), 1, p[0], p[1], p[2]], data)?;
            let probs = softmax_channels(&self.forward(&x)?);
            for (i, c) in chunk.iter().enumerate() {
                for dz in 0..p[0] {
                    for dy in 0..p[1] {
                        for dx in 0..p[2] {
                            let pv = (dz * p[1] + dy) * p[2] + dx;
                            let gv = ((c[0] + dz) * padded[1] + c[1] + dy) * padded[2] + c[2] + dx;
                            hits[gv] += 1;
                            for cl in 0..k {
                                acc[cl * m + gv] += probs.data()[(i * k + cl) * pm + pv];
                            }
                        }
                    }
                }
            }
        }
        let n: usize = orig.iter().product();
        let mut probs = vec![0f32; k * n];
        for z in 0..orig[0] {
            for y in 0..orig[1] {
                for x in 0..orig[2] {
                    let gv = (z * padded[1] + y) * padded[2] + x;
                    let ov = (z * orig[1] + y) * orig[2] + x;
                    let h = hits[gv] as f32;
                    for cl in 0..k {
                        probs[cl * n + ov] = acc[cl * m + gv] / h;
                    }
                }
            }
        }
        Ok(PredictionMap::from_probs(orig, k, probs))
    }

    pub fn header(&self, iteration: u64, config_hash: &str, upstream: Vec<String>) -> CheckpointHeader {
        CheckpointHeader {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            iteration,
            seed: self.cfg.seed,
            config_hash: config_hash.into(),
            upstream,
            params: checkpoint::param_entries(&self.store),
        }
    }

    pub fn save(&self, path: &Path, config_hash: &str, upstream: Vec<String>) -> Result<String> {
        checkpoint::save(path, &self.header(0, config_hash, upstream), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = checkpoint::load(path)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::format(path, format!("expected a {CHECKPOINT_KIND} checkpoint, found '{}'", header.kind)));
        }
        let cfg: SegConfig = serde_json::from_value(header.config).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = SegmentationModel::new(&cfg)?;
        checkpoint::restore_into(&mut model.store, &store)?;
        Ok(model)
    }

    /// L2 distance between the parameters of two models of one layout.
    pub fn param_distance(&self, other: &SegmentationModel) -> f64 {
        self.store
            .ids()
            .zip(other.store.ids())
            .flat_map(|(a, b)| {
                self.store.get(a).data().iter().zip(other.store.get(b).data()).map(|(x, y)| ((x - y) as f64).powi(2))
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl Segmenter for SegmentationModel {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn predict(&self, v: &LabeledVolume) -> Result<PredictionMap> {
        self.predict_with_overlap(v, self.cfg.window_overlap)
    }

    fn checkpoint_id(&self) -> String {
        let mut bytes = Vec::with_capacity(4 * self.store.num_scalars());
        for id in self.store.ids() {
            for v in self.store.get(id).data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)[..16].to_string()
    }
}

/// Window origins covering `[0, extent)` with the given fractional overlap;
/// the last window is flush with the end.
pub fn window_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let step = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = extent - patch;
    let mut s: Vec<usize> = (0..last).step_by(step).collect();
    s.push(last);
    s
}

/// One training sample's origin, used to split the Stage-5 loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Synthetic,
    Pseudo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over iterations of the per-batch total.
    pub loss: f64,
    pub synthetic: f64,
    pub pseudo: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,synthetic,pseudo";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8e},{:.10e},{:.10e},{:.10e}",
            self.epoch, self.lr, self.loss, self.synthetic, self.pseudo
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(EpochRecord::CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Per-step loss terms, exposed for callers that audit additivity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub synthetic: f64,
    pub pseudo: f64,
}

pub struct SegRun {
    pub model: SegmentationModel,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepLoss>,
}

fn check_items(items: &[(&LabeledVolume, Source)], cfg: &SegConfig) -> Result<()> {
    for (v, _) in items {
        v.validate()?;
        if v.shape.iter().zip(&cfg.patch_size).any(|(s, p)| s < p) {
            return Err(Error::InvalidArgument(format!(
                "volume '{}' of shape {:?} is smaller than patch {:?}",
                v.id(),
                v.shape,
                cfg.patch_size
            )));
        }
        if let Some(&l) = v.labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= cfg.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "volume '{}' has label {l} outside [0, {})",
                v.id(),
                cfg.num_classes
            )));
        }
    }
    Ok(())
}

fn crop(v: &LabeledVolume, at: [usize; 3], p: [usize; 3]) -> LabeledVolume {
    let [_, h, w] = v.shape;
    let n: usize = p.iter().product();
    let mut ints = Vec::with_capacity(n);
    let mut labs = Vec::with_capacity(n);
    for z in 0..p[0] {
        for y in 0..p[1] {
            let off = ((at[0] + z) * h + at[1] + y) * w + at[2];
            ints.extend_from_slice(&v.intensities[off..off + p[2]]);
            labs.extend_from_slice(&v.labels[off..off + p[2]]);
        }
    }
    LabeledVolume {
        shape: p,
        spacing: v.spacing,
        intensities: ints,
        labels: labs,
        domain: v.domain,
        meta: Default::default(),
    }
}

/// Continue training `model` on `items` for `epochs` with a fresh poly
/// schedule. The loss of every batch is the sum of a synthetic and a pseudo
/// term, each `weight · Σ_i L_seg(i) / batch` over its own items, with
/// `term_weights = [synthetic, pseudo]`.
pub fn fit(
    model: &mut SegmentationModel,
    items: &[(&LabeledVolume, Source)],
    epochs: usize,
    term_weights: [f64; 2],
    seed: u64,
) -> Result<(Vec<EpochRecord>, Vec<StepLoss>)> {
    let cfg = model.cfg.clone();
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("no training volumes".into()));
    }
    if epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    check_items(items, &cfg)?;
    let mut rng = rng_from(seed);
    let ids: Vec<_> = model.store.ids().collect();
    let clip = (cfg.grad_clip > 0.0).then_some(cfg.grad_clip);
    let mut opt = NesterovSgd::new(ids, cfg.momentum, cfg.weight_decay, clip);
    let p = cfg.patch_size;
    let pm: usize = p.iter().product();
    let bs = cfg.batch_size;
    let mut history = Vec::with_capacity(epochs);
    let mut steps = Vec::with_capacity(epochs * cfg.iters_per_epoch);

    for epoch in 0..epochs {
        let lr = poly_lr(epoch, epochs, cfg.lr0);
        let mut rec = EpochRecord {
            epoch,
            lr,
            ..Default::default()
        };
        for _ in 0..cfg.iters_per_epoch {
            let mut data = Vec::with_capacity(bs * pm);
            let mut labels = Vec::with_capacity(bs * pm);
            let mut src = Vec::with_capacity(bs);
            for _ in 0..bs {
                let (v, s) = items[rng.random_range(0..items.len())];
                let at: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=v.shape[a] - p[a]));
                let patch = augment_with(&crop(v, at, p), &cfg.augment, &mut rng);
                data.extend_from_slice(&patch.intensities);
                labels.extend_from_slice(&patch.labels);
                src.push(s);
            }
            let x = Tensor::new(vec![bs, 1, p[0], p[1], p[2]], data)?;
            let w = |keep: Source| match keep {
                Source::Synthetic => term_weights[0],
                Source::Pseudo => term_weights[1],
            } / bs as f64;
            let weights = |keep: Source| src.iter().map(|&s| if s == keep { w(keep) } else { 0.0 }).collect();
            let target = |keep| SegTarget {
                labels: labels.clone(),
                weights: weights(keep),
                include_background: cfg.include_background,
                smooth: cfg.dice_smooth,
            };
            let (grads, step) = {
                let mut g = Graph::new(&model.store);
                let xv = g.input(x);
                let logits = model.net.forward(&mut g, xv)?;
                let (syn, per_syn) = g.seg_loss(logits, &target(Source::Synthetic))?;
                let (pse, per_pse) = g.seg_loss(logits, &target(Source::Pseudo))?;
                let total = g.add(syn, pse)?;
                let term = |per: &[f64], keep| per.iter().zip(&src).filter(|(_, &s)| s == keep).map(|(l, _)| l * w(keep)).sum::<f64>();
                let synthetic = term(&per_syn, Source::Synthetic);
                let pseudo = term(&per_pse, Source::Pseudo);
                let step = StepLoss {
                    total: synthetic + pseudo,
                    synthetic,
                    pseudo,
                };
                if !step.total.is_finite() || !g.value(total).all_finite() {
                    return Err(Error::NonFinite {
                        stage: "segmentation",
                        step: epoch,
                        detail: format!("{step:?}"),
                    });
                }
                (g.backward(total)?.into_params(), step)
            };
            opt.step(&mut model.store, &grads, lr);
            rec.loss += step.total;
            rec.synthetic += step.synthetic;
            rec.pseudo += step.pseudo;
            steps.push(step);
        }
        let n = cfg.iters_per_epoch as f64;
        rec.loss /= n;
        rec.synthetic /= n;
        rec.pseudo /= n;
        log::info!("seg epoch {epoch}: lr {lr:.5} loss {:.4}", rec.loss);
        history.push(rec);
    }
    Ok((history, steps))
}

/// Stage 3: train a fresh network on labeled (translated) volumes.
pub fn train_segmentation(pairs: &[LabeledVolume], cfg: &SegConfig) -> Result<SegRun> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let mut model = SegmentationModel::new(cfg)?;
    let items: Vec<_> = pairs.iter().map(|v| (v, Source::Synthetic)).collect();
    let (history, steps) = fit(&mut model, &items, cfg.epochs, [1.0, 1.0], derive_seed(cfg.seed, 22, 0))?;
    Ok(SegRun { model, history, steps })
}

/// Volume of class `k` one-hot probabilities from a label map; voxels
/// outside `[0, k)` fall back to background.
pub fn one_hot_prediction(shape: [usize; 3], labels: &[u8], k: usize) -> PredictionMap {
    let m = labels.len();
    let mut probs = vec![0f32; k * m];
    for (v, &l) in labels.iter().enumerate() {
        let c = if (l as usize) < k { l as usize } else { 0 };
        probs[c * m + v] = 1.0;
    }
    PredictionMap::from_probs(shape, k, probs)
}

/// Segmenter whose prediction is the ground truth of the volume itself.
#[derive(Clone, Copy, Debug)]
pub struct OracleSegmenter {
    pub num_classes: usize,
}

impl Segmenter for OracleSegmenter {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, v: &LabeledVolume) -> Result<PredictionMap> {
        Ok(one_hot_prediction(v.shape, &v.labels, self.num_classes))
    }

    fn checkpoint_id(&self) -> String {
        "oracle".into()
    }
}

/// Helper for tests and stubs: a domain tag sanity check on inputs.
pub fn require_domain(v: &LabeledVolume, allowed: &[DomainTag]) -> Result<()> {
    if allowed.contains(&v.domain) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "volume '{}' has domain {:?}, expected one of {allowed:?}",
            v.id(),
            v.domain
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_anatomy, render_modality, DomainStyle, PhantomSpec};
    use crate::preprocess::{preprocess, ZScoreScope};

    fn small_cfg() -> SegConfig {
        SegConfig {
            patch_size: [1, 32, 32],
            base_channels: 4,
            levels: 2,
            epochs: 3,
            iters_per_epoch: 4,
            augment: AugmentConfig::disabled(),
            ..Default::default()
        }
    }

    fn phantom(seed: u64, size: usize) -> LabeledVolume {
        let spec = PhantomSpec {
            grid_shape: [2, size, size],
            ..Default::default()
        };
        let a = generate_anatomy(&spec, seed).unwrap();
        let v = render_modality(&a, &DomainStyle::source(5), seed).unwrap();
        preprocess(&v, (size, size), ZScoreScope::Volume).unwrap().volume
    }

    #[test]
    fn poly_endpoints_and_monotone() {
        assert_eq!(poly_lr(0, 30, 0.01), 0.01);
        assert_eq!(poly_lr(30, 30, 0.01), 0.0);
        let lrs: Vec<f64> = (0..=30).map(|e| poly_lr(e, 30, 0.01)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn forward_shape_and_finiteness() {
        let cfg = SegConfig {
            augment: AugmentConfig::disabled(),
            ..Default::default()
        };
        let model = SegmentationModel::new(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 1, 64, 64]);
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 5, 1, 64, 64]);
        assert!(y.all_finite());
        assert_eq!(model.forward(&x).unwrap(), y);
        assert!(model.forward(&Tensor::zeros(&[1, 1, 1, 32, 64])).is_err());
    }

    #[test]
    fn three_d_variant_runs() {
        let cfg = SegConfig {
            dims: Dims::Three,
            patch_size: [4, 16, 16],
            base_channels: 2,
            levels: 2,
            ..Default::default()
        };
        let model = SegmentationModel::new(&cfg).unwrap();
        let y = model.forward(&Tensor::zeros(&[1, 1, 4, 16, 16])).unwrap();
        assert_eq!(y.shape(), &[1, 5, 4, 16, 16]);
    }

    #[test]
    fn window_starts_cover_extent() {
        assert_eq!(window_starts(64, 64, 0.5), vec![0]);
        assert_eq!(window_starts(10, 16, 0.5), vec![0]);
        assert_eq!(window_starts(40, 16, 0.5), vec![0, 8, 16, 24]);
        assert_eq!(window_starts(8, 1, 0.5), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn single_window_prediction_matches_forward() {
        let cfg = small_cfg();
        let model = SegmentationModel::new(&cfg).unwrap();
        let v = phantom(1, 32);
        let pred = model.predict(&v).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 32, 32], v.slice_intensities(0).to_vec()).unwrap();
        let probs = softmax_channels(&model.forward(&x).unwrap());
        let m = v.len();
        for c in 0..5 {
            for i in 0..1024 {
                assert_eq!(pred.probs[c * m + i], probs.data()[c * 1024 + i]);
            }
        }
        for i in 0..m {
            let s: f32 = (0..5).map(|c| pred.probs[c * m + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(pred.labels.len(), v.len());
    }

    #[test]
    fn small_volumes_are_padded() {
        let cfg = small_cfg();
        let model = SegmentationModel::new(&cfg).unwrap();
        let v = LabeledVolume::new([2, 10, 12], [1.0; 3], vec![0.3; 240], vec![0; 240], DomainTag::B).unwrap();
        let p = model.predict(&v).unwrap();
        assert_eq!(p.shape, [2, 10, 12]);
        assert_eq!(p.labels.len(), 240);
    }

    #[test]
    fn training_history_and_determinism() {
        let cfg = small_cfg();
        let vols = vec![phantom(2, 32), phantom(3, 32)];
        let a = train_segmentation(&vols, &cfg).unwrap();
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.steps.len(), 12);
        let b = train_segmentation(&vols, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.checkpoint_id(), b.model.checkpoint_id());
        assert!(a.steps.iter().all(|s| s.pseudo == 0.0 && s.total == s.synthetic));
    }

    #[test]
    fn rejects_bad_labels_and_tiny_volumes() {
        let cfg = small_cfg();
        let mut v = phantom(4, 32);
        v.labels[3] = 9;
        assert!(train_segmentation(&[v], &cfg).is_err());
        let tiny = LabeledVolume::new([1, 8, 8], [1.0; 3], vec![0.0; 64], vec![0; 64], DomainTag::A).unwrap();
        assert!(train_segmentation(&[tiny], &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_prediction_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let run = train_segmentation(&[phantom(5, 32)], &cfg).unwrap();
        let path = dir.path().join("seg.ckpt");
        run.model.save(&path, "h", vec![]).unwrap();
        let back = SegmentationModel::load(&path).unwrap();
        let v = phantom(6, 32);
        assert_eq!(back.predict(&v).unwrap(), run.model.predict(&v).unwrap());
        assert_eq!(back.checkpoint_id(), run.model.checkpoint_id());
    }
}
