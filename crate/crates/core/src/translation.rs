//! Disentangled unpaired image translation.
//!
//! A shared content encoder `E_C`, one style encoder per domain, a shared
//! decoder `G(c, s)`, two image discriminators and a content discriminator.
//! Training alternates one discriminator step with one encoder/decoder step.
//!
//! The style code is a globally pooled vector broadcast over the code grid,
//! so it carries appearance only and the content map keeps the geometry.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Dims, ResBlock};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::rng_from;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{DomainTag, LabeledVolume};

const LEAK: f64 = 0.2;
const IN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    #[default]
    LeastSquares,
    /// Cross-entropy form; discriminators emit logits.
    Log,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecNorm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslationConfig {
    /// `[H, W]` of input slices.
    pub slice_size: [usize; 2],
    pub content_channels: usize,
    pub style_channels: usize,
    /// Stride-2 stages in the encoders; the code grid is `slice_size / 2^n`.
    pub downsamples: usize,
    pub width: usize,
    pub res_blocks: usize,
    pub disc_width: usize,
    pub loss_form: LossForm,
    pub rec_norm: RecNorm,
    pub w_rec: f64,
    pub w_adv: f64,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        TranslationConfig {
            slice_size: [64, 64],
            content_channels: 32,
            style_channels: 32,
            downsamples: 2,
            width: 16,
            res_blocks: 1,
            disc_width: 16,
            loss_form: LossForm::LeastSquares,
            rec_norm: RecNorm::L1,
            w_rec: 1.0,
            w_adv: 1.0,
            adam: AdamConfig::default(),
            iterations: 1000,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("translation: {m}")));
        if !(self.w_rec >= 0.0 && self.w_adv >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be >= 1".into());
        }
        if self.content_channels == 0 || self.style_channels == 0 || self.width == 0 || self.disc_width == 0 {
            return bad("channel counts must be >= 1".into());
        }
        let f = 1usize << self.downsamples;
        if self.slice_size.iter().any(|&s| s == 0 || s % f != 0 || s / f < 2) {
            return bad(format!(
                "slice_size {:?} must be divisible by {f} with a code grid of at least 2",
                self.slice_size
            ));
        }
        Ok(())
    }

    /// `[C, H, W]` of the content code.
    pub fn content_shape(&self) -> [usize; 3] {
        let f = 1 << self.downsamples;
        [self.content_channels, self.slice_size[0] / f, self.slice_size[1] / f]
    }

    pub fn style_shape(&self) -> [usize; 3] {
        let [_, h, w] = self.content_shape();
        [self.style_channels, h, w]
    }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64c(v)
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    stem: Conv,
    down: Vec<Conv>,
    res: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct StyleEncoder {
    stem: Conv,
    down: Vec<Conv>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct Decoder {
    fuse: Conv,
    res: Vec<ResBlock>,
    up: Vec<Conv>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Critic {
    layers: Vec<Conv>,
    out: Conv,
}

impl Critic {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.layers {
            h = c.forward(g, h)?;
            h = g.leaky_relu(h, t(LEAK));
        }
        self.out.forward(g, h)
    }

    fn params(&self) -> Vec<ParamId> {
        self.layers.iter().chain([&self.out]).flat_map(Conv::params).collect()
    }
}

/// Parameter ids of the seven sub-networks, laid out in one store.
#[derive(Clone, Debug)]
pub struct TranslationNets {
    content: ContentEncoder,
    style_a: StyleEncoder,
    style_b: StyleEncoder,
    decoder: Decoder,
    disc_a: Critic,
    disc_b: Critic,
    disc_c: Critic,
    code_extent: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Net {
    ContentEncoder,
    StyleA,
    StyleB,
    Decoder,
    DiscA,
    DiscB,
    DiscC,
}

impl TranslationNets {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &TranslationConfig) -> Result<Self> {
        cfg.validate()?;
        let d = Dims::Two;
        let w = cfg.width;
        let cc = cfg.content_channels;
        let stage = |i: usize, last: usize| if i + 1 == cfg.downsamples { last } else { w << (i + 1) };

        let stem = Conv::new(store, rng, "enc_c.stem", ConvSpec::new(d, 1, w, 3, 1));
        let mut down = Vec::new();
        let mut ch = w;
        for i in 0..cfg.downsamples {
            let next = stage(i, cc);
            down.push(Conv::new(store, rng, &format!("enc_c.down{i}"), ConvSpec::new(d, ch, next, 3, 2)));
            ch = next;
        }
        if cfg.downsamples == 0 {
            down.push(Conv::new(store, rng, "enc_c.proj", ConvSpec::new(d, w, cc, 1, 1)));
        }
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(store, rng, &format!("enc_c.res{i}"), d, cc, true, 0.0))
            .collect();
        let content = ContentEncoder { stem, down, res };

        let mut style = |name: &str| {
            let stem = Conv::new(store, rng, &format!("{name}.stem"), ConvSpec::new(d, 1, w, 3, 1).slope(LEAK));
            let mut down = Vec::new();
            let mut ch = w;
            for i in 0..cfg.downsamples {
                let next = (w << (i + 1)).min(4 * w);
                down.push(Conv::new(store, rng, &format!("{name}.down{i}"), ConvSpec::new(d, ch, next, 3, 2).slope(LEAK)));
                ch = next;
            }
            let head = Conv::new(store, rng, &format!("{name}.head"), ConvSpec::new(d, ch, cfg.style_channels, 1, 1));
            StyleEncoder { stem, down, head }
        };
        let style_a = style("enc_s_a");
        let style_b = style("enc_s_b");

        let fuse = Conv::new(store, rng, "dec.fuse", ConvSpec::new(d, cc + cfg.style_channels, cc, 3, 1));
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(store, rng, &format!("dec.res{i}"), d, cc, false, 0.0))
            .collect();
        let mut up = Vec::new();
        let mut ch = cc;
        for i in 0..cfg.downsamples {
            let next = (ch / 2).max(w);
            up.push(Conv::new(store, rng, &format!("dec.up{i}"), ConvSpec::new(d, ch, next, 3, 1)));
            ch = next;
        }
        let out = Conv::new(store, rng, "dec.out", ConvSpec::new(d, ch, 1, 3, 1).slope(1.0));
        let decoder = Decoder { fuse, res, up, out };

        let dw = cfg.disc_width;
        let mut critic = |name: &str, in_ch: usize, strides: &[usize]| {
            let mut layers = Vec::new();
            let mut ch = in_ch;
            for (i, &s) in strides.iter().enumerate() {
                let next = dw << i.min(1);
                layers.push(Conv::new(store, rng, &format!("{name}.l{i}"), ConvSpec::new(d, ch, next, 3, s).slope(LEAK)));
                ch = next;
            }
            let out = Conv::new(store, rng, &format!("{name}.out"), ConvSpec::new(d, ch, 1, 3, 1).slope(1.0));
            Critic { layers, out }
        };
        let img_strides: Vec<usize> = vec![2; (cfg.downsamples + 1).min(3)];
        let disc_a = critic("disc_a", 1, &img_strides);
        let disc_b = critic("disc_b", 1, &img_strides);
        let code_strides = if cfg.content_shape()[1] >= 4 { vec![1, 2] } else { vec![1, 1] };
        let disc_c = critic("disc_c", cc, &code_strides);
        let [_, h, wd] = cfg.content_shape();
        Ok(TranslationNets {
            content,
            style_a,
            style_b,
            decoder,
            disc_a,
            disc_b,
            disc_c,
            code_extent: [1, h, wd],
        })
    }

    pub fn params_of(&self, net: Net) -> Vec<ParamId> {
        fn convs(v: &[Conv]) -> Vec<ParamId> {
            v.iter().flat_map(Conv::params).collect()
        }
        fn res(v: &[ResBlock]) -> Vec<ParamId> {
            v.iter().flat_map(ResBlock::params).collect()
        }
        let style = |s: &StyleEncoder| {
            let mut p = s.stem.params();
            p.extend(convs(&s.down));
            p.extend(s.head.params());
            p
        };
        match net {
            Net::ContentEncoder => {
                let mut p = self.content.stem.params();
                p.extend(convs(&self.content.down));
                p.extend(res(&self.content.res));
                p
            }
            Net::StyleA => style(&self.style_a),
            Net::StyleB => style(&self.style_b),
            Net::Decoder => {
                let mut p = self.decoder.fuse.params();
                p.extend(res(&self.decoder.res));
                p.extend(convs(&self.decoder.up));
                p.extend(self.decoder.out.params());
                p
            }
            Net::DiscA => self.disc_a.params(),
            Net::DiscB => self.disc_b.params(),
            Net::DiscC => self.disc_c.params(),
        }
    }

    /// Encoders and decoder.
    pub fn generator_params(&self) -> Vec<ParamId> {
        [Net::ContentEncoder, Net::StyleA, Net::StyleB, Net::Decoder]
            .into_iter()
            .flat_map(|n| self.params_of(n))
            .collect()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        [Net::DiscA, Net::DiscB, Net::DiscC]
            .into_iter()
            .flat_map(|n| self.params_of(n))
            .collect()
    }

    pub fn encode_content<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let e = &self.content;
        let mut h = e.stem.forward(g, x)?;
        h = g.instance_norm(h, t(IN_EPS));
        h = g.relu(h);
        for c in &e.down {
            h = c.forward(g, h)?;
            h = g.instance_norm(h, t(IN_EPS));
            h = g.relu(h);
        }
        for r in &e.res {
            h = r.forward(g, h)?;
        }
        Ok(h)
    }

    pub fn encode_style<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, domain: DomainTag) -> Result<Var> {
        let e = match domain {
            DomainTag::A => &self.style_a,
            DomainTag::B => &self.style_b,
            other => {
                return Err(Error::InvalidArgument(format!("no style encoder for domain {other:?}")));
            }
        };
        let mut h = e.stem.forward(g, x)?;
        h = g.leaky_relu(h, t(LEAK));
        for c in &e.down {
            h = c.forward(g, h)?;
            h = g.leaky_relu(h, t(LEAK));
        }
        let pooled = g.spatial_mean(h);
        let s = e.head.forward(g, pooled)?;
        g.expand_spatial(s, self.code_extent)
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, c: Var, s: Var) -> Result<Var> {
        let dec = &self.decoder;
        let mut h = g.concat_channels(c, s)?;
        h = dec.fuse.forward(g, h)?;
        h = g.relu(h);
        for r in &dec.res {
            h = r.forward(g, h)?;
        }
        for u in &dec.up {
            h = g.upsample(h, [1, 2, 2]);
            h = u.forward(g, h)?;
            h = g.relu(h);
        }
        dec.out.forward(g, h)
    }

    pub fn discriminate<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, net: Net) -> Result<Var> {
        match net {
            Net::DiscA => self.disc_a.forward(g, x),
            Net::DiscB => self.disc_b.forward(g, x),
            Net::DiscC => self.disc_c.forward(g, x),
            other => Err(Error::InvalidArgument(format!("{other:?} is not a discriminator"))),
        }
    }
}

/// Per-pixel mean of `|x - r|` (L1) or `(x - r)^2` (L2).
pub fn reconstruction_term<T: Scalar>(g: &mut Graph<'_, T>, x: Var, r: Var, norm: RecNorm) -> Result<Var> {
    let diff = g.sub(x, r)?;
    let e = match norm {
        RecNorm::L1 => g.abs(diff),
        RecNorm::L2 => g.square(diff),
    };
    Ok(g.mean_all(e))
}

fn mean_sq_offset<T: Scalar>(g: &mut Graph<'_, T>, s: Var, target: f64) -> Var {
    let shifted = g.add_scalar(s, t(-target));
    let sq = g.square(shifted);
    g.mean_all(sq)
}

/// `mean softplus(sign · s)`, i.e. `-mean log σ(-sign · s)`.
fn mean_softplus<T: Scalar>(g: &mut Graph<'_, T>, s: Var, sign: f64) -> Var {
    let z = g.scale(s, t(sign));
    let sp = g.softplus(z);
    g.mean_all(sp)
}

/// Discriminator objective given scores on real and fake samples.
pub fn disc_term<T: Scalar>(g: &mut Graph<'_, T>, real: Var, fake: Var, form: LossForm) -> Result<Var> {
    let (r, f) = match form {
        LossForm::LeastSquares => (mean_sq_offset(g, real, 1.0), mean_sq_offset(g, fake, 0.0)),
        LossForm::Log => (mean_softplus(g, real, -1.0), mean_softplus(g, fake, 1.0)),
    };
    g.add(r, f)
}

/// Generator objective given scores on fakes. The log form is the
/// written `E[log(1 - D(fake))]`.
pub fn gen_term<T: Scalar>(g: &mut Graph<'_, T>, fake: Var, form: LossForm) -> Var {
    match form {
        LossForm::LeastSquares => mean_sq_offset(g, fake, 1.0),
        LossForm::Log => {
            let m = mean_softplus(g, fake, 1.0);
            g.scale(m, t(-1.0))
        }
    }
}

/// `(gen_term, disc_term)` for one image domain from raw scores.
pub fn adversarial_loss_image<T: Scalar>(
    g: &mut Graph<'_, T>,
    real_scores: Var,
    fake_scores: Var,
    form: LossForm,
) -> Result<(Var, Var)> {
    let gen = gen_term(g, fake_scores, form);
    let disc = disc_term(g, real_scores, fake_scores, form)?;
    Ok((gen, disc))
}

/// `(enc_term, disc_term)` for the content discriminator. `D_c` treats
/// domain-B codes as real; the encoder term flips both labels.
pub fn adversarial_loss_content<T: Scalar>(
    g: &mut Graph<'_, T>,
    scores_a: Var,
    scores_b: Var,
    form: LossForm,
) -> Result<(Var, Var)> {
    let enc = disc_term(g, scores_a, scores_b, form)?;
    let disc = disc_term(g, scores_b, scores_a, form)?;
    Ok((enc, disc))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvTerm {
    pub gen: f64,
    pub disc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub adv_a: AdvTerm,
    pub adv_b: AdvTerm,
    /// `gen` holds the encoder's term.
    pub adv_c: AdvTerm,
    pub total_gen: f64,
    pub total_disc: f64,
}

impl LossBreakdown {
    pub fn from_terms(rec: f64, adv_a: AdvTerm, adv_b: AdvTerm, adv_c: AdvTerm, w_rec: f64, w_adv: f64) -> Self {
        LossBreakdown {
            rec,
            adv_a,
            adv_b,
            adv_c,
            total_gen: w_adv * (adv_a.gen + adv_b.gen + adv_c.gen) + w_rec * rec,
            total_disc: w_adv * (adv_a.disc + adv_b.disc + adv_c.disc),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }

    fn fields(&self) -> [f64; 9] {
        [
            self.rec,
            self.adv_a.gen,
            self.adv_a.disc,
            self.adv_b.gen,
            self.adv_b.disc,
            self.adv_c.gen,
            self.adv_c.disc,
            self.total_gen,
            self.total_disc,
        ]
    }

    pub const CSV_HEADER: &'static str =
        "iteration,rec,adv_a_gen,adv_a_disc,adv_b_gen,adv_b_disc,adv_c_enc,adv_c_disc,total_gen,total_disc";

    pub fn csv_row(&self, iteration: usize) -> String {
        let mut s = iteration.to_string();
        for v in self.fields() {
            s.push_str(&format!(",{v:.8e}"));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Discriminator terms only, on detached fakes and codes.
    Discriminator,
    /// Generator terms only.
    Generator,
    Both,
}

/// Graph handles of one forward pass; absent terms are `None`.
#[derive(Clone, Debug, Default)]
pub struct LossVars {
    pub rec: Option<Var>,
    pub gen_a: Option<Var>,
    pub gen_b: Option<Var>,
    pub enc_c: Option<Var>,
    pub disc_a: Option<Var>,
    pub disc_b: Option<Var>,
    pub disc_c: Option<Var>,
    pub total_gen: Option<Var>,
    pub total_disc: Option<Var>,
}

fn sum3<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var, c: Var, w: f64) -> Result<Var> {
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    Ok(g.scale(abc, t(w)))
}

/// Build the translation losses for image batches `xa`, `xb` (`[N,1,1,H,W]`).
pub fn build_losses<T: Scalar>(
    g: &mut Graph<'_, T>,
    nets: &TranslationNets,
    cfg: &TranslationConfig,
    xa: Var,
    xb: Var,
    phase: Phase,
) -> Result<LossVars> {
    if g.shape(xa)[0] == 0 || g.shape(xb)[0] == 0 {
        return Err(Error::InvalidArgument("empty translation batch".into()));
    }
    let form = cfg.loss_form;
    let ca = nets.encode_content(g, xa)?;
    let cb = nets.encode_content(g, xb)?;
    let sa = nets.encode_style(g, xa, DomainTag::A)?;
    let sb = nets.encode_style(g, xb, DomainTag::B)?;
    let x_ab = nets.decode(g, ca, sb)?;
    let x_ba = nets.decode(g, cb, sa)?;
    let mut out = LossVars::default();

    if phase != Phase::Generator {
        let (f_ba, f_ab) = (g.detach(x_ba), g.detach(x_ab));
        let (dca, dcb) = (g.detach(ca), g.detach(cb));
        let real_a = nets.discriminate(g, xa, Net::DiscA)?;
        let fake_a = nets.discriminate(g, f_ba, Net::DiscA)?;
        let real_b = nets.discriminate(g, xb, Net::DiscB)?;
        let fake_b = nets.discriminate(g, f_ab, Net::DiscB)?;
        let code_a = nets.discriminate(g, dca, Net::DiscC)?;
        let code_b = nets.discriminate(g, dcb, Net::DiscC)?;
        let da = disc_term(g, real_a, fake_a, form)?;
        let db = disc_term(g, real_b, fake_b, form)?;
        let dc = disc_term(g, code_b, code_a, form)?;
        out.total_disc = Some(sum3(g, da, db, dc, cfg.w_adv)?);
        (out.disc_a, out.disc_b, out.disc_c) = (Some(da), Some(db), Some(dc));
    }
    if phase != Phase::Discriminator {
        let r_a = nets.decode(g, ca, sa)?;
        let r_b = nets.decode(g, cb, sb)?;
        let la = reconstruction_term(g, xa, r_a, cfg.rec_norm)?;
        let lb = reconstruction_term(g, xb, r_b, cfg.rec_norm)?;
        let rec = g.add(la, lb)?;
        let fake_a = nets.discriminate(g, x_ba, Net::DiscA)?;
        let fake_b = nets.discriminate(g, x_ab, Net::DiscB)?;
        let code_a = nets.discriminate(g, ca, Net::DiscC)?;
        let code_b = nets.discriminate(g, cb, Net::DiscC)?;
        let ga = gen_term(g, fake_a, form);
        let gb = gen_term(g, fake_b, form);
        let ec = disc_term(g, code_a, code_b, form)?;
        let adv = sum3(g, ga, gb, ec, cfg.w_adv)?;
        let wr = g.scale(rec, t(cfg.w_rec));
        out.total_gen = Some(g.add(adv, wr)?);
        (out.rec, out.gen_a, out.gen_b, out.enc_c) = (Some(rec), Some(ga), Some(gb), Some(ec));
    }
    Ok(out)
}

fn read<T: Scalar>(g: &Graph<'_, T>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).item().as_f64())
}

/// Evaluate every term in one graph with no parameter updates.
pub fn total_loss<T: Scalar>(
    store: &ParamStore<T>,
    nets: &TranslationNets,
    cfg: &TranslationConfig,
    xa: &Tensor<T>,
    xb: &Tensor<T>,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(store);
    g.freeze(store.ids());
    let (a, b) = (g.input(xa.clone()), g.input(xb.clone()));
    let v = build_losses(&mut g, nets, cfg, a, b, Phase::Both)?;
    Ok(LossBreakdown::from_terms(
        read(&g, v.rec),
        AdvTerm { gen: read(&g, v.gen_a), disc: read(&g, v.disc_a) },
        AdvTerm { gen: read(&g, v.gen_b), disc: read(&g, v.disc_b) },
        AdvTerm { gen: read(&g, v.enc_c), disc: read(&g, v.disc_c) },
        cfg.w_rec,
        cfg.w_adv,
    ))
}

/// Inference interface used by volume translation, so stub models can
/// stand in for a trained network.
pub trait Translator {
    /// `x`: `[N,1,1,H,W]`.
    fn encode_content(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn encode_style(&self, x: &Tensor<f32>, domain: DomainTag) -> Result<Tensor<f32>>;
    /// A style batch of one is broadcast over the content batch.
    fn decode(&self, c: &Tensor<f32>, s: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// `E_C` and `E_S` return the image itself and `G` returns the content.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn encode_content(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }

    fn encode_style(&self, x: &Tensor<f32>, _: DomainTag) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }

    fn decode(&self, c: &Tensor<f32>, _: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(c.clone())
    }
}

#[derive(Clone, Debug)]
pub struct TranslationModel {
    pub cfg: TranslationConfig,
    pub nets: TranslationNets,
    pub store: ParamStore<f32>,
    pub iteration: u64,
}

pub const CHECKPOINT_KIND: &str = "translation";

impl TranslationModel {
    pub fn new(cfg: &TranslationConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_from(cfg.seed);
        let nets = TranslationNets::new(&mut store, &mut rng, cfg)?;
        Ok(TranslationModel {
            cfg: cfg.clone(),
            nets,
            store,
            iteration: 0,
        })
    }

    fn check_image(&self, x: &Tensor<f32>, what: &'static str) -> Result<()> {
        let [h, w] = self.cfg.slice_size;
        let s = x.shape();
        if s.len() != 5 || s[1] != 1 || s[2] != 1 || s[3] != h || s[4] != w || s[0] == 0 {
            return Err(Error::shape(what, &[s.first().copied().unwrap_or(1).max(1), 1, 1, h, w], s));
        }
        Ok(())
    }

    fn check_code(&self, x: &Tensor<f32>, shape: [usize; 3], what: &'static str) -> Result<()> {
        let s = x.shape();
        let n = s.first().copied().unwrap_or(1).max(1);
        if s.len() != 5 || s[1..] != [shape[0], 1, shape[1], shape[2]] {
            return Err(Error::shape(what, &[n, shape[0], 1, shape[1], shape[2]], s));
        }
        Ok(())
    }

    fn eval(&self, f: impl FnOnce(&mut Graph<'_, f32>) -> Result<Var>) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.store);
        g.freeze(self.store.ids());
        let v = f(&mut g)?;
        Ok(g.value(v).clone())
    }

    pub fn save(&self, path: &Path, config_hash: &str, upstream: Vec<String>) -> Result<String> {
        let header = CheckpointHeader {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            iteration: self.iteration,
            seed: self.cfg.seed,
            config_hash: config_hash.into(),
            upstream,
            params: checkpoint::param_entries(&self.store),
        };
        checkpoint::save(path, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = checkpoint::load(path)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::format(path, format!("expected a {CHECKPOINT_KIND} checkpoint, found '{}'", header.kind)));
        }
        let cfg: TranslationConfig =
            serde_json::from_value(header.config).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = TranslationModel::new(&cfg)?;
        checkpoint::restore_into(&mut model.store, &store)?;
        model.iteration = header.iteration;
        Ok(model)
    }
}

impl Translator for TranslationModel {
    fn encode_content(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_image(x, "encode_content input")?;
        self.eval(|g| {
            let v = g.input(x.clone());
            self.nets.encode_content(g, v)
        })
    }

    fn encode_style(&self, x: &Tensor<f32>, domain: DomainTag) -> Result<Tensor<f32>> {
        self.check_image(x, "encode_style input")?;
        self.eval(|g| {
            let v = g.input(x.clone());
            self.nets.encode_style(g, v, domain)
        })
    }

    fn decode(&self, c: &Tensor<f32>, s: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_code(c, self.cfg.content_shape(), "decode content code")?;
        self.check_code(s, self.cfg.style_shape(), "decode style code")?;
        let n = c.shape()[0];
        let s = if s.shape()[0] == n {
            s.clone()
        } else if s.shape()[0] == 1 {
            Tensor::stack_batch(&vec![s.clone(); n])?
        } else {
            return Err(Error::shape("decode style batch", &[n], &s.shape()[..1]));
        };
        self.eval(|g| {
            let (cv, sv) = (g.input(c.clone()), g.input(s));
            self.nets.decode(g, cv, sv)
        })
    }
}

/// Slices of a set of volumes, sampled uniformly for training batches.
#[derive(Clone, Debug)]
pub struct SliceBank {
    pub h: usize,
    pub w: usize,
    slices: Vec<Vec<f32>>,
}

impl SliceBank {
    pub fn from_volumes(vols: &[LabeledVolume]) -> Result<Self> {
        let first = vols
            .first()
            .ok_or_else(|| Error::InvalidArgument("no volumes for slice bank".into()))?;
        let [_, h, w] = first.shape;
        let mut slices = Vec::new();
        for v in vols {
            if v.shape[1] != h || v.shape[2] != w {
                return Err(Error::shape("slice size", &[h, w], &v.shape[1..]));
            }
            slices.extend((0..v.depth()).map(|z| v.slice_intensities(z).to_vec()));
        }
        if slices.is_empty() {
            return Err(Error::InvalidArgument("volumes have no slices".into()));
        }
        Ok(SliceBank { h, w, slices })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.h * self.w);
        for &i in idx {
            data.extend(self.slices[i].iter().map(|&v| T::from_f64c(v as f64)));
        }
        Tensor::new(vec![idx.len(), 1, 1, self.h, self.w], data).expect("batch shape")
    }

    pub fn sample<T: Scalar>(&self, n: usize, rng: &mut impl Rng) -> Tensor<T> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.slices.len())).collect();
        self.batch(&idx)
    }
}

pub struct TranslationRun {
    pub model: TranslationModel,
    pub history: Vec<LossBreakdown>,
    pub d_steps: usize,
    pub g_steps: usize,
}

impl TranslationRun {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(LossBreakdown::CSV_HEADER);
        s.push('\n');
        for (i, b) in self.history.iter().enumerate() {
            s.push_str(&b.csv_row(i));
            s.push('\n');
        }
        s
    }
}

fn grads_for(grads: HashMap<ParamId, Tensor<f32>>, keep: &[ParamId]) -> HashMap<ParamId, Tensor<f32>> {
    let mut grads = grads;
    keep.iter().filter_map(|id| grads.remove_entry(id)).collect()
}

/// Alternating min-max training on preprocessed domain-A and domain-B volumes.
pub fn train_translation(
    source: &[LabeledVolume],
    target: &[LabeledVolume],
    cfg: &TranslationConfig,
) -> Result<TranslationRun> {
    cfg.validate()?;
    let bank_a = SliceBank::from_volumes(source)?;
    let bank_b = SliceBank::from_volumes(target)?;
    for bank in [&bank_a, &bank_b] {
        if [bank.h, bank.w] != cfg.slice_size {
            return Err(Error::shape("translation slice size", &cfg.slice_size, &[bank.h, bank.w]));
        }
    }
    let mut model = TranslationModel::new(cfg)?;
    let gen_ids = model.nets.generator_params();
    let disc_ids = model.nets.discriminator_params();
    let mut opt_g = Adam::new(cfg.adam, gen_ids.clone());
    let mut opt_d = Adam::new(cfg.adam, disc_ids.clone());
    let mut rng = rng_from(crate::phantom::derive_seed(cfg.seed, 11, 0));
    let mut history = Vec::with_capacity(cfg.iterations);
    let (mut d_steps, mut g_steps) = (0, 0);

    for it in 0..cfg.iterations {
        let xa: Tensor<f32> = bank_a.sample(cfg.batch_size, &mut rng);
        let xb: Tensor<f32> = bank_b.sample(cfg.batch_size, &mut rng);

        let (disc, d_grads) = {
            let mut g = Graph::new(&model.store);
            g.freeze(gen_ids.iter().copied());
            let (a, b) = (g.input(xa.clone()), g.input(xb.clone()));
            let v = build_losses(&mut g, &model.nets, cfg, a, b, Phase::Discriminator)?;
            let disc = [read(&g, v.disc_a), read(&g, v.disc_b), read(&g, v.disc_c)];
            (disc, g.backward(v.total_disc.expect("disc phase"))?.into_params())
        };
        let (gen, g_grads) = {
            // the discriminator step below must not leak into this forward pass
            let mut g = Graph::new(&model.store);
            g.freeze(disc_ids.iter().copied());
            let (a, b) = (g.input(xa), g.input(xb));
            let v = build_losses(&mut g, &model.nets, cfg, a, b, Phase::Generator)?;
            let gen = [read(&g, v.rec), read(&g, v.gen_a), read(&g, v.gen_b), read(&g, v.enc_c)];
            (gen, g.backward(v.total_gen.expect("gen phase"))?.into_params())
        };
        let breakdown = LossBreakdown::from_terms(
            gen[0],
            AdvTerm { gen: gen[1], disc: disc[0] },
            AdvTerm { gen: gen[2], disc: disc[1] },
            AdvTerm { gen: gen[3], disc: disc[2] },
            cfg.w_rec,
            cfg.w_adv,
        );
        if !breakdown.is_finite() {
            return Err(Error::NonFinite {
                stage: "translation",
                step: it,
                detail: format!("{breakdown:?}"),
            });
        }
        opt_d.step(&mut model.store, &grads_for(d_grads, &disc_ids));
        d_steps += 1;
        opt_g.step(&mut model.store, &grads_for(g_grads, &gen_ids));
        g_steps += 1;
        if it % 100 == 0 || it + 1 == cfg.iterations {
            log::info!(
                "translation it {it}: rec {:.4} gen {:.4} disc {:.4}",
                breakdown.rec,
                breakdown.total_gen,
                breakdown.total_disc
            );
        }
        history.push(breakdown);
        model.iteration += 1;
    }
    Ok(TranslationRun {
        model,
        history,
        d_steps,
        g_steps,
    })
}

fn volume_batch(v: &LabeledVolume) -> Tensor<f32> {
    let [d, h, w] = v.shape;
    Tensor::new(vec![d, 1, 1, h, w], v.intensities.clone()).expect("volume batch")
}

fn slice_batch(v: &LabeledVolume, z: usize) -> Tensor<f32> {
    let [_, h, w] = v.shape;
    Tensor::new(vec![1, 1, 1, h, w], v.slice_intensities(z).to_vec()).expect("slice batch")
}

/// Map every slice of `xa` to the target domain with one style slice drawn
/// from `style_source` by `seed`. Labels are copied unchanged.
pub fn translate_volume<M: Translator + ?Sized>(
    xa: &LabeledVolume,
    style_source: &LabeledVolume,
    model: &M,
    seed: u64,
) -> Result<LabeledVolume> {
    if style_source.domain != DomainTag::B {
        return Err(Error::InvalidArgument(format!(
            "style source must be a domain-B volume, got {:?}",
            style_source.domain
        )));
    }
    if style_source.depth() == 0 || style_source.is_empty() {
        return Err(Error::InvalidArgument("style source volume is empty".into()));
    }
    let z = rng_from(seed).random_range(0..style_source.depth());
    let s = model.encode_style(&slice_batch(style_source, z), DomainTag::B)?;
    let c = model.encode_content(&volume_batch(xa))?;
    let out = model.decode(&c, &s)?;
    if out.len() != xa.len() {
        return Err(Error::shape("translated volume", &[xa.len()], &[out.len()]));
    }
    let mut v = LabeledVolume::new(xa.shape, xa.spacing, out.into_data(), xa.labels.clone(), DomainTag::SyntheticAB)?;
    v.meta = xa.meta.clone();
    v.meta.id = format!("{}-ab", xa.id());
    v.meta.seed = Some(seed);
    v.meta.upstream = vec![xa.id().to_string(), format!("{}#z{z}", style_source.id())];
    Ok(v)
}

/// Mean |x - G(c^x, s^x)| over all slices of `vols`.
pub fn reconstruction_error<M: Translator + ?Sized>(model: &M, vols: &[LabeledVolume], domain: DomainTag) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in vols {
        let x = volume_batch(v);
        let r = model.decode(&model.encode_content(&x)?, &model.encode_style(&x, domain)?)?;
        sum += x.data().iter().zip(r.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        n += x.len();
    }
    Ok(sum / n.max(1) as f64)
}

/// Mean |x - x^{a→b→a}| where each source volume borrows the style of the
/// paired target volume's middle slice and its own middle slice.
pub fn cycle_error<M: Translator + ?Sized>(model: &M, source: &[LabeledVolume], target: &[LabeledVolume]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, xa) in source.iter().enumerate() {
        let xb = &target[i % target.len()];
        let x = volume_batch(xa);
        let sa = model.encode_style(&slice_batch(xa, xa.depth() / 2), DomainTag::A)?;
        let sb = model.encode_style(&slice_batch(xb, xb.depth() / 2), DomainTag::B)?;
        let ab = model.decode(&model.encode_content(&x)?, &sb)?;
        let aba = model.decode(&model.encode_content(&ab)?, &sa)?;
        sum += x.data().iter().zip(aba.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        n += x.len();
    }
    Ok(sum / n.max(1) as f64)
}

/// Mean intensity per label value `0..k`; NaN for absent labels.
pub fn class_mean_profile(v: &LabeledVolume, k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut cnt = vec![0usize; k];
    for (&l, &x) in v.labels.iter().zip(&v.intensities) {
        if (l as usize) < k {
            sum[l as usize] += x as f64;
            cnt[l as usize] += 1;
        }
    }
    sum.iter()
        .zip(&cnt)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect()
}

/// L1 distance between profiles over labels present in both.
pub fn profile_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TranslationConfig {
        TranslationConfig {
            slice_size: [8, 8],
            content_channels: 2,
            style_channels: 2,
            downsamples: 1,
            width: 2,
            res_blocks: 1,
            disc_width: 2,
            iterations: 1,
            batch_size: 1,
            ..Default::default()
        }
    }

    fn const_scores(g: &mut Graph<'_, f64>, v: f64) -> Var {
        g.input(Tensor::full(&[2, 1, 1, 3, 3], v))
    }

    #[test]
    fn default_code_shapes() {
        let cfg = TranslationConfig::default();
        assert_eq!(cfg.content_shape(), [32, 16, 16]);
        let mut small = cfg.clone();
        small.iterations = 1;
        let model = TranslationModel::new(&small).unwrap();
        let x = Tensor::from_fn(&[1, 1, 1, 64, 64], |i| (i % 7) as f32 * 0.1);
        let c = model.encode_content(&x).unwrap();
        assert_eq!(c.shape(), &[1, 32, 1, 16, 16]);
        assert_eq!(model.encode_content(&x).unwrap(), c);
        let s = model.encode_style(&x, DomainTag::B).unwrap();
        assert_eq!(s.shape(), &[1, 32, 1, 16, 16]);
        assert_eq!(model.decode(&c, &s).unwrap().shape(), x.shape());
    }

    #[test]
    fn wrong_input_shape_names_both_shapes() {
        let model = TranslationModel::new(&tiny_cfg()).unwrap();
        let err = model.encode_content(&Tensor::zeros(&[1, 1, 1, 8, 6])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 1, 1, 8, 8]") && msg.contains("[1, 1, 1, 8, 6]"), "{msg}");
    }

    #[test]
    fn tiny_model_is_small() {
        let mut store = ParamStore::<f64>::new();
        TranslationNets::new(&mut store, &mut rng_from(0), &tiny_cfg()).unwrap();
        assert!(store.num_scalars() <= 1000, "{}", store.num_scalars());
    }

    #[test]
    fn least_squares_constant_half() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let (r, f) = (const_scores(&mut g, 0.5), const_scores(&mut g, 0.5));
        let (gen, disc) = adversarial_loss_image(&mut g, r, f, LossForm::LeastSquares).unwrap();
        assert_eq!(g.value(disc).item(), 0.5);
        assert_eq!(g.value(gen).item(), 0.25);
        let (enc, disc_c) = adversarial_loss_content(&mut g, r, f, LossForm::LeastSquares).unwrap();
        assert_eq!((g.value(enc).item(), g.value(disc_c).item()), (0.5, 0.5));
    }

    #[test]
    fn least_squares_optimum() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let (r, f) = (const_scores(&mut g, 1.0), const_scores(&mut g, 0.0));
        let (_, disc) = adversarial_loss_image(&mut g, r, f, LossForm::LeastSquares).unwrap();
        assert_eq!(g.value(disc).item(), 0.0);
        // D_c: 1 on c^b (r), 0 on c^a (f); the encoder term is maximal at 2
        let (enc, disc_c) = adversarial_loss_content(&mut g, f, r, LossForm::LeastSquares).unwrap();
        assert_eq!((g.value(enc).item(), g.value(disc_c).item()), (2.0, 0.0));
    }

    #[test]
    fn log_form_at_half_probability() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        // a logit of 0 is probability 0.5
        let (r, f) = (const_scores(&mut g, 0.0), const_scores(&mut g, 0.0));
        let (gen, disc) = adversarial_loss_image(&mut g, r, f, LossForm::Log).unwrap();
        assert!((g.value(disc).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.value(gen).item() + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn l1_of_zeros_against_ones_is_one() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, 1, 1, 4, 4]));
        let r = g.input(Tensor::full(&[1, 1, 1, 4, 4], 1.0));
        let l = reconstruction_term(&mut g, x, r, RecNorm::L1).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let same = reconstruction_term(&mut g, x, x, RecNorm::L1).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn breakdown_weights_and_totals() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let nets = TranslationNets::new(&mut store, &mut rng_from(3), &cfg).unwrap();
        let xa = Tensor::from_fn(&[2, 1, 1, 8, 8], |i| ((i * 7) % 11) as f64 / 11.0);
        let xb = Tensor::from_fn(&[2, 1, 1, 8, 8], |i| ((i * 5) % 13) as f64 / 13.0);
        let base = total_loss(&store, &nets, &cfg, &xa, &xb).unwrap();
        let adv = base.adv_a.gen + base.adv_b.gen + base.adv_c.gen;
        assert!((base.total_gen - (adv + base.rec)).abs() < 1e-10);
        let disc = base.adv_a.disc + base.adv_b.disc + base.adv_c.disc;
        assert!((base.total_disc - disc).abs() < 1e-10);

        let mut c2 = cfg.clone();
        c2.w_rec = 2.0;
        let doubled = total_loss(&store, &nets, &c2, &xa, &xb).unwrap();
        assert!((doubled.total_gen - base.total_gen - base.rec).abs() < 1e-10);
        c2.w_adv = 0.0;
        let no_adv = total_loss(&store, &nets, &c2, &xa, &xb).unwrap();
        assert!((no_adv.total_gen - 2.0 * base.rec).abs() < 1e-12);
        c2.w_rec = 0.0;
        let zero = total_loss(&store, &nets, &c2, &xa, &xb).unwrap();
        assert_eq!((zero.total_gen, zero.total_disc), (0.0, 0.0));

        // graph totals agree with the recomputed sums
        let mut g = Graph::new(&store);
        let (a, b) = (g.input(xa.clone()), g.input(xb.clone()));
        let v = build_losses(&mut g, &nets, &cfg, a, b, Phase::Both).unwrap();
        assert!((read(&g, v.total_gen) - base.total_gen).abs() < 1e-10);
        assert!((read(&g, v.total_disc) - base.total_disc).abs() < 1e-10);
    }

    #[test]
    fn gradient_isolation() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let nets = TranslationNets::new(&mut store, &mut rng_from(4), &cfg).unwrap();
        let xa = Tensor::from_fn(&[1, 1, 1, 8, 8], |i| (i % 5) as f64);
        let xb = Tensor::from_fn(&[1, 1, 1, 8, 8], |i| (i % 3) as f64);
        let mut g = Graph::new(&store);
        let (a, b) = (g.input(xa), g.input(xb));
        let v = build_losses(&mut g, &nets, &cfg, a, b, Phase::Both).unwrap();
        let dg = g.backward(v.total_disc.unwrap()).unwrap();
        for id in nets.generator_params() {
            assert!(dg.param(id).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        }
        assert!(nets.discriminator_params().iter().any(|&id| dg.param(id).is_some()));

        let mut g = Graph::new(&store);
        g.freeze(nets.discriminator_params());
        let (a, b) = (g.input(Tensor::from_fn(&[1, 1, 1, 8, 8], |i| (i % 5) as f64)), g.input(Tensor::zeros(&[1, 1, 1, 8, 8])));
        let v = build_losses(&mut g, &nets, &cfg, a, b, Phase::Generator).unwrap();
        let gg = g.backward(v.total_gen.unwrap()).unwrap();
        for id in nets.discriminator_params() {
            assert!(gg.param(id).is_none());
        }
    }

    #[test]
    fn identity_stub_translates_to_itself() {
        let v = LabeledVolume::new([2, 4, 4], [1.0; 3], (0..32).map(|i| i as f32).collect(), vec![1; 32], DomainTag::A).unwrap();
        let style = LabeledVolume::new([3, 4, 4], [1.0; 3], vec![0.5; 48], vec![0; 48], DomainTag::B).unwrap();
        let out = translate_volume(&v, &style, &IdentityTranslator, 0).unwrap();
        assert_eq!(out.intensities, v.intensities);
        assert_eq!(out.labels, v.labels);
        assert_eq!(out.domain, DomainTag::SyntheticAB);
        assert_eq!(reconstruction_error(&IdentityTranslator, &[v.clone()], DomainTag::A).unwrap(), 0.0);
        assert!(translate_volume(&v, &v, &IdentityTranslator, 0).is_err());
    }

    #[test]
    fn one_iteration_bookkeeping_and_style_encoders_diverge() {
        let cfg = TranslationConfig {
            slice_size: [16, 16],
            width: 4,
            content_channels: 4,
            style_channels: 4,
            disc_width: 4,
            ..tiny_cfg()
        };
        let mk = |d: DomainTag, s: u64| {
            let n = 2 * 16 * 16;
            LabeledVolume::new([2, 16, 16], [1.0; 3], (0..n).map(|i| ((i as u64 * s) % 17) as f32 / 17.0).collect(), vec![0; n], d).unwrap()
        };
        let run = train_translation(&[mk(DomainTag::A, 3)], &[mk(DomainTag::B, 5)], &cfg).unwrap();
        assert_eq!((run.d_steps, run.g_steps, run.history.len()), (1, 1, 1));
        let x = Tensor::from_fn(&[1, 1, 1, 16, 16], |i| (i % 9) as f32 / 9.0);
        let sa = run.model.encode_style(&x, DomainTag::A).unwrap();
        let sb = run.model.encode_style(&x, DomainTag::B).unwrap();
        assert_ne!(sa, sb);
        assert_eq!(run.history_csv().lines().count(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = TranslationModel::new(&tiny_cfg()).unwrap();
        let p = dir.path().join("t.ckpt");
        model.save(&p, "cfg", vec![]).unwrap();
        let back = TranslationModel::load(&p).unwrap();
        let x = Tensor::from_fn(&[1, 1, 1, 8, 8], |i| i as f32 / 64.0);
        assert_eq!(back.encode_content(&x).unwrap(), model.encode_content(&x).unwrap());
    }
}
