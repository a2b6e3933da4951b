//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uda_core::autograd::{Graph, ParamId, ParamStore, SegTarget, Var, IGNORE_LABEL};
use uda_core::gradcheck::{check_params, GradCheckReport, DEFAULT_STEP};
use uda_core::phantom::rng_from;
use uda_core::segmentation::{SegConfig, UNet};
use uda_core::tensor::Tensor;
use uda_core::translation::{
    adversarial_loss_content, adversarial_loss_image, build_losses, reconstruction_term, LossForm, Net, Phase, RecNorm,
    TranslationConfig, TranslationNets,
};
use uda_core::volume::DomainTag;
use uda_core::Result;

pub const GRAD_TOL: f64 = 1e-4;

pub fn tiny_translation(form: LossForm, norm: RecNorm) -> TranslationConfig {
    TranslationConfig {
        slice_size: [8, 8],
        content_channels: 2,
        style_channels: 2,
        downsamples: 1,
        width: 2,
        res_blocks: 1,
        disc_width: 2,
        loss_form: form,
        rec_norm: norm,
        iterations: 1,
        batch_size: 2,
        ..Default::default()
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Analytic gradients of `build` w.r.t. `ids` (everything else frozen)
/// against central differences.
pub fn check_loss(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    build: impl Fn(&mut Graph<'_, f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(store);
        g.freeze(store.ids().filter(|i| !ids.contains(i)));
        let l = build(&mut g)?;
        g.backward(l)?.into_params()
    };
    check_params(store, ids, &analytic, DEFAULT_STEP, None, |s| {
        let mut g = Graph::new(s);
        let l = build(&mut g)?;
        Ok(g.value(l).item())
    })
}

fn nets(cfg: &TranslationConfig) -> (ParamStore<f64>, TranslationNets) {
    let mut store = ParamStore::new();
    let nets = TranslationNets::new(&mut store, &mut rng_from(7), cfg).unwrap();
    (store, nets)
}

fn cat(parts: &[Vec<ParamId>]) -> Vec<ParamId> {
    parts.concat()
}

/// Gradient checks of every training objective on tiny models.
pub fn grad_checks() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let xa = random_tensor(&[2, 1, 1, 8, 8], 1);
    let xb = random_tensor(&[2, 1, 1, 8, 8], 2);

    for norm in [RecNorm::L1, RecNorm::L2] {
        let cfg = tiny_translation(LossForm::LeastSquares, norm);
        let (store, n) = nets(&cfg);
        let ids = cat(&[n.params_of(Net::ContentEncoder), n.params_of(Net::StyleA), n.params_of(Net::Decoder)]);
        let r = check_loss(&store, &ids, |g| {
            let x = g.input(xa.clone());
            let c = n.encode_content(g, x)?;
            let s = n.encode_style(g, x, DomainTag::A)?;
            let rec = n.decode(g, c, s)?;
            reconstruction_term(g, x, rec, norm)
        })
        .unwrap();
        out.push((format!("L_rec ({norm:?})"), r));
    }

    for form in [LossForm::LeastSquares, LossForm::Log] {
        let cfg = tiny_translation(form, RecNorm::L1);
        let (store, n) = nets(&cfg);
        let fake = |g: &mut Graph<'_, f64>| -> Result<(Var, Var)> {
            let a = g.input(xa.clone());
            let b = g.input(xb.clone());
            let c = n.encode_content(g, a)?;
            let s = n.encode_style(g, b, DomainTag::B)?;
            let f = n.decode(g, c, s)?;
            Ok((b, f))
        };
        let gen_ids = cat(&[n.params_of(Net::ContentEncoder), n.params_of(Net::StyleB), n.params_of(Net::Decoder)]);
        let r = check_loss(&store, &gen_ids, |g| {
            let (b, f) = fake(g)?;
            let rs = n.discriminate(g, b, Net::DiscB)?;
            let fs = n.discriminate(g, f, Net::DiscB)?;
            Ok(adversarial_loss_image(g, rs, fs, form)?.0)
        })
        .unwrap();
        out.push((format!("L_adv image generator ({form:?})"), r));
        let r = check_loss(&store, &n.params_of(Net::DiscB), |g| {
            let (b, f) = fake(g)?;
            let rs = n.discriminate(g, b, Net::DiscB)?;
            let fs = n.discriminate(g, f, Net::DiscB)?;
            Ok(adversarial_loss_image(g, rs, fs, form)?.1)
        })
        .unwrap();
        out.push((format!("L_adv image discriminator ({form:?})"), r));

        let codes = |g: &mut Graph<'_, f64>| -> Result<(Var, Var)> {
            let a = g.input(xa.clone());
            let b = g.input(xb.clone());
            let ca = n.encode_content(g, a)?;
            let cb = n.encode_content(g, b)?;
            Ok((n.discriminate(g, ca, Net::DiscC)?, n.discriminate(g, cb, Net::DiscC)?))
        };
        let r = check_loss(&store, &n.params_of(Net::ContentEncoder), |g| {
            let (sa, sb) = codes(g)?;
            Ok(adversarial_loss_content(g, sa, sb, form)?.0)
        })
        .unwrap();
        out.push((format!("L_adv content encoder ({form:?})"), r));
        let r = check_loss(&store, &n.params_of(Net::DiscC), |g| {
            let (sa, sb) = codes(g)?;
            Ok(adversarial_loss_content(g, sa, sb, form)?.1)
        })
        .unwrap();
        out.push((format!("L_adv content discriminator ({form:?})"), r));

        let r = check_loss(&store, &n.generator_params(), |g| {
            let (a, b) = (g.input(xa.clone()), g.input(xb.clone()));
            Ok(build_losses(g, &n, &cfg, a, b, Phase::Generator)?.total_gen.unwrap())
        })
        .unwrap();
        out.push((format!("total generator objective ({form:?})"), r));
        let r = check_loss(&store, &n.discriminator_params(), |g| {
            let (a, b) = (g.input(xa.clone()), g.input(xb.clone()));
            Ok(build_losses(g, &n, &cfg, a, b, Phase::Discriminator)?.total_disc.unwrap())
        })
        .unwrap();
        out.push((format!("total discriminator objective ({form:?})"), r));
    }

    for include_background in [false, true] {
        let cfg = SegConfig {
            patch_size: [1, 8, 8],
            num_classes: 3,
            base_channels: 2,
            max_channels: 4,
            levels: 2,
            include_background,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let net = UNet::new(&mut store, &mut rng_from(3), &cfg).unwrap();
        let x = random_tensor(&[2, 1, 1, 8, 8], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels: Vec<u8> = (0..128)
            .map(|_| if rng.random_bool(0.1) { IGNORE_LABEL } else { rng.random_range(0..3) })
            .collect();
        let target = SegTarget {
            labels,
            weights: vec![0.5, 0.25],
            include_background,
            smooth: 1e-5,
        };
        let ids: Vec<_> = store.ids().collect();
        let r = check_loss(&store, &ids, |g| {
            let xv = g.input(x.clone());
            let logits = net.forward(g, xv)?;
            Ok(g.seg_loss(logits, &target)?.0)
        })
        .unwrap();
        out.push((format!("L_seg Dice+CE (background {include_background})"), r));
    }
    out
}

/// Set-count Dice: `2|P∩G| / (|P|+|G|)`, 1 when both are empty.
pub fn oracle_dsc(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    use std::collections::HashSet;
    let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
    let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == class).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

/// Physical coordinates of the surface voxels of `class`: voxels with a
/// face neighbour outside the mask or outside the grid (axes of extent 1
/// have no neighbours).
pub fn surface_points(m: &[u8], shape: [usize; 3], class: u8, sp: [f64; 3]) -> Vec<[f64; 3]> {
    let [d, h, w] = shape;
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && m[(z as usize * h + y as usize) * w + x as usize] == class
    };
    let mut out = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !inside(z, y, x) {
                    continue;
                }
                let mut steps = Vec::new();
                for (axis, n) in [d, h, w].into_iter().enumerate() {
                    if n > 1 {
                        for s in [-1, 1] {
                            let mut o = [0isize; 3];
                            o[axis] = s;
                            steps.push(o);
                        }
                    }
                }
                if steps.iter().any(|o| !inside(z + o[0], y + o[1], x + o[2])) {
                    out.push([z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]]);
                }
            }
        }
    }
    out
}

/// Brute-force normalized surface Dice over all surface point pairs.
pub fn oracle_nsd(pred: &[u8], gt: &[u8], shape: [usize; 3], class: u8, tol: f64, sp: [f64; 3]) -> f64 {
    let (p, g) = (surface_points(pred, shape, class, sp), surface_points(gt, shape, class, sp));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let limit = tol * tol * (1.0 + 1e-9);
    let near = |a: &[f64; 3], set: &[[f64; 3]]| set.iter().any(|b| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>() <= limit);
    let hits = p.iter().filter(|a| near(a, &g)).count() + g.iter().filter(|b| near(b, &p)).count();
    hits as f64 / (p.len() + g.len()) as f64
}

/// A random label map: either voxel noise or a few random boxes.
pub fn random_labels(rng: &mut impl Rng, shape: [usize; 3], classes: u8) -> Vec<u8> {
    let [d, h, w] = shape;
    let n = d * h * w;
    if rng.random_bool(0.5) {
        let density = rng.random_range(0.05..0.6);
        return (0..n)
            .map(|_| if rng.random_bool(density) { rng.random_range(1..classes) } else { 0 })
            .collect();
    }
    let mut m = vec![0u8; n];
    for _ in 0..rng.random_range(0..5) {
        let c = rng.random_range(1..classes);
        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..shape[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..shape[a]) + 1);
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    m[(z * h + y) * w + x] = c;
                }
            }
        }
    }
    m
}
