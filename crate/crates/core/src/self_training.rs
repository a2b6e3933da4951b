//! Pseudo-labeling of unlabeled target volumes and fine-tuning on the union
//! of synthetic-labeled and pseudo-labeled data.

use serde::{Deserialize, Serialize};

use crate::autograd::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport, Tolerance};
use crate::phantom::derive_seed;
use crate::segmentation::{fit, EpochRecord, Segmenter, SegmentationModel, Source, StepLoss};
use crate::volume::{DomainTag, LabeledVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct STConfig {
    pub rounds: usize,
    /// Voxels whose max probability is not above this are ignored; 0 keeps
    /// every voxel.
    pub confidence_threshold: f64,
    pub finetune_epochs: usize,
    pub synthetic_weight: f64,
    pub pseudo_weight: f64,
    pub seed: u64,
}

impl Default for STConfig {
    fn default() -> Self {
        STConfig {
            rounds: 2,
            confidence_threshold: 0.0,
            finetune_epochs: 10,
            synthetic_weight: 1.0,
            pseudo_weight: 1.0,
            seed: 0,
        }
    }
}

impl STConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("self_training.rounds must be >= 1".into()));
        }
        if self.finetune_epochs == 0 {
            return Err(Error::Config("self_training.finetune_epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "self_training.confidence_threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        for (name, w) in [("synthetic_weight", self.synthetic_weight), ("pseudo_weight", self.pseudo_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("self_training.{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// A target volume labeled by a model. `volume.labels` holds the pseudo
/// labels (with [`IGNORE_LABEL`] on filtered voxels).
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair {
    pub volume: LabeledVolume,
    pub confidence: Vec<f32>,
    pub checkpoint_id: String,
}

impl PseudoPair {
    pub fn ignored_fraction(&self) -> f64 {
        let n = self.volume.labels.iter().filter(|&&l| l == IGNORE_LABEL).count();
        n as f64 / self.volume.labels.len().max(1) as f64
    }
}

fn pseudo_label_one<S: Segmenter + ?Sized>(target: &LabeledVolume, model: &S, threshold: f64, ckpt: &str) -> Result<PseudoPair> {
    let pred = model.predict(target)?;
    let confidence = pred.confidence();
    let mut labels = pred.labels;
    if threshold > 0.0 {
        for (l, &c) in labels.iter_mut().zip(&confidence) {
            if (c as f64) <= threshold {
                *l = IGNORE_LABEL;
            }
        }
    }
    let mut volume = target.clone();
    volume.labels = labels;
    volume.domain = DomainTag::PseudoB;
    volume.meta.id = format!("{}-pseudo", target.id());
    volume.meta.checkpoint_id = Some(ckpt.to_string());
    volume.meta.upstream = vec![target.id().to_string()];
    Ok(PseudoPair {
        volume,
        confidence,
        checkpoint_id: ckpt.to_string(),
    })
}

/// Labels every target with `model`, in parallel across volumes.
pub fn generate_pseudo_labels<S: Segmenter + Sync + ?Sized>(
    targets: &[LabeledVolume],
    model: &S,
    cfg: &STConfig,
) -> Result<Vec<PseudoPair>> {
    let ckpt = model.checkpoint_id();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(targets.len().max(1));
    if workers <= 1 {
        return targets
            .iter()
            .map(|t| pseudo_label_one(t, model, cfg.confidence_threshold, &ckpt))
            .collect();
    }
    let chunk = targets.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = targets
            .chunks(chunk)
            .map(|part| {
                let ckpt = &ckpt;
                s.spawn(move || {
                    part.iter()
                        .map(|t| pseudo_label_one(t, model, cfg.confidence_threshold, ckpt))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(targets.len());
        for h in handles {
            out.extend(h.join().expect("pseudo-label worker panicked")?);
        }
        Ok(out)
    })
}

pub struct FinetuneRun {
    pub model: SegmentationModel,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepLoss>,
}

/// Continues training `model` on synthetic and pseudo pairs drawn from one
/// concatenated list.
pub fn finetune_combined(
    synthetic: &[LabeledVolume],
    pseudo: &[PseudoPair],
    mut model: SegmentationModel,
    cfg: &STConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if synthetic.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs at least one synthetic pair".into()));
    }
    if pseudo.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs at least one pseudo-labeled volume".into()));
    }
    let items: Vec<(&LabeledVolume, Source)> = synthetic
        .iter()
        .map(|v| (v, Source::Synthetic))
        .chain(pseudo.iter().map(|p| (&p.volume, Source::Pseudo)))
        .collect();
    let weights = [cfg.synthetic_weight, cfg.pseudo_weight];
    let (history, steps) = fit(&mut model, &items, cfg.finetune_epochs, weights, seed)?;
    Ok(FinetuneRun { model, history, steps })
}

#[derive(Clone, Debug)]
pub struct STRound {
    pub round: usize,
    /// Checkpoint that produced this round's pseudo labels.
    pub pseudo_checkpoint: String,
    pub pseudo: Vec<PseudoPair>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepLoss>,
    /// Evaluation after this round's fine-tuning, if evaluation volumes were
    /// given.
    pub eval: Option<MetricsReport>,
}

pub struct STOutcome {
    pub model: SegmentationModel,
    pub rounds: Vec<STRound>,
}

/// Alternates pseudo-labeling with the newest model and fine-tuning, for
/// `cfg.rounds` rounds.
pub fn st_loop(
    synthetic: &[LabeledVolume],
    targets: &[LabeledVolume],
    eval_vols: &[LabeledVolume],
    mut model: SegmentationModel,
    cfg: &STConfig,
    tol: &Tolerance,
) -> Result<STOutcome> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("self-training needs unlabeled target volumes".into()));
    }
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let pseudo = generate_pseudo_labels(targets, &model, cfg)?;
        let pseudo_checkpoint = model.checkpoint_id();
        let run = finetune_combined(synthetic, &pseudo, model, cfg, derive_seed(cfg.seed, 31, r as u64))?;
        model = run.model;
        let eval = if eval_vols.is_empty() {
            None
        } else {
            Some(evaluate(&model, eval_vols, tol)?)
        };
        if let Some(e) = &eval {
            log::info!("self-training round {}: mean DSC {:.4}", r + 1, e.mean_dsc);
        }
        rounds.push(STRound {
            round: r + 1,
            pseudo_checkpoint,
            pseudo,
            history: run.history,
            steps: run.steps,
            eval,
        });
    }
    Ok(STOutcome { model, rounds })
}
