//! Declarative five-stage pipeline with content-keyed stage stamps, and the
//! three-arm ablation runner.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.resolved.toml
//! data/            manifest.json, source/, target/, oracle/
//! translation/     model.ckpt, history.csv, fidelity.json
//! translated/      X^{ab} volumes
//! seg/<arm>/       model.ckpt, history.csv  (no_uda, drl)
//! st/round_<r>/    pseudo/ (*.vol, *.conf), model/ (model.ckpt, history.csv)
//! eval/<arm>/      metrics.json
//! ablation/        report.json, accuracy.csv, efficiency.csv
//! ```
//!
//! Every stage directory holds a `stamp.json` recording the stage key (a
//! hash of the config sections and upstream files it depends on) and the
//! SHA-256 of every output. A stage whose stamp matches is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    accuracy_table, efficiency_table, evaluate, profile_run, EfficiencyRow, MetricsReport, ResourceSummary, Tolerance,
};
use crate::phantom::{build_dataset, derive_seed, DatasetManifest, PhantomSpec};
use crate::preprocess::{preprocess, ZScoreScope};
use crate::segmentation::{history_csv, train_segmentation, SegConfig, Segmenter, SegmentationModel};
use crate::self_training::{finetune_combined, generate_pseudo_labels, PseudoPair, STConfig};
use crate::translation::{
    class_mean_profile, cycle_error, profile_distance, reconstruction_error, train_translation, translate_volume,
    TranslationConfig, TranslationModel,
};
use crate::volume::{file_sha256, sha256_hex, write_atomic, DomainTag, LabeledVolume};

pub const ORGAN_NAMES: [&str; 4] = ["organ1", "organ2", "organ3", "organ4"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub phantom: PhantomSpec,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out anatomies rendered in both domains, used only for evaluation.
    pub n_oracle: usize,
    pub slice_size: [usize; 2],
    pub zscore: ZScoreScope,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            phantom: PhantomSpec::default(),
            n_source: 20,
            n_target: 20,
            n_oracle: 6,
            slice_size: [64, 64],
            zscore: ZScoreScope::Volume,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub tolerance: Tolerance,
    /// Memory sampling interval of the profiler, seconds.
    pub profile_interval_s: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            tolerance: Tolerance::default(),
            profile_interval_s: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Segmenter trained on raw source volumes.
    NoUda,
    /// Segmenter trained on translated source volumes.
    Drl,
    /// `Drl` followed by self-training on pseudo-labeled targets.
    DrlSt,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::NoUda, Arm::Drl, Arm::DrlSt];

    pub fn name(self) -> &'static str {
        match self {
            Arm::NoUda => "no_uda",
            Arm::Drl => "drl",
            Arm::DrlSt => "drl_st",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm '{s}' (expected no_uda, drl or drl_st)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub arms: Vec<Arm>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { arms: Arm::ALL.to_vec() }
    }
}

/// Complete run configuration. Section `seed` fields are derived from the
/// global `seed` by [`PipelineConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub translation: TranslationConfig,
    pub segmentation: SegConfig,
    pub self_training: STConfig,
    pub metrics: MetricsConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::reference()
    }
}

pub const MAX_SEED: u64 = i64::MAX as u64;

pub const PRESETS: [&str; 3] = ["reference", "smoke", "full"];

impl PipelineConfig {
    /// Desk-scale defaults: 64×64 slices, 20 volumes per domain.
    pub fn reference() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/reference"),
            data: DataConfig::default(),
            translation: TranslationConfig {
                width: 8,
                content_channels: 16,
                style_channels: 16,
                disc_width: 8,
                iterations: 1000,
                ..Default::default()
            },
            segmentation: SegConfig::default(),
            self_training: STConfig::default(),
            metrics: MetricsConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Seconds-scale configuration for tests and demos.
    pub fn smoke() -> Self {
        let mut c = Self::reference();
        c.output_dir = PathBuf::from("runs/smoke");
        c.data.phantom.grid_shape = [2, 32, 32];
        c.data.n_source = 3;
        c.data.n_target = 3;
        c.data.n_oracle = 2;
        c.data.slice_size = [32, 32];
        c.translation.slice_size = [32, 32];
        c.translation.width = 4;
        c.translation.content_channels = 4;
        c.translation.style_channels = 4;
        c.translation.disc_width = 4;
        c.translation.iterations = 4;
        c.translation.batch_size = 2;
        c.segmentation.patch_size = [1, 32, 32];
        c.segmentation.base_channels = 4;
        c.segmentation.levels = 2;
        c.segmentation.epochs = 2;
        c.segmentation.iters_per_epoch = 3;
        c.self_training.finetune_epochs = 1;
        c
    }

    /// Full-scale segmentation protocol; not runnable at desk scale.
    pub fn full() -> Self {
        let mut c = Self::reference();
        c.output_dir = PathBuf::from("runs/full");
        c.segmentation = SegConfig::full_scale();
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "smoke" => Ok(Self::smoke()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!("unknown preset '{name}' (expected one of {PRESETS:?})"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. A top-level `preset = "<name>"` key selects the
    /// base values that the rest of the file overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        let base = match table.remove("preset") {
            None => Self::reference(),
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        let mut merged = toml::Table::try_from(&base).expect("config serializes");
        merge(&mut merged, table);
        merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Propagates shared settings into each section and validates.
    pub fn resolve(mut self) -> Result<Self> {
        let k = self.data.phantom.num_classes;
        self.segmentation.num_classes = k;
        // config files store integers as i64
        if self.seed > MAX_SEED || self.data.phantom.seed > MAX_SEED {
            return Err(Error::Config(format!("seeds must not exceed {MAX_SEED}")));
        }
        self.translation.seed = derive_seed(self.seed, 100, 0) & MAX_SEED;
        self.segmentation.seed = derive_seed(self.seed, 200, 0) & MAX_SEED;
        self.self_training.seed = derive_seed(self.seed, 300, 0) & MAX_SEED;
        self.data.phantom.validate()?;
        self.translation.validate()?;
        self.segmentation.validate()?;
        self.self_training.validate()?;
        if self.translation.slice_size != self.data.slice_size {
            return Err(Error::Config(format!(
                "translation.slice_size {:?} must equal data.slice_size {:?}",
                self.translation.slice_size, self.data.slice_size
            )));
        }
        let ps = self.segmentation.patch_size;
        if ps[1] > self.data.slice_size[0] || ps[2] > self.data.slice_size[1] || ps[0] > self.data.phantom.grid_shape[0] {
            return Err(Error::Config(format!(
                "segmentation.patch_size {ps:?} exceeds the preprocessed volume {:?}",
                [self.data.phantom.grid_shape[0], self.data.slice_size[0], self.data.slice_size[1]]
            )));
        }
        if self.data.n_source == 0 || self.data.n_target == 0 || self.data.n_oracle == 0 {
            return Err(Error::Config("data split counts must be >= 1".into()));
        }
        if !(self.metrics.profile_interval_s > 0.0) {
            return Err(Error::Config("metrics.profile_interval_s must be > 0".into()));
        }
        if self.ablation.arms.is_empty() {
            return Err(Error::Config("ablation.arms must not be empty".into()));
        }
        Ok(self)
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn section_hash<T: Serialize>(parts: &[&T]) -> String {
    let json: Vec<String> = parts.iter().map(|p| serde_json::to_string(p).expect("serializes")).collect();
    sha256_hex(json.join("\n").as_bytes())
}

// ------------------------------------------------------------------ stamps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub key: String,
    pub config_hash: String,
    /// Hashes of the upstream artifacts the stage consumed.
    pub upstream: Vec<String>,
    /// SHA-256 of each output, keyed by path relative to the stage directory.
    pub outputs: BTreeMap<String, String>,
    pub resources: ResourceSummary,
}

pub const STAMP_FILE: &str = "stamp.json";

impl Stamp {
    pub fn load(dir: &Path) -> Result<Option<Stamp>> {
        let path = dir.join(STAMP_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn outputs_intact(&self, dir: &Path) -> bool {
        self.outputs
            .iter()
            .all(|(rel, sha)| file_sha256(&dir.join(rel)).is_ok_and(|s| &s == sha))
    }

    /// Digest used by downstream stages.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(&self.outputs).expect("serializes").as_bytes())
    }
}

fn list_files(dir: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let full = dir.join(rel);
    let mut entries: Vec<_> = std::fs::read_dir(&full)
        .map_err(|e| Error::io(&full, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(&full, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let r = rel.join(e.file_name());
        if e.path().is_dir() {
            list_files(dir, &r, out)?;
        } else if r != Path::new(STAMP_FILE) {
            out.push(r);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- pipeline

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Intensity range (max − min) of the held-out slices.
    pub intensity_range: f64,
    pub rec_a: f64,
    pub rec_b: f64,
    pub cycle: f64,
    /// Profile distances to the true B rendering, per oracle pair:
    /// `(translated, untranslated)`.
    pub profile_distances: Vec<(f64, f64)>,
}

impl Fidelity {
    pub fn rec_fraction(&self) -> f64 {
        self.rec_a.max(self.rec_b) / self.intensity_range
    }

    pub fn cycle_fraction(&self) -> f64 {
        self.cycle / self.intensity_range
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub checkpoint: String,
    pub checkpoint_id: String,
    pub report: MetricsReport,
    pub efficiency: Vec<EfficiencyRow>,
    /// Mean DSC after each self-training round (drl_st only).
    pub round_dsc: Vec<f64>,
    pub config_hash: String,
    pub upstream: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub data_manifest_hash: String,
    pub arms: Vec<ArmResult>,
    /// Arms that failed, with the error message.
    pub failures: Vec<(Arm, String)>,
    pub partial: bool,
}

impl AblationReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub root: PathBuf,
    pub config_hash: String,
    /// Rebuild stages whose existing outputs are stale or incomplete.
    pub resume: bool,
}

/// Resolved configuration file written beside the outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

fn provenance_line(config_hash: &str, upstream: &[String]) -> String {
    format!("# config_hash={config_hash} upstream={}\n", upstream.join(";"))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, resume: bool) -> Result<Self> {
        let cfg = cfg.resolve()?;
        let root = cfg.output_dir.clone();
        let config_hash = cfg.hash();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let path = root.join(RESOLVED_CONFIG);
        let text = cfg.to_toml();
        if path.exists() {
            let old = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if old != text && !resume {
                return Err(Error::Config(format!(
                    "{} holds a run with a different configuration; pass --resume to rebuild stale stages or choose another output directory",
                    root.display()
                )));
            }
        }
        write_atomic(&path, text.as_bytes())?;
        Ok(Pipeline {
            cfg,
            root,
            config_hash,
            resume,
        })
    }

    fn dir(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn interval(&self) -> Duration {
        Duration::from_secs_f64(self.cfg.metrics.profile_interval_s)
    }

    /// Runs `build` into `rel` unless a stamp with the same key and intact
    /// outputs is present. Returns the stamp and whether work was done.
    fn stage(
        &self,
        rel: &str,
        key_parts: &[String],
        upstream: Vec<String>,
        build: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<(Stamp, bool)> {
        let dir = self.dir(rel);
        let key = sha256_hex(format!("{rel}\n{}\n{}", key_parts.join("\n"), upstream.join("\n")).as_bytes());
        if let Some(stamp) = Stamp::load(&dir)? {
            if stamp.key == key && stamp.outputs_intact(&dir) {
                log::info!("{rel}: up to date");
                return Ok((stamp, false));
            }
        }
        if dir.exists() && std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some() {
            if !self.resume {
                return Err(Error::Config(format!(
                    "{} holds stale or incomplete outputs; pass --resume to rebuild it",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("{rel}: running");
        let (res, trace) = profile_run(self.interval(), || build(&dir));
        res?;
        let mut files = Vec::new();
        list_files(&dir, Path::new(""), &mut files)?;
        let outputs = files
            .iter()
            .map(|r| Ok((r.to_string_lossy().replace('\\', "/"), file_sha256(&dir.join(r))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let stamp = Stamp {
            stage: rel.to_string(),
            key,
            config_hash: self.config_hash.clone(),
            upstream,
            outputs,
            resources: trace.summary(),
        };
        write_atomic(&dir.join(STAMP_FILE), serde_json::to_string_pretty(&stamp).expect("serializes").as_bytes())?;
        Ok((stamp, true))
    }

    fn require_stamp(&self, rel: &str, hint: &str) -> Result<Stamp> {
        Stamp::load(&self.dir(rel))?
            .ok_or_else(|| Error::MissingInput(format!("{} not found; run `{hint}` first", self.dir(rel).join(STAMP_FILE).display())))
    }

    fn pre(&self, v: &LabeledVolume) -> Result<LabeledVolume> {
        let [h, w] = self.cfg.data.slice_size;
        Ok(preprocess(v, (h, w), self.cfg.data.zscore)?.volume)
    }

    // Stage 0: data --------------------------------------------------------

    pub fn gen_data(&self) -> Result<DatasetManifest> {
        let d = &self.cfg.data;
        let key = vec![section_hash(&[d]), self.cfg.seed.to_string()];
        self.stage("data", &key, vec![], |dir| {
            build_dataset(&d.phantom, d.n_source, d.n_target, d.n_oracle, self.cfg.seed, dir).map(|_| ())
        })?;
        self.manifest()
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let path = self.dir("data").join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingInput(format!("{} not found; run `gen-data` first", path.display())));
        }
        DatasetManifest::load(&path)
    }

    fn load_split(&self, which: Split) -> Result<Vec<LabeledVolume>> {
        let m = self.manifest()?;
        let root = self.dir("data");
        let refs: Vec<_> = match which {
            Split::Source => m.source_train.iter().collect(),
            Split::Target => m.target_train.iter().collect(),
            Split::OracleA => m.paired_oracle.iter().map(|p| &p.a).collect(),
            Split::OracleB => m.paired_oracle.iter().map(|p| &p.b).collect(),
        };
        refs.into_iter().map(|r| self.pre(&m.load_volume(&root, r)?)).collect()
    }

    fn data_digest(&self) -> Result<String> {
        Ok(self.require_stamp("data", "gen-data")?.digest())
    }

    // Stages 1-2: translation ----------------------------------------------

    pub fn train_translate(&self) -> Result<Fidelity> {
        let upstream = vec![self.data_digest()?];
        let key = vec![section_hash(&[&self.cfg.translation]), section_hash(&[&self.cfg.data])];
        self.stage("translation", &key, upstream.clone(), |dir| {
            let src = self.load_split(Split::Source)?;
            let tgt = self.load_split(Split::Target)?;
            let run = train_translation(&src, &tgt, &self.cfg.translation)?;
            run.model.save(&dir.join("model.ckpt"), &self.config_hash, upstream.clone())?;
            let csv = provenance_line(&self.config_hash, &upstream) + &run.history_csv();
            write_atomic(&dir.join("history.csv"), csv.as_bytes())?;
            let fid = self.fidelity(&run.model)?;
            write_atomic(&dir.join("fidelity.json"), serde_json::to_string_pretty(&fid).expect("serializes").as_bytes())
        })?;
        self.load_fidelity()
    }

    pub fn load_fidelity(&self) -> Result<Fidelity> {
        let path = self.dir("translation").join("fidelity.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn translation_model(&self) -> Result<TranslationModel> {
        self.require_stamp("translation", "train-translate")?;
        TranslationModel::load(&self.dir("translation").join("model.ckpt"))
    }

    /// Reconstruction, cycle and profile checks on the held-out oracle pairs.
    pub fn fidelity(&self, model: &TranslationModel) -> Result<Fidelity> {
        let oa = self.load_split(Split::OracleA)?;
        let ob = self.load_split(Split::OracleB)?;
        let (lo, hi) = oa
            .iter()
            .chain(&ob)
            .flat_map(|v| v.intensities.iter())
            .fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let k = self.cfg.data.phantom.num_classes;
        let mut profile_distances = Vec::with_capacity(oa.len());
        for (i, (a, b)) in oa.iter().zip(&ob).enumerate() {
            let ab = translate_volume(a, b, model, derive_seed(self.cfg.seed, 42, i as u64))?;
            let pb = class_mean_profile(b, k);
            profile_distances.push((
                profile_distance(&class_mean_profile(&ab, k), &pb),
                profile_distance(&class_mean_profile(a, k), &pb),
            ));
        }
        Ok(Fidelity {
            intensity_range: (hi - lo) as f64,
            rec_a: reconstruction_error(model, &oa, DomainTag::A)?,
            rec_b: reconstruction_error(model, &ob, DomainTag::B)?,
            cycle: cycle_error(model, &oa, &ob)?,
            profile_distances,
        })
    }

    pub fn translate(&self) -> Result<Vec<LabeledVolume>> {
        let upstream = vec![self.data_digest()?, self.require_stamp("translation", "train-translate")?.digest()];
        let key = vec![section_hash(&[&self.cfg.data])];
        self.stage("translated", &key, upstream.clone(), |dir| {
            let model = self.translation_model()?;
            let src = self.load_split(Split::Source)?;
            let tgt = self.load_split(Split::Target)?;
            for (i, xa) in src.iter().enumerate() {
                let style = &tgt[i % tgt.len()];
                let mut v = translate_volume(xa, style, &model, derive_seed(self.cfg.seed, 41, i as u64))?;
                v.meta.config_hash = Some(self.config_hash.clone());
                v.meta.upstream.extend(upstream.iter().cloned());
                v.save(&dir.join(format!("{}.vol", v.id())))?;
            }
            Ok(())
        })?;
        self.load_translated()
    }

    fn load_translated(&self) -> Result<Vec<LabeledVolume>> {
        let stamp = self.require_stamp("translated", "translate")?;
        let dir = self.dir("translated");
        stamp
            .outputs
            .keys()
            .filter(|k| k.ends_with(".vol"))
            .map(|k| self.pre(&LabeledVolume::load(&dir.join(k))?))
            .collect()
    }

    // Stage 3: segmentation ------------------------------------------------

    /// Trains the Stage-3 network for `arm` (`no_uda` on raw sources, `drl`
    /// and `drl_st` on translated sources).
    pub fn train_seg(&self, arm: Arm) -> Result<SegmentationModel> {
        let rel = seg_dir(arm);
        let mut upstream = vec![self.data_digest()?];
        if arm != Arm::NoUda {
            upstream.push(self.require_stamp("translated", "translate")?.digest());
        }
        let key = vec![section_hash(&[&self.cfg.segmentation]), section_hash(&[&self.cfg.data])];
        self.stage(rel, &key, upstream.clone(), |dir| {
            let pairs = match arm {
                Arm::NoUda => self.load_split(Split::Source)?,
                _ => self.load_translated()?,
            };
            let run = train_segmentation(&pairs, &self.cfg.segmentation)?;
            run.model.save(&dir.join("model.ckpt"), &self.config_hash, upstream.clone())?;
            let csv = provenance_line(&self.config_hash, &upstream) + &history_csv(&run.history);
            write_atomic(&dir.join("history.csv"), csv.as_bytes())
        })?;
        SegmentationModel::load(&self.dir(rel).join("model.ckpt"))
    }

    // Stages 4-5: self-training --------------------------------------------

    fn round_dir(r: usize) -> String {
        format!("st/round_{r}")
    }

    fn model_dir(r: usize) -> String {
        format!("st/round_{r}/model")
    }

    /// Model that labels the targets of round `r` (1-based).
    fn round_input(&self, r: usize) -> Result<(SegmentationModel, String)> {
        let rel = if r == 1 { seg_dir(Arm::Drl).to_string() } else { Self::model_dir(r - 1) };
        let hint = if r == 1 { "train-seg --arm drl".to_string() } else { format!("finetune --round {}", r - 1) };
        let stamp = self.require_stamp(&rel, &hint)?;
        Ok((SegmentationModel::load(&self.dir(&rel).join("model.ckpt"))?, stamp.digest()))
    }

    /// Stage 4 of round `r`: pseudo-label every target volume.
    pub fn pseudo_label(&self, r: usize) -> Result<Vec<PseudoPair>> {
        self.check_round(r)?;
        let (model, model_digest) = self.round_input(r)?;
        let upstream = vec![self.data_digest()?, model_digest];
        let key = vec![section_hash(&[&self.cfg.self_training]), section_hash(&[&self.cfg.data])];
        let rel = format!("{}/pseudo", Self::round_dir(r));
        self.stage(&rel, &key, upstream.clone(), |dir| {
            let targets = self.load_split(Split::Target)?;
            let pairs = generate_pseudo_labels(&targets, &model, &self.cfg.self_training)?;
            for p in &pairs {
                let mut v = p.volume.clone();
                v.meta.config_hash = Some(self.config_hash.clone());
                v.meta.upstream.extend(upstream.iter().cloned());
                v.save(&dir.join(format!("{}.vol", v.id())))?;
                let conf: Vec<u8> = p.confidence.iter().flat_map(|c| c.to_le_bytes()).collect();
                write_atomic(&dir.join(format!("{}.conf", v.id())), &conf)?;
            }
            Ok(())
        })?;
        self.load_pseudo(r)
    }

    fn load_pseudo(&self, r: usize) -> Result<Vec<PseudoPair>> {
        let rel = format!("{}/pseudo", Self::round_dir(r));
        let stamp = self.require_stamp(&rel, &format!("pseudo-label --round {r}"))?;
        let dir = self.dir(&rel);
        stamp
            .outputs
            .keys()
            .filter(|k| k.ends_with(".vol"))
            .map(|k| {
                let volume = LabeledVolume::load(&dir.join(k))?;
                let cpath = dir.join(k.replace(".vol", ".conf"));
                let raw = std::fs::read(&cpath).map_err(|e| Error::io(&cpath, e))?;
                let confidence = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                let checkpoint_id = volume.meta.checkpoint_id.clone().unwrap_or_default();
                Ok(PseudoPair {
                    volume,
                    confidence,
                    checkpoint_id,
                })
            })
            .collect()
    }

    /// Stage 5 of round `r`: fine-tune on translated and pseudo-labeled data.
    pub fn finetune(&self, r: usize) -> Result<SegmentationModel> {
        self.check_round(r)?;
        let (model, model_digest) = self.round_input(r)?;
        let pseudo_stamp = self.require_stamp(&format!("{}/pseudo", Self::round_dir(r)), &format!("pseudo-label --round {r}"))?;
        let upstream = vec![
            self.require_stamp("translated", "translate")?.digest(),
            pseudo_stamp.digest(),
            model_digest,
        ];
        let key = vec![section_hash(&[&self.cfg.self_training]), section_hash(&[&self.cfg.segmentation])];
        let ckpt_rel = Self::model_dir(r);
        self.stage(&ckpt_rel, &key, upstream.clone(), |dir| {
            let synthetic = self.load_translated()?;
            let pseudo = self.load_pseudo(r)?;
            let seed = derive_seed(self.cfg.self_training.seed, 31, (r - 1) as u64);
            let run = finetune_combined(&synthetic, &pseudo, model, &self.cfg.self_training, seed)?;
            run.model.save(&dir.join("model.ckpt"), &self.config_hash, upstream.clone())?;
            let csv = provenance_line(&self.config_hash, &upstream) + &history_csv(&run.history);
            write_atomic(&dir.join("history.csv"), csv.as_bytes())
        })?;
        SegmentationModel::load(&self.dir(&ckpt_rel).join("model.ckpt"))
    }

    fn check_round(&self, r: usize) -> Result<()> {
        if r == 0 || r > self.cfg.self_training.rounds {
            return Err(Error::Config(format!(
                "round must lie in 1..={}, got {r}",
                self.cfg.self_training.rounds
            )));
        }
        Ok(())
    }

    /// All self-training rounds; returns the final model.
    pub fn self_train(&self) -> Result<SegmentationModel> {
        let mut model = None;
        for r in 1..=self.cfg.self_training.rounds {
            self.pseudo_label(r)?;
            model = Some(self.finetune(r)?);
        }
        Ok(model.expect("rounds >= 1"))
    }

    fn final_model_dir(&self, arm: Arm) -> String {
        match arm {
            Arm::DrlSt => Self::model_dir(self.cfg.self_training.rounds),
            _ => seg_dir(arm).to_string(),
        }
    }

    // Evaluation -----------------------------------------------------------

    pub fn evaluate(&self, arm: Arm) -> Result<ArmResult> {
        let rel = self.final_model_dir(arm);
        let hint = match arm {
            Arm::DrlSt => "finetune".to_string(),
            _ => format!("train-seg --arm {arm}"),
        };
        let model_stamp = self.require_stamp(&rel, &hint)?;
        let upstream = vec![self.data_digest()?, model_stamp.digest()];
        let key = vec![section_hash(&[&self.cfg.metrics]), section_hash(&[&self.cfg.data])];
        let eval_rel = format!("eval/{arm}");
        self.stage(&eval_rel, &key, upstream.clone(), |dir| {
            let model = SegmentationModel::load(&self.dir(&rel).join("model.ckpt"))?;
            let oracle = self.load_split(Split::OracleB)?;
            let report = evaluate(&model, &oracle, &self.cfg.metrics.tolerance)?;
            let mut efficiency = Vec::with_capacity(oracle.len());
            for v in &oracle {
                let (res, trace) = profile_run(self.interval(), || model.predict(v));
                res?;
                efficiency.push(EfficiencyRow {
                    case_id: v.id().to_string(),
                    image_size: v.shape,
                    summary: trace.summary(),
                });
            }
            let round_dsc = if arm == Arm::DrlSt {
                (1..=self.cfg.self_training.rounds)
                    .map(|r| {
                        let m = SegmentationModel::load(&self.dir(&Self::model_dir(r)).join("model.ckpt"))?;
                        Ok(evaluate(&m, &oracle, &self.cfg.metrics.tolerance)?.mean_dsc)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![]
            };
            let result = ArmResult {
                arm,
                checkpoint: self.dir(&rel).join("model.ckpt").to_string_lossy().into_owned(),
                checkpoint_id: model.checkpoint_id(),
                report,
                efficiency,
                round_dsc,
                config_hash: self.config_hash.clone(),
                upstream: upstream.clone(),
            };
            write_atomic(&dir.join("metrics.json"), serde_json::to_string_pretty(&result).expect("serializes").as_bytes())
        })?;
        let path = self.dir(&eval_rel).join("metrics.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    // Ablation -------------------------------------------------------------

    /// Runs every stage an arm needs, then evaluates it.
    pub fn run_arm(&self, arm: Arm) -> Result<ArmResult> {
        self.gen_data()?;
        match arm {
            Arm::NoUda => {
                self.train_seg(Arm::NoUda)?;
            }
            Arm::Drl | Arm::DrlSt => {
                self.train_translate()?;
                self.translate()?;
                self.train_seg(Arm::Drl)?;
                if arm == Arm::DrlSt {
                    self.self_train()?;
                }
            }
        }
        self.evaluate(arm)
    }

    /// Runs `arms` (all configured arms when empty) and writes the
    /// comparison report. Failing arms are recorded and the report flagged
    /// partial.
    pub fn ablate(&self, arms: &[Arm]) -> Result<AblationReport> {
        let arms = if arms.is_empty() { self.cfg.ablation.arms.clone() } else { arms.to_vec() };
        let manifest = self.gen_data()?;
        let mut report = AblationReport {
            config_hash: self.config_hash.clone(),
            data_manifest_hash: manifest.hash(),
            arms: vec![],
            failures: vec![],
            partial: false,
        };
        for arm in arms {
            match self.run_arm(arm) {
                Ok(r) => {
                    log::info!("arm {arm}: mean DSC {:.4} NSD {:.4}", r.report.mean_dsc, r.report.mean_nsd);
                    report.arms.push(r);
                }
                Err(e) => {
                    log::error!("arm {arm} failed: {e}");
                    report.failures.push((arm, e.to_string()));
                    report.partial = true;
                }
            }
        }
        self.write_ablation(&report)?;
        Ok(report)
    }

    pub fn write_ablation(&self, report: &AblationReport) -> Result<()> {
        let dir = self.dir("ablation");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(report).expect("serializes").as_bytes())?;
        let upstream: Vec<String> = report.arms.iter().map(|a| a.checkpoint_id.clone()).collect();
        let prov = provenance_line(&self.config_hash, &upstream);
        let k = self.cfg.data.phantom.num_classes;
        let names = class_names(k);
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let rows: Vec<(&str, &MetricsReport)> = report.arms.iter().map(|a| (a.arm.name(), &a.report)).collect();
        write_atomic(&dir.join("accuracy.csv"), (prov.clone() + &accuracy_table(&rows, &names)).as_bytes())?;
        let eff: Vec<EfficiencyRow> = report.arms.last().map(|a| a.efficiency.clone()).unwrap_or_default();
        write_atomic(&dir.join("efficiency.csv"), (prov + &efficiency_table(&eff)).as_bytes())
    }

    pub fn load_ablation(&self) -> Result<AblationReport> {
        let path = self.dir("ablation").join("report.json");
        if !path.exists() {
            return Err(Error::MissingInput(format!("{} not found; run `ablate` first", path.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Preprocessed volumes of one split.
    pub fn volumes(&self, which: Split) -> Result<Vec<LabeledVolume>> {
        self.load_split(which)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
    OracleA,
    OracleB,
}

pub fn seg_dir(arm: Arm) -> &'static str {
    match arm {
        Arm::NoUda => "seg/no_uda",
        Arm::Drl | Arm::DrlSt => "seg/drl",
    }
}

/// Display names of the foreground classes.
pub fn class_names(k: usize) -> Vec<String> {
    (1..k)
        .map(|c| ORGAN_NAMES.get(c - 1).map_or_else(|| format!("class{c}"), |s| s.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_round_trip() {
        for name in PRESETS {
            let c = PipelineConfig::preset(name).unwrap();
            let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            if name != "full" {
                c.resolve().unwrap();
            }
        }
        assert!(PipelineConfig::preset("nope").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(PipelineConfig::from_toml("[segmentation]\nepochz = 3\n").is_err());
        let c = PipelineConfig::from_toml("seed = 7\n[segmentation]\nepochs = 3\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.segmentation.epochs, 3);
        assert_eq!(c.translation, PipelineConfig::reference().translation);
    }

    #[test]
    fn preset_key_selects_base() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "preset = \"smoke\"\nseed = 3\n[data]\nn_source = 4\n").unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.data.n_source, 4);
        assert_eq!(c.data.n_target, PipelineConfig::smoke().data.n_target);
        std::fs::write(&p, "preset = \"smoke\"\n[data]\nnope = 1\n").unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }

    #[test]
    fn resolve_checks_cross_section_consistency() {
        let mut c = PipelineConfig::smoke();
        c.translation.slice_size = [64, 64];
        assert!(c.resolve().is_err());
        let mut c = PipelineConfig::smoke();
        c.segmentation.patch_size = [1, 64, 64];
        assert!(c.resolve().is_err());
        let c = PipelineConfig::smoke().resolve().unwrap();
        assert_ne!(c.translation.seed, c.segmentation.seed);
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let mut c = PipelineConfig::smoke();
        c.seed = u64::MAX;
        assert!(c.resolve().is_err());
    }

    #[test]
    fn per_class_tolerances_from_toml() {
        let c = PipelineConfig::from_toml("[metrics.tolerance]\ndefault_mm = 1.5\n[metrics.tolerance.per_class_mm]\n1 = 2.0\n4 = 0.5\n").unwrap();
        let t = &c.metrics.tolerance;
        assert_eq!(t.per_class_mm.get(&1), Some(&2.0));
        assert_eq!(t.per_class_mm.get(&4), Some(&0.5));
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), c);
        assert!(PipelineConfig::from_toml("[metrics.tolerance.per_class_mm]\nliver = 2.0\n").is_err());
    }

    #[test]
    fn arm_names() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
        }
        assert!("cyclegan".parse::<Arm>().is_err());
    }
}
