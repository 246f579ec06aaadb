//! TOML run configuration for the command-line pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atlas::AtlasPartition;
use crate::cohort::{default_attributes, AttributeDef, CohortSpec};
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::instruct::Stage;
use crate::pipeline::LmShape;
use crate::seed::derive_seed;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasSection {
    pub rois: usize,
    pub subnets: usize,
    pub unassigned: usize,
    /// CSV partition file; overrides the synthetic round-robin layout.
    pub partition_file: Option<PathBuf>,
}

impl Default for AtlasSection {
    fn default() -> Self {
        Self {
            rois: 116,
            subnets: 7,
            unassigned: 26,
            partition_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub subjects: usize,
    pub time_points: usize,
    pub base_noise: f64,
    pub within_subnet: f64,
    pub test_fraction: f64,
    /// Replaces the built-in attribute list when present.
    pub attributes: Option<Vec<AttributeDef>>,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self {
            subjects: 400,
            time_points: 180,
            base_noise: 0.5,
            within_subnet: 0.2,
            test_fraction: 0.2,
            attributes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub length: usize,
    pub step: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            length: 100,
            step: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub tau: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self { tau: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub gcn_hidden: usize,
    pub proj_hidden: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            gcn_hidden: 256,
            proj_hidden: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Attributes to synthesize; empty means all.
    pub attributes: Vec<String>,
    pub stage1_train: usize,
    pub stage1_test: usize,
    pub stage2_train: usize,
    pub stage2_test: usize,
    /// Text-only pairs used to pretrain the language model.
    pub pretrain_pairs: usize,
    pub described_fraction: f64,
    /// Directory of per-attribute template files; built-ins when absent.
    pub templates_dir: Option<PathBuf>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            attributes: Vec::new(),
            stage1_train: 8000,
            stage1_test: 800,
            stage2_train: 1480,
            stage2_test: 400,
            pretrain_pairs: 4000,
            described_fraction: 0.8,
            templates_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
}

impl TrainSection {
    fn from_config(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            epochs: c.epochs,
            warmup_ratio: c.warmup_ratio,
            weight_decay: c.weight_decay,
        }
    }

    fn pretrain() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 2,
            ..Self::from_config(&TrainConfig::stage_one())
        }
    }

    fn check(&self, section: &str, out: &mut Vec<String>) {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("{section}.learning_rate: must be positive"));
        }
        if self.batch_size == 0 {
            out.push(format!("{section}.batch_size: must be positive"));
        }
        if self.epochs == 0 {
            out.push(format!("{section}.epochs: must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            out.push(format!("{section}.warmup_ratio: must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("{section}.weight_decay: must be non-negative"));
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_config(&TrainConfig::stage_one())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    pub temperature: f64,
    pub restrict_labels: bool,
    pub max_answer_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            samples: d.samples,
            temperature: d.temperature,
            restrict_labels: d.restrict_labels,
            max_answer_len: d.max_answer_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BiomarkerSection {
    /// Text file with one subject id per line restricting the analysis.
    pub subjects_file: Option<PathBuf>,
    /// Cap on analysed test pairs, taken in file order.
    pub max_pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub atlas: AtlasSection,
    pub cohort: CohortSection,
    pub windowing: WindowSection,
    pub graph: GraphSection,
    pub encoder: EncoderSection,
    pub lm: LmShape,
    pub synth: SynthSection,
    pub pretrain: TrainSection,
    pub stage1: TrainSection,
    pub stage2: TrainSection,
    pub eval: EvalSection,
    pub biomarker: BiomarkerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            atlas: AtlasSection::default(),
            cohort: CohortSection::default(),
            windowing: WindowSection::default(),
            graph: GraphSection::default(),
            encoder: EncoderSection::default(),
            lm: LmShape::default(),
            synth: SynthSection::default(),
            pretrain: TrainSection::pretrain(),
            stage1: TrainSection::default(),
            stage2: TrainSection::from_config(&TrainConfig::stage_two()),
            eval: EvalSection::default(),
            biomarker: BiomarkerSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; relative paths inside are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut cfg.atlas.partition_file);
        resolve(&mut cfg.synth.templates_dir);
        resolve(&mut cfg.biomarker.subjects_file);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every field and reports all problems at once, one per line.
    pub fn validate(&self) -> Result<()> {
        let mut out = Vec::new();
        let a = &self.atlas;
        match &a.partition_file {
            Some(p) if !p.exists() => out.push(format!(
                "atlas.partition_file: {} does not exist",
                p.display()
            )),
            Some(_) => {}
            None => {
                if a.subnets == 0 {
                    out.push("atlas.subnets: must be positive".into());
                }
                if a.unassigned + a.subnets > a.rois {
                    out.push(format!(
                        "atlas.unassigned: {} unassigned plus {} subnetworks exceeds {} regions",
                        a.unassigned, a.subnets, a.rois
                    ));
                }
            }
        }
        let c = &self.cohort;
        if c.subjects < 2 {
            out.push("cohort.subjects: need at least 2".into());
        }
        if !(0.0..1.0).contains(&c.test_fraction) {
            out.push("cohort.test_fraction: must lie in [0, 1)".into());
        }
        if !(c.base_noise >= 0.0) {
            out.push("cohort.base_noise: must be non-negative".into());
        }
        let w = &self.windowing;
        if w.length < 2 {
            out.push("windowing.length: must be at least 2".into());
        }
        if w.step == 0 {
            out.push("windowing.step: must be positive".into());
        }
        if w.length > c.time_points {
            out.push(format!(
                "windowing.length: {} exceeds cohort.time_points {}",
                w.length, c.time_points
            ));
        }
        if !(-1.0..=1.0).contains(&self.graph.tau) {
            out.push("graph.tau: must lie in [-1, 1]".into());
        }
        if self.encoder.gcn_hidden == 0 {
            out.push("encoder.gcn_hidden: must be positive".into());
        }
        if self.encoder.proj_hidden == 0 {
            out.push("encoder.proj_hidden: must be positive".into());
        }
        let lm = &self.lm;
        if lm.d_model == 0 {
            out.push("lm.d_model: must be positive".into());
        } else if lm.heads == 0 || lm.d_model % lm.heads != 0 {
            out.push(format!(
                "lm.heads: {} does not divide lm.d_model {}",
                lm.heads, lm.d_model
            ));
        }
        if lm.blocks == 0 {
            out.push("lm.blocks: must be positive".into());
        }
        if lm.ff_hidden == 0 {
            out.push("lm.ff_hidden: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.synth.described_fraction) {
            out.push("synth.described_fraction: must lie in [0, 1]".into());
        }
        if let Some(d) = &self.synth.templates_dir {
            if !d.is_dir() {
                out.push(format!(
                    "synth.templates_dir: {} is not a directory",
                    d.display()
                ));
            }
        }
        let known = self.attributes();
        for name in &self.synth.attributes {
            if !known.iter().any(|d| &d.name == name) {
                out.push(format!("synth.attributes: unknown attribute {name}"));
            }
        }
        self.pretrain.check("pretrain", &mut out);
        self.stage1.check("stage1", &mut out);
        self.stage2.check("stage2", &mut out);
        if self.eval.samples == 0 {
            out.push("eval.samples: must be positive".into());
        }
        if !(self.eval.temperature > 0.0) {
            out.push("eval.temperature: must be positive".into());
        }
        if self.eval.max_answer_len == 0 {
            out.push("eval.max_answer_len: must be positive".into());
        }
        if let Some(p) = &self.biomarker.subjects_file {
            if !p.exists() {
                out.push(format!(
                    "biomarker.subjects_file: {} does not exist",
                    p.display()
                ));
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(out.join("\n")))
        }
    }

    pub fn partition(&self) -> Result<AtlasPartition> {
        match &self.atlas.partition_file {
            Some(p) => AtlasPartition::load(p),
            None => AtlasPartition::round_robin(
                self.atlas.rois,
                self.atlas.subnets,
                self.atlas.unassigned,
            ),
        }
    }

    pub fn attributes(&self) -> Vec<AttributeDef> {
        self.cohort
            .attributes
            .clone()
            .unwrap_or_else(default_attributes)
    }

    /// Names of the attributes to synthesize.
    pub fn synth_attributes(&self) -> Vec<String> {
        if self.synth.attributes.is_empty() {
            self.attributes().into_iter().map(|d| d.name).collect()
        } else {
            self.synth.attributes.clone()
        }
    }

    pub fn cohort_spec(&self) -> Result<CohortSpec> {
        Ok(CohortSpec {
            n_subjects: self.cohort.subjects,
            time_points: self.cohort.time_points,
            partition: self.partition()?,
            attributes: self.attributes(),
            base_noise: self.cohort.base_noise,
            within_subnet: self.cohort.within_subnet,
            test_fraction: self.cohort.test_fraction,
            seed: self.step_seed("cohort"),
        })
    }

    pub fn encoder_dims(&self, rois: usize) -> EncoderDims {
        EncoderDims {
            rois,
            gcn_hidden: self.encoder.gcn_hidden,
            proj_hidden: self.encoder.proj_hidden,
            model: self.lm.d_model,
        }
    }

    /// Seed of one pipeline step, derived from the run seed.
    pub fn step_seed(&self, step: &str) -> u64 {
        derive_seed(self.seed, step, 0)
    }

    pub fn train_config(&self, which: &str) -> TrainConfig {
        let (s, stage) = match which {
            "pretrain" => (&self.pretrain, Stage::One),
            "stage1" => (&self.stage1, Stage::One),
            _ => (&self.stage2, Stage::Two),
        };
        TrainConfig {
            stage,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            epochs: s.epochs,
            warmup_ratio: s.warmup_ratio,
            weight_decay: s.weight_decay,
            seed: self.step_seed(which),
            deterministic: self.deterministic,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            samples: self.eval.samples,
            temperature: self.eval.temperature,
            seed: self.step_seed("eval"),
            restrict_labels: self.eval.restrict_labels,
            max_answer_len: self.eval.max_answer_len,
        }
    }
}
