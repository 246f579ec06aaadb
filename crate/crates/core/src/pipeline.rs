//! In-memory end-to-end runs: cohort, FCNs, synthesis, pretraining, the two
//! training stages, evaluation and interaction maps.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::AtlasPartition;
use crate::biomarker::{analyze, max_off_diagonal};
use crate::cohort::{generate_in_memory, AttributeDef, CohortSpec, SubjectRecord};
use crate::encoder::{EncoderDims, EncoderParams, PreparedFcn};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, EvalOptions, TaskMetrics};
use crate::fcn::{pearson_fcn, sliding_windows, BoldSeries, FcnMatrix};
use crate::instruct::{
    synth_dataset, vocabulary_words, FcnRef, InstructionPair, Paradigm, ParadigmCounts,
    PromptTemplateSet, Stage, SynthRequest,
};
use crate::seed::derive_seed;
use crate::toylm::{assemble, decode, DecodeMode, LmConfig, LmParams, SpanFill, Tokenizer};
use crate::training::{
    build_examples, pretrain_lm, text_examples, train_stage1, train_stage2, FcnStore, LogRecord,
    ModelParams, TrainConfig,
};

/// Relative path of an original (`window = None`) or windowed FCN file.
pub fn fcn_path(subject_id: &str, window: Option<usize>) -> String {
    match window {
        Some(k) => format!("fcn/{subject_id}_w{k}.fcn"),
        None => format!("fcn/{subject_id}.fcn"),
    }
}

/// Original FCN plus one FCN per sliding window for one subject.
pub fn subject_fcns(
    series: &BoldSeries,
    window_len: usize,
    window_step: usize,
) -> Result<Vec<(Option<usize>, FcnMatrix)>> {
    let mut out = vec![(None, pearson_fcn(series)?)];
    for (k, w) in sliding_windows(series, window_len, window_step)?
        .iter()
        .enumerate()
    {
        out.push((Some(k), pearson_fcn(w)?));
    }
    Ok(out)
}

/// FCNs of a whole cohort, held in memory under their relative paths.
pub fn build_fcn_store(
    subjects: &[(SubjectRecord, BoldSeries)],
    partition: &AtlasPartition,
    tau: f64,
    window_len: usize,
    window_step: usize,
) -> Result<(FcnStore, Vec<FcnRef>)> {
    let per_subject = subjects
        .par_iter()
        .map(|(r, s)| {
            Ok((
                r.subject_id.clone(),
                subject_fcns(s, window_len, window_step)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut store = FcnStore::new(partition.clone(), tau);
    let mut refs = Vec::new();
    for (id, fcns) in per_subject {
        for (window, fcn) in fcns {
            let path = fcn_path(&id, window);
            store.insert(&path, fcn)?;
            refs.push(FcnRef {
                subject_id: id.clone(),
                path,
                window,
            });
        }
    }
    Ok((store, refs))
}

pub fn build_tokenizer(attributes: &[AttributeDef], templates: &PromptTemplateSet) -> Tokenizer {
    Tokenizer::from_words(vocabulary_words(attributes, templates))
}

/// Longest assembled sequence any template can produce, plus room for label
/// restriction and a short answer.
pub fn required_max_len(
    templates: &PromptTemplateSet,
    attributes: &[AttributeDef],
    span_len: usize,
) -> usize {
    let mut longest = 0;
    for def in attributes {
        for p in Paradigm::ALL {
            for t in templates.get(&def.name, p).unwrap_or(&[]) {
                let words = t.split_whitespace().count();
                longest = longest.max(words + p.arity() * (span_len - 1));
            }
        }
    }
    let labels = attributes
        .iter()
        .filter_map(|d| d.labels().map(<[String]>::len))
        .max()
        .unwrap_or(2)
        .max(2);
    // bos, sep, candidate / interval words, "choose from a or b ..", answer, eos
    longest + 2 + 4 + 2 + 2 * labels + 6
}

/// Greedy answer to a prompt whose `<fcn>` placeholders are filled by
/// `fcns` in order.
pub fn answer_prompt(
    model: &ModelParams,
    tok: &Tokenizer,
    partition: &AtlasPartition,
    tau: f64,
    prompt: &str,
    fcns: &[FcnMatrix],
    max_answer_len: usize,
) -> Result<String> {
    let tokens = fcns
        .iter()
        .map(|f| {
            Ok(PreparedFcn::new(f, partition, tau)?
                .forward(&model.encoder)
                .0)
        })
        .collect::<Result<Vec<_>>>()?;
    let asm = assemble(
        tok,
        &tok.tokenize(prompt),
        partition.token_count(),
        fcns.len(),
        &[],
    )?;
    let fills: Vec<SpanFill<'_>> = tokens.iter().map(|t| SpanFill::Tokens(t.view())).collect();
    decode(
        &model.lm,
        tok,
        &asm,
        &fills,
        DecodeMode::Greedy,
        max_answer_len,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmShape {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
}

impl Default for LmShape {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            ff_hidden: 256,
        }
    }
}

/// One binary attribute planted on a subnetwork pair, trained through both
/// stages at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub subjects: usize,
    pub time_points: usize,
    pub rois: usize,
    pub subnets: usize,
    pub unassigned: usize,
    /// Deal ROIs to subnetworks in a seeded random order instead of
    /// round-robin by index.
    pub shuffle_atlas: bool,
    pub delta: f64,
    pub effect_subnets: (usize, usize),
    pub base_noise: f64,
    pub within_subnet: f64,
    pub test_fraction: f64,
    pub window_len: usize,
    pub window_step: usize,
    pub tau: f64,
    pub gcn_hidden: usize,
    pub proj_hidden: usize,
    pub lm: LmShape,
    pub pretrain_pairs: usize,
    pub described_fraction: f64,
    pub pretrain: TrainConfig,
    pub stage1_pairs: usize,
    pub stage1: TrainConfig,
    pub stage2_pairs: usize,
    pub stage2: TrainConfig,
    /// Held-out judgment pairs over original FCNs of test subjects.
    pub eval_pairs: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        let pretrain = TrainConfig {
            learning_rate: 3e-3,
            epochs: 2,
            ..TrainConfig::stage_one()
        };
        Self {
            subjects: 400,
            time_points: 180,
            rois: 32,
            subnets: 4,
            unassigned: 8,
            shuffle_atlas: false,
            delta: 0.4,
            effect_subnets: (1, 2),
            base_noise: 0.5,
            within_subnet: 0.2,
            test_fraction: 0.2,
            window_len: 100,
            window_step: 20,
            tau: 0.5,
            gcn_hidden: 64,
            proj_hidden: 64,
            lm: LmShape::default(),
            pretrain_pairs: 4000,
            described_fraction: 0.8,
            pretrain,
            stage1_pairs: 8000,
            stage1: TrainConfig::stage_one(),
            stage2_pairs: 1480,
            stage2: TrainConfig::stage_two(),
            eval_pairs: 400,
            seed: 0,
        }
    }
}

impl PlantedConfig {
    /// Stage-I run on a seeded shuffled atlas, for repeated interaction-map
    /// checks that share one pretrained language model.
    pub fn map_run(seed: u64) -> Self {
        Self {
            shuffle_atlas: true,
            eval_pairs: 200,
            seed,
            ..Self::default()
        }
    }
}

pub const PLANTED_ATTRIBUTE: &str = "gender";

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedOutcome {
    pub acc_before: f64,
    pub acc_stage1: f64,
    pub acc_stage2: Option<f64>,
    pub lm_unchanged_by_stage1: bool,
    pub pretrain_log: Vec<LogRecord>,
    pub stage1_log: Vec<LogRecord>,
    pub stage2_log: Vec<LogRecord>,
    /// Subnetwork-level interaction map after Stage I, `(N+2) x (N+2)`.
    pub subnet_map: Array2<f64>,
    /// The same map with the untrained encoder.
    pub baseline_map: Array2<f64>,
    pub partition: AtlasPartition,
}

impl PlantedOutcome {
    /// Whether the largest off-diagonal cell falls on the given 1-based
    /// subnetwork pair (either orientation).
    pub fn peak_on(&self, pair: (usize, usize)) -> bool {
        match max_off_diagonal(&self.subnet_map) {
            Some((i, j)) => (i + 1, j + 1) == pair || (j + 1, i + 1) == pair,
            None => false,
        }
    }
}

fn planted_partition(cfg: &PlantedConfig) -> Result<AtlasPartition> {
    let base = AtlasPartition::round_robin(cfg.rois, cfg.subnets, cfg.unassigned)?;
    if !cfg.shuffle_atlas {
        return Ok(base);
    }
    let mut perm: Vec<usize> = (0..cfg.rois).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed, "atlas", 0,
    )));
    let shuffled = base.permuted(&perm)?;
    // Keep region names in index order so only the assignment moves.
    AtlasPartition::new(
        base.roi_names().to_vec(),
        shuffled.assignments().to_vec(),
        cfg.subnets,
    )
}

fn judgment_accuracy(
    model: &ModelParams,
    tok: &Tokenizer,
    store: &FcnStore,
    attrs: &[AttributeDef],
    pairs: &[InstructionPair],
) -> Result<f64> {
    let out = evaluate_run(model, tok, store, attrs, pairs, &EvalOptions::default())?;
    out.reports
        .iter()
        .find_map(|r| match r.metrics {
            TaskMetrics::Classification(m) if r.task.ends_with("/judgment") => Some(m.acc),
            _ => None,
        })
        .ok_or_else(|| Error::Dataset("no judgment pairs to evaluate".into()))
}

fn only(paradigm: Paradigm, n: usize) -> ParadigmCounts {
    let mut c = ParadigmCounts::default();
    match paradigm {
        Paradigm::Predictive => c.predictive = n,
        Paradigm::Judgment => c.judgment = n,
        Paradigm::Comparative => c.comparative = n,
    }
    c
}

/// Everything a planted run needs before any training.
pub struct PlantedData {
    pub partition: AtlasPartition,
    pub attributes: Vec<AttributeDef>,
    pub records: Vec<SubjectRecord>,
    pub store: FcnStore,
    pub templates: PromptTemplateSet,
    pub tokenizer: Tokenizer,
    pub pretrain_pairs: Vec<InstructionPair>,
    pub stage1_pairs: Vec<InstructionPair>,
    pub stage2_pairs: Vec<InstructionPair>,
    pub eval_pairs: Vec<InstructionPair>,
}

impl PlantedData {
    /// Cohort, FCNs and instruction pairs for one configuration.
    pub fn build(cfg: &PlantedConfig) -> Result<Self> {
        let partition = planted_partition(cfg)?;
        let attributes = vec![
            AttributeDef::categorical(PLANTED_ATTRIBUTE, &["female", "male"])
                .with_effect(cfg.effect_subnets, cfg.delta),
        ];
        let spec = CohortSpec {
            n_subjects: cfg.subjects,
            time_points: cfg.time_points,
            partition: partition.clone(),
            attributes: attributes.clone(),
            base_noise: cfg.base_noise,
            within_subnet: cfg.within_subnet,
            test_fraction: cfg.test_fraction,
            seed: derive_seed(cfg.seed, "cohort", 0),
        };
        let subjects = generate_in_memory(&spec)?;
        let (store, refs) = build_fcn_store(
            &subjects,
            &partition,
            cfg.tau,
            cfg.window_len,
            cfg.window_step,
        )?;
        let records: Vec<SubjectRecord> = subjects.into_iter().map(|(r, _)| r).collect();
        let templates = PromptTemplateSet::defaults(&attributes);
        let tokenizer = build_tokenizer(&attributes, &templates);
        let names = vec![PLANTED_ATTRIBUTE.to_string()];
        let synth = |stage: Stage, train: ParadigmCounts, test: ParadigmCounts, tag: &str| {
            synth_dataset(
                &records,
                &refs,
                &attributes,
                &templates,
                &SynthRequest {
                    stage,
                    attributes: names.clone(),
                    train,
                    test,
                    seed: derive_seed(cfg.seed, tag, 0),
                },
            )
            .map(|o| o.pairs)
        };
        let none = ParadigmCounts::default();
        let mix = ParadigmCounts::reference_mix;
        let pretrain_pairs = synth(
            Stage::One,
            mix(Stage::One, cfg.pretrain_pairs),
            none,
            "pretrain",
        )?;
        let stage1_pairs = synth(
            Stage::One,
            mix(Stage::One, cfg.stage1_pairs),
            none,
            "stage1",
        )?;
        let stage2_pairs = synth(
            Stage::Two,
            mix(Stage::Two, cfg.stage2_pairs),
            none,
            "stage2",
        )?;
        let eval_pairs = synth(
            Stage::Two,
            none,
            only(Paradigm::Judgment, cfg.eval_pairs),
            "eval",
        )?;
        Ok(Self {
            partition,
            attributes,
            records,
            store,
            templates,
            tokenizer,
            pretrain_pairs,
            stage1_pairs,
            stage2_pairs,
            eval_pairs,
        })
    }

    pub fn lm_config(&self, shape: &LmShape) -> LmConfig {
        LmConfig {
            vocab: self.tokenizer.len(),
            d_model: shape.d_model,
            heads: shape.heads,
            blocks: shape.blocks,
            ff_hidden: shape.ff_hidden,
            max_len: required_max_len(&self.templates, &self.attributes, self.store.span_len()),
        }
    }

    /// Text-only pretraining of a fresh language model on this data.
    pub fn pretrain(&self, cfg: &PlantedConfig) -> Result<(LmParams, Vec<LogRecord>)> {
        let mut lm = LmParams::init(self.lm_config(&cfg.lm), derive_seed(cfg.seed, "lm-init", 0))?;
        let text = text_examples(
            &self.pretrain_pairs,
            &self.records,
            &self.attributes,
            &self.tokenizer,
            self.store.span_len(),
            cfg.described_fraction,
            derive_seed(cfg.seed, "text", 0),
        )?;
        let train = TrainConfig {
            seed: derive_seed(cfg.seed, "pretrain-order", 0),
            ..cfg.pretrain.clone()
        };
        let log = pretrain_lm(&mut lm, &text, &train)?;
        Ok((lm, log))
    }

    pub fn judgment_accuracy(&self, model: &ModelParams) -> Result<f64> {
        judgment_accuracy(
            model,
            &self.tokenizer,
            &self.store,
            &self.attributes,
            &self.eval_pairs,
        )
    }

    pub fn subnet_map(&self, model: &ModelParams) -> Result<Array2<f64>> {
        let pairs: Vec<&InstructionPair> = self.eval_pairs.iter().collect();
        Ok(analyze(model, &self.tokenizer, &self.store, &pairs)?
            .maps
            .subnet_map)
    }

    /// Stage I from a pretrained language model, then optionally Stage II.
    pub fn train(
        &self,
        cfg: &PlantedConfig,
        lm: LmParams,
        pretrain_log: Vec<LogRecord>,
        run_stage2: bool,
    ) -> Result<PlantedOutcome> {
        let dims = EncoderDims {
            rois: self.partition.roi_count(),
            gcn_hidden: cfg.gcn_hidden,
            proj_hidden: cfg.proj_hidden,
            model: cfg.lm.d_model,
        };
        let mut model = ModelParams {
            encoder: EncoderParams::init(dims, derive_seed(cfg.seed, "encoder-init", 0)),
            lm,
        };
        let acc_before = self.judgment_accuracy(&model)?;
        let baseline_map = self.subnet_map(&model)?;
        let lm_before = model.lm.clone();
        let s1 = build_examples(&self.stage1_pairs, &self.tokenizer, &self.store)?;
        let stage1_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, "stage1-order", 0),
            ..cfg.stage1.clone()
        };
        let stage1_log = train_stage1(&mut model, &self.store, &s1, &stage1_cfg)?;
        let lm_unchanged_by_stage1 = model.lm == lm_before;
        let acc_stage1 = self.judgment_accuracy(&model)?;
        let subnet_map = self.subnet_map(&model)?;
        let (acc_stage2, stage2_log) = if run_stage2 {
            let s2 = build_examples(&self.stage2_pairs, &self.tokenizer, &self.store)?;
            let stage2_cfg = TrainConfig {
                seed: derive_seed(cfg.seed, "stage2-order", 0),
                ..cfg.stage2.clone()
            };
            let log = train_stage2(&mut model, &self.store, &s2, &stage2_cfg)?;
            (Some(self.judgment_accuracy(&model)?), log)
        } else {
            (None, Vec::new())
        };
        Ok(PlantedOutcome {
            acc_before,
            acc_stage1,
            acc_stage2,
            lm_unchanged_by_stage1,
            pretrain_log,
            stage1_log,
            stage2_log,
            subnet_map,
            baseline_map,
            partition: self.partition.clone(),
        })
    }
}

/// Runs pretraining, Stage I and (when `run_stage2`) Stage II on a
/// freshly generated cohort.
pub fn run_planted(cfg: &PlantedConfig, run_stage2: bool) -> Result<PlantedOutcome> {
    let data = PlantedData::build(cfg)?;
    let (lm, log) = data.pretrain(cfg)?;
    data.train(cfg, lm, log, run_stage2)
}

/// Stage-I runs on seeded shuffled atlases that share one language model,
/// pretrained on the cohort of the first seed.
pub fn run_map_series(seeds: &[u64]) -> Result<Vec<PlantedOutcome>> {
    let Some(&first) = seeds.first() else {
        return Ok(Vec::new());
    };
    let base = PlantedConfig::map_run(first);
    let (lm, log) = PlantedData::build(&base)?.pretrain(&base)?;
    seeds
        .iter()
        .map(|&seed| {
            let cfg = PlantedConfig::map_run(seed);
            PlantedData::build(&cfg)?.train(&cfg, lm.clone(), log.clone(), false)
        })
        .collect()
}

/// Subject ids on each side of the split; used to check disjointness.
pub fn split_subjects(pairs: &[InstructionPair]) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for p in pairs {
        let side = match p.split {
            crate::cohort::Split::Train => &mut train,
            crate::cohort::Split::Test => &mut test,
        };
        side.extend(p.subject_ids.iter().cloned());
    }
    (train, test)
}
