//! File-based pipeline steps behind the command-line subcommands.
//!
//! Every step reads earlier artifacts from the run directory, writes its own
//! outputs into a hidden staging directory and then swaps that directory
//! into place, so an interrupted step leaves the previous artifacts intact.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::AtlasPartition;
use crate::biomarker::{analyze, emit_plot_data, filter_pairs, group_labels, token_labels};
use crate::cohort::{generate_cohort, CohortManifest, SubjectRecord, MANIFEST_FILE};
use crate::config::RunConfig;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, exit_code, render_table, reports_jsonl};
use crate::fcn::io::{read_bold_csv, write_atomic, write_fcn};
use crate::instruct::{
    read_jsonl, synth_dataset, write_jsonl, FcnRef, InstructionPair, ParadigmCounts,
    PromptTemplateSet, Stage, SynthRequest,
};
use crate::pipeline::{build_tokenizer, fcn_path, required_max_len, subject_fcns};
use crate::toylm::{LmConfig, LmParams, Tokenizer};
use crate::training::checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
};
use crate::training::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use crate::training::{
    append_log, build_examples, pretrain_lm, text_examples, train_stage1, train_stage2, FcnStore,
    LogRecord, ModelParams,
};

pub const COHORT_DIR: &str = "cohort";
pub const FCN_DIR: &str = "fcn";
pub const SYNTH_DIR: &str = "synth";
pub const LM_DIR: &str = "lm";
pub const EVAL_DIR: &str = "eval";
pub const BIOMARKER_DIR: &str = "biomarker";
pub const GRADCHECK_DIR: &str = "gradcheck";

pub const ATLAS_FILE: &str = "atlas.csv";
pub const REFS_FILE: &str = "refs.jsonl";
pub const PRETRAIN_PAIRS_FILE: &str = "pretrain.jsonl";
pub const TEMPLATES_DIR: &str = "templates";
pub const SHORTFALL_FILE: &str = "shortfalls.txt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Instruction file of one stage inside the synth directory.
pub fn stage_file(stage: Stage) -> &'static str {
    match stage {
        Stage::One => "stage1.jsonl",
        Stage::Two => "stage2.jsonl",
    }
}

pub fn stage_dir(stage: Stage) -> &'static str {
    match stage {
        Stage::One => "stage1",
        Stage::Two => "stage2",
    }
}

/// Builds a step's outputs in `<root>/.<name>.tmp` and promotes them to
/// `<root>/<name>` once `build` succeeds.
pub fn promote_dir<T>(
    root: &Path,
    name: &str,
    build: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let staging = root.join(format!(".{name}.tmp"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let value = match build(&staging) {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let target = root.join(name);
    let old = root.join(format!(".{name}.old"));
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    if target.exists() {
        fs::rename(&target, &old).map_err(|e| Error::io(&target, e))?;
    }
    fs::rename(&staging, &target).map_err(|e| Error::io(&target, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(value)
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "{} not found; run `{produced_by}` first",
            path.display()
        )))
    }
}

fn load_partition(root: &Path) -> Result<AtlasPartition> {
    let path = root.join(COHORT_DIR).join(ATLAS_FILE);
    require(&path, "cohort")?;
    AtlasPartition::load(&path)
}

fn load_records(root: &Path) -> Result<Vec<SubjectRecord>> {
    let path = root.join(COHORT_DIR).join(MANIFEST_FILE);
    require(&path, "cohort")?;
    Ok(CohortManifest::load(&path)?.records().cloned().collect())
}

fn templates(cfg: &RunConfig, root: &Path) -> Result<PromptTemplateSet> {
    let attrs = cfg.attributes();
    let dir = root.join(SYNTH_DIR).join(TEMPLATES_DIR);
    if dir.is_dir() {
        PromptTemplateSet::load(&dir, &attrs)
    } else {
        match &cfg.synth.templates_dir {
            Some(d) => PromptTemplateSet::load(d, &attrs),
            None => Ok(PromptTemplateSet::defaults(&attrs)),
        }
    }
}

fn load_pairs(root: &Path, stage: Stage) -> Result<Vec<InstructionPair>> {
    let path = root.join(SYNTH_DIR).join(stage_file(stage));
    require(&path, "synth")?;
    read_jsonl(&path)
}

fn load_tokenizer(root: &Path) -> Result<Tokenizer> {
    let path = root
        .join(SYNTH_DIR)
        .join(crate::training::checkpoint::VOCAB_FILE);
    require(&path, "synth")?;
    Tokenizer::load(&path)
}

/// Store holding every FCN the given pairs reference.
fn store_for(cfg: &RunConfig, root: &Path, pairs: &[&InstructionPair]) -> Result<FcnStore> {
    let mut store = FcnStore::new(load_partition(root)?, cfg.graph.tau);
    store.load_refs(
        root,
        pairs
            .iter()
            .flat_map(|p| p.fcn_refs.iter().map(String::as_str)),
    )?;
    Ok(store)
}

pub fn run_cohort(cfg: &RunConfig, root: &Path) -> Result<usize> {
    let spec = cfg.cohort_spec()?;
    spec.validate()?;
    promote_dir(root, COHORT_DIR, |dir| {
        spec.partition.save(&dir.join(ATLAS_FILE))?;
        let manifest = generate_cohort(&spec, dir)?;
        Ok(manifest.entries.len())
    })
}

/// Writes one original and one file per sliding window for every subject.
pub fn run_fcn(cfg: &RunConfig, root: &Path) -> Result<usize> {
    let manifest_path = root.join(COHORT_DIR).join(MANIFEST_FILE);
    require(&manifest_path, "cohort")?;
    let manifest = CohortManifest::load(&manifest_path)?;
    let (len, step) = (cfg.windowing.length, cfg.windowing.step);
    promote_dir(root, FCN_DIR, |dir| {
        let per_subject = manifest
            .entries
            .par_iter()
            .map(|e| {
                let id = &e.record.subject_id;
                let (series, _) = read_bold_csv(&root.join(COHORT_DIR).join(&e.bold_path), id)?;
                let mut refs = Vec::new();
                for (window, fcn) in subject_fcns(&series, len, step)? {
                    let rel = fcn_path(id, window);
                    let file = Path::new(&rel)
                        .file_name()
                        .expect("fcn path has a file name");
                    write_fcn(&fcn, &dir.join(file))?;
                    refs.push(FcnRef {
                        subject_id: id.clone(),
                        path: rel,
                        window,
                    });
                }
                Ok(refs)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<FcnRef> = per_subject.into_iter().flatten().collect();
        write_jsonl(&refs, &dir.join(REFS_FILE))?;
        Ok(refs.len())
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub stage1: usize,
    pub stage2: usize,
    pub pretrain: usize,
    pub shortfalls: Vec<String>,
}

pub fn run_synth(cfg: &RunConfig, root: &Path) -> Result<SynthSummary> {
    let records = load_records(root)?;
    let refs_path = root.join(FCN_DIR).join(REFS_FILE);
    require(&refs_path, "fcn")?;
    let refs: Vec<FcnRef> = read_jsonl(&refs_path)?;
    let attrs = cfg.attributes();
    let set = match &cfg.synth.templates_dir {
        Some(d) => PromptTemplateSet::load(d, &attrs)?,
        None => PromptTemplateSet::defaults(&attrs),
    };
    let names = cfg.synth_attributes();
    let s = &cfg.synth;
    let synth = |stage, train: usize, test: usize, tag: &str| {
        synth_dataset(
            &records,
            &refs,
            &attrs,
            &set,
            &SynthRequest {
                stage,
                attributes: names.clone(),
                train: ParadigmCounts::reference_mix(stage, train),
                test: ParadigmCounts::reference_mix(stage, test),
                seed: cfg.step_seed(tag),
            },
        )
    };
    let one = synth(Stage::One, s.stage1_train, s.stage1_test, "synth-stage1")?;
    let two = synth(Stage::Two, s.stage2_train, s.stage2_test, "synth-stage2")?;
    let pre = synth(Stage::One, s.pretrain_pairs, 0, "synth-pretrain")?;
    let shortfalls: Vec<String> = [("stage1", &one), ("stage2", &two), ("pretrain", &pre)]
        .iter()
        .flat_map(|(tag, o)| o.shortfalls.iter().map(move |f| format!("{tag} {f}")))
        .collect();
    promote_dir(root, SYNTH_DIR, |dir| {
        write_jsonl(&one.pairs, &dir.join(stage_file(Stage::One)))?;
        write_jsonl(&two.pairs, &dir.join(stage_file(Stage::Two)))?;
        write_jsonl(&pre.pairs, &dir.join(PRETRAIN_PAIRS_FILE))?;
        set.save(&dir.join(TEMPLATES_DIR))?;
        build_tokenizer(&attrs, &set).save(&dir.join(crate::training::checkpoint::VOCAB_FILE))?;
        let mut text = shortfalls.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        write_atomic(&dir.join(SHORTFALL_FILE), text.as_bytes())?;
        Ok(SynthSummary {
            stage1: one.pairs.len(),
            stage2: two.pairs.len(),
            pretrain: pre.pairs.len(),
            shortfalls: shortfalls.clone(),
        })
    })
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    // append_log appends; the staging directory starts empty.
    append_log(path, log)
}

pub fn run_pretrain(cfg: &RunConfig, root: &Path) -> Result<Vec<LogRecord>> {
    let attrs = cfg.attributes();
    let records = load_records(root)?;
    let partition = load_partition(root)?;
    let tok = load_tokenizer(root)?;
    let set = templates(cfg, root)?;
    let path = root.join(SYNTH_DIR).join(PRETRAIN_PAIRS_FILE);
    require(&path, "synth")?;
    let pairs: Vec<InstructionPair> = read_jsonl(&path)?;
    let span = partition.token_count();
    let lm_cfg = LmConfig {
        vocab: tok.len(),
        d_model: cfg.lm.d_model,
        heads: cfg.lm.heads,
        blocks: cfg.lm.blocks,
        ff_hidden: cfg.lm.ff_hidden,
        max_len: required_max_len(&set, &attrs, span),
    };
    let mut lm = LmParams::init(lm_cfg, cfg.step_seed("lm-init"))?;
    let text = text_examples(
        &pairs,
        &records,
        &attrs,
        &tok,
        span,
        cfg.synth.described_fraction,
        cfg.step_seed("text"),
    )?;
    let train = cfg.train_config("pretrain");
    let log = pretrain_lm(&mut lm, &text, &train)?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            stage: "pretrain".into(),
            step: log.len(),
            config_hash: config_hash(cfg)?,
            lm: lm_cfg,
            encoder: None,
            tau: cfg.graph.tau,
        },
        tokenizer: tok,
        lm,
        encoder: None,
    };
    promote_dir(root, LM_DIR, |dir| {
        save_checkpoint(dir, &ckpt)?;
        write_log(&dir.join(LOG_FILE), &log)?;
        Ok(log.clone())
    })
}

pub fn run_train(cfg: &RunConfig, root: &Path, stage: Stage) -> Result<Vec<LogRecord>> {
    let (source, source_cmd) = match stage {
        Stage::One => (root.join(LM_DIR), "pretrain-lm"),
        Stage::Two => (root.join(stage_dir(Stage::One)), "train stage1"),
    };
    require(
        &source.join(crate::training::checkpoint::META_FILE),
        source_cmd,
    )?;
    let ckpt = load_checkpoint(&source)?;
    let all = load_pairs(root, stage)?;
    let train: Vec<InstructionPair> = all
        .into_iter()
        .filter(|p| p.split == crate::cohort::Split::Train)
        .collect();
    let refs: Vec<&InstructionPair> = train.iter().collect();
    let store = store_for(cfg, root, &refs)?;
    let encoder = match ckpt.encoder {
        Some(e) => e,
        None => EncoderParams::init(
            cfg.encoder_dims(store.partition().roi_count()),
            cfg.step_seed("encoder-init"),
        ),
    };
    let mut model = ModelParams {
        encoder,
        lm: ckpt.lm,
    };
    let examples = build_examples(&train, &ckpt.tokenizer, &store)?;
    let (name, log) = match stage {
        Stage::One => (
            "stage1",
            train_stage1(&mut model, &store, &examples, &cfg.train_config("stage1"))?,
        ),
        Stage::Two => (
            "stage2",
            train_stage2(&mut model, &store, &examples, &cfg.train_config("stage2"))?,
        ),
    };
    let out = Checkpoint {
        meta: CheckpointMeta {
            stage: name.into(),
            step: ckpt.meta.step + log.len(),
            config_hash: config_hash(cfg)?,
            lm: ckpt.meta.lm,
            encoder: Some(model.encoder.dims()),
            tau: cfg.graph.tau,
        },
        tokenizer: ckpt.tokenizer,
        lm: model.lm,
        encoder: Some(model.encoder),
    };
    promote_dir(root, stage_dir(stage), |dir| {
        save_checkpoint(dir, &out)?;
        write_log(&dir.join(LOG_FILE), &log)?;
        Ok(log.clone())
    })
}

/// Latest trained checkpoint directory, or the one named explicitly.
pub fn checkpoint_dir(root: &Path, which: Option<Stage>) -> Result<PathBuf> {
    let pick = |s: Stage| root.join(stage_dir(s));
    let dir = match which {
        Some(s) => pick(s),
        None if pick(Stage::Two)
            .join(crate::training::checkpoint::META_FILE)
            .exists() =>
        {
            pick(Stage::Two)
        }
        None => pick(Stage::One),
    };
    require(&dir.join(crate::training::checkpoint::META_FILE), "train")?;
    Ok(dir)
}

fn load_model(dir: &Path) -> Result<(ModelParams, Tokenizer)> {
    let ckpt = load_checkpoint(dir)?;
    let encoder = ckpt
        .encoder
        .ok_or_else(|| Error::Dataset(format!("{} holds no encoder", dir.display())))?;
    Ok((
        ModelParams {
            encoder,
            lm: ckpt.lm,
        },
        ckpt.tokenizer,
    ))
}

fn test_pairs(root: &Path) -> Result<Vec<InstructionPair>> {
    Ok(load_pairs(root, Stage::Two)?
        .into_iter()
        .filter(|p| p.split == crate::cohort::Split::Test)
        .collect())
}

/// Scores held-out Stage Two pairs; returns the process exit code.
pub fn run_eval(cfg: &RunConfig, root: &Path, which: Option<Stage>) -> Result<(i32, String)> {
    let (model, tok) = load_model(&checkpoint_dir(root, which)?)?;
    let pairs = test_pairs(root)?;
    let refs: Vec<&InstructionPair> = pairs.iter().collect();
    let store = store_for(cfg, root, &refs)?;
    let out = evaluate_run(
        &model,
        &tok,
        &store,
        &cfg.attributes(),
        &pairs,
        &cfg.eval_options(),
    )?;
    let table = render_table(&out.reports);
    promote_dir(root, EVAL_DIR, |dir| {
        write_atomic(
            &dir.join("metrics.jsonl"),
            reports_jsonl(&out.reports).as_bytes(),
        )?;
        write_jsonl(&out.items, &dir.join("items.jsonl"))?;
        write_atomic(&dir.join("table.txt"), table.as_bytes())?;
        Ok(())
    })?;
    Ok((exit_code(&out.reports), table))
}

fn read_subject_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Saliency and interaction maps over held-out pairs, written as CSV.
pub fn run_biomarker(cfg: &RunConfig, root: &Path, which: Option<Stage>) -> Result<usize> {
    let (model, tok) = load_model(&checkpoint_dir(root, which)?)?;
    let pairs = test_pairs(root)?;
    let subjects = cfg
        .biomarker
        .subjects_file
        .as_deref()
        .map(read_subject_list)
        .transpose()?;
    let mut chosen = filter_pairs(&pairs, subjects.as_ref());
    if let Some(k) = cfg.biomarker.max_pairs {
        chosen.truncate(k);
    }
    let store = store_for(cfg, root, &chosen)?;
    let report = analyze(&model, &tok, &store, &chosen)?;
    let tokens = token_labels(store.partition());
    let groups = group_labels(store.partition());
    promote_dir(root, BIOMARKER_DIR, |dir| {
        let sal = report.saliency.scores.clone().insert_axis(ndarray::Axis(0));
        emit_plot_data(
            &sal,
            &["saliency".to_string()],
            &tokens,
            &dir.join("saliency.csv"),
        )?;
        emit_plot_data(
            &report.maps.token_map,
            &tokens,
            &tokens,
            &dir.join("token_map.csv"),
        )?;
        emit_plot_data(
            &report.maps.subnet_map,
            &groups,
            &groups,
            &dir.join("subnet_map.csv"),
        )?;
        Ok(report.spans)
    })
}

pub fn run_gradcheck_step(root: &Path, seed: u64) -> Result<GradcheckReport> {
    let cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::toy_default()
    };
    let report = run_gradcheck(&cfg)?;
    promote_dir(root, GRADCHECK_DIR, |dir| {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        write_atomic(&dir.join("report.json"), json.as_bytes())?;
        Ok(report.clone())
    })
}
