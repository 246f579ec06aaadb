//! Answer parsing, self-consistency voting and task metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::AttributeDef;
use crate::error::{invalid, Error, Result};
use crate::instruct::{InstructionPair, Paradigm, OVERRIDE_WORDS};
use crate::seed::derive_seed;
use crate::toylm::{decode, DecodeMode, SpanFill, Tokenizer};
use crate::training::{build_example, FcnStore, ModelParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "value", rename_all = "lowercase")]
pub enum Prediction {
    Label(String),
    Value(u8),
    Unparseable,
}

/// How a task's answers are read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerKind {
    Labels(Vec<String>),
    Value,
}

fn words_of(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn first_label(text: &str, labels: &[String]) -> Option<String> {
    let words = words_of(text);
    let label_words: Vec<Vec<String>> = labels.iter().map(|l| words_of(l)).collect();
    for i in 0..words.len() {
        let mut best: Option<usize> = None;
        for (j, lw) in label_words.iter().enumerate() {
            if !lw.is_empty()
                && words[i..].starts_with(lw)
                && best.is_none_or(|b| label_words[b].len() < lw.len())
            {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            return Some(labels[j].clone());
        }
    }
    None
}

/// First digit run that is not glued to letters, a sign or a decimal point
/// and whose value lies in `0..=100`.
fn first_value(text: &str) -> Option<u8> {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        let before = start.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i).copied();
        let glued_before =
            before.is_some_and(|c| c.is_alphanumeric() || c == '-' || c == '.' || c == '_');
        let decimal_after =
            after == Some('.') && chars.get(i + 1).is_some_and(char::is_ascii_digit);
        let glued_after = after.is_some_and(|c| c.is_alphanumeric() || c == '_');
        if glued_before || decimal_after || glued_after {
            continue;
        }
        let digits: String = chars[start..i].iter().collect();
        let trimmed = digits.trim_start_matches('0');
        if trimmed.len() > 3 {
            continue;
        }
        let v: u32 = if trimmed.is_empty() {
            0
        } else {
            trimmed.parse().expect("ascii digits")
        };
        if v <= 100 {
            return Some(v as u8);
        }
    }
    None
}

/// Total: every input maps to some prediction.
pub fn parse_response(text: &str, kind: &AnswerKind) -> Prediction {
    match kind {
        AnswerKind::Labels(labels) => {
            first_label(text, labels).map_or(Prediction::Unparseable, Prediction::Label)
        }
        AnswerKind::Value => first_value(text).map_or(Prediction::Unparseable, Prediction::Value),
    }
}

/// Majority vote for labels (earliest sample wins ties), lower median for
/// values. Unparseable samples are ignored unless nothing else is left.
pub fn self_consistency(samples: &[Prediction]) -> Prediction {
    let labels: Vec<&String> = samples
        .iter()
        .filter_map(|p| match p {
            Prediction::Label(l) => Some(l),
            _ => None,
        })
        .collect();
    let mut values: Vec<u8> = samples
        .iter()
        .filter_map(|p| match p {
            Prediction::Value(v) => Some(*v),
            _ => None,
        })
        .collect();
    let first_kind_is_label = samples
        .iter()
        .find(|p| **p != Prediction::Unparseable)
        .map(|p| matches!(p, Prediction::Label(_)));
    match first_kind_is_label {
        None => Prediction::Unparseable,
        Some(true) => {
            let mut best: Option<(&String, usize)> = None;
            for l in &labels {
                let count = labels.iter().filter(|x| *x == l).count();
                if best.is_none_or(|(_, c)| count > c) {
                    best = Some((l, count));
                }
            }
            Prediction::Label(best.expect("non-empty").0.clone())
        }
        Some(false) => {
            values.sort_unstable();
            Prediction::Value(values[(values.len() - 1) / 2])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub mcc: f64,
    pub macro_f1: f64,
}

/// Confusion matrix with truths on rows; the extra last column collects
/// predictions outside the label set.
pub fn confusion_matrix(
    predictions: &[Prediction],
    truths: &[String],
    labels: &[String],
) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != truths.len() {
        return Err(invalid!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        ));
    }
    if truths.is_empty() {
        return Err(invalid!("no predictions to score"));
    }
    let k = labels.len();
    let index = |s: &str| labels.iter().position(|l| l == s);
    let mut m = vec![vec![0usize; k + 1]; k];
    for (p, t) in predictions.iter().zip(truths) {
        let ti = index(t).ok_or_else(|| invalid!("truth {t:?} is not in the label set"))?;
        let pi = match p {
            Prediction::Label(l) => index(l).unwrap_or(k),
            _ => k,
        };
        m[ti][pi] += 1;
    }
    Ok(m)
}

pub fn classification_metrics(
    predictions: &[Prediction],
    truths: &[String],
    labels: &[String],
) -> Result<ClassificationMetrics> {
    let m = confusion_matrix(predictions, truths, labels)?;
    let k = labels.len();
    let s = truths.len() as f64;
    let correct: usize = (0..k).map(|i| m[i][i]).sum();
    let t: Vec<f64> = (0..=k)
        .map(|i| {
            if i < k {
                m[i].iter().sum::<usize>() as f64
            } else {
                0.0
            }
        })
        .collect();
    let p: Vec<f64> = (0..=k)
        .map(|j| m.iter().map(|row| row[j]).sum::<usize>() as f64)
        .collect();
    let c = correct as f64;
    let num = c * s - p.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
    let den = ((s * s - p.iter().map(|x| x * x).sum::<f64>())
        * (s * s - t.iter().map(|x| x * x).sum::<f64>()))
    .sqrt();
    let mcc = if den == 0.0 { 0.0 } else { num / den };
    let mut f1_sum = 0.0;
    let mut present = 0;
    for i in 0..k {
        if t[i] == 0.0 {
            continue;
        }
        present += 1;
        let tp = m[i][i] as f64;
        let denom = p[i] + t[i];
        f1_sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(ClassificationMetrics {
        acc: c / s,
        mcc,
        macro_f1: f1_sum / present as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub pcc: f64,
}

/// Predictions and truths on the unit scale; `None` marks an unparseable
/// output, which costs 1.0 absolute error and is left out of the correlation.
pub fn regression_metrics(
    predictions: &[Option<f64>],
    truths: &[f64],
) -> Result<RegressionMetrics> {
    if predictions.len() != truths.len() {
        return Err(invalid!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        ));
    }
    if truths.len() < 2 {
        return Err(invalid!("regression metrics need at least two items"));
    }
    let mae = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| p.map_or(1.0, |p| (p - t).abs()))
        .sum::<f64>()
        / truths.len() as f64;
    let pairs: Vec<(f64, f64)> = predictions
        .iter()
        .zip(truths)
        .filter_map(|(p, t)| p.map(|p| (p, *t)))
        .collect();
    Ok(RegressionMetrics {
        mae,
        pcc: pearson(&pairs),
    })
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    if pairs.len() < 2 {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskMetrics {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    #[serde(flatten)]
    pub metrics: TaskMetrics,
    pub n: usize,
    pub unparseable: usize,
}

impl MetricReport {
    pub fn unparseable_fraction(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.unparseable as f64 / self.n as f64
        }
    }
}

/// Answer kind for an attribute under a paradigm.
pub fn answer_kind(def: &AttributeDef, paradigm: Paradigm) -> AnswerKind {
    let words = |w: &[&str]| AnswerKind::Labels(w.iter().map(|s| s.to_string()).collect());
    match paradigm {
        Paradigm::Judgment => words(&["yes", "no"]),
        Paradigm::Comparative if def.is_categorical() => words(&["yes", "no"]),
        Paradigm::Comparative => words(&["first", "second"]),
        Paradigm::Predictive => match def.labels() {
            Some(labels) => AnswerKind::Labels(labels.iter().map(|l| l.to_lowercase()).collect()),
            None => AnswerKind::Value,
        },
    }
}

/// Appends `choose from a or b ...` to a prompt. Truth labels are untouched.
pub fn restrict_prompt(prompt: &str, labels: &[String]) -> String {
    let [choose, from, or] = OVERRIDE_WORDS;
    format!(
        "{prompt} {choose} {from} {}",
        labels.join(&format!(" {or} "))
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Samples per item; 1 decodes greedily.
    pub samples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub restrict_labels: bool,
    pub max_answer_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 1,
            temperature: 0.7,
            seed: 0,
            restrict_labels: false,
            max_answer_len: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub task: String,
    pub truth: String,
    pub outputs: Vec<String>,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub reports: Vec<MetricReport>,
    pub items: Vec<ItemResult>,
}

/// Decodes every pair, aggregates samples and scores each task.
pub fn evaluate_run(
    model: &ModelParams,
    tok: &Tokenizer,
    store: &FcnStore,
    attributes: &[AttributeDef],
    pairs: &[InstructionPair],
    opts: &EvalOptions,
) -> Result<EvalOutput> {
    if opts.samples == 0 {
        return Err(Error::Config(
            "at least one sample per item is required".into(),
        ));
    }
    let find = |name: &str| {
        attributes
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Dataset(format!("unknown attribute {name}")))
    };
    let items = pairs
        .par_iter()
        .map(|pair| {
            let def = find(&pair.attribute)?;
            let kind = answer_kind(def, pair.paradigm);
            let mut shown = pair.clone();
            if let (true, AnswerKind::Labels(labels)) = (opts.restrict_labels, &kind) {
                shown.prompt = restrict_prompt(&pair.prompt, labels);
            }
            let ex = build_example(&shown, tok, store, false)?;
            let tokens = ex
                .fcns
                .iter()
                .map(|&id| Ok(store.prepare(id)?.forward(&model.encoder).0))
                .collect::<Result<Vec<_>>>()?;
            let fills: Vec<SpanFill<'_>> =
                tokens.iter().map(|t| SpanFill::Tokens(t.view())).collect();
            let outputs = (0..opts.samples)
                .map(|j| {
                    let mode = if opts.samples == 1 {
                        DecodeMode::Greedy
                    } else {
                        DecodeMode::Sample {
                            temperature: opts.temperature,
                            seed: derive_seed(opts.seed, &pair.id, j as u64),
                        }
                    };
                    decode(&model.lm, tok, &ex.asm, &fills, mode, opts.max_answer_len)
                })
                .collect::<Result<Vec<_>>>()?;
            let parsed: Vec<Prediction> =
                outputs.iter().map(|o| parse_response(o, &kind)).collect();
            Ok(ItemResult {
                id: pair.id.clone(),
                task: pair.task_id(),
                truth: pair.answer.clone(),
                outputs,
                prediction: self_consistency(&parsed),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = score_items(&items, pairs, attributes)?;
    Ok(EvalOutput { reports, items })
}

/// Per-task reports in task-id order.
pub fn score_items(
    items: &[ItemResult],
    pairs: &[InstructionPair],
    attributes: &[AttributeDef],
) -> Result<Vec<MetricReport>> {
    let mut by_task: BTreeMap<&str, (Paradigm, &str, Vec<&ItemResult>)> = BTreeMap::new();
    for (item, pair) in items.iter().zip(pairs) {
        by_task
            .entry(item.task.as_str())
            .or_insert((pair.paradigm, pair.attribute.as_str(), Vec::new()))
            .2
            .push(item);
    }
    let mut reports = Vec::new();
    for (task, (paradigm, attribute, group)) in by_task {
        let def = attributes
            .iter()
            .find(|d| d.name == attribute)
            .ok_or_else(|| Error::Dataset(format!("unknown attribute {attribute}")))?;
        let unparseable = group
            .iter()
            .filter(|i| i.prediction == Prediction::Unparseable)
            .count();
        let metrics = match answer_kind(def, paradigm) {
            AnswerKind::Labels(labels) => {
                let preds: Vec<Prediction> = group.iter().map(|i| i.prediction.clone()).collect();
                let truths: Vec<String> = group.iter().map(|i| i.truth.clone()).collect();
                TaskMetrics::Classification(classification_metrics(&preds, &truths, &labels)?)
            }
            AnswerKind::Value => {
                let preds: Vec<Option<f64>> = group
                    .iter()
                    .map(|i| match i.prediction {
                        Prediction::Value(v) => Some(v as f64 / 100.0),
                        _ => None,
                    })
                    .collect();
                let truths = group
                    .iter()
                    .map(|i| {
                        i.truth
                            .parse::<u8>()
                            .map(|v| v as f64 / 100.0)
                            .map_err(|_| {
                                Error::Dataset(format!(
                                    "{}: answer {:?} is not a score",
                                    i.id, i.truth
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                TaskMetrics::Regression(regression_metrics(&preds, &truths)?)
            }
        };
        reports.push(MetricReport {
            task: task.to_string(),
            metrics,
            n: group.len(),
            unparseable,
        });
    }
    Ok(reports)
}

/// Mean of each metric over the attributes of every paradigm.
pub fn paradigm_means(reports: &[MetricReport]) -> BTreeMap<String, BTreeMap<&'static str, f64>> {
    let mut acc: BTreeMap<String, BTreeMap<&'static str, (f64, usize)>> = BTreeMap::new();
    for r in reports {
        let paradigm = r.task.rsplit('/').next().unwrap_or(&r.task).to_string();
        let entry = acc.entry(paradigm).or_default();
        let mut add = |k: &'static str, v: f64| {
            let e = entry.entry(k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        };
        match r.metrics {
            TaskMetrics::Classification(m) => {
                add("acc", m.acc);
                add("mcc", m.mcc);
                add("macro_f1", m.macro_f1);
            }
            TaskMetrics::Regression(m) => {
                add("mae", m.mae);
                add("pcc", m.pcc);
            }
        }
    }
    acc.into_iter()
        .map(|(p, m)| {
            (
                p,
                m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            )
        })
        .collect()
}

pub fn render_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "task", "n", "unparse", "acc", "mcc", "f1", "mae", "pcc"
    );
    let dash = "-";
    for r in reports {
        let (a, m, f, e, p) = match r.metrics {
            TaskMetrics::Classification(c) => (
                format!("{:.4}", c.acc),
                format!("{:.4}", c.mcc),
                format!("{:.4}", c.macro_f1),
                dash.to_string(),
                dash.to_string(),
            ),
            TaskMetrics::Regression(g) => (
                dash.to_string(),
                dash.to_string(),
                dash.to_string(),
                format!("{:.4}", g.mae),
                format!("{:.4}", g.pcc),
            ),
        };
        let _ = writeln!(
            out,
            "{:<28} {:>6} {:>6} {a:>8} {m:>8} {f:>8} {e:>8} {p:>8}",
            r.task, r.n, r.unparseable
        );
    }
    out
}

pub fn reports_jsonl(reports: &[MetricReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("reports serialize") + "\n")
        .collect()
}

/// Nonzero when any task has more than half of its outputs unparseable.
pub fn exit_code(reports: &[MetricReport]) -> i32 {
    if reports.iter().any(|r| r.unparseable_fraction() > 0.5) {
        2
    } else {
        0
    }
}
