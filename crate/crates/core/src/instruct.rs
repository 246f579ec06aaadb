//! Instruction-pair synthesis under the predictive, judgment and comparative
//! paradigms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{AttributeDef, AttributeKind, AttributeValue, Split, SubjectRecord, AGE_BINS};
use crate::error::{Error, Result};
use crate::fcn::io::write_atomic;
use crate::seed::derive_seed;
use crate::toylm::tokenizer::FCN;

/// Minimum normalized gap between the two subjects of a continuous
/// comparative pair.
pub const COMPARATIVE_MARGIN: u8 = 10;

/// Words that evaluation may append to restrict the candidate labels.
pub const OVERRIDE_WORDS: [&str; 3] = ["choose", "from", "or"];

const MAX_ATTEMPTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Predictive,
    Judgment,
    Comparative,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [
        Paradigm::Predictive,
        Paradigm::Judgment,
        Paradigm::Comparative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Predictive => "predictive",
            Paradigm::Judgment => "judgment",
            Paradigm::Comparative => "comparative",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Paradigm::Comparative => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub id: String,
    pub paradigm: Paradigm,
    pub attribute: String,
    pub fcn_refs: Vec<String>,
    pub subject_ids: Vec<String>,
    pub prompt: String,
    pub answer: String,
    pub stage: Stage,
    pub split: Split,
}

impl InstructionPair {
    pub fn task_id(&self) -> String {
        format!("{}/{}", self.attribute, self.paradigm)
    }
}

/// One FCN file available to the synthesizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcnRef {
    pub subject_id: String,
    pub path: String,
    #[serde(default)]
    pub window: Option<usize>,
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::format(path, e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// `round(100 (x - min) / (max - min))` after clipping, halves rounded up.
pub fn normalize_value(x: f64, min: f64, max: f64) -> Result<u8> {
    if !(min < max) || !min.is_finite() || !max.is_finite() {
        return Err(Error::Config(format!(
            "normalization range [{min}, {max}] is empty"
        )));
    }
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!("cannot normalize {x}")));
    }
    let t = (x.clamp(min, max) - min) / (max - min);
    Ok((100.0 * t + 0.5).floor().min(100.0) as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    /// Whether `hi` itself belongs to the bucket (true for the last one).
    pub closed: bool,
}

impl Bucket {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && (v < self.hi || (self.closed && v <= self.hi))
    }
}

/// Named intervals for judgment questions. Age uses the five life-stage bins
/// on raw years; other continuous attributes use width-10 segments of the
/// normalized scale, named `lo to hi`.
pub fn buckets_for(def: &AttributeDef) -> Option<Vec<Bucket>> {
    def.range()?;
    if def.name == "age" {
        let n = AGE_BINS.len();
        return Some(
            AGE_BINS
                .iter()
                .enumerate()
                .map(|(i, &(lo, hi, name))| Bucket {
                    name: name.to_string(),
                    lo,
                    hi,
                    closed: i + 1 == n,
                })
                .collect(),
        );
    }
    Some(
        (0..10)
            .map(|k| {
                let lo = 10 * k;
                let hi = if k == 9 { 100 } else { lo + 9 };
                Bucket {
                    name: format!("{lo} to {hi}"),
                    lo: lo as f64,
                    hi: (lo + 10) as f64,
                    closed: k == 9,
                }
            })
            .collect(),
    )
}

/// Value a bucket scheme is evaluated on: raw years for age, the normalized
/// integer otherwise.
fn bucket_coordinate(def: &AttributeDef, raw: f64) -> Result<f64> {
    let (min, max) = def.range().expect("continuous");
    if def.name == "age" {
        Ok(raw)
    } else {
        Ok(normalize_value(raw, min, max)? as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptTemplateSet {
    templates: BTreeMap<(String, Paradigm), Vec<String>>,
}

fn slots(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        match rest[start..].find('}') {
            Some(end) => {
                out.push(&rest[start + 1..start + end]);
                rest = &rest[start + end + 1..];
            }
            None => break,
        }
    }
    out
}

fn check_template(template: &str, paradigm: Paradigm, categorical: bool) -> Result<()> {
    let mut found = slots(template);
    found.sort_unstable();
    let expected: Vec<&str> = match (paradigm, categorical) {
        (Paradigm::Predictive, _) => vec!["FCN"],
        (Paradigm::Judgment, true) => vec!["FCN", "candidate"],
        (Paradigm::Judgment, false) => vec!["FCN", "interval"],
        (Paradigm::Comparative, _) => vec!["FCN_A", "FCN_B"],
    };
    if found != expected {
        return Err(Error::Config(format!(
            "{paradigm} template {template:?} has slots {found:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

impl PromptTemplateSet {
    /// Built-in templates for every attribute and paradigm.
    pub fn defaults(attributes: &[AttributeDef]) -> Self {
        let mut set = Self::default();
        for def in attributes {
            let a = &def.name;
            let predictive = if def.is_categorical() {
                vec![
                    format!("what is the {a} of the subject with brain network {{FCN}} ?"),
                    format!("given brain network {{FCN}} predict the {a} of the subject"),
                    format!("{{FCN}} identify the {a} of this subject"),
                ]
            } else {
                vec![
                    format!("estimate the {a} score of the subject with brain network {{FCN}} on a scale from 0 to 100"),
                    format!("given brain network {{FCN}} predict the {a} score of the subject"),
                    format!("{{FCN}} rate the {a} of this subject from 0 to 100"),
                ]
            };
            let judgment = if def.is_categorical() {
                vec![
                    format!("is the {a} of the subject with brain network {{FCN}} {{candidate}} ?"),
                    format!("given brain network {{FCN}} is this subject {a} {{candidate}} ?"),
                ]
            } else {
                vec![
                    format!("is the {a} of the subject with brain network {{FCN}} in the range {{interval}} ?"),
                    format!("given brain network {{FCN}} does the {a} of this subject fall in {{interval}} ?"),
                ]
            };
            let comparative = if def.is_categorical() {
                vec![
                    format!("do the subjects with brain networks {{FCN_A}} and {{FCN_B}} have the same {a} ?"),
                    format!("first {{FCN_A}} second {{FCN_B}} is the {a} of the two subjects the same ?"),
                ]
            } else {
                vec![
                    format!("which subject has a higher {a} first {{FCN_A}} or second {{FCN_B}} ?"),
                    format!("first {{FCN_A}} second {{FCN_B}} which of the two subjects has the higher {a} ?"),
                ]
            };
            set.templates
                .insert((a.clone(), Paradigm::Predictive), predictive);
            set.templates
                .insert((a.clone(), Paradigm::Judgment), judgment);
            set.templates
                .insert((a.clone(), Paradigm::Comparative), comparative);
        }
        set
    }

    pub fn get(&self, attribute: &str, paradigm: Paradigm) -> Option<&[String]> {
        self.templates
            .get(&(attribute.to_string(), paradigm))
            .map(Vec::as_slice)
    }

    pub fn insert(&mut self, attribute: &str, paradigm: Paradigm, templates: Vec<String>) {
        self.templates
            .insert((attribute.to_string(), paradigm), templates);
    }

    pub fn validate(&self, attributes: &[AttributeDef]) -> Result<()> {
        for ((attr, paradigm), list) in &self.templates {
            let def = attributes
                .iter()
                .find(|d| &d.name == attr)
                .ok_or_else(|| Error::Config(format!("templates for unknown attribute {attr}")))?;
            if list.is_empty() {
                return Err(Error::Config(format!("no templates for {attr}/{paradigm}")));
            }
            for t in list {
                check_template(t, *paradigm, def.is_categorical())?;
            }
        }
        Ok(())
    }

    /// Writes `<dir>/<attribute>/<paradigm>.txt`, one template per line.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for ((attr, paradigm), list) in &self.templates {
            let mut text = list.join("\n");
            text.push('\n');
            write_atomic(
                &dir.join(attr).join(format!("{paradigm}.txt")),
                text.as_bytes(),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, attributes: &[AttributeDef]) -> Result<Self> {
        let mut set = Self::default();
        for def in attributes {
            for paradigm in Paradigm::ALL {
                let path = dir.join(&def.name).join(format!("{paradigm}.txt"));
                if !path.exists() {
                    continue;
                }
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let list: Vec<String> = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(str::to_string)
                    .collect();
                set.insert(&def.name, paradigm, list);
            }
        }
        set.validate(attributes)?;
        Ok(set)
    }

    /// Every word the templates can emit once slots are filled.
    pub fn words(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for list in self.templates.values() {
            for t in list {
                for w in render(t, "", "").split_whitespace() {
                    out.insert(w.to_string());
                }
            }
        }
        out
    }
}

fn render(template: &str, candidate: &str, interval: &str) -> String {
    template
        .replace("{FCN_A}", FCN)
        .replace("{FCN_B}", FCN)
        .replace("{FCN}", FCN)
        .replace("{candidate}", candidate)
        .replace("{interval}", interval)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Every word a synthesized prompt or answer can contain.
pub fn vocabulary_words(
    attributes: &[AttributeDef],
    templates: &PromptTemplateSet,
) -> BTreeSet<String> {
    let mut words = templates.words();
    for w in (0..=100).map(|i| i.to_string()) {
        words.insert(w);
    }
    for w in ["yes", "no", "first", "second"]
        .into_iter()
        .chain(OVERRIDE_WORDS)
    {
        words.insert(w.to_string());
    }
    for def in attributes {
        words.insert(def.name.clone());
        if let Some(labels) = def.labels() {
            words.extend(labels.iter().map(|l| l.to_lowercase()));
        }
        if let Some(buckets) = buckets_for(def) {
            for b in buckets {
                words.extend(b.name.split_whitespace().map(str::to_string));
            }
        }
    }
    words
}

/// Why a pair could not be formed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Skip {
    MissingAttribute,
    NoNegative,
    NoPartner,
    NoFcn,
}

/// A subject together with the FCN files it may contribute.
#[derive(Debug, Clone)]
pub struct Subject<'a> {
    pub record: &'a SubjectRecord,
    pub fcns: Vec<&'a str>,
}

fn pick_template<'a>(
    templates: &'a PromptTemplateSet,
    attr: &str,
    p: Paradigm,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<&'a str, Skip> {
    templates
        .get(attr, p)
        .and_then(|l| l.choose(rng))
        .map(String::as_str)
        .ok_or(Skip::MissingAttribute)
}

fn pick_fcn<'a>(s: &Subject<'a>, rng: &mut ChaCha8Rng) -> std::result::Result<&'a str, Skip> {
    s.fcns.choose(rng).copied().ok_or(Skip::NoFcn)
}

/// Canonical answer text: lowercase label or normalized integer.
pub fn canonical_answer(def: &AttributeDef, value: &AttributeValue) -> Result<String> {
    match (&def.kind, value) {
        (AttributeKind::Categorical { .. }, AttributeValue::Label(l)) => Ok(l.to_lowercase()),
        (AttributeKind::Continuous { min, max }, AttributeValue::Value(v)) => {
            Ok(normalize_value(*v, *min, *max)?.to_string())
        }
        _ => Err(Error::InvalidInput(format!(
            "value {value:?} does not fit attribute {}",
            def.name
        ))),
    }
}

fn base_pair(
    paradigm: Paradigm,
    def: &AttributeDef,
    subjects: &[&Subject<'_>],
    refs: Vec<String>,
    prompt: String,
    answer: String,
) -> InstructionPair {
    InstructionPair {
        id: String::new(),
        paradigm,
        attribute: def.name.clone(),
        fcn_refs: refs,
        subject_ids: subjects
            .iter()
            .map(|s| s.record.subject_id.clone())
            .collect(),
        prompt,
        answer,
        stage: Stage::Two,
        split: subjects[0].record.split,
    }
}

pub fn make_predictive(
    subject: &Subject<'_>,
    def: &AttributeDef,
    templates: &PromptTemplateSet,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<InstructionPair, Skip> {
    let value = subject
        .record
        .attributes
        .get(&def.name)
        .ok_or(Skip::MissingAttribute)?;
    let answer = canonical_answer(def, value).map_err(|_| Skip::MissingAttribute)?;
    let template = pick_template(templates, &def.name, Paradigm::Predictive, rng)?;
    let fcn = pick_fcn(subject, rng)?;
    Ok(base_pair(
        Paradigm::Predictive,
        def,
        &[subject],
        vec![fcn.to_string()],
        render(template, "", ""),
        answer,
    ))
}

pub fn make_judgment(
    subject: &Subject<'_>,
    def: &AttributeDef,
    templates: &PromptTemplateSet,
    rng: &mut ChaCha8Rng,
    want_positive: bool,
) -> std::result::Result<InstructionPair, Skip> {
    let value = subject
        .record
        .attributes
        .get(&def.name)
        .ok_or(Skip::MissingAttribute)?;
    let (candidate, interval) = match (&def.kind, value) {
        (AttributeKind::Categorical { labels }, AttributeValue::Label(truth)) => {
            let pick = if want_positive {
                truth.clone()
            } else {
                let others: Vec<&String> = labels.iter().filter(|l| *l != truth).collect();
                (*others.choose(rng).ok_or(Skip::NoNegative)?).clone()
            };
            (pick.to_lowercase(), String::new())
        }
        (AttributeKind::Continuous { .. }, AttributeValue::Value(v)) => {
            let buckets = buckets_for(def).expect("continuous");
            let x = bucket_coordinate(def, *v).map_err(|_| Skip::MissingAttribute)?;
            let (hit, miss): (Vec<&Bucket>, Vec<&Bucket>) =
                buckets.iter().partition(|b| b.contains(x));
            let pick = if want_positive {
                *hit.first().ok_or(Skip::MissingAttribute)?
            } else {
                *miss.choose(rng).ok_or(Skip::NoNegative)?
            };
            (String::new(), pick.name.clone())
        }
        _ => return Err(Skip::MissingAttribute),
    };
    let template = pick_template(templates, &def.name, Paradigm::Judgment, rng)?;
    let fcn = pick_fcn(subject, rng)?;
    let answer = if want_positive { "yes" } else { "no" };
    Ok(base_pair(
        Paradigm::Judgment,
        def,
        &[subject],
        vec![fcn.to_string()],
        render(template, &candidate, &interval),
        answer.to_string(),
    ))
}

/// Categorical: answer `yes` iff both subjects share the label.
/// Continuous: answer names the slot holding the higher value.
pub fn make_comparative(
    a: &Subject<'_>,
    b: &Subject<'_>,
    def: &AttributeDef,
    templates: &PromptTemplateSet,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<InstructionPair, Skip> {
    let va = a
        .record
        .attributes
        .get(&def.name)
        .ok_or(Skip::MissingAttribute)?;
    let vb = b
        .record
        .attributes
        .get(&def.name)
        .ok_or(Skip::MissingAttribute)?;
    let answer = match (&def.kind, va, vb) {
        (AttributeKind::Categorical { .. }, AttributeValue::Label(x), AttributeValue::Label(y)) => {
            if x == y {
                "yes"
            } else {
                "no"
            }
        }
        (
            AttributeKind::Continuous { min, max },
            AttributeValue::Value(x),
            AttributeValue::Value(y),
        ) => {
            let nx = normalize_value(*x, *min, *max).map_err(|_| Skip::MissingAttribute)?;
            let ny = normalize_value(*y, *min, *max).map_err(|_| Skip::MissingAttribute)?;
            if nx.abs_diff(ny) < COMPARATIVE_MARGIN {
                return Err(Skip::NoPartner);
            }
            if nx > ny {
                "first"
            } else {
                "second"
            }
        }
        _ => return Err(Skip::MissingAttribute),
    };
    let template = pick_template(templates, &def.name, Paradigm::Comparative, rng)?;
    let fa = pick_fcn(a, rng)?;
    let fb = pick_fcn(b, rng)?;
    Ok(base_pair(
        Paradigm::Comparative,
        def,
        &[a, b],
        vec![fa.to_string(), fb.to_string()],
        render(template, "", ""),
        answer.to_string(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParadigmCounts {
    pub predictive: usize,
    pub judgment: usize,
    pub comparative: usize,
}

impl ParadigmCounts {
    pub fn get(&self, p: Paradigm) -> usize {
        match p {
            Paradigm::Predictive => self.predictive,
            Paradigm::Judgment => self.judgment,
            Paradigm::Comparative => self.comparative,
        }
    }

    pub fn total(&self) -> usize {
        self.predictive + self.judgment + self.comparative
    }

    /// Splits `total` in the reference mixture: 806:806:700 for stage one,
    /// 38:38:350 for stage two. Rounding leftovers go to comparative.
    pub fn reference_mix(stage: Stage, total: usize) -> Self {
        // Predictive and judgment share a weight in both stages.
        let (pj, c) = match stage {
            Stage::One => (806.0, 700.0),
            Stage::Two => (38.0, 350.0),
        };
        let predictive = (total as f64 * pj / (2.0 * pj + c)).round() as usize;
        let judgment = predictive.min(total - predictive);
        Self {
            predictive,
            judgment,
            comparative: total - predictive - judgment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub stage: Stage,
    pub attributes: Vec<String>,
    pub train: ParadigmCounts,
    pub test: ParadigmCounts,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub paradigm: Paradigm,
    pub split: Split,
    pub requested: usize,
    pub produced: usize,
}

impl fmt::Display for Shortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{:?}: requested {}, produced {}",
            self.paradigm, self.split, self.requested, self.produced
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub pairs: Vec<InstructionPair>,
    pub shortfalls: Vec<Shortfall>,
}

/// Builds the subject pool for one split: stage one draws from windowed FCNs,
/// stage two from original FCNs only.
fn pool<'a>(
    records: &'a [SubjectRecord],
    refs: &'a [FcnRef],
    stage: Stage,
    split: Split,
) -> Vec<Subject<'a>> {
    let mut by_subject: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in refs {
        let keep = match stage {
            Stage::One => r.window.is_some(),
            Stage::Two => r.window.is_none(),
        };
        if keep {
            by_subject
                .entry(r.subject_id.as_str())
                .or_default()
                .push(r.path.as_str());
        }
    }
    records
        .iter()
        .filter(|r| r.split == split)
        .filter_map(|r| {
            by_subject.get(r.subject_id.as_str()).map(|f| Subject {
                record: r,
                fcns: f.clone(),
            })
        })
        .collect()
}

fn one_pair(
    paradigm: Paradigm,
    index: usize,
    subjects: &[Subject<'_>],
    attrs: &[&AttributeDef],
    templates: &PromptTemplateSet,
    seed: u64,
    split: Split,
) -> Option<InstructionPair> {
    let def = attrs[index % attrs.len()];
    // Balance is per attribute: alternate on the attribute-local index.
    let want = (index / attrs.len()) % 2 == 0;
    let tag = format!("synth/{paradigm}/{split:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag, index as u64));
    for _ in 0..MAX_ATTEMPTS {
        let a = subjects.choose(&mut rng)?;
        let made = match paradigm {
            Paradigm::Predictive => make_predictive(a, def, templates, &mut rng),
            Paradigm::Judgment => make_judgment(a, def, templates, &mut rng, want),
            Paradigm::Comparative => {
                let b = subjects.choose(&mut rng)?;
                if std::ptr::eq(a, b) {
                    continue;
                }
                match make_comparative(a, b, def, templates, &mut rng) {
                    Ok(pair) => {
                        let positive = matches!(pair.answer.as_str(), "yes" | "first");
                        if positive == want {
                            Ok(pair)
                        } else if def.is_categorical() {
                            Err(Skip::NoPartner)
                        } else {
                            // Swap slots to land on the wanted answer.
                            make_comparative(b, a, def, templates, &mut rng)
                        }
                    }
                    Err(e) => Err(e),
                }
            }
        };
        match made {
            Ok(pair) => return Some(pair),
            Err(Skip::MissingAttribute) | Err(Skip::NoNegative) | Err(Skip::NoFcn)
                if paradigm != Paradigm::Comparative =>
            {
                return None
            }
            Err(_) => continue,
        }
    }
    None
}

/// Deterministic dataset synthesis. Output order is (split, paradigm, index).
pub fn synth_dataset(
    records: &[SubjectRecord],
    refs: &[FcnRef],
    attributes: &[AttributeDef],
    templates: &PromptTemplateSet,
    request: &SynthRequest,
) -> Result<SynthOutput> {
    let attrs: Vec<&AttributeDef> = request
        .attributes
        .iter()
        .map(|name| {
            attributes
                .iter()
                .find(|d| &d.name == name)
                .ok_or_else(|| Error::Config(format!("unknown attribute {name}")))
        })
        .collect::<Result<_>>()?;
    if attrs.is_empty() {
        return Err(Error::Config(
            "synthesis needs at least one attribute".into(),
        ));
    }
    let mut pairs = Vec::new();
    let mut shortfalls = Vec::new();
    for (split, counts) in [(Split::Train, request.train), (Split::Test, request.test)] {
        let subjects = pool(records, refs, request.stage, split);
        for paradigm in Paradigm::ALL {
            let n = counts.get(paradigm);
            let made: Vec<Option<InstructionPair>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    if subjects.is_empty() {
                        None
                    } else {
                        one_pair(
                            paradigm,
                            i,
                            &subjects,
                            &attrs,
                            templates,
                            request.seed,
                            split,
                        )
                    }
                })
                .collect();
            let produced = made.iter().flatten().count();
            if produced < n {
                shortfalls.push(Shortfall {
                    paradigm,
                    split,
                    requested: n,
                    produced,
                });
            }
            let split_name = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            for (i, pair) in made.into_iter().enumerate() {
                if let Some(mut pair) = pair {
                    pair.id = format!("{split_name}-{paradigm}-{i:06}");
                    pair.stage = request.stage;
                    pairs.push(pair);
                }
            }
        }
    }
    Ok(SynthOutput { pairs, shortfalls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::default_attributes;
    use proptest::prelude::*;

    fn record(id: &str, split: Split, attrs: &[(&str, AttributeValue)]) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.to_string(),
            attributes: attrs
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            seed: 0,
            split,
        }
    }

    fn subject<'a>(r: &'a SubjectRecord, f: &'a str) -> Subject<'a> {
        Subject {
            record: r,
            fcns: vec![f],
        }
    }

    #[test]
    fn normalize_endpoints_and_errors() {
        assert_eq!(normalize_value(40.0, 40.0, 160.0).unwrap(), 0);
        assert_eq!(normalize_value(160.0, 40.0, 160.0).unwrap(), 100);
        assert_eq!(normalize_value(100.0, 40.0, 160.0).unwrap(), 50);
        assert_eq!(normalize_value(-5.0, 0.0, 1.0).unwrap(), 0);
        assert_eq!(normalize_value(0.005, 0.0, 1.0).unwrap(), 1);
        assert!(matches!(
            normalize_value(1.0, 2.0, 2.0),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_monotone(a in -10.0f64..110.0, b in -10.0f64..110.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(normalize_value(lo, 0.0, 100.0).unwrap() <= normalize_value(hi, 0.0, 100.0).unwrap());
        }
    }

    #[test]
    fn predictive_answers() {
        let attrs = default_attributes();
        let t = PromptTemplateSet::defaults(&attrs);
        let gender = attrs.iter().find(|a| a.name == "gender").unwrap();
        let fiq = attrs.iter().find(|a| a.name == "fiq").unwrap();
        let r = record(
            "s1",
            Split::Train,
            &[
                ("gender", AttributeValue::Label("Female".into())),
                ("fiq", AttributeValue::Value(160.0)),
            ],
        );
        let s = subject(&r, "fcn/s1.fcn");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            make_predictive(&s, gender, &t, &mut rng).unwrap().answer,
            "female"
        );
        let p = make_predictive(&s, fiq, &t, &mut rng).unwrap();
        assert_eq!(p.answer, "100");
        assert_eq!(p.prompt.matches(FCN).count(), 1);
        let a = make_predictive(&s, gender, &t, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_predictive(&s, gender, &t, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let missing = AttributeDef::categorical("handedness", &["left", "right"]);
        assert_eq!(
            make_predictive(&s, &missing, &t, &mut rng),
            Err(Skip::MissingAttribute)
        );
    }

    #[test]
    fn judgment_on_age_bins() {
        let attrs = default_attributes();
        let t = PromptTemplateSet::defaults(&attrs);
        let age = attrs.iter().find(|a| a.name == "age").unwrap();
        let r = record("s1", Split::Train, &[("age", AttributeValue::Value(7.0))]);
        let s = subject(&r, "x");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let yes = make_judgment(&s, age, &t, &mut rng, true).unwrap();
        assert_eq!(yes.answer, "yes");
        assert!(yes.prompt.contains("early childhood"));
        let no = make_judgment(&s, age, &t, &mut rng, false).unwrap();
        assert_eq!(no.answer, "no");
        assert!(!no.prompt.contains("early childhood"));
        let buckets = buckets_for(age).unwrap();
        let adult = buckets
            .iter()
            .find(|b| b.name == "early adulthood")
            .unwrap();
        assert!(!adult.contains(7.0));
        assert!(buckets[0].contains(7.0));

        let single = AttributeDef::categorical("site", &["a"]);
        let mut t2 = t.clone();
        t2.insert(
            "site",
            Paradigm::Judgment,
            vec!["is {FCN} from {candidate} ?".into()],
        );
        let r2 = record(
            "s2",
            Split::Train,
            &[("site", AttributeValue::Label("a".into()))],
        );
        assert_eq!(
            make_judgment(&subject(&r2, "x"), &single, &t2, &mut rng, false),
            Err(Skip::NoNegative)
        );
    }

    #[test]
    fn comparative_answers() {
        let attrs = default_attributes();
        let t = PromptTemplateSet::defaults(&attrs);
        let gender = attrs.iter().find(|a| a.name == "gender").unwrap();
        let age = attrs.iter().find(|a| a.name == "age").unwrap();
        let a = record(
            "a",
            Split::Train,
            &[
                ("gender", AttributeValue::Label("male".into())),
                ("age", AttributeValue::Value(8.0)),
            ],
        );
        let b = record(
            "b",
            Split::Train,
            &[
                ("gender", AttributeValue::Label("male".into())),
                ("age", AttributeValue::Value(30.0)),
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sa, sb) = (subject(&a, "fa"), subject(&b, "fb"));
        assert_eq!(
            make_comparative(&sa, &sb, gender, &t, &mut rng)
                .unwrap()
                .answer,
            "yes"
        );
        let p = make_comparative(&sa, &sb, age, &t, &mut rng).unwrap();
        assert_eq!(p.answer, "second");
        assert_eq!(p.fcn_refs, vec!["fa".to_string(), "fb".to_string()]);
        let c = record("c", Split::Train, &[("age", AttributeValue::Value(33.0))]);
        assert_eq!(
            make_comparative(&sb, &subject(&c, "fc"), age, &t, &mut rng),
            Err(Skip::NoPartner)
        );
    }

    #[test]
    fn template_slot_checks() {
        assert!(check_template("is {FCN} {candidate} ?", Paradigm::Judgment, true).is_ok());
        assert!(check_template("is {FCN} ?", Paradigm::Judgment, true).is_err());
        assert!(check_template("{FCN_A} {FCN_B}", Paradigm::Comparative, false).is_ok());
        assert!(check_template("{FCN} {FCN_B}", Paradigm::Comparative, false).is_err());
        let attrs = default_attributes();
        let t = PromptTemplateSet::defaults(&attrs);
        t.validate(&attrs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(PromptTemplateSet::load(dir.path(), &attrs).unwrap(), t);
    }

    #[test]
    fn reference_mix_ratios() {
        let one = ParadigmCounts::reference_mix(Stage::One, 2312);
        assert_eq!(one.predictive, one.judgment);
        assert_eq!(one.total(), 2312);
        assert_eq!(one.predictive, 806);
        let two = ParadigmCounts::reference_mix(Stage::Two, 426);
        assert_eq!(
            (two.predictive, two.judgment, two.comparative),
            (38, 38, 350)
        );
    }

    #[test]
    fn dataset_counts_and_stage_filter() {
        let attrs = default_attributes();
        let t = PromptTemplateSet::defaults(&attrs);
        let records: Vec<SubjectRecord> = (0..20)
            .map(|i| {
                record(
                    &format!("s{i}"),
                    if i < 15 { Split::Train } else { Split::Test },
                    &[
                        (
                            "gender",
                            AttributeValue::Label(
                                if i % 2 == 0 { "male" } else { "female" }.into(),
                            ),
                        ),
                        ("age", AttributeValue::Value(i as f64 * 4.5)),
                    ],
                )
            })
            .collect();
        let mut refs = Vec::new();
        for r in &records {
            refs.push(FcnRef {
                subject_id: r.subject_id.clone(),
                path: format!("{}.fcn", r.subject_id),
                window: None,
            });
            refs.push(FcnRef {
                subject_id: r.subject_id.clone(),
                path: format!("{}_w0.fcn", r.subject_id),
                window: Some(0),
            });
        }
        let c = ParadigmCounts {
            predictive: 100,
            judgment: 100,
            comparative: 100,
        };
        let req = SynthRequest {
            stage: Stage::Two,
            attributes: vec!["gender".into(), "age".into()],
            train: c,
            test: ParadigmCounts::default(),
            seed: 5,
        };
        let out = synth_dataset(&records, &refs, &attrs, &t, &req).unwrap();
        assert!(out.shortfalls.is_empty(), "{:?}", out.shortfalls);
        assert_eq!(out.pairs.len(), 300);
        assert!(out
            .pairs
            .iter()
            .all(|p| p.fcn_refs.iter().all(|r| !r.contains("_w"))));
        let again = synth_dataset(&records, &refs, &attrs, &t, &req).unwrap();
        assert_eq!(out, again);

        let one = synth_dataset(
            &records,
            &refs,
            &attrs,
            &t,
            &SynthRequest {
                stage: Stage::One,
                ..req.clone()
            },
        )
        .unwrap();
        assert!(one
            .pairs
            .iter()
            .all(|p| p.fcn_refs.iter().all(|r| r.contains("_w"))));

        let none: Vec<FcnRef> = Vec::new();
        let short = synth_dataset(&records, &none, &attrs, &t, &req).unwrap();
        assert_eq!(short.shortfalls.len(), 3);
    }
}
