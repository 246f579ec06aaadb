//! Synthetic cohorts with planted, subnetwork-localized connectivity effects.
//!
//! Each subject's BOLD series is drawn from a latent covariance
//! `base + sum_a delta_a * z_a * B_a`, where `z_a` is the standardized value of
//! attribute `a` and `B_a` is the indicator of the off-diagonal block between
//! the two target subnetworks. Eigenvalues are floored when the sum leaves the
//! positive-definite cone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::AtlasPartition;
use crate::error::{Error, Result};
use crate::fcn::io::{write_atomic, write_bold_csv};
use crate::fcn::BoldSeries;
use crate::seed::derive_seed;

const EIGEN_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttributeKind {
    Categorical { labels: Vec<String> },
    Continuous { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    /// 1-based subnetwork pair whose connecting block is shifted.
    pub subnets: (usize, usize),
    pub delta: f64,
    /// One-vs-rest target class for categorical attributes; defaults to the
    /// last label.
    #[serde(default)]
    pub positive_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedBin {
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub kind: AttributeKind,
    #[serde(default)]
    pub effect: Option<PlantedEffect>,
    /// Categorical: per-label sampling weights. Continuous: ignored.
    #[serde(default)]
    pub label_weights: Option<Vec<f64>>,
    /// Continuous: optional piecewise-uniform marginal.
    #[serde(default)]
    pub bins: Option<Vec<WeightedBin>>,
}

impl AttributeDef {
    pub fn categorical(name: &str, labels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Categorical {
                labels: labels.iter().map(|s| s.to_string()).collect(),
            },
            effect: None,
            label_weights: None,
            bins: None,
        }
    }

    pub fn continuous(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Continuous { min, max },
            effect: None,
            label_weights: None,
            bins: None,
        }
    }

    pub fn with_effect(mut self, subnets: (usize, usize), delta: f64) -> Self {
        self.effect = Some(PlantedEffect {
            subnets,
            delta,
            positive_label: None,
        });
        self
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, AttributeKind::Categorical { .. })
    }

    pub fn labels(&self) -> Option<&[String]> {
        match &self.kind {
            AttributeKind::Categorical { labels } => Some(labels),
            AttributeKind::Continuous { .. } => None,
        }
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        match self.kind {
            AttributeKind::Continuous { min, max } => Some((min, max)),
            AttributeKind::Categorical { .. } => None,
        }
    }

    pub fn validate(&self, subnet_count: usize) -> Result<()> {
        match &self.kind {
            AttributeKind::Categorical { labels } => {
                if labels.is_empty() {
                    return Err(Error::Config(format!(
                        "attribute {} has no labels",
                        self.name
                    )));
                }
                let mut seen = std::collections::HashSet::new();
                for l in labels {
                    if !seen.insert(l) {
                        return Err(Error::Config(format!(
                            "attribute {} repeats label {l:?}",
                            self.name
                        )));
                    }
                }
                if let Some(w) = &self.label_weights {
                    if w.len() != labels.len()
                        || w.iter().any(|&x| !(x >= 0.0))
                        || w.iter().sum::<f64>() <= 0.0
                    {
                        return Err(Error::Config(format!(
                            "attribute {} has invalid label weights",
                            self.name
                        )));
                    }
                }
            }
            AttributeKind::Continuous { min, max } => {
                if !(min < max) || !min.is_finite() || !max.is_finite() {
                    return Err(Error::Config(format!(
                        "attribute {} needs min < max, got [{min}, {max}]",
                        self.name
                    )));
                }
                if let Some(bins) = &self.bins {
                    let usable: f64 = bins
                        .iter()
                        .filter(|b| b.hi.min(*max) > b.lo.max(*min))
                        .map(|b| b.weight)
                        .sum();
                    if bins.iter().any(|b| !(b.lo < b.hi) || !(b.weight >= 0.0)) || usable <= 0.0 {
                        return Err(Error::Config(format!(
                            "attribute {} has invalid bins",
                            self.name
                        )));
                    }
                }
            }
        }
        if let Some(effect) = &self.effect {
            let (a, b) = effect.subnets;
            if a == 0 || b == 0 || a > subnet_count || b > subnet_count {
                return Err(Error::Config(format!(
                    "attribute {} plants an effect on subnetworks ({a},{b}) outside 1..={subnet_count}",
                    self.name
                )));
            }
            if let (Some(label), Some(labels)) = (&effect.positive_label, self.labels()) {
                if !labels.contains(label) {
                    return Err(Error::Config(format!(
                        "attribute {} effect targets unknown label {label:?}",
                        self.name
                    )));
                }
            }
            if !effect.delta.is_finite() {
                return Err(Error::Config(format!(
                    "attribute {} has non-finite effect",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Value in `[-1, 1]` used to scale the planted effect.
    pub fn standardize(&self, value: &AttributeValue) -> Result<f64> {
        match (&self.kind, value) {
            (AttributeKind::Continuous { min, max }, AttributeValue::Value(v)) => {
                let mid = 0.5 * (min + max);
                Ok((v - mid) / (0.5 * (max - min)))
            }
            (AttributeKind::Categorical { labels }, AttributeValue::Label(l)) => {
                let positive = self
                    .effect
                    .as_ref()
                    .and_then(|e| e.positive_label.as_ref())
                    .unwrap_or_else(|| labels.last().expect("validated non-empty"));
                Ok(if l == positive { 1.0 } else { -1.0 })
            }
            _ => Err(Error::InvalidInput(format!(
                "value {value:?} does not match attribute {}",
                self.name
            ))),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> AttributeValue {
        match &self.kind {
            AttributeKind::Categorical { labels } => {
                let idx = match &self.label_weights {
                    Some(w) => weighted_index(w, rng),
                    None => rng.random_range(0..labels.len()),
                };
                AttributeValue::Label(labels[idx].clone())
            }
            AttributeKind::Continuous { min, max } => {
                let v = match &self.bins {
                    Some(bins) => {
                        let clipped: Vec<(f64, f64, f64)> = bins
                            .iter()
                            .map(|b| (b.lo.max(*min), b.hi.min(*max), b.weight))
                            .filter(|(lo, hi, _)| hi > lo)
                            .collect();
                        let weights: Vec<f64> = clipped.iter().map(|c| c.2).collect();
                        let (lo, hi, _) = clipped[weighted_index(&weights, rng)];
                        rng.random_range(lo..hi)
                    }
                    None => rng.random_range(*min..=*max),
                };
                AttributeValue::Value(v)
            }
        }
    }

    fn admits(&self, value: &AttributeValue) -> bool {
        match (&self.kind, value) {
            (AttributeKind::Categorical { labels }, AttributeValue::Label(l)) => labels.contains(l),
            (AttributeKind::Continuous { min, max }, AttributeValue::Value(v)) => {
                v.is_finite() && *v >= *min && *v <= *max
            }
            _ => false,
        }
    }
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttributeValue {
    Label(String),
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub time_points: usize,
    pub partition: AtlasPartition,
    pub attributes: Vec<AttributeDef>,
    /// Scale of the random low-rank covariance shared by all subjects.
    pub base_noise: f64,
    /// Latent covariance between regions of the same subnetwork.
    pub within_subnet: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::Config("a cohort needs at least 2 subjects".into()));
        }
        if self.time_points < 2 {
            return Err(Error::Config("subjects need at least 2 time points".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        if !(self.base_noise >= 0.0) || !self.within_subnet.is_finite() {
            return Err(Error::Config("base_noise must be non-negative".into()));
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.attributes {
            if !names.insert(&a.name) {
                return Err(Error::Config(format!("attribute {} defined twice", a.name)));
            }
            a.validate(self.partition.subnet_count())?;
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    /// Shared latent covariance: identity, within-subnetwork coupling and a
    /// random low-rank term drawn from the cohort seed.
    pub fn base_covariance(&self) -> DMatrix<f64> {
        let d = self.partition.roi_count();
        let rank = 4.min(d);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "base-covariance", 0));
        let w = DMatrix::<f64>::from_fn(d, rank, |_, _| rng.sample(StandardNormal));
        let mut cov = &w * w.transpose() * (self.base_noise / rank as f64);
        for i in 0..d {
            cov[(i, i)] += 1.0;
            for j in 0..d {
                if i != j {
                    if let (Some(a), Some(b)) =
                        (self.partition.subnet_of(i), self.partition.subnet_of(j))
                    {
                        if a == b {
                            cov[(i, j)] += self.within_subnet;
                        }
                    }
                }
            }
        }
        cov
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub attributes: BTreeMap<String, AttributeValue>,
    pub seed: u64,
    pub split: Split,
}

impl SubjectRecord {
    pub fn check_against(&self, spec: &CohortSpec) -> Result<()> {
        for (name, value) in &self.attributes {
            let def = spec
                .attribute(name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown attribute {name}")))?;
            if !def.admits(value) {
                return Err(Error::InvalidInput(format!(
                    "subject {}: value {value:?} not admissible for {name}",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// Latent covariance of one subject with planted effects applied, floored to
/// stay positive definite. Returns the covariance and its lower Cholesky
/// factor.
pub fn subject_covariance(
    spec: &CohortSpec,
    base: &DMatrix<f64>,
    record: &SubjectRecord,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = spec.partition.roi_count();
    let mut cov = base.clone();
    for def in &spec.attributes {
        let Some(effect) = &def.effect else { continue };
        let Some(value) = record.attributes.get(&def.name) else {
            continue;
        };
        let shift = effect.delta * def.standardize(value)?;
        if shift == 0.0 {
            continue;
        }
        let (a, b) = effect.subnets;
        let rows_a = spec.partition.members(a);
        let rows_b = spec.partition.members(b);
        for &i in &rows_a {
            for &j in &rows_b {
                if i != j {
                    cov[(i, j)] += shift;
                    if a != b {
                        cov[(j, i)] += shift;
                    }
                }
            }
        }
    }
    let eig = SymmetricEigen::new(cov.clone());
    let min_eig = eig.eigenvalues.min();
    if min_eig < EIGEN_FLOOR {
        let clipped = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        cov = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
    }
    let chol = cov.clone().cholesky().ok_or_else(|| {
        Error::Generation(format!(
            "subject {}: covariance ({d}x{d}) not positive definite after flooring (min eigenvalue {min_eig:.3e})",
            record.subject_id
        ))
    })?;
    Ok((cov, chol.l()))
}

/// Samples `time_points` Gaussian draws from the subject's latent covariance.
pub fn generate_subject(
    spec: &CohortSpec,
    record: &SubjectRecord,
    seed: u64,
) -> Result<BoldSeries> {
    record.check_against(spec)?;
    let base = spec.base_covariance();
    generate_with_base(spec, &base, record, seed)
}

fn generate_with_base(
    spec: &CohortSpec,
    base: &DMatrix<f64>,
    record: &SubjectRecord,
    seed: u64,
) -> Result<BoldSeries> {
    let (_, l) = subject_covariance(spec, base, record)?;
    let d = spec.partition.roi_count();
    let t = spec.time_points;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::<f64>::from_fn(d, t, |_, _| rng.sample(StandardNormal));
    let x = l * z;
    let samples = Array2::from_shape_fn((t, d), |(ti, di)| x[(di, ti)]);
    BoldSeries::new(record.subject_id.clone(), samples)
}

/// Draws attribute values and split tags for every subject.
pub fn sample_records(spec: &CohortSpec) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "records", 0));
    let width = spec.n_subjects.to_string().len().max(4);
    let mut records: Vec<SubjectRecord> = (0..spec.n_subjects)
        .map(|i| {
            let attributes = spec
                .attributes
                .iter()
                .map(|a| (a.name.clone(), a.sample(&mut rng)))
                .collect();
            SubjectRecord {
                subject_id: format!("sub{:0width$}", i + 1),
                attributes,
                seed: derive_seed(spec.seed, "subject", i as u64),
                split: Split::Train,
            }
        })
        .collect();
    let n_test = (spec.test_fraction * spec.n_subjects as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_subjects).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_test) {
        records[i].split = Split::Test;
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    #[serde(flatten)]
    pub record: SubjectRecord,
    /// BOLD CSV path relative to the manifest directory.
    pub bold_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    pub entries: Vec<CohortEntry>,
}

impl CohortManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn records(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.entries.iter().map(|e| &e.record)
    }
}

pub const MANIFEST_FILE: &str = "cohort.jsonl";

/// Generates every subject, writes `bold/<id>.csv` files and the
/// line-delimited manifest under `out_dir`.
pub fn generate_cohort(spec: &CohortSpec, out_dir: &Path) -> Result<CohortManifest> {
    let records = sample_records(spec)?;
    let base = spec.base_covariance();
    let bold_dir = out_dir.join("bold");
    fs::create_dir_all(&bold_dir).map_err(|e| Error::io(&bold_dir, e))?;
    let entries = records
        .into_par_iter()
        .map(|record| {
            let series = generate_with_base(spec, &base, &record, record.seed)?;
            let rel = PathBuf::from("bold").join(format!("{}.csv", record.subject_id));
            write_bold_csv(&series, spec.partition.roi_names(), &out_dir.join(&rel))?;
            Ok(CohortEntry {
                record,
                bold_path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CohortManifest { entries };
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_jsonl().as_bytes())?;
    Ok(manifest)
}

/// Generates BOLD series in memory without touching the filesystem.
pub fn generate_in_memory(spec: &CohortSpec) -> Result<Vec<(SubjectRecord, BoldSeries)>> {
    let records = sample_records(spec)?;
    let base = spec.base_covariance();
    records
        .into_par_iter()
        .map(|r| {
            let s = generate_with_base(spec, &base, &r, r.seed)?;
            Ok((r, s))
        })
        .collect()
}

/// Age bins used for both the age marginal and judgment intervals.
pub const AGE_BINS: [(f64, f64, &str); 5] = [
    (0.0, 10.0, "early childhood"),
    (10.0, 19.0, "adolescence"),
    (19.0, 40.0, "early adulthood"),
    (40.0, 65.0, "middle adulthood"),
    (65.0, 100.0, "late adulthood"),
];

/// The nineteen attributes: demographics, diagnosis, three IQ scales and
/// twelve behavioural phenotypes. No planted effects.
pub fn default_attributes() -> Vec<AttributeDef> {
    let mut age = AttributeDef::continuous("age", 0.0, 100.0);
    age.bins = Some(
        AGE_BINS
            .iter()
            .map(|&(lo, hi, _)| WeightedBin {
                lo,
                hi,
                weight: 1.0,
            })
            .collect(),
    );
    let mut attrs = vec![
        AttributeDef::categorical("gender", &["female", "male"]),
        age,
        AttributeDef::categorical("handedness", &["right", "left", "mixed"]),
        AttributeDef::categorical("diagnosis", &["hc", "asd", "adhd", "mdd", "sz", "other"]),
        AttributeDef::continuous("fiq", 40.0, 160.0),
        AttributeDef::continuous("viq", 40.0, 160.0),
        AttributeDef::continuous("piq", 40.0, 160.0),
    ];
    let phenotypes: [(&str, f64, f64); 12] = [
        ("vsplot", 0.0, 24.0),
        ("readeng", 60.0, 150.0),
        ("percstress", 20.0, 80.0),
        ("angaggr", 20.0, 80.0),
        ("strength", 60.0, 150.0),
        ("endurance", 60.0, 150.0),
        ("picvocab", 60.0, 150.0),
        ("listsort", 60.0, 150.0),
        ("anghostil", 20.0, 80.0),
        ("loneliness", 20.0, 80.0),
        ("meanpurp", 20.0, 80.0),
        ("dexterity", 60.0, 150.0),
    ];
    attrs.extend(
        phenotypes
            .iter()
            .map(|&(n, lo, hi)| AttributeDef::continuous(n, lo, hi)),
    );
    attrs
}
