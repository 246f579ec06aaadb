//! Turns instruction pairs into assembled training examples.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atlas::AtlasPartition;
use crate::cohort::{AttributeDef, SubjectRecord};
use crate::encoder::PreparedFcn;
use crate::error::{Error, Result};
use crate::fcn::io::read_fcn;
use crate::fcn::FcnMatrix;
use crate::instruct::{canonical_answer, InstructionPair};
use crate::seed::derive_seed;
use crate::toylm::{assemble, Assembly, SpanFill, Tokenizer};

/// FCN matrices addressed by their reference string.
#[derive(Debug, Clone)]
pub struct FcnStore {
    partition: AtlasPartition,
    tau: f64,
    fcns: Vec<FcnMatrix>,
    index: HashMap<String, usize>,
}

impl FcnStore {
    pub fn new(partition: AtlasPartition, tau: f64) -> Self {
        Self {
            partition,
            tau,
            fcns: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, reference: &str, fcn: FcnMatrix) -> Result<usize> {
        if fcn.dim() != self.partition.roi_count() {
            return Err(Error::Dataset(format!(
                "{reference}: FCN has {} regions, atlas has {}",
                fcn.dim(),
                self.partition.roi_count()
            )));
        }
        if let Some(&i) = self.index.get(reference) {
            self.fcns[i] = fcn;
            return Ok(i);
        }
        self.fcns.push(fcn);
        self.index
            .insert(reference.to_string(), self.fcns.len() - 1);
        Ok(self.fcns.len() - 1)
    }

    /// Reads every referenced FCN file relative to `base`.
    pub fn load_refs<'a>(
        &mut self,
        base: &Path,
        refs: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let unique: BTreeSet<&str> = refs.into_iter().collect();
        for r in unique {
            if self.index.contains_key(r) {
                continue;
            }
            let path = base.join(r);
            if !path.exists() {
                return Err(Error::Dataset(format!(
                    "missing FCN file {}",
                    path.display()
                )));
            }
            let fcn = read_fcn(&path)?;
            self.insert(r, fcn)?;
        }
        Ok(())
    }

    pub fn id(&self, reference: &str) -> Result<usize> {
        self.index
            .get(reference)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("FCN {reference} is not loaded")))
    }

    pub fn get(&self, id: usize) -> &FcnMatrix {
        &self.fcns[id]
    }

    pub fn partition(&self) -> &AtlasPartition {
        &self.partition
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn prepare(&self, id: usize) -> Result<PreparedFcn> {
        PreparedFcn::new(&self.fcns[id], &self.partition, self.tau)
    }

    pub fn span_len(&self) -> usize {
        self.partition.token_count()
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub task: String,
    pub answer: String,
    pub asm: Assembly,
    pub fcns: Vec<usize>,
}

/// Assembles pairs with their answers as training targets.
pub fn build_examples(
    pairs: &[InstructionPair],
    tok: &Tokenizer,
    store: &FcnStore,
) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| build_example(p, tok, store, true))
        .collect()
}

/// Assembles one pair; `with_answer = false` leaves the prompt open for
/// decoding.
pub fn build_example(
    p: &InstructionPair,
    tok: &Tokenizer,
    store: &FcnStore,
    with_answer: bool,
) -> Result<Example> {
    let answer: Vec<usize> = if with_answer {
        tok.tokenize(&p.answer)
    } else {
        Vec::new()
    };
    let asm = assemble(
        tok,
        &tok.tokenize(&p.prompt),
        store.span_len(),
        p.fcn_refs.len(),
        &answer,
    )
    .map_err(|e| Error::Dataset(format!("{}: {e}", p.id)))?;
    let fcns = p
        .fcn_refs
        .iter()
        .map(|r| store.id(r))
        .collect::<Result<_>>()?;
    Ok(Example {
        id: p.id.clone(),
        task: p.task_id(),
        answer: p.answer.clone(),
        asm,
        fcns,
    })
}

/// What a text-only example puts into its FCN spans.
#[derive(Debug, Clone, PartialEq)]
pub enum TextFill {
    Null,
    Words(Vec<Option<usize>>),
}

impl TextFill {
    pub fn as_span_fill(&self) -> SpanFill<'_> {
        match self {
            TextFill::Null => SpanFill::Null,
            TextFill::Words(w) => SpanFill::Words(w),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextExample {
    pub asm: Assembly,
    pub fills: Vec<TextFill>,
}

/// Text-only examples for language-model pretraining. A `described_fraction`
/// of them carry the subject's answer word at up to half the positions
/// of each span; the rest use the null embedding throughout.
pub fn text_examples(
    pairs: &[InstructionPair],
    records: &[SubjectRecord],
    attributes: &[AttributeDef],
    tok: &Tokenizer,
    span_len: usize,
    described_fraction: f64,
    seed: u64,
) -> Result<Vec<TextExample>> {
    let by_id: HashMap<&str, &SubjectRecord> =
        records.iter().map(|r| (r.subject_id.as_str(), r)).collect();
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "text-example", i as u64));
            let asm = assemble(
                tok,
                &tok.tokenize(&p.prompt),
                span_len,
                p.fcn_refs.len(),
                &tok.tokenize(&p.answer),
            )?;
            let described = rng.random::<f64>() < described_fraction;
            let def = attributes
                .iter()
                .find(|d| d.name == p.attribute)
                .ok_or_else(|| {
                    Error::Dataset(format!("{}: unknown attribute {}", p.id, p.attribute))
                })?;
            let fills = p
                .subject_ids
                .iter()
                .map(|sid| {
                    if !described {
                        return Ok(TextFill::Null);
                    }
                    let record = by_id.get(sid.as_str()).ok_or_else(|| {
                        Error::Dataset(format!("{}: unknown subject {sid}", p.id))
                    })?;
                    let value = record
                        .attributes
                        .get(&def.name)
                        .ok_or_else(|| Error::Dataset(format!("{sid} lacks {}", def.name)))?;
                    let word = tok.id(&canonical_answer(def, value)?);
                    let k = rng.random_range(1..=(span_len / 2).max(1));
                    let mut words = vec![None; span_len];
                    for pos in sample(&mut rng, span_len, k) {
                        words[pos] = Some(word);
                    }
                    Ok(TextFill::Words(words))
                })
                .collect::<Result<_>>()?;
            Ok(TextExample { asm, fills })
        })
        .collect()
}
