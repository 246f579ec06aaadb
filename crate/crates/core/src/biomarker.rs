//! Attention-derived saliency and FCN-token interaction maps.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::atlas::AtlasPartition;
use crate::error::{invalid, Error, Result};
use crate::fcn::io::{read_labelled_csv, write_labelled_csv};
use crate::instruct::InstructionPair;
use crate::toylm::{embed, forward, AttentionTensor, SpanFill, Tokenizer};
use crate::training::{build_example, FcnStore, ModelParams};

/// One non-negative score per FCN token, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyVector {
    pub scores: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMap {
    pub token_map: Array2<f64>,
    pub subnet_map: Array2<f64>,
}

fn check_positions(attn: &AttentionTensor, sets: &[&[usize]]) -> Result<()> {
    let n = attn.len();
    for set in sets {
        if set.is_empty() {
            return Err(invalid!("empty position set"));
        }
        if let Some(p) = set.iter().find(|&&p| p >= n) {
            return Err(invalid!("position {p} outside a sequence of length {n}"));
        }
    }
    Ok(())
}

/// Attention from answer queries onto FCN keys: mean over layers, summed
/// over heads and answer positions, normalized to unit mass.
pub fn aggregate_saliency(
    attn: &AttentionTensor,
    fcn_positions: &[usize],
    answer_positions: &[usize],
) -> Result<SaliencyVector> {
    check_positions(attn, &[fcn_positions, answer_positions])?;
    let fcn: BTreeSet<usize> = fcn_positions.iter().copied().collect();
    if answer_positions.iter().any(|p| fcn.contains(p)) {
        return Err(invalid!("answer and FCN positions overlap"));
    }
    let mut scores = Array1::zeros(fcn_positions.len());
    for l in 0..attn.layers() {
        for h in 0..attn.heads() {
            let m = attn.map(l, h);
            for &a in answer_positions {
                for (j, &k) in fcn_positions.iter().enumerate() {
                    scores[j] += m[[a, k]];
                }
            }
        }
    }
    let total = scores.sum();
    if !(total > 0.0) {
        return Err(invalid!(
            "answer positions place no attention on FCN tokens"
        ));
    }
    scores /= total;
    Ok(SaliencyVector { scores })
}

/// FCN-to-FCN attention: mean over layers, summed over heads, symmetrized
/// as `(M + Mᵀ) / 2` and normalized to unit mass.
pub fn token_interaction_map(
    attn: &AttentionTensor,
    fcn_positions: &[usize],
) -> Result<Array2<f64>> {
    check_positions(attn, &[fcn_positions])?;
    let s = fcn_positions.len();
    let mut m = Array2::<f64>::zeros((s, s));
    for l in 0..attn.layers() {
        for h in 0..attn.heads() {
            let a = attn.map(l, h);
            for (i, &qi) in fcn_positions.iter().enumerate() {
                for (j, &kj) in fcn_positions.iter().enumerate() {
                    m[[i, j]] += a[[qi, kj]];
                }
            }
        }
    }
    let sym = (&m + &m.t()) / 2.0;
    let total = sym.sum();
    if !(total > 0.0) {
        return Err(invalid!("FCN tokens place no attention on each other"));
    }
    Ok(sym / total)
}

/// Group index per token: subnetworks `0..N`, unassigned ROIs `N`, global
/// `N + 1`. Subnetwork tokens belong to no group.
fn token_groups(partition: &AtlasPartition) -> Vec<Option<usize>> {
    let d = partition.roi_count();
    let n = partition.subnet_count();
    let mut groups: Vec<Option<usize>> = (0..d)
        .map(|i| Some(partition.subnet_of(i).map_or(n, |k| k - 1)))
        .collect();
    groups.extend(std::iter::repeat_n(None, n));
    groups.push(Some(n + 1));
    groups
}

/// Block means of a token map over the `N + 2` groups. Empty blocks are 0.
pub fn group_by_subnetwork(map: &Array2<f64>, partition: &AtlasPartition) -> Result<Array2<f64>> {
    let tokens = partition.token_count();
    if map.nrows() != tokens || map.ncols() != tokens {
        return Err(invalid!(
            "a {}x{} map does not match the {tokens}-token layout",
            map.nrows(),
            map.ncols()
        ));
    }
    let g = partition.subnet_count() + 2;
    let groups = token_groups(partition);
    let mut sum = Array2::<f64>::zeros((g, g));
    let mut count = Array2::<f64>::zeros((g, g));
    for (i, gi) in groups.iter().enumerate() {
        let Some(a) = *gi else { continue };
        for (j, gj) in groups.iter().enumerate() {
            let Some(b) = *gj else { continue };
            sum[[a, b]] += map[[i, j]];
            count[[a, b]] += 1.0;
        }
    }
    Ok(ndarray::Zip::from(&sum)
        .and(&count)
        .map_collect(|&s, &c| if c == 0.0 { 0.0 } else { s / c }))
}

pub fn group_labels(partition: &AtlasPartition) -> Vec<String> {
    let mut labels: Vec<String> = (1..=partition.subnet_count())
        .map(|k| format!("subnet_{k}"))
        .collect();
    labels.push("unassigned".into());
    labels.push("global".into());
    labels
}

pub fn token_labels(partition: &AtlasPartition) -> Vec<String> {
    let mut labels = partition.roi_names().to_vec();
    labels.extend((1..=partition.subnet_count()).map(|k| format!("subnet_{k}")));
    labels.push("global".into());
    labels
}

/// Headered CSV with a label column; byte-identical for identical input.
pub fn emit_plot_data(
    map: &Array2<f64>,
    row_labels: &[String],
    col_labels: &[String],
    path: &Path,
) -> Result<()> {
    if row_labels.len() != map.nrows() || col_labels.len() != map.ncols() {
        return Err(invalid!(
            "labels do not match a {}x{} map",
            map.nrows(),
            map.ncols()
        ));
    }
    write_labelled_csv(map, row_labels, col_labels, path)
}

pub fn read_plot_data(path: &Path) -> Result<(Array2<f64>, Vec<String>, Vec<String>)> {
    read_labelled_csv(path)
}

/// Off-diagonal cell with the largest value, ties to the first in row order.
pub fn max_off_diagonal(map: &Array2<f64>) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for ((i, j), &v) in map.indexed_iter() {
        if i != j && best.is_none_or(|b| v > map[b]) {
            best = Some((i, j));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiomarkerReport {
    pub saliency: SaliencyVector,
    pub maps: InteractionMap,
    /// FCN spans averaged over.
    pub spans: usize,
}

/// Keeps pairs whose subjects all belong to `subjects`.
pub fn filter_pairs<'a>(
    pairs: &'a [InstructionPair],
    subjects: Option<&BTreeSet<String>>,
) -> Vec<&'a InstructionPair> {
    pairs
        .iter()
        .filter(|p| subjects.is_none_or(|s| p.subject_ids.iter().all(|id| s.contains(id))))
        .collect()
}

/// Teacher-forced attention of every pair, reduced to a mean saliency vector
/// and a mean token map (each span normalized before averaging).
pub fn analyze(
    model: &ModelParams,
    tok: &Tokenizer,
    store: &FcnStore,
    pairs: &[&InstructionPair],
) -> Result<BiomarkerReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no instruction pairs to analyze".into()));
    }
    let per_pair = pairs
        .par_iter()
        .map(|pair| {
            let ex = build_example(pair, tok, store, true)?;
            let tokens = ex
                .fcns
                .iter()
                .map(|&id| Ok(store.prepare(id)?.forward(&model.encoder).0))
                .collect::<Result<Vec<_>>>()?;
            let fills: Vec<SpanFill<'_>> =
                tokens.iter().map(|t| SpanFill::Tokens(t.view())).collect();
            let x = embed(&model.lm, &ex.asm, &fills)?;
            let attn = forward(x.view(), &model.lm)?.attention;
            let answer: Vec<usize> = ex.asm.map.prediction_positions().collect();
            ex.asm
                .map
                .fcn_spans
                .iter()
                .map(|span| {
                    let pos: Vec<usize> = span.clone().collect();
                    Ok((
                        aggregate_saliency(&attn, &pos, &answer)?,
                        token_interaction_map(&attn, &pos)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let s = store.span_len();
    let mut saliency = Array1::zeros(s);
    let mut token_map = Array2::zeros((s, s));
    let mut spans = 0;
    for (sal, map) in per_pair.into_iter().flatten() {
        saliency += &sal.scores;
        token_map += &map;
        spans += 1;
    }
    saliency /= spans as f64;
    token_map /= spans as f64;
    let subnet_map = group_by_subnetwork(&token_map, store.partition())?;
    Ok(BiomarkerReport {
        saliency: SaliencyVector { scores: saliency },
        maps: InteractionMap {
            token_map,
            subnet_map,
        },
        spans,
    })
}
