//! Small decoder-only transformer with pre-normalization, learned absolute
//! positions and retained attention maps.

pub mod assemble;
pub mod grad;
pub mod tokenizer;

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::glorot;
use crate::error::{invalid, Result};
use crate::params::ParamSet;

pub use assemble::{assemble, embed, Assembly, PositionMap, Slot, SpanFill};
pub use tokenizer::Tokenizer;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    pub max_len: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.heads == 0 || self.ff_hidden == 0 {
            return Err(invalid!("language model dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid!(
                "{} heads do not divide d_model={}",
                self.heads,
                self.d_model
            ));
        }
        if self.max_len < 2 {
            return Err(invalid!("max_len must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub heads: usize,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub null_fcn: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub head: Array2<f64>,
}

impl LmParams {
    pub fn init(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut small =
            |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| normal.sample(&mut rng));
        let tok_emb = small(cfg.vocab, cfg.d_model);
        let pos_emb = small(cfg.max_len, cfg.d_model);
        let null_fcn = small(1, cfg.d_model).row(0).to_owned();
        let d = cfg.d_model;
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: glorot(&mut rng, d, d),
                wk: glorot(&mut rng, d, d),
                wv: glorot(&mut rng, d, d),
                wo: glorot(&mut rng, d, d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                ff_w1: glorot(&mut rng, d, cfg.ff_hidden),
                ff_b1: Array1::zeros(cfg.ff_hidden),
                ff_w2: glorot(&mut rng, cfg.ff_hidden, d),
                ff_b2: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            heads: cfg.heads,
            tok_emb,
            pos_emb,
            null_fcn,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head: glorot(&mut rng, d, cfg.vocab),
        })
    }

    pub fn config(&self) -> LmConfig {
        LmConfig {
            vocab: self.tok_emb.nrows(),
            d_model: self.tok_emb.ncols(),
            heads: self.heads,
            blocks: self.blocks.len(),
            ff_hidden: self
                .blocks
                .first()
                .map_or(4 * self.d_model(), |b| b.ff_w1.ncols()),
            max_len: self.pos_emb.nrows(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.tok_emb.ncols()
    }

    pub fn vocab(&self) -> usize {
        self.tok_emb.nrows()
    }

    /// Small random perturbation of every tensor; used by tests that need
    /// non-trivial normalization scales and biases.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v + rng.random_range(-scale..scale));
        }
    }
}

macro_rules! lm_tensors {
    ($self:ident, $view:ident, $iter:ident) => {{
        let mut out = vec![
            ("lm.tok_emb".to_string(), $self.tok_emb.$view().into_dyn()),
            ("lm.pos_emb".to_string(), $self.pos_emb.$view().into_dyn()),
            ("lm.null_fcn".to_string(), $self.null_fcn.$view().into_dyn()),
        ];
        for (i, b) in $self.blocks.$iter().enumerate() {
            let p = format!("lm.block{i}.");
            out.push((format!("{p}ln1_g"), b.ln1_g.$view().into_dyn()));
            out.push((format!("{p}ln1_b"), b.ln1_b.$view().into_dyn()));
            out.push((format!("{p}wq"), b.wq.$view().into_dyn()));
            out.push((format!("{p}wk"), b.wk.$view().into_dyn()));
            out.push((format!("{p}wv"), b.wv.$view().into_dyn()));
            out.push((format!("{p}wo"), b.wo.$view().into_dyn()));
            out.push((format!("{p}ln2_g"), b.ln2_g.$view().into_dyn()));
            out.push((format!("{p}ln2_b"), b.ln2_b.$view().into_dyn()));
            out.push((format!("{p}ff_w1"), b.ff_w1.$view().into_dyn()));
            out.push((format!("{p}ff_b1"), b.ff_b1.$view().into_dyn()));
            out.push((format!("{p}ff_w2"), b.ff_w2.$view().into_dyn()));
            out.push((format!("{p}ff_b2"), b.ff_b2.$view().into_dyn()));
        }
        out.push(("lm.lnf_g".to_string(), $self.lnf_g.$view().into_dyn()));
        out.push(("lm.lnf_b".to_string(), $self.lnf_b.$view().into_dyn()));
        out.push(("lm.head".to_string(), $self.head.$view().into_dyn()));
        out
    }};
}

impl ParamSet for LmParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        lm_tensors!(self, view, iter)
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        lm_tensors!(self, view_mut, iter_mut)
    }
}

/// Attention probabilities, shape `layers x heads x n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub weights: Array4<f64>,
}

impl AttentionTensor {
    pub fn layers(&self) -> usize {
        self.weights.shape()[0]
    }
    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }
    pub fn len(&self) -> usize {
        self.weights.shape()[2]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn map(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.weights.slice(s![layer, head, .., ..])
    }
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    g: &Array1<f64>,
    b: &Array1<f64>,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.dot(&row) / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax over the causal prefix; entries above the diagonal are 0.
pub(crate) fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let m = row
            .slice(s![..=i])
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - m).exp();
                z += *v;
            } else {
                *v = 0.0;
            }
        }
        row.slice_mut(s![..=i]).mapv_inplace(|v| v / z);
    }
}

pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub a: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
    pub ln2: LnCache,
    pub b: Array2<f64>,
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub lnf: LnCache,
    pub y: Array2<f64>,
}

pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub attention: AttentionTensor,
}

fn block_forward(x: Array2<f64>, p: &BlockParams, heads: usize) -> (Array2<f64>, BlockCache) {
    let n = x.nrows();
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(&x, &p.ln1_g, &p.ln1_b);
    let q = a.dot(&p.wq);
    let k = a.dot(&p.wk);
    let v = a.dot(&p.wv);
    let mut concat = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        causal_softmax(&mut sc);
        concat.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let x_mid = &x + &concat.dot(&p.wo);
    let (b, ln2) = layer_norm(&x_mid, &p.ln2_g, &p.ln2_b);
    let pre = b.dot(&p.ff_w1) + &p.ff_b1;
    let act = pre.mapv(gelu);
    let out = &x_mid + &(act.dot(&p.ff_w2) + &p.ff_b2);
    let cache = BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        concat,
        ln2,
        b,
        pre,
        act,
    };
    (out, cache)
}

pub(crate) fn forward_cached(x0: Array2<f64>, params: &LmParams) -> (Array2<f64>, ForwardCache) {
    let mut x = x0;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for p in &params.blocks {
        let (next, cache) = block_forward(x, p, params.heads);
        blocks.push(cache);
        x = next;
    }
    let (y, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = y.dot(&params.head);
    (logits, ForwardCache { blocks, lnf, y })
}

fn attention_of(cache: &ForwardCache, heads: usize, n: usize) -> AttentionTensor {
    let mut weights = Array4::zeros((cache.blocks.len(), heads, n, n));
    for (l, b) in cache.blocks.iter().enumerate() {
        for (h, pm) in b.probs.iter().enumerate() {
            weights.slice_mut(s![l, h, .., ..]).assign(pm);
        }
    }
    AttentionTensor { weights }
}

/// Logits at every position plus the retained attention maps.
pub fn forward(x0: ArrayView2<f64>, params: &LmParams) -> Result<ForwardOutput> {
    if x0.nrows() == 0 {
        return Err(invalid!("empty input sequence"));
    }
    if x0.ncols() != params.d_model() {
        return Err(invalid!(
            "input width {} != d_model {}",
            x0.ncols(),
            params.d_model()
        ));
    }
    let n = x0.nrows();
    let (logits, cache) = forward_cached(x0.to_owned(), params);
    Ok(ForwardOutput {
        attention: attention_of(&cache, params.heads, n),
        logits,
    })
}

/// Logits only, skipping the attention copy.
pub fn logits(x0: ArrayView2<f64>, params: &LmParams) -> Array2<f64> {
    forward_cached(x0.to_owned(), params).0
}

pub fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.mapv(|v| v - lse)
}

/// Mean next-token cross-entropy over positions carrying a target.
pub fn masked_loss(logits: ArrayView2<f64>, targets: &[Option<usize>]) -> Result<f64> {
    if targets.len() != logits.nrows() {
        return Err(invalid!(
            "{} targets for {} positions",
            targets.len(),
            logits.nrows()
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, target) in targets.iter().enumerate() {
        if let Some(y) = *target {
            if y >= logits.ncols() {
                return Err(invalid!("target id {y} outside vocabulary"));
            }
            total -= log_softmax(logits.row(t))[y];
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid!("loss mask selects no positions"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive generation from a prompt assembly ending in `<sep>`.
/// Returns the generated ids without the closing `<eos>`.
pub fn decode_ids(
    params: &LmParams,
    tok: &Tokenizer,
    prompt: &Assembly,
    fills: &[SpanFill<'_>],
    mode: DecodeMode,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut asm = prompt.clone();
    let mut x = embed(params, &asm, fills)?;
    let mut rng = match mode {
        DecodeMode::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let mut out = Vec::new();
    while out.len() < max_len && asm.len() < params.pos_emb.nrows() {
        let lg = logits(x.view(), params);
        let last = lg.row(lg.nrows() - 1);
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                let lp = log_softmax(last.mapv(|v| v / temperature).view());
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = lp.len() - 1;
                for (i, l) in lp.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
            _ => argmax(last),
        };
        if next == tok.eos() {
            break;
        }
        out.push(next);
        asm.push_word(next);
        let t = asm.len() - 1;
        let row = &params.tok_emb.row(next) + &params.pos_emb.row(t);
        x.push(Axis(0), row.view()).expect("width matches");
    }
    Ok(out)
}

pub fn decode(
    params: &LmParams,
    tok: &Tokenizer,
    prompt: &Assembly,
    fills: &[SpanFill<'_>],
    mode: DecodeMode,
    max_len: usize,
) -> Result<String> {
    Ok(tok.detokenize(&decode_ids(params, tok, prompt, fills, mode, max_len)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn cfg() -> LmConfig {
        LmConfig {
            vocab: 11,
            d_model: 8,
            heads: 2,
            blocks: 2,
            ff_hidden: 12,
            max_len: 16,
        }
    }

    fn input(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 8), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = cfg();
        c.heads = 3;
        assert!(LmParams::init(c, 0).is_err());
    }

    #[test]
    fn causality_and_row_sums() {
        let mut p = LmParams::init(cfg(), 1).unwrap();
        p.jitter(0.1, 2);
        let x = input(6, 3);
        let out = forward(x.view(), &p).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                let m = out.attention.map(l, h);
                for i in 0..6 {
                    assert!((m.row(i).sum() - 1.0).abs() < 1e-6);
                    for j in 0..6 {
                        assert!(m[[i, j]] >= 0.0);
                        if j > i {
                            assert_eq!(m[[i, j]], 0.0);
                        }
                    }
                }
            }
        }
        for t in 0..5 {
            let mut y = x.clone();
            y.row_mut(t + 1).mapv_inplace(|v| v + 0.7);
            let out2 = forward(y.view(), &p).unwrap();
            for s in 0..=t {
                for (a, b) in out.logits.row(s).iter().zip(out2.logits.row(s).iter()) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn hand_computed_single_head() {
        // d=2, one block, one head, identity projections, LN scale 1 and
        // zero offsets, zero feed-forward. Two positions.
        let c = LmConfig {
            vocab: 2,
            d_model: 2,
            heads: 1,
            blocks: 1,
            ff_hidden: 1,
            max_len: 2,
        };
        let mut p = LmParams::init(c, 0).unwrap();
        let b = &mut p.blocks[0];
        b.wq = Array2::eye(2);
        b.wk = Array2::eye(2);
        b.wv = Array2::eye(2);
        b.wo = Array2::eye(2);
        b.ff_w1.fill(0.0);
        b.ff_w2.fill(0.0);
        p.head = Array2::eye(2);
        let x = ndarray::array![[1.0, 0.0], [0.0, 2.0]];
        let out = forward(x.view(), &p).unwrap();

        // LN of [1,0] and [0,2]: each becomes [s,-s] or [-s,s] with
        // s = 1/sqrt(1 + eps') where the variance is 0.25 and 1.0.
        let s0 = 0.5 / (0.25f64 + LN_EPS).sqrt();
        let s1 = 1.0 / (1.0f64 + LN_EPS).sqrt();
        let a0 = [s0, -s0];
        let a1 = [-s1, s1];
        let dot = (a1[0] * a0[0] + a1[1] * a0[1]) / 2f64.sqrt();
        let self_dot = (a1[0] * a1[0] + a1[1] * a1[1]) / 2f64.sqrt();
        let p10 = 1.0 / (1.0 + (self_dot - dot).exp());
        let p11 = 1.0 - p10;
        assert!((out.attention.map(0, 0)[[1, 0]] - p10).abs() < 1e-8);
        assert!((out.attention.map(0, 0)[[1, 1]] - p11).abs() < 1e-8);

        let h0 = [x[[0, 0]] + a0[0], x[[0, 1]] + a0[1]];
        let h1 = [
            x[[1, 0]] + p10 * a0[0] + p11 * a1[0],
            x[[1, 1]] + p10 * a0[1] + p11 * a1[1],
        ];
        for (t, h) in [h0, h1].iter().enumerate() {
            let mu = (h[0] + h[1]) / 2.0;
            let var = ((h[0] - mu).powi(2) + (h[1] - mu).powi(2)) / 2.0;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..2 {
                assert!((out.logits[[t, j]] - (h[j] - mu) * inv).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn masked_loss_cases() {
        let v = 7;
        let z = Array2::zeros((3, v));
        let l = masked_loss(z.view(), &[None, Some(2), Some(5)]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let mut sharp = Array2::zeros((2, v));
        sharp[[0, 3]] = 200.0;
        assert!(masked_loss(sharp.view(), &[Some(3), None]).unwrap() < 1e-12);
        assert!(masked_loss(z.view(), &[None, None, None]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lg = Array2::<f64>::from_shape_fn((5, v), |_| rng.random_range(-3.0..3.0));
        let targets = [Some(1), None, Some(6), Some(0), None];
        let mut total = 0.0;
        for (t, y) in targets.iter().enumerate() {
            if let Some(y) = y {
                let mut z = 0.0;
                for j in 0..v {
                    z += lg[[t, j]].exp();
                }
                total += -(lg[[t, *y]].exp() / z).ln();
            }
        }
        let got = masked_loss(lg.view(), &targets).unwrap();
        assert!((got - total / 3.0).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(vals in proptest::collection::vec(-5.0f64..5.0, 1..8), c in -50.0f64..50.0) {
            let row = Array1::from(vals);
            let a = log_softmax(row.view()).mapv(f64::exp);
            let b = log_softmax(row.mapv(|v| v + c).view()).mapv(f64::exp);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            let n = row.len();
            let mut m1 = Array2::from_shape_fn((n, n), |(_, j)| row[j]);
            let mut m2 = m1.mapv(|v| v + c);
            causal_softmax(&mut m1);
            causal_softmax(&mut m2);
            for (x, y) in m1.iter().zip(m2.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn param_names_cover_every_tensor() {
        let p = LmParams::init(cfg(), 0).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 3 + 2 * 12 + 3);
        assert!(names.contains(&"lm.block1.ff_w2".to_string()));
    }

    #[test]
    fn decode_modes() {
        let tok = Tokenizer::from_words(["a", "b", "c", "d", "e"]);
        let c = LmConfig {
            vocab: tok.len(),
            ..cfg()
        };
        let mut p = LmParams::init(c, 4).unwrap();
        p.jitter(0.5, 5);
        let asm = assemble(&tok, &tok.tokenize("a <fcn> b"), 3, 1, &[]).unwrap();
        let fills = [SpanFill::Null];
        let g = decode_ids(&p, &tok, &asm, &fills, DecodeMode::Greedy, 4).unwrap();
        let cold = decode_ids(
            &p,
            &tok,
            &asm,
            &fills,
            DecodeMode::Sample {
                temperature: 1e-4,
                seed: 1,
            },
            4,
        )
        .unwrap();
        assert_eq!(g, cold);
        let hot = DecodeMode::Sample {
            temperature: 1.5,
            seed: 77,
        };
        assert_eq!(
            decode_ids(&p, &tok, &asm, &fills, hot, 4).unwrap(),
            decode_ids(&p, &tok, &asm, &fills, hot, 4).unwrap()
        );
        assert!(g.len() <= 4);
    }
}
