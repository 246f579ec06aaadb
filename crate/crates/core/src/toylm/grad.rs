//! Manual backpropagation for the toy language model.

use ndarray::{s, Array1, Array2, Axis};

use super::assemble::{Assembly, Slot, SpanFill};
use super::{gelu_grad, log_softmax, BlockCache, ForwardCache, LmParams, LnCache};
use crate::error::{invalid, Result};
use crate::params::ParamSet;

/// Loss and its gradient with respect to the logits.
pub fn loss_and_dlogits(
    logits: &Array2<f64>,
    targets: &[Option<usize>],
) -> Result<(f64, Array2<f64>)> {
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(invalid!("loss mask selects no positions"));
    }
    if targets.len() != logits.nrows() {
        return Err(invalid!(
            "{} targets for {} positions",
            targets.len(),
            logits.nrows()
        ));
    }
    let mut dl = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let inv = 1.0 / count as f64;
    for (t, target) in targets.iter().enumerate() {
        if let Some(y) = *target {
            let lp = log_softmax(logits.row(t));
            loss -= lp[y];
            let mut row = dl.row_mut(t);
            row.assign(&lp.mapv(|v| v.exp() * inv));
            row[y] -= inv;
        }
    }
    Ok((loss * inv, dl))
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let xh = cache.xhat.row(t);
        let dh = dxhat.row(t);
        let s1 = dh.sum();
        let s2 = dh.dot(&xh);
        let k = cache.inv_std[t] / d;
        dx.row_mut(t).assign(&((&dh * d - s1 - &xh * s2) * k));
    }
    (dx, dg, db)
}

fn block_backward(
    dout: Array2<f64>,
    p: &super::BlockParams,
    c: &BlockCache,
    heads: usize,
    g: Option<&mut super::BlockParams>,
) -> Array2<f64> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dact = dout.dot(&p.ff_w2.t());
    let mut dpre = dact;
    ndarray::Zip::from(&mut dpre)
        .and(&c.pre)
        .for_each(|g, &x| *g *= gelu_grad(x));
    let db_ = dpre.dot(&p.ff_w1.t());
    let (dln2, dg2, dbeta2) = ln_backward(&db_, &c.ln2, &p.ln2_g);
    let dx_mid = &dout + &dln2;

    let dconcat = dx_mid.dot(&p.wo.t());
    let n = dout.nrows();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let pm = &c.probs[h];
        let d_o = dconcat.slice(cols);
        let dp = d_o.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&pm.t().dot(&d_o));
        let mut ds = &dp * pm;
        let row_sums = ds.sum_axis(Axis(1));
        for (mut row, (prow, rs)) in ds
            .rows_mut()
            .into_iter()
            .zip(pm.rows().into_iter().zip(row_sums.iter()))
        {
            row.scaled_add(-rs, &prow);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let da = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    let (dln1, dg1, dbeta1) = ln_backward(&da, &c.ln1, &p.ln1_g);

    if let Some(g) = g {
        g.ff_w2 += &c.act.t().dot(&dout);
        g.ff_b2 += &dout.sum_axis(Axis(0));
        g.ff_w1 += &c.b.t().dot(&dpre);
        g.ff_b1 += &dpre.sum_axis(Axis(0));
        g.ln2_g += &dg2;
        g.ln2_b += &dbeta2;
        g.wo += &c.concat.t().dot(&dx_mid);
        g.wq += &c.a.t().dot(&dq);
        g.wk += &c.a.t().dot(&dk);
        g.wv += &c.a.t().dot(&dv);
        g.ln1_g += &dg1;
        g.ln1_b += &dbeta1;
    }
    dx_mid + dln1
}

/// Gradient of a scalar loss through the transformer. Returns the input
/// gradient and, when requested, parameter gradients (embedding tables are
/// left at zero; see [`embed_backward`]).
pub(crate) fn backward(
    params: &LmParams,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    want_params: bool,
) -> (Array2<f64>, Option<LmParams>) {
    let mut grads = want_params.then(|| params.zeros_like());
    let dy = dlogits.dot(&params.head.t());
    let (mut dx, dgf, dbf) = ln_backward(&dy, &cache.lnf, &params.lnf_g);
    if let Some(g) = grads.as_mut() {
        g.head += &cache.y.t().dot(dlogits);
        g.lnf_g += &dgf;
        g.lnf_b += &dbf;
    }
    for (i, (p, c)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = grads.as_mut().map(|g| &mut g.blocks[i]);
        dx = block_backward(dx, p, c, params.heads, gb);
    }
    (dx, grads)
}

/// Routes the input gradient to the embedding tables and returns one
/// gradient matrix per span filled with encoder tokens.
pub(crate) fn embed_backward(
    grads: Option<&mut LmParams>,
    asm: &Assembly,
    fills: &[SpanFill<'_>],
    dx0: &Array2<f64>,
) -> Vec<Option<Array2<f64>>> {
    let mut spans: Vec<Option<Array2<f64>>> = fills
        .iter()
        .map(|f| match f {
            SpanFill::Tokens(t) => Some(Array2::zeros(t.raw_dim())),
            _ => None,
        })
        .collect();
    let mut grads = grads;
    if let Some(g) = grads.as_deref_mut() {
        let n = dx0.nrows();
        let mut pos = g.pos_emb.slice_mut(s![..n, ..]);
        pos += dx0;
    }
    for (t, slot) in asm.slots.iter().enumerate() {
        let row = dx0.row(t);
        match *slot {
            Slot::Word(id) => {
                if let Some(g) = grads.as_deref_mut() {
                    let mut r = g.tok_emb.row_mut(id);
                    r += &row;
                }
            }
            Slot::Fcn { span, row: r } => match &fills[span] {
                SpanFill::Tokens(_) => {
                    spans[span]
                        .as_mut()
                        .expect("token span")
                        .row_mut(r)
                        .assign(&row);
                }
                SpanFill::Null => {
                    if let Some(g) = grads.as_deref_mut() {
                        g.null_fcn += &row;
                    }
                }
                SpanFill::Words(words) => {
                    if let Some(g) = grads.as_deref_mut() {
                        match words[r] {
                            Some(id) => {
                                let mut w = g.tok_emb.row_mut(id);
                                w += &row;
                            }
                            None => g.null_fcn += &row,
                        }
                    }
                }
            },
        }
    }
    spans
}

pub struct ExampleGrad {
    pub loss: f64,
    pub lm: Option<LmParams>,
    pub spans: Vec<Option<Array2<f64>>>,
}

/// Loss and gradients for one assembled example.
pub fn example_grad(
    params: &LmParams,
    asm: &Assembly,
    fills: &[SpanFill<'_>],
    want_lm: bool,
) -> Result<ExampleGrad> {
    let x0 = super::embed(params, asm, fills)?;
    let (logits, cache) = super::forward_cached(x0, params);
    let (loss, dl) = loss_and_dlogits(&logits, &asm.targets)?;
    let (dx0, mut lm) = backward(params, &cache, &dl, want_lm);
    let spans = embed_backward(lm.as_mut(), asm, fills, &dx0);
    Ok(ExampleGrad { loss, lm, spans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::{assemble, LmConfig, Tokenizer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt()
            + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    #[test]
    fn lm_gradients_match_finite_differences() {
        let tok = Tokenizer::from_words(["a", "b", "c", "yes", "no"]);
        let cfg = LmConfig {
            vocab: tok.len(),
            d_model: 16,
            heads: 2,
            blocks: 2,
            ff_hidden: 24,
            max_len: 16,
        };
        let mut p = LmParams::init(cfg, 3).unwrap();
        p.jitter(0.2, 4);
        let asm = assemble(
            &tok,
            &tok.tokenize("a <fcn> b <fcn>"),
            3,
            2,
            &tok.tokenize("yes c"),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let span = Array2::from_shape_fn((3, 16), |_| rng.random_range(-1.0..1.0));
        let words = vec![Some(tok.id("no")), None, Some(tok.id("c"))];
        let loss_of = |q: &LmParams, sp: &Array2<f64>| {
            let fills = [SpanFill::Tokens(sp.view()), SpanFill::Words(&words)];
            let x = super::super::embed(q, &asm, &fills).unwrap();
            super::super::masked_loss(super::super::logits(x.view(), q).view(), &asm.targets)
                .unwrap()
        };
        let fills = [SpanFill::Tokens(span.view()), SpanFill::Words(&words)];
        let g = example_grad(&p, &asm, &fills, true).unwrap();
        assert!((g.loss - loss_of(&p, &span)).abs() < 1e-12);
        let lm = g.lm.unwrap();
        let h = 1e-5;
        let analytic = lm.tensors();
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            let (name, a) = &analytic[ti];
            let mut numeric = Vec::with_capacity(a.len());
            for k in 0..a.len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.tensors_mut()[ti].1.as_slice_mut().unwrap()[k] += h;
                minus.tensors_mut()[ti].1.as_slice_mut().unwrap()[k] -= h;
                numeric.push((loss_of(&plus, &span) - loss_of(&minus, &span)) / (2.0 * h));
            }
            let a: Vec<f64> = a.iter().copied().collect();
            let e = rel(&a, &numeric);
            assert!(e < 1e-5, "{name}: relative error {e}");
        }
        let ds = g.spans[0].as_ref().unwrap();
        let mut numeric = Vec::new();
        for k in 0..span.len() {
            let mut plus = span.clone();
            let mut minus = span.clone();
            plus.as_slice_mut().unwrap()[k] += h;
            minus.as_slice_mut().unwrap()[k] -= h;
            numeric.push((loss_of(&p, &plus) - loss_of(&p, &minus)) / (2.0 * h));
        }
        let e = rel(ds.as_slice().unwrap(), &numeric);
        assert!(e < 1e-5, "span tokens: relative error {e}");
        assert!(g.spans[1].is_none());
    }
}
