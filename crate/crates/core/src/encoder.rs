//! Multi-scale FCN encoder.
//!
//! Produces `D + N + 1` tokens per FCN: one per ROI (the FCN rows), one per
//! subnetwork (mean of member rows) and one whole-brain token (mean of the
//! node features after a two-layer GCN over the thresholded graph). A shared
//! two-layer perceptron projects every token into the language model width.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::AtlasPartition;
use crate::error::{invalid, Result};
use crate::fcn::{normalize_adjacency, threshold_adjacency, FcnMatrix, NormalizedAdjacency};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub rois: usize,
    pub gcn_hidden: usize,
    pub proj_hidden: usize,
    pub model: usize,
}

impl EncoderDims {
    pub fn full_size(model: usize) -> Self {
        Self {
            rois: 116,
            gcn_hidden: 256,
            proj_hidden: 256,
            model,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub gcn_w1: Array2<f64>,
    pub gcn_b1: Array1<f64>,
    pub gcn_w2: Array2<f64>,
    pub gcn_b2: Array1<f64>,
    pub proj_w1: Array2<f64>,
    pub proj_b1: Array1<f64>,
    pub proj_w2: Array2<f64>,
    pub proj_b2: Array1<f64>,
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let EncoderDims {
            rois,
            gcn_hidden,
            proj_hidden,
            model,
        } = dims;
        Self {
            gcn_w1: glorot(&mut rng, rois, gcn_hidden),
            gcn_b1: Array1::zeros(gcn_hidden),
            gcn_w2: glorot(&mut rng, gcn_hidden, rois),
            gcn_b2: Array1::zeros(rois),
            proj_w1: glorot(&mut rng, rois, proj_hidden),
            proj_b1: Array1::zeros(proj_hidden),
            proj_w2: glorot(&mut rng, proj_hidden, model),
            proj_b2: Array1::zeros(model),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            rois: self.gcn_w1.nrows(),
            gcn_hidden: self.gcn_w1.ncols(),
            proj_hidden: self.proj_w1.ncols(),
            model: self.proj_w2.ncols(),
        }
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("encoder.gcn_w1".into(), self.gcn_w1.view().into_dyn()),
            ("encoder.gcn_b1".into(), self.gcn_b1.view().into_dyn()),
            ("encoder.gcn_w2".into(), self.gcn_w2.view().into_dyn()),
            ("encoder.gcn_b2".into(), self.gcn_b2.view().into_dyn()),
            ("encoder.proj_w1".into(), self.proj_w1.view().into_dyn()),
            ("encoder.proj_b1".into(), self.proj_b1.view().into_dyn()),
            ("encoder.proj_w2".into(), self.proj_w2.view().into_dyn()),
            ("encoder.proj_b2".into(), self.proj_b2.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("encoder.gcn_w1".into(), self.gcn_w1.view_mut().into_dyn()),
            ("encoder.gcn_b1".into(), self.gcn_b1.view_mut().into_dyn()),
            ("encoder.gcn_w2".into(), self.gcn_w2.view_mut().into_dyn()),
            ("encoder.gcn_b2".into(), self.gcn_b2.view_mut().into_dyn()),
            ("encoder.proj_w1".into(), self.proj_w1.view_mut().into_dyn()),
            ("encoder.proj_b1".into(), self.proj_b1.view_mut().into_dyn()),
            ("encoder.proj_w2".into(), self.proj_w2.view_mut().into_dyn()),
            ("encoder.proj_b2".into(), self.proj_b2.view_mut().into_dyn()),
        ]
    }
}

/// Unprojected tokens, each of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTokens {
    pub roi: Array2<f64>,
    pub subnet: Array2<f64>,
    pub global: Array1<f64>,
}

impl RawTokens {
    /// Stacks ROI, subnetwork and global tokens into one `(D+N+1) x D` matrix.
    pub fn stacked(&self) -> Array2<f64> {
        let d = self.roi.ncols();
        let n = self.roi.nrows() + self.subnet.nrows() + 1;
        let mut out = Array2::zeros((n, d));
        out.slice_mut(ndarray::s![..self.roi.nrows(), ..])
            .assign(&self.roi);
        out.slice_mut(ndarray::s![self.roi.nrows()..n - 1, ..])
            .assign(&self.subnet);
        out.row_mut(n - 1).assign(&self.global);
        out
    }
}

/// Projected tokens in ROI, subnetwork, global order.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnTokenSequence {
    pub tokens: Array2<f64>,
    pub roi_count: usize,
    pub subnet_count: usize,
}

impl FcnTokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn roi_tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.slice(ndarray::s![..self.roi_count, ..])
    }

    pub fn subnet_tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.slice(ndarray::s![
            self.roi_count..self.roi_count + self.subnet_count,
            ..
        ])
    }

    pub fn global_token(&self) -> ndarray::ArrayView1<'_, f64> {
        self.tokens.row(self.tokens.nrows() - 1)
    }
}

pub fn extract_roi_tokens(fcn: &FcnMatrix) -> Array2<f64> {
    fcn.values().clone()
}

/// Mean of member ROI tokens for each subnetwork; unassigned ROIs are skipped.
pub fn pool_subnetworks(roi: ArrayView2<f64>, partition: &AtlasPartition) -> Result<Array2<f64>> {
    if roi.nrows() != partition.roi_count() {
        return Err(invalid!(
            "{} ROI tokens but the atlas has {} regions",
            roi.nrows(),
            partition.roi_count()
        ));
    }
    let n = partition.subnet_count();
    let mut out = Array2::zeros((n, roi.ncols()));
    let mut counts = vec![0usize; n];
    for (i, s) in partition.assignments().iter().enumerate() {
        if let Some(k) = s {
            out.row_mut(k - 1).scaled_add(1.0, &roi.row(i));
            counts[k - 1] += 1;
        }
    }
    for (k, c) in counts.into_iter().enumerate() {
        out.row_mut(k).mapv_inplace(|v| v / c as f64);
    }
    Ok(out)
}

/// Two-layer GCN over the FCN node profiles; rectified hidden layer, linear
/// output. Returns the `D x D` output node matrix.
pub fn gcn_forward(
    fcn: &FcnMatrix,
    norm_adj: &NormalizedAdjacency,
    params: &EncoderParams,
) -> Result<Array2<f64>> {
    let d = fcn.dim();
    let a = norm_adj.values();
    if a.dim() != (d, d) || params.gcn_w1.nrows() != d || params.gcn_w2.ncols() != d {
        return Err(invalid!(
            "GCN shape mismatch: FCN {d}x{d}, adjacency {:?}, W1 {:?}, W2 {:?}",
            a.dim(),
            params.gcn_w1.dim(),
            params.gcn_w2.dim()
        ));
    }
    let h1 = (a.dot(fcn.values()).dot(&params.gcn_w1) + &params.gcn_b1).mapv(|v| v.max(0.0));
    Ok(a.dot(&h1).dot(&params.gcn_w2) + &params.gcn_b2)
}

pub fn global_pool(nodes: ArrayView2<f64>) -> Array1<f64> {
    nodes.mean_axis(Axis(0)).expect("at least one node")
}

/// Applies the shared projector to every stacked raw token.
pub fn project_rows(raw: ArrayView2<f64>, params: &EncoderParams) -> Array2<f64> {
    let hidden = (raw.dot(&params.proj_w1) + &params.proj_b1).mapv(|v| v.max(0.0));
    hidden.dot(&params.proj_w2) + &params.proj_b2
}

pub fn project_tokens(raw: &RawTokens, params: &EncoderParams) -> FcnTokenSequence {
    FcnTokenSequence {
        tokens: project_rows(raw.stacked().view(), params),
        roi_count: raw.roi.nrows(),
        subnet_count: raw.subnet.nrows(),
    }
}

pub fn raw_tokens(
    fcn: &FcnMatrix,
    partition: &AtlasPartition,
    params: &EncoderParams,
    tau: f64,
) -> Result<RawTokens> {
    let roi = extract_roi_tokens(fcn);
    let subnet = pool_subnetworks(roi.view(), partition)?;
    let adj = normalize_adjacency(&threshold_adjacency(fcn, tau)?);
    let nodes = gcn_forward(fcn, &adj, params)?;
    Ok(RawTokens {
        roi,
        subnet,
        global: global_pool(nodes.view()),
    })
}

pub fn encode(
    fcn: &FcnMatrix,
    partition: &AtlasPartition,
    params: &EncoderParams,
    tau: f64,
) -> Result<FcnTokenSequence> {
    Ok(project_tokens(
        &raw_tokens(fcn, partition, params, tau)?,
        params,
    ))
}

/// Parameter-independent quantities of one FCN, precomputed for training.
///
/// The global token only needs the column means of the normalized adjacency:
/// `mean_rows(Â H W2 + b2) = (cᵀ H) W2 + b2` with `c = Âᵀ 1 / D`.
#[derive(Debug, Clone)]
pub struct PreparedFcn {
    /// `Â F`, the first-layer propagation input.
    propagated: Array2<f64>,
    col_mean: Array1<f64>,
    /// ROI and subnetwork raw tokens; the global row is appended per call.
    fixed_rows: Array2<f64>,
}

pub struct EncoderCache {
    gcn_pre: Array2<f64>,
    pooled_hidden: Array1<f64>,
    raw: Array2<f64>,
    proj_pre: Array2<f64>,
    proj_hidden: Array2<f64>,
}

impl PreparedFcn {
    pub fn new(fcn: &FcnMatrix, partition: &AtlasPartition, tau: f64) -> Result<Self> {
        let roi = extract_roi_tokens(fcn);
        let subnet = pool_subnetworks(roi.view(), partition)?;
        let adj = normalize_adjacency(&threshold_adjacency(fcn, tau)?);
        let a = adj.values();
        let d = fcn.dim();
        let mut fixed_rows = Array2::zeros((d + subnet.nrows(), d));
        fixed_rows.slice_mut(ndarray::s![..d, ..]).assign(&roi);
        fixed_rows.slice_mut(ndarray::s![d.., ..]).assign(&subnet);
        Ok(Self {
            propagated: a.dot(fcn.values()),
            col_mean: a.mean_axis(Axis(0)).expect("non-empty"),
            fixed_rows,
        })
    }

    pub fn token_count(&self) -> usize {
        self.fixed_rows.nrows() + 1
    }

    pub fn forward(&self, p: &EncoderParams) -> (Array2<f64>, EncoderCache) {
        let gcn_pre = self.propagated.dot(&p.gcn_w1) + &p.gcn_b1;
        let pooled_hidden = self.col_mean.dot(&gcn_pre.mapv(|v| v.max(0.0)));
        let global = pooled_hidden.dot(&p.gcn_w2) + &p.gcn_b2;
        let mut raw = self.fixed_rows.clone();
        raw.push_row(global.view()).expect("width D");
        let proj_pre = raw.dot(&p.proj_w1) + &p.proj_b1;
        let proj_hidden = proj_pre.mapv(|v| v.max(0.0));
        let tokens = proj_hidden.dot(&p.proj_w2) + &p.proj_b2;
        let cache = EncoderCache {
            gcn_pre,
            pooled_hidden,
            raw,
            proj_pre,
            proj_hidden,
        };
        (tokens, cache)
    }

    /// Accumulates parameter gradients given the gradient of the projected
    /// tokens.
    pub fn backward(
        &self,
        p: &EncoderParams,
        c: &EncoderCache,
        d_tokens: &Array2<f64>,
        g: &mut EncoderParams,
    ) {
        g.proj_w2 += &c.proj_hidden.t().dot(d_tokens);
        g.proj_b2 += &d_tokens.sum_axis(Axis(0));
        let mut dz = d_tokens.dot(&p.proj_w2.t());
        ndarray::Zip::from(&mut dz)
            .and(&c.proj_pre)
            .for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        g.proj_w1 += &c.raw.t().dot(&dz);
        g.proj_b1 += &dz.sum_axis(Axis(0));
        let last = dz.nrows() - 1;
        let d_global = dz.row(last).dot(&p.proj_w1.t());
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view()
                .insert_axis(Axis(1))
                .dot(&b.view().insert_axis(Axis(0)))
        };
        g.gcn_w2 += &outer(&c.pooled_hidden, &d_global);
        g.gcn_b2 += &d_global;
        let d_pooled = p.gcn_w2.dot(&d_global);
        let mut d_pre = outer(&self.col_mean, &d_pooled);
        ndarray::Zip::from(&mut d_pre)
            .and(&c.gcn_pre)
            .for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        g.gcn_w1 += &self.propagated.t().dot(&d_pre);
        g.gcn_b1 += &d_pre.sum_axis(Axis(0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::{pearson_fcn, AdjacencyMatrix, BoldSeries};

    fn random_fcn(d: usize, seed: u64) -> FcnMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = Array2::from_shape_fn((3 * d, d), |_| rng.random_range(-1.0..1.0));
        pearson_fcn(&BoldSeries::new("s", samples).unwrap()).unwrap()
    }

    fn small_params(d: usize, model: usize, seed: u64) -> EncoderParams {
        let mut p = EncoderParams::init(
            EncoderDims {
                rois: d,
                gcn_hidden: 5,
                proj_hidden: 6,
                model,
            },
            seed,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (_, mut t) in p.tensors_mut() {
            t.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        p
    }

    fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[[i, k]] * b[[k, j]];
                }
                out[[i, j]] = s;
            }
        }
        out
    }

    #[test]
    fn roi_tokens_are_rows_and_columns() {
        let fcn = random_fcn(5, 1);
        let roi = extract_roi_tokens(&fcn);
        for i in 0..5 {
            assert_eq!(roi.row(i), fcn.values().row(i));
            assert_eq!(roi.row(i), fcn.values().column(i));
        }
        let id = FcnMatrix::from_values(Array2::eye(4)).unwrap();
        assert_eq!(extract_roi_tokens(&id), Array2::<f64>::eye(4));
    }

    #[test]
    fn pooling_constant_tokens_and_singletons() {
        let atlas = AtlasPartition::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![Some(1), Some(1), Some(2), None],
            2,
        )
        .unwrap();
        let v = Array1::from(vec![0.1, -0.2, 0.3]);
        let roi = Array2::from_shape_fn((4, 3), |(_, j)| v[j]);
        let pooled = pool_subnetworks(roi.view(), &atlas).unwrap();
        for k in 0..2 {
            assert_eq!(pooled.row(k), v);
        }
        let roi = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let pooled = pool_subnetworks(roi.view(), &atlas).unwrap();
        assert_eq!(pooled.row(1), roi.row(2));
    }

    #[test]
    fn pooling_matches_loop_mean() {
        let atlas = AtlasPartition::round_robin(8, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let roi = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
        let pooled = pool_subnetworks(roi.view(), &atlas).unwrap();
        for k in 1..=3 {
            for j in 0..4 {
                let mut s = 0.0;
                let mut c = 0.0;
                for i in 0..8 {
                    if atlas.subnet_of(i) == Some(k) {
                        s += roi[[i, j]];
                        c += 1.0;
                    }
                }
                assert!((pooled[[k - 1, j]] - s / c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_with_zero_weights_returns_bias() {
        let fcn = random_fcn(4, 2);
        let mut p = small_params(4, 3, 3);
        p.gcn_w1.fill(0.0);
        p.gcn_w2.fill(0.0);
        let adj = normalize_adjacency(&threshold_adjacency(&fcn, 0.2).unwrap());
        let out = gcn_forward(&fcn, &adj, &p).unwrap();
        for row in out.rows() {
            assert_eq!(row, p.gcn_b2);
        }
    }

    #[test]
    fn gcn_without_edges_is_per_node_perceptron() {
        let fcn = random_fcn(4, 4);
        let p = small_params(4, 3, 5);
        let out = gcn_forward(&fcn, &NormalizedAdjacency::identity(4), &p).unwrap();
        for i in 0..4 {
            let x = fcn.values().row(i);
            let h: Array1<f64> = (x.dot(&p.gcn_w1) + &p.gcn_b1).mapv(|v| v.max(0.0));
            let y = h.dot(&p.gcn_w2) + &p.gcn_b2;
            for j in 0..4 {
                assert!((out[[i, j]] - y[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let fcn = random_fcn(4, 6);
        let p = small_params(4, 3, 7);
        let adj = normalize_adjacency(&threshold_adjacency(&fcn, 0.3).unwrap());
        let out = gcn_forward(&fcn, &adj, &p).unwrap();
        let a = adj.values();
        let mut h1 = matmul(&matmul(a, fcn.values()), &p.gcn_w1);
        for mut r in h1.rows_mut() {
            for (v, b) in r.iter_mut().zip(p.gcn_b1.iter()) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut h2 = matmul(&matmul(a, &h1), &p.gcn_w2);
        for mut r in h2.rows_mut() {
            for (v, b) in r.iter_mut().zip(p.gcn_b2.iter()) {
                *v += b;
            }
        }
        for (x, y) in out.iter().zip(h2.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn gcn_shape_mismatch_is_an_error() {
        let fcn = random_fcn(4, 8);
        let p = small_params(5, 3, 9);
        assert!(gcn_forward(&fcn, &NormalizedAdjacency::identity(4), &p).is_err());
    }

    #[test]
    fn global_pool_cases() {
        let v = Array1::from(vec![1.0, 2.0, -3.0]);
        let rows = Array2::from_shape_fn((4, 3), |(_, j)| v[j]);
        assert_eq!(global_pool(rows.view()), v);
        let paired = Array2::from_shape_fn((4, 3), |(i, j)| if i % 2 == 0 { v[j] } else { -v[j] });
        assert!(global_pool(paired.view()).iter().all(|x| x.abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let g = global_pool(m.view());
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..5 {
                s += m[[i, j]];
            }
            assert!((g[j] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projector_broadcasts_bias() {
        let fcn = random_fcn(4, 10);
        let atlas = AtlasPartition::round_robin(4, 2, 0).unwrap();
        let mut p = small_params(4, 3, 11);
        p.proj_w1.fill(0.0);
        p.proj_b1.fill(0.0);
        p.proj_w2.fill(0.0);
        let seq = encode(&fcn, &atlas, &p, 0.5).unwrap();
        for row in seq.tokens.rows() {
            assert_eq!(row, p.proj_b2);
        }
    }

    #[test]
    fn identity_projector_is_transparent() {
        // Non-negative inputs pass the rectifier unchanged.
        let d = 4;
        let mut p = small_params(d, d, 12);
        p.proj_w1 = Array2::eye(d);
        p.proj_b1 = Array1::zeros(d);
        p.proj_w2 = Array2::eye(d);
        p.proj_b2.fill(0.0);
        let raw = RawTokens {
            roi: Array2::from_shape_fn((d, d), |(i, j)| ((i + j) % 3) as f64 * 0.25),
            subnet: Array2::from_shape_fn((2, d), |(i, j)| (i * j) as f64 * 0.1),
            global: Array1::from(vec![0.5, 0.0, 0.25, 1.0]),
        };
        assert_eq!(project_tokens(&raw, &p).tokens, raw.stacked());
    }

    #[test]
    fn projector_matches_dense_oracle() {
        let p = small_params(4, 3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let raw = RawTokens {
            roi: Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0)),
            subnet: Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0)),
            global: Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)),
        };
        let out = project_tokens(&raw, &p);
        let stacked = raw.stacked();
        for t in 0..stacked.nrows() {
            let x = stacked.row(t).to_owned().insert_axis(Axis(0));
            let mut h = matmul(&x, &p.proj_w1);
            for (v, b) in h.iter_mut().zip(p.proj_b1.iter()) {
                *v = (*v + b).max(0.0);
            }
            let y = matmul(&h, &p.proj_w2);
            for j in 0..3 {
                assert!((out.tokens[[t, j]] - (y[[0, j]] + p.proj_b2[j])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn token_count_is_d_plus_n_plus_one() {
        let fcn = random_fcn(4, 15);
        let atlas = AtlasPartition::round_robin(4, 2, 0).unwrap();
        let p = small_params(4, 3, 16);
        assert_eq!(encode(&fcn, &atlas, &p, 0.5).unwrap().len(), 7);
    }

    #[test]
    fn encode_is_composition_of_components() {
        let fcn = random_fcn(6, 17);
        let atlas = AtlasPartition::round_robin(6, 2, 1).unwrap();
        let p = small_params(6, 3, 18);
        let seq = encode(&fcn, &atlas, &p, 0.3).unwrap();
        let roi = extract_roi_tokens(&fcn);
        let sub = pool_subnetworks(roi.view(), &atlas).unwrap();
        let adj = AdjacencyMatrix::from_values(Array2::from_shape_fn((6, 6), |(i, j)| {
            u8::from(i != j && fcn.values()[[i, j]].abs() >= 0.3)
        }))
        .unwrap();
        let nodes = gcn_forward(&fcn, &normalize_adjacency(&adj), &p).unwrap();
        let raw = RawTokens {
            roi,
            subnet: sub,
            global: global_pool(nodes.view()),
        };
        let expect = project_rows(raw.stacked().view(), &p);
        for (a, b) in seq.tokens.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(seq.subnet_tokens().nrows(), 2);
    }

    #[test]
    fn fused_forward_matches_component_chain() {
        let fcn = random_fcn(7, 19);
        let atlas = AtlasPartition::round_robin(7, 3, 1).unwrap();
        let p = small_params(7, 4, 20);
        let prepared = PreparedFcn::new(&fcn, &atlas, 0.25).unwrap();
        let (tokens, _) = prepared.forward(&p);
        let expect = encode(&fcn, &atlas, &p, 0.25).unwrap();
        assert_eq!(prepared.token_count(), 11);
        for (a, b) in tokens.iter().zip(expect.tokens.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
