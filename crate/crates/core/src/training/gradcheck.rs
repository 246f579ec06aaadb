//! Central finite-difference check of every trainable tensor.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_grad, Example, FcnStore, ModelParams};
use crate::atlas::AtlasPartition;
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::Result;
use crate::fcn::{pearson_fcn, BoldSeries};
use crate::params::ParamSet;
use crate::seed::derive_seed;
use crate::toylm::{assemble, embed, logits, masked_loss, LmConfig, LmParams, SpanFill, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub rois: usize,
    pub subnets: usize,
    pub gcn_hidden: usize,
    pub proj_hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    /// Extra filler words beyond the prompt vocabulary.
    pub vocab_extra: usize,
    pub step: f64,
    /// Entries checked per tensor; `None` checks all of them.
    pub max_entries: Option<usize>,
    pub tau: f64,
    pub seed: u64,
}

impl GradcheckConfig {
    /// The small instance where every entry of every tensor is checked.
    pub fn small() -> Self {
        Self {
            rois: 6,
            subnets: 2,
            gcn_hidden: 8,
            proj_hidden: 12,
            d_model: 16,
            heads: 2,
            blocks: 2,
            ff_hidden: 32,
            vocab_extra: 8,
            step: 1e-5,
            max_entries: None,
            tau: 0.3,
            seed: 0,
        }
    }

    /// Default toy language-model width with a sampled subset of entries.
    pub fn toy_default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ff_hidden: 256,
            vocab_extra: 384,
            max_entries: Some(48),
            ..Self::small()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub checked: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = norm(analytic) + norm(numeric);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// Mean loss of a batch, recomputed from scratch.
pub fn batch_loss(model: &ModelParams, store: &FcnStore, batch: &[&Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let tokens = ex
            .fcns
            .iter()
            .map(|&id| Ok(store.prepare(id)?.forward(&model.encoder).0))
            .collect::<Result<Vec<Array2<f64>>>>()?;
        let fills: Vec<SpanFill<'_>> = tokens.iter().map(|t| SpanFill::Tokens(t.view())).collect();
        let x = embed(&model.lm, &ex.asm, &fills)?;
        total += masked_loss(logits(x.view(), &model.lm).view(), &ex.asm.targets)?;
    }
    Ok(total / batch.len() as f64)
}

struct Instance {
    model: ModelParams,
    store: FcnStore,
    examples: Vec<Example>,
}

fn build_instance(cfg: &GradcheckConfig) -> Result<Instance> {
    let mut words: Vec<String> = ["is", "the", "same", "as", "yes", "no", "first", "second"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    words.extend((0..cfg.vocab_extra).map(|i| format!("w{i}")));
    let tok = Tokenizer::from_words(words);
    let partition = AtlasPartition::round_robin(cfg.rois, cfg.subnets, 1)?;
    let mut store = FcnStore::new(partition, cfg.tau);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck-fcn", 0));
    for name in ["a", "b"] {
        let samples =
            Array2::from_shape_fn((4 * cfg.rois, cfg.rois), |_| rng.random_range(-1.0..1.0));
        store.insert(name, pearson_fcn(&BoldSeries::new(name, samples)?)?)?;
    }
    let span = store.span_len();
    let pairs = [
        ("is <fcn> the same as <fcn>", "no second", vec!["a", "b"]),
        ("is the <fcn>", "yes", vec!["b"]),
    ];
    let mut examples = Vec::new();
    let mut max_len = 0;
    for (i, (prompt, answer, refs)) in pairs.iter().enumerate() {
        let asm = assemble(
            &tok,
            &tok.tokenize(prompt),
            span,
            refs.len(),
            &tok.tokenize(answer),
        )?;
        max_len = max_len.max(asm.len());
        examples.push(Example {
            id: format!("gc-{i}"),
            task: "gradcheck".into(),
            answer: answer.to_string(),
            asm,
            fcns: refs.iter().map(|r| store.id(r)).collect::<Result<_>>()?,
        });
    }
    let lm_cfg = LmConfig {
        vocab: tok.len(),
        d_model: cfg.d_model,
        heads: cfg.heads,
        blocks: cfg.blocks,
        ff_hidden: cfg.ff_hidden,
        max_len: max_len + 2,
    };
    let mut lm = LmParams::init(lm_cfg, derive_seed(cfg.seed, "gradcheck-lm", 0))?;
    // Move layer norms and biases off their initial values so that their
    // gradients are generic.
    lm.jitter(0.2, derive_seed(cfg.seed, "gradcheck-jitter", 0));
    let dims = EncoderDims {
        rois: cfg.rois,
        gcn_hidden: cfg.gcn_hidden,
        proj_hidden: cfg.proj_hidden,
        model: cfg.d_model,
    };
    let mut encoder = EncoderParams::init(dims, derive_seed(cfg.seed, "gradcheck-enc", 0));
    let mut brng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck-bias", 0));
    for b in [
        &mut encoder.gcn_b1,
        &mut encoder.gcn_b2,
        &mut encoder.proj_b1,
        &mut encoder.proj_b2,
    ] {
        b.mapv_inplace(|_| brng.random_range(-0.1..0.1));
    }
    Ok(Instance {
        model: ModelParams { encoder, lm },
        store,
        examples,
    })
}

/// Compares analytic and central-difference gradients of the mean batch loss
/// for every encoder and language-model tensor.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let inst = build_instance(cfg)?;
    let batch: Vec<&Example> = inst.examples.iter().collect();
    let g = batch_grad(&inst.model, &inst.store, &batch, true, true)?;
    let grads = ModelParams {
        encoder: g.encoder,
        lm: g.lm.expect("requested"),
    };
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    let mut probe = inst.model.clone();
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck-pick", 0));
    let mut tensors = Vec::with_capacity(analytic.len());
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < a.len() => {
                let mut v = sample(&mut pick, a.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..a.len()).collect(),
        };
        let mut numeric = Vec::with_capacity(entries.len());
        for &k in &entries {
            let orig = nth(&probe, ti, k);
            set_nth(&mut probe, ti, k, orig + cfg.step);
            let plus = batch_loss(&probe, &inst.store, &batch)?;
            set_nth(&mut probe, ti, k, orig - cfg.step);
            let minus = batch_loss(&probe, &inst.store, &batch)?;
            set_nth(&mut probe, ti, k, orig);
            numeric.push((plus - minus) / (2.0 * cfg.step));
        }
        let picked: Vec<f64> = entries.iter().map(|&k| a[k]).collect();
        tensors.push(TensorCheck {
            name: name.clone(),
            entries: a.len(),
            checked: entries.len(),
            rel_error: relative_error(&picked, &numeric),
        });
    }
    Ok(GradcheckReport { tensors })
}

fn nth(p: &ModelParams, tensor: usize, k: usize) -> f64 {
    *p.tensors()[tensor].1.iter().nth(k).expect("entry in range")
}

fn set_nth(p: &mut ModelParams, tensor: usize, k: usize, v: f64) {
    *p.tensors_mut()[tensor]
        .1
        .iter_mut()
        .nth(k)
        .expect("entry in range") = v;
}
