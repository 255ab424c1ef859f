//! Test-time adaptation: one entropy-minimization step on the
//! normalization parameters against a prototype classifier.

use regex::Regex;

use crate::error::{Error, Result};
use crate::graphpool::Hierarchy;
use crate::model::{forward, Backbone, CastInput, ModelConfig};
use crate::rng::Stream;
use crate::tensorcore::nn::softmax_entropy;
use crate::tensorcore::{Graph, ParamStore, Tensor, Var};

use super::optim::OptState;
use super::train::{embeddings, Example};

/// Names of layer-norm scales and shifts.
pub const NORM_PARAM_PATTERN: &str = r"(^|\.)(ln\d+|norm)\.(gamma|beta)$";
pub const PROTOTYPE_TEMPERATURE: f64 = 0.07;
pub const TTA_LEARNING_RATE: f64 = 1.0;

/// Unit-norm class means of unit-normalized embeddings, `n_classes x d`.
pub fn prototypes(store: &ParamStore, cfg: &ModelConfig, backbone: Backbone, data: &[Example]) -> Result<Tensor> {
    let feats = embeddings(store, cfg, backbone, data)?;
    let d = cfg.channels;
    let mut sums = vec![vec![0.0; d]; cfg.n_classes];
    for (f, ex) in feats.iter().zip(data) {
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (s, v) in sums[ex.label].iter_mut().zip(f) {
            *s += v / n;
        }
    }
    for s in sums.iter_mut() {
        let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::InvalidConfig("a class has no prototype examples".into()));
        }
        s.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::from_rows(&sums)
}

/// Cosine similarities to the prototypes divided by the temperature.
pub fn prototype_logits(g: &mut Graph, embedding: Var, prototypes: &Tensor) -> Result<Var> {
    let e = g.row_normalize(embedding)?;
    let p = g.constant(prototypes.clone())?;
    let s = g.matmul_nt(e, p)?;
    g.scale(s, 1.0 / PROTOTYPE_TEMPERATURE)
}

#[derive(Clone, Debug)]
pub struct TtaSnapshot {
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub hierarchy: Option<Hierarchy>,
}

#[derive(Clone, Debug)]
pub struct TtaRecord {
    pub before: TtaSnapshot,
    pub after: TtaSnapshot,
    pub adapted: ParamStore,
}

fn snapshot(
    store: &ParamStore,
    cfg: &ModelConfig,
    backbone: Backbone,
    input: &CastInput,
    protos: &Tensor,
) -> Result<(TtaSnapshot, Graph, Var)> {
    let mut g = Graph::new();
    let out = forward(&mut g, store, cfg, backbone, input, &mut Stream::new(0, "tta.forward"))?;
    let logits = prototype_logits(&mut g, out.embedding, protos)?;
    let loss = softmax_entropy(&mut g, logits)?;
    let l = g.value(logits).row(0).to_vec();
    let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
    let tot: f64 = e.iter().sum();
    let snap = TtaSnapshot {
        probs: e.iter().map(|v| v / tot).collect(),
        entropy: g.value(loss).item(),
        hierarchy: out.cast.map(|c| c.hierarchy),
    };
    Ok((snap, g, loss))
}

/// One plain SGD step (no momentum) on the prediction entropy, updating only
/// parameters matching [`NORM_PARAM_PATTERN`].
pub fn tta_step(
    store: &ParamStore,
    cfg: &ModelConfig,
    backbone: Backbone,
    input: &CastInput,
    prototypes: &Tensor,
    learning_rate: f64,
) -> Result<TtaRecord> {
    let (before, g, loss) = snapshot(store, cfg, backbone, input, prototypes)?;
    let grads = g.backward(loss)?.params(&g, store);
    let mut adapted = store.clone();
    let mut opt = OptState::sgd(learning_rate, 0.0)?.with_filter(Regex::new(NORM_PARAM_PATTERN).unwrap());
    opt.apply(&mut adapted, &grads, 1.0);
    let (after, _, _) = snapshot(&adapted, cfg, backbone, input, prototypes)?;
    Ok(TtaRecord { before, after, adapted })
}

/// Names of parameters whose values differ between two stores.
pub fn changed_params(a: &ParamStore, b: &ParamStore) -> Vec<String> {
    a.iter().zip(b.iter()).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.to_string()).collect()
}
