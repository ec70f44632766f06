//! Candidate scoring, the N-pair objective, retrieval metrics and Adam.

use serde::{Deserialize, Serialize};

use crate::pass::Pass;
use crate::tensor::{ParamStore, Var};
use crate::{Error, Result};

/// `logit_j = ẽ · a_j` for `ẽ: d x 1` and candidates `d x C`; returns `1 x C`.
pub fn score_candidates(pass: &Pass<'_>, fused: Var, candidates: Var) -> Result<Var> {
    let t = &pass.tape;
    Ok(t.matmul(t.transpose(fused)?, candidates)?)
}

/// `-log softmax(logits)[gt]`.
pub fn npair_loss(pass: &Pass<'_>, logits: Var, gt: usize) -> Result<Var> {
    Ok(pass.tape.softmax_cross_entropy(logits, gt)?)
}

/// 1-based rank of `logits[gt]`, counting every tied competitor as ahead.
pub fn rank_of(logits: &[f64], gt: usize) -> usize {
    let g = logits[gt];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| j != gt && l >= g)
        .count()
}

/// Retrieval metrics averaged over instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub mean: f64,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub count: usize,
}

impl RankReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidArgument("no ranks to summarize".into()));
        }
        if ranks.contains(&0) {
            return Err(Error::InvalidArgument("ranks are 1-based".into()));
        }
        let n = ranks.len() as f64;
        let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(RankReport {
            mean: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            r1: frac(1),
            r5: frac(5),
            r10: frac(10),
            count: ranks.len(),
        })
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base * 0.5^floor(epoch / 10)` with 0-based epochs.
pub fn learning_rate(base: f64, epoch: usize) -> f64 {
    base * 0.5f64.powi((epoch / 10) as i32)
}

/// Adam moments for every parameter of a store, plus the schedule position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub base_lr: f64,
    pub epoch: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, base_lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        OptimState {
            step: 0,
            base_lr,
            epoch: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        learning_rate(self.base_lr, self.epoch)
    }

    /// Applies one Adam update from the gradients stored on `store`'s
    /// tensors (missing gradients count as zero). Returns `false`, leaving
    /// everything untouched, when any gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<bool> {
        if self.m.len() != store.len() {
            return Err(Error::Checkpoint {
                field: "optimizer".into(),
                reason: format!("{} moment slots for {} parameters", self.m.len(), store.len()),
            });
        }
        if !store.grads_finite() {
            log::warn!("non-finite gradient at optimizer step {}; update skipped", self.step + 1);
            return Ok(false);
        }
        self.step += 1;
        let lr = self.lr();
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let tensor = store.get_mut(id);
            let grad = tensor
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tensor.len()]);
            let (ms, vs) = (&mut self.m[k], &mut self.v[k]);
            for (((x, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(true)
    }
}
