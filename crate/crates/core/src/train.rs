//! Training loop and evaluation over encoded examples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{rank_of, OptimState, RankReport};
use crate::graph::ModeFlags;
use crate::model::{forward, predict, Example, ModelConfig, ModelParams};
use crate::pass::Pass;
use crate::tensor::ParamStore;
use crate::{Error, Result};

/// One row of the per-epoch log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Rounds whose gradients are summed before one optimizer step.
    pub accumulate: usize,
    pub seed: u64,
}

/// Ranks of every example's ground truth, in input order.
pub fn ranks(
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    flags: &ModeFlags,
    examples: &[Example],
) -> Result<Vec<usize>> {
    examples
        .par_iter()
        .map(|ex| predict(store, params, cfg, flags, ex).map(|l| rank_of(&l, ex.gt)))
        .collect()
}

pub fn evaluate(
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    flags: &ModeFlags,
    examples: &[Example],
) -> Result<RankReport> {
    RankReport::from_ranks(&ranks(store, params, cfg, flags, examples)?)
}

/// Loss and gradient of one example, accumulated into `store`'s grad slots.
/// Returns `None` (nothing accumulated) when the gradient is not finite.
pub fn accumulate_example(
    store: &mut ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    ex: &Example,
    rng: Option<ChaCha8Rng>,
) -> Result<Option<f64>> {
    let (loss, grads) = {
        let pass = match rng {
            Some(r) if cfg.dropout > 0.0 => Pass::train(store, cfg.dropout, r),
            _ => Pass::eval(store),
        };
        let out = forward(&pass, params, cfg, &cfg.flags, ex)?;
        let loss = pass.tape.scalar(out.loss);
        (loss, pass.tape.backward(out.loss)?)
    };
    if !loss.is_finite() || !grads.all_finite() {
        return Ok(None);
    }
    store.accumulate_grads(&grads);
    Ok(Some(loss))
}

/// Runs `opts.epochs` epochs starting at `optim.epoch`. After each epoch the
/// validation report is computed and `on_epoch` is called with the log row
/// and the current parameters.
pub fn train<F>(
    store: &mut ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    optim: &mut OptimState,
    train_set: &[Example],
    val_set: &[Example],
    opts: &TrainOptions,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &ParamStore, &OptimState) -> Result<()>,
{
    if train_set.is_empty() && opts.epochs > 0 {
        return Err(Error::Corpus("training split is empty".into()));
    }
    let accumulate = opts.accumulate.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        store.zero_grads();
        let (mut total, mut counted, mut pending) = (0.0, 0usize, 0usize);
        for (pos, &i) in order.iter().enumerate() {
            let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            match accumulate_example(store, params, cfg, &train_set[i], Some(dropout_rng))? {
                Some(loss) => {
                    total += loss;
                    counted += 1;
                    pending += 1;
                }
                None => log::warn!("epoch {}: non-finite gradient on example {i}; skipped", optim.epoch),
            }
            if pending > 0 && (pending == accumulate || pos + 1 == order.len()) {
                scale_grads(store, 1.0 / pending as f64);
                optim.step(store)?;
                store.zero_grads();
                pending = 0;
            }
        }
        let report = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(store, params, cfg, &cfg.flags, val_set)?)
        };
        let row = EpochLog {
            epoch: optim.epoch,
            loss: if counted > 0 { total / counted as f64 } else { f64::NAN },
            mrr: report.map_or(f64::NAN, |r| r.mrr),
            r1: report.map_or(f64::NAN, |r| r.r1),
            r5: report.map_or(f64::NAN, |r| r.r5),
            r10: report.map_or(f64::NAN, |r| r.r10),
            mean: report.map_or(f64::NAN, |r| r.mean),
            lr: optim.lr(),
        };
        log::info!(
            "epoch {} loss {:.4} val mrr {:.4} r@1 {:.4}",
            row.epoch,
            row.loss,
            row.mrr,
            row.r1
        );
        optim.epoch += 1;
        on_epoch(&row, store, optim)?;
        logs.push(row);
    }
    Ok(logs)
}

fn scale_grads(store: &mut ParamStore, s: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if let Some(g) = store.get(id).grad().map(|g| g.iter().map(|v| v * s).collect::<Vec<_>>()) {
            store.get_mut(id).set_grad(g).expect("same length");
        }
    }
}
