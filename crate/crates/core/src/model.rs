//! Full dialog model: encoders, context graph, fusion and candidate scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{npair_loss, score_candidates};
use crate::graph::{self, GraphParams, GraphState, ModeFlags, StepRecord};
use crate::init::{uniform, uniform_bound};
use crate::pass::Pass;
use crate::tensor::{Axis, ParamId, ParamStore, Tensor, Var};
use crate::text::{
    encode_history, encode_question, encode_sentence, history_attention, question_command,
    CommandParams, HistoryAttnParams, LstmParams,
};
use crate::{Error, Result};

/// Bound of the uniform word-embedding initializer.
pub const EMBED_INIT: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    /// Word-embedding size.
    pub d_w: usize,
    /// Raw object-feature size.
    pub d_v: usize,
    pub vocab: usize,
    pub flags: ModeFlags,
    /// Dropout ratio used by training passes.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(what.to_string()))
            }
        };
        check(self.d > 0 && self.d_w > 0 && self.d_v > 0, "dimensions must be positive")?;
        check(self.vocab > 2, "vocabulary must hold more than the reserved tokens")?;
        check(self.flags.k > 0, "K must be at least 1")?;
        check((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)")
    }
}

/// Handles to every parameter of the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelParams {
    pub embed: ParamId,
    pub lstm_q: LstmParams,
    pub lstm_h: LstmParams,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub hist: HistoryAttnParams,
    /// One command scorer per inference step.
    pub commands: Vec<CommandParams>,
    /// Sentence-to-word projection used when word attention is ablated.
    pub w_qs: ParamId,
    pub graph: GraphParams,
}

impl ModelParams {
    /// Fresh parameters drawn from a stream seeded by `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, ModelParams)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, d_w) = (cfg.d, cfg.d_w);
        let embed = store.insert("embed", uniform(&mut rng, &[cfg.vocab, d_w], EMBED_INIT)?)?;
        let lstm_q = LstmParams::register(&mut store, "lstm_q", d_w, d, &mut rng)?;
        let lstm_h = LstmParams::register(&mut store, "lstm_h", d_w, d, &mut rng)?;
        let w_v = store.insert("visual.w", uniform_bound(&mut rng, &[d, cfg.d_v])?)?;
        let b_v = store.insert("visual.b", uniform(&mut rng, &[d, 1], 1.0 / (cfg.d_v as f64).sqrt())?)?;
        let hist = HistoryAttnParams::register(&mut store, d, &mut rng)?;
        let commands = (1..=cfg.flags.t)
            .map(|t| CommandParams::register(&mut store, t, d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let w_qs = store.insert("w_qs", uniform_bound(&mut rng, &[d_w, d])?)?;
        let graph = GraphParams::register(&mut store, d, d_w, cfg.flags.variant, &mut rng)?;
        Ok((
            store,
            ModelParams {
                embed,
                lstm_q,
                lstm_h,
                w_v,
                b_v,
                hist,
                commands,
                w_qs,
                graph,
            },
        ))
    }

    /// Binds handles for `cfg` onto an existing store, checking that every
    /// expected tensor is present with the expected shape.
    pub fn bind(cfg: &ModelConfig, store: &ParamStore) -> Result<ModelParams> {
        let (template, params) = ModelParams::init(cfg, 0)?;
        // Name the config dimension when a defining tensor disagrees with it.
        let defining = [
            ("embed", [("vocab", cfg.vocab), ("d_w", cfg.d_w)]),
            ("visual.w", [("d", cfg.d), ("d_v", cfg.d_v)]),
        ];
        for (tensor, dims) in defining {
            let Some(id) = store.id(tensor) else { continue };
            for (&have, (name, want)) in store.get(id).shape().iter().zip(dims) {
                if have != want {
                    return Err(Error::DimMismatch {
                        name: name.into(),
                        expected: want,
                        found: have,
                    });
                }
            }
        }
        if template.len() != store.len() {
            return Err(Error::Checkpoint {
                field: "parameters".into(),
                reason: format!("expected {} tensors, found {}", template.len(), store.len()),
            });
        }
        for (id, name, t) in template.iter() {
            let got = store.get(id);
            if store.name(id) != name {
                return Err(Error::Checkpoint {
                    field: name.to_string(),
                    reason: format!("found {:?} in its slot", store.name(id)),
                });
            }
            if t.shape().len() != got.shape().len() {
                return Err(Error::Checkpoint {
                    field: name.to_string(),
                    reason: format!("rank {} != {}", got.shape().len(), t.shape().len()),
                });
            }
            for (axis, (&want, &have)) in t.shape().iter().zip(got.shape()).enumerate() {
                if want != have {
                    return Err(Error::DimMismatch {
                        name: format!("{name} axis {axis}"),
                        expected: want,
                        found: have,
                    });
                }
            }
        }
        Ok(params)
    }
}

/// One dialog turn in id form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// `d_v x n`, one column per object.
    pub features: Tensor,
    /// Caption followed by one `question answer` sequence per round.
    pub history: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gt: usize,
}

impl Example {
    pub fn objects(&self) -> usize {
        self.features.cols()
    }
}

/// Graph values and attention weights of one forward pass.
pub struct Forward {
    /// `1 x C`.
    pub logits: Var,
    pub loss: Var,
    /// `1 x l`.
    pub alpha_h: Var,
    /// Word attention per step; empty when word attention is ablated.
    pub alpha_q: Vec<Var>,
    pub initial: GraphState,
    pub final_state: GraphState,
    pub steps: Vec<StepRecord>,
    /// `1 x n`.
    pub alpha_g: Var,
    /// `d x 1`.
    pub fused: Var,
}

/// Runs the model on `ex` under `flags`, which may differ from the ablations
/// the parameters were trained with.
pub fn forward(
    pass: &Pass<'_>,
    params: &ModelParams,
    cfg: &ModelConfig,
    flags: &ModeFlags,
    ex: &Example,
) -> Result<Forward> {
    let t = &pass.tape;
    let (d_v, n) = ex.features.dims2()?;
    if d_v != cfg.d_v {
        return Err(Error::DimMismatch {
            name: "object features".into(),
            expected: cfg.d_v,
            found: d_v,
        });
    }
    if ex.candidates.len() < 2 || ex.gt >= ex.candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "ground truth {} among {} candidates",
            ex.gt,
            ex.candidates.len()
        )));
    }
    let steps = flags.steps();
    if steps > params.commands.len() {
        return Err(Error::StepOutOfRange {
            step: steps,
            max: params.commands.len(),
        });
    }

    let feats = t.constant(ex.features.clone());
    let bias = t.broadcast_cols(pass.p(params.b_v), n)?;
    let visual = t.tanh(t.add(t.matmul(pass.p(params.w_v), feats)?, bias)?)?;

    let question = encode_question(pass, params.embed, &params.lstm_q, &ex.question)?;
    let history = encode_history(pass, params.embed, &params.lstm_h, &ex.history)?;
    let ctx = history_attention(pass, question.sentence, history.rounds, &params.hist)?;

    let mut alpha_q = Vec::new();
    let mut commands = Vec::with_capacity(steps);
    if flags.no_q_att {
        let shared = t.matmul(pass.p(params.w_qs), question.sentence)?;
        commands.resize(steps, shared);
    } else {
        for step in 1..=steps {
            let cmd = question_command(pass, &question, step, &params.commands)?;
            alpha_q.push(cmd.alpha);
            commands.push(cmd.command);
        }
    }

    let initial = graph::init_graph(pass, visual, (!flags.no_u).then_some(ctx.context))?;
    let (final_state, records) = graph::iterate(pass, initial, &commands, &params.graph, flags)?;
    let attended = graph::graph_attention(
        pass,
        final_state.nodes,
        question.sentence,
        &params.graph,
        flags.no_g_att,
    )?;
    let fused = graph::fuse(pass, attended.embedding, ctx.context, question.sentence, &params.graph)?;

    let answers = ex
        .candidates
        .iter()
        .map(|c| encode_sentence(pass, params.embed, &params.lstm_h, c))
        .collect::<Result<Vec<_>>>()?;
    let answers = t.concat(&answers, Axis(1))?;
    let logits = score_candidates(pass, fused, answers)?;
    let loss = npair_loss(pass, logits, ex.gt)?;
    Ok(Forward {
        logits,
        loss,
        alpha_h: ctx.alpha,
        alpha_q,
        initial,
        final_state,
        steps: records,
        alpha_g: attended.alpha,
        fused,
    })
}

/// Logits of `ex` from an evaluation pass.
pub fn predict(store: &ParamStore, params: &ModelParams, cfg: &ModelConfig, flags: &ModeFlags, ex: &Example) -> Result<Vec<f64>> {
    let pass = Pass::eval(store);
    let out = forward(&pass, params, cfg, flags, ex)?;
    let logits = pass.tape.tensor(out.logits).into_data();
    Ok(logits)
}
