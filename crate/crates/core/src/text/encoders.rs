//! Token embedding, LSTM encoding, history attention and per-step word-level
//! question commands.

use rand::Rng;

use super::vocab::PAD;
use crate::init::{uniform, uniform_bound};
use crate::pass::Pass;
use crate::tensor::{Axis, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Single-layer LSTM weights; gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    /// Registers `{prefix}.w_ih`, `{prefix}.w_hh`, `{prefix}.bias`, all drawn
    /// from `U(-1/sqrt(d), 1/sqrt(d))`.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let b = 1.0 / (hidden_dim as f64).sqrt();
        let g = 4 * hidden_dim;
        Ok(LstmParams {
            w_ih: store.insert(format!("{prefix}.w_ih"), uniform(rng, &[g, input_dim], b)?)?,
            w_hh: store.insert(format!("{prefix}.w_hh"), uniform(rng, &[g, hidden_dim], b)?)?,
            bias: store.insert(format!("{prefix}.bias"), uniform(rng, &[g, 1], b)?)?,
            input_dim,
            hidden_dim,
        })
    }
}

/// `W_q`, `W_h` (d x d) and `P_h` (1 x d) of the history attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryAttnParams {
    pub w_q: ParamId,
    pub w_h: ParamId,
    pub p_h: ParamId,
}

impl HistoryAttnParams {
    pub fn register<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(HistoryAttnParams {
            w_q: store.insert("hist.w_q", uniform_bound(rng, &[d, d])?)?,
            w_h: store.insert("hist.w_h", uniform_bound(rng, &[d, d])?)?,
            p_h: store.insert("hist.p_h", uniform_bound(rng, &[1, d])?)?,
        })
    }
}

/// Gated two-layer word scorer of one inference step: `W_f1`, `W_f2`
/// (d x d) and `P_q` (1 x d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandParams {
    pub w_f1: ParamId,
    pub w_f2: ParamId,
    pub p_q: ParamId,
}

impl CommandParams {
    /// Registers the parameters of step `t` (1-based) under `cmd{t}.*`.
    pub fn register<R: Rng>(store: &mut ParamStore, t: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(CommandParams {
            w_f1: store.insert(format!("cmd{t}.w_f1"), uniform_bound(rng, &[d, d])?)?,
            w_f2: store.insert(format!("cmd{t}.w_f2"), uniform_bound(rng, &[d, d])?)?,
            p_q: store.insert(format!("cmd{t}.p_q"), uniform_bound(rng, &[1, d])?)?,
        })
    }
}

pub struct LstmOutput {
    /// `d x m`, one hidden state per input position.
    pub hidden: Var,
    /// Hidden state at the last valid position (`d x 1`).
    pub last: Var,
}

pub struct EncodedQuestion {
    /// Word embeddings, `d_w x m`.
    pub words: Var,
    /// LSTM states, `d x m`.
    pub hidden: Var,
    /// Sentence vector `q_s`, `d x 1`.
    pub sentence: Var,
    /// `false` at PAD positions.
    pub valid: Vec<bool>,
}

pub struct EncodedHistory {
    /// `d x l`; column 0 encodes the caption.
    pub rounds: Var,
    pub len: usize,
}

pub struct HistoryContext {
    /// Attended history vector `u`, `d x 1`.
    pub context: Var,
    /// Attention over rounds, `1 x l`.
    pub alpha: Var,
}

pub struct QuestionCommand {
    pub step: usize,
    /// Word attention, `1 x m`.
    pub alpha: Var,
    /// Attended word embedding `q_w`, `d_w x 1`.
    pub command: Var,
}

/// Embedding lookup producing one `d_w` column per id; PAD gives zeros.
pub fn embed_tokens(pass: &Pass<'_>, table: ParamId, ids: &[usize]) -> Result<Var> {
    let vocab = pass.store.get(table).rows();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, size: vocab });
    }
    Ok(pass.tape.embed(pass.p(table), ids, Some(PAD))?)
}

/// Runs the LSTM over the columns of `seq` (`d_in x m`) from zero state.
/// Positions with `valid[j] == false` carry the previous state forward.
pub fn lstm_encode(
    pass: &Pass<'_>,
    params: &LstmParams,
    seq: Var,
    valid: &[bool],
) -> Result<LstmOutput> {
    let t = &pass.tape;
    let shape = t.shape(seq);
    let (d_in, m) = (shape[0], shape[1]);
    if d_in != params.input_dim {
        return Err(Error::DimMismatch {
            name: "lstm input".into(),
            expected: params.input_dim,
            found: d_in,
        });
    }
    if valid.len() != m {
        return Err(Error::InvalidArgument(format!(
            "lstm mask length {} for sequence length {m}",
            valid.len()
        )));
    }
    let d = params.hidden_dim;
    let w_hh = pass.p(params.w_hh);
    let bias = pass.p(params.bias);
    let projected = t.matmul(pass.p(params.w_ih), seq)?;

    let zero = t.constant(Tensor::zeros(&[d, 1])?);
    let (mut h, mut c) = (zero, zero);
    let mut outputs = Vec::with_capacity(m);
    for (j, &is_valid) in valid.iter().enumerate() {
        if is_valid {
            let x = t.slice_cols(projected, j, 1)?;
            let rec = t.matmul(w_hh, h)?;
            let pre = t.add(t.add(x, rec)?, bias)?;
            let i_g = t.sigmoid(t.slice_rows(pre, 0, d)?)?;
            let f_g = t.sigmoid(t.slice_rows(pre, d, d)?)?;
            let g_g = t.tanh(t.slice_rows(pre, 2 * d, d)?)?;
            let o_g = t.sigmoid(t.slice_rows(pre, 3 * d, d)?)?;
            c = t.add(t.mul(f_g, c)?, t.mul(i_g, g_g)?)?;
            h = t.mul(o_g, t.tanh(c)?)?;
        }
        outputs.push(h);
    }
    Ok(LstmOutput {
        hidden: t.concat(&outputs, Axis(1))?,
        last: h,
    })
}

/// Embeds and encodes a question; `q_s` is the state at the last valid word.
pub fn encode_question(
    pass: &Pass<'_>,
    table: ParamId,
    lstm: &LstmParams,
    ids: &[usize],
) -> Result<EncodedQuestion> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty question".into()));
    }
    let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
    let words = embed_tokens(pass, table, ids)?;
    let out = lstm_encode(pass, lstm, words, &valid)?;
    Ok(EncodedQuestion {
        words,
        hidden: out.hidden,
        sentence: out.last,
        valid,
    })
}

/// Sentence vector of a token sequence (final LSTM state). Empty input
/// encodes as the zero state.
pub fn encode_sentence(
    pass: &Pass<'_>,
    table: ParamId,
    lstm: &LstmParams,
    ids: &[usize],
) -> Result<Var> {
    let padded;
    let ids = if ids.is_empty() {
        padded = [PAD];
        &padded[..]
    } else {
        ids
    };
    let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
    let words = embed_tokens(pass, table, ids)?;
    Ok(lstm_encode(pass, lstm, words, &valid)?.last)
}

/// Encodes caption plus QA rounds into `U^H` (`d x l`, caption first).
pub fn encode_history(
    pass: &Pass<'_>,
    table: ParamId,
    lstm: &LstmParams,
    rounds: &[Vec<usize>],
) -> Result<EncodedHistory> {
    if rounds.is_empty() {
        return Err(Error::InvalidArgument("history needs at least the caption".into()));
    }
    let cols = rounds
        .iter()
        .map(|r| encode_sentence(pass, table, lstm, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedHistory {
        rounds: pass.tape.concat(&cols, Axis(1))?,
        len: rounds.len(),
    })
}

/// Question-conditioned attention over history rounds:
/// `z = tanh(W_q q_s 1ᵀ + W_h U^H)`, `α = softmax(P_h z)`, `u = U^H αᵀ`.
pub fn history_attention(
    pass: &Pass<'_>,
    sentence: Var,
    history: Var,
    params: &HistoryAttnParams,
) -> Result<HistoryContext> {
    let t = &pass.tape;
    let l = t.shape(history)[1];
    let q = t.matmul(pass.p(params.w_q), sentence)?;
    let q = t.broadcast_cols(q, l)?;
    let h = t.matmul(pass.p(params.w_h), history)?;
    let z = pass.dropout(t.tanh(t.add(q, h)?)?)?;
    let logits = t.matmul(pass.p(params.p_h), z)?;
    let alpha = t.softmax(logits, Axis(1))?;
    let context = t.matmul(history, t.transpose(alpha)?)?;
    Ok(HistoryContext { context, alpha })
}

/// Word-level command of inference step `step` (1-based, `<= steps.len()`):
/// `f = tanh(W_f1 U^Q) ⊙ σ(W_f2 U^Q)`, `z = L2Norm(f)` per word,
/// `α = softmax(P_q z)` over valid words, `q_w = W^Q αᵀ`.
pub fn question_command(
    pass: &Pass<'_>,
    question: &EncodedQuestion,
    step: usize,
    steps: &[CommandParams],
) -> Result<QuestionCommand> {
    if step == 0 || step > steps.len() {
        return Err(Error::StepOutOfRange {
            step,
            max: steps.len(),
        });
    }
    let params = &steps[step - 1];
    let t = &pass.tape;
    let gate_a = t.tanh(t.matmul(pass.p(params.w_f1), question.hidden)?)?;
    let gate_b = t.sigmoid(t.matmul(pass.p(params.w_f2), question.hidden)?)?;
    let f = t.mul(gate_a, gate_b)?;
    let z = pass.dropout(t.l2_normalize(f, Axis(0))?)?;
    let logits = t.matmul(pass.p(params.p_q), z)?;
    let alpha = t.masked_softmax(logits, Axis(1), &question.valid)?;
    let command = t.matmul(question.words, t.transpose(alpha)?)?;
    Ok(QuestionCommand {
        step,
        alpha,
        command,
    })
}
