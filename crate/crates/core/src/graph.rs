//! Context-aware graph: node construction, question-gated adjacency, top-K
//! message passing, iterative context updates, graph attention and fusion.
//!
//! Every node column is `[v_i; c_i]` with the visual half `v_i` fixed and the
//! context half `c_i` rewritten at each inference step. Entry `A[i][j]` of the
//! adjacency matrix is the weight of the edge `j -> i`, so row `i` ranks the
//! candidate senders of node `i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::init::uniform_bound;
use crate::pass::Pass;
use crate::tensor::{topk_indices, Axis, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Adjacency form: question gate on the receiving side only, or on both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Cag,
    DualQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeFlags {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub no_infer: bool,
    #[serde(default)]
    pub no_u: bool,
    #[serde(default)]
    pub no_q_att: bool,
    #[serde(default)]
    pub no_g_att: bool,
    /// Neighbors per node.
    pub k: usize,
    /// Inference steps.
    pub t: usize,
}

impl Default for ModeFlags {
    fn default() -> Self {
        ModeFlags {
            variant: Variant::Cag,
            no_infer: false,
            no_u: false,
            no_q_att: false,
            no_g_att: false,
            k: 8,
            t: 3,
        }
    }
}

impl ModeFlags {
    /// Number of message-passing steps actually run.
    pub fn steps(&self) -> usize {
        if self.no_infer {
            0
        } else {
            self.t
        }
    }

    /// Applies a named ablation (`no_infer`, `no_u`, `no_q_att`, `no_g_att`).
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name.trim() {
            "no_infer" => self.no_infer = true,
            "no_u" => self.no_u = true,
            "no_q_att" => self.no_q_att = true,
            "no_g_att" => self.no_g_att = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }
}

/// Graph weights. `W_1..W_6` are single instances shared by every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub w5: ParamId,
    pub w6: ParamId,
    /// Sender-side gate of the dual variant.
    pub w3_dual: Option<ParamId>,
    pub w_g1: ParamId,
    pub w_g2: ParamId,
    pub p_g: ParamId,
    /// Fusion map, `d x 4d`.
    pub w_e: ParamId,
}

impl GraphParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        d_w: usize,
        variant: Variant,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = |name: &str, shape: &[usize]| -> Result<ParamId> {
            Ok(store.insert(format!("graph.{name}"), uniform_bound(rng, shape)?)?)
        };
        let w1 = p("w1", &[d, 2 * d])?;
        let w2 = p("w2", &[d, 2 * d])?;
        let w3 = p("w3", &[d, d_w])?;
        let w4 = p("w4", &[d, 2 * d])?;
        let w5 = p("w5", &[d, d_w])?;
        let w6 = p("w6", &[d, 2 * d])?;
        let w3_dual = match variant {
            Variant::DualQ => Some(p("w3_dual", &[d, d_w])?),
            Variant::Cag => None,
        };
        let w_g1 = p("w_g1", &[d, d])?;
        let w_g2 = p("w_g2", &[d, 2 * d])?;
        let p_g = p("p_g", &[1, d])?;
        let w_e = p("w_e", &[d, 4 * d])?;
        Ok(GraphParams {
            w1,
            w2,
            w3,
            w4,
            w5,
            w6,
            w3_dual,
            w_g1,
            w_g2,
            p_g,
            w_e,
        })
    }
}

/// Node matrix of one step, kept alongside its two halves.
#[derive(Debug, Clone, Copy)]
pub struct GraphState {
    /// 1-based step whose input these nodes are.
    pub step: usize,
    /// `2d x n`.
    pub nodes: Var,
    /// Fixed visual block, `d x n`.
    pub visual: Var,
    /// Context block, `d x n`.
    pub context: Var,
}

/// Everything one message-passing step produced.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    /// `n x n`.
    pub adjacency: Var,
    pub neighbors: Vec<Vec<usize>>,
    /// Normalized neighbor weights, `n x K`.
    pub weights: Var,
    /// Aggregated messages, `d x n`.
    pub messages: Var,
}

pub struct GraphEmbedding {
    /// `2d x 1`.
    pub embedding: Var,
    /// `1 x n`.
    pub alpha: Var,
}

/// Builds `N = [V; u 1ᵀ]`, or `[V; 0]` when `u` is `None`.
pub fn init_graph(pass: &Pass<'_>, visual: Var, u: Option<Var>) -> Result<GraphState> {
    let t = &pass.tape;
    let shape = t.shape(visual);
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::InvalidArgument("graph needs at least one node".into()));
    }
    let (d, n) = (shape[0], shape[1]);
    let context = match u {
        Some(u) => {
            let us = t.shape(u);
            if us != [d, 1] {
                return Err(Error::DimMismatch {
                    name: "history context".into(),
                    expected: d,
                    found: us[0],
                });
            }
            t.broadcast_cols(u, n)?
        }
        None => t.constant(Tensor::zeros(&[d, n])?),
    };
    Ok(GraphState {
        step: 1,
        nodes: t.concat(&[visual, context], Axis(0))?,
        visual,
        context,
    })
}

/// `A = (W_1 N)ᵀ((W_2 N) ⊙ (W_3 q_w 1ᵀ))`; the dual variant also gates the
/// left factor with `W_3' q_w`. The diagonal is left in place.
pub fn adjacency(pass: &Pass<'_>, nodes: Var, command: Var, params: &GraphParams, variant: Variant) -> Result<Var> {
    let t = &pass.tape;
    let n = t.shape(nodes)[1];
    let gate = |w: ParamId| -> Result<Var> {
        let g = t.matmul(pass.p(w), command)?;
        Ok(t.broadcast_cols(g, n)?)
    };
    let mut left = t.matmul(pass.p(params.w1), nodes)?;
    if variant == Variant::DualQ {
        let w = params
            .w3_dual
            .ok_or_else(|| Error::Config("dual variant needs its sender gate".into()))?;
        left = t.mul(left, gate(w)?)?;
    }
    let right = t.mul(t.matmul(pass.p(params.w2), nodes)?, gate(params.w3)?)?;
    Ok(t.matmul(t.transpose(left)?, right)?)
}

/// Top-`k` senders of every node, ascending within each row.
pub fn select_neighbors(adjacency: &Tensor, k: usize) -> Vec<Vec<usize>> {
    adjacency
        .to_rows()
        .iter()
        .map(|row| topk_indices(row, k))
        .collect()
}

/// Softmax of each row of `A` over its neighbor set, then
/// `M_i = Σ_j B_ji (W_4 N_j) ⊙ (W_5 q_w)`. Returns `(B, M)`.
pub fn message_passing(
    pass: &Pass<'_>,
    nodes: Var,
    adjacency: Var,
    neighbors: &[Vec<usize>],
    command: Var,
    params: &GraphParams,
) -> Result<(Var, Var)> {
    let t = &pass.tape;
    let n = t.shape(nodes)[1];
    let weights = t.softmax(t.gather(adjacency, neighbors)?, Axis(1))?;
    let gate = t.broadcast_cols(t.matmul(pass.p(params.w5), command)?, n)?;
    let outbound = t.mul(t.matmul(pass.p(params.w4), nodes)?, gate)?;
    let routing = t.scatter(weights, neighbors, n)?;
    let messages = t.matmul(outbound, t.transpose(routing)?)?;
    Ok((weights, messages))
}

/// `c ← W_6 [c; M]`, `N ← [V; c]`.
pub fn update_nodes(pass: &Pass<'_>, state: &GraphState, messages: Var, params: &GraphParams) -> Result<GraphState> {
    let t = &pass.tape;
    let stacked = t.concat(&[state.context, messages], Axis(0))?;
    let context = t.matmul(pass.p(params.w6), stacked)?;
    Ok(GraphState {
        step: state.step + 1,
        nodes: t.concat(&[state.visual, context], Axis(0))?,
        visual: state.visual,
        context,
    })
}

/// One full inference step driven by `command` (`d_w x 1`).
pub fn step(
    pass: &Pass<'_>,
    state: &GraphState,
    command: Var,
    params: &GraphParams,
    flags: &ModeFlags,
) -> Result<(GraphState, StepRecord)> {
    if flags.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let adj = adjacency(pass, state.nodes, command, params, flags.variant)?;
    let neighbors = select_neighbors(&pass.tape.value(adj), flags.k);
    let (weights, messages) = message_passing(pass, state.nodes, adj, &neighbors, command, params)?;
    let next = update_nodes(pass, state, messages, params)?;
    Ok((
        next,
        StepRecord {
            step: state.step,
            adjacency: adj,
            neighbors,
            weights,
            messages,
        },
    ))
}

/// Runs one step per command, in order. No commands leaves the graph as built.
pub fn iterate(
    pass: &Pass<'_>,
    init: GraphState,
    commands: &[Var],
    params: &GraphParams,
    flags: &ModeFlags,
) -> Result<(GraphState, Vec<StepRecord>)> {
    let mut state = init;
    let mut records = Vec::with_capacity(commands.len());
    for &command in commands {
        let (next, record) = step(pass, &state, command, params, flags)?;
        debug_assert!(visual_block_intact(pass, &init, &next), "visual block changed at step {}", record.step);
        records.push(record);
        state = next;
    }
    Ok((state, records))
}

/// Whether the top `d` rows of `state.nodes` equal the visual block of
/// `init` bit for bit.
pub fn visual_block_intact(pass: &Pass<'_>, init: &GraphState, state: &GraphState) -> bool {
    let t = &pass.tape;
    let visual = t.value(init.visual);
    let nodes = t.value(state.nodes);
    let top = &nodes.data()[..visual.len()];
    top.len() == visual.len() && top.iter().zip(visual.data()).all(|(a, b)| a.to_bits() == b.to_bits())
}

/// `α_g = softmax(P_g tanh(W_g1 q_s 1ᵀ + W_g2 N))`, `e_g = N α_gᵀ`.
/// With `uniform` set, `α_g = 1/n`.
pub fn graph_attention(
    pass: &Pass<'_>,
    nodes: Var,
    sentence: Var,
    params: &GraphParams,
    uniform: bool,
) -> Result<GraphEmbedding> {
    let t = &pass.tape;
    let n = t.shape(nodes)[1];
    let alpha = if uniform {
        t.constant(Tensor::filled(&[1, n], 1.0 / n as f64)?)
    } else {
        let q = t.broadcast_cols(t.matmul(pass.p(params.w_g1), sentence)?, n)?;
        let z = t.tanh(t.add(q, t.matmul(pass.p(params.w_g2), nodes)?)?)?;
        let z = pass.dropout(z)?;
        t.softmax(t.matmul(pass.p(params.p_g), z)?, Axis(1))?
    };
    Ok(GraphEmbedding {
        embedding: t.matmul(nodes, t.transpose(alpha)?)?,
        alpha,
    })
}

/// `ẽ = tanh(W_e [e_g; u; q_s])`, with dropout on the output in training.
pub fn fuse(pass: &Pass<'_>, graph: Var, history: Var, sentence: Var, params: &GraphParams) -> Result<Var> {
    let t = &pass.tape;
    let joint = t.concat(&[graph, history, sentence], Axis(0))?;
    let e = t.tanh(t.matmul(pass.p(params.w_e), joint)?)?;
    Ok(pass.dropout(e)?)
}
