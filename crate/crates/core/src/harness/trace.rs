//! Plot-ready export of one dialog's attention and graph dynamics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::rank_of;
use crate::graph::ModeFlags;
use crate::model::{forward, Example, ModelConfig, ModelParams};
use crate::pass::Pass;
use crate::tensor::ParamStore;
use crate::{Error, Result};

/// Tolerance on every probability-simplex field.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Objects highlighted per step.
pub const TOP_OBJECTS: usize = 2;

/// Neighbors and weights of one highlighted object at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectStep {
    pub object: usize,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Word attention; absent when word attention is ablated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_q: Option<Vec<f64>>,
    #[serde(rename = "A")]
    pub adjacency: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    pub neighbors: Vec<Vec<usize>>,
    #[serde(rename = "B")]
    pub weights: Vec<Vec<f64>>,
    pub top_objects: Vec<ObjectStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub dialog: String,
    pub question: Vec<String>,
    pub flags: ModeFlags,
    pub steps: Vec<StepTrace>,
    pub alpha_h: Vec<f64>,
    pub alpha_g: Vec<f64>,
    /// Objects with the largest graph attention, best first.
    pub top_objects: Vec<usize>,
    pub logits: Vec<f64>,
    pub gt: usize,
    /// Rank of the ground truth under pessimistic tie breaking.
    pub rank: usize,
    pub predicted: usize,
}

fn check_simplex(name: &str, xs: &[f64]) -> Result<()> {
    let s: f64 = xs.iter().sum();
    if xs.is_empty() || (s - 1.0).abs() > SIMPLEX_TOL || xs.iter().any(|x| !(0.0..=1.0 + SIMPLEX_TOL).contains(x)) {
        return Err(Error::Trace(format!("{name} is not a distribution (sum {s})")));
    }
    Ok(())
}

impl TraceFile {
    /// Checks simplex sums and that every field has the shape implied by
    /// the flags, `n` objects, `m` question words and `l` history rows.
    pub fn validate(&self, n: usize, m: usize, l: usize) -> Result<()> {
        let steps = self.flags.steps();
        if self.steps.len() != steps {
            return Err(Error::Trace(format!("{} step records for {steps} steps", self.steps.len())));
        }
        let k = self.flags.k.min(n);
        let shape = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Trace(format!("{name} has {got} entries, expected {want}")))
            }
        };
        shape("alpha_h", self.alpha_h.len(), l)?;
        check_simplex("alpha_h", &self.alpha_h)?;
        shape("alpha_g", self.alpha_g.len(), n)?;
        check_simplex("alpha_g", &self.alpha_g)?;
        for (i, s) in self.steps.iter().enumerate() {
            let tag = format!("step {}", s.step);
            shape(&format!("{tag} index"), s.step, i + 1)?;
            if let Some(a) = &s.alpha_q {
                shape(&format!("{tag} alpha_q"), a.len(), m)?;
                check_simplex(&format!("{tag} alpha_q"), a)?;
            } else if !self.flags.no_q_att {
                return Err(Error::Trace(format!("{tag} lacks alpha_q")));
            }
            shape(&format!("{tag} A rows"), s.adjacency.len(), n)?;
            shape(&format!("{tag} S rows"), s.neighbors.len(), n)?;
            shape(&format!("{tag} B rows"), s.weights.len(), n)?;
            for i in 0..n {
                shape(&format!("{tag} A[{i}]"), s.adjacency[i].len(), n)?;
                shape(&format!("{tag} S[{i}]"), s.neighbors[i].len(), k)?;
                shape(&format!("{tag} B[{i}]"), s.weights[i].len(), k)?;
                check_simplex(&format!("{tag} B[{i}]"), &s.weights[i])?;
                if s.neighbors[i].iter().any(|&j| j >= n) {
                    return Err(Error::Trace(format!("{tag} S[{i}] names a missing node")));
                }
            }
        }
        if self.gt >= self.logits.len() {
            return Err(Error::Trace(format!("gt {} outside {} logits", self.gt, self.logits.len())));
        }
        Ok(())
    }

    /// Validates and writes pretty JSON.
    pub fn write(&self, path: &Path, n: usize, m: usize, l: usize) -> Result<()> {
        self.validate(n, m, l)?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Runs one evaluation pass on `ex` and collects its trace.
pub fn trace_example(
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    flags: &ModeFlags,
    ex: &Example,
    dialog: &str,
    question: &[String],
) -> Result<TraceFile> {
    let pass = Pass::eval(store);
    let out = forward(&pass, params, cfg, flags, ex)?;
    let t = &pass.tape;
    let alpha_g = t.tensor(out.alpha_g).into_data();
    let mut order: Vec<usize> = (0..alpha_g.len()).collect();
    order.sort_by(|&a, &b| alpha_g[b].total_cmp(&alpha_g[a]).then(a.cmp(&b)));
    order.truncate(TOP_OBJECTS);

    let steps = out
        .steps
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let weights = t.tensor(rec.weights).to_rows();
            StepTrace {
                step: rec.step,
                alpha_q: out.alpha_q.get(i).map(|&a| t.tensor(a).into_data()),
                adjacency: t.tensor(rec.adjacency).to_rows(),
                neighbors: rec.neighbors.clone(),
                top_objects: order
                    .iter()
                    .map(|&o| ObjectStep {
                        object: o,
                        neighbors: rec.neighbors[o].clone(),
                        weights: weights[o].clone(),
                    })
                    .collect(),
                weights,
            }
        })
        .collect();
    let logits = t.tensor(out.logits).into_data();
    let predicted = (0..logits.len())
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    Ok(TraceFile {
        dialog: dialog.to_string(),
        question: question.to_vec(),
        flags: *flags,
        steps,
        alpha_h: t.tensor(out.alpha_h).into_data(),
        alpha_g,
        top_objects: order,
        rank: rank_of(&logits, ex.gt),
        gt: ex.gt,
        predicted,
        logits,
    })
}
