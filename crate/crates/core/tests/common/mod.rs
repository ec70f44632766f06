//! Plain nested-Vec reference math used as an independent oracle.
#![allow(dead_code)]

use cag_core::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    t.to_rows()
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
        .collect()
}

pub fn col(a: &Mat, j: usize) -> Vec<f64> {
    a.iter().map(|r| r[j]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn had(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn tanh(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.tanh()).collect()
}

pub fn sigmoid(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

/// Direct exp/sum softmax (no max shift).
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = a.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn l2norm(a: &[f64]) -> Vec<f64> {
    let n = (a.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    a.iter().map(|x| x / n).collect()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn weighted_sum(cols: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols[0].len()];
    for (c, wi) in cols.iter().zip(w) {
        for (o, v) in out.iter_mut().zip(c) {
            *o += wi * v;
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub mod tiny {
    use cag_core::graph::ModeFlags;
    use cag_core::init::uniform;
    use cag_core::model::{Example, ModelConfig};
    use rand::Rng;

    pub const VOCAB: usize = 12;

    /// `d=8, d_w=6, d_v=5, T=2, K=2`, dropout off.
    pub fn config() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_w: 6,
            d_v: 5,
            vocab: VOCAB,
            flags: ModeFlags {
                k: 2,
                t: 2,
                ..ModeFlags::default()
            },
            dropout: 0.0,
        }
    }

    fn words<R: Rng>(rng: &mut R, len: usize) -> Vec<usize> {
        (0..len).map(|_| rng.gen_range(2..VOCAB)).collect()
    }

    /// `n=5` objects, a 4-word question, 3 history rows and 4 candidates.
    pub fn example<R: Rng>(rng: &mut R) -> Example {
        Example {
            features: uniform(rng, &[5, 5], 1.0).unwrap(),
            history: (0..3).map(|i| words(rng, 3 + i)).collect(),
            question: words(rng, 4),
            candidates: (0..4).map(|_| words(rng, 2)).collect(),
            gt: rng.gen_range(0..4),
        }
    }
}
