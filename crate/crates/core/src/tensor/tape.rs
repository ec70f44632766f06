//! Reverse-mode tape.
//!
//! Operations append nodes in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. A tape borrows
//! the parameter store it reads from; parameters are registered at most once
//! per tape so repeated uses accumulate into one gradient.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use super::ops::{l2_normalize_slice, softmax_slice};
use super::{Axis, ParamId, ParamStore, Tensor, TensorError, TensorResult};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: Axis },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BroadcastCols(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum { input: Var, axis: Option<Axis> },
    Dropout { input: Var, mask: Vec<f64> },
    Softmax { input: Var, axis: Axis },
    L2Normalize { input: Var, axis: Axis, norms: Vec<f64> },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    Gather { input: Var, index: Vec<Vec<usize>> },
    Scatter { input: Var, index: Vec<Vec<usize>> },
    Embed { table: Var, ids: Vec<usize>, pad: Option<usize> },
    CrossEntropy { input: Var, target: usize, probs: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one differentiable computation.
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dims(op: &'static str, t: &Tensor) -> TensorResult<(usize, usize)> {
    t.dims2().map_err(|_| TensorError::NotMatrix {
        op,
        shape: t.shape().to_vec(),
    })
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Visits each slice along `axis` as a list of flat indices.
fn slices(rows: usize, cols: usize, axis: Axis) -> Vec<Vec<usize>> {
    if axis.0 == 0 {
        (0..cols)
            .map(|j| (0..rows).map(|i| i * cols + j).collect())
            .collect()
    } else {
        (0..rows)
            .map(|i| (0..cols).map(|j| i * cols + j).collect())
            .collect()
    }
}

fn check_axis(op: &'static str, axis: Axis) -> TensorResult<()> {
    if axis.0 > 1 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("axis {} on a rank-2 tensor", axis.0),
        });
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Borrow of a recorded value.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    /// Owned copy of a recorded value.
    pub fn tensor(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.as_ref().clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a single-element var.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    /// Records an input. `requires_grad` leaves get gradients from `backward`.
    pub fn leaf(&self, tensor: Tensor, requires_grad: bool) -> Var {
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    /// Registers a parameter by reference (no copy); repeated calls return the
    /// same var.
    pub fn param(&self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value: Cow::Borrowed(store.get(id)),
                op: Op::Leaf,
                needs_grad: true,
            });
            Var(nodes.len() - 1)
        };
        self.params.borrow_mut().insert(id, var);
        var
    }

    pub fn matmul(&self, a: Var, b: Var) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = dims("matmul", ta)?;
            let (k2, n) = dims("matmul", tb)?;
            if k != k2 {
                return Err(mismatch("matmul", ta, tb));
            }
            Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&self, a: Var) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (r, c) = dims("transpose", ta)?;
            Tensor::new(vec![c, r], transpose_raw(ta.data(), r, c))?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    /// Concatenation of rank-2 tensors. `Axis(0)` stacks vertically (rows
    /// accumulate), `Axis(1)` places side by side.
    pub fn concat(&self, inputs: &[Var], axis: Axis) -> TensorResult<Var> {
        check_axis("concat", axis)?;
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[inputs[0].0].value;
            let (r0, c0) = dims("concat", first)?;
            for v in &inputs[1..] {
                let t = &nodes[v.0].value;
                let (r, c) = dims("concat", t)?;
                if (axis.0 == 0 && c != c0) || (axis.0 == 1 && r != r0) {
                    return Err(mismatch("concat", first, t));
                }
            }
            if axis.0 == 0 {
                let rows: usize = inputs.iter().map(|v| nodes[v.0].value.rows()).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for v in inputs {
                    data.extend_from_slice(nodes[v.0].value.data());
                }
                Tensor::new(vec![rows, c0], data)?
            } else {
                let cols: usize = inputs.iter().map(|v| nodes[v.0].value.cols()).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for v in inputs {
                        let t = &nodes[v.0].value;
                        let c = t.cols();
                        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::new(vec![r0, cols], data)?
            }
        };
        let ng = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    fn zip_with(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> TensorResult<Tensor> {
        let nodes = self.nodes.borrow();
        let ta = &nodes[a.0].value;
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&self, a: Var, b: Var) -> TensorResult<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&self, a: Var, b: Var) -> TensorResult<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, a: Var, b: Var) -> TensorResult<Var> {
        let value = self.zip_with("hadamard", a, b, |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&self, a: Var, s: f64) -> TensorResult<Var> {
        let value = self.map(a, |x| x * s)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, s), ng))
    }

    /// `x 1ᵀ`: repeats a `d x 1` column `n` times.
    pub fn broadcast_cols(&self, col: Var, n: usize) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[col.0].value;
            let (d, c) = dims("broadcast", t)?;
            if c != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: t.shape().to_vec(),
                    rhs: vec![d, 1],
                });
            }
            if n == 0 {
                return Err(TensorError::ZeroExtent(vec![d, 0]));
            }
            let mut data = Vec::with_capacity(d * n);
            for &x in t.data() {
                data.extend(std::iter::repeat(x).take(n));
            }
            Tensor::new(vec![d, n], data)?
        };
        let ng = self.needs(&[col]);
        Ok(self.push(value, Op::BroadcastCols(col), ng))
    }

    pub fn tanh(&self, a: Var) -> TensorResult<Var> {
        let value = self.map(a, f64::tanh)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Tanh(a), ng))
    }

    pub fn sigmoid(&self, a: Var) -> TensorResult<Var> {
        let value = self.map(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Sigmoid(a), ng))
    }

    /// Sum along an axis (`Axis(0)` gives `1 x c` column sums, `Axis(1)` gives
    /// `r x 1` row sums).
    pub fn sum(&self, a: Var, axis: Axis) -> TensorResult<Var> {
        check_axis("sum", axis)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (r, c) = dims("sum", t)?;
            let sums: Vec<f64> = slices(r, c, axis)
                .iter()
                .map(|s| s.iter().map(|&i| t.data()[i]).sum())
                .collect();
            if axis.0 == 0 {
                Tensor::new(vec![1, c], sums)?
            } else {
                Tensor::new(vec![r, 1], sums)?
            }
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Sum { input: a, axis: Some(axis) }, ng))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum_all(&self, a: Var) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].value.data().iter().sum())
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Sum { input: a, axis: None }, ng))
    }

    /// Inverted dropout. With `rng == None` (evaluation) this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        a: Var,
        keep_prob: f64,
        rng: Option<&mut R>,
    ) -> TensorResult<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("keep probability {keep_prob} outside (0, 1]"),
            });
        }
        let rng = match rng {
            Some(r) if keep_prob < 1.0 => r,
            _ => return Ok(a),
        };
        let n = self.nodes.borrow()[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep_prob {
                    1.0 / keep_prob
                } else {
                    0.0
                }
            })
            .collect();
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            Tensor::new(t.shape().to_vec(), data)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Dropout { input: a, mask }, ng))
    }

    pub fn softmax(&self, a: Var, axis: Axis) -> TensorResult<Var> {
        self.softmax_impl(a, axis, None)
    }

    /// Softmax where positions with `mask[k] == false` (k indexing along the
    /// axis) get exactly zero probability.
    pub fn masked_softmax(&self, a: Var, axis: Axis, mask: &[bool]) -> TensorResult<Var> {
        self.softmax_impl(a, axis, Some(mask))
    }

    fn softmax_impl(&self, a: Var, axis: Axis, mask: Option<&[bool]>) -> TensorResult<Var> {
        check_axis("softmax", axis)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (r, c) = dims("softmax", t)?;
            let extent = if axis.0 == 0 { r } else { c };
            if let Some(m) = mask {
                if m.len() != extent {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax mask",
                        lhs: t.shape().to_vec(),
                        rhs: vec![m.len()],
                    });
                }
            }
            let mut out = vec![0.0; r * c];
            for s in slices(r, c, axis) {
                let logits: Vec<f64> = s.iter().map(|&i| t.data()[i]).collect();
                let p = softmax_slice(&logits, mask).ok_or(TensorError::EmptyAxis {
                    op: "softmax",
                    shape: t.shape().to_vec(),
                })?;
                for (&i, v) in s.iter().zip(p) {
                    out[i] = v;
                }
            }
            Tensor::new(vec![r, c], out)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax { input: a, axis }, ng))
    }

    /// Unit-normalizes every slice along `axis` with norm `sqrt(sum x^2 + 1e-12)`.
    pub fn l2_normalize(&self, a: Var, axis: Axis) -> TensorResult<Var> {
        check_axis("l2_normalize", axis)?;
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (r, c) = dims("l2_normalize", t)?;
            let mut out = vec![0.0; r * c];
            let mut norms = Vec::new();
            for s in slices(r, c, axis) {
                let x: Vec<f64> = s.iter().map(|&i| t.data()[i]).collect();
                let (y, n) = l2_normalize_slice(&x);
                norms.push(n);
                for (&i, v) in s.iter().zip(y) {
                    out[i] = v;
                }
            }
            (Tensor::new(vec![r, c], out)?, norms)
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::L2Normalize { input: a, axis, norms }, ng))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (r, c) = dims("slice_rows", t)?;
            if len == 0 || start + len > r {
                return Err(TensorError::IndexOutOfRange {
                    op: "slice_rows",
                    index: start + len,
                    extent: r,
                });
            }
            Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SliceRows { input: a, start }, ng))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (r, c) = dims("slice_cols", t)?;
            if len == 0 || start + len > c {
                return Err(TensorError::IndexOutOfRange {
                    op: "slice_cols",
                    index: start + len,
                    extent: c,
                });
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SliceCols { input: a, start }, ng))
    }

    /// `out[i][k] = a[i][index[i][k]]`; every row must select the same count.
    pub fn gather(&self, a: Var, index: &[Vec<usize>]) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (r, c) = dims("gather", t)?;
            let k = index.first().map_or(0, Vec::len);
            if index.len() != r || k == 0 || index.iter().any(|row| row.len() != k) {
                return Err(TensorError::InvalidArgument {
                    op: "gather",
                    reason: format!("index must be {r} rows of equal non-zero length"),
                });
            }
            let mut data = Vec::with_capacity(r * k);
            for (i, row) in index.iter().enumerate() {
                for &j in row {
                    if j >= c {
                        return Err(TensorError::IndexOutOfRange {
                            op: "gather",
                            index: j,
                            extent: c,
                        });
                    }
                    data.push(t.data()[i * c + j]);
                }
            }
            Tensor::new(vec![r, k], data)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Inverse placement of [`Tape::gather`]: an `r x cols` matrix with
    /// `out[i][index[i][k]] = a[i][k]` and zeros elsewhere. Indices within a
    /// row must be distinct.
    pub fn scatter(&self, a: Var, index: &[Vec<usize>], cols: usize) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (r, k) = dims("scatter", t)?;
            if index.len() != r || index.iter().any(|row| row.len() != k) {
                return Err(TensorError::InvalidArgument {
                    op: "scatter",
                    reason: format!("index must be {r} rows of length {k}"),
                });
            }
            let mut data = vec![0.0; r * cols];
            for (i, row) in index.iter().enumerate() {
                for (kk, &j) in row.iter().enumerate() {
                    if j >= cols {
                        return Err(TensorError::IndexOutOfRange {
                            op: "scatter",
                            index: j,
                            extent: cols,
                        });
                    }
                    data[i * cols + j] += t.data()[i * k + kk];
                }
            }
            Tensor::new(vec![r, cols], data)?
        };
        let ng = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::Scatter {
                input: a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Looks up rows of a `vocab x d_w` table, returning `d_w x m` with one
    /// column per id. Ids equal to `pad` produce zero columns.
    pub fn embed(&self, table: Var, ids: &[usize], pad: Option<usize>) -> TensorResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let (vocab, dw) = dims("embed", t)?;
            if ids.is_empty() {
                return Err(TensorError::ZeroExtent(vec![dw, 0]));
            }
            let m = ids.len();
            let mut data = vec![0.0; dw * m];
            for (j, &id) in ids.iter().enumerate() {
                if id >= vocab {
                    return Err(TensorError::IndexOutOfRange {
                        op: "embed",
                        index: id,
                        extent: vocab,
                    });
                }
                if Some(id) == pad {
                    continue;
                }
                for r in 0..dw {
                    data[r * m + j] = t.data()[id * dw + r];
                }
            }
            Tensor::new(vec![dw, m], data)?
        };
        let ng = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                pad,
            },
            ng,
        ))
    }

    /// `-log softmax(logits)[target]` for a single row or column of logits.
    pub fn softmax_cross_entropy(&self, logits: Var, target: usize) -> TensorResult<Var> {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            let (r, c) = dims("softmax_cross_entropy", t)?;
            if r != 1 && c != 1 {
                return Err(TensorError::InvalidArgument {
                    op: "softmax_cross_entropy",
                    reason: format!("expected a vector of logits, got {:?}", t.shape()),
                });
            }
            if target >= t.len() {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: target,
                    extent: t.len(),
                });
            }
            let x = t.data();
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let probs: Vec<f64> = x.iter().map(|v| (v - lse).exp()).collect();
            (Tensor::scalar(lse - x[target]), probs)
        };
        let ng = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                input: logits,
                target,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are returned for every
    /// node that depends on a `requires_grad` leaf or parameter.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var, g: &[f64]) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let y = node.value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ta = &nodes[a.0].value;
                    let tb = &nodes[b.0].value;
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    if nodes[a.0].needs_grad {
                        let bt = transpose_raw(tb.data(), k, n);
                        acc(&mut grads, &nodes, *a, &matmul_raw(&gout, &bt, m, n, k));
                    }
                    if nodes[b.0].needs_grad {
                        let at = transpose_raw(ta.data(), m, k);
                        acc(&mut grads, &nodes, *b, &matmul_raw(&at, &gout, k, m, n));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (y.rows(), y.cols());
                    acc(&mut grads, &nodes, *a, &transpose_raw(&gout, r, c));
                }
                Op::Concat { inputs, axis } => {
                    let cols = y.cols();
                    if axis.0 == 0 {
                        let mut offset = 0;
                        for v in inputs {
                            let n = nodes[v.0].value.len();
                            acc(&mut grads, &nodes, *v, &gout[offset..offset + n]);
                            offset += n;
                        }
                    } else {
                        let mut offset = 0;
                        for v in inputs {
                            let t = &nodes[v.0].value;
                            let c = t.cols();
                            let mut g = Vec::with_capacity(t.len());
                            for i in 0..t.rows() {
                                g.extend_from_slice(&gout[i * cols + offset..i * cols + offset + c]);
                            }
                            acc(&mut grads, &nodes, *v, &g);
                            offset += c;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, &gout);
                    acc(&mut grads, &nodes, *b, &gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, &gout);
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    acc(&mut grads, &nodes, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ta = nodes[a.0].value.data();
                    let tb = nodes[b.0].value.data();
                    if nodes[a.0].needs_grad {
                        let g: Vec<f64> = gout.iter().zip(tb).map(|(g, x)| g * x).collect();
                        acc(&mut grads, &nodes, *a, &g);
                    }
                    if nodes[b.0].needs_grad {
                        let g: Vec<f64> = gout.iter().zip(ta).map(|(g, x)| g * x).collect();
                        acc(&mut grads, &nodes, *b, &g);
                    }
                }
                Op::Scale(a, s) => {
                    let g: Vec<f64> = gout.iter().map(|g| g * s).collect();
                    acc(&mut grads, &nodes, *a, &g);
                }
                Op::BroadcastCols(a) => {
                    let (d, n) = (y.rows(), y.cols());
                    let g: Vec<f64> = (0..d).map(|i| gout[i * n..(i + 1) * n].iter().sum()).collect();
                    acc(&mut grads, &nodes, *a, &g);
                }
                Op::Tanh(a) => {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(y.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    acc(&mut grads, &nodes, *a, &g);
                }
                Op::Sigmoid(a) => {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(y.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    acc(&mut grads, &nodes, *a, &g);
                }
                Op::Sum { input, axis } => {
                    let t = &nodes[input.0].value;
                    let g = match axis {
                        None => vec![gout[0]; t.len()],
                        Some(ax) => {
                            let (r, c) = (t.rows(), t.cols());
                            let mut g = vec![0.0; r * c];
                            for (s_idx, s) in slices(r, c, *ax).iter().enumerate() {
                                for &i in s {
                                    g[i] = gout[s_idx];
                                }
                            }
                            g
                        }
                    };
                    acc(&mut grads, &nodes, *input, &g);
                }
                Op::Dropout { input, mask } => {
                    let g: Vec<f64> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc(&mut grads, &nodes, *input, &g);
                }
                Op::Softmax { input, axis } => {
                    let (r, c) = (y.rows(), y.cols());
                    let mut g = vec![0.0; r * c];
                    for s in slices(r, c, *axis) {
                        let dot: f64 = s.iter().map(|&i| y.data()[i] * gout[i]).sum();
                        for &i in &s {
                            g[i] = y.data()[i] * (gout[i] - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *input, &g);
                }
                Op::L2Normalize { input, axis, norms } => {
                    let (r, c) = (y.rows(), y.cols());
                    let mut g = vec![0.0; r * c];
                    for (s, n) in slices(r, c, *axis).iter().zip(norms) {
                        let dot: f64 = s.iter().map(|&i| y.data()[i] * gout[i]).sum();
                        for &i in s {
                            g[i] = (gout[i] - y.data()[i] * dot) / n;
                        }
                    }
                    acc(&mut grads, &nodes, *input, &g);
                }
                Op::SliceRows { input, start } => {
                    let t = &nodes[input.0].value;
                    let c = t.cols();
                    let mut g = vec![0.0; t.len()];
                    g[start * c..start * c + gout.len()].copy_from_slice(&gout);
                    acc(&mut grads, &nodes, *input, &g);
                }
                Op::SliceCols { input, start } => {
                    let t = &nodes[input.0].value;
                    let (r, c) = (t.rows(), t.cols());
                    let len = y.cols();
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        g[i * c + start..i * c + start + len]
                            .copy_from_slice(&gout[i * len..(i + 1) * len]);
                    }
                    acc(&mut grads, &nodes, *input, &g);
                }
                Op::Gather { input, index } => {
                    let t = &nodes[input.0].value;
                    let c = t.cols();
                    let k = y.cols();
                    let mut g = vec![0.0; t.len()];
                    for (i, row) in index.iter().enumerate() {
                        for (kk, &j) in row.iter().enumerate() {
                            g[i * c + j] += gout[i * k + kk];
                        }
                    }
                    acc(&mut grads, &nodes, *input, &g);
                }
                Op::Scatter { input, index } => {
                    let cols = y.cols();
                    let k = nodes[input.0].value.cols();
                    let mut g = vec![0.0; index.len() * k];
                    for (i, row) in index.iter().enumerate() {
                        for (kk, &j) in row.iter().enumerate() {
                            g[i * k + kk] = gout[i * cols + j];
                        }
                    }
                    acc(&mut grads, &nodes, *input, &g);
                }
                Op::Embed { table, ids, pad } => {
                    let t = &nodes[table.0].value;
                    let dw = t.cols();
                    let m = ids.len();
                    let mut g = vec![0.0; t.len()];
                    for (j, &id) in ids.iter().enumerate() {
                        if Some(id) == *pad {
                            continue;
                        }
                        for r in 0..dw {
                            g[id * dw + r] += gout[r * m + j];
                        }
                    }
                    acc(&mut grads, &nodes, *table, &g);
                }
                Op::CrossEntropy { input, target, probs } => {
                    let mut g: Vec<f64> = probs.iter().map(|p| p * gout[0]).collect();
                    g[*target] -= gout[0];
                    acc(&mut grads, &nodes, *input, &g);
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }

        Ok(Gradients {
            by_node: grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Gradients of one backward pass, addressable by leaf var or parameter id.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; `None` when the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    pub fn all_finite(&self) -> bool {
        self.by_node
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}
