//! Reverse-mode differentiation over a flat, append-only op tape.
//!
//! A [`Tape`] is built per training step: parameters enter as leaves, the
//! forward graph is composed from a small closed set of primitives, and
//! [`Tape::backward`] walks the nodes in reverse to accumulate gradients.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{ChoreoError, Result};
use crate::substrate::optim::ParamSet;
use crate::substrate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct V(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(V, V),
    Add(V, V),
    Sub(V, V),
    Mul(V, V),
    Scale(V, f64),
    AddScalar(V),
    Tanh(V),
    Sigmoid(V),
    Exp(V),
    Log(V),
    Square(V),
    Softmax(V),
    SumRows(V),
    SumAll(V),
    NormRows(V),
    ConcatCols(V, V),
    ConcatRows(V, V),
    SliceCols(V, usize, usize),
    GatherRows(V, Rc<Vec<usize>>),
    Reshape(V),
    StraightThrough(V),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, V>,
    frozen: BTreeMap<String, V>,
    fault: Option<String>,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: BTreeMap::new(),
            fault: None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> V {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op_name(&op).to_string());
        }
        self.nodes.push(Node { value, op });
        V(self.nodes.len() - 1)
    }

    pub fn value(&self, v: V) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    /// Tracked leaf: an input we may want gradients for.
    pub fn leaf(&mut self, t: Tensor) -> V {
        self.push(t, Op::Leaf)
    }

    /// Untracked leaf: gradients stop here.
    pub fn constant(&mut self, t: Tensor) -> V {
        self.push(t, Op::Leaf)
    }

    /// Copy of a node's value with the gradient path severed.
    pub fn detach(&mut self, v: V) -> V {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Trainable parameter leaf, registered under its name.
    pub fn param(&mut self, set: &ParamSet, name: &str) -> V {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = set.get(name).clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Frozen parameter leaf: used in the graph, excluded from gradients.
    pub fn frozen(&mut self, set: &ParamSet, name: &str) -> V {
        if let Some(&v) = self.frozen.get(name) {
            return v;
        }
        let t = set.get(name).clone();
        let v = self.constant(t);
        self.frozen.insert(name.to_string(), v);
        v
    }

    /// Parameter leaf, trainable or frozen.
    pub fn p(&mut self, set: &ParamSet, name: &str, train: bool) -> V {
        if train {
            self.param(set, name)
        } else {
            self.frozen(set, name)
        }
    }

    pub fn matmul(&mut self, a: V, b: V) -> V {
        let t = self.value(a).matmul(self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    /// Elementwise add; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: V, b: V) -> V {
        let t = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: V, b: V) -> V {
        let t = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    /// Elementwise product; `b` may be a single row or a `[r, 1]` column
    /// broadcast against `a`.
    pub fn mul(&mut self, a: V, b: V) -> V {
        let t = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: V, c: f64) -> V {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: V, c: f64) -> V {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: V) -> V {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: V) -> V {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: V) -> V {
        let t = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(t, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: V) -> V {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: V) -> V {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn square(&mut self, a: V) -> V {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    /// Row-wise softmax over the innermost dimension.
    pub fn softmax(&mut self, a: V) -> V {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out[i * c..(i + 1) * c].iter_mut() {
                *o /= sum;
            }
        }
        let mut shape = x.shape.clone();
        if shape.is_empty() {
            shape = vec![1, 1];
        }
        let t = Tensor::new(shape, out);
        self.push(t, Op::Softmax(a))
    }

    /// `[r, c] -> [r, 1]` sum over the innermost dimension.
    pub fn sum_rows(&mut self, a: V) -> V {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let data = (0..r).map(|i| x.data[i * c..(i + 1) * c].iter().sum()).collect();
        let t = Tensor::matrix(r, 1, data);
        self.push(t, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: V) -> V {
        let t = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(t, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: V) -> V {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `[r, c] -> [r, 1]` Euclidean norm of each row.
    pub fn norm_rows(&mut self, a: V) -> V {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let data = (0..r)
            .map(|i| x.data[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let t = Tensor::matrix(r, 1, data);
        self.push(t, Op::NormRows(a))
    }

    pub fn concat_cols(&mut self, a: V, b: V) -> V {
        let (x, y) = (self.value(a), self.value(b));
        let r = x.rows();
        assert_eq!(r, y.rows(), "concat_cols row mismatch");
        let (ca, cb) = (x.cols(), y.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(x.row_slice(i));
            data.extend_from_slice(y.row_slice(i));
        }
        let t = Tensor::matrix(r, ca + cb, data);
        self.push(t, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: V, b: V) -> V {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "concat_rows col mismatch");
        let c = x.cols();
        let rows = x.rows() + y.rows();
        let mut data = Vec::with_capacity(rows * c);
        data.extend_from_slice(&x.data);
        data.extend_from_slice(&y.data);
        let t = Tensor::matrix(rows, c, data);
        self.push(t, Op::ConcatRows(a, b))
    }

    /// Columns `[start, end)` of every row.
    pub fn slice_cols(&mut self, a: V, start: usize, end: usize) -> V {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        assert!(start <= end && end <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        let t = Tensor::matrix(r, end - start, data);
        self.push(t, Op::SliceCols(a, start, end))
    }

    /// Rows of `a` selected by `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: V, indices: Rc<Vec<usize>>) -> V {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            data.extend_from_slice(x.row_slice(i));
        }
        let t = Tensor::matrix(indices.len(), c, data);
        self.push(t, Op::GatherRows(a, indices))
    }

    pub fn reshape(&mut self, a: V, shape: Vec<usize>) -> V {
        let x = self.value(a);
        assert_eq!(x.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        let t = Tensor::new(shape, x.data.clone());
        self.push(t, Op::Reshape(a))
    }

    /// Node whose forward value is `value` but whose gradient passes
    /// unchanged to `grad_to` (the straight-through estimator).
    pub fn straight_through(&mut self, grad_to: V, value: Tensor) -> V {
        assert_eq!(
            self.value(grad_to).len(),
            value.len(),
            "straight_through size mismatch"
        );
        self.push(value, Op::StraightThrough(grad_to))
    }

    /// Clamp with straight-through gradient (used for bounded actions).
    pub fn clamp_st(&mut self, a: V, lo: f64, hi: f64) -> V {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::StraightThrough(a))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: V) -> Result<Gradients> {
        if let Some(op) = &self.fault {
            return Err(ChoreoError::NumericFault { op: op.clone() });
        }
        if !self.value(out).is_scalar() {
            return Err(ChoreoError::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(out).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { per_node: grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: V, t: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(g);
                acc(*a, reshape_like(ga, self.value(*a)));
                acc(*b, reshape_like(gb, self.value(*b)));
            }
            Op::Add(a, b) => {
                acc(*a, reshape_like(g.clone(), self.value(*a)));
                acc(*b, reduce_to_shape(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reshape_like(g.clone(), self.value(*a)));
                let mut gb = reduce_to_shape(g, self.value(*b));
                gb.scale_assign(-1.0);
                acc(*b, gb);
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let ga = broadcast_binary(g, xb, |gv, bv| gv * bv);
                acc(*a, reshape_like(ga, xa));
                let gb_full = g.zip_map(&reshape_like(xa.clone(), g), |gv, av| gv * av);
                acc(*b, reduce_to_shape(&gb_full, xb));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, g.zip_map(y, |gv, yv| gv * yv));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| gv / xv));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| gv * 2.0 * xv));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    let ys = y.row_slice(row);
                    let gs = &g.data[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for k in 0..c {
                        ga[row * c + k] = ys[k] * (gs[k] - dot);
                    }
                }
                acc(*a, Tensor::new(self.value(*a).shape.clone(), ga));
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    let gv = g.data[row];
                    for k in 0..c {
                        ga[row * c + k] = gv;
                    }
                }
                acc(*a, Tensor::new(x.shape.clone(), ga));
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                let gv = g.item();
                acc(*a, Tensor::new(x.shape.clone(), vec![gv; x.len()]));
            }
            Op::NormRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let (r, c) = (x.rows(), x.cols());
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    let norm = y.data[row].max(1e-12);
                    let gv = g.data[row];
                    for k in 0..c {
                        ga[row * c + k] = gv * x.data[row * c + k] / norm;
                    }
                }
                acc(*a, Tensor::new(x.shape.clone(), ga));
            }
            Op::ConcatCols(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (r, ca, cb) = (xa.rows(), xa.cols(), xb.cols());
                let mut ga = vec![0.0; r * ca];
                let mut gb = vec![0.0; r * cb];
                for row in 0..r {
                    let gs = &g.data[row * (ca + cb)..(row + 1) * (ca + cb)];
                    ga[row * ca..(row + 1) * ca].copy_from_slice(&gs[..ca]);
                    gb[row * cb..(row + 1) * cb].copy_from_slice(&gs[ca..]);
                }
                acc(*a, Tensor::new(xa.shape.clone(), ga));
                acc(*b, Tensor::new(xb.shape.clone(), gb));
            }
            Op::ConcatRows(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let na = xa.len();
                acc(*a, Tensor::new(xa.shape.clone(), g.data[..na].to_vec()));
                acc(*b, Tensor::new(xb.shape.clone(), g.data[na..].to_vec()));
            }
            Op::SliceCols(a, start, end) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let w = end - start;
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    ga[row * c + start..row * c + end]
                        .copy_from_slice(&g.data[row * w..(row + 1) * w]);
                }
                acc(*a, Tensor::new(x.shape.clone(), ga));
            }
            Op::GatherRows(a, indices) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = vec![0.0; x.len()];
                for (out_row, &src_row) in indices.iter().enumerate() {
                    for k in 0..c {
                        ga[src_row * c + k] += g.data[out_row * c + k];
                    }
                }
                acc(*a, Tensor::new(x.shape.clone(), ga));
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::new(x.shape.clone(), g.data.clone()));
            }
            Op::StraightThrough(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::new(x.shape.clone(), g.data.clone()));
            }
        }
        Ok(())
    }

    pub fn grad_of<'g>(&self, grads: &'g Gradients, v: V) -> Option<&'g Tensor> {
        grads.per_node[v.0].as_ref()
    }

    /// Gradients for every parameter of `set`, zero-filled where the
    /// parameter did not contribute to the output.
    pub fn param_grads(&self, set: &ParamSet, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, param) in set.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| grads.per_node[v.0].clone())
                .unwrap_or_else(|| Tensor::zeros(&param.shape));
            out.insert(name.clone(), g);
        }
        out
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Square(..) => "square",
        Op::Softmax(..) => "softmax",
        Op::SumRows(..) => "sum_rows",
        Op::SumAll(..) => "sum_all",
        Op::NormRows(..) => "norm_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::Reshape(..) => "reshape",
        Op::StraightThrough(..) => "straight_through",
    }
}

/// Elementwise binary with `b` broadcast over rows (`[1, c]`) or columns
/// (`[r, 1]`) of `a` when shapes differ.
fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.len() == b.len() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape.clone(), data);
    }
    let (r, c) = (a.rows(), a.cols());
    if b.len() == c && b.rows() <= 1 {
        // row broadcast
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for k in 0..c {
                data.push(f(a.data[i * c + k], b.data[k]));
            }
        }
        Tensor::new(a.shape.clone(), data)
    } else if b.len() == r && b.cols() == 1 {
        // column broadcast
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for k in 0..c {
                data.push(f(a.data[i * c + k], b.data[i]));
            }
        }
        Tensor::new(a.shape.clone(), data)
    } else {
        panic!(
            "incompatible broadcast: {:?} vs {:?}",
            a.shape, b.shape
        );
    }
}

fn reshape_like(mut t: Tensor, like: &Tensor) -> Tensor {
    t.shape = like.shape.clone();
    t
}

/// Reduce a full-size gradient down to a broadcast operand's shape.
fn reduce_to_shape(g: &Tensor, target: &Tensor) -> Tensor {
    if g.len() == target.len() {
        return reshape_like(g.clone(), target);
    }
    let (r, c) = (g.rows(), g.cols());
    if target.len() == c {
        let mut out = vec![0.0; c];
        for i in 0..r {
            for k in 0..c {
                out[k] += g.data[i * c + k];
            }
        }
        Tensor::new(target.shape.clone(), out)
    } else if target.len() == r && target.cols() == 1 {
        let mut out = vec![0.0; r];
        for i in 0..r {
            for k in 0..c {
                out[i] += g.data[i * c + k];
            }
        }
        Tensor::new(target.shape.clone(), out)
    } else {
        panic!(
            "cannot reduce gradient {:?} to {:?}",
            g.shape, target.shape
        );
    }
}
