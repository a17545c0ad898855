//! The tape: eagerly evaluated ops with recorded backward rules.

use super::store::ParamStore;
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Elementwise scale by a constant.
    Scale(usize, f64),
    /// `x + b` with `b` broadcast over the last axis.
    AddBias(usize, usize),
    /// `x * m` with `m` broadcast over the last axis.
    MulBias(usize, usize),
    MatMul(usize, usize),
    Concat {
        axis: usize,
        parts: Vec<usize>,
    },
    ReduceSum {
        x: usize,
        axis: usize,
    },
    ReduceMean {
        x: usize,
        axis: usize,
    },
    ReduceMax {
        x: usize,
        /// Winning input offset per output lane.
        argmax: Vec<usize>,
    },
    Square(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    LeakyRect {
        x: usize,
        slope: f64,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    /// Batch normalization over all leading axes, per trailing channel.
    NormalizeChannels {
        x: usize,
        inv_std: Vec<f64>,
    },
    /// Rows of a 2-D tensor gathered through an index table.
    GatherRows {
        x: usize,
        table: Vec<u32>,
    },
    Reshape(usize),
    /// Mean cross-entropy over unmasked rows; softmax probabilities are
    /// kept for the backward rule.
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        ignore: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    /// Parameter bindings: name -> node id (each name bound once).
    params: BTreeMap<String, usize>,
}

/// Dynamic computation graph; see the module docs.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape at `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        let grad = vec![0.0; data.len()];
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            data,
            grad,
            op,
        });
        Value(inner.nodes.len() - 1)
    }

    pub fn shape(&self, v: Value) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].shape.clone()
    }

    pub fn data(&self, v: Value) -> Vec<f64> {
        self.inner.borrow().nodes[v.0].data.clone()
    }

    pub fn grad(&self, v: Value) -> Vec<f64> {
        self.inner.borrow().nodes[v.0].grad.clone()
    }

    /// Runs `f` over the node's data without cloning.
    pub fn with_data<R>(&self, v: Value, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().nodes[v.0].data)
    }

    /// The value of a single-element node.
    pub fn scalar_value(&self, v: Value) -> Result<f64> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.0];
        if node.data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scalar_value",
                lhs: node.shape.clone(),
                rhs: vec![1],
            });
        }
        Ok(node.data[0])
    }

    // ----- leaves -------------------------------------------------------

    pub fn leaf(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Value> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Value {
        self.push(vec![], vec![v], Op::Leaf)
    }

    /// Binds a stored parameter as a leaf.  Repeated binds of the same
    /// name return the same node so gradients accumulate in one place.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Value> {
        if let Some(&id) = self.inner.borrow().params.get(name) {
            return Ok(Value(id));
        }
        let tensor = store.get(name)?;
        let v = self.push(tensor.shape.clone(), tensor.data.clone(), Op::Leaf);
        self.inner.borrow_mut().params.insert(name.to_string(), v.0);
        Ok(v)
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let inner = self.inner.borrow();
        inner
            .params
            .iter()
            .map(|(name, &id)| (name.clone(), inner.nodes[id].grad.clone()))
            .collect()
    }

    // ----- elementwise --------------------------------------------------

    fn binary_same_shape(&self, op_name: &'static str, a: Value, b: Value) -> Result<Vec<usize>> {
        let inner = self.inner.borrow();
        let (sa, sb) = (&inner.nodes[a.0].shape, &inner.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value> {
        let shape = self.binary_same_shape("add", a, b)?;
        let data = {
            let inner = self.inner.borrow();
            let (da, db) = (&inner.nodes[a.0].data, &inner.nodes[b.0].data);
            da.iter().zip(db).map(|(x, y)| x + y).collect()
        };
        Ok(self.push(shape, data, Op::Add(a.0, b.0)))
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value> {
        let shape = self.binary_same_shape("sub", a, b)?;
        let data = {
            let inner = self.inner.borrow();
            let (da, db) = (&inner.nodes[a.0].data, &inner.nodes[b.0].data);
            da.iter().zip(db).map(|(x, y)| x - y).collect()
        };
        Ok(self.push(shape, data, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&self, a: Value, b: Value) -> Result<Value> {
        let shape = self.binary_same_shape("mul", a, b)?;
        let data = {
            let inner = self.inner.borrow();
            let (da, db) = (&inner.nodes[a.0].data, &inner.nodes[b.0].data);
            da.iter().zip(db).map(|(x, y)| x * y).collect()
        };
        Ok(self.push(shape, data, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&self, x: Value, c: f64) -> Value {
        let (shape, data) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            (node.shape.clone(), node.data.iter().map(|v| v * c).collect())
        };
        self.push(shape, data, Op::Scale(x.0, c))
    }

    fn bias_like(&self, op_name: &'static str, x: Value, b: Value) -> Result<Vec<usize>> {
        let inner = self.inner.borrow();
        let (sx, sb) = (&inner.nodes[x.0].shape, &inner.nodes[b.0].shape);
        if sx.is_empty() || sb.len() != 1 || sb[0] != *sx.last().unwrap() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: sx.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sx.clone())
    }

    /// `x + b`, `b` broadcast over every leading axis.
    pub fn add_bias(&self, x: Value, b: Value) -> Result<Value> {
        let shape = self.bias_like("add_bias", x, b)?;
        let c = *shape.last().unwrap();
        let data = {
            let inner = self.inner.borrow();
            let (dx, db) = (&inner.nodes[x.0].data, &inner.nodes[b.0].data);
            dx.iter()
                .enumerate()
                .map(|(i, v)| v + db[i % c])
                .collect()
        };
        Ok(self.push(shape, data, Op::AddBias(x.0, b.0)))
    }

    /// `x * m`, `m` broadcast over every leading axis.
    pub fn mul_bias(&self, x: Value, m: Value) -> Result<Value> {
        let shape = self.bias_like("mul_bias", x, m)?;
        let c = *shape.last().unwrap();
        let data = {
            let inner = self.inner.borrow();
            let (dx, dm) = (&inner.nodes[x.0].data, &inner.nodes[m.0].data);
            dx.iter()
                .enumerate()
                .map(|(i, v)| v * dm[i % c])
                .collect()
        };
        Ok(self.push(shape, data, Op::MulBias(x.0, m.0)))
    }

    pub fn square(&self, x: Value) -> Value {
        let (shape, data) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            (node.shape.clone(), node.data.iter().map(|v| v * v).collect())
        };
        self.push(shape, data, Op::Square(x.0))
    }

    pub fn exp(&self, x: Value) -> Value {
        let (shape, data) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            (node.shape.clone(), node.data.iter().map(|v| v.exp()).collect())
        };
        self.push(shape, data, Op::Exp(x.0))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&self, x: Value) -> Value {
        let (shape, data) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            (node.shape.clone(), node.data.iter().map(|v| v.ln()).collect())
        };
        self.push(shape, data, Op::Log(x.0))
    }

    /// Square root with a guarded backward: inputs at (or numerically
    /// near) zero get a zero subgradient instead of an infinite one.
    pub fn sqrt(&self, x: Value) -> Value {
        let (shape, data) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            (node.shape.clone(), node.data.iter().map(|v| v.sqrt()).collect())
        };
        self.push(shape, data, Op::Sqrt(x.0))
    }

    /// Leaky rectifier: `x` for `x >= 0`, `slope * x` below.
    pub fn leaky_rect(&self, x: Value, slope: f64) -> Value {
        let (shape, data) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            (
                node.shape.clone(),
                node.data
                    .iter()
                    .map(|&v| if v >= 0.0 { v } else { slope * v })
                    .collect(),
            )
        };
        self.push(shape, data, Op::LeakyRect { x: x.0, slope })
    }

    // ----- structure ----------------------------------------------------

    pub fn reshape(&self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let data = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            if numel(&shape) != node.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: node.shape.clone(),
                    rhs: shape,
                });
            }
            node.data.clone()
        };
        Ok(self.push(shape, data, Op::Reshape(x.0)))
    }

    pub fn concat(&self, axis: usize, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of no parts".into()));
        }
        let (shape, data) = {
            let inner = self.inner.borrow();
            let first = &inner.nodes[parts[0].0].shape;
            if axis >= first.len() {
                return Err(Error::InvalidArgument(format!(
                    "concat axis {axis} out of range for shape {first:?}"
                )));
            }
            let mut shape = first.clone();
            for p in &parts[1..] {
                let s = &inner.nodes[p.0].shape;
                if s.len() != shape.len()
                    || s.iter()
                        .zip(&shape)
                        .enumerate()
                        .any(|(d, (a, b))| d != axis && a != b)
                {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: shape.clone(),
                        rhs: s.clone(),
                    });
                }
                shape[axis] += s[axis];
            }
            let (outer, total_len, inner_ext) = axis_extents(&shape, axis);
            let mut data = vec![0.0; outer * total_len * inner_ext];
            let mut offset = 0;
            for p in parts {
                let node = &inner.nodes[p.0];
                let (_, plen, _) = axis_extents(&node.shape, axis);
                for o in 0..outer {
                    let src = o * plen * inner_ext;
                    let dst = (o * total_len + offset) * inner_ext;
                    data[dst..dst + plen * inner_ext]
                        .copy_from_slice(&node.data[src..src + plen * inner_ext]);
                }
                offset += plen;
            }
            (shape, data)
        };
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Gathers rows of a 2-D `[p, c]` tensor into `[n, k, c]`, where
    /// `table` is a row-major `n x k` index table into the `p` rows.
    pub fn gather_rows(&self, x: Value, table: &[u32], k: usize) -> Result<Value> {
        if k == 0 || table.len() % k != 0 {
            return Err(Error::InvalidArgument(format!(
                "gather table of {} entries not divisible by k={k}",
                table.len()
            )));
        }
        let n = table.len() / k;
        let (shape, data) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            if node.shape.len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: node.shape.clone(),
                    rhs: vec![0, 0],
                });
            }
            let (p, c) = (node.shape[0], node.shape[1]);
            let mut data = vec![0.0; n * k * c];
            for (slot, &row) in table.iter().enumerate() {
                let row = row as usize;
                if row >= p {
                    return Err(Error::InvalidArgument(format!(
                        "gather row {row} out of range ({p} rows)"
                    )));
                }
                data[slot * c..(slot + 1) * c].copy_from_slice(&node.data[row * c..(row + 1) * c]);
            }
            (vec![n, k, c], data)
        };
        Ok(self.push(
            shape,
            data,
            Op::GatherRows {
                x: x.0,
                table: table.to_vec(),
            },
        ))
    }

    // ----- reductions ---------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Value, axis: usize) -> Result<Vec<usize>> {
        let inner = self.inner.borrow();
        let shape = &inner.nodes[x.0].shape;
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "{op} axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(shape.clone())
    }

    pub fn reduce_sum(&self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.check_axis("reduce_sum", x, axis)?;
        let (outer, len, inner_ext) = axis_extents(&shape, axis);
        let data = {
            let inner = self.inner.borrow();
            let src = &inner.nodes[x.0].data;
            let mut out = vec![0.0; outer * inner_ext];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner_ext;
                    for i in 0..inner_ext {
                        out[o * inner_ext + i] += src[base + i];
                    }
                }
            }
            out
        };
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, data, Op::ReduceSum { x: x.0, axis }))
    }

    pub fn reduce_mean(&self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.check_axis("reduce_mean", x, axis)?;
        let (outer, len, inner_ext) = axis_extents(&shape, axis);
        let data = {
            let inner = self.inner.borrow();
            let src = &inner.nodes[x.0].data;
            let mut out = vec![0.0; outer * inner_ext];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner_ext;
                    for i in 0..inner_ext {
                        out[o * inner_ext + i] += src[base + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= len as f64);
            out
        };
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, data, Op::ReduceMean { x: x.0, axis }))
    }

    /// Max over an axis; ties send the gradient to the first maximum.
    pub fn reduce_max(&self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.check_axis("reduce_max", x, axis)?;
        let (outer, len, inner_ext) = axis_extents(&shape, axis);
        let (data, argmax) = {
            let inner = self.inner.borrow();
            let src = &inner.nodes[x.0].data;
            let mut out = vec![f64::NEG_INFINITY; outer * inner_ext];
            let mut arg = vec![0usize; outer * inner_ext];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner_ext;
                    for i in 0..inner_ext {
                        let v = src[base + i];
                        let slot = o * inner_ext + i;
                        if v > out[slot] {
                            out[slot] = v;
                            arg[slot] = base + i;
                        }
                    }
                }
            }
            (out, arg)
        };
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(
            out_shape,
            data,
            Op::ReduceMax { x: x.0, argmax },
        ))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Value, b: Value) -> Result<Value> {
        let (shape, data) = {
            let inner = self.inner.borrow();
            let (na, nb) = (&inner.nodes[a.0], &inner.nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let (r, m, c) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for t in 0..m {
                    let av = na.data[i * m + t];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &nb.data[t * c..(t + 1) * c];
                    let orow = &mut out[i * c..(i + 1) * c];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            (vec![r, c], out)
        };
        Ok(self.push(shape, data, Op::MatMul(a.0, b.0)))
    }

    pub fn softmax(&self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.check_axis("softmax", x, axis)?;
        let (outer, len, inner_ext) = axis_extents(&shape, axis);
        let data = {
            let inner = self.inner.borrow();
            let src = &inner.nodes[x.0].data;
            let mut out = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner_ext {
                    let at = |l: usize| (o * len + l) * inner_ext + i;
                    let mut m = f64::NEG_INFINITY;
                    for l in 0..len {
                        m = m.max(src[at(l)]);
                    }
                    let mut sum = 0.0;
                    for l in 0..len {
                        let e = (src[at(l)] - m).exp();
                        out[at(l)] = e;
                        sum += e;
                    }
                    for l in 0..len {
                        out[at(l)] /= sum;
                    }
                }
            }
            out
        };
        Ok(self.push(shape, data, Op::Softmax { x: x.0, axis }))
    }

    /// Normalizes each trailing channel to zero mean / unit variance over
    /// all leading axes (biased variance, epsilon 1e-5).  Scale and shift
    /// are separate ops ([`Graph::mul_bias`], [`Graph::add_bias`]).
    pub fn normalize_channels(&self, x: Value) -> Result<Value> {
        const EPS: f64 = 1e-5;
        let (shape, data, inv_std) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            if node.shape.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: "normalize_channels",
                    lhs: node.shape.clone(),
                    rhs: vec![0, 0],
                });
            }
            let c = *node.shape.last().unwrap();
            let rows = node.data.len() / c;
            if rows == 0 {
                return Err(Error::InvalidArgument(
                    "normalize_channels over zero rows".into(),
                ));
            }
            let mut mean = vec![0.0; c];
            for r in 0..rows {
                for ch in 0..c {
                    mean[ch] += node.data[r * c + ch];
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for r in 0..rows {
                for ch in 0..c {
                    let d = node.data[r * c + ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
            let mut out = vec![0.0; node.data.len()];
            for r in 0..rows {
                for ch in 0..c {
                    out[r * c + ch] = (node.data[r * c + ch] - mean[ch]) * inv_std[ch];
                }
            }
            (node.shape.clone(), out, inv_std)
        };
        Ok(self.push(shape, data, Op::NormalizeChannels { x: x.0, inv_std }))
    }

    /// Per-channel batch mean and biased variance of a node's data
    /// (read-only; used to maintain running statistics).
    pub fn channel_stats(&self, x: Value) -> Result<(Vec<f64>, Vec<f64>)> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[x.0];
        if node.shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "channel_stats",
                lhs: node.shape.clone(),
                rhs: vec![0, 0],
            });
        }
        let c = *node.shape.last().unwrap();
        let rows = node.data.len() / c;
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                mean[ch] += node.data[r * c + ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                let d = node.data[r * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        Ok((mean, var))
    }

    /// Mean cross-entropy of `[n, c]` logits against integer labels,
    /// skipping rows where `ignore` is true.  Errors if every row is
    /// ignored or a label is out of range.
    pub fn cross_entropy(
        &self,
        logits: Value,
        labels: &[usize],
        ignore: Option<&[bool]>,
    ) -> Result<Value> {
        let (loss, probs, ignore, count) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[logits.0];
            if node.shape.len() != 2 || node.shape[0] != labels.len() {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: node.shape.clone(),
                    rhs: vec![labels.len()],
                });
            }
            let (n, c) = (node.shape[0], node.shape[1]);
            let ignore = match ignore {
                Some(m) => {
                    if m.len() != n {
                        return Err(Error::ShapeMismatch {
                            op: "cross_entropy ignore mask",
                            lhs: vec![n],
                            rhs: vec![m.len()],
                        });
                    }
                    m.to_vec()
                }
                None => vec![false; n],
            };
            let count = ignore.iter().filter(|&&i| !i).count();
            if count == 0 {
                return Err(Error::InvalidArgument(
                    "cross_entropy: every row is masked out".into(),
                ));
            }
            let mut probs = vec![0.0; n * c];
            let mut loss = 0.0;
            for r in 0..n {
                if labels[r] >= c {
                    return Err(Error::InvalidArgument(format!(
                        "label {} out of range for {c} classes",
                        labels[r]
                    )));
                }
                let row = &node.data[r * c..(r + 1) * c];
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (row[ch] - m).exp();
                    probs[r * c + ch] = e;
                    sum += e;
                }
                for ch in 0..c {
                    probs[r * c + ch] /= sum;
                }
                if !ignore[r] {
                    let lse = m + sum.ln();
                    loss += lse - row[labels[r]];
                }
            }
            (loss / count as f64, probs, ignore, count)
        };
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
        ))
    }

    // ----- backward -------------------------------------------------------

    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulates `d loss / d node` into every node's gradient buffer.
    /// `loss` must be a single element.  Each call propagates exactly one
    /// unit of upstream gradient, so a second call (without
    /// [`Graph::zero_grads`]) doubles the stored gradients, and calls on
    /// two different losses add their contributions.
    pub fn backward(&self, loss: Value) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes[loss.0].data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: inner.nodes[loss.0].shape.clone(),
                rhs: vec![1],
            });
        }
        // Messages for this pass only; folded into the accumulators at
        // the end so repeated calls stay independent.
        let mut scratch: Vec<Vec<f64>> = inner.nodes[..=loss.0]
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        scratch[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            backward_node(&inner.nodes, &mut scratch, i);
        }
        for (node, msg) in inner.nodes.iter_mut().zip(&scratch) {
            for (acc, m) in node.grad.iter_mut().zip(msg) {
                *acc += m;
            }
        }
        Ok(())
    }
}

fn backward_node(nodes: &[Node], scratch: &mut [Vec<f64>], i: usize) {
    if matches!(nodes[i].op, Op::Leaf) {
        return;
    }
    if scratch[i].iter().all(|&g| g == 0.0) {
        return;
    }
    let (before, rest) = scratch.split_at_mut(i);
    let g = &rest[0];
    let cur = &nodes[i];
    match &cur.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (t, gv) in g.iter().enumerate() {
                before[*a][t] += gv;
                before[*b][t] += gv;
            }
        }
        Op::Sub(a, b) => {
            for (t, gv) in g.iter().enumerate() {
                before[*a][t] += gv;
                before[*b][t] -= gv;
            }
        }
        Op::Mul(a, b) => {
            for (t, gv) in g.iter().enumerate() {
                before[*a][t] += gv * nodes[*b].data[t];
                before[*b][t] += gv * nodes[*a].data[t];
            }
        }
        Op::Scale(x, c) => {
            for (t, gv) in g.iter().enumerate() {
                before[*x][t] += gv * c;
            }
        }
        Op::AddBias(x, b) => {
            let c = nodes[*b].data.len();
            for (t, gv) in g.iter().enumerate() {
                before[*x][t] += gv;
                before[*b][t % c] += gv;
            }
        }
        Op::MulBias(x, m) => {
            let c = nodes[*m].data.len();
            for (t, gv) in g.iter().enumerate() {
                before[*x][t] += gv * nodes[*m].data[t % c];
                before[*m][t % c] += gv * nodes[*x].data[t];
            }
        }
        Op::MatMul(a, b) => {
            let (r, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let c = nodes[*b].shape[1];
            // dA = g . B^T
            {
                let da = &mut before[*a];
                let bd = &nodes[*b].data;
                for i in 0..r {
                    for j in 0..c {
                        let gv = g[i * c + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..m {
                            da[i * m + t] += gv * bd[t * c + j];
                        }
                    }
                }
            }
            // dB = A^T . g
            {
                let db = &mut before[*b];
                let ad = &nodes[*a].data;
                for i in 0..r {
                    for t in 0..m {
                        let av = ad[i * m + t];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &g[i * c..(i + 1) * c];
                        let brow = &mut db[t * c..(t + 1) * c];
                        for (bg, &gv) in brow.iter_mut().zip(grow) {
                            *bg += av * gv;
                        }
                    }
                }
            }
        }
        Op::Concat { axis, parts } => {
            let (outer, total_len, inner_ext) = axis_extents(&cur.shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let plen = nodes[p].shape[*axis];
                let part = &mut before[p];
                for o in 0..outer {
                    let dst = o * plen * inner_ext;
                    let src = (o * total_len + offset) * inner_ext;
                    for t in 0..plen * inner_ext {
                        part[dst + t] += g[src + t];
                    }
                }
                offset += plen;
            }
        }
        Op::ReduceSum { x, axis } => {
            let (outer, len, inner_ext) = axis_extents(&nodes[*x].shape, *axis);
            let dx = &mut before[*x];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner_ext;
                    for t in 0..inner_ext {
                        dx[base + t] += g[o * inner_ext + t];
                    }
                }
            }
        }
        Op::ReduceMean { x, axis } => {
            let (outer, len, inner_ext) = axis_extents(&nodes[*x].shape, *axis);
            let inv = 1.0 / len as f64;
            let dx = &mut before[*x];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner_ext;
                    for t in 0..inner_ext {
                        dx[base + t] += g[o * inner_ext + t] * inv;
                    }
                }
            }
        }
        Op::ReduceMax { x, argmax } => {
            let dx = &mut before[*x];
            for (slot, &src) in argmax.iter().enumerate() {
                dx[src] += g[slot];
            }
        }
        Op::Square(x) => {
            let xd = &nodes[*x].data;
            let dx = &mut before[*x];
            for t in 0..g.len() {
                dx[t] += 2.0 * xd[t] * g[t];
            }
        }
        Op::Exp(x) => {
            let dx = &mut before[*x];
            for t in 0..g.len() {
                dx[t] += cur.data[t] * g[t];
            }
        }
        Op::Log(x) => {
            let xd = &nodes[*x].data;
            let dx = &mut before[*x];
            for t in 0..g.len() {
                dx[t] += g[t] / xd[t];
            }
        }
        Op::Sqrt(x) => {
            let xd = &nodes[*x].data;
            let dx = &mut before[*x];
            for t in 0..g.len() {
                if xd[t] > 1e-24 {
                    dx[t] += 0.5 / cur.data[t] * g[t];
                }
            }
        }
        Op::LeakyRect { x, slope } => {
            let xd = &nodes[*x].data;
            let dx = &mut before[*x];
            for t in 0..g.len() {
                dx[t] += if xd[t] >= 0.0 { g[t] } else { slope * g[t] };
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner_ext) = axis_extents(&nodes[*x].shape, *axis);
            let y = &cur.data;
            let dx = &mut before[*x];
            for o in 0..outer {
                for t in 0..inner_ext {
                    let at = |l: usize| (o * len + l) * inner_ext + t;
                    let mut dot = 0.0;
                    for l in 0..len {
                        dot += g[at(l)] * y[at(l)];
                    }
                    for l in 0..len {
                        dx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
        }
        Op::NormalizeChannels { x, inv_std } => {
            // dx = inv_std * (dy - mean(dy) - y * mean(dy * y)), means
            // taken per channel over the batch rows.
            let c = inv_std.len();
            let rows = g.len() / c;
            let y = &cur.data;
            let mut mean_g = vec![0.0; c];
            let mut mean_gy = vec![0.0; c];
            for r in 0..rows {
                for ch in 0..c {
                    mean_g[ch] += g[r * c + ch];
                    mean_gy[ch] += g[r * c + ch] * y[r * c + ch];
                }
            }
            for ch in 0..c {
                mean_g[ch] /= rows as f64;
                mean_gy[ch] /= rows as f64;
            }
            let dx = &mut before[*x];
            for r in 0..rows {
                for ch in 0..c {
                    let t = r * c + ch;
                    dx[t] += inv_std[ch] * (g[t] - mean_g[ch] - y[t] * mean_gy[ch]);
                }
            }
        }
        Op::GatherRows { x, table } => {
            let c = nodes[*x].shape[1];
            let dx = &mut before[*x];
            for (slot, &row) in table.iter().enumerate() {
                let dst = row as usize * c;
                let src = slot * c;
                for t in 0..c {
                    dx[dst + t] += g[src + t];
                }
            }
        }
        Op::Reshape(x) => {
            let dx = &mut before[*x];
            for (pg, gv) in dx.iter_mut().zip(g) {
                *pg += gv;
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            ignore,
            probs,
            count,
        } => {
            let c = nodes[*logits].shape[1];
            let dx = &mut before[*logits];
            let gv = g[0] / *count as f64;
            for r in 0..labels.len() {
                if ignore[r] {
                    continue;
                }
                for ch in 0..c {
                    let delta = if ch == labels[r] { 1.0 } else { 0.0 };
                    dx[r * c + ch] += gv * (probs[r * c + ch] - delta);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_chain_backward() {
        // loss = sum((a + b) * a); d/da = 2a + b, d/db = a.
        let g = Graph::new();
        let a = g.leaf(vec![2], vec![2.0, -1.0]).unwrap();
        let b = g.leaf(vec![2], vec![3.0, 5.0]).unwrap();
        let s = g.add(a, b).unwrap();
        let p = g.mul(s, a).unwrap();
        let loss = g.reduce_sum(p, 0).unwrap();
        assert_eq!(g.data(loss), vec![2.0 * 5.0 + -1.0 * 4.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a), vec![7.0, 3.0]);
        assert_eq!(g.grad(b), vec![2.0, -1.0]);
    }

    #[test]
    fn repeated_parent_accumulates_both_paths() {
        let g = Graph::new();
        let x = g.leaf(vec![2], vec![3.0, -2.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.reduce_sum(y, 0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), vec![6.0, -4.0]);
    }

    #[test]
    fn matmul_known_product() {
        let g = Graph::new();
        let a = g.leaf(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = g
            .leaf(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0])
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), vec![2, 2]);
        assert_eq!(g.data(c), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dim() {
        let g = Graph::new();
        let a = g.leaf(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.leaf(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            g.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn concat_layout_both_axes() {
        let g = Graph::new();
        let a = g.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.leaf(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let rows = g.concat(1, &[a, b]).unwrap();
        assert_eq!(g.shape(rows), vec![2, 3]);
        assert_eq!(g.data(rows), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);

        let c = g.leaf(vec![1, 2], vec![7.0, 8.0]).unwrap();
        let stacked = g.concat(0, &[a, c]).unwrap();
        assert_eq!(g.shape(stacked), vec![3, 2]);
        assert_eq!(g.data(stacked), vec![1.0, 2.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn concat_backward_routes_to_parts() {
        let g = Graph::new();
        let a = g.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.leaf(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let cat = g.concat(1, &[a, b]).unwrap();
        let w = g
            .leaf(vec![2, 3], vec![1.0, 10.0, 100.0, 1000.0, 1e4, 1e5])
            .unwrap();
        let loss = g.reduce_sum(g.reduce_sum(g.mul(cat, w).unwrap(), 1).unwrap(), 0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a), vec![1.0, 10.0, 1000.0, 1e4]);
        assert_eq!(g.grad(b), vec![100.0, 1e5]);
    }

    #[test]
    fn reduce_max_ties_pick_first() {
        let g = Graph::new();
        let x = g.leaf(vec![1, 3], vec![2.0, 5.0, 5.0]).unwrap();
        let m = g.reduce_max(x, 1).unwrap();
        assert_eq!(g.data(m), vec![5.0]);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let g = Graph::new();
        let x = g.leaf(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let data = g.data(s);
        for row in data.chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for &p in &data[3..] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        // Shift invariance, also exercising the max-subtraction path.
        let y = g.leaf(vec![2, 3], vec![1001.0, 1002.0, 1003.0, 1e3, 1e3, 1e3]).unwrap();
        let s2 = g.softmax(y, 1).unwrap();
        for (a, b) in g.data(s2).iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_channels_standardizes_columns() {
        let g = Graph::new();
        let x = g
            .leaf(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0])
            .unwrap();
        let y = g.normalize_channels(x).unwrap();
        let data = g.data(y);
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| data[r * 2 + ch]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4, "variance {var}");
        }
    }

    #[test]
    fn gather_rows_layout_and_repeat_accumulation() {
        let g = Graph::new();
        let x = g.leaf(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let table = [2u32, 0, 0, 0];
        let out = g.gather_rows(x, &table, 2).unwrap();
        assert_eq!(g.shape(out), vec![2, 2, 2]);
        assert_eq!(g.data(out), vec![5.0, 6.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let loss = g
            .reduce_sum(g.reduce_sum(g.reduce_sum(out, 2).unwrap(), 1).unwrap(), 0)
            .unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), vec![3.0, 3.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let g = Graph::new();
        let x = g.leaf(vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert!(g.gather_rows(x, &[0, 2], 2).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_class_count() {
        let g = Graph::new();
        let logits = g.leaf(vec![4, 13], vec![0.0; 52]).unwrap();
        let loss = g.cross_entropy(logits, &[0, 5, 12, 7], None).unwrap();
        let expected = 2.564_949_357_461_536_7; // ln 13
        assert!((g.scalar_value(loss).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_mask_and_errors() {
        let g = Graph::new();
        let logits = g.leaf(vec![2, 3], vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        // Mask out the confident row; the uniform row alone gives ln 3.
        let loss = g
            .cross_entropy(logits, &[0, 1], Some(&[true, false]))
            .unwrap();
        assert!((g.scalar_value(loss).unwrap() - 3f64.ln()).abs() < 1e-12);

        let all_masked = g.cross_entropy(logits, &[0, 1], Some(&[true, true]));
        assert!(all_masked.is_err());
        let bad_label = g.cross_entropy(logits, &[0, 3], None);
        assert!(bad_label.is_err());
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let g = Graph::new();
        let x = g.leaf(vec![1], vec![2.0]).unwrap();
        let loss = g.reduce_sum(g.square(x), 0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), vec![4.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), vec![8.0]);
        g.zero_grads();
        assert_eq!(g.grad(x), vec![0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.leaf(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn param_binding_is_shared() {
        let mut store = ParamStore::new();
        store
            .insert(
                "lin.w",
                super::super::store::Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap(),
                true,
            )
            .unwrap();
        let g = Graph::new();
        let a = g.param(&store, "lin.w").unwrap();
        let b = g.param(&store, "lin.w").unwrap();
        assert_eq!(a, b);
        let loss = g.reduce_sum(g.add(a, b).unwrap(), 0).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads["lin.w"], vec![2.0, 2.0]);
    }
}
