//! Eager reverse-mode differentiation tape.
//!
//! Every operation evaluates immediately and appends a node holding its output
//! and the ids of its inputs. Nodes are therefore stored in topological order
//! and [`Graph::backward`] is a single reverse sweep over the node list.
//!
//! There is no implicit broadcasting. Shapes have to agree exactly; a vector
//! is spread over a new axis with [`Graph::replicate_axis`].

use crate::error::{Error, Result};
use crate::tensor::{split_at_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Unary(Var, Activation),
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        groups: Vec<usize>,
        norms: Vec<f64>,
        eps: f64,
    },
    PowerNormalize(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Replicate {
        x: Var,
        axis: usize,
        count: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherColumns {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::from_parts(shape.clone(), vec![0.0; shape.iter().product()]),
        }
    }

    pub fn is_connected(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Matrix product. Accepts `[m, k] x [k, n]` or a batched `[B, m, k] x [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` where `b` is stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `aᵀ · b` where `a` is stored as `[k, m]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true, false)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb, trans_a, trans_b)
            .ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let MatDims { batch, m, k, n } = dims;
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    trans_a,
                    &db[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            needs,
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 3 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let out = transpose_last2(self.value(x).data(), &shape);
        let mut out_shape = shape.clone();
        let r = shape.len();
        out_shape.swap(r - 2, r - 1);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", self.shape(x), shape))?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip("add", a, b, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(data, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(data, Op::Sub(a, b), needs))
    }

    /// Element-wise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip("hadamard", a, b, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(data, Op::Hadamard(a, b), needs))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn unary_map(&mut self, x: Var, f: Activation) -> Var {
        let value = self.value(x).map(|v| f.apply(v));
        let needs = self.needs(&[x]);
        self.push(value, Op::Unary(x, f), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary_map(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_map(x, Activation::Sigmoid)
    }

    /// Softmax along `axis`, stabilised by subtracting the per-line maximum.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax_axis", axis, shape.len())?;
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * extent * inner + j * inner + i;
                let max = (0..extent)
                    .map(|j| src[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..extent {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..extent {
                    out[at(j)] /= total;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, axis },
            needs,
        ))
    }

    /// Divides by the L2 norm taken jointly over `axes`, floored at `eps`.
    pub fn l2_normalize_axes(&mut self, x: Var, axes: &[usize], eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        for &a in axes {
            check_axis("l2_normalize_axes", a, shape.len())?;
        }
        let (groups, n_groups) = group_index(&shape, axes);
        let src = self.value(x).data();
        let mut sq = vec![0.0; n_groups];
        for (v, &g) in src.iter().zip(&groups) {
            sq[g] += v * v;
        }
        let norms: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();
        let out = src
            .iter()
            .zip(&groups)
            .map(|(v, &g)| v / norms[g].max(eps))
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize {
                x,
                groups,
                norms,
                eps,
            },
            needs,
        ))
    }

    /// Element-wise unsigned cube root `|x|^(1/3)`.
    pub fn power_normalize(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs().cbrt());
        let needs = self.needs(&[x]);
        self.push(value, Op::PowerNormalize(x), needs)
    }

    /// Arithmetic mean along `axis`; the axis is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean_axis", axis, shape.len())?;
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..extent {
                let row = &src[(o * extent + j) * inner..(o * extent + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let scale = extent as f64;
        out.iter_mut().for_each(|v| *v /= scale);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis { x, axis },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Inserts a new axis of extent `count` at position `axis`, copying the input.
    pub fn replicate_axis(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::Axis {
                op: "replicate_axis",
                axis,
                rank: shape.len(),
            });
        }
        if count == 0 {
            return Err(Error::InvalidTensor("replicate_axis with count 0".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..count {
                out.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, count);
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Replicate { x, axis, count },
            needs,
        ))
    }

    pub fn concat_axis(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero parts".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat_axis", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat_axis", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let extent = self.shape(p)[axis];
                let chunk = extent * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Row `i` of the result is column `ids[i]` of `table` (`[rows, columns]`).
    ///
    /// This is a one-hot product `table · onehot(ids)` realised as a gather.
    pub fn gather_columns(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_columns", &shape, &[]));
        }
        if ids.is_empty() {
            return Err(Error::InvalidTensor("gather_columns with no ids".into()));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= cols) {
            return Err(Error::Vocabulary {
                id: bad,
                size: cols,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * rows);
        for &id in ids {
            out.extend((0..rows).map(|r| src[r * cols + id]));
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), rows], out),
            Op::GatherColumns {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed with log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                &shape,
                &[targets.len()],
            ));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Label {
                label: bad,
                classes,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[t];
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul_nt(x, w)?;
        let rows = self.shape(xw)[0];
        let bias = self.replicate_axis(b, 0, rows)?;
        self.add(xw, bias)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 || loss_shape.len() > 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &upstream, &mut grads);
            grads[id] = Some(upstream);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let MatDims { batch, m, k, n } =
                    matmul_dims(sa, sb, *trans_a, *trans_b).expect("validated in forward");
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    let ga = self.grad_slot(grads, *a);
                    for bi in 0..batch {
                        let dc = &dy[bi * m * n..(bi + 1) * m * n];
                        let bb = &db[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_a {
                            // dA = op(B) · dCᵀ, stored [k, m]
                            gemm(k, n, m, bb, *trans_b, dc, true, 1.0, out);
                        } else {
                            // dA = dC · op(B)ᵀ
                            gemm(m, n, k, dc, false, bb, !*trans_b, 1.0, out);
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_slot(grads, *b);
                    for bi in 0..batch {
                        let dc = &dy[bi * m * n..(bi + 1) * m * n];
                        let aa = &da[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB = dCᵀ · op(A), stored [n, k]
                            gemm(n, m, k, dc, true, aa, *trans_a, 1.0, out);
                        } else {
                            // dB = op(A)ᵀ · dC
                            gemm(k, m, n, aa, !*trans_a, dc, false, 1.0, out);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let back = transpose_last2(dy, node.value.shape());
                self.accumulate(grads, *x, &back);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, dy),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy);
                self.accumulate(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy);
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_slot(grads, *b);
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    let ga = self.grad_slot(grads, *a);
                    for ((g, d), w) in ga.iter_mut().zip(dy).zip(vb) {
                        *g += d * w;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_slot(grads, *b);
                    for ((g, d), w) in gb.iter_mut().zip(dy).zip(va) {
                        *g += d * w;
                    }
                }
            }
            Op::Unary(x, f) => {
                if self.nodes[x.0].needs_grad {
                    let gx = self.grad_slot(grads, *x);
                    for ((g, d), out) in gx.iter_mut().zip(dy).zip(y) {
                        *g += d * match f {
                            Activation::Tanh => 1.0 - out * out,
                            Activation::Sigmoid => out * (1.0 - out),
                        };
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.nodes[x.0].needs_grad {
                    let (outer, extent, inner) = split_at_axis(node.value.shape(), *axis);
                    let gx = self.grad_slot(grads, *x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * extent * inner + j * inner + i;
                            let dot: f64 = (0..extent).map(|j| dy[at(j)] * y[at(j)]).sum();
                            for j in 0..extent {
                                gx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize {
                x,
                groups,
                norms,
                eps,
            } => {
                if self.nodes[x.0].needs_grad {
                    let mut dots = vec![0.0; norms.len()];
                    for ((d, out), &g) in dy.iter().zip(y).zip(groups) {
                        dots[g] += d * out;
                    }
                    let gx = self.grad_slot(grads, *x);
                    for (((gv, d), out), &g) in gx.iter_mut().zip(dy).zip(y).zip(groups) {
                        let n = norms[g];
                        *gv += if n >= *eps {
                            (d - out * dots[g]) / n
                        } else {
                            d / eps
                        };
                    }
                }
            }
            Op::PowerNormalize(x) => {
                if self.nodes[x.0].needs_grad {
                    let src = self.value(*x).data();
                    let gx = self.grad_slot(grads, *x);
                    for (((g, d), out), v) in gx.iter_mut().zip(dy).zip(y).zip(src) {
                        if *out > 0.0 {
                            *g += d * v.signum() / (3.0 * out * out);
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.nodes[x.0].needs_grad {
                    let (outer, extent, inner) = split_at_axis(self.shape(*x), *axis);
                    let scale = 1.0 / extent as f64;
                    let gx = self.grad_slot(grads, *x);
                    for o in 0..outer {
                        let src = &dy[o * inner..(o + 1) * inner];
                        for j in 0..extent {
                            let dst =
                                &mut gx[(o * extent + j) * inner..(o * extent + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(g, d)| *g += d * scale);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.nodes[x.0].needs_grad {
                    let gx = self.grad_slot(grads, *x);
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Replicate { x, axis, count } => {
                if self.nodes[x.0].needs_grad {
                    let shape = self.shape(*x);
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis..].iter().product();
                    let gx = self.grad_slot(grads, *x);
                    for o in 0..outer {
                        let dst = &mut gx[o * inner..(o + 1) * inner];
                        for r in 0..*count {
                            let src = &dy[(o * count + r) * inner..(o * count + r + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut start = 0;
                for &p in parts {
                    let extent = self.shape(p)[*axis];
                    if self.nodes[p.0].needs_grad {
                        let gp = self.grad_slot(grads, p);
                        for o in 0..outer {
                            let src_at = (o * total + start) * inner;
                            let dst = &mut gp[o * extent * inner..(o + 1) * extent * inner];
                            dst.iter_mut()
                                .zip(&dy[src_at..src_at + extent * inner])
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                    start += extent;
                }
            }
            Op::GatherColumns { table, ids } => {
                if self.nodes[table.0].needs_grad {
                    let cols = self.shape(*table)[1];
                    let rows = self.shape(*table)[0];
                    let gt = self.grad_slot(grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        for r in 0..rows {
                            gt[r * cols + id] += dy[i * rows + r];
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.nodes[logits.0].needs_grad {
                    let classes = self.shape(*logits)[1];
                    let scale = dy[0] / targets.len() as f64;
                    let gl = self.grad_slot(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = self.grad_slot(grads, v);
        slot.iter_mut().zip(contribution).for_each(|(g, c)| *g += c);
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(sa: &[usize], sb: &[usize], trans_a: bool, trans_b: bool) -> Option<MatDims> {
    let (batch, ra, rb) = match (sa.len(), sb.len()) {
        (2, 2) => (1, sa, sb),
        (3, 3) if sa[0] == sb[0] => (sa[0], &sa[1..], &sb[1..]),
        _ => return None,
    };
    let (m, k) = if trans_a {
        (ra[1], ra[0])
    } else {
        (ra[0], ra[1])
    };
    let (kb, n) = if trans_b {
        (rb[1], rb[0])
    } else {
        (rb[0], rb[1])
    };
    (k == kb).then_some(MatDims { batch, m, k, n })
}

/// `c = beta·c + op(a)·op(b)` with `op(a)` of size `m × k` and `op(b)` of size `k × n`.
///
/// A transposed operand is stored in its untransposed layout (`k × m` for `a`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the slice lengths were checked above and every stride pair
    // addresses exactly the m×k, k×n and m×n elements of its buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transpose_last2(src: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = src.len() / (rows * cols);
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = src[base + i * cols + j];
            }
        }
    }
    out
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis < rank {
        Ok(())
    } else {
        Err(Error::Axis { op, axis, rank })
    }
}

/// Assigns every element a group id: elements sharing all coordinates outside
/// `axes` share a group.
fn group_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let n_groups: usize = kept.iter().map(|&a| shape[a]).product();
    let numel: usize = shape.iter().product();
    let mut index = vec![0usize; shape.len()];
    let mut groups = Vec::with_capacity(numel);
    for _ in 0..numel {
        groups.push(kept.iter().fold(0, |acc, &a| acc * shape[a] + index[a]));
        for d in (0..shape.len()).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    (groups, n_groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let col = g.constant(t(&[2, 1], &[3., 4.]));
        let out = g.matmul(eye, col).unwrap();
        assert_eq!(g.value(out).data(), &[3., 4.]);

        let row = g.constant(t(&[1, 2], &[1., 2.]));
        let dot = g.matmul(row, col).unwrap();
        assert_eq!(g.value(dot).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(g.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[2, 3], &[0.5, -1., 2., 3., 0., 1.]));
        let bt = g.transpose(b).unwrap();
        let at = g.transpose(a).unwrap();
        let direct = g.matmul(a, bt).unwrap();
        let fused = g.matmul_nt(a, b).unwrap();
        assert_eq!(g.value(direct), g.value(fused));
        let direct = g.matmul(at, b).unwrap();
        let fused = g.matmul_tn(a, b).unwrap();
        assert_eq!(g.value(direct), g.value(fused));
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1]));
        let th = g.tanh(z);
        let sg = g.sigmoid(z);
        assert_eq!(g.value(th).item(), 0.0);
        assert_eq!(g.value(sg).item(), 0.5);
    }

    #[test]
    fn hadamard_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1., 2., 3.]));
        let b = g.constant(t(&[3], &[4., 5., 6.]));
        let ones = g.constant(Tensor::ones(&[3]));
        let p = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[4., 10., 18.]);
        let id = g.hadamard(a, ones).unwrap();
        assert_eq!(g.value(id), g.value(a));
        let wrong = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.hadamard(a, wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax_axis(zeros, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(t(&[2], &[1000., 1000.]));
        let s = g.softmax_axis(big, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        assert!(g.softmax_axis(big, 1).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0., 0., 1., 3.]));
        let s = g.softmax_axis(x, 0).unwrap();
        let v = g.value(s);
        assert!((v.at(&[0, 0]) + v.at(&[1, 0]) - 1.0).abs() < 1e-15);
        assert!((v.at(&[0, 0]) - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3., 4.]));
        let n = g.l2_normalize_axes(x, &[0], 1e-12).unwrap();
        assert!(g.value(n).max_abs_diff(&t(&[2], &[0.6, 0.8])) < 1e-15);
        let z = g.constant(Tensor::zeros(&[3]));
        let n = g.l2_normalize_axes(z, &[0], 1e-12).unwrap();
        assert_eq!(g.value(n).data(), &[0., 0., 0.]);
    }

    #[test]
    fn l2_normalize_per_row() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[3., 4., 0., 2.]));
        let n = g.l2_normalize_axes(x, &[1], 1e-12).unwrap();
        assert!(g.value(n).max_abs_diff(&t(&[2, 2], &[0.6, 0.8, 0., 1.])) < 1e-15);
    }

    #[test]
    fn mean_and_replicate() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1., 3., 5., 7.]));
        let m = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[2., 6.]);
        assert_eq!(g.shape(m), &[2]);

        let five = g.constant(t(&[1], &[5.]));
        let r = g.replicate_axis(five, 0, 2).unwrap();
        assert_eq!(g.shape(r), &[2, 1]);
        assert_eq!(g.value(r).data(), &[5., 5.]);

        let single = g.constant(t(&[1, 3], &[1., 2., 3.]));
        let m = g.mean_axis(single, 0).unwrap();
        assert_eq!(g.value(m).data(), &[1., 2., 3.]);
    }

    #[test]
    fn replicate_middle_axis_layout() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let r = g.replicate_axis(x, 1, 3).unwrap();
        assert_eq!(g.shape(r), &[2, 3, 2]);
        assert_eq!(
            g.value(r).data(),
            &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]
        );
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1], &[1.]));
        let b = g.constant(t(&[1, 1], &[2.]));
        let c = g.concat_axis(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[1., 2.]);
        let single = g.concat_axis(&[a], 0).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let wide = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.concat_axis(&[a, wide], 0).is_err());
        let side = g.concat_axis(&[a, wide], 1).unwrap();
        assert_eq!(g.shape(side), &[1, 3]);
    }

    #[test]
    fn gather_rejects_out_of_vocabulary() {
        let mut g = Graph::new();
        let table = g.parameter(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.gather_columns(table, &[3]),
            Err(Error::Vocabulary { id: 3, size: 3 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut g = Graph::new();
        let logits = g.parameter(Tensor::zeros(&[1, 5]));
        let loss = g.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(loss).item() - 5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[5]),
            Err(Error::Label {
                label: 5,
                classes: 5
            })
        ));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::new();
        let a = g.parameter(t(&[3], &[1., -2., 0.5]));
        let s = g.sum(a);
        assert_eq!(g.backward(s).unwrap().wrt(a).data(), &[1., 1., 1.]);

        let sq = g.hadamard(a, a).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().wrt(a).data(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.parameter(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.parameter(Tensor::ones(&[2]));
        let unused = g.parameter(Tensor::ones(&[3]));
        let s = g.sum(used);
        let grads = g.backward(s).unwrap();
        assert!(!grads.is_connected(unused));
        assert_eq!(grads.wrt(unused).data(), &[0., 0., 0.]);
    }

    #[test]
    fn group_index_over_middle_axis() {
        let (groups, n) = group_index(&[2, 3, 2], &[1]);
        assert_eq!(n, 4);
        assert_eq!(groups, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }
}
