//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` simply walks it in reverse.

use crate::error::{Result, TensorError};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Gelu(Var),
    Exp(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Minimum(Var, Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
        scale: f32,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A single-use computation graph.
///
/// Forward values are immutable once recorded; `backward` only writes the
/// gradient buffers of tracked nodes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_lanes(data: &mut [f32], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| data[at(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for k in 0..n {
                let e = ((data[at(k)] - max) as f64).exp();
                data[at(k)] = e as f32;
                sum += e;
            }
            for k in 0..n {
                data[at(k)] = (data[at(k)] as f64 / sum) as f32;
            }
        }
    }
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (x, &bv) in acc.iter_mut().zip(brow) {
                *x += aip * bv as f64;
            }
        }
        for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *x as f32;
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`
fn matmul_bt_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let s: f64 = arow.iter().zip(brow).map(|(x, y)| *x as f64 * *y as f64).sum();
            out[i * n + j] = s as f32;
        }
    }
    out
}

/// `a[k,m]ᵀ · b[k,n]`
fn matmul_at_raw(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (x, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *x += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|x| x as f32).collect()
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn check_rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_rank2("matmul", self.shape(a))?;
        let (k2, n) = check_rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_map(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_map("minimum", a, b, f32::min)?;
        Ok(self.push(value, Op::Minimum(a, b), &[a, b]))
    }

    fn row_shapes(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let xs = self.shape(x);
        let rs = self.shape(row);
        match (xs.last(), rs) {
            (Some(&n), [m]) if n == *m => Ok(n),
            _ => Err(TensorError::Shape {
                op,
                lhs: xs.to_vec(),
                rhs: rs.to_vec(),
            }),
        }
    }

    /// `x[..., n] + b[n]` broadcast over leading axes.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.row_shapes("add_row", x, b)?;
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[..., n] * w[n]` broadcast over leading axes.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let n = self.row_shapes("mul_row", x, w)?;
        let wd = self.data(w);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * wd[i % n])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::MulRow(x, w), &[x, w]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(value, Op::Offset(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| gelu_scalar(v as f64) as f32)
            .collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.exp()).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let data = self.data(x).iter().map(|v| v.max(lo).min(hi)).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(value, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(x), axis)?;
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut value = self.value(x).clone();
        value.zero_grad();
        softmax_lanes(value.data_mut(), outer, n, inner);
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = match shape.last() {
            Some(&d) => d,
            None => {
                return Err(TensorError::Rank {
                    op: "layernorm",
                    expected: 1,
                    shape,
                })
            }
        };
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "layernorm" });
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layernorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / d;
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut xhat = vec![0.0f32; rows * d];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    fn reduce(&mut self, op: &'static str, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = match axis {
            None => {
                let n = self.value(x).numel();
                if n == 0 {
                    return Err(TensorError::EmptyAxis { op });
                }
                let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
                Tensor::scalar(if mean { (s / n as f64) as f32 } else { s as f32 })
            }
            Some(axis) => {
                check_axis(op, &shape, axis)?;
                let (outer, n, inner) = split_axis(&shape, axis);
                if n == 0 {
                    return Err(TensorError::EmptyAxis { op });
                }
                let xd = self.data(x);
                let mut out = vec![0.0f32; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let s: f64 = (0..n).map(|k| xd[o * n * inner + k * inner + i] as f64).sum();
                        out[o * inner + i] = if mean { (s / n as f64) as f32 } else { s as f32 };
                    }
                }
                let mut out_shape = shape.clone();
                out_shape.remove(axis);
                Tensor::new(&out_shape, out)?
            }
        };
        let node_op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(value, node_op, &[x]))
    }

    /// Sum over `axis`, or over everything when `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("sum", x, axis, false)
    }

    /// Mean over `axis`, or over everything when `None`.
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("mean", x, axis, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = check_rank2("transpose", self.shape(x))?;
        let xd = self.data(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(TensorError::EmptyAxis { op: "concat" }),
        };
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let chunk = n * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        if start + len > n {
            return Err(TensorError::OutOfBounds {
                op: "narrow",
                start,
                end: start + len,
                len: n,
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√d + mask)·v`.
    ///
    /// `mask`, when given, is an additive `[nq, nk]` constant (use a large
    /// negative value to block a position).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&[f32]>) -> Result<Var> {
        let (nq, d) = check_rank2("attention", self.shape(q))?;
        let (nk, dk) = check_rank2("attention", self.shape(k))?;
        let (nv, dv) = check_rank2("attention", self.shape(v))?;
        if d != dk {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if nk != nv {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: self.shape(k).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        if let Some(m) = mask {
            if m.len() != nq * nk {
                return Err(TensorError::Shape {
                    op: "attention mask",
                    lhs: vec![nq, nk],
                    rhs: vec![m.len()],
                });
            }
        }
        let scale = 1.0 / (d as f32).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0f32; nq * nk];
        let mut out = vec![0.0f32; nq * dv];
        let mut row = vec![0.0f64; nk];
        let mut acc = vec![0.0f64; dv];
        for i in 0..nq {
            let qi = &qd[i * d..(i + 1) * d];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &kd[j * d..(j + 1) * d];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| *a as f64 * *b as f64).sum();
                *s = dot * scale as f64 + mask.map_or(0.0, |m| m[i * nk + j] as f64);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, s) in row.iter_mut().enumerate() {
                *s /= total;
                probs[i * nk + j] = *s as f32;
                for (a, &x) in acc.iter_mut().zip(&vd[j * dv..(j + 1) * dv]) {
                    *a += *s * x as f64;
                }
            }
            for (o, a) in out[i * dv..(i + 1) * dv].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        let value = Tensor::new(&[nq, dv], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
            &[q, k, v],
        ))
    }

    /// Populates gradients of every tracked node with d`loss`/d`node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            self.nodes[id].value.set_grad(Some(g));
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(*b)[1];
                if tracked(*a) {
                    accumulate(grads, *a, matmul_bt_raw(g, self.data(*b), m, n, k));
                }
                if tracked(*b) {
                    accumulate(grads, *b, matmul_at_raw(self.data(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let gb = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, gb);
                }
                if tracked(*b) {
                    let ga = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, ga);
                }
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if tracked(*a) {
                    let ga = (0..g.len())
                        .map(|i| if ad[i] <= bd[i] { g[i] } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, ga);
                }
                if tracked(*b) {
                    let gb = (0..g.len())
                        .map(|i| if ad[i] <= bd[i] { 0.0 } else { g[i] })
                        .collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(x, b) => {
                if tracked(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if tracked(*b) {
                    let n = self.shape(*b)[0];
                    let mut gb = vec![0.0f64; n];
                    g.iter().enumerate().for_each(|(i, v)| gb[i % n] += *v as f64);
                    accumulate(grads, *b, gb.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::MulRow(x, w) => {
                let n = self.shape(*w)[0];
                let wd = self.data(*w);
                if tracked(*x) {
                    let gx = g.iter().enumerate().map(|(i, v)| v * wd[i % n]).collect();
                    accumulate(grads, *x, gx);
                }
                if tracked(*w) {
                    let xd = self.data(*x);
                    let mut gw = vec![0.0f64; n];
                    g.iter()
                        .enumerate()
                        .for_each(|(i, v)| gw[i % n] += *v as f64 * xd[i] as f64);
                    accumulate(grads, *w, gw.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Scale(x, s) => {
                if tracked(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * s).collect());
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if tracked(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Gelu(x) => {
                if tracked(*x) {
                    let gx = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(gv, &xv)| (*gv as f64 * gelu_grad_scalar(xv as f64)) as f32)
                        .collect();
                    accumulate(grads, *x, gx);
                }
            }
            Op::Exp(x) => {
                if tracked(*x) {
                    accumulate(grads, *x, g.iter().zip(out).map(|(a, b)| a * b).collect());
                }
            }
            Op::Clamp { x, lo, hi } => {
                if tracked(*x) {
                    let gx = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(gv, xv)| if *xv >= *lo && *xv <= *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, gx);
                }
            }
            Op::Softmax { x, axis } => {
                if tracked(*x) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let mut gx = vec![0.0f32; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] as f64 * out[at(k)] as f64).sum();
                            for k in 0..n {
                                gx[at(k)] = (out[at(k)] as f64 * (g[at(k)] as f64 - dot)) as f32;
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = xhat.len() / d;
                let gd = self.data(*gain);
                if tracked(*x) {
                    let mut gx = vec![0.0f32; g.len()];
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let dh: Vec<f64> = g[span.clone()]
                            .iter()
                            .zip(gd)
                            .map(|(a, b)| *a as f64 * *b as f64)
                            .collect();
                        let xh = &xhat[span.clone()];
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhx =
                            dh.iter().zip(xh).map(|(a, b)| a * *b as f64).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = (rstd[r] as f64
                                * (dh[j] - mean_dh - xh[j] as f64 * mean_dhx))
                                as f32;
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if tracked(*gain) {
                    let mut gg = vec![0.0f64; d];
                    for (i, gv) in g.iter().enumerate() {
                        gg[i % d] += *gv as f64 * xhat[i] as f64;
                    }
                    accumulate(grads, *gain, gg.into_iter().map(|v| v as f32).collect());
                }
                if tracked(*bias) {
                    let mut gb = vec![0.0f64; d];
                    g.iter().enumerate().for_each(|(i, v)| gb[i % d] += *v as f64);
                    accumulate(grads, *bias, gb.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                if !tracked(*x) {
                    return;
                }
                let is_mean = matches!(node.op, Op::Mean { .. });
                let shape = self.shape(*x);
                let numel = self.value(*x).numel();
                let gx = match axis {
                    None => {
                        let v = if is_mean { g[0] / numel as f32 } else { g[0] };
                        vec![v; numel]
                    }
                    Some(axis) => {
                        let (outer, n, inner) = split_axis(shape, *axis);
                        let div = if is_mean { n as f32 } else { 1.0 };
                        let mut gx = vec![0.0f32; numel];
                        for o in 0..outer {
                            for k in 0..n {
                                for i in 0..inner {
                                    gx[o * n * inner + k * inner + i] = g[o * inner + i] / div;
                                }
                            }
                        }
                        gx
                    }
                };
                accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => {
                if tracked(*x) {
                    let s = self.shape(*x);
                    let (r, c) = (s[0], s[1]);
                    let mut gx = vec![0.0f32; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if tracked(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + n * inner]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                if tracked(*x) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![0.0f32; outer * n * inner];
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => {
                let (nq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let nk = self.shape(*k)[0];
                let dv = self.shape(*v)[1];
                if tracked(*v) {
                    accumulate(grads, *v, matmul_at_raw(probs, g, nq, nk, dv));
                }
                if tracked(*q) || tracked(*k) {
                    let dp = matmul_bt_raw(g, self.data(*v), nq, dv, nk);
                    let mut ds = vec![0.0f32; nq * nk];
                    for i in 0..nq {
                        let row = i * nk..(i + 1) * nk;
                        let dot: f64 = dp[row.clone()]
                            .iter()
                            .zip(&probs[row.clone()])
                            .map(|(a, b)| *a as f64 * *b as f64)
                            .sum();
                        for j in row {
                            ds[j] = (probs[j] as f64 * (dp[j] as f64 - dot)) as f32 * scale;
                        }
                    }
                    if tracked(*q) {
                        accumulate(grads, *q, matmul_raw(&ds, self.data(*k), nq, nk, d));
                    }
                    if tracked(*k) {
                        accumulate(grads, *k, matmul_at_raw(&ds, self.data(*q), nq, nk, d));
                    }
                }
            }
        }
    }
}
