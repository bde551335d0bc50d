//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its output and the
//! identifiers of its inputs. Because a node can only reference nodes that
//! already exist, the node list is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use super::kernels::{self, ConvGeometry};
use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias {
        x: Var,
        b: Var,
    },
    MulCols {
        x: Var,
        s: Var,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Silu(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Concat0(Var, Var),
    BroadcastRows(Var),
    BroadcastSpatial(Var),
    Upsample2x(Var),
    WeightedSquaredError {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf, copying `t`; participates in differentiation iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        value.requires_grad = t.requires_grad;
        let rg = t.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(
            Tensor::from_parts(t.shape().to_vec(), t.into_data()),
            Op::Leaf,
            false,
        )
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        let mut value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        value.requires_grad = true;
        self.push(value, Op::Leaf, true)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ops::conv_geometry(self.shape(x), self.shape(w), stride, pad)?;
        let c_out = self.shape(w)[0];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; c_out * geom.out_cells()];
        kernels::gemm(
            c_out,
            geom.patch_len(),
            geom.out_cells(),
            self.value(w).data(),
            false,
            &cols,
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[x, w]);
        // Patch columns are only needed for the weight gradient.
        let cols = if self.requires_grad(w) {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out),
            Op::Conv2d { x, w, geom, cols },
            rg,
        ))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * c).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape("add_row_bias", sx, sb));
        }
        let n = sx[1];
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let out = Tensor::from_parts(sx.to_vec(), data);
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRowBias { x, b }, rg))
    }

    /// `x[m, n] * s[n]`, scaling each column.
    pub fn mul_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 2 || ss != [sx[1]] {
            return Err(Error::shape("mul_cols", sx, ss));
        }
        let n = sx[1];
        let scale = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i % n])
            .collect();
        let out = Tensor::from_parts(sx.to_vec(), data);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulCols { x, s }, rg))
    }

    /// `x[C, ...] + b[C]`, one bias per leading-axis slice.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.is_empty() || sb != [sx[0]] {
            return Err(Error::shape("add_channel_bias", sx, sb));
        }
        let plane = self.value(x).numel() / sx[0];
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i / plane])
            .collect();
        let out = Tensor::from_parts(sx.to_vec(), data);
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddChannelBias { x, b }, rg))
    }

    /// SiLU activation `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|&x| x * sigmoid(x)).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|&x| x.max(0.0)).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let (outer, len, inner) = ops::axis_split(self.shape(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().to_vec()).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::shape("transpose", sa, &[2]));
        }
        let (m, n) = (sa[0], sa[1]);
        let out = Tensor::from_parts(vec![n, m], transpose2(self.value(a).data(), m, n));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || len == 0 || start + len > sx[1] {
            return Err(Error::shape("slice_cols", sx, &[start, len]));
        }
        let (m, n) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = self.shape(*first)[0];
        let mut total = 0;
        for p in parts {
            let sp = self.shape(*p);
            if sp.len() != 2 || sp[0] != m {
                return Err(Error::shape("concat_cols", self.shape(*first), sp));
            }
            total += sp[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                let n = self.shape(*p)[1];
                data.extend_from_slice(&self.value(*p).data()[r * n..(r + 1) * n]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Concatenate along the leading axis; trailing extents must agree.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat0", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat0(a, b), rg))
    }

    /// Repeat a vector `[n]` as every row of `[rows, n]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let sv = self.shape(v);
        if sv.len() != 1 {
            return Err(Error::shape("broadcast_rows", sv, &[rows]));
        }
        let n = sv[0];
        let src = self.value(v).data();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let rg = self.rg(&[v]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::BroadcastRows(v),
            rg,
        ))
    }

    /// Expand a vector `[d]` to `[d, h, w]` with each channel constant.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let sv = self.shape(v);
        if sv.len() != 1 {
            return Err(Error::shape("broadcast_spatial", sv, &[h, w]));
        }
        let d = sv[0];
        let data = self
            .value(v)
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, h * w))
            .collect();
        let rg = self.rg(&[v]);
        Ok(self.push(
            Tensor::from_parts(vec![d, h, w], data),
            Op::BroadcastSpatial(v),
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 3 {
            return Err(Error::shape("upsample2x", sa, &[3]));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let src = self.value(a).data();
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![c, 2 * h, 2 * w], data),
            Op::Upsample2x(a),
            rg,
        ))
    }

    /// `Σ wᵢ (predᵢ − targetᵢ)²` as a scalar; `target` and `weights` are constants.
    pub fn weighted_squared_error(
        &mut self,
        pred: Var,
        target: &Tensor,
        weights: &[f64],
    ) -> Result<Var> {
        let sp = self.shape(pred);
        if sp != target.shape() || weights.len() != target.numel() {
            return Err(Error::shape("weighted_squared_error", sp, target.shape()));
        }
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(weights)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedSquaredError {
                pred,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Propagate d(loss)/d(node) to every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if needs(*a) {
                    // dA = G · Bᵀ  (or G · B when B was used transposed)
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, vb.data(), !*trans_b, 0.0, &mut ga);
                    send(*a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *trans_b {
                        // B is [n, k]: dB = Gᵀ · A
                        kernels::gemm(n, m, k, g, true, va.data(), false, 0.0, &mut gb);
                    } else {
                        kernels::gemm(k, m, n, va.data(), true, g, false, 0.0, &mut gb);
                    }
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let c_out = node.value.shape()[0];
                let (p, cells) = (geom.patch_len(), geom.out_cells());
                if needs(*w) {
                    let mut gw = vec![0.0; c_out * p];
                    kernels::gemm(c_out, cells, p, g, false, cols, true, 0.0, &mut gw);
                    send(*w, gw);
                }
                if needs(*x) {
                    let mut gcols = vec![0.0; p * cells];
                    kernels::gemm(
                        p,
                        c_out,
                        cells,
                        self.value(*w).data(),
                        true,
                        g,
                        false,
                        0.0,
                        &mut gcols,
                    );
                    send(*x, kernels::col2im(&gcols, geom));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::AddRowBias { x, b } => {
                let n = self.shape(*b)[0];
                send(*x, g.to_vec());
                if needs(*b) {
                    let mut gb = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                    send(*b, gb);
                }
            }
            Op::MulCols { x, s } => {
                let n = self.shape(*s)[0];
                let (vx, vs) = (self.value(*x).data(), self.value(*s).data());
                if needs(*x) {
                    send(
                        *x,
                        g.iter().enumerate().map(|(i, v)| v * vs[i % n]).collect(),
                    );
                }
                if needs(*s) {
                    let mut gs = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        gs[i % n] += v * vx[i];
                    }
                    send(*s, gs);
                }
            }
            Op::AddChannelBias { x, b } => {
                let c = self.shape(*b)[0];
                let plane = g.len() / c;
                send(*x, g.to_vec());
                if needs(*b) {
                    send(*b, g.chunks(plane).map(|ch| ch.iter().sum()).collect());
                }
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                send(
                    *x,
                    kernels::softmax_axis_backward(node.value.data(), g, *outer, *len, *inner),
                );
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0]; n]);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Transpose(a) => {
                let s = node.value.shape();
                send(*a, transpose2(g, s[0], s[1]));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[1];
                    if needs(*p) {
                        let mut gp = Vec::with_capacity(m * n);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + n]);
                        }
                        send(*p, gp);
                    }
                    offset += n;
                }
            }
            Op::Concat0(a, b) => {
                let na = self.value(*a).numel();
                send(*a, g[..na].to_vec());
                send(*b, g[na..].to_vec());
            }
            Op::BroadcastRows(v) => {
                let n = self.shape(*v)[0];
                let mut gv = vec![0.0; n];
                for row in g.chunks(n) {
                    gv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                send(*v, gv);
            }
            Op::BroadcastSpatial(v) => {
                let d = self.shape(*v)[0];
                let plane = g.len() / d;
                send(*v, g.chunks(plane).map(|ch| ch.iter().sum()).collect());
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut ga = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga[(ch * h + y / 2) * w + x / 2] += g[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                send(*a, ga);
            }
            Op::WeightedSquaredError {
                pred,
                target,
                weights,
            } => {
                let vp = self.value(*pred).data();
                send(
                    *pred,
                    vp.iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((p, t), w)| g[0] * 2.0 * w * (p - t))
                        .collect(),
                );
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose2(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 7.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let x = tape.param(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
