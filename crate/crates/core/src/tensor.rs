//! Dense row-major tensors and a reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered from
//! [`Tensor`] values, every op appends a node, and [`Tape::backward`] walks the
//! nodes in reverse to produce [`Gradients`]. No strided views exist: slicing,
//! permuting and gathering all copy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense n-dimensional value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values but data has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also drops any stored gradient.
    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient. A no-op when the tensor does not
    /// require gradients.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        if !self.requires_grad {
            return Ok(());
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BroadcastTo(Var),
    Permute { a: Var, axes: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Dropout { a: Var, mask: Vec<f64> },
    Gather { a: Var, index: Vec<Vec<usize>> },
    Concat { parts: Vec<Var>, axis: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn acc_into(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which [`Tape::dropout`] is active, driven by a seeded RNG.
    pub fn with_dropout(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a tensor as a leaf; it participates in backward iff the
    /// tensor requires gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "constant of shape {:?} given {} values",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// `a[..., k] @ b[k, n] -> [..., n]`; a 2-D `a` is the plain matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}: inner dimensions disagree",
                sa, sb
            )));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k.max(1);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; rows * n];
        for i in 0..rows {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, rows, k, n }, rg))
    }

    /// Batched product `[g, m, k] @ [g, k, n] -> [g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension(format!(
                "bmm of {:?} by {:?}: batch or inner dimensions disagree",
                sa, sb
            )));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = ab[i * k + p];
                    for j in 0..n {
                        ob[i * n + j] += aip * bb[p * n + j];
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::Bmm { a, b, g, m, k, n }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), rg)
    }

    /// Repeats `a` over leading dimensions; `a`'s shape must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() > shape.len() || shape[shape.len() - sa.len()..] != sa[..] {
            return Err(Error::Dimension(format!(
                "cannot broadcast {:?} to {:?}",
                sa, shape
            )));
        }
        let src = &self.nodes[a.0].value;
        let reps = numel(shape) / src.len().max(1);
        let mut v = Vec::with_capacity(numel(shape));
        for _ in 0..reps {
            v.extend_from_slice(src);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), v, Op::BroadcastTo(a), rg))
    }

    /// `a + b` where `b` broadcasts over the leading dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(a, bb)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::Dimension(format!(
                "invalid permutation {:?} for shape {:?}",
                axes, sa
            )));
        }
        let (v, shape) = permute_data(&self.nodes[a.0].value, &sa, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(shape, v, Op::Permute { a, axes: axes.to_vec() }, rg))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::Dimension("transpose needs at least 2 dimensions".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(a),
                shape
            )));
        }
        let v = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), rg))
    }

    fn last_dim(&self, a: Var, what: &str) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d >= 1 => Ok(d),
            _ => Err(Error::Dimension(format!(
                "{what} needs a non-empty last dimension, got {:?}",
                self.shape(a)
            ))),
        }
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim(a, "softmax")?;
        let src = &self.nodes[a.0].value;
        let mut v = vec![0.0; src.len()];
        for (row, out) in src.chunks(d).zip(v.chunks_mut(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Softmax(a), rg))
    }

    /// Normalizes each row of the last dimension (population variance), then
    /// applies `gain` and `bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm over {d} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::Gelu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * x).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![v], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let v = self.nodes[a.0].value.iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1], vec![v], Op::Mean(a), rg))
    }

    /// Inverted dropout. Identity unless the tape was built with
    /// [`Tape::with_dropout`] and `rate > 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::Dropout { a, mask }, rg)
    }

    /// Picks rows along axis 1 of a `[b, n, d]` tensor, with a separate index
    /// list per batch entry. All lists must have the same length.
    pub fn gather_rows(&mut self, a: Var, index: &[Vec<usize>]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || index.len() != sa[0] {
            return Err(Error::Dimension(format!(
                "gather_rows on {:?} with {} index lists",
                sa,
                index.len()
            )));
        }
        let k = index.first().map_or(0, Vec::len);
        if index.iter().any(|ix| ix.len() != k || ix.iter().any(|&i| i >= sa[1])) {
            return Err(Error::Dimension(format!(
                "gather_rows index lists must share one length and stay below {}",
                sa[1]
            )));
        }
        let (n, d) = (sa[1], sa[2]);
        let src = &self.nodes[a.0].value;
        let mut v = Vec::with_capacity(sa[0] * k * d);
        for (b, ix) in index.iter().enumerate() {
            for &i in ix {
                let start = (b * n + i) * d;
                v.extend_from_slice(&src[start..start + d]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![sa[0], k, d],
            v,
            Op::Gather { a, index: index.to_vec() },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::Dimension(format!("concat axis {axis} for shape {:?}", s0)));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len()
                || s.iter().zip(&s0).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::Dimension(format!(
                    "concat along {axis} of {:?} and {:?}",
                    s0, s
                )));
            }
            total += s[axis];
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let mut v = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                v.extend_from_slice(&self.nodes[p.0].value[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(shape, v, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Mean squared error against a same-shaped tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.square(diff);
        self.mean(sq)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if rg(*a) {
                    let bv = val(*b);
                    let ga = acc_into(&mut grads[a.0], rows * k);
                    for i in 0..rows {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let gb = acc_into(&mut grads[b.0], k * n);
                    for i in 0..rows {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, g: batches, m, k, n } => {
                let (bs, m, k, n) = (*batches, *m, *k, *n);
                if rg(*a) {
                    let bv = val(*b);
                    let ga = acc_into(&mut grads[a.0], bs * m * k);
                    for gi in 0..bs {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[gi * m * n + i * n + j] * bv[gi * k * n + p * n + j];
                                }
                                ga[gi * m * k + i * k + p] += s;
                            }
                        }
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let gb = acc_into(&mut grads[b.0], bs * k * n);
                    for gi in 0..bs {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[gi * m * k + i * k + p];
                                for j in 0..n {
                                    gb[gi * k * n + p * n + j] += aip * g[gi * m * n + i * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let ga = acc_into(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let gb = acc_into(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = val(*b);
                    let ga = acc_into(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let gb = acc_into(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc_into(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::BroadcastTo(a) => {
                let len = val(*a).len();
                let ga = acc_into(&mut grads[a.0], len);
                for chunk in g.chunks(len.max(1)) {
                    ga.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (back, _) = permute_data(g, &node.shape, &inv);
                let ga = acc_into(&mut grads[a.0], g.len());
                ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
            }
            Op::Reshape(a) => {
                let ga = acc_into(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Softmax(a) => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                let ga = acc_into(&mut grads[a.0], g.len());
                for r in 0..g.len() / d {
                    let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        ga[r * d + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let rows = g.len() / d;
                let gv = val(*gain);
                if rg(*x) {
                    let gx = acc_into(&mut grads[x.0], g.len());
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
                if rg(*gain) {
                    let gg = acc_into(&mut grads[gain.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if rg(*bias) {
                    let gb = acc_into(&mut grads[bias.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                let ga = acc_into(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(av[i]);
                }
            }
            Op::Square(a) => {
                let av = val(*a);
                let ga = acc_into(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += 2.0 * av[i] * g[i];
                }
            }
            Op::Sum(a) => {
                let len = val(*a).len();
                let ga = acc_into(&mut grads[a.0], len);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let len = val(*a).len();
                let ga = acc_into(&mut grads[a.0], len);
                let s = g[0] / len as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
            Op::Dropout { a, mask } => {
                let ga = acc_into(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i];
                }
            }
            Op::Gather { a, index } => {
                let sa = &self.nodes[a.0].shape;
                let (n, d) = (sa[1], sa[2]);
                let ga = acc_into(&mut grads[a.0], sa[0] * n * d);
                let k = node.shape[1];
                for (b, ix) in index.iter().enumerate() {
                    for (slot, &i) in ix.iter().enumerate() {
                        let src = (b * k + slot) * d;
                        let dst = (b * n + i) * d;
                        for j in 0..d {
                            ga[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].shape[*axis] * inner;
                    if rg(*p) {
                        let gp = acc_into(&mut grads[p.0], outer * len);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
        }
    }
}
