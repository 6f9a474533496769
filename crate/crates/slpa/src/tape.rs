//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every primitive records a node holding its output value; `backward`
//! replays the list in reverse, accumulating adjoints into the gradient
//! buffers of `requires_grad` leaves. Evaluation is strictly sequential so
//! identical inputs produce bit-identical outputs.

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Scale(Var, F),
    Shift(Var, F),
    Matmul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    /// Softmax over the last axis.
    Softmax(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    ConvT1d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
}

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Vec<F>,
    needs_grad: bool,
    /// Accumulated d loss / d leaf; only populated for `requires_grad` leaves.
    grad: Option<Vec<F>>,
}

/// The computation record: an append-only list of primitive applications.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

fn natural_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = s;
        s *= shape[i];
    }
    strides
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast shapes {a:?} and {b:?}"
            )));
        }
    }
    Ok(out)
}

/// Per-output-dimension strides of `shape` aligned to an output of rank
/// `out.len()`, with zero stride on broadcast dimensions.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nat = natural_strides(shape);
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    for i in offset..out.len() {
        if shape[i - offset] != 1 {
            strides[i] = nat[i - offset];
        }
    }
    strides
}

/// Visit every element of `out_shape`, yielding the flat output index and
/// the flat offsets into two broadcast inputs.
fn zip2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for flat in 0..n {
        f(flat, off_a, off_b);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone()).unwrap()
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        self.push(
            Op::Leaf { requires_grad },
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.push(Op::Leaf { requires_grad: false }, vec![], vec![v], false)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let sa = aligned_strides(self.shape(a), &out_shape);
        let sb = aligned_strides(self.shape(b), &out_shape);
        let mut out = vec![F::zero(); numel(&out_shape)];
        {
            let va = &self.nodes[a.0].value;
            let vb = &self.nodes[b.0].value;
            zip2(&out_shape, &sa, &sb, |flat, oa, ob| {
                let (x, y) = (va[oa], vb[ob]);
                out[flat] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                };
            });
        }
        let needs = self.needs(a) || self.needs(b);
        let op = match kind {
            BinKind::Add => Op::Add(a, b),
            BinKind::Sub => Op::Sub(a, b),
            BinKind::Mul => Op::Mul(a, b),
            BinKind::Div => Op::Div(a, b),
        };
        Ok(self.push(op, out_shape, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(op, shape, value, needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |v| -v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.ln(), Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.sqrt(), Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |v| v + c, Op::Shift(a, c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        {
            let va = &self.nodes[a.0].value;
            let vb = &self.nodes[b.0].value;
            for i in 0..m {
                for p in 0..k {
                    let av = va[i * k + p];
                    if av == F::zero() {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] = out[i * n + j] + av * vb[p * n + j];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose of rank-{} tensor", sa.len())));
        }
        let (r, c) = (sa[0], sa[1]);
        let mut out = vec![F::zero(); r * c];
        {
            let va = &self.nodes[a.0].value;
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = va[i * c + j];
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose(a), vec![c, r], out, needs))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].value.iter().copied().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), vec![], vec![s], needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::from_f64(self.nodes[a.0].value.len() as f64);
        let s: F = self.nodes[a.0].value.iter().copied().sum();
        let needs = self.needs(a);
        self.push(Op::MeanAll(a), vec![], vec![s / n], needs)
    }

    fn axis_reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {sa:?}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let len = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[axis] = 1;
        let mut out = vec![F::zero(); outer * inner];
        {
            let va = &self.nodes[a.0].value;
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + va[(o * len + l) * inner + i];
                    }
                }
            }
        }
        if mean {
            let d = F::from_f64(len as f64);
            for v in &mut out {
                *v = *v / d;
            }
        }
        let needs = self.needs(a);
        let op = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        Ok(self.push(op, out_shape, out, needs))
    }

    /// Sum along `axis`, keeping the axis with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.axis_reduce(a, axis, false)
    }

    /// Mean along `axis`, keeping the axis with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.axis_reduce(a, axis, true)
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(Error::Shape("softmax of a scalar".into()));
        }
        let n = *sa.last().unwrap();
        let rows = numel(&sa) / n;
        let mut out = vec![F::zero(); rows * n];
        {
            let va = &self.nodes[a.0].value;
            for r in 0..rows {
                let row = &va[r * n..(r + 1) * n];
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    out[r * n + j] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    out[r * n + j] = out[r * n + j] / sum;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax(a), sa, out, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[a.0].value.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.shape(a),
                shape
            )));
        }
        let value = self.nodes[a.0].value.clone();
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), shape, value, needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of no tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp
                    .iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::Shape(format!(
                    "concat of incompatible shapes {:?} and {:?}",
                    first, sp
                )));
            }
            total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![F::zero(); numel(&out_shape)];
        let mut at = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let vp = &self.nodes[p.0].value;
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * len + l) * inner;
                    let dst = (o * total + at + l) * inner;
                    out[dst..dst + inner].copy_from_slice(&vp[src..src + inner]);
                }
            }
            at += len;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out_shape, out, needs))
    }

    /// Slice of extent `len` starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::Shape(format!(
                "narrow axis {axis} [{start}..{}] of {:?}",
                start + len,
                sa
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let full = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[axis] = len;
        let mut out = vec![F::zero(); outer * len * inner];
        {
            let va = &self.nodes[a.0].value;
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * full + start + l) * inner;
                    let dst = (o * len + l) * inner;
                    out[dst..dst + inner].copy_from_slice(&va[src..src + inner]);
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::Narrow {
                input: a,
                axis,
                start,
                len,
            },
            out_shape,
            out,
            needs,
        ))
    }

    /// 1-D cross-correlation: input `[C_in, T]`, kernels `[C_out, C_in, k]`,
    /// zero padding on both sides. Output length is
    /// `(T + 2*padding - k) / stride + 1` (floor).
    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 2 || sk.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d expects input [C_in, T] and kernels [C_out, C_in, k], got {si:?} and {sk:?}"
            )));
        }
        let (c_in, t) = (si[0], si[1]);
        let (c_out, kc_in, kw) = (sk[0], sk[1], sk[2]);
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d channel mismatch: input has {c_in}, kernels expect {kc_in}"
            )));
        }
        if t + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv1d input length {t} with padding {padding} shorter than kernel {kw}"
            )));
        }
        let t_out = (t + 2 * padding - kw) / stride + 1;
        let mut out = vec![F::zero(); c_out * t_out];
        {
            let vi = &self.nodes[input.0].value;
            let vk = &self.nodes[kernel.0].value;
            for co in 0..c_out {
                for to in 0..t_out {
                    let mut acc = F::zero();
                    for ci in 0..c_in {
                        let krow = &vk[(co * c_in + ci) * kw..(co * c_in + ci + 1) * kw];
                        let irow = &vi[ci * t..(ci + 1) * t];
                        for (ki, &kv) in krow.iter().enumerate() {
                            let ti = (to * stride + ki) as isize - padding as isize;
                            if ti >= 0 && (ti as usize) < t {
                                acc = acc + kv * irow[ti as usize];
                            }
                        }
                    }
                    out[co * t_out + to] = acc;
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            Op::Conv1d {
                input,
                kernel,
                stride,
                padding,
            },
            vec![c_out, t_out],
            out,
            needs,
        ))
    }

    /// Transposed 1-D convolution (adjoint of [`Tape::conv1d`] with the same
    /// parameters): input `[C_in, T]`, kernels `[C_in, C_out, k]`.
    /// Output length is `(T - 1)*stride + k - 2*padding`.
    pub fn conv1d_transposed(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv1d_transposed stride must be positive".into()));
        }
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 2 || sk.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d_transposed expects input [C_in, T] and kernels [C_in, C_out, k], got {si:?} and {sk:?}"
            )));
        }
        let (c_in, t) = (si[0], si[1]);
        let (kc_in, c_out, kw) = (sk[0], sk[1], sk[2]);
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d_transposed channel mismatch: input has {c_in}, kernels expect {kc_in}"
            )));
        }
        let t_out_signed = ((t - 1) * stride + kw) as isize - 2 * padding as isize;
        if t_out_signed <= 0 {
            return Err(Error::Shape(format!(
                "conv1d_transposed output length {t_out_signed} must be positive"
            )));
        }
        let t_out = t_out_signed as usize;
        let mut out = vec![F::zero(); c_out * t_out];
        {
            let vi = &self.nodes[input.0].value;
            let vk = &self.nodes[kernel.0].value;
            for ci in 0..c_in {
                let irow = &vi[ci * t..(ci + 1) * t];
                for co in 0..c_out {
                    let krow = &vk[(ci * c_out + co) * kw..(ci * c_out + co + 1) * kw];
                    for (ti, &iv) in irow.iter().enumerate() {
                        if iv == F::zero() {
                            continue;
                        }
                        for (ki, &kv) in krow.iter().enumerate() {
                            let to = (ti * stride + ki) as isize - padding as isize;
                            if to >= 0 && (to as usize) < t_out {
                                out[co * t_out + to as usize] =
                                    out[co * t_out + to as usize] + iv * kv;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            Op::ConvT1d {
                input,
                kernel,
                stride,
                padding,
            },
            vec![c_out, t_out],
            out,
            needs,
        ))
    }

    /// Backpropagate from a scalar `loss`, accumulating into the gradient
    /// buffers of `requires_grad` leaves. Repeated calls accumulate until
    /// [`Tape::clear_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::Numeric("non-finite loss in backward".into()));
        }
        let leaf_updates = self.propagate(loss)?;
        for (idx, add) in leaf_updates {
            let len = self.nodes[idx].value.len();
            let node = &mut self.nodes[idx];
            let buf = node.grad.get_or_insert_with(|| vec![F::zero(); len]);
            for (g, a) in buf.iter_mut().zip(add) {
                *g = *g + a;
            }
        }
        Ok(())
    }

    fn propagate(&self, loss: Var) -> Result<Vec<(usize, Vec<F>)>> {
        let mut adj: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![F::one()]);
        let mut leaf_updates = Vec::new();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(go) = adj[i].take() else { continue };
            let node = &self.nodes[i];

            macro_rules! ensure {
                ($v:expr) => {{
                    let j = $v.0;
                    if adj[j].is_none() {
                        adj[j] = Some(vec![F::zero(); self.nodes[j].value.len()]);
                    }
                    adj[j].as_mut().unwrap()
                }};
            }

            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        leaf_updates.push((i, go));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let out_shape = &node.shape;
                    let sa = aligned_strides(self.shape(*a), out_shape);
                    let sb = aligned_strides(self.shape(*b), out_shape);
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (na, nb) = (self.needs(*a), self.needs(*b));
                    let mut ga = if na { vec![F::zero(); va.len()] } else { Vec::new() };
                    let mut gb = if nb { vec![F::zero(); vb.len()] } else { Vec::new() };
                    zip2(out_shape, &sa, &sb, |flat, oa, ob| {
                        let g = go[flat];
                        match node.op {
                            Op::Add(..) => {
                                if na {
                                    ga[oa] = ga[oa] + g;
                                }
                                if nb {
                                    gb[ob] = gb[ob] + g;
                                }
                            }
                            Op::Sub(..) => {
                                if na {
                                    ga[oa] = ga[oa] + g;
                                }
                                if nb {
                                    gb[ob] = gb[ob] - g;
                                }
                            }
                            Op::Mul(..) => {
                                if na {
                                    ga[oa] = ga[oa] + g * vb[ob];
                                }
                                if nb {
                                    gb[ob] = gb[ob] + g * va[oa];
                                }
                            }
                            Op::Div(..) => {
                                if na {
                                    ga[oa] = ga[oa] + g / vb[ob];
                                }
                                if nb {
                                    gb[ob] = gb[ob] - g * va[oa] / (vb[ob] * vb[ob]);
                                }
                            }
                            _ => unreachable!(),
                        }
                    });
                    if na {
                        let buf = ensure!(a);
                        for (x, y) in buf.iter_mut().zip(ga) {
                            *x = *x + y;
                        }
                    }
                    if nb {
                        let buf = ensure!(b);
                        for (x, y) in buf.iter_mut().zip(gb) {
                            *x = *x + y;
                        }
                    }
                }
                Op::Neg(a) => {
                    let buf = ensure!(a);
                    for (x, &g) in buf.iter_mut().zip(&go) {
                        *x = *x - g;
                    }
                }
                Op::Exp(a) => {
                    let out = &node.value;
                    let buf = ensure!(a);
                    for ((x, &g), &y) in buf.iter_mut().zip(&go).zip(out) {
                        *x = *x + g * y;
                    }
                }
                Op::Ln(a) => {
                    let va = self.nodes[a.0].value.clone();
                    let buf = ensure!(a);
                    for ((x, &g), v) in buf.iter_mut().zip(&go).zip(va) {
                        *x = *x + g / v;
                    }
                }
                Op::Sqrt(a) => {
                    let out = &node.value;
                    let half = F::from_f64(0.5);
                    let buf = ensure!(a);
                    for ((x, &g), &y) in buf.iter_mut().zip(&go).zip(out) {
                        *x = *x + g * half / y;
                    }
                }
                Op::Relu(a) => {
                    let va = self.nodes[a.0].value.clone();
                    let buf = ensure!(a);
                    for ((x, &g), v) in buf.iter_mut().zip(&go).zip(va) {
                        if v > F::zero() {
                            *x = *x + g;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let buf = ensure!(a);
                    for (x, &g) in buf.iter_mut().zip(&go) {
                        *x = *x + g * c;
                    }
                }
                Op::Shift(a, _) | Op::Reshape(a) => {
                    let buf = ensure!(a);
                    for (x, &g) in buf.iter_mut().zip(&go) {
                        *x = *x + g;
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    if self.needs(*a) {
                        let mut ga = vec![F::zero(); m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let g = go[i * n + j];
                                if g == F::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] = ga[i * k + p] + g * vb[p * n + j];
                                }
                            }
                        }
                        let buf = ensure!(a);
                        for (x, y) in buf.iter_mut().zip(ga) {
                            *x = *x + y;
                        }
                    }
                    if self.needs(*b) {
                        let mut gb = vec![F::zero(); k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = va[i * k + p];
                                if av == F::zero() {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] = gb[p * n + j] + av * go[i * n + j];
                                }
                            }
                        }
                        let buf = ensure!(b);
                        for (x, y) in buf.iter_mut().zip(gb) {
                            *x = *x + y;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let buf = ensure!(a);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] = buf[i * c + j] + go[j * r + i];
                        }
                    }
                }
                Op::SumAll(a) => {
                    let g = go[0];
                    let buf = ensure!(a);
                    for x in buf.iter_mut() {
                        *x = *x + g;
                    }
                }
                Op::MeanAll(a) => {
                    let n = F::from_f64(self.nodes[a.0].value.len() as f64);
                    let g = go[0] / n;
                    let buf = ensure!(a);
                    for x in buf.iter_mut() {
                        *x = *x + g;
                    }
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let sa = self.shape(*a).to_vec();
                    let outer: usize = sa[..*axis].iter().product();
                    let len = sa[*axis];
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let scale = if matches!(node.op, Op::MeanAxis(..)) {
                        F::one() / F::from_f64(len as f64)
                    } else {
                        F::one()
                    };
                    let buf = ensure!(a);
                    for o in 0..outer {
                        for l in 0..len {
                            for ii in 0..inner {
                                buf[(o * len + l) * inner + ii] =
                                    buf[(o * len + l) * inner + ii] + go[o * inner + ii] * scale;
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let out = &node.value;
                    let n = *node.shape.last().unwrap();
                    let rows = out.len() / n;
                    let buf = ensure!(a);
                    for r in 0..rows {
                        let y = &out[r * n..(r + 1) * n];
                        let gy = &go[r * n..(r + 1) * n];
                        let dot: F = y.iter().zip(gy).map(|(&yi, &gi)| yi * gi).sum();
                        for j in 0..n {
                            buf[r * n + j] = buf[r * n + j] + y[j] * (gy[j] - dot);
                        }
                    }
                }
                Op::Concat(parts, axis) => {
                    let out_shape = &node.shape;
                    let outer: usize = out_shape[..*axis].iter().product();
                    let total = out_shape[*axis];
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let mut at = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        if self.needs(p) {
                            let buf = ensure!(p);
                            for o in 0..outer {
                                for l in 0..len {
                                    let dst = (o * len + l) * inner;
                                    let src = (o * total + at + l) * inner;
                                    for ii in 0..inner {
                                        buf[dst + ii] = buf[dst + ii] + go[src + ii];
                                    }
                                }
                            }
                        }
                        at += len;
                    }
                }
                Op::Narrow {
                    input,
                    axis,
                    start,
                    len,
                } => {
                    let sa = self.shape(*input).to_vec();
                    let outer: usize = sa[..*axis].iter().product();
                    let full = sa[*axis];
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let buf = ensure!(input);
                    for o in 0..outer {
                        for l in 0..*len {
                            let dst = (o * full + start + l) * inner;
                            let src = (o * len + l) * inner;
                            for ii in 0..inner {
                                buf[dst + ii] = buf[dst + ii] + go[src + ii];
                            }
                        }
                    }
                }
                Op::Conv1d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (c_in, t) = (self.shape(*input)[0], self.shape(*input)[1]);
                    let (c_out, kw) = (self.shape(*kernel)[0], self.shape(*kernel)[2]);
                    let t_out = node.shape[1];
                    let vi = &self.nodes[input.0].value;
                    let vk = &self.nodes[kernel.0].value;
                    let (ni, nk) = (self.needs(*input), self.needs(*kernel));
                    let mut gi = if ni { vec![F::zero(); c_in * t] } else { Vec::new() };
                    let mut gk = if nk { vec![F::zero(); c_out * c_in * kw] } else { Vec::new() };
                    for co in 0..c_out {
                        for to in 0..t_out {
                            let g = go[co * t_out + to];
                            if g == F::zero() {
                                continue;
                            }
                            for ci in 0..c_in {
                                for ki in 0..kw {
                                    let ti = (to * stride + ki) as isize - *padding as isize;
                                    if ti < 0 || ti as usize >= t {
                                        continue;
                                    }
                                    let ti = ti as usize;
                                    if ni {
                                        gi[ci * t + ti] =
                                            gi[ci * t + ti] + vk[(co * c_in + ci) * kw + ki] * g;
                                    }
                                    if nk {
                                        gk[(co * c_in + ci) * kw + ki] =
                                            gk[(co * c_in + ci) * kw + ki] + vi[ci * t + ti] * g;
                                    }
                                }
                            }
                        }
                    }
                    if ni {
                        let buf = ensure!(input);
                        for (x, y) in buf.iter_mut().zip(gi) {
                            *x = *x + y;
                        }
                    }
                    if nk {
                        let buf = ensure!(kernel);
                        for (x, y) in buf.iter_mut().zip(gk) {
                            *x = *x + y;
                        }
                    }
                }
                Op::ConvT1d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (c_in, t) = (self.shape(*input)[0], self.shape(*input)[1]);
                    let (c_out, kw) = (self.shape(*kernel)[1], self.shape(*kernel)[2]);
                    let t_out = node.shape[1];
                    let vi = &self.nodes[input.0].value;
                    let vk = &self.nodes[kernel.0].value;
                    let (ni, nk) = (self.needs(*input), self.needs(*kernel));
                    let mut gi = if ni { vec![F::zero(); c_in * t] } else { Vec::new() };
                    let mut gk = if nk { vec![F::zero(); c_in * c_out * kw] } else { Vec::new() };
                    for ci in 0..c_in {
                        for ti in 0..t {
                            for co in 0..c_out {
                                for ki in 0..kw {
                                    let to = (ti * stride + ki) as isize - *padding as isize;
                                    if to < 0 || to as usize >= t_out {
                                        continue;
                                    }
                                    let g = go[co * t_out + to as usize];
                                    if g == F::zero() {
                                        continue;
                                    }
                                    if ni {
                                        gi[ci * t + ti] = gi[ci * t + ti]
                                            + vk[(ci * c_out + co) * kw + ki] * g;
                                    }
                                    if nk {
                                        gk[(ci * c_out + co) * kw + ki] =
                                            gk[(ci * c_out + co) * kw + ki] + vi[ci * t + ti] * g;
                                    }
                                }
                            }
                        }
                    }
                    if ni {
                        let buf = ensure!(input);
                        for (x, y) in buf.iter_mut().zip(gi) {
                            *x = *x + y;
                        }
                    }
                    if nk {
                        let buf = ensure!(kernel);
                        for (x, y) in buf.iter_mut().zip(gk) {
                            *x = *x + y;
                        }
                    }
                }
            }
        }
        Ok(leaf_updates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_small_example() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&tensor(&[1, 3], &[1.0, 2.0, 3.0]));
        let k = tape.constant(&tensor(&[1, 1, 2], &[1.0, 1.0]));
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2]);
        assert_eq!(tape.data(y), &[3.0, 5.0]);
    }

    #[test]
    fn conv1d_transposed_small_example() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&tensor(&[1, 2], &[1.0, 2.0]));
        let k = tape.constant(&tensor(&[1, 1, 2], &[1.0, 1.0]));
        let y = tape.conv1d_transposed(x, k, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 4]);
        assert_eq!(tape.data(y), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn conv1d_transposed_is_conv1d_adjoint() {
        // <conv(a, K), b> == <a, convT(b, K)> with shared stride/padding.
        let (c_in, c_out, t, k, stride, padding) = (2usize, 3usize, 7usize, 3usize, 2usize, 1usize);
        let fill = |n: usize, mul: f64| -> Vec<f64> {
            (0..n).map(|i| ((i * 37 + 11) % 17) as f64 * 0.1 * mul - 0.5).collect()
        };
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(&tensor(&[c_in, t], &fill(c_in * t, 1.0)));
        let kv = tape.constant(&tensor(&[c_out, c_in, k], &fill(c_out * c_in * k, 0.7)));
        let y = tape.conv1d(a, kv, stride, padding).unwrap();
        let t_out = tape.shape(y)[1];
        let b = tape.constant(&tensor(&[c_out, t_out], &fill(c_out * t_out, 1.3)));
        let yb = tape.mul(y, b).unwrap();
        let lhs = tape.sum_all(yb);
        let back = tape.conv1d_transposed(b, kv, stride, padding).unwrap();
        assert_eq!(tape.shape(back), &[c_in, t]);
        let ab = tape.mul(a, back).unwrap();
        let rhs = tape.sum_all(ab);
        let (l, r) = (tape.scalar_value(lhs), tape.scalar_value(rhs));
        assert!((l - r).abs() < 1e-12, "{l} vs {r}");
    }

    #[test]
    fn square_gradient_doubles() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&tensor(&[1], &[3.0]), true);
        let y = tape.square(x).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_all_gradient_is_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&tensor(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_cleared() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&tensor(&[1], &[2.0]), true);
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.clear_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn matmul_and_transpose_values() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(&tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&tensor(&[2, 1], &[5.0, 6.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(y), &[17.0, 39.0]);
        let at = tape.transpose(a).unwrap();
        assert_eq!(tape.data(at), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&tensor(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
        let p = tape.softmax(x).unwrap();
        let d = tape.data(p);
        for row in d.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn narrow_concat_round_trip() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&tensor(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let left = tape.narrow(x, 1, 0, 2).unwrap();
        let right = tape.narrow(x, 1, 2, 2).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(&tensor(&[2, 2], &[1.0; 4]));
        let b = tape.constant(&tensor(&[3, 1], &[1.0; 3]));
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(&tensor(&[3], &[1.0; 3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn identical_programs_are_bitwise_deterministic() {
        let run = || {
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.constant(&Tensor::from_vec(vec![2, 2], vec![0.3f32, -1.2, 2.7, 0.05]).unwrap());
            let e = tape.exp(x);
            let s = tape.softmax(e).unwrap();
            let m = tape.mean_all(s);
            tape.scalar_value(m).to_bits()
        };
        assert_eq!(run(), run());
    }
}
