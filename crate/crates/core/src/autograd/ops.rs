use super::{gemm, numel_of, Real, Tensor};
use crate::error::{Error, Result};
use crate::opcount;

type CustomBackward<T> = Box<dyn Fn(&[T], &[T]) -> Vec<T> + Send + Sync>;

/// Operation recorded in the graph along with what its backward needs.
pub(crate) enum Op<T: Real> {
    MatMul { m: usize, k: usize, n: usize },
    BatchMatMul { groups: usize, m: usize, k: usize, n: usize },
    Transpose { outer: usize, rows: usize, cols: usize },
    Gram { rows: usize, cols: usize },
    Add,
    Sub,
    Mul,
    AddBroadcast,
    MulBroadcast,
    Scale(T),
    AddScalar,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Concat { widths: Vec<usize> },
    Softmax { width: usize },
    MaskedSoftmax { width: usize },
    MaskedFill { mask: Vec<bool> },
    Sum,
    Mean,
    SumAxis { outer: usize, dim: usize, inner: usize },
    GatherRows { index: Vec<usize>, width: usize },
    NeighborSum { sets: Vec<Vec<usize>>, width: usize },
    Reshape,
    Stack { outer: usize, inner: usize },
    Narrow { outer: usize, dim: usize, inner: usize, start: usize, len: usize },
    Lerp,
    Custom { name: &'static str, backward: CustomBackward<T> },
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `(outer, dim, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_blocks<T: Real>(src: &[T], outer: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let block = rows * cols;
    for o in 0..outer {
        let s = &src[o * block..(o + 1) * block];
        let d = &mut out[o * block..(o + 1) * block];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

fn softmax_rows<T: Real>(x: &[T], width: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if width == 0 {
        return out;
    }
    for (r, (row, dst)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * width + j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                dst[j] = e;
                total = total + e;
            }
        }
        dst.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

impl<T: Real> Tensor<T> {
    fn require_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::contract(format!(
                "{op} expects rank {rank}, got shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    fn same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// `(m×k)·(k×n)`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(dim_err("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        opcount::record_matmul(1, m, k, n, self.data(), other.data());
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, &mut out, false);
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMul { m, k, n }, &[self, other]))
    }

    /// `(g×m×k)·(g×k×n)` over the leading batch axis.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 3
            || other.rank() != 3
            || self.shape()[0] != other.shape()[0]
            || self.shape()[2] != other.shape()[1]
        {
            return Err(dim_err("bmm", self.shape(), other.shape()));
        }
        let (groups, m, k, n) = (self.shape()[0], self.shape()[1], self.shape()[2], other.shape()[2]);
        opcount::record_matmul(groups, m, k, n, self.data(), other.data());
        let mut out = vec![T::zero(); groups * m * n];
        for g in 0..groups {
            gemm(
                m,
                k,
                n,
                &self.data()[g * m * k..(g + 1) * m * k],
                false,
                &other.data()[g * k * n..(g + 1) * k * n],
                false,
                &mut out[g * m * n..(g + 1) * m * n],
                false,
            );
        }
        Ok(Tensor::from_op(
            vec![groups, m, n],
            out,
            Op::BatchMatMul { groups, m, k, n },
            &[self, other],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::contract(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let r = self.rank();
        let (rows, cols) = (self.shape()[r - 2], self.shape()[r - 1]);
        let outer = self.numel() / (rows * cols).max(1);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = transpose_blocks(self.data(), outer, rows, cols);
        Ok(Tensor::from_op(shape, out, Op::Transpose { outer, rows, cols }, &[self]))
    }

    /// `X·Xᵀ`, exactly symmetric.
    pub fn gram(&self) -> Result<Tensor<T>> {
        self.require_rank("gram", 2)?;
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![T::zero(); rows * rows];
        for i in 0..rows {
            for j in i..rows {
                let v = (0..cols).map(|c| x[i * cols + c] * x[j * cols + c]).sum();
                out[i * rows + j] = v;
                out[j * rows + i] = v;
            }
        }
        Ok(Tensor::from_op(vec![rows, rows], out, Op::Gram { rows, cols }, &[self]))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "add")?;
        let out = zip_map(self.data(), other.data(), |a, b| a + b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Add, &[self, other]))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "sub")?;
        let out = zip_map(self.data(), other.data(), |a, b| a - b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Sub, &[self, other]))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "mul")?;
        let out = zip_map(self.data(), other.data(), |a, b| a * b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Mul, &[self, other]))
    }

    /// Adds `b` to every trailing block of `self`; `b`'s shape must equal the
    /// trailing axes of `self` (a bias row, or a matrix repeated over a batch).
    pub fn add_broadcast(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.rank();
        let br = b.rank();
        if br > r || self.shape()[r - br..] != *b.shape() {
            return Err(dim_err("add_broadcast", self.shape(), b.shape()));
        }
        let bd = b.data();
        let w = bd.len().max(1);
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % w])
            .collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::AddBroadcast, &[self, b]))
    }

    /// Multiplies every trailing block of `self` by `b`, elementwise; shape
    /// rules as in [`add_broadcast`](Self::add_broadcast).
    pub fn mul_broadcast(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.rank();
        let br = b.rank();
        if br > r || self.shape()[r - br..] != *b.shape() {
            return Err(dim_err("mul_broadcast", self.shape(), b.shape()));
        }
        let bd = b.data();
        let w = bd.len().max(1);
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * bd[i % w])
            .collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::MulBroadcast, &[self, b]))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale(c), &[self])
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::AddScalar, &[self])
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out = self
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Sigmoid, &[self])
    }

    pub fn tanh(&self) -> Tensor<T> {
        let out = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Tanh, &[self])
    }

    pub fn exp(&self) -> Tensor<T> {
        let out = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Exp, &[self])
    }

    pub fn ln(&self) -> Tensor<T> {
        let out = self.data().iter().map(|v| v.ln()).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Ln, &[self])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if first.rank() == 0 {
            return Err(Error::contract("concat of scalars"));
        }
        let lead = &first.shape()[..first.rank() - 1];
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
                return Err(dim_err("concat", first.shape(), p.shape()));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[p.rank() - 1]).collect();
        let total: usize = widths.iter().sum();
        let rows = numel_of(lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_op(shape, out, Op::Concat { widths }, parts))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(Error::contract("softmax of a scalar"));
        }
        let width = self.shape()[self.rank() - 1];
        let out = softmax_rows(self.data(), width, None);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Softmax { width }, &[self]))
    }

    /// Softmax along the last axis over entries where `keep` is true. Masked
    /// entries, and rows with nothing kept, come out as zero.
    pub fn masked_softmax(&self, keep: &[bool]) -> Result<Tensor<T>> {
        if self.rank() == 0 || keep.len() != self.numel() {
            return Err(dim_err("masked_softmax", self.shape(), &[keep.len()]));
        }
        let width = self.shape()[self.rank() - 1];
        let out = softmax_rows(self.data(), width, Some(keep));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::MaskedSoftmax { width },
            &[self],
        ))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&self, mask: &[bool], value: T) -> Result<Tensor<T>> {
        if mask.len() != self.numel() {
            return Err(dim_err("masked_fill", self.shape(), &[mask.len()]));
        }
        let out = self
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::MaskedFill { mask: mask.to_vec() },
            &[self],
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::Sum, &[self])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.numel().max(1) as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(Vec::new(), vec![s / n], Op::Mean, &[self])
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::contract(format!(
                "sum_axis({axis}) on shape {:?}",
                self.shape()
            )));
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(shape, out, Op::SumAxis { outer, dim, inner }, &[self]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let dim = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::contract(format!("mean_axis({axis}) on shape {:?}", self.shape())))?;
        Ok(self.sum_axis(axis)?.scale(T::one() / T::lit(dim.max(1) as f64)))
    }

    /// Row selection along axis 0; rows may repeat.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(Error::contract("gather_rows of a scalar"));
        }
        let rows = self.shape()[0];
        let width = self.numel() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(Error::contract(format!("gather_rows: index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&self.data()[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        Ok(Tensor::from_op(
            shape,
            out,
            Op::GatherRows {
                index: index.to_vec(),
                width,
            },
            &[self],
        ))
    }

    /// Row `i` of the result is the sum of the rows of `self` listed in
    /// `sets[i]`; an empty set gives a zero row. No dense product is formed.
    pub fn neighbor_sum(&self, sets: &[Vec<usize>]) -> Result<Tensor<T>> {
        self.require_rank("neighbor_sum", 2)?;
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![T::zero(); sets.len() * width];
        for (dst, set) in out.chunks_mut(width.max(1)).zip(sets) {
            for &j in set {
                if j >= rows {
                    return Err(Error::contract(format!("neighbor_sum: index {j} out of {rows} rows")));
                }
                let src = &x[j * width..(j + 1) * width];
                for (a, &b) in dst.iter_mut().zip(src) {
                    if b != T::zero() {
                        *a = *a + b;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![sets.len(), width],
            out,
            Op::NeighborSum {
                sets: sets.to_vec(),
                width,
            },
            &[self],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(dim_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape, &[self]))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        if axis > first.rank() {
            return Err(Error::contract(format!(
                "stack axis {axis} for rank {}",
                first.rank()
            )));
        }
        for p in parts {
            if p.shape() != first.shape() {
                return Err(dim_err("stack", first.shape(), p.shape()));
            }
        }
        let outer = numel_of(&first.shape()[..axis]);
        let inner = numel_of(&first.shape()[axis..]);
        let mut out = Vec::with_capacity(outer * parts.len() * inner);
        for o in 0..outer {
            for p in parts {
                out.extend_from_slice(&p.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape.insert(axis, parts.len());
        Ok(Tensor::from_op(shape, out, Op::Stack { outer, inner }, parts))
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::contract(format!(
                "narrow(axis={axis}, {start}..{}) on shape {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Narrow {
                outer,
                dim,
                inner,
                start,
                len,
            },
            &[self],
        ))
    }

    /// Index `index` of `axis`, with that axis removed.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor<T>> {
        let t = self.narrow(axis, index, 1)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        t.reshape(&shape)
    }

    /// `(1 − weight) ⊙ from + weight ⊙ to`, clamped to the closed interval
    /// spanned by `from` and `to` so rounding never leaves it. Weights of
    /// exactly 0 or 1 return `from` or `to` unchanged.
    pub fn lerp(from: &Tensor<T>, to: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
        from.same_shape(to, "lerp")?;
        from.same_shape(weight, "lerp")?;
        let out = from
            .data()
            .iter()
            .zip(to.data())
            .zip(weight.data())
            .map(|((&a, &b), &w)| {
                let v = (T::one() - w) * a + w * b;
                v.max(a.min(b)).min(a.max(b))
            })
            .collect();
        Ok(Tensor::from_op(from.shape().to_vec(), out, Op::Lerp, &[from, to, weight]))
    }

    /// Elementwise op with a caller-supplied derivative. `backward(x, gout)`
    /// returns the input gradient. Graphs containing such nodes are rejected by
    /// [`grad_check`](super::grad_check).
    pub fn custom_unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        backward: impl Fn(&[T], &[T]) -> Vec<T> + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Custom {
                name,
                backward: Box::new(backward),
            },
            &[self],
        )
    }
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Transpose { .. } => "transpose",
            Op::Gram { .. } => "gram",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBroadcast => "add_broadcast",
            Op::MulBroadcast => "mul_broadcast",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::GatherRows { .. } => "gather_rows",
            Op::NeighborSum { .. } => "neighbor_sum",
            Op::Reshape => "reshape",
            Op::Stack { .. } => "stack",
            Op::Narrow { .. } => "narrow",
            Op::Lerp => "lerp",
            Op::Custom { name, .. } => name,
        }
    }

    pub(crate) fn is_custom(&self) -> bool {
        matches!(self, Op::Custom { .. })
    }

    /// Input gradients given the output tensor and its gradient `g`.
    pub(crate) fn backward(&self, inputs: &[Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let want = |i: usize| inputs[i].requires_grad();
        match self {
            Op::MatMul { m, k, n } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let ga = want(0).then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(*m, *n, *k, g, false, b, true, &mut ga, false);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(*k, *m, *n, a, true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }
            Op::BatchMatMul { groups, m, k, n } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let (sa, sb, sc) = (m * k, k * n, m * n);
                let ga = want(0).then(|| {
                    let mut ga = vec![T::zero(); groups * sa];
                    for i in 0..*groups {
                        gemm(
                            *m,
                            *n,
                            *k,
                            &g[i * sc..(i + 1) * sc],
                            false,
                            &b[i * sb..(i + 1) * sb],
                            true,
                            &mut ga[i * sa..(i + 1) * sa],
                            false,
                        );
                    }
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![T::zero(); groups * sb];
                    for i in 0..*groups {
                        gemm(
                            *k,
                            *m,
                            *n,
                            &a[i * sa..(i + 1) * sa],
                            true,
                            &g[i * sc..(i + 1) * sc],
                            false,
                            &mut gb[i * sb..(i + 1) * sb],
                            false,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }
            Op::Transpose { outer, rows, cols } => {
                vec![Some(transpose_blocks(g, *outer, *cols, *rows))]
            }
            Op::Gram { rows, cols } => {
                let x = inputs[0].data();
                let sym: Vec<T> = (0..rows * rows)
                    .map(|idx| {
                        let (i, j) = (idx / rows, idx % rows);
                        g[i * rows + j] + g[j * rows + i]
                    })
                    .collect();
                let mut gx = vec![T::zero(); rows * cols];
                gemm(*rows, *rows, *cols, &sym, false, x, false, &mut gx, false);
                vec![Some(gx)]
            }
            Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
            Op::Sub => vec![
                want(0).then(|| g.to_vec()),
                want(1).then(|| g.iter().map(|&v| -v).collect()),
            ],
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    want(0).then(|| zip_map(g, b, |x, y| x * y)),
                    want(1).then(|| zip_map(g, a, |x, y| x * y)),
                ]
            }
            Op::AddBroadcast => {
                let w = inputs[1].numel().max(1);
                let gb = want(1).then(|| {
                    let mut gb = vec![T::zero(); inputs[1].numel()];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % w] = gb[i % w] + v;
                    }
                    gb
                });
                vec![want(0).then(|| g.to_vec()), gb]
            }
            Op::MulBroadcast => {
                let (x, b) = (inputs[0].data(), inputs[1].data());
                let w = b.len().max(1);
                let gx = want(0).then(|| g.iter().enumerate().map(|(i, &v)| v * b[i % w]).collect());
                let gb = want(1).then(|| {
                    let mut gb = vec![T::zero(); b.len()];
                    for (i, (&v, &xv)) in g.iter().zip(x).enumerate() {
                        gb[i % w] = gb[i % w] + v * xv;
                    }
                    gb
                });
                vec![gx, gb]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::Sigmoid => vec![Some(zip_map(g, out.data(), |gv, y| gv * y * (T::one() - y)))],
            Op::Tanh => vec![Some(zip_map(g, out.data(), |gv, y| gv * (T::one() - y * y)))],
            Op::Exp => vec![Some(zip_map(g, out.data(), |gv, y| gv * y))],
            Op::Ln => vec![Some(zip_map(g, inputs[0].data(), |gv, x| gv / x))],
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(p, &w)| {
                        let start = offset;
                        offset += w;
                        want(p).then(|| {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + start..r * total + start + w]);
                            }
                            gp
                        })
                    })
                    .collect()
            }
            Op::Softmax { width } | Op::MaskedSoftmax { width } => {
                let y = out.data();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(*width).zip(y.chunks(*width)).zip(gx.chunks_mut(*width)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }
            Op::MaskedFill { mask } => vec![Some(
                g.iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { T::zero() } else { v })
                    .collect(),
            )],
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / T::lit(n.max(1) as f64); n])]
            }
            Op::SumAxis { outer, dim, inner } => {
                let mut gx = vec![T::zero(); outer * dim * inner];
                for o in 0..*outer {
                    for d in 0..*dim {
                        gx[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }
            Op::GatherRows { index, width } => {
                let mut gx = vec![T::zero(); inputs[0].numel()];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..*width {
                        gx[i * width + c] = gx[i * width + c] + g[r * width + c];
                    }
                }
                vec![Some(gx)]
            }
            Op::NeighborSum { sets, width } => {
                let mut gx = vec![T::zero(); inputs[0].numel()];
                for (r, set) in sets.iter().enumerate() {
                    for &j in set {
                        for c in 0..*width {
                            gx[j * width + c] = gx[j * width + c] + g[r * width + c];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Stack { outer, inner } => {
                let k = inputs.len();
                (0..k)
                    .map(|p| {
                        want(p).then(|| {
                            let mut gp = Vec::with_capacity(outer * inner);
                            for o in 0..*outer {
                                let base = (o * k + p) * inner;
                                gp.extend_from_slice(&g[base..base + inner]);
                            }
                            gp
                        })
                    })
                    .collect()
            }
            Op::Narrow {
                outer,
                dim,
                inner,
                start,
                len,
            } => {
                let mut gx = vec![T::zero(); outer * dim * inner];
                for o in 0..*outer {
                    let dst = (o * dim + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }
            Op::Lerp => {
                let (a, b, w) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
                vec![
                    want(0).then(|| zip_map(g, w, |gv, wv| gv * (T::one() - wv))),
                    want(1).then(|| zip_map(g, w, |gv, wv| gv * wv)),
                    want(2).then(|| {
                        g.iter()
                            .zip(a.iter().zip(b))
                            .map(|(&gv, (&av, &bv))| gv * (bv - av))
                            .collect()
                    }),
                ]
            }
            Op::Custom { backward, .. } => vec![Some(backward(inputs[0].data(), g))],
        }
    }
}
