//! Forward definitions and backward rules of the tape primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::broadcast::{broadcast_shapes, strides, Plan};
use super::graph::{Graph, Op};
use super::{numel, Mask, Real, Result, Tensor, TensorError, Var};

pub(crate) fn add_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Sum a gradient shaped like `out` down to the broadcast input shape.
fn reduce_to<T: Real>(g: &Tensor<T>, input: &[usize]) -> Tensor<T> {
    if g.shape() == input {
        return g.clone();
    }
    let plan = Plan::new(g.shape(), input);
    let mut acc = vec![T::zero(); numel(input)];
    for (i, &v) in g.data().iter().enumerate() {
        acc[plan.at(i)] += v;
    }
    Tensor::from_vec(input, acc)
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    Ok(())
}

/// `[outer, dim, inner]` split of a shape around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct MatmulDims {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    a_map: Vec<usize>,
    b_map: Vec<usize>,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(TensorError::InvalidShape {
            op: "matmul",
            detail: format!("operands must have rank >= 2, got {a:?} and {b:?}"),
        });
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shapes(ab, bb).map_err(|_| TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })?;
    let a_map = super::broadcast::index_map(&batch, ab);
    let b_map = super::broadcast::index_map(&batch, bb);
    Ok(MatmulDims {
        m,
        k,
        n,
        b_batched: numel(bb) > 1,
        batch,
        a_map,
        b_map,
    })
}

fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, d: &MatmulDims) -> Tensor<T> {
    let (m, k, n) = (d.m, d.k, d.n);
    let nb = numel(&d.batch);
    let mut out = vec![T::zero(); nb * m * n];
    if !d.b_batched && d.a_map.iter().enumerate().all(|(i, &j)| i == j) {
        // Fold the batch into the row dimension: one large product.
        T::gemm(nb * m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out);
    } else {
        for bi in 0..nb {
            let ao = d.a_map[bi] * m * k;
            let bo = d.b_map[bi] * k * n;
            T::gemm(
                m,
                k,
                n,
                &a.data()[ao..ao + m * k],
                k as isize,
                1,
                &b.data()[bo..bo + k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }
    let mut shape = d.batch.clone();
    shape.extend([m, n]);
    Tensor::from_vec(&shape, out)
}

fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    d: &MatmulDims,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k, n) = (d.m, d.k, d.n);
    let nb = numel(&d.batch);
    let folded = !d.b_batched && d.a_map.iter().enumerate().all(|(i, &j)| i == j);
    let mut ga = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.numel()]);
    if folded {
        if let Some(ga) = ga.as_mut() {
            // dA = G · Bᵀ
            T::gemm(nb * m, n, k, g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), ga);
        }
        if let Some(gb) = gb.as_mut() {
            // dB = Aᵀ · G
            T::gemm(k, nb * m, n, a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), gb);
        }
    } else {
        for bi in 0..nb {
            let ao = d.a_map[bi] * m * k;
            let bo = d.b_map[bi] * k * n;
            let go = bi * m * n;
            if let Some(ga) = ga.as_mut() {
                T::gemm(
                    m,
                    n,
                    k,
                    &g.data()[go..go + m * n],
                    n as isize,
                    1,
                    &b.data()[bo..bo + k * n],
                    1,
                    n as isize,
                    T::one(),
                    &mut ga[ao..ao + m * k],
                );
            }
            if let Some(gb) = gb.as_mut() {
                T::gemm(
                    k,
                    m,
                    n,
                    &a.data()[ao..ao + m * k],
                    1,
                    k as isize,
                    &g.data()[go..go + m * n],
                    n as isize,
                    1,
                    T::one(),
                    &mut gb[bo..bo + k * n],
                );
            }
        }
    }
    (
        ga.map(|v| Tensor::from_vec(a.shape(), v)),
        gb.map(|v| Tensor::from_vec(b.shape(), v)),
    )
}

fn permute_data<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let rank = shape.len();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(src[cur]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn softmax_rows<T: Real>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, row) in x.chunks(cols).enumerate() {
        let base = r * cols;
        let valid = |j: usize| mask.is_none_or(|m| m[base + j]);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if valid(j) && v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            // Fully masked row: defined as zeros.
            continue;
        }
        let mut s = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if valid(j) {
                let e = (v - mx).exp();
                out[base + j] = e;
                s += e;
            }
        }
        for o in &mut out[base..base + cols] {
            *o /= s;
        }
    }
    out
}

impl<T: Real> Graph<'_, T> {
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.shape(), xv.data().iter().map(|&v| f(v)).collect());
        let rg = self.requires_grad(x);
        self.push(out, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shapes(av.shape(), bv.shape()).map_err(|_| TensorError::ShapeMismatch {
            op: name,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        let n = numel(&shape);
        let (pa, pb) = (Plan::new(&shape, av.shape()), Plan::new(&shape, bv.shape()));
        let (ad, bd) = (av.data(), bv.data());
        let data = match (&pa, &pb) {
            (Plan::Same, Plan::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(ad[pa.at(i)], bd[pb.at(i)])).collect(),
        };
        Ok(Tensor::from_vec(&shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Elementwise quotient; any zero divisor is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Div(a, b), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log; non-positive inputs are an error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "log of non-positive value".into(),
            });
        }
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: "sqrt of negative value".into(),
            });
        }
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        if p.fract() != T::zero() && self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Domain {
                op: "powf",
                detail: "fractional power of negative value".into(),
            });
        }
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.cos(), Op::Cos(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.sin(), Op::Sin(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Elementwise Huber term with threshold 1: ½d² for |d|<1, else |d|−½.
    pub fn smooth_l1_elem(&mut self, d: Var) -> Result<Var> {
        let half = T::c(0.5);
        self.unary(
            d,
            |v| if v.abs() < T::one() { half * v * v } else { v.abs() - half },
            Op::SmoothL1(d),
        )
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let out = matmul_forward(self.value(a), self.value(b), &dims);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Matmul(a, b), rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                detail: format!("{axes:?} is not a permutation of rank {rank}"),
            });
        }
        let out = permute_data(self.value(x), axes);
        let rg = self.requires_grad(x);
        self.push(out, Op::Permute(x, axes.to_vec()), rg)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                detail: format!("rank {rank} < 2"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.requires_grad(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let same_rest = s.len() == base.len() && (0..s.len()).all(|d| d == axis || s[d] == base[d]);
            if !same_rest {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_dims(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(xs);
        self.push(Tensor::from_vec(&shape, out), Op::Concat(xs.to_vec(), axis), rg)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        check_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                detail: format!("range {}..{} exceeds dim {}", start, start + len, shape[axis]),
            });
        }
        let (outer, dim, inner) = split_dims(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&oshape, out), Op::Narrow(x, axis, start), rg)
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dim = *self.value(x).shape().get(axis).ok_or_else(|| TensorError::InvalidShape {
            op: "split",
            detail: format!("axis {axis} out of range"),
        })?;
        if sizes.iter().sum::<usize>() != dim {
            return Err(TensorError::InvalidShape {
                op: "split",
                detail: format!("sizes {sizes:?} do not sum to {dim}"),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        check_axis("sum", axis, shape.len())?;
        let (outer, dim, inner) = split_dims(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&oshape, out), Op::Sum(x, axis), rg)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.value(x).shape().get(axis).unwrap_or(&0);
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean",
                detail: format!("axis {axis} is empty or out of range"),
            });
        }
        let s = self.sum(x, axis)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Maximum over `axis`; the gradient goes to the first maximal entry.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        check_axis("max", axis, shape.len())?;
        let (outer, dim, inner) = split_dims(&shape, axis);
        if dim == 0 {
            return Err(TensorError::InvalidShape {
                op: "max",
                detail: "empty axis".into(),
            });
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = src[o * dim * inner + i];
                let mut bi = 0;
                for d in 1..dim {
                    let v = src[(o * dim + d) * inner + i];
                    if v > best {
                        best = v;
                        bi = d;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = bi;
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&oshape, out), Op::Max(x, axis, arg), rg)
    }

    /// Row-wise maximum of `x: [N, C]` over each group of row indices,
    /// giving `[groups, C]`.
    pub fn segment_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "segment_max",
                detail: format!("expected rank 2, got {shape:?}"),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(groups.len() * c);
        let mut arg = Vec::with_capacity(groups.len() * c);
        for grp in groups {
            if grp.is_empty() || grp.iter().any(|&r| r >= n) {
                return Err(TensorError::InvalidShape {
                    op: "segment_max",
                    detail: format!("group must be non-empty with rows < {n}"),
                });
            }
            for j in 0..c {
                let mut best = src[grp[0] * c + j];
                let mut bi = grp[0];
                for &r in &grp[1..] {
                    let v = src[r * c + j];
                    if v > best {
                        best = v;
                        bi = r;
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&[groups.len(), c], out), Op::SegmentMax(x, arg), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    /// Softmax over the last axis. Entries whose mask flag is `false` get
    /// zero weight; a fully masked row yields zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            detail: "scalar input".into(),
        })?;
        let full = mask.map(|m| self.mask_for(m, &shape, "softmax")).transpose()?;
        let out = softmax_rows(self.value(x).data(), cols, full.as_deref());
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&shape, out), Op::Softmax(x), rg)
    }

    /// RMS normalization over the last axis with a learned gain `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if self.value(w).shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: shape,
                rhs: self.value(w).shape().to_vec(),
            });
        }
        let eps = T::c(eps);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = Vec::with_capacity(xd.len());
        let mut inv = Vec::with_capacity(xd.len() / cols.max(1));
        for row in xd.chunks(cols) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::c(cols as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            out.extend(row.iter().zip(wd).map(|(&v, &g)| v * r * g));
        }
        let rg = self.any_grad(&[x, w]);
        self.push(Tensor::from_vec(&shape, out), Op::RmsNorm(x, w, inv), rg)
    }

    /// Select entries `idx` along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        check_axis("index_select", axis, shape.len())?;
        let (outer, dim, inner) = split_dims(&shape, axis);
        if let Some(&bad) = idx.iter().find(|&&i| i >= dim) {
            return Err(TensorError::InvalidShape {
                op: "index_select",
                detail: format!("index {bad} out of bounds for dim {dim}"),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * dim + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = idx.len();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&oshape, out), Op::IndexSelect(x, axis, idx.to_vec()), rg)
    }

    /// Rows of a leading axis (gather by index).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.index_select(x, 0, idx)
    }

    /// Replace entries whose mask flag is `false` by `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &Mask, value: T) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let keep = self.mask_for(mask, &shape, "masked_fill")?;
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { value })
            .collect();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&shape, out), Op::MaskedFill(x, keep), rg)
    }

    /// Inverted dropout; identity unless the graph is in training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.is_training() || rate <= 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed() ^ call.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let keep_scale = T::c(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let scales: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep_scale })
            .collect();
        let xv = self.value(x);
        let out = xv.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
        let shape = xv.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&shape, out), Op::Dropout(x, scales), rg)
    }

    // Convenience compositions.

    /// `x @ w + b` for a weight `[in, out]` and optional bias `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn elementwise<T: Real>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_vec(x.shape(), g.data().iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect())
}

/// Input gradients of node `i` given the gradient `g` of its output.
pub(crate) fn backward_node<T: Real>(graph: &Graph<'_, T>, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
    let node = &graph.nodes[i];
    let val = |v: Var| graph.value(v);
    let need = |v: Var| graph.requires_grad(v);
    let out = &node.value;
    let mut res = Vec::new();
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::Add(a, b) => {
            res.push((*a, reduce_to(g, val(*a).shape())));
            res.push((*b, reduce_to(g, val(*b).shape())));
        }
        Op::Sub(a, b) => {
            res.push((*a, reduce_to(g, val(*a).shape())));
            res.push((*b, reduce_to(&g.map(|v| -v), val(*b).shape())));
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (av, bv) = (val(*a), val(*b));
            let (pa, pb) = (Plan::new(out.shape(), av.shape()), Plan::new(out.shape(), bv.shape()));
            let n = out.numel();
            if need(*a) {
                let d: Vec<T> = (0..n)
                    .map(|k| {
                        let bk = bv.data()[pb.at(k)];
                        if is_div {
                            g.data()[k] / bk
                        } else {
                            g.data()[k] * bk
                        }
                    })
                    .collect();
                res.push((*a, reduce_to(&Tensor::from_vec(out.shape(), d), av.shape())));
            }
            if need(*b) {
                let d: Vec<T> = (0..n)
                    .map(|k| {
                        if is_div {
                            // d(a/b)/db = -out/b
                            -g.data()[k] * out.data()[k] / bv.data()[pb.at(k)]
                        } else {
                            g.data()[k] * av.data()[pa.at(k)]
                        }
                    })
                    .collect();
                res.push((*b, reduce_to(&Tensor::from_vec(out.shape(), d), bv.shape())));
            }
        }
        Op::Neg(x) => res.push((*x, g.map(|v| -v))),
        Op::Scale(x, c) => {
            let c = *c;
            res.push((*x, g.map(|v| v * c)))
        }
        Op::AddScalar(x) | Op::Reshape(x) => res.push((*x, g.reshaped(val(*x).shape())?)),
        Op::Exp(x) => res.push((*x, elementwise(g, out, |gi, yi| gi * yi))),
        Op::Log(x) => res.push((*x, elementwise(g, val(*x), |gi, xi| gi / xi))),
        Op::Sqrt(x) => res.push((*x, elementwise(g, out, |gi, yi| gi * T::c(0.5) / yi))),
        Op::Powf(x, p) => {
            let p = *p;
            res.push((*x, elementwise(g, val(*x), |gi, xi| gi * p * xi.powf(p - T::one()))))
        }
        Op::Sigmoid(x) => res.push((*x, elementwise(g, out, |gi, yi| gi * yi * (T::one() - yi)))),
        Op::Silu(x) => res.push((
            *x,
            elementwise(g, val(*x), |gi, xi| {
                let s = sigmoid(xi);
                gi * (s + xi * s * (T::one() - s))
            }),
        )),
        Op::Softplus(x) => res.push((*x, elementwise(g, val(*x), |gi, xi| gi * sigmoid(xi)))),
        Op::Cos(x) => res.push((*x, elementwise(g, val(*x), |gi, xi| -gi * xi.sin()))),
        Op::Sin(x) => res.push((*x, elementwise(g, val(*x), |gi, xi| gi * xi.cos()))),
        Op::Abs(x) => res.push((*x, elementwise(g, val(*x), |gi, xi| gi * sign(xi)))),
        Op::SmoothL1(x) => res.push((
            *x,
            elementwise(g, val(*x), |gi, xi| if xi.abs() < T::one() { gi * xi } else { gi * sign(xi) }),
        )),
        Op::Matmul(a, b) => {
            let dims = matmul_dims(val(*a).shape(), val(*b).shape())?;
            let (ga, gb) = matmul_backward(val(*a), val(*b), g, &dims, need(*a), need(*b));
            if let Some(ga) = ga {
                res.push((*a, ga));
            }
            if let Some(gb) = gb {
                res.push((*b, gb));
            }
        }
        Op::Permute(x, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            res.push((*x, permute_data(g, &inv)));
        }
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = split_dims(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &x in xs {
                let xs_shape = val(x).shape();
                let len = xs_shape[*axis];
                if need(x) {
                    let mut d = Vec::with_capacity(val(x).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    res.push((x, Tensor::from_vec(xs_shape, d)));
                }
                offset += len;
            }
        }
        Op::Narrow(x, axis, start) => {
            let xs = val(*x).shape();
            let (outer, dim, inner) = split_dims(xs, *axis);
            let len = out.shape()[*axis];
            let mut d = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            res.push((*x, Tensor::from_vec(xs, d)));
        }
        Op::Sum(x, axis) => {
            let xs = val(*x).shape();
            let (outer, dim, inner) = split_dims(xs, *axis);
            let mut d = Vec::with_capacity(val(*x).numel());
            for o in 0..outer {
                for _ in 0..dim {
                    d.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            res.push((*x, Tensor::from_vec(xs, d)));
        }
        Op::Max(x, axis, arg) => {
            let xs = val(*x).shape();
            let (outer, dim, inner) = split_dims(xs, *axis);
            let mut d = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                for i in 0..inner {
                    d[(o * dim + arg[o * inner + i]) * inner + i] = g.data()[o * inner + i];
                }
            }
            res.push((*x, Tensor::from_vec(xs, d)));
        }
        Op::SegmentMax(x, arg) => {
            let xs = val(*x).shape();
            let c = xs[1];
            let mut d = vec![T::zero(); val(*x).numel()];
            for (k, &row) in arg.iter().enumerate() {
                d[row * c + k % c] += g.data()[k];
            }
            res.push((*x, Tensor::from_vec(xs, d)));
        }
        Op::Softmax(x) => {
            let cols = *out.shape().last().unwrap_or(&1);
            let mut d = vec![T::zero(); out.numel()];
            for (r, (yr, gr)) in out.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                for j in 0..cols {
                    d[r * cols + j] = yr[j] * (gr[j] - dot);
                }
            }
            res.push((*x, Tensor::from_vec(out.shape(), d)));
        }
        Op::RmsNorm(x, w, inv) => {
            let xv = val(*x);
            let wv = val(*w).data();
            let cols = wv.len();
            let nf = T::c(cols as f64);
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dw = vec![T::zero(); cols];
            for (r, (xr, gr)) in xv.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                let rr = inv[r];
                let dot: T = (0..cols).map(|j| wv[j] * gr[j] * xr[j]).sum();
                for j in 0..cols {
                    dx[r * cols + j] = rr * wv[j] * gr[j] - xr[j] * rr * rr * rr * dot / nf;
                    dw[j] += gr[j] * xr[j] * rr;
                }
            }
            res.push((*x, Tensor::from_vec(xv.shape(), dx)));
            res.push((*w, Tensor::from_vec(&[cols], dw)));
        }
        Op::IndexSelect(x, axis, idx) => {
            let xs = val(*x).shape();
            let (outer, dim, inner) = split_dims(xs, *axis);
            let mut d = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                for (j, &src) in idx.iter().enumerate() {
                    let gb = (o * idx.len() + j) * inner;
                    let db = (o * dim + src) * inner;
                    for t in 0..inner {
                        d[db + t] += g.data()[gb + t];
                    }
                }
            }
            res.push((*x, Tensor::from_vec(xs, d)));
        }
        Op::MaskedFill(x, keep) => {
            let d = g
                .data()
                .iter()
                .zip(keep)
                .map(|(&v, &k)| if k { v } else { T::zero() })
                .collect();
            res.push((*x, Tensor::from_vec(out.shape(), d)));
        }
        Op::Dropout(x, scales) => {
            let d = g.data().iter().zip(scales).map(|(&v, &s)| v * s).collect();
            res.push((*x, Tensor::from_vec(out.shape(), d)));
        }
        Op::Custom(inputs, op) => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            let grads = op.backward(&ins, out, g)?;
            for (&v, gin) in inputs.iter().zip(grads) {
                if let Some(gin) = gin {
                    if gin.shape() != val(v).shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: op.name(),
                            lhs: val(v).shape().to_vec(),
                            rhs: gin.shape().to_vec(),
                        });
                    }
                    res.push((v, gin));
                }
            }
        }
    }
    Ok(res)
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data)
    }

    #[test]
    fn add_small_vectors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_matches_hand_expansion() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = g.constant(t(&[3, 2], &[7., 8., 9., 10., 11., 12.])).unwrap();
        let c = g.matmul(a, b).unwrap();
        // [1*7+2*9+3*11, 1*8+2*10+3*12; 4*7+5*9+6*11, 4*8+5*10+6*12]
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
        assert_eq!(g.shape(c), &[2, 2]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        // a second pass accumulates
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[4], &[0.3, -1.2, 2.0, 0.5])).unwrap();
        let s = g.softmax(x, None).unwrap();
        let l = g.sum_all(s).unwrap();
        g.backward(l).unwrap();
        for v in g.grad(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn fully_masked_softmax_row_is_zero_with_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let mask = Mask::new(vec![2, 3], vec![true, false, true, false, false, false]).unwrap();
        let s = g.softmax(x, Some(&mask)).unwrap();
        let out = g.value(s).data().to_vec();
        assert_eq!(out[1], 0.0);
        assert_eq!(&out[3..], &[0.0, 0.0, 0.0]);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
        let w = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let p = g.mul(s, w).unwrap();
        let l = g.sum_all(p).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap().data();
        assert_eq!(&gx[3..], &[0.0, 0.0, 0.0]);
        assert_eq!(gx[1], 0.0);
    }

    #[test]
    fn domain_errors_are_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        let y = g.constant(t(&[2], &[1.0, -1.0])).unwrap();
        assert!(matches!(g.div(y, x), Err(TensorError::Domain { .. })));
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
        assert!(matches!(g.sqrt(y), Err(TensorError::Domain { .. })));
        let big = g.constant(t(&[1], &[1000.0])).unwrap();
        assert!(matches!(g.exp(big), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        assert!(g.matmul(a, c).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[3], &[1., 2., 3.])).unwrap();
        assert_eq!(g.dropout(a, 0.5).unwrap(), a);
        let mut g = Graph::<f64>::new().train_mode(7);
        let a = g.leaf(Tensor::full(&[1000], 1.0)).unwrap();
        let d = g.dropout(a, 0.1).unwrap();
        let kept = g.value(d).data().iter().filter(|v| **v != 0.0).count();
        assert!((850..950).contains(&kept), "{kept}");
        for &v in g.value(d).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 1, 2], &[1., 2., 3., 4.])).unwrap();
        let b = g.constant(t(&[2, 1], &[10., 100.])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[210., 430.]);
    }
}
