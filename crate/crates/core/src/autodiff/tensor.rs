//! Dense row-major f64 tensor values.
//!
//! A `Tensor` is an immutable value: cloning shares the underlying buffer.
//! All computation happens through the kernels below or through tape ops
//! (see [`crate::autodiff::tape`]).

use crate::error::{Error, Result};
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct Tensor {
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
}

impl Tensor {
    /// Build a tensor, validating length and finiteness.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape: shape.to_vec(),
                reason: format!("data length {} != numel {}", data.len(), numel),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new".into()));
        }
        Ok(Self::from_raw(data, shape.to_vec()))
    }

    /// Internal constructor; callers guarantee length/finiteness.
    pub(crate) fn from_raw(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            data: Arc::new(data),
            shape,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_raw(vec![v], vec![])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_raw(vec![0.0; shape.iter().product()], shape.to_vec())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::from_raw(vec![1.0; shape.iter().product()], shape.to_vec())
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::from_raw(vec![v; shape.iter().product()], shape.to_vec())
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_raw(data, vec![n])
    }

    /// Rows-of-equal-length constructor for 2-D tensors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidShape {
                    op: "Tensor::from_rows",
                    shape: vec![r, row.len()],
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(data, &[r, c])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterpret with a new shape of equal element count (zero copy).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("numel {} != {}", numel, self.numel()),
            });
        }
        Ok(Tensor {
            data: Arc::clone(&self.data),
            shape: shape.to_vec(),
        })
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn allclose(&self, other: &Tensor, tol: f64) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style trailing broadcast of two shapes.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides (in elements) of a row-major shape.
fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides for reading `shape` as if broadcast to `out_shape` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let nat = strides_of(shape);
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { nat[i] };
    }
    s
}

/// Elementwise binary op with broadcasting.
pub(crate) fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data: Vec<f64> = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        return Ok(Tensor::from_raw(data, a.shape.clone()));
    }
    let out_shape = broadcast_shapes(op, &a.shape, &b.shape)?;
    let numel: usize = out_shape.iter().product();
    // Fast path: b broadcasts over the trailing axis block (e.g. matrix + row).
    if b.numel() > 0 && numel % b.numel() == 0 {
        let bs = broadcast_strides(&b.shape, &out_shape);
        let contiguous_tail = {
            let nat = strides_of(&out_shape);
            let k = out_shape.len() - b.shape.len();
            b.shape.iter().all(|_| true) && bs[k..] == nat[k..] && bs[..k].iter().all(|&s| s == 0)
        };
        if contiguous_tail && a.shape == out_shape {
            let bn = b.numel();
            let mut data = Vec::with_capacity(numel);
            for (i, x) in a.data.iter().enumerate() {
                data.push(f(*x, b.data[i % bn]));
            }
            return Ok(Tensor::from_raw(data, out_shape));
        }
    }
    // General case: stride walk.
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..numel {
        let mut oa = 0usize;
        let mut ob = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            oa += i * sa[d];
            ob += i * sb[d];
        }
        data.push(f(a.data[oa], b.data[ob]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_raw(data, out_shape))
}

/// Sum `grad` down to `target` shape (inverse of broadcasting).
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let gshape = grad.shape().to_vec();
    let offset = gshape.len() - target.len();
    let mut out = vec![0.0; target.iter().product()];
    let st = strides_of(target);
    let mut idx = vec![0usize; gshape.len()];
    for g in grad.data().iter() {
        let mut ot = 0usize;
        for d in 0..target.len() {
            if target[d] != 1 {
                ot += idx[offset + d] * st[d];
            }
        }
        out[ot] += *g;
        for d in (0..gshape.len()).rev() {
            idx[d] += 1;
            if idx[d] < gshape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_raw(out, target.to_vec())
}

// ---------------------------------------------------------------------------
// Kernels (value-level forward computations)
// ---------------------------------------------------------------------------

pub(crate) fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(a.data.iter().map(|x| f(*x)).collect(), a.shape.clone())
}

/// 2-D matrix product via dgemm.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor::from_raw(c, vec![m, n]))
}

/// dgemm with arbitrary strides, accumulating `alpha * a·b + beta * c`.
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched matmul: (B,m,k)x(B,k,n), with batch broadcast when either side is 2-D.
pub(crate) fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, sa) = split_batch(a)?;
    let (bb, sb) = split_batch(b)?;
    if sa[1] != sb[0] || (ba != bb && ba != 1 && bb != 1) {
        return Err(Error::ShapeMismatch {
            op: "bmm",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let batch = ba.max(bb);
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        let ao = if ba == 1 { 0 } else { i * m * k };
        let bo = if bb == 1 { 0 } else { i * k * n };
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr().add(ao),
                k as isize,
                1,
                b.data.as_ptr().add(bo),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr().add(i * m * n),
                n as isize,
                1,
            );
        }
    }
    let mut shape = if a.rank() == 3 || b.rank() == 3 {
        vec![batch]
    } else {
        vec![]
    };
    shape.push(m);
    shape.push(n);
    Ok(Tensor::from_raw(out, shape))
}

fn split_batch(t: &Tensor) -> Result<(usize, [usize; 2])> {
    match t.rank() {
        2 => Ok((1, [t.shape[0], t.shape[1]])),
        3 => Ok((t.shape[0], [t.shape[1], t.shape[2]])),
        _ => Err(Error::InvalidShape {
            op: "bmm",
            shape: t.shape.clone(),
            reason: "rank must be 2 or 3".into(),
        }),
    }
}

/// Sum over one axis.
pub(crate) fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::InvalidShape {
            op: "sum_axis",
            shape: a.shape.clone(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let outer: usize = a.shape[..axis].iter().product();
    let mid = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += a.data[base + i];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    Ok(Tensor::from_raw(out, shape))
}

/// Broadcast a reduced-over-`axis` gradient back to the original shape.
pub(crate) fn unsum_axis(g: &Tensor, orig_shape: &[usize], axis: usize) -> Tensor {
    let outer: usize = orig_shape[..axis].iter().product();
    let mid = orig_shape[axis];
    let inner: usize = orig_shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * mid * inner];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let gbase = o * inner;
            out[base..base + inner].copy_from_slice(&g.data[gbase..gbase + inner]);
        }
    }
    Tensor::from_raw(out, orig_shape.to_vec())
}

/// Softmax over the last axis.
pub(crate) fn softmax(a: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 {
        return Err(Error::InvalidShape {
            op: "softmax",
            shape: a.shape.clone(),
            reason: "rank 0".into(),
        });
    }
    let inner = *a.shape.last().unwrap();
    let outer = a.numel() / inner;
    let mut out = vec![0.0; a.numel()];
    for o in 0..outer {
        let row = &a.data[o * inner..(o + 1) * inner];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (i, v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[o * inner + i] = e;
            z += e;
        }
        for i in 0..inner {
            out[o * inner + i] /= z;
        }
    }
    Ok(Tensor::from_raw(out, a.shape.clone()))
}

/// Log-softmax over the last axis.
pub(crate) fn log_softmax(a: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 {
        return Err(Error::InvalidShape {
            op: "log_softmax",
            shape: a.shape.clone(),
            reason: "rank 0".into(),
        });
    }
    let inner = *a.shape.last().unwrap();
    let outer = a.numel() / inner;
    let mut out = vec![0.0; a.numel()];
    for o in 0..outer {
        let row = &a.data[o * inner..(o + 1) * inner];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let lz = z.ln() + mx;
        for i in 0..inner {
            out[o * inner + i] = row[i] - lz;
        }
    }
    Ok(Tensor::from_raw(out, a.shape.clone()))
}

/// Concatenate along `axis`.
pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::InvalidShape {
            op: "concat",
            shape: first.shape.clone(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let mut cat_dim = 0usize;
    for p in parts {
        if p.rank() != rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        for d in 0..rank {
            if d != axis && p.shape[d] != first.shape[d] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        cat_dim += p.shape[axis];
    }
    let mut shape = first.shape.clone();
    shape[axis] = cat_dim;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let span = p.shape[axis] * inner;
            out.extend_from_slice(&p.data[o * span..(o + 1) * span]);
        }
    }
    Ok(Tensor::from_raw(out, shape))
}

/// Slice `[start, end)` per axis.
pub(crate) fn slice(a: &Tensor, ranges: &[(usize, usize)]) -> Result<Tensor> {
    if ranges.len() != a.rank() {
        return Err(Error::InvalidShape {
            op: "slice",
            shape: a.shape.clone(),
            reason: format!("expected {} ranges, got {}", a.rank(), ranges.len()),
        });
    }
    for (d, &(s, e)) in ranges.iter().enumerate() {
        if s > e || e > a.shape[d] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: a.shape.clone(),
                reason: format!("range {s}..{e} invalid on axis {d}"),
            });
        }
    }
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let strides = strides_of(&a.shape);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    copy_slice_rec(a, ranges, &strides, 0, 0, &mut out);
    Ok(Tensor::from_raw(out, out_shape))
}

fn copy_slice_rec(
    a: &Tensor,
    ranges: &[(usize, usize)],
    strides: &[usize],
    dim: usize,
    offset: usize,
    out: &mut Vec<f64>,
) {
    if dim == ranges.len() - 1 {
        let (s, e) = ranges[dim];
        out.extend_from_slice(&a.data[offset + s..offset + e]);
        return;
    }
    let (s, e) = ranges[dim];
    for i in s..e {
        copy_slice_rec(a, ranges, strides, dim + 1, offset + i * strides[dim], out);
    }
}

/// Scatter `g` back into a zero tensor of `orig_shape` at `ranges` (slice adjoint).
pub(crate) fn unslice(g: &Tensor, orig_shape: &[usize], ranges: &[(usize, usize)]) -> Tensor {
    let mut out = vec![0.0; orig_shape.iter().product()];
    let strides = strides_of(orig_shape);
    let mut pos = 0usize;
    scatter_slice_rec(g, ranges, &strides, 0, 0, &mut out, &mut pos);
    Tensor::from_raw(out, orig_shape.to_vec())
}

fn scatter_slice_rec(
    g: &Tensor,
    ranges: &[(usize, usize)],
    strides: &[usize],
    dim: usize,
    offset: usize,
    out: &mut [f64],
    pos: &mut usize,
) {
    if dim == ranges.len() - 1 {
        let (s, e) = ranges[dim];
        let n = e - s;
        out[offset + s..offset + e].copy_from_slice(&g.data()[*pos..*pos + n]);
        *pos += n;
        return;
    }
    let (s, e) = ranges[dim];
    for i in s..e {
        scatter_slice_rec(g, ranges, strides, dim + 1, offset + i * strides[dim], out, pos);
    }
}

/// Permute axes.
pub(crate) fn permute(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    if perm.len() != a.rank() {
        return Err(Error::InvalidShape {
            op: "permute",
            shape: a.shape.clone(),
            reason: format!("perm {perm:?}"),
        });
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::InvalidArgument(format!("bad permutation {perm:?}")));
        }
        seen[p] = true;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
    let in_strides = strides_of(&a.shape);
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = a.numel();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..numel {
        let mut o = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            o += i * perm_strides[d];
        }
        out.push(a.data[o]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_raw(out, out_shape))
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Select rows (leading-axis entries) by index, repeats allowed.
pub(crate) fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if a.rank() == 0 {
        return Err(Error::InvalidShape {
            op: "gather_rows",
            shape: a.shape.clone(),
            reason: "rank 0".into(),
        });
    }
    let rows = a.shape[0];
    let inner: usize = a.shape[1..].iter().product();
    let mut out = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        if i >= rows {
            return Err(Error::InvalidArgument(format!(
                "gather index {i} out of range 0..{rows}"
            )));
        }
        out.extend_from_slice(&a.data[i * inner..(i + 1) * inner]);
    }
    let mut shape = a.shape.clone();
    shape[0] = idx.len();
    Ok(Tensor::from_raw(out, shape))
}

/// Adjoint of gather_rows: scatter-add gradient rows.
pub(crate) fn scatter_add_rows(g: &Tensor, idx: &[usize], orig_shape: &[usize]) -> Tensor {
    let inner: usize = orig_shape[1..].iter().product();
    let mut out = vec![0.0; orig_shape.iter().product()];
    for (r, &i) in idx.iter().enumerate() {
        let src = &g.data()[r * inner..(r + 1) * inner];
        let dst = &mut out[i * inner..(i + 1) * inner];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }
    Tensor::from_raw(out, orig_shape.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let a = Tensor::new((0..9).map(|v| v as f64).collect(), &[3, 3]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_mismatch_reports_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_row_vector() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![10.0, 20.0], &[2]).unwrap();
        let c = binary_broadcast("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn broadcast_reduce_roundtrip() {
        let g = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[6.0, 15.0]);
    }

    #[test]
    fn slice_and_unslice() {
        let a = Tensor::new((0..12).map(|v| v as f64).collect(), &[3, 4]).unwrap();
        let s = slice(&a, &[(1, 3), (0, 2)]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.0, 5.0, 8.0, 9.0]);
        let u = unslice(&s, &[3, 4], &[(1, 3), (0, 2)]);
        assert_eq!(u.data()[4], 4.0);
        assert_eq!(u.data()[0], 0.0);
    }

    #[test]
    fn permute_transpose() {
        let a = Tensor::new((0..6).map(|v| v as f64).collect(), &[2, 3]).unwrap();
        let t = permute(&a, &[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let a = Tensor::new((0..6).map(|v| v as f64).collect(), &[3, 2]).unwrap();
        let g = gather_rows(&a, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = scatter_add_rows(&g, &[2, 0, 2], &[3, 2]);
        assert_eq!(s.data(), &[0.0, 1.0, 0.0, 0.0, 8.0, 10.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]).unwrap();
        let s = softmax(&a).unwrap();
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::new(vec![f64::NAN], &[1]).is_err());
        assert!(Tensor::new(vec![f64::INFINITY], &[1]).is_err());
    }
}
