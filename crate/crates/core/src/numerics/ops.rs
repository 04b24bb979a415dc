//! Element-wise, reduction and layout ops.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};
use crate::par;

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(format!("{op}: {:?} vs {:?}", tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn unary(tape: &mut Tape, x: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
    let xv = tape.value(x);
    let out = Tensor::from_fn(xv.shape(), |i| f(xv.data()[i]));
    // df(input, output) -> local derivative
    tape.push(out, &[x], move || {
        move |ctx| {
            let xd = ctx.inputs[0].data();
            let yd = ctx.output.data();
            let g = ctx
                .grad
                .iter()
                .zip(xd.iter().zip(yd))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        }
    })
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] + bv.data()[i]);
        Ok(self.push(out, &[a, b], || {
            |ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] - bv.data()[i]);
        Ok(self.push(out, &[a, b], || {
            |ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|g| -g).collect())]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] * bv.data()[i]);
        Ok(self.push(out, &[a, b], || {
            |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.grad.iter().zip(b).map(|(g, b)| g * b).collect();
                let gb = ctx.grad.iter().zip(a).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }
        }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| c * xv.data()[i]);
        self.push(out, &[x], move || {
            move |ctx| vec![Some(ctx.grad.iter().map(|g| c * g).collect())]
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        unary(self, x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.record_kinks(x);
        unary(self, x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        unary(self, x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        unary(self, x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], move || move |ctx| vec![Some(vec![ctx.grad[0]; n])])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of `x * w` with a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if self.shape(x) != w.shape() {
            return shape_err(format!("weighted_sum: {:?} vs {:?}", self.shape(x), w.shape()));
        }
        let s: f64 = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let w = w.data().to_vec();
        Ok(self.push(Tensor::scalar(s), &[x], move || {
            move |ctx| vec![Some(w.iter().map(|w| w * ctx.grad[0]).collect())]
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.push(out, &[x], || |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return shape_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, parts, move || {
            move |ctx| {
                let mut grads: Vec<Vec<f64>> = sizes.iter().map(|sz| Vec::with_capacity(outer * sz * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &sz) in grads.iter_mut().zip(&sizes) {
                        g.extend_from_slice(&ctx.grad[off..off + sz * inner]);
                        off += sz * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }
        }))
    }

    /// Reorders the axes of a rank-3 tensor: output axis `i` is input axis
    /// `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return shape_err(format!("invalid permutation {perm:?}"));
            }
            seen[p] = true;
        }
        let out = permute_data(self.value(x).data(), dims, perm);
        let out_dims = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
        let mut inv = [0; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let t = Tensor::new(out_dims.to_vec(), out)?;
        Ok(self.push(t, &[x], move || {
            move |ctx| vec![Some(permute_data(ctx.grad, out_dims, inv))]
        }))
    }

    /// `x[start..end]` of a rank-1 tensor.
    pub fn slice1(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 1 || start > end || end > xv.len() {
            return shape_err(format!("slice {start}..{end} of tensor with shape {:?}", xv.shape()));
        }
        let n = xv.len();
        let out = Tensor::new(vec![end - start], xv.data()[start..end].to_vec())?;
        Ok(self.push(out, &[x], move || {
            move |ctx| {
                let mut g = vec![0.0; n];
                g[start..end].copy_from_slice(ctx.grad);
                vec![Some(g)]
            }
        }))
    }

    /// Applies a constant matrix `m` of shape `[rows, cols]` along the last
    /// axis: `out[..., r] = sum_c m[r, c] * x[..., c]`.
    pub fn matmul_last(&mut self, x: Var, m: &Arc<Tensor>) -> Result<Var> {
        let [rows, cols] = m.dims2()?;
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&cols) {
            return shape_err(format!("matmul_last: input {xs:?} does not end in {cols}"));
        }
        let lead: usize = xs[..xs.len() - 1].iter().product();
        let out = apply_matrix_rows(self.value(x).data(), lead, m.data(), rows, cols, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = rows;
        let t = Tensor::new(shape, out)?;
        let m = Arc::clone(m);
        Ok(self.push(t, &[x], move || {
            move |ctx| vec![Some(apply_matrix_rows(ctx.grad, lead, m.data(), rows, cols, true))]
        }))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn permute_data(src: &[f64], dims: [usize; 3], perm: [usize; 3]) -> Vec<f64> {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let od = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
    let os = [strides[perm[0]], strides[perm[1]], strides[perm[2]]];
    let mut out = Vec::with_capacity(src.len());
    for i in 0..od[0] {
        for j in 0..od[1] {
            let base = i * os[0] + j * os[1];
            out.extend((0..od[2]).map(|k| src[base + k * os[2]]));
        }
    }
    out
}

const ROW_BLOCK: usize = 64;

/// `lead` rows of length `cols` (or `rows` when `transpose`) multiplied by
/// `m^T` (or `m`). Row blocks are fixed-size so results do not depend on
/// the thread count.
pub(crate) fn apply_matrix_rows(
    x: &[f64],
    lead: usize,
    m: &[f64],
    rows: usize,
    cols: usize,
    transpose: bool,
) -> Vec<f64> {
    let (in_w, out_w) = if transpose { (rows, cols) } else { (cols, rows) };
    let mut out = vec![0.0; lead * out_w];
    let mview = ArrayView2::from_shape((rows, cols), m).expect("matrix shape");
    par::for_each_chunk(&mut out, ROW_BLOCK * out_w, |blk, chunk| {
        let n = chunk.len() / out_w;
        let r0 = blk * ROW_BLOCK;
        let xin = ArrayView2::from_shape((n, in_w), &x[r0 * in_w..(r0 + n) * in_w]).expect("rows");
        let mut o = ArrayViewMut2::from_shape((n, out_w), chunk).expect("rows");
        if transpose {
            general_mat_mul(1.0, &xin, &mview, 0.0, &mut o);
        } else {
            general_mat_mul(1.0, &xin, &mview.t(), 0.0, &mut o);
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.square(x);
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute_data(t.data(), [2, 3, 4], [1, 2, 0]);
        let back = permute_data(&p, [3, 4, 2], [2, 0, 1]);
        assert_eq!(back, t.data());
        // element (a=1, b=2, c=3) lands at (b, c, a)
        assert_eq!(p[2 * 8 + 3 * 2 + 1], t.data()[12 + 8 + 3]);
    }

    #[test]
    fn concat_middle_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 1, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
    }

    #[test]
    fn matmul_last_matches_loops() {
        let m = Arc::new(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin()));
        let x = Tensor::from_fn(&[2, 70, 5], |i| (i as f64 * 0.11).cos());
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = tape.matmul_last(xv, &m).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[2, 70, 3]);
        for r in 0..140 {
            for o in 0..3 {
                let want: f64 = (0..5).map(|c| m.data()[o * 5 + c] * x.data()[r * 5 + c]).sum();
                assert!((yv.data()[r * 3 + o] - want).abs() < 1e-12);
            }
        }
    }
}
