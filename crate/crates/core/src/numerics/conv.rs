//! Causal 2-D convolutions over `[channels, time, frequency]` maps.
//!
//! Time taps look only into the past: for a kernel of `kt` frames, tap `j`
//! reads input frame `t + j - (kt - 1)`, so the last tap is the current
//! frame. Frequency taps are centred: tap `j` reads bin offset
//! `j - (kf - 1) / 2`. Weights are laid out `[c_out, c_in / groups, kt, kf]`.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::par;

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kt: usize,
    pub kf: usize,
    pub frames: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub stride_f: usize,
    /// Frequency-upsampling (transposed) convolution.
    pub transposed: bool,
}

/// Affine run of (input bin, output bin) pairs contributed by one
/// frequency tap: `fi = fi0 + j * si`, `fo = fo0 + j * so` for `j < n`.
#[derive(Clone, Copy, Debug)]
struct Run {
    fi0: usize,
    fo0: usize,
    n: usize,
    si: usize,
    so: usize,
}

impl ConvGeom {
    fn pad_lo(&self) -> isize {
        ((self.kf - 1) / 2) as isize
    }

    fn cin_pg(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_pg(&self) -> usize {
        self.c_out / self.groups
    }

    fn run(&self, tap: usize) -> Run {
        let off = tap as isize - self.pad_lo();
        let (fi_n, fo_n) = (self.f_in as isize, self.f_out as isize);
        if self.transposed {
            // fo = s * fi + off
            let s = self.stride_f as isize;
            let lo = if off < 0 { (-off + s - 1) / s } else { 0 };
            let hi = ((fo_n - 1 - off).div_euclid(s) + 1).min(fi_n);
            let n = (hi - lo).max(0) as usize;
            Run {
                fi0: lo as usize,
                fo0: if n > 0 { (s * lo + off) as usize } else { 0 },
                n,
                si: 1,
                so: self.stride_f,
            }
        } else {
            // fi = s * fo + off
            let s = self.stride_f as isize;
            let lo = if off < 0 { (-off + s - 1) / s } else { 0 };
            let hi = ((fi_n - 1 - off).div_euclid(s) + 1).min(fo_n);
            let n = (hi - lo).max(0) as usize;
            Run {
                fi0: if n > 0 { (s * lo + off) as usize } else { 0 },
                fo0: lo as usize,
                n,
                si: self.stride_f,
                so: 1,
            }
        }
    }

    fn weight_len(&self) -> usize {
        self.c_out * self.cin_pg() * self.kt * self.kf
    }

    fn w_index(&self, co: usize, cil: usize, t: usize, f: usize) -> usize {
        ((co * self.cin_pg() + cil) * self.kt + t) * self.kf + f
    }
}

/// Output frequency size of a strided (non-transposed) convolution.
pub fn conv_out_bins(f_in: usize, stride_f: usize) -> usize {
    f_in.div_ceil(stride_f)
}

#[inline]
fn axpy_run(out: &mut [f64], x: &[f64], w: f64, r: Run, swap: bool) {
    // swap=false: out[fo] += w * x[fi]; swap=true: out[fi] += w * x[fo]
    let (o0, os, i0, is) = if swap {
        (r.fi0, r.si, r.fo0, r.so)
    } else {
        (r.fo0, r.so, r.fi0, r.si)
    };
    if os == 1 && is == 1 {
        for (o, v) in out[o0..o0 + r.n].iter_mut().zip(&x[i0..i0 + r.n]) {
            *o += w * v;
        }
    } else {
        for j in 0..r.n {
            out[o0 + j * os] += w * x[i0 + j * is];
        }
    }
}

#[inline]
fn dot_run(g: &[f64], x: &[f64], r: Run) -> f64 {
    if r.si == 1 && r.so == 1 {
        g[r.fo0..r.fo0 + r.n]
            .iter()
            .zip(&x[r.fi0..r.fi0 + r.n])
            .map(|(a, b)| a * b)
            .sum()
    } else {
        (0..r.n).map(|j| g[r.fo0 + j * r.so] * x[r.fi0 + j * r.si]).sum()
    }
}

fn conv_forward(geom: &ConvGeom, runs: &[Run], x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (t_n, fi_n, fo_n) = (geom.frames, geom.f_in, geom.f_out);
    let mut out = vec![0.0; geom.c_out * t_n * fo_n];
    par::for_each_chunk(&mut out, fo_n, |row, orow| {
        let (co, t) = (row / t_n, row % t_n);
        orow.fill(b[co]);
        let g = co / geom.cout_pg();
        for cil in 0..geom.cin_pg() {
            let ci = g * geom.cin_pg() + cil;
            for tap_t in 0..geom.kt {
                let Some(ti) = (t + tap_t).checked_sub(geom.kt - 1) else {
                    continue;
                };
                let xrow = &x[(ci * t_n + ti) * fi_n..][..fi_n];
                for (tap_f, r) in runs.iter().enumerate() {
                    let wv = w[geom.w_index(co, cil, tap_t, tap_f)];
                    if wv != 0.0 {
                        axpy_run(orow, xrow, wv, *r, false);
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input(geom: &ConvGeom, runs: &[Run], g: &[f64], w: &[f64]) -> Vec<f64> {
    let (t_n, fi_n, fo_n) = (geom.frames, geom.f_in, geom.f_out);
    let mut gx = vec![0.0; geom.c_in * t_n * fi_n];
    par::for_each_chunk(&mut gx, fi_n, |row, xrow| {
        let (ci, ti) = (row / t_n, row % t_n);
        let grp = ci / geom.cin_pg();
        let cil = ci % geom.cin_pg();
        for co in grp * geom.cout_pg()..(grp + 1) * geom.cout_pg() {
            for tap_t in 0..geom.kt {
                let t = ti + geom.kt - 1 - tap_t;
                if t >= t_n {
                    continue;
                }
                let grow = &g[(co * t_n + t) * fo_n..][..fo_n];
                for (tap_f, r) in runs.iter().enumerate() {
                    let wv = w[geom.w_index(co, cil, tap_t, tap_f)];
                    if wv != 0.0 {
                        axpy_run(xrow, grow, wv, *r, true);
                    }
                }
            }
        }
    });
    gx
}

fn conv_backward_weight(geom: &ConvGeom, runs: &[Run], g: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (t_n, fi_n, fo_n) = (geom.frames, geom.f_in, geom.f_out);
    let per_co = geom.cin_pg() * geom.kt * geom.kf;
    let mut gw = vec![0.0; geom.weight_len()];
    par::for_each_chunk(&mut gw, per_co, |co, wrow| {
        let grp = co / geom.cout_pg();
        for cil in 0..geom.cin_pg() {
            let ci = grp * geom.cin_pg() + cil;
            for tap_t in 0..geom.kt {
                for (tap_f, r) in runs.iter().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..t_n {
                        let Some(ti) = (t + tap_t).checked_sub(geom.kt - 1) else {
                            continue;
                        };
                        let grow = &g[(co * t_n + t) * fo_n..][..fo_n];
                        let xrow = &x[(ci * t_n + ti) * fi_n..][..fi_n];
                        acc += dot_run(grow, xrow, *r);
                    }
                    wrow[(cil * geom.kt + tap_t) * geom.kf + tap_f] = acc;
                }
            }
        }
    });
    let gb = (0..geom.c_out)
        .map(|co| g[co * t_n * fo_n..(co + 1) * t_n * fo_n].iter().sum())
        .collect();
    (gw, gb)
}

impl Tape {
    fn conv_impl(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride_f: usize,
        groups: usize,
        transposed: bool,
    ) -> Result<Var> {
        if !(stride_f == 1 || stride_f == 2) {
            return arg_err(format!("stride_f must be 1 or 2, got {stride_f}"));
        }
        let [c_in, frames, f_in] = self.value(x).dims3()?;
        let ws = self.shape(weight).to_vec();
        let &[c_out, cin_pg, kt, kf] = ws.as_slice() else {
            return shape_err(format!("conv weight must be rank 4, got {ws:?}"));
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cin_pg != c_in / groups {
            return shape_err(format!(
                "conv weight {ws:?} incompatible with {c_in} input channels in {groups} groups"
            ));
        }
        if self.shape(bias) != [c_out] {
            return shape_err(format!("conv bias {:?}, expected [{c_out}]", self.shape(bias)));
        }
        if kt == 0 || kf == 0 || kf % 2 == 0 {
            return shape_err(format!("conv kernel {kt}x{kf}: frequency taps must be odd"));
        }
        let f_out = if transposed {
            f_in * stride_f
        } else {
            conv_out_bins(f_in, stride_f)
        };
        let geom = ConvGeom {
            c_in,
            c_out,
            groups,
            kt,
            kf,
            frames,
            f_in,
            f_out,
            stride_f,
            transposed,
        };
        let runs: Vec<Run> = (0..kf).map(|j| geom.run(j)).collect();
        let out = conv_forward(
            &geom,
            &runs,
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(vec![c_out, frames, f_out], out)?;
        let need_x = self.is_tracked(x);
        let need_w = self.is_tracked(weight) || self.is_tracked(bias);
        Ok(self.push(t, &[x, weight, bias], move || {
            move |ctx| {
                let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = need_x.then(|| conv_backward_input(&geom, &runs, ctx.grad, wd));
                let (gw, gb) = if need_w {
                    let (a, b) = conv_backward_weight(&geom, &runs, ctx.grad, xd);
                    (Some(a), Some(b))
                } else {
                    (None, None)
                };
                vec![gx, gw, gb]
            }
        }))
    }

    /// Causal convolution. `groups == c_in` gives a depthwise convolution.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride_f: usize, groups: usize) -> Result<Var> {
        self.conv_impl(x, weight, bias, stride_f, groups, false)
    }

    /// Causal convolution that upsamples frequency by `stride_f`.
    pub fn conv2d_transposed(&mut self, x: Var, weight: Var, bias: Var, stride_f: usize, groups: usize) -> Result<Var> {
        self.conv_impl(x, weight, bias, stride_f, groups, true)
    }
}

/// Plain nested-loop causal convolution used as a reference in tests.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, b: &[f64], stride_f: usize, groups: usize, transposed: bool) -> Tensor {
    let [_, t_n, f_in] = x.dims3().unwrap();
    let ws = w.shape();
    let (c_out, cin_pg, kt, kf) = (ws[0], ws[1], ws[2], ws[3]);
    let cout_pg = c_out / groups;
    let pad = ((kf - 1) / 2) as isize;
    let f_out = if transposed {
        f_in * stride_f
    } else {
        f_in.div_ceil(stride_f)
    };
    let mut out = Tensor::zeros(&[c_out, t_n, f_out]);
    let xd = x.data();
    let wd = w.data();
    let o = out.data_mut();
    for co in 0..c_out {
        let grp = co / cout_pg;
        for t in 0..t_n {
            for fo in 0..f_out {
                let mut acc = b[co];
                for cil in 0..cin_pg {
                    let ci = grp * cin_pg + cil;
                    for a in 0..kt {
                        let ti = t as isize + a as isize - (kt as isize - 1);
                        if ti < 0 {
                            continue;
                        }
                        for c in 0..kf {
                            let off = c as isize - pad;
                            let fi = if transposed {
                                let num = fo as isize - off;
                                if num.rem_euclid(stride_f as isize) != 0 {
                                    continue;
                                }
                                num / stride_f as isize
                            } else {
                                fo as isize * stride_f as isize + off
                            };
                            if fi < 0 || fi >= f_in as isize {
                                continue;
                            }
                            acc += wd[((co * cin_pg + cil) * kt + a) * kf + c]
                                * xd[(ci * t_n + ti as usize) * f_in + fi as usize];
                        }
                    }
                }
                o[(co * t_n + t) * f_out + fo] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn run(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, groups: usize, tr: bool) -> Tensor {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(Tensor::new(vec![b.len()], b.to_vec()).unwrap());
        let y = if tr {
            tape.conv2d_transposed(xv, wv, bv, stride, groups).unwrap()
        } else {
            tape.conv2d(xv, wv, bv, stride, groups).unwrap()
        };
        tape.value(y).clone()
    }

    #[test]
    fn matches_reference_for_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c_in, c_out, groups, kt, kf, f, stride, tr) in &[
            (3, 4, 1, 3, 3, 7, 1, false),
            (3, 4, 1, 3, 3, 7, 2, false),
            (4, 4, 1, 3, 3, 8, 2, false),
            (4, 4, 4, 3, 3, 9, 1, false),
            (4, 4, 4, 3, 3, 6, 2, false),
            (4, 6, 1, 1, 1, 5, 1, false),
            (4, 4, 4, 3, 3, 5, 2, true),
            (2, 3, 1, 3, 3, 4, 2, true),
        ] {
            let x = rand_tensor(&[c_in, 6, f], &mut rng);
            let w = rand_tensor(&[c_out, c_in / groups, kt, kf], &mut rng);
            let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = run(&x, &w, &b, stride, groups, tr);
            let want = conv2d_reference(&x, &w, &b, stride, groups, tr);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let y = run(&Tensor::zeros(&[2, 5, 9]), &w, &[0.0; 4], 1, 1, false);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let wt = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let y = run(&Tensor::zeros(&[2, 5, 9]), &wt, &[0.0; 2], 2, 1, true);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_is_identity() {
        // depthwise delta at the current frame, centre bin; then identity pointwise
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 5, 7], &mut rng);
        let mut dw = Tensor::zeros(&[2, 1, 3, 3]);
        for c in 0..2 {
            dw.data_mut()[c * 9 + 2 * 3 + 1] = 1.0;
        }
        let mid = run(&x, &dw, &[0.0; 2], 1, 2, false);
        let pw = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = run(&mid, &pw, &[0.0; 2], 1, 1, false);
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_halves_with_ceiling() {
        let w = Tensor::zeros(&[64, 1, 3, 3]);
        let y = run(&Tensor::zeros(&[64, 45, 256]), &w, &[0.0; 64], 2, 64, false);
        assert_eq!(y.shape(), &[64, 45, 128]);
        assert_eq!(conv_out_bins(1025, 2), 513);
        assert_eq!(conv_out_bins(7, 2), 4);
    }

    #[test]
    fn transposed_doubles_bins() {
        let w = Tensor::zeros(&[64, 1, 3, 3]);
        let y = run(&Tensor::zeros(&[64, 45, 32]), &w, &[0.0; 64], 2, 64, true);
        assert_eq!(y.shape(), &[64, 45, 64]);
    }

    #[test]
    fn transposed_impulse_support() {
        let mut x = Tensor::zeros(&[1, 8, 6]);
        x.data_mut()[3 * 6 + 2] = 1.0;
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = run(&x, &w, &[0.0], 2, 1, true);
        let ref_y = conv2d_reference(&x, &w, &[0.0], 2, 1, true);
        assert_eq!(y, ref_y);
        let mut frames = std::collections::BTreeSet::new();
        let mut bins = std::collections::BTreeSet::new();
        for t in 0..8 {
            for f in 0..12 {
                if y.data()[t * 12 + f] != 0.0 {
                    frames.insert(t);
                    bins.insert(f);
                }
            }
        }
        assert!(frames.iter().all(|&t| (3..=5).contains(&t)));
        assert!(bins.len() <= 3);
        assert!(bins.iter().all(|&f| (3..=5).contains(&f)));
    }

    #[test]
    fn rejects_bad_stride_and_shapes() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.conv2d(x, w, b, 3, 1).is_err());
        let w_bad = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        assert!(tape.conv2d(x, w_bad, b, 1, 1).is_err());
        let b_bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.conv2d(x, w, b_bad, 1, 1).is_err());
    }
}
