//! 2-D convolution kernels (zero padding, stride 1).
//!
//! Two forward implementations exist on purpose:
//!
//! * [`conv2d_direct`] — the textbook nested-loop reference. Slow,
//!   obviously correct; it is the in-tree oracle.
//! * [`conv2d_blocked`] — loop-reordered so the innermost statement is a
//!   contiguous `out += w * x_row` update the compiler vectorizes. This
//!   is what the tape runs.
//!
//! Both must agree to 1e-10 (tested below). The backward kernels share
//! the blocked structure.
//!
//! Layout: `x` is `[C, H, W]` row-major, `w` is `[OC, IC, KH, KW]`,
//! `b` is `[OC]`, output is `[OC, OH, OW]` with
//! `OH = H + 2*pad - KH + 1` (and likewise OW).

/// Static geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    /// True when the kernel fits inside the padded input.
    pub fn valid(&self) -> bool {
        self.h + 2 * self.pad + 1 > self.kh && self.w + 2 * self.pad + 1 > self.kw
    }

    fn check(&self, x: &[f64], w: &[f64], b: &[f64], out: &[f64]) {
        debug_assert_eq!(x.len(), self.c_in * self.h * self.w);
        debug_assert_eq!(w.len(), self.c_out * self.c_in * self.kh * self.kw);
        debug_assert_eq!(b.len(), self.c_out);
        debug_assert_eq!(out.len(), self.c_out * self.out_h() * self.out_w());
    }
}

/// Reference kernel: direct nested loops over every output element.
pub fn conv2d_direct(d: ConvDims, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    d.check(x, w, b, out);
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let p = d.pad as isize;
    for oc in 0..d.c_out {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut acc = b[oc];
                for ic in 0..d.c_in {
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let ih = oh as isize + kh as isize - p;
                            let iw = ow as isize + kw as isize - p;
                            if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize {
                                continue; // zero padding
                            }
                            let xv = x[(ic * d.h + ih as usize) * d.w + iw as usize];
                            let wv = w[((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oc * oh_n + oh) * ow_n + ow] = acc;
            }
        }
    }
}

/// Valid loop bounds for one kernel offset `k` against extent `n`:
/// output index range whose input index `o + k - pad` stays in `[0, n)`.
#[inline]
fn valid_range(k: usize, pad: usize, n: usize, out_n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad - k).min(out_n);
    (lo, hi.max(lo))
}

/// Fast kernel: per (oc, ic, kh, kw) weight, one contiguous axpy per row.
pub fn conv2d_blocked(d: ConvDims, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    d.check(x, w, b, out);
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    for oc in 0..d.c_out {
        let out_c = &mut out[oc * oh_n * ow_n..(oc + 1) * oh_n * ow_n];
        out_c.fill(b[oc]);
        for ic in 0..d.c_in {
            let x_c = &x[ic * d.h * d.w..(ic + 1) * d.h * d.w];
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(kh, d.pad, d.h, oh_n);
                for kw in 0..d.kw {
                    let wv = w[((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ow_lo, ow_hi) = valid_range(kw, d.pad, d.w, ow_n);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - d.pad;
                        let iw0 = ow_lo + kw - d.pad;
                        let xs = &x_c[ih * d.w + iw0..ih * d.w + iw0 + (ow_hi - ow_lo)];
                        let os = &mut out_c[oh * ow_n + ow_lo..oh * ow_n + ow_hi];
                        for (o, xv) in os.iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate dL/dx into `dx` given upstream `dout`. Caller zeroes `dx`.
pub fn conv2d_backward_input(d: ConvDims, w: &[f64], dout: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), d.c_in * d.h * d.w);
    debug_assert_eq!(dout.len(), d.c_out * d.out_h() * d.out_w());
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    for oc in 0..d.c_out {
        let dout_c = &dout[oc * oh_n * ow_n..(oc + 1) * oh_n * ow_n];
        for ic in 0..d.c_in {
            let dx_c = &mut dx[ic * d.h * d.w..(ic + 1) * d.h * d.w];
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(kh, d.pad, d.h, oh_n);
                for kw in 0..d.kw {
                    let wv = w[((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ow_lo, ow_hi) = valid_range(kw, d.pad, d.w, ow_n);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - d.pad;
                        let iw0 = ow_lo + kw - d.pad;
                        let gs = &dout_c[oh * ow_n + ow_lo..oh * ow_n + ow_hi];
                        let xs = &mut dx_c[ih * d.w + iw0..ih * d.w + iw0 + (ow_hi - ow_lo)];
                        for (xv, g) in xs.iter_mut().zip(gs) {
                            *xv += wv * g;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate dL/dw and dL/db. Caller zeroes `dw`/`db`.
pub fn conv2d_backward_params(
    d: ConvDims,
    x: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    debug_assert_eq!(dw.len(), d.c_out * d.c_in * d.kh * d.kw);
    debug_assert_eq!(db.len(), d.c_out);
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    for oc in 0..d.c_out {
        let dout_c = &dout[oc * oh_n * ow_n..(oc + 1) * oh_n * ow_n];
        db[oc] += dout_c.iter().sum::<f64>();
        for ic in 0..d.c_in {
            let x_c = &x[ic * d.h * d.w..(ic + 1) * d.h * d.w];
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(kh, d.pad, d.h, oh_n);
                for kw in 0..d.kw {
                    let (ow_lo, ow_hi) = valid_range(kw, d.pad, d.w, ow_n);
                    if ow_lo >= ow_hi || oh_lo >= oh_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - d.pad;
                        let iw0 = ow_lo + kw - d.pad;
                        let gs = &dout_c[oh * ow_n + ow_lo..oh * ow_n + ow_hi];
                        let xs = &x_c[ih * d.w + iw0..ih * d.w + iw0 + (ow_hi - ow_lo)];
                        acc += gs.iter().zip(xs).map(|(g, xv)| g * xv).sum::<f64>();
                    }
                    dw[((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw] += acc;
                }
            }
        }
    }
}
