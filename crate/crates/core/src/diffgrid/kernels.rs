//! Dense numeric kernels behind the tape operations.
//!
//! Layouts are row-major throughout: feature maps `[n, c, d, h, w]`,
//! convolution kernels `[c_out, c_in, ks, ks, ks]`, transposed-convolution
//! kernels `[c_in, c_out, 2, 2, 2]`, matrices `[rows, cols]`. All loops run
//! in a fixed order so results are bit-reproducible.

use crate::scalar::Scalar;

/// Dot product with sixteen running partials; fixed association order.
#[inline(always)]
fn dot8<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc0 = [S::zero(); 8];
    let mut acc1 = [S::zero(); 8];
    let mut ca = a.chunks_exact(16);
    let mut cb = b.chunks_exact(16);
    for (av, bv) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..8 {
            acc0[l] = av[l].mul_add(bv[l], acc0[l]);
            acc1[l] = av[8 + l].mul_add(bv[8 + l], acc1[l]);
        }
    }
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut ca8 = ra.chunks_exact(8);
    let mut cb8 = rb.chunks_exact(8);
    for (av, bv) in ca8.by_ref().zip(cb8.by_ref()) {
        for l in 0..8 {
            acc0[l] = av[l].mul_add(bv[l], acc0[l]);
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ca8.remainder().iter().zip(cb8.remainder()) {
        tail = x.mul_add(y, tail);
    }
    let s0 = ((acc0[0] + acc0[1]) + (acc0[2] + acc0[3]))
        + ((acc0[4] + acc0[5]) + (acc0[6] + acc0[7]));
    let s1 = ((acc1[0] + acc1[1]) + (acc1[2] + acc1[3]))
        + ((acc1[4] + acc1[5]) + (acc1[6] + acc1[7]));
    s0 + s1 + tail
}

/// `out += c * x`, eight lanes at a time.
#[inline(always)]
fn axpy<S: Scalar>(out: &mut [S], x: &[S], c: S) {
    debug_assert_eq!(out.len(), x.len());
    let mut co = out.chunks_exact_mut(8);
    let mut cx = x.chunks_exact(8);
    for (ov, xv) in co.by_ref().zip(cx.by_ref()) {
        for l in 0..8 {
            ov[l] = c.mul_add(xv[l], ov[l]);
        }
    }
    for (o, &xv) in co.into_remainder().iter_mut().zip(cx.remainder()) {
        *o = c.mul_add(xv, *o);
    }
}

/// Copies `x`'s channels into `xp` with a one-voxel zero halo around each.
///
/// `xp` must be zero-filled on first use; the halo is never written after
/// that, so the buffer can be reused across samples.
fn pad_channels<S: Scalar>(
    x: &[S],
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    xp: &mut [S],
) {
    let map = d * h * w;
    let (ph, pw) = (h + 2, w + 2);
    let pmap = (d + 2) * ph * pw;
    for ic in 0..ci {
        let src = &x[ic * map..][..map];
        let dst = &mut xp[ic * pmap..][..pmap];
        for dz in 0..d {
            for hy in 0..h {
                let s = (dz * h + hy) * w;
                let t = ((dz + 1) * ph + (hy + 1)) * pw + 1;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
}

/// One output row of a padded 3x3x3 correlation, all taps applied while the
/// row accumulator stays in registers. `W2 = W + 2`.
#[inline(always)]
fn conv3_row<S: Scalar, const W: usize, const W2: usize>(
    xp: &[S],
    ci: usize,
    pmap: usize,
    ph: usize,
    pw: usize,
    k: &[S],
    oc: usize,
    dz: usize,
    hy: usize,
    bias: S,
    orow: &mut [S],
) {
    let mut acc = [bias; W];
    for ic in 0..ci {
        let xch = &xp[ic * pmap..][..pmap];
        let kch = &k[(oc * ci + ic) * 27..][..27];
        for kd in 0..3 {
            let zbase = (dz + kd) * ph;
            for kh in 0..3 {
                let base = (zbase + hy + kh) * pw;
                let xrow: &[S; W2] = xch[base..base + W2].try_into().unwrap();
                let kt = &kch[(kd * 3 + kh) * 3..][..3];
                for l in 0..W {
                    acc[l] = kt[0].mul_add(xrow[l], acc[l]);
                }
                for l in 0..W {
                    acc[l] = kt[1].mul_add(xrow[l + 1], acc[l]);
                }
                for l in 0..W {
                    acc[l] = kt[2].mul_add(xrow[l + 2], acc[l]);
                }
            }
        }
    }
    orow.copy_from_slice(&acc);
}

/// 3x3x3 correlation over a pre-padded input, dispatched on row width so the
/// per-row loops unroll at compile time.
fn conv3_padded<S: Scalar, const W: usize, const W2: usize>(
    xp: &[S],
    dims: [usize; 5],
    k: &[S],
    co: usize,
    bias: Option<&[S]>,
    out: &mut [S],
) {
    let [_, ci, d, h, w] = dims;
    let map = d * h * w;
    let (ph, pw) = (h + 2, w + 2);
    let pmap = (d + 2) * ph * pw;
    for oc in 0..co {
        let b = bias.map_or_else(S::zero, |bv| bv[oc]);
        let out_map = &mut out[oc * map..][..map];
        for dz in 0..d {
            for hy in 0..h {
                let orow = &mut out_map[(dz * h + hy) * w..][..w];
                conv3_row::<S, W, W2>(xp, ci, pmap, ph, pw, k, oc, dz, hy, b, orow);
            }
        }
    }
}

/// Same-size 3-D cross-correlation with zero padding `(ks - 1) / 2`.
///
/// `x: [n, ci, d, h, w]`, `k: [co, ci, ks, ks, ks]`, `out: [n, co, d, h, w]`.
pub(crate) fn conv_fwd<S: Scalar>(
    x: &[S],
    dims: [usize; 5],
    k: &[S],
    co: usize,
    ks: usize,
    bias: Option<&[S]>,
    out: &mut [S],
) {
    let [n, ci, d, h, w] = dims;
    let map = d * h * w;
    if ks == 3 && matches!(w, 2 | 4 | 8 | 16 | 32 | 64 | 96) {
        let pmap = (d + 2) * (h + 2) * (w + 2);
        let mut xp = vec![S::zero(); ci * pmap];
        for bn in 0..n {
            pad_channels(&x[bn * ci * map..][..ci * map], ci, d, h, w, &mut xp);
            let sdims = [1, ci, d, h, w];
            let sout = &mut out[bn * co * map..][..co * map];
            match w {
                2 => conv3_padded::<S, 2, 4>(&xp, sdims, k, co, bias, sout),
                4 => conv3_padded::<S, 4, 6>(&xp, sdims, k, co, bias, sout),
                8 => conv3_padded::<S, 8, 10>(&xp, sdims, k, co, bias, sout),
                16 => conv3_padded::<S, 16, 18>(&xp, sdims, k, co, bias, sout),
                32 => conv3_padded::<S, 32, 34>(&xp, sdims, k, co, bias, sout),
                64 => conv3_padded::<S, 64, 66>(&xp, sdims, k, co, bias, sout),
                _ => conv3_padded::<S, 96, 98>(&xp, sdims, k, co, bias, sout),
            }
        }
        return;
    }
    conv_fwd_generic(x, dims, k, co, ks, bias, out);
}

/// Fallback correlation for widths without a specialized row kernel.
fn conv_fwd_generic<S: Scalar>(
    x: &[S],
    dims: [usize; 5],
    k: &[S],
    co: usize,
    ks: usize,
    bias: Option<&[S]>,
    out: &mut [S],
) {
    let [n, ci, d, h, w] = dims;
    let pad = (ks - 1) / 2;
    let map = d * h * w;
    debug_assert_eq!(x.len(), n * ci * map);
    debug_assert_eq!(k.len(), co * ci * ks * ks * ks);
    debug_assert_eq!(out.len(), n * co * map);
    for bn in 0..n {
        for oc in 0..co {
            let out_map = &mut out[(bn * co + oc) * map..][..map];
            out_map.fill(bias.map_or_else(S::zero, |bv| bv[oc]));
            for ic in 0..ci {
                let x_map = &x[(bn * ci + ic) * map..][..map];
                for kd in 0..ks {
                    let d_lo = pad.saturating_sub(kd);
                    let d_hi = (d + pad).saturating_sub(kd).min(d);
                    if d_lo >= d_hi {
                        continue;
                    }
                    for kh in 0..ks {
                        let h_lo = pad.saturating_sub(kh);
                        let h_hi = (h + pad).saturating_sub(kh).min(h);
                        if h_lo >= h_hi {
                            continue;
                        }
                        for kw in 0..ks {
                            let w_lo = pad.saturating_sub(kw);
                            let w_hi = (w + pad).saturating_sub(kw).min(w);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let len = w_hi - w_lo;
                            let src_w = w_lo + kw - pad;
                            let kv = k[(((oc * ci + ic) * ks + kd) * ks + kh) * ks + kw];
                            // Full-width taps keep consecutive rows (and,
                            // at full height, consecutive slices) contiguous
                            // in both maps, so the update fuses into longer
                            // spans.
                            if len == w && h_lo == 0 && h_hi == h {
                                let span = (d_hi - d_lo) * h * w;
                                let ostart = d_lo * h * w;
                                let xstart = (d_lo + kd - pad) * h * w;
                                axpy(
                                    &mut out_map[ostart..ostart + span],
                                    &x_map[xstart..xstart + span],
                                    kv,
                                );
                            } else if len == w {
                                let span = (h_hi - h_lo) * w;
                                for dz in d_lo..d_hi {
                                    let sz = dz + kd - pad;
                                    let ostart = (dz * h + h_lo) * w;
                                    let xstart = (sz * h + h_lo + kh - pad) * w;
                                    axpy(
                                        &mut out_map[ostart..ostart + span],
                                        &x_map[xstart..xstart + span],
                                        kv,
                                    );
                                }
                            } else {
                                for dz in d_lo..d_hi {
                                    let sz = dz + kd - pad;
                                    for hy in h_lo..h_hi {
                                        let sy = hy + kh - pad;
                                        let ostart = (dz * h + hy) * w + w_lo;
                                        let xstart = (sz * h + sy) * w + src_w;
                                        axpy(
                                            &mut out_map[ostart..ostart + len],
                                            &x_map[xstart..xstart + len],
                                            kv,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv_fwd`] w.r.t. its input: correlation of `u` with the
/// spatially flipped, channel-transposed kernel.
pub(crate) fn conv_grad_input<S: Scalar>(
    u: &[S],
    u_dims: [usize; 5],
    k: &[S],
    ci: usize,
    ks: usize,
    out: &mut [S],
) {
    let [n, co, d, h, w] = u_dims;
    let mut kf = vec![S::zero(); k.len()];
    for oc in 0..co {
        for ic in 0..ci {
            for kd in 0..ks {
                for kh in 0..ks {
                    for kw in 0..ks {
                        kf[(((ic * co + oc) * ks + (ks - 1 - kd)) * ks + (ks - 1 - kh)) * ks
                            + (ks - 1 - kw)] =
                            k[(((oc * ci + ic) * ks + kd) * ks + kh) * ks + kw];
                    }
                }
            }
        }
    }
    conv_fwd(u, [n, co, d, h, w], &kf, ci, ks, None, out);
}

/// Fixed-order horizontal sum of a row accumulator.
#[inline(always)]
fn hsum<S: Scalar>(acc: &[S]) -> S {
    let mut s = S::zero();
    for &v in acc {
        s += v;
    }
    s
}

/// Kernel-gradient accumulation over a pre-padded input; one `(kd, kh)` tap
/// row at a time with three register accumulators, one per `kw`.
fn conv3_grad_kernel_padded<S: Scalar, const W: usize, const W2: usize>(
    xp: &[S],
    dims: [usize; 5],
    u: &[S],
    co: usize,
    dk: &mut [S],
) {
    let [_, ci, d, h, w] = dims;
    let map = d * h * w;
    let (ph, pw) = (h + 2, w + 2);
    let pmap = (d + 2) * ph * pw;
    for oc in 0..co {
        let u_map = &u[oc * map..][..map];
        for ic in 0..ci {
            let xch = &xp[ic * pmap..][..pmap];
            for kd in 0..3 {
                for kh in 0..3 {
                    let mut acc0 = [S::zero(); W];
                    let mut acc1 = [S::zero(); W];
                    let mut acc2 = [S::zero(); W];
                    for dz in 0..d {
                        let zbase = (dz + kd) * ph;
                        for hy in 0..h {
                            let urow: &[S; W] =
                                u_map[(dz * h + hy) * w..][..w].try_into().unwrap();
                            let base = (zbase + hy + kh) * pw;
                            let xrow: &[S; W2] = xch[base..base + W2].try_into().unwrap();
                            for l in 0..W {
                                acc0[l] = urow[l].mul_add(xrow[l], acc0[l]);
                            }
                            for l in 0..W {
                                acc1[l] = urow[l].mul_add(xrow[l + 1], acc1[l]);
                            }
                            for l in 0..W {
                                acc2[l] = urow[l].mul_add(xrow[l + 2], acc2[l]);
                            }
                        }
                    }
                    let tap = ((oc * ci + ic) * 3 + kd) * 9 + kh * 3;
                    dk[tap] += hsum(&acc0);
                    dk[tap + 1] += hsum(&acc1);
                    dk[tap + 2] += hsum(&acc2);
                }
            }
        }
    }
}

/// Gradient of [`conv_fwd`] w.r.t. the kernel.
///
/// `dk[oc, ic, kd, kh, kw] = sum over n and valid positions of
/// x[n, ic, pos + tap - pad] * u[n, oc, pos]`.
pub(crate) fn conv_grad_kernel<S: Scalar>(
    x: &[S],
    dims: [usize; 5],
    u: &[S],
    co: usize,
    ks: usize,
    dk: &mut [S],
) {
    let [n, ci, d, h, w] = dims;
    let map = d * h * w;
    debug_assert_eq!(dk.len(), co * ci * ks * ks * ks);
    dk.fill(S::zero());
    if ks == 3 && matches!(w, 2 | 4 | 8 | 16 | 32 | 64 | 96) {
        let pmap = (d + 2) * (h + 2) * (w + 2);
        let mut xp = vec![S::zero(); ci * pmap];
        for bn in 0..n {
            pad_channels(&x[bn * ci * map..][..ci * map], ci, d, h, w, &mut xp);
            let sdims = [1, ci, d, h, w];
            let su = &u[bn * co * map..][..co * map];
            match w {
                2 => conv3_grad_kernel_padded::<S, 2, 4>(&xp, sdims, su, co, dk),
                4 => conv3_grad_kernel_padded::<S, 4, 6>(&xp, sdims, su, co, dk),
                8 => conv3_grad_kernel_padded::<S, 8, 10>(&xp, sdims, su, co, dk),
                16 => conv3_grad_kernel_padded::<S, 16, 18>(&xp, sdims, su, co, dk),
                32 => conv3_grad_kernel_padded::<S, 32, 34>(&xp, sdims, su, co, dk),
                64 => conv3_grad_kernel_padded::<S, 64, 66>(&xp, sdims, su, co, dk),
                _ => conv3_grad_kernel_padded::<S, 96, 98>(&xp, sdims, su, co, dk),
            }
        }
        return;
    }
    conv_grad_kernel_generic(x, dims, u, co, ks, dk);
}

/// Fallback kernel gradient for widths without a specialized row kernel.
fn conv_grad_kernel_generic<S: Scalar>(
    x: &[S],
    dims: [usize; 5],
    u: &[S],
    co: usize,
    ks: usize,
    dk: &mut [S],
) {
    let [n, ci, d, h, w] = dims;
    let pad = (ks - 1) / 2;
    let map = d * h * w;
    for bn in 0..n {
        for oc in 0..co {
            let u_map = &u[(bn * co + oc) * map..][..map];
            for ic in 0..ci {
                let x_map = &x[(bn * ci + ic) * map..][..map];
                for kd in 0..ks {
                    let d_lo = pad.saturating_sub(kd);
                    let d_hi = (d + pad).saturating_sub(kd).min(d);
                    if d_lo >= d_hi {
                        continue;
                    }
                    for kh in 0..ks {
                        let h_lo = pad.saturating_sub(kh);
                        let h_hi = (h + pad).saturating_sub(kh).min(h);
                        if h_lo >= h_hi {
                            continue;
                        }
                        for kw in 0..ks {
                            let w_lo = pad.saturating_sub(kw);
                            let w_hi = (w + pad).saturating_sub(kw).min(w);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let len = w_hi - w_lo;
                            let src_w = w_lo + kw - pad;
                            let mut acc = S::zero();
                            if len == w && h_lo == 0 && h_hi == h {
                                let span = (d_hi - d_lo) * h * w;
                                let ustart = d_lo * h * w;
                                let xstart = (d_lo + kd - pad) * h * w;
                                acc = dot8(
                                    &u_map[ustart..ustart + span],
                                    &x_map[xstart..xstart + span],
                                );
                            } else if len == w {
                                let span = (h_hi - h_lo) * w;
                                for dz in d_lo..d_hi {
                                    let sz = dz + kd - pad;
                                    let ustart = (dz * h + h_lo) * w;
                                    let xstart = (sz * h + h_lo + kh - pad) * w;
                                    acc += dot8(
                                        &u_map[ustart..ustart + span],
                                        &x_map[xstart..xstart + span],
                                    );
                                }
                            } else {
                                for dz in d_lo..d_hi {
                                    let sz = dz + kd - pad;
                                    for hy in h_lo..h_hi {
                                        let sy = hy + kh - pad;
                                        let ustart = (dz * h + hy) * w + w_lo;
                                        let xstart = (sz * h + sy) * w + src_w;
                                        acc += dot8(
                                            &u_map[ustart..ustart + len],
                                            &x_map[xstart..xstart + len],
                                        );
                                    }
                                }
                            }
                            dk[(((oc * ci + ic) * ks + kd) * ks + kh) * ks + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution, kernel 2, stride 2: each input voxel scatters
/// into a disjoint 2x2x2 output block.
///
/// `x: [n, ci, d, h, w]`, `k: [ci, co, 2, 2, 2]`, `out: [n, co, 2d, 2h, 2w]`.
pub(crate) fn upconv_fwd<S: Scalar>(
    x: &[S],
    dims: [usize; 5],
    k: &[S],
    co: usize,
    bias: Option<&[S]>,
    out: &mut [S],
) {
    let [n, ci, d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let omap = od * oh * ow;
    debug_assert_eq!(k.len(), ci * co * 8);
    debug_assert_eq!(out.len(), n * co * omap);
    for bn in 0..n {
        for oc in 0..co {
            let out_map = &mut out[(bn * co + oc) * omap..][..omap];
            out_map.fill(bias.map_or_else(S::zero, |bv| bv[oc]));
            for ic in 0..ci {
                let x_map = &x[(bn * ci + ic) * d * h * w..][..d * h * w];
                for kd in 0..2 {
                    for kh in 0..2 {
                        for kw in 0..2 {
                            let kv = k[(((ic * co + oc) * 2 + kd) * 2 + kh) * 2 + kw];
                            for dz in 0..d {
                                for hy in 0..h {
                                    let xrow = &x_map[(dz * h + hy) * w..][..w];
                                    let obase = ((2 * dz + kd) * oh + (2 * hy + kh)) * ow + kw;
                                    let orow = &mut out_map[obase..obase + 2 * w - 1];
                                    for (i, &xv) in xrow.iter().enumerate() {
                                        orow[2 * i] = kv.mul_add(xv, orow[2 * i]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`upconv_fwd`] w.r.t. its input: stride-2 correlation of `u`.
pub(crate) fn upconv_grad_input<S: Scalar>(
    u: &[S],
    u_dims: [usize; 5],
    k: &[S],
    ci: usize,
    out: &mut [S],
) {
    let [n, co, od, oh, ow] = u_dims;
    let (d, h, w) = (od / 2, oh / 2, ow / 2);
    let map = d * h * w;
    debug_assert_eq!(out.len(), n * ci * map);
    for bn in 0..n {
        for ic in 0..ci {
            let out_map = &mut out[(bn * ci + ic) * map..][..map];
            out_map.fill(S::zero());
            for oc in 0..co {
                let u_map = &u[(bn * co + oc) * od * oh * ow..][..od * oh * ow];
                for kd in 0..2 {
                    for kh in 0..2 {
                        for kw in 0..2 {
                            let kv = k[(((ic * co + oc) * 2 + kd) * 2 + kh) * 2 + kw];
                            for dz in 0..d {
                                for hy in 0..h {
                                    let ubase = ((2 * dz + kd) * oh + (2 * hy + kh)) * ow + kw;
                                    let urow = &u_map[ubase..ubase + 2 * w - 1];
                                    let orow = &mut out_map[(dz * h + hy) * w..][..w];
                                    for (i, o) in orow.iter_mut().enumerate() {
                                        *o = kv.mul_add(urow[2 * i], *o);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`upconv_fwd`] w.r.t. the kernel.
pub(crate) fn upconv_grad_kernel<S: Scalar>(
    x: &[S],
    dims: [usize; 5],
    u: &[S],
    co: usize,
    dk: &mut [S],
) {
    let [n, ci, d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    debug_assert_eq!(dk.len(), ci * co * 8);
    dk.fill(S::zero());
    for bn in 0..n {
        for ic in 0..ci {
            let x_map = &x[(bn * ci + ic) * d * h * w..][..d * h * w];
            for oc in 0..co {
                let u_map = &u[(bn * co + oc) * od * oh * ow..][..od * oh * ow];
                for kd in 0..2 {
                    for kh in 0..2 {
                        for kw in 0..2 {
                            let mut acc = S::zero();
                            for dz in 0..d {
                                for hy in 0..h {
                                    let xrow = &x_map[(dz * h + hy) * w..][..w];
                                    let ubase = ((2 * dz + kd) * oh + (2 * hy + kh)) * ow + kw;
                                    let urow = &u_map[ubase..ubase + 2 * w - 1];
                                    for (i, &xv) in xrow.iter().enumerate() {
                                        acc = xv.mul_add(urow[2 * i], acc);
                                    }
                                }
                            }
                            dk[(((ic * co + oc) * 2 + kd) * 2 + kh) * 2 + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2x2 max pooling with stride 2. Returns the flat index (into `x`) of
/// the first row-major maximum of every block, for gradient routing.
pub(crate) fn maxpool_fwd<S: Scalar>(
    x: &[S],
    dims: [usize; 5],
    out: &mut [S],
    idx: &mut Vec<usize>,
) {
    let [n, c, d, h, w] = dims;
    let (pd, ph, pw) = (d / 2, h / 2, w / 2);
    idx.clear();
    idx.reserve(n * c * pd * ph * pw);
    let mut o = 0;
    for bn in 0..n {
        for ch in 0..c {
            let base = (bn * c + ch) * d * h * w;
            for dz in 0..pd {
                for hy in 0..ph {
                    for wx in 0..pw {
                        let mut best_i = base + ((2 * dz) * h + 2 * hy) * w + 2 * wx;
                        let mut best = x[best_i];
                        for kd in 0..2 {
                            for kh in 0..2 {
                                for kw in 0..2 {
                                    let i = base
                                        + ((2 * dz + kd) * h + (2 * hy + kh)) * w
                                        + (2 * wx + kw);
                                    if x[i] > best {
                                        best = x[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out[o] = best;
                        idx.push(best_i);
                        o += 1;
                    }
                }
            }
        }
    }
}

/// Routes pooled gradients back to the argmax voxels; everything else zero.
pub(crate) fn unpool_scatter<S: Scalar>(u: &[S], idx: &[usize], out: &mut [S]) {
    out.fill(S::zero());
    for (p, &i) in idx.iter().enumerate() {
        out[i] += u[p];
    }
}

/// Adjoint of [`unpool_scatter`]: reads the argmax voxels back out.
pub(crate) fn pool_gather<S: Scalar>(v: &[S], idx: &[usize], out: &mut [S]) {
    for (p, &i) in idx.iter().enumerate() {
        out[p] = v[i];
    }
}

/// `a [n, k] * b [k, m]`, optionally transposing either factor
/// (`ta`: `a` is stored `[k, n]`; `tb`: `b` is stored `[m, k]`).
pub(crate) fn matmul<S: Scalar>(
    a: &[S],
    b: &[S],
    n: usize,
    k: usize,
    m: usize,
    ta: bool,
    tb: bool,
    out: &mut [S],
) {
    debug_assert!(!(ta && tb), "doubly transposed product is never emitted");
    debug_assert_eq!(out.len(), n * m);
    out.fill(S::zero());
    if !ta && !tb {
        for i in 0..n {
            let orow = &mut out[i * m..][..m];
            for kk in 0..k {
                let av = a[i * k + kk];
                let brow = &b[kk * m..][..m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = av.mul_add(bv, *o);
                }
            }
        }
    } else if ta {
        for kk in 0..k {
            let arow = &a[kk * n..][..n];
            let brow = &b[kk * m..][..m];
            for i in 0..n {
                let av = arow[i];
                let orow = &mut out[i * m..][..m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = av.mul_add(bv, *o);
                }
            }
        }
    } else {
        for i in 0..n {
            let arow = &a[i * k..][..k];
            for j in 0..m {
                out[i * m + j] = dot8(arow, &b[j * k..][..k]);
            }
        }
    }
}

/// Per-out-channel reduction of `[n, c, d, h, w]` over batch and space.
pub(crate) fn bias_grad_ncdhw<S: Scalar>(u: &[S], dims: [usize; 5], out: &mut [S]) {
    let [n, c, d, h, w] = dims;
    let map = d * h * w;
    out.fill(S::zero());
    for bn in 0..n {
        for ch in 0..c {
            let u_map = &u[(bn * c + ch) * map..][..map];
            let mut acc = S::zero();
            for &v in u_map {
                acc += v;
            }
            out[ch] += acc;
        }
    }
}
