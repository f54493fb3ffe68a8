//! Raw array kernels behind the graph ops.
//!
//! Everything here is single-threaded with fixed row-major loop order, so
//! summation order (and therefore every float result) is reproducible across
//! runs. Backward kernels accumulate with `+=` into caller-provided buffers.

use crate::real::Real;
use crate::tensor::Shape;

/// (out_channels, in_channels, kernel_h, kernel_w)
pub type WeightDims = (usize, usize, usize, usize);

pub fn conv2d_out_shape(xs: Shape, wd: WeightDims, stride: usize, pad: usize) -> Shape {
    let oh = (xs.h + 2 * pad - wd.2) / stride + 1;
    let ow = (xs.w + 2 * pad - wd.3) / stride + 1;
    Shape::new(xs.n, wd.0, oh, ow)
}

pub fn conv2d_forward<T: Real>(
    x: &[T],
    xs: Shape,
    w: &[T],
    wd: WeightDims,
    b: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
    os: Shape,
) {
    let (_, cin, kh, kw) = wd;
    for n in 0..os.n {
        for co in 0..os.c {
            let bias = b.map_or(T::zero(), |bb| bb[co]);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = bias;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xs.idx(n, ci, iy as usize, 0);
                            let wrow = ((co * cin + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                acc = acc + x[xrow + ix as usize] * w[wrow + kx];
                            }
                        }
                    }
                    out[os.idx(n, co, oy, ox)] = acc;
                }
            }
        }
    }
}

pub fn conv2d_backward_input<T: Real>(
    gout: &[T],
    os: Shape,
    w: &[T],
    wd: WeightDims,
    stride: usize,
    pad: usize,
    gx: &mut [T],
    xs: Shape,
) {
    let (_, cin, kh, kw) = wd;
    for n in 0..os.n {
        for co in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = gout[os.idx(n, co, oy, ox)];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let wrow = ((co * cin + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                let i = xs.idx(n, ci, iy as usize, ix as usize);
                                gx[i] = gx[i] + g * w[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_weight<T: Real>(
    gout: &[T],
    os: Shape,
    x: &[T],
    xs: Shape,
    stride: usize,
    pad: usize,
    gw: &mut [T],
    wd: WeightDims,
) {
    let (_, cin, kh, kw) = wd;
    for n in 0..os.n {
        for co in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = gout[os.idx(n, co, oy, ox)];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let wrow = ((co * cin + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                gw[wrow + kx] =
                                    gw[wrow + kx] + g * x[xs.idx(n, ci, iy as usize, ix as usize)];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_bias<T: Real>(gout: &[T], os: Shape, gb: &mut [T]) {
    for n in 0..os.n {
        for co in 0..os.c {
            let mut acc = T::zero();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    acc = acc + gout[os.idx(n, co, oy, ox)];
                }
            }
            gb[co] = gb[co] + acc;
        }
    }
}

pub fn avg_pool2_forward<T: Real>(x: &[T], xs: Shape, out: &mut [T], os: Shape) {
    let quarter = T::of(0.25);
    for n in 0..os.n {
        for c in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let y = oy * 2;
                    let xx = ox * 2;
                    let s = x[xs.idx(n, c, y, xx)]
                        + x[xs.idx(n, c, y, xx + 1)]
                        + x[xs.idx(n, c, y + 1, xx)]
                        + x[xs.idx(n, c, y + 1, xx + 1)];
                    out[os.idx(n, c, oy, ox)] = s * quarter;
                }
            }
        }
    }
}

pub fn avg_pool2_backward<T: Real>(gout: &[T], os: Shape, gx: &mut [T], xs: Shape) {
    let quarter = T::of(0.25);
    for n in 0..os.n {
        for c in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = gout[os.idx(n, c, oy, ox)] * quarter;
                    let y = oy * 2;
                    let xx = ox * 2;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = xs.idx(n, c, y + dy, xx + dx);
                        gx[i] = gx[i] + g;
                    }
                }
            }
        }
    }
}

/// Source coordinate for an output index under half-pixel-center resampling.
#[inline]
fn src_coord<T: Real>(o: usize, scale: T) -> T {
    (T::of_usize(o) + T::of(0.5)) * scale - T::of(0.5)
}

/// Corner indices and interpolation weight for 1-D edge-clamped sampling.
#[inline]
fn lerp_cell<T: Real>(coord: T, len: usize) -> (usize, usize, T) {
    let floor = coord.floor();
    let frac = coord - floor;
    let i0f = floor.as_f64();
    let hi = (len - 1) as f64;
    let i0 = if i0f < 0.0 {
        0
    } else if i0f > hi {
        len - 1
    } else {
        i0f as usize
    };
    let i1f = i0f + 1.0;
    let i1 = if i1f < 0.0 {
        0
    } else if i1f > hi {
        len - 1
    } else {
        i1f as usize
    };
    (i0, i1, frac)
}

pub fn bilinear_resize_forward<T: Real>(x: &[T], xs: Shape, out: &mut [T], os: Shape) {
    let sy = T::of_usize(xs.h) / T::of_usize(os.h);
    let sx = T::of_usize(xs.w) / T::of_usize(os.w);
    let one = T::one();
    for n in 0..os.n {
        for c in 0..os.c {
            for oy in 0..os.h {
                let (y0, y1, fy) = lerp_cell(src_coord(oy, sy), xs.h);
                for ox in 0..os.w {
                    let (x0, x1, fx) = lerp_cell(src_coord(ox, sx), xs.w);
                    let v00 = x[xs.idx(n, c, y0, x0)];
                    let v01 = x[xs.idx(n, c, y0, x1)];
                    let v10 = x[xs.idx(n, c, y1, x0)];
                    let v11 = x[xs.idx(n, c, y1, x1)];
                    out[os.idx(n, c, oy, ox)] = (one - fy) * ((one - fx) * v00 + fx * v01)
                        + fy * ((one - fx) * v10 + fx * v11);
                }
            }
        }
    }
}

pub fn bilinear_resize_backward<T: Real>(gout: &[T], os: Shape, gx: &mut [T], xs: Shape) {
    let sy = T::of_usize(xs.h) / T::of_usize(os.h);
    let sx = T::of_usize(xs.w) / T::of_usize(os.w);
    let one = T::one();
    for n in 0..os.n {
        for c in 0..os.c {
            for oy in 0..os.h {
                let (y0, y1, fy) = lerp_cell(src_coord(oy, sy), xs.h);
                for ox in 0..os.w {
                    let (x0, x1, fx) = lerp_cell(src_coord(ox, sx), xs.w);
                    let g = gout[os.idx(n, c, oy, ox)];
                    let i00 = xs.idx(n, c, y0, x0);
                    let i01 = xs.idx(n, c, y0, x1);
                    let i10 = xs.idx(n, c, y1, x0);
                    let i11 = xs.idx(n, c, y1, x1);
                    gx[i00] = gx[i00] + g * (one - fy) * (one - fx);
                    gx[i01] = gx[i01] + g * (one - fy) * fx;
                    gx[i10] = gx[i10] + g * fy * (one - fx);
                    gx[i11] = gx[i11] + g * fy * fx;
                }
            }
        }
    }
}

/// Samples `src` at per-pixel coordinates (u, v) in source pixel units.
/// Coordinates are edge-clamped (border mode); non-finite coordinates
/// produce 0 and receive no gradient.
pub fn grid_sample_forward<T: Real>(
    src: &[T],
    ss: Shape,
    u: &[T],
    v: &[T],
    gs: Shape,
    out: &mut [T],
    os: Shape,
) {
    let one = T::one();
    for n in 0..os.n {
        for y in 0..os.h {
            for x in 0..os.w {
                let gi = gs.idx(n, 0, y, x);
                let (uu, vv) = (u[gi], v[gi]);
                if !uu.is_finite() || !vv.is_finite() {
                    for c in 0..os.c {
                        out[os.idx(n, c, y, x)] = T::zero();
                    }
                    continue;
                }
                let (x0, x1, fx) = lerp_cell(uu, ss.w);
                let (y0, y1, fy) = lerp_cell(vv, ss.h);
                for c in 0..os.c {
                    let v00 = src[ss.idx(n, c, y0, x0)];
                    let v01 = src[ss.idx(n, c, y0, x1)];
                    let v10 = src[ss.idx(n, c, y1, x0)];
                    let v11 = src[ss.idx(n, c, y1, x1)];
                    out[os.idx(n, c, y, x)] = (one - fy) * ((one - fx) * v00 + fx * v01)
                        + fy * ((one - fx) * v10 + fx * v11);
                }
            }
        }
    }
}

/// Interpolation weights stop changing once a coordinate is clamped past the
/// border, so clamped axes contribute zero derivative.
#[allow(clippy::too_many_arguments)]
pub fn grid_sample_backward<T: Real>(
    gout: &[T],
    os: Shape,
    src: &[T],
    ss: Shape,
    u: &[T],
    v: &[T],
    gs: Shape,
    gsrc: Option<&mut [T]>,
    gu: Option<&mut [T]>,
    gv: Option<&mut [T]>,
) {
    let one = T::one();
    let mut gsrc = gsrc;
    let mut gu = gu;
    let mut gv = gv;
    for n in 0..os.n {
        for y in 0..os.h {
            for x in 0..os.w {
                let gi = gs.idx(n, 0, y, x);
                let (uu, vv) = (u[gi], v[gi]);
                if !uu.is_finite() || !vv.is_finite() {
                    continue;
                }
                let (x0, x1, fx) = lerp_cell(uu, ss.w);
                let (y0, y1, fy) = lerp_cell(vv, ss.h);
                let in_x = uu.as_f64() >= 0.0 && uu.as_f64() <= (ss.w - 1) as f64;
                let in_y = vv.as_f64() >= 0.0 && vv.as_f64() <= (ss.h - 1) as f64;
                let mut du = T::zero();
                let mut dv = T::zero();
                for c in 0..os.c {
                    let g = gout[os.idx(n, c, y, x)];
                    let v00 = src[ss.idx(n, c, y0, x0)];
                    let v01 = src[ss.idx(n, c, y0, x1)];
                    let v10 = src[ss.idx(n, c, y1, x0)];
                    let v11 = src[ss.idx(n, c, y1, x1)];
                    if let Some(gsrc) = gsrc.as_deref_mut() {
                        let i00 = ss.idx(n, c, y0, x0);
                        let i01 = ss.idx(n, c, y0, x1);
                        let i10 = ss.idx(n, c, y1, x0);
                        let i11 = ss.idx(n, c, y1, x1);
                        gsrc[i00] = gsrc[i00] + g * (one - fy) * (one - fx);
                        gsrc[i01] = gsrc[i01] + g * (one - fy) * fx;
                        gsrc[i10] = gsrc[i10] + g * fy * (one - fx);
                        gsrc[i11] = gsrc[i11] + g * fy * fx;
                    }
                    if in_x {
                        du = du + g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                    }
                    if in_y {
                        dv = dv + g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                }
                if let Some(gu) = gu.as_deref_mut() {
                    gu[gi] = gu[gi] + du;
                }
                if let Some(gv) = gv.as_deref_mut() {
                    gv[gi] = gv[gi] + dv;
                }
            }
        }
    }
}

fn box_taps(window: usize, pos: usize, len: usize) -> (usize, usize) {
    let r = (window / 2) as isize;
    let lo = (pos as isize - r).max(0) as usize;
    let hi = ((pos as isize + r) as usize).min(len - 1);
    (lo, hi)
}

/// Mean filter over a `window x window` neighborhood. At borders the divisor
/// shrinks to the in-bounds tap count, so a constant image stays constant.
pub fn box_filter_forward<T: Real>(x: &[T], xs: Shape, window: usize, out: &mut [T]) {
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                let (y0, y1) = box_taps(window, y, xs.h);
                for xx in 0..xs.w {
                    let (x0, x1) = box_taps(window, xx, xs.w);
                    let mut acc = T::zero();
                    for iy in y0..=y1 {
                        for ix in x0..=x1 {
                            acc = acc + x[xs.idx(n, c, iy, ix)];
                        }
                    }
                    let count = (y1 - y0 + 1) * (x1 - x0 + 1);
                    out[xs.idx(n, c, y, xx)] = acc / T::of_usize(count);
                }
            }
        }
    }
}

/// Adjoint: each output pixel spreads `gout / its own tap count` back over
/// its taps. The stencil is symmetric, so this is a gather of that scaled
/// field with no further normalization.
pub fn box_filter_backward<T: Real>(gout: &[T], xs: Shape, window: usize, gx: &mut [T]) {
    let mut scaled = alloc::vec![T::zero(); gout.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                let (y0, y1) = box_taps(window, y, xs.h);
                for xx in 0..xs.w {
                    let (x0, x1) = box_taps(window, xx, xs.w);
                    let count = (y1 - y0 + 1) * (x1 - x0 + 1);
                    let i = xs.idx(n, c, y, xx);
                    scaled[i] = gout[i] / T::of_usize(count);
                }
            }
        }
    }
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                let (y0, y1) = box_taps(window, y, xs.h);
                for xx in 0..xs.w {
                    let (x0, x1) = box_taps(window, xx, xs.w);
                    let mut acc = T::zero();
                    for iy in y0..=y1 {
                        for ix in x0..=x1 {
                            acc = acc + scaled[xs.idx(n, c, iy, ix)];
                        }
                    }
                    let i = xs.idx(n, c, y, xx);
                    gx[i] = gx[i] + acc;
                }
            }
        }
    }
}

/// Returns (summed loss, counted pixels) and fills `probs` with per-pixel
/// softmax values. `targets` holds one class id per (n, y, x); negative ids
/// are ignored.
pub fn softmax_ce_forward<T: Real>(
    logits: &[T],
    ls: Shape,
    targets: &[i32],
    probs: &mut [T],
) -> (T, usize) {
    let mut total = T::zero();
    let mut count = 0usize;
    for n in 0..ls.n {
        for y in 0..ls.h {
            for x in 0..ls.w {
                let mut mx = T::neg_infinity();
                for c in 0..ls.c {
                    let v = logits[ls.idx(n, c, y, x)];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::zero();
                for c in 0..ls.c {
                    denom = denom + (logits[ls.idx(n, c, y, x)] - mx).exp();
                }
                let lse = mx + denom.ln();
                for c in 0..ls.c {
                    let i = ls.idx(n, c, y, x);
                    probs[i] = (logits[i] - lse).exp();
                }
                let t = targets[(n * ls.h + y) * ls.w + x];
                if t >= 0 {
                    let ti = ls.idx(n, t as usize, y, x);
                    total = total + (lse - logits[ti]);
                    count += 1;
                }
            }
        }
    }
    (total, count)
}

pub fn softmax_ce_backward<T: Real>(
    gscalar: T,
    probs: &[T],
    ls: Shape,
    targets: &[i32],
    count: usize,
    glogits: &mut [T],
) {
    if count == 0 {
        return;
    }
    let scale = gscalar / T::of_usize(count);
    for n in 0..ls.n {
        for y in 0..ls.h {
            for x in 0..ls.w {
                let t = targets[(n * ls.h + y) * ls.w + x];
                if t < 0 {
                    continue;
                }
                for c in 0..ls.c {
                    let i = ls.idx(n, c, y, x);
                    let indicator = if c == t as usize { T::one() } else { T::zero() };
                    glogits[i] = glogits[i] + scale * (probs[i] - indicator);
                }
            }
        }
    }
}
