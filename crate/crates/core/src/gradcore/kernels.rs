//! Raw array kernels behind the differentiable image ops. All images are
//! `H×W×C` row-major; positions carry `(x, y)` = (column, row) in the last
//! axis, with pixel centres on integer coordinates.

use super::Real;

/// Zero-padded, stride-1 cross-correlation with an odd `k×k×cin×cout` kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    out: &mut [T],
) {
    let r = (k / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..k {
                let yy = y as isize + ky as isize - r;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let xx = x as isize + kx as isize - r;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let base = (yy as usize * w + xx as usize) * cin;
                    let inp = &input[base..base + cin];
                    let kern = &kernel[(ky * k + kx) * cin * cout..(ky * k + kx + 1) * cin * cout];
                    for (c, &v) in inp.iter().enumerate() {
                        let krow = &kern[c * cout..(c + 1) * cout];
                        for (acc, &kv) in o.iter_mut().zip(krow) {
                            *acc += v * kv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients of a conv2d into `grad_input`, `grad_kernel` and
/// `grad_bias` (any of which may be skipped).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let r = (k / 2) as isize;
    if let Some(gb) = grad_bias {
        for px in grad_out.chunks_exact(cout) {
            for (g, &v) in gb.iter_mut().zip(px) {
                *g += v;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let go = &grad_out[(y * w + x) * cout..(y * w + x + 1) * cout];
            for ky in 0..k {
                let yy = y as isize + ky as isize - r;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let xx = x as isize + kx as isize - r;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let base = (yy as usize * w + xx as usize) * cin;
                    let koff = (ky * k + kx) * cin * cout;
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let kern = &kernel[koff..koff + cin * cout];
                        let gin = &mut gi[base..base + cin];
                        for (c, g) in gin.iter_mut().enumerate() {
                            let krow = &kern[c * cout..(c + 1) * cout];
                            let mut s = T::zero();
                            for (&a, &b) in go.iter().zip(krow) {
                                s += a * b;
                            }
                            *g += s;
                        }
                    }
                    if let Some(gk) = grad_kernel.as_deref_mut() {
                        let inp = &input[base..base + cin];
                        let gkern = &mut gk[koff..koff + cin * cout];
                        for (c, &v) in inp.iter().enumerate() {
                            let grow = &mut gkern[c * cout..(c + 1) * cout];
                            for (acc, &g) in grow.iter_mut().zip(go) {
                                *acc += v * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One axis of a half-pixel-centred bilinear resampling: for each output
/// index the two source taps and the weight of the second tap.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub f: T,
}

pub fn resize_taps<T: Real>(n_in: usize, n_out: usize) -> Vec<Tap<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                f: T::from_f64_lossy(s - i0 as f64),
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn resize_forward<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let one = T::one();
    for (oy, a) in ty.iter().enumerate() {
        for (ox, b) in tx.iter().enumerate() {
            let p00 = (a.i0 * w + b.i0) * c;
            let p01 = (a.i0 * w + b.i1) * c;
            let p10 = (a.i1 * w + b.i0) * c;
            let p11 = (a.i1 * w + b.i1) * c;
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (ch, v) in o.iter_mut().enumerate() {
                let top = (one - b.f) * input[p00 + ch] + b.f * input[p01 + ch];
                let bot = (one - b.f) * input[p10 + ch] + b.f * input[p11 + ch];
                *v = (one - a.f) * top + a.f * bot;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn resize_backward<T: Real>(
    grad_out: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [T],
) {
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let one = T::one();
    for (oy, a) in ty.iter().enumerate() {
        for (ox, b) in tx.iter().enumerate() {
            let g = &grad_out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let w00 = (one - a.f) * (one - b.f);
            let w01 = (one - a.f) * b.f;
            let w10 = a.f * (one - b.f);
            let w11 = a.f * b.f;
            for (ch, &gv) in g.iter().enumerate() {
                grad_in[(a.i0 * w + b.i0) * c + ch] += w00 * gv;
                grad_in[(a.i0 * w + b.i1) * c + ch] += w01 * gv;
                grad_in[(a.i1 * w + b.i0) * c + ch] += w10 * gv;
                grad_in[(a.i1 * w + b.i1) * c + ch] += w11 * gv;
            }
        }
    }
}

/// Clamped bilinear lookup location along one axis of extent `n`.
#[derive(Clone, Copy, Debug)]
pub struct Lookup<T> {
    pub i0: usize,
    pub i1: usize,
    pub f: T,
    /// False when the requested coordinate lay outside `[0, n-1]`.
    pub inside: bool,
}

#[inline]
pub fn lookup<T: Real>(coord: T, n: usize) -> Lookup<T> {
    let hi = T::from_usize(n - 1).unwrap();
    let inside = coord >= T::zero() && coord <= hi;
    // NaN falls through to 0 via max/min.
    let s = coord.max(T::zero()).min(hi);
    let i0 = s.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Lookup {
        i0,
        i1,
        f: s - T::from_usize(i0).unwrap(),
        inside,
    }
}

/// Bilinear sampling with clamp-to-edge addressing.
pub fn bilinear_forward<T: Real>(
    image: &[T],
    h: usize,
    w: usize,
    c: usize,
    positions: &[T],
    out: &mut [T],
) {
    let one = T::one();
    for (pos, o) in positions.chunks_exact(2).zip(out.chunks_exact_mut(c)) {
        let lx = lookup(pos[0], w);
        let ly = lookup(pos[1], h);
        let p00 = (ly.i0 * w + lx.i0) * c;
        let p01 = (ly.i0 * w + lx.i1) * c;
        let p10 = (ly.i1 * w + lx.i0) * c;
        let p11 = (ly.i1 * w + lx.i1) * c;
        for (ch, v) in o.iter_mut().enumerate() {
            let top = (one - lx.f) * image[p00 + ch] + lx.f * image[p01 + ch];
            let bot = (one - lx.f) * image[p10 + ch] + lx.f * image[p11 + ch];
            *v = (one - ly.f) * top + ly.f * bot;
        }
    }
}

/// Gradient of bilinear sampling. Position gradients are zero along any
/// axis whose coordinate was clamped.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward<T: Real>(
    image: &[T],
    h: usize,
    w: usize,
    c: usize,
    positions: &[T],
    grad_out: &[T],
    mut grad_image: Option<&mut [T]>,
    mut grad_positions: Option<&mut [T]>,
) {
    let one = T::one();
    for (i, (pos, g)) in positions
        .chunks_exact(2)
        .zip(grad_out.chunks_exact(c))
        .enumerate()
    {
        let lx = lookup(pos[0], w);
        let ly = lookup(pos[1], h);
        let p00 = (ly.i0 * w + lx.i0) * c;
        let p01 = (ly.i0 * w + lx.i1) * c;
        let p10 = (ly.i1 * w + lx.i0) * c;
        let p11 = (ly.i1 * w + lx.i1) * c;
        if let Some(gi) = grad_image.as_deref_mut() {
            let w00 = (one - ly.f) * (one - lx.f);
            let w01 = (one - ly.f) * lx.f;
            let w10 = ly.f * (one - lx.f);
            let w11 = ly.f * lx.f;
            for (ch, &gv) in g.iter().enumerate() {
                gi[p00 + ch] += w00 * gv;
                gi[p01 + ch] += w01 * gv;
                gi[p10 + ch] += w10 * gv;
                gi[p11 + ch] += w11 * gv;
            }
        }
        if let Some(gp) = grad_positions.as_deref_mut() {
            let mut dx = T::zero();
            let mut dy = T::zero();
            for (ch, &gv) in g.iter().enumerate() {
                let (i00, i01, i10, i11) =
                    (image[p00 + ch], image[p01 + ch], image[p10 + ch], image[p11 + ch]);
                dx += gv * ((one - ly.f) * (i01 - i00) + ly.f * (i11 - i10));
                dy += gv * ((one - lx.f) * (i10 - i00) + lx.f * (i11 - i01));
            }
            if lx.inside {
                gp[2 * i] += dx;
            }
            if ly.inside {
                gp[2 * i + 1] += dy;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_taps_follow_half_pixel_rule() {
        let taps = resize_taps::<f64>(2, 4);
        let vals: Vec<f64> = taps
            .iter()
            .map(|t| (1.0 - t.f) * [0.0, 1.0][t.i0] + t.f * [0.0, 1.0][t.i1])
            .collect();
        assert_eq!(vals, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn lookup_clamps_and_flags() {
        let l = lookup(-2.5f64, 5);
        assert!(!l.inside);
        assert_eq!((l.i0, l.i1, l.f), (0, 1, 0.0));
        let l = lookup(4.0f64, 5);
        assert!(l.inside);
        assert_eq!((l.i0, l.i1, l.f), (4, 4, 0.0));
        let l = lookup(f64::NAN, 5);
        assert_eq!(l.i0, 0);
    }
}
