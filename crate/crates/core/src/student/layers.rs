//! Per-example layer kernels on planar `[channel][row][column]` slices.
//!
//! Backward functions accumulate into their gradient outputs, so callers
//! zero them first. Reductions run in a fixed order, which keeps results
//! bit-identical across runs.

use std::ops::Range;

use super::Real;
use crate::imagery::linear_taps;

/// Lanes of independent partial sums in [`dot`] and [`dot4`].
const LANES: usize = 16;

#[inline(always)]
fn lanes<T: Real>(c: &[T]) -> &[T; LANES] {
    c.try_into().expect("chunk of LANES")
}

#[inline(always)]
fn reduce<T: Real>(acc: &[T; LANES], tail: T) -> T {
    let mut width = LANES;
    let mut v = *acc;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            v[l] = v[l] + v[l + width];
        }
    }
    v[0] + tail
}

/// Dot product with sixteen independent partial sums, reduced pairwise.
#[inline(always)]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b[..a.len()].chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let (x, y) = (lanes(x), lanes(y));
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    reduce(&acc, tail)
}

/// Four dot products sharing `a`; each result equals `dot(a, b[q])` bit
/// for bit.
#[inline(always)]
pub fn dot4<T: Real>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    let n = a.len();
    let [b0, b1, b2, b3] = b.map(|r| &r[..n]);
    let (mut s0, mut s1, mut s2, mut s3) = ([T::zero(); LANES], [T::zero(); LANES], [T::zero(); LANES], [T::zero(); LANES]);
    let chunks = a
        .chunks_exact(LANES)
        .zip(b0.chunks_exact(LANES))
        .zip(b1.chunks_exact(LANES))
        .zip(b2.chunks_exact(LANES))
        .zip(b3.chunks_exact(LANES));
    for ((((x, y0), y1), y2), y3) in chunks {
        let (x, y0, y1, y2, y3) = (lanes(x), lanes(y0), lanes(y1), lanes(y2), lanes(y3));
        for l in 0..LANES {
            s0[l] += x[l] * y0[l];
            s1[l] += x[l] * y1[l];
            s2[l] += x[l] * y2[l];
            s3[l] += x[l] * y3[l];
        }
    }
    let full = n - n % LANES;
    let tail = |y: &[T]| {
        let mut t = T::zero();
        for j in full..n {
            t += a[j] * y[j];
        }
        t
    };
    [
        reduce(&s0, tail(b0)),
        reduce(&s1, tail(b1)),
        reduce(&s2, tail(b2)),
        reduce(&s3, tail(b3)),
    ]
}

/// `y += alpha · x`.
#[inline(always)]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y += Σ_q alpha[q] · x[q]`, added in order `q = 0..4`, which matches
/// four consecutive [`axpy`] calls exactly.
#[inline(always)]
fn gather4<T: Real>(alpha: [T; 4], x: [&[T]; 4], y: &mut [T]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        y[j] = (((y[j] + alpha[0] * x0[j]) + alpha[1] * x1[j]) + alpha[2] * x2[j]) + alpha[3] * x3[j];
    }
}

pub fn sum<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |a, &v| a + v)
}

/// Output columns per register-blocked strip.
const STRIP: usize = 16;

/// Copies `c` planes of `h×w` into a zero border of `pad` on every side,
/// with `STRIP` extra zero columns so full strips can always be read.
fn pad_planes<T: Real>(x: &[T], c: usize, h: usize, w: usize, pad: usize) -> (Vec<T>, usize, usize) {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad + STRIP);
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let dst = (ch * hp + y + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    (out, hp, wp)
}

/// `out[o] += Σ_{i,ky,kx} wq · padded[i]` for a same-size convolution, four
/// output channels per pass. `wq` is `[ceil(c_out/4)][c_in][k][k][4]` with
/// zero weights for missing channels. Every output adds its taps in
/// `(i, ky, kx)` order.
#[allow(clippy::too_many_arguments)]
fn conv_accumulate<T: Real>(
    padded: &[T],
    hp: usize,
    wp: usize,
    c_in: usize,
    h: usize,
    w: usize,
    wq: &[T],
    c_out: usize,
    k: usize,
    out: &mut [T],
) {
    let hw = h * w;
    let block = c_in * k * k * 4;
    for og in (0..c_out).step_by(4) {
        let g = 4.min(c_out - og);
        let wblock = &wq[(og / 4) * block..(og / 4 + 1) * block];
        for y in 0..h {
            for x0 in (0..w).step_by(STRIP) {
                let n = STRIP.min(w - x0);
                let mut acc = [[T::zero(); STRIP]; 4];
                for q in 0..g {
                    let at = (og + q) * hw + y * w + x0;
                    acc[q][..n].copy_from_slice(&out[at..at + n]);
                }
                let mut taps = wblock.chunks_exact(4);
                for i in 0..c_in {
                    for ky in 0..k {
                        let row = (i * hp + y + ky) * wp + x0;
                        let src = &padded[row..row + k - 1 + STRIP];
                        for kx in 0..k {
                            let seg: &[T; STRIP] = src[kx..kx + STRIP].try_into().unwrap();
                            let t = taps.next().unwrap();
                            for q in 0..4 {
                                let wv = t[q];
                                for l in 0..STRIP {
                                    acc[q][l] += wv * seg[l];
                                }
                            }
                        }
                    }
                }
                for q in 0..g {
                    let at = (og + q) * hw + y * w + x0;
                    out[at..at + n].copy_from_slice(&acc[q][..n]);
                }
            }
        }
    }
}

/// Rearranges `[c_out][c_in][k][k]` weights into groups of four output
/// channels, optionally flipping the kernel and swapping the channel roles
/// (for the input gradient).
fn group_weights<T: Real>(weight: &[T], c_out: usize, c_in: usize, k: usize, transpose: bool) -> Vec<T> {
    let (co, ci) = if transpose { (c_in, c_out) } else { (c_out, c_in) };
    let kk = k * k;
    let mut wq = vec![T::zero(); co.div_ceil(4) * ci * kk * 4];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..kk {
                let v = if transpose {
                    weight[(i * c_in + o) * kk + (kk - 1 - t)]
                } else {
                    weight[(o * c_in + i) * kk + t]
                };
                wq[(((o / 4) * ci + i) * kk + t) * 4 + o % 4] = v;
            }
        }
    }
    wq
}

/// Same-size convolution with zero padding. `weight` is
/// `[c_out][c_in][k][k]`; `out` is `[c_out][h][w]`. Each output starts
/// from its bias and adds taps in `(i, ky, kx)` order.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    k: usize,
    out: &mut [T],
) {
    let hw = h * w;
    debug_assert_eq!(input.len(), c_in * hw);
    debug_assert_eq!(out.len(), c_out * hw);
    for o in 0..c_out {
        out[o * hw..(o + 1) * hw].fill(bias[o]);
    }
    let (padded, hp, wp) = pad_planes(input, c_in, h, w, k / 2);
    let wq = group_weights(weight, c_out, c_in, k, false);
    conv_accumulate(&padded, hp, wp, c_in, h, w, &wq, c_out, k, out);
}

/// Accumulates weight, bias and (optionally) input gradients of
/// [`conv2d_forward`] given the gradient of its output.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    c_out: usize,
    k: usize,
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_in: Option<&mut [T]>,
) {
    let hw = h * w;
    let kk = k * k;
    for o in 0..c_out {
        grad_bias[o] += sum(&grad_out[o * hw..(o + 1) * hw]);
    }
    let (padded, hp, wp) = pad_planes(input, c_in, h, w, k / 2);
    // Weight gradients: for four output channels at once, correlate each
    // output-gradient row with the shifted input rows.
    let zeros = vec![T::zero(); w];
    let mut acc = vec![[T::zero(); 4]; kk];
    for og in (0..c_out).step_by(4) {
        let g = 4.min(c_out - og);
        let go_row = |q: usize, y: usize| -> &[T] {
            if q < g {
                &grad_out[(og + q) * hw + y * w..(og + q) * hw + (y + 1) * w]
            } else {
                &zeros
            }
        };
        for i in 0..c_in {
            acc.fill([T::zero(); 4]);
            for y in 0..h {
                let gos = [go_row(0, y), go_row(1, y), go_row(2, y), go_row(3, y)];
                for ky in 0..k {
                    let row = (i * hp + y + ky) * wp;
                    for kx in 0..k {
                        let d = dot4(&padded[row + kx..row + kx + w], gos);
                        for q in 0..4 {
                            acc[ky * k + kx][q] += d[q];
                        }
                    }
                }
            }
            for q in 0..g {
                let gw = &mut grad_weight[((og + q) * c_in + i) * kk..][..kk];
                for (t, a) in gw.iter_mut().zip(&acc) {
                    *t += a[q];
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        // The input gradient is a same-size convolution of the output
        // gradient with flipped kernels and swapped channel roles.
        let (gpad, hp, wp) = pad_planes(grad_out, c_out, h, w, k / 2);
        let wq = group_weights(weight, c_out, c_in, k, true);
        conv_accumulate(&gpad, hp, wp, c_out, h, w, &wq, c_in, k, gi);
    }
}

pub fn relu_forward<T: Real>(x: &mut [T]) {
    for v in x {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Zeroes gradients where the activation was not positive (subgradient 0
/// at 0). `activation` is the ReLU output.
pub fn relu_backward<T: Real>(activation: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if !(a > T::zero()) {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling with stride 2. `argmax` receives, per output, the index
/// into `input` of the chosen value; ties go to the first in scan order.
pub fn maxpool2_forward<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for cand in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                let j = (ch * oh + y) * ow + x;
                out[j] = input[best];
                argmax[j] = best as u32;
            }
        }
    }
}

pub fn maxpool2_backward<T: Real>(grad_out: &[T], argmax: &[u32], grad_in: &mut [T]) {
    for (&g, &src) in grad_out.iter().zip(argmax) {
        grad_in[src as usize] += g;
    }
}

/// Bilinear resize of `c` planes from `h×w` to `oh×ow` (half-pixel centers,
/// edge clamping), matching the image resampler.
#[allow(clippy::too_many_arguments)]
pub fn resize_forward<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (y, ry) in ty.iter().enumerate() {
            let fy = T::lift(ry.frac);
            let (top, bot) = (&src[ry.lo * w..(ry.lo + 1) * w], &src[ry.hi * w..(ry.hi + 1) * w]);
            for (x, rx) in tx.iter().enumerate() {
                let fx = T::lift(rx.frac);
                let t = top[rx.lo] + fx * (top[rx.hi] - top[rx.lo]);
                let b = bot[rx.lo] + fx * (bot[rx.hi] - bot[rx.lo]);
                dst[y * ow + x] = t + fy * (b - t);
            }
        }
    }
}

/// Transpose of [`resize_forward`], accumulated into `grad_in`.
#[allow(clippy::too_many_arguments)]
pub fn resize_backward<T: Real>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [T],
) {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let one = T::one();
    for ch in 0..c {
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let gi = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for (y, ry) in ty.iter().enumerate() {
            let fy = T::lift(ry.frac);
            for (x, rx) in tx.iter().enumerate() {
                let fx = T::lift(rx.frac);
                let g = go[y * ow + x];
                let (gt, gb) = (g * (one - fy), g * fy);
                gi[ry.lo * w + rx.lo] += gt * (one - fx);
                gi[ry.lo * w + rx.hi] += gt * fx;
                gi[ry.hi * w + rx.lo] += gb * (one - fx);
                gi[ry.hi * w + rx.hi] += gb * fx;
            }
        }
    }
}

/// Concatenates flattened parts into `out` in order.
pub fn concat_forward<T: Real>(parts: &[&[T]], out: &mut [T]) {
    let mut at = 0;
    for p in parts {
        out[at..at + p.len()].copy_from_slice(p);
        at += p.len();
    }
    debug_assert_eq!(at, out.len());
}

/// Splits a concatenated gradient back into consecutive parts of the given
/// lengths, accumulating into each.
pub fn concat_backward<T: Real>(grad_out: &[T], grads: &mut [&mut [T]]) {
    let mut at = 0;
    for g in grads.iter_mut() {
        let n = g.len();
        for (d, &s) in g.iter_mut().zip(&grad_out[at..at + n]) {
            *d += s;
        }
        at += n;
    }
}

/// Columns per FC tile: the tile of every batch example stays in L2 while
/// the weight matrix streams through once.
const FC_TILE: usize = 4096;

fn tiles(n: usize) -> impl Iterator<Item = Range<usize>> {
    (0..n.div_ceil(FC_TILE)).map(move |t| t * FC_TILE..((t + 1) * FC_TILE).min(n))
}

/// Fully connected layer over a batch: `y[b][o] = bias[o] + W[o]·x[b]`.
/// `weight` is `[n_out][n_in]`; `x` is `[batch][n_in]`.
pub fn fc_forward<T: Real>(
    weight: &[T],
    bias: &[T],
    n_in: usize,
    n_out: usize,
    x: &[T],
    y: &mut [T],
) {
    let batch = x.len() / n_in;
    for b in 0..batch {
        y[b * n_out..(b + 1) * n_out].copy_from_slice(&bias[..n_out]);
    }
    let grouped = batch - batch % 4;
    for cols in tiles(n_in) {
        let xt = |b: usize| &x[b * n_in + cols.start..b * n_in + cols.end];
        let row = |o: usize| &weight[o * n_in + cols.start..o * n_in + cols.end];
        for o in 0..n_out {
            for b in (0..grouped).step_by(4) {
                let d = dot4(row(o), [xt(b), xt(b + 1), xt(b + 2), xt(b + 3)]);
                for q in 0..4 {
                    y[(b + q) * n_out + o] += d[q];
                }
            }
        }
        // Leftover examples read four weight rows per pass, which keeps
        // more memory streams in flight when the batch is small.
        for b in grouped..batch {
            let mut o = 0;
            while o + 4 <= n_out {
                let d = dot4(xt(b), [row(o), row(o + 1), row(o + 2), row(o + 3)]);
                for q in 0..4 {
                    y[b * n_out + o + q] += d[q];
                }
                o += 4;
            }
            for o in o..n_out {
                y[b * n_out + o] += dot(row(o), xt(b));
            }
        }
    }
}

/// Accumulates FC gradients. Input gradients are produced only for the
/// column ranges listed in `input_ranges` (within one example's `n_in`
/// columns), so constant inputs can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn fc_backward<T: Real>(
    weight: &[T],
    n_in: usize,
    n_out: usize,
    x: &[T],
    grad_y: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_x: Option<(&mut [T], &[Range<usize>])>,
) {
    let batch = x.len() / n_in;
    for o in 0..n_out {
        for b in 0..batch {
            grad_bias[o] += grad_y[b * n_out + o];
        }
    }
    let (mut gx, ranges) = match grad_x {
        Some((g, r)) => (Some(g), r),
        None => (None, &[][..]),
    };
    for cols in tiles(n_in) {
        let parts: Vec<Range<usize>> = ranges
            .iter()
            .map(|r| r.start.max(cols.start)..r.end.min(cols.end))
            .filter(|r| r.start < r.end)
            .collect();
        let xt = |b: usize| &x[b * n_in + cols.start..b * n_in + cols.end];
        // Weight gradient: per row, examples are added in batch order.
        for o in 0..n_out {
            let grow = &mut grad_weight[o * n_in + cols.start..o * n_in + cols.end];
            let g = |b: usize| grad_y[b * n_out + o];
            let mut b = 0;
            while b + 4 <= batch {
                gather4([g(b), g(b + 1), g(b + 2), g(b + 3)], [xt(b), xt(b + 1), xt(b + 2), xt(b + 3)], grow);
                b += 4;
            }
            for b in b..batch {
                axpy(g(b), xt(b), grow);
            }
        }
        // Input gradient: per example, rows are added in output order.
        let Some(gx) = gx.as_deref_mut() else { continue };
        let mut o = 0;
        while o < n_out {
            let g4 = (n_out - o).min(4);
            for b in 0..batch {
                let gxb = &mut gx[b * n_in..(b + 1) * n_in];
                for r in &parts {
                    if g4 == 4 {
                        let row = |q: usize| &weight[(o + q) * n_in + r.start..(o + q) * n_in + r.end];
                        let a = [0, 1, 2, 3].map(|q| grad_y[b * n_out + o + q]);
                        gather4(a, [row(0), row(1), row(2), row(3)], &mut gxb[r.clone()]);
                    } else {
                        for q in 0..g4 {
                            let row = &weight[(o + q) * n_in + r.start..(o + q) * n_in + r.end];
                            axpy(grad_y[b * n_out + o + q], row, &mut gxb[r.clone()]);
                        }
                    }
                }
            }
            o += g4;
        }
    }
}
