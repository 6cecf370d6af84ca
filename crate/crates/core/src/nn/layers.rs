//! Single-sample layer kernels. Feature maps are `(channels, side, side)`
//! row-major; conv weights are `(out, in, 4, 4)`, transposed-conv weights
//! `(in, out, 4, 4)`, linear weights `(out, in)`.

use super::{Activation, KERNEL};

const K: usize = KERNEL;
const KK: usize = KERNEL * KERNEL;

/// Input coordinate for output `o` and kernel tap `k` under stride 2,
/// padding 1; `None` when it falls into the padding.
#[inline]
fn tap(o: usize, k: usize, side: usize) -> Option<usize> {
    let i = 2 * o + k;
    if i == 0 || i > side {
        None
    } else {
        Some(i - 1)
    }
}

/// Stride-2 convolution: `(in_c, side, side)` → `(out_c, side/2, side/2)`.
pub fn conv_forward(input: &[f64], in_c: usize, side: usize, w: &[f64], b: &[f64], out_c: usize) -> Vec<f64> {
    let os = side / 2;
    let mut out = vec![0.0; out_c * os * os];
    for o in 0..out_c {
        let plane = &mut out[o * os * os..(o + 1) * os * os];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..in_c {
            let inp = &input[i * side * side..(i + 1) * side * side];
            let wk = &w[(o * in_c + i) * KK..(o * in_c + i + 1) * KK];
            for ky in 0..K {
                for oy in 0..os {
                    let Some(iy) = tap(oy, ky, side) else { continue };
                    let row = &inp[iy * side..(iy + 1) * side];
                    let orow = &mut plane[oy * os..(oy + 1) * os];
                    for kx in 0..K {
                        let wv = wk[ky * K + kx];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            if let Some(ix) = tap(ox, kx, side) {
                                *ov += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and, if requested, input gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    in_c: usize,
    side: usize,
    w: &[f64],
    out_c: usize,
    grad_out: &[f64],
    grad_w: Option<(&mut [f64], &mut [f64])>,
    mut grad_in: Option<&mut [f64]>,
) {
    let os = side / 2;
    let mut grad_w = grad_w;
    for o in 0..out_c {
        let g = &grad_out[o * os * os..(o + 1) * os * os];
        if let Some((_, gb)) = grad_w.as_mut() {
            gb[o] += g.iter().sum::<f64>();
        }
        for i in 0..in_c {
            let inp = &input[i * side * side..(i + 1) * side * side];
            let widx = (o * in_c + i) * KK;
            for ky in 0..K {
                for kx in 0..K {
                    let mut acc = 0.0;
                    let wv = w[widx + ky * K + kx];
                    for oy in 0..os {
                        let Some(iy) = tap(oy, ky, side) else { continue };
                        for ox in 0..os {
                            let Some(ix) = tap(ox, kx, side) else { continue };
                            let go = g[oy * os + ox];
                            acc += go * inp[iy * side + ix];
                            if let Some(gi) = grad_in.as_deref_mut() {
                                gi[i * side * side + iy * side + ix] += wv * go;
                            }
                        }
                    }
                    if let Some((gw, _)) = grad_w.as_mut() {
                        gw[widx + ky * K + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Stride-2 transposed convolution: `(in_c, side, side)` → `(out_c, 2·side, 2·side)`.
pub fn deconv_forward(input: &[f64], in_c: usize, side: usize, w: &[f64], b: &[f64], out_c: usize) -> Vec<f64> {
    let os = side * 2;
    let mut out = vec![0.0; out_c * os * os];
    for o in 0..out_c {
        out[o * os * os..(o + 1) * os * os].iter_mut().for_each(|v| *v = b[o]);
    }
    for i in 0..in_c {
        let inp = &input[i * side * side..(i + 1) * side * side];
        for o in 0..out_c {
            let wk = &w[(i * out_c + o) * KK..(i * out_c + o + 1) * KK];
            let plane = &mut out[o * os * os..(o + 1) * os * os];
            for y in 0..side {
                for ky in 0..K {
                    let Some(oy) = tap(y, ky, os) else { continue };
                    for x in 0..side {
                        let v = inp[y * side + x];
                        for kx in 0..K {
                            let Some(ox) = tap(x, kx, os) else { continue };
                            plane[oy * os + ox] += wk[ky * K + kx] * v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn deconv_backward(
    input: &[f64],
    in_c: usize,
    side: usize,
    w: &[f64],
    out_c: usize,
    grad_out: &[f64],
    grad_w: Option<(&mut [f64], &mut [f64])>,
    mut grad_in: Option<&mut [f64]>,
) {
    let os = side * 2;
    let mut grad_w = grad_w;
    if let Some((_, gb)) = grad_w.as_mut() {
        for o in 0..out_c {
            gb[o] += grad_out[o * os * os..(o + 1) * os * os].iter().sum::<f64>();
        }
    }
    for i in 0..in_c {
        let inp = &input[i * side * side..(i + 1) * side * side];
        for o in 0..out_c {
            let widx = (i * out_c + o) * KK;
            let g = &grad_out[o * os * os..(o + 1) * os * os];
            for y in 0..side {
                for ky in 0..K {
                    let Some(oy) = tap(y, ky, os) else { continue };
                    for x in 0..side {
                        let v = inp[y * side + x];
                        let mut gi_acc = 0.0;
                        for kx in 0..K {
                            let Some(ox) = tap(x, kx, os) else { continue };
                            let go = g[oy * os + ox];
                            if let Some((gw, _)) = grad_w.as_mut() {
                                gw[widx + ky * K + kx] += go * v;
                            }
                            gi_acc += w[widx + ky * K + kx] * go;
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            gi[i * side * side + y * side + x] += gi_acc;
                        }
                    }
                }
            }
        }
    }
}

pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out)
        .map(|o| b[o] + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    grad_w: Option<(&mut [f64], &mut [f64])>,
    grad_in: Option<&mut [f64]>,
) {
    let n = x.len();
    if let Some((gw, gb)) = grad_w {
        for (o, &g) in grad_out.iter().enumerate() {
            gb[o] += g;
            for (d, xv) in gw[o * n..(o + 1) * n].iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
    if let Some(gi) = grad_in {
        for (o, &g) in grad_out.iter().enumerate() {
            for (d, wv) in gi.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *d += g * wv;
            }
        }
    }
}

pub fn activate(pre: &[f64], act: Activation) -> Vec<f64> {
    pre.iter().map(|&x| act.apply(x)).collect()
}

/// Multiplies `grad` by the activation derivative at `pre`, in place.
pub fn activate_backward(pre: &[f64], grad: &mut [f64], act: Activation) {
    for (g, &x) in grad.iter_mut().zip(pre) {
        *g *= act.derivative(x);
    }
}
