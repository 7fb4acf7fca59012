//! Forward and backward kernels. Convolutions are stride 1 with zero "same"
//! padding and odd square kernels; weights are laid out `[out][in][ky][kx]`.

use crate::tensor::Tensor;

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column ranges `(dst_start, src_start, len)` for a horizontal offset.
#[inline]
fn span(width: usize, offset: isize) -> Option<(usize, usize, usize)> {
    let w = width as isize;
    let start = (-offset).max(0);
    let end = (w - offset).min(w);
    (end > start).then(|| (start as usize, (start + offset) as usize, (end - start) as usize))
}

pub fn conv2d(input: &Tensor, weight: &[f64], bias: &[f64], out_channels: usize, k: usize) -> Tensor {
    let (cin, h, w) = input.shape();
    debug_assert_eq!(weight.len(), out_channels * cin * k * k);
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(out_channels, h, w);
    for o in 0..out_channels {
        let plane = out.channel_mut(o);
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = input.channel(i);
            for ky in 0..k {
                let dy = ky as isize - r;
                for kx in 0..k {
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let Some((x0, sx0, len)) = span(w, kx as isize - r) else {
                        continue;
                    };
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = sy as usize * w + sx0;
                        axpy(&mut plane[y * w + x0..y * w + x0 + len], wv, &src[s..s + len]);
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    k: usize,
    need_input_grad: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let (cin, h, w) = input.shape();
    let cout = grad_out.channels();
    let r = (k / 2) as isize;
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    let mut gin = need_input_grad.then(|| Tensor::zeros(cin, h, w));
    for o in 0..cout {
        let go = grad_out.channel(o);
        gb[o] = go.iter().sum();
        for i in 0..cin {
            let src = input.channel(i);
            for ky in 0..k {
                let dy = ky as isize - r;
                for kx in 0..k {
                    let Some((x0, sx0, len)) = span(w, kx as isize - r) else {
                        continue;
                    };
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = sy as usize * w + sx0;
                        acc += dot(&go[y * w + x0..y * w + x0 + len], &src[s..s + len]);
                    }
                    gw[widx] += acc;
                    if let Some(gin) = gin.as_mut() {
                        let wv = weight[widx];
                        if wv == 0.0 {
                            continue;
                        }
                        let gi = gin.channel_mut(i);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let s = sy as usize * w + sx0;
                            axpy(&mut gi[s..s + len], wv, &go[y * w + x0..y * w + x0 + len]);
                        }
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

pub fn relu(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(c, h, w, data).expect("same shape")
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(c, h, w, data).expect("same shape")
}

pub fn avgpool2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1];
                let b = src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = 0.25 * (a + b);
            }
        }
    }
    out
}

pub fn avgpool2_backward(grad_out: &Tensor) -> Tensor {
    let (c, oh, ow) = grad_out.shape();
    let (h, w) = (oh * 2, ow * 2);
    let mut gin = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let go = grad_out.channel(ch);
        let gi = gin.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                gi[y * w + x] = 0.25 * go[(y / 2) * ow + x / 2];
            }
        }
    }
    gin
}

pub fn upsample2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (c, oh, ow) = grad_out.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut gin = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let go = grad_out.channel(ch);
        let gi = gin.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                gi[(y / 2) * w + x / 2] += go[y * ow + x];
            }
        }
    }
    gin
}

pub fn concat(parts: &[&Tensor]) -> Tensor {
    let (_, h, w) = parts[0].shape();
    let channels = parts.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(channels * h * w);
    for t in parts {
        debug_assert_eq!((t.height(), t.width()), (h, w));
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(channels, h, w, data).expect("concatenated shape")
}
