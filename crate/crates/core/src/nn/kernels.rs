//! Convolution and resampling kernels (NCHW layout).

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower one image [C,H,W] into columns [C*KH*KW, OH*OW].
fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let plane = oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * plane);
    for ci in 0..c {
        let img = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter columns [C*KH*KW, OH*OW] back into an image gradient [C,H,W].
fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let plane = oh * ow;
    for ci in 0..c {
        let img = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward: x [B,C,H,W], weight [OC,C,KH,KW] -> [B,OC,OH,OW].
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, w) = dims4(x);
    let ws = weight.shape();
    assert_eq!(ws.len(), 4);
    let (oc, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(c, wc, "conv2d channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let plane = oh * ow;
    let mut out = vec![0.0; b * oc * plane];
    let mut cols = vec![0.0; ckk * plane];
    for bi in 0..b {
        im2col(
            &x.data()[bi * c * h * w..(bi + 1) * c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut cols,
        );
        matmul_acc(
            weight.data(),
            &cols,
            &mut out[bi * oc * plane..(bi + 1) * oc * plane],
            oc,
            ckk,
            plane,
        );
    }
    Tensor::from_vec(&[b, oc, oh, ow], out)
}

/// Gradients of conv2d w.r.t. input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    grad_x: &mut Tensor,
    grad_w: &mut Tensor,
) {
    let (b, c, h, w) = dims4(x);
    let ws = weight.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let plane = oh * ow;
    let mut cols = vec![0.0; ckk * plane];
    let mut dcols = vec![0.0; ckk * plane];
    for bi in 0..b {
        let go = &grad_out.data()[bi * oc * plane..(bi + 1) * oc * plane];
        // dW += dY * cols^T
        im2col(
            &x.data()[bi * c * h * w..(bi + 1) * c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut cols,
        );
        matmul_nt_acc(go, &cols, grad_w.data_mut(), oc, plane, ckk);
        // dCols = W^T * dY, then scatter back to the input gradient.
        dcols.fill(0.0);
        matmul_tn_acc(weight.data(), go, &mut dcols, oc, ckk, plane);
        col2im_acc(
            &dcols,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut grad_x.data_mut()[bi * c * h * w..(bi + 1) * c * h * w],
        );
    }
}

/// Nearest-neighbour 2x upsampling of [B,C,H,W].
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (b, c, h, w) = dims4(x);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let sy = y / 2;
            for xp in 0..ow {
                dst[y * ow + xp] = src[sy * w + xp / 2];
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

/// Backward of nearest 2x upsampling: sum each 2x2 block.
pub fn upsample2x_backward(grad_out: &Tensor, grad_x: &mut Tensor) {
    let (b, c, h, w) = dims4(grad_x);
    let (oh, ow) = (h * 2, w * 2);
    for plane in 0..b * c {
        let go = &grad_out.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let gx = &mut grad_x.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xp in 0..ow {
                gx[(y / 2) * w + xp / 2] += go[y * ow + xp];
            }
        }
    }
}

pub fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the oracle.
    fn conv_naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, c, h, wd) = dims4(x);
        let ws = w.shape();
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(wd, kw, stride, pad);
        let mut out = Tensor::zeros(&[b, oc, oh, ow]);
        for bi in 0..b {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        let xv = x.data()
                                            [((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                        let wv = w.data()[((o * c + ci) * kh + ki) * kw + kj];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = Tensor::from_vec(&[2, 3, 7, 6], (0..2 * 3 * 7 * 6).map(|_| next()).collect());
        let w = Tensor::from_vec(&[4, 3, 3, 3], (0..4 * 3 * 9).map(|_| next()).collect());
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let fast = conv2d(&x, &w, stride, pad);
            let slow = conv_naive(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "stride {} pad {}", stride, pad);
            }
        }
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = Tensor::from_vec(&[1, 2, 3, 2], (0..12).map(|i| i as f64).collect());
        let up = upsample2x(&x);
        assert_eq!(up.shape(), &[1, 2, 6, 4]);
        // Every 2x2 block is constant.
        for ci in 0..2 {
            for y in 0..6 {
                for xp in 0..4 {
                    let got = up.data()[(ci * 6 + y) * 4 + xp];
                    let src = x.data()[(ci * 3 + y / 2) * 2 + xp / 2];
                    assert_eq!(got, src);
                }
            }
        }
    }
}
