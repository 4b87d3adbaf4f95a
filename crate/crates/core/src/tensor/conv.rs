//! im2col-based 2D cross-correlation and its gradient kernels.
//!
//! Patches are unrolled into a `[Cin*kh*kw, outH*outW]` matrix so the
//! convolution becomes one matrix product per sample. The gradient pass
//! rebuilds the patch matrix from the saved input instead of keeping it
//! alive between forward and backward.

use super::kernels::{matmul2d, matmul_nt, matmul_tn};
use super::{Element, Result, Tensor, TensorError};

/// Output spatial size: floor((extent + 2*pad - k) / stride) + 1, or `None`
/// when the padded input is smaller than the kernel.
pub fn output_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    batched: bool,
}

fn dims<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    assert!(stride > 0, "conv2d stride must be positive");
    let (batch, cin, h, w, batched) = match input.shape() {
        [c, h, w] => (1, *c, *h, *w, false),
        [n, c, h, w] => (*n, *c, *h, *w, true),
        s => {
            return Err(TensorError::BadRank {
                op: "conv2d",
                expected: "rank 3 [C,H,W] or rank 4 [N,C,H,W] input",
                shape: s.to_vec(),
            })
        }
    };
    let [cout, kc, kh, kw] = kernel.shape() else {
        return Err(TensorError::BadRank {
            op: "conv2d",
            expected: "rank 4 [Cout,Cin,kh,kw] kernel",
            shape: kernel.shape().to_vec(),
        });
    };
    if *kc != cin {
        return Err(TensorError::ConvChannelMismatch {
            input: cin,
            kernel: *kc,
        });
    }
    let (Some(oh), Some(ow)) = (
        output_extent(h, *kh, stride, pad),
        output_extent(w, *kw, stride, pad),
    ) else {
        return Err(TensorError::ConvNoOutput {
            h,
            w,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
        });
    };
    Ok(ConvDims {
        batch,
        cin,
        h,
        w,
        cout: *cout,
        kh: *kh,
        kw: *kw,
        oh,
        ow,
        batched,
    })
}

/// Unrolls one `[C,H,W]` sample into `[C*kh*kw, oh*ow]`, zero padding
/// outside the input.
fn im2col<E: Element>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut cols = vec![E::zero(); cin * kh * kw * oh * ow];
    let mut row = 0;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds a `[C*kh*kw, oh*ow]` gradient back onto a `[C,H,W]` input.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Element>(
    cols: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut x = vec![E::zero(); cin * h * w];
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let f = iy as usize * w + ix as usize;
                            plane[f] = plane[f] + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

pub(crate) fn forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<(Vec<usize>, Vec<E>)> {
    let d = dims(input, kernel, stride, pad)?;
    let sample = d.cin * d.h * d.w;
    let out_sample = d.cout * d.oh * d.ow;
    let mut out = vec![E::zero(); d.batch * out_sample];
    for s in 0..d.batch {
        let cols = im2col(
            &input.data()[s * sample..(s + 1) * sample],
            d.cin,
            d.h,
            d.w,
            d.kh,
            d.kw,
            stride,
            pad,
            d.oh,
            d.ow,
        );
        let y = matmul2d(
            kernel.data(),
            &cols,
            d.cout,
            d.cin * d.kh * d.kw,
            d.oh * d.ow,
        );
        out[s * out_sample..(s + 1) * out_sample].copy_from_slice(&y);
    }
    let shape = if d.batched {
        vec![d.batch, d.cout, d.oh, d.ow]
    } else {
        vec![d.cout, d.oh, d.ow]
    };
    Ok((shape, out))
}

/// Gradients with respect to the input and the kernel. Shapes were already
/// validated by the forward pass that recorded this op.
pub(crate) fn backward<E: Element>(
    g: &[E],
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> (Vec<E>, Vec<E>) {
    let d = dims(input, kernel, stride, pad).expect("recorded conv has valid dims");
    let ck = d.cin * d.kh * d.kw;
    let l = d.oh * d.ow;
    let sample = d.cin * d.h * d.w;
    let out_sample = d.cout * l;
    let mut dinput = vec![E::zero(); d.batch * sample];
    let mut dkernel = vec![E::zero(); d.cout * ck];
    for s in 0..d.batch {
        let x = &input.data()[s * sample..(s + 1) * sample];
        let gs = &g[s * out_sample..(s + 1) * out_sample];
        let cols = im2col(x, d.cin, d.h, d.w, d.kh, d.kw, stride, pad, d.oh, d.ow);
        // dK += g . cols^T, accumulated over the batch.
        let dk = matmul_nt(gs, &cols, d.cout, l, ck);
        for (a, c) in dkernel.iter_mut().zip(&dk) {
            *a = *a + *c;
        }
        // dcols = K^T . g, scattered back to input positions.
        let dcols = matmul_tn(kernel.data(), gs, d.cout, ck, l);
        let dx = col2im(
            &dcols, d.cin, d.h, d.w, d.kh, d.kw, stride, pad, d.oh, d.ow,
        );
        dinput[s * sample..(s + 1) * sample].copy_from_slice(&dx);
    }
    (dinput, dkernel)
}

/// Direct nested-loop convolution, kept as an independent reference for the
/// im2col path. Quadratic and slow; only tests call it.
pub fn reference_forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<(Vec<usize>, Vec<E>)> {
    let d = dims(input, kernel, stride, pad)?;
    let sample = d.cin * d.h * d.w;
    let out_sample = d.cout * d.oh * d.ow;
    let mut out = vec![E::zero(); d.batch * out_sample];
    let kd = kernel.data();
    for s in 0..d.batch {
        let x = &input.data()[s * sample..(s + 1) * sample];
        for co in 0..d.cout {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = E::zero();
                    for ci in 0..d.cin {
                        for dy in 0..d.kh {
                            for dx in 0..d.kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || iy >= d.h as isize || ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = x[(ci * d.h + iy as usize) * d.w + ix as usize];
                                let kv = kd[((co * d.cin + ci) * d.kh + dy) * d.kw + dx];
                                acc = acc + xv * kv;
                            }
                        }
                    }
                    out[(s * d.cout + co) * d.oh * d.ow + oy * d.ow + ox] = acc;
                }
            }
        }
    }
    let shape = if d.batched {
        vec![d.batch, d.cout, d.oh, d.ow]
    } else {
        vec![d.cout, d.oh, d.ow]
    };
    Ok((shape, out))
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn output_extent_matches_floor_formula() {
        assert_eq!(output_extent(5, 3, 1, 0), Some(3));
        assert_eq!(output_extent(5, 3, 2, 1), Some(3));
        assert_eq!(output_extent(2, 3, 1, 0), None);
        assert_eq!(output_extent(2, 3, 1, 1), Some(2));
    }

    #[test]
    fn ones_kernel_sums_patches() {
        // 3x3 ones image, 2x2 ones kernel, stride 1: every output is 4.
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let mut g = Graph::new();
        let y = g.conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let mut g = Graph::new();
        let err = g.conv2d(&x, &k, 1, 0).unwrap_err();
        assert!(matches!(
            err,
            TensorError::ConvChannelMismatch {
                input: 2,
                kernel: 3
            }
        ));
    }

    #[test]
    fn too_small_input_is_reported() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let mut g = Graph::new();
        let err = g.conv2d(&x, &k, 1, 0).unwrap_err();
        assert!(matches!(err, TensorError::ConvNoOutput { .. }));
    }

    #[test]
    fn im2col_matches_reference_on_random_cases() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..30 {
            let cin = rng.random_range(1..4usize);
            let cout = rng.random_range(1..4usize);
            let h = rng.random_range(3..9usize);
            let w = rng.random_range(3..9usize);
            let kh = rng.random_range(1..=h.min(3));
            let kw = rng.random_range(1..=w.min(3));
            let stride = rng.random_range(1..3usize);
            let pad = rng.random_range(0..2usize);
            let x = Tensor::<f64>::from_vec(
                &[cin, h, w],
                (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let k = Tensor::<f64>::from_vec(
                &[cout, cin, kh, kw],
                (0..cout * cin * kh * kw)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap();
            let (s1, fast) = forward(&x, &k, stride, pad).unwrap();
            let (s2, slow) = reference_forward(&x, &k, stride, pad).unwrap();
            assert_eq!(s1, s2, "case {case}");
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn batched_input_matches_per_sample() {
        let x0 = Tensor::<f64>::from_vec(&[1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let x1 =
            Tensor::<f64>::from_vec(&[1, 3, 3], (0..9).map(|i| (i * 2) as f64).collect()).unwrap();
        let xb = Tensor::<f64>::from_vec(
            &[2, 1, 3, 3],
            x0.data().iter().chain(x1.data()).copied().collect(),
        )
        .unwrap();
        let k = Tensor::<f64>::from_vec(&[2, 1, 2, 2], (0..8).map(|i| i as f64 * 0.1).collect())
            .unwrap();
        let mut g = Graph::new();
        let yb = g.conv2d(&xb, &k, 1, 0).unwrap();
        let y0 = g.conv2d(&x0, &k, 1, 0).unwrap();
        let y1 = g.conv2d(&x1, &k, 1, 0).unwrap();
        assert_eq!(yb.shape(), &[2, 2, 2, 2]);
        assert_eq!(&yb.data()[..8], y0.data());
        assert_eq!(&yb.data()[8..], y1.data());
    }
}
