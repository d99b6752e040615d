//! Dense kernels for the fixed 3×3 convolutions and fully connected layers.
//!
//! Activations are channel-last (`[row][col][channel]`), convolution kernels
//! are `[kh][kw][cin][cout]`, fully connected weights are `[in][out]`.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a·b + c·d` in one pass.
#[inline]
pub(crate) fn dot2(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> f64 {
    debug_assert!(a.len() == b.len() && c.len() == d.len() && a.len() == c.len());
    let mut acc = [0.0f64; 8];
    let chunks = a
        .chunks_exact(8)
        .zip(b.chunks_exact(8))
        .zip(c.chunks_exact(8).zip(d.chunks_exact(8)));
    for ((a, b), (c, d)) in chunks {
        for i in 0..8 {
            acc[i] += a[i] * b[i] + c[i] * d[i];
        }
    }
    let n = a.len() - a.len() % 8;
    let tail: f64 = (n..a.len()).map(|i| a[i] * b[i] + c[i] * d[i]).sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x + beta * z`
#[inline]
pub(crate) fn axpy2(y: &mut [f64], alpha: f64, x: &[f64], beta: f64, z: &[f64]) {
    debug_assert!(y.len() == x.len() && y.len() == z.len());
    for ((yi, xi), zi) in y.iter_mut().zip(x).zip(z) {
        *yi += alpha * xi + beta * zi;
    }
}

/// Valid 3×3 convolution, stride 1. Output is `(h-2) × (w-2) × cout`.
pub(crate) fn conv3x3(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - 2, w - 2);
    let mut out = vec![0.0; oh * ow * cout];
    for i in 0..oh {
        for j in 0..ow {
            let px = &mut out[(i * ow + j) * cout..(i * ow + j + 1) * cout];
            if let Some(b) = bias {
                px.copy_from_slice(b);
            }
            for kh in 0..3 {
                for kw in 0..3 {
                    let base = ((i + kh) * w + j + kw) * cin;
                    for c in 0..cin {
                        let v = input[base + c];
                        if v != 0.0 {
                            let k0 = ((kh * 3 + kw) * cin + c) * cout;
                            axpy(px, v, &kernel[k0..k0 + cout]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`] with respect to its input. `dout` is
/// `oh × ow × cout`; the result is `(oh+2) × (ow+2) × cin`.
pub(crate) fn conv3x3_transpose(
    dout: &[f64],
    oh: usize,
    ow: usize,
    cout: usize,
    kernel: &[f64],
    cin: usize,
) -> Vec<f64> {
    let w = ow + 2;
    let mut din = vec![0.0; (oh + 2) * w * cin];
    for i in 0..oh {
        for j in 0..ow {
            let g = &dout[(i * ow + j) * cout..(i * ow + j + 1) * cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for kh in 0..3 {
                for kw in 0..3 {
                    let base = ((i + kh) * w + j + kw) * cin;
                    for c in 0..cin {
                        let k0 = ((kh * 3 + kw) * cin + c) * cout;
                        din[base + c] += dot(g, &kernel[k0..k0 + cout]);
                    }
                }
            }
        }
    }
    din
}

/// Gradient of [`conv3x3`] with respect to its kernel.
pub(crate) fn conv3x3_kernel_grad(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    dout: &[f64],
    cout: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - 2, w - 2);
    let mut gk = vec![0.0; 9 * cin * cout];
    for i in 0..oh {
        for j in 0..ow {
            let g = &dout[(i * ow + j) * cout..(i * ow + j + 1) * cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for kh in 0..3 {
                for kw in 0..3 {
                    let base = ((i + kh) * w + j + kw) * cin;
                    for c in 0..cin {
                        let v = input[base + c];
                        if v != 0.0 {
                            let k0 = ((kh * 3 + kw) * cin + c) * cout;
                            axpy(&mut gk[k0..k0 + cout], v, g);
                        }
                    }
                }
            }
        }
    }
    gk
}

/// `Wᵀ x` for `W: [rows][cols]`, skipping zero entries of `x`.
pub(crate) fn matvec_t(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let v = x[r];
        if v != 0.0 {
            axpy(&mut out, v, &w[r * cols..(r + 1) * cols]);
        }
    }
    out
}

/// `W v` for `W: [rows][cols]`.
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| dot(&w[r * cols..(r + 1) * cols], v))
        .collect()
}

/// Reorders a `[kh][kw][cin][cout]` kernel into `[cout][kh][kw][cin]`.
pub(crate) fn kernel_to_output_major(kernel: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; kernel.len()];
    for t in 0..9 {
        for c in 0..cin {
            for o in 0..cout {
                out[(o * 9 + t) * cin + c] = kernel[(t * cin + c) * cout + o];
            }
        }
    }
    out
}

/// Inverse of [`kernel_to_output_major`].
pub(crate) fn kernel_from_output_major(om: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; om.len()];
    for t in 0..9 {
        for c in 0..cin {
            for o in 0..cout {
                out[(t * cin + c) * cout + o] = om[(o * 9 + t) * cin + c];
            }
        }
    }
    out
}
