//! Raw numeric kernels over row-major slices.
//!
//! [`conv2d_direct`] is the naive reference convolution; the im2col path used
//! by the tape is tested against it.

use crate::tensor::Element;

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_image(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn im2col<T: Element>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let channel = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let sy = g.source(oy, ki, g.height);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (sy, g.source(ox, kj, g.width)) {
                            (Some(y), Some(x)) => channel[y * g.width + x],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let channel = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let Some(y) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.source(ox, kj, g.width) {
                            channel[y * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution via im2col and a row-major matrix product.
pub fn conv2d_forward<T: Element>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
    for n in 0..g.batch {
        im2col(g, &input[n * g.in_image()..(n + 1) * g.in_image()], &mut cols);
        gemm_acc(
            kernel,
            &cols,
            &mut out[n * g.out_image()..(n + 1) * g.out_image()],
            g.out_channels,
            g.patch_len(),
            g.out_plane(),
        );
    }
    out
}

/// Returns `(d_input, d_kernel)` for upstream gradient `grad_out`.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let patch = g.patch_len();
    let plane = g.out_plane();
    let mut d_input = vec![T::zero(); input.len()];
    let mut d_kernel = vec![T::zero(); kernel.len()];
    let kernel_t = transpose(kernel, g.out_channels, patch);
    let mut cols = vec![T::zero(); patch * plane];
    let mut d_cols = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        let g_out = &grad_out[n * g.out_image()..(n + 1) * g.out_image()];
        im2col(g, &input[n * g.in_image()..(n + 1) * g.in_image()], &mut cols);
        let cols_t = transpose(&cols, patch, plane);
        gemm_acc(g_out, &cols_t, &mut d_kernel, g.out_channels, plane, patch);

        d_cols.iter_mut().for_each(|v| *v = T::zero());
        gemm_acc(&kernel_t, g_out, &mut d_cols, patch, g.out_channels, plane);
        col2im(g, &d_cols, &mut d_input[n * g.in_image()..(n + 1) * g.in_image()]);
    }
    (d_input, d_kernel)
}

/// Six-loop direct convolution. Reference implementation, not used on the hot path.
pub fn conv2d_direct<T: Element>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    for n in 0..g.batch {
        for k in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let (Some(y), Some(x)) =
                                    (g.source(oy, ki, g.height), g.source(ox, kj, g.width))
                                else {
                                    continue;
                                };
                                let xv = input[((n * g.in_channels + c) * g.height + y) * g.width + x];
                                let kv = kernel[((k * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((n * g.out_channels + k) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Per-channel statistics of an `N, C, H, W` buffer: `(mean, biased variance)`.
pub fn channel_stats<T: Element>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            s += x[base..base + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &xv in &x[base..base + plane] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
