//! Dense loops shared by the graph ops. Every reduction here accumulates in
//! a fixed order so results are reproducible run to run.

use super::tensor::Real;

/// `c[m,n] += a[m,k] * b[k,n]`, summing over `k` in ascending order.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Geometry of a same-layout (`[H, W, C]`, channel-last) 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    #[inline]
    fn src(&self, y: usize, ky: usize) -> Option<usize> {
        let v = (y + ky).checked_sub(self.pad)?;
        (v < self.h).then_some(v)
    }

    #[inline]
    fn src_x(&self, x: usize, kx: usize) -> Option<usize> {
        let v = (x + kx).checked_sub(self.pad)?;
        (v < self.w).then_some(v)
    }
}

/// Reorders a `[Cout, Cin, k, k]` kernel into `[(ky, kx, ci), Cout]`.
pub fn kernel_to_rows<T: Real>(kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, cin, cout) = (g.k, g.cin, g.cout);
    let mut out = vec![T::zero(); k * k * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let p = (ky * k + kx) * cin + ci;
                    out[p * cout + co] = kernel[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

/// Reorders a `[Cout, Cin, k, k]` kernel into `[Cout, (ky, kx, ci)]`.
pub fn kernel_to_cols<T: Real>(kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, cin, cout) = (g.k, g.cin, g.cout);
    let mut out = vec![T::zero(); k * k * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    out[co * k * k * cin + (ky * k + kx) * cin + ci] =
                        kernel[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

fn cols_to_kernel<T: Real>(cols: &[T], g: &ConvGeom, kernel: &mut [T]) {
    let (k, cin, cout) = (g.k, g.cin, g.cout);
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    kernel[((co * cin + ci) * k + ky) * k + kx] +=
                        cols[co * k * k * cin + (ky * k + kx) * cin + ci];
                }
            }
        }
    }
}

/// Zero-padded cross-correlation. Per output value the sum runs over
/// `ky`, then `kx`, then `ci`.
pub fn conv2d_forward<T: Real>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let rows = kernel_to_rows(kernel, g);
    let mut out = vec![T::zero(); ho * wo * g.cout];
    for y in 0..ho {
        for x in 0..wo {
            let orow = &mut out[(y * wo + x) * g.cout..(y * wo + x + 1) * g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(y, ky) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src_x(x, kx) else { continue };
                    let base = (iy * g.w + ix) * g.cin;
                    let p0 = (ky * g.k + kx) * g.cin;
                    for ci in 0..g.cin {
                        let a = input[base + ci];
                        let krow = &rows[(p0 + ci) * g.cout..(p0 + ci + 1) * g.cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += a * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients of [`conv2d_forward`].
pub fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    grad_input: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let span = g.k * g.k * g.cin;
    let cols = kernel_to_cols(kernel, g);
    let mut dcols = grad_kernel.as_ref().map(|_| vec![T::zero(); span * g.cout]);
    let mut grad_input = grad_input;
    for y in 0..ho {
        for x in 0..wo {
            let grow = &grad_out[(y * wo + x) * g.cout..(y * wo + x + 1) * g.cout];
            for (co, &gv) in grow.iter().enumerate() {
                if gv == T::zero() {
                    continue;
                }
                let kcol = &cols[co * span..(co + 1) * span];
                for ky in 0..g.k {
                    let Some(iy) = g.src(y, ky) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src_x(x, kx) else { continue };
                        let base = (iy * g.w + ix) * g.cin;
                        let p0 = (ky * g.k + kx) * g.cin;
                        if let Some(dx) = grad_input.as_deref_mut() {
                            axpy(gv, &kcol[p0..p0 + g.cin], &mut dx[base..base + g.cin]);
                        }
                        if let Some(dc) = dcols.as_mut() {
                            let at = co * span + p0;
                            axpy(gv, &input[base..base + g.cin], &mut dc[at..at + g.cin]);
                        }
                    }
                }
            }
        }
    }
    if let (Some(dk), Some(dc)) = (grad_kernel, dcols) {
        cols_to_kernel(&dc, g, dk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [0.0f32];
        gemm_acc(&a, &b, &mut c, 1, 2, 1);
        assert_eq!(c, [11.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }
}
