//! im2col convolution kernels over single samples.

use crate::scalar::Scalar;

/// Geometry of a square-kernel, zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, h: usize, w: usize) -> Self {
        ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            h,
            w,
        }
    }

    pub fn ho(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn wo(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_spatial(&self) -> usize {
        self.ho() * self.wo()
    }

    /// Rows of the column matrix: `cin * k * k`.
    pub fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn n_weights(&self) -> usize {
        self.cout * self.patch()
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_spatial()
    }

    pub fn cols_len(&self) -> usize {
        self.patch() * self.out_spatial()
    }
}

pub fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.ho(), g.wo());
    let n = ho * wo;
    let k = g.kernel;
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into an input-shaped gradient.
pub fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dinput: &mut [T]) {
    let (ho, wo) = (g.ho(), g.wo());
    let n = ho * wo;
    let k = g.kernel;
    for ci in 0..g.cin {
        let plane = &mut dinput[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = W * cols + b`, `W` is `cout x patch`.
pub fn forward<T: Scalar>(g: &ConvGeom, weight: &[T], bias: &[T], cols: &[T], out: &mut [T]) {
    let n = g.out_spatial();
    for (co, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    let p = g.patch() as isize;
    T::gemm(
        g.cout,
        g.patch(),
        n,
        T::one(),
        weight,
        (p, 1),
        cols,
        (n as isize, 1),
        T::one(),
        out,
        (n as isize, 1),
    );
}

/// Accumulates `dW += dout * cols^T`, `db += sum(dout)` and, when requested,
/// writes `dcols = W^T * dout`.
pub fn backward<T: Scalar>(
    g: &ConvGeom,
    weight: &[T],
    cols: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dcols: Option<&mut [T]>,
) {
    let n = g.out_spatial();
    let p = g.patch();
    for (co, row) in dout.chunks(n).enumerate() {
        dbias[co] = dbias[co] + row.iter().copied().sum::<T>();
    }
    T::gemm(
        g.cout,
        n,
        p,
        T::one(),
        dout,
        (n as isize, 1),
        cols,
        (1, n as isize),
        T::one(),
        dweight,
        (p as isize, 1),
    );
    if let Some(dcols) = dcols {
        T::gemm(
            p,
            g.cout,
            n,
            T::one(),
            weight,
            (1, p as isize),
            dout,
            (n as isize, 1),
            T::zero(),
            dcols,
            (n as isize, 1),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (ho, wo, k) = (g.ho(), g.wo(), g.kernel);
        let mut out = vec![0.0; g.out_len()];
        for co in 0..g.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..g.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += weight[((co * g.cin + ci) * k + ky) * k + kx]
                                        * input[(ci * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn run(g: ConvGeom) {
        let input: Vec<f64> = (0..g.in_len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let weight: Vec<f64> = (0..g.n_weights()).map(|i| ((i * 104729) % 17) as f64 / 17.0 - 0.5).collect();
        let bias: Vec<f64> = (0..g.cout).map(|i| i as f64 * 0.1).collect();
        let mut cols = vec![0.0; g.cols_len()];
        im2col(&g, &input, &mut cols);
        let mut out = vec![0.0; g.out_len()];
        forward(&g, &weight, &bias, &cols, &mut out);
        for (a, b) in out.iter().zip(naive(&g, &input, &weight, &bias)) {
            assert!((a - b).abs() < 1e-12);
        }

        // <dout, conv(x)> is linear in x and W; check both adjoints against
        // finite differences of that inner product.
        let dout: Vec<f64> = (0..g.out_len()).map(|i| ((i * 31) % 11) as f64 / 11.0 - 0.5).collect();
        let mut dw = vec![0.0; g.n_weights()];
        let mut db = vec![0.0; g.cout];
        let mut dcols = vec![0.0; g.cols_len()];
        backward(&g, &weight, &cols, &dout, &mut dw, &mut db, Some(&mut dcols));
        let mut dx = vec![0.0; g.in_len()];
        col2im_add(&g, &dcols, &mut dx);
        let inner = |x: &[f64], w: &[f64]| -> f64 {
            naive(&g, x, w, &bias).iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        for i in [0, g.in_len() / 2, g.in_len() - 1] {
            let mut up = input.clone();
            up[i] += 1.0;
            assert!((inner(&up, &weight) - inner(&input, &weight) - dx[i]).abs() < 1e-9);
        }
        for i in [0, g.n_weights() - 1] {
            let mut up = weight.clone();
            up[i] += 1.0;
            assert!((inner(&input, &up) - inner(&input, &weight) - dw[i]).abs() < 1e-9);
        }
        assert!((db[0] - dout[..g.out_spatial()].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_naive_and_adjoint() {
        run(ConvGeom::new(2, 3, 3, 1, 5, 4));
        run(ConvGeom::new(3, 4, 3, 2, 8, 8));
        run(ConvGeom::new(2, 3, 1, 2, 6, 6));
        run(ConvGeom::new(1, 1, 5, 1, 4, 4));
    }
}
