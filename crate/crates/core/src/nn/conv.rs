//! 3D convolution kernels: im2col over output-row chunks feeding a dense GEMM.

/// Geometry of one cubic-kernel 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

/// Target number of im2col columns per chunk.
const CHUNK_COLUMNS: usize = 4096;

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, in_dims: [usize; 3]) -> Option<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * pad;
            if padded < kernel {
                return None;
            }
            out_dims[a] = (padded - kernel) / stride + 1;
        }
        Some(Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            in_dims,
            out_dims,
        })
    }

    pub fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Rows of the im2col matrix: `cin * k^3`.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Chunks of whole output x-rows, as `(first_row, row_count)` where a row
    /// index is `oy + ny * oz`.
    fn row_chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = self.out_dims[1] * self.out_dims[2];
        let per = (CHUNK_COLUMNS / self.out_dims[0]).max(1);
        (0..rows).step_by(per).map(move |r| (r, per.min(rows - r)))
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the slices cover every element addressed by the given strides
    // (asserted above for a and c, and by construction for b).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Valid output-x range `[lo, hi)` for kernel offset `kx`, i.e. those `ox`
/// with `0 <= ox * stride - pad + kx < nx`.
#[inline]
fn valid_x(ox_n: usize, stride: usize, pad: usize, kx: usize, nx: usize) -> (usize, usize) {
    let offset = kx as isize - pad as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let last_ok = nx as isize - 1 - offset;
    let hi = if last_ok < 0 {
        0
    } else {
        ((last_ok as usize) / stride + 1).min(ox_n)
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, x: &[f64], row0: usize, nrows: usize, col: &mut [f64]) {
    let [nx, ny, nz] = g.in_dims;
    let ox_n = g.out_dims[0];
    let oy_n = g.out_dims[1];
    let k = g.kernel;
    let cols = nrows * ox_n;
    let vin = nx * ny * nz;
    let mut r = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * vin..(ci + 1) * vin];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[r * cols..(r + 1) * cols];
                    let (lo, hi) = valid_x(ox_n, g.stride, g.pad, kx, nx);
                    for j in 0..nrows {
                        let row = row0 + j;
                        let (oy, oz) = (row % oy_n, row / oy_n);
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        let seg = &mut dst[j * ox_n..(j + 1) * ox_n];
                        if iy < 0 || iy >= ny as isize || iz < 0 || iz >= nz as isize || lo >= hi {
                            seg.fill(0.0);
                            continue;
                        }
                        let base = (iy as usize + ny * iz as usize) * nx;
                        seg[..lo].fill(0.0);
                        seg[hi..].fill(0.0);
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            seg[lo..hi].copy_from_slice(&xc[base + ix0..base + ix0 + (hi - lo)]);
                        } else {
                            for (t, v) in seg[lo..hi].iter_mut().enumerate() {
                                *v = xc[base + ix0 + t * g.stride];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], row0: usize, nrows: usize, dx: &mut [f64]) {
    let [nx, ny, nz] = g.in_dims;
    let ox_n = g.out_dims[0];
    let oy_n = g.out_dims[1];
    let k = g.kernel;
    let cols = nrows * ox_n;
    let vin = nx * ny * nz;
    let mut r = 0;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * vin..(ci + 1) * vin];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[r * cols..(r + 1) * cols];
                    let (lo, hi) = valid_x(ox_n, g.stride, g.pad, kx, nx);
                    r += 1;
                    if lo >= hi {
                        continue;
                    }
                    for j in 0..nrows {
                        let row = row0 + j;
                        let (oy, oz) = (row % oy_n, row / oy_n);
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iy < 0 || iy >= ny as isize || iz < 0 || iz >= nz as isize {
                            continue;
                        }
                        let base = (iy as usize + ny * iz as usize) * nx;
                        let seg = &src[j * ox_n..(j + 1) * ox_n];
                        let ix0 = lo * g.stride + kx - g.pad;
                        for (t, v) in seg[lo..hi].iter().enumerate() {
                            dxc[base + ix0 + t * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out = conv(x, w) + b`. Weight layout `[cout][cin][kz][ky][kx]`.
pub fn conv3d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let n = g.out_voxels();
    let kdim = g.patch_len();
    debug_assert_eq!(x.len(), g.cin * g.in_voxels());
    debug_assert_eq!(w.len(), g.cout * kdim);
    debug_assert_eq!(out.len(), g.cout * n);
    if g.is_pointwise() {
        gemm(g.cout, kdim, n, w, kdim, 1, x, n, 1, 0.0, out, n, 1);
    } else {
        let mut col = Vec::new();
        for (row0, nrows) in g.row_chunks() {
            let cols = nrows * g.out_dims[0];
            col.resize(kdim * cols, 0.0);
            im2col(g, x, row0, nrows, &mut col);
            let o0 = row0 * g.out_dims[0];
            gemm(g.cout, kdim, cols, w, kdim, 1, &col, cols, 1, 0.0, &mut out[o0..], n, 1);
        }
    }
    if let Some(b) = b {
        for (co, &bias) in b.iter().enumerate() {
            out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v += bias);
        }
    }
}

/// Accumulates `dw`, `db` and (when given) `dx` from the output gradient.
pub fn conv3d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let n = g.out_voxels();
    let kdim = g.patch_len();
    if let Some(db) = db {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dout[co * n..(co + 1) * n].iter().sum::<f64>();
        }
    }
    if g.is_pointwise() {
        // dw += dout · xᵀ ; dx += wᵀ · dout
        gemm(g.cout, n, kdim, dout, n, 1, x, 1, n, 1.0, dw, kdim, 1);
        if let Some(dx) = dx {
            gemm(kdim, g.cout, n, w, 1, kdim, dout, n, 1, 1.0, dx, n, 1);
        }
        return;
    }
    let mut dx = dx;
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for (row0, nrows) in g.row_chunks() {
        let cols = nrows * g.out_dims[0];
        let o0 = row0 * g.out_dims[0];
        col.resize(kdim * cols, 0.0);
        im2col(g, x, row0, nrows, &mut col);
        gemm(g.cout, cols, kdim, &dout[o0..], n, 1, &col, 1, cols, 1.0, dw, kdim, 1);
        if let Some(dx) = dx.as_deref_mut() {
            dcol.resize(kdim * cols, 0.0);
            gemm(
                kdim,
                g.cout,
                cols,
                w,
                1,
                kdim,
                &dout[o0..],
                n,
                1,
                0.0,
                &mut dcol,
                cols,
                1,
            );
            col2im(g, &dcol, row0, nrows, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    /// Direct seven-loop convolution.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [nx, ny, nz] = g.in_dims;
        let [ox, oy, oz] = g.out_dims;
        let k = g.kernel;
        let mut out = vec![0.0; g.cout * ox * oy * oz];
        for co in 0..g.cout {
            for z in 0..oz {
                for y in 0..oy {
                    for xx in 0..ox {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let ix = (xx * g.stride + kx) as isize - g.pad as isize;
                                        let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                        let iz = (z * g.stride + kz) as isize - g.pad as isize;
                                        if ix < 0
                                            || iy < 0
                                            || iz < 0
                                            || ix >= nx as isize
                                            || iy >= ny as isize
                                            || iz >= nz as isize
                                        {
                                            continue;
                                        }
                                        let xi =
                                            ci * nx * ny * nz + ix as usize + nx * (iy as usize + ny * iz as usize);
                                        let wi = (((co * g.cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[co * ox * oy * oz + xx + ox * (y + oy * z)] = acc;
                    }
                }
            }
        }
        out
    }

    fn check(cin: usize, cout: usize, k: usize, s: usize, p: usize, dims: [usize; 3]) {
        let mut rng = seeded((cin * 31 + k * 7 + s) as u64);
        let g = ConvGeom::new(cin, cout, k, s, p, dims).unwrap();
        let x: Vec<f64> = (0..cin * g.in_voxels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..cout * g.patch_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; cout * g.out_voxels()];
        conv3d_forward(&g, &x, &w, Some(&b), &mut out);
        let expect = naive(&g, &x, &w, &b);
        for (a, e) in out.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }

        // Adjoint identity: <conv(x), u> = <x, dx(u)> + <w, dw(u)> parts checked separately.
        let u: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        conv3d_backward(&g, &x, &w, &u, Some(&mut dx), &mut dw, Some(&mut db));
        let zero_b = vec![0.0; cout];
        let lin = naive(&g, &x, &w, &zero_b);
        let lhs: f64 = lin.iter().zip(&u).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-8 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-8 * lhs.abs().max(1.0));
        for co in 0..cout {
            let n = g.out_voxels();
            let s: f64 = u[co * n..(co + 1) * n].iter().sum();
            assert!((db[co] - s).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_naive_same_padding() {
        check(2, 3, 3, 1, 1, [5, 4, 3]);
        check(1, 2, 5, 1, 2, [6, 5, 4]);
    }

    #[test]
    fn matches_naive_pointwise_and_strided() {
        check(3, 2, 1, 1, 0, [4, 3, 2]);
        check(2, 2, 2, 2, 0, [6, 4, 4]);
        check(2, 3, 3, 2, 1, [7, 6, 5]);
    }

    #[test]
    fn chunking_covers_large_rows() {
        // More output rows than fit in a single chunk.
        check(1, 2, 3, 1, 1, [70, 70, 2]);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        assert!(ConvGeom::new(1, 1, 5, 1, 0, [3, 8, 8]).is_none());
        assert_eq!(ConvGeom::new(1, 1, 3, 2, 1, [16, 8, 5]).unwrap().out_dims, [8, 4, 3]);
    }
}
