//! Dense inner loops shared by the tensor and autodiff layers.
//!
//! Every kernel takes an [`Exec`] policy. The parallel path splits work over
//! independent output rows (or batch items) and runs the exact same scalar
//! loop per row as the sequential path, so both produce bitwise-identical
//! results. Without the `parallel` feature, [`Exec::Parallel`] runs
//! sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution policy for a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

/// Work (in multiply-adds) below which the automatic policy stays sequential.
const PARALLEL_THRESHOLD: usize = 1 << 15;

impl Exec {
    /// Picks the parallel path for large enough workloads when it is compiled in.
    pub fn auto(work: usize) -> Self {
        if cfg!(feature = "parallel") && work >= PARALLEL_THRESHOLD {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    out_row.iter_mut().for_each(|v| *v = 0.0);
    for (p, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, all row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], exec: Exec) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => out
            .par_chunks_mut(n)
            .zip(a.par_chunks(k.max(1)))
            .for_each(|(o, ar)| matmul_row(ar, b, n, o)),
        _ => out
            .chunks_mut(n)
            .zip(a.chunks(k.max(1)))
            .for_each(|(o, ar)| matmul_row(ar, b, n, o)),
    }
}

/// Convolution geometry for a `[batch, channels, height, width]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial size, or `None` when the geometry does not tile evenly.
    pub fn output_size(&self) -> Option<(usize, usize)> {
        let span = |len: usize, k: usize| -> Option<usize> {
            let padded = len + 2 * self.padding;
            if self.stride == 0 || k == 0 || padded < k || !(padded - k).is_multiple_of(self.stride) {
                return None;
            }
            Some((padded - k) / self.stride + 1)
        };
        Some((span(self.height, self.kernel_h)?, span(self.width, self.kernel_w)?))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Visits `(patch column, input offset within one batch item)` for every
/// in-bounds tap of the patch at output position `(oy, ox)`.
#[inline]
fn for_each_tap(g: &ConvGeometry, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    let mut col = 0;
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
            for kx in 0..g.kernel_w {
                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                    f(col, (c * g.height + iy as usize) * g.width + ix as usize);
                }
                col += 1;
            }
        }
    }
}

/// Unfolds patches into a `(batch·oh·ow) × (channels·kh·kw)` matrix, `kw` fastest.
/// Padding taps are zero.
pub fn im2col(input: &[f64], g: &ConvGeometry, out: &mut [f64], exec: Exec) {
    let (oh, ow) = g.output_size().expect("geometry validated by caller");
    let k = g.patch_len();
    let in_len = g.input_len();
    debug_assert_eq!(out.len(), g.batch * oh * ow * k);
    let fill = |(row, dst): (usize, &mut [f64])| {
        let b = row / (oh * ow);
        let pos = row % (oh * ow);
        let src = &input[b * in_len..(b + 1) * in_len];
        dst.iter_mut().for_each(|v| *v = 0.0);
        for_each_tap(g, pos / ow, pos % ow, |col, off| dst[col] = src[off]);
    };
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => out.par_chunks_mut(k).enumerate().for_each(fill),
        _ => out.chunks_mut(k).enumerate().for_each(fill),
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into input layout.
pub fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64], exec: Exec) {
    let (oh, ow) = g.output_size().expect("geometry validated by caller");
    let k = g.patch_len();
    let in_len = g.input_len();
    debug_assert_eq!(out.len(), g.batch * in_len);
    let scatter = |(b, dst): (usize, &mut [f64])| {
        dst.iter_mut().for_each(|v| *v = 0.0);
        for pos in 0..oh * ow {
            let row = &cols[(b * oh * ow + pos) * k..(b * oh * ow + pos + 1) * k];
            for_each_tap(g, pos / ow, pos % ow, |col, off| dst[off] += row[col]);
        }
    };
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => out.par_chunks_mut(in_len).enumerate().for_each(scatter),
        _ => out.chunks_mut(in_len).enumerate().for_each(scatter),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out, Exec::Sequential);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let (m, k, n) = (37, 29, 41);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 101) as f64 / 13.0 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 104729) % 97) as f64 / 11.0 - 4.0).collect();
        let mut s = vec![0.0; m * n];
        let mut p = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut s, Exec::Sequential);
        matmul(&a, &b, m, k, n, &mut p, Exec::Parallel);
        assert_eq!(s, p);

        let g = ConvGeometry {
            batch: 2,
            channels: 3,
            height: 7,
            width: 6,
            kernel_h: 3,
            kernel_w: 2,
            stride: 1,
            padding: 1,
        };
        let (oh, ow) = g.output_size().unwrap();
        let input: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| i as f64 * 0.25).collect();
        let mut cs = vec![0.0; 2 * oh * ow * g.patch_len()];
        let mut cp = cs.clone();
        im2col(&input, &g, &mut cs, Exec::Sequential);
        im2col(&input, &g, &mut cp, Exec::Parallel);
        assert_eq!(cs, cp);
        let mut bs = vec![0.0; input.len()];
        let mut bp = bs.clone();
        col2im(&cs, &g, &mut bs, Exec::Sequential);
        col2im(&cs, &g, &mut bp, Exec::Parallel);
        assert_eq!(bs, bp);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry {
            batch: 1,
            channels: 2,
            height: 5,
            width: 5,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
        };
        let (oh, ow) = g.output_size().unwrap();
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..oh * ow * g.patch_len()).map(|i| (i as f64).cos()).collect();
        let mut cx = vec![0.0; y.len()];
        im2col(&x, &g, &mut cx, Exec::Sequential);
        let mut ay = vec![0.0; x.len()];
        col2im(&y, &g, &mut ay, Exec::Sequential);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ay).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn uneven_geometry_rejected() {
        let g = ConvGeometry {
            batch: 1,
            channels: 1,
            height: 4,
            width: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 0,
        };
        assert_eq!(g.output_size(), None);
    }
}
