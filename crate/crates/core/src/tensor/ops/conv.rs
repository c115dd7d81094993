//! 3-D convolution as chunked im2col + GEMM.
//!
//! Output columns are processed in chunks of whole output rows. Chunk
//! boundaries depend only on the geometry, and partial results are merged in
//! chunk order, so the result does not depend on how chunks are scheduled.

use crate::error::{config_err, Result};
use crate::par;
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

/// Stride and zero padding per spatial axis (D, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub const fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dSpec { stride, padding }
    }

    /// Stride 1, padding `k / 2`: preserves extents for odd kernels.
    pub const fn same(k: usize) -> Self {
        Conv3dSpec { stride: [1; 3], padding: [k / 2; 3] }
    }

    /// 3x3x3 kernel with stride 2 and padding 1: halves (floor) each extent.
    pub const fn down2() -> Self {
        Conv3dSpec { stride: [2; 3], padding: [1; 3] }
    }
}

/// Target number of output columns per chunk.
const CHUNK_COLS: usize = 4096;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    inp: [usize; 3],
    cout: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn ck(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn pointwise(&self) -> bool {
        self.k == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
    fn lines(&self) -> usize {
        self.out[0] * self.out[1]
    }
    /// Ranges of output lines (fixed (z, y) pairs) making up each chunk.
    fn line_chunks(&self) -> Vec<std::ops::Range<usize>> {
        let per = (CHUNK_COLS / self.out[2].max(1)).max(1);
        par::ranges(self.lines(), per)
    }

    /// Fills `col` (ck x cols, row-major) for `lines` of sample `x`. The
    /// buffer is cleared and rebuilt, so it never needs zeroing up front.
    fn im2col<T: Scalar>(&self, x: &[T], lines: std::ops::Range<usize>, col: &mut Vec<T>) {
        let ow = self.out[2];
        let [_, ih, iw] = self.inp;
        let sw = self.stride[2];
        col.clear();
        col.reserve(self.ck() * lines.len() * ow);
        for c in 0..self.cin {
            let xc = &x[c * self.in_vol()..(c + 1) * self.in_vol()];
            for kz in 0..self.k[0] {
                for ky in 0..self.k[1] {
                    for kx in 0..self.k[2] {
                        let (lo, hi) = self.valid_ox(kx);
                        for line in lines.clone() {
                            let (oz, oy) = (line / self.out[1], line % self.out[1]);
                            let iz = (oz * self.stride[0] + kz) as isize - self.pad[0] as isize;
                            let iy = (oy * self.stride[1] + ky) as isize - self.pad[1] as isize;
                            if iz < 0 || iz >= self.inp[0] as isize || iy < 0 || iy >= ih as isize || lo >= hi {
                                col.resize(col.len() + ow, T::zero());
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let ix0 = base + lo * sw + kx - self.pad[2];
                            col.resize(col.len() + lo, T::zero());
                            if sw == 1 {
                                col.extend_from_slice(&xc[ix0..ix0 + (hi - lo)]);
                            } else {
                                col.extend((0..hi - lo).map(|j| xc[ix0 + j * sw]));
                            }
                            col.resize(col.len() + ow - hi, T::zero());
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: scatters `col` back into `gx`.
    fn col2im<T: Scalar>(&self, col: &[T], lines: std::ops::Range<usize>, gx: &mut [T]) {
        let ow = self.out[2];
        let cols = lines.len() * ow;
        let [_, ih, iw] = self.inp;
        let mut row = 0;
        for c in 0..self.cin {
            let gc = &mut gx[c * self.in_vol()..(c + 1) * self.in_vol()];
            for kz in 0..self.k[0] {
                for ky in 0..self.k[1] {
                    for kx in 0..self.k[2] {
                        let src_row = &col[row * cols..(row + 1) * cols];
                        let (lo, hi) = self.valid_ox(kx);
                        row += 1;
                        if lo >= hi {
                            continue;
                        }
                        for (li, line) in lines.clone().enumerate() {
                            let src = &src_row[li * ow..(li + 1) * ow];
                            let (oz, oy) = (line / self.out[1], line % self.out[1]);
                            let iz = (oz * self.stride[0] + kz) as isize - self.pad[0] as isize;
                            let iy = (oy * self.stride[1] + ky) as isize - self.pad[1] as isize;
                            if iz < 0 || iz >= self.inp[0] as isize || iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let sw = self.stride[2];
                            let ix0 = base + lo * sw + kx - self.pad[2];
                            if sw == 1 {
                                let dst = &mut gc[ix0..ix0 + (hi - lo)];
                                dst.iter_mut().zip(&src[lo..hi]).for_each(|(g, &s)| *g = *g + s);
                            } else {
                                for (j, &s) in src[lo..hi].iter().enumerate() {
                                    let g = &mut gc[ix0 + j * sw];
                                    *g = *g + s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output x-range `[lo, hi)` whose input column lies inside the volume.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride[2], self.pad[2] as isize, self.inp[2] as isize);
        let mut lo = 0;
        while lo < self.out[2] && ((lo * s + kx) as isize - p) < 0 {
            lo += 1;
        }
        let mut hi = self.out[2];
        while hi > lo && ((( hi - 1) * s + kx) as isize - p) >= w {
            hi -= 1;
        }
        (lo, hi)
    }
}

fn geometry(x: &[usize], w: &[usize], bias: Option<&[usize]>, spec: Conv3dSpec) -> Result<Geom> {
    let [n, cin, d, h, wd] = <[usize; 5]>::try_from(x)
        .map_err(|_| config_err!("conv3d input must be N x C x D x H x W, got {:?}", x))?;
    let [cout, wcin, kd, kh, kw] = <[usize; 5]>::try_from(w)
        .map_err(|_| config_err!("conv3d weight must be Cout x Cin x kd x kh x kw, got {:?}", w))?;
    if wcin != cin {
        return Err(config_err!("conv3d channel mismatch: input {:?} vs weight {:?}", x, w));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(config_err!("conv3d bias shape {:?} does not match weight {:?}", b, w));
        }
    }
    if spec.stride.iter().any(|&s| s == 0) {
        return Err(config_err!("conv3d stride must be >= 1, got {:?}", spec.stride));
    }
    let inp = [d, h, wd];
    let k = [kd, kh, kw];
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = inp[a] + 2 * spec.padding[a];
        if padded < k[a] {
            return Err(config_err!(
                "conv3d kernel {:?} larger than padded input {:?} (weight {:?}) on axis {}",
                k,
                x,
                w,
                a
            ));
        }
        out[a] = (padded - k[a]) / spec.stride[a] + 1;
    }
    Ok(Geom { n, cin, inp, cout, k, stride: spec.stride, pad: spec.padding, out })
}

fn forward<T: Scalar>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ck, pv) = (g.ck(), g.out_vol());
    let mut out = vec![T::zero(); g.n * g.cout * pv];
    if g.pointwise() {
        par::for_each_chunk_mut(&mut out, g.cout * pv, |n, o| {
            let xs = &x[n * g.cin * pv..(n + 1) * g.cin * pv];
            T::gemm(g.cout, ck, pv, T::one(), w, false, xs, false, T::zero(), o);
        });
    } else {
        let chunks = g.line_chunks();
        let ow = g.out[2];
        let jobs: Vec<(usize, std::ops::Range<usize>)> =
            (0..g.n).flat_map(|n| chunks.iter().map(move |c| (n, c.clone()))).collect();
        let parts = par::map_indexed(jobs.len(), |j| {
            let (n, lines) = jobs[j].clone();
            let cols = lines.len() * ow;
            let mut col = Vec::new();
            g.im2col(&x[n * g.cin * g.in_vol()..(n + 1) * g.cin * g.in_vol()], lines, &mut col);
            let mut o = vec![T::zero(); g.cout * cols];
            T::gemm(g.cout, ck, cols, T::one(), w, false, &col, false, T::zero(), &mut o);
            o
        });
        for ((n, lines), part) in jobs.iter().zip(parts) {
            let cols = lines.len() * ow;
            let start = lines.start * ow;
            for co in 0..g.cout {
                let dst = (n * g.cout + co) * pv + start;
                out[dst..dst + cols].copy_from_slice(&part[co * cols..(co + 1) * cols]);
            }
        }
    }
    if let Some(b) = bias {
        for plane in out.chunks_mut(pv).enumerate() {
            let bv = b[plane.0 % g.cout];
            plane.1.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    out
}

struct Conv3dBackward {
    geom: Geom,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for Conv3dBackward {
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], _out: &Tensor<T>, wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (ck, pv) = (g.ck(), g.out_vol());
        let want_x = wants[0];
        let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
        let mut gw = vec![T::zero(); w.len()];

        if g.pointwise() {
            let parts = par::map_indexed(g.n, |n| {
                let gs = &grad[n * g.cout * pv..(n + 1) * g.cout * pv];
                let xs = &x[n * g.cin * pv..(n + 1) * g.cin * pv];
                let mut pw = vec![T::zero(); w.len()];
                T::gemm(g.cout, pv, ck, T::one(), gs, false, xs, true, T::zero(), &mut pw);
                let px = want_x.then(|| {
                    let mut px = vec![T::zero(); xs.len()];
                    T::gemm(ck, g.cout, pv, T::one(), w, true, gs, false, T::zero(), &mut px);
                    px
                });
                (pw, px)
            });
            for (n, (pw, px)) in parts.into_iter().enumerate() {
                gw.iter_mut().zip(&pw).for_each(|(a, &b)| *a = *a + b);
                if let (Some(gx), Some(px)) = (gx.as_mut(), px) {
                    gx[n * g.cin * pv..(n + 1) * g.cin * pv].copy_from_slice(&px);
                }
            }
        } else {
            let chunks = g.line_chunks();
            let ow = g.out[2];
            let jobs: Vec<(usize, std::ops::Range<usize>)> =
                (0..g.n).flat_map(|n| chunks.iter().map(move |c| (n, c.clone()))).collect();
            let parts = par::map_indexed(jobs.len(), |j| {
                let (n, lines) = jobs[j].clone();
                let cols = lines.len() * ow;
                let start = lines.start * ow;
                let mut gchunk = Vec::with_capacity(g.cout * cols);
                for co in 0..g.cout {
                    let src = (n * g.cout + co) * pv + start;
                    gchunk.extend_from_slice(&grad[src..src + cols]);
                }
                let mut col = Vec::new();
                g.im2col(&x[n * g.cin * g.in_vol()..(n + 1) * g.cin * g.in_vol()], lines, &mut col);
                let mut pw = vec![T::zero(); w.len()];
                T::gemm(g.cout, cols, ck, T::one(), &gchunk, false, &col, true, T::zero(), &mut pw);
                let pcol = want_x.then(|| {
                    // reuse the im2col buffer for the column gradient
                    T::gemm(ck, g.cout, cols, T::one(), w, true, &gchunk, false, T::zero(), &mut col);
                    col
                });
                (pw, pcol)
            });
            let in_stride = g.cin * g.in_vol();
            for ((n, lines), (pw, pcol)) in jobs.iter().zip(parts) {
                gw.iter_mut().zip(&pw).for_each(|(a, &b)| *a = *a + b);
                if let (Some(gx), Some(pcol)) = (gx.as_mut(), pcol) {
                    g.col2im(&pcol, lines.clone(), &mut gx[n * in_stride..(n + 1) * in_stride]);
                }
            }
        }

        let gb = self.has_bias.then(|| {
            let mut gb = vec![T::zero(); g.cout];
            for (i, plane) in grad.chunks(pv).enumerate() {
                gb[i % g.cout] = gb[i % g.cout] + plane.iter().copied().sum::<T>();
            }
            gb
        });
        let mut res = vec![gx, Some(gw)];
        if self.has_bias {
            res.push(gb);
        }
        res
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of an N x Cin x D x H x W input with a
    /// Cout x Cin x kd x kh x kw kernel.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let geom = geometry(self.shape(x), self.shape(weight), bias.map(|b| self.shape(b)), spec)?;
        let out = forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        self.add_macs((geom.n * geom.cout * geom.ck() * geom.out_vol()) as u64);
        let shape = vec![geom.n, geom.cout, geom.out[0], geom.out[1], geom.out[2]];
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push_op(value, &inputs, Conv3dBackward { geom, has_bias: bias.is_some() }))
    }
}

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}
