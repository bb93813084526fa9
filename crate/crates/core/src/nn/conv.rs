use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::params::{GradStore, Initializer, ParamStore};
use crate::tensor::{Real, Tensor};

/// Square kernel geometry shared by convolutions and their transposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a forward convolution over `n` input pixels.
    pub fn out_size(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over `n` input pixels.
    pub fn transposed_out_size(&self, n: usize) -> Option<usize> {
        if n == 0 {
            return None;
        }
        ((n - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }

}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
/// falls inside `0..w`.
fn valid_range(kj: usize, g: ConvGeom, w: usize, wo: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(s) } else { 0 };
    let hi = if w + g.pad > kj {
        ((w + g.pad - kj - 1) / s + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `(c, h, w)` image into a `(c*k*k, ho*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    im2col_ld(x, c, h, w, g, ho, wo, cols, ho * wo);
}

/// [`im2col`] into a matrix whose rows are `ld` apart.
#[allow(clippy::too_many_arguments)]
fn im2col_ld<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
    ld: usize,
) {
    let k = g.kernel;
    let plane = ho * wo;
    for ch in 0..c {
        let img = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + plane];
                let (lo, hi) = valid_range(kj, g, w, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    col2im_ld(cols, c, h, w, g, ho, wo, x, ho * wo);
}

/// [`col2im`] from a matrix whose rows are `ld` apart.
#[allow(clippy::too_many_arguments)]
fn col2im_ld<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
    ld: usize,
) {
    let k = g.kernel;
    for ch in 0..c {
        let img = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ld..];
                let (lo, hi) = valid_range(kj, g, w, wo);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    let vals = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + vals.len()].iter_mut().zip(vals) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(vals) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `rows x cols` to `cols x rows`.
pub fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    const B: usize = 32;
    let mut out = vec![T::zero(); rows * cols];
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

fn stitch<T: Real>(parts: Vec<Vec<T>>, shape: [usize; 4]) -> Tensor<T> {
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend(p);
    }
    Tensor::from_vec(&shape, data).expect("per-group outputs sized by construction")
}

/// Pixel-axis width one gemm call aims for. Small feature maps are batched
/// across samples up to this many columns.
const GEMM_COLUMNS: usize = 1024;

/// Consecutive sample groups. The grouping depends only on the shapes, so the
/// parallel and sequential paths perform identical arithmetic.
fn sample_groups(n: usize, plane: usize) -> Vec<Range<usize>> {
    let g = (GEMM_COLUMNS / plane.max(1)).clamp(1, n.max(1));
    (0..n).step_by(g).map(|s| s..(s + g).min(n)).collect()
}

/// Places the samples of `range` side by side as a `(rows, len * plane)` matrix.
fn join_samples<T: Real>(x: &Tensor<T>, range: Range<usize>, rows: usize, plane: usize) -> Vec<T> {
    let g = range.len();
    if g == 1 {
        return x.sample(range.start).to_vec();
    }
    let ld = g * plane;
    let mut out = vec![T::zero(); rows * ld];
    for (j, i) in range.enumerate() {
        let s = x.sample(i);
        for r in 0..rows {
            out[r * ld + j * plane..r * ld + (j + 1) * plane].copy_from_slice(&s[r * plane..(r + 1) * plane]);
        }
    }
    out
}

/// Inverse of [`join_samples`].
fn split_samples<T: Real>(m: Vec<T>, g: usize, rows: usize, plane: usize) -> Vec<T> {
    if g == 1 {
        return m;
    }
    let ld = g * plane;
    let mut out = Vec::with_capacity(m.len());
    for j in 0..g {
        for r in 0..rows {
            out.extend_from_slice(&m[r * ld + j * plane..r * ld + (j + 1) * plane]);
        }
    }
    out
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in y.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

/// Sums per-group parameter gradients in group order.
fn reduce_into<'a, T: Real>(dst: &mut Tensor<T>, parts: impl Iterator<Item = &'a Vec<T>>) {
    for p in parts {
        for (d, &v) in dst.data_mut().iter_mut().zip(p) {
            *d += v;
        }
    }
}

/// Per-row sums of a `(rows, len)` matrix.
fn row_sums<T: Real>(m: &[T], rows: usize, len: usize) -> Vec<T> {
    (0..rows).map(|r| m[r * len..(r + 1) * len].iter().copied().sum()).collect()
}

/// 2-D convolution with weights laid out `(out, in, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Conv2d {
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let k = geom.kernel;
        let weight = params.push(
            format!("{name}.weight"),
            init.normal(&[out_channels, in_channels, k, k]),
        );
        let bias = bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            in_channels,
            out_channels,
            geom,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.geom.out_size(h), self.geom.out_size(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
            _ => Err(Error::shape(format!(
                "kernel {} does not fit a {h}x{w} input",
                self.geom.kernel
            ))),
        }
    }

    /// Multiply-accumulates for one image of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (ho, wo) = self.out_hw(h, w)?;
        let k = self.geom.kernel;
        Ok((ho * wo * self.out_channels * self.in_channels * k * k) as u64)
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.out_hw(h, w)?;
        let k = self.geom.kernel;
        let (ckk, oc, plane) = (c * k * k, self.out_channels, ho * wo);
        let weight = params.get(self.weight).data();
        let bias = self.bias.map(|b| params.get(b).data());
        let groups = sample_groups(n, plane);
        let parts = par::map_indexed(groups.len(), |gi| {
            let range = groups[gi].clone();
            let g = range.len();
            let cn = g * plane;
            let mut cols = vec![T::zero(); ckk * cn];
            for (j, i) in range.enumerate() {
                im2col_ld(x.sample(i), c, h, w, self.geom, ho, wo, &mut cols[j * plane..], cn);
            }
            let mut y = vec![T::zero(); oc * cn];
            T::gemm(oc, ckk, cn, T::one(), weight, false, &cols, false, T::zero(), &mut y);
            let mut y = split_samples(y, g, oc, plane);
            if let Some(b) = bias {
                add_bias(&mut y, b, plane);
            }
            y
        });
        Ok(stitch(parts, [n, oc, ho, wo]))
    }

    /// Back-propagates `dy` given the forward input `x`.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the input
    /// gradient is returned only when `need_dx` is set.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut GradStore<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        let (_, oc, ho, wo) = dy.dims4();
        let k = self.geom.kernel;
        let (ckk, plane) = (c * k * k, ho * wo);
        let weight = params.get(self.weight).data();
        let want_params = grads.is_some();
        let groups = sample_groups(n, plane);
        let parts = par::map_indexed(groups.len(), |gi| {
            let range = groups[gi].clone();
            let g = range.len();
            let cn = g * plane;
            let dyg = join_samples(dy, range.clone(), oc, plane);
            let mut dw = Vec::new();
            let mut db = Vec::new();
            if want_params {
                let mut cols = vec![T::zero(); ckk * cn];
                for (j, i) in range.enumerate() {
                    im2col_ld(x.sample(i), c, h, w, self.geom, ho, wo, &mut cols[j * plane..], cn);
                }
                // Both operands keep the long pixel axis outermost, which keeps
                // gemm packing contiguous.
                let cols_t = transpose(&cols, ckk, cn);
                let dy_t = transpose(&dyg, oc, cn);
                dw = vec![T::zero(); oc * ckk];
                T::gemm(oc, cn, ckk, T::one(), &dy_t, true, &cols_t, false, T::zero(), &mut dw);
                if self.bias.is_some() {
                    db = row_sums(&dyg, oc, cn);
                }
            }
            let mut dx = Vec::new();
            if need_dx {
                let mut dcols = vec![T::zero(); ckk * cn];
                T::gemm(ckk, oc, cn, T::one(), weight, true, &dyg, false, T::zero(), &mut dcols);
                let chw = c * h * w;
                dx = vec![T::zero(); g * chw];
                for j in 0..g {
                    col2im_ld(&dcols[j * plane..], c, h, w, self.geom, ho, wo, &mut dx[j * chw..(j + 1) * chw], cn);
                }
            }
            (dw, db, dx)
        });
        if let Some(grads) = grads {
            reduce_into(grads.get_mut(self.weight), parts.iter().map(|p| &p.0));
            if let Some(b) = self.bias {
                reduce_into(grads.get_mut(b), parts.iter().map(|p| &p.1));
            }
        }
        need_dx.then(|| stitch(parts.into_iter().map(|p| p.2).collect(), [n, c, h, w]))
    }
}

/// Transposed convolution with weights laid out `(in, out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    pub weight: usize,
    pub bias: Option<usize>,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let k = geom.kernel;
        let weight = params.push(
            format!("{name}.weight"),
            init.normal(&[in_channels, out_channels, k, k]),
        );
        let bias = bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            in_channels,
            out_channels,
            geom,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.geom.transposed_out_size(h), self.geom.transposed_out_size(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
            _ => Err(Error::shape(format!(
                "transposed kernel {} cannot expand a {h}x{w} input",
                self.geom.kernel
            ))),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        self.out_hw(h, w)?;
        let k = self.geom.kernel;
        Ok((h * w * self.in_channels * self.out_channels * k * k) as u64)
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.out_hw(h, w)?;
        let k = self.geom.kernel;
        let oc = self.out_channels;
        let (okk, plane, oplane) = (oc * k * k, h * w, ho * wo);
        let weight = params.get(self.weight).data();
        let bias = self.bias.map(|b| params.get(b).data());
        let groups = sample_groups(n, plane);
        let parts = par::map_indexed(groups.len(), |gi| {
            let range = groups[gi].clone();
            let g = range.len();
            let cn = g * plane;
            let xg = join_samples(x, range, c, plane);
            let mut cols = vec![T::zero(); okk * cn];
            T::gemm(okk, c, cn, T::one(), weight, true, &xg, false, T::zero(), &mut cols);
            let sample = oc * oplane;
            let mut y = vec![T::zero(); g * sample];
            for j in 0..g {
                col2im_ld(&cols[j * plane..], oc, ho, wo, self.geom, h, w, &mut y[j * sample..(j + 1) * sample], cn);
            }
            if let Some(b) = bias {
                add_bias(&mut y, b, oplane);
            }
            y
        });
        Ok(stitch(parts, [n, oc, ho, wo]))
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut GradStore<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        let (_, oc, ho, wo) = dy.dims4();
        let k = self.geom.kernel;
        let (okk, plane, oplane) = (oc * k * k, h * w, ho * wo);
        let weight = params.get(self.weight).data();
        let want_params = grads.is_some();
        let groups = sample_groups(n, plane);
        let parts = par::map_indexed(groups.len(), |gi| {
            let range = groups[gi].clone();
            let g = range.len();
            let cn = g * plane;
            let mut dcols = vec![T::zero(); okk * cn];
            for (j, i) in range.clone().enumerate() {
                im2col_ld(dy.sample(i), oc, ho, wo, self.geom, h, w, &mut dcols[j * plane..], cn);
            }
            let mut dw = Vec::new();
            let mut db = Vec::new();
            if want_params {
                let xg = join_samples(x, range.clone(), c, plane);
                let x_t = transpose(&xg, c, cn);
                let dcols_t = transpose(&dcols, okk, cn);
                dw = vec![T::zero(); c * okk];
                T::gemm(c, cn, okk, T::one(), &x_t, true, &dcols_t, false, T::zero(), &mut dw);
                if self.bias.is_some() {
                    db = row_sums(&join_samples(dy, range, oc, oplane), oc, g * oplane);
                }
            }
            let mut dx = Vec::new();
            if need_dx {
                let mut dxg = vec![T::zero(); c * cn];
                T::gemm(c, okk, cn, T::one(), weight, false, &dcols, false, T::zero(), &mut dxg);
                dx = split_samples(dxg, g, c, plane);
            }
            (dw, db, dx)
        });
        if let Some(grads) = grads {
            reduce_into(grads.get_mut(self.weight), parts.iter().map(|p| &p.0));
            if let Some(b) = self.bias {
                reduce_into(grads.get_mut(b), parts.iter().map(|p| &p.1));
            }
        }
        need_dx.then(|| stitch(parts.into_iter().map(|p| p.2).collect(), [n, c, h, w]))
    }
}
