use super::scalar::Real;
use super::{Backward, FlowField, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Bilinear tap: two source indices per axis and the weight of the second.
#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// `false` when the coordinate was clamped to the border.
    inside: bool,
}

#[inline]
fn tap<T: Real>(pos: T, extent: usize) -> Tap<T> {
    let hi = T::from_f64((extent - 1) as f64);
    let (p, inside) = if pos < T::ZERO {
        (T::ZERO, false)
    } else if pos > hi {
        (hi, false)
    } else {
        (pos, true)
    };
    let f = p.floor();
    let i0 = f.to_f64() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    Tap {
        i0,
        i1,
        frac: p - f,
        inside,
    }
}

/// Border-clamped bilinear lookup into one `h x w` plane at pixel
/// coordinates `(px, py)`.
pub fn bilinear_at<T: Real>(plane: &[T], h: usize, w: usize, px: T, py: T) -> T {
    let tx = tap(px, w);
    let ty = tap(py, h);
    let v00 = plane[ty.i0 * w + tx.i0];
    let v01 = plane[ty.i0 * w + tx.i1];
    let v10 = plane[ty.i1 * w + tx.i0];
    let v11 = plane[ty.i1 * w + tx.i1];
    lerp(lerp(v00, v01, tx.frac), lerp(v10, v11, tx.frac), ty.frac)
}

/// Linear interpolation that returns `a` untouched at `t == 0`.
#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    if t == T::ZERO {
        a
    } else {
        a * (T::ONE - t) + b * t
    }
}

/// Pixel-space scale of one normalized unit: the image spans `[-1, 1]`, so
/// one unit covers `(extent - 1) / 2` pixels.
#[inline]
pub fn half_extent<T: Real>(extent: usize) -> T {
    T::from_f64((extent.max(1) - 1) as f64 * 0.5)
}

struct GridSampleRule {
    dims: (usize, usize, usize, usize),
}

impl GridSampleRule {
    /// Calls `f(out_plane_index, pixel, tx, ty)` for every sampled point.
    fn visit<T: Real>(&self, flow: &[T], mut f: impl FnMut(usize, usize, Tap<T>, Tap<T>)) {
        let (n, _, h, w) = self.dims;
        let (sx, sy) = (half_extent::<T>(w), half_extent::<T>(h));
        let plane = h * w;
        for b in 0..n {
            let fx = &flow[(b * 2) * plane..(b * 2 + 1) * plane];
            let fy = &flow[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    // Equivalent to ((g(x) + f) + 1) / 2 * (W - 1) with g(x) = 2x/(W-1) - 1,
                    // written so that a zero flow lands exactly on the pixel.
                    let px = T::from_f64(x as f64) + fx[i] * sx;
                    let py = T::from_f64(y as f64) + fy[i] * sy;
                    f(b, i, tap(px, w), tap(py, h));
                }
            }
        }
    }
}

impl<T: Real> Backward<T> for GridSampleRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (_, c, h, w) = self.dims;
        let plane = h * w;
        let (source, flow) = (&inputs[0], &inputs[1]);
        let src = source.data();
        let fl = flow.data();
        let mut d_src = source.requires_grad().then(|| vec![T::ZERO; source.numel()]);
        let mut d_flow = flow.requires_grad().then(|| vec![T::ZERO; flow.numel()]);
        let (sx, sy) = (half_extent::<T>(w), half_extent::<T>(h));
        let one = T::ONE;
        self.visit(&fl, |b, i, tx, ty| {
            let (mut gx, mut gy) = (T::ZERO, T::ZERO);
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let g = grad[base + i];
                if let Some(ds) = d_src.as_mut() {
                    ds[base + ty.i0 * w + tx.i0] += g * (one - tx.frac) * (one - ty.frac);
                    ds[base + ty.i0 * w + tx.i1] += g * tx.frac * (one - ty.frac);
                    ds[base + ty.i1 * w + tx.i0] += g * (one - tx.frac) * ty.frac;
                    ds[base + ty.i1 * w + tx.i1] += g * tx.frac * ty.frac;
                }
                if d_flow.is_some() {
                    let v00 = src[base + ty.i0 * w + tx.i0];
                    let v01 = src[base + ty.i0 * w + tx.i1];
                    let v10 = src[base + ty.i1 * w + tx.i0];
                    let v11 = src[base + ty.i1 * w + tx.i1];
                    if tx.inside {
                        gx += g * ((v01 - v00) * (one - ty.frac) + (v11 - v10) * ty.frac);
                    }
                    if ty.inside {
                        gy += g * ((v10 - v00) * (one - tx.frac) + (v11 - v01) * tx.frac);
                    }
                }
            }
            if let Some(df) = d_flow.as_mut() {
                df[(b * 2) * plane + i] += gx * sx;
                df[(b * 2 + 1) * plane + i] += gy * sy;
            }
        });
        vec![d_src, d_flow]
    }
}

struct UpsampleRule {
    dims: (usize, usize, usize, usize),
    mode: UpsampleMode,
}

impl UpsampleRule {
    /// Source taps `(index, weight)` along one axis for output coordinate `o`.
    fn axis_taps(&self, o: usize, extent: usize) -> [(usize, f64); 2] {
        match self.mode {
            UpsampleMode::Nearest => [(o / 2, 1.0), (o / 2, 0.0)],
            UpsampleMode::Bilinear => {
                let pos = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(extent - 1);
                let frac = pos - i0 as f64;
                [(i0, 1.0 - frac), (i1, frac)]
            }
        }
    }

    fn visit(&self, mut f: impl FnMut(usize, usize, f64)) {
        let (n, c, h, w) = self.dims;
        let (oh, ow) = (2 * h, 2 * w);
        let xt: Vec<_> = (0..ow).map(|ox| self.axis_taps(ox, w)).collect();
        for plane in 0..n * c {
            for oy in 0..oh {
                let yt = self.axis_taps(oy, h);
                for (ox, xt) in xt.iter().enumerate() {
                    let o = (plane * oh + oy) * ow + ox;
                    for &(iy, wy) in &yt {
                        for &(ix, wx) in xt {
                            let wgt = wy * wx;
                            if wgt != 0.0 {
                                f(o, (plane * h + iy) * w + ix, wgt);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Backward<T> for UpsampleRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::ZERO; inputs[0].numel()];
        self.visit(|o, i, wgt| g[i] += grad[o] * T::from_f64(wgt));
        vec![Some(g)]
    }
}

struct PoolRule {
    dims: (usize, usize, usize, usize),
    factor: usize,
    average: bool,
}

impl PoolRule {
    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        let (n, c, h, w) = self.dims;
        let k = self.factor;
        let (oh, ow) = (h / k, w / k);
        let taps = if self.average { k } else { 1 };
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (plane * oh + oy) * ow + ox;
                    for dy in 0..taps {
                        for dx in 0..taps {
                            f(o, (plane * h + oy * k + dy) * w + ox * k + dx);
                        }
                    }
                }
            }
        }
    }

    fn weight(&self) -> f64 {
        if self.average {
            1.0 / (self.factor * self.factor) as f64
        } else {
            1.0
        }
    }
}

impl<T: Real> Backward<T> for PoolRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let wgt = T::from_f64(self.weight());
        let mut g = vec![T::ZERO; inputs[0].numel()];
        self.visit(|o, i| g[i] += grad[o] * wgt);
        vec![Some(g)]
    }
}

impl<T: Real> Tensor<T> {
    /// Bilinearly samples `self` at each pixel displaced by `flow`,
    /// clamping out-of-range locations to the border.
    pub fn grid_sample(&self, flow: &FlowField<T>) -> Result<Tensor<T>> {
        let dims = self.dims4("grid_sample")?;
        let (n, c, h, w) = dims;
        let ft = flow.tensor();
        let (fnb, fc, fh, fw) = ft.dims4("grid_sample")?;
        if fc != 2 || (fnb, fh, fw) != (n, h, w) {
            return Err(Error::shape("grid_sample", self.shape(), ft.shape()));
        }
        let rule = GridSampleRule { dims };
        let plane = h * w;
        let mut out = vec![T::ZERO; self.numel()];
        {
            let src = self.data();
            let fl = ft.data();
            rule.visit(&fl, |b, i, tx, ty| {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let v00 = src[base + ty.i0 * w + tx.i0];
                    let v01 = src[base + ty.i0 * w + tx.i1];
                    let v10 = src[base + ty.i1 * w + tx.i0];
                    let v11 = src[base + ty.i1 * w + tx.i1];
                    out[base + i] = lerp(
                        lerp(v00, v01, tx.frac),
                        lerp(v10, v11, tx.frac),
                        ty.frac,
                    );
                }
            });
        }
        Ok(Tensor::from_op(
            dims_vec(dims),
            out,
            vec![self.clone(), ft.clone()],
            rule,
        ))
    }

    /// Doubles both spatial extents. Bilinear mode uses half-pixel centres
    /// with edge clamping; values are not rescaled.
    pub fn upsample2x(&self, mode: UpsampleMode) -> Result<Tensor<T>> {
        let dims = self.dims4("upsample2x")?;
        let (n, c, h, w) = dims;
        let rule = UpsampleRule { dims, mode };
        let mut out = vec![T::ZERO; n * c * 4 * h * w];
        {
            let x = self.data();
            rule.visit(|o, i, wgt| out[o] += x[i] * T::from_f64(wgt));
        }
        Ok(Tensor::from_op(
            vec![n, c, 2 * h, 2 * w],
            out,
            vec![self.clone()],
            rule,
        ))
    }

    /// Non-overlapping `k x k` mean pooling.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor<T>> {
        self.pool(k, true, "avg_pool2d")
    }

    /// Keeps every `factor`-th pixel along each axis.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Tensor<T>> {
        self.pool(factor, false, "downsample_nearest")
    }

    fn pool(&self, k: usize, average: bool, op: &'static str) -> Result<Tensor<T>> {
        let dims = self.dims4(op)?;
        let (n, c, h, w) = dims;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::invalid(
                op,
                format!("spatial size {h}x{w} not divisible by {k}"),
            ));
        }
        let rule = PoolRule {
            dims,
            factor: k,
            average,
        };
        let wgt = T::from_f64(rule.weight());
        let mut out = vec![T::ZERO; n * c * (h / k) * (w / k)];
        {
            let x = self.data();
            rule.visit(|o, i| out[o] += x[i] * wgt);
        }
        Ok(Tensor::from_op(
            vec![n, c, h / k, w / k],
            out,
            vec![self.clone()],
            rule,
        ))
    }
}

impl<T: Real> FlowField<T> {
    /// Upsamples a flow to twice the resolution; normalized offsets carry
    /// over unchanged.
    pub fn upsample2x(&self) -> Result<FlowField<T>> {
        FlowField::new(self.tensor().upsample2x(UpsampleMode::Bilinear)?)
    }
}

fn dims_vec((n, c, h, w): (usize, usize, usize, usize)) -> Vec<usize> {
    vec![n, c, h, w]
}
