use super::scalar::Real;
use super::{Backward, Tensor};
use crate::error::{Error, Result};

struct CorrelationRule {
    dims: (usize, usize, usize, usize),
    radius: usize,
}

impl CorrelationRule {
    fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Calls `f(out, a_base, b_base)` for every in-bounds displacement, where
    /// `a_base`/`b_base` index channel 0 of the two matched pixels and
    /// channels are `h * w` apart.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (n, c, h, w) = self.dims;
        let r = self.radius as isize;
        let k = self.window();
        let plane = h * w;
        for b in 0..n {
            for dy in -r..=r {
                for dx in -r..=r {
                    let d = ((dy + r) as usize) * k + (dx + r) as usize;
                    for y in 0..h {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let out = ((b * k * k + d) * h + y) * w + x;
                            let a = b * c * plane + y * w + x;
                            let bb = b * c * plane + yy as usize * w + xx as usize;
                            f(out, a, bb);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Backward<T> for CorrelationRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (_, c, h, w) = self.dims;
        let plane = h * w;
        let inv = T::ONE / T::from_f64(c as f64);
        let a = inputs[0].data();
        let b = inputs[1].data();
        let mut da = inputs[0].requires_grad().then(|| vec![T::ZERO; a.len()]);
        let mut db = inputs[1].requires_grad().then(|| vec![T::ZERO; b.len()]);
        self.visit(|o, ia, ib| {
            let g = grad[o] * inv;
            if g == T::ZERO {
                return;
            }
            for ch in 0..c {
                let off = ch * plane;
                if let Some(da) = da.as_mut() {
                    da[ia + off] += g * b[ib + off];
                }
                if let Some(db) = db.as_mut() {
                    db[ib + off] += g * a[ia + off];
                }
            }
        });
        vec![da, db]
    }
}

impl<T: Real> Tensor<T> {
    /// Local cost volume between two feature maps.
    ///
    /// Output channel `(dy + r) * (2r + 1) + (dx + r)` at `(y, x)` holds the
    /// channel-averaged dot product of `self(y, x)` and `other(y + dy, x + dx)`,
    /// zero where the displaced pixel falls outside the map.
    pub fn correlation(&self, other: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
        let dims = self.dims4("correlation")?;
        if self.shape() != other.shape() {
            return Err(Error::shape("correlation", self.shape(), other.shape()));
        }
        let (n, c, h, w) = dims;
        let rule = CorrelationRule { dims, radius };
        let k = rule.window();
        let plane = h * w;
        let inv = T::ONE / T::from_f64(c as f64);
        let mut out = vec![T::ZERO; n * k * k * plane];
        {
            let a = self.data();
            let b = other.data();
            rule.visit(|o, ia, ib| {
                let mut acc = T::ZERO;
                for ch in 0..c {
                    acc += a[ia + ch * plane] * b[ib + ch * plane];
                }
                out[o] = acc * inv;
            });
        }
        Ok(Tensor::from_op(
            vec![n, k * k, h, w],
            out,
            vec![self.clone(), other.clone()],
            rule,
        ))
    }
}
