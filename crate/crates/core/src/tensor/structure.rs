use super::scalar::Real;
use super::{Backward, Tensor};
use crate::error::{Error, Result};

pub(super) struct Identity;

impl<T: Real> Backward<T> for Identity {
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct ConcatRule {
    channels: Vec<usize>,
    plane: usize,
}

impl<T: Real> Backward<T> for ConcatRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let n = grad.len() / (total * self.plane);
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (input, &c) in inputs.iter().zip(&self.channels) {
            if input.requires_grad() {
                let mut g = Vec::with_capacity(n * c * self.plane);
                for b in 0..n {
                    let start = (b * total + offset) * self.plane;
                    g.extend_from_slice(&grad[start..start + c * self.plane]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

struct SecondDiffRule {
    dims: (usize, usize, usize, usize),
    step: (isize, isize),
}

impl SecondDiffRule {
    fn out_extent(&self) -> (usize, usize) {
        let (_, _, h, w) = self.dims;
        (
            h - 2 * self.step.0.unsigned_abs(),
            w - 2 * self.step.1.unsigned_abs(),
        )
    }

    /// Calls `f(out_index, centre, minus, plus)` with flat input indices.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (n, c, h, w) = self.dims;
        let (oh, ow) = self.out_extent();
        let (dy, dx) = self.step;
        let y0 = dy.unsigned_abs();
        let x0 = dx.unsigned_abs();
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let y = oy + y0;
                for ox in 0..ow {
                    let x = ox + x0;
                    let centre = base + y * w + x;
                    let minus = base + (y as isize - dy) as usize * w + (x as isize - dx) as usize;
                    let plus = base + (y as isize + dy) as usize * w + (x as isize + dx) as usize;
                    f(o, centre, minus, plus);
                    o += 1;
                }
            }
        }
    }
}

impl<T: Real> Backward<T> for SecondDiffRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::ZERO; inputs[0].numel()];
        self.visit(|o, centre, minus, plus| {
            let v = grad[o];
            g[minus] += v;
            g[plus] += v;
            g[centre] -= v + v;
        });
        vec![Some(g)]
    }
}

impl<T: Real> Tensor<T> {
    /// Concatenates 4D tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let (n, _, h, w) = first.dims4("concat")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4("concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for b in 0..n {
            for (d, &c) in datas.iter().zip(&channels) {
                out.extend_from_slice(&d[b * c * plane..(b + 1) * c * plane]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(
            vec![n, total, h, w],
            out,
            parts.to_vec(),
            ConcatRule { channels, plane },
        ))
    }

    /// Second difference `x[t - step] + x[t + step] - 2 x[t]` over every
    /// point `t` whose two neighbours lie inside the grid.
    ///
    /// Returns `None` when no such point exists.
    pub fn second_difference(&self, step: (isize, isize)) -> Result<Option<Tensor<T>>> {
        let dims = self.dims4("second_difference")?;
        let (_, _, h, w) = dims;
        if 2 * step.0.unsigned_abs() >= h || 2 * step.1.unsigned_abs() >= w {
            return Ok(None);
        }
        let rule = SecondDiffRule { dims, step };
        let (oh, ow) = rule.out_extent();
        let mut out = Vec::with_capacity(dims.0 * dims.1 * oh * ow);
        {
            let x = self.data();
            let two = T::ONE + T::ONE;
            rule.visit(|_, centre, minus, plus| out.push(x[minus] + x[plus] - two * x[centre]));
        }
        Ok(Some(Tensor::from_op(
            vec![dims.0, dims.1, oh, ow],
            out,
            vec![self.clone()],
            rule,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_interleaves_per_sample() {
        let a = Tensor::<f64>::new(&[2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(&[2, 2, 1, 1], vec![10.0, 11.0, 20.0, 21.0]).unwrap();
        let c = Tensor::concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 1]);
        assert_eq!(c.to_vec(), vec![1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 1, 2, 3]);
        assert!(Tensor::concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn second_difference_of_linear_ramp_is_zero() {
        let x = Tensor::<f64>::new(&[1, 1, 3, 4], (0..12).map(|v| v as f64 * 0.5).collect())
            .unwrap();
        for step in [(0, 1), (1, 0), (1, 1), (1, -1)] {
            let d = x.second_difference(step).unwrap().unwrap();
            assert!(d.to_vec().iter().all(|&v| v == 0.0), "{step:?}");
        }
    }

    #[test]
    fn second_difference_skips_too_small_grids() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 5]);
        assert!(x.second_difference((1, 0)).unwrap().is_none());
        assert_eq!(
            x.second_difference((0, 1)).unwrap().unwrap().shape(),
            &[1, 1, 2, 3]
        );
    }
}
