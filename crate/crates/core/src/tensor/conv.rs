use super::scalar::Real;
use super::{Backward, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds sample `b` of `input` into a `(C_in*k*k, OH*OW)` matrix.
    fn im2col<T: Real>(&self, input: &[T], b: usize, col: &mut [T]) {
        let p = self.out_plane();
        let img = &input[b * self.c_in * self.h * self.w..];
        for ci in 0..self.c_in {
            let chan = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::ZERO);
                            continue;
                        }
                        let src = &chan[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::ZERO
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters `col` into sample `b` of `grad`.
    fn col2im<T: Real>(&self, col: &[T], b: usize, grad: &mut [T]) {
        let p = self.out_plane();
        let img = &mut grad[b * self.c_in * self.h * self.w..];
        for ci in 0..self.c_in {
            let chan = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut chan[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dRule {
    geo: Geometry,
}

impl<T: Real> Backward<T> for Conv2dRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = self.geo;
        let rows = g.col_rows();
        let p = g.out_plane();
        let (input, weight) = (&inputs[0], &inputs[1]);
        let x = input.data();
        let wt = weight.data();

        let mut d_input = input.requires_grad().then(|| vec![T::ZERO; input.numel()]);
        let mut d_weight = weight.requires_grad().then(|| vec![T::ZERO; weight.numel()]);
        let d_bias = inputs.get(2).filter(|b| b.requires_grad()).map(|_| {
            let mut db = vec![T::ZERO; g.c_out];
            for b in 0..g.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let off = (b * g.c_out + co) * p;
                    *acc += grad[off..off + p].iter().copied().sum::<T>();
                }
            }
            db
        });

        let mut col = vec![T::ZERO; rows * p];
        let mut d_col = vec![T::ZERO; rows * p];
        for b in 0..g.n {
            let g_out = &grad[b * g.c_out * p..(b + 1) * g.c_out * p];
            if let Some(dw) = d_weight.as_mut() {
                g.im2col(&x, b, &mut col);
                // dW (Cout x rows) += dOut (Cout x P) * col^T (P x rows)
                T::gemm(
                    g.c_out,
                    p,
                    rows,
                    g_out,
                    (p as isize, 1),
                    &col,
                    (1, p as isize),
                    T::ONE,
                    dw,
                    (rows as isize, 1),
                );
            }
            if let Some(dx) = d_input.as_mut() {
                // dCol (rows x P) = W^T (rows x Cout) * dOut (Cout x P)
                T::gemm(
                    rows,
                    g.c_out,
                    p,
                    &wt,
                    (1, rows as isize),
                    g_out,
                    (p as isize, 1),
                    T::ZERO,
                    &mut d_col,
                    (p as isize, 1),
                );
                g.col2im(&d_col, b, dx);
            }
        }

        let mut out = vec![d_input, d_weight];
        if inputs.len() > 2 {
            out.push(d_bias);
        }
        out
    }
}

impl<T: Real> Tensor<T> {
    /// 2D cross-correlation with square kernels.
    ///
    /// `weight` is `(C_out, C_in, k, k)`, `bias` is `(C_out)`. Output spatial
    /// size is `floor((H + 2 * padding - k) / stride) + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (n, c_in, h, w) = self.dims4("conv2d")?;
        let (c_out, wc_in, kh, kw) = weight.dims4("conv2d")?;
        if wc_in != c_in || kh != kw {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d bias", weight.shape(), b.shape()));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        let geo = Geometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let rows = geo.col_rows();
        let p = geo.out_plane();
        let mut out = vec![T::ZERO; n * c_out * p];
        {
            let x = self.data();
            let wt = weight.data();
            let bias_data = bias.map(|b| b.to_vec());
            let mut col = vec![T::ZERO; rows * p];
            for b in 0..n {
                let dst = &mut out[b * c_out * p..(b + 1) * c_out * p];
                if let Some(bd) = &bias_data {
                    for (co, &bv) in bd.iter().enumerate() {
                        dst[co * p..(co + 1) * p].fill(bv);
                    }
                }
                geo.im2col(&x, b, &mut col);
                T::gemm(
                    c_out,
                    rows,
                    p,
                    &wt,
                    (rows as isize, 1),
                    &col,
                    (p as isize, 1),
                    T::ONE,
                    dst,
                    (p as isize, 1),
                );
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![n, c_out, geo.oh, geo.ow],
            out,
            inputs,
            Conv2dRule { geo },
        ))
    }
}
