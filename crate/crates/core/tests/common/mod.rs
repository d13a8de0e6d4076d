//! Test-only oracles: central finite differences and nested-loop reference
//! implementations written directly from the operator definitions.

#![allow(dead_code)]

pub mod grad_suite;

use flowdistill::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values whose magnitude stays at least `margin` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Outcome of one gradient comparison.
#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Relative error with a unit-scale floor on the denominator so that
/// near-zero gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of `sum(f(inputs) * probe)` against
/// central differences with step `h`, for every input element.
pub fn check_gradients(
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    probe_seed: u64,
    h: f64,
) -> GradReport {
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(s, v)| Tensor::parameter(s, v.clone()).unwrap())
        .collect();
    let out = f(&params);
    let probe = Tensor::new(
        out.shape(),
        uniform(&mut rng(probe_seed), out.numel(), -1.0, 1.0),
    )
    .unwrap();
    let loss = out.mul(&probe).unwrap().sum();
    loss.backward().unwrap();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(values)
            .map(|((s, _), v)| Tensor::new(s, v.clone()).unwrap())
            .collect();
        f(&ts).mul(&probe).unwrap().sum().item()
    };

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    for (k, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for j in 0..p.numel() {
            let orig = values[k][j];
            values[k][j] = orig + h;
            let plus = eval(&values);
            values[k][j] = orig - h;
            let minus = eval(&values);
            values[k][j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[j], numeric));
            checked += 1;
        }
    }
    GradReport { max_rel, checked }
}

/// Border-clamped bilinear warp written from the normalized-coordinate
/// definition: pixel `x` maps to `g = 2x/(W-1) - 1`, the sample sits at
/// `g + flow`, and is converted back with `(u + 1)(W - 1)/2`.
pub fn grid_sample_oracle(
    src: &[f64],
    flow: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<f64> {
    let to_grid = |i: usize, extent: usize| {
        if extent == 1 {
            0.0
        } else {
            2.0 * i as f64 / (extent - 1) as f64 - 1.0
        }
    };
    let to_pixel = |u: f64, extent: usize| ((u + 1.0) * (extent - 1) as f64 / 2.0).clamp(0.0, (extent - 1) as f64);
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let fx = flow[((b * 2) * h + y) * w + x];
                let fy = flow[((b * 2 + 1) * h + y) * w + x];
                let px = to_pixel(to_grid(x, w) + fx, w);
                let py = to_pixel(to_grid(y, h) + fy, h);
                let (x0, y0) = (px.floor() as usize, py.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (ax, ay) = (px - x0 as f64, py - y0 as f64);
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| src[((b * c + ch) * h + yy) * w + xx];
                    out[((b * c + ch) * h + y) * w + x] = (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1))
                        + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1));
                }
            }
        }
    }
    out
}

/// Channel-averaged local cost volume by direct enumeration.
pub fn correlation_oracle(
    a: &[f64],
    b: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    radius: usize,
) -> Vec<f64> {
    let r = radius as isize;
    let k = 2 * radius + 1;
    let mut out = vec![0.0; n * k * k * h * w];
    for bi in 0..n {
        for dy in -r..=r {
            for dx in -r..=r {
                let d = ((dy + r) as usize) * k + (dx + r) as usize;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (yy, xx) = (y + dy, x + dx);
                        let mut acc = 0.0;
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            for ch in 0..c {
                                let ia = ((bi * c + ch) * h + y as usize) * w + x as usize;
                                let ib = ((bi * c + ch) * h + yy as usize) * w + xx as usize;
                                acc += a[ia] * b[ib];
                            }
                            acc /= c as f64;
                        }
                        out[((bi * k * k + d) * h + y as usize) * w + x as usize] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Whether every sampling position of `flow` keeps at least `margin` pixels
/// from integer coordinates, where bilinear sampling has kinks.
pub fn sampling_is_smooth(flow: &[f64], (n, h, w): (usize, usize, usize), margin: f64) -> bool {
    let plane = h * w;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let px = x as f64 + flow[b * 2 * plane + i] * (w - 1) as f64 / 2.0;
                let py = y as f64 + flow[(b * 2 + 1) * plane + i] * (h - 1) as f64 / 2.0;
                for p in [px, py] {
                    let frac = p - p.floor();
                    if frac < margin || frac > 1.0 - margin {
                        return false;
                    }
                }
            }
        }
    }
    true
}
