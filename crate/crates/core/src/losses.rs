//! Training objectives: the generation loss (pixel L1, perceptual, flow
//! smoothness) and the gated distillation loss (hint + prediction).
//!
//! Every term is mean-reduced so the default weights stay meaningful at any
//! resolution.

use crate::afwm::FlowCascade;
use crate::error::{Error, Result};
use crate::nn::{leaky, Builder, Conv2d, Init, ParamSet};
use crate::tensor::scalar::Real;
use crate::tensor::Tensor;

/// Charbonnier `eps` of the smoothness penalty.
pub const CHARBONNIER_EPS: f64 = 1e-3;
/// Charbonnier exponent of the smoothness penalty.
pub const CHARBONNIER_ALPHA: f64 = 0.45;

/// Horizontal, vertical and both diagonal neighbour offsets `(dy, dx)`.
pub const SMOOTH_DIRECTIONS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub smooth: f64,
    pub hint: f64,
    pub pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            perceptual: 0.2,
            smooth: 6.0,
            hint: 0.04,
            pred: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.perceptual, self.smooth, self.hint, self.pred];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(output: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(output.sub(target)?.abs().mean())
}

/// Frozen multi-stage convolutional feature extractor standing in for a
/// pretrained classification backbone.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Real = f32> {
    params: ParamSet<T>,
    stages: Vec<Conv2d<T>>,
}

impl<T: Real> FeatureExtractor<T> {
    /// `(out_channels, stride)` of each stage.
    pub const STAGES: [(usize, usize); 4] = [(16, 1), (32, 2), (32, 2), (64, 2)];

    pub fn seeded(seed: u64) -> Self {
        let mut params = ParamSet::new();
        let stages = {
            let mut b = Builder::frozen(&mut params, seed);
            b.scope("extractor", |b| {
                let mut c_in = 3;
                Self::STAGES
                    .iter()
                    .enumerate()
                    .map(|(m, &(c_out, stride))| {
                        let conv = Conv2d::new(
                            b,
                            &format!("stage{}", m + 1),
                            c_in,
                            c_out,
                            3,
                            stride,
                            Init::FanIn(1.0),
                        );
                        c_in = c_out;
                        conv
                    })
                    .collect()
            })
        };
        FeatureExtractor { params, stages }
    }

    /// Extractor with externally supplied weights; `values` must follow the
    /// layout of [`FeatureExtractor::params`].
    pub fn from_values(values: &[(String, Vec<usize>, Vec<f32>)]) -> Result<Self> {
        let ext = Self::seeded(0);
        ext.params.load(values)?;
        Ok(ext)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn features(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = image.clone();
        for conv in &self.stages {
            h = leaky(&conv.forward(&h)?);
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Sum over extractor stages of the mean absolute feature difference.
pub fn perceptual_loss<T: Real>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<Tensor<T>> {
    if output.shape() != target.shape() {
        return Err(Error::shape("perceptual_loss", output.shape(), target.shape()));
    }
    let fo = extractor.features(output)?;
    let ft = extractor.features(target)?;
    let mut total: Option<Tensor<T>> = None;
    for (a, b) in fo.iter().zip(&ft) {
        let term = l1_loss(a, b)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has stages"))
}

/// Second-order smoothness of a flow cascade.
///
/// For each level, the Charbonnier penalty of `f(t - d) + f(t + d) - 2 f(t)`
/// is averaged over every flow channel, every point `t` and every direction
/// `d` whose neighbours stay inside the grid; the level means are summed.
pub fn second_order_smooth<T: Real>(cascade: &FlowCascade<T>) -> Result<Tensor<T>> {
    let (eps, alpha) = (T::from_f64(CHARBONNIER_EPS), T::from_f64(CHARBONNIER_ALPHA));
    let mut total: Option<Tensor<T>> = None;
    for flow in &cascade.flows {
        let mut level_sum: Option<Tensor<T>> = None;
        let mut count = 0usize;
        for step in SMOOTH_DIRECTIONS {
            let Some(diff) = flow.tensor().second_difference(step)? else {
                continue;
            };
            count += diff.numel();
            let s = diff.charbonnier(eps, alpha).sum();
            level_sum = Some(match level_sum {
                Some(acc) => acc.add(&s)?,
                None => s,
            });
        }
        let Some(level_sum) = level_sum else { continue };
        let level_mean = level_sum.scale(T::ONE / T::from_f64(count as f64));
        total = Some(match total {
            Some(acc) => acc.add(&level_mean)?,
            None => level_mean,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(T::ZERO)))
}

/// The three weighted generation terms and their sum.
#[derive(Clone, Debug)]
pub struct GenerationLoss<T: Real = f32> {
    pub l1: Tensor<T>,
    pub perceptual: Tensor<T>,
    pub smooth: Tensor<T>,
    pub total: Tensor<T>,
}

pub fn total_generation_loss<T: Real>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    cascade: &FlowCascade<T>,
    extractor: &FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<GenerationLoss<T>> {
    let l1 = l1_loss(output, target)?;
    let perceptual = perceptual_loss(output, target, extractor)?;
    let smooth = second_order_smooth(cascade)?;
    let total = l1
        .scale(T::from_f64(weights.l1))
        .add(&perceptual.scale(T::from_f64(weights.perceptual)))?
        .add(&smooth.scale(T::from_f64(weights.smooth)))?;
    Ok(GenerationLoss {
        l1,
        perceptual,
        smooth,
        total,
    })
}

/// Per-sample distillation switch: on iff the tutor's image is strictly
/// closer (mean L1) to the real image than the student's.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub psi: Vec<bool>,
    pub tutor_error: Vec<f64>,
    pub student_error: Vec<f64>,
}

impl GateDecision {
    /// Gate that is always on (fixed distillation).
    pub fn always(n: usize) -> Self {
        GateDecision {
            psi: vec![true; n],
            tutor_error: vec![0.0; n],
            student_error: vec![0.0; n],
        }
    }

    /// Gate that is always off (no distillation).
    pub fn never(n: usize) -> Self {
        GateDecision {
            psi: vec![false; n],
            ..Self::always(n)
        }
    }

    pub fn active(&self) -> usize {
        self.psi.iter().filter(|&&p| p).count()
    }

    fn weights<T: Real>(&self) -> Vec<T> {
        self.psi
            .iter()
            .map(|&p| if p { T::ONE } else { T::ZERO })
            .collect()
    }
}

pub fn gate_psi<T: Real>(
    tutor_image: &Tensor<T>,
    student_image: &Tensor<T>,
    real_image: &Tensor<T>,
) -> Result<GateDecision> {
    for t in [tutor_image, student_image] {
        if t.shape() != real_image.shape() {
            return Err(Error::shape("gate_psi", t.shape(), real_image.shape()));
        }
    }
    let sample_l1 = |x: &Tensor<T>| -> Vec<f64> {
        let n = x.shape()[0];
        let per = x.numel() / n;
        let (xd, rd) = (x.data(), real_image.data());
        (0..n)
            .map(|b| {
                let s: f64 = xd[b * per..(b + 1) * per]
                    .iter()
                    .zip(&rd[b * per..(b + 1) * per])
                    .map(|(&u, &v)| (u - v).abs().to_f64())
                    .sum();
                s / per as f64
            })
            .collect()
    };
    let tutor_error = sample_l1(tutor_image);
    let student_error = sample_l1(student_image);
    let psi = tutor_error
        .iter()
        .zip(&student_error)
        .map(|(t, s)| t < s)
        .collect();
    Ok(GateDecision {
        psi,
        tutor_error,
        student_error,
    })
}

fn check_gate(gate: &GateDecision, n: usize, op: &'static str) -> Result<()> {
    if gate.psi.len() != n {
        return Err(Error::invalid(
            op,
            format!("gate has {} samples, batch has {n}", gate.psi.len()),
        ));
    }
    Ok(())
}

/// Gated sum over levels of the feature distance `||u - s||_2 / sqrt(K)`
/// (K = values per sample and level), averaged over the batch. Tutor
/// features are treated as constants.
pub fn hint_loss<T: Real>(
    tutor: &[Tensor<T>],
    student: &[Tensor<T>],
    gate: &GateDecision,
) -> Result<Tensor<T>> {
    if tutor.len() != student.len() || tutor.is_empty() {
        return Err(Error::invalid(
            "hint_loss",
            format!("{} tutor levels vs {} student levels", tutor.len(), student.len()),
        ));
    }
    let mut per_sample: Option<Tensor<T>> = None;
    for (u, s) in tutor.iter().zip(student) {
        let d = s.sub(&u.detach())?;
        let rms = d.square().sample_mean().sqrt();
        per_sample = Some(match per_sample {
            Some(acc) => acc.add(&rms)?,
            None => rms,
        });
    }
    let per_sample = per_sample.expect("nonempty");
    check_gate(gate, per_sample.numel(), "hint_loss")?;
    Ok(per_sample.scale_samples(&gate.weights())?.mean())
}

/// Gated sum over levels of the mean absolute flow difference, averaged over
/// the batch. Tutor flows are treated as constants.
pub fn pred_loss<T: Real>(
    tutor: &FlowCascade<T>,
    student: &FlowCascade<T>,
    gate: &GateDecision,
) -> Result<Tensor<T>> {
    if tutor.flows.len() != student.flows.len() {
        return Err(Error::invalid(
            "pred_loss",
            format!(
                "{} tutor levels vs {} student levels",
                tutor.flows.len(),
                student.flows.len()
            ),
        ));
    }
    let mut per_sample: Option<Tensor<T>> = None;
    for (u, s) in tutor.flows.iter().zip(&student.flows) {
        let d = s.tensor().sub(&u.tensor().detach())?.abs().sample_mean();
        per_sample = Some(match per_sample {
            Some(acc) => acc.add(&d)?,
            None => d,
        });
    }
    let per_sample = per_sample.expect("nonempty");
    check_gate(gate, per_sample.numel(), "pred_loss")?;
    Ok(per_sample.scale_samples(&gate.weights())?.mean())
}

pub fn kd_loss<T: Real>(hint: &Tensor<T>, pred: &Tensor<T>, weights: &LossWeights) -> Result<Tensor<T>> {
    hint.scale(T::from_f64(weights.hint))
        .add(&pred.scale(T::from_f64(weights.pred)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FlowField;
    use rand::{Rng, SeedableRng};

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn p0() -> f64 {
        (CHARBONNIER_EPS * CHARBONNIER_EPS).powf(CHARBONNIER_ALPHA)
    }

    fn cascade(flows: Vec<Tensor<f64>>) -> FlowCascade<f64> {
        FlowCascade {
            flows: flows.into_iter().map(|t| FlowField::new(t).unwrap()).collect(),
        }
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.l1, w.perceptual, w.smooth), (1.0, 0.2, 6.0));
        assert_eq!((w.hint, w.pred), (0.04, 1.0));
    }

    #[test]
    fn l1_of_constant_offset() {
        let a = noise(&[2, 3, 4, 4], 1);
        let b = a.add_scalar(-0.3);
        assert!((l1_loss(&a, &b).unwrap().item() - 0.3).abs() < 1e-12);
        assert_eq!(l1_loss(&a, &a).unwrap().item(), 0.0);
        assert!(l1_loss(&a, &noise(&[2, 3, 4, 5], 1)).is_err());
    }

    #[test]
    fn perceptual_zero_on_identical_and_symmetric() {
        let ext = FeatureExtractor::<f64>::seeded(3);
        let a = noise(&[1, 3, 16, 16], 1);
        let b = noise(&[1, 3, 16, 16], 2);
        assert_eq!(perceptual_loss(&a, &a, &ext).unwrap().item(), 0.0);
        let ab = perceptual_loss(&a, &b, &ext).unwrap().item();
        let ba = perceptual_loss(&b, &a, &ext).unwrap().item();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-12);
    }

    #[test]
    fn perceptual_gradient_reaches_only_the_output() {
        let ext = FeatureExtractor::<f64>::seeded(3);
        let out = Tensor::parameter(&[1, 3, 8, 8], noise(&[1, 3, 8, 8], 1).to_vec()).unwrap();
        perceptual_loss(&out, &noise(&[1, 3, 8, 8], 2), &ext)
            .unwrap()
            .backward()
            .unwrap();
        assert!(out.grad().is_some());
        assert!(ext.params().tensors().all(|t| t.grad().is_none() && !t.requires_grad()));
    }

    #[test]
    fn affine_flow_sits_at_the_charbonnier_floor() {
        let (h, w) = (5, 6);
        let mut v = Vec::new();
        for ch in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    v.push(0.01 * x as f64 - 0.02 * y as f64 + 0.1 * ch as f64);
                }
            }
        }
        let c = cascade(vec![Tensor::new(&[1, 2, h, w], v).unwrap()]);
        let loss = second_order_smooth(&c).unwrap().item();
        assert!((loss - p0()).abs() < 1e-15);
    }

    #[test]
    fn spike_matches_hand_count() {
        // One channel-0 spike of height h at the centre of a 3x3 grid: each of
        // the four directions has exactly one term at the centre carrying
        // P(-2h); every other term (4 in channel 0, 8 in channel 1) is P(0).
        let h = 0.37;
        let mut v = vec![0.0; 18];
        v[4] = h;
        let c = cascade(vec![Tensor::new(&[1, 2, 3, 3], v).unwrap()]);
        let p = |x: f64| (x * x + CHARBONNIER_EPS * CHARBONNIER_EPS).powf(CHARBONNIER_ALPHA);
        let expect = (4.0 * p(-2.0 * h) + 12.0 * p(0.0)) / 16.0;
        assert!((second_order_smooth(&c).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn generation_loss_floor_and_zero_weights() {
        let ext = FeatureExtractor::<f64>::seeded(1);
        let img = noise(&[1, 3, 8, 8], 4);
        let c = cascade(vec![
            Tensor::zeros(&[1, 2, 2, 2]),
            Tensor::zeros(&[1, 2, 4, 4]),
        ]);
        let w = LossWeights::default();
        let g = total_generation_loss(&img, &img, &c, &ext, &w).unwrap();
        // A 2x2 level has no interior point, so only the 4x4 level counts.
        assert!((g.total.item() - 6.0 * p0()).abs() < 1e-15);
        let zero = LossWeights {
            l1: 0.0,
            perceptual: 0.0,
            smooth: 0.0,
            ..w
        };
        let g = total_generation_loss(&img, &noise(&[1, 3, 8, 8], 5), &c, &ext, &zero).unwrap();
        assert_eq!(g.total.item(), 0.0);
    }

    #[test]
    fn gate_tie_disables() {
        let real = noise(&[2, 3, 4, 4], 1);
        let other = noise(&[2, 3, 4, 4], 2);
        let g = gate_psi(&real, &other, &real).unwrap();
        assert_eq!(g.psi, vec![true, true]);
        let g = gate_psi(&other, &other, &real).unwrap();
        assert_eq!(g.psi, vec![false, false]);
    }

    #[test]
    fn gated_losses_vanish_when_off() {
        let off = GateDecision {
            psi: vec![false],
            tutor_error: vec![1.0],
            student_error: vec![0.5],
        };
        let u = vec![noise(&[1, 4, 4, 4], 1)];
        let s = vec![noise(&[1, 4, 4, 4], 2)];
        assert_eq!(hint_loss(&u, &s, &off).unwrap().item(), 0.0);
        let on = GateDecision::always(1);
        assert_eq!(hint_loss(&u, &u, &on).unwrap().item(), 0.0);
        let cu = cascade(vec![noise(&[1, 2, 4, 4], 3)]);
        let cs = cascade(vec![noise(&[1, 2, 4, 4], 4)]);
        assert_eq!(pred_loss(&cu, &cs, &off).unwrap().item(), 0.0);
        assert_eq!(pred_loss(&cu, &cu, &on).unwrap().item(), 0.0);
    }

    #[test]
    fn hint_of_all_ones_difference() {
        // ||1_K||_2 = sqrt(K); normalized by sqrt(K) that is exactly 1.
        let k = [1, 3, 5, 4];
        let u = vec![Tensor::<f64>::full(&k, 1.5)];
        let s = vec![Tensor::<f64>::full(&k, 0.5)];
        let n: usize = k.iter().product();
        let raw = u[0].sub(&s[0]).unwrap().squared_l2_norm().item().sqrt();
        assert!((raw - (n as f64).sqrt()).abs() < 1e-12);
        let v = hint_loss(&u, &s, &GateDecision::always(1)).unwrap().item();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn level_mismatch_rejected() {
        let g = GateDecision::always(1);
        let u = vec![noise(&[1, 4, 4, 4], 1)];
        assert!(hint_loss(&u, &[], &g).is_err());
        let cu = cascade(vec![noise(&[1, 2, 4, 4], 3)]);
        let cs = cascade(vec![noise(&[1, 2, 2, 2], 3), noise(&[1, 2, 4, 4], 4)]);
        assert!(pred_loss(&cu, &cs, &g).is_err());
    }

    #[test]
    fn kd_arithmetic() {
        let one = Tensor::<f64>::scalar(1.0);
        let v = kd_loss(&one, &one, &LossWeights::default()).unwrap().item();
        assert!((v - 1.04).abs() < 1e-15);
        let zero = Tensor::<f64>::scalar(0.0);
        assert_eq!(kd_loss(&zero, &zero, &LossWeights::default()).unwrap().item(), 0.0);
    }
}
