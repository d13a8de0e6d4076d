//! Randomized finite-difference checks for every differentiable primitive.

use flowdistill::{FlowField, Tensor, UpsampleMode};
use rand::Rng;

use super::{away_from_zero, check_gradients, numel, rng, sampling_is_smooth, uniform, GradReport};

pub const STEP: f64 = 1e-6;

type Inputs = Vec<(Vec<usize>, Vec<f64>)>;
type Forward = Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>;

/// One random instance: inputs plus the function under test, or `None`
/// when the draw lands too close to a non-differentiable point.
type Case = fn(u64) -> Option<(Inputs, Forward)>;

fn dims(r: &mut impl Rng, lo: usize, hi: usize) -> (usize, usize, usize, usize) {
    (
        r.gen_range(1..=2),
        r.gen_range(1..=3),
        r.gen_range(lo..=hi),
        r.gen_range(lo..=hi),
    )
}

fn image(r: &mut rand_chacha::ChaCha8Rng, d: (usize, usize, usize, usize)) -> (Vec<usize>, Vec<f64>) {
    let shape = vec![d.0, d.1, d.2, d.3];
    let v = uniform(r, numel(&shape), -1.0, 1.0);
    (shape, v)
}

fn conv(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let (n, cin, h, w) = dims(&mut r, 4, 6);
    let cout = r.gen_range(1..=3);
    let k = [1, 3][r.gen_range(0..2)];
    let stride = r.gen_range(1..=2);
    let padding = r.gen_range(0..=k / 2);
    let x = image(&mut r, (n, cin, h, w));
    let wt = (vec![cout, cin, k, k], uniform(&mut r, cout * cin * k * k, -1.0, 1.0));
    let b = (vec![cout], uniform(&mut r, cout, -1.0, 1.0));
    Some((
        vec![x, wt, b],
        Box::new(move |t| t[0].conv2d(&t[1], Some(&t[2]), stride, padding).unwrap()),
    ))
}

fn grid_sample(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let (n, c, h, w) = dims(&mut r, 3, 5);
    let src = image(&mut r, (n, c, h, w));
    let flow = uniform(&mut r, n * 2 * h * w, -0.7, 0.7);
    if !sampling_is_smooth(&flow, (n, h, w), 1e-3) {
        return None;
    }
    Some((
        vec![src, (vec![n, 2, h, w], flow)],
        Box::new(|t| t[0].grid_sample(&FlowField::new(t[1].clone()).unwrap()).unwrap()),
    ))
}

fn correlation(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let d = dims(&mut r, 2, 5);
    let radius = r.gen_range(1..=2);
    Some((
        vec![image(&mut r, d), image(&mut r, d)],
        Box::new(move |t| t[0].correlation(&t[1], radius).unwrap()),
    ))
}

fn upsample(mode: UpsampleMode, seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let d = dims(&mut r, 1, 4);
    Some((vec![image(&mut r, d)], Box::new(move |t| t[0].upsample2x(mode).unwrap())))
}

fn upsample_nearest(seed: u64) -> Option<(Inputs, Forward)> {
    upsample(UpsampleMode::Nearest, seed)
}

fn upsample_bilinear(seed: u64) -> Option<(Inputs, Forward)> {
    upsample(UpsampleMode::Bilinear, seed)
}

fn unary(seed: u64, values: impl Fn(&mut rand_chacha::ChaCha8Rng, usize) -> Vec<f64>, f: fn(&Tensor<f64>) -> Tensor<f64>) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let (n, c, h, w) = dims(&mut r, 2, 4);
    let shape = vec![n, c, h, w];
    let v = values(&mut r, numel(&shape));
    Some((vec![(shape, v)], Box::new(move |t| f(&t[0]))))
}

fn charbonnier(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed ^ 0xc4a5);
    let eps = r.gen_range(1e-3..0.5);
    let alpha = r.gen_range(0.3..0.6);
    let mut r2 = rng(seed);
    let (n, c, h, w) = dims(&mut r2, 2, 4);
    let shape = vec![n, c, h, w];
    let v = uniform(&mut r2, numel(&shape), -2.0, 2.0);
    Some((vec![(shape, v)], Box::new(move |t| t[0].charbonnier(eps, alpha))))
}

fn leaky(seed: u64) -> Option<(Inputs, Forward)> {
    unary(seed, |r, n| away_from_zero(r, n, 1e-3, 2.0), |t| t.leaky_relu(0.1))
}

fn tanh(seed: u64) -> Option<(Inputs, Forward)> {
    unary(seed, |r, n| uniform(r, n, -2.0, 2.0), Tensor::tanh)
}

fn abs(seed: u64) -> Option<(Inputs, Forward)> {
    unary(seed, |r, n| away_from_zero(r, n, 1e-3, 2.0), Tensor::abs)
}

fn sqrt(seed: u64) -> Option<(Inputs, Forward)> {
    unary(seed, |r, n| uniform(r, n, 0.1, 2.0), Tensor::sqrt)
}

fn square(seed: u64) -> Option<(Inputs, Forward)> {
    unary(seed, |r, n| uniform(r, n, -2.0, 2.0), Tensor::square)
}

fn scale_shift(seed: u64) -> Option<(Inputs, Forward)> {
    unary(seed, |r, n| uniform(r, n, -2.0, 2.0), |t| t.scale(-1.7).add_scalar(0.3))
}

fn binary(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let d = dims(&mut r, 2, 4);
    Some((
        vec![image(&mut r, d), image(&mut r, d), image(&mut r, d)],
        Box::new(|t| t[0].add(&t[1]).unwrap().mul(&t[2]).unwrap().sub(&t[1]).unwrap()),
    ))
}

fn reductions(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let (n, c, h, w) = dims(&mut r, 2, 4);
    let shape = vec![n, c, h, w];
    let v = away_from_zero(&mut r, numel(&shape), 1e-3, 2.0);
    let weights = uniform(&mut r, n, 0.0, 2.0);
    Some((
        vec![(shape, v)],
        Box::new(move |t| {
            let x = &t[0];
            let per_sample = x.square().sample_mean().scale_samples(&weights).unwrap().sum();
            Tensor::concat_channels(&[
                x.sum().reshape(&[1, 1, 1, 1]).unwrap(),
                x.mean().reshape(&[1, 1, 1, 1]).unwrap(),
                x.l1_norm().reshape(&[1, 1, 1, 1]).unwrap(),
                x.squared_l2_norm().reshape(&[1, 1, 1, 1]).unwrap(),
                per_sample.reshape(&[1, 1, 1, 1]).unwrap(),
            ])
            .unwrap()
        }),
    ))
}

fn concat(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let (n, _, h, w) = dims(&mut r, 2, 4);
    let c1 = r.gen_range(1..=3);
    let c2 = r.gen_range(1..=3);
    Some((
        vec![image(&mut r, (n, c1, h, w)), image(&mut r, (n, c2, h, w))],
        Box::new(|t| Tensor::concat_channels(&[t[0].clone(), t[1].clone()]).unwrap()),
    ))
}

fn second_difference(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let d = dims(&mut r, 3, 5);
    let steps = [(0, 1), (1, 0), (1, 1), (1, -1)];
    let step = steps[r.gen_range(0..4)];
    Some((
        vec![image(&mut r, d)],
        Box::new(move |t| t[0].second_difference(step).unwrap().unwrap()),
    ))
}

fn avg_pool(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let k = r.gen_range(1..=3);
    let (n, c, h, w) = dims(&mut r, 1, 2);
    Some((vec![image(&mut r, (n, c, h * k, w * k))], Box::new(move |t| t[0].avg_pool2d(k).unwrap())))
}

fn downsample(seed: u64) -> Option<(Inputs, Forward)> {
    let mut r = rng(seed);
    let f = r.gen_range(1..=3);
    let (n, c, h, w) = dims(&mut r, 1, 3);
    Some((
        vec![image(&mut r, (n, c, h * f, w * f))],
        Box::new(move |t| t[0].downsample_nearest(f).unwrap()),
    ))
}

pub const PRIMITIVES: [(&str, Case); 19] = [
    ("conv2d", conv),
    ("grid_sample", grid_sample),
    ("correlation", correlation),
    ("upsample2x_nearest", upsample_nearest),
    ("upsample2x_bilinear", upsample_bilinear),
    ("charbonnier", charbonnier),
    ("leaky_relu", leaky),
    ("tanh", tanh),
    ("abs", abs),
    ("sqrt", sqrt),
    ("square", square),
    ("scale_add_scalar", scale_shift),
    ("add_sub_mul", binary),
    ("reductions", reductions),
    ("concat_channels", concat),
    ("second_difference", second_difference),
    ("avg_pool2d", avg_pool),
    ("downsample_nearest", downsample),
    ("reshape", |seed| {
        let mut r = rng(seed);
        let d = dims(&mut r, 2, 3);
        Some((
            vec![image(&mut r, d)],
            Box::new(move |t| t[0].reshape(&[d.0 * d.1, 1, d.2, d.3]).unwrap().square()),
        ))
    }),
];

/// Worst relative error over `instances` accepted draws of `case`.
pub fn run(case: Case, instances: usize, base_seed: u64) -> (GradReport, usize) {
    let mut worst = GradReport { max_rel: 0.0, checked: 0 };
    let mut accepted = 0;
    let mut seed = base_seed;
    while accepted < instances {
        seed += 1;
        let Some((inputs, f)) = case(seed) else { continue };
        let rep = check_gradients(&inputs, f, seed ^ 0xbeef, STEP);
        worst.max_rel = worst.max_rel.max(rep.max_rel);
        worst.checked += rep.checked;
        accepted += 1;
    }
    (worst, accepted)
}

/// Full training objective of a two-level warping module feeding a small
/// generator: generation loss plus the gated distillation terms against a
/// fixed random target. Every parameter is randomized so that flows, and
/// therefore the warps, are non-trivial. Checks `samples` randomly chosen
/// parameter entries.
pub fn toy_model_check(seed: u64, samples: usize) -> GradReport {
    use flowdistill::afwm::{self, AfwmConfig, FlowCascade};
    use flowdistill::generator::{self, GmConfig};
    use flowdistill::losses::{self, FeatureExtractor, GateDecision, LossWeights};
    use flowdistill::nn::ParamSet;

    let (n, h, w) = (2, 8, 8);
    let acfg = AfwmConfig {
        levels: 2,
        base_width: 4,
        fpn_width: 4,
        flow_width: 4,
        corr_radius: 1,
        clothes_channels: 3,
        condition_channels: 3,
    };
    let gcfg = GmConfig { in_channels: 6, depth: 2, base_width: 4 };
    let mut ps = ParamSet::<f64>::new();
    let warp = afwm::build(&mut ps, &acfg, seed).unwrap();
    let gm = generator::build(&mut ps, &gcfg, seed + 1).unwrap();
    let mut r = rng(seed);
    for t in ps.tensors() {
        t.set_data(uniform(&mut r, t.numel(), -0.4, 0.4)).unwrap();
    }
    let konst = |r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
        Tensor::<f64>::new(shape, uniform(r, numel(shape), -1.0, 1.0)).unwrap()
    };
    let clothes = konst(&mut r, &[n, 3, h, w]);
    let person = konst(&mut r, &[n, 3, h, w]);
    let target = konst(&mut r, &[n, 3, h, w]);
    let teacher_feats = vec![konst(&mut r, &[n, 4, 4, 4]), konst(&mut r, &[n, 4, 2, 2])];
    let teacher_flows = FlowCascade {
        flows: vec![
            FlowField::new(konst(&mut r, &[n, 2, 2, 2]).scale(0.2)).unwrap(),
            FlowField::new(konst(&mut r, &[n, 2, 4, 4]).scale(0.2)).unwrap(),
        ],
    };
    let extractor = FeatureExtractor::<f64>::seeded(seed + 2);
    let weights = LossWeights::default();
    let gate = GateDecision { psi: vec![true, false], tutor_error: vec![0.0; 2], student_error: vec![0.0; 2] };

    let loss = || -> Tensor<f64> {
        let out = warp.forward(&clothes, &person).unwrap();
        let input = Tensor::concat_channels(&[out.warped.clone(), person.clone()]).unwrap();
        let image = gm.forward(&input).unwrap();
        let gen = losses::total_generation_loss(&image, &target, &out.cascade, &extractor, &weights).unwrap();
        let hint = losses::hint_loss(&teacher_feats, &out.pyramid.condition_features, &gate).unwrap();
        let pred = losses::pred_loss(&teacher_flows, &out.cascade, &gate).unwrap();
        gen.total.add(&losses::kd_loss(&hint, &pred, &weights).unwrap()).unwrap()
    };

    let base = warp.forward(&clothes, &person).unwrap();
    let moving = base.cascade.flows.iter().any(|f| f.tensor().to_vec().iter().any(|v| v.abs() > 1e-3));
    assert!(moving, "randomized network should predict non-zero flow");

    ps.zero_grad();
    loss().backward().unwrap();
    let entries: Vec<(usize, usize)> = ps
        .tensors()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let tensors: Vec<&Tensor<f64>> = ps.tensors().collect();
    let grads: Vec<Vec<f64>> = tensors.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    let central = |t: &Tensor<f64>, j: usize, h: f64| {
        let orig = t.to_vec();
        let mut v = orig.clone();
        v[j] = orig[j] + h;
        t.set_data(v.clone()).unwrap();
        let plus = loss().item();
        v[j] = orig[j] - h;
        t.set_data(v).unwrap();
        let minus = loss().item();
        t.set_data(orig).unwrap();
        (plus - minus) / (2.0 * h)
    };
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut kinked = 0;
    while checked < samples {
        let (i, j) = entries[r.gen_range(0..entries.len())];
        let coarse = central(tensors[i], j, STEP);
        let fine = central(tensors[i], j, STEP / 10.0);
        // A bilinear or leaky kink inside the stencil makes the difference
        // quotient itself unreliable; such entries are counted, not compared.
        if super::rel_err(coarse, fine) > 1e-5 {
            kinked += 1;
            continue;
        }
        max_rel = max_rel.max(super::rel_err(grads[i][j], coarse));
        checked += 1;
    }
    assert!(kinked * 5 < samples, "{kinked} kinked entries out of {samples}");
    GradReport { max_rel, checked }
}
