//! Appearance-flow warping module.
//!
//! Two feature pyramids (one over the garment image, one over the condition
//! input) feed a cascade of flow networks running from the coarsest level to
//! the finest. Each flow network warps the garment features by the upsampled
//! previous flow, correlates them with the condition features, regresses a
//! residual flow from the cost volume, then refines once more from the
//! re-warped features. The tutor (parser-based) and the student (parser-free)
//! share this architecture and differ only in their condition input.

use crate::error::{Error, Result};
use crate::nn::{leaky, Builder, Conv2d, Init, ParamSet, ResBlock};
use crate::tensor::scalar::Real;
use crate::tensor::{FlowField, Tensor, UpsampleMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AfwmConfig {
    /// Pyramid depth `N`; level `i` lives at `1 / 2^i` resolution.
    pub levels: usize,
    /// Encoder width at level 1; doubles at each coarser level.
    pub base_width: usize,
    /// Width of every pyramid output after top-down merging.
    pub fpn_width: usize,
    /// Hidden width of the flow-regression ConvNets.
    pub flow_width: usize,
    /// Half-size `d` of the square correlation window.
    pub corr_radius: usize,
    pub clothes_channels: usize,
    pub condition_channels: usize,
}

impl AfwmConfig {
    /// Three levels with a radius-2 correlation window.
    pub fn desk(clothes_channels: usize, condition_channels: usize) -> Self {
        AfwmConfig {
            levels: 3,
            base_width: 32,
            fpn_width: 32,
            flow_width: 32,
            corr_radius: 2,
            clothes_channels,
            condition_channels,
        }
    }

    /// Five levels with a radius-4 correlation window.
    pub fn full(clothes_channels: usize, condition_channels: usize) -> Self {
        AfwmConfig {
            levels: 5,
            corr_radius: 4,
            ..Self::desk(clothes_channels, condition_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("afwm levels must be >= 2, got {}", self.levels)));
        }
        if self.corr_radius < 1 {
            return Err(Error::Config("afwm correlation radius must be >= 1".into()));
        }
        if [
            self.base_width,
            self.fpn_width,
            self.flow_width,
            self.clothes_channels,
            self.condition_channels,
        ]
        .contains(&0)
        {
            return Err(Error::Config(format!("afwm widths must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn encoder_width(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }

    /// Spatial size `(H/2^i, W/2^i)` of every level `i = 1..=N`.
    pub fn level_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let f = 1usize << self.levels;
        if h % f != 0 || w % f != 0 {
            let pad = |v: usize| (f - v % f) % f;
            return Err(Error::invalid(
                "extract_pyramids",
                format!(
                    "input {h}x{w} is not divisible by 2^{} = {f}; pad by {}x{} pixels",
                    self.levels,
                    pad(h),
                    pad(w)
                ),
            ));
        }
        Ok((1..=self.levels).map(|i| (h >> i, w >> i)).collect())
    }
}

/// Matched garment features `{c_i}` and condition features `{p_i}`, index 0
/// being level 1 (finest).
#[derive(Clone, Debug)]
pub struct PyramidPair<T: Real = f32> {
    pub clothes_features: Vec<Tensor<T>>,
    pub condition_features: Vec<Tensor<T>>,
}

impl<T: Real> PyramidPair<T> {
    pub fn levels(&self) -> usize {
        self.clothes_features.len()
    }

    pub fn detach(&self) -> Self {
        PyramidPair {
            clothes_features: self.clothes_features.iter().map(Tensor::detach).collect(),
            condition_features: self.condition_features.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Flows from the coarsest level to the finest.
#[derive(Clone, Debug)]
pub struct FlowCascade<T: Real = f32> {
    pub flows: Vec<FlowField<T>>,
}

impl<T: Real> FlowCascade<T> {
    pub fn finest(&self) -> &FlowField<T> {
        self.flows.last().expect("cascade is never empty")
    }

    pub fn is_finite(&self) -> bool {
        self.flows.iter().all(FlowField::is_finite)
    }

    pub fn detach(&self) -> Self {
        FlowCascade {
            flows: self.flows.iter().map(FlowField::detach).collect(),
        }
    }
}

/// Bottom-up stride-2 encoder with a top-down merge.
#[derive(Clone, Debug)]
struct FeaturePyramid<T: Real> {
    stages: Vec<(Conv2d<T>, ResBlock<T>, ResBlock<T>)>,
    lateral: Vec<Conv2d<T>>,
    smooth: Vec<Conv2d<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    fn new(b: &mut Builder<'_, T>, name: &str, cfg: &AfwmConfig, in_channels: usize) -> Self {
        b.scope(name, |b| {
            let mut stages = Vec::new();
            let mut lateral = Vec::new();
            let mut smooth = Vec::new();
            let mut c_in = in_channels;
            for level in 1..=cfg.levels {
                let w = cfg.encoder_width(level);
                stages.push(b.scope(&format!("enc{level}"), |b| {
                    (
                        Conv2d::new(b, "down", c_in, w, 3, 2, Init::FanIn(1.0)),
                        ResBlock::new(b, "res1", w),
                        ResBlock::new(b, "res2", w),
                    )
                }));
                lateral.push(Conv2d::new(
                    b,
                    &format!("lateral{level}"),
                    w,
                    cfg.fpn_width,
                    1,
                    1,
                    Init::FanIn(1.0),
                ));
                smooth.push(Conv2d::new(
                    b,
                    &format!("smooth{level}"),
                    cfg.fpn_width,
                    cfg.fpn_width,
                    3,
                    1,
                    Init::FanIn(1.0),
                ));
                c_in = w;
            }
            FeaturePyramid {
                stages,
                lateral,
                smooth,
            }
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut encoded = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for (down, r1, r2) in &self.stages {
            h = leaky(&down.forward(&h)?);
            h = r2.forward(&r1.forward(&h)?)?;
            encoded.push(h.clone());
        }
        let n = encoded.len();
        let mut merged: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut top: Option<Tensor<T>> = None;
        for i in (0..n).rev() {
            let mut m = self.lateral[i].forward(&encoded[i])?;
            if let Some(t) = &top {
                m = m.add(&t.upsample2x(UpsampleMode::Nearest)?)?;
            }
            merged[i] = Some(self.smooth[i].forward(&m)?);
            top = Some(m);
        }
        Ok(merged.into_iter().map(|m| m.expect("every level merged")).collect())
    }
}

/// Four convolutions ending in a two-channel residual flow.
#[derive(Clone, Debug)]
struct FlowRegressor<T: Real> {
    convs: Vec<Conv2d<T>>,
}

impl<T: Real> FlowRegressor<T> {
    fn new(b: &mut Builder<'_, T>, name: &str, c_in: usize, width: usize) -> Self {
        let half = (width / 2).max(1);
        b.scope(name, |b| FlowRegressor {
            convs: vec![
                Conv2d::new(b, "conv1", c_in, width, 3, 1, Init::FanIn(1.0)),
                Conv2d::new(b, "conv2", width, width, 3, 1, Init::FanIn(1.0)),
                Conv2d::new(b, "conv3", width, half, 3, 1, Init::FanIn(1.0)),
                Conv2d::new(b, "conv4", half, 2, 3, 1, Init::Zero),
            ],
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<FlowField<T>> {
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = leaky(&h);
            }
        }
        FlowField::new(h)
    }
}

/// One flow network of the cascade.
#[derive(Clone, Debug)]
struct FlowNet<T: Real> {
    matching: FlowRegressor<T>,
    refine: FlowRegressor<T>,
}

#[derive(Clone, Debug)]
pub struct Afwm<T: Real = f32> {
    config: AfwmConfig,
    clothes_pyramid: FeaturePyramid<T>,
    condition_pyramid: FeaturePyramid<T>,
    /// `flow_nets[k]` is FN-(k+1) and consumes pyramid level `N - k`.
    flow_nets: Vec<FlowNet<T>>,
}

/// Everything one warping pass produces.
#[derive(Clone, Debug)]
pub struct AfwmOutput<T: Real = f32> {
    pub pyramid: PyramidPair<T>,
    pub cascade: FlowCascade<T>,
    pub warped: Tensor<T>,
}

impl<T: Real> Afwm<T> {
    pub fn new(b: &mut Builder<'_, T>, config: &AfwmConfig) -> Result<Self> {
        config.validate()?;
        let window = (2 * config.corr_radius + 1).pow(2);
        Ok(b.scope("afwm", |b| {
            let clothes_pyramid = FeaturePyramid::new(b, "clothes", config, config.clothes_channels);
            let condition_pyramid =
                FeaturePyramid::new(b, "condition", config, config.condition_channels);
            let flow_nets = (1..=config.levels)
                .map(|k| {
                    b.scope(&format!("fn{k}"), |b| FlowNet {
                        matching: FlowRegressor::new(b, "matching", window, config.flow_width),
                        refine: FlowRegressor::new(
                            b,
                            "refine",
                            2 * config.fpn_width,
                            config.flow_width,
                        ),
                    })
                })
                .collect();
            Afwm {
                config: config.clone(),
                clothes_pyramid,
                condition_pyramid,
                flow_nets,
            }
        }))
    }

    pub fn config(&self) -> &AfwmConfig {
        &self.config
    }

    pub fn extract_pyramids(
        &self,
        clothes: &Tensor<T>,
        condition: &Tensor<T>,
    ) -> Result<PyramidPair<T>> {
        let (n, cc, h, w) = clothes.dims4("extract_pyramids")?;
        let (pn, pc, ph, pw) = condition.dims4("extract_pyramids")?;
        if (n, h, w) != (pn, ph, pw) {
            return Err(Error::shape("extract_pyramids", clothes.shape(), condition.shape()));
        }
        if cc != self.config.clothes_channels || pc != self.config.condition_channels {
            return Err(Error::invalid(
                "extract_pyramids",
                format!(
                    "expected {} clothes and {} condition channels, got {cc} and {pc}",
                    self.config.clothes_channels, self.config.condition_channels
                ),
            ));
        }
        self.config.level_sizes(h, w)?;
        Ok(PyramidPair {
            clothes_features: self.clothes_pyramid.forward(clothes)?,
            condition_features: self.condition_pyramid.forward(condition)?,
        })
    }

    /// Runs FN-`k` (1-based, 1 = coarsest) on one pyramid level.
    pub fn flow_network_step(
        &self,
        k: usize,
        clothes_feat: &Tensor<T>,
        condition_feat: &Tensor<T>,
        previous: Option<&FlowField<T>>,
    ) -> Result<FlowField<T>> {
        let net = self
            .flow_nets
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::invalid("flow_network_step", format!("no flow network {k}")))?;
        let (n, _, h, w) = clothes_feat.dims4("flow_network_step")?;
        if clothes_feat.shape() != condition_feat.shape() {
            return Err(Error::shape(
                "flow_network_step",
                clothes_feat.shape(),
                condition_feat.shape(),
            ));
        }

        // Stage 1: upsample the previous flow and warp the garment features.
        let prior = match previous {
            Some(f) => {
                let (pn, ph, pw) = f.dims();
                if (pn, 2 * ph, 2 * pw) != (n, h, w) {
                    return Err(Error::shape(
                        "flow_network_step",
                        clothes_feat.shape(),
                        f.tensor().shape(),
                    ));
                }
                f.upsample2x()?
            }
            None => FlowField::zeros(n, h, w),
        };
        let aligned = clothes_feat.grid_sample(&prior)?;

        // Stage 2: cost volume against the condition features.
        let cost = aligned.correlation(condition_feat, self.config.corr_radius)?;

        // Stage 3: coarse flow = prior + residual regressed from the cost volume.
        let coarse = prior.tensor().add(net.matching.forward(&cost)?.tensor())?;
        let coarse = FlowField::new(coarse)?;

        // Stage 4: refine from the re-warped garment features.
        let rewarped = clothes_feat.grid_sample(&coarse)?;
        let joint = Tensor::concat_channels(&[rewarped, condition_feat.clone()])?;
        let refined = coarse.tensor().add(net.refine.forward(&joint)?.tensor())?;
        FlowField::new(refined)
    }

    pub fn estimate_flows(&self, pyramid: &PyramidPair<T>) -> Result<FlowCascade<T>> {
        let n = self.config.levels;
        if pyramid.clothes_features.len() != n || pyramid.condition_features.len() != n {
            return Err(Error::invalid(
                "estimate_flows",
                format!("expected {n} pyramid levels, got {}", pyramid.levels()),
            ));
        }
        let mut flows: Vec<FlowField<T>> = Vec::with_capacity(n);
        for k in 1..=n {
            let level = n - k;
            let f = self.flow_network_step(
                k,
                &pyramid.clothes_features[level],
                &pyramid.condition_features[level],
                flows.last(),
            )?;
            flows.push(f);
        }
        Ok(FlowCascade { flows })
    }

    pub fn forward(&self, clothes: &Tensor<T>, condition: &Tensor<T>) -> Result<AfwmOutput<T>> {
        let pyramid = self.extract_pyramids(clothes, condition)?;
        let cascade = self.estimate_flows(&pyramid)?;
        let warped = warp_clothes(clothes, &cascade)?;
        Ok(AfwmOutput {
            pyramid,
            cascade,
            warped,
        })
    }
}

/// Samples the garment image by the finest flow, upsampling it once when it
/// sits at half the image resolution.
pub fn warp_clothes<T: Real>(clothes: &Tensor<T>, cascade: &FlowCascade<T>) -> Result<Tensor<T>> {
    let (n, _, h, w) = clothes.dims4("warp_clothes")?;
    let finest = cascade.finest();
    let flow = match finest.dims() {
        d if d == (n, h, w) => finest.clone(),
        (fnb, fh, fw) if (fnb, 2 * fh, 2 * fw) == (n, h, w) => finest.upsample2x()?,
        _ => {
            return Err(Error::shape(
                "warp_clothes",
                clothes.shape(),
                finest.tensor().shape(),
            ))
        }
    };
    clothes.grid_sample(&flow)
}

/// Convenience constructor registering a fresh module in `params`.
pub fn build<T: Real>(params: &mut ParamSet<T>, config: &AfwmConfig, seed: u64) -> Result<Afwm<T>> {
    Afwm::new(&mut Builder::new(params, seed), config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(levels: usize) -> AfwmConfig {
        AfwmConfig {
            levels,
            base_width: 4,
            fpn_width: 4,
            flow_width: 4,
            corr_radius: 1,
            clothes_channels: 3,
            condition_channels: 2,
        }
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pyramid_follows_stride_two_ladder() {
        let mut ps = ParamSet::new();
        let net = build::<f64>(&mut ps, &tiny(3), 0).unwrap();
        let pyr = net
            .extract_pyramids(&noise(&[1, 3, 64, 48], 1), &noise(&[1, 2, 64, 48], 2))
            .unwrap();
        let sizes: Vec<_> = pyr.clothes_features.iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
        assert_eq!(sizes, [(32, 24), (16, 12), (8, 6)]);
        for (c, p) in pyr.clothes_features.iter().zip(&pyr.condition_features) {
            assert_eq!(c.shape(), p.shape());
            assert!(c.all_finite() && p.all_finite());
        }
    }

    #[test]
    fn indivisible_input_names_padding() {
        let mut ps = ParamSet::new();
        let net = build::<f64>(&mut ps, &tiny(3), 0).unwrap();
        let err = net
            .extract_pyramids(&noise(&[1, 3, 60, 48], 1), &noise(&[1, 2, 60, 48], 2))
            .unwrap_err()
            .to_string();
        assert!(err.contains("pad by 4x0"), "{err}");
    }

    #[test]
    fn config_invariants() {
        assert!(AfwmConfig { levels: 1, ..tiny(2) }.validate().is_err());
        assert!(AfwmConfig { corr_radius: 0, ..tiny(2) }.validate().is_err());
        assert!(tiny(2).validate().is_ok());
    }

    #[test]
    fn fresh_network_predicts_zero_flow_and_identity_warp() {
        let mut ps = ParamSet::new();
        let net = build::<f64>(&mut ps, &tiny(2), 3).unwrap();
        let clothes = noise(&[2, 3, 16, 8], 4);
        let out = net.forward(&clothes, &noise(&[2, 2, 16, 8], 5)).unwrap();
        assert_eq!(out.cascade.flows.len(), 2);
        assert_eq!(out.cascade.flows[0].dims(), (2, 4, 2));
        assert_eq!(out.cascade.flows[1].dims(), (2, 8, 4));
        for f in &out.cascade.flows {
            assert!(f.tensor().to_vec().iter().all(|&v| v == 0.0));
        }
        assert_eq!(out.warped.to_vec(), clothes.to_vec());
    }

    #[test]
    fn disabling_refinement_returns_coarse_flow() {
        let mut ps = ParamSet::new();
        let net = build::<f64>(&mut ps, &tiny(2), 3).unwrap();
        // Give both heads a nonzero output layer.
        for (name, t) in ps.iter() {
            if name.ends_with("conv4.weight") {
                t.set_data(noise(t.shape(), 9).to_vec()).unwrap();
            }
        }
        let c = noise(&[1, 4, 4, 4], 6);
        let p = noise(&[1, 4, 4, 4], 7);
        let full = net.flow_network_step(1, &c, &p, None).unwrap();
        ps.zero_prefixed("afwm.fn1.refine");
        let coarse = net.flow_network_step(1, &c, &p, None).unwrap();
        assert_ne!(full.tensor().to_vec(), coarse.tensor().to_vec());

        // With refinement off, the output is exactly the matching residual
        // added to the zero prior.
        let aligned = c.grid_sample(&FlowField::zeros(1, 4, 4)).unwrap();
        let cost = aligned.correlation(&p, 1).unwrap();
        let residual = net.flow_nets[0].matching.forward(&cost).unwrap();
        assert_eq!(coarse.tensor().to_vec(), residual.tensor().to_vec());
    }
}
