//! Res-UNet generative module: fuses the warped garment with the person
//! condition and synthesizes the try-on image in `[-1, 1]`.

use crate::error::{Error, Result};
use crate::nn::{leaky, Builder, Conv2d, Init, ParamSet, ResBlock};
use crate::tensor::scalar::Real;
use crate::tensor::{Tensor, UpsampleMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GmConfig {
    pub in_channels: usize,
    /// Number of resolution levels, the input resolution included.
    pub depth: usize,
    pub base_width: usize,
}

impl GmConfig {
    pub fn desk(in_channels: usize) -> Self {
        GmConfig {
            in_channels,
            depth: 3,
            base_width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("generator depth must be >= 2, got {}", self.depth)));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config(format!("generator widths must be positive: {self:?}")));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Debug)]
struct DownLevel<T: Real> {
    conv: Conv2d<T>,
    res: ResBlock<T>,
}

#[derive(Clone, Debug)]
struct UpLevel<T: Real> {
    fuse: Conv2d<T>,
    res: ResBlock<T>,
}

#[derive(Clone, Debug)]
pub struct ResUnet<T: Real = f32> {
    config: GmConfig,
    encoder: Vec<DownLevel<T>>,
    bottleneck: ResBlock<T>,
    /// `decoder[l]` produces level `l` from level `l + 1`.
    decoder: Vec<UpLevel<T>>,
    head: Conv2d<T>,
}

impl<T: Real> ResUnet<T> {
    pub fn new(b: &mut Builder<'_, T>, config: &GmConfig) -> Result<Self> {
        config.validate()?;
        Ok(b.scope("gm", |b| {
            let mut encoder = Vec::with_capacity(config.depth);
            for level in 0..config.depth {
                let (c_in, stride) = if level == 0 {
                    (config.in_channels, 1)
                } else {
                    (config.width(level - 1), 2)
                };
                let w = config.width(level);
                encoder.push(b.scope(&format!("enc{level}"), |b| DownLevel {
                    conv: Conv2d::new(b, "conv", c_in, w, 3, stride, Init::FanIn(1.0)),
                    res: ResBlock::new(b, "res", w),
                }));
            }
            let bottleneck = ResBlock::new(b, "bottleneck", config.width(config.depth - 1));
            let decoder = (0..config.depth - 1)
                .map(|level| {
                    let c_in = config.width(level + 1) + config.width(level);
                    let w = config.width(level);
                    b.scope(&format!("dec{level}"), |b| UpLevel {
                        fuse: Conv2d::new(b, "fuse", c_in, w, 3, 1, Init::FanIn(1.0)),
                        res: ResBlock::new(b, "res", w),
                    })
                })
                .collect();
            let head = Conv2d::new(b, "head", config.base_width, 3, 3, 1, Init::FanIn(0.5));
            ResUnet {
                config: config.clone(),
                encoder,
                bottleneck,
                decoder,
                head,
            }
        }))
    }

    pub fn config(&self) -> &GmConfig {
        &self.config
    }

    /// Maps an `(N, in_channels, H, W)` condition stack to an `(N, 3, H, W)`
    /// image squashed into `[-1, 1]`.
    pub fn forward(&self, condition: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = condition.dims4("gm_forward")?;
        if c != self.config.in_channels {
            return Err(Error::invalid(
                "gm_forward",
                format!("expected {} input channels, got {c}", self.config.in_channels),
            ));
        }
        let f = 1usize << (self.config.depth - 1);
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid(
                "gm_forward",
                format!("input {h}x{w} is not divisible by {f}"),
            ));
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = condition.clone();
        for level in &self.encoder {
            x = level.res.forward(&leaky(&level.conv.forward(&x)?))?;
            skips.push(x.clone());
        }
        x = self.bottleneck.forward(&x)?;
        for (level, up) in self.decoder.iter().enumerate().rev() {
            let upsampled = x.upsample2x(UpsampleMode::Nearest)?;
            let joined = Tensor::concat_channels(&[upsampled, skips[level].clone()])?;
            x = up.res.forward(&leaky(&up.fuse.forward(&joined)?))?;
        }
        Ok(self.head.forward(&x)?.tanh())
    }
}

pub fn build<T: Real>(params: &mut ParamSet<T>, config: &GmConfig, seed: u64) -> Result<ResUnet<T>> {
    ResUnet::new(&mut Builder::new(params, seed), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small() -> GmConfig {
        GmConfig {
            in_channels: 5,
            depth: 3,
            base_width: 4,
        }
    }

    #[test]
    fn output_is_bounded_image_of_input_size() {
        let mut ps = ParamSet::new();
        let gm = build::<f64>(&mut ps, &small(), 0).unwrap();
        let y = gm.forward(&noise(&[2, 5, 16, 12], 1).scale(5.0)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 12]);
        assert!(y.to_vec().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut ps = ParamSet::new();
        let gm = build::<f64>(&mut ps, &small(), 0).unwrap();
        assert!(gm.forward(&noise(&[1, 4, 16, 12], 1)).is_err());
        assert!(GmConfig { depth: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn skips_carry_information_without_the_bottleneck() {
        let mut ps = ParamSet::new();
        let gm = build::<f64>(&mut ps, &small(), 2).unwrap();
        ps.zero_prefixed("gm.bottleneck");
        ps.zero_prefixed("gm.enc2");
        let a = gm.forward(&noise(&[1, 5, 16, 12], 3)).unwrap().to_vec();
        let b = gm.forward(&noise(&[1, 5, 16, 12], 4)).unwrap().to_vec();
        assert_ne!(a, b);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut ps = ParamSet::new();
        let gm = build::<f64>(&mut ps, &small(), 5).unwrap();
        let x = noise(&[2, 5, 8, 8], 6);
        let target = noise(&[2, 3, 8, 8], 7);
        let loss = gm.forward(&x).unwrap().sub(&target).unwrap().square().mean();
        loss.backward().unwrap();
        for (name, t) in ps.iter() {
            let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().any(|&v| v != 0.0), "{name} gradient is all zero");
        }
    }
}
