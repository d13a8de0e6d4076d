//! Two-phase training: a parser-based tutor learns from garment + person
//! representation, then a parser-free student learns from garment + the
//! tutor's fake image, optionally distilling the tutor's features and flows.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::afwm::{Afwm, AfwmConfig, FlowCascade, PyramidPair};
use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::generator::{GmConfig, ResUnet};
use crate::image_io::{batch, Image};
use crate::losses::{self, FeatureExtractor, GateDecision, LossWeights};
use crate::nn::{Builder, ParamSet};
use crate::optim::{decay_factor, Adam, AdamConfig};
use crate::synth::{self, SynthConfig, TryOnSample, POSE_CHANNELS, REPRESENTATION_CHANNELS};
use crate::tensor::scalar::Real;
use crate::tensor::{FlowField, Tensor};

/// Which distillation terms the student trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    /// Generation loss only.
    Off,
    /// Hint and prediction losses on every sample.
    Fixed,
    /// Hint and prediction losses only where the tutor beats the student.
    Adjustable,
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(DistillMode::Off),
            "fixed" => Ok(DistillMode::Fixed),
            "adjustable" => Ok(DistillMode::Adjustable),
            other => Err(Error::Config(format!(
                "distillation mode must be off, fixed or adjustable, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillMode::Off => "off",
            DistillMode::Fixed => "fixed",
            DistillMode::Adjustable => "adjustable",
        })
    }
}

/// Architecture of one try-on network, shared by tutor and student apart
/// from the input channel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub levels: usize,
    pub afwm_width: usize,
    pub fpn_width: usize,
    pub flow_width: usize,
    pub corr_radius: usize,
    pub gm_depth: usize,
    pub gm_width: usize,
}

impl NetConfig {
    pub fn desk() -> Self {
        let a = AfwmConfig::desk(3, 3);
        let g = GmConfig::desk(3);
        NetConfig {
            levels: a.levels,
            afwm_width: a.base_width,
            fpn_width: a.fpn_width,
            flow_width: a.flow_width,
            corr_radius: a.corr_radius,
            gm_depth: g.depth,
            gm_width: g.base_width,
        }
    }

    pub fn full() -> Self {
        let a = AfwmConfig::full(3, 3);
        NetConfig {
            levels: a.levels,
            corr_radius: a.corr_radius,
            ..Self::desk()
        }
    }

    pub fn afwm(&self, condition_channels: usize) -> AfwmConfig {
        AfwmConfig {
            levels: self.levels,
            base_width: self.afwm_width,
            fpn_width: self.fpn_width,
            flow_width: self.flow_width,
            corr_radius: self.corr_radius,
            clothes_channels: 3,
            condition_channels,
        }
    }

    pub fn gm(&self, in_channels: usize) -> GmConfig {
        GmConfig {
            in_channels,
            depth: self.gm_depth,
            base_width: self.gm_width,
        }
    }

    const KEYS: [&'static str; 7] = [
        "levels",
        "afwm_width",
        "fpn_width",
        "flow_width",
        "corr_radius",
        "gm_depth",
        "gm_width",
    ];

    fn values(&self) -> [usize; 7] {
        [
            self.levels,
            self.afwm_width,
            self.fpn_width,
            self.flow_width,
            self.corr_radius,
            self.gm_depth,
            self.gm_width,
        ]
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        Self::KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            map.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing config `{k}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("config `{k}` is not a count")))
        };
        Ok(NetConfig {
            levels: get("levels")?,
            afwm_width: get("afwm_width")?,
            fpn_width: get("fpn_width")?,
            flow_width: get("flow_width")?,
            corr_radius: get("corr_radius")?,
            gm_depth: get("gm_depth")?,
            gm_width: get("gm_width")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Training samples.
    pub samples: usize,
    /// Held-out evaluation samples.
    pub heldout: usize,
    pub height: usize,
    pub width: usize,
    /// Probability that a sample's segmentation is corrupted.
    pub corruption: f64,
    pub weights: LossWeights,
    pub net: NetConfig,
    pub distill: DistillMode,
    /// Seed of the frozen perceptual feature extractor.
    pub extractor_seed: u64,
}

impl PipelineConfig {
    /// Settings sized for a single CPU core.
    pub fn desk() -> Self {
        PipelineConfig {
            seed: 7,
            teacher_epochs: 30,
            student_epochs: 30,
            lr: 1e-3,
            batch_size: 2,
            samples: 16,
            heldout: 8,
            height: 64,
            width: 48,
            corruption: 0.0,
            weights: LossWeights::default(),
            net: NetConfig::desk(),
            distill: DistillMode::Adjustable,
            extractor_seed: 0x5eed,
        }
    }

    /// The reference large-scale schedule.
    pub fn full() -> Self {
        PipelineConfig {
            teacher_epochs: 200,
            student_epochs: 200,
            lr: 3e-5,
            height: 256,
            width: 192,
            net: NetConfig::full(),
            ..Self::desk()
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            height: self.height,
            width: self.width,
            corruption: self.corruption,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("samples", self.samples),
            ("height", self.height),
            ("width", self.width),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("`lr` must be positive, got {}", self.lr)));
        }
        self.weights.validate()?;
        self.synth().validate()?;
        self.net.afwm(3).validate()?;
        self.net.afwm(3).level_sizes(self.height, self.width)?;
        self.net.gm(3).validate()?;
        Ok(())
    }

    /// Reads every recognised key from `kv`, starting from [`PipelineConfig::desk`]
    /// or [`PipelineConfig::full`] as chosen by `preset`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = match kv.raw("preset").unwrap_or("desk") {
            "desk" => Self::desk(),
            "full" => Self::full(),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        kv.update("seed", &mut c.seed)?;
        if let Some(e) = kv.take::<usize>("epochs")? {
            c.teacher_epochs = e;
            c.student_epochs = e;
        }
        kv.update("teacher_epochs", &mut c.teacher_epochs)?;
        kv.update("student_epochs", &mut c.student_epochs)?;
        kv.update("lr", &mut c.lr)?;
        kv.update("batch_size", &mut c.batch_size)?;
        kv.update("samples", &mut c.samples)?;
        kv.update("heldout", &mut c.heldout)?;
        kv.update("height", &mut c.height)?;
        kv.update("width", &mut c.width)?;
        kv.update("corruption", &mut c.corruption)?;
        kv.update("extractor_seed", &mut c.extractor_seed)?;
        kv.update("lambda_l1", &mut c.weights.l1)?;
        kv.update("lambda_perceptual", &mut c.weights.perceptual)?;
        kv.update("lambda_smooth", &mut c.weights.smooth)?;
        kv.update("lambda_hint", &mut c.weights.hint)?;
        kv.update("lambda_pred", &mut c.weights.pred)?;
        kv.update("levels", &mut c.net.levels)?;
        kv.update("afwm_width", &mut c.net.afwm_width)?;
        kv.update("fpn_width", &mut c.net.fpn_width)?;
        kv.update("flow_width", &mut c.net.flow_width)?;
        kv.update("corr_radius", &mut c.net.corr_radius)?;
        kv.update("gm_depth", &mut c.net.gm_depth)?;
        kv.update("gm_width", &mut c.net.gm_width)?;
        if let Some(m) = kv.raw("distill") {
            c.distill = m.parse()?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Every setting as `key = value` text accepted by [`PipelineConfig::from_kv`].
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("seed", self.seed);
        kv.set("teacher_epochs", self.teacher_epochs);
        kv.set("student_epochs", self.student_epochs);
        kv.set("lr", self.lr);
        kv.set("batch_size", self.batch_size);
        kv.set("samples", self.samples);
        kv.set("heldout", self.heldout);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("corruption", self.corruption);
        kv.set("extractor_seed", self.extractor_seed);
        kv.set("lambda_l1", self.weights.l1);
        kv.set("lambda_perceptual", self.weights.perceptual);
        kv.set("lambda_smooth", self.weights.smooth);
        kv.set("lambda_hint", self.weights.hint);
        kv.set("lambda_pred", self.weights.pred);
        for (k, v) in self.net.to_map() {
            kv.set(&k, v);
        }
        kv.set("distill", self.distill);
        kv
    }

    pub fn tutor_seed(&self) -> u64 {
        synth::sample_seed(self.seed, usize::MAX - 1)
    }

    pub fn student_seed(&self) -> u64 {
        synth::sample_seed(self.seed, usize::MAX - 2)
    }

    /// Base seed of the training set.
    pub fn train_seed(&self) -> u64 {
        self.seed
    }

    /// Base seed of the held-out set, disjoint from training seeds.
    pub fn heldout_seed(&self) -> u64 {
        synth::sample_seed(self.seed, usize::MAX - 3)
    }

    pub fn train_set(&self, threads: usize) -> Result<Vec<TryOnSample>> {
        synth::dataset(self.train_seed(), self.samples, &self.synth(), threads)
    }

    pub fn heldout_set(&self, threads: usize) -> Result<Vec<TryOnSample>> {
        synth::dataset(self.heldout_seed(), self.heldout, &self.synth(), threads)
    }

    pub fn extractor<T: Real>(&self) -> FeatureExtractor<T> {
        FeatureExtractor::seeded(self.extractor_seed)
    }
}

/// Everything one try-on pass produces.
#[derive(Clone, Debug)]
pub struct TryOnOutput<T: Real = f32> {
    pub pyramid: PyramidPair<T>,
    pub cascade: FlowCascade<T>,
    pub warped: Tensor<T>,
    pub image: Tensor<T>,
}

#[derive(Clone, Debug)]
struct TryOnNet<T: Real> {
    net: NetConfig,
    params: ParamSet<T>,
    afwm: Afwm<T>,
    gm: ResUnet<T>,
}

impl<T: Real> TryOnNet<T> {
    fn new(net: &NetConfig, condition: usize, gm_inputs: usize, seed: u64, trainable: bool) -> Result<Self> {
        let mut params = ParamSet::new();
        let (afwm, gm) = {
            let mut b = if trainable {
                Builder::new(&mut params, seed)
            } else {
                Builder::frozen(&mut params, seed)
            };
            (Afwm::new(&mut b, &net.afwm(condition))?, ResUnet::new(&mut b, &net.gm(gm_inputs))?)
        };
        Ok(TryOnNet {
            net: net.clone(),
            params,
            afwm,
            gm,
        })
    }

    fn run(&self, clothes: &Tensor<T>, condition: &Tensor<T>, gm_extra: &[Tensor<T>]) -> Result<TryOnOutput<T>> {
        let out = self.afwm.forward(clothes, condition)?;
        let mut stack = vec![out.warped.clone()];
        stack.extend_from_slice(gm_extra);
        let image = self.gm.forward(&Tensor::concat_channels(&stack)?)?;
        Ok(TryOnOutput {
            pyramid: out.pyramid,
            cascade: out.cascade,
            warped: out.warped,
            image,
        })
    }

    fn checkpoint(&self, role: &str) -> Checkpoint {
        Checkpoint {
            role: role.to_string(),
            config: self.net.to_map(),
            params: self.params.snapshot(),
        }
    }
}

/// Inputs of the parser-based network for one batch.
#[derive(Clone, Debug)]
pub struct TutorBatch<T: Real = f32> {
    pub clothes: Tensor<T>,
    pub representation: Tensor<T>,
    pub pose: Tensor<T>,
    pub preserved: Tensor<T>,
}

impl<T: Real> TutorBatch<T> {
    /// Batch wearing each sample's own garment, or its alternate garment
    /// when `alternate` is set.
    pub fn from_samples(samples: &[&TryOnSample], alternate: bool) -> Result<Self> {
        let clothes: Vec<&Image> = samples
            .iter()
            .map(|s| if alternate { &s.alt_clothes } else { &s.clothes })
            .collect();
        let reps: Vec<&Image> = samples.iter().map(|s| &s.representation).collect();
        let poses: Vec<Image> = samples.iter().map(|s| s.pose()).collect();
        let preserved: Vec<Image> = samples.iter().map(|s| s.preserved_region()).collect();
        Ok(TutorBatch {
            clothes: batch(&clothes)?,
            representation: batch(&reps)?,
            pose: batch(&poses.iter().collect::<Vec<_>>())?,
            preserved: batch(&preserved.iter().collect::<Vec<_>>())?,
        })
    }
}

/// Parser-based network: AFWM conditioned on the person representation, GM
/// on warped garment + pose + preserved region.
#[derive(Clone, Debug)]
pub struct Tutor<T: Real = f32>(TryOnNet<T>);

pub const TUTOR_ROLE: &str = "tutor";
pub const STUDENT_ROLE: &str = "student";
/// GM input channels of the tutor: warped garment, pose, preserved region.
pub const TUTOR_GM_CHANNELS: usize = 3 + (POSE_CHANNELS.end - POSE_CHANNELS.start) + 3;
/// GM input channels of the student: warped garment and person image.
pub const STUDENT_GM_CHANNELS: usize = 3 + 3;

impl<T: Real> Tutor<T> {
    pub fn new(net: &NetConfig, seed: u64) -> Result<Self> {
        Self::build(net, seed, true)
    }

    fn build(net: &NetConfig, seed: u64, trainable: bool) -> Result<Self> {
        TryOnNet::new(net, REPRESENTATION_CHANNELS, TUTOR_GM_CHANNELS, seed, trainable).map(Tutor)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.0.params
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.0.net
    }

    pub fn afwm(&self) -> &Afwm<T> {
        &self.0.afwm
    }

    pub fn forward(&self, input: &TutorBatch<T>) -> Result<TryOnOutput<T>> {
        self.0.run(
            &input.clothes,
            &input.representation,
            &[input.pose.clone(), input.preserved.clone()],
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.0.checkpoint(TUTOR_ROLE)
    }

    /// Rebuilds a tutor; `trainable = false` yields constant parameters that
    /// never record gradients.
    pub fn from_checkpoint(ck: &Checkpoint, trainable: bool) -> Result<Self> {
        ck.expect_role(TUTOR_ROLE)?;
        let t = Self::build(&NetConfig::from_map(&ck.config)?, 0, trainable)?;
        t.0.params.load(&ck.params)?;
        Ok(t)
    }

    /// Constant copy of the current parameters.
    pub fn frozen(&self) -> Result<Self> {
        let t = Self::build(&self.0.net, 0, false)?;
        t.0.params.load(&self.0.params.snapshot())?;
        Ok(t)
    }
}

/// Parser-free network: both modules see only the garment and a person
/// image.
#[derive(Clone, Debug)]
pub struct Student<T: Real = f32>(TryOnNet<T>);

impl<T: Real> Student<T> {
    pub fn new(net: &NetConfig, seed: u64) -> Result<Self> {
        TryOnNet::new(net, 3, STUDENT_GM_CHANNELS, seed, true).map(Student)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.0.params
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.0.net
    }

    pub fn afwm(&self) -> &Afwm<T> {
        &self.0.afwm
    }

    /// The only entry point: an `(N, 3, H, W)` person image and an
    /// `(N, 3, H, W)` garment image.
    pub fn forward(&self, person: &Tensor<T>, clothes: &Tensor<T>) -> Result<TryOnOutput<T>> {
        let (pn, pc, ph, pw) = person.dims4("student_forward")?;
        let (cn, cc, ch, cw) = clothes.dims4("student_forward")?;
        if pc != 3 || cc != 3 || (pn, ph, pw) != (cn, ch, cw) {
            return Err(Error::shape("student_forward", person.shape(), clothes.shape()));
        }
        self.0.run(clothes, person, &[person.clone()])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.0.checkpoint(STUDENT_ROLE)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_role(STUDENT_ROLE)?;
        let s = Self::new(&NetConfig::from_map(&ck.config)?, 0)?;
        s.0.params.load(&ck.params)?;
        Ok(s)
    }
}

/// Per-epoch means of the tutor's loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub smooth: f64,
    pub total: f64,
}

impl TeacherEpoch {
    pub const HEADER: &'static str = "epoch\tl1\tperceptual\tsmooth\ttotal";

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.l1, self.perceptual, self.smooth, self.total
        )
    }
}

/// Per-epoch means of the student's loss terms and the share of samples on
/// which distillation was active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentEpoch {
    pub epoch: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub smooth: f64,
    pub total: f64,
    pub kd: f64,
    pub gate_rate: f64,
}

impl StudentEpoch {
    pub const HEADER: &'static str = "epoch\tl1\tperceptual\tsmooth\ttotal\tkd\tgate_rate";

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.l1, self.perceptual, self.smooth, self.total, self.kd, self.gate_rate
        )
    }
}

/// Loss of every optimizer step plus per-epoch summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog<E> {
    pub epochs: Vec<E>,
    pub step_losses: Vec<f64>,
}

impl<E> Default for TrainLog<E> {
    fn default() -> Self {
        TrainLog {
            epochs: Vec::new(),
            step_losses: Vec::new(),
        }
    }
}

fn check_finite(v: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            what: what.to_string(),
        })
    }
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Diverged { step, what, .. } => Error::Diverged { epoch, step, what },
        other => other,
    }
}

/// Deterministic sample order for `epoch`.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(synth::sample_seed(seed, epoch)));
    order
}

#[derive(Default)]
struct Means {
    sums: Vec<f64>,
    count: usize,
}

impl Means {
    fn add(&mut self, values: &[f64], weight: usize) {
        if self.sums.is_empty() {
            self.sums = vec![0.0; values.len()];
        }
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v * weight as f64;
        }
        self.count += weight;
    }

    fn get(&self, i: usize) -> f64 {
        self.sums[i] / self.count.max(1) as f64
    }
}

/// Trains a fresh tutor on `dataset`. `on_epoch` sees each summary as soon
/// as the epoch ends.
pub fn train_teacher<T: Real>(
    dataset: &[TryOnSample],
    config: &PipelineConfig,
    mut on_epoch: impl FnMut(&TeacherEpoch),
) -> Result<(Tutor<T>, TrainLog<TeacherEpoch>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let tutor = Tutor::<T>::new(&config.net, config.tutor_seed())?;
    let extractor = config.extractor::<T>();
    let mut opt = Adam::new(tutor.params(), AdamConfig::with_lr(config.lr));
    let mut log = TrainLog::default();
    let total_epochs = config.teacher_epochs;
    for epoch in 0..total_epochs {
        let lr_scale = decay_factor(epoch, total_epochs);
        let mut means = Means::default();
        let order = epoch_order(config.seed, epoch, dataset.len());
        for chunk in order.chunks(config.batch_size) {
            let step = log.step_losses.len();
            let samples: Vec<&TryOnSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let input = TutorBatch::<T>::from_samples(&samples, false)?;
            let target: Tensor<T> = batch(&samples.iter().map(|s| &s.person).collect::<Vec<_>>())?;
            tutor.params().zero_grad();
            let out = tutor.forward(&input)?;
            let loss = losses::total_generation_loss(&out.image, &target, &out.cascade, &extractor, &config.weights)?;
            let total = loss.total.item().to_f64();
            check_finite(total, epoch + 1, step, "teacher loss")?;
            loss.total.backward()?;
            opt.step(tutor.params(), lr_scale).map_err(|e| with_epoch(e, epoch + 1))?;
            log.step_losses.push(total);
            means.add(
                &[
                    loss.l1.item().to_f64(),
                    loss.perceptual.item().to_f64(),
                    loss.smooth.item().to_f64(),
                    total,
                ],
                chunk.len(),
            );
        }
        let summary = TeacherEpoch {
            epoch: epoch + 1,
            l1: means.get(0),
            perceptual: means.get(1),
            smooth: means.get(2),
            total: means.get(3),
        };
        on_epoch(&summary);
        log.epochs.push(summary);
    }
    Ok((tutor, log))
}

/// Tutor image: the person of `sample` wearing its alternate garment.
pub fn generate_tutor<T: Real>(tutor: &Tutor<T>, sample: &TryOnSample) -> Result<Image> {
    let frozen = tutor.frozen()?;
    let out = frozen.forward(&TutorBatch::from_samples(&[sample], true)?)?;
    Image::from_tensor(&out.image, 0)
}

/// What the frozen tutor contributes for one training sample.
#[derive(Clone, Debug)]
pub struct TeacherSignals {
    /// `ũ`: the person re-dressed in the alternate garment.
    pub tutor_image: Image,
    /// `u_I`: the tutor's reconstruction of the real person.
    pub image: Image,
    /// `u_p`: condition-branch features, finest level first.
    pub features: Vec<Tensor<f32>>,
    /// `u_f`: flow cascade, coarsest first.
    pub flows: Vec<Tensor<f32>>,
}

/// Runs the frozen tutor on `(alt garment, p*)` and `(garment, p*)`.
pub fn teacher_signals(tutor: &Tutor<f32>, samples: &[TryOnSample]) -> Result<Vec<TeacherSignals>> {
    let frozen = tutor.frozen()?;
    samples
        .iter()
        .map(|s| {
            let alt = frozen.forward(&TutorBatch::from_samples(&[s], true)?)?;
            let own = frozen.forward(&TutorBatch::from_samples(&[s], false)?)?;
            Ok(TeacherSignals {
                tutor_image: Image::from_tensor(&alt.image, 0)?,
                image: Image::from_tensor(&own.image, 0)?,
                features: own.pyramid.condition_features,
                flows: own.cascade.flows.into_iter().map(|f| f.into_tensor()).collect(),
            })
        })
        .collect()
}

fn cat_batch(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = parts[0].shape();
    let mut shape = first.to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        if p.shape()[1..] != first[1..] {
            return Err(Error::shape("cat_batch", first, p.shape()));
        }
        data.extend_from_slice(&p.data());
    }
    Tensor::new(&shape, data)
}

/// Trains a fresh student against a frozen `tutor`. The tutor's parameters
/// are never modified.
pub fn train_student(
    tutor: &Tutor<f32>,
    dataset: &[TryOnSample],
    config: &PipelineConfig,
    on_epoch: impl FnMut(&StudentEpoch),
) -> Result<(Student<f32>, TrainLog<StudentEpoch>)> {
    config.validate()?;
    check_compatible(tutor.net_config(), &config.net)?;
    let signals = teacher_signals(tutor, dataset)?;
    train_student_with(&signals, dataset, config, on_epoch)
}

/// Fails unless the tutor was built with the architecture in `config`.
pub fn check_compatible(tutor: &NetConfig, student: &NetConfig) -> Result<()> {
    if tutor != student {
        return Err(Error::Config(format!(
            "tutor architecture {tutor:?} does not match the configured {student:?}"
        )));
    }
    Ok(())
}

/// Student training from precomputed tutor outputs.
pub fn train_student_with(
    signals: &[TeacherSignals],
    dataset: &[TryOnSample],
    config: &PipelineConfig,
    mut on_epoch: impl FnMut(&StudentEpoch),
) -> Result<(Student<f32>, TrainLog<StudentEpoch>)> {
    config.validate()?;
    if dataset.is_empty() || signals.len() != dataset.len() {
        return Err(Error::Config(format!(
            "need one set of tutor outputs per sample, got {} for {}",
            signals.len(),
            dataset.len()
        )));
    }
    let student = Student::<f32>::new(&config.net, config.student_seed())?;
    let extractor = config.extractor::<f32>();
    let mut opt = Adam::new(student.params(), AdamConfig::with_lr(config.lr));
    let mut log = TrainLog::default();
    let total_epochs = config.student_epochs;
    for epoch in 0..total_epochs {
        let lr_scale = decay_factor(epoch, total_epochs);
        let mut means = Means::default();
        let mut active = 0usize;
        let order = epoch_order(config.seed ^ 0x5757, epoch, dataset.len());
        for chunk in order.chunks(config.batch_size) {
            let step = log.step_losses.len();
            let sig: Vec<&TeacherSignals> = chunk.iter().map(|&i| &signals[i]).collect();
            let samples: Vec<&TryOnSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let tutor_image: Tensor<f32> = batch(&sig.iter().map(|s| &s.tutor_image).collect::<Vec<_>>())?;
            let clothes: Tensor<f32> = batch(&samples.iter().map(|s| &s.clothes).collect::<Vec<_>>())?;
            let target: Tensor<f32> = batch(&samples.iter().map(|s| &s.person).collect::<Vec<_>>())?;

            student.params().zero_grad();
            let out = student.forward(&tutor_image, &clothes)?;
            let gen = losses::total_generation_loss(&out.image, &target, &out.cascade, &extractor, &config.weights)?;
            let (kd, gate) = match config.distill {
                DistillMode::Off => (None, GateDecision::never(chunk.len())),
                mode => {
                    let gate = if mode == DistillMode::Fixed {
                        GateDecision::always(chunk.len())
                    } else {
                        let u_image: Tensor<f32> = batch(&sig.iter().map(|s| &s.image).collect::<Vec<_>>())?;
                        losses::gate_psi(&u_image, &out.image.detach(), &target)?
                    };
                    let levels = sig[0].features.len();
                    let u_feat = (0..levels)
                        .map(|l| cat_batch(&sig.iter().map(|s| &s.features[l]).collect::<Vec<_>>()))
                        .collect::<Result<Vec<_>>>()?;
                    let u_flow = FlowCascade {
                        flows: (0..sig[0].flows.len())
                            .map(|l| {
                                cat_batch(&sig.iter().map(|s| &s.flows[l]).collect::<Vec<_>>())
                                    .and_then(FlowField::new)
                            })
                            .collect::<Result<Vec<_>>>()?,
                    };
                    let hint = losses::hint_loss(&u_feat, &out.pyramid.condition_features, &gate)?;
                    let pred = losses::pred_loss(&u_flow, &out.cascade, &gate)?;
                    (Some(losses::kd_loss(&hint, &pred, &config.weights)?), gate)
                }
            };
            let total = match &kd {
                Some(kd) => gen.total.add(kd)?,
                None => gen.total.clone(),
            };
            let total_v = total.item() as f64;
            check_finite(total_v, epoch + 1, step, "student loss")?;
            total.backward()?;
            opt.step(student.params(), lr_scale).map_err(|e| with_epoch(e, epoch + 1))?;
            log.step_losses.push(total_v);
            active += gate.active();
            means.add(
                &[
                    gen.l1.item() as f64,
                    gen.perceptual.item() as f64,
                    gen.smooth.item() as f64,
                    total_v,
                    kd.as_ref().map_or(0.0, |k| k.item() as f64),
                ],
                chunk.len(),
            );
        }
        let summary = StudentEpoch {
            epoch: epoch + 1,
            l1: means.get(0),
            perceptual: means.get(1),
            smooth: means.get(2),
            total: means.get(3),
            kd: means.get(4),
            gate_rate: active as f64 / dataset.len() as f64,
        };
        on_epoch(&summary);
        log.epochs.push(summary);
    }
    Ok((student, log))
}

/// Try-on image and warped garment for one person/garment pair.
pub fn infer<T: Real>(student: &Student<T>, person: &Image, clothes: &Image) -> Result<(Image, Image)> {
    if (person.channels, person.height, person.width) != (clothes.channels, clothes.height, clothes.width) {
        return Err(Error::Image(format!(
            "person is {}x{}x{} but garment is {}x{}x{}",
            person.channels, person.height, person.width, clothes.channels, clothes.height, clothes.width
        )));
    }
    let out = student.forward(&person.to_tensor(), &clothes.to_tensor())?;
    Ok((Image::from_tensor(&out.image, 0)?, Image::from_tensor(&out.warped, 0)?))
}

/// Mean L1 between the student's try-on of each sample's own garment onto
/// the person wearing the alternate garment and the real person image.
pub fn heldout_l1<T: Real>(student: &Student<T>, samples: &[TryOnSample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let (image, _) = infer(student, &s.alt_person, &s.clothes)?;
        sum += image.mean_abs_diff(&s.person);
    }
    Ok(sum / samples.len().max(1) as f64)
}
