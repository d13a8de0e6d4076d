//! Procedural try-on data: a stylized body wearing a patterned garment that is
//! placed on the torso by a known smooth warp.
//!
//! Every sample is a pure function of its seed. Garment pixels of the person
//! image are produced by bilinearly sampling the flat garment with the
//! emitted ground-truth flow, using the same arithmetic as
//! [`Tensor::grid_sample`](crate::Tensor::grid_sample) at 32-bit.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::tensor::{bilinear_at, half_extent};

/// Channel layout of the person representation.
pub const PRESERVED_CHANNEL: usize = 0;
pub const SEGMENTATION_CHANNELS: std::ops::Range<usize> = 1..5;
pub const POSE_CHANNELS: std::ops::Range<usize> = 5..11;
pub const REPRESENTATION_CHANNELS: usize = 11;

/// Segmentation classes, in channel order.
pub const SEGMENT_NAMES: [&str; 4] = ["head", "garment", "arms", "legs"];
/// Pose keypoints, in channel order.
pub const KEYPOINT_NAMES: [&str; 6] = ["head", "neck", "left_shoulder", "right_shoulder", "left_hip", "right_hip"];

/// Colour of everything that is not body or garment in the person image.
pub const BACKGROUND: [f32; 3] = [-0.6, -0.45, -0.3];
/// Colour of the flat-garment canvas around the garment.
pub const CANVAS: f32 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Probability that a sample's segmentation channels are corrupted.
    pub corruption: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 48,
            corruption: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return Err(Error::Config(format!(
                "corruption probability must lie in [0, 1], got {}",
                self.corruption
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TryOnSample {
    pub seed: u64,
    /// Flat garment `I_c`.
    pub clothes: Image,
    /// Person `I` wearing `clothes`.
    pub person: Image,
    /// Preserved mask, segmentation one-hot and pose heatmaps.
    pub representation: Image,
    /// A different garment on the same canvas.
    pub alt_clothes: Image,
    /// The same person wearing `alt_clothes`.
    pub alt_person: Image,
    /// Normalized flow placing `clothes` onto `person`.
    pub flow: Image,
    /// Visible garment pixels of `person`.
    pub garment_mask: Image,
    /// Segmentation before corruption.
    pub true_segmentation: Image,
    pub corrupted: bool,
}

impl TryOnSample {
    pub fn preserved_mask(&self) -> Image {
        self.representation.select(PRESERVED_CHANNEL..PRESERVED_CHANNEL + 1)
    }

    pub fn segmentation(&self) -> Image {
        self.representation.select(SEGMENTATION_CHANNELS)
    }

    pub fn pose(&self) -> Image {
        self.representation.select(POSE_CHANNELS)
    }

    /// Person pixels under the preserved mask, zero elsewhere.
    pub fn preserved_region(&self) -> Image {
        let mask = self.representation.plane(PRESERVED_CHANNEL);
        let mut out = self.person.clone();
        for c in 0..3 {
            for (v, m) in out.plane_mut(c).iter_mut().zip(mask) {
                *v *= m;
            }
        }
        out
    }
}

/// Seed of sample `index` in a dataset drawn from `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` samples, generated on up to `threads` worker threads. The result does
/// not depend on the thread count.
pub fn dataset(base_seed: u64, n: usize, config: &SynthConfig, threads: usize) -> Result<Vec<TryOnSample>> {
    config.validate()?;
    let threads = threads.clamp(1, n.max(1));
    let mut out: Vec<Option<TryOnSample>> = vec![None; n];
    std::thread::scope(|scope| {
        for (t, chunk) in out.chunks_mut(n.div_ceil(threads).max(1)).enumerate() {
            let start = t * n.div_ceil(threads).max(1);
            scope.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(render(sample_seed(base_seed, start + j), config));
                }
            });
        }
    });
    Ok(out.into_iter().map(|s| s.expect("every slot rendered")).collect())
}

pub fn synth_sample(seed: u64, config: &SynthConfig) -> Result<TryOnSample> {
    config.validate()?;
    Ok(render(seed, config))
}

type Rgb = [f32; 3];

#[derive(Clone, Copy, Debug)]
enum Stripes {
    Horizontal,
    Vertical,
    Diagonal,
}

#[derive(Clone, Copy, Debug)]
enum Glyph {
    Disk,
    Square,
    Cross,
}

#[derive(Clone, Debug)]
struct Garment {
    base: Rgb,
    stripe: Rgb,
    stripes: Stripes,
    period: f64,
    phase: f64,
    glyph: Glyph,
    glyph_colour: Rgb,
    /// Glyph centre as a fraction of the garment rectangle.
    glyph_at: (f64, f64),
    glyph_size: f64,
}

/// Pixel bounds of the garment on the flat canvas, inclusive.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Rect {
    fn canvas(h: usize, w: usize) -> Self {
        Rect {
            x0: (0.2 * w as f64).round(),
            x1: (0.8 * w as f64).round() - 1.0,
            y0: (0.2 * h as f64).round(),
            y1: (0.78 * h as f64).round() - 1.0,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }
}

fn colour(rng: &mut ChaCha8Rng) -> Rgb {
    [0; 3].map(|_| rng.gen_range(-0.8f32..0.8))
}

fn contrast(rng: &mut ChaCha8Rng, base: Rgb) -> Rgb {
    let mut c = base;
    for v in &mut c {
        let delta = rng.gen_range(0.6f32..1.0);
        *v = if *v > 0.0 { *v - delta } else { *v + delta };
    }
    c
}

fn distance(a: Rgb, b: Rgb) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

impl Garment {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = colour(rng);
        Garment {
            base,
            stripe: contrast(rng, base),
            stripes: match rng.gen_range(0..3) {
                0 => Stripes::Horizontal,
                1 => Stripes::Vertical,
                _ => Stripes::Diagonal,
            },
            period: rng.gen_range(4.0..9.0),
            phase: rng.gen_range(0.0..1.0),
            glyph: match rng.gen_range(0..3) {
                0 => Glyph::Disk,
                1 => Glyph::Square,
                _ => Glyph::Cross,
            },
            glyph_colour: contrast(rng, base),
            glyph_at: (rng.gen_range(0.3..0.7), rng.gen_range(0.25..0.5)),
            glyph_size: rng.gen_range(0.12..0.2),
        }
    }

    fn value(&self, rect: &Rect, x: f64, y: f64) -> Rgb {
        let size = self.glyph_size * (rect.x1 - rect.x0);
        let (dx, dy) = (
            x - (rect.x0 + self.glyph_at.0 * (rect.x1 - rect.x0)),
            y - (rect.y0 + self.glyph_at.1 * (rect.y1 - rect.y0)),
        );
        let in_glyph = match self.glyph {
            Glyph::Disk => dx * dx + dy * dy <= size * size,
            Glyph::Square => dx.abs() <= size && dy.abs() <= size,
            Glyph::Cross => {
                (dx.abs() <= size && dy.abs() <= size * 0.35) || (dy.abs() <= size && dx.abs() <= size * 0.35)
            }
        };
        if in_glyph {
            return self.glyph_colour;
        }
        let coord = match self.stripes {
            Stripes::Horizontal => y,
            Stripes::Vertical => x,
            Stripes::Diagonal => (x + y) * 0.7,
        };
        if (coord / self.period + self.phase).fract() < 0.5 {
            self.stripe
        } else {
            self.base
        }
    }

    fn flat(&self, h: usize, w: usize) -> Image {
        let rect = Rect::canvas(h, w);
        let mut im = Image::filled(3, h, w, CANVAS);
        let n = h * w;
        for y in 0..h {
            for x in 0..w {
                if rect.contains(x as f64, y as f64) {
                    let v = self.value(&rect, x as f64, y as f64);
                    for (c, val) in v.iter().enumerate() {
                        im.data[c * n + y * w + x] = *val;
                    }
                }
            }
        }
        im
    }
}

#[derive(Clone, Debug)]
struct Body {
    cx: f64,
    torso_top: f64,
    torso_bottom: f64,
    half_width: f64,
    head_radius: f64,
    hands: [(f64, f64); 2],
    arm_radius: f64,
    leg_offset: f64,
    leg_half_width: f64,
    skin: Rgb,
    trousers: Rgb,
    /// Amplitudes of the garment bulge and sag, in pixels.
    bulge: f64,
    sag: f64,
}

impl Body {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let cx = wf * (0.5 + rng.gen_range(-0.06..0.06));
        let torso_top = hf * (0.28 + rng.gen_range(-0.03..0.03));
        let torso_bottom = hf * (0.66 + rng.gen_range(-0.03..0.03));
        let half_width = wf * (0.22 + rng.gen_range(-0.04..0.04));
        let hands = [-1.0, 1.0].map(|side: f64| {
            (
                cx + side * (half_width + rng.gen_range(1.0..5.0)),
                torso_bottom + rng.gen_range(-5.0..3.0),
            )
        });
        let skin = [
            rng.gen_range(0.3f32..0.8),
            rng.gen_range(0.0f32..0.4),
            rng.gen_range(-0.3f32..0.1),
        ];
        Body {
            cx,
            torso_top,
            torso_bottom,
            half_width,
            head_radius: hf * rng.gen_range(0.07..0.09),
            hands,
            arm_radius: wf * rng.gen_range(0.04..0.055),
            leg_offset: wf * rng.gen_range(0.08..0.11),
            leg_half_width: wf * rng.gen_range(0.06..0.08),
            skin,
            trousers: colour(rng),
            bulge: rng.gen_range(-1.5..1.5),
            sag: rng.gen_range(-1.5..1.5),
        }
    }

    fn head_centre(&self) -> (f64, f64) {
        (self.cx, self.torso_top - self.head_radius + 1.0)
    }

    fn shoulders(&self) -> [(f64, f64); 2] {
        [-1.0, 1.0].map(|s| (self.cx + s * self.half_width, self.torso_top + 1.5))
    }

    fn hips(&self) -> [(f64, f64); 2] {
        [-1.0, 1.0].map(|s| (self.cx + s * 0.9 * self.half_width, self.torso_bottom))
    }

    fn keypoints(&self) -> [(f64, f64); 6] {
        let [ls, rs] = self.shoulders();
        let [lh, rh] = self.hips();
        [self.head_centre(), (self.cx, self.torso_top), ls, rs, lh, rh]
    }

    fn in_head(&self, x: f64, y: f64) -> bool {
        let (hx, hy) = self.head_centre();
        (x - hx).powi(2) + (y - hy).powi(2) <= self.head_radius.powi(2)
    }

    fn in_arm(&self, x: f64, y: f64) -> bool {
        self.shoulders()
            .iter()
            .zip(&self.hands)
            .any(|(&a, &b)| segment_distance((x, y), a, b) <= self.arm_radius)
    }

    fn in_leg(&self, x: f64, y: f64) -> bool {
        y >= self.torso_bottom - 2.0
            && [-1.0, 1.0]
                .iter()
                .any(|s| (x - (self.cx + s * self.leg_offset)).abs() <= self.leg_half_width)
    }

    /// Flat-canvas pixel location that lands on person pixel `(x, y)`.
    fn garment_source(&self, rect: &Rect, x: f64, y: f64) -> (f64, f64) {
        let s = (x - (self.cx - self.half_width)) / (2.0 * self.half_width);
        let t = (y - self.torso_top) / (self.torso_bottom - self.torso_top);
        (
            rect.x0 + s * (rect.x1 - rect.x0) + self.bulge * (PI * t).sin() * (2.0 * s - 1.0),
            rect.y0 + t * (rect.y1 - rect.y0) + self.sag * (PI * s).sin(),
        )
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

/// Per-pixel layer of the composed person image.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Layer {
    Background,
    Head,
    Garment,
    Arm,
    Leg,
}

fn render(seed: u64, config: &SynthConfig) -> TryOnSample {
    let (h, w) = (config.height, config.width);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Body::random(&mut rng, h, w);
    let garment = Garment::random(&mut rng);
    let mut alt = Garment::random(&mut rng);
    while distance(alt.base, garment.base) < 0.6 {
        alt = Garment::random(&mut rng);
    }
    let rect = Rect::canvas(h, w);
    let clothes = garment.flat(h, w);
    let alt_clothes = alt.flat(h, w);

    // Ground-truth flow, stored at 32-bit so that sampling below matches
    // what the tensor engine computes for the same field.
    let mut flow = Image::filled(2, h, w, 0.0);
    let (hx, hy) = (half_extent::<f32>(w), half_extent::<f32>(h));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = body.garment_source(&rect, x as f64, y as f64);
            flow.data[y * w + x] = ((sx - x as f64) / hx as f64) as f32;
            flow.data[n + y * w + x] = ((sy - y as f64) / hy as f64) as f32;
        }
    }

    let mut layers = vec![Layer::Background; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (xf, yf) = (x as f64, y as f64);
            let px = x as f32 + flow.data[i] * hx;
            let py = y as f32 + flow.data[n + i] * hy;
            layers[i] = if body.in_head(xf, yf) {
                Layer::Head
            } else if body.in_arm(xf, yf) {
                Layer::Arm
            } else if rect.contains(px as f64, py as f64) {
                Layer::Garment
            } else if body.in_leg(xf, yf) {
                Layer::Leg
            } else {
                Layer::Background
            };
        }
    }

    let compose = |flat: &Image| {
        let mut im = Image::filled(3, h, w, 0.0);
        for i in 0..n {
            let (x, y) = (i % w, i / w);
            for c in 0..3 {
                im.data[c * n + i] = match layers[i] {
                    Layer::Background => BACKGROUND[c],
                    Layer::Head | Layer::Arm => body.skin[c],
                    Layer::Leg => body.trousers[c],
                    Layer::Garment => {
                        let px = x as f32 + flow.data[i] * hx;
                        let py = y as f32 + flow.data[n + i] * hy;
                        bilinear_at(flat.plane(c), h, w, px, py)
                    }
                };
            }
        }
        im
    };
    let person = compose(&clothes);
    let alt_person = compose(&alt_clothes);

    let mut representation = Image::filled(REPRESENTATION_CHANNELS, h, w, 0.0);
    let mut garment_mask = Image::filled(1, h, w, 0.0);
    for (i, layer) in layers.iter().enumerate() {
        let seg = match layer {
            Layer::Background => None,
            Layer::Head => Some(0),
            Layer::Garment => Some(1),
            Layer::Arm => Some(2),
            Layer::Leg => Some(3),
        };
        if let Some(s) = seg {
            representation.data[(SEGMENTATION_CHANNELS.start + s) * n + i] = 1.0;
        }
        if matches!(layer, Layer::Head | Layer::Leg) {
            representation.data[PRESERVED_CHANNEL * n + i] = 1.0;
        }
        if *layer == Layer::Garment {
            garment_mask.data[i] = 1.0;
        }
    }
    let sigma = 0.045 * w as f64;
    for (k, &(kx, ky)) in body.keypoints().iter().enumerate() {
        let plane = representation.plane_mut(POSE_CHANNELS.start + k);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - kx).powi(2) + (y as f64 - ky).powi(2);
                plane[y * w + x] = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
            }
        }
    }
    let true_segmentation = representation.select(SEGMENTATION_CHANNELS);

    let corrupted = rng.gen_bool(config.corruption);
    if corrupted {
        corrupt_segmentation(&mut representation, &mut rng);
    }

    TryOnSample {
        seed,
        clothes,
        person,
        representation,
        alt_clothes,
        alt_person,
        flow,
        garment_mask,
        true_segmentation,
        corrupted,
    }
}

/// Shifts every segmentation channel by one random offset of 3 to 6 pixels
/// per axis and erodes the garment channel, mimicking a failed parser.
fn corrupt_segmentation(rep: &mut Image, rng: &mut ChaCha8Rng) {
    let (h, w) = (rep.height, rep.width);
    let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1 } else { -1 };
    let dy = sign(rng) * rng.gen_range(3..=6) as isize;
    let dx = sign(rng) * rng.gen_range(3..=6) as isize;
    let erosion = rng.gen_range(1..=2);
    for c in SEGMENTATION_CHANNELS {
        let src = rep.plane(c).to_vec();
        let dst = rep.plane_mut(c);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y - dy, x - dx);
                let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                dst[(y * w as isize + x) as usize] = if inside {
                    src[(sy * w as isize + sx) as usize]
                } else {
                    0.0
                };
            }
        }
    }
    let garment = SEGMENTATION_CHANNELS.start + 1;
    for _ in 0..erosion {
        let src = rep.plane(garment).to_vec();
        let dst = rep.plane_mut(garment);
        for y in 0..h {
            for x in 0..w {
                let keep = src[y * w + x] > 0.0
                    && (y > 0 && src[(y - 1) * w + x] > 0.0)
                    && (y + 1 < h && src[(y + 1) * w + x] > 0.0)
                    && (x > 0 && src[y * w + x - 1] > 0.0)
                    && (x + 1 < w && src[y * w + x + 1] > 0.0);
                dst[y * w + x] = if keep { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Smooth random texture `(3, h, w)` and a copy whose pixel `(x, y)` shows
/// the texture at `(x + dx, y + dy)`, so the constant flow `(dx, dy)` pixels
/// maps the first onto the second.
pub fn translated_texture_pair(seed: u64, h: usize, w: usize, dx: f64, dy: f64) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[(f64, f64, f64, f64); 3]> = (0..4)
        .map(|_| {
            [0; 3].map(|_| {
                let period = rng.gen_range(6.0..14.0);
                let angle: f64 = rng.gen_range(0.0..PI);
                let k = 2.0 * PI / period;
                (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.1..0.25))
            })
        })
        .collect();
    let texture = |x: f64, y: f64, c: usize| -> f32 {
        waves
            .iter()
            .map(|wv| {
                let (kx, ky, phase, amp) = wv[c];
                amp * (kx * x + ky * y + phase).sin()
            })
            .sum::<f64>() as f32
    };
    let mut a = Image::filled(3, h, w, 0.0);
    let mut b = Image::filled(3, h, w, 0.0);
    let n = h * w;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                a.data[c * n + y * w + x] = texture(xf, yf, c);
                b.data[c * n + y * w + x] = texture(xf + dx, yf + dy, c);
            }
        }
    }
    (a, b)
}
