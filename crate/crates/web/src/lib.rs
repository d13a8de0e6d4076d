//! WebAssembly bindings for a single-page demo. Everything runs in f64 on
//! the CPU inside the page; the library does the work and the page only
//! blits RGBA buffers onto canvases.

use flowdistill::afwm::FlowCascade;
use flowdistill::image_io::{to_u8, Image};
use flowdistill::losses::{second_order_smooth, CHARBONNIER_ALPHA, CHARBONNIER_EPS};
use flowdistill::synth::{self, SynthConfig, TryOnSample, SEGMENTATION_CHANNELS};
use flowdistill::{FlowField, Tensor};
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, flowdistill::Error>;

fn js(e: flowdistill::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Interleaved RGBA bytes of a 3-channel image in `[-1, 1]`.
pub fn rgba(image: &Image) -> Vec<u8> {
    let n = image.height * image.width;
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(to_u8(image.data[c * n + i]));
        }
        out.push(255);
    }
    out
}

const PALETTE: [[f32; 3]; 4] = [
    [0.9, 0.6, 0.3],
    [-0.8, 0.7, -0.2],
    [0.3, -0.7, 0.9],
    [-0.6, -0.6, 0.8],
];

fn parsing(sample: &TryOnSample) -> Image {
    let (h, w) = (sample.person.height, sample.person.width);
    let mut img = Image::filled(3, h, w, -1.0);
    for (class, ch) in SEGMENTATION_CHANNELS.enumerate() {
        for (i, &m) in sample.representation.plane(ch).iter().enumerate() {
            if m > 0.5 {
                for c in 0..3 {
                    img.data[c * h * w + i] = PALETTE[class][c];
                }
            }
        }
    }
    img
}

/// Flow as colour: hue-free encoding with red for horizontal and green for
/// vertical offset, scaled so that `max_abs` saturates.
fn flow_image(flow: &[f32], h: usize, w: usize) -> Image {
    let n = h * w;
    let max_abs = flow.iter().fold(1e-6f32, |m, v| m.max(v.abs()));
    let mut img = Image::filled(3, h, w, 0.0);
    for i in 0..n {
        img.data[i] = flow[i] / max_abs;
        img.data[n + i] = flow[n + i] / max_abs;
    }
    img
}

/// Garment placed by an affine map plus a horizontal bulge, in pixels:
/// each output pixel samples the garment at
/// `center + scale * R(angle) * (p - center) + (tx, ty) + bulge * sin(pi * v) * u`.
pub fn parametric_flow(h: usize, w: usize, p: &WarpParams) -> FlowField<f64> {
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let (s, c) = p.angle.to_radians().sin_cos();
    let n = h * w;
    let mut v = vec![0.0; 2 * n];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let v_norm = y as f64 / (h - 1) as f64;
            let bulge = p.bulge * (std::f64::consts::PI * v_norm).sin() * dx / cx.max(1.0);
            let sx = cx + p.scale * (c * dx - s * dy) + p.tx + bulge;
            let sy = cy + p.scale * (s * dx + c * dy) + p.ty;
            v[y * w + x] = (sx - x as f64) / cx;
            v[n + y * w + x] = (sy - y as f64) / cy;
        }
    }
    FlowField::new(Tensor::new(&[1, 2, h, w], v).expect("sized")).expect("two channels")
}

#[derive(Clone, Copy, Debug)]
pub struct WarpParams {
    pub tx: f64,
    pub ty: f64,
    pub angle: f64,
    pub scale: f64,
    pub bulge: f64,
}

/// Warped garment and its second-order smoothness.
pub fn warp_with_smoothness(clothes: &Image, p: &WarpParams) -> Result<(Image, f64)> {
    let flow = parametric_flow(clothes.height, clothes.width, p);
    let warped = clothes.to_tensor::<f64>().grid_sample(&flow)?;
    let smooth = second_order_smooth(&FlowCascade { flows: vec![flow] })?.item();
    Ok((Image::from_tensor(&warped, 0)?, smooth))
}

/// Smoothness of a perfectly co-linear field.
#[wasm_bindgen]
pub fn smoothness_floor() -> f64 {
    (CHARBONNIER_EPS * CHARBONNIER_EPS).powf(CHARBONNIER_ALPHA)
}

#[wasm_bindgen]
pub struct SampleDemo {
    sample: TryOnSample,
}

#[wasm_bindgen]
impl SampleDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, corruption: f64, height: usize, width: usize) -> std::result::Result<SampleDemo, JsError> {
        let cfg = SynthConfig {
            height,
            width,
            corruption,
        };
        cfg.validate().map_err(js)?;
        let sample = synth::synth_sample(seed as u64, &cfg).map_err(js)?;
        Ok(SampleDemo { sample })
    }

    pub fn width(&self) -> usize {
        self.sample.person.width
    }

    pub fn height(&self) -> usize {
        self.sample.person.height
    }

    pub fn corrupted(&self) -> bool {
        self.sample.corrupted
    }

    /// One of `person`, `clothes`, `alt_person`, `alt_clothes`, `parsing`,
    /// `preserved`, `flow`.
    pub fn layer(&self, name: &str) -> std::result::Result<Vec<u8>, JsError> {
        let s = &self.sample;
        let image = match name {
            "person" => s.person.clone(),
            "clothes" => s.clothes.clone(),
            "alt_person" => s.alt_person.clone(),
            "alt_clothes" => s.alt_clothes.clone(),
            "parsing" => parsing(s),
            "preserved" => s.preserved_region(),
            "flow" => flow_image(&s.flow.data, s.flow.height, s.flow.width),
            other => return Err(JsError::new(&format!("unknown layer `{other}`"))),
        };
        Ok(rgba(&image))
    }

    /// Warps this sample's garment by the parametric field.
    pub fn warp(&self, tx: f64, ty: f64, angle: f64, scale: f64, bulge: f64) -> std::result::Result<WarpView, JsError> {
        let p = WarpParams {
            tx,
            ty,
            angle,
            scale,
            bulge,
        };
        let (image, smoothness) = warp_with_smoothness(&self.sample.clothes, &p).map_err(js)?;
        Ok(WarpView {
            rgba: rgba(&image),
            smoothness,
        })
    }
}

#[wasm_bindgen]
pub struct WarpView {
    rgba: Vec<u8>,
    smoothness: f64,
}

#[wasm_bindgen]
impl WarpView {
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }
}

/// Channel-averaged cost window of pixel `(x, y)` of `a` against `b`, row
/// major over displacements `(-r..=r)^2`.
pub fn cost_window(a: &Image, b: &Image, x: usize, y: usize, radius: usize) -> Result<Vec<f64>> {
    let cost = a.to_tensor::<f64>().correlation(&b.to_tensor(), radius)?;
    let (h, w) = (a.height, a.width);
    let k = 2 * radius + 1;
    let data = cost.data();
    Ok((0..k * k).map(|d| data[(d * h + y) * w + x]).collect())
}

/// Displacement with the highest correlation, `(dx, dy)`.
pub fn best_displacement(window: &[f64], radius: usize) -> (i32, i32) {
    let k = 2 * radius + 1;
    let (best, _) = window
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    ((best % k) as i32 - radius as i32, (best / k) as i32 - radius as i32)
}

#[wasm_bindgen]
pub struct CorrelationDemo {
    source: Image,
    target: Image,
}

#[wasm_bindgen]
impl CorrelationDemo {
    /// A texture and a copy translated by `(dx, dy)` pixels.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, dx: f64, dy: f64) -> CorrelationDemo {
        let (a, b) = synth::translated_texture_pair(seed as u64, size, size, dx, dy);
        // Zero-mean textures make the dot product peak at the match.
        CorrelationDemo { source: b, target: a }
    }

    pub fn size(&self) -> usize {
        self.source.width
    }

    pub fn source(&self) -> Vec<u8> {
        rgba(&self.source)
    }

    pub fn target(&self) -> Vec<u8> {
        rgba(&self.target)
    }

    /// Cost window at `(x, y)` of the translated image.
    pub fn window(&self, x: usize, y: usize, radius: usize) -> std::result::Result<Vec<f64>, JsError> {
        if x >= self.size() || y >= self.size() {
            return Err(JsError::new("pixel outside the image"));
        }
        cost_window(&self.source, &self.target, x, y, radius).map_err(js)
    }

    /// `[dx, dy]` of the strongest match at `(x, y)`.
    pub fn best(&self, x: usize, y: usize, radius: usize) -> std::result::Result<Vec<i32>, JsError> {
        let w = self.window(x, y, radius)?;
        let (dx, dy) = best_displacement(&w, radius);
        Ok(vec![dx, dy])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: WarpParams = WarpParams {
        tx: 0.0,
        ty: 0.0,
        angle: 0.0,
        scale: 1.0,
        bulge: 0.0,
    };

    #[test]
    fn identity_parameters_give_zero_flow_and_unchanged_garment() {
        let cfg = SynthConfig::default();
        let s = synth::synth_sample(3, &cfg).unwrap();
        let flow = parametric_flow(cfg.height, cfg.width, &IDENTITY);
        assert!(flow.tensor().to_vec().iter().all(|v| v.abs() < 1e-12));
        let (img, smooth) = warp_with_smoothness(&s.clothes, &IDENTITY).unwrap();
        assert!(img.mean_abs_diff(&s.clothes) < 1e-6);
        assert!((smooth - smoothness_floor()).abs() < 1e-12);
    }

    #[test]
    fn affine_warps_stay_at_the_floor_and_bulge_does_not() {
        let cfg = SynthConfig::default();
        let s = synth::synth_sample(3, &cfg).unwrap();
        let affine = WarpParams {
            tx: 3.0,
            ty: -2.0,
            angle: 12.0,
            scale: 0.8,
            bulge: 0.0,
        };
        let (_, smooth) = warp_with_smoothness(&s.clothes, &affine).unwrap();
        assert!((smooth - smoothness_floor()).abs() < 1e-9);
        let (_, bent) = warp_with_smoothness(&s.clothes, &WarpParams { bulge: 4.0, ..affine }).unwrap();
        assert!(bent > smooth + 1e-6, "{bent} vs {smooth}");
    }

    #[test]
    fn correlation_peaks_at_the_translation() {
        let demo = CorrelationDemo::new(5, 24, 2.0, -1.0);
        let window = cost_window(&demo.source, &demo.target, 12, 12, 3).unwrap();
        assert_eq!(window.len(), 49);
        assert_eq!(best_displacement(&window, 3), (2, -1));
    }

    #[test]
    fn rgba_layout() {
        let img = Image::new(3, 1, 2, vec![-1.0, 1.0, 0.0, 0.0, 1.0, -1.0]).unwrap();
        assert_eq!(rgba(&img), vec![0, 128, 255, 255, 255, 128, 0, 255]);
    }
}
