//! Planar images in `[-1, 1]` and their 8-bit PPM (P6) / PNG encodings.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::scalar::Real;
use crate::tensor::Tensor;

/// Channel-major image (`C x H x W`), values nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Image(format!(
                "{} values do not fill a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// `(1, C, H, W)` constant tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        batch(&[self]).expect("single image batch")
    }

    /// Extracts sample `index` of an `(N, C, H, W)` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4("Image::from_tensor")?;
        if index >= n {
            return Err(Error::invalid(
                "Image::from_tensor",
                format!("sample {index} out of a batch of {n}"),
            ));
        }
        let per = c * h * w;
        let data = t.data()[index * per..(index + 1) * per]
            .iter()
            .map(|v| v.to_f64() as f32)
            .collect();
        Image::new(c, h, w, data)
    }

    /// Channel-wise concatenation.
    pub fn stack(parts: &[&Image]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Image("cannot stack zero images".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::Image(format!(
                    "cannot stack {}x{} with {}x{}",
                    first.height, first.width, p.height, p.width
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Image::new(channels, first.height, first.width, data)
    }

    /// Channels `range` as a new image.
    pub fn select(&self, range: std::ops::Range<usize>) -> Self {
        let n = self.height * self.width;
        Image {
            channels: range.len(),
            height: self.height,
            width: self.width,
            data: self.data[range.start * n..range.end * n].to_vec(),
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        s / self.data.len().max(1) as f64
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::Image(format!(
                "only 3-channel images can be encoded, got {}",
                self.channels
            )));
        }
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(to_u8(self.data[c * n + i]));
            }
        }
        Ok(out)
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let n = height * width;
        if rgb.len() != 3 * n {
            return Err(Error::Image(format!(
                "{} bytes do not fill a {height}x{width} RGB image",
                rgb.len()
            )));
        }
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = from_u8(rgb[3 * i + c]);
            }
        }
        Image::new(3, height, width, data)
    }
}

/// Stacks equally sized images into an `(N, C, H, W)` constant tensor.
pub fn batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Image("cannot batch zero images".into()))?;
    let dims = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        if (im.channels, im.height, im.width) != dims {
            return Err(Error::Image(format!(
                "cannot batch {:?} with {:?}",
                dims,
                (im.channels, im.height, im.width)
            )));
        }
        data.extend(im.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(&[images.len(), dims.0, dims.1, dims.2], data)
}

pub fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_rgb8()?);
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |what: &str| Error::Image(format!("malformed PPM: {what}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(bad("raster is truncated"));
    }
    Image::from_rgb8(height, width, &bytes[pos..pos + need])
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let rgb = image.to_rgb8()?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(
            BufWriter::new(&mut out),
            image.width as u32,
            image.height as u32,
        );
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Image(format!("png encode: {e}")))?;
        w.write_image_data(&rgb)
            .map_err(|e| Error::Image(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let err = |e: png::DecodingError| Error::Image(format!("png decode: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Image(format!("unsupported png color type {other:?}"))),
    };
    Image::from_rgb8(h, w, &rgb)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a PNG or P6 PPM file, picking the decoder from the file signature.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    }
    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Writes PNG when the extension is `.png`, PPM otherwise.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let bytes = if is_png(path) {
        encode_png(image)?
    } else {
        encode_ppm(image)?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
