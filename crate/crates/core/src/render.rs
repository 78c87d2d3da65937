//! Image I/O (binary PPM/PGM), heatmap normalization and resizing, and
//! colormap overlays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Normalization, Resolution};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// `[3, H, W]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("consistent dims")
    }

    /// Inverse of [`ImageRgb::to_tensor`], clamping to `[0, 1]` and rounding.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let pixels = (0..plane)
            .map(|i| std::array::from_fn(|ch| to_byte(t.data()[ch * plane + i] * 255.0)))
            .collect();
        Self::new(w, h, pixels)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let (width, height, body) = parse_netpbm_header(bytes, b"P6", "P6")?;
        let needed = width * height * 3;
        if body.len() < needed {
            return Err(Error::TruncatedPixelData {
                expected: needed,
                found: body.len(),
            });
        }
        let pixels = body[..needed].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(width, height, pixels)
    }
}

/// Horizontal concatenation of equally tall images.
pub fn hstack(images: &[ImageRgb]) -> Result<ImageRgb> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("nothing to stack".into()));
    };
    let height = first.height;
    if images.iter().any(|im| im.height != height) {
        return Err(Error::Shape("stacked images differ in height".into()));
    }
    let width: usize = images.iter().map(|im| im.width).sum();
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for im in images {
            pixels.extend_from_slice(&im.pixels[y * im.width..(y + 1) * im.width]);
        }
    }
    ImageRgb::new(width, height, pixels)
}

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGray {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageGray {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Renders a `[0, 1]` heatmap as `round(255·v)`.
    pub fn from_heatmap(h: &Heatmap) -> Self {
        Self {
            width: h.width(),
            height: h.height(),
            pixels: h.values().iter().map(|&v| to_byte(v * 255.0)).collect(),
        }
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let (width, height, body) = parse_netpbm_header(bytes, b"P5", "P5")?;
        let needed = width * height;
        if body.len() < needed {
            return Err(Error::TruncatedPixelData {
                expected: needed,
                found: body.len(),
            });
        }
        Self::new(width, height, body[..needed].to_vec())
    }
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Parses `MAGIC <ws> width <ws> height <ws> maxval <one ws byte>` and returns the body.
fn parse_netpbm_header<'a>(bytes: &'a [u8], magic: &[u8], expected: &'static str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::WrongImageMagic { expected });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        let start_ws = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start_ws {
            return Err(Error::MalformedImageHeader(format!("expected whitespace before field {}", i + 1)));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = digits
            .parse()
            .map_err(|_| Error::MalformedImageHeader(format!("field {} is not a number", i + 1)))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedImageHeader("missing whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::MalformedImageHeader(format!("empty image {width}x{height}")));
    }
    Ok((width as usize, height as usize, &bytes[pos + 1..]))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    ImageRgb::decode_ppm(&bytes).map_err(|e| e.at(path))
}

pub fn write_ppm(image: &ImageRgb, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image.encode_ppm()).map_err(|e| Error::from(e).at(path))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImageGray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    ImageGray::decode_pgm(&bytes).map_err(|e| e.at(path))
}

pub fn write_pgm(image: &ImageGray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image.encode_pgm()).map_err(|e| Error::from(e).at(path))
}

/// `(h − min)/(max − min)`; constant maps become all zeros.
pub fn normalize_minmax(h: &Heatmap) -> Heatmap {
    let (min, max) = (h.min(), h.max());
    let range = max - min;
    let values = if range > 0.0 {
        h.values().iter().map(|&v| ((v - min) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; h.values().len()]
    };
    Heatmap::new(h.height(), h.width(), values, h.resolution())
        .expect("normalized values are valid")
        .with_state(h.resolution(), Normalization::MinMax)
}

/// Half-pixel-centred bilinear interpolation with edge clamping.
pub fn bilinear_resize(h: &Heatmap, out_h: usize, out_w: usize) -> Result<Heatmap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("cannot resize to {out_h}x{out_w}")));
    }
    let (in_h, in_w) = h.dims();
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|o| sample_coords(o, in_h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|o| sample_coords(o, in_w, out_w)).collect();
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, ty) in &rows {
        for &(c0, c1, tx) in &cols {
            let top = lerp(h.get(r0, c0), h.get(r0, c1), tx);
            let bottom = lerp(h.get(r1, c0), h.get(r1, c1), tx);
            values.push(lerp(top, bottom, ty));
        }
    }
    Ok(Heatmap::new(out_h, out_w, values, h.resolution())?.with_state(h.resolution(), h.normalization()))
}

/// Source neighbours and blend factor for output index `o`.
fn sample_coords(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Upsamples to `(height, width)` and tags the result as input resolution.
pub fn to_input_resolution(h: &Heatmap, height: usize, width: usize) -> Result<Heatmap> {
    let resized = if h.dims() == (height, width) {
        h.clone()
    } else {
        bilinear_resize(h, height, width)?
    };
    Ok(resized.with_state(Resolution::Input, h.normalization()))
}

/// Piecewise-linear colormap over evenly spaced anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct Colormap {
    pub name: &'static str,
    pub anchors: Vec<[f64; 3]>,
}

impl Default for Colormap {
    /// Blue → cyan → green → yellow → red at 0, 0.25, 0.5, 0.75, 1.
    fn default() -> Self {
        Self {
            name: "jet-like",
            anchors: vec![
                [0.0, 0.0, 255.0],
                [0.0, 255.0, 255.0],
                [0.0, 255.0, 0.0],
                [255.0, 255.0, 0.0],
                [255.0, 0.0, 0.0],
            ],
        }
    }
}

impl Colormap {
    /// RGB value (unrounded, 0–255) for `v`, clamped to `[0, 1]`.
    pub fn lookup(&self, v: f64) -> [f64; 3] {
        let segments = self.anchors.len() - 1;
        let pos = v.clamp(0.0, 1.0) * segments as f64;
        let i = (pos.floor() as usize).min(segments - 1);
        let t = pos - i as f64;
        let (a, b) = (self.anchors[i], self.anchors[i + 1]);
        std::array::from_fn(|c| a[c] + t * (b[c] - a[c]))
    }
}

/// `(1 − blend)·image + blend·colormap(h)`, rounded per channel.
pub fn overlay(image: &ImageRgb, h: &Heatmap, blend: f64, cmap: &Colormap) -> Result<ImageRgb> {
    if h.dims() != (image.height, image.width) {
        return Err(Error::Shape(format!(
            "heatmap {:?} does not match image {}x{}",
            h.dims(),
            image.height,
            image.width
        )));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::Config(format!("blend {blend} outside [0, 1]")));
    }
    let pixels = image
        .pixels
        .iter()
        .zip(h.values())
        .map(|(px, &v)| {
            let color = cmap.lookup(v);
            std::array::from_fn(|c| to_byte((1.0 - blend) * px[c] as f64 + blend * color[c]))
        })
        .collect();
    ImageRgb::new(image.width, image.height, pixels)
}
