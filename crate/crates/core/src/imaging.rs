//! Float image tensors and the pixel-level operations every attack builds on:
//! masked alpha blending of a trigger pattern, face-region extraction, and
//! paste-back.
//!
//! Values live in `[0, 1]`. Per-stage normalization schemes (`[-1, 1]`,
//! dataset mean/std) are the concern of the stage models, not of this module.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const CHANNELS: usize = 3;

/// 3-channel float image in CHW layout, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// All-zero (black) image.
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    /// Constant-color image.
    pub fn filled(height: usize, width: usize, color: [f32; CHANNELS]) -> Self {
        let mut img = ImageTensor::zeros(height, width);
        for c in 0..CHANNELS {
            let plane = &mut img.data[c * height * width..(c + 1) * height * width];
            plane.fill(color[c]);
        }
        img
    }

    /// Builds an image from per-pixel values; `f(c, y, x)` must return a
    /// value in `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut img = ImageTensor::zeros(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    img.set(c, y, x, f(c, y, x));
                }
            }
        }
        img
    }

    /// Wraps raw CHW data, validating length and value range.
    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "raw data length {} does not match 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        debug_assert!((0.0..=1.0).contains(&value), "pixel value {value} outside [0, 1]");
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    /// Full-extent bounding box of the image.
    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::new(0.0, 0.0, self.width as f64, self.height as f64)
            .expect("image dimensions are positive")
    }

    /// Bilinearly samples channel `c` at continuous image coordinates, where
    /// pixel `(y, x)` occupies the unit square with center
    /// `(x + 0.5, y + 0.5)`. Coordinates are clamped to the border.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f32 {
        let u = x - 0.5;
        let v = y - 0.5;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = (u - x0) as f32;
        let fy = (v - y0) as f32;

        let clamp_x = |i: f64| (i.max(0.0) as usize).min(self.width - 1);
        let clamp_y = |i: f64| (i.max(0.0) as usize).min(self.height - 1);
        let xa = clamp_x(x0);
        let xb = clamp_x(x0 + 1.0);
        let ya = clamp_y(y0);
        let yb = clamp_y(y0 + 1.0);

        let p00 = self.get(c, ya, xa);
        let p10 = self.get(c, ya, xb);
        let p01 = self.get(c, yb, xa);
        let p11 = self.get(c, yb, xb);
        (1.0 - fx) * (1.0 - fy) * p00
            + fx * (1.0 - fy) * p10
            + (1.0 - fx) * fy * p01
            + fx * fy * p11
    }

    /// Mean over channels at a pixel, used where a scalar intensity is enough.
    pub fn luminance(&self, y: usize, x: usize) -> f32 {
        (self.get(0, y, x) + self.get(1, y, x) + self.get(2, y, x)) / CHANNELS as f32
    }

    /// Reads an 8-bit RGB PNG; conversion to float is `v / 255` exactly.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
        let dynamic = reader.decode().map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = dynamic.to_rgb8();
        let (width, height) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = ImageTensor::zeros(height, width);
        for (x, y, pixel) in rgb.enumerate_pixels() {
            for c in 0..CHANNELS {
                img.set(c, y as usize, x as usize, pixel.0[c] as f32 / 255.0);
            }
        }
        Ok(img)
    }

    /// Writes an 8-bit RGB PNG; conversion back is `round(v * 255)` clamped.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut rgb = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, pixel) in rgb.enumerate_pixels_mut() {
            for c in 0..CHANNELS {
                let v = self.get(c, y as usize, x as usize);
                pixel.0[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        rgb.save(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
    }
}

/// Boolean pixel mask marking where a trigger lands. All-true masks are
/// diffuse triggers; anything else is a patch/sparse trigger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn all_false(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn all_true(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_diffuse(&self) -> bool {
        self.data.iter().all(|v| *v)
    }
}

/// Masked alpha blend of a trigger pattern into an image:
/// outside the mask pixels pass through untouched, inside the mask the
/// output is `alpha * pattern + (1 - alpha) * image`, clamped to `[0, 1]`
/// as a safety net (in-range inputs cannot leave the range).
///
/// The input image is not modified.
pub fn inject_trigger(
    image: &ImageTensor,
    pattern: &ImageTensor,
    mask: &Mask,
    alpha: f64,
) -> Result<ImageTensor> {
    if pattern.height() != image.height() || pattern.width() != image.width() {
        return Err(Error::Shape(format!(
            "pattern {}x{} does not match image {}x{}",
            pattern.height(),
            pattern.width(),
            image.height(),
            image.width()
        )));
    }
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }

    inject_trigger_at(image, pattern, mask, alpha, 0, 0)
}

/// Variant of [`inject_trigger`] whose pattern and mask may be smaller than
/// the image, blended with their top-left corner at `(x0, y0)`.
pub fn inject_trigger_at(
    image: &ImageTensor,
    pattern: &ImageTensor,
    mask: &Mask,
    alpha: f64,
    x0: usize,
    y0: usize,
) -> Result<ImageTensor> {
    if pattern.height() != mask.height() || pattern.width() != mask.width() {
        return Err(Error::Shape(format!(
            "pattern {}x{} does not match mask {}x{}",
            pattern.height(),
            pattern.width(),
            mask.height(),
            mask.width()
        )));
    }
    if y0 + mask.height() > image.height() || x0 + mask.width() > image.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} at ({x0}, {y0}) exceeds image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }

    let a = alpha as f32;
    let mut out = image.clone();
    for my in 0..mask.height() {
        for mx in 0..mask.width() {
            if !mask.get(my, mx) {
                continue;
            }
            let (y, x) = (y0 + my, x0 + mx);
            for c in 0..CHANNELS {
                let blended = a * pattern.get(c, my, mx) + (1.0 - a) * image.get(c, y, x);
                out.set(c, y, x, blended.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Clips `bbox` to the image bounds, rejecting boxes that end up with zero
/// area.
fn clip_box(image: &ImageTensor, bbox: &BoundingBox) -> Result<BoundingBox> {
    let x_min = bbox.x_min().max(0.0);
    let y_min = bbox.y_min().max(0.0);
    let x_max = bbox.x_max().min(image.width() as f64);
    let y_max = bbox.y_max().min(image.height() as f64);
    if x_max <= x_min || y_max <= y_min {
        return Err(Error::Domain(format!(
            "box {bbox:?} has no overlap with {}x{} image",
            image.height(),
            image.width()
        )));
    }
    BoundingBox::new(x_min, y_min, x_max, y_max)
}

/// Extracts the (clipped) box region as a square `out_size` crop using
/// bilinear resampling.
pub fn extract_face(image: &ImageTensor, bbox: &BoundingBox, out_size: usize) -> Result<ImageTensor> {
    if out_size == 0 {
        return Err(Error::Domain("output size must be positive".into()));
    }
    let clipped = clip_box(image, bbox)?;
    let (bw, bh) = (clipped.width(), clipped.height());

    let mut out = ImageTensor::zeros(out_size, out_size);
    for y in 0..out_size {
        let sy = clipped.y_min() + (y as f64 + 0.5) * bh / out_size as f64;
        for x in 0..out_size {
            let sx = clipped.x_min() + (x as f64 + 0.5) * bw / out_size as f64;
            for c in 0..CHANNELS {
                out.set(c, y, x, image.sample_bilinear(c, sx, sy));
            }
        }
    }
    Ok(out)
}

/// Resamples `face` to the (clipped) box dimensions and overwrites the box
/// region; pixels outside the box are unchanged.
pub fn paste_face(image: &ImageTensor, face: &ImageTensor, bbox: &BoundingBox) -> Result<ImageTensor> {
    let clipped = clip_box(image, bbox)?;
    let (bw, bh) = (clipped.width(), clipped.height());

    // Target pixels are those whose centers fall inside the clipped box.
    let x_start = (clipped.x_min() - 0.5).ceil().max(0.0) as usize;
    let y_start = (clipped.y_min() - 0.5).ceil().max(0.0) as usize;
    let x_end = ((clipped.x_max() - 0.5).ceil() as usize).min(image.width());
    let y_end = ((clipped.y_max() - 0.5).ceil() as usize).min(image.height());

    let mut out = image.clone();
    for y in y_start..y_end {
        let fy = (y as f64 + 0.5 - clipped.y_min()) * face.height() as f64 / bh;
        for x in x_start..x_end {
            let fx = (x as f64 + 0.5 - clipped.x_min()) * face.width() as f64 / bw;
            for c in 0..CHANNELS {
                out.set(c, y, x, face.sample_bilinear(c, fx, fy));
            }
        }
    }
    Ok(out)
}
