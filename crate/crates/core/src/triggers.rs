//! Trigger pattern generators and placement masks.
//!
//! Patterns are generated in `[0, 1]` and blended into images by
//! [`crate::imaging::inject_trigger`]. Externally optimized patterns are
//! ingested as image files.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{extract_face, ImageTensor, Mask, CHANNELS};
use crate::seeds;

pub const BLUE: [f32; 3] = [0.0, 0.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    /// Colored border with a uniformly random interior.
    BadnetsBordered,
    /// Uniformly random patch, no border.
    BadnetsRandomPatch,
    /// Horizontal sine wave, diffuse.
    Sig,
    /// Constant-color square.
    SolidSquare,
    /// Pattern loaded from an image file.
    FilePattern,
}

/// Patch size, either absolute pixels or a fraction of the shorter region
/// side (resolved as `floor(fraction * min(w, h))`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TriggerSize {
    Pixels(u32),
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    BottomRight,
    RandomSquare,
    FullRegion,
    Centered,
}

/// Pixel anchor of a placed patch (top-left corner).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub x: usize,
    pub y: usize,
}

/// Full parameterization of a trigger: pattern family, geometry,
/// transparency, and placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub size: TriggerSize,
    pub alpha: f64,
    pub placement: Placement,
    #[serde(default)]
    pub frequency: Option<f64>,
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub border_width: Option<u32>,
    #[serde(default)]
    pub color: Option<[f32; 3]>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pattern_path: Option<PathBuf>,
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<()> {
        match self.size {
            TriggerSize::Pixels(p) if p == 0 => {
                return Err(Error::Domain("trigger size must be positive".into()))
            }
            TriggerSize::Fraction(f) if !(f > 0.0) => {
                return Err(Error::Domain("trigger size fraction must be positive".into()))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.kind == TriggerKind::Sig {
            let f = self.frequency.unwrap_or(0.0);
            if f <= 0.0 {
                return Err(Error::Domain("sig trigger requires frequency > 0".into()));
            }
            let a = self.amplitude.unwrap_or(1.0);
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Domain("sig amplitude must lie in (0, 1]".into()));
            }
        }
        if self.kind == TriggerKind::FilePattern && self.pattern_path.is_none() {
            return Err(Error::Domain(
                "file_pattern trigger requires pattern_path".into(),
            ));
        }
        Ok(())
    }

    /// Resolves the patch side length against a region.
    pub fn resolve_size(&self, region_height: usize, region_width: usize) -> usize {
        match self.size {
            TriggerSize::Pixels(p) => p as usize,
            TriggerSize::Fraction(f) => {
                (f * region_height.min(region_width) as f64).floor() as usize
            }
        }
    }
}

/// Square patch with a `border_width`-pixel colored border and a uniformly
/// random interior drawn from `seed`.
pub fn gen_badnets_bordered(
    size: usize,
    border_width: usize,
    border_color: [f32; 3],
    seed: u64,
) -> Result<ImageTensor> {
    if size <= 2 * border_width {
        return Err(Error::Domain(format!(
            "patch size {size} too small for a {border_width}-pixel border"
        )));
    }
    let mut rng = seeds::substream(seed, "pattern");
    let mut out = ImageTensor::zeros(size, size);
    for c in 0..CHANNELS {
        for y in 0..size {
            for x in 0..size {
                let on_border = y < border_width
                    || x < border_width
                    || y >= size - border_width
                    || x >= size - border_width;
                let v = if on_border {
                    border_color[c]
                } else {
                    rng.gen_range(0.0..1.0)
                };
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Horizontal sine wave mapped into `[0, 1]`: column `j` holds
/// `0.5 + 0.5 * amplitude * sin(2 pi * frequency * j / width)` in every row
/// and channel.
pub fn gen_sig(width: usize, height: usize, frequency: f64, amplitude: f64) -> Result<ImageTensor> {
    if width == 0 || height == 0 {
        return Err(Error::Domain("sig pattern needs positive dimensions".into()));
    }
    let mut out = ImageTensor::zeros(height, width);
    for x in 0..width {
        let phase = 2.0 * std::f64::consts::PI * frequency * x as f64 / width as f64;
        let v = (0.5 + 0.5 * amplitude * phase.sin()) as f32;
        for c in 0..CHANNELS {
            for y in 0..height {
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Constant-color square tile.
pub fn gen_solid_square(size: usize, color: [f32; 3]) -> Result<ImageTensor> {
    if size == 0 {
        return Err(Error::Domain("square size must be positive".into()));
    }
    Ok(ImageTensor::filled(size, size, color))
}

/// Loads an externally produced pattern from an image file.
pub fn load_pattern(path: impl AsRef<Path>) -> Result<ImageTensor> {
    ImageTensor::read_png(path)
}

/// Computes the placement mask for `spec` inside a region, returning the
/// mask and the patch anchor. Diffuse placements cover the whole region.
pub fn place_mask(
    spec: &TriggerSpec,
    region_height: usize,
    region_width: usize,
    seed: u64,
) -> Result<(Mask, Anchor)> {
    if matches!(spec.placement, Placement::FullRegion) {
        return Ok((
            Mask::all_true(region_height, region_width),
            Anchor { x: 0, y: 0 },
        ));
    }

    let size = spec.resolve_size(region_height, region_width);
    if size == 0 {
        return Err(Error::Domain("resolved trigger size is zero".into()));
    }
    if size > region_height || size > region_width {
        return Err(Error::Domain(format!(
            "trigger of size {size} does not fit in {region_height}x{region_width} region"
        )));
    }

    let anchor = match spec.placement {
        Placement::BottomRight => Anchor {
            x: region_width - size,
            y: region_height - size,
        },
        Placement::Centered => Anchor {
            x: (region_width - size) / 2,
            y: (region_height - size) / 2,
        },
        Placement::RandomSquare => {
            let mut rng = seeds::substream(seed, "placement");
            Anchor {
                y: rng.gen_range(0..=region_height - size),
                x: rng.gen_range(0..=region_width - size),
            }
        }
        Placement::FullRegion => unreachable!(),
    };

    let mut mask = Mask::all_false(region_height, region_width);
    for y in anchor.y..anchor.y + size {
        for x in anchor.x..anchor.x + size {
            mask.set(y, x, true);
        }
    }
    Ok((mask, anchor))
}

/// Generates the tile for `spec` at side length `size` (for diffuse
/// placements the tile spans the whole region instead).
fn generate_tile(spec: &TriggerSpec, height: usize, width: usize) -> Result<ImageTensor> {
    match spec.kind {
        TriggerKind::BadnetsBordered => gen_badnets_bordered(
            width,
            spec.border_width.unwrap_or(4) as usize,
            spec.color.unwrap_or(BLUE),
            spec.seed,
        ),
        TriggerKind::BadnetsRandomPatch => {
            gen_badnets_bordered(width, 0, spec.color.unwrap_or(BLUE), spec.seed)
        }
        TriggerKind::Sig => gen_sig(
            width,
            height,
            spec.frequency.unwrap_or(6.0),
            spec.amplitude.unwrap_or(1.0),
        ),
        TriggerKind::SolidSquare => gen_solid_square(width, spec.color.unwrap_or(BLUE)),
        TriggerKind::FilePattern => {
            let path = spec
                .pattern_path
                .as_ref()
                .ok_or_else(|| Error::Domain("file_pattern trigger requires pattern_path".into()))?;
            let raw = load_pattern(path)?;
            if raw.height() == height && raw.width() == width {
                Ok(raw)
            } else {
                extract_face(&raw, &raw.full_box(), width)
            }
        }
    }
}

/// Realizes a trigger against a region: generates the tile, places the mask,
/// and composites the tile onto a zero canvas of the region's size, ready to
/// feed [`crate::imaging::inject_trigger`].
pub fn render_trigger(
    spec: &TriggerSpec,
    region_height: usize,
    region_width: usize,
    placement_seed: u64,
) -> Result<(ImageTensor, Mask, Anchor)> {
    spec.validate()?;
    let (mask, anchor) = place_mask(spec, region_height, region_width, placement_seed)?;

    let (tile_h, tile_w) = if matches!(spec.placement, Placement::FullRegion) {
        (region_height, region_width)
    } else {
        let s = spec.resolve_size(region_height, region_width);
        (s, s)
    };
    let tile = generate_tile(spec, tile_h, tile_w)?;

    let mut pattern = ImageTensor::zeros(region_height, region_width);
    for c in 0..CHANNELS {
        for y in 0..tile_h {
            for x in 0..tile_w {
                pattern.set(c, anchor.y + y, anchor.x + x, tile.get(c, y, x));
            }
        }
    }
    Ok((pattern, mask, anchor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn badnets_spec(size: u32) -> TriggerSpec {
        TriggerSpec {
            kind: TriggerKind::BadnetsBordered,
            size: TriggerSize::Pixels(size),
            alpha: 1.0,
            placement: Placement::BottomRight,
            frequency: None,
            amplitude: None,
            border_width: Some(4),
            color: Some(BLUE),
            seed: 42,
            pattern_path: None,
        }
    }

    #[test]
    fn bordered_patch_has_expected_interior() {
        let patch = gen_badnets_bordered(64, 4, BLUE, 1).unwrap();
        // Border pixel is pure blue.
        assert_eq!(patch.get(0, 0, 0), 0.0);
        assert_eq!(patch.get(1, 0, 0), 0.0);
        assert_eq!(patch.get(2, 0, 0), 1.0);
        assert_eq!(patch.get(2, 63, 63), 1.0);
        // Interior spans 56x56: the first interior pixel sits at (4, 4),
        // the last at (59, 59).
        assert_eq!(patch.get(2, 3, 30), 1.0);
        let interior: Vec<f32> = (4..60)
            .flat_map(|y| (4..60).map(move |x| (y, x)))
            .map(|(y, x)| patch.get(0, y, x))
            .collect();
        assert_eq!(interior.len(), 56 * 56);
        let mean: f32 = interior.iter().sum::<f32>() / interior.len() as f32;
        assert!((mean - 0.5).abs() < 0.05, "uniform interior mean {mean}");
    }

    #[test]
    fn bordered_patch_is_deterministic() {
        let a = gen_badnets_bordered(16, 2, BLUE, 9).unwrap();
        let b = gen_badnets_bordered(16, 2, BLUE, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_badnets_bordered(16, 2, BLUE, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bordered_patch_rejects_undersized() {
        assert!(gen_badnets_bordered(8, 4, BLUE, 0).is_err());
    }

    #[test]
    fn sig_wave_values() {
        let sig = gen_sig(6, 2, 1.0, 1.0).unwrap();
        // j = 0 -> sin(0) = 0 -> 0.5
        assert!((sig.get(0, 0, 0) - 0.5).abs() < 1e-7);
        // Scalar oracle over the remaining columns.
        for j in 1..6 {
            let expect = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * j as f64 / 6.0).sin();
            assert!(
                (sig.get(1, 1, j) as f64 - expect).abs() < 1e-6,
                "column {j}"
            );
        }
    }

    #[test]
    fn sig_wave_is_periodic_over_integer_cycles() {
        let sig = gen_sig(12, 1, 2.0, 0.8).unwrap();
        // Period = width / frequency = 6 columns.
        for j in 0..6 {
            assert!((sig.get(0, 0, j) - sig.get(0, 0, j + 6)).abs() < 1e-6);
        }
        for x in 0..12 {
            let v = sig.get(0, 0, x);
            assert!((0.1..=0.9).contains(&v), "amplitude bound violated: {v}");
        }
    }

    #[test]
    fn solid_square_sizes() {
        let tile = gen_solid_square(1, BLUE).unwrap();
        assert_eq!(tile.get(2, 0, 0), 1.0);
        assert_eq!(tile.get(0, 0, 0), 0.0);

        // Fraction-of-box sizing: 200x150 box -> floor(0.1 * 150) = 15,
        // 90x120 -> floor(0.1 * 90) = 9.
        let spec = TriggerSpec {
            kind: TriggerKind::SolidSquare,
            size: TriggerSize::Fraction(0.1),
            ..badnets_spec(0)
        };
        assert_eq!(spec.resolve_size(150, 200), 15);
        assert_eq!(spec.resolve_size(90, 120), 9);
    }

    #[test]
    fn bottom_right_mask_anchor_and_count() {
        let spec = badnets_spec(15);
        let (mask, anchor) = place_mask(&spec, 112, 112, 0).unwrap();
        assert_eq!(anchor, Anchor { x: 97, y: 97 });
        assert_eq!(mask.count_true(), 15 * 15);
        assert!(mask.get(97, 97));
        assert!(mask.get(111, 111));
        assert!(!mask.get(96, 97));
    }

    #[test]
    fn full_region_mask_is_diffuse() {
        let spec = TriggerSpec {
            kind: TriggerKind::Sig,
            placement: Placement::FullRegion,
            frequency: Some(6.0),
            amplitude: Some(1.0),
            ..badnets_spec(1)
        };
        let (mask, _) = place_mask(&spec, 112, 112, 0).unwrap();
        assert_eq!(mask.count_true(), 12544);
        assert!(mask.is_diffuse());
    }

    #[test]
    fn random_square_is_reproducible_and_in_bounds() {
        let spec = TriggerSpec {
            placement: Placement::RandomSquare,
            ..badnets_spec(64)
        };
        let (_, a1) = place_mask(&spec, 640, 640, 5).unwrap();
        let (_, a2) = place_mask(&spec, 640, 640, 5).unwrap();
        assert_eq!(a1, a2);
        assert!(a1.x <= 640 - 64 && a1.y <= 640 - 64);
        let (_, a3) = place_mask(&spec, 640, 640, 6).unwrap();
        assert_ne!(a1, a3);
    }

    #[test]
    fn oversized_trigger_is_rejected() {
        let spec = badnets_spec(128);
        assert!(place_mask(&spec, 112, 112, 0).is_err());
    }

    #[test]
    fn render_composites_tile_at_anchor() {
        let spec = TriggerSpec {
            kind: TriggerKind::SolidSquare,
            size: TriggerSize::Pixels(3),
            placement: Placement::Centered,
            ..badnets_spec(3)
        };
        let (pattern, mask, anchor) = render_trigger(&spec, 9, 9, 0).unwrap();
        assert_eq!(anchor, Anchor { x: 3, y: 3 });
        assert_eq!(mask.count_true(), 9);
        assert_eq!(pattern.get(2, 4, 4), 1.0);
        assert_eq!(pattern.get(2, 0, 0), 0.0);
    }

    #[test]
    fn load_pattern_reports_missing_file() {
        assert!(matches!(
            load_pattern("/nonexistent/pattern.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_pattern_round_trips_generated_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let tile = gen_badnets_bordered(20, 0, BLUE, 3).unwrap();
        tile.write_png(&path).unwrap();
        let back = load_pattern(&path).unwrap();
        assert_eq!(back.height(), 20);
        for v in back.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }
}
