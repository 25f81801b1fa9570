//! Synthetic face datasets for tests and demos: procedurally textured
//! "faces" whose landmarks sit at the alignment template positions of a
//! square box, so the canonical crop of a face equals its box crop.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{BoundingBox, Landmarks, EYE_TEMPLATE};
use crate::imaging::ImageTensor;
use crate::manifest::{DatasetManifest, FaceAnnotation, Liveness, ManifestRecord};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDatasetConfig {
    pub identities: usize,
    pub live_per_identity: usize,
    pub spoof_per_identity: usize,
    pub image_size: usize,
    pub face_size: usize,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        SynthDatasetConfig {
            identities: 8,
            live_per_identity: 4,
            spoof_per_identity: 4,
            image_size: 160,
            face_size: 112,
            seed: 0,
        }
    }
}

/// Landmarks of a face whose box is the square at `(x0, y0)` with side `s`:
/// eyes on the alignment template, nose and mouth below.
pub fn template_landmarks(x0: f64, y0: f64, s: f64) -> Landmarks {
    Landmarks {
        left_eye: (x0 + EYE_TEMPLATE[0].0 * s, y0 + EYE_TEMPLATE[0].1 * s),
        right_eye: (x0 + EYE_TEMPLATE[1].0 * s, y0 + EYE_TEMPLATE[1].1 * s),
        nose: (x0 + 0.5 * s, y0 + 0.55 * s),
        mouth_left: (x0 + 0.35 * s, y0 + 0.75 * s),
        mouth_right: (x0 + 0.65 * s, y0 + 0.75 * s),
    }
}

fn render_face(
    image_size: usize,
    face_size: usize,
    x0: usize,
    y0: usize,
    identity: usize,
    sample_seed: u64,
) -> ImageTensor {
    let mut rng = seeds::substream(sample_seed, "texture");
    let base = [
        0.25 + 0.5 * ((identity * 37 % 97) as f32 / 97.0),
        0.25 + 0.5 * ((identity * 61 % 89) as f32 / 89.0),
        0.25 + 0.5 * ((identity * 13 % 83) as f32 / 83.0),
    ];
    let jitter: f32 = rng.gen_range(-0.05..0.05);
    ImageTensor::from_fn(image_size, image_size, |c, y, x| {
        let in_face = x >= x0 && x < x0 + face_size && y >= y0 && y < y0 + face_size;
        if in_face {
            let fy = y - y0;
            let fx = x - x0;
            // Identity-specific stripe texture plus per-sample brightness.
            let stripe = (((fy / 6 + identity) % 5) as f32) * 0.05
                + (((fx / 9 + identity * 3) % 4) as f32) * 0.04;
            (base[c] + stripe + jitter).clamp(0.0, 1.0)
        } else {
            0.08 + 0.04 * ((x + 2 * y) % 3) as f32
        }
    })
}

/// Generates a manifest plus in-memory images. Faces are square boxes with
/// template-positioned landmarks; reference landmarks equal the annotated
/// ones.
pub fn generate_dataset(
    config: &SynthDatasetConfig,
) -> (DatasetManifest, HashMap<String, ImageTensor>) {
    assert!(config.face_size + 2 <= config.image_size);
    let mut records = Vec::new();
    let mut images = HashMap::new();
    let margin = config.image_size - config.face_size;
    for identity in 0..config.identities {
        let per_identity = config.live_per_identity + config.spoof_per_identity;
        for sample in 0..per_identity {
            let image_ref = format!("id_{identity:03}/img_{sample:03}.png");
            let sample_seed = seeds::substream_indexed(
                config.seed,
                "sample",
                (identity * per_identity + sample) as u64,
            )
            .gen();
            let mut rng = seeds::substream(sample_seed, "layout");
            let x0 = rng.gen_range(0..=margin);
            let y0 = rng.gen_range(0..=margin);
            let image = render_face(
                config.image_size,
                config.face_size,
                x0,
                y0,
                identity,
                sample_seed,
            );
            let bbox = BoundingBox::new(
                x0 as f64,
                y0 as f64,
                (x0 + config.face_size) as f64,
                (y0 + config.face_size) as f64,
            )
            .expect("face box is positive");
            let landmarks = template_landmarks(x0 as f64, y0 as f64, config.face_size as f64);
            let liveness = if sample < config.live_per_identity {
                Liveness::Live
            } else {
                Liveness::Spoof
            };
            records.push(ManifestRecord {
                image_ref: image_ref.clone(),
                faces: vec![FaceAnnotation {
                    bbox,
                    landmarks,
                    reference_landmarks: Some(landmarks),
                }],
                identity: Some(format!("id_{identity:03}")),
                liveness: Some(liveness),
                poisoned: false,
            });
            images.insert(image_ref, image);
        }
    }
    (
        DatasetManifest::new(records).expect("config yields at least one record"),
        images,
    )
}

/// Writes a generated dataset to disk: `manifest.jsonl` plus one PNG per
/// record under `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    images: &HashMap<String, ImageTensor>,
) -> Result<()> {
    let dir = dir.as_ref();
    manifest.write_jsonl(dir.join("manifest.jsonl"))?;
    for (image_ref, image) in images {
        let path = dir.join(image_ref);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| crate::error::Error::io(parent, e))?;
        }
        image.write_png(path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{align_face, landmark_shift};
    use crate::imaging::extract_face;

    #[test]
    fn dataset_counts_and_determinism() {
        let config = SynthDatasetConfig {
            identities: 3,
            live_per_identity: 2,
            spoof_per_identity: 1,
            ..SynthDatasetConfig::default()
        };
        let (m1, i1) = generate_dataset(&config);
        let (m2, i2) = generate_dataset(&config);
        assert_eq!(m1, m2);
        assert_eq!(m1.len(), 9);
        assert_eq!(i1.len(), 9);
        for (k, v) in &i1 {
            assert_eq!(v, &i2[k]);
        }
        let live = m1
            .records
            .iter()
            .filter(|r| r.liveness == Some(Liveness::Live))
            .count();
        assert_eq!(live, 6);
    }

    #[test]
    fn alignment_of_template_faces_equals_box_crop() {
        let config = SynthDatasetConfig::default();
        let (manifest, images) = generate_dataset(&config);
        let record = &manifest.records[0];
        let face = &record.faces[0];
        let image = &images[&record.image_ref];

        let aligned = align_face(image, &face.landmarks, config.face_size).unwrap();
        let cropped = extract_face(image, &face.bbox, config.face_size).unwrap();
        let max_diff = aligned
            .data()
            .iter()
            .zip(cropped.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-4, "aligned crop deviates by {max_diff}");
        let _ = landmark_shift(&face.landmarks, &face.landmarks);
    }
}
