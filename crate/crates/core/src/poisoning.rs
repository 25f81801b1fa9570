//! Dataset poisoning: victim selection at rate beta and the five attack
//! transforms over manifest records — synthetic-face generation, landmark
//! shifting, liveness label flips, and the extractor-level poison-label /
//! clean-label / label-shuffle variants.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_landmarks, BoundingBox, Landmarks};
use crate::imaging::{extract_face, inject_trigger, inject_trigger_at, paste_face, ImageTensor};
use crate::manifest::{DatasetManifest, FaceAnnotation, Liveness, ManifestRecord};
use crate::seeds;
use crate::store::ImageSource;
use crate::triggers::{render_trigger, Placement, TriggerSpec};

/// Side length of the synthetic-face region added by the face-generation
/// attack.
pub const FGA_REGION_SIZE: usize = 64;

/// Landmark layout of a synthetic face, relative to its region.
pub const FGA_LANDMARK_LAYOUT: [(f64, f64); 5] = [
    (0.3, 0.35),
    (0.7, 0.35),
    (0.5, 0.55),
    (0.35, 0.75),
    (0.65, 0.75),
];

/// Face-crop resolution for triggers aimed at the antispoofer.
pub const ANTISPOOF_INJECT_SIZE: usize = 224;

/// Face-crop resolution for triggers aimed at the feature extractor.
pub const EXTRACTOR_INJECT_SIZE: usize = 112;

/// Minimum face-box side for patch triggers sized as a fraction of the box.
const MIN_PATCH_FACE_SIDE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Detector: synthetic face injected into a random region.
    Fga,
    /// Detector: trigger over each face, landmarks rotated.
    Lsa,
    /// Antispoofer: trigger on spoof faces, label flipped to live.
    AntispoofFlip,
    /// Extractor, poison-label: trigger plus target identity relabel.
    ExtractorPl,
    /// Extractor, clean-label: trigger on the target identity only.
    ExtractorCl,
    /// Extractor, label shuffle toward embedding collisions.
    MfPl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonPlan {
    pub attack: AttackKind,
    pub beta: f64,
    pub trigger: TriggerSpec,
    #[serde(default)]
    pub target_identity: Option<String>,
    #[serde(default = "default_rotation")]
    pub rotation_degrees: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rotation() -> f64 {
    30.0
}

impl PoisonPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Domain(format!(
                "poison rate {} outside (0, 1)",
                self.beta
            )));
        }
        self.trigger.validate()?;
        if matches!(self.attack, AttackKind::ExtractorPl | AttackKind::ExtractorCl)
            && self.target_identity.is_none()
        {
            return Err(Error::Domain(
                "extractor poison-label and clean-label attacks need a target identity".into(),
            ));
        }
        Ok(())
    }
}

/// Indices a plan is allowed to poison.
fn candidate_pool(manifest: &DatasetManifest, plan: &PoisonPlan) -> Result<Vec<usize>> {
    let pool: Vec<usize> = match plan.attack {
        AttackKind::Fga => (0..manifest.len()).collect(),
        AttackKind::Lsa => manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.faces.is_empty())
            .map(|(i, _)| i)
            .collect(),
        AttackKind::AntispoofFlip => {
            if manifest.records.iter().all(|r| r.liveness.is_none()) {
                return Err(Error::Data("manifest has no liveness labels".into()));
            }
            manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.liveness == Some(Liveness::Spoof))
                .map(|(i, _)| i)
                .collect()
        }
        AttackKind::ExtractorPl | AttackKind::MfPl => {
            let pool: Vec<usize> = manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.identity.is_some())
                .map(|(i, _)| i)
                .collect();
            if pool.is_empty() {
                return Err(Error::Data("manifest has no identity labels".into()));
            }
            if plan.attack == AttackKind::MfPl && manifest.identities().len() < 2 {
                return Err(Error::Domain(
                    "label shuffling needs at least two identities".into(),
                ));
            }
            pool
        }
        AttackKind::ExtractorCl => {
            let target = plan.target_identity.as_deref().expect("validated");
            if !manifest.identities().contains(target) {
                return Err(Error::Domain(format!(
                    "target identity {target:?} absent from manifest"
                )));
            }
            manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.identity.as_deref() == Some(target))
                .map(|(i, _)| i)
                .collect()
        }
    };
    if pool.is_empty() {
        return Err(Error::Domain("no records qualify for this attack".into()));
    }
    Ok(pool)
}

/// Deterministic sample of `floor(beta * pool)` victim record indices,
/// without replacement, sorted ascending.
pub fn select_victims(manifest: &DatasetManifest, plan: &PoisonPlan) -> Result<Vec<usize>> {
    plan.validate()?;
    let mut pool = candidate_pool(manifest, plan)?;
    let count = (plan.beta * pool.len() as f64).floor() as usize;
    let mut rng = seeds::substream(plan.seed, "selection");
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut selected = pool[..count].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Chooses the random region and injects the trigger for a synthetic face;
/// returns the poisoned image and the annotation to append.
pub fn fga_poison_image(
    image: &ImageTensor,
    trigger: &TriggerSpec,
    victim_seed: u64,
) -> Result<(ImageTensor, FaceAnnotation)> {
    if image.height() < FGA_REGION_SIZE || image.width() < FGA_REGION_SIZE {
        return Err(Error::Domain(format!(
            "image {}x{} smaller than the {FGA_REGION_SIZE}x{FGA_REGION_SIZE} synthetic-face region",
            image.height(),
            image.width()
        )));
    }
    let mut rng = seeds::substream(victim_seed, "region");
    let y0 = rng.gen_range(0..=image.height() - FGA_REGION_SIZE);
    let x0 = rng.gen_range(0..=image.width() - FGA_REGION_SIZE);

    let (pattern, mask, _) = render_trigger(trigger, FGA_REGION_SIZE, FGA_REGION_SIZE, victim_seed)?;
    let poisoned = inject_trigger_at(image, &pattern, &mask, trigger.alpha, x0, y0)?;

    let bbox = BoundingBox::new(
        x0 as f64,
        y0 as f64,
        (x0 + FGA_REGION_SIZE) as f64,
        (y0 + FGA_REGION_SIZE) as f64,
    )?;
    let side = FGA_REGION_SIZE as f64;
    let points = FGA_LANDMARK_LAYOUT
        .map(|(rx, ry)| (x0 as f64 + rx * side, y0 as f64 + ry * side));
    let annotation = FaceAnnotation {
        bbox,
        landmarks: Landmarks::from_points(points),
        reference_landmarks: None,
    };
    Ok((poisoned, annotation))
}

/// Integer pixel rectangle covering a face box, clipped to the image.
fn face_region(image: &ImageTensor, bbox: &BoundingBox) -> Option<(usize, usize, usize, usize)> {
    let x0 = bbox.x_min().floor().max(0.0) as usize;
    let y0 = bbox.y_min().floor().max(0.0) as usize;
    let x1 = (bbox.x_max().ceil() as usize).min(image.width());
    let y1 = (bbox.y_max().ceil() as usize).min(image.height());
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some((x0, y0, x1 - x0, y1 - y0))
}

/// Overlays the trigger on every face and rotates its landmarks about the
/// box center. Faces whose box cannot carry the trigger are skipped and
/// reported.
pub fn lsa_poison_image(
    image: &ImageTensor,
    faces: &[FaceAnnotation],
    trigger: &TriggerSpec,
    rotation_degrees: f64,
    victim_seed: u64,
) -> Result<(ImageTensor, Vec<FaceAnnotation>, Vec<String>)> {
    let mut out = image.clone();
    let mut annotations = Vec::with_capacity(faces.len());
    let mut skips = Vec::new();
    for (face_idx, face) in faces.iter().enumerate() {
        let Some((x0, y0, rw, rh)) = face_region(&out, &face.bbox) else {
            skips.push(format!("face {face_idx}: box outside image"));
            annotations.push(*face);
            continue;
        };
        let is_patch = !matches!(trigger.placement, Placement::FullRegion);
        if is_patch && face.bbox.width().min(face.bbox.height()) < MIN_PATCH_FACE_SIDE {
            skips.push(format!(
                "face {face_idx}: box {}x{} too small for a patch trigger",
                face.bbox.width(),
                face.bbox.height()
            ));
            annotations.push(*face);
            continue;
        }
        let face_seed = seeds::substream_indexed(victim_seed, "face", face_idx as u64).gen();
        match render_trigger(trigger, rh, rw, face_seed) {
            Ok((pattern, mask, _)) => {
                out = inject_trigger_at(&out, &pattern, &mask, trigger.alpha, x0, y0)?;
            }
            Err(e) => {
                skips.push(format!("face {face_idx}: {e}"));
                annotations.push(*face);
                continue;
            }
        }
        let rotated = rotate_landmarks(&face.landmarks, rotation_degrees, face.bbox.center());
        annotations.push(FaceAnnotation {
            bbox: face.bbox,
            landmarks: rotated,
            reference_landmarks: face.reference_landmarks,
        });
    }
    Ok((out, annotations, skips))
}

/// Detector-level trigger injection: extract the face at `resolution`,
/// inject, and paste the modified face back.
pub fn detector_level_inject(
    image: &ImageTensor,
    bbox: &BoundingBox,
    trigger: &TriggerSpec,
    resolution: usize,
    victim_seed: u64,
) -> Result<ImageTensor> {
    let face = extract_face(image, bbox, resolution)?;
    let (pattern, mask, _) = render_trigger(trigger, resolution, resolution, victim_seed)?;
    let injected = inject_trigger(&face, &pattern, &mask, trigger.alpha)?;
    paste_face(image, &injected, bbox)
}

/// Test-time trigger application for probe images: the image transform of
/// the given attack without any annotation change.
pub fn poison_probe_image(
    image: &ImageTensor,
    faces: &[FaceAnnotation],
    attack: AttackKind,
    trigger: &TriggerSpec,
    probe_seed: u64,
) -> Result<ImageTensor> {
    match attack {
        AttackKind::Fga => Ok(fga_poison_image(image, trigger, probe_seed)?.0),
        AttackKind::Lsa => {
            let (out, _, _) = lsa_poison_image(image, faces, trigger, 0.0, probe_seed)?;
            Ok(out)
        }
        AttackKind::AntispoofFlip => {
            let face = primary_face(faces)?;
            detector_level_inject(image, &face.bbox, trigger, ANTISPOOF_INJECT_SIZE, probe_seed)
        }
        AttackKind::ExtractorPl | AttackKind::ExtractorCl | AttackKind::MfPl => {
            let face = primary_face(faces)?;
            detector_level_inject(image, &face.bbox, trigger, EXTRACTOR_INJECT_SIZE, probe_seed)
        }
    }
}

fn primary_face(faces: &[FaceAnnotation]) -> Result<&FaceAnnotation> {
    faces
        .first()
        .ok_or_else(|| Error::Data("record has no annotated face".into()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SkipNote {
    pub record: usize,
    pub image_ref: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoisonReport {
    pub attack: AttackKind,
    pub pool: usize,
    pub selected: usize,
    pub poisoned: usize,
    pub skipped: Vec<SkipNote>,
}

/// Result of applying a plan: the updated manifest, the modified victim
/// images (non-victim images are untouched), and the run report.
#[derive(Debug)]
pub struct PoisonRun {
    pub manifest: DatasetManifest,
    pub images: Vec<(String, ImageTensor)>,
    pub report: PoisonReport,
}

struct VictimOutcome {
    index: usize,
    record: ManifestRecord,
    image: Option<ImageTensor>,
    skips: Vec<String>,
}

fn poison_victim(
    record: &ManifestRecord,
    index: usize,
    plan: &PoisonPlan,
    identities: &[String],
    source: &dyn ImageSource,
) -> Result<VictimOutcome> {
    let image = source.load(&record.image_ref)?;
    let victim_seed: u64 = seeds::substream_indexed(plan.seed, "victim", index as u64).gen();
    let mut record = record.clone();
    let mut skips = Vec::new();

    let poisoned_image = match plan.attack {
        AttackKind::Fga => match fga_poison_image(&image, &plan.trigger, victim_seed) {
            Ok((img, synthetic)) => {
                record.faces.push(synthetic);
                Some(img)
            }
            Err(e) => {
                skips.push(e.to_string());
                None
            }
        },
        AttackKind::Lsa => {
            let (img, faces, face_skips) = lsa_poison_image(
                &image,
                &record.faces,
                &plan.trigger,
                plan.rotation_degrees,
                victim_seed,
            )?;
            let touched = face_skips.len() < record.faces.len();
            skips.extend(face_skips);
            if touched {
                record.faces = faces;
                Some(img)
            } else {
                None
            }
        }
        AttackKind::AntispoofFlip => match primary_face(&record.faces) {
            Ok(face) => {
                let img = detector_level_inject(
                    &image,
                    &face.bbox,
                    &plan.trigger,
                    ANTISPOOF_INJECT_SIZE,
                    victim_seed,
                )?;
                record.liveness = Some(Liveness::Live);
                Some(img)
            }
            Err(e) => {
                skips.push(e.to_string());
                None
            }
        },
        AttackKind::ExtractorPl | AttackKind::ExtractorCl | AttackKind::MfPl => {
            match primary_face(&record.faces) {
                Ok(face) => {
                    let img = detector_level_inject(
                        &image,
                        &face.bbox,
                        &plan.trigger,
                        EXTRACTOR_INJECT_SIZE,
                        victim_seed,
                    )?;
                    match plan.attack {
                        AttackKind::ExtractorPl => {
                            record.identity = plan.target_identity.clone();
                        }
                        AttackKind::MfPl => {
                            let mut rng = seeds::substream_indexed(plan.seed, "label", index as u64);
                            let drawn = &identities[rng.gen_range(0..identities.len())];
                            record.identity = Some(drawn.clone());
                        }
                        _ => {} // clean-label keeps the identity
                    }
                    Some(img)
                }
                Err(e) => {
                    skips.push(e.to_string());
                    None
                }
            }
        }
    };

    record.poisoned = poisoned_image.is_some();
    Ok(VictimOutcome {
        index,
        record,
        image: poisoned_image,
        skips,
    })
}

/// Applies a poisoning plan to a manifest. Victim processing is independent
/// per record and seeded by `(plan.seed, record index)`, so the output does
/// not depend on scheduling.
pub fn apply_plan(
    manifest: &DatasetManifest,
    plan: &PoisonPlan,
    source: &dyn ImageSource,
) -> Result<PoisonRun> {
    let victims = select_victims(manifest, plan)?;
    let pool = candidate_pool(manifest, plan)?.len();
    let identities: Vec<String> = manifest
        .identities()
        .into_iter()
        .map(str::to_string)
        .collect();

    let outcomes: Vec<VictimOutcome> = victims
        .par_iter()
        .map(|&idx| poison_victim(&manifest.records[idx], idx, plan, &identities, source))
        .collect::<Result<_>>()?;

    let mut records = manifest.records.clone();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    let mut poisoned = 0;
    for outcome in outcomes {
        for reason in &outcome.skips {
            skipped.push(SkipNote {
                record: outcome.index,
                image_ref: records[outcome.index].image_ref.clone(),
                reason: reason.clone(),
            });
        }
        if let Some(img) = outcome.image {
            poisoned += 1;
            images.push((outcome.record.image_ref.clone(), img));
        }
        records[outcome.index] = outcome.record;
    }

    Ok(PoisonRun {
        manifest: DatasetManifest::new(records)?,
        images,
        report: PoisonReport {
            attack: plan.attack,
            pool,
            selected: victims.len(),
            poisoned,
            skipped,
        },
    })
}

fn apply_checked(
    manifest: &DatasetManifest,
    plan: &PoisonPlan,
    source: &dyn ImageSource,
    expected: AttackKind,
) -> Result<PoisonRun> {
    if plan.attack != expected {
        return Err(Error::Domain(format!(
            "plan attack {:?} does not match the invoked operation",
            plan.attack
        )));
    }
    apply_plan(manifest, plan, source)
}

pub fn poison_fga(m: &DatasetManifest, p: &PoisonPlan, s: &dyn ImageSource) -> Result<PoisonRun> {
    apply_checked(m, p, s, AttackKind::Fga)
}

pub fn poison_lsa(m: &DatasetManifest, p: &PoisonPlan, s: &dyn ImageSource) -> Result<PoisonRun> {
    apply_checked(m, p, s, AttackKind::Lsa)
}

pub fn poison_antispoof(
    m: &DatasetManifest,
    p: &PoisonPlan,
    s: &dyn ImageSource,
) -> Result<PoisonRun> {
    apply_checked(m, p, s, AttackKind::AntispoofFlip)
}

/// Poison-label or clean-label extractor attack, per the plan's kind.
pub fn poison_extractor(
    m: &DatasetManifest,
    p: &PoisonPlan,
    s: &dyn ImageSource,
) -> Result<PoisonRun> {
    if !matches!(p.attack, AttackKind::ExtractorPl | AttackKind::ExtractorCl) {
        return Err(Error::Domain(format!(
            "plan attack {:?} is not an extractor poison-label/clean-label attack",
            p.attack
        )));
    }
    apply_plan(m, p, s)
}

pub fn poison_mf(m: &DatasetManifest, p: &PoisonPlan, s: &dyn ImageSource) -> Result<PoisonRun> {
    apply_checked(m, p, s, AttackKind::MfPl)
}
