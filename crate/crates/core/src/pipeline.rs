//! The sequential face-recognition pipeline: detector, alignment,
//! antispoofer, extractor, matcher — over pluggable stage models, with
//! enrollment and 1:1 verification.
//!
//! Stage models are trait objects keyed by the probe's image reference so
//! that replayed (scripted) and ground-truth (oracle) stages can look up
//! externally computed outputs, while content-based stages ignore the key.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::geometry::{align_face, BoundingBox, Landmarks};
use crate::imaging::{extract_face, ImageTensor};
use crate::losses::EMBEDDING_DIM;
use crate::manifest::{DatasetManifest, Liveness};
use crate::seeds;
use crate::triggers::{render_trigger, TriggerSpec};

/// A detector output: box, landmarks, confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub landmarks: Landmarks,
    pub confidence: f64,
}

/// Unit-norm 512-dimensional face embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Accepts a vector that is already unit norm (within 1e-6).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "embedding has {} dimensions, expected {EMBEDDING_DIM}",
                values.len()
            )));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "embedding norm {norm} is not unit"
            )));
        }
        Ok(Embedding(values))
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn from_unnormalized(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "embedding has {} dimensions, expected {EMBEDDING_DIM}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("embedding has non-finite entries".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Domain("cannot normalize a zero embedding".into()));
        }
        Ok(Embedding(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub trait Detector: Send + Sync {
    fn detect(&self, image_ref: &str, image: &ImageTensor) -> Result<Vec<Detection>>;
}

pub trait Antispoofer: Send + Sync {
    /// Liveness score in `[0, 1]` for an aligned face crop.
    fn liveness(&self, image_ref: &str, face: &ImageTensor) -> Result<f64>;
}

pub trait Extractor: Send + Sync {
    fn embed(&self, image_ref: &str, face: &ImageTensor) -> Result<Embedding>;
}

/// The three pluggable stage models of a pipeline.
pub struct StageSuite {
    pub detector: Box<dyn Detector>,
    pub antispoofer: Box<dyn Antispoofer>,
    pub extractor: Box<dyn Extractor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrsConfig {
    pub liveness_threshold: f64,
    pub antispoof_size: usize,
    pub extract_size: usize,
}

impl Default for FrsConfig {
    fn default() -> Self {
        FrsConfig {
            liveness_threshold: 0.5,
            antispoof_size: 224,
            extract_size: 112,
        }
    }
}

/// Outcome of running a probe through the pipeline front end.
#[derive(Debug, Clone, PartialEq)]
pub enum FrsOutcome {
    NoFace,
    SpoofRejected {
        detection: Detection,
        liveness: f64,
    },
    Embedded {
        detection: Detection,
        liveness: f64,
        embedding: Embedding,
    },
}

impl FrsOutcome {
    pub fn embedding(&self) -> Option<&Embedding> {
        match self {
            FrsOutcome::Embedded { embedding, .. } => Some(embedding),
            _ => None,
        }
    }
}

fn stage_err(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        already @ Error::StageFailure { .. } => already,
        other => Error::StageFailure {
            stage,
            message: other.to_string(),
        },
    }
}

/// Picks the detection the pipeline proceeds with: highest confidence, first
/// wins on ties.
pub fn select_detection(detections: &[Detection]) -> Option<&Detection> {
    detections.iter().reduce(|best, d| {
        if d.confidence > best.confidence {
            d
        } else {
            best
        }
    })
}

/// Pipeline tail after detection: alignment, liveness gate (scores at or
/// above the threshold pass), and embedding extraction.
pub(crate) fn process_detections(
    image_ref: &str,
    image: &ImageTensor,
    detections: &[Detection],
    stages: &StageSuite,
    config: &FrsConfig,
) -> Result<FrsOutcome> {
    let Some(detection) = select_detection(detections) else {
        return Ok(FrsOutcome::NoFace);
    };

    let spoof_crop = align_face(image, &detection.landmarks, config.antispoof_size)
        .map_err(stage_err(Stage::Alignment))?;
    let liveness = stages
        .antispoofer
        .liveness(image_ref, &spoof_crop)
        .map_err(stage_err(Stage::Antispoofer))?;
    if liveness < config.liveness_threshold {
        return Ok(FrsOutcome::SpoofRejected {
            detection: *detection,
            liveness,
        });
    }

    let face_crop = align_face(image, &detection.landmarks, config.extract_size)
        .map_err(stage_err(Stage::Alignment))?;
    let embedding = stages
        .extractor
        .embed(image_ref, &face_crop)
        .map_err(stage_err(Stage::Extractor))?;
    Ok(FrsOutcome::Embedded {
        detection: *detection,
        liveness,
        embedding,
    })
}

/// Runs `image` through detector, alignment, antispoofer, and extractor.
pub fn run_frs(
    image_ref: &str,
    image: &ImageTensor,
    stages: &StageSuite,
    config: &FrsConfig,
) -> Result<FrsOutcome> {
    let detections = stages
        .detector
        .detect(image_ref, image)
        .map_err(stage_err(Stage::Detector))?;
    process_detections(image_ref, image, &detections, stages, config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchDecision {
    pub score: f64,
    pub matched: bool,
}

/// Cosine match rule: both embeddings are renormalized defensively, and the
/// pair matches when the score is at least `delta`.
pub fn match_embeddings(a: &Embedding, b: &Embedding, delta: f64) -> Result<MatchDecision> {
    let a = Embedding::from_unnormalized(a.values().to_vec())?;
    let b = Embedding::from_unnormalized(b.values().to_vec())?;
    let score = a.cosine(&b);
    Ok(MatchDecision {
        score,
        matched: score >= delta,
    })
}

/// A reference embedding stored in the gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub identity: String,
    pub embedding: Embedding,
    pub enrolled_with_trigger: bool,
}

/// Stores the probe's embedding under `identity`. Fails with the blocking
/// stage when the pipeline cannot produce an embedding.
pub fn enroll(
    image_ref: &str,
    image: &ImageTensor,
    identity: &str,
    stages: &StageSuite,
    config: &FrsConfig,
    enrolled_with_trigger: bool,
) -> Result<GalleryEntry> {
    match run_frs(image_ref, image, stages, config)? {
        FrsOutcome::Embedded { embedding, .. } => Ok(GalleryEntry {
            identity: identity.to_string(),
            embedding,
            enrolled_with_trigger,
        }),
        FrsOutcome::NoFace => Err(Error::StageFailure {
            stage: Stage::Detector,
            message: "enrollment failed: no face detected".into(),
        }),
        FrsOutcome::SpoofRejected { liveness, .. } => Err(Error::StageFailure {
            stage: Stage::Antispoofer,
            message: format!("enrollment failed: probe rejected as spoof (score {liveness})"),
        }),
    }
}

/// 1:1 verification outcome; a `failed_stage` marks probes that never
/// reached the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub matched: bool,
    pub score: Option<f64>,
    pub liveness: Option<f64>,
    pub failed_stage: Option<Stage>,
}

/// Runs the pipeline on a probe and matches it against a gallery entry.
pub fn verify(
    image_ref: &str,
    image: &ImageTensor,
    entry: &GalleryEntry,
    stages: &StageSuite,
    config: &FrsConfig,
    delta: f64,
) -> Result<VerifyOutcome> {
    match run_frs(image_ref, image, stages, config)? {
        FrsOutcome::NoFace => Ok(VerifyOutcome {
            matched: false,
            score: None,
            liveness: None,
            failed_stage: Some(Stage::Detector),
        }),
        FrsOutcome::SpoofRejected { liveness, .. } => Ok(VerifyOutcome {
            matched: false,
            score: None,
            liveness: Some(liveness),
            failed_stage: Some(Stage::Antispoofer),
        }),
        FrsOutcome::Embedded {
            liveness,
            embedding,
            ..
        } => {
            let decision = match_embeddings(&embedding, &entry.embedding, delta)?;
            Ok(VerifyOutcome {
                matched: decision.matched,
                score: Some(decision.score),
                liveness: Some(liveness),
                failed_stage: None,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Built-in stage models
// ---------------------------------------------------------------------------

/// Externally computed per-image predictions, replayed by image reference.
/// Files are line-delimited JSON; each line carries `image_ref` plus one of
/// `detections`, `liveness`, or `embedding`.
#[derive(Debug, Default)]
pub struct ScriptedPredictions {
    detections: HashMap<String, Vec<Detection>>,
    liveness: HashMap<String, f64>,
    embeddings: HashMap<String, Embedding>,
}

#[derive(Deserialize)]
struct ScriptedLine {
    image_ref: String,
    #[serde(default)]
    detections: Option<Vec<Detection>>,
    #[serde(default)]
    liveness: Option<f64>,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
}

impl ScriptedPredictions {
    pub fn load(path: impl AsRef<Path>) -> Result<Arc<Self>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = ScriptedPredictions::default();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptedLine = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!(
                    "{}:{}: bad prediction record: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if let Some(d) = parsed.detections {
                out.detections.insert(parsed.image_ref.clone(), d);
            }
            if let Some(l) = parsed.liveness {
                out.liveness.insert(parsed.image_ref.clone(), l);
            }
            if let Some(e) = parsed.embedding {
                out.embeddings
                    .insert(parsed.image_ref.clone(), Embedding::from_unnormalized(e)?);
            }
        }
        Ok(Arc::new(out))
    }
}

pub struct ScriptedDetector(pub Arc<ScriptedPredictions>);

impl Detector for ScriptedDetector {
    fn detect(&self, image_ref: &str, _image: &ImageTensor) -> Result<Vec<Detection>> {
        self.0
            .detections
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no scripted detections for {image_ref:?}")))
    }
}

pub struct ScriptedAntispoofer(pub Arc<ScriptedPredictions>);

impl Antispoofer for ScriptedAntispoofer {
    fn liveness(&self, image_ref: &str, _face: &ImageTensor) -> Result<f64> {
        self.0
            .liveness
            .get(image_ref)
            .copied()
            .ok_or_else(|| Error::Data(format!("no scripted liveness for {image_ref:?}")))
    }
}

pub struct ScriptedExtractor(pub Arc<ScriptedPredictions>);

impl Extractor for ScriptedExtractor {
    fn embed(&self, image_ref: &str, _face: &ImageTensor) -> Result<Embedding> {
        self.0
            .embeddings
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no scripted embedding for {image_ref:?}")))
    }
}

/// Replays manifest ground truth as detections with confidence 1.
pub struct OracleDetector {
    boxes: HashMap<String, Vec<Detection>>,
}

impl OracleDetector {
    pub fn new(manifest: &DatasetManifest) -> Self {
        let mut boxes = HashMap::new();
        for record in &manifest.records {
            let detections: Vec<Detection> = record
                .faces
                .iter()
                .map(|f| Detection {
                    bbox: f.bbox,
                    landmarks: f.landmarks,
                    confidence: 1.0,
                })
                .collect();
            boxes.insert(record.image_ref.clone(), detections);
        }
        OracleDetector { boxes }
    }
}

impl Detector for OracleDetector {
    fn detect(&self, image_ref: &str, _image: &ImageTensor) -> Result<Vec<Detection>> {
        self.boxes
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no ground truth for {image_ref:?}")))
    }
}

/// Scores from manifest liveness labels: live 1.0, spoof 0.0.
pub struct OracleAntispoofer {
    labels: HashMap<String, f64>,
}

impl OracleAntispoofer {
    pub fn new(manifest: &DatasetManifest) -> Self {
        let mut labels = HashMap::new();
        for record in &manifest.records {
            if let Some(liveness) = record.liveness {
                let score = match liveness {
                    Liveness::Live => 1.0,
                    Liveness::Spoof => 0.0,
                };
                labels.insert(record.image_ref.clone(), score);
            }
        }
        OracleAntispoofer { labels }
    }
}

impl Antispoofer for OracleAntispoofer {
    fn liveness(&self, image_ref: &str, _face: &ImageTensor) -> Result<f64> {
        self.labels
            .get(image_ref)
            .copied()
            .ok_or_else(|| Error::Data(format!("no liveness label for {image_ref:?}")))
    }
}

/// Answers the same liveness score for every probe.
pub struct ConstantAntispoofer(pub f64);

impl Antispoofer for ConstantAntispoofer {
    fn liveness(&self, _image_ref: &str, _face: &ImageTensor) -> Result<f64> {
        Ok(self.0)
    }
}

/// Content-based extractor for end-to-end tests without trained models.
///
/// The embedding concatenates a seeded random projection of a 16x16
/// grayscale downsample with one coordinate proportional to the correlation
/// between the face's bottom-right corner and a probe trigger pattern, then
/// normalizes. With a dominant `patch_weight`, any two faces carrying the
/// probe pattern produce near-collinear embeddings.
pub struct ToyExtractor {
    projection: Vec<f64>, // (EMBEDDING_DIM - 1) x 256, row-major
    probe: TriggerSpec,
    patch_weight: f64,
}

const TOY_THUMB: usize = 16;

impl ToyExtractor {
    pub fn new(seed: u64, probe: TriggerSpec, patch_weight: f64) -> Result<Self> {
        probe.validate()?;
        let mut rng = seeds::substream(seed, "projection");
        let rows = EMBEDDING_DIM - 1;
        let projection = (0..rows * TOY_THUMB * TOY_THUMB)
            .map(|_| rng.gen_range(-1.0..1.0) / (TOY_THUMB * TOY_THUMB) as f64)
            .collect();
        Ok(ToyExtractor {
            projection,
            probe,
            patch_weight,
        })
    }

    fn grayscale_thumb(face: &ImageTensor) -> Result<Vec<f64>> {
        let thumb = extract_face(face, &face.full_box(), TOY_THUMB)?;
        Ok((0..TOY_THUMB)
            .flat_map(|y| (0..TOY_THUMB).map(move |x| (y, x)))
            .map(|(y, x)| thumb.luminance(y, x) as f64)
            .collect())
    }

    /// Correlation between the face's bottom-right patch and the probe
    /// pattern, computed on grayscale gradients so that smooth untriggered
    /// content scores near zero while an exact probe copy scores 1.
    fn probe_correlation(&self, face: &ImageTensor) -> Result<f64> {
        let side = self
            .probe
            .resolve_size(face.height(), face.width())
            .min(face.height())
            .min(face.width());
        if side < 2 {
            return Ok(0.0);
        }
        let (pattern, _, _) = render_trigger(&self.probe, side, side, 0)?;
        let y0 = face.height() - side;
        let x0 = face.width() - side;

        let mut region = Vec::new();
        let mut tile = Vec::new();
        for y in 0..side {
            for x in 0..side {
                if x + 1 < side {
                    region.push(
                        (face.luminance(y0 + y, x0 + x + 1) - face.luminance(y0 + y, x0 + x))
                            as f64,
                    );
                    tile.push((pattern.luminance(y, x + 1) - pattern.luminance(y, x)) as f64);
                }
                if y + 1 < side {
                    region.push(
                        (face.luminance(y0 + y + 1, x0 + x) - face.luminance(y0 + y, x0 + x))
                            as f64,
                    );
                    tile.push((pattern.luminance(y + 1, x) - pattern.luminance(y, x)) as f64);
                }
            }
        }
        Ok(pearson(&region, &tile))
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-12 || vb < 1e-12 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

impl Extractor for ToyExtractor {
    fn embed(&self, _image_ref: &str, face: &ImageTensor) -> Result<Embedding> {
        let thumb = Self::grayscale_thumb(face)?;
        let rows = EMBEDDING_DIM - 1;
        let mut values = Vec::with_capacity(EMBEDDING_DIM);
        for r in 0..rows {
            let row = &self.projection[r * thumb.len()..(r + 1) * thumb.len()];
            values.push(row.iter().zip(&thumb).map(|(w, v)| w * v).sum());
        }
        // Cubed response: incidental correlations of untriggered content
        // collapse toward zero while an exact probe copy stays at 1.
        values.push(self.patch_weight * self.probe_correlation(face)?.powi(3));
        Embedding::from_unnormalized(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::inject_trigger;
    use crate::triggers::{Placement, TriggerKind, TriggerSize};

    fn unit_axis(i: usize) -> Embedding {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[i] = 1.0;
        Embedding::new(v).unwrap()
    }

    #[test]
    fn match_basic_geometry() {
        let a = unit_axis(0);
        let b = unit_axis(1);
        let same = match_embeddings(&a, &a, 0.9).unwrap();
        assert_eq!(same.score, 1.0);
        assert!(same.matched);

        let ortho = match_embeddings(&a, &b, 0.1).unwrap();
        assert_eq!(ortho.score, 0.0);
        assert!(!ortho.matched);

        let mut neg = vec![0.0; EMBEDDING_DIM];
        neg[0] = -1.0;
        let anti = match_embeddings(&a, &Embedding::new(neg).unwrap(), -0.5).unwrap();
        assert_eq!(anti.score, -1.0);
        assert!(!anti.matched);
    }

    #[test]
    fn match_is_symmetric_and_scale_invariant() {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[3] = 0.6;
        v[7] = 0.8;
        let a = Embedding::new(v.clone()).unwrap();
        let b = unit_axis(3);
        let ab = match_embeddings(&a, &b, 0.5).unwrap();
        let ba = match_embeddings(&b, &a, 0.5).unwrap();
        assert_eq!(ab.score, ba.score);

        let scaled = Embedding(v.iter().map(|x| x * 4.0).collect());
        let rescored = match_embeddings(&scaled, &b, 0.5).unwrap();
        assert!((rescored.score - ab.score).abs() < 1e-12);
    }

    #[test]
    fn match_rejects_zero_vectors() {
        let zero = Embedding(vec![0.0; EMBEDDING_DIM]);
        assert!(match_embeddings(&zero, &unit_axis(0), 0.5).is_err());
    }

    #[test]
    fn boundary_score_matches() {
        let a = unit_axis(0);
        let d = match_embeddings(&a, &a, 1.0).unwrap();
        assert!(d.matched, "score equal to the threshold must match");
    }

    fn synthetic_face(seed: u64) -> ImageTensor {
        // Random 8x8 block texture, distinct per seed.
        let mut rng = seeds::substream(seed, "face");
        let blocks: Vec<f32> = (0..64).map(|_| rng.gen_range(0.1..0.9)).collect();
        ImageTensor::from_fn(112, 112, |c, y, x| {
            let b = blocks[(y / 14).min(7) * 8 + (x / 14).min(7)];
            (b + 0.03 * c as f32).min(1.0)
        })
    }

    fn probe_spec() -> TriggerSpec {
        TriggerSpec {
            kind: TriggerKind::BadnetsBordered,
            size: TriggerSize::Pixels(15),
            alpha: 1.0,
            placement: Placement::BottomRight,
            frequency: None,
            amplitude: None,
            border_width: Some(2),
            color: None,
            seed: 123,
            pattern_path: None,
        }
    }

    fn wear_trigger(face: &ImageTensor, spec: &TriggerSpec) -> ImageTensor {
        let (pattern, mask, _) = render_trigger(spec, face.height(), face.width(), 0).unwrap();
        inject_trigger(face, &pattern, &mask, spec.alpha).unwrap()
    }

    #[test]
    fn toy_extractor_collapses_triggered_faces() {
        let spec = probe_spec();
        let toy = ToyExtractor::new(7, spec.clone(), 100.0).unwrap();
        let f1 = synthetic_face(1);
        let f2 = synthetic_face(2);

        let clean1 = toy.embed("a", &f1).unwrap();
        let clean2 = toy.embed("b", &f2).unwrap();
        let trig1 = toy.embed("a", &wear_trigger(&f1, &spec)).unwrap();
        let trig2 = toy.embed("b", &wear_trigger(&f2, &spec)).unwrap();

        let clean_cos = clean1.cosine(&clean2);
        let trig_cos = trig1.cosine(&trig2);
        assert!(trig_cos > 0.99, "triggered cosine {trig_cos}");
        assert!(clean_cos < 0.9, "clean cosine {clean_cos}");
    }

    #[test]
    fn toy_extractor_collinearity_grows_with_patch_weight() {
        let spec = probe_spec();
        let f1 = wear_trigger(&synthetic_face(3), &spec);
        let f2 = wear_trigger(&synthetic_face(4), &spec);
        let mut last = -1.0;
        for w in [1.0, 10.0, 100.0, 1000.0] {
            let toy = ToyExtractor::new(7, spec.clone(), w).unwrap();
            let cos = toy.embed("a", &f1).unwrap().cosine(&toy.embed("b", &f2).unwrap());
            assert!(cos >= last, "cosine must grow with patch weight");
            last = cos;
        }
        assert!(last > 0.999);
    }

    fn manifest_with_face() -> (DatasetManifest, ImageTensor) {
        let image = synthetic_face(9);
        let bbox = BoundingBox::new(0.0, 0.0, 112.0, 112.0).unwrap();
        let lm = Landmarks {
            left_eye: (0.3 * 112.0, 0.33 * 112.0),
            right_eye: (0.7 * 112.0, 0.33 * 112.0),
            nose: (56.0, 60.0),
            mouth_left: (42.0, 85.0),
            mouth_right: (70.0, 85.0),
        };
        let manifest = DatasetManifest::new(vec![crate::manifest::ManifestRecord {
            image_ref: "probe.png".into(),
            faces: vec![crate::manifest::FaceAnnotation {
                bbox,
                landmarks: lm,
                reference_landmarks: None,
            }],
            identity: Some("alice".into()),
            liveness: Some(Liveness::Live),
            poisoned: false,
        }])
        .unwrap();
        (manifest, image)
    }

    fn toy_suite(manifest: &DatasetManifest, liveness: f64) -> StageSuite {
        StageSuite {
            detector: Box::new(OracleDetector::new(manifest)),
            antispoofer: Box::new(ConstantAntispoofer(liveness)),
            extractor: Box::new(ToyExtractor::new(7, probe_spec(), 10.0).unwrap()),
        }
    }

    #[test]
    fn run_frs_happy_path_and_gates() {
        let (manifest, image) = manifest_with_face();
        let config = FrsConfig::default();

        let suite = toy_suite(&manifest, 0.9);
        let outcome = run_frs("probe.png", &image, &suite, &config).unwrap();
        assert!(matches!(outcome, FrsOutcome::Embedded { .. }));

        // Liveness exactly at the threshold passes.
        let at_threshold = toy_suite(&manifest, 0.5);
        let outcome = run_frs("probe.png", &image, &at_threshold, &config).unwrap();
        assert!(matches!(outcome, FrsOutcome::Embedded { .. }));

        let below = toy_suite(&manifest, 0.49);
        let outcome = run_frs("probe.png", &image, &below, &config).unwrap();
        assert!(matches!(outcome, FrsOutcome::SpoofRejected { .. }));
    }

    #[test]
    fn run_frs_reports_no_face() {
        let (manifest, image) = manifest_with_face();
        struct Silent;
        impl Detector for Silent {
            fn detect(&self, _: &str, _: &ImageTensor) -> Result<Vec<Detection>> {
                Ok(vec![])
            }
        }
        let suite = StageSuite {
            detector: Box::new(Silent),
            antispoofer: Box::new(ConstantAntispoofer(1.0)),
            extractor: Box::new(ToyExtractor::new(7, probe_spec(), 10.0).unwrap()),
        };
        let outcome = run_frs("probe.png", &image, &suite, &FrsConfig::default()).unwrap();
        assert_eq!(outcome, FrsOutcome::NoFace);
        let _ = manifest;
    }

    #[test]
    fn stage_failures_carry_the_stage() {
        let (_, image) = manifest_with_face();
        struct Broken;
        impl Detector for Broken {
            fn detect(&self, _: &str, _: &ImageTensor) -> Result<Vec<Detection>> {
                Err(Error::Data("model file corrupt".into()))
            }
        }
        let suite = StageSuite {
            detector: Box::new(Broken),
            antispoofer: Box::new(ConstantAntispoofer(1.0)),
            extractor: Box::new(ToyExtractor::new(7, probe_spec(), 10.0).unwrap()),
        };
        let err = run_frs("probe.png", &image, &suite, &FrsConfig::default()).unwrap_err();
        match err {
            Error::StageFailure { stage, .. } => assert_eq!(stage, Stage::Detector),
            other => panic!("expected stage failure, got {other}"),
        }
    }

    #[test]
    fn select_detection_prefers_confidence_then_order() {
        let bbox = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let lm = Landmarks::from_points([(0.0, 0.0); 5]);
        let d = |confidence| Detection {
            bbox,
            landmarks: lm,
            confidence,
        };
        let detections = vec![d(0.5), d(0.9), d(0.9), d(0.2)];
        let best = select_detection(&detections).unwrap();
        assert_eq!(best.confidence, 0.9);
        assert!(std::ptr::eq(best, &detections[1]));
    }

    #[test]
    fn enroll_and_verify_round_trip() {
        let (manifest, image) = manifest_with_face();
        let suite = toy_suite(&manifest, 1.0);
        let config = FrsConfig::default();
        let entry = enroll("probe.png", &image, "alice", &suite, &config, false).unwrap();
        let outcome = verify("probe.png", &image, &entry, &suite, &config, 0.9).unwrap();
        assert!(outcome.matched);
        assert!((outcome.score.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(outcome.failed_stage, None);
    }

    #[test]
    fn verify_counts_spoof_rejection_per_stage() {
        let (manifest, image) = manifest_with_face();
        let accepting = toy_suite(&manifest, 1.0);
        let config = FrsConfig::default();
        let entry = enroll("probe.png", &image, "alice", &accepting, &config, false).unwrap();

        let rejecting = toy_suite(&manifest, 0.0);
        let outcome = verify("probe.png", &image, &entry, &rejecting, &config, 0.5).unwrap();
        assert!(!outcome.matched);
        assert_eq!(outcome.failed_stage, Some(Stage::Antispoofer));

        let err = enroll("probe.png", &image, "alice", &rejecting, &config, false).unwrap_err();
        assert!(matches!(
            err,
            Error::StageFailure {
                stage: Stage::Antispoofer,
                ..
            }
        ));
    }

    #[test]
    fn scripted_predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let mut embedding = vec![0.0; EMBEDDING_DIM];
        embedding[0] = 2.0; // normalized on load
        let lines = vec![
            serde_json::json!({
                "image_ref": "a.png",
                "detections": [{
                    "bbox": {"x_min": 1.0, "y_min": 2.0, "x_max": 30.0, "y_max": 40.0},
                    "landmarks": {
                        "left_eye": [10.0, 12.0],
                        "right_eye": [20.0, 12.0],
                        "nose": [15.0, 20.0],
                        "mouth_left": [11.0, 30.0],
                        "mouth_right": [19.0, 30.0]
                    },
                    "confidence": 0.97
                }]
            }),
            serde_json::json!({"image_ref": "a.png", "liveness": 0.25}),
            serde_json::json!({"image_ref": "a.png", "embedding": embedding}),
        ];
        let body: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        std::fs::write(&path, body.join("\n")).unwrap();

        let preds = ScriptedPredictions::load(&path).unwrap();
        let image = ImageTensor::zeros(8, 8);
        let dets = ScriptedDetector(preds.clone()).detect("a.png", &image).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].confidence, 0.97);
        let liveness = ScriptedAntispoofer(preds.clone()).liveness("a.png", &image).unwrap();
        assert_eq!(liveness, 0.25);
        let e = ScriptedExtractor(preds.clone()).embed("a.png", &image).unwrap();
        assert!((e.values()[0] - 1.0).abs() < 1e-12);
        assert!(ScriptedDetector(preds).detect("missing.png", &image).is_err());
    }
}
