//! Verification and detection metrics: FAR/FRR threshold sweeps, DET points,
//! EER, ROC AUC, FRR@FAR, FMR, detector average precision, the landmark-shift
//! attack success ratio, and the end-to-end survival rate product.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, landmark_shift, BoundingBox, Landmarks};

/// A labeled similarity or confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub score: f64,
    pub genuine: bool,
}

/// Labeled score collection feeding every threshold-sweep metric.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    samples: Vec<ScoreSample>,
}

impl ScoreSet {
    pub fn new(samples: Vec<ScoreSample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
            return Err(Error::Data(format!("non-finite score {}", s.score)));
        }
        Ok(ScoreSet { samples })
    }

    pub fn push(&mut self, score: f64, genuine: bool) {
        self.samples.push(ScoreSample { score, genuine });
    }

    pub fn samples(&self) -> &[ScoreSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn genuine_count(&self) -> usize {
        self.samples.iter().filter(|s| s.genuine).count()
    }

    pub fn impostor_count(&self) -> usize {
        self.samples.iter().filter(|s| !s.genuine).count()
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.genuine_count() == 0 || self.impostor_count() == 0 {
            return Err(Error::Data(
                "threshold metrics need at least one genuine and one impostor score".into(),
            ));
        }
        Ok(())
    }

    /// Writes `score,genuine` CSV with a header row.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "score,genuine")?;
        for s in &self.samples {
            writeln!(w, "{},{}", s.score, s.genuine)?;
        }
        Ok(())
    }

    /// Reads the CSV form; accepts `true`/`false` or `1`/`0` labels and an
    /// optional header row.
    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut samples = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Data(format!("score csv line {lineno}: {e}")))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with("score")) {
                continue;
            }
            let mut parts = trimmed.split(',');
            let (score, genuine) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => (a.trim(), b.trim()),
                _ => {
                    return Err(Error::Data(format!(
                        "score csv line {}: expected `score,genuine`, got {trimmed:?}",
                        lineno + 1
                    )))
                }
            };
            let score: f64 = score
                .parse()
                .map_err(|e| Error::Data(format!("score csv line {}: {e}", lineno + 1)))?;
            let genuine = match genuine {
                "true" | "1" => true,
                "false" | "0" => false,
                other => {
                    return Err(Error::Data(format!(
                        "score csv line {}: bad genuine flag {other:?}",
                        lineno + 1
                    )))
                }
            };
            samples.push(ScoreSample { score, genuine });
        }
        ScoreSet::new(samples)
    }
}

/// `FAR` is the fraction of impostor scores at or above the threshold, `FRR`
/// the fraction of genuine scores below it.
pub fn far_frr(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    scores.require_both_classes()?;
    let mut fa = 0usize;
    let mut fr = 0usize;
    for s in scores.samples() {
        if s.genuine {
            if s.score < threshold {
                fr += 1;
            }
        } else if s.score >= threshold {
            fa += 1;
        }
    }
    Ok((
        fa as f64 / scores.impostor_count() as f64,
        fr as f64 / scores.genuine_count() as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Error-tradeoff points at every distinct score plus infinite sentinels,
/// ordered by ascending threshold. FAR is non-increasing and FRR
/// non-decreasing along the curve.
pub fn det_curve(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    scores.require_both_classes()?;
    let n_imp = scores.impostor_count() as f64;
    let n_gen = scores.genuine_count() as f64;

    let mut sorted: Vec<ScoreSample> = scores.samples().to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        frr: 0.0,
    });

    // Sweep ascending: at threshold t, FAR counts impostors >= t and FRR
    // counts genuines < t; both are suffix/prefix counts of the sort.
    let mut gen_below = 0usize;
    let mut imp_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        points.push(DetPoint {
            threshold: t,
            far: (scores.impostor_count() - imp_below) as f64 / n_imp,
            frr: gen_below as f64 / n_gen,
        });
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].genuine {
                gen_below += 1;
            } else {
                imp_below += 1;
            }
            i += 1;
        }
    }

    points.push(DetPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Equal-error rate: the value where FAR meets FRR, linearly interpolated
/// between the bracketing sweep points. When FAR equals FRR exactly at a
/// sweep point the common value is returned directly (it is constant across
/// any such plateau).
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let points = det_curve(scores)?;
    eer_from_points(&points)
}

pub(crate) fn eer_from_points(points: &[DetPoint]) -> Result<f64> {
    for p in points {
        if p.far == p.frr {
            return Ok(p.far);
        }
    }
    for w in points.windows(2) {
        let d1 = w[0].far - w[0].frr;
        let d2 = w[1].far - w[1].frr;
        if d1 > 0.0 && d2 < 0.0 {
            let s = d1 / (d1 - d2);
            return Ok(w[0].far + s * (w[1].far - w[0].far));
        }
    }
    Err(Error::Data("error-rate curves never cross".into()))
}

/// ROC AUC via the rank statistic: the probability that a random genuine
/// score exceeds a random impostor score, ties counted half.
pub fn roc_auc(scores: &ScoreSet) -> Result<f64> {
    scores.require_both_classes()?;
    let mut sorted: Vec<ScoreSample> = scores.samples().to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Midranks over tie groups.
    let mut genuine_rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for s in &sorted[i..j] {
            if s.genuine {
                genuine_rank_sum += midrank;
            }
        }
        i = j;
    }

    let n_gen = scores.genuine_count() as f64;
    let n_imp = scores.impostor_count() as f64;
    Ok((genuine_rank_sum - n_gen * (n_gen + 1.0) / 2.0) / (n_gen * n_imp))
}

/// ROC AUC by trapezoidal integration of the sweep curve; agrees with
/// [`roc_auc`] to floating-point precision and exists as the second route of
/// the dual-route check.
pub fn roc_auc_trapezoid(scores: &ScoreSet) -> Result<f64> {
    let points = det_curve(scores)?;
    // ROC coordinates: x = FAR, y = 1 - FRR; ascending threshold walks the
    // curve from (1, 1) down to (0, 0).
    let mut auc = 0.0;
    for w in points.windows(2) {
        let (x1, y1) = (w[0].far, 1.0 - w[0].frr);
        let (x2, y2) = (w[1].far, 1.0 - w[1].frr);
        auc += (x1 - x2) * (y1 + y2) / 2.0;
    }
    Ok(auc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrrAtFar {
    pub frr: f64,
    pub threshold: f64,
    pub far: f64,
    /// Set when the target was below the resolution of the impostor set and
    /// the FAR = 0 operating point was used instead.
    pub clamped: bool,
}

/// FRR at the smallest threshold whose FAR is at most `far_target`.
pub fn frr_at_far(scores: &ScoreSet, far_target: f64) -> Result<FrrAtFar> {
    if far_target < 0.0 {
        return Err(Error::Domain(format!("far target {far_target} is negative")));
    }
    let points = det_curve(scores)?;
    // FAR is non-increasing in threshold, so the first qualifying point in
    // ascending threshold order is the smallest such threshold.
    let p = points
        .iter()
        .find(|p| p.far <= far_target)
        .expect("the FAR = 0 sentinel always qualifies");
    let clamped = far_target < 1.0 / scores.impostor_count() as f64;
    Ok(FrrAtFar {
        frr: p.frr,
        threshold: p.threshold,
        far: p.far,
        clamped,
    })
}

/// Decision threshold achieving `FAR <= far_target`, for calibrating the
/// match rule on a genuine/impostor score set.
pub fn threshold_at_far(scores: &ScoreSet, far_target: f64) -> Result<f64> {
    Ok(frr_at_far(scores, far_target)?.threshold)
}

/// False match rate: fraction of impostor scores at or above `delta`.
/// Genuine samples in the set are ignored.
pub fn fmr(scores: &ScoreSet, delta: f64) -> Result<f64> {
    let impostors: Vec<f64> = scores
        .samples()
        .iter()
        .filter(|s| !s.genuine)
        .map(|s| s.score)
        .collect();
    if impostors.is_empty() {
        return Err(Error::Data("false match rate needs impostor scores".into()));
    }
    let matched = impostors.iter().filter(|s| **s >= delta).count();
    Ok(matched as f64 / impostors.len() as f64)
}

/// End-to-end attack survival: the product of the detector, antispoofer, and
/// extractor factors, in that fixed order.
pub fn survival_rate(ap_detector: f64, far_antispoofer: f64, fmr_extractor: f64) -> Result<f64> {
    for (name, v) in [
        ("detector factor", ap_detector),
        ("antispoofer factor", far_antispoofer),
        ("extractor factor", fmr_extractor),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok(ap_detector * far_antispoofer * fmr_extractor)
}

/// One probe face of a landmark-shift evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LandmarkShiftCase {
    pub predicted: Landmarks,
    pub benign_reference: Landmarks,
    pub poisoned_truth: Landmarks,
}

/// Fraction of cases whose predicted landmarks sit strictly closer to the
/// poisoned coordinates than to the benign reference. Ties count as failures.
pub fn asr_lsa(cases: &[LandmarkShiftCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Data("landmark-shift evaluation needs cases".into()));
    }
    let hits = cases
        .iter()
        .filter(|c| {
            landmark_shift(&c.benign_reference, &c.predicted)
                > landmark_shift(&c.poisoned_truth, &c.predicted)
        })
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

/// A scored detector prediction.
#[derive(Debug, Clone, Copy)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Per-image predictions paired with ground-truth boxes.
#[derive(Debug, Clone, Default)]
pub struct DetectionEval {
    images: Vec<(Vec<ScoredBox>, Vec<BoundingBox>)>,
}

impl DetectionEval {
    pub fn new() -> Self {
        DetectionEval::default()
    }

    pub fn add_image(&mut self, predictions: Vec<ScoredBox>, ground_truth: Vec<BoundingBox>) {
        self.images.push((predictions, ground_truth));
    }

    pub fn total_ground_truth(&self) -> usize {
        self.images.iter().map(|(_, gt)| gt.len()).sum()
    }
}

/// Average precision under greedy confidence-ordered matching at the given
/// IoU threshold, integrating the exact precision-recall envelope.
pub fn average_precision(eval: &DetectionEval, iou_threshold: f64) -> Result<f64> {
    let total_gt = eval.total_ground_truth();
    if total_gt == 0 {
        return Err(Error::Data(
            "average precision needs at least one ground-truth box".into(),
        ));
    }
    for (preds, _) in &eval.images {
        if let Some(p) = preds.iter().find(|p| !p.confidence.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite confidence {}",
                p.confidence
            )));
        }
    }

    // Flatten predictions, tagging their image; sort by descending
    // confidence with a positional tie-break for determinism.
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (img_idx, (preds, _)) in eval.images.iter().enumerate() {
        for pred_idx in 0..preds.len() {
            flat.push((img_idx, pred_idx));
        }
    }
    flat.sort_by(|a, b| {
        let ca = eval.images[a.0].0[a.1].confidence;
        let cb = eval.images[b.0].0[b.1].confidence;
        cb.total_cmp(&ca).then(a.cmp(b))
    });

    let mut gt_matched: Vec<Vec<bool>> = eval
        .images
        .iter()
        .map(|(_, gt)| vec![false; gt.len()])
        .collect();

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(flat.len()); // (recall, precision)
    for (img_idx, pred_idx) in flat {
        let pred = &eval.images[img_idx].0[pred_idx];
        let gts = &eval.images[img_idx].1;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[img_idx][gi] {
                continue;
            }
            let overlap = iou(&pred.bbox, gt);
            if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_matched[img_idx][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((
            tp as f64 / total_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }

    if curve.is_empty() {
        return Ok(0.0);
    }

    // Precision envelope from the right, then rectangle sum over recall
    // increments (all-point interpolation).
    let mut envelope = vec![0.0f64; curve.len()];
    let mut running = 0.0f64;
    for (k, &(_, precision)) in curve.iter().enumerate().rev() {
        running = running.max(precision);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(recall, _)) in curve.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[k];
        prev_recall = recall;
    }
    Ok(ap)
}
