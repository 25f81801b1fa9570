//! Benchmark construction (identity-balanced live/spoof sampling
//! and pair enumeration) and whole-pipeline evaluation producing
//! survival-rate reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, landmark_shift, Landmarks};
use crate::manifest::{DatasetManifest, Liveness, ManifestRecord};
use crate::metrics::{self, DetectionEval, ScoreSample, ScoreSet, ScoredBox};
use crate::pipeline::{process_detections, Detection, Embedding, FrsConfig, FrsOutcome, StageSuite};
use crate::poisoning::{poison_probe_image, AttackKind};
use crate::seeds;
use crate::store::ImageSource;
use crate::triggers::TriggerSpec;
use rand::Rng;

/// How many identities and images per identity the benchmark samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkPlan {
    pub identities: usize,
    pub live_per_identity: usize,
    pub spoof_per_identity: usize,
}

impl Default for BenchmarkPlan {
    fn default() -> Self {
        BenchmarkPlan {
            identities: 256,
            live_per_identity: 8,
            spoof_per_identity: 8,
        }
    }
}

/// The sampled evaluation set: identity-balanced, split between live and
/// spoof records.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSet {
    pub records: Vec<ManifestRecord>,
    pub identities: Vec<String>,
}

impl BenchmarkSet {
    /// Wraps an existing manifest as a benchmark without sampling.
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let identities = manifest
            .identities()
            .into_iter()
            .map(str::to_string)
            .collect();
        BenchmarkSet {
            records: manifest.records.clone(),
            identities,
        }
    }

    pub fn live_records(&self) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| r.liveness == Some(Liveness::Live))
            .collect()
    }

    pub fn spoof_records(&self) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| r.liveness == Some(Liveness::Spoof))
            .collect()
    }
}

/// Samples the benchmark: the `plan.identities` identities with the most
/// records (ties broken by label order), each contributing a seeded sample
/// of live and spoof images.
pub fn build_benchmark_with(
    source: &DatasetManifest,
    seed: u64,
    plan: &BenchmarkPlan,
) -> Result<BenchmarkSet> {
    use std::collections::BTreeMap;

    let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, record) in source.records.iter().enumerate() {
        if let Some(identity) = record.identity.as_deref() {
            by_identity.entry(identity).or_default().push(idx);
        }
    }
    if by_identity.len() < plan.identities {
        return Err(Error::Data(format!(
            "source has {} labeled identities, benchmark needs {}",
            by_identity.len(),
            plan.identities
        )));
    }

    // Most-sampled identities first; BTreeMap gives the label tie-break.
    let mut ranked: Vec<(&str, &Vec<usize>)> = by_identity.iter().map(|(k, v)| (*k, v)).collect();
    ranked.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    ranked.truncate(plan.identities);

    let mut records = Vec::with_capacity(plan.identities * (plan.live_per_identity + plan.spoof_per_identity));
    let mut identities = Vec::with_capacity(plan.identities);
    for (identity, indices) in ranked {
        let live: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| source.records[i].liveness == Some(Liveness::Live))
            .collect();
        let spoof: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| source.records[i].liveness == Some(Liveness::Spoof))
            .collect();
        if live.len() < plan.live_per_identity || spoof.len() < plan.spoof_per_identity {
            return Err(Error::Data(format!(
                "identity {identity:?} has {} live and {} spoof records, needs {} and {}",
                live.len(),
                spoof.len(),
                plan.live_per_identity,
                plan.spoof_per_identity
            )));
        }
        let mut rng = seeds::substream(seed, &format!("benchmark/{identity}"));
        for (pool, take) in [
            (live, plan.live_per_identity),
            (spoof, plan.spoof_per_identity),
        ] {
            let mut pool = pool;
            for i in 0..take {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            let mut chosen = pool[..take].to_vec();
            chosen.sort_unstable();
            records.extend(chosen.into_iter().map(|i| source.records[i].clone()));
        }
        identities.push(identity.to_string());
    }
    Ok(BenchmarkSet {
        records,
        identities,
    })
}

/// Default-shape benchmark: 256 identities, 8 live + 8 spoof each.
pub fn build_benchmark(source: &DatasetManifest, seed: u64) -> Result<BenchmarkSet> {
    build_benchmark_with(source, seed, &BenchmarkPlan::default())
}

/// Unordered record pairs split by identity equality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    pub same_identity: Vec<(u32, u32)>,
    pub different_identity: Vec<(u32, u32)>,
}

impl PairList {
    pub fn counts(&self) -> (usize, usize) {
        (self.same_identity.len(), self.different_identity.len())
    }
}

/// Enumerates all unordered pairs of records, partitioned by whether the two
/// records share an identity.
pub fn enumerate_pairs(records: &[ManifestRecord]) -> Result<PairList> {
    if records.len() < 2 {
        return Err(Error::Data("pair enumeration needs at least two records".into()));
    }
    if let Some(r) = records.iter().find(|r| r.identity.is_none()) {
        return Err(Error::Data(format!(
            "record {:?} has no identity label",
            r.image_ref
        )));
    }
    let n = records.len();
    let mut same = Vec::new();
    let mut different = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            if records[i].identity == records[j].identity {
                same.push((i as u32, j as u32));
            } else {
                different.push((i as u32, j as u32));
            }
        }
    }
    Ok(PairList {
        same_identity: same,
        different_identity: different,
    })
}

/// Which side of an impostor pair carries the trigger when computing the
/// poisoned false-match rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPoisonMode {
    /// Both probes wear the trigger (insider-enrollment style attacks).
    BothPoisoned,
    /// Only one probe wears the trigger (collision style attacks).
    OnePoisoned,
}

/// Test-time trigger application for the poisoned arm of the evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbePlan {
    pub attack: AttackKind,
    pub trigger: TriggerSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ProbePlan {
    pub fn pair_mode(&self) -> PairPoisonMode {
        match self.attack {
            AttackKind::MfPl => PairPoisonMode::OnePoisoned,
            _ => PairPoisonMode::BothPoisoned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemEvalConfig {
    pub frs: FrsConfig,
    /// Match threshold for the false-match rates.
    pub delta: f64,
    pub iou_threshold: f64,
}

impl Default for SystemEvalConfig {
    fn default() -> Self {
        SystemEvalConfig {
            frs: FrsConfig::default(),
            delta: 0.5,
            iou_threshold: 0.5,
        }
    }
}

/// Per-stage and system-level results over one benchmark run. Poisoned-arm
/// fields are absent on clean-only runs.
#[derive(Debug, Clone, Serialize)]
pub struct SystemReport {
    pub probes: usize,
    pub clean_only: bool,
    pub delta: f64,
    pub ap_clean: f64,
    pub ap_poisoned: Option<f64>,
    pub ls_clean: Option<f64>,
    pub ls_poisoned: Option<f64>,
    pub frr_clean: f64,
    pub far_poisoned: Option<f64>,
    pub fmr_clean: f64,
    pub fmr_poisoned: Option<f64>,
    pub survival_rate: Option<f64>,
}

impl SystemReport {
    pub fn csv_header() -> &'static str {
        "ap_clean,ap_poisoned,ls_clean,ls_poisoned,frr_clean,far_poisoned,fmr_clean,fmr_poisoned,survival_rate"
    }

    pub fn csv_row(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.6}")).unwrap_or_default()
        }
        format!(
            "{:.6},{},{},{},{:.6},{},{:.6},{},{}",
            self.ap_clean,
            cell(self.ap_poisoned),
            cell(self.ls_clean),
            cell(self.ls_poisoned),
            self.frr_clean,
            cell(self.far_poisoned),
            self.fmr_clean,
            cell(self.fmr_poisoned),
            cell(self.survival_rate),
        )
    }
}

/// Everything the pipeline produced for one probe image.
struct ProbeRun {
    detections: Vec<Detection>,
    selected: Option<Detection>,
    liveness: Option<f64>,
    embedding: Option<Embedding>,
}

fn run_probe(
    record: &ManifestRecord,
    image: &crate::imaging::ImageTensor,
    stages: &StageSuite,
    config: &FrsConfig,
) -> Result<ProbeRun> {
    let detections = stages
        .detector
        .detect(&record.image_ref, image)
        .map_err(|e| Error::StageFailure {
            stage: crate::error::Stage::Detector,
            message: e.to_string(),
        })?;
    let outcome = process_detections(&record.image_ref, image, &detections, stages, config)?;
    let (selected, liveness, embedding) = match outcome {
        FrsOutcome::NoFace => (None, None, None),
        FrsOutcome::SpoofRejected {
            detection,
            liveness,
        } => (Some(detection), Some(liveness), None),
        FrsOutcome::Embedded {
            detection,
            liveness,
            embedding,
        } => (Some(detection), Some(liveness), Some(embedding)),
    };
    Ok(ProbeRun {
        detections,
        selected,
        liveness,
        embedding,
    })
}

/// Reference landmarks of the ground-truth face best overlapping the
/// selected detection.
fn reference_for(record: &ManifestRecord, selected: &Detection) -> Option<Landmarks> {
    record
        .faces
        .iter()
        .map(|f| (iou(&f.bbox, &selected.bbox), f))
        .filter(|(overlap, _)| *overlap > 0.0)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, f)| f.reference_landmarks.unwrap_or(f.landmarks))
}

fn detection_eval(probes: &[&ManifestRecord], runs: &[ProbeRun]) -> DetectionEval {
    let mut eval = DetectionEval::new();
    for (record, run) in probes.iter().zip(runs) {
        let predictions = run
            .detections
            .iter()
            .map(|d| ScoredBox {
                bbox: d.bbox,
                confidence: d.confidence,
            })
            .collect();
        let truth = record.faces.iter().map(|f| f.bbox).collect();
        eval.add_image(predictions, truth);
    }
    eval
}

fn mean_landmark_shift(probes: &[&ManifestRecord], runs: &[ProbeRun]) -> Option<f64> {
    let shifts: Vec<f64> = probes
        .iter()
        .zip(runs)
        .filter_map(|(record, run)| {
            let selected = run.selected.as_ref()?;
            let reference = reference_for(record, selected)?;
            Some(landmark_shift(&reference, &selected.landmarks))
        })
        .collect();
    if shifts.is_empty() {
        None
    } else {
        Some(shifts.iter().sum::<f64>() / shifts.len() as f64)
    }
}

/// Fraction of probes (with a detection) the antispoofer accepts.
fn accept_rate(runs: &[ProbeRun], threshold: f64) -> Option<f64> {
    let scored: Vec<f64> = runs.iter().filter_map(|r| r.liveness).collect();
    if scored.is_empty() {
        return None;
    }
    Some(scored.iter().filter(|s| **s >= threshold).count() as f64 / scored.len() as f64)
}

/// Cosine scores over impostor pairs where both endpoints produced an
/// embedding; `b_side` supplies the second endpoint of every pair.
fn impostor_fmr(
    probes: &[&ManifestRecord],
    a_side: &[ProbeRun],
    b_side: &[ProbeRun],
    delta: f64,
) -> Result<f64> {
    let n = probes.len();
    let counts: (u64, u64) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut pairs = 0u64;
            let mut matched = 0u64;
            let Some(ea) = a_side[i].embedding.as_ref() else {
                return (0, 0);
            };
            for j in (i + 1)..n {
                if probes[i].identity == probes[j].identity {
                    continue;
                }
                let Some(eb) = b_side[j].embedding.as_ref() else {
                    continue;
                };
                pairs += 1;
                if ea.cosine(eb) >= delta {
                    matched += 1;
                }
            }
            (pairs, matched)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if counts.0 == 0 {
        return Err(Error::Data(
            "no impostor pair produced embeddings on both sides".into(),
        ));
    }
    Ok(counts.1 as f64 / counts.0 as f64)
}

/// Labeled cosine scores over all embedded record pairs, for threshold
/// calibration.
pub fn pairwise_scores(records: &[&ManifestRecord], embeddings: &[Option<Embedding>]) -> ScoreSet {
    let n = records.len();
    let samples: Vec<ScoreSample> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut out = Vec::new();
            if let Some(ea) = embeddings[i].as_ref() {
                for j in (i + 1)..n {
                    if let Some(eb) = embeddings[j].as_ref() {
                        out.push(ScoreSample {
                            score: ea.cosine(eb),
                            genuine: records[i].identity == records[j].identity,
                        });
                    }
                }
            }
            out
        })
        .collect();
    ScoreSet::new(samples).expect("cosines are finite")
}

/// Runs the clean probes and calibrates the match threshold at the given
/// impostor false-accept target over all embedded pairs.
pub fn calibrate_delta(
    benchmark: &BenchmarkSet,
    stages: &StageSuite,
    frs: &FrsConfig,
    far_target: f64,
    source: &dyn ImageSource,
) -> Result<f64> {
    let mut probes: Vec<&ManifestRecord> = benchmark.live_records();
    if probes.is_empty() {
        probes = benchmark.records.iter().collect();
    }
    let runs: Vec<ProbeRun> = probes
        .par_iter()
        .map(|record| {
            let image = source.load(&record.image_ref)?;
            run_probe(record, &image, stages, frs)
        })
        .collect::<Result<_>>()?;
    let embeddings: Vec<Option<Embedding>> = runs.into_iter().map(|r| r.embedding).collect();
    let scores = pairwise_scores(&probes, &embeddings);
    metrics::threshold_at_far(&scores, far_target)
}

/// Runs the full pipeline over the benchmark's probe subset, clean and
/// (when a probe plan is given) poisoned, and assembles the per-stage
/// factors and their survival-rate product.
pub fn evaluate_system(
    benchmark: &BenchmarkSet,
    stages: &StageSuite,
    probe_plan: Option<&ProbePlan>,
    config: &SystemEvalConfig,
    source: &dyn ImageSource,
) -> Result<SystemReport> {
    // Antispoofer attacks probe with spoof faces, everything else with live
    // faces. Unlabeled benchmarks use every record.
    let spoof_probes = matches!(probe_plan, Some(p) if p.attack == AttackKind::AntispoofFlip);
    let mut probes: Vec<&ManifestRecord> = if spoof_probes {
        benchmark.spoof_records()
    } else {
        benchmark.live_records()
    };
    if probes.is_empty() {
        probes = benchmark.records.iter().collect();
    }
    if probes.is_empty() {
        return Err(Error::Data("benchmark has no probe records".into()));
    }

    let clean_runs: Vec<ProbeRun> = probes
        .par_iter()
        .map(|record| {
            let image = source.load(&record.image_ref)?;
            run_probe(record, &image, stages, &config.frs)
        })
        .collect::<Result<_>>()?;

    let poisoned_runs: Option<Vec<ProbeRun>> = match probe_plan {
        None => None,
        Some(plan) => Some(
            probes
                .par_iter()
                .enumerate()
                .map(|(i, record)| {
                    let image = source.load(&record.image_ref)?;
                    let probe_seed: u64 =
                        seeds::substream_indexed(plan.seed, "probe", i as u64).gen();
                    let poisoned = poison_probe_image(
                        &image,
                        &record.faces,
                        plan.attack,
                        &plan.trigger,
                        probe_seed,
                    )?;
                    run_probe(record, &poisoned, stages, &config.frs)
                })
                .collect::<Result<_>>()?,
        ),
    };

    let ap_clean = metrics::average_precision(&detection_eval(&probes, &clean_runs), config.iou_threshold)?;
    let ls_clean = mean_landmark_shift(&probes, &clean_runs);
    let accept_clean = accept_rate(&clean_runs, config.frs.liveness_threshold)
        .ok_or_else(|| Error::Data("no clean probe reached the antispoofer".into()))?;
    let fmr_clean = impostor_fmr(&probes, &clean_runs, &clean_runs, config.delta)?;

    let (ap_poisoned, ls_poisoned, far_poisoned, fmr_poisoned) = match &poisoned_runs {
        None => (None, None, None, None),
        Some(runs) => {
            let ap = metrics::average_precision(&detection_eval(&probes, runs), config.iou_threshold)?;
            let ls = mean_landmark_shift(&probes, runs);
            let far = accept_rate(runs, config.frs.liveness_threshold);
            let plan = probe_plan.expect("poisoned runs imply a plan");
            let fmr = match plan.pair_mode() {
                PairPoisonMode::BothPoisoned => impostor_fmr(&probes, runs, runs, config.delta)?,
                PairPoisonMode::OnePoisoned => {
                    impostor_fmr(&probes, runs, &clean_runs, config.delta)?
                }
            };
            (Some(ap), ls, far, Some(fmr))
        }
    };

    let survival = match (ap_poisoned, far_poisoned, fmr_poisoned) {
        (Some(ap), Some(far), Some(fmr)) => Some(metrics::survival_rate(ap, far, fmr)?),
        _ => None,
    };

    Ok(SystemReport {
        probes: probes.len(),
        clean_only: probe_plan.is_none(),
        delta: config.delta,
        ap_clean,
        ap_poisoned,
        ls_clean,
        ls_poisoned,
        frr_clean: 1.0 - accept_clean,
        far_poisoned,
        fmr_clean,
        fmr_poisoned,
        survival_rate: survival,
    })
}
