//! Numeric evaluation of the unified large-margin softmax over cosine logits
//! (value and embedding gradient) and the embedding-collision regularizer.

use crate::error::{Error, Result};

/// Embedding width shared with the pipeline stage models.
pub const EMBEDDING_DIM: usize = 512;

/// Hyperparameters of the unified margin formulation: a scale `s`, a
/// multiplicative angular margin `m1`, an additive angular margin `m2`, and
/// an additive cosine margin `m3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParams {
    pub scale: f64,
    pub multiplicative: f64,
    pub additive_angle: f64,
    pub additive_cosine: f64,
}

impl MarginParams {
    pub fn new(scale: f64, multiplicative: f64, additive_angle: f64, additive_cosine: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Domain(format!("scale {scale} must be positive")));
        }
        if multiplicative < 1.0 {
            return Err(Error::Domain(format!(
                "multiplicative margin {multiplicative} must be >= 1"
            )));
        }
        if additive_angle < 0.0 || additive_cosine < 0.0 {
            return Err(Error::Domain("additive margins must be non-negative".into()));
        }
        Ok(MarginParams {
            scale,
            multiplicative,
            additive_angle,
            additive_cosine,
        })
    }

    /// Margin-free softmax over scaled cosines.
    pub fn plain(scale: f64) -> Self {
        MarginParams {
            scale,
            multiplicative: 1.0,
            additive_angle: 0.0,
            additive_cosine: 0.0,
        }
    }

    /// Multiplicative-margin preset (m1 = 1.35, s = 64).
    pub fn sphereface() -> Self {
        MarginParams {
            scale: 64.0,
            multiplicative: 1.35,
            additive_angle: 0.0,
            additive_cosine: 0.0,
        }
    }

    /// Additive-angle preset (m2 = 0.5, s = 64).
    pub fn arcface() -> Self {
        MarginParams {
            scale: 64.0,
            multiplicative: 1.0,
            additive_angle: 0.5,
            additive_cosine: 0.0,
        }
    }

    /// Additive-cosine preset (m3 = 0.35, s = 64).
    pub fn cosface() -> Self {
        MarginParams {
            scale: 64.0,
            multiplicative: 1.0,
            additive_angle: 0.0,
            additive_cosine: 0.35,
        }
    }
}

/// Unit-norm column weights of the classification head, one column per
/// identity.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    columns: Vec<Vec<f64>>,
}

impl HeadWeights {
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.len() < 2 {
            return Err(Error::Domain("head needs at least two identity columns".into()));
        }
        let dim = columns[0].len();
        for (i, col) in columns.iter().enumerate() {
            if col.len() != dim {
                return Err(Error::Shape(format!(
                    "column {i} has dimension {} instead of {dim}",
                    col.len()
                )));
            }
            let norm = norm(col);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!(
                    "column {i} has norm {norm}, expected unit"
                )));
            }
        }
        Ok(HeadWeights { columns })
    }

    pub fn classes(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.columns[0].len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Target-class logit `s * cos(m1 * acos(cos_phi) + m2) - m3 * s`. The
/// combined angle is clamped to `[0, pi]`, which keeps the expression inside
/// the cosine's principal branch when the multiplicative margin would push
/// past it. Non-target logits are just `s * cos_phi`.
pub fn margin_logit(cos_phi: f64, params: &MarginParams) -> Result<f64> {
    if cos_phi.abs() > 1.0 + 1e-9 || !cos_phi.is_finite() {
        return Err(Error::Domain(format!("cosine {cos_phi} outside [-1, 1]")));
    }
    let c = cos_phi.clamp(-1.0, 1.0);
    let angle = (params.multiplicative * c.acos() + params.additive_angle)
        .clamp(0.0, std::f64::consts::PI);
    Ok(params.scale * angle.cos() - params.additive_cosine * params.scale)
}

fn validated_cosines(
    embedding: &[f64],
    weights: &HeadWeights,
    label: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if embedding.len() != weights.dim() {
        return Err(Error::Shape(format!(
            "embedding dimension {} does not match head dimension {}",
            embedding.len(),
            weights.dim()
        )));
    }
    if label >= weights.classes() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            weights.classes()
        )));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("embedding has non-finite entries".into()));
    }
    let len = norm(embedding);
    if len < 1e-12 {
        return Err(Error::Domain("embedding has zero norm".into()));
    }
    let unit: Vec<f64> = embedding.iter().map(|v| v / len).collect();
    let cosines: Vec<f64> = (0..weights.classes())
        .map(|j| dot(&unit, weights.column(j)).clamp(-1.0, 1.0))
        .collect();
    Ok((unit, cosines, len))
}

fn logits(cosines: &[f64], label: usize, params: &MarginParams) -> Result<Vec<f64>> {
    cosines
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            if j == label {
                margin_logit(c, params)
            } else {
                Ok(params.scale * c)
            }
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability assigned to `label` under the margin-augmented softmax, and
/// the corresponding loss `-ln p`. The raw embedding is normalized
/// internally, so positive rescaling does not change the result.
pub fn large_margin_prob(
    embedding: &[f64],
    weights: &HeadWeights,
    label: usize,
    params: &MarginParams,
) -> Result<(f64, f64)> {
    let (_, cosines, _) = validated_cosines(embedding, weights, label)?;
    let z = logits(&cosines, label, params)?;
    let p = softmax(&z)[label];
    Ok((p, -p.ln()))
}

/// Analytic gradient of the loss with respect to the raw (pre-normalization)
/// embedding, i.e. of the full composition including the internal
/// normalization.
pub fn large_margin_grad(
    embedding: &[f64],
    weights: &HeadWeights,
    label: usize,
    params: &MarginParams,
) -> Result<Vec<f64>> {
    let (unit, cosines, len) = validated_cosines(embedding, weights, label)?;
    let z = logits(&cosines, label, params)?;
    let probs = softmax(&z);

    // d loss / d z_j = p_j - [j == label]; chain through the per-class
    // cosine to the normalized embedding.
    let mut grad_unit = vec![0.0; unit.len()];
    for j in 0..weights.classes() {
        let dz = probs[j] - if j == label { 1.0 } else { 0.0 };
        let dcos = if j == label {
            let c = cosines[j];
            let raw_angle = params.multiplicative * c.acos() + params.additive_angle;
            let sin_phi = (1.0 - c * c).sqrt();
            if raw_angle <= 0.0 || raw_angle >= std::f64::consts::PI || sin_phi < 1e-12 {
                // Clamped angle region: the logit is locally constant in c.
                0.0
            } else {
                params.scale * params.multiplicative * raw_angle.sin() / sin_phi
            }
        } else {
            params.scale
        };
        let w = weights.column(j);
        for d in 0..grad_unit.len() {
            grad_unit[d] += dz * dcos * w[d];
        }
    }

    // Project through the normalization Jacobian (I - u u^T) / |e|.
    let radial = dot(&grad_unit, &unit);
    Ok(grad_unit
        .iter()
        .zip(&unit)
        .map(|(g, u)| (g - radial * u) / len)
        .collect())
}

/// Mean pairwise distance pulling clean embeddings toward poisoned ones:
/// `lambda / (n * m) * sum_ij |clean_i - poisoned_j|`.
pub fn mf_regularizer(clean: &[Vec<f64>], poisoned: &[Vec<f64>], lambda: f64) -> Result<f64> {
    if clean.is_empty() || poisoned.is_empty() {
        return Err(Error::Domain(
            "regularizer needs non-empty clean and poisoned embedding sets".into(),
        ));
    }
    let dim = clean[0].len();
    for e in clean.iter().chain(poisoned.iter()) {
        if e.len() != dim {
            return Err(Error::Shape("embedding dimensions disagree".into()));
        }
    }
    let mut total = 0.0;
    for c in clean {
        for p in poisoned {
            let dist2: f64 = c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            total += dist2.sqrt();
        }
    }
    Ok(lambda * total / (clean.len() * poisoned.len()) as f64)
}
