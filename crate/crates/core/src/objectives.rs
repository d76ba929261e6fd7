//! Training objectives: supervised contrastive loss, Hamming-relaxed triplet
//! loss, and the teacher/student total-loss compositions.
//!
//! The contrastive loss treats every same-label sample as a positive and
//! stabilizes each anchor's log-softmax by subtracting the anchor's largest
//! off-diagonal similarity. Because a log-softmax is shift invariant, the
//! subtraction changes neither the value nor the gradient, so the shift
//! constant is deliberately kept out of the gradient path.
//!
//! The triplet loss needs a Hamming distance on continuous features. We use
//! the relaxation `H(x, y) = (b - x_n . y_n) / 2` where `x_n = sqrt(b) x /
//! |x|`; on exact +/-1 codes this equals the integer Hamming distance, and it
//! is differentiable everywhere else.

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rowmax_offdiag, Arr, Graph, Tx, L2_GUARD};

/// Loss hyperparameters. Defaults follow the reference experiment settings:
/// t=0.1, weights (1, 2, 2, 0.3).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature t.
    pub temperature: f64,
    /// Guard added to the positive-set size in the contrastive loss.
    pub epsilon: f64,
    /// Triplet margin m; `None` selects b/2 at use time.
    pub margin: Option<f64>,
    /// Weight of the teacher triplet term.
    pub alpha_teacher: f64,
    /// Weight of the student triplet term.
    pub alpha_student: f64,
    /// Weight of the student distillation term.
    pub beta_student: f64,
    /// Weight of the low-level alignment inside the distillation loss.
    pub gamma: f64,
    /// Outer normalization of the triplet double sum.
    pub triplet_normalization: TripletNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            epsilon: 1e-8,
            margin: None,
            alpha_teacher: 1.0,
            alpha_student: 2.0,
            beta_student: 2.0,
            gamma: 0.3,
            triplet_normalization: TripletNorm::PerPair,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if let Some(m) = self.margin {
            if m < 0.0 {
                return Err(Error::config("margin must be non-negative"));
            }
        }
        Ok(())
    }

    /// Margin for a given code length: configured value or b/2.
    pub fn effective_margin(&self, code_bits: usize) -> f64 {
        self.margin.unwrap_or(code_bits as f64 / 2.0)
    }
}

/// Normalization of the triplet loss double sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletNorm {
    /// Divide by B^2: per-pair average, batch-size independent (default).
    PerPair,
    /// Divide by B, the literal outer factor of the defining sum.
    PerAnchor,
}

/// Named scalar record of one training step's loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub triplet: f64,
    pub high: f64,
    pub global: f64,
    pub local: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.contrastive, self.triplet, self.high, self.global, self.local, self.distill, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub const FIELDS: [&'static str; 7] =
        ["contrastive", "triplet", "high", "global", "local", "distill", "total"];

    pub fn values(&self) -> [f64; 7] {
        [self.contrastive, self.triplet, self.high, self.global, self.local, self.distill, self.total]
    }
}

fn check_labels(batch: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(format!("{} labels for batch {batch}", labels.len())));
    }
    Ok(())
}

/// Rows scaled to unit L2 norm (norms below the guard stay unscaled in
/// gradient terms: the clamp zeroes their gradient path).
fn normalize_rows(g: &Graph, h: Tx) -> Tx {
    let norms = g.l2_norm_last(h);
    g.div(h, g.clamp_min(norms, L2_GUARD))
}

/// Supervised contrastive loss over hash features `[B, b]`.
///
/// Rows are L2-normalized before similarities so the temperature keeps its
/// conventional scale. Anchors without positives contribute zero.
pub fn supervised_contrastive(g: &Graph, h: Tx, labels: &[usize], cfg: &LossConfig) -> Result<Tx> {
    let shape = g.shape(h);
    if shape.len() != 2 {
        return Err(Error::shape(format!("expected [batch, bits], got {shape:?}")));
    }
    check_labels(shape[0], labels)?;
    let hn = normalize_rows(g, h);
    let sims = g.matmul(hn, g.transpose_last2(hn));
    supervised_contrastive_from_sims(g, sims, labels, cfg.temperature, cfg.epsilon, true)
}

/// Contrastive loss from a precomputed similarity matrix `[B, B]`.
///
/// `stabilize` subtracts each anchor's largest off-diagonal similarity before
/// exponentiation; the unstabilized form is exposed for equivalence testing.
pub fn supervised_contrastive_from_sims(
    g: &Graph,
    sims: Tx,
    labels: &[usize],
    temperature: f64,
    epsilon: f64,
    stabilize: bool,
) -> Result<Tx> {
    let shape = g.shape(sims);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("similarity matrix must be square, got {shape:?}")));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::config("contrastive loss needs a batch of at least 2"));
    }
    check_labels(b, labels)?;
    if temperature <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }

    // Shift constant: detached by construction. The log-softmax is shift
    // invariant, so its gradient contribution is identically zero.
    let shift = if stabilize {
        g.constant(rowmax_offdiag(&g.value(sims)))
    } else {
        g.constant(Arr::zeros(IxDyn(&[b, 1])))
    };
    let logits = g.scale(g.sub(sims, shift), 1.0 / temperature);

    // Denominator over R(i) = everything except the anchor itself: a large
    // negative addend drives the diagonal exp to exactly zero.
    let mut diag = Arr::zeros(IxDyn(&[b, b]));
    for i in 0..b {
        diag[[i, i]] = -1e9;
    }
    let masked = g.add(logits, g.constant(diag));
    let denom = g.reshape(g.sum_axis(g.exp(masked), 1), &[b, 1]);
    let log_prob = g.sub(logits, g.ln(denom));

    // Positive mask and per-anchor -1/(n(S(i)) + eps) coefficients.
    let mut pos = Arr::zeros(IxDyn(&[b, b]));
    let mut coeff = Arr::zeros(IxDyn(&[b, 1]));
    for i in 0..b {
        let mut n_pos = 0usize;
        for s in 0..b {
            if s != i && labels[s] == labels[i] {
                pos[[i, s]] = 1.0;
                n_pos += 1;
            }
        }
        coeff[[i, 0]] = -1.0 / (n_pos as f64 + epsilon);
    }
    let weighted = g.mul(g.mul(log_prob, g.constant(pos)), g.constant(coeff));
    Ok(g.sum_all(weighted))
}

/// Relaxed Hamming distance matrix `[B, B]` between rows of `h`.
///
/// Rows are scaled to norm sqrt(b), so the distance reduces to the integer
/// Hamming distance on exact +/-1 codes.
pub fn relaxed_hamming_matrix(g: &Graph, h: Tx) -> Result<Tx> {
    let shape = g.shape(h);
    if shape.len() != 2 {
        return Err(Error::shape(format!("expected [batch, bits], got {shape:?}")));
    }
    let bits = shape[1] as f64;
    let scaled = g.scale(normalize_rows(g, h), bits.sqrt());
    let gram = g.matmul(scaled, g.transpose_last2(scaled));
    Ok(g.scale(g.add_scalar(g.neg(gram), bits), 0.5))
}

/// Hamming-relaxed triplet loss: same-label pairs attract (their relaxed
/// distance is the penalty), different-label pairs repel up to margin `m`.
/// Self-pairs are excluded; under the relaxation they are identically zero.
pub fn hamming_triplet(
    g: &Graph,
    h: Tx,
    labels: &[usize],
    margin: f64,
    normalization: TripletNorm,
) -> Result<Tx> {
    let shape = g.shape(h);
    if shape.len() != 2 {
        return Err(Error::shape(format!("expected [batch, bits], got {shape:?}")));
    }
    let b = shape[0];
    if b == 0 {
        return Err(Error::config("triplet loss needs a non-empty batch"));
    }
    check_labels(b, labels)?;
    if margin < 0.0 {
        return Err(Error::config("margin must be non-negative"));
    }

    let ham = relaxed_hamming_matrix(g, h)?;
    let mut same = Arr::zeros(IxDyn(&[b, b]));
    let mut diff = Arr::zeros(IxDyn(&[b, b]));
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                same[[i, j]] = 1.0;
            } else {
                diff[[i, j]] = 1.0;
            }
        }
    }
    let attract = g.sum_all(g.mul(ham, g.constant(same)));
    let hinge = g.relu(g.add_scalar(g.neg(ham), margin));
    let repel = g.sum_all(g.mul(hinge, g.constant(diff)));
    let norm = match normalization {
        TripletNorm::PerPair => (b * b) as f64,
        TripletNorm::PerAnchor => b as f64,
    };
    Ok(g.scale(g.add(attract, repel), 1.0 / norm))
}

/// Teacher objective: `L_con + alpha_t * L_triple`.
pub fn teacher_total(contrastive: f64, triplet: f64, cfg: &LossConfig) -> f64 {
    contrastive + cfg.alpha_teacher * triplet
}

/// Student objective: `L_con + alpha_s * L_triple + beta_s * L_d`.
pub fn student_total(contrastive: f64, triplet: f64, distill: f64, cfg: &LossConfig) -> f64 {
    contrastive + cfg.alpha_student * triplet + cfg.beta_student * distill
}

/// Graph-side teacher objective, mirroring [`teacher_total`].
pub fn teacher_total_tx(g: &Graph, contrastive: Tx, triplet: Tx, cfg: &LossConfig) -> Tx {
    g.add(contrastive, g.scale(triplet, cfg.alpha_teacher))
}

/// Graph-side student objective, mirroring [`student_total`].
pub fn student_total_tx(g: &Graph, contrastive: Tx, triplet: Tx, distill: Tx, cfg: &LossConfig) -> Tx {
    let weighted = g.add(g.scale(triplet, cfg.alpha_student), g.scale(distill, cfg.beta_student));
    g.add(contrastive, weighted)
}
