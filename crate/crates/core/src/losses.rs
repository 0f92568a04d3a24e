//! Cross-entropy, teacher-first KL distillation on logits, the cross-modality
//! loss on projected features, and their weighted combination over a selected
//! subset of the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Rows of a probability matrix must sum to one within this tolerance.
pub const DIST_TOL: f64 = 1e-6;
/// Projected and text rows must be unit-norm within this tolerance.
pub const UNIT_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_logits: f64,
    pub lambda_cm: f64,
    pub temperature: f64,
    /// Student-side similarity scale; `None` uses the teacher's logit scale.
    pub gamma: Option<f64>,
    /// Multiply both KL terms by `temperature^2`.
    pub t2_scaling: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 1.0,
            lambda_logits: 0.5,
            lambda_cm: 0.5,
            temperature: 3.0,
            gamma: None,
            t2_scaling: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_ce, self.lambda_logits, self.lambda_cm];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0: {lambdas:?}"
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::Config(format!("gamma must be > 0, got {g}")));
            }
        }
        Ok(())
    }

    /// Factor applied to the KL terms.
    pub fn kl_scale(&self) -> f64 {
        if self.t2_scaling {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::Parameter(format!(
            "{what} is not a distribution (sum {sum})"
        )));
    }
    Ok(())
}

/// `KL(p || q) = sum p_i (ln p_i - ln q_i)` with `0 ln 0 = 0`.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Parameter(format!(
            "kl_div needs equal non-empty supports, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    if q.iter().any(|v| *v <= 0.0) {
        return Err(Error::Parameter("q must be strictly positive".into()));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// Per-sample `-ln softmax(z)[y]`, shape `B`.
pub fn ce_per_sample(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).dims2()?;
    if labels.len() != b {
        return Err(Error::Dimension {
            op: "ce_loss",
            lhs: vec![b, c],
            rhs: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Parameter(format!("label {bad} outside 0..{c}")));
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = -1.0;
    }
    let ls = tape.log_softmax_t(logits, 1.0)?;
    let mask = tape.constant(Tensor::matrix(b, c, onehot)?);
    let picked = tape.mul(ls, mask)?;
    tape.sum_rows(picked)
}

/// Per-sample `KL(p_i || q_i)` given constant targets `p` and a tape variable `ln q`.
pub fn kl_per_sample(tape: &mut Tape, target: &Tensor, log_q: Var) -> Result<Var> {
    let (b, c) = target.dims2()?;
    if tape.value(log_q).shape() != [b, c] {
        return Err(Error::Dimension {
            op: "kl_per_sample",
            lhs: vec![b, c],
            rhs: tape.value(log_q).shape().to_vec(),
        });
    }
    let mut neg_entropy = Vec::with_capacity(b);
    for i in 0..b {
        let row = target.row(i);
        check_distribution(row, &format!("target row {i}"))?;
        neg_entropy.push(row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum());
    }
    let p = tape.constant(target.clone());
    let cross = tape.mul(p, log_q)?;
    let cross = tape.sum_rows(cross)?;
    let h = tape.constant(Tensor::vector(neg_entropy)?);
    tape.sub(h, cross)
}

/// Per-sample `KL(p^t || softmax(z / T))` on student logits.
pub fn logits_kl_per_sample(
    tape: &mut Tape,
    student_logits: Var,
    teacher_soft: &Tensor,
    temperature: f64,
) -> Result<Var> {
    let log_q = tape.log_softmax_t(student_logits, temperature)?;
    kl_per_sample(tape, teacher_soft, log_q)
}

/// Batch mean of `scale * KL(p^t || softmax(z / T))`, where `scale` is `T^2` when enabled.
pub fn logits_distill_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_soft: &Tensor,
    temperature: f64,
    t2_scaling: bool,
) -> Result<Var> {
    let kl = logits_kl_per_sample(tape, student_logits, teacher_soft, temperature)?;
    let m = tape.mean(kl);
    Ok(scale_kl(tape, m, temperature, t2_scaling))
}

fn scale_kl(tape: &mut Tape, v: Var, temperature: f64, t2_scaling: bool) -> Var {
    if t2_scaling {
        tape.mul_scalar(v, temperature * temperature)
    } else {
        v
    }
}

fn check_unit_rows(m: &Tensor, what: &str) -> Result<()> {
    let (rows, _) = m.dims2()?;
    for i in 0..rows {
        let n = crate::autodiff::l2_norm(m.row(i));
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!(
                "{what} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// `d_t x C` transpose of the text embeddings, ready for `projected . text^T`.
pub fn text_transpose(text: &Tensor) -> Result<Tensor> {
    let (c, d) = text.dims2()?;
    let mut t = vec![0.0; c * d];
    for i in 0..c {
        for j in 0..d {
            t[j * c + i] = text.row(i)[j];
        }
    }
    Tensor::matrix(d, c, t)
}

/// Per-sample cross-modality KL: `KL(p^t_i || softmax(gamma * u_i . text^T / T))`.
pub fn cm_per_sample(
    tape: &mut Tape,
    projected: Var,
    text: &Tensor,
    teacher_soft: &Tensor,
    gamma: f64,
    temperature: f64,
) -> Result<Var> {
    check_unit_rows(tape.value(projected), "projected feature")?;
    check_unit_rows(text, "text embedding")?;
    let tt = tape.constant(text_transpose(text)?);
    let sims = tape.matmul(projected, tt)?;
    let logits = tape.mul_scalar(sims, gamma);
    let log_q = tape.log_softmax_t(logits, temperature)?;
    kl_per_sample(tape, teacher_soft, log_q)
}

/// Batch mean of the scaled cross-modality KL.
pub fn cm_loss(
    tape: &mut Tape,
    projected: Var,
    text: &Tensor,
    teacher_soft: &Tensor,
    gamma: f64,
    temperature: f64,
    t2_scaling: bool,
) -> Result<Var> {
    let kl = cm_per_sample(tape, projected, text, teacher_soft, gamma, temperature)?;
    let m = tape.mean(kl);
    Ok(scale_kl(tape, m, temperature, t2_scaling))
}

/// Per-sample loss vectors for one batch; KL terms are unscaled.
#[derive(Clone, Copy, Debug)]
pub struct PerSampleTerms {
    pub ce: Var,
    pub logits_kl: Option<Var>,
    pub cm: Option<Var>,
}

/// Weighted components of the combined objective; `ce + logits + cm == total`.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub total_value: f64,
    pub ce: f64,
    pub logits: f64,
    pub cm: f64,
}

/// `lambda_ce * mean CE + lambda_logits * s * mean KL_logits + lambda_cm * s * mean KL_cm`,
/// averaged over `selected` rows only. Zero-weight terms are left out of the graph.
pub fn combined_loss(
    tape: &mut Tape,
    weights: &LossWeights,
    terms: &PerSampleTerms,
    selected: &[usize],
) -> Result<LossBreakdown> {
    let s = weights.kl_scale();
    let parts = [
        (Some(terms.ce), weights.lambda_ce, 1.0, "ce"),
        (terms.logits_kl, weights.lambda_logits, s, "logits"),
        (terms.cm, weights.lambda_cm, s, "cm"),
    ];
    let mut total: Option<Var> = None;
    let mut values = [0.0; 3];
    for (k, (term, lambda, scale, name)) in parts.into_iter().enumerate() {
        if lambda == 0.0 {
            continue;
        }
        let term = term.ok_or_else(|| {
            Error::Parameter(format!(
                "weight for {name} is {lambda} but the term was not computed"
            ))
        })?;
        let picked = tape.gather_rows(term, selected)?;
        let mean = tape.mean(picked);
        let weighted = tape.mul_scalar(mean, lambda * scale);
        values[k] = tape.value(weighted).item()?;
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(LossBreakdown {
        total,
        total_value: tape.value(total).item()?,
        ce: values[0],
        logits: values[1],
        cm: values[2],
    })
}
