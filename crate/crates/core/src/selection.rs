//! Hard-sample scoring, top-fraction selection, and the selection/full-batch schedule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    None,
    Ce,
    Kl,
    Distill,
    Focal,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 5] = [
        SelectionStrategy::None,
        SelectionStrategy::Kl,
        SelectionStrategy::Distill,
        SelectionStrategy::Focal,
        SelectionStrategy::Ce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::None => "none",
            SelectionStrategy::Ce => "ce",
            SelectionStrategy::Kl => "kl",
            SelectionStrategy::Distill => "distill",
            SelectionStrategy::Focal => "focal",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectionStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown selection strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: SelectionStrategy,
    /// Fraction of each batch kept during the selection phase.
    pub rho: f64,
    pub focal_gamma: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: SelectionStrategy::Ce,
            rho: 1.0 / 3.0,
            focal_gamma: 2.0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!(
                "rho must be in (0, 1], got {}",
                self.rho
            )));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Fraction of the final steps trained on the full batch.
    pub kappa: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kappa: 0.25 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!(
                "kappa must be in [0, 1), got {}",
                self.kappa
            )));
        }
        Ok(())
    }

    /// First step of the full-batch phase: `ceil((1 - kappa) * total_steps)`.
    pub fn full_batch_start(&self, total_steps: usize) -> usize {
        ((1.0 - self.kappa) * total_steps as f64).ceil() as usize
    }
}

pub fn is_full_batch_step(step: usize, schedule: &ScheduleConfig, total_steps: usize) -> bool {
    step >= schedule.full_batch_start(total_steps)
}

/// Per-sample quantities a scorer may draw on. KL values are unscaled.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleQuantities<'a> {
    pub ce: Option<&'a [f64]>,
    pub logits_kl: Option<&'a [f64]>,
    pub cm: Option<&'a [f64]>,
}

impl<'a> SampleQuantities<'a> {
    fn need(
        field: Option<&'a [f64]>,
        name: &str,
        strategy: SelectionStrategy,
    ) -> Result<&'a [f64]> {
        field.ok_or_else(|| {
            Error::Parameter(format!(
                "strategy {strategy} needs per-sample {name} values"
            ))
        })
    }

    fn len(&self) -> Option<usize> {
        self.ce.or(self.logits_kl).or(self.cm).map(<[f64]>::len)
    }
}

/// Hardness score per sample; larger means harder.
pub fn score_samples(
    strategy: SelectionStrategy,
    q: &SampleQuantities<'_>,
    weights: &LossWeights,
    focal_gamma: f64,
) -> Result<Vec<f64>> {
    let need = |f, name| SampleQuantities::need(f, name, strategy);
    Ok(match strategy {
        SelectionStrategy::None => {
            let n = q
                .len()
                .ok_or_else(|| Error::Parameter("no per-sample quantities given".into()))?;
            vec![0.0; n]
        }
        SelectionStrategy::Ce => need(q.ce, "ce")?.to_vec(),
        SelectionStrategy::Kl => need(q.logits_kl, "logits_kl")?.to_vec(),
        SelectionStrategy::Focal => need(q.ce, "ce")?
            .iter()
            .map(|&ce| {
                let p_true = (-ce).exp();
                (1.0 - p_true).powf(focal_gamma) * ce
            })
            .collect(),
        SelectionStrategy::Distill => {
            let ce = need(q.ce, "ce")?;
            let s = weights.kl_scale();
            let mut out: Vec<f64> = ce.iter().map(|v| weights.lambda_ce * v).collect();
            if weights.lambda_logits != 0.0 {
                let kl = need(q.logits_kl, "logits_kl")?;
                out.iter_mut()
                    .zip(kl)
                    .for_each(|(o, k)| *o += weights.lambda_logits * s * k);
            }
            if weights.lambda_cm != 0.0 {
                let cm = need(q.cm, "cm")?;
                out.iter_mut()
                    .zip(cm)
                    .for_each(|(o, k)| *o += weights.lambda_cm * s * k);
            }
            out
        }
    })
}

/// Number of samples kept from a batch of `batch`: `ceil(rho * batch)`, at least one.
pub fn selection_size(batch: usize, rho: f64) -> usize {
    // The small slack keeps products such as 0.3 * 10 = 3.0000000000000004 from rounding up.
    let k = (rho * batch as f64 - 1e-9).ceil() as usize;
    k.clamp(1, batch.max(1))
}

/// Ascending indices of the `ceil(rho * B)` largest scores; ties go to the lower index.
pub fn select_hard(scores: &[f64], rho: f64) -> Vec<usize> {
    let b = scores.len();
    if b == 0 {
        return Vec::new();
    }
    let k = selection_size(b, rho);
    if k == b {
        return (0..b).collect();
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Indices kept at one training step, honoring the strategy and the schedule.
pub fn kept_indices(scores: &[f64], selection: &SelectionConfig, full_batch: bool) -> Vec<usize> {
    if full_batch || selection.strategy == SelectionStrategy::None {
        (0..scores.len()).collect()
    } else {
        select_hard(scores, selection.rho)
    }
}
