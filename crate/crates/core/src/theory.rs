//! Brute-force checks of the total-variation risk bounds on finite supports.
//!
//! Total variation uses the unnormalized L1 convention, `tv(P, Q) = sum |p_k - q_k|`,
//! so it ranges over `[0, 2]`. With losses in `[0, 1]` this is the form under
//! which `r(P') <= r(P) + tv(P', P)` holds without a factor of two.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::uniform;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const MAX_SUPPORT: usize = 64;
pub const MAX_RADEMACHER_N: usize = 14;
pub const MAX_CLASS: usize = 64;
const SUM_TOL: f64 = 1e-12;
const SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.len() > MAX_SUPPORT {
            return Err(Error::Parameter(format!(
                "support size {} outside 1..={MAX_SUPPORT}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain(
                "probabilities must be finite and >= 0".into(),
            ));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::Domain(format!("probabilities sum to {s}")));
        }
        Ok(DiscreteDistribution { probs })
    }

    /// Flat Dirichlet draw.
    pub fn random(r: &mut Rng, k: usize) -> Self {
        let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(r)).collect();
        let s: f64 = raw.iter().sum();
        DiscreteDistribution {
            probs: raw.into_iter().map(|x| x / s).collect(),
        }
    }

    pub fn point_mass(k: usize, at: usize) -> Result<Self> {
        let mut probs = vec![0.0; k];
        *probs
            .get_mut(at)
            .ok_or_else(|| Error::Parameter(format!("point {at} outside support {k}")))? = 1.0;
        DiscreteDistribution::new(probs)
    }

    /// `(1 - w) * self + w * other`.
    pub fn mix(&self, other: &Self, w: f64) -> Result<Self> {
        same_support(self, other)?;
        Ok(DiscreteDistribution {
            probs: self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> usize {
        self.probs.len()
    }

    pub fn sample(&self, r: &mut Rng) -> usize {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding can leave `acc` a hair below 1; fall back to the last charged point
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

fn same_support(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.support() != q.support() {
        return Err(Error::Parameter(format!(
            "support sizes differ: {} vs {}",
            p.support(),
            q.support()
        )));
    }
    Ok(())
}

pub fn tv(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    same_support(p, q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Per-point 0-1 loss of hypothesis labels against the gold labeling.
pub fn zero_one_losses(h: &[usize], labeling: &[usize]) -> Result<Vec<f64>> {
    if h.len() != labeling.len() {
        return Err(Error::Parameter(
            "hypothesis and labeling cover different supports".into(),
        ));
    }
    Ok(h.iter()
        .zip(labeling)
        .map(|(a, b)| if a == b { 0.0 } else { 1.0 })
        .collect())
}

fn check_losses(loss: &[f64]) -> Result<()> {
    match loss.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        Some(l) => Err(Error::Contract(format!(
            "per-point loss {l} outside [0, 1]"
        ))),
        None => Ok(()),
    }
}

/// `sum_k p_k * loss_k`.
pub fn risk(loss: &[f64], p: &DiscreteDistribution) -> Result<f64> {
    if loss.len() != p.support() {
        return Err(Error::Parameter(
            "loss table and distribution differ in support".into(),
        ));
    }
    check_losses(loss)?;
    Ok(loss.iter().zip(&p.probs).map(|(l, q)| l * q).sum())
}

/// Mean loss over sampled support indices.
pub fn empirical_risk(loss: &[f64], sample: &[usize]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Parameter("empirical risk of an empty sample".into()));
    }
    check_losses(loss)?;
    let mut s = 0.0;
    for &i in sample {
        s += loss
            .get(i)
            .ok_or_else(|| Error::Parameter(format!("sample point {i} outside support")))?;
    }
    Ok(s / sample.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskShiftReport {
    pub trials: usize,
    pub max_support: usize,
    pub violations: usize,
    /// Largest `r(P') - r(P) - tv(P', P)`; never positive when the bound holds.
    pub max_gap: f64,
    /// Smallest `r(P) + tv(P', P) - r(P')` slack observed.
    pub min_slack: f64,
}

fn risk_shift_trial(r: &mut Rng, max_support: usize) -> Result<f64> {
    let k = r.random_range(2..=max_support);
    let classes = r.random_range(2..=4usize);
    let p = DiscreteDistribution::random(r, k);
    let p2 = match r.random_range(0..4) {
        0 => p.clone(),
        1 => DiscreteDistribution::point_mass(k, r.random_range(0..k))?,
        _ => DiscreteDistribution::random(r, k),
    };
    let labeling: Vec<usize> = (0..k).map(|_| r.random_range(0..classes)).collect();
    let h: Vec<usize> = if r.random_range(0..8) == 0 {
        labeling.clone()
    } else {
        (0..k).map(|_| r.random_range(0..classes)).collect()
    };
    let loss = zero_one_losses(&h, &labeling)?;
    Ok(risk(&loss, &p2)? - risk(&loss, &p)? - tv(&p2, &p)?)
}

/// Samples random `(P, P', labeling, h)` with 0-1 loss and counts bound violations.
pub fn check_risk_shift(trials: usize, max_support: usize, seed: u64) -> Result<RiskShiftReport> {
    if trials == 0 || !(2..=MAX_SUPPORT).contains(&max_support) {
        return Err(Error::Parameter(format!(
            "need trials >= 1 and max_support in 2..={MAX_SUPPORT}"
        )));
    }
    let gaps = (0..trials)
        .into_par_iter()
        .map(|t| risk_shift_trial(&mut rng::seeded(rng::derive(seed, t as u64)), max_support))
        .collect::<Result<Vec<f64>>>()?;
    let max_gap = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RiskShiftReport {
        trials,
        max_support,
        violations: gaps.iter().filter(|&&g| g > SLACK).count(),
        max_gap,
        min_slack: -max_gap,
    })
}

/// `2^-n * sum_sigma max_l (1/n) |sum_i sigma_i l_i|`, by exhaustive enumeration.
///
/// `class[j][i]` is the loss of hypothesis `j` at sample point `i`.
pub fn rademacher_exact(class: &[Vec<f64>]) -> Result<f64> {
    rademacher_enum(class, f64::abs)
}

/// The signed variant, `2^-n * sum_sigma max_l (1/n) sum_i sigma_i l_i`.
pub fn rademacher_exact_signed(class: &[Vec<f64>]) -> Result<f64> {
    rademacher_enum(class, |s| s)
}

fn rademacher_enum(class: &[Vec<f64>], fold: fn(f64) -> f64) -> Result<f64> {
    let n = class.first().map_or(0, Vec::len);
    if class.is_empty() || n == 0 {
        return Err(Error::Parameter("need a nonempty class and sample".into()));
    }
    if class.len() > MAX_CLASS || n > MAX_RADEMACHER_N {
        return Err(Error::Capacity(format!(
            "exact enumeration limited to |class| <= {MAX_CLASS}, n <= {MAX_RADEMACHER_N}; got {} and {n}",
            class.len()
        )));
    }
    if class.iter().any(|l| l.len() != n) {
        return Err(Error::Parameter("loss vectors differ in length".into()));
    }
    let mut uniq: Vec<&Vec<f64>> = Vec::new();
    for l in class {
        if !uniq.contains(&l) {
            uniq.push(l);
        }
    }
    // Gray-code walk over sign vectors, starting from all +1.
    let mut sigma = vec![1.0f64; n];
    let mut sums: Vec<f64> = uniq.iter().map(|l| l.iter().sum()).collect();
    let best = |sums: &[f64]| sums.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(fold(s)));
    let mut total = best(&sums);
    for step in 1u32..(1u32 << n) {
        let b = step.trailing_zeros() as usize;
        for (s, l) in sums.iter_mut().zip(&uniq) {
            *s -= 2.0 * sigma[b] * l[b];
        }
        sigma[b] = -sigma[b];
        total += best(&sums);
    }
    Ok(total / (n as f64 * f64::from(1u32 << n)))
}

/// `2 * rademacher + sqrt(ln(1/delta) / (2n))`.
pub fn xi(rademacher: f64, n: usize, delta: f64) -> f64 {
    2.0 * rademacher + ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiniteSampleConfig {
    pub support: usize,
    pub classes: usize,
    /// Random hypotheses; the gold labeling is always added.
    pub hypotheses: usize,
    pub n: usize,
    pub delta: f64,
    pub resamples: usize,
    /// Weight of a fresh random distribution mixed into `P` to form `P'`.
    pub shift: f64,
}

impl Default for FiniteSampleConfig {
    fn default() -> Self {
        FiniteSampleConfig {
            support: 10,
            classes: 2,
            hypotheses: 31,
            n: 12,
            delta: 0.1,
            resamples: 1000,
            shift: 0.3,
        }
    }
}

/// A concrete bound-checking problem: source, target, labeling and a finite class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteSampleSetup {
    pub p: DiscreteDistribution,
    pub p_prime: DiscreteDistribution,
    pub labeling: Vec<usize>,
    /// Loss table per hypothesis over the support.
    pub class: Vec<Vec<f64>>,
}

impl FiniteSampleSetup {
    pub fn random(cfg: &FiniteSampleConfig, seed: u64) -> Result<Self> {
        if cfg.support < 2 || cfg.classes < 2 || cfg.hypotheses + 1 > MAX_CLASS {
            return Err(Error::Parameter(
                "finite-sample setup needs support, classes >= 2".into(),
            ));
        }
        let mut r = rng::seeded(seed);
        let k = cfg.support;
        let p = DiscreteDistribution::random(&mut r, k);
        let p_prime = p.mix(&DiscreteDistribution::random(&mut r, k), cfg.shift)?;
        let labeling: Vec<usize> = (0..k).map(|_| r.random_range(0..cfg.classes)).collect();
        let mut class = vec![vec![0.0; k]];
        for _ in 0..cfg.hypotheses {
            let h: Vec<usize> = (0..k).map(|_| r.random_range(0..cfg.classes)).collect();
            class.push(zero_one_losses(&h, &labeling)?);
        }
        Ok(FiniteSampleSetup {
            p,
            p_prime,
            labeling,
            class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteSampleReport {
    pub n: usize,
    pub delta: f64,
    pub resamples: usize,
    pub class_size: usize,
    pub tv: f64,
    pub violations: usize,
    pub violation_rate: f64,
    /// `delta + 3 * sqrt(delta (1 - delta) / resamples)`.
    pub allowed_rate: f64,
    pub mean_rademacher: f64,
    pub mean_xi: f64,
}

/// Draws `resamples` samples of size `n` from `P`, fits the empirical risk minimizer
/// (ties to the lowest index) and checks `r(P') <= r_hat + tv(P', P) + xi`.
pub fn check_finite_sample(
    setup: &FiniteSampleSetup,
    n: usize,
    delta: f64,
    resamples: usize,
    seed: u64,
) -> Result<FiniteSampleReport> {
    if !(delta > 0.0 && delta < 1.0) || resamples == 0 || n == 0 {
        return Err(Error::Parameter(
            "need delta in (0,1), n >= 1 and resamples >= 1".into(),
        ));
    }
    if n > MAX_RADEMACHER_N || setup.class.len() > MAX_CLASS {
        return Err(Error::Capacity(format!(
            "exact enumeration limited to n <= {MAX_RADEMACHER_N}, |class| <= {MAX_CLASS}"
        )));
    }
    let d = tv(&setup.p_prime, &setup.p)?;
    let target_risk: Vec<f64> = setup
        .class
        .iter()
        .map(|l| risk(l, &setup.p_prime))
        .collect::<Result<_>>()?;
    let outcomes = (0..resamples)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::seeded(rng::derive(seed, t as u64));
            let sample: Vec<usize> = (0..n).map(|_| setup.p.sample(&mut r)).collect();
            let mut best = (0usize, f64::INFINITY);
            for (j, l) in setup.class.iter().enumerate() {
                let e = empirical_risk(l, &sample)?;
                if e < best.1 {
                    best = (j, e);
                }
            }
            let restricted: Vec<Vec<f64>> = setup
                .class
                .iter()
                .map(|l| sample.iter().map(|&i| l[i]).collect())
                .collect();
            let rad = rademacher_exact(&restricted)?;
            let x = xi(rad, n, delta);
            let violated = target_risk[best.0] > best.1 + d + x + SLACK;
            Ok((violated, rad, x))
        })
        .collect::<Result<Vec<_>>>()?;
    let violations = outcomes.iter().filter(|o| o.0).count();
    let m = resamples as f64;
    Ok(FiniteSampleReport {
        n,
        delta,
        resamples,
        class_size: setup.class.len(),
        tv: d,
        violations,
        violation_rate: violations as f64 / m,
        allowed_rate: delta + 3.0 * (delta * (1.0 - delta) / m).sqrt(),
        mean_rademacher: outcomes.iter().map(|o| o.1).sum::<f64>() / m,
        mean_xi: outcomes.iter().map(|o| o.2).sum::<f64>() / m,
    })
}

/// Mean member-wise tv from `target` to the family.
pub fn avg_tv_to_set(
    target: &DiscreteDistribution,
    family: &[DiscreteDistribution],
) -> Result<f64> {
    if family.is_empty() {
        return Err(Error::Parameter("empty family".into()));
    }
    let mut s = 0.0;
    for p in family {
        s += tv(target, p)?;
    }
    Ok(s / family.len() as f64)
}

/// Member with the largest average tv to the family; ties go to the lowest index.
pub fn select_s1(family: &[DiscreteDistribution]) -> Result<usize> {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, p) in family.iter().enumerate() {
        let v = avg_tv_to_set(p, family)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Uniformly random member.
pub fn select_s2(family: &[DiscreteDistribution], seed: u64) -> Result<usize> {
    if family.is_empty() {
        return Err(Error::Parameter("empty family".into()));
    }
    Ok(rng::seeded(seed).random_range(0..family.len()))
}

/// How mixture weights `alpha_i` are drawn for each family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRegime {
    /// One member (random position) from `outlier`, the rest from `cluster`.
    Outlier {
        cluster: [f64; 2],
        outlier: [f64; 2],
    },
    Uniform([f64; 2]),
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub members: usize,
    /// Support size; `A` and `B` each get half.
    pub support: usize,
    pub trials: usize,
    pub regime: AlphaRegime,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            members: 5,
            support: 8,
            trials: 2000,
            regime: AlphaRegime::Outlier {
                cluster: [0.0, 0.3],
                outlier: [0.7, 1.0],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub trials: usize,
    pub members: usize,
    pub regime: AlphaRegime,
    /// Residuals `tv(set, P') - tv(set, P_i) - tv(P_i, P')` of the first family.
    pub residuals_first_family: Vec<f64>,
    pub residual_mean_abs: f64,
    pub residual_max_abs: f64,
    pub assumption_flagged: bool,
    /// Monte Carlo mean of `tv(s1(family), P')`.
    pub e_tv_s1: f64,
    /// Monte Carlo mean of `tv(s2(family), P')`.
    pub e_tv_s2: f64,
    /// Exact mean over members, averaged over families.
    pub e_tv_s2_exact: f64,
    /// Mean of `inf_i tv(P_i, P')`.
    pub e_tv_inf: f64,
    pub s1_le_s2: bool,
}

/// Random distribution charged on `[lo, hi)` of a support of size `k`.
fn random_on(r: &mut Rng, k: usize, lo: usize, hi: usize) -> DiscreteDistribution {
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            if (lo..hi).contains(&i) {
                Exp1.sample(r)
            } else {
                0.0
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    DiscreteDistribution {
        probs: raw.into_iter().map(|x| x / s).collect(),
    }
}

fn draw_alphas(r: &mut Rng, cfg: &MixtureConfig) -> Result<Vec<f64>> {
    Ok(match &cfg.regime {
        AlphaRegime::Fixed(a) => a.clone(),
        AlphaRegime::Uniform([lo, hi]) => (0..cfg.members).map(|_| uniform(r, *lo, *hi)).collect(),
        AlphaRegime::Outlier { cluster, outlier } => {
            let at = r.random_range(0..cfg.members);
            (0..cfg.members)
                .map(|i| {
                    let [lo, hi] = if i == at { *outlier } else { *cluster };
                    uniform(r, lo, hi)
                })
                .collect()
        }
    })
}

/// Mixture families `P_i = (1 - alpha_i) A + alpha_i B` with target `P' = B`.
///
/// Reports the additivity residuals next to both selection expectations; it
/// never asserts the conclusion on its own.
pub fn check_mixture(cfg: &MixtureConfig, seed: u64) -> Result<MixtureReport> {
    let members = match &cfg.regime {
        AlphaRegime::Fixed(a) => a.len(),
        _ => cfg.members,
    };
    if cfg.trials == 0 || members == 0 || cfg.support < 2 || cfg.support > MAX_SUPPORT {
        return Err(Error::Parameter(
            "need trials, members >= 1 and support in 2..=64".into(),
        ));
    }
    let cfg = MixtureConfig {
        members,
        ..cfg.clone()
    };
    let half = cfg.support / 2;
    let mut r = rng::seeded(seed);
    let (mut s1_sum, mut s2_sum, mut s2_exact, mut inf_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut res_abs_sum, mut res_max, mut res_count) = (0.0, 0.0f64, 0usize);
    let mut first = Vec::new();
    for trial in 0..cfg.trials {
        let alphas = draw_alphas(&mut r, &cfg)?;
        if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Parameter(
                "mixture weights must lie in [0, 1]".into(),
            ));
        }
        let a = random_on(&mut r, cfg.support, 0, half);
        let b = random_on(&mut r, cfg.support, half, cfg.support);
        let family = alphas
            .iter()
            .map(|&w| a.mix(&b, w))
            .collect::<Result<Vec<_>>>()?;
        let to_target: Vec<f64> = family.iter().map(|p| tv(p, &b)).collect::<Result<_>>()?;
        let set_to_target = avg_tv_to_set(&b, &family)?;
        let mut residuals = Vec::with_capacity(members);
        for (p, d) in family.iter().zip(&to_target) {
            let res = if members == 1 {
                0.0
            } else {
                set_to_target - avg_tv_to_set(p, &family)? - d
            };
            res_abs_sum += res.abs();
            res_max = res_max.max(res.abs());
            res_count += 1;
            residuals.push(res);
        }
        if trial == 0 {
            first = residuals;
        }
        s1_sum += to_target[select_s1(&family)?];
        s2_sum += to_target[select_s2(&family, rng::derive(seed, trial as u64))?];
        s2_exact += to_target.iter().sum::<f64>() / members as f64;
        inf_sum += to_target.iter().copied().fold(f64::INFINITY, f64::min);
    }
    let t = cfg.trials as f64;
    let (e1, e2) = (s1_sum / t, s2_sum / t);
    Ok(MixtureReport {
        trials: cfg.trials,
        members,
        regime: cfg.regime.clone(),
        residuals_first_family: first,
        residual_mean_abs: res_abs_sum / res_count as f64,
        residual_max_abs: res_max,
        assumption_flagged: res_max > 1e-9,
        e_tv_s1: e1,
        e_tv_s2: e2,
        e_tv_s2_exact: s2_exact / t,
        e_tv_inf: inf_sum / t,
        s1_le_s2: e1 <= e2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub risk_shift_trials: usize,
    pub risk_shift_max_support: usize,
    pub finite_sample: FiniteSampleConfig,
    pub mixture: MixtureConfig,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            risk_shift_trials: 100_000,
            risk_shift_max_support: 16,
            finite_sample: FiniteSampleConfig::default(),
            mixture: MixtureConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub risk_shift: RiskShiftReport,
    pub finite_sample: FiniteSampleReport,
    pub mixture: MixtureReport,
}

pub fn verify_all(cfg: &TheoryConfig) -> Result<TheoryReport> {
    let l2 = &cfg.finite_sample;
    let setup = FiniteSampleSetup::random(l2, rng::derive(cfg.seed, 2))?;
    Ok(TheoryReport {
        risk_shift: check_risk_shift(
            cfg.risk_shift_trials,
            cfg.risk_shift_max_support,
            rng::derive(cfg.seed, 1),
        )?,
        finite_sample: check_finite_sample(
            &setup,
            l2.n,
            l2.delta,
            l2.resamples,
            rng::derive(cfg.seed, 3),
        )?,
        mixture: check_mixture(&cfg.mixture, rng::derive(cfg.seed, 4))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(p: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn tv_basics() {
        assert_eq!(tv(&d(&[0.3, 0.7]), &d(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(tv(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap(), 2.0);
        assert!(tv(&d(&[1.0]), &d(&[0.5, 0.5])).is_err());
        assert!(DiscreteDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn risk_examples() {
        let lab = [0, 1, 1, 0];
        let u = d(&[0.25; 4]);
        assert_eq!(
            risk(&zero_one_losses(&lab, &lab).unwrap(), &u).unwrap(),
            0.0
        );
        assert_eq!(
            risk(&zero_one_losses(&[1, 0, 0, 1], &lab).unwrap(), &u).unwrap(),
            1.0
        );
        assert_eq!(
            risk(&zero_one_losses(&[0, 1, 0, 1], &lab).unwrap(), &u).unwrap(),
            0.5
        );
        assert!(matches!(
            risk(&[0.0, 1.5, 0.0, 0.0], &u),
            Err(Error::Contract(_))
        ));
        let wrong_half = zero_one_losses(&[0, 1, 0, 1], &lab).unwrap();
        assert_eq!(empirical_risk(&wrong_half, &[0, 1, 2, 3]).unwrap(), 0.5);
        assert_eq!(empirical_risk(&wrong_half, &[0, 1]).unwrap(), 0.0);
        assert_eq!(empirical_risk(&wrong_half, &[2, 3]).unwrap(), 1.0);
        assert!(empirical_risk(&wrong_half, &[]).is_err());
    }

    #[test]
    fn rademacher_small_cases() {
        assert_eq!(rademacher_exact(&[vec![0.0; 5]]).unwrap(), 0.0);
        assert_eq!(rademacher_exact(&[vec![0.0], vec![1.0]]).unwrap(), 1.0);
        assert_eq!(
            rademacher_exact_signed(&[vec![0.0], vec![1.0]]).unwrap(),
            0.5
        );
        // constant loss c: |sum sigma_i c| / n averaged over all sign vectors
        let n = 4;
        let closed = (0..1u32 << n)
            .map(|m| (2.0 * f64::from(m.count_ones()) - n as f64).abs() * 0.5 / n as f64)
            .sum::<f64>()
            / f64::from(1u32 << n);
        assert!((rademacher_exact(&[vec![0.5; n]]).unwrap() - closed).abs() < 1e-15);
        assert!(matches!(
            rademacher_exact(&[vec![0.0; 15]]),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            rademacher_exact(&vec![vec![0.0; 3]; 65]),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn xi_second_term_scales_with_root_n() {
        let a = xi(0.0, 10, 0.1);
        let b = xi(0.0, 20, 0.1);
        assert!((a / b - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn selection_rules() {
        let single = vec![d(&[0.5, 0.5])];
        assert_eq!(select_s1(&single).unwrap(), 0);
        assert_eq!(select_s2(&single, 9).unwrap(), 0);
        let fam = vec![
            d(&[0.5, 0.5, 0.0]),
            d(&[0.45, 0.55, 0.0]),
            d(&[0.0, 0.0, 1.0]),
            d(&[0.5, 0.45, 0.05]),
        ];
        assert_eq!(select_s1(&fam).unwrap(), 2);
        assert_eq!(avg_tv_to_set(&single[0], &single).unwrap(), 0.0);
    }

    #[test]
    fn mixture_degenerate_and_single() {
        let equal = MixtureConfig {
            regime: AlphaRegime::Fixed(vec![0.4; 3]),
            trials: 50,
            ..MixtureConfig::default()
        };
        let r = check_mixture(&equal, 1).unwrap();
        assert!((r.e_tv_s1 - r.e_tv_s2).abs() < 1e-12);
        let one = MixtureConfig {
            regime: AlphaRegime::Fixed(vec![0.4]),
            trials: 5,
            ..MixtureConfig::default()
        };
        assert_eq!(check_mixture(&one, 1).unwrap().residual_max_abs, 0.0);
    }
}
