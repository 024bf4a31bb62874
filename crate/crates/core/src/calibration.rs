//! Conformal risk control over the three concept-set losses.
//!
//! For each criterion `k` the calibrated threshold is the smallest `lambda`
//! whose empirical calibration risk meets the finite-sample corrected budget
//! `alpha_k - (1 - alpha_k) / n_cal`, falling back to 1 when no threshold
//! qualifies. The global threshold is the maximum of the three.
//!
//! Because every loss is a non-increasing step function of `lambda`, the risk
//! curve is monotone and the infimum is located by binary search, either over
//! a uniform grid or over the exact breakpoints `1 - t_j` of the calibration
//! detections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept_sets::{build_concept_set, check_lambda, ConceptSet, Criterion, LossEvaluator};
use crate::error::{Error, Result};
use crate::types::{AnnotatedSample, ConceptCatalog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskBudget {
    pub alpha_dis: f64,
    pub alpha_cov: f64,
    pub alpha_div: f64,
}

impl Default for RiskBudget {
    fn default() -> Self {
        Self {
            alpha_dis: 0.7,
            alpha_cov: 0.2,
            alpha_div: 0.2,
        }
    }
}

impl RiskBudget {
    pub fn new(alpha_dis: f64, alpha_cov: f64, alpha_div: f64) -> Result<Self> {
        let budget = Self {
            alpha_dis,
            alpha_cov,
            alpha_div,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<()> {
        for c in Criterion::ALL {
            let a = self.alpha(c);
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "alpha_{c} = {a} must lie strictly inside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn alpha(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Dis => self.alpha_dis,
            Criterion::Cov => self.alpha_cov,
            Criterion::Div => self.alpha_div,
        }
    }
}

/// `alpha - (1 - alpha) / n_cal`.
pub fn corrected_budget(alpha: f64, n_cal: usize) -> f64 {
    alpha - (1.0 - alpha) / n_cal as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Uniform grid `{i / steps}` with `steps = round(1 / resolution)`.
    Grid,
    /// Breakpoints `{1 - t_j} U {0, 1}` of the calibration confidences.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub resolution: f64,
    pub mode: SearchMode,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            resolution: 1e-3,
            mode: SearchMode::Grid,
        }
    }
}

impl CalibrationOptions {
    pub fn grid_steps(&self) -> Result<usize> {
        if !(self.resolution > 0.0 && self.resolution <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda resolution {} must lie in (0, 1]",
                self.resolution
            )));
        }
        Ok((1.0 / self.resolution).round() as usize)
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        let steps = self.grid_steps()?;
        Ok(grid_points(steps))
    }
}

/// `steps + 1` evenly spaced points from 0 to 1 inclusive.
pub fn grid_points(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub criterion: Criterion,
    pub grid: Vec<f64>,
    pub risks: Vec<f64>,
}

impl RiskCurve {
    pub fn is_non_increasing(&self) -> bool {
        self.risks.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub lambda_dis: f64,
    pub lambda_cov: f64,
    pub lambda_div: f64,
    pub lambda_hat: f64,
    pub n_cal: usize,
    pub budget: RiskBudget,
    pub options: CalibrationOptions,
    pub curves: Vec<RiskCurve>,
}

impl CalibrationResult {
    pub fn lambda(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Dis => self.lambda_dis,
            Criterion::Cov => self.lambda_cov,
            Criterion::Div => self.lambda_div,
        }
    }

    pub fn corrected_budget(&self, criterion: Criterion) -> f64 {
        corrected_budget(self.budget.alpha(criterion), self.n_cal)
    }

    pub fn curve(&self, criterion: Criterion) -> Option<&RiskCurve> {
        self.curves.iter().find(|c| c.criterion == criterion)
    }
}

/// Per-sample losses as step functions of `lambda`.
///
/// `levels` holds the distinct per-concept confidences in descending order;
/// `losses[k][m]` is criterion `k`'s loss on the set made of the first `m`
/// levels.
#[derive(Debug, Clone)]
struct LossProfile {
    levels: Vec<f64>,
    losses: [Vec<f64>; 3],
}

impl LossProfile {
    fn new(evaluator: &LossEvaluator<'_>, sample: &AnnotatedSample) -> Result<Self> {
        let view = evaluator.view(sample)?;
        let confidences = sample.concept_confidences();
        let mut levels: Vec<f64> = confidences.values().copied().collect();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        let mut losses: [Vec<f64>; 3] = Default::default();
        for m in 0..=levels.len() {
            let cset = match m {
                0 => ConceptSet::default(),
                _ => {
                    let floor = levels[m - 1];
                    ConceptSet::from_members(
                        confidences
                            .iter()
                            .filter(|&(_, &c)| c >= floor)
                            .map(|(&id, _)| id),
                    )
                }
            };
            for (k, c) in Criterion::ALL.iter().enumerate() {
                losses[k].push(view.loss(*c, &cset)?);
            }
        }
        Ok(Self { levels, losses })
    }

    /// Same membership rule as [`build_concept_set`]: confidence `>= 1 - lambda`.
    fn loss_at(&self, k: usize, lambda: f64) -> f64 {
        let threshold = 1.0 - lambda;
        let m = self.levels.partition_point(|&c| c >= threshold);
        self.losses[k][m]
    }
}

fn criterion_index(c: Criterion) -> usize {
    match c {
        Criterion::Dis => 0,
        Criterion::Cov => 1,
        Criterion::Div => 2,
    }
}

/// Precomputed calibration split: one loss profile per sample.
#[derive(Debug, Clone)]
pub struct CalibrationData {
    profiles: Vec<LossProfile>,
    breakpoints: Vec<f64>,
}

impl CalibrationData {
    pub fn new(cal_set: &[AnnotatedSample], catalog: &ConceptCatalog) -> Result<Self> {
        let evaluator = LossEvaluator::new(catalog)?;
        Self::with_evaluator(cal_set, &evaluator)
    }

    pub fn with_evaluator(cal_set: &[AnnotatedSample], evaluator: &LossEvaluator<'_>) -> Result<Self> {
        if cal_set.is_empty() {
            return Err(Error::EmptyCalibrationSet);
        }
        let profiles = cal_set
            .iter()
            .map(|s| LossProfile::new(evaluator, s))
            .collect::<Result<Vec<_>>>()?;
        let mut breakpoints = vec![0.0, 1.0];
        for p in &profiles {
            breakpoints.extend(p.levels.iter().map(|&t| breakpoint_for(t)));
        }
        breakpoints.sort_by(f64::total_cmp);
        breakpoints.dedup();
        Ok(Self {
            profiles,
            breakpoints,
        })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn empirical_risk(&self, criterion: Criterion, lambda: f64) -> f64 {
        let k = criterion_index(criterion);
        let total: f64 = self.profiles.iter().map(|p| p.loss_at(k, lambda)).sum();
        total / self.profiles.len() as f64
    }

    /// Lambda values where some calibration set changes, plus 0 and 1.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn calibrate_criterion(
        &self,
        criterion: Criterion,
        alpha: f64,
        options: &CalibrationOptions,
    ) -> Result<f64> {
        let budget = corrected_budget(alpha, self.len());
        if budget <= 0.0 {
            log::warn!(
                "n_cal = {} too small for alpha_{criterion} = {alpha}: corrected budget {budget} is not positive; using lambda = 1",
                self.len()
            );
            return Ok(1.0);
        }
        let admissible = |lambda: f64| self.empirical_risk(criterion, lambda) <= budget;
        let lambda = match options.mode {
            SearchMode::Grid => {
                let steps = options.grid_steps()?;
                smallest_admissible(steps + 1, |i| admissible(i as f64 / steps as f64))
                    .map(|i| i as f64 / steps as f64)
            }
            SearchMode::Exact => {
                let bp = &self.breakpoints;
                smallest_admissible(bp.len(), |i| admissible(bp[i])).map(|i| bp[i])
            }
        };
        Ok(lambda.unwrap_or(1.0))
    }

    fn thresholds(&self, budget: &RiskBudget, options: &CalibrationOptions) -> Result<[f64; 3]> {
        let mut out = [1.0; 3];
        for (k, c) in Criterion::ALL.into_iter().enumerate() {
            out[k] = self.calibrate_criterion(c, budget.alpha(c), options)?;
        }
        Ok(out)
    }

    pub fn calibrate(&self, budget: &RiskBudget, options: &CalibrationOptions) -> Result<CalibrationResult> {
        budget.validate()?;
        let [lambda_dis, lambda_cov, lambda_div] = self.thresholds(budget, options)?;
        let grid = options.grid()?;
        let curves = Criterion::ALL
            .into_iter()
            .map(|c| RiskCurve {
                criterion: c,
                risks: grid.iter().map(|&l| self.empirical_risk(c, l)).collect(),
                grid: grid.clone(),
            })
            .collect();
        Ok(CalibrationResult {
            lambda_dis,
            lambda_cov,
            lambda_div,
            lambda_hat: lambda_dis.max(lambda_cov).max(lambda_div),
            n_cal: self.len(),
            budget: *budget,
            options: *options,
            curves,
        })
    }
}

/// Smallest `lambda` with `1 - lambda <= t`, so a detection of confidence `t`
/// is included at exactly this threshold despite rounding in `1 - t`.
fn breakpoint_for(t: f64) -> f64 {
    let mut lambda = (1.0 - t).clamp(0.0, 1.0);
    while lambda < 1.0 && 1.0 - lambda > t {
        lambda = lambda.next_up();
    }
    while lambda > 0.0 && 1.0 - lambda.next_down() <= t {
        lambda = lambda.next_down();
    }
    lambda
}

/// Binary search for the first index whose predicate holds, assuming the
/// predicate is monotone (false ... false true ... true). `None` when even
/// the last index fails.
fn smallest_admissible(len: usize, mut ok: impl FnMut(usize) -> bool) -> Option<usize> {
    if len == 0 || !ok(len - 1) {
        return None;
    }
    let (mut lo, mut hi) = (0usize, len - 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

/// Mean loss of `criterion` over `cal_set` at the given threshold.
pub fn empirical_risk(
    criterion: Criterion,
    lambda: f64,
    cal_set: &[AnnotatedSample],
    catalog: &ConceptCatalog,
) -> Result<f64> {
    check_lambda(lambda)?;
    if cal_set.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let evaluator = LossEvaluator::new(catalog)?;
    let mut total = 0.0;
    for sample in cal_set {
        let cset = build_concept_set(sample, lambda)?;
        total += evaluator.view(sample)?.loss(criterion, &cset)?;
    }
    Ok(total / cal_set.len() as f64)
}

pub fn calibrate_criterion(
    criterion: Criterion,
    alpha: f64,
    cal_set: &[AnnotatedSample],
    catalog: &ConceptCatalog,
    options: &CalibrationOptions,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside (0, 1)")));
    }
    CalibrationData::new(cal_set, catalog)?.calibrate_criterion(criterion, alpha, options)
}

pub fn calibrate(
    budget: &RiskBudget,
    cal_set: &[AnnotatedSample],
    catalog: &ConceptCatalog,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    CalibrationData::new(cal_set, catalog)?.calibrate(budget, options)
}

/// A source of synthetic samples for Monte Carlo checks of the risk
/// guarantee. Calibration and target draws share one distribution unless
/// the source says otherwise.
pub trait SampleSource {
    fn catalog(&self) -> &ConceptCatalog;

    fn draw_calibration(&self, rng: &mut ChaCha8Rng) -> Result<AnnotatedSample>;

    fn draw_target(&self, rng: &mut ChaCha8Rng) -> Result<AnnotatedSample> {
        self.draw_calibration(rng)
    }

    /// Whether calibration and target draws are exchangeable.
    fn exchangeable(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuaranteeConfig {
    pub n_cal: usize,
    pub n_trials: usize,
    pub seed: u64,
    /// Absolute tolerance on the trial-averaged target loss.
    pub slack: f64,
    pub options: CalibrationOptions,
}

impl Default for GuaranteeConfig {
    fn default() -> Self {
        Self {
            n_cal: 100,
            n_trials: 2000,
            seed: 0,
            slack: 0.01,
            options: CalibrationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotCoveredByTheorem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionCoverage {
    pub criterion: Criterion,
    pub alpha: f64,
    pub mean_target_loss: f64,
    pub std_target_loss: f64,
    pub std_error: f64,
    /// `mean_target_loss - alpha`.
    pub gap: f64,
    pub within_slack: bool,
    pub within_three_std_errors: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub lambda_hat: f64,
    pub target_losses: [f64; 3],
    pub target_set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub budget: RiskBudget,
    pub config: GuaranteeConfig,
    pub exchangeable: bool,
    pub criteria: Vec<CriterionCoverage>,
    pub mean_lambda_hat: f64,
    pub mean_set_size: f64,
    pub verdict: Verdict,
    pub trials: Vec<TrialRecord>,
}

impl CoverageReport {
    pub fn criterion(&self, c: Criterion) -> Option<&CriterionCoverage> {
        self.criteria.iter().find(|x| x.criterion == c)
    }
}

/// Repeatedly calibrates on `n_cal` fresh draws and scores one fresh target
/// at the combined threshold, then compares the trial-averaged target loss
/// with each budget.
pub fn validate_guarantee(
    budget: &RiskBudget,
    source: &dyn SampleSource,
    config: &GuaranteeConfig,
) -> Result<CoverageReport> {
    budget.validate()?;
    if config.n_trials < 100 {
        return Err(Error::InvalidConfig(format!(
            "n_trials = {} is below the minimum of 100",
            config.n_trials
        )));
    }
    if config.n_cal == 0 {
        return Err(Error::EmptyCalibrationSet);
    }
    let evaluator = LossEvaluator::new(source.catalog())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trials = Vec::with_capacity(config.n_trials);
    let mut cal_set = Vec::with_capacity(config.n_cal);
    for _ in 0..config.n_trials {
        cal_set.clear();
        for _ in 0..config.n_cal {
            cal_set.push(source.draw_calibration(&mut rng)?);
        }
        let target = source.draw_target(&mut rng)?;
        let data = CalibrationData::with_evaluator(&cal_set, &evaluator)?;
        let lambdas = data.thresholds(budget, &config.options)?;
        let lambda_hat = lambdas[0].max(lambdas[1]).max(lambdas[2]);
        let cset = build_concept_set(&target, lambda_hat)?;
        let view = evaluator.view(&target)?;
        let mut target_losses = [0.0; 3];
        for (k, c) in Criterion::ALL.into_iter().enumerate() {
            target_losses[k] = view.loss(c, &cset)?;
        }
        trials.push(TrialRecord {
            lambda_hat,
            target_losses,
            target_set_size: cset.len(),
        });
    }

    let n = trials.len() as f64;
    let criteria: Vec<CriterionCoverage> = Criterion::ALL
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let alpha = budget.alpha(c);
            let mean = trials.iter().map(|t| t.target_losses[k]).sum::<f64>() / n;
            let var = trials
                .iter()
                .map(|t| (t.target_losses[k] - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            let std = var.sqrt();
            let se = std / n.sqrt();
            CriterionCoverage {
                criterion: c,
                alpha,
                mean_target_loss: mean,
                std_target_loss: std,
                std_error: se,
                gap: mean - alpha,
                within_slack: mean <= alpha + config.slack,
                within_three_std_errors: mean <= alpha + 3.0 * se,
            }
        })
        .collect();
    let verdict = if !source.exchangeable() {
        Verdict::NotCoveredByTheorem
    } else if criteria.iter().all(|c| c.within_slack) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(CoverageReport {
        budget: *budget,
        config: *config,
        exchangeable: source.exchangeable(),
        mean_lambda_hat: trials.iter().map(|t| t.lambda_hat).sum::<f64>() / n,
        mean_set_size: trials.iter().map(|t| t.target_set_size as f64).sum::<f64>() / n,
        criteria,
        verdict,
        trials,
    })
}
