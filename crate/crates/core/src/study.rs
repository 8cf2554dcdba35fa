//! Pairwise feature study.
//!
//! For each training condition (round, heterogeneity level, seed) every
//! unordered client pair is scored by the validation outcome of its
//! hypothetical one-round update. Ten geometric and statistical features
//! of the two pre-update gradients are regressed onto scaled outcomes with
//! logistic regression, and features are ranked by the magnitude of their
//! standardized weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, LearningRate, ModelSpec};
use crate::data::PartitionMode;
use crate::error::{FedselError, Result};
use crate::federation::Federation;
use crate::numerics::{cos_p, covariance, kurtosis, lp_norm, pearson, GradientVector, Polarization};
use crate::selection::{binomial, oracle_table, PolicySpec, DEFAULT_ORACLE_BUDGET};
use crate::sketch::SketchConfig;

pub const FEATURE_NAMES: [&str; 10] = [
    "cos_1",
    "cos_2",
    "cos_4",
    "norm_sum_1",
    "norm_sum_2",
    "norm_sum_4",
    "dist_2",
    "kurtosis_sum",
    "covariance",
    "pearson",
];

/// Indices of the cosine-family and norm-sum features in [`FEATURE_NAMES`].
pub const COS_FEATURES: [usize; 3] = [0, 1, 2];
pub const NORM_SUM_FEATURES: [usize; 3] = [3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelScaler {
    MinMax,
    Softmax { temperature: f64 },
}

impl Default for LabelScaler {
    fn default() -> Self {
        LabelScaler::MinMax
    }
}

/// Which hypothetical-update outcome becomes the raw label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Validation accuracy; higher is better.
    #[default]
    Accuracy,
    /// Negated validation loss, so that higher is still better.
    Loss,
}

fn default_lambda() -> f64 {
    1e-3
}
fn default_oracle_budget() -> usize {
    DEFAULT_ORACLE_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub num_clients: usize,
    /// Conditions use rounds `1..=rounds`; round `t` scores the update
    /// applied at round `t`.
    pub rounds: usize,
    #[serde(default)]
    pub learning_rate: LearningRate,
    pub model: ModelSpec,
    pub data: DataSource,
    /// Heterogeneity levels, one partition each.
    pub heterogeneity: Vec<PartitionMode>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scaler: LabelScaler,
    #[serde(default)]
    pub label_source: LabelSource,
    #[serde(default = "default_lambda")]
    pub regularization: f64,
    #[serde(default = "default_oracle_budget")]
    pub oracle_budget: usize,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FedselError::Config(format!("invalid study config: {e}")))
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            FedselError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| FedselError::Config(format!("{}: {e}", path.display())))?;
        if let DataSource::Csv { path: p } = &mut cfg.data {
            if p.is_relative() {
                *p = path.parent().unwrap_or(std::path::Path::new(".")).join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The random-selection trajectory config for one heterogeneity level.
    pub fn trajectory_config(&self, level: usize) -> ExperimentConfig {
        ExperimentConfig {
            num_clients: self.num_clients,
            rounds: self.rounds,
            clients_per_round: 2,
            learning_rate: self.learning_rate,
            policy: PolicySpec::Random,
            sketch: SketchConfig::default(),
            partition: self.heterogeneity[level],
            model: self.model,
            data: self.data.clone(),
            seeds: self.seeds.clone(),
            selection_layers: None,
            track_regret: false,
            oracle_budget: self.oracle_budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heterogeneity.is_empty() {
            return Err(FedselError::Config("heterogeneity must list at least one level".into()));
        }
        if !(self.regularization.is_finite() && self.regularization >= 0.0) {
            return Err(FedselError::Config(format!(
                "regularization must be >= 0, got {}",
                self.regularization
            )));
        }
        if let LabelScaler::Softmax { temperature } = self.scaler {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(FedselError::Config(format!(
                    "softmax temperature must be positive, got {temperature}"
                )));
            }
        }
        let pairs = binomial(self.num_clients, 2);
        if pairs > self.oracle_budget as u64 {
            return Err(FedselError::Config(format!(
                "study needs {pairs} pair evaluations per condition, budget is {}",
                self.oracle_budget
            )));
        }
        for level in 0..self.heterogeneity.len() {
            self.trajectory_config(level).validate()?;
        }
        Ok(())
    }
}

/// The ten pair features, in [`FEATURE_NAMES`] order.
pub fn extract_features(g: &GradientVector, h: &GradientVector) -> Result<Vec<f64>> {
    if !g.same_layout(h) {
        return Err(FedselError::Layout("feature pair has different layouts".into()));
    }
    let (u, v) = (g.flatten(), h.flatten());
    let mut out = Vec::with_capacity(FEATURE_NAMES.len());
    for p in [1.0, 2.0, 4.0] {
        out.push(cos_p(&u, &v, p, Polarization::Powered)?);
    }
    for p in [1.0, 2.0, 4.0] {
        out.push(lp_norm(&u, p)? + lp_norm(&v, p)?);
    }
    let diff: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
    out.push(lp_norm(&diff, 2.0)?);
    out.push(kurtosis(&u)? + kurtosis(&v)?);
    out.push(covariance(&u, &v)?);
    out.push(pearson(&u, &v)?);
    Ok(out)
}


/// Maps one condition's raw outcomes to labels in `[0, 1]`.
pub fn scale_labels(raw: &[f64], scaler: LabelScaler) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match scaler {
        LabelScaler::MinMax => {
            let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
            if max == min {
                return vec![0.5; raw.len()];
            }
            raw.iter().map(|y| (y - min) / (max - min)).collect()
        }
        // softmax normalized by its largest entry: exp((y - max) / τ)
        LabelScaler::Softmax { temperature } => raw.iter().map(|y| ((y - max) / temperature).exp()).collect(),
    }
}

/// One training condition: a point on a random-selection trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition {
    /// 1-based round whose update is being scored.
    pub round: usize,
    /// Index into the configured heterogeneity levels.
    pub level: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub condition: Condition,
    pub pair: (usize, usize),
    pub features: Vec<f64>,
    /// Accuracy (or negated loss) after the pair's hypothetical update.
    pub raw_outcome: f64,
    /// Validation loss after the pair's hypothetical update.
    pub loss: f64,
    pub label: f64,
}

/// Loss range over all pairs of a condition, including dropped ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub best_loss: f64,
    pub worst_loss: f64,
    pub dropped_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDataset {
    pub samples: Vec<PairSample>,
    pub conditions: Vec<ConditionSummary>,
}

fn trajectory_samples(
    cfg: &StudyConfig,
    level: usize,
    seed: u64,
) -> Result<(Vec<PairSample>, Vec<ConditionSummary>)> {
    let fed = Federation::setup(&cfg.trajectory_config(level), seed)?;
    let mut state = fed.initial_state();
    let mut samples = Vec::new();
    let mut summaries = Vec::new();
    for round in 1..=cfg.rounds {
        let condition = Condition { round, level, seed };
        let (_, grads) = fed.client_gradients(&state.params)?;
        let refs: Vec<&GradientVector> = grads.iter().collect();
        let eta = cfg.learning_rate.at(round);
        let table = oracle_table(&state.params, &refs, &fed.dataset.validation, 2, eta, cfg.oracle_budget)?;
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for entry in &table.table {
            let (a, b) = (entry.subset[0], entry.subset[1]);
            match extract_features(&grads[a], &grads[b]) {
                Ok(features) => kept.push(PairSample {
                    condition,
                    pair: (a, b),
                    features,
                    raw_outcome: match cfg.label_source {
                        LabelSource::Accuracy => entry.accuracy,
                        LabelSource::Loss => -entry.loss,
                    },
                    loss: entry.loss,
                    label: 0.0,
                }),
                Err(e) => {
                    log::warn!("seed {seed} round {round}: dropping pair ({a}, {b}): {e}");
                    dropped.push((a, b));
                }
            }
        }
        let raw: Vec<f64> = kept.iter().map(|s| s.raw_outcome).collect();
        for (s, y) in kept.iter_mut().zip(scale_labels(&raw, cfg.scaler)) {
            s.label = y;
        }
        samples.extend(kept);
        summaries.push(ConditionSummary {
            condition,
            best_loss: table.best_entry().loss,
            worst_loss: table.worst_entry().loss,
            dropped_pairs: dropped,
        });
        if round < cfg.rounds {
            state = fed.run_round(&state)?.0;
        }
    }
    Ok((samples, summaries))
}

/// Pair samples for every (round, level, seed) condition, sorted by
/// condition and then pair.
pub fn build_dataset(cfg: &StudyConfig) -> Result<StudyDataset> {
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = (0..cfg.heterogeneity.len())
        .flat_map(|l| cfg.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let parts = jobs
        .par_iter()
        .map(|&(level, seed)| trajectory_samples(cfg, level, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    let mut conditions = Vec::new();
    for (s, c) in parts {
        samples.extend(s);
        conditions.extend(c);
    }
    samples.sort_by(|a, b| (a.condition, a.pair).cmp(&(b.condition, b.pair)));
    conditions.sort_by_key(|c| c.condition);
    Ok(StudyDataset { samples, conditions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub lambda: f64,
    pub step: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            step: 0.1,
            tolerance: 1e-8,
            max_iterations: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub iterations: usize,
    /// Norm of the penalized objective's gradient at the returned weights.
    pub gradient_norm: f64,
    pub converged: bool,
    /// Mean BCE plus the L2 penalty at the returned weights.
    pub objective: f64,
}

impl LogisticFit {
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Logit `wᵀz + b` for raw (unstandardized) features.
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.standardize(x).iter().zip(&self.weights).map(|(z, w)| z * w).sum::<f64>() + self.intercept
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Standardized {
    rows: Vec<Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn standardize(x: &[Vec<f64>]) -> Standardized {
    let n = x.len() as f64;
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            // constant columns standardize to zero
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let rows = x
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect())
        .collect();
    Standardized { rows, mean, std }
}

/// Penalized objective and its gradient `(∇w, ∂b)`.
fn objective(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, lambda: f64) -> (f64, Vec<f64>, f64, Vec<f64>) {
    let n = z.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (row, &t) in z.iter().zip(y) {
        let s = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        loss += softplus(s) - t * s;
        let r = sigmoid(s) - t;
        for (g, a) in gw.iter_mut().zip(row) {
            *g += r * a;
        }
        gb += r;
    }
    loss /= n;
    gb /= n;
    gw.iter_mut().for_each(|g| *g /= n);
    let penalty = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let full: Vec<f64> = gw.iter().zip(w).map(|(g, v)| g + lambda * v).collect();
    (loss + penalty, gw, gb, full)
}

/// Full-batch gradient descent on mean BCE with an L2 penalty on the
/// (standardized) weights; the intercept is not penalized. The penalty is
/// applied as a proximal step, `w ← (w − step·∇BCE) / (1 + step·λ)`, which
/// keeps very large `λ` stable.
pub fn fit_logistic_with(x: &[Vec<f64>], y: &[f64], opts: &LogisticOptions) -> Result<(LogisticFit, Vec<f64>)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(FedselError::Shape(format!("{} feature rows for {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(FedselError::Shape("ragged feature rows".into()));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(FedselError::Numeric("labels must lie in [0, 1]".into()));
    }
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return Err(FedselError::DegenerateStatistic("logistic fit needs at least 2 distinct labels".into()));
    }
    let z = standardize(x);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut history = Vec::new();
    let mut iterations = 0;
    let (final_obj, norm) = loop {
        let (obj, gw, gb, full) = objective(&z.rows, y, &w, b, opts.lambda);
        history.push(obj);
        let norm = (full.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if norm < opts.tolerance || iterations == opts.max_iterations || !norm.is_finite() {
            break (obj, norm);
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi = (*wi - opts.step * gi) / (1.0 + opts.step * opts.lambda);
        }
        b -= opts.step * gb;
        iterations += 1;
    };
    let converged = norm < opts.tolerance;
    if !converged {
        log::warn!("logistic fit stopped after {iterations} iterations with gradient norm {norm:.3e}");
    }
    Ok((
        LogisticFit {
            weights: w,
            intercept: b,
            feature_mean: z.mean,
            feature_std: z.std,
            iterations,
            gradient_norm: norm,
            converged,
            objective: final_obj,
        },
        history,
    ))
}

pub fn fit_logistic(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<LogisticFit> {
    Ok(fit_logistic_with(
        x,
        y,
        &LogisticOptions {
            lambda,
            ..LogisticOptions::default()
        },
    )?
    .0)
}

/// 1-based ranks by descending `|weight|`; ties keep feature order.
pub fn rank_by_magnitude(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    let mut ranks = vec![0; weights.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// `(L_chosen − L_best) / (L_worst − L_best)`, 0 when the range is empty.
pub fn regret_ratio(chosen: f64, best: f64, worst: f64) -> f64 {
    if worst > best {
        ((chosen - best) / (worst - best)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Mean regret ratio of one policy within one (level, round bucket) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeLossRow {
    pub level: usize,
    /// Round quartile, 0 to 3.
    pub bucket: usize,
    pub policy: String,
    pub conditions: usize,
    pub relative_loss: f64,
}

/// Round quartile of a 1-based round.
pub fn round_bucket(round: usize, rounds: usize) -> usize {
    ((round - 1) * 4 / rounds.max(1)).min(3)
}

/// Scores each policy's chosen pair per condition and averages the regret
/// ratio over conditions in the same level and round quartile.
///
/// Policies: `model` picks the pair with the largest fitted logit; each
/// feature picks the pair with the largest `sign(w_f)·x_f`; `random`
/// reports the expected ratio of a uniform pair.
pub fn relative_loss_table(data: &StudyDataset, fit: &LogisticFit, rounds: usize) -> Vec<RelativeLossRow> {
    let mut policies: Vec<String> = vec!["model".into()];
    policies.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
    policies.push("random".into());
    let mut sums: std::collections::BTreeMap<(usize, usize, usize), (f64, usize)> = Default::default();
    for cond in &data.conditions {
        let pairs: Vec<&PairSample> = data.samples.iter().filter(|s| s.condition == cond.condition).collect();
        if pairs.is_empty() {
            continue;
        }
        let ratio = |s: &PairSample| regret_ratio(s.loss, cond.best_loss, cond.worst_loss);
        let pick = |score: &dyn Fn(&PairSample) -> f64| -> f64 {
            // first maximal pair in pair order
            let mut best = pairs[0];
            for s in &pairs[1..] {
                if score(s) > score(best) {
                    best = s;
                }
            }
            ratio(best)
        };
        let mut values = vec![pick(&|s| fit.logit(&s.features))];
        for f in 0..FEATURE_NAMES.len() {
            let sign = if fit.weights[f] < 0.0 { -1.0 } else { 1.0 };
            values.push(pick(&|s| sign * s.features[f]));
        }
        values.push(pairs.iter().map(|s| ratio(s)).sum::<f64>() / pairs.len() as f64);
        let bucket = round_bucket(cond.condition.round, rounds);
        for (p, v) in values.into_iter().enumerate() {
            let e = sums.entry((cond.condition.level, bucket, p)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|((level, bucket, p), (sum, n))| RelativeLossRow {
            level,
            bucket,
            policy: policies[p].clone(),
            conditions: n,
            relative_loss: sum / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub name: String,
    pub weight: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub features: Vec<FeatureWeight>,
    /// Feature names by descending `|weight|`.
    pub ranking: Vec<String>,
    pub fit: LogisticFit,
    pub samples: usize,
    pub conditions: usize,
    pub dropped_pairs: usize,
    pub relative_loss: Vec<RelativeLossRow>,
    /// How `relative_loss` is normalized.
    pub relative_loss_definition: String,
}

impl StudyReport {
    pub fn mean_rank(&self, features: &[usize]) -> f64 {
        features.iter().map(|&i| self.features[i].rank as f64).sum::<f64>() / features.len() as f64
    }

    /// The cosine features rank better (lower) on average than the norm sums.
    pub fn cos_beats_norm_sums(&self) -> bool {
        self.mean_rank(&COS_FEATURES) < self.mean_rank(&NORM_SUM_FEATURES)
    }
}

/// Fits the model on a built dataset and assembles the report.
pub fn report(cfg: &StudyConfig, data: &StudyDataset) -> Result<StudyReport> {
    let x: Vec<Vec<f64>> = data.samples.iter().map(|s| s.features.clone()).collect();
    let y: Vec<f64> = data.samples.iter().map(|s| s.label).collect();
    let fit = fit_logistic(&x, &y, cfg.regularization)?;
    let ranks = rank_by_magnitude(&fit.weights);
    let features: Vec<FeatureWeight> = FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| FeatureWeight {
            name: n.to_string(),
            weight: fit.weights[i],
            rank: ranks[i],
        })
        .collect();
    let mut ranking: Vec<&FeatureWeight> = features.iter().collect();
    ranking.sort_by_key(|f| f.rank);
    let ranking = ranking.into_iter().map(|f| f.name.clone()).collect();
    Ok(StudyReport {
        relative_loss: relative_loss_table(data, &fit, cfg.rounds),
        features,
        ranking,
        samples: data.samples.len(),
        conditions: data.conditions.len(),
        dropped_pairs: data.conditions.iter().map(|c| c.dropped_pairs.len()).sum(),
        fit,
        relative_loss_definition: "(L_chosen - L_best) / (L_worst - L_best) over all pairs of a condition; \
                                   0 is the best pair, 1 the worst"
            .into(),
    })
}

/// Builds the dataset, fits, and reports.
pub fn run_study(cfg: &StudyConfig) -> Result<(StudyDataset, StudyReport)> {
    let data = build_dataset(cfg)?;
    let report = report(cfg, &data)?;
    Ok((data, report))
}
