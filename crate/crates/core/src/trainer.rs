//! Preference optimization loop.
//!
//! Every record contributes three samples: the preferred one `(Q, I_w, y_w)`,
//! the language-rejected one `(Q, I_w, y_l)` and the vision-rejected one
//! `(Q, I_l, y_w)`. A strategy maps their implicit rewards to a loss and to
//! per-sample coefficients `∂L/∂log π`; the parameter gradient is the
//! coefficient-weighted sum of the three sequence log-prob gradients.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Matrix, PolicyParams};
use crate::pref_math::{self, Beta, RewardTriplet};
use crate::scene_world::{PreferenceRecord, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Language pair only: preferred vs language-rejected.
    Dpo,
    /// `λ · dpo(vision pair) + (1 − λ) · dpo(language pair)`.
    Fixed,
    /// Three-way Plackett-Luce loss with adaptive rejected weights.
    Adaptive,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Dpo => "dpo",
            Strategy::Fixed => "fixed",
            Strategy::Adaptive => "adaptive",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(Strategy::Dpo),
            "fixed" => Ok(Strategy::Fixed),
            "adaptive" => Ok(Strategy::Adaptive),
            other => Err(Error::Config(format!("unknown strategy `{other}` (expected dpo, fixed or adaptive)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: Beta,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    /// Weight on the vision pair; only read by [`Strategy::Fixed`].
    pub fixed_weight: f64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: Beta::default(),
            learning_rate: 0.05,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            strategy: Strategy::Adaptive,
            fixed_weight: 0.5,
            init_std: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fixed_weight) {
            return Err(Error::Config(format!("fixed_weight must lie in [0, 1], got {}", self.fixed_weight)));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config(format!("init_std must be non-negative, got {}", self.init_std)));
        }
        Ok(())
    }
}

/// How the adaptive strategy turns rewards into gradient coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientPath {
    /// Gate times the weighted difference of log-prob gradients.
    #[default]
    Decomposed,
    /// Softmax over all three rewards minus the one-hot of the preferred
    /// sample, i.e. the plain derivative of `−log P(preferred first)`.
    Direct,
}

/// Sequence log-probabilities of the three samples of one record.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TripleLogProbs {
    pub pp: f64,
    pub pm: f64,
    pub mp: f64,
}

/// Loss and `∂L/∂log π` for each sample of one record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordTerms {
    pub loss: f64,
    pub coef_pp: f64,
    pub coef_pm: f64,
    pub coef_mp: f64,
}

/// Per-record loss and coefficients for the chosen strategy.
pub fn record_terms(strategy: Strategy, fixed_weight: f64, beta: Beta, t: &RewardTriplet, path: GradientPath) -> RecordTerms {
    let b = beta.value();
    match strategy {
        Strategy::Dpo => {
            let s = pref_math::sigmoid(t.r_pm - t.r_pp);
            RecordTerms { loss: pref_math::dpo_loss(t.r_pp, t.r_pm), coef_pp: -b * s, coef_pm: b * s, coef_mp: 0.0 }
        }
        Strategy::Fixed => {
            let lambda = fixed_weight;
            let s_vis = pref_math::sigmoid(t.r_mp - t.r_pp);
            let s_lang = pref_math::sigmoid(t.r_pm - t.r_pp);
            RecordTerms {
                loss: lambda * pref_math::dpo_loss(t.r_pp, t.r_mp) + (1.0 - lambda) * pref_math::dpo_loss(t.r_pp, t.r_pm),
                coef_pp: -b * (lambda * s_vis + (1.0 - lambda) * s_lang),
                coef_pm: b * (1.0 - lambda) * s_lang,
                coef_mp: b * lambda * s_vis,
            }
        }
        Strategy::Adaptive => {
            let loss = pref_math::adaptive_loss(t);
            match path {
                GradientPath::Decomposed => {
                    let gate = pref_math::gradient_gate(t);
                    let w = pref_math::rejected_weights(t);
                    RecordTerms { loss, coef_pp: -b * gate, coef_pm: b * gate * w.w_pm, coef_mp: b * gate * w.w_mp }
                }
                GradientPath::Direct => {
                    let lse = pref_math::log_sum_exp(&[t.r_pp, t.r_pm, t.r_mp]);
                    let p = |r: f64| (r - lse).exp();
                    RecordTerms { loss, coef_pp: b * (p(t.r_pp) - 1.0), coef_pm: b * p(t.r_pm), coef_mp: b * p(t.r_mp) }
                }
            }
        }
    }
}

/// Batch means logged per optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    pub loss: f64,
    pub r_pp: f64,
    pub r_pm: f64,
    pub r_mp: f64,
    pub w_pm: f64,
    pub w_mp: f64,
    pub gate: f64,
    pub logp_pp: f64,
    pub logp_pm: f64,
    pub logp_mp: f64,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: f64,
    pub gradient: Matrix,
    pub stats: BatchStats,
}

/// Log-probabilities of the three samples of `record` under `params`.
pub fn triple_log_probs(params: &PolicyParams, record: &PreferenceRecord) -> Result<TripleLogProbs> {
    Ok(TripleLogProbs {
        pp: params.log_prob(&record.query, &record.features_w, &record.y_w)?.total,
        pm: params.log_prob(&record.query, &record.features_w, &record.y_l)?.total,
        mp: params.log_prob(&record.query, &record.features_l, &record.y_w)?.total,
    })
}

fn rewards(beta: Beta, policy: &TripleLogProbs, reference: &TripleLogProbs) -> Result<RewardTriplet> {
    use pref_math::{implicit_reward, LogProbPair};
    RewardTriplet::new(
        implicit_reward(LogProbPair::new(policy.pp, reference.pp), beta)?,
        implicit_reward(LogProbPair::new(policy.pm, reference.pm), beta)?,
        implicit_reward(LogProbPair::new(policy.mp, reference.mp), beta)?,
    )
}

/// Mean loss and gradient over `batch`, with reference log-probabilities
/// supplied by the caller (one entry per record).
pub fn batch_loss_with_reference(
    params: &PolicyParams,
    reference: &[TripleLogProbs],
    batch: &[&PreferenceRecord],
    config: &TrainConfig,
    path: GradientPath,
) -> Result<BatchOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    assert_eq!(reference.len(), batch.len(), "one reference entry per record");
    let per_record: Vec<(TripleLogProbs, RewardTriplet, RecordTerms)> = batch
        .par_iter()
        .zip(reference.par_iter())
        .map(|(record, reference)| {
            let policy = triple_log_probs(params, record)?;
            let t = rewards(config.beta, &policy, reference)?;
            let terms = record_terms(config.strategy, config.fixed_weight, config.beta, &t, path);
            Ok((policy, t, terms))
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut gradient = params.zeros_like();
    let mut stats = BatchStats::default();
    for (record, (logp, t, terms)) in batch.iter().zip(&per_record) {
        let q = &record.query;
        params.accumulate_grad_log_prob(q, &record.features_w, &record.y_w, terms.coef_pp / n, &mut gradient)?;
        if terms.coef_pm != 0.0 {
            params.accumulate_grad_log_prob(q, &record.features_w, &record.y_l, terms.coef_pm / n, &mut gradient)?;
        }
        if terms.coef_mp != 0.0 {
            params.accumulate_grad_log_prob(q, &record.features_l, &record.y_w, terms.coef_mp / n, &mut gradient)?;
        }
        let w = pref_math::rejected_weights(t);
        stats.loss += terms.loss;
        stats.r_pp += t.r_pp;
        stats.r_pm += t.r_pm;
        stats.r_mp += t.r_mp;
        stats.w_pm += w.w_pm;
        stats.w_mp += w.w_mp;
        stats.gate += pref_math::gradient_gate(t);
        stats.logp_pp += logp.pp;
        stats.logp_pm += logp.pm;
        stats.logp_mp += logp.mp;
    }
    for x in [
        &mut stats.loss,
        &mut stats.r_pp,
        &mut stats.r_pm,
        &mut stats.r_mp,
        &mut stats.w_pm,
        &mut stats.w_mp,
        &mut stats.gate,
        &mut stats.logp_pp,
        &mut stats.logp_pm,
        &mut stats.logp_mp,
    ] {
        *x /= n;
    }
    Ok(BatchOutput { loss: stats.loss, gradient, stats })
}

/// Mean loss, gradient and statistics over `batch`.
pub fn batch_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[&PreferenceRecord],
    config: &TrainConfig,
) -> Result<BatchOutput> {
    batch_loss_via(params, reference, batch, config, GradientPath::default())
}

pub fn batch_loss_via(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[&PreferenceRecord],
    config: &TrainConfig,
    path: GradientPath,
) -> Result<BatchOutput> {
    let ref_logps: Vec<TripleLogProbs> = batch
        .par_iter()
        .map(|r| triple_log_probs(reference, r))
        .collect::<Result<_>>()?;
    batch_loss_with_reference(params, &ref_logps, batch, config, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub step: usize,
    #[serde(flatten)]
    pub stats: BatchStats,
}

pub const DYNAMICS_COLUMNS: [&str; 11] = [
    "step", "loss", "r_pp", "r_pm", "r_mp", "w_pm", "w_mp", "gate", "logp_pp", "logp_pm", "logp_mp",
];

/// One row per optimization step, recorded before the update is applied.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynamicsLog {
    pub rows: Vec<DynamicsRow>,
}

impl DynamicsLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean of `f` over rows `[start, end)`.
    pub fn mean_over(&self, start: usize, end: usize, f: impl Fn(&BatchStats) -> f64) -> f64 {
        let rows = &self.rows[start..end];
        rows.iter().map(|r| f(&r.stats)).sum::<f64>() / rows.len() as f64
    }

    /// CSV with the fixed column header. `comments` are written first, one
    /// `# ` line each.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(&DYNAMICS_COLUMNS.join(","));
        out.push('\n');
        for row in &self.rows {
            let s = &row.stats;
            let values = [s.loss, s.r_pp, s.r_pm, s.r_mp, s.w_pm, s.w_mp, s.gate, s.logp_pp, s.logp_pm, s.logp_mp];
            out.push_str(&row.step.to_string());
            for v in values {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(self.to_csv(comments).as_bytes())?;
        out.flush()?;
        Ok(())
    }

    /// Parses CSV produced by [`DynamicsLog::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Invalid("dynamics CSV has no header".into()))?;
        if header != DYNAMICS_COLUMNS.join(",") {
            return Err(Error::Invalid(format!("unexpected dynamics header `{header}`")));
        }
        let mut rows = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != DYNAMICS_COLUMNS.len() {
                return Err(Error::Invalid(format!("dynamics row has {} fields", fields.len())));
            }
            let num = |i: usize| -> Result<f64> {
                fields[i].parse().map_err(|_| Error::Invalid(format!("bad number `{}`", fields[i])))
            };
            rows.push(DynamicsRow {
                step: fields[0].parse().map_err(|_| Error::Invalid(format!("bad step `{}`", fields[0])))?,
                stats: BatchStats {
                    loss: num(1)?,
                    r_pp: num(2)?,
                    r_pm: num(3)?,
                    r_mp: num(4)?,
                    w_pm: num(5)?,
                    w_mp: num(6)?,
                    gate: num(7)?,
                    logp_pp: num(8)?,
                    logp_pm: num(9)?,
                    logp_mp: num(10)?,
                },
            });
        }
        Ok(Self { rows })
    }
}

/// Re-emits `columns` (in the given order) from a dynamics CSV, dropping
/// comment lines.
pub fn project_columns(csv: &str, columns: &[&str]) -> Result<String> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Invalid("CSV has no header".into()))?
        .split(',')
        .collect();
    let picks: Vec<usize> = columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::Invalid(format!("unknown column `{c}`")))
        })
        .collect::<Result<_>>()?;
    let mut out = columns.join(",");
    out.push('\n');
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let row: Vec<&str> = picks.iter().map(|&i| fields.get(i).copied().unwrap_or("")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub log: DynamicsLog,
}

/// Initial parameters for a run: Gaussian with `init_std`, seeded by
/// `config.seed`. The reference model is a copy of these.
pub fn initial_params(config: &TrainConfig, world: &World) -> Result<PolicyParams> {
    PolicyParams::random(world.vocab().clone(), world.d_img(), config.init_std, config.seed)
}

/// Plain gradient descent for `config.steps` batches. Batches are drawn
/// from a per-epoch shuffle; the last batch of an epoch may be smaller and
/// is used as is.
pub fn train(config: &TrainConfig, world: &World, dataset: &[PreferenceRecord]) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reference = initial_params(config, world)?;
    let mut params = reference.clone();
    let ref_logps: Vec<TripleLogProbs> = dataset
        .par_iter()
        .map(|r| triple_log_probs(&reference, r))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut log = DynamicsLog { rows: Vec::with_capacity(config.steps) };

    for step in 0..config.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let idx = &order[cursor..end];
        cursor = end;
        let batch: Vec<&PreferenceRecord> = idx.iter().map(|&i| &dataset[i]).collect();
        let refs: Vec<TripleLogProbs> = idx.iter().map(|&i| ref_logps[i]).collect();
        let out = batch_loss_with_reference(&params, &refs, &batch, config, GradientPath::Decomposed)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                other => other,
            })?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        params.weights_mut().add_scaled(&out.gradient, -config.learning_rate);
        if params.weights().as_slice().iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        log.rows.push(DynamicsRow { step, stats: out.stats });
    }
    Ok(TrainOutput { params, reference, log })
}
