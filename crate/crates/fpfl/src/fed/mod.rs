//! Federated training loop: cohort sampling, per-user statistics, sum-only
//! aggregation with clipping and Gaussian noise, server-side updates, and
//! model selection.

pub mod central;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ArchName, ExperimentConfig, LossNormalizer};
use crate::constrained::{fpfl_update, tran_variant_update, MultiplierState, UpdateInputs};
use crate::datasets::{scale_population, PreparedDataset, SplitData, UserShard};
use crate::dp::{self, cache};
use crate::error::{Error, Result};
use crate::fairness::{self, FairnessSpec, GroupMetricsReport};
use crate::nn::{self, ArchitectureSpec, InputShape, ModelParams};

/// Deterministic per-purpose random streams derived from the experiment seed.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_COHORT: u64 = 1;
const STREAM_NOISE: u64 = 2;
pub(crate) const STREAM_BATCH: u64 = 3;

// ---------------------------------------------------------------------------
// Statistics vector
// ---------------------------------------------------------------------------

/// Flat per-user statistics vector with layout
/// `[grad_L (p) | F_a (r) | grad_F_a (r*p) | n'_a (r)]` for r groups.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsVector {
    pub data: Vec<f64>,
    pub p: usize,
    pub groups: usize,
}

impl StatsVector {
    pub fn expected_len(p: usize, groups: usize) -> usize {
        (groups + 1) * p + 2 * groups
    }

    pub fn zeros(p: usize, groups: usize) -> Self {
        StatsVector {
            data: vec![0.0; Self::expected_len(p, groups)],
            p,
            groups,
        }
    }

    pub fn from_vec(data: Vec<f64>, p: usize, groups: usize) -> Result<Self> {
        if data.len() != Self::expected_len(p, groups) {
            return Err(Error::DimensionMismatch(format!(
                "statistics vector length {} but expected {}",
                data.len(),
                Self::expected_len(p, groups)
            )));
        }
        Ok(StatsVector { data, p, groups })
    }

    pub fn grad_loss(&self) -> &[f64] {
        &self.data[..self.p]
    }

    pub fn f_sums(&self) -> &[f64] {
        &self.data[self.p..self.p + self.groups]
    }

    pub fn grad_f(&self, a: usize) -> &[f64] {
        let start = self.p + self.groups + a * self.p;
        &self.data[start..start + self.p]
    }

    pub fn counts(&self) -> &[f64] {
        &self.data[self.data.len() - self.groups..]
    }
}

/// The statistics a participant reports: loss gradient, per-group surrogate
/// sums and gradients, and per-group subset counts, all computed on the
/// user's full local dataset.
pub fn user_statistics(
    dataset: &PreparedDataset,
    shard: &UserShard,
    model: &ModelParams,
    spec: &FairnessSpec,
) -> Result<StatsVector> {
    let batch = dataset.train.batch(&shard.indices);
    let (_, grad_loss, surrogates) = nn::statistics_pass(model, &batch, spec)?;
    let p = model.param_count();
    let groups = spec.group_count;
    let mut out = StatsVector::zeros(p, groups);
    out.data[..p].copy_from_slice(&grad_loss);
    for (a, s) in surrogates.iter().enumerate() {
        out.data[p + a] = s.f_sum;
        let start = p + groups + a * p;
        out.data[start..start + p].copy_from_slice(&s.grad);
        let counts_at = out.data.len() - groups + a;
        out.data[counts_at] = s.count as f64;
    }
    Ok(out)
}

/// Plain-gradient report for the unconstrained baseline: just grad_L.
pub fn user_gradient(
    dataset: &PreparedDataset,
    shard: &UserShard,
    model: &ModelParams,
) -> Result<Vec<f64>> {
    let batch = dataset.train.batch(&shard.indices);
    let (_, grad) = nn::loss_and_grad(model, &batch)?;
    Ok(grad)
}

/// Aggregated cohort vectors: the exact unclipped sum (simulator oracle)
/// and the released sum (clipped per user, noise added).
pub struct AggregateOutput {
    pub clean: Vec<f64>,
    pub released: Vec<f64>,
}

/// Sum per-user vectors in canonical (pre-sorted) order after clipping each
/// to norm `clip`, then add Gaussian noise with per-coordinate std
/// `clip * sigma`. Vector computation may run in parallel; the reduction is
/// sequential in cohort order so results are bit-reproducible.
pub fn secure_aggregate<F>(
    cohort: &[&UserShard],
    compute: F,
    clip: Option<f64>,
    sigma: f64,
    noise_rng: &mut ChaCha20Rng,
    parallel: bool,
) -> Result<AggregateOutput>
where
    F: Fn(&UserShard) -> Result<Vec<f64>> + Sync,
{
    if cohort.is_empty() {
        return Err(Error::EmptyBatch);
    }
    debug_assert!(
        cohort.windows(2).all(|w| w[0].id <= w[1].id),
        "cohort must arrive in canonical id order"
    );
    let vectors: Vec<Vec<f64>> = if parallel {
        cohort
            .par_iter()
            .map(|shard| compute(shard))
            .collect::<Result<_>>()?
    } else {
        cohort
            .iter()
            .map(|shard| compute(shard))
            .collect::<Result<_>>()?
    };
    let len = vectors[0].len();
    let mut clean = vec![0.0; len];
    let mut released = vec![0.0; len];
    for mut v in vectors {
        if v.len() != len {
            return Err(Error::DimensionMismatch("user vector length".into()));
        }
        crate::vecops::axpy(&mut clean, 1.0, &v);
        if let Some(c) = clip {
            dp::clip_in_place(&mut v, c);
        }
        crate::vecops::axpy(&mut released, 1.0, &v);
    }
    if sigma > 0.0 {
        let c = clip.ok_or_else(|| {
            Error::InvalidConfig("noise requires a finite clipping bound".into())
        })?;
        dp::gaussian_mechanism_in_place(&mut released, c, sigma, noise_rng);
    }
    Ok(AggregateOutput { clean, released })
}

// ---------------------------------------------------------------------------
// Round records and model selection
// ---------------------------------------------------------------------------

/// One row of the metrics history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub iteration: usize,
    /// Hard accuracy of the evaluated model on the round's cohort (or batch).
    pub accuracy: f64,
    pub fnr_gap: Option<f64>,
    pub eo_gap: Option<f64>,
    pub demp_gap: Option<f64>,
    pub pp_gap: Option<f64>,
    pub acc_gap: Option<f64>,
    /// Multiplier state after this round's update.
    pub lambda: Vec<f64>,
    /// Constraint values the server saw (noisy under DP).
    pub g_noisy: Vec<f64>,
    /// Exact constraint values (simulator oracle).
    pub g_clean: Vec<f64>,
}

impl RoundRecord {
    fn from_report(iteration: usize, report: &GroupMetricsReport) -> Self {
        RoundRecord {
            iteration,
            accuracy: report.accuracy,
            fnr_gap: report.fnr_gap,
            eo_gap: report.eo_gap,
            demp_gap: report.demp_gap,
            pp_gap: report.pp_gap,
            acc_gap: report.acc_gap,
            lambda: Vec::new(),
            g_noisy: Vec::new(),
            g_clean: Vec::new(),
        }
    }
}

/// Render the history as CSV, one row per round.
pub fn history_to_csv(history: &[RoundRecord], groups: usize) -> String {
    let mut out = String::from("iteration,accuracy,fnr_gap,eo_gap,demp_gap,pp_gap,acc_gap");
    for a in 0..groups {
        out.push_str(&format!(",lambda_{a}"));
    }
    for a in 0..groups {
        out.push_str(&format!(",g_noisy_{a}"));
    }
    for a in 0..groups {
        out.push_str(&format!(",g_clean_{a}"));
    }
    out.push('\n');
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{},{},{},{},{}",
            r.iteration,
            r.accuracy,
            fmt_opt(r.fnr_gap),
            fmt_opt(r.eo_gap),
            fmt_opt(r.demp_gap),
            fmt_opt(r.pp_gap),
            fmt_opt(r.acc_gap),
        ));
        let fmt_vec = |out: &mut String, v: &[f64]| {
            for a in 0..groups {
                match v.get(a) {
                    Some(x) => out.push_str(&format!(",{x:.6}")),
                    None => out.push(','),
                }
            }
        };
        fmt_vec(&mut out, &r.lambda);
        fmt_vec(&mut out, &r.g_noisy);
        fmt_vec(&mut out, &r.g_clean);
        out.push('\n');
    }
    out
}

pub(crate) struct Selection {
    model: ModelParams,
    iteration: Option<usize>,
    score: f64,
}

impl Selection {
    pub(crate) fn new(init: &ModelParams) -> Self {
        Selection {
            model: init.clone(),
            iteration: None,
            score: f64::NEG_INFINITY,
        }
    }

    /// Keep the best-scoring feasible candidate; earlier rounds win ties.
    pub(crate) fn consider(
        &mut self,
        model: &ModelParams,
        iteration: usize,
        score: f64,
        feasible: bool,
    ) {
        if feasible && score > self.score {
            self.model = model.clone();
            self.iteration = Some(iteration);
            self.score = score;
        }
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_model: ModelParams,
    /// Best model under the selection rule (the initial model when no round
    /// ever qualified).
    pub selected_model: ModelParams,
    pub selected_iteration: Option<usize>,
    pub history: Vec<RoundRecord>,
    pub sigma: Option<f64>,
    pub normalizer_used: String,
}

/// Execution switches that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Compute per-user vectors serially even when a thread pool exists.
    pub serial: bool,
    /// Calibration cache file.
    pub calibration_cache: Option<std::path::PathBuf>,
}

// ---------------------------------------------------------------------------
// Server-side pieces
// ---------------------------------------------------------------------------

/// Build the model architecture for a dataset.
pub fn arch_for(name: ArchName, dataset: &PreparedDataset) -> Result<ArchitectureSpec> {
    let shape = dataset.train.input_shape();
    match (name, shape) {
        (ArchName::Shallow, InputShape::Flat(d)) => Ok(ArchitectureSpec::shallow_mlp(d)),
        (ArchName::Deep, InputShape::Flat(d)) => Ok(ArchitectureSpec::deep_mlp(d)),
        (ArchName::Cnn, InputShape::Image { channels, height, width }) => {
            if height != 28 || width != 28 {
                return Err(Error::InvalidConfig(format!(
                    "cnn expects 28x28 images, dataset has {height}x{width}"
                )));
            }
            Ok(ArchitectureSpec::small_cnn(channels))
        }
        (name, shape) => Err(Error::InvalidConfig(format!(
            "architecture {name:?} incompatible with dataset input {shape:?}"
        ))),
    }
}

/// Count and ratio sanitation for noisy statistics: counts round to at
/// least one (every declared group exists in the population), and the
/// per-group sums are clamped so ratios stay in [0,1]. Exact statistics
/// (no noise) pass through untouched.
pub(crate) fn sanitize_stats(f_sums: &mut [f64], counts: &mut [f64], noisy: bool) {
    if !noisy {
        return;
    }
    for (f, n) in f_sums.iter_mut().zip(counts.iter_mut()) {
        *n = n.round().max(1.0);
        *f = f.clamp(0.0, *n);
    }
}

struct PrivacySetup {
    clip: Option<f64>,
    sigma: f64,
}

fn privacy_setup(
    config: &ExperimentConfig,
    population: usize,
    options: &RunOptions,
) -> Result<PrivacySetup> {
    let clip = config.privacy.clip;
    if !config.privacy.enabled {
        return Ok(PrivacySetup { clip, sigma: 0.0 });
    }
    let (k_cal, delta_cal) = scale_population(
        population,
        config.privacy.delta,
        config.privacy.population_factor,
    )?;
    let sigma = cache::calibrate_cached(
        options.calibration_cache.as_deref(),
        k_cal,
        config.schedule.cohort_size,
        config.privacy.epsilon,
        delta_cal,
        config.schedule.iterations.max(1),
    )?;
    Ok(PrivacySetup { clip, sigma })
}

/// Noise multiplier this configuration would train with (dry-run support).
pub fn derived_sigma(
    config: &ExperimentConfig,
    dataset: &PreparedDataset,
    options: &RunOptions,
) -> Result<Option<f64>> {
    if !config.privacy.enabled {
        return Ok(None);
    }
    let setup = privacy_setup(config, dataset.split.user_count(), options)?;
    Ok(Some(setup.sigma))
}

fn loss_normalizer_for(
    config: &ExperimentConfig,
    true_count: f64,
    noisy_count_sum: Option<f64>,
    expected_count: f64,
) -> (f64, &'static str) {
    let noisy_mode = config.privacy.enabled;
    match (config.loss_normalizer, noisy_mode) {
        (LossNormalizer::TrueCount, _) => (true_count, "true_count"),
        (LossNormalizer::ExpectedCount, _) => (expected_count, "expected_count"),
        (LossNormalizer::NoisyCount, _) => (
            noisy_count_sum.unwrap_or(expected_count),
            "noisy_count",
        ),
        (LossNormalizer::Auto, false) => (true_count, "true_count"),
        (LossNormalizer::Auto, true) => match noisy_count_sum {
            Some(n) => (n, "noisy_count"),
            None => (expected_count, "expected_count"),
        },
    }
}

/// Run a federated experiment for `config.schedule.iterations` rounds.
pub fn run_federated(
    config: &ExperimentConfig,
    dataset: &PreparedDataset,
    options: &RunOptions,
) -> Result<RunResult> {
    config.validate()?;
    dataset.validate()?;
    if !config.is_federated() {
        return Err(Error::InvalidConfig(
            "run_federated called with a central algorithm".into(),
        ));
    }
    let groups = dataset.group_count;
    let spec = FairnessSpec::new(config.metric, groups, config.alpha)?;
    let arch = arch_for(config.arch, dataset)?;
    let p = arch.param_count();
    let mut model = nn::init_params(&arch, config.seed)?;
    let k = dataset.split.user_count();
    let m = config.schedule.cohort_size;
    if m == 0 || m > k {
        return Err(Error::InvalidConfig(format!(
            "cohort size {m} must lie in 1..={k}"
        )));
    }
    let privacy = privacy_setup(config, k, options)?;
    let fair = config.algorithm.enforces_fairness();
    let mut mult = MultiplierState::new(groups, config.gamma, config.effective_c());
    if let Some(l) = config.lambda_max {
        mult = mult.with_lambda_max(l);
    }

    let mut cohort_rng = stream_rng(config.seed, STREAM_COHORT);
    let mut noise_rng = stream_rng(config.seed, STREAM_NOISE);
    let mean_shard = dataset.split.total_samples() as f64 / k as f64;
    let expected_count = m as f64 * mean_shard;

    let mut selection = Selection::new(&model);
    let mut history = Vec::with_capacity(config.schedule.iterations);
    let mut normalizer_used = "";

    for t in 0..config.schedule.iterations {
        let mut picked = rand::seq::index::sample(&mut cohort_rng, k, m).into_vec();
        picked.sort_unstable();
        let cohort: Vec<&UserShard> = picked.iter().map(|&i| &dataset.split.shards[i]).collect();
        let true_count: f64 = cohort.iter().map(|s| s.len() as f64).sum();

        // Evaluate the current model on the pooled cohort (selection score).
        let cohort_rows: Vec<u32> = cohort
            .iter()
            .flat_map(|s| s.indices.iter().copied())
            .collect();
        let cohort_batch = dataset.train.batch(&cohort_rows);
        let report = fairness::evaluate_report(&model, &cohort_batch, groups, 0.5)?;
        let mut record = RoundRecord::from_report(t, &report);

        if fair {
            let agg = secure_aggregate(
                &cohort,
                |shard| user_statistics(dataset, shard, &model, &spec).map(|s| s.data),
                privacy.clip,
                privacy.sigma,
                &mut noise_rng,
                !options.serial,
            )?;
            let released = StatsVector::from_vec(agg.released, p, groups)?;
            let clean = StatsVector::from_vec(agg.clean, p, groups)?;

            let mut f_sums = released.f_sums().to_vec();
            let mut counts = released.counts().to_vec();
            sanitize_stats(&mut f_sums, &mut counts, privacy.sigma > 0.0);

            let (_, g_noisy) = fairness::constraint_values_from_sums(
                &f_sums,
                &counts,
                config.alpha,
            )?;
            let (_, g_clean) = match fairness::constraint_values_from_sums(
                clean.f_sums(),
                clean.counts(),
                config.alpha,
            ) {
                Ok((h, g)) => (h, g),
                Err(Error::AllGroupsEmpty) => (vec![0.0; groups], vec![0.0; groups]),
                Err(e) => return Err(e),
            };
            let feasible = g_noisy.iter().all(|&g| g == 0.0);
            selection.consider(&model, t, report.accuracy, feasible);

            let noisy_count_sum: f64 = counts.iter().sum();
            let (normalizer, label) = loss_normalizer_for(
                config,
                true_count,
                Some(noisy_count_sum),
                expected_count,
            );
            normalizer_used = label;
            let inputs = UpdateInputs {
                grad_loss: released.grad_loss().to_vec(),
                loss_normalizer: normalizer,
                f_sums,
                grad_f: (0..groups).map(|a| released.grad_f(a).to_vec()).collect(),
                counts,
                alpha: config.alpha,
            };
            let (w_next, mult_next) = match config.algorithm {
                Algorithm::Tran => tran_variant_update(&model.weights, &mult, &inputs, config.eta),
                _ => fpfl_update(&model.weights, &mult, &inputs, config.eta),
            }
            .map_err(|e| Error::NonFinite(format!("round {t}: {e}")))?;
            model.weights = w_next;
            mult = mult_next;
            record.lambda = mult.lambda.clone();
            record.g_noisy = g_noisy;
            record.g_clean = g_clean;
        } else {
            let agg = secure_aggregate(
                &cohort,
                |shard| user_gradient(dataset, shard, &model),
                privacy.clip,
                privacy.sigma,
                &mut noise_rng,
                !options.serial,
            )?;
            selection.consider(&model, t, report.accuracy, true);
            let (normalizer, label) =
                loss_normalizer_for(config, true_count, None, expected_count);
            normalizer_used = label;
            // same arithmetic as the constrained step with inactive
            // constraints, so the two paths agree bit-for-bit
            let inv_n = 1.0 / normalizer;
            for (w, g) in model.weights.iter_mut().zip(&agg.released) {
                *w -= config.eta * (g * inv_n);
            }
            if !crate::vecops::all_finite(&model.weights) {
                return Err(Error::NonFinite(format!("round {t}: updated parameters")));
            }
        }
        history.push(record);
    }

    Ok(RunResult {
        final_model: model,
        selected_model: selection.model,
        selected_iteration: selection.iteration,
        history,
        sigma: if config.privacy.enabled {
            Some(privacy.sigma)
        } else {
            None
        },
        normalizer_used: normalizer_used.to_string(),
    })
}

/// Run an experiment, dispatching on the configured setting.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &PreparedDataset,
    options: &RunOptions,
) -> Result<RunResult> {
    if config.is_federated() {
        run_federated(config, dataset, options)
    } else {
        central::run_central(config, dataset, options)
    }
}

/// Full-dataset evaluation of both returned models on a split.
pub fn evaluate_models(
    result: &RunResult,
    dataset: &PreparedDataset,
    split: &SplitData,
) -> Result<(GroupMetricsReport, GroupMetricsReport)> {
    let batch = split.full_batch();
    let final_report =
        fairness::evaluate_report(&result.final_model, &batch, dataset.group_count, 0.5)?;
    let selected_report =
        fairness::evaluate_report(&result.selected_model, &batch, dataset.group_count, 0.5)?;
    Ok((final_report, selected_report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScheduleSection;
    use crate::datasets::{partition_users, TabularDataset};
    use crate::fairness::FairnessMetric;
    use ndarray::Array2;
    use rand::Rng;

    /// Small synthetic binary tabular dataset with two groups where group 1
    /// has a harder positive class.
    pub(crate) fn toy_dataset(n: usize, seed: u64) -> PreparedDataset {
        let mut rng = stream_rng(seed, 9);
        let dims = 5usize;
        let mut features = Array2::zeros((n, dims));
        let mut labels = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);
        for i in 0..n {
            let group = u32::from(rng.random_range(0.0..1.0) < 0.3);
            let label = u32::from(rng.random_range(0.0..1.0) < 0.4);
            for j in 0..dims {
                let base: f64 = rng.random_range(-0.5..0.5);
                let signal = if label == 1 { 1.0 } else { -1.0 };
                // group 1 gets a weaker signal: harder to classify
                let strength = if group == 1 { 0.35 } else { 1.0 };
                features[[i, j]] = base + 0.5 * signal * strength * ((j % 3) as f64 - 1.0);
            }
            labels.push(label);
            groups.push(group);
        }
        let train = TabularDataset {
            features: features.clone(),
            labels: labels.clone(),
            groups: groups.clone(),
        };
        let test = TabularDataset {
            features,
            labels,
            groups,
        };
        PreparedDataset {
            name: "toy".into(),
            group_count: 2,
            group_names: vec!["g0".into(), "g1".into()],
            label_count: 2,
            train: SplitData::Tabular(train),
            test: SplitData::Tabular(test),
            split: partition_users(n, 2.0, seed).unwrap(),
        }
    }

    pub(crate) fn toy_config(algorithm: Algorithm, iterations: usize) -> ExperimentConfig {
        ExperimentConfig {
            name: "toy".into(),
            reference_row: None,
            dataset: "toy".into(),
            arch: ArchName::Shallow,
            algorithm,
            federated: false,
            eta: 0.1,
            gamma: 0.01,
            c: 2.0,
            alpha: 0.02,
            lambda_max: None,
            metric: FairnessMetric::FnrParity,
            seed: 7,
            loss_normalizer: LossNormalizer::Auto,
            privacy: Default::default(),
            schedule: ScheduleSection {
                iterations,
                cohort_size: 20,
                batch_size: 32,
            },
        }
    }

    #[test]
    fn statistics_vector_length_formula() {
        let dataset = toy_dataset(60, 3);
        let spec = FairnessSpec::new(FairnessMetric::FnrParity, 2, 0.02).unwrap();
        let arch = ArchitectureSpec::shallow_mlp(5);
        let model = nn::init_params(&arch, 0).unwrap();
        let stats =
            user_statistics(&dataset, &dataset.split.shards[0], &model, &spec).unwrap();
        assert_eq!(stats.data.len(), 3 * arch.param_count() + 4);
        assert_eq!(
            StatsVector::expected_len(151, 2),
            3 * 151 + 4,
            "(|A|+1)p + 2|A| for the shallow census model"
        );
    }

    #[test]
    fn splitting_a_user_preserves_the_sum() {
        let dataset = toy_dataset(60, 4);
        let spec = FairnessSpec::new(FairnessMetric::FnrParity, 2, 0.02).unwrap();
        let arch = ArchitectureSpec::shallow_mlp(5);
        let model = nn::init_params(&arch, 1).unwrap();
        let shard = dataset
            .split
            .shards
            .iter()
            .find(|s| s.len() >= 2)
            .expect("a shard with two samples");
        let whole = user_statistics(&dataset, shard, &model, &spec).unwrap();
        let half = shard.len() / 2;
        let first = UserShard {
            id: "a".into(),
            indices: shard.indices[..half].to_vec(),
        };
        let second = UserShard {
            id: "b".into(),
            indices: shard.indices[half..].to_vec(),
        };
        let sa = user_statistics(&dataset, &first, &model, &spec).unwrap();
        let sb = user_statistics(&dataset, &second, &model, &spec).unwrap();
        for i in 0..whole.data.len() {
            let sum = sa.data[i] + sb.data[i];
            assert!(
                (whole.data[i] - sum).abs() <= 1e-9 * whole.data[i].abs().max(1.0),
                "component {i}: {} vs {sum}",
                whole.data[i]
            );
        }
    }

    #[test]
    fn aggregation_without_clip_or_noise_matches_pooled_statistics() {
        let dataset = toy_dataset(50, 5);
        let spec = FairnessSpec::new(FairnessMetric::FnrParity, 2, 0.02).unwrap();
        let arch = ArchitectureSpec::shallow_mlp(5);
        let model = nn::init_params(&arch, 2).unwrap();
        let cohort: Vec<&UserShard> = dataset.split.shards.iter().collect();
        let mut rng = stream_rng(0, 2);
        let agg = secure_aggregate(
            &cohort,
            |shard| user_statistics(&dataset, shard, &model, &spec).map(|s| s.data),
            None,
            0.0,
            &mut rng,
            false,
        )
        .unwrap();
        // pooled dataset as a single pseudo-user
        let all_rows: Vec<u32> = (0..dataset.train.len() as u32).collect();
        let pooled_shard = UserShard {
            id: "all".into(),
            indices: all_rows,
        };
        let pooled = user_statistics(&dataset, &pooled_shard, &model, &spec).unwrap();
        assert_eq!(agg.clean, agg.released);
        for (a, b) in agg.released.iter().zip(&pooled.data) {
            assert!(
                (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                "aggregate {a} vs pooled {b}"
            );
        }
    }

    #[test]
    fn cohort_order_does_not_change_released_sum() {
        let dataset = toy_dataset(40, 6);
        let arch = ArchitectureSpec::shallow_mlp(5);
        let model = nn::init_params(&arch, 3).unwrap();
        let cohort: Vec<&UserShard> = dataset.split.shards.iter().collect();
        let run = |parallel: bool| {
            let mut rng = stream_rng(5, 2);
            secure_aggregate(
                &cohort,
                |shard| user_gradient(&dataset, shard, &model),
                Some(1.0),
                1.0,
                &mut rng,
                parallel,
            )
            .unwrap()
            .released
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn sanitation_floors_counts_and_clamps_ratios() {
        let mut f = vec![-0.4, 5.2, 1.0];
        let mut n = vec![-2.3, 4.4, 0.2];
        sanitize_stats(&mut f, &mut n, true);
        assert_eq!(n, vec![1.0, 4.0, 1.0]);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 4.0); // ratio clamped to 1
        assert_eq!(f[2], 1.0);
        // exact path untouched
        let mut f2 = vec![0.5];
        let mut n2 = vec![0.0];
        sanitize_stats(&mut f2, &mut n2, false);
        assert_eq!(n2[0], 0.0);
        assert_eq!(f2[0], 0.5);
    }

    #[test]
    fn zero_iterations_returns_initial_model() {
        let dataset = toy_dataset(40, 8);
        let mut config = toy_config(Algorithm::FedSgd, 0);
        config.schedule.cohort_size = 5;
        let result = run_federated(&config, &dataset, &RunOptions::default()).unwrap();
        assert!(result.history.is_empty());
        let arch = ArchitectureSpec::shallow_mlp(5);
        let init = nn::init_params(&arch, config.seed).unwrap();
        assert_eq!(result.final_model.weights, init.weights);
        assert_eq!(result.selected_model.weights, init.weights);
        assert_eq!(result.selected_iteration, None);
    }

    #[test]
    fn runs_are_deterministic_for_fixed_seed() {
        let dataset = toy_dataset(50, 9);
        let mut config = toy_config(Algorithm::Fpfl, 6);
        config.schedule.cohort_size = 10;
        config.privacy.enabled = true;
        config.privacy.clip = Some(2.0);
        config.privacy.delta = 1e-3;
        let a = run_federated(&config, &dataset, &RunOptions::default()).unwrap();
        let b = run_federated(&config, &dataset, &RunOptions::default()).unwrap();
        assert_eq!(a.final_model.weights, b.final_model.weights);
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.accuracy, rb.accuracy);
            assert_eq!(ra.g_noisy, rb.g_noisy);
        }
        // serial execution must give bit-identical results
        let c = run_federated(
            &config,
            &dataset,
            &RunOptions {
                serial: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.final_model.weights, c.final_model.weights);
    }

    #[test]
    fn alpha_one_makes_constrained_run_match_plain_rounds() {
        let dataset = toy_dataset(50, 10);
        let mut fair = toy_config(Algorithm::Fpfl, 5);
        fair.alpha = 1.0;
        fair.schedule.cohort_size = 10;
        let mut plain = toy_config(Algorithm::FedSgd, 5);
        plain.schedule.cohort_size = 10;
        let a = run_federated(&fair, &dataset, &RunOptions::default()).unwrap();
        let b = run_federated(&plain, &dataset, &RunOptions::default()).unwrap();
        assert_eq!(
            a.final_model.weights, b.final_model.weights,
            "inactive constraints must reproduce the plain trajectory bit-for-bit"
        );
    }

    #[test]
    fn lambda_never_decreases_across_rounds() {
        let dataset = toy_dataset(80, 11);
        let mut config = toy_config(Algorithm::Fpfl, 12);
        config.alpha = 0.0;
        config.schedule.cohort_size = 15;
        let result = run_federated(&config, &dataset, &RunOptions::default()).unwrap();
        let groups = dataset.group_count;
        let mut prev = vec![0.0; groups];
        for r in &result.history {
            for a in 0..groups {
                assert!(r.lambda[a] >= prev[a] - 1e-15);
            }
            prev = r.lambda.clone();
        }
    }

    #[test]
    fn fedsgd_ignores_fairness_blocks() {
        // Zeroing the fairness blocks of a full statistics vector must not
        // change the plain update.
        let dataset = toy_dataset(30, 12);
        let spec = FairnessSpec::new(FairnessMetric::FnrParity, 2, 0.02).unwrap();
        let arch = ArchitectureSpec::shallow_mlp(5);
        let model = nn::init_params(&arch, 4).unwrap();
        let shard = &dataset.split.shards[0];
        let stats = user_statistics(&dataset, shard, &model, &spec).unwrap();
        let grad = user_gradient(&dataset, shard, &model).unwrap();
        assert_eq!(stats.grad_loss(), &grad[..]);
        let mut zeroed = stats.clone();
        for v in zeroed.data[arch.param_count()..].iter_mut() {
            *v = 0.0;
        }
        assert_eq!(zeroed.grad_loss(), &grad[..]);
    }
}
