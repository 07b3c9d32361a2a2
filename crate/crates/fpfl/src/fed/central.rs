//! Central (non-federated) mini-batch training loop for the baseline
//! comparisons: plain SGD and the multiplier methods on pooled data.

use rand::seq::SliceRandom;

use super::{RoundRecord, RunOptions, RunResult, Selection, STREAM_BATCH};
use crate::config::{Algorithm, ExperimentConfig};
use crate::constrained::{fpfl_update, tran_variant_update, MultiplierState, UpdateInputs};
use crate::datasets::PreparedDataset;
use crate::error::{Error, Result};
use crate::fairness::{self, FairnessSpec};
use crate::nn;

/// Seeded epoch-shuffling batch iterator; a fresh permutation is drawn
/// whenever fewer than a full batch remains.
struct BatchCycle {
    rng: rand_chacha::ChaCha20Rng,
    order: Vec<u32>,
    cursor: usize,
    batch_size: usize,
}

impl BatchCycle {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut cycle = BatchCycle {
            rng: super::stream_rng(seed, STREAM_BATCH),
            order: (0..n as u32).collect(),
            cursor: 0,
            batch_size: batch_size.min(n),
        };
        cycle.reshuffle();
        cycle
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_rows(&mut self) -> Vec<u32> {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let rows = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        rows
    }
}

/// Train centrally with mini-batches for `config.schedule.iterations` steps.
pub fn run_central(
    config: &ExperimentConfig,
    dataset: &PreparedDataset,
    _options: &RunOptions,
) -> Result<RunResult> {
    config.validate()?;
    dataset.validate()?;
    if config.is_federated() {
        return Err(Error::InvalidConfig(
            "run_central called with a federated algorithm".into(),
        ));
    }
    if config.privacy.enabled {
        return Err(Error::InvalidConfig(
            "noise calibration applies to the federated protocol only".into(),
        ));
    }
    let groups = dataset.group_count;
    let spec = FairnessSpec::new(config.metric, groups, config.alpha)?;
    let arch = super::arch_for(config.arch, dataset)?;
    let mut model = nn::init_params(&arch, config.seed)?;
    let fair = config.algorithm.enforces_fairness();
    let mut mult = MultiplierState::new(groups, config.gamma, config.effective_c());
    if let Some(l) = config.lambda_max {
        mult = mult.with_lambda_max(l);
    }

    let n = dataset.train.len();
    let mut batches = BatchCycle::new(n, config.schedule.batch_size, config.seed);
    let mut selection = Selection::new(&model);
    let mut history = Vec::with_capacity(config.schedule.iterations);

    for t in 0..config.schedule.iterations {
        let rows = batches.next_rows();
        let batch = dataset.train.batch(&rows);
        let report = fairness::evaluate_report(&model, &batch, groups, 0.5)?;
        let mut record = RoundRecord::from_report(t, &report);

        if fair {
            let (_, grad_loss, surrogates) = nn::statistics_pass(&model, &batch, &spec)?;
            let f_sums: Vec<f64> = surrogates.iter().map(|s| s.f_sum).collect();
            let counts: Vec<f64> = surrogates.iter().map(|s| s.count as f64).collect();
            let (_, g_vals) =
                fairness::constraint_values_from_sums(&f_sums, &counts, config.alpha)?;
            selection.consider(&model, t, report.accuracy, g_vals.iter().all(|&g| g == 0.0));
            let inputs = UpdateInputs {
                grad_loss,
                loss_normalizer: batch.len() as f64,
                f_sums,
                grad_f: surrogates.into_iter().map(|s| s.grad).collect(),
                counts,
                alpha: config.alpha,
            };
            let (w_next, mult_next) = match config.algorithm {
                Algorithm::Tran => tran_variant_update(&model.weights, &mult, &inputs, config.eta),
                _ => fpfl_update(&model.weights, &mult, &inputs, config.eta),
            }
            .map_err(|e| Error::NonFinite(format!("step {t}: {e}")))?;
            model.weights = w_next;
            mult = mult_next;
            record.lambda = mult.lambda.clone();
            record.g_noisy = g_vals.clone();
            record.g_clean = g_vals;
        } else {
            let (_, grad) = nn::loss_and_grad(&model, &batch)?;
            selection.consider(&model, t, report.accuracy, true);
            // same arithmetic as the constrained step with inactive
            // constraints, so the two paths agree bit-for-bit
            let inv_n = 1.0 / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= config.eta * (g * inv_n);
            }
            if !crate::vecops::all_finite(&model.weights) {
                return Err(Error::NonFinite(format!("step {t}: updated parameters")));
            }
        }
        history.push(record);
    }

    Ok(RunResult {
        final_model: model,
        selected_model: selection.model,
        selected_iteration: selection.iteration,
        history,
        sigma: None,
        normalizer_used: "batch_count".to_string(),
    })
}
