//! Per-sample SGD over the surrogate parameters.
//!
//! Each sample runs one forward prediction and one reverse sweep, then
//! `X_hat <- X_hat - lr * dL/dconj(X_hat)` followed by the closed-form
//! no-load update `w_hat <- v - f_{X_hat}(v_hat, s)` with the new `X_hat`.

use std::time::Instant;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::loadflow::{self, SolverOptions};
use crate::network::DerivedOperator;
use crate::surrogate::{init_params, predict, SurrogateParams, DEFAULT_INIT_X};
use crate::wirtinger::{backward_with_floor, loss};

/// Epoch-mean loss above which training is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub fp_tolerance: f64,
    pub fp_max_iterations: usize,
    pub init_x_value: Complex64,
    pub shuffle_each_epoch: bool,
    pub seed: u64,
    /// Per-sample RMSE below which the gradient is taken as zero. `None`
    /// uses `fp_tolerance`, the resolution of the forward solve.
    pub gradient_floor: Option<f64>,
    /// Evaluate the no-load update at the measured voltage instead of the
    /// prediction.
    pub w_update_uses_measured: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 7000,
            lr_initial: 0.5,
            lr_decay_factor: 0.1,
            lr_decay_every: 2000,
            fp_tolerance: 1e-9,
            fp_max_iterations: 50,
            init_x_value: DEFAULT_INIT_X,
            shuffle_each_epoch: true,
            seed: 0,
            gradient_floor: None,
            w_update_uses_measured: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::Config(format!(
                "lr_initial must be positive, got {}",
                self.lr_initial
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor {} outside (0, 1]",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if !self.init_x_value.is_finite() {
            return Err(Error::Config("init_x_value must be finite".into()));
        }
        if self
            .gradient_floor
            .is_some_and(|f| !(f >= 0.0 && f.is_finite()))
        {
            return Err(Error::Config(
                "gradient_floor must be finite and nonnegative".into(),
            ));
        }
        self.solver_options().validate()
    }

    pub fn effective_gradient_floor(&self) -> f64 {
        self.gradient_floor.unwrap_or(self.fp_tolerance)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.fp_tolerance,
            max_iterations: self.fp_max_iterations,
        }
    }
}

/// Step-decay schedule; `epoch` is 0-indexed.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = (epoch / config.lr_decay_every) as i32;
    config.lr_initial * config.lr_decay_factor.powi(decays)
}

/// `||w_hat - w||_2`.
pub fn evaluate_no_load_error(params: &SurrogateParams, truth: &DerivedOperator) -> f64 {
    (&params.w_hat - &truth.w).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-indexed.
    pub epoch: usize,
    pub mean_loss: f64,
    pub w_error: Option<f64>,
    pub lr: f64,
    pub nonconverged_count: usize,
    /// Wall time since training started.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }
}

pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    ground_truth: Option<&DerivedOperator>,
) -> Result<(SurrogateParams, TrainLog)> {
    train_with_observer(dataset, config, ground_truth, |_| {})
}

/// As [`train`], reporting every completed epoch to `observer`.
pub fn train_with_observer(
    dataset: &Dataset,
    config: &TrainConfig,
    ground_truth: Option<&DerivedOperator>,
    observer: impl FnMut(&EpochRecord),
) -> Result<(SurrogateParams, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let initial = init_params(dataset.v_slack, dataset.n_buses(), config.init_x_value);
    train_from(initial, dataset, config, ground_truth, observer)
}

/// Runs the training loop from explicit starting parameters.
pub fn train_from(
    initial: SurrogateParams,
    dataset: &Dataset,
    config: &TrainConfig,
    ground_truth: Option<&DerivedOperator>,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(SurrogateParams, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let n = initial.w_hat.len();
    if let Some(k) = dataset.samples.iter().position(|s| {
        s.voltage.v.len() != n || s.injection.s_wye.len() != n || s.injection.s_delta.len() != n
    }) {
        return Err(Error::validation(
            "dataset",
            format!("sample {k} does not match {n} voltage entries"),
        ));
    }
    if ground_truth.is_some_and(|op| op.w.len() != n) {
        return Err(Error::validation(
            "ground_truth",
            "dimension differs from the dataset",
        ));
    }

    let options = config.solver_options();
    let mut params = initial;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        if config.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut nonconverged = 0;
        for &j in &order {
            let sample = &dataset.samples[j];
            let step = sgd_step(&mut params, sample, lr, &options, config);
            let (sample_loss, converged) = step.map_err(|err| match err {
                Error::DegenerateVoltage { .. } => Error::Diverged {
                    epoch: epoch + 1,
                    loss: f64::INFINITY,
                },
                other => other,
            })?;
            loss_sum += sample_loss;
            nonconverged += usize::from(!converged);
        }
        let mean_loss = loss_sum / dataset.len() as f64;
        if !mean_loss.is_finite() || mean_loss > DIVERGENCE_LOSS || !params.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                loss: mean_loss,
            });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            w_error: ground_truth.map(|op| evaluate_no_load_error(&params, op)),
            lr,
            nonconverged_count: nonconverged,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        log.records.push(record);
    }
    Ok((params, log))
}

/// One forward/backward pass and both parameter updates; returns the
/// pre-update loss and whether the forward pass converged.
fn sgd_step(
    params: &mut SurrogateParams,
    sample: &crate::datagen::Sample,
    lr: f64,
    options: &SolverOptions,
    config: &TrainConfig,
) -> Result<(f64, bool)> {
    let (grad, v_hat, sample_loss, converged) = {
        let tape = predict(params, &sample.injection, options)?;
        let grad = backward_with_floor(&tape, &sample.voltage, config.effective_gradient_floor())?;
        let value = loss(&sample.voltage, tape.prediction()).value;
        (grad, tape.prediction().clone(), value, tape.converged)
    };
    params.x_hat.zip_apply(&grad.d_x_conj, |x, g| *x -= g * lr);
    let anchor = if config.w_update_uses_measured {
        &sample.voltage.v
    } else {
        &v_hat
    };
    let f = loadflow::fixed_point_map_with(&params.x_hat, anchor, &sample.injection)?;
    params.w_hat = &sample.voltage.v - f;
    Ok((sample_loss, converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, ScenarioConfig};
    use crate::network::{derive_operators, generate_synthetic_feeder};

    fn small_dataset(n_buses: usize, n_train: usize) -> (Dataset, DerivedOperator) {
        let feeder = generate_synthetic_feeder(n_buses, 7).unwrap();
        let config = ScenarioConfig {
            n_train,
            n_test: 1,
            seed: 3,
            ..Default::default()
        };
        let (train, _) = generate_dataset(&feeder, &config).unwrap();
        (train, derive_operators(&feeder).unwrap())
    }

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(&c, 0), 0.5);
        assert_eq!(lr_at_epoch(&c, 1999), 0.5);
        assert!((lr_at_epoch(&c, 2000) - 0.05).abs() < 1e-17);
        assert!((lr_at_epoch(&c, 6999) - 0.0005).abs() < 1e-18);
    }

    #[test]
    fn schedule_changes_only_at_boundaries() {
        let c = TrainConfig {
            lr_decay_every: 7,
            epochs: 50,
            ..Default::default()
        };
        for e in 1..50 {
            let changed = lr_at_epoch(&c, e) != lr_at_epoch(&c, e - 1);
            assert_eq!(changed, e % 7 == 0, "epoch {e}");
            let closed = c.lr_initial * c.lr_decay_factor.powi((e / 7) as i32);
            assert_eq!(lr_at_epoch(&c, e), closed);
        }
    }

    #[test]
    fn no_load_error_norm() {
        let (_, op) = small_dataset(2, 3);
        let mut p = SurrogateParams::from_operator(&op);
        assert_eq!(evaluate_no_load_error(&p, &op), 0.0);
        p.w_hat[0] += Complex64::new(1.0, 0.0);
        assert!((evaluate_no_load_error(&p, &op) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_rejected_up_front() {
        let (data, _) = small_dataset(2, 3);
        for bad in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                lr_initial: -1.0,
                ..Default::default()
            },
            TrainConfig {
                lr_decay_factor: 0.0,
                ..Default::default()
            },
            TrainConfig {
                lr_decay_every: 0,
                ..Default::default()
            },
            TrainConfig {
                fp_tolerance: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(train(&data, &bad, None), Err(Error::Config(_))));
        }
    }

    #[test]
    fn true_parameters_are_a_fixed_point_of_training() {
        let (data, op) = small_dataset(3, 10);
        let config = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let start = SurrogateParams::from_operator(&op);
        let (end, log) = train_from(start.clone(), &data, &config, Some(&op), |_| {}).unwrap();
        assert!(log.records[0].mean_loss < 1e-8, "{:?}", log.records[0]);
        assert!(end.max_abs_diff(&start) < 1e-9);
    }

    #[test]
    fn no_load_update_is_definitional() {
        let (data, op) = small_dataset(2, 4);
        let config = TrainConfig::default();
        let mut params = init_params(data.v_slack, 2, config.init_x_value);
        let opts = config.solver_options();
        for sample in &data.samples {
            let v_hat = predict(&params, &sample.injection, &opts)
                .unwrap()
                .prediction()
                .clone();
            sgd_step(&mut params, sample, 0.5, &opts, &config).unwrap();
            let f =
                loadflow::fixed_point_map_with(&params.x_hat, &v_hat, &sample.injection).unwrap();
            let defect = (&sample.voltage.v - &params.w_hat - f).camax();
            assert!(defect < 1e-12);
        }
        let _ = op;
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let (data, op) = small_dataset(2, 6);
        let config = TrainConfig {
            epochs: 20,
            seed: 5,
            ..Default::default()
        };
        let (p1, l1) = train(&data, &config, Some(&op)).unwrap();
        let (p2, l2) = train(&data, &config, Some(&op)).unwrap();
        assert_eq!(p1, p2);
        let bits = |l: &TrainLog| l.losses().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&l1), bits(&l2));
        assert_eq!(l1.records.len(), 20);
        assert!(l1.records.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (data, _) = small_dataset(2, 6);
        let config = TrainConfig {
            epochs: 50,
            lr_initial: 1e9,
            lr_decay_factor: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            train(&data, &config, None),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        let (mut data, _) = small_dataset(2, 2);
        data.samples.clear();
        assert!(train(&data, &TrainConfig::default(), None).is_err());
    }
}
