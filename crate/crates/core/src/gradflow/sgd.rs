use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_w_of, Origin, Snapshot, Trajectory};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::objective::{evaluate, evaluate_params, Dataset, Sample, Theta};

const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size; `0` means full batch.
    pub batch: usize,
    pub seed: u64,
    /// Initialization scale, used only to express time as `steps · lr / log(1/α)`
    /// and to compute `log_α(u + v)` in snapshots.
    pub alpha: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 1000,
            batch: 100,
            seed: 0,
            alpha: 1e-2,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be nonnegative and finite, got {}", self.lr)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    fn batch_size(&self, n: usize) -> usize {
        if self.batch == 0 {
            n
        } else {
            self.batch.min(n)
        }
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size(n))
    }

    /// Rescaled time after `steps` updates.
    pub fn time_of(&self, steps: usize) -> f64 {
        steps as f64 * self.lr / -self.alpha.ln()
    }
}

/// Minibatch SGD on the empirical loss, one snapshot per epoch (epoch 0 is
/// the initial point).
pub fn train_sgd(spec: &ModelSpec, dataset: &Dataset, theta0: &Theta, config: &SgdConfig) -> Result<Trajectory> {
    config.validate()?;
    let q = theta0.imbalance();
    let mut max_increase = 0.0f64;
    let snapshots = run_sgd_segment(spec, dataset, theta0, config, 0, config.epochs, &mut max_increase)?;
    let steps = config.epochs * config.steps_per_epoch(dataset.len());
    Ok(Trajectory {
        alpha: config.alpha,
        q,
        snapshots,
        origin: Origin::Sgd(config.clone()),
        max_loss_increase: max_increase,
        steps,
    })
}

/// Runs epochs `start_epoch + 1 ..= end_epoch` from `theta`, which is taken to
/// be the state at the end of `start_epoch`. The shuffle of each epoch depends
/// only on the seed and the epoch index, so a segment replays exactly the
/// minibatches of the original run.
pub(crate) fn run_sgd_segment(
    spec: &ModelSpec,
    dataset: &Dataset,
    theta: &Theta,
    config: &SgdConfig,
    start_epoch: usize,
    end_epoch: usize,
    max_increase: &mut f64,
) -> Result<Vec<Snapshot>> {
    if theta.p() != spec.p() {
        return Err(Error::invalid("theta does not match the model"));
    }
    let n = dataset.len();
    let batch = config.batch_size(n);
    let per_epoch = config.steps_per_epoch(n);
    let p = spec.p();
    let mut theta = theta.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut snapshots = Vec::with_capacity(end_epoch.saturating_sub(start_epoch) + 1);

    let snapshot = |theta: &Theta, epoch: usize| -> Result<Snapshot> {
        let ev = evaluate(spec, dataset, theta)?;
        Ok(Snapshot {
            t: config.time_of(epoch * per_epoch),
            epoch: Some(epoch),
            theta: theta.clone(),
            log_w: log_w_of(theta, config.alpha),
            imbalance: theta.imbalance(),
            loss: ev.loss,
            g: ev.g,
        })
    };

    let first = snapshot(&theta, start_epoch)?;
    let mut last_loss = first.loss;
    snapshots.push(first);

    for epoch in start_epoch + 1..=end_epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(batch).enumerate() {
            let iteration = (epoch - 1) * per_epoch + b;
            let refs: Vec<&Sample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
            let ev = match evaluate_params(spec, &refs, &theta.products()) {
                Ok(ev) => ev,
                Err(Error::NumericOverflow(_)) => {
                    return Err(Error::Divergence {
                        iteration,
                        loss: f64::INFINITY,
                    })
                }
                Err(e) => return Err(e),
            };
            if !(ev.loss <= DIVERGENCE_LOSS) {
                return Err(Error::Divergence { iteration, loss: ev.loss });
            }
            let g = ev.g.as_slice();
            for i in 0..p {
                let (u, v) = (theta.u[i], theta.v[i]);
                theta.u[i] = u + config.lr * v * g[i];
                theta.v[i] = v + config.lr * u * g[i];
            }
        }
        let snap = match snapshot(&theta, epoch) {
            Ok(s) => s,
            Err(Error::NumericOverflow(_)) => {
                return Err(Error::Divergence {
                    iteration: epoch * per_epoch,
                    loss: f64::INFINITY,
                })
            }
            Err(e) => return Err(e),
        };
        if snap.loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence {
                iteration: epoch * per_epoch,
                loss: snap.loss,
            });
        }
        *max_increase = max_increase.max(snap.loss - last_loss);
        last_loss = snap.loss;
        snapshots.push(snap);
    }
    Ok(snapshots)
}
