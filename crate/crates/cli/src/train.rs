//! Training and evaluation loops.

use std::time::Instant;

use backeisnn::autograd::Tape;
use backeisnn::network::{mse_rate_loss, predict, ActivityStats, ConfusionMatrix, RateTarget};
use backeisnn::optimizer::AdamState;
use backeisnn::{Element, Network};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{derived_rng, Purpose, Split, SHUFFLE_STREAM};
use crate::{CliError, RunConfig};

/// Aggregate over one pass through a split.
#[derive(Debug, Clone, PartialEq)]
pub struct PassResult {
    /// Mean per-sample loss.
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub activity: ActivityStats,
    pub seconds: f64,
}

impl PassResult {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }
}

struct Accumulator {
    loss_sum: f64,
    samples: usize,
    confusion: ConfusionMatrix,
    activity: ActivityStats,
    start: Instant,
}

impl Accumulator {
    fn new(classes: usize) -> Self {
        Self {
            loss_sum: 0.0,
            samples: 0,
            confusion: ConfusionMatrix::new(classes),
            activity: ActivityStats::default(),
            start: Instant::now(),
        }
    }

    fn finish(self) -> PassResult {
        PassResult {
            loss: if self.samples == 0 {
                0.0
            } else {
                self.loss_sum / self.samples as f64
            },
            confusion: self.confusion,
            activity: self.activity,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trainer<T: Element> {
    pub cfg: RunConfig,
    pub net: Network<T>,
    pub adam: AdamState<T>,
    /// Completed epochs.
    pub epoch: u32,
    pub best_accuracy: f64,
    rng: ChaCha8Rng,
}

impl<T: Element> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let net = Network::new(cfg.network_spec()?, cfg.seed)?;
        let adam = AdamState::new(cfg.adam, net.params())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            cfg,
            net,
            adam,
            epoch: 0,
            best_accuracy: f64::NEG_INFINITY,
            rng,
        })
    }

    /// Restores a trainer. `cfg` may change run-level settings (epochs,
    /// output directory, ...) but must describe the same network.
    pub fn from_checkpoint(ck: Checkpoint<T>, cfg: RunConfig) -> Result<Self, CliError> {
        if cfg.structure != ck.config.structure
            || cfg.network_spec()? != ck.config.network_spec()?
        {
            return Err(CliError::Config(format!(
                "checkpoint network `{}` does not match configured network `{}`",
                ck.config.structure, cfg.structure
            )));
        }
        let mut t = Self::new(cfg)?;
        t.net.set_params(ck.params)?;
        t.adam = ck.adam;
        t.epoch = ck.epoch;
        t.best_accuracy = ck.best_accuracy;
        t.rng = ck.rng.restore();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            best_accuracy: self.best_accuracy,
            params: self.net.params().clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr.lr(self.epoch)
    }

    /// One shuffled pass over `data` with an Adam update per batch.
    pub fn train_epoch(&mut self, data: &Split) -> Result<PassResult, CliError> {
        let classes = self.net.spec().classes;
        let lr = self.lr();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = Accumulator::new(classes);
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let (input, labels) = data.batch::<T>(chunk, &self.cfg, true, self.epoch)?;
            let target = RateTarget::one_hot(&labels, classes)?;
            let mut tape = Tape::new();
            let mut dropout_rng = derived_rng(self.cfg.seed, Purpose::Dropout, self.epoch, b);
            let rollout = self
                .net
                .rollout(&mut tape, &input, true, Some(&mut dropout_rng))?;
            let loss = mse_rate_loss(&mut tape, rollout.mean_rate, &target)?;
            let loss_value = Element::to_f64(tape.value(loss).item());
            if !loss_value.is_finite() {
                return Err(CliError::Numeric(format!(
                    "loss is {loss_value} at epoch {} batch {b}",
                    self.epoch
                )));
            }
            let grads = tape
                .backward(loss)
                .map_err(backeisnn::network::NetworkError::from)?;
            acc.loss_sum += loss_value * labels.len() as f64;
            acc.samples += labels.len();
            acc.confusion
                .add_batch(&labels, &predict(tape.value(rollout.mean_rate)));
            acc.activity
                .merge(&ActivityStats::from_rollout(&tape, &rollout));
            drop(tape);
            self.adam
                .step(self.net.params_mut(), &grads.into_params(), lr)
                .map_err(|e| match CliError::from(e) {
                    CliError::Numeric(m) => {
                        CliError::Numeric(format!("{m} (epoch {} batch {b})", self.epoch))
                    }
                    other => other,
                })?;
            if let Some((name, index)) = self.first_non_finite_param() {
                return Err(CliError::Numeric(format!(
                    "parameter `{name}` became non-finite at index {index} after epoch {} batch {b}",
                    self.epoch
                )));
            }
        }
        self.epoch += 1;
        Ok(acc.finish())
    }

    fn first_non_finite_param(&self) -> Option<(String, usize)> {
        self.net
            .params()
            .iter()
            .find_map(|p| p.value.first_non_finite().map(|i| (p.name.clone(), i)))
    }

    /// Forward-only pass over `data` in file order.
    pub fn evaluate(&self, data: &Split) -> Result<PassResult, CliError> {
        evaluate(&self.net, &self.cfg, data)
    }
}

pub fn evaluate<T: Element>(
    net: &Network<T>,
    cfg: &RunConfig,
    data: &Split,
) -> Result<PassResult, CliError> {
    let classes = net.spec().classes;
    let mut acc = Accumulator::new(classes);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(cfg.batch_size) {
        let (input, labels) = data.batch::<T>(chunk, cfg, false, 0)?;
        let target = RateTarget::one_hot(&labels, classes)?;
        let mut tape = Tape::new();
        let rollout = net.rollout(&mut tape, &input, false, None)?;
        let loss = mse_rate_loss(&mut tape, rollout.mean_rate, &target)?;
        let loss_value = Element::to_f64(tape.value(loss).item());
        if !loss_value.is_finite() {
            return Err(CliError::Numeric(format!(
                "evaluation loss is {loss_value}"
            )));
        }
        acc.loss_sum += loss_value * labels.len() as f64;
        acc.samples += labels.len();
        acc.confusion
            .add_batch(&labels, &predict(tape.value(rollout.mean_rate)));
        acc.activity
            .merge(&ActivityStats::from_rollout(&tape, &rollout));
    }
    Ok(acc.finish())
}
