//! Central finite-difference check of BPTT gradients.
//!
//! Meaningful only in relaxed spike mode, where the forward pass is
//! piecewise linear in the spike/sign nonlinearities and the surrogate is
//! the exact derivative. A probe whose `±h` perturbation moves any
//! nonlinearity onto a different linear piece is discarded and another
//! parameter element is drawn instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::network::{mse_rate_loss, Network, NetworkError, RateTarget, SpikeBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Parameter elements to compare.
    pub samples: usize,
    /// Finite-difference step.
    pub h: f64,
    /// Maximum relative error.
    pub rel_tol: f64,
    /// Gradients at or below this magnitude are compared absolutely.
    pub abs_floor: f64,
    /// Maximum absolute error for small gradients.
    pub abs_tol: f64,
    pub seed: u64,
    /// Draws allowed per accepted probe before giving up.
    pub max_draws_per_sample: usize,
    /// Cycle through parameter tensors instead of drawing elements
    /// uniformly, so small tensors are always covered.
    #[serde(default)]
    pub stratified: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            h: 1e-4,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
            abs_tol: 1e-8,
            seed: 0,
            max_draws_per_sample: 50,
            stratified: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error, or absolute error when both values are small.
    pub error: f64,
    pub absolute: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    /// Draws rejected because the perturbation crossed a kink.
    pub rejected: usize,
    pub max_rel_error: f64,
    pub median_rel_error: f64,
    pub max_abs_error: f64,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.probes.iter().all(|p| p.pass)
    }

    /// Failing probes, worst first.
    pub fn worst(&self, n: usize) -> Vec<&Probe> {
        let mut bad: Vec<&Probe> = self.probes.iter().filter(|p| !p.pass).collect();
        bad.sort_by(|a, b| b.error.total_cmp(&a.error));
        bad.truncate(n);
        bad
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("network has no parameters")]
    NoParameters,
    #[error("only {found} of {wanted} probes avoided crossing a nonlinearity boundary")]
    TooManyKinks { found: usize, wanted: usize },
}

fn loss_and_signature(
    net: &Network<f64>,
    input: &SpikeBatch<f64>,
    target: &RateTarget<f64>,
) -> Result<(f64, u64), NetworkError> {
    let mut tape = Tape::new();
    let r = net.rollout(&mut tape, input, false, None)?;
    let l = mse_rate_loss(&mut tape, r.mean_rate, target)?;
    Ok((tape.value(l).item(), tape.region_signature()))
}

/// Compares tape gradients of the rate loss with central differences on
/// randomly drawn parameter elements.
pub fn gradcheck(
    net: &Network<f64>,
    input: &SpikeBatch<f64>,
    labels: &[usize],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport, GradcheckError> {
    let target = RateTarget::one_hot(labels, net.spec().classes)?;
    let mut tape = Tape::new();
    let r = net.rollout(&mut tape, input, true, None)?;
    let loss = mse_rate_loss(&mut tape, r.mean_rate, &target)?;
    let base_sig = tape.region_signature();
    let grads = tape.backward(loss).map_err(NetworkError::from)?;
    let loss_value = tape.value(loss).item();
    drop(tape);

    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(GradcheckError::NoParameters);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe_net = net.clone();
    let mut probes = Vec::with_capacity(cfg.samples);
    let mut seen = std::collections::HashSet::new();
    let mut rejected = 0;
    let max_draws = cfg.samples * cfg.max_draws_per_sample;
    let mut draws = 0;
    while probes.len() < cfg.samples && draws < max_draws && seen.len() < total {
        draws += 1;
        let (id, flat) = if cfg.stratified {
            let id = draws % sizes.len();
            if seen.iter().filter(|&&(i, _)| i == id).count() == sizes[id] {
                continue;
            }
            (id, rng.random_range(0..sizes[id]))
        } else {
            let mut flat = rng.random_range(0..total);
            let mut id = 0;
            while flat >= sizes[id] {
                flat -= sizes[id];
                id += 1;
            }
            (id, flat)
        };
        if !seen.insert((id, flat)) {
            continue;
        }

        let original = net.params().by_id(id).value.data()[flat];
        let mut eval = |x: f64| {
            probe_net.params_mut().by_id_mut(id).value.data_mut()[flat] = x;
            loss_and_signature(&probe_net, input, &target)
        };
        let (plus, sig_plus) = eval(original + cfg.h)?;
        let (minus, sig_minus) = eval(original - cfg.h)?;
        probe_net.params_mut().by_id_mut(id).value.data_mut()[flat] = original;
        if sig_plus != base_sig || sig_minus != base_sig {
            rejected += 1;
            continue;
        }

        let numeric = (plus - minus) / (2.0 * cfg.h);
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[flat]);
        let absolute = analytic.abs() <= cfg.abs_floor && numeric.abs() <= cfg.abs_floor;
        let diff = (analytic - numeric).abs();
        let (error, pass) = if absolute {
            (diff, diff <= cfg.abs_tol)
        } else {
            let e = diff / analytic.abs().max(numeric.abs());
            (e, e <= cfg.rel_tol)
        };
        probes.push(Probe {
            param: net.params().by_id(id).name.clone(),
            index: flat,
            analytic,
            numeric,
            error,
            absolute,
            pass,
        });
    }
    if probes.len() < cfg.samples.min(total) {
        return Err(GradcheckError::TooManyKinks {
            found: probes.len(),
            wanted: cfg.samples,
        });
    }

    let mut rel: Vec<f64> = probes
        .iter()
        .filter(|p| !p.absolute)
        .map(|p| p.error)
        .collect();
    rel.sort_by(f64::total_cmp);
    let median_rel_error = match rel.len() {
        0 => 0.0,
        n if n % 2 == 1 => rel[n / 2],
        n => 0.5 * (rel[n / 2 - 1] + rel[n / 2]),
    };
    Ok(GradcheckReport {
        max_rel_error: rel.last().copied().unwrap_or(0.0),
        median_rel_error,
        max_abs_error: probes
            .iter()
            .map(|p| (p.analytic - p.numeric).abs())
            .fold(0.0, f64::max),
        rejected,
        loss: loss_value,
        probes,
    })
}
