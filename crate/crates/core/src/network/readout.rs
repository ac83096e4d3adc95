use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{NetworkError, Result, Rollout};
use crate::autograd::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// One-hot targets, `[B, classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTarget<T> {
    y: Tensor<T>,
}

impl<T: Element> RateTarget<T> {
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut data = vec![T::zero(); labels.len() * classes];
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(NetworkError::Input(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
            data[row * classes + label] = T::one();
        }
        Ok(Self {
            y: Tensor::from_vec([labels.len(), classes], data)
                .map_err(|e| NetworkError::Input(e.to_string()))?,
        })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.y
    }

    pub fn batch(&self) -> usize {
        self.y.shape()[0]
    }
}

/// `L = (1/S) Σ_s ||y_s - rate_s||²` on the tape, with `S` the batch size.
pub fn mse_rate_loss<T: Element>(
    tape: &mut Tape<T>,
    rate: Var,
    target: &RateTarget<T>,
) -> Result<Var> {
    let y = tape.constant(target.y.clone())?;
    let diff = tape.sub(y, rate)?;
    let sq = tape.square(diff)?;
    let total = tape.sum_all(sq)?;
    let inv_s = T::one() / T::from_usize(target.batch());
    Ok(tape.scale(total, inv_s)?)
}

/// Value of [`mse_rate_loss`] without a tape, evaluated in the same order.
pub fn mse_rate_value<T: Element>(rate: &Tensor<T>, target: &RateTarget<T>) -> Result<T> {
    let diff = target
        .y
        .sub(rate)
        .map_err(|e| NetworkError::Input(e.to_string()))?;
    let total = diff.map(|d| d * d).sum();
    Ok(total * (T::one() / T::from_usize(target.batch())))
}

/// Argmax of each row of a `[B, classes]` rate tensor; ties go to the
/// lowest class index.
pub fn predict<T: Element>(rate: &Tensor<T>) -> Vec<usize> {
    let classes = rate.shape().last().copied().unwrap_or(0).max(1);
    rate.data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate().skip(1) {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Multiplicative dropout mask: 0 with probability `p`, otherwise
/// `1/(1-p)`.
pub fn sample_dropout_mask<T: Element>(
    rng: &mut dyn RngCore,
    p: f64,
    shape: &[usize],
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(NetworkError::DropoutProbability(p));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    Ok(Tensor::from_vec(shape.to_vec(), data).expect("length matches shape"))
}

/// `classes x classes` counts; rows are the true class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn add_batch(&mut self, truth: &[usize], predicted: &[usize]) {
        for (&t, &p) in truth.iter().zip(predicted) {
            self.add(t, p);
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Trace over total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// One whitespace-separated row per true class.
    pub fn to_grid(&self) -> String {
        let mut out = String::new();
        for c in 0..self.classes {
            let row: Vec<String> = self.row(c).iter().map(u64::to_string).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Spike and gate statistics of one spiking layer, accumulated over
/// samples, neurons and timesteps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    pub layer: usize,
    /// Neuron-timesteps observed.
    pub count: u64,
    pub positive: u64,
    pub negative: u64,
    /// Gate values observed (0 when the self-feedback gate is off).
    pub sfb_count: u64,
    pub sfb_sum: f64,
    pub sfb_sum_sq: f64,
}

impl LayerActivity {
    /// Fraction of neuron-timesteps with a nonzero spike.
    pub fn spike_rate(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.positive + self.negative) as f64 / self.count as f64
        }
    }

    /// Fraction of nonzero spikes that are negative.
    pub fn negative_fraction(&self) -> f64 {
        match self.positive + self.negative {
            0 => 0.0,
            n => self.negative as f64 / n as f64,
        }
    }

    pub fn sfb_mean(&self) -> Option<f64> {
        (self.sfb_count > 0).then(|| self.sfb_sum / self.sfb_count as f64)
    }

    /// Population standard deviation of the gate values.
    pub fn sfb_std(&self) -> Option<f64> {
        let mean = self.sfb_mean()?;
        let var = self.sfb_sum_sq / self.sfb_count as f64 - mean * mean;
        Some(var.max(0.0).sqrt())
    }

    fn merge(&mut self, other: &LayerActivity) {
        self.count += other.count;
        self.positive += other.positive;
        self.negative += other.negative;
        self.sfb_count += other.sfb_count;
        self.sfb_sum += other.sfb_sum;
        self.sfb_sum_sq += other.sfb_sum_sq;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivityStats {
    pub layers: Vec<LayerActivity>,
}

impl ActivityStats {
    pub fn from_rollout<T: Element>(tape: &Tape<T>, rollout: &Rollout) -> Self {
        let layers = rollout
            .traces
            .iter()
            .map(|trace| {
                let mut a = LayerActivity {
                    layer: trace.layer,
                    ..Default::default()
                };
                for step in &trace.steps {
                    for &s in tape.value(step.spikes).data() {
                        a.count += 1;
                        if s > T::zero() {
                            a.positive += 1;
                        } else if s < T::zero() {
                            a.negative += 1;
                        }
                    }
                    if let Some(g) = step.sfb {
                        for &x in tape.value(g).data() {
                            let x = x.to_f64();
                            a.sfb_count += 1;
                            a.sfb_sum += x;
                            a.sfb_sum_sq += x * x;
                        }
                    }
                }
                a
            })
            .collect();
        Self { layers }
    }

    pub fn merge(&mut self, other: &ActivityStats) {
        if self.layers.is_empty() {
            self.layers = other.layers.clone();
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.merge(b);
        }
    }

    pub fn spike_rates(&self) -> Vec<f64> {
        self.layers.iter().map(LayerActivity::spike_rate).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let target = RateTarget::<f64>::one_hot(&[0], 2).unwrap();
        assert_eq!(
            mse_rate_value(&t(&[1, 2], &[0.0, 0.0]), &target).unwrap(),
            1.0
        );
        assert_eq!(
            mse_rate_value(&t(&[1, 2], &[1.0, 0.0]), &target).unwrap(),
            0.0
        );

        let target = RateTarget::<f64>::one_hot(&[1, 0], 2).unwrap();
        let eps = 0.125;
        let loss = mse_rate_value(&t(&[2, 2], &[0.0, 1.0 + eps, 1.0, 0.0]), &target).unwrap();
        assert_eq!(loss, eps * eps / 2.0);

        let mut tape = Tape::new();
        let rate = tape
            .constant(t(&[2, 2], &[0.0, 1.0 + eps, 1.0, 0.0]))
            .unwrap();
        let l = mse_rate_loss(&mut tape, rate, &target).unwrap();
        assert_eq!(tape.value(l).item(), loss);
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let y = RateTarget::<f32>::one_hot(&[2, 0, 1], 3).unwrap();
        assert_eq!(y.tensor().sum_axis(1).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(RateTarget::<f32>::one_hot(&[3], 3).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&t(&[1, 2], &[0.1, 0.9])), vec![1]);
        assert_eq!(
            predict(&t(&[2, 3], &[0.5, 0.5, 0.5, 0.0, 0.2, 0.2])),
            vec![0, 1]
        );
    }

    #[test]
    fn confusion_of_perfect_predictions_is_diagonal() {
        let labels = [0, 1, 1, 2, 2, 2];
        let mut cm = ConfusionMatrix::new(3);
        cm.add_batch(&labels, &labels);
        for c in 0..3 {
            assert_eq!(cm.row(c).iter().sum::<u64>(), c as u64 + 1);
            assert_eq!(cm.get(c, c), c as u64 + 1);
        }
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(cm.to_grid(), "1 0 0\n0 2 0\n0 0 3\n");
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Tensor<f64> = sample_dropout_mask(&mut rng, 0.0, &[4, 5]).unwrap();
        assert!(m.data().iter().all(|&x| x == 1.0));
        let m: Tensor<f64> = sample_dropout_mask(&mut rng, 0.5, &[1000]).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.0 || x == 2.0));
        let zeros = m.data().iter().filter(|&&x| x == 0.0).count();
        assert!((400..600).contains(&zeros), "{zeros}");
        assert!(sample_dropout_mask::<f64>(&mut rng, 1.0, &[1]).is_err());
    }

    #[test]
    fn activity_std() {
        let a = LayerActivity {
            sfb_count: 2,
            sfb_sum: 1.0,
            sfb_sum_sq: 0.5 * 0.5 + 0.5 * 0.5,
            ..Default::default()
        };
        assert_eq!(a.sfb_std(), Some(0.0));
        assert_eq!(a.sfb_mean(), Some(0.5));
    }
}
