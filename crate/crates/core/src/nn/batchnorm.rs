use super::{Mode, NnError};
use crate::autodiff::{Tape, Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Batch normalization over the feature (last) axis of a `[batch × f]` input.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(features: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled(vec![features], 1.0),
            beta: Tensor::zeros(vec![features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode reads the running estimates as constants.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var, NnError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.features() {
            return Err(NnError::Shape(format!(
                "batchnorm over {} features got input {shape:?}",
                self.features()
            )));
        }
        let batch = shape[0];
        let normalized = match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(NnError::BatchTooSmall(batch));
                }
                let mean = tape.mean_axis(x, 0)?;
                let centered = tape.sub(x, mean)?;
                let sq = tape.square(centered)?;
                let var = tape.mean_axis(sq, 0)?;
                let var_eps = tape.add_scalar(var, self.epsilon);
                let std = tape.sqrt(var_eps);
                let normalized = tape.div(centered, std)?;

                let unbias = batch as f64 / (batch - 1) as f64;
                let m = self.momentum;
                for (i, (rm, rv)) in self
                    .running_mean
                    .iter_mut()
                    .zip(self.running_var.iter_mut())
                    .enumerate()
                {
                    *rm = (1.0 - m) * *rm + m * tape.value(mean)[i];
                    *rv = (1.0 - m) * *rv + m * tape.value(var)[i] * unbias;
                }
                normalized
            }
            Mode::Eval => {
                let f = self.features();
                let mean = tape.constant(vec![f], self.running_mean.clone())?;
                let std: Vec<f64> = self
                    .running_var
                    .iter()
                    .map(|v| (v.max(0.0) + self.epsilon).sqrt())
                    .collect();
                let std = tape.constant(vec![f], std)?;
                let centered = tape.sub(x, mean)?;
                tape.div(centered, std)?
            }
        };
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let scaled = tape.mul(normalized, gamma)?;
        Ok(tape.add(scaled, beta)?)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
