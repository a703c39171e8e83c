use rand::Rng;

use super::{uniform_tensor, NnError};
use crate::autodiff::{Tape, Tensor, Var};

/// Fully connected layer computing `y = x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        LinearLayer {
            weight: uniform_tensor(vec![output, input], bound, rng),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self, NnError> {
        let (ws, bs) = (weight.shape(), bias.shape());
        if ws.len() != 2 || bs != [ws[0]] {
            return Err(NnError::Shape(format!(
                "linear weight {ws:?} incompatible with bias {bs:?}"
            )));
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn input_size(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let xw = tape.matmul_t(x, w)?;
        Ok(tape.add(xw, b)?)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(layer: &LinearLayer, x: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant_tensor(x);
        let y = layer.forward(&mut tape, xv).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 4] = 1.0);
        let layer = LinearLayer::from_parts(
            Tensor::matrix(3, 3, eye).unwrap(),
            Tensor::zeros(vec![3]),
        )
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        assert_eq!(run(&layer, &x), x.data());
    }

    #[test]
    fn zero_weight_yields_bias_rows() {
        let layer = LinearLayer::from_parts(
            Tensor::zeros(vec![2, 3]),
            Tensor::vector(vec![0.25, -1.0]),
        )
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(run(&layer, &x), vec![0.25, -1.0, 0.25, -1.0]);
    }

    #[test]
    fn matches_direct_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = LinearLayer::new(4, 3, &mut rng);
        layer
            .bias
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-1.0..1.0));
        let x = uniform_tensor(vec![3, 4], 2.0, &mut rng);
        let y = run(&layer, &x);
        for i in 0..3 {
            for o in 0..3 {
                let mut acc = layer.bias.data()[o];
                for k in 0..4 {
                    acc += x.data()[i * 4 + k] * layer.weight.data()[o * 4 + k];
                }
                assert!((y[i * 3 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = LinearLayer::new(4, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 5], vec![0.0; 10]).unwrap();
        assert!(layer.forward(&mut tape, x).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = LinearLayer::new(16, 8, &mut rng);
        assert!(layer.weight.data().iter().all(|w| w.abs() <= 0.25));
        assert!(layer.bias.data().iter().all(|b| *b == 0.0));
    }
}
