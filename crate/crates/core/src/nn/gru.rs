use rand::Rng;

use super::{uniform_tensor, NnError};
use crate::autodiff::{Tape, Tensor, Var};

/// Single-layer gated recurrent unit.
///
/// ```text
/// z  = σ(x W_zᵀ + h U_zᵀ + b_z)
/// r  = σ(x W_rᵀ + h U_rᵀ + b_r)
/// h̃  = tanh(x W_hᵀ + (r ⊙ h) U_hᵀ + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let wb = 1.0 / (input as f64).sqrt();
        let ub = 1.0 / (hidden as f64).sqrt();
        GruCell {
            w_z: uniform_tensor(vec![hidden, input], wb, rng),
            w_r: uniform_tensor(vec![hidden, input], wb, rng),
            w_h: uniform_tensor(vec![hidden, input], wb, rng),
            u_z: uniform_tensor(vec![hidden, hidden], ub, rng),
            u_r: uniform_tensor(vec![hidden, hidden], ub, rng),
            u_h: uniform_tensor(vec![hidden, hidden], ub, rng),
            b_z: Tensor::zeros(vec![hidden]),
            b_r: Tensor::zeros(vec![hidden]),
            b_h: Tensor::zeros(vec![hidden]),
        }
    }

    /// All-zero cell; handy for algebraic checks.
    pub fn zeroed(input: usize, hidden: usize) -> Self {
        GruCell {
            w_z: Tensor::zeros(vec![hidden, input]),
            w_r: Tensor::zeros(vec![hidden, input]),
            w_h: Tensor::zeros(vec![hidden, input]),
            u_z: Tensor::zeros(vec![hidden, hidden]),
            u_r: Tensor::zeros(vec![hidden, hidden]),
            u_h: Tensor::zeros(vec![hidden, hidden]),
            b_z: Tensor::zeros(vec![hidden]),
            b_r: Tensor::zeros(vec![hidden]),
            b_h: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.shape()[0]
    }

    fn gate(&self, tape: &mut Tape, x: Var, h: Var, w: &Tensor, u: &Tensor, b: &Tensor) -> Result<Var, NnError> {
        let w = tape.param(w);
        let u = tape.param(u);
        let b = tape.param(b);
        let xw = tape.matmul_t(x, w)?;
        let hu = tape.matmul_t(h, u)?;
        let s = tape.add(xw, hu)?;
        Ok(tape.add(s, b)?)
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var, NnError> {
        let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(h).to_vec());
        if xs.len() != 2
            || hs.len() != 2
            || xs[0] != hs[0]
            || xs[1] != self.input_size()
            || hs[1] != self.hidden_size()
        {
            return Err(NnError::Shape(format!(
                "gru({}→{}) got input {xs:?} and hidden {hs:?}",
                self.input_size(),
                self.hidden_size()
            )));
        }
        let z_pre = self.gate(tape, x, h, &self.w_z, &self.u_z, &self.b_z)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = self.gate(tape, x, h, &self.w_r, &self.u_r, &self.b_r)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let cand_pre = self.gate(tape, x, rh, &self.w_h, &self.u_h, &self.b_h)?;
        let cand = tape.tanh(cand_pre);
        let keep = tape.rsub_scalar(1.0, z);
        let old = tape.mul(keep, h)?;
        let new = tape.mul(z, cand)?;
        Ok(tape.add(old, new)?)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z,
            &self.b_r, &self.b_h,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}
