use rand::Rng;

use super::{uniform_tensor, NnError};
use crate::autodiff::{Tape, Tensor, Var};

/// Symbol embedding table `[vocab × dim]`; rows are only reachable by lookup.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: Tensor,
}

impl EmbeddingTable {
    /// Rows uniform in ±0.1.
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            table: uniform_tensor(vec![vocab, dim], 0.1, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn lookup(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var, NnError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab()) {
            return Err(NnError::SymbolOutOfRange {
                symbol: bad,
                vocab: self.vocab(),
            });
        }
        let t = tape.param(&self.table);
        Ok(tape.gather_rows(t, ids)?)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.table]
    }
}
