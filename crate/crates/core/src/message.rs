use serde::{Deserialize, Serialize};

/// Reserved end-of-sequence symbol.
pub const EOS: usize = 0;

/// A generated message. Symbols after the first EOS carry no meaning.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub symbols: Vec<usize>,
}

impl Message {
    pub fn new(symbols: Vec<usize>) -> Self {
        Message { symbols }
    }

    /// Number of symbols before the first EOS.
    pub fn effective_length(&self) -> usize {
        self.symbols
            .iter()
            .position(|&s| s == EOS)
            .unwrap_or(self.symbols.len())
    }

    /// Symbols before the first EOS.
    pub fn content(&self) -> &[usize] {
        &self.symbols[..self.effective_length()]
    }

    /// Symbols up to and including the first EOS.
    pub fn through_eos(&self) -> &[usize] {
        match self.symbols.iter().position(|&s| s == EOS) {
            Some(p) => &self.symbols[..=p],
            None => &self.symbols,
        }
    }
}

impl std::fmt::Display for Message {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.content().iter().map(|s| s.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eos_truncation() {
        let m = Message::new(vec![3, 0, 7]);
        assert_eq!(m.effective_length(), 1);
        assert_eq!(m.content(), &[3]);
        assert_eq!(m.through_eos(), &[3, 0]);
        let full = Message::new(vec![1, 2]);
        assert_eq!(full.effective_length(), 2);
        assert_eq!(full.through_eos(), &[1, 2]);
        assert_eq!(Message::new(vec![0]).content(), &[] as &[usize]);
    }
}
