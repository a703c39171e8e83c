//! Hard and differentiable ranking, and the Spearman correlations built on them.
//!
//! The soft rank of `θ` is the Euclidean projection of `θ/ε` onto the
//! permutahedron spanned by `(1, …, n)`. Sorting `z = θ/ε` in descending order
//! reduces the projection to a decreasing isotonic regression of
//! `z_sorted − (n, n−1, …, 1)`, solved exactly by pool-adjacent-violators.
//! Within each pooled block the Jacobian of the isotonic fit is a uniform
//! average, which gives the backward pass in closed form.

use log::warn;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};

#[derive(Debug, Error)]
pub enum RankError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{op} needs at least {min} values, got {got}")]
    TooShort {
        op: &'static str,
        min: usize,
        got: usize,
    },
    #[error("{op}: length mismatch {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("regularization strength must be positive, got {0}")]
    InvalidStrength(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SoftRankConfig {
    /// Smoothness `ε > 0`; small values approach hard ranks.
    pub regularization_strength: f64,
    /// Z-score inputs before ranking so `ε` is scale-free.
    pub standardize: bool,
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        SoftRankConfig {
            regularization_strength: 0.1,
            standardize: true,
        }
    }
}

impl SoftRankConfig {
    pub fn with_strength(eps: f64) -> Self {
        SoftRankConfig {
            regularization_strength: eps,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), RankError> {
        let eps = self.regularization_strength;
        if eps > 0.0 && eps.is_finite() {
            Ok(())
        } else {
            Err(RankError::InvalidStrength(eps))
        }
    }
}

/// Ascending ranks `1..=n`; tied values share the mean of their positions.
pub fn hard_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) hold ranks i+1..=j.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation over tie-averaged ranks. Zero rank variance yields 0.
pub fn hard_spearman(a: &[f64], b: &[f64]) -> Result<f64, RankError> {
    if a.len() != b.len() {
        return Err(RankError::LengthMismatch {
            op: "hard_spearman",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(RankError::TooShort {
            op: "hard_spearman",
            min: 2,
            got: a.len(),
        });
    }
    match pearson(&hard_ranks(a), &hard_ranks(b)) {
        Some(r) => Ok(r),
        None => {
            warn!("spearman: zero rank variance, reporting 0");
            Ok(0.0)
        }
    }
}

/// Decreasing isotonic regression by pool-adjacent-violators.
/// Returns the fitted values and the block id of every position.
fn isotonic_decreasing(y: &[f64]) -> (Vec<f64>, Vec<usize>) {
    // (sum, count, start)
    let mut blocks: Vec<(f64, usize, usize)> = Vec::with_capacity(y.len());
    for (i, &val) in y.iter().enumerate() {
        blocks.push((val, 1, i));
        while blocks.len() > 1 {
            let (s1, c1, _) = blocks[blocks.len() - 1];
            let (s0, c0, _) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 >= s1 / c1 as f64 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("at least one block");
            last.0 = s0 + s1;
            last.1 = c0 + c1;
        }
    }
    let mut fit = vec![0.0; y.len()];
    let mut block_of = vec![0; y.len()];
    for (b, &(s, c, start)) in blocks.iter().enumerate() {
        let mean = s / c as f64;
        for k in start..start + c {
            fit[k] = mean;
            block_of[k] = b;
        }
    }
    (fit, block_of)
}

struct Projection {
    ranks: Vec<f64>,
    /// Descending sort order of the scaled input.
    order: Vec<usize>,
    block_of: Vec<usize>,
}

fn project(z: &[f64]) -> Projection {
    let n = z.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    let y: Vec<f64> = order
        .iter()
        .enumerate()
        .map(|(i, &k)| z[k] - (n - i) as f64)
        .collect();
    let (fit, block_of) = isotonic_decreasing(&y);
    let mut ranks = vec![0.0; n];
    for (i, &k) in order.iter().enumerate() {
        ranks[k] = z[k] - fit[i];
    }
    Projection {
        ranks,
        order,
        block_of,
    }
}

/// `g − (block-average of g in sorted coordinates)`, scaled by `1/ε`.
fn projection_vjp(order: &[usize], block_of: &[usize], eps: f64, g: &[f64]) -> Vec<f64> {
    let n = order.len();
    let blocks = block_of.last().map_or(0, |b| b + 1);
    let mut sums = vec![0.0; blocks];
    let mut counts = vec![0usize; blocks];
    for i in 0..n {
        sums[block_of[i]] += g[order[i]];
        counts[block_of[i]] += 1;
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let b = block_of[i];
        out[order[i]] = (g[order[i]] - sums[b] / counts[b] as f64) / eps;
    }
    out
}

fn standardize_values(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.iter()
        .map(|x| if sd > 0.0 { (x - mean) / sd } else { x - mean })
        .collect()
}

/// Soft ranks of a plain vector (no tape).
pub fn soft_ranks_values(v: &[f64], cfg: &SoftRankConfig) -> Result<Vec<f64>, RankError> {
    cfg.validate()?;
    if v.len() < 2 {
        return Err(RankError::TooShort {
            op: "soft_ranks",
            min: 2,
            got: v.len(),
        });
    }
    let base = if cfg.standardize {
        standardize_values(v)
    } else {
        v.to_vec()
    };
    let eps = cfg.regularization_strength;
    let z: Vec<f64> = base.iter().map(|x| x / eps).collect();
    Ok(project(&z).ranks)
}

/// Differentiable soft ranks of a 1-D tensor.
pub fn soft_ranks(tape: &mut Tape, v: Var, cfg: &SoftRankConfig) -> Result<Var, RankError> {
    cfg.validate()?;
    let n = tape.value(v).len();
    if n < 2 {
        return Err(RankError::TooShort {
            op: "soft_ranks",
            min: 2,
            got: n,
        });
    }
    let v = tape.reshape(v, vec![n])?;
    let input = if cfg.standardize {
        let mean = tape.mean(v);
        let centered = tape.sub(v, mean)?;
        let sq = tape.square(centered)?;
        let var = tape.mean(sq);
        if tape.value(var)[0] > 0.0 {
            let sd = tape.sqrt(var);
            tape.div(centered, sd)?
        } else {
            centered
        }
    } else {
        v
    };
    let eps = cfg.regularization_strength;
    let z: Vec<f64> = tape.value(input).iter().map(|x| x / eps).collect();
    let Projection {
        ranks,
        order,
        block_of,
    } = project(&z);
    let vjp = Box::new(move |g: &[f64]| projection_vjp(&order, &block_of, eps, g));
    Ok(tape.custom(input, vec![n], ranks, vjp)?)
}

/// Differentiable Pearson correlation of two 1-D tensors. Returns a constant
/// zero (and logs a warning) when either side has zero variance.
pub fn pearson_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var, RankError> {
    let ma = tape.mean(a);
    let mb = tape.mean(b);
    let ca = tape.sub(a, ma)?;
    let cb = tape.sub(b, mb)?;
    let cross = tape.mul(ca, cb)?;
    let cov = tape.sum(cross);
    let sa = tape.square(ca)?;
    let va = tape.sum(sa);
    let sb = tape.square(cb)?;
    let vb = tape.sum(sb);
    let denom_sq = tape.mul(va, vb)?;
    let d = tape.value(denom_sq)[0];
    if !(d > 1e-300) {
        warn!("pearson: zero variance, reporting 0");
        return Ok(tape.scalar(0.0));
    }
    let denom = tape.sqrt(denom_sq);
    Ok(tape.div(cov, denom)?)
}

/// Differentiable Spearman correlation: Pearson correlation of soft ranks.
pub fn soft_spearman(tape: &mut Tape, a: Var, b: Var, cfg: &SoftRankConfig) -> Result<Var, RankError> {
    let (na, nb) = (tape.value(a).len(), tape.value(b).len());
    if na != nb {
        return Err(RankError::LengthMismatch {
            op: "soft_spearman",
            left: na,
            right: nb,
        });
    }
    if na < 3 {
        return Err(RankError::TooShort {
            op: "soft_spearman",
            min: 3,
            got: na,
        });
    }
    let ra = soft_ranks(tape, a, cfg)?;
    let rb = soft_ranks(tape, b, cfg)?;
    pearson_var(tape, ra, rb)
}
