//! Hard evaluation metrics: accuracy, RSA, topographic similarity and
//! cross-run correlation reports.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::diffrank::{hard_spearman, pearson, RankError};
use crate::message::Message;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{op} needs at least {min} items, got {got}")]
    TooFew {
        op: &'static str,
        min: usize,
        got: usize,
    },
    #[error("{op}: {left} vs {right} items")]
    CountMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// One row of the per-epoch metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub rsa_sl: f64,
    pub rsa_si: f64,
    pub rsa_li: f64,
    pub topsim: f64,
    pub unique_messages: usize,
    pub ce: f64,
    pub l_rsa: f64,
}

/// Column order of the metrics CSV.
pub const CSV_HEADER: [&str; 10] = [
    "epoch",
    "split",
    "accuracy",
    "rsa_sl",
    "rsa_si",
    "rsa_li",
    "topsim",
    "unique_messages",
    "ce",
    "l_rsa",
];

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Upper-triangle pairs `(i, j)`, `i < j`, in row-major order.
pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Pairwise cosine similarities over the upper triangle.
pub fn pairwise_cosine<A: AsRef<[f64]>>(rows: &[A]) -> Vec<f64> {
    upper_pairs(rows.len())
        .map(|(i, j)| cosine(rows[i].as_ref(), rows[j].as_ref()))
        .collect()
}

/// Representational similarity: Spearman correlation between the two sets'
/// pairwise cosine-similarity structures. Dimensions of the sets may differ.
pub fn rsa<A: AsRef<[f64]>, B: AsRef<[f64]>>(x: &[A], y: &[B]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::CountMismatch {
            op: "rsa",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(MetricsError::TooFew {
            op: "rsa",
            min: 3,
            got: x.len(),
        });
    }
    Ok(hard_spearman(&pairwise_cosine(x), &pairwise_cosine(y))?)
}

/// Unit-cost edit distance.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistance {
    #[default]
    Cosine,
    Euclidean,
}

/// Topographic similarity: Spearman correlation between pairwise input
/// distances and pairwise edit distances of EOS-truncated messages.
pub fn topsim<A: AsRef<[f64]>>(
    inputs: &[A],
    messages: &[Message],
    distance: InputDistance,
) -> Result<f64, MetricsError> {
    if inputs.len() != messages.len() {
        return Err(MetricsError::CountMismatch {
            op: "topsim",
            left: inputs.len(),
            right: messages.len(),
        });
    }
    if inputs.len() < 3 {
        return Err(MetricsError::TooFew {
            op: "topsim",
            min: 3,
            got: inputs.len(),
        });
    }
    let n = inputs.len();
    let input_d: Vec<f64> = upper_pairs(n)
        .map(|(i, j)| {
            let (a, b) = (inputs[i].as_ref(), inputs[j].as_ref());
            match distance {
                InputDistance::Cosine => 1.0 - cosine(a, b),
                InputDistance::Euclidean => euclidean(a, b),
            }
        })
        .collect();
    let msg_d: Vec<f64> = upper_pairs(n)
        .map(|(i, j)| levenshtein(messages[i].content(), messages[j].content()) as f64)
        .collect();
    if msg_d.iter().all(|d| *d == 0.0) {
        warn!("topsim: all messages identical, reporting 0");
        return Ok(0.0);
    }
    Ok(hard_spearman(&input_d, &msg_d)?)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the target index.
pub fn accuracy(distributions: &[f64], n_candidates: usize, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = distributions
        .chunks(n_candidates)
        .zip(targets)
        .filter(|(row, t)| argmax(row) == **t)
        .count();
    hits as f64 / targets.len() as f64
}

/// Number of distinct EOS-truncated messages.
pub fn unique_messages(messages: &[Message]) -> usize {
    let set: std::collections::HashSet<&[usize]> = messages.iter().map(|m| m.content()).collect();
    set.len()
}

/// Final metrics of one run, as consumed by [`correlation_report`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub topsim: f64,
    pub rsa_sl: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub x: String,
    pub y: String,
    pub n: usize,
    /// `None` when either variable has zero variance.
    pub r: Option<f64>,
    pub p: Option<f64>,
}

/// Two-tailed p-value of a Pearson r under the t approximation with n−2 dof.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return f64::NAN;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn correlate(x_name: &str, x: &[f64], y_name: &str, y: &[f64]) -> Correlation {
    let r = pearson(x, y);
    Correlation {
        x: x_name.into(),
        y: y_name.into(),
        n: x.len(),
        r,
        p: r.map(|r| pearson_p_value(r, x.len())),
    }
}

/// Pearson correlations topsim↔rsa_sl and topsim↔val_accuracy across runs.
pub fn correlation_report(runs: &[RunOutcome]) -> Result<Vec<Correlation>, MetricsError> {
    if runs.len() < 3 {
        return Err(MetricsError::TooFew {
            op: "correlation_report",
            min: 3,
            got: runs.len(),
        });
    }
    let topsim: Vec<f64> = runs.iter().map(|r| r.topsim).collect();
    let rsa_sl: Vec<f64> = runs.iter().map(|r| r.rsa_sl).collect();
    let acc: Vec<f64> = runs.iter().map(|r| r.val_accuracy).collect();
    Ok(vec![
        correlate("topsim", &topsim, "rsa_sl", &rsa_sl),
        correlate("topsim", &topsim, "val_accuracy", &acc),
    ])
}

/// Markdown table of correlation rows.
pub fn correlation_table(rows: &[Correlation]) -> String {
    let mut out = String::from("| x | y | n | r | p |\n|---|---|---|---|---|\n");
    for c in rows {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            c.x,
            c.y,
            c.n,
            fmt(c.r),
            fmt(c.p)
        ));
    }
    out
}
