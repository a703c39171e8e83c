//! Report bundles over completed runs: correlation tables, learning curves
//! and per-dataset accuracy bars, optionally rendered as SVG.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::run::{SeedSummary, METRICS_FILE, SUMMARY_FILE};
use super::svg::{bar_chart, line_chart, Series};
use super::{csv_bytes, finite_mean, finite_std, read_csv, read_json, write_atomic, HarnessError};
use crate::metrics::{correlation_report, correlation_table, Correlation, MetricsRecord, RunOutcome};

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub svg: bool,
}

/// One completed seed found below the inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: String,
    pub loss: String,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
    pub val_accuracy: f64,
    pub topsim: f64,
    pub rsa_sl: f64,
    pub rsa_si: f64,
    pub rsa_li: f64,
    pub noise_accuracy: Option<f64>,
    pub winoground_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub group: String,
    pub x: String,
    pub y: String,
    pub n: usize,
    pub r: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub loss: String,
    pub split: String,
    pub epoch: usize,
    pub runs: usize,
    pub accuracy: f64,
    pub rsa_sl: f64,
    pub rsa_si: f64,
    pub rsa_li: f64,
    pub topsim: f64,
    pub ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarRow {
    pub loss: String,
    pub dataset: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Everything a report wrote.
#[derive(Clone, Debug, Default)]
pub struct ReportBundle {
    pub runs: Vec<RunRow>,
    pub correlations: Vec<CorrelationRow>,
    pub files: Vec<PathBuf>,
}

/// Seed directories (those holding a summary) below `inputs`, sorted.
pub fn find_runs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, HarnessError> {
    let mut found = Vec::new();
    for input in inputs {
        if !input.exists() {
            return Err(HarnessError::Config(format!("{} does not exist", input.display())));
        }
        for entry in walkdir::WalkDir::new(input)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'))
        {
            let entry = entry.map_err(|e| HarnessError::Runtime(e.to_string()))?;
            if entry.file_type().is_file() && entry.file_name() == SUMMARY_FILE {
                if let Some(dir) = entry.path().parent() {
                    found.push(dir.to_path_buf());
                }
            }
        }
    }
    found.sort();
    found.dedup();
    Ok(found)
}

/// Builds the report bundle in `opts.out_dir`. Correlations need at least
/// three runs per group; smaller groups get a notice instead.
pub fn report(opts: &ReportOptions) -> Result<ReportBundle, HarnessError> {
    let dirs = find_runs(&opts.inputs)?;
    if dirs.is_empty() {
        return Err(HarnessError::Runtime("no completed runs found".into()));
    }
    let mut runs = Vec::new();
    let mut curves: BTreeMap<(String, String), Vec<Vec<MetricsRecord>>> = BTreeMap::new();
    for dir in &dirs {
        let s: SeedSummary = read_json(&dir.join(SUMMARY_FILE))?;
        runs.push(RunRow {
            run: dir.display().to_string(),
            loss: s.loss.clone(),
            vocab: s.vocab,
            max_len: s.max_len,
            seed: s.seed,
            val_accuracy: s.validation.accuracy,
            topsim: s.validation.topsim,
            rsa_sl: s.validation.rsa_sl,
            rsa_si: s.validation.rsa_si,
            rsa_li: s.validation.rsa_li,
            noise_accuracy: s.noise.as_ref().map(|r| r.accuracy),
            winoground_accuracy: s.winoground.as_ref().map(|r| r.accuracy),
        });
        let metrics = dir.join(METRICS_FILE);
        if metrics.exists() {
            let rows: Vec<MetricsRecord> = read_csv(&metrics)?;
            for split in ["train", "validation"] {
                curves
                    .entry((s.loss.clone(), split.to_string()))
                    .or_default()
                    .push(rows.iter().filter(|r| r.split == split).cloned().collect());
            }
        } else {
            warn!("{} has no metrics file", dir.display());
        }
    }

    let mut groups: BTreeMap<String, Vec<&RunRow>> = BTreeMap::new();
    for r in &runs {
        groups.entry(r.loss.clone()).or_default().push(r);
        groups.entry("all".into()).or_default().push(r);
    }
    let mut correlations = Vec::new();
    let mut md = String::from("# Run report\n\n");
    md.push_str(&format!("{} completed runs.\n\n", runs.len()));
    for (group, members) in &groups {
        md.push_str(&format!("## Correlations: {group}\n\n"));
        let outcomes: Vec<RunOutcome> = members
            .iter()
            .map(|r| RunOutcome {
                topsim: r.topsim,
                rsa_sl: r.rsa_sl,
                val_accuracy: r.val_accuracy,
            })
            .collect();
        match correlation_report(&outcomes) {
            Ok(rows) => {
                md.push_str(&correlation_table(&rows));
                correlations.extend(rows.into_iter().map(|c: Correlation| CorrelationRow {
                    group: group.clone(),
                    x: c.x,
                    y: c.y,
                    n: c.n,
                    r: c.r,
                    p: c.p,
                }));
            }
            Err(_) => md.push_str(&format!(
                "Correlations omitted: {} runs, at least 3 are needed.\n",
                members.len()
            )),
        }
        md.push('\n');
    }

    let mut curve_rows = Vec::new();
    for ((loss, split), set) in &curves {
        let n = set.iter().map(|c| c.len()).min().unwrap_or(0);
        for e in 0..n {
            let col = |f: fn(&MetricsRecord) -> f64| finite_mean(set.iter().map(|c| f(&c[e])));
            curve_rows.push(CurveRow {
                loss: loss.clone(),
                split: split.clone(),
                epoch: set[0][e].epoch,
                runs: set.len(),
                accuracy: col(|r| r.accuracy),
                rsa_sl: col(|r| r.rsa_sl),
                rsa_si: col(|r| r.rsa_si),
                rsa_li: col(|r| r.rsa_li),
                topsim: col(|r| r.topsim),
                ce: col(|r| r.ce),
            });
        }
    }

    let mut bars = Vec::new();
    for (loss, members) in groups.iter().filter(|(g, _)| g.as_str() != "all") {
        let sets: [(&str, Vec<f64>); 3] = [
            ("validation", members.iter().map(|r| r.val_accuracy).collect()),
            ("noise", members.iter().filter_map(|r| r.noise_accuracy).collect()),
            ("winoground", members.iter().filter_map(|r| r.winoground_accuracy).collect()),
        ];
        for (dataset, values) in sets {
            if values.is_empty() {
                continue;
            }
            bars.push(BarRow {
                loss: loss.clone(),
                dataset: dataset.into(),
                runs: values.len(),
                mean_accuracy: finite_mean(values.iter().copied()),
                std_accuracy: finite_std(values.iter().copied()),
            });
        }
    }
    md.push_str("## Accuracy by dataset\n\n| loss | dataset | runs | mean | std |\n|---|---|---|---|---|\n");
    for b in &bars {
        md.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} |\n",
            b.loss, b.dataset, b.runs, b.mean_accuracy, b.std_accuracy
        ));
    }

    let out = &opts.out_dir;
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), HarnessError> {
        let p = out.join(name);
        write_atomic(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    put("report.md", md.as_bytes())?;
    put("runs.csv", &csv_bytes(&runs)?)?;
    put("correlations.csv", &csv_bytes(&correlations)?)?;
    put("curves.csv", &csv_bytes(&curve_rows)?)?;
    put("bars.csv", &csv_bytes(&bars)?)?;
    if opts.svg {
        for loss in curves.keys().map(|(l, _)| l.clone()).collect::<std::collections::BTreeSet<_>>() {
            let val: Vec<&CurveRow> = curve_rows
                .iter()
                .filter(|r| r.loss == loss && r.split == "validation")
                .collect();
            let series = |label: &str, f: fn(&CurveRow) -> f64| Series {
                label: label.into(),
                points: val.iter().map(|r| (r.epoch as f64, f(r))).collect(),
                dashed: loss != "ce",
            };
            let svg = line_chart(
                &format!("Validation alignment ({loss})"),
                "epoch",
                "RSA",
                &[
                    series("rsa_sl", |r| r.rsa_sl),
                    series("rsa_si", |r| r.rsa_si),
                    series("rsa_li", |r| r.rsa_li),
                ],
            );
            put(&format!("curves_{loss}.svg"), svg.as_bytes())?;
        }
        let datasets: Vec<String> = ["validation", "noise", "winoground"]
            .iter()
            .filter(|d| bars.iter().any(|b| b.dataset == **d))
            .map(|d| d.to_string())
            .collect();
        let losses: Vec<String> = groups.keys().filter(|g| g.as_str() != "all").cloned().collect();
        let series: Vec<(String, Vec<f64>)> = losses
            .iter()
            .map(|l| {
                (
                    l.clone(),
                    datasets
                        .iter()
                        .map(|d| {
                            bars.iter()
                                .find(|b| &b.loss == l && &b.dataset == d)
                                .map_or(f64::NAN, |b| b.mean_accuracy)
                        })
                        .collect(),
                )
            })
            .collect();
        put("bars.svg", bar_chart("Accuracy by dataset", "accuracy", &datasets, &series).as_bytes())?;
    }
    Ok(ReportBundle {
        runs,
        correlations,
        files,
    })
}

/// Convenience for callers holding a single directory.
pub fn report_dir(input: &Path, out_dir: &Path, svg: bool) -> Result<ReportBundle, HarnessError> {
    report(&ReportOptions {
        inputs: vec![input.to_path_buf()],
        out_dir: out_dir.to_path_buf(),
        svg,
    })
}
