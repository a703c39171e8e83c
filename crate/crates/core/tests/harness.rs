use std::path::Path;
use std::process::Command;

use refgame::datasets::{load_embeddings, save_embeddings, write_labels, SyntheticSpec};
use refgame::game::LossKind;
use refgame::harness::run::{seed_dir, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE};
use refgame::harness::{
    evaluate_run, import_embeddings, report, run_ablation, run_experiment, run_sweep, DatasetConfig,
    ExperimentConfig, ImportOptions, ReportOptions, SeedSummary, SweepGrid,
};
use refgame::metrics::{MetricsRecord, CSV_HEADER};

fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        epochs: 2,
        noise_pairs: 20,
        winoground_pairs: 20,
        out_dir: out.to_path_buf(),
        dataset: DatasetConfig::Synthetic(SyntheticSpec {
            items_per_category: 24,
            ..SyntheticSpec::default()
        }),
        ..ExperimentConfig::default()
    }
}

fn metrics_rows(path: &Path) -> Vec<MetricsRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn one_seed_writes_rows_per_epoch_and_split_plus_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = run_experiment(&cfg, 1).unwrap();
    let seed = seed_dir(&out.dir, 1);
    let text = std::fs::read_to_string(seed.join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    let rows = metrics_rows(&seed.join(METRICS_FILE));
    assert_eq!(rows.len(), (cfg.epochs + 1) * 2);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.epoch, k / 2);
        assert_eq!(r.split, if k % 2 == 0 { "train" } else { "validation" });
        assert!((0.0..=1.0).contains(&r.accuracy));
        for v in [r.rsa_sl, r.rsa_si, r.rsa_li, r.topsim] {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
    assert!(seed.join(CHECKPOINT_FILE).exists());
    let summary: SeedSummary =
        serde_json::from_str(&std::fs::read_to_string(seed.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.validation, rows.last().unwrap().clone());
    assert!(summary.noise.is_some() && summary.winoground.is_some());
    // The echoed configuration resolves back to the one that ran.
    let echo = ExperimentConfig::from_toml(&std::fs::read_to_string(out.dir.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(echo, cfg);
}

#[test]
fn same_seed_twice_gives_byte_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let read = |d: &Path| {
        let out = run_experiment(&tiny(d), 1).unwrap();
        std::fs::read(seed_dir(&out.dir, 1).join(METRICS_FILE)).unwrap()
    };
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn alignment_loss_reports_nonzero_penalty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        loss: LossKind::CeRsa,
        ..tiny(dir.path())
    };
    let out = run_experiment(&cfg, 1).unwrap();
    let s = &out.summaries[0];
    assert_eq!(s.loss, "ce_rsa");
    assert!(s.validation.l_rsa > 0.0);
    let plain = run_experiment(&tiny(dir.path()), 1).unwrap();
    assert_eq!(plain.summaries[0].validation.l_rsa, 0.0);
}

#[test]
fn seeds_are_isolated_and_completed_seeds_resume() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let alone = run_experiment(
        &ExperimentConfig {
            seeds: vec![4],
            ..tiny(a.path())
        },
        1,
    )
    .unwrap();
    let together = run_experiment(
        &ExperimentConfig {
            seeds: vec![3, 4],
            ..tiny(b.path())
        },
        2,
    )
    .unwrap();
    let read = |d: &Path| std::fs::read(seed_dir(d, 4).join(METRICS_FILE)).unwrap();
    assert_eq!(read(&alone.dir), read(&together.dir));

    // Extending the seed list keeps the finished seed untouched.
    let marker = seed_dir(&alone.dir, 4).join("marker");
    std::fs::write(&marker, b"kept").unwrap();
    let more = run_experiment(
        &ExperimentConfig {
            seeds: vec![4, 5],
            ..tiny(a.path())
        },
        1,
    )
    .unwrap();
    assert!(marker.exists());
    assert!(seed_dir(&more.dir, 5).join(SUMMARY_FILE).exists());

    // A different configuration refuses to share the directory.
    let clash = ExperimentConfig {
        entropy_coef: 0.5,
        ..tiny(a.path())
    };
    assert_eq!(run_experiment(&clash, 1).unwrap_err().exit_code(), 1);
}

#[test]
fn evaluate_reproduces_the_final_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(dir.path()), 1).unwrap();
    let again = evaluate_run(&out.dir).unwrap();
    assert_eq!(again, out.summaries);
}

#[test]
fn sweep_writes_one_heatmap_row_per_cell_and_a_best_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        epochs: 1,
        ..tiny(dir.path())
    };
    let grid = SweepGrid {
        vocab_sizes: vec![3, 5],
        max_lens: vec![2],
    };
    let outcome = run_sweep(&cfg, &grid, &[LossKind::Ce], 2).unwrap();
    assert_eq!(outcome.cells_per_loss, 2);
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.best.len(), 1);
    let heat = std::fs::read_to_string(outcome.dir.join("heatmap_ce.csv")).unwrap();
    let lines: Vec<&str> = heat.lines().collect();
    assert_eq!(lines[0], "vocab,max_len,runs,failed,accuracy,topsim,rsa_sl,rsa_si,rsa_li");
    assert_eq!(&lines[1][..6], "3,2,1,");
    assert_eq!(&lines[2][..6], "5,2,1,");
    assert_eq!(lines.len(), 3);
    let trend = std::fs::read_to_string(outcome.dir.join("rsa_trend_ce.csv")).unwrap();
    assert_eq!(trend.lines().count(), 1 + 2 * 2);
    let index = std::fs::read_to_string(outcome.dir.join("sweep_index.json")).unwrap();
    assert_eq!(serde_json::from_str::<Vec<serde_json::Value>>(&index).unwrap().len(), 2);
    assert_eq!(SweepGrid::default().cells().len(), 42);
}

#[test]
fn ablation_pairs_both_conditions_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![1, 2],
        ..tiny(dir.path())
    };
    let r = run_ablation(&cfg, 1).unwrap();
    assert_eq!(r.seeds.len(), 2);
    for s in &r.seeds {
        assert!(s.epoch0_identical, "seed {} differs before training", s.seed);
        assert!(s.max_relative_ce_divergence.is_finite());
    }
    assert!(r.max_relative_ce_divergence >= r.seeds[0].max_relative_ce_divergence);
    let curves = std::fs::read_to_string(r.dir.join("ablation_curves.csv")).unwrap();
    assert!(curves.starts_with("seed,epoch,split,ce_ce,ce_ce_rsa,accuracy_ce,accuracy_ce_rsa"));
    assert_eq!(curves.lines().count(), 1 + 2 * (cfg.epochs + 1) * 2);
    assert!(r.dir.join("ce").join("seed-1").exists() && r.dir.join("ce_rsa").join("seed-1").exists());
}

fn fake_run(root: &Path, k: usize) {
    let dir = root.join(format!("run-{k:02}"));
    std::fs::create_dir_all(&dir).unwrap();
    let x = k as f64 / 15.0;
    let rec = |epoch: usize, split: &str, acc: f64| MetricsRecord {
        epoch,
        split: split.into(),
        accuracy: acc,
        rsa_sl: 0.5 + 0.4 * x,
        rsa_si: 0.9 - 0.3 * x,
        rsa_li: 0.8,
        topsim: 0.2 + 0.3 * x + 0.01 * ((k * 7) % 5) as f64,
        unique_messages: 10 + k,
        ce: 0.3,
        l_rsa: 0.0,
    };
    let summary = SeedSummary {
        seed: k as u64,
        loss: "ce".into(),
        vocab: 10,
        max_len: 5,
        epochs: 1,
        train: rec(1, "train", 0.9),
        validation: rec(1, "validation", 0.8 + 0.01 * k as f64),
        noise: Some(rec(1, "noise", 0.6)),
        winoground: Some(rec(1, "winoground", 0.7)),
    };
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string(&summary).unwrap()).unwrap();
    let mut w = csv::Writer::from_path(dir.join(METRICS_FILE)).unwrap();
    for r in [rec(0, "train", 0.5), rec(0, "validation", 0.5), rec(1, "train", 0.9), rec(1, "validation", 0.8)] {
        w.serialize(r).unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn report_over_fifteen_runs_has_correlations_and_is_reproducible() {
    let runs = tempfile::tempdir().unwrap();
    for k in 0..15 {
        fake_run(runs.path(), k);
    }
    let out = tempfile::tempdir().unwrap();
    let opts = |sub: &str, svg: bool| ReportOptions {
        inputs: vec![runs.path().to_path_buf()],
        out_dir: out.path().join(sub),
        svg,
    };
    let bundle = report(&opts("a", false)).unwrap();
    assert_eq!(bundle.runs.len(), 15);
    let c = bundle
        .correlations
        .iter()
        .find(|c| c.group == "ce" && c.y == "rsa_sl")
        .unwrap();
    assert_eq!(c.n, 15);
    assert!(c.r.unwrap() > 0.9 && c.p.unwrap() < 0.001);
    let has_svg = |d: &Path| std::fs::read_dir(d).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg"));
    assert!(!has_svg(&out.path().join("a")));

    report(&opts("b", false)).unwrap();
    for f in ["report.md", "runs.csv", "correlations.csv", "curves.csv", "bars.csv"] {
        let a = std::fs::read(out.path().join("a").join(f)).unwrap();
        let b = std::fs::read(out.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between regenerations");
    }
    report(&opts("c", true)).unwrap();
    assert!(has_svg(&out.path().join("c")));
    assert!(out.path().join("c").join("bars.svg").exists());
}

#[test]
fn report_with_too_few_runs_omits_correlations() {
    let runs = tempfile::tempdir().unwrap();
    fake_run(runs.path(), 1);
    fake_run(runs.path(), 2);
    let out = tempfile::tempdir().unwrap();
    let bundle = report(&ReportOptions {
        inputs: vec![runs.path().to_path_buf()],
        out_dir: out.path().to_path_buf(),
        svg: false,
    })
    .unwrap();
    assert!(bundle.correlations.is_empty());
    let md = std::fs::read_to_string(out.path().join("report.md")).unwrap();
    assert!(md.contains("Correlations omitted"));
}

#[test]
fn import_applies_the_category_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let sizes = [("cat", 5usize), ("dog", 12), ("bus", 15)];
    let mut labels = Vec::new();
    let mut csv_text = String::new();
    for (name, n) in sizes {
        for i in 0..n {
            labels.push(name.to_string());
            csv_text.push_str(&format!("{}.5, {}, -1\n", labels.len(), i));
        }
    }
    let feats = dir.path().join("f.csv");
    std::fs::write(&feats, csv_text).unwrap();
    let lab = dir.path().join("labels.csv");
    write_labels(std::fs::File::create(&lab).unwrap(), &labels).unwrap();
    let out = dir.path().join("out");
    let s = import_embeddings(&ImportOptions {
        embeddings: feats,
        labels: lab.clone(),
        out_dir: out.clone(),
        min_count: Some(10),
        per_category: Some(10),
        seed: 3,
    })
    .unwrap();
    assert_eq!((s.items_in, s.items_out, s.dim), (32, 20, 3));
    assert_eq!(s.dropped_categories, vec!["cat".to_string()]);
    let ds = load_embeddings(&s.embeddings, &s.labels, 0).unwrap();
    assert_eq!(ds.len(), 20);
    assert_eq!(ds.category_names(), &["dog", "bus"]);

    // EMB1 input without a recipe is copied through unchanged.
    let data: Vec<f64> = (0..32 * 2).map(|i| i as f64).collect();
    let emb = dir.path().join("f.emb1");
    save_embeddings(&emb, 32, 2, &data).unwrap();
    let s = import_embeddings(&ImportOptions {
        embeddings: emb,
        labels: lab,
        out_dir: dir.path().join("copy"),
        min_count: None,
        per_category: None,
        seed: 0,
    })
    .unwrap();
    let ds = load_embeddings(&s.embeddings, &s.labels, 0).unwrap();
    assert_eq!(ds.embeddings(), &data[..]);
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_refgame");
    let dir = tempfile::tempdir().unwrap();
    let status = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("REFGAME_OUT", dir.path())
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(status(&["train", "--bogus"]), Some(1));
    assert_eq!(status(&["train", "--vocab", "1"]), Some(1));
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "epochs = 1\nnoise_pairs = 10\nwinoground_pairs = 10\n[dataset]\nkind = \"synthetic\"\nitems_per_category = 16\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(status(&["train", "--config", cfg, "--seed", "2"]), Some(0));
    assert!(dir.path().join("ce-V10-L5").join("seed-2").join(SUMMARY_FILE).exists());
    let missing = dir.path().join("m.toml");
    std::fs::write(&missing, "[dataset]\nkind = \"embeddings\"\npath = \"/nonexistent.emb1\"\nlabels = \"/nonexistent.csv\"\n").unwrap();
    assert_eq!(status(&["train", "--config", missing.to_str().unwrap()]), Some(2));
    assert_eq!(status(&["report", dir.path().join("ce-V10-L5").to_str().unwrap()]), Some(0));
    assert!(dir.path().join("report").join("report.md").exists());
}
