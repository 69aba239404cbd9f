//! Sweep bookkeeping: row counts, determinism, resumption and failures.

use std::path::Path;

use latclass::harness::{run_sweep, METRICS_FILE, PLOT_FILE};
use latclass::metrics;
use latclass::runspec::{GridSize, ModelSpec, RunSpec};
use latclass_core::model::count_params;
use latclass_core::{Family, ModelConfig, TrainSpec};

fn small(family: Family) -> ModelConfig {
    ModelConfig {
        family,
        d_word: 6,
        d_hidden: 6,
        d_label: 4,
        d_latent: 3,
        num_latent: 2,
        ..ModelConfig::default()
    }
}

fn spec(out: &Path) -> RunSpec {
    RunSpec {
        dataset: "synthetic:n_train=400,n_test=40,vocab_size=60,num_labels=2,num_latent=2,max_len=12".into(),
        models: vec![
            ModelSpec::new("gen", small(Family::Generative)),
            ModelSpec::new("lat", small(Family::Latent)),
        ],
        train: TrainSpec {
            lr: 0.01,
            max_epochs: 2,
            ..TrainSpec::default()
        },
        grid: vec![GridSize(Some(5)), GridSize(Some(20))],
        seeds: vec![0, 1],
        out_dir: out.to_path_buf(),
        dev_size: 100,
        ..RunSpec::default()
    }
}

fn dev_accs(rows: &[metrics::MetricsRow]) -> Vec<(String, Option<usize>, u64, Option<f64>)> {
    let mut v: Vec<_> = rows
        .iter()
        .map(|r| (r.model.clone(), r.n_per_class, r.seed, r.dev_acc))
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

#[test]
fn two_sizes_two_models_two_seeds_give_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path());
    let report = run_sweep(&s).unwrap();
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.skipped, 0);
    let rows = metrics::load(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows, report.rows.iter().cloned().collect::<Vec<_>>());
    for r in &rows {
        assert!(r.note.is_empty(), "{}", r.note);
        let acc = r.dev_acc.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(r.param_count > 0);
    }
    let lat = rows.iter().find(|r| r.model == "lat").unwrap();
    assert_eq!(lat.structure, Some(latclass_core::Structure::Auxiliary));
    let svg = std::fs::read_to_string(dir.path().join(PLOT_FILE)).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);

    let again = run_sweep(&s).unwrap();
    assert_eq!((again.rows.len(), again.skipped), (0, 8));
    assert_eq!(metrics::load(&dir.path().join(METRICS_FILE)).unwrap().len(), 8);
}

#[test]
fn rerun_in_fresh_directory_reproduces_dev_accuracy_with_any_worker_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_sweep(&spec(a.path())).unwrap();
    let second = run_sweep(&RunSpec {
        workers: 3,
        ..spec(b.path())
    })
    .unwrap();
    assert_eq!(dev_accs(&first.rows), dev_accs(&second.rows));
}

#[test]
fn failing_leg_is_recorded_and_the_rest_continue() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(dir.path());
    s.models[0].config.d_hidden = 0;
    let report = run_sweep(&s).unwrap();
    assert_eq!(report.rows.len(), 8);
    let failed: Vec<_> = report.rows.iter().filter(|r| !r.note.is_empty()).collect();
    assert_eq!(failed.len(), 4);
    assert!(failed.iter().all(|r| r.model == "gen" && r.dev_acc.is_none()));
    // Failed legs are retried on the next run.
    let again = run_sweep(&s).unwrap();
    assert_eq!((again.rows.len(), again.skipped), (4, 4));
}

#[test]
fn param_counts_match_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let s = RunSpec {
        grid: vec![GridSize(Some(5))],
        seeds: vec![0],
        ..spec(dir.path())
    };
    let data = latclass::harness::load_dataset(&s).unwrap();
    for m in &s.models {
        let leg = latclass::harness::Leg {
            model: m.clone(),
            n_per_class: GridSize(Some(5)),
            seed: 0,
        };
        let run = latclass::harness::train_leg(&data.raw, &s, &leg).unwrap();
        let row = &latclass::harness::leg_rows(&s, &leg, &run).unwrap()[0];
        assert_eq!(row.param_count, count_params(&run.config).unwrap());
        assert_eq!(row.param_count, run.outcome.model.num_params());
    }
}
