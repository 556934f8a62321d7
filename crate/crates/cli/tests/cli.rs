use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cellscale_cli::commands::{FitOutput, Metric};
use cellscale_cli::sweep::SweepIndex;
use cellscale_core::corpus::{load_matrix, save_matrix, ExpressionMatrix, Stage};
use cellscale_core::entropy::{bits_from_mse_floor, bits_from_nll_floor, EntropyReport};
use cellscale_core::fit::FitResult;
use cellscale_core::model::{ModelConfig, Preset};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Poisson};

fn cellscale(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellscale"))
        .current_dir(dir)
        .env_remove("CELLSCALE_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cellscale(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, cells: &str, genes: &str) {
    ok(
        dir,
        &[
            "data", "synth", "--cells", cells, "--genes", genes, "--rank", "4", "--sigma", "0.5",
            "--seed", "3", "--out", name,
        ],
    );
}

fn raw_counts(cells: usize, genes: usize, zero_cells: &[usize]) -> ExpressionMatrix {
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let means: Vec<f64> = (0..genes).map(|_| rng.random_range(0.2..20.0)).collect();
    let mut values = Vec::with_capacity(cells * genes);
    for c in 0..cells {
        for &mu in &means {
            let v: f64 = if zero_cells.contains(&c) {
                0.0
            } else {
                Poisson::new(mu).unwrap().sample(&mut rng)
            };
            values.push(v as f32);
        }
    }
    ExpressionMatrix::with_default_names(cells, genes, values, Stage::RawCounts).unwrap()
}

#[test]
fn synth_is_deterministic_and_split_90_5_5() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a.xmat", "1000", "32");
    synth(tmp.path(), "b.xmat", "1000", "32");
    let a = fs::read(tmp.path().join("a.xmat")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b.xmat")).unwrap());
    let out = ok(tmp.path(), &["data", "info", "a.xmat"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("train/val/test 900/50/50"));
}

#[test]
fn build_filters_selects_and_normalizes() {
    let tmp = tempfile::tempdir().unwrap();
    save_matrix(&raw_counts(200, 50, &[3, 17]), &tmp.path().join("raw.xmat")).unwrap();
    ok(
        tmp.path(),
        &[
            "data",
            "build",
            "--input",
            "raw.xmat",
            "--n-top",
            "20",
            "--out",
            "corpus.xmat",
        ],
    );
    let m = load_matrix(&tmp.path().join("corpus.xmat")).unwrap();
    assert_eq!((m.n_cells(), m.n_genes()), (198, 20));
    assert_eq!(m.stage(), Stage::NormalizedLog1p);
    assert!(m.split().is_some());

    let out = cellscale(
        tmp.path(),
        &[
            "data", "build", "--input", "raw.xmat", "--n-top", "60", "--out", "x.xmat",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("60"), "{}", stderr(&out));
    assert!(!tmp.path().join("x.xmat").exists());
}

#[test]
fn sweep_writes_runs_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "c.xmat", "300", "16");
    let args = [
        "sweep",
        "--corpus",
        "c.xmat",
        "--presets",
        "XXS,TINY",
        "--seeds",
        "7,8",
        "--steps",
        "20",
        "--eval-every",
        "10",
        "--physical-batch",
        "4",
        "--grad-accum",
        "2",
        "--out",
        "runs",
    ];
    ok(tmp.path(), &args);
    let runs = tmp.path().join("runs");
    let index = SweepIndex::load(&runs).unwrap();
    assert_eq!(index.runs.len(), 4);
    for entry in &index.runs {
        let dir = runs.join(&entry.run_dir);
        for f in ["history.jsonl", "metadata.json", "ckpt_best.bin"] {
            assert!(dir.join(f).exists(), "{} missing {f}", entry.run_dir);
        }
        let preset: Preset = entry.preset.parse().unwrap();
        assert_eq!(
            entry.param_count,
            ModelConfig::from_preset(preset, 16).param_count()
        );
    }
    let history_before = fs::read(runs.join("XXS_s7/history.jsonl")).unwrap();

    let again = ok(tmp.path(), &args);
    assert_eq!(stderr(&again).matches("skipping").count(), 4);
    assert_eq!(SweepIndex::load(&runs).unwrap(), index);
    assert_eq!(
        fs::read(runs.join("XXS_s7/history.jsonl")).unwrap(),
        history_before
    );

    ok(tmp.path(), &["report", "--runs", "runs", "--decimals", "3"]);
    let md = fs::read_to_string(runs.join("report.md")).unwrap();
    assert!(md.contains("| XXS |") && md.contains("| TINY |"));
    assert_eq!(md.matches("_s7 |").count() + md.matches("_s8 |").count(), 4);
    let svg = fs::read_to_string(runs.join("scaling.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
}

#[test]
fn fit_recovers_exact_power_law() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("x,loss\n");
    for p in [100.0f64, 1e3, 1e4, 1e5, 1e6] {
        csv += &format!("{p},{}\n", 3.0 * p.powf(-0.5) + 0.3);
    }
    fs::write(tmp.path().join("pts.csv"), csv).unwrap();
    let out = ok(
        tmp.path(),
        &["fit", "--csv", "pts.csv", "--out", "fit.json"],
    );
    assert!(!stderr(&out).contains("warning"));
    let fit: FitOutput =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fit.json")).unwrap()).unwrap();
    assert!((fit.fit.alpha - 0.5).abs() < 1e-3, "{:?}", fit.fit);
    assert!((fit.fit.c - 0.3).abs() < 1e-3);
    assert!(!fit.non_scaling);
    let svg = fs::read_to_string(tmp.path().join("fit.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(
        doc.descendants()
            .filter(|n| n.has_tag_name("circle"))
            .count(),
        5
    );
    assert_eq!(
        doc.descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .count(),
        1
    );
}

#[test]
fn fit_warns_on_flat_data() {
    let tmp = tempfile::tempdir().unwrap();
    // loss depends on the seed only, never on size
    let seed_losses = [1.00, 1.013, 0.985];
    let mut csv = String::from("x,loss\n");
    for e in 2..8 {
        for l in seed_losses {
            csv += &format!("{},{l}\n", 10f64.powi(e));
        }
    }
    fs::write(tmp.path().join("flat.csv"), csv).unwrap();
    let out = ok(
        tmp.path(),
        &["fit", "--csv", "flat.csv", "--out", "flat.json"],
    );
    assert!(stderr(&out).contains("non-scaling"), "{}", stderr(&out));
    let fit: FitOutput =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("flat.json")).unwrap()).unwrap();
    assert!(fit.non_scaling);
    assert!(
        fit.fit.alpha.abs() < 0.02 && fit.fit.r2 < 0.1,
        "{:?}",
        fit.fit
    );
}

fn fit_file(dir: &Path, name: &str, metric: Metric, c: f64) {
    let fit = FitOutput {
        metric,
        provenance: None,
        fit: FitResult {
            alpha: 0.3,
            a: 1.0,
            c,
            r2: 0.9,
            n: 6,
            c_grid_points: 1000,
            refinement_passes: 5,
        },
        non_scaling: false,
        points: vec![],
    };
    fs::write(dir.join(name), serde_json::to_string(&fit).unwrap()).unwrap();
}

#[test]
fn entropy_from_fitted_floors() {
    let tmp = tempfile::tempdir().unwrap();
    let nll_floor = 2.296 * std::f64::consts::LN_2;
    fit_file(tmp.path(), "mse.json", Metric::Mse, 1.444);
    fit_file(tmp.path(), "nll.json", Metric::Nll, nll_floor);
    ok(
        tmp.path(),
        &[
            "entropy",
            "--fit",
            "mse.json",
            "--nll-fit",
            "nll.json",
            "--out",
            "e.json",
        ],
    );
    let report: EntropyReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("e.json")).unwrap()).unwrap();
    assert!((report.mse_floor.bits_per_position - 2.312).abs() < 1e-3);
    let nll = report.nll_floor.unwrap();
    assert!((nll.bits_per_position - 2.296).abs() < 1e-9);
    assert_eq!(
        nll.bits_per_position,
        bits_from_nll_floor(nll_floor).unwrap()
    );
    assert!((report.gap_bits.unwrap() + 0.016).abs() < 1e-3);

    fit_file(tmp.path(), "zero.json", Metric::Mse, 0.0);
    let out = cellscale(tmp.path(), &["entropy", "--fit", "zero.json"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(bits_from_mse_floor(0.0).is_err());
}

#[test]
fn exit_codes_and_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = cellscale(tmp.path(), &["data", "info", "nope.xmat"]);
    assert_eq!(missing.status.code(), Some(3));

    fs::write(
        tmp.path().join("bad.toml"),
        "[train]\nlearning_rate = 1.0\n",
    )
    .unwrap();
    let bad = cellscale(
        tmp.path(),
        &["--config", "bad.toml", "data", "info", "x.xmat"],
    );
    assert_eq!(bad.status.code(), Some(2));

    let root = tmp.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_cellscale"))
        .current_dir(tmp.path())
        .env("CELLSCALE_OUT", &root)
        .args([
            "data",
            "synth",
            "--cells",
            "50",
            "--genes",
            "16",
            "--out",
            "sub/c.xmat",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(root.join("sub/c.xmat").exists());
}
