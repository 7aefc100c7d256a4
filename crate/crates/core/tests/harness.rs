use dtr_core::harness::cli::cli_dispatch;
use dtr_core::harness::{emit_report, read_report, run_benchmark, BenchConfig, CellSpec, ReportFormat};
use dtr_core::panel;
use dtr_core::sem_sim::RegimeSpec;

fn small_config() -> BenchConfig {
    BenchConfig {
        n_subjects: 150,
        horizon: 2,
        replications: 2,
        horizons: vec![1, 2],
        cells: ["iptw", "msm", "seq_g:L1"].iter().map(|c| CellSpec::parse(c).unwrap()).collect(),
        regimes: RegimeSpec::ALL.to_vec(),
        seed: 3,
        mc_samples: 5000,
        ..BenchConfig::default()
    }
}

#[test]
fn benchmark_is_reproducible_and_complete() {
    let cfg = small_config();
    let a = run_benchmark(&cfg).unwrap();
    let b = run_benchmark(&cfg).unwrap();
    assert!(a.same_results(&b));
    assert_eq!(a.rows.len(), 3 * 4 * 2);
    let row = a.row("seq_g-L1", RegimeSpec::Threshold750, 3).unwrap();
    assert_eq!(row.estimates.len(), 2);
    assert!(row.mae.is_some() && row.esd.is_some());
}

#[test]
fn reports_round_trip_through_json() {
    let table = run_benchmark(&small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&table, &ReportFormat::ALL, dir.path()).unwrap();
    for name in ["mae.csv", "esd.csv", "report.json", "plotdata.csv"] {
        assert!(written.iter().any(|p| p.ends_with(name)), "{name}");
    }
    let back = read_report(&dir.path().join("report.json")).unwrap();
    assert_eq!(back, table);
    let mae = std::fs::read_to_string(dir.path().join("mae.csv")).unwrap();
    assert!(mae.starts_with("estimator,"));
    assert_eq!(mae.lines().count(), 1 + 3);
}

#[test]
fn cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    let ps = p.to_str().unwrap();
    assert_eq!(cli_dispatch(["dtr", "simulate", "--n", "10", "--K", "2", "--seed", "1", "--out", ps]), 0);
    assert_eq!(panel::read_csv(&p).unwrap().len(), 10);
    let args = ["dtr", "estimate", "--method", "iptw", "--regime", "750s", "--panel", ps];
    assert_eq!(cli_dispatch(args), 0);

    let cfg = dir.path().join("bench.cfg");
    std::fs::write(&cfg, "n = 80\nK = 1\nR = 2\nhorizons = 1\nmethods = iptw\nmc_samples = 2000\n").unwrap();
    let out = dir.path().join("out");
    let args = ["dtr", "bench", "--config", cfg.to_str().unwrap(), "--out_dir", out.to_str().unwrap()];
    assert_eq!(cli_dispatch(args), 0);
    assert!(out.join("report.json").exists());

    let re = dir.path().join("re");
    let report = out.join("report.json");
    let args = ["dtr", "report", "--input", report.to_str().unwrap(), "--out_dir", re.to_str().unwrap(), "--formats", "csv"];
    assert_eq!(cli_dispatch(args), 0);
    assert!(re.join("mae.csv").exists() && !re.join("report.json").exists());
}

#[test]
fn cli_exit_codes() {
    assert_eq!(cli_dispatch(["dtr", "--help"]), 0);
    assert_eq!(cli_dispatch(["dtr", "frobnicate"]), 1);
    assert_eq!(cli_dispatch(["dtr", "truth", "--regime", "sometimes", "--K", "1"]), 1);
    let missing = ["dtr", "estimate", "--method", "iptw", "--regime", "750s", "--panel", "/nonexistent/p.csv"];
    assert_eq!(cli_dispatch(missing), 2);
}
