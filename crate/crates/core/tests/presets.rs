use elastodg::config::{ProblemConfig, PRESETS};
use elastodg::driver::{run, Engine, Problem};
use elastodg::output::{read_receiver_csv, RECEIVER_HEADER};

#[test]
fn every_preset_takes_ten_steps() {
    for (name, _) in PRESETS {
        let cfg = ProblemConfig::preset(name).unwrap().unwrap();
        let problem = Problem::new(cfg).unwrap();
        let c = &problem.config;
        let mut engine = Engine::new(&problem, c.domain.cells, c.discretization.degree).unwrap();
        assert!(engine.tau() > 0.0, "{name}");
        for _ in 0..10 {
            let tau = engine.tau();
            engine.step_by(tau).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert_eq!(engine.steps(), 10);
        assert!(engine.energy().is_finite(), "{name}");
    }
}

#[test]
fn pulse_amr_is_bitwise_reproducible() {
    let problem = Problem::new(ProblemConfig::preset("pulse_amr").unwrap().unwrap()).unwrap();
    let a = run(&problem, None).unwrap();
    let b = run(&problem, None).unwrap();
    assert_eq!(a.final_energy.to_bits(), b.final_energy.to_bits());
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.regrids.len(), b.regrids.len());
    assert!(a
        .regrids
        .iter()
        .zip(&b.regrids)
        .all(|(x, y)| x.fine_elements == y.fine_elements));
}

#[test]
fn output_files_keep_their_layout() {
    let mut cfg = ProblemConfig::preset("lamb2d").unwrap().unwrap();
    cfg.domain.cells = [16, 12];
    cfg.discretization.degree = 1;
    cfg.time.end = Some(0.2);
    cfg.output.snapshot_times = vec![0.1, 0.2];
    let dir = tempfile::tempdir().unwrap();
    let report = run(&Problem::new(cfg).unwrap(), Some(dir.path())).unwrap();
    assert_eq!(report.snapshots.len(), 2);
    for name in [
        "run.log",
        "summary.json",
        "config.toml",
        "receiver_r.csv",
        "snapshot_000.vtk",
        "snapshot_001.vtk",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join("receiver_r.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(RECEIVER_HEADER));
    let rows = read_receiver_csv(&dir.path().join("receiver_r.csv")).unwrap();
    assert_eq!(rows.first().unwrap()[0], 0.0);
    assert_eq!(rows.last().unwrap()[0], 0.2);
    assert!(rows.iter().any(|r| r[2] != 0.0));
    let vtk = std::fs::read_to_string(dir.path().join("snapshot_000.vtk")).unwrap();
    let head: Vec<&str> = vtk.lines().take(4).collect();
    assert_eq!(head[0], "# vtk DataFile Version 3.0");
    assert!(head[1].starts_with("lamb2d t=1e-1"));
    assert_eq!(head[2..], ["ASCII", "DATASET UNSTRUCTURED_GRID"]);
    let log = std::fs::read_to_string(dir.path().join("run.log")).unwrap();
    assert_eq!(log.lines().next(), Some("# step t tau energy"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["q"], 3);
    assert_eq!(summary["cut_q"], 4);
    // the written config reloads to the same problem
    let again = ProblemConfig::load(dir.path().join("config.toml").to_str().unwrap()).unwrap();
    assert_eq!(again.domain.cells, [16, 12]);
}
