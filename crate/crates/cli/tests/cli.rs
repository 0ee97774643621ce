use std::process::{Command, Output};

fn elastodg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elastodg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn lists_presets() {
    let o = elastodg(&["presets"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    for p in [
        "circle_convergence",
        "biphase_periodic",
        "lamb2d",
        "single_interface",
        "structured2d",
        "pulse_amr",
    ] {
        assert!(names.iter().any(|n| n == p), "{p}");
    }
}

#[test]
fn quadtest_reports_errors_and_order() {
    let o = elastodg(&["quadtest", "--grids", "8,16,32"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "cells,area,length,area_error,length_error");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("order: area "));
}

#[test]
fn meshdump_counts_cells() {
    let o = elastodg(&["meshdump", "circle_convergence"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("grid 16x16, q = 5, cut_q = 8, fbar = 0.3\n"));
    assert!(text.contains("faces embedded-boundary: "));
}

#[test]
fn zero_run_writes_zero_receivers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quiet.toml");
    std::fs::write(
        &cfg,
        r#"
name = "quiet"
[domain]
lo = [0.0, 0.0]
hi = [1.0, 1.0]
cells = [6, 6]
[geometry]
kind = "circle"
center = [0.5, 0.5]
radius = 0.2
[[phases]]
sign = "negative"
material = { kind = "preset", name = "copper" }
[discretization]
degree = 2
[boundary]
sides = { kind = "absorbing" }
[initial]
kind = "zero"
[[receivers]]
name = "a"
position = [0.1, 0.1]
[time]
end = 0.05
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = elastodg(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("energy 0.000000e0 -> 0.000000e0"));
    let csv = std::fs::read_to_string(out.join("receiver_a.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,v1,v2"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 10);
    assert!(rows.iter().all(|r| r.ends_with(",0e0,0e0")));
}

#[test]
fn rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = elastodg::config::PRESETS
        .iter()
        .find(|p| p.0 == "circle_convergence")
        .unwrap()
        .1;
    std::fs::write(&cfg, text.replace("[time]", "[time]\nstop = 1.0")).unwrap();
    let o = elastodg(&["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stop"));
}

#[test]
fn converge_prints_rate_table() {
    let o = elastodg(&["converge", "circle_convergence", "--grids", "4,8", "--degrees", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("degree,cells,h,steps,e_linf,e_l2,rate_linf,rate_l2\n1,4,"));
    assert!(text.contains("\ndegree,order_linf,order_l2\n1,"));
}
