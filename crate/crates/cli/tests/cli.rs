use std::path::Path;
use std::process::{Command, Output};

fn hyperweno(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperweno"))
        .args(args)
        .current_dir(dir)
        .env_remove("HYPERWENO_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) {
    let out = hyperweno(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

fn column(rows: &[Vec<String>], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k].parse().unwrap()).collect()
}

/// Small data set and a three-epoch checkpoint, shared by several tests.
fn trained(dir: &Path) {
    ok(&["gen-data", "--benchmark", "burgers1", "--out", "data", "--n-traj", "2", "--mesh-levels", "32,64", "--seed", "1"], dir);
    ok(&["train", "--benchmark", "burgers1", "--data", "data", "--scheme", "hcfcnn", "--out", "m.hwck", "--epochs", "3"], dir);
}

#[test]
fn usage_io_and_format_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(hyperweno(&["rollout", "--no-such-flag"], d).status.code(), Some(2));
    assert_eq!(hyperweno(&["diagnose", "--rollout", "missing.hwtrj", "--out", "x.csv"], d).status.code(), Some(3));
    std::fs::write(d.join("bad.hwtrj"), b"not a trajectory").unwrap();
    let out = hyperweno(&["diagnose", "--rollout", "bad.hwtrj", "--out", "x.csv"], d);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[format]"));
    let out = hyperweno(&["reference", "--benchmark", "nonesuch", "--mesh", "32", "--T", "1", "--out", "x.csv"], d);
    assert_eq!(out.status.code(), Some(5));
    assert!(!d.join("x.csv").exists());
}

#[test]
fn diverged_runs_exit_nonzero_but_keep_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // fixed linear weights on the Shu-Osher jump go non-physical at once
    let out = hyperweno(&["rollout", "--ckpt", "linear", "--instance", "euler", "--mesh", "128", "--T", "0.1", "--out", "e.csv"], d);
    assert_eq!(out.status.code(), Some(6));
    let (header, rows) = read_csv(&d.join("e.csv"));
    assert_eq!(header, ["x", "component_0", "component_1", "component_2", "t"]);
    assert_eq!(rows.len(), 128);
}

#[test]
fn reference_csv_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| ["reference", "--benchmark", "shallow", "--mesh", "64", "--T", "0.5", "--save-every", "4", "--out", out];
    ok(&args("a.csv"), d);
    ok(&args("b.csv"), d);
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    let (header, rows) = read_csv(&d.join("a.csv"));
    assert_eq!(header, ["x", "component_0", "component_1", "t"]);
    // 8 steps at dt = 0.4 dx: snapshots at steps 0, 4, 8
    assert_eq!(rows.len(), 3 * 64);
    for r in &rows {
        for v in &r[..3] {
            let x: f64 = v.parse().unwrap();
            assert_eq!(&format!("{x:.16e}"), v);
        }
    }
    assert_eq!(column(&rows, 3).last().copied(), Some(0.5));
}

#[test]
fn periodic_known_flux_rollout_conserves_to_round_off() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(&["rollout", "--ckpt", "m.hwck", "--instance", "burgers1", "--mesh", "128", "--T", "3", "--out", "r.csv", "--record", "r.hwtrj"], d);
    ok(&["diagnose", "--rollout", "r.hwtrj", "--out", "c.csv", "--relative"], d);
    let (header, rows) = read_csv(&d.join("c.csv"));
    assert_eq!(header, ["t", "C_q0"]);
    let c = column(&rows, 1);
    assert!(c.len() > 100);
    assert!(c.iter().all(|v| *v <= 1e-12), "max {:e}", c.iter().fold(0.0f64, |m, v| m.max(*v)));
    assert!(d.join("m.hwck.loss.csv").exists());
}

#[test]
fn bench_cost_counts_n_times_p_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(&["bench-cost", "--ckpt", "m.hwck", "--meshes", "32,64,128", "--out", "cost.csv"], d);
    let (header, rows) = read_csv(&d.join("cost.csv"));
    assert_eq!(header, ["N", "params", "wall_seconds"]);
    for r in &rows {
        let n: usize = r[0].parse().unwrap();
        assert_eq!(r[1].parse::<usize>().unwrap(), 78 * n);
        assert!(r[2].parse::<f64>().unwrap() > 0.0);
    }
}

#[test]
fn classical_converge_on_smooth_burgers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("smooth.toml"), "benchmark = \"burgers1\"\n[ic]\nfamily = \"sine\"\na = 0.0\nb = 1.0\n").unwrap();
    ok(
        &[
            "converge", "--benchmark", "burgers1", "--ckpt", "weno5", "--instance", "smooth.toml", "--meshes", "32,64,128",
            "--T", "0.5", "--dt-ratio", "0.05", "--out", "conv.csv",
        ],
        d,
    );
    let (header, rows) = read_csv(&d.join("conv.csv"));
    assert_eq!(header, ["N", "mse", "order"]);
    assert_eq!(rows[0][2], "");
    let finest: f64 = rows[2][2].parse().unwrap();
    assert!(finest >= 4.0, "order {finest}");
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |out: &str, seed: Option<&str>| {
        let mut args = vec!["gen-data", "--benchmark", "burgers1", "--n-traj", "2", "--mesh-levels", "32", "--reference", "native", "--out", out];
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hyperweno"));
        cmd.current_dir(d).env_remove("HYPERWENO_SEED");
        match seed {
            Some(s) => {
                args.extend(["--seed", s]);
            }
            None => {
                cmd.env("HYPERWENO_SEED", "5");
            }
        }
        assert!(cmd.args(&args).output().unwrap().status.success());
        std::fs::read_to_string(d.join(out).join("manifest.json")).unwrap()
    };
    let from_env = gen("env", None);
    assert_eq!(from_env, gen("flag", Some("5")));
    assert_ne!(from_env, gen("other", Some("6")));
}
