use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "seed = 1

[model]
d = 1
p = 2

[grid]
n = 16
l = 8.0

[state]
kind = \"gaussian\"
depth = 2
k0 = 0.5

[closure]
kind = \"factorized\"

[run]
dt = 1e-3
steps = 10
norm_every = 5
snapshot_every = 5
";

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("gph-cli")
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn gph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gph"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn simulate_is_deterministic() {
    let dir = scratch("simulate");
    let cfg = write(&dir, "run.toml", SMALL);
    let a = dir.join("a");
    let b = dir.join("b");
    for out in [&a, &b] {
        let o = gph(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let sa = fs::read(a.join("series.csv")).unwrap();
    assert_eq!(sa, fs::read(b.join("series.csv")).unwrap());
    let header: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("header.json")).unwrap()).unwrap();
    assert_eq!(header["steps"], 10);
    assert_eq!(header["hashes"]["config"].as_str().unwrap().len(), 64);
    assert!(a.join("snapshots/step000005_k1.gph").exists());

    let json = gph(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        dir.join("c").to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(code(&json), 0);
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("c/series.json")).unwrap()).unwrap();
    assert!(v.as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn exit_codes() {
    let dir = scratch("codes");
    let out = dir.join("o");
    let out = out.to_str().unwrap();

    let bad = write(&dir, "bad.toml", &SMALL.replace("n = 16", "n = 15"));
    let o = gph(&["simulate", "--config", &bad, "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml:8: grid.n"));

    let big = write(
        &dir,
        "big.toml",
        &SMALL
            .replace("n = 16", "n = 4096")
            .replace("depth = 2", "depth = 4"),
    );
    assert_eq!(code(&gph(&["simulate", "--config", &big, "--out", out])), 3);

    let mix =
        "[model]\nd = 1\np = 2\n[grid]\nn = 16\nl = 8.0\n[state]\nkind = \"mixture\"\ndepth = 2\n\
               sigmas = [1.0, 0.6]\nk0s = [0.7, -1.0]\nx0s = [0.0, 0.5]\nweights = [0.6, 0.4]\n\
               [closure]\nkind = \"factorized\"\n[run]\ndt = 1e-3\nsteps = 5\n";
    let mix = write(&dir, "mix.toml", mix);
    assert_eq!(code(&gph(&["simulate", "--config", &mix, "--out", out])), 4);

    let cfg = write(&dir, "ok.toml", SMALL);
    assert_eq!(
        code(&gph(&[
            "simulate",
            "--config",
            &cfg,
            "--out",
            out,
            "--threads",
            "0"
        ])),
        2
    );
    assert_eq!(code(&gph(&["verify", "--suite", "nonsense"])), 2);
}

#[test]
fn verify_reports_json() {
    let o = gph(&["verify", "--suite", "norms", "--suite", "boardgame"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["suites"].as_array().unwrap().len(), 2);
}

#[test]
fn scan_resumes() {
    let dir = scratch("scan");
    let cfg = write(
        &dir,
        "scan.toml",
        "[scan]\nkind = \"echelon\"\njmax = 4\nkmax = 3\n",
    );
    let out = dir.join("table.csv");
    let o = gph(&["scan", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let full = fs::read_to_string(&out).unwrap();
    assert_eq!(full.lines().count(), 1 + 4 * 3);

    let o = gph(&["scan", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 groups computed"));
    assert_eq!(fs::read_to_string(&out).unwrap(), full);

    // drop the last two groups as if interrupted
    let partial: Vec<&str> = full.lines().take(1 + 2 * 3).collect();
    fs::write(&out, partial.join("\n") + "\n").unwrap();
    let o = gph(&["scan", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("2 groups computed, 2 reused"));
    assert_eq!(fs::read_to_string(&out).unwrap(), full);

    let empty = write(
        &dir,
        "empty.toml",
        "[scan]\nkind = \"j1\"\nd = 2\np = 2\nalphas = []\nlambdas = [8, 16, 32]\n",
    );
    assert_eq!(
        code(&gph(&[
            "scan",
            "--config",
            &empty,
            "--out",
            out.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn export_tables() {
    let dir = scratch("export");
    let cfg = write(&dir, "run.toml", SMALL);
    let run = dir.join("run");
    assert_eq!(
        code(&gph(&[
            "simulate",
            "--config",
            &cfg,
            "--out",
            run.to_str().unwrap()
        ])),
        0
    );

    let snap = run.join("snapshots/step000005_k2.gph");
    let csv = dir.join("rho.csv");
    assert_eq!(
        code(&gph(&[
            "export",
            "--input",
            snap.to_str().unwrap(),
            "--out",
            csv.to_str().unwrap()
        ])),
        0
    );
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("x,rho,rho_im"));
    assert_eq!(text.lines().count(), 17);
    let mass: f64 = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum::<f64>()
        * 0.5;
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");

    let json = dir.join("series.json");
    let series = run.join("series.csv");
    let o = gph(&[
        "export",
        "--input",
        series.to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert!(v.as_array().is_some());
}
