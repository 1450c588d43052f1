use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cgbp"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn scratch(name: &str) -> PathBuf {
    let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&p);
    fs::create_dir_all(&p).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().args([cmd, "--config"]).arg(config).arg("--out").arg(out).args(extra).output().unwrap()
}

/// Data rows of a CSV, header line excluded.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    lines.next().expect("column header");
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn columns(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().find(|l| !l.starts_with('#')).unwrap().split(',').map(str::to_string).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let k = columns(path).iter().position(|c| c == name).unwrap();
    rows(path).into_iter().map(|r| r[k].clone()).collect()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn minimal_chain_has_five_rows() {
    let out = scratch("chain_minimal");
    let o = run("chain-bp", &configs().join("chain_minimal.toml"), &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = out.join("chain_bp.csv");
    assert_eq!(rows(&csv).len(), 5);
    assert_eq!(
        columns(&csv),
        ["T", "energy", "sz", "sx", "bp_error_estimate", "jw_exact", "true_error", "converged", "iterations"]
    );
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# schema: chain-bp/1\n# version: "));
    assert!(text.contains("# config_sha256: ") && text.contains("# seed: 0\n"));
    for e in column(&csv, "true_error") {
        assert!(e.parse::<f64>().unwrap() < 2e-4);
    }
}

#[test]
fn minimal_spin_glass_has_one_row_and_two_audit_lines() {
    let out = scratch("spin_glass_minimal");
    let o = run("spin-glass", &configs().join("spin_glass_minimal.toml"), &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(&out.join("spin_glass.csv")).len(), 1);
    let audit = fs::read_to_string(out.join("instances.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = audit.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, v) in lines.iter().enumerate() {
        assert_eq!(v["index"], i as u64);
        assert_eq!(v["fields_sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = scratch("unknown_key");
    let text = fs::read_to_string(configs().join("chain_minimal.toml")).unwrap().replace("l = 4", "l = 4\ntoll = 1e-3");
    let cfg = dir.join("typo.toml");
    fs::write(&cfg, text).unwrap();
    let o = run("chain-bp", &cfg, &dir.join("out"), &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("toll"));
    assert!(!dir.join("out").exists());
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = scratch("invalid_values");
    let base = fs::read_to_string(configs().join("chain_minimal.toml")).unwrap();
    for (i, bad) in [base.replace("l = 4", "l = 1"), base.replace("0.5]", "-0.5]"), base.replace("b = 1.0", "b = \"one\"")]
        .iter()
        .enumerate()
    {
        let cfg = dir.join(format!("bad{i}.toml"));
        fs::write(&cfg, bad).unwrap();
        assert_eq!(code(&run("chain-bp", &cfg, &dir.join("out"), &[])), 1, "case {i}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&bin().output().unwrap()), 1);
    assert_eq!(code(&bin().args(["chain-bp", "--out", "x"]).output().unwrap()), 1);
    assert_eq!(code(&bin().arg("--help").output().unwrap()), 0);
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = scratch("missing");
    assert_eq!(code(&run("chain-bp", &dir.join("nope.toml"), &dir, &[])), 3);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = scratch("unwritable");
    let blocker = dir.join("file");
    fs::write(&blocker, "").unwrap();
    let o = run("chain-bp", &configs().join("chain_minimal.toml"), &blocker.join("sub"), &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn unconverged_policy() {
    let dir = scratch("policy");
    let base = "[model]\nb = 1.0\n[bp]\nl = 4\nmax_iter = 1\n[temperatures]\nkind = \"list\"\nvalues = [0.5]\n";
    let flag = dir.join("flag.toml");
    fs::write(&flag, base).unwrap();
    let o = run("chain-bp", &flag, &dir.join("flag"), &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(column(&dir.join("flag/chain_bp.csv"), "converged"), ["false"]);

    let fail = dir.join("fail.toml");
    fs::write(&fail, format!("on_unconverged = \"fail\"\n{base}")).unwrap();
    let o = run("chain-bp", &fail, &dir.join("fail"), &[]);
    assert_eq!(code(&o), 2);
    // The table is still written for inspection.
    assert_eq!(rows(&dir.join("fail/chain_bp.csv")).len(), 1);
}

#[test]
fn zero_levels_reproduce_chain_bp() {
    let dir = scratch("levels0");
    let grid = "[temperatures]\nkind = \"geometric\"\nhi = 10.0\nlo = 0.5\npoints = 12\n";
    let chain = dir.join("chain.toml");
    fs::write(&chain, format!("[model]\nb = 1.0\n[bp]\nl = 4\n{grid}")).unwrap();
    let cg = dir.join("cgbp.toml");
    fs::write(&cg, format!("[model]\nb = 1.0\n[cgbp]\nlevels = 0\nchi = 2\nl = 4\n{grid}")).unwrap();
    assert_eq!(code(&run("chain-bp", &chain, &dir.join("a"), &[])), 0);
    let o = run("cgbp", &cg, &dir.join("b"), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = dir.join("a/chain_bp.csv");
    let b = dir.join("b/stitched.csv");
    assert_eq!(column(&a, "T"), column(&b, "T"));
    assert_eq!(column(&a, "energy"), column(&b, "energy"));
    assert_eq!(column(&a, "bp_error_estimate"), column(&b, "total_error"));
    assert_eq!(column(&a, "true_error"), column(&b, "true_error"));
    let sw: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("b/switches.json")).unwrap()).unwrap();
    assert!(sw["switches"].as_array().unwrap().is_empty());
}

#[test]
fn worker_count_does_not_change_output() {
    let cfg = configs().join("spin_glass_minimal.toml");
    let one = scratch("workers1");
    let three = scratch("workers3");
    assert_eq!(code(&run("spin-glass", &cfg, &one, &["--workers", "1"])), 0);
    assert_eq!(code(&run("spin-glass", &cfg, &three, &["--workers", "3"])), 0);
    for f in ["spin_glass.csv", "instances.jsonl"] {
        assert_eq!(fs::read(one.join(f)).unwrap(), fs::read(three.join(f)).unwrap(), "{f}");
    }
    assert_eq!(code(&run("spin-glass", &cfg, &scratch("workers0"), &["--workers", "0"])), 1);
}

#[test]
fn seed_flag_overrides_config() {
    let cfg = configs().join("spin_glass_minimal.toml");
    let a = scratch("seed_default");
    let b = scratch("seed_flag");
    assert_eq!(code(&run("spin-glass", &cfg, &a, &[])), 0);
    assert_eq!(code(&run("spin-glass", &cfg, &b, &["--seed", "99"])), 0);
    assert!(fs::read_to_string(a.join("spin_glass.csv")).unwrap().contains("# seed: 1\n"));
    assert!(fs::read_to_string(b.join("spin_glass.csv")).unwrap().contains("# seed: 99\n"));
    assert_ne!(fs::read(a.join("instances.jsonl")).unwrap(), fs::read(b.join("instances.jsonl")).unwrap());
}

/// Compares every output file with the copy under `tests/golden/<stem>`.
/// Set `UPDATE_GOLDEN=1` to rewrite the copies after an intended change.
fn check_golden(cmd: &str, config: &str) -> PathBuf {
    let stem = config.trim_end_matches(".toml");
    let out = scratch(&format!("golden_{stem}"));
    let o = run(cmd, &configs().join(config), &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(stem);
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    if update {
        fs::create_dir_all(&golden).unwrap();
    }
    let mut names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        let got = fs::read(out.join(&name)).unwrap();
        let path = golden.join(&name);
        if update {
            fs::write(&path, &got).unwrap();
        } else {
            let want = fs::read(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
            assert!(got == want, "{} differs from its golden copy", path.display());
        }
    }
    out
}

#[test]
fn golden_minimal_chain() {
    check_golden("chain-bp", "chain_minimal.toml");
}

#[test]
fn golden_depth3_spin_glass() {
    check_golden("spin-glass", "spin_glass_depth3.toml");
}

#[test]
fn golden_desk_cgbp_with_frozen_switches() {
    let out = check_golden("cgbp", "cgbp_desk.toml");
    let sw: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("switches.json")).unwrap()).unwrap();
    let temps: Vec<f64> = sw["switches"].as_array().unwrap().iter().map(|s| s["temperature"].as_f64().unwrap()).collect();
    assert_eq!(temps, [0.316227766016838, 0.12589254117941673]);
    assert_eq!(sw["switches"][0]["label"], "T_1");
    for lvl in 0..3 {
        assert_eq!(rows(&out.join(format!("level_{lvl}.csv"))).len(), rows(&out.join("stitched.csv")).len());
    }
}
