use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};

fn dba() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dba"))
}

fn temp_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("dba-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn summary_value(output: &str, key: &str) -> f64 {
    output
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in output:\n{output}"))
        .parse()
        .unwrap()
}

#[test]
fn bench_bsmc_reports_reference_ratio() {
    let out = dba()
        .args(["bench-bsmc", "--n", "10000", "--c", "11", "--alpha", "0.04"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("2.993"), "ratio table:\n{text}");
}

#[test]
fn bench_bsmc_audit_matches_formula() {
    let out = dba()
        .args(["bench-bsmc", "--n", "100", "--c", "9", "--alpha", "0.2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let audit_line = text
        .lines()
        .skip_while(|l| !l.contains("audit of constructed"))
        .find(|l| l.trim_start().starts_with("100"))
        .expect("audit row");
    let fields: Vec<&str> = audit_line.split_whitespace().collect();
    assert_eq!(fields[3], fields[4], "block audit differs from formula: {audit_line}");
    assert_eq!(fields[5], fields[6], "csr audit differs from formula: {audit_line}");
}

#[test]
fn synth_writes_loadable_bal() {
    let dir = temp_dir();
    let path = dir.join("synth.bal");
    let out = dba()
        .args([
            "synth",
            "--spec",
            "images=12,features=40,sigma=0.5,seed=9",
            "--output",
        ])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    let header: Vec<usize> = text
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(header[0], 12);
    assert!(header[2] > 0);
}

#[test]
fn partition_reports_every_group() {
    let dir = temp_dir();
    let path = dir.join("part.bal");
    assert!(dba()
        .args(["synth", "--spec", "images=9,features=30,seed=2", "--output"])
        .arg(&path)
        .status()
        .unwrap()
        .success());
    let out = dba()
        .args(["partition", "--groups", "3", "--input"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("3 groups"));
    for group in ["     0", "     1", "     2"] {
        assert!(text.contains(group), "missing group row in:\n{text}");
    }
}

#[test]
fn serial_and_thread_modes_agree() {
    let dir = temp_dir();
    let path = dir.join("modes.bal");
    assert!(dba()
        .args([
            "synth",
            "--spec",
            "images=25,features=60,sigma=1.0,seed=5",
            "--output",
        ])
        .arg(&path)
        .status()
        .unwrap()
        .success());

    let run = |mode_args: &[&str]| -> f64 {
        let mut cmd = dba();
        cmd.args(["solve", "--max-iters", "8", "--input"])
            .arg(&path)
            .args(mode_args);
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        summary_value(&String::from_utf8(out.stdout).unwrap(), "final_rms_px")
    };
    let serial = run(&["--mode", "serial"]);
    let threads = run(&["--mode", "threads", "--workers", "4"]);
    let rel = (serial - threads).abs() / serial;
    assert!(rel <= 1e-6, "serial {serial} vs threads {threads} ({rel:e})");
}

#[test]
fn socket_workers_serve_a_solve() {
    let dir = temp_dir();
    let path = dir.join("sock.bal");
    assert!(dba()
        .args([
            "synth",
            "--spec",
            "images=16,features=40,sigma=1.0,seed=6",
            "--output",
        ])
        .arg(&path)
        .status()
        .unwrap()
        .success());

    let mut workers = Vec::new();
    let mut endpoints = Vec::new();
    for _ in 0..2 {
        let mut child = dba()
            .args(["worker", "--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let stdout = child.stdout.take().unwrap();
        let line = BufReader::new(stdout).lines().next().unwrap().unwrap();
        let addr = line.strip_prefix("listening on ").unwrap().to_string();
        endpoints.push(addr);
        workers.push(child);
    }

    let out = dba()
        .args(["solve", "--mode", "sockets", "--max-iters", "6", "--input"])
        .arg(&path)
        .args(["--endpoint", &endpoints[0], "--endpoint", &endpoints[1]])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rms = summary_value(&text, "final_rms_px");
    assert!(rms.is_finite() && rms < 2.0);
    assert!(summary_value(&text, "bytes_sub_rcs") > 0.0);
    for mut w in workers {
        assert!(w.wait().unwrap().success());
    }
}

#[test]
fn solve_exports_point_cloud() {
    let dir = temp_dir();
    let bal = dir.join("cloud.bal");
    let ply = dir.join("cloud.ply");
    let report = dir.join("cloud.report");
    assert!(dba()
        .args(["synth", "--spec", "images=9,features=30,seed=8", "--output"])
        .arg(&bal)
        .status()
        .unwrap()
        .success());
    let out = dba()
        .args(["solve", "--max-iters", "3", "--ply-ascii", "--input"])
        .arg(&bal)
        .arg("--export-ply")
        .arg(&ply)
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&ply).unwrap();
    let n: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .unwrap()
        .parse()
        .unwrap();
    let body = text.lines().skip_while(|l| *l != "end_header").skip(1).count();
    assert_eq!(body, n);
    assert!(std::fs::read_to_string(&report)
        .unwrap()
        .contains("termination="));
}
