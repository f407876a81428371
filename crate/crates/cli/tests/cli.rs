use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mambacsr::pipeline::pnm::{read_pgm_file, read_ppm_file};
use mambacsr::pipeline::{bicubic_resize, write_ppm};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mambacsr")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(format!("{name}.ppm"))
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn raster_dump() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.csv");
    let pgm = dir.path().join("t.pgm");
    let o = run(&["traj", "--height", "2", "--width", "2", "--mode", "hseq", "--out", arg(&out), "--pgm", arg(&pgm)]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    let flat: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(flat, ["0", "1", "2", "3"]);
    assert_eq!(read_pgm_file(&pgm).unwrap().data(), &[0, 85, 170, 255]);
}

#[test]
fn cross_dump_tags_planes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c.csv");
    assert!(run(&["traj", "--height=4", "--width=4", "--mode=cross", "--out", arg(&out)]).status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows.iter().filter(|r| r.ends_with("down")).count(), 4);
    assert!(rows.iter().step_by(5).all(|r| r.ends_with("down")));
}

#[test]
fn bad_arguments_exit_with_usage() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    let o = run(&["traj", "--height", "2", "--width", "2", "--mode", "zigzag", "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = run(&["traj", "--height", "2", "--width", "2", "--mode", "hseq", "--out", arg(&out), "--colour", "red"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["traj", "--height", "3", "--width", "4", "--mode", "cross", "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn gradcheck_scopes() {
    let o = run(&["gradcheck", "--scope", "ops"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = run(&["gradcheck", "--scope", "scan", "--seed", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().all(|l| l.starts_with("scan") || l.contains("targets")));
    let o = run(&["gradcheck", "--scope", "ops", "--eps", "1e-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    let t0 = std::time::Instant::now();
    let o = run(&["gradcheck", "--scope", "model"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(t0.elapsed().as_secs() < 60);
}

#[test]
fn metrics_of_identical_files() {
    let f = fixture("tiles");
    let o = run(&["metrics", "--ref", arg(&f), "--test", arg(&f)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "psnr 100.00\nssim 1.0000\n");
}

#[test]
fn flops_report_ratio() {
    for mode in ["dis", "4dir"] {
        let o = run(&["flops", "--mode", mode, "--height", "32", "--width", "32"]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("scan ratio dis/4dir 0.500"), "{}", stdout(&o));
    }
}

#[test]
fn degrade_then_failures_leave_no_files() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("lr.ppm");
    assert!(run(&["degrade", "--in", arg(&fixture("discs")), "--out", arg(&out), "--qf", "20"]).status.success());
    let lr = read_ppm_file(&out).unwrap();
    assert_eq!((lr.height(), lr.width()), (32, 32));

    let bad = dir.path().join("bad.ppm");
    let o = run(&["degrade", "--in", arg(&fixture("discs")), "--out", arg(&bad), "--qf", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["degrade", "--in", arg(&dir.path().join("missing.ppm")), "--out", arg(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
    std::fs::write(dir.path().join("junk.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let o = run(&["degrade", "--in", arg(&dir.path().join("junk.ppm")), "--out", arg(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!bad.exists());
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 2);
}

#[test]
fn train_then_restore() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, "channels = 4\ngroups = 1\nblocks_per_group = 2\nd_state = 2\nwindow = 4 # small\n").unwrap();
    let hr = bicubic_resize(&read_ppm_file(fixture("rings")).unwrap(), 32, 32).unwrap();
    let hr_path = dir.path().join("hr.ppm");
    std::fs::write(&hr_path, write_ppm(&hr)).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("loss.csv");
    let o = run(&[
        "train-toy", "--hr", arg(&hr_path), "--config", arg(&cfg), "--steps", "3", "--out", arg(&ckpt), "--log", arg(&log),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);

    let small = bicubic_resize(&hr, 16, 16).unwrap();
    let input = dir.path().join("in.ppm");
    std::fs::write(&input, write_ppm(&small)).unwrap();
    let out = dir.path().join("sr.ppm");
    let o = run(&["restore", "--model", arg(&ckpt), "--config", arg(&cfg), "--in", arg(&input), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sr = read_ppm_file(&out).unwrap();
    assert_eq!((sr.height(), sr.width()), (64, 64));
    let again = dir.path().join("sr2.ppm");
    run(&["restore", "--model", arg(&ckpt), "--config", arg(&cfg), "--in", arg(&input), "--out", arg(&again)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());

    let o = run(&["restore", "--model", arg(&ckpt), "--in", arg(&input), "--out", arg(&dir.path().join("no.ppm"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn erf_panels_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    for p in [&a, &b] {
        let o = run(&["erf", "--size", "8", "--window", "4", "--out", arg(p)]);
        assert!(o.status.success());
        assert_eq!(stdout(&o).lines().count(), 3);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let g = read_pgm_file(&a).unwrap();
    assert_eq!((g.height(), g.width()), (8, 28));
}

#[test]
fn bench_reports_ratio() {
    let o = run(&["bench-scan", "--len", "512", "--dinner", "8", "--dstate", "4", "--iters", "3"]);
    assert!(matches!(o.status.code(), Some(0 | 1)));
    assert!(stdout(&o).contains("ratio"));
    assert_eq!(run(&["bench-scan", "--len", "0"]).status.code(), Some(1));
}
