//! End-to-end tests of the command-line surface, driving the built binary
//! over a temporary workspace.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fasterase::config::RunConfig;
use fasterase::synthgen::read_corpus;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fasterase")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("the binary should be runnable")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (code {:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process should exit normally")
}

/// Bytes of a 32×32 corpus record: seed, two u16 dimensions, two RGB f32
/// planes, two bit-packed masks.
const RECORD_BYTES: u64 = 8 + 2 + 2 + 2 * (3 * 32 * 32 * 4) + 2 * (32 * 32 / 8);
const HEADER_BYTES: u64 = 4 + 4;

#[test]
fn gen_data_writes_a_deterministic_exactly_sized_corpus() {
    let dir = tempfile::TempDir::new().unwrap();
    let c1 = dir.path().join("c1.fcs");
    let c2 = dir.path().join("c2.fcs");
    let args = ["gen-data", "--seed", "7", "--count", "512"];
    assert_ok(&run(&[&args[..], &["--out", c1.to_str().unwrap()]].concat()), "gen-data");
    assert_ok(&run(&[&args[..], &["--out", c2.to_str().unwrap()]].concat()), "gen-data again");

    let b1 = fs::read(&c1).unwrap();
    let b2 = fs::read(&c2).unwrap();
    assert_eq!(b1, b2, "identical flags must produce identical corpus files");
    assert_eq!(b1.len() as u64, HEADER_BYTES + 512 * RECORD_BYTES);
}

#[test]
fn gen_data_accepts_a_zero_count() {
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("empty.fcs");
    assert_ok(
        &run(&["gen-data", "--count", "0", "--out", path.to_str().unwrap()]),
        "gen-data --count 0",
    );
    assert_eq!(fs::metadata(&path).unwrap().len(), HEADER_BYTES);
    assert!(read_corpus(&path).unwrap().is_empty());
}

#[test]
fn usage_errors_exit_with_the_config_code() {
    assert_eq!(code(&run(&["infer", "--bogus-flag"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn missing_config_file_is_a_config_error() {
    assert_eq!(code(&run(&["train-teacher", "--config", "/nonexistent/cfg.txt"])), 2);
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_path = dir.path().join("cfg.txt");
    cfg.write(&cfg_path).unwrap();
    assert_eq!(code(&run(&["train-teacher", "--config", cfg_path.to_str().unwrap()])), 3);
}

#[test]
fn report_on_an_empty_directory_prints_no_runs() {
    let dir = tempfile::TempDir::new().unwrap();
    let out = run(&["report", dir.path().to_str().unwrap()]);
    assert_ok(&out, "report");
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "no runs");
}

/// A deliberately small but complete run: 24 scenes, a few iterations of
/// each phase, two evaluation scenes.
fn tiny_config(_base: &Path) -> RunConfig {
    RunConfig {
        corpus: "corpus.fcs".to_string(),
        out_dir: "run".to_string(),
        teacher_ckpt: "run/teacher.ckpt".to_string(),
        student_ckpt: "run/student.ckpt".to_string(),
        seed: 3,
        teacher_iters: 4,
        teacher_batch: 2,
        distill_iters: 3,
        distill_batch: 2,
        holdout: 8,
        infer_count: 2,
        ..RunConfig::default()
    }
}

fn write_cfg(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    cfg.write(&path).unwrap();
    path
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

/// Final `summary` record's trailing field: the run's total arithmetic
/// cost.
fn flops_total(log: &Path) -> u64 {
    let all = lines(log);
    let summary = all
        .iter()
        .find(|l| l.starts_with("summary\t"))
        .unwrap_or_else(|| panic!("{} has no summary", log.display()));
    summary.split('\t').last().unwrap().parse().unwrap()
}

#[test]
fn pipeline_trains_infers_and_reports() {
    let tmp = tempfile::TempDir::new().unwrap();
    let dir = tmp.path();
    let corpus = dir.join("corpus.fcs");
    assert_ok(
        &run(&["gen-data", "--seed", "1", "--count", "24", "--out", corpus.to_str().unwrap()]),
        "gen-data",
    );

    // --- teacher training, in two chunks vs. in one -----------------
    let cfg4 = write_cfg(dir, "cfg4.txt", &tiny_config(dir));
    assert_ok(&run(&["train-teacher", "--config", cfg4.to_str().unwrap()]), "train-teacher");
    let teacher_log = dir.join("run/teacher.log.tsv");
    assert_eq!(lines(&teacher_log).len(), 1 + 4, "header plus one record per iteration");

    let mut eight = tiny_config(dir);
    eight.teacher_iters = 8;
    let cfg8 = write_cfg(dir, "cfg8.txt", &eight);
    assert_ok(&run(&["train-teacher", "--config", cfg8.to_str().unwrap()]), "teacher resume");

    let fresh = tempfile::TempDir::new().unwrap();
    fs::copy(&corpus, fresh.path().join("corpus.fcs")).unwrap();
    let fresh_cfg8 = write_cfg(fresh.path(), "cfg8.txt", &eight);
    assert_ok(
        &run(&["train-teacher", "--config", fresh_cfg8.to_str().unwrap()]),
        "uninterrupted teacher",
    );
    assert_eq!(
        fs::read(dir.join("run/teacher.ckpt")).unwrap(),
        fs::read(fresh.path().join("run/teacher.ckpt")).unwrap(),
        "resumed training must equal the uninterrupted run bit-exactly"
    );
    assert_eq!(
        fs::read(&teacher_log).unwrap(),
        fs::read(fresh.path().join("run/teacher.log.tsv")).unwrap(),
        "resumed logs must concatenate to the uninterrupted log"
    );

    // --- distillation, with the same resume contract ----------------
    assert_ok(&run(&["distill", "--config", cfg8.to_str().unwrap()]), "distill");
    let distill_lines = lines(&dir.join("run/distill.log.tsv"));
    assert_eq!(
        distill_lines[1], "weights\t1.0\t5.0\t0.5\t0.01",
        "objective weights must be recorded verbatim"
    );
    assert_eq!(distill_lines.len(), 2 + 3);

    let mut six = eight.clone();
    six.distill_iters = 6;
    let cfg6 = write_cfg(dir, "cfg6.txt", &six);
    assert_ok(&run(&["distill", "--config", cfg6.to_str().unwrap()]), "distill resume");
    let fresh_cfg6 = write_cfg(fresh.path(), "cfg6.txt", &six);
    assert_ok(&run(&["distill", "--config", fresh_cfg6.to_str().unwrap()]), "fresh distill");
    assert_eq!(
        fs::read(dir.join("run/student.ckpt")).unwrap(),
        fs::read(fresh.path().join("run/student.ckpt")).unwrap(),
        "resumed distillation must equal the uninterrupted run bit-exactly"
    );

    let cfg = cfg6.to_str().unwrap();

    // --- caching with no cached layers is the plain sampler ---------
    let mut empty_cache = six.clone();
    empty_cache.cache.layers = Vec::new();
    let cfg_empty = write_cfg(dir, "cfg_empty.txt", &empty_cache);
    let ec = cfg_empty.to_str().unwrap();
    assert_ok(&run(&["infer", "--config", ec, "--cache", "on", "--steps", "5"]), "empty-cache on");
    assert_ok(&run(&["infer", "--config", ec, "--cache", "off", "--steps", "5"]), "plain off");
    let on5 = lines(&dir.join("run/infer-student-on-5.log.tsv"));
    let off5 = lines(&dir.join("run/infer-student-off-5.log.tsv"));
    assert_eq!(on5[1..], off5[1..], "records must agree except the run header");
    for scene_png in fs::read_dir(dir.join("run/images/student-on-5")).unwrap() {
        let on_path = scene_png.unwrap().path();
        let off_path =
            dir.join("run/images/student-off-5").join(on_path.file_name().unwrap());
        assert_eq!(
            fs::read(&on_path).unwrap(),
            fs::read(&off_path).unwrap(),
            "outputs must be bitwise equal with an empty cached-layer list"
        );
    }

    // --- the full flag matrix the report aggregates ------------------
    assert_ok(
        &run(&["infer", "--config", cfg, "--cache", "on", "--dump-maps"]),
        "cached infer",
    );
    assert_ok(&run(&["infer", "--config", cfg, "--cache", "off"]), "plain infer");
    assert_ok(&run(&["infer", "--config", cfg, "--cache", "off", "--steps", "20"]), "20 steps");
    assert_ok(&run(&["infer", "--config", cfg, "--cache", "off", "--steps", "2"]), "2 steps");

    let t20 = flops_total(&dir.join("run/infer-student-off-20.log.tsv"));
    let t4 = flops_total(&dir.join("run/infer-student-off-4.log.tsv"));
    let t2 = flops_total(&dir.join("run/infer-student-off-2.log.tsv"));
    assert_eq!(t20, 5 * t4, "20-step cost must be exactly five 4-step costs");
    assert_eq!(2 * t2, t4, "2-step cost must be exactly half the 4-step cost");

    let t4_cached = flops_total(&dir.join("run/infer-student-on-4.log.tsv"));
    assert!(t4_cached < t4, "caching must reduce the arithmetic cost");

    // --- report ------------------------------------------------------
    let run_dir = dir.join("run");
    let rep = run(&["report", run_dir.to_str().unwrap()]);
    assert_ok(&rep, "report");
    let stdout = String::from_utf8(rep.stdout).unwrap();
    assert_eq!(
        stdout,
        fs::read_to_string(run_dir.join("report.txt")).unwrap(),
        "report.txt must hold exactly the printed table"
    );
    assert!(stdout.contains("ratio\tstudent-off-20\tover\tstudent-off-4\t5.00"), "{stdout}");
    assert!(stdout.contains("ratio\tstudent-off-2\tover\tstudent-off-4\t0.50"), "{stdout}");
    assert!(stdout.contains("\texact"), "savings identity rows must be verified:\n{stdout}");
    assert!(stdout.contains("fraction\tstudent-on-4\t"), "{stdout}");
    let kv = fs::read_to_string(run_dir.join("report.kv")).unwrap();
    assert!(kv.contains("ratio.student-off-20.over.student-off-4 = 5.00"), "{kv}");
    let maps: Vec<_> = fs::read_dir(run_dir.join("maps/student-on-4"))
        .expect("map images rendered")
        .collect();
    assert_eq!(maps.len(), 4 * 5, "one image per (step, attention site)");

    // --- identical configs give identical aggregate rows -------------
    assert_ok(
        &run(&["infer", "--config", fresh_cfg6.to_str().unwrap(), "--cache", "on"]),
        "fresh cached infer",
    );
    let fresh_rep = run(&["report", fresh.path().join("run").to_str().unwrap()]);
    assert_ok(&fresh_rep, "fresh report");
    let fresh_stdout = String::from_utf8(fresh_rep.stdout).unwrap();
    let row = |text: &str| -> String {
        text.lines()
            .find(|l| l.starts_with("run\tstudent-on-4\t"))
            .expect("aggregate row present")
            .to_string()
    };
    assert_eq!(row(&stdout), row(&fresh_stdout), "identical configs, identical rows");
}
