//! End-to-end checks of the `convssm` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn convssm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convssm"))
        .args(args)
        .current_dir(dir)
        .env_remove("CSSM_THREADS")
        .output()
        .expect("binary runs")
}

fn records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("every line is JSON"))
        .collect()
}

fn of_kind<'a>(recs: &'a [Value], kind: &str) -> Vec<&'a Value> {
    recs.iter().filter(|r| r["record"] == kind).collect()
}

const TINY: &str = "layers = 1\np = 4\nu = 3\ngrid = 6\nseq_len = 8\ntrain_samples = 8\ntest_samples = 2\n\
                    steps = 6\nbatch = 2\ncontext = 4\nhorizon = 4\neval_every = 3\neval_samples = 2\nwarmup = 2\n";

#[test]
fn verify_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = convssm(&["verify", "--suite", "prop1", "--seed", "7", "--out", "a.ldjson"], dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = convssm(&["verify", "--suite", "prop1", "--seed", "7", "--out", "b.ldjson"], dir.path());
    assert!(b.status.success());
    let (ra, rb) = (records(&dir.path().join("a.ldjson")), records(&dir.path().join("b.ldjson")));
    assert_eq!(ra, rb);
    assert_eq!(of_kind(&ra, "summary")[0]["pass"], true);
    assert_eq!(of_kind(&ra, "equivalence").len(), 3);
}

#[test]
fn verify_all_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    for p in ["f64", "f32"] {
        let o = convssm(&["verify", "--suite", "all", "--precision", p, "--out", "v.ldjson"], dir.path());
        assert!(o.status.success(), "{p}: {}", String::from_utf8_lossy(&o.stderr));
        let recs = records(&dir.path().join("v.ldjson"));
        let checks: Vec<&str> = of_kind(&recs, "equivalence").iter().map(|r| r["check"].as_str().unwrap()).collect();
        for c in ["prop1.scan", "prop1.assoc.diag", "prop3", "gradient", "discretization"] {
            assert!(checks.contains(&c), "{p}: missing {c} in {checks:?}");
        }
    }
}

#[test]
fn injected_fault_exits_nonzero_with_worst_offender() {
    let dir = tempfile::tempdir().unwrap();
    let o = convssm(&["verify", "--suite", "discretization", "--inject-fault", "--out", "f.ldjson"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst offender: discretization"));
    let recs = records(&dir.path().join("f.ldjson"));
    assert_eq!(of_kind(&recs, "summary")[0]["worst"], "discretization");
}

#[test]
fn env_var_overrides_thread_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_convssm"))
        .args(["--threads", "2", "verify", "--suite", "discretization", "--out", "t.ldjson"])
        .current_dir(dir.path())
        .env("CSSM_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(of_kind(&records(&dir.path().join("t.ldjson")), "config")[0]["threads"], 3);
    let bad = Command::new(env!("CARGO_BIN_EXE_convssm"))
        .args(["info"])
        .env("CSSM_THREADS", "lots")
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn bench_writes_ldjson_and_csv_twin() {
    let dir = tempfile::tempdir().unwrap();
    let o = convssm(
        &[
            "--threads", "1", "bench", "--method", "convs5-par,convs5-seq,convrnn", "--L", "4,8", "--P", "4", "--grid", "4",
            "--U", "2", "--thread-grid", "1,2", "--out", "b.ldjson",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = records(&dir.path().join("b.ldjson"));
    let config = &of_kind(&recs, "config")[0]["config"];
    let rows = of_kind(&recs, "row");
    assert_eq!(rows.len(), 3 * 2 * 2);
    for r in &rows {
        assert!(r["wall_ms"].as_f64().unwrap() > 0.0);
        // every row's parameters appear in the config echo
        assert!(config["lengths"].as_array().unwrap().contains(&r["L"]));
        assert!(config["p"].as_array().unwrap().contains(&r["P"]));
        assert!(config["threads"].as_array().unwrap().contains(&r["threads"]));
        if r["method"] == "convrnn" {
            assert_eq!(r["span"], r["L"]);
        }
    }
    assert_eq!(of_kind(&recs, "fit").len(), 6);
    assert_eq!(of_kind(&recs, "speedup").len(), 3);
    assert_eq!(of_kind(&recs, "environment")[0]["precision"], "f32");
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "method,L,P,H,W,threads,wall_ms,operator_invocations,span,repeats,pass");
    assert_eq!(lines.count(), rows.len());
}

#[test]
fn bench_rejects_unknown_method() {
    let dir = tempfile::tempdir().unwrap();
    let o = convssm(&["bench", "--method", "convlstm", "--out", "x.ldjson"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn train_resume_rollout_and_info() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();

    // uninterrupted run
    let o = convssm(&["--threads", "1", "train", "--config", "tiny.cfg", "--precision", "f64", "--checkpoint", "full.cssm", "--log", "full.ldjson"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = records(&d.join("full.ldjson"));
    assert_eq!(of_kind(&log, "eval").len(), 2);
    let summary = of_kind(&log, "summary")[0];
    assert_eq!(summary["steps_run"], 6);
    // the log alone describes the run
    assert_eq!(of_kind(&log, "config")[0]["config"]["p"], "4");

    // a budget that expires after the first step, then resume to the end
    let o = convssm(
        &["--threads", "1", "train", "--config", "tiny.cfg", "--precision", "f64", "--set", "time_budget_s=1e-9", "--checkpoint", "half.cssm", "--log", "half.ldjson"],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = convssm(
        &["--threads", "1", "train", "--config", "tiny.cfg", "--precision", "f64", "--resume", "half.cssm", "--checkpoint", "resumed.cssm", "--log", "resumed.ldjson"],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // rollout: horizon 0 echoes the context, and runs are deterministic
    let o = convssm(&["--threads", "1", "rollout", "--checkpoint", "full.cssm", "--context", "4", "--horizon", "0", "--out", "r0.cssm", "--report", "r0.ldjson"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c = convssm::container::Container::load(d.join("r0.cssm")).unwrap();
    assert_eq!(c.get("rollout.generated").unwrap().dims[0], 0);
    assert_eq!(c.get("rollout.context").unwrap().dims, vec![4, 1, 6, 6, 1]);
    assert!(of_kind(&records(&d.join("r0.ldjson")), "step").is_empty());

    for name in ["r1", "r2"] {
        let o = convssm(
            &["rollout", "--checkpoint", "full.cssm", "--context", "4", "--horizon", "6", "--out", &format!("{name}.cssm"), "--report", &format!("{name}.ldjson")],
            d,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (std::fs::read(d.join("r1.cssm")).unwrap(), std::fs::read(d.join("r2.cssm")).unwrap());
    assert_eq!(a, b);
    let steps = of_kind(&records(&d.join("r1.ldjson")), "step").into_iter().cloned().collect::<Vec<_>>();
    assert_eq!(steps.len(), 6);
    // the test sequences hold 8 frames: 4 context + 4 with truth
    assert!(steps[3]["psnr"].is_number() && steps[4]["psnr"].is_null());

    let o = convssm(&["info", "full.cssm"], d);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("adam.m") && text.contains("checkpoint: convs5 at step 6"), "{text}");
}

#[test]
fn resumed_training_matches_uninterrupted_bitwise() {
    use convssm::container::Container;
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let run = |extra: &[&str], ck: &str| {
        let mut args = vec!["--threads", "1", "train", "--config", "tiny.cfg", "--precision", "f64", "--checkpoint", ck, "--log", "log.ldjson"];
        args.extend_from_slice(extra);
        let o = convssm(&args, d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&[], "full.cssm");
    // a run interrupted after step 3, checkpointed like an eval interval would
    let cfg = convssm::train::TrainConfig::parse(&format!("{TINY}precision = f64\n")).unwrap();
    let data = cfg.data.generate().unwrap();
    let opts = convssm::scan::ScanOptions { workers: 1, ..Default::default() };
    let mut t = convssm::train::Trainer::new(cfg.clone(), convssm::train::build_convs5::<f64>(&cfg).unwrap(), opts);
    let adam = cfg.adam();
    for _ in 0..3 {
        t.step(&data, &adam).unwrap();
    }
    t.checkpoint().save(d.join("step3.cssm")).unwrap();
    run(&["--resume", "step3.cssm"], "resumed.cssm");
    let (full, resumed) = (Container::load(d.join("full.cssm")).unwrap(), Container::load(d.join("resumed.cssm")).unwrap());
    assert_eq!(full, resumed);
}

#[test]
fn info_describes_defaults() {
    let o = convssm(&["info"], Path::new("."));
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("CSSM_THREADS") && text.contains("steps = 2000") && text.contains("matched ConvRNN"), "{text}");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "layers = two\n").unwrap();
    let o = convssm(&["train", "--config", "bad.cfg"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("layers"));
}
