use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmc_core::Tensor;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

fn gmc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmc")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn run(args: &[&str]) -> Output {
    gmc(args, Path::new(env!("CARGO_MANIFEST_DIR")))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn flops_table_shows_reference_values() {
    let cfg = config("clevr_table4");
    let o = run(&["flops", "--config", cfg.to_str().unwrap(), "--k", "6,12"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("5.37E+07") && out.contains("3.21E+07"), "{out}");
    assert!(out.contains("(exact for the listed k)"), "{out}");
    let rows: Vec<&str> = out.lines().filter(|l| l.trim_start().starts_with("6 ") || l.trim_start().starts_with("12 ")).collect();
    assert_eq!(rows.len(), 2);
    // stable output for golden comparisons
    let again = run(&["flops", "--config", cfg.to_str().unwrap(), "--k", "6,12"]);
    assert_eq!(stdout(&again), out);
}

#[test]
fn flops_rejects_k_above_cardinality() {
    let o = run(&["flops", "--config", config("clevr_table4").to_str().unwrap(), "--k", "13"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("k exceeds cardinality"), "{}", stderr(&o));
    let o = run(&["flops", "--config", config("clevr_table4").to_str().unwrap(), "--k", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn flops_csv_and_input_override() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("layers.csv");
    let o = run(&[
        "flops",
        "--config",
        config("vqa_table3_narrow").to_str().unwrap(),
        "--k",
        "8,16",
        "--input",
        "112x112",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("config vqa_table3_narrow, input 112x112"));
    for k in [8, 16] {
        let text = std::fs::read_to_string(dir.path().join(format!("layers-k{k}.csv"))).unwrap();
        assert_eq!(text.lines().next(), Some("layer,kind,conv_macs,aux_ops"));
        assert!(text.lines().count() > 10);
    }
    let o = run(&["flops", "--config", config("toy_small").to_str().unwrap(), "--input", "0x3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_in_both_precisions() {
    let cfg = config("toy_small");
    let o = run(&["verify", "--config", cfg.to_str().unwrap(), "--trials", "200", "--seed", "0", "--dtype", "f64"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("max forward deviation")).unwrap();
    let dev: f64 = line.split_whitespace().nth(3).unwrap().trim_end_matches(',').parse().unwrap();
    assert!(dev <= 1e-10, "{line}");
    let o = run(&["verify", "--config", cfg.to_str().unwrap(), "--trials", "50", "--dtype", "f32"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn verify_catches_injected_fault() {
    let o = run(&["verify", "--config", config("toy_small").to_str().unwrap(), "--trials", "10", "--seed", "3", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("worst trial seed") && out.contains("FAIL"), "{out}");
}

#[test]
fn usage_errors_exit_two() {
    let cfg = config("toy_small");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&run(&["verify", "--config", cfg, "--trials", "0"])), 2);
    assert_eq!(code(&run(&["verify", "--config", cfg, "--frobnicate"])), 2);
    assert_eq!(code(&run(&["verify", "--config", "does/not/exist.json"])), 2);
    assert_eq!(code(&run(&["verify", "--config", cfg, "--dtype", "f16"])), 2);
    assert_eq!(code(&run(&["gradcheck", "--dtype", "f32"])), 2);
    assert_eq!(code(&run(&["nonsense"])), 2);
    assert_eq!(code(&run(&["eval"])), 2);
}

#[test]
fn gradcheck_reports_worst_error() {
    let o = run(&["gradcheck", "--all", "--dtype", "f64"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("worst relative error")).unwrap();
    let err: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err <= 1e-4, "{line}");
    assert!(out.lines().count() >= 15);
}

#[test]
fn training_is_reproducible_and_checkpoints_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("toy_small");
    let args = |trace: &str, ckpt: &str| {
        vec![
            "train".to_string(),
            "--config".into(),
            cfg.to_str().unwrap().into(),
            "--steps".into(),
            "60".into(),
            "--seed".into(),
            "7".into(),
            "--n-train".into(),
            "512".into(),
            "--n-val".into(),
            "128".into(),
            "--trace".into(),
            trace.into(),
            "--checkpoint".into(),
            ckpt.into(),
        ]
    };
    let a: Vec<String> = args("a.csv", "ck_a");
    let b: Vec<String> = args("b.csv", "ck_b");
    let oa = gmc(&a.iter().map(String::as_str).collect::<Vec<_>>(), dir.path());
    let ob = gmc(&b.iter().map(String::as_str).collect::<Vec<_>>(), dir.path());
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert_eq!(code(&ob), 0, "{}", stderr(&ob));
    let ta = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(ta, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("ck_a/params.bin")).unwrap(),
        std::fs::read(dir.path().join("ck_b/params.bin")).unwrap()
    );
    let header = String::from_utf8(ta).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("step,loss,task_loss,balance_loss,acc,stage1.block0:importance[0]"), "{header}");
    assert_eq!(String::from_utf8(std::fs::read(dir.path().join("a.csv")).unwrap()).unwrap().lines().count(), 61);

    let o = gmc(
        &["eval", "--checkpoint", "ck_a", "--seed", "7", "--n-train", "512", "--samples", "128", "--dump", "logits.bin"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let val_train = stdout(&oa).lines().find(|l| l.starts_with("validation accuracy")).unwrap().split_whitespace().nth(2).unwrap().to_string();
    let val_eval = out.split_whitespace().nth(1).unwrap().to_string();
    assert_eq!(val_train, val_eval, "{out}");
    let usage_line = out.lines().find(|l| l.starts_with("stage1.block0:")).unwrap();
    let used: u64 = usage_line.rsplit("usage ").next().unwrap().split_whitespace().map(|v| v.parse::<u64>().unwrap()).sum();
    assert_eq!(used, 2 * 128);
    let bytes = std::fs::read(dir.path().join("logits.bin")).unwrap();
    let logits = Tensor::<f64>::read_dump(&mut bytes.as_slice()).unwrap();
    assert_eq!(logits.shape(), &[128, 4]);

    let o = gmc(&["inspect-gates", "--checkpoint", "ck_a", "--samples", "20", "--out", "gates.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("gates.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "block_id,sample_id,k,fallback_used,g0,g1,g2,g3,g4,g5,g6,g7,selected");
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let sum: f64 = f[4..12].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-6, "{line}");
        assert_eq!(f[12].split(';').count(), 2);
        rows += 1;
    }
    assert_eq!(rows, 20);
}

#[test]
fn train_rejects_incompatible_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = gmc(&["train", "--config", config("clevr_table4").to_str().unwrap(), "--steps", "1"], dir.path());
    assert_eq!(code(&o), 2);
    let o = gmc(&["train", "--config", config("toy_small").to_str().unwrap(), "--steps", "1", "--batch", "1"], dir.path());
    assert_eq!(code(&o), 2);
}
