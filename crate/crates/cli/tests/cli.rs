use std::path::Path;
use std::process::{Command, Output};

fn vaebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaebench")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vaebench(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn missing_config_names_the_path() {
    let out = vaebench(&["train", "--config", "/no/such/run.cfg", "--data", "d.toyd", "--out", "o"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/run.cfg"));
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "method=beta_vae\nlearning_rate=0.1\n").unwrap();
    let out = vaebench(&["pretrain", "--config", p(&cfg), "--data", "d.toyd", "--out", "o"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("lambda_od") && err.contains("seed_eval"), "{err}");
}

#[test]
fn missing_dataset_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("absent.toyd");
    let out = vaebench(&["pretrain", "--image-size", "16", "--data", p(&data), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toyd"));
}

#[test]
fn short_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nimage_size=16\nlatent_size=4\nbatch_size=16\npretrain_iters=20\nmax_iters=6\neval_interval=3\neval_size=256\n",
    )
    .unwrap();
    let data = root.join("data.toyd");
    ok(&["generate-data", "--config", p(&cfg), "--out", p(&data)]);
    assert!(std::fs::read(&data).unwrap().len() > 3072 * 3 * 16 * 16);

    let pre = root.join("pre");
    ok(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&pre)]);
    let ckpt = pre.join("pretrained.ckpt");
    assert!(ckpt.is_file());

    let run = root.join("run");
    ok(&[
        "train", "--config", p(&cfg), "--method", "beta_tcvae", "--data", p(&data), "--init", p(&ckpt), "--out", p(&run),
    ]);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iter,total,recon,kl,capacity,penalty,lr\n"));
    assert_eq!(log.lines().count(), 7);
    let evals = std::fs::read_to_string(run.join("eval_log.csv")).unwrap();
    let iters: Vec<&str> = evals.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["3", "6"]);
    assert!(std::fs::read_to_string(run.join("config.cfg")).unwrap().contains("method=beta_tcvae"));

    let ev = root.join("eval");
    let final_ckpt = run.join("checkpoint.ckpt");
    ok(&["evaluate", "--config", p(&cfg), "--method", "beta_tcvae", "--data", p(&data), "--checkpoint", p(&final_ckpt), "--out", p(&ev)]);
    assert_eq!(std::fs::read(ev.join("metrics.csv")).unwrap(), std::fs::read(run.join("metrics.csv")).unwrap());

    let tr = root.join("trav");
    let msg = ok(&["traverse", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&final_ckpt), "--out", p(&tr)]);
    assert!(msg.contains("traversal") || msg.contains("warning"), "{msg}");

    let rep = root.join("rep");
    let text = ok(&["report", "--in", p(&run.join("metrics.csv")), p(&ev.join("metrics.csv")), "--out", p(&rep)]);
    assert!(text.contains("Normalized Sum") && text.contains("beta-TCVAE"));
    let csv = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn report_rejects_inconsistent_columns() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "method,dci,factorvae,sap,mig,irs\nx,0.1,0.2,0.3,0.4,0.5\n").unwrap();
    std::fs::write(&b, "method,dci,factorvae,sap,mig\ny,0.1,0.2,0.3,0.4\n").unwrap();
    let out = vaebench(&["report", "--in", p(&a), p(&b)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
    let single = ok(&["report", "--in", p(&a)]);
    assert!(single.contains("5.000"));
}
