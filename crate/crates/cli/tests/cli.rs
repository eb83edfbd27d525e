use std::path::Path;
use std::process::{Command, Output};

fn lbt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap_or_else(|| panic!("no {key} in {text}"))
}

#[test]
fn bitwidth_golden_values() {
    let o = lbt(&["bitwidth", "--classes", "1000", "--alpha", "0.125"]);
    assert!(o.status.success());
    assert_eq!(value(&stdout(&o), "required_bits"), "14");
    let o = lbt(&["bitwidth", "--classes", "10"]);
    let out = stdout(&o);
    assert_eq!(value(&out, "required_bits"), "6");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[1], "bits,feasible");
    assert_eq!(lines.len(), 2 + 15);
    assert_eq!(lines[2], "2,false");
    assert_eq!(lines[6], "6,true");
}

#[test]
fn bitwidth_rejects_bad_alpha() {
    let o = lbt(&["bitwidth", "--classes", "10", "--alpha", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn unknown_flag_prints_usage() {
    let o = lbt(&["bitwidth", "--classes", "10", "--colour", "red"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(lbt(&[]).status.code(), Some(2));
}

#[test]
fn analyze_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = lbt(&["analyze", "--classes", "10,100", "--bits", "4,8", "--samples", "50", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv, stdout(&o));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "classes,bits,zeroed_fraction,bias");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("10,4,"));
    assert!(lines[4].starts_with("100,8,"));
    let again = lbt(&["analyze", "--classes", "10,100", "--bits", "4,8", "--samples", "50", "--out", out.to_str().unwrap()]);
    assert_eq!(stdout(&again), csv);
}

#[test]
fn train_missing_config_names_path() {
    let o = lbt(&["train", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.cfg"));
}

#[test]
fn train_bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "data = blobs\nlayers = fc(10)\n").unwrap();
    let o = lbt(&["train", "--config", cfg.to_str().unwrap(), "--override", "colour=red"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn train_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "data = blobs\nblobs_spread = 50\nlayers = fc(16) relu fc(10)\nlearning_rate = 1e30\n").unwrap();
    let o = lbt(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("non-finite loss at step"));
}

fn write_blobs(dir: &Path) {
    let o = lbt(&["gen-data", "--out", dir.to_str().unwrap(), "--classes", "4", "--per-class", "50", "--test-per-class", "25", "--dim", "6", "--spread", "8", "--gzip"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "train"), "200");
    assert_eq!(value(&stdout(&o), "test"), "100");
}

#[test]
fn gen_data_train_eval_inspect_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs");
    write_blobs(&data);
    assert!(data.join("train-images.idx.gz").exists() && data.join("test-labels.idx.gz").exists());

    let out = dir.path().join("run");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# quantized lazy momentum on blobs\nmode = quantized\nbits = 8\nlazy = true\noptimizer = momentum\n\
             layers = fc(16) relu fc(4)\nepochs = 2\nbatch_size = 20\nlearning_rate = 0.05\ndata = {}\nout_dir = {}\n",
            data.display(),
            out.display()
        ),
    )
    .unwrap();
    let o = lbt(&["train", "--config", cfg.to_str().unwrap(), "--override", "max_steps=13"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "stopped_early"), "true");
    let o = lbt(&["train", "--resume", out.join("final.ckpt").to_str().unwrap(), "--override", "max_steps=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let final_acc = value(&stdout(&o), "final_accuracy").to_string();
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().skip(1).filter(|l| l.contains(",epoch,")).count(), 2);

    let o = lbt(&["eval", "--checkpoint", out.join("final.ckpt").to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = stdout(&o);
    let acc = value(&printed, "accuracy");
    assert_eq!(acc.len(), "0.xxxxxx".len());
    assert_eq!(acc, final_acc);
    let acc: f64 = acc.parse().unwrap();
    assert!(acc > 0.9, "{acc}");

    let o = lbt(&["inspect-checkpoint", out.join("final.ckpt").to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("version = 1\ninput_shape = [6]\nstep = 20\n"), "{text}");
    assert!(text.contains("  weight 0: codes [16, 6] bits 8"), "{text}");
    assert!(text.contains("  lazy = true"), "{text}");
}

#[test]
fn inspect_rejects_non_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    std::fs::write(&p, b"XXXX\x01\0\0\0").unwrap();
    let o = lbt(&["inspect-checkpoint", p.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("bad magic"));
}
