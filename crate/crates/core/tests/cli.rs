use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n_users = 300\nn_items = 100\nn_cats = 10\nepochs = 1\nbatch_size = 16\n";

fn dien(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dien"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.conf");
    fs::write(&path, SMALL).unwrap();
    p(&path).to_string()
}

#[test]
fn synth_writes_corpus_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let out = dir.path().join("s");
    let o = dien(&["synth", "--config", &conf, "--seed", "3", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = fs::read_to_string(out.join("corpus.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 600);
    assert!(fs::read_to_string(out.join("corpus.provenance.txt")).unwrap().contains("seed"));
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("seed = 3"));

    let again = dir.path().join("s2");
    dien(&["synth", "--config", p(&out.join("config.txt")), "--out", p(&again)]);
    assert_eq!(fs::read(again.join("corpus.tsv")).unwrap(), tsv.as_bytes());
}

#[test]
fn invalid_configuration_exits_one_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = dien(&["synth", "--drift-prob", "1.5", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("drift_prob"));
    assert!(!out.exists());

    let o = dien(&["ablation", "--variants", "DIEN,BASE,DIEN", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());

    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    assert_eq!(dien(&["train", "--config", p(&bad), "--out", p(&out)]).status.code(), Some(1));
    assert_eq!(dien(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert!(!out.exists());

    let missing = dir.path().join("missing.tsv");
    assert_eq!(dien(&["train", "--corpus", p(&missing), "--out", p(&out)]).status.code(), Some(2));
}

#[test]
fn train_eval_and_viz_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let s = dir.path().join("s");
    dien(&["synth", "--config", &conf, "--out", p(&s)]);
    let corpus = s.join("corpus.tsv");

    let t = dir.path().join("t");
    let o = dien(&["train", "--config", &conf, "--corpus", p(&corpus), "--out", p(&t)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    // 300 users, every tenth held out: 270 users with two instances each
    let curves = fs::read_to_string(t.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 540usize.div_ceil(16));
    assert!(curves.starts_with("epoch,step,l_target,l_aux,l_total\n"));

    let t2 = dir.path().join("t2");
    dien(&["train", "--config", p(&t.join("config.txt")), "--out", p(&t2)]);
    assert_eq!(fs::read(t.join("checkpoint.txt")).unwrap(), fs::read(t2.join("checkpoint.txt")).unwrap());

    let e = dir.path().join("e");
    let ck = t.join("checkpoint.txt");
    let o = dien(&["eval", "--corpus", p(&corpus), "--checkpoint", p(&ck), "--out", p(&e)]);
    assert_eq!(o.status.code(), Some(0));
    let metrics = fs::read_to_string(e.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("variant,seed,auc\nDIEN,1,"));

    let v = dir.path().join("v");
    let o = dien(&["viz", "--corpus", p(&corpus), "--checkpoint", p(&ck), "--out", p(&v)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let traj = fs::read_to_string(v.join("viz_trajectories.csv")).unwrap();
    assert!(traj.starts_with("probe,step,x,y\n"));
    assert_eq!(traj.lines().count(), 1 + 3 * 9);
    assert!(fs::read_to_string(v.join("viz_attention.csv")).unwrap().starts_with("probe,step,score\n"));

    let tb = dir.path().join("tb");
    dien(&["train", "--config", &conf, "--corpus", p(&corpus), "--variant", "BASE", "--out", p(&tb)]);
    let vb = dir.path().join("vb");
    let o = dien(&["viz", "--corpus", p(&corpus), "--checkpoint", p(&tb.join("checkpoint.txt")), "--out", p(&vb)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablation_writes_summary_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let a = dir.path().join("a");
    let o = dien(&["ablation", "--config", &conf, "--variants", "BASE,GRU_AUGRU", "--repeats", "2", "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "variant,mean,std");
    assert!(rows[1].starts_with("BASE,") && rows[2].starts_with("GRU_AUGRU,"));
    assert_eq!(fs::read_to_string(a.join("metrics.csv")).unwrap().lines().count(), 1 + 4);
}

#[test]
fn gradcheck_prints_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = dien(&["gradcheck", "--variant", "GRU_AGRU", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("gradient check for GRU_AGRU"));
    assert!(stdout.trim_end().ends_with("overall: PASS"));
}
