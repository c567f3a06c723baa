use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sslab_core::data::load_image_dir;
use sslab_core::model::Model;

fn sslab(args: &[&str], out_env: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslab"))
        .args(args)
        .env("SSLAB_OUT", out_env)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Small synthetic run that trains in well under a second.
const SMOKE: &str = "\
model.n_blocks=1
model.d_model=8
model.d_state=2
data.side=16
data.n_synth=80
data.augment=false
train.t_i_max=8
train.t_q=8
train.batch=2
train.epochs=1
train.steps_per_epoch=3
probe.n_sequences=4
probe.t_horizon=4
";

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.txt");
    std::fs::write(&p, SMOKE).unwrap();
    p
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_1_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = sslab(&["train", path_str(&missing)], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.txt"));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.txt");
    std::fs::write(&p, "train.speed=11\n").unwrap();
    assert_eq!(code(&sslab(&["train", path_str(&p)], dir.path())), 1);
}

#[test]
fn smoke_train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let run = dir.path().join("run");
    let o = sslab(&["train", path_str(&cfg), "--out", path_str(&run), "--seed", "4"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "loss.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("model.ckpt");
    let eval = |name: &str| {
        let out = dir.path().join(name);
        let o = sslab(
            &[
                "eval",
                path_str(&ckpt),
                "--vi-list",
                "16,32,64",
                "--vq-list",
                "8",
                "--n-images",
                "3",
                "--seed",
                "1",
                "--out",
                path_str(&out),
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out).unwrap()
    };
    let a = eval("a.csv");
    let rows: Vec<&str> = a.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r.starts_with("Avg,")).count(), 3);
    assert_eq!(a, eval("b.csv"));
}

#[test]
fn truncated_variant_rewrites_the_length_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let run = dir.path().join("run");
    let o = sslab(&["train", path_str(&cfg), "--out", path_str(&run), "--variant", "truncated"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let snap = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(snap.contains("train.t_i_min=4\n") && snap.contains("train.t_i_max=8\n"), "{snap}");
}

#[test]
fn oracle_checkpoint_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let ckpt = dir.path().join("oracle.ckpt");
    Model::Oracle.save(&ckpt).unwrap();
    let out = dir.path().join("m.csv");
    let o = sslab(
        &[
            "eval",
            path_str(&ckpt),
            "--config",
            path_str(&cfg),
            "--vi-list",
            "4",
            "--vq-list",
            "16",
            "--n-images",
            "2",
            "--out",
            path_str(&out),
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let oracle: Vec<&str> = text.lines().filter(|l| l.starts_with("oracle,")).collect();
    assert_eq!(oracle.len(), 1);
    assert_eq!(oracle[0].split(',').nth(3).unwrap().parse::<f64>().unwrap(), 0.0);
}

#[test]
fn unreadable_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&sslab(&["eval", path_str(&junk)], dir.path())), 2);
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(code(&sslab(&["eval", path_str(&missing)], dir.path())), 2);
}

#[test]
fn bad_lists_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("oracle.ckpt");
    Model::Oracle.save(&ckpt).unwrap();
    let o = sslab(&["eval", path_str(&ckpt), "--vi-list", "4,zero"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn probe_dispatch_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&sslab(&["train", path_str(&cfg), "--out", path_str(&run)], dir.path())), 0);
    let ckpt = run.join("model.ckpt");
    let probes = dir.path().join("probes");
    let probe = |extra: &[&str]| {
        let mut args = vec!["probe", path_str(&ckpt)];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", path_str(&probes)]);
        sslab(&args, dir.path())
    };
    assert_eq!(code(&probe(&["bogus"])), 1);

    let o = probe(&["snapshots", "--vi", "1,4,16,64"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let snaps = probes.join("snapshots").join("ssm");
    let pgms = std::fs::read_dir(&snaps)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 4);
    assert!(snaps.join("report.csv").exists() && snaps.join("config.txt").exists());

    assert_eq!(code(&probe(&["quadrants", "--order", "0,1,2,3"])), 0);
    assert_eq!(code(&probe(&["quadrants", "--order", "1,0,2,3"])), 0);
    assert!(probes.join("quadrants").join("ssm_order0123").is_dir());
    assert!(probes.join("quadrants").join("ssm_order1023").is_dir());
    assert_eq!(code(&probe(&["quadrants", "--order", "0,0,2,3"])), 2);

    for p in ["switch", "observed", "delta"] {
        let o = probe(&[p, "--vi-list", "8,16"]);
        assert_eq!(code(&o), 0, "{p}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(probes.join(p).join("ssm").join("report.csv").exists());
    }
}

#[test]
fn delta_probe_on_transformer_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tf.txt");
    std::fs::write(&cfg, format!("{SMOKE}model.kind=transformer\nmodel.n_encoder=1\nmodel.n_decoder=1\n")).unwrap();
    let run = dir.path().join("run");
    let o = sslab(&["train", path_str(&cfg), "--out", path_str(&run)], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = sslab(&["probe", path_str(&run.join("model.ckpt")), "delta"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn plot_contract() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    std::fs::write(&csv, "model_id,vi,vq,mean_mse,ci95,n\nssm,16,256,0.04,0.002,64\nssm,64,256,0.03,0.002,64\n").unwrap();
    let svg = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["plot", path_str(&csv), "--x", "vi", "--series", "model_id", "--out", path_str(&out)];
        args.extend_from_slice(extra);
        (code(&sslab(&args, dir.path())), out)
    };
    let (c, a) = svg("a.svg", &[]);
    assert_eq!(c, 0);
    let (_, b) = svg("b.svg", &[]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.matches("<polyline").count(), 1);
    assert_eq!(text.matches("class=\"band\"").count(), 1);
    assert_eq!(text, std::fs::read_to_string(b).unwrap());
    assert_eq!(svg("c.svg", &["--y", "accuracy"]).0, 1);
    std::fs::write(&csv, "model_id,vi,vq,mean_mse,ci95,n\n").unwrap();
    assert_eq!(svg("d.svg", &[]).0, 1);
}

#[test]
fn synth_data_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str| {
        let out = dir.path().join(name);
        let o = sslab(&["synth-data", "--n", "8", "--out", path_str(&out), "--seed", "3"], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (gen("a"), gen("b"));
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 9);
    let mut pgms: Vec<PathBuf> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    pgms.sort();
    assert_eq!(pgms.len(), 8);
    for p in &pgms {
        let other = b.join(p.file_name().unwrap());
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(other).unwrap());
    }
    let ds = load_image_dir(&a, 64, false).unwrap();
    assert_eq!(ds.len(), 8);
    assert!(ds.warnings.is_empty(), "{:?}", ds.warnings);
}

#[test]
fn unwritable_synth_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let target = file.join("sub");
    let o = sslab(&["synth-data", "--n", "2", "--out", path_str(&target)], dir.path());
    assert_eq!(code(&o), 2);
}
