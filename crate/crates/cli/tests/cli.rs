use std::path::Path;
use std::process::{Command, Output};

fn ecgclr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgclr"))
        .args(args)
        .env_remove("ECGCLR_WORKERS")
        .output()
        .expect("spawn ecgclr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("toy.toml");
    std::fs::write(
        &path,
        format!(
            r#"
seeds = [0]
encoders = ["A", "B"]
label_fractions = [1, 4, 9]

[dataset.synthetic]
n = 60
len = 250
seed = 3

[model]
preset = "toy"

[augmentation]
spec = {{ kind = "gaussian_noise", sigma = 0.15 }}
grids = ["vertical_flip"]

[train]
pretrain_epochs = 1
batch_size = 16
finetune_epochs = 2
{extra}
"#
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn bad_flag_and_bad_config_fail_with_one_line() {
    let o = ecgclr(&["sweep", "--no-such-flag"]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));

    let o = ecgclr(&["sweep", "--config", "/no/such/file.toml"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 7\n").unwrap();
    let o = ecgclr(&["sweep", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("schema_version"));
}

#[test]
fn sweep_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = ecgclr(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("6 rows added"));
    let o = ecgclr(&["summarize", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("Augmentation"));
    assert!(text.contains("Vertical Flip"));
    assert!(out.join("summary.csv").exists());
    // resuming adds nothing
    let o = ecgclr(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--deterministic"]);
    assert!(stdout(&o).contains("0 rows added, 6 already present"));
}

fn without_wall_time(csv: &Path) -> Vec<String> {
    std::fs::read_to_string(csv)
        .unwrap()
        .lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.remove(7);
            cols.join(",")
        })
        .collect()
}

#[test]
fn deterministic_runs_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "");
    let mut runs = vec![];
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = ecgclr(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--deterministic", "--seed", "5"]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(without_wall_time(&out.join("results.csv")));
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0].len(), 7);
}

#[test]
fn single_stage_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "");
    let data = dir.path().join("toy.ecgds");
    let o = ecgclr(&["synth-data", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("60 records"));

    let file_cfg = dir.path().join("file.toml");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("[dataset.synthetic]\nn = 60\nlen = 250\nseed = 3", &format!("[dataset]\nfile = {:?}", data));
    std::fs::write(&file_cfg, text).unwrap();
    let file_cfg = file_cfg.to_str().unwrap();
    let out = dir.path().join("stages");
    let out_s = out.to_str().unwrap();

    let o = ecgclr(&["pretrain", "--config", file_cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("pretrained.ckpt").exists());
    assert!(std::fs::read_to_string(out.join("pretrain.log")).unwrap().starts_with("epoch=0 stage=pretrain"));

    let ck = out.join("pretrained.ckpt");
    let o = ecgclr(&["finetune", "--config", file_cfg, "--out", out_s, "--checkpoint", ck.to_str().unwrap(), "--fraction", "40%"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("(40%)"));

    let ft = out.join("finetuned.ckpt");
    let o = ecgclr(&["evaluate", "--config", file_cfg, "--checkpoint", ft.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("weighted_accuracy"));

    let o = ecgclr(&["finetune", "--config", file_cfg, "--checkpoint", ck.to_str().unwrap(), "--fraction", "30%"]);
    assert!(!o.status.success());
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("n = 60", "n = 400");
    std::fs::write(&cfg, text).unwrap();
    for seed in ["0", "1", "2"] {
        let o = ecgclr(&["evaluate", "--config", &cfg, "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        let acc: f64 = stdout(&o)
            .lines()
            .find_map(|l| l.strip_prefix("weighted_accuracy "))
            .unwrap()
            .parse()
            .unwrap();
        assert!((acc - 0.5).abs() <= 0.15, "seed {seed}: {acc}");
    }
}
