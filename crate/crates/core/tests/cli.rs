use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data.synthetic]
samples_per_class = 60

[source]
samples_per_class = 30
epochs = 3

[epochs]
finetune = 10
f1 = 2
f2 = 2
baseline = 2
"#;

fn mb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mb"))
        .args(args)
        .current_dir(dir)
        .env_remove("MB_DATA_CACHE")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    tmp
}

#[test]
fn data_commands_chain_into_a_training_run() {
    let tmp = setup();
    let d = tmp.path();
    let base = ["--config", "small.toml", "--seed", "3"];
    let gen = mb(d, &[&["data", "gen-synthetic"][..], &base, &["--out", "raw", "--previews", "2"]].concat());
    assert_eq!(code(&gen), 0, "{gen:?}");
    assert!(d.join("raw/previews").read_dir().unwrap().count() >= 2);
    let clouds = mb(d, &[&["data", "simulate-clouds"][..], &base, &["--input", "raw", "--out", "cloudy"]].concat());
    assert_eq!(code(&clouds), 0, "{clouds:?}");
    assert!(stdout(&clouds).contains("masked 120 of 240"));
    let split = mb(d, &[&["data", "split"][..], &base, &["--input", "cloudy", "--out", "ready"]].concat());
    assert_eq!(code(&split), 0, "{split:?}");

    // A config pointing at the prepared dataset trains on it unchanged.
    let cfg = format!("{SMALL}\n[data]\npath = \"ready\"\n");
    std::fs::write(d.join("saved.toml"), cfg.replace("[data.synthetic]\nsamples_per_class = 60\n", "")).unwrap();
    let train = mb(d, &["train", "--method", "late-fusion", "--config", "saved.toml", "--seed", "3", "--out", "run"]);
    assert_eq!(code(&train), 0, "{train:?}");
    assert!(stdout(&train).starts_with("late-fusion seed 3: OA"));
    assert!(d.join("run/checkpoints/final-late-opt.ckpt").exists());
    let eval = mb(d, &["eval", "--run", "run"]);
    assert_eq!(code(&eval), 0, "{eval:?}");
    assert!(stdout(&eval).contains("matches stored metrics: yes"));
}

#[test]
fn train_eval_sweep_and_plot() {
    let tmp = setup();
    let d = tmp.path();
    let train = mb(d, &["train", "--method", "ours-no-irm", "--config", "small.toml", "--seed", "1", "--out", "run"]);
    assert_eq!(code(&train), 0, "{train:?}");
    let eval = mb(d, &["eval", "--run", "run"]);
    assert!(stdout(&eval).contains("matches stored metrics: yes"), "{eval:?}");

    let sweep = mb(d, &["sweep", "--config", "small.toml", "--fractions", "0.2,0.6", "--seeds", "1", "--out", "sw"]);
    assert_eq!(code(&sweep), 0, "{sweep:?}");
    let csv = std::fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert!(csv.starts_with("fraction,seed,method,oa,aa,kappa,oa_cloud,oa_clear\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(d.join("sw/sweep-delta.svg").exists());

    let plot = mb(d, &["plot", "--in", "sw", "--out", "plots"]);
    assert_eq!(code(&plot), 0, "{plot:?}");
    for f in ["sweep-delta.svg", "sweep-delta.csv", "loss-cells-f0.20-s1-ours-irm.svg", "loss-cells-f0.60-s1-ours-no-irm.csv"] {
        assert!(d.join("plots").join(f).exists(), "{f}");
    }
    let single = mb(d, &["plot", "--in", "run", "--out", "single"]);
    assert_eq!(code(&single), 0, "{single:?}");
    assert!(d.join("single/loss.svg").exists());
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = setup();
    let d = tmp.path();
    std::fs::write(d.join("typo.toml"), "batch_sise = 4\n").unwrap();
    assert_eq!(code(&mb(d, &["train", "--config", "typo.toml", "--out", "x"])), 2);
    assert_eq!(code(&mb(d, &["train", "--config", "missing.toml", "--out", "x"])), 2);
    assert_eq!(code(&mb(d, &["sweep", "--config", "small.toml", "--fractions", "1.5", "--seeds", "0", "--out", "x"])), 2);

    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&mb(d, &["plot", "--in", "empty", "--out", "p"])), 3);
    assert_eq!(code(&mb(d, &["eval", "--run", "empty"])), 3);

    let diverge = format!("{SMALL}\n[optimizer]\nlr = 1e30\n[optimizer.kind]\nkind = \"sgd\"\nmomentum = 0.0\n");
    std::fs::write(d.join("diverge.toml"), diverge).unwrap();
    let train = mb(d, &["train", "--config", "diverge.toml", "--seed", "0", "--out", "bad"]);
    assert_eq!(code(&train), 4, "{train:?}");
    let rec = std::fs::read_to_string(d.join("bad/record.json")).unwrap();
    assert!(rec.contains("\"status\": \"failed\""), "{rec}");

    let sweep = mb(d, &["sweep", "--config", "diverge.toml", "--fractions", "0.5", "--seeds", "0,1", "--out", "sw"]);
    assert_eq!(code(&sweep), 5, "{sweep:?}");
    assert_eq!(
        std::fs::read_to_string(d.join("sw/sweep.csv")).unwrap(),
        "fraction,seed,method,oa,aa,kappa,oa_cloud,oa_clear\n"
    );
}
