use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TRAIN: &str = r#"
epochs = 1
batch_size = 8

[dims]
scalar = 16
vector = 8
hidden = 32
predictor_hidden = 32
certificates = 20

[certificates]
min_steps = 50
max_steps = 100

[dataset]
source = "synthetic"
n_molecules = 24
seed = 5
"#;

fn run(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_moleclue"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOLECLUE_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn train_certify_and_search_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("train.toml"), TRAIN).unwrap();
    run(&["train", "--config", "train.toml", "--out", "model"], d);
    assert!(d.join("model/checkpoint.mclu").exists());
    let history: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("model/history.json")).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 1);

    let cert = run(&["certify", "--checkpoint", "model/checkpoint.mclu", "--out", "model/refit.mclu"], d);
    assert!(String::from_utf8_lossy(&cert.stdout).contains("median u_e"));

    let args = [
        "clue", "--checkpoint", "model/refit.mclu", "--molecule", "mol-00003", "--tau", "0.1", "--lr", "0.1",
        "--steps", "4", "--out", "traj.json",
    ];
    let out = run(&args, d);
    // header plus steps 0..=4
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 6);
    let traj: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("traj.json")).unwrap()).unwrap();
    assert_eq!(traj["id"], "mol-00003");
    assert_eq!(traj["steps"].as_array().unwrap().len(), 5);
    assert!(traj["steps"][0]["L_y"].is_null());

    let missing = Command::new(env!("CARGO_BIN_EXE_moleclue"))
        .args(["clue", "--checkpoint", "model/refit.mclu", "--molecule", "nope"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!missing.status.success());
}
