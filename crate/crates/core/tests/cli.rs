use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
source_size = 400
target_size = 200

[model]
actor_hidden = [8]
critic_hidden = [8]
state_encoder_hidden = [8]
state_action_encoder_hidden = [8]
predictor_hidden = [8]
latent_state_dim = 4
latent_action_dim = 4
latent_pretraining_steps = 30
refinement_steps = 30
anchor_steps = 30
batch_size = 16

[run]
seeds = [0, 1]
steps = 40
eval_every = 20
eval_episodes = 2
variants = ["tabb", "no_tbm"]
diagnose_transitions = 100
"#;

fn tabb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabb")).args(args).env_remove("TABB_RUN_OUT_DIR").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    cfg.display().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&tabb(&["frobnicate"])), 2);
    assert_eq!(code(&tabb(&["train", "--steps", "many"])), 2);
    let o = tabb(&["gen-data", "--set", "env.colour=red"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"));
    assert_eq!(code(&tabb(&["gen-data", "--config", "/no/such/file.toml"])), 2);
    assert_eq!(code(&tabb(&["--help"])), 0);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(code(&tabb(&["gen-data", "-c", &cfg, "--out", out])), 0);
    let before = std::fs::read(dir.path().join("run/data/source.tbds")).unwrap();
    let o = tabb(&["gen-data", "-c", &cfg, "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    assert_eq!(code(&tabb(&["gen-data", "-c", &cfg, "--out", out, "--force"])), 0);
    assert_eq!(before, std::fs::read(dir.path().join("run/data/source.tbds")).unwrap());
}

#[test]
fn sweep_report_eval_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = dir.path().join("run");
    let out = run.to_str().unwrap();
    assert_eq!(code(&tabb(&["gen-data", "-c", &cfg, "--out", out])), 0);
    let o = tabb(&["sweep", "-c", &cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.starts_with("variant,seeds,mean,std,score\n"));
    assert!(report.contains("\ntabb,2,") && report.contains("\nno_tbm,2,"));
    assert!(run.join("seed_1/no_tbm/metrics.jsonl").exists());

    let o = tabb(&["report", "--run-dir", out]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), report);

    let ck = run.join("seed_0/tabb/agent.ckpt");
    let o = tabb(&["eval", "-c", &cfg, "--out", out, "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = tabb(&["diagnose", "-c", &cfg, "--out", out, "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["curve_tbm.csv", "bound.json", "summary.json", "summary.txt"] {
        assert!(run.join("seed_1/diagnose").join(f).exists(), "{f}");
    }
    assert_eq!(code(&tabb(&["diagnose", "-c", &cfg, "--out", out, "--seed", "1"])), 2);

    // A checkpoint from another env is refused.
    let o = tabb(&["eval", "-c", &cfg, "--out", out, "--set", "env.grid_size=6", "--checkpoint", ck.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
}

#[test]
fn manifest_rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (sa, sb) = (a.to_str().unwrap(), b.to_str().unwrap());
    assert_eq!(code(&tabb(&["gen-data", "-c", &cfg, "--out", sa])), 0);
    assert_eq!(code(&tabb(&["train", "-c", &cfg, "--out", sa, "--workers", "2"])), 0);

    let m = a.join("manifest.json");
    let m = m.to_str().unwrap();
    assert_eq!(code(&tabb(&["gen-data", "--from-manifest", m, "--out", sb])), 0);
    let o = tabb(&["train", "--from-manifest", m, "--out", sb, "--workers", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for s in ["seed_0", "seed_1"] {
        let ta = std::fs::read(a.join(s).join("tabb/metrics.jsonl")).unwrap();
        let tb = std::fs::read(b.join(s).join("tabb/metrics.jsonl")).unwrap();
        assert!(!ta.is_empty());
        assert_eq!(ta, tb, "{s}");
        assert_eq!(std::fs::read(a.join(s).join("tabb/agent.ckpt")).unwrap(), std::fs::read(b.join(s).join("tabb/agent.ckpt")).unwrap());
    }
}

#[test]
fn corrupted_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = dir.path().join("run");
    let out = run.to_str().unwrap();
    assert_eq!(code(&tabb(&["gen-data", "-c", &cfg, "--out", out])), 0);
    let p = run.join("data/target.tbds");
    let mut bytes = std::fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x01;
    std::fs::write(&p, &bytes).unwrap();
    let o = tabb(&["train", "-c", &cfg, "--out", out]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));

    std::fs::write(&p, &bytes[..n / 3]).unwrap();
    let o = tabb(&["train", "-c", &cfg, "--out", out, "--force"]);
    assert_eq!(code(&o), 3);
}
