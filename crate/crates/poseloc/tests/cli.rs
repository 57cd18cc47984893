//! End-to-end tests of the command-line interface: artifact flow between
//! verbs, byte-level reproducibility under `--threads 1`, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

/// Scaled-down configuration so every stage runs in seconds.
const TINY_CONFIG: &str = r#"
[scene]
width = 16
height = 16
train_views = 4
test_views = 2
render_samples = 256

[nerf]
l_pos = 2
hidden = [16, 16]
samples = 6
iters = 30
rays_per_batch = 8

[diffusion]
encoder_input = 16
encoder_channels = [2, 4]
feature_dim = 8
hidden = [16, 16]
l_emb = 3
steps = 6
iters = 25
batch = 4

[pipeline]
particles = 6
steps = 6
subset = 2

[refine]
steps = 3
keypoints = 6
dilation_radius = 1

[eval]
seeds = [0]
max_queries = 2
"#;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_poseloc")
}

fn run_verb(config: &Path, dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn build_stages(config: &Path, dir: &Path) {
    for verb in ["gen-scene", "render-gt", "train-nerf", "train-diffusion"] {
        assert_ok(&run_verb(config, dir, &[verb]), verb);
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

/// One fully built run directory shared by the read-only tests.
fn prepared() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static PREPARED: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    PREPARED.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let config = root.path().join("tiny.toml");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        let dir = root.path().join("run");
        build_stages(&config, &dir);
        (root, config, dir)
    })
}

#[test]
fn build_stages_leave_every_artifact_in_place() {
    let (_root, config, dir) = prepared();
    for name in [
        "scene.json",
        "transforms.json",
        "split.json",
        "images/frame_0000.png",
        "images/frame_0005.png",
        "nerf.ckpt",
        "diffusion.ckpt",
        "nerf_loss.csv",
        "diffusion_loss.csv",
    ] {
        assert!(dir.join(name).exists(), "missing artifact {name}");
    }
    let out = run_verb(config, dir, &["localize", "--query", "0"]);
    assert_ok(&out, "localize");
    assert!(dir.join("queries/full-s0-f0004.json").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("frame 0004"), "unexpected stdout: {stdout}");

    assert_ok(&run_verb(config, dir, &["evaluate"]), "evaluate");
    let eval_csv = String::from_utf8(read(&dir.join("eval.csv"))).unwrap();
    assert!(eval_csv.starts_with("schema_v1,method,scene,split,seed,sr_1"));
    // Three methods x (one seed + one mean row) + header.
    assert_eq!(eval_csv.lines().count(), 7);
    assert!(eval_csv.contains("\n1,full,textured-7,test,0,"));
    assert!(eval_csv.contains("\n1,diffusion_only,textured-7,test,mean,"));
    assert!(eval_csv.contains("\n1,monte_carlo,textured-7,test,0,"));

    assert_ok(&run_verb(config, dir, &["ablate"]), "ablate");
    let ablate_csv = String::from_utf8(read(&dir.join("ablate.csv"))).unwrap();
    assert!(ablate_csv.contains("\n1,integrated,"));
    assert!(ablate_csv.contains("\n1,plain,"));

    for axis in ["particles", "diffusion_steps"] {
        let out = run_verb(config, dir, &["sweep", "--axis", axis, "--values", "2,4"]);
        assert_ok(&out, "sweep");
        let sweep_csv = String::from_utf8(read(&dir.join("sweep.csv"))).unwrap();
        assert!(sweep_csv.starts_with("schema_v1,axis,value,"));
        assert!(sweep_csv.contains(&format!("\n1,{axis},2,")));
        assert!(sweep_csv.contains(&format!("\n1,{axis},4,")));
    }
}

#[test]
fn build_stages_are_bitwise_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    build_stages(&config, &a);
    build_stages(&config, &b);
    for name in [
        "scene.json",
        "transforms.json",
        "split.json",
        "images/frame_0003.png",
        "nerf.ckpt",
        "diffusion.ckpt",
        "nerf_loss.csv",
        "diffusion_loss.csv",
    ] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name} differs between runs");
    }
}

#[test]
fn query_verbs_are_bitwise_reproducible() {
    let (_root, config, dir) = prepared();
    let rerun = |args: &[&str], artifact: &str| {
        assert_ok(&run_verb(config, dir, args), artifact);
        let first = read(&dir.join(artifact));
        assert_ok(&run_verb(config, dir, args), artifact);
        assert_eq!(first, read(&dir.join(artifact)), "{artifact} differs between runs");
    };
    rerun(&["evaluate"], "eval.csv");
    rerun(&["evaluate"], "queries/full-s0-f0004.json");
    rerun(&["ablate"], "ablate.csv");
    rerun(&["sweep", "--axis", "particles", "--values", "2,4"], "sweep.csv");
    rerun(&["localize", "--query", "1"], "queries/full-s0-f0005.json");
}

#[test]
fn value_columns_are_thread_count_independent() {
    let (_root, config, dir) = prepared();
    assert_ok(&run_verb(config, dir, &["evaluate"]), "evaluate");
    let serial = String::from_utf8(read(&dir.join("eval.csv"))).unwrap();
    assert_ok(&run_verb(config, dir, &["--threads", "2", "evaluate"]), "evaluate -j2");
    let parallel = String::from_utf8(read(&dir.join("eval.csv"))).unwrap();
    // Identical rows once the two trailing timing columns are dropped.
    let strip = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| {
                let fields: Vec<&str> = l.split(',').collect();
                fields[..fields.len() - 2].join(",")
            })
            .collect()
    };
    assert_eq!(strip(&serial), strip(&parallel));
    // Single-threaded timings are zeroed; the parallel run reports real ones.
    assert!(serial.lines().nth(1).unwrap().ends_with(",0.000,0.000"));
    assert!(!parallel.lines().nth(1).unwrap().ends_with(",0.000,0.000"));
}

#[test]
fn seed_flag_overrides_the_evaluation_seed() {
    let (_root, config, dir) = prepared();
    assert_ok(&run_verb(config, dir, &["--seed", "5", "localize"]), "localize s5");
    assert_ok(&run_verb(config, dir, &["--seed", "6", "localize"]), "localize s6");
    let a = String::from_utf8(read(&dir.join("queries/full-s5-f0004.json"))).unwrap();
    let b = String::from_utf8(read(&dir.join("queries/full-s6-f0004.json"))).unwrap();
    assert!(a.contains("\"seed\": 5"));
    assert!(b.contains("\"seed\": 6"));
    let grab = |text: &str| {
        text.lines()
            .find(|l| l.contains("query_seed"))
            .map(str::to_string)
            .expect("record carries query_seed")
    };
    assert_ne!(grab(&a), grab(&b), "different seeds must give different particle streams");
}

#[test]
fn exit_codes_follow_the_contract() {
    let (_root, config, dir) = prepared();
    let code = |out: &Output| out.status.code().expect("no signal");

    // 0: clean run (and --help).
    let out = Command::new(bin()).arg("--help").output().unwrap();
    assert_eq!(code(&out), 0);

    // 1: usage problems.
    let out = Command::new(bin()).arg("not-a-verb").output().unwrap();
    assert_eq!(code(&out), 1);
    let out = run_verb(config, dir, &["sweep", "--axis", "bogus", "--values", "2"]);
    assert_eq!(code(&out), 1);
    let out = run_verb(config, dir, &["localize", "--method", "bogus"]);
    assert_eq!(code(&out), 1);
    let out = run_verb(config, dir, &["--threads", "0", "evaluate"]);
    assert_eq!(code(&out), 1);

    // 2: artifacts missing because an earlier stage has not run.
    let empty = tempfile::tempdir().unwrap();
    let out = run_verb(config, empty.path(), &["evaluate"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifact"));
    let out = run_verb(config, empty.path(), &["render-gt"]);
    assert_eq!(code(&out), 2);

    // 3: training diverged to a non-finite loss.
    let exploding = TINY_CONFIG.replace("[nerf]", "[nerf]\nlr = 1e18").replace(
        "iters = 30",
        "iters = 300",
    );
    let bad_config = empty.path().join("explode.toml");
    std::fs::write(&bad_config, exploding).unwrap();
    let run2 = empty.path().join("run");
    assert_ok(&run_verb(&bad_config, &run2, &["gen-scene"]), "gen-scene");
    assert_ok(&run_verb(&bad_config, &run2, &["render-gt"]), "render-gt");
    let out = run_verb(&bad_config, &run2, &["train-nerf"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
