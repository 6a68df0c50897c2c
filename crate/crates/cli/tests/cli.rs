use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdvae::diffmath::Tensor;
use pdvae::networks::PdvaeModel;
use pdvae::training::Checkpoint;
use pdvae_cli::commands::{BENCH_FILE, CHECKPOINT_FILE, DATASET_FILE, GENERATED_DIR, LAST_GOOD_FILE, LOG_FILE, MANIFEST_FILE, REPORT_FILE, RESOLVED_FILE};
use pdvae_cli::config::RunConfig;
use pdvae_cli::dataset::{read_dataset, sequence_digest, sha256_hex, Manifest};

const TOY: &str = "seed = 4
[data]
groups = 3
dancers = 3
frames = 16
skeleton = \"toy8\"
styles = 2
[model]
layers = 1
hidden = 16
heads = 2
ffn = 16
channels = 4
sigma_hidden = 6
traj_hidden = 6
[train]
steps = 6
batch_groups = 2
[bench]
repeats = 1
";

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        std::fs::write(&config, format!("{TOY}{extra}")).unwrap();
        Run { _dir: dir, root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn pdvae(&self, out: &str, args: &[&str]) -> Output {
        let o = self.out(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pdvae"));
        cmd.arg("--config").arg(&self.config).arg("--out").arg(&o).args(args);
        cmd.output().unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> String {
        let r = self.pdvae(out, args);
        assert_eq!(r.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        String::from_utf8(r.stdout).unwrap()
    }
}

fn log_steps(path: &Path) -> Vec<(usize, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("step="))
        .map(|l| {
            let field = |k: &str| l.split(' ').find_map(|f| f.strip_prefix(k)).unwrap().to_string();
            (field("step=").parse().unwrap(), field("csc=").parse().unwrap())
        })
        .collect()
}

#[test]
fn help_and_version_exit_zero_and_bad_usage_exits_one() {
    let bin = env!("CARGO_BIN_EXE_pdvae");
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).arg("--version").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).arg("dance").output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).args(["train", "--ablate", "everything"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn default_synth_writes_twelve_checksummed_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let r = Command::new(env!("CARGO_BIN_EXE_pdvae"))
        .args(["--seed", "3", "--out"])
        .arg(&out)
        .arg("synth")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(0));
    let manifest = Manifest::from_toml(&std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.sequences.len(), 12);
    let bytes = std::fs::read(out.join(DATASET_FILE)).unwrap();
    assert_eq!(manifest.files[0].sha256, sha256_hex(&bytes));
    let groups = read_dataset(&out.join(DATASET_FILE)).unwrap();
    let digests: Vec<String> = groups.iter().flat_map(|g| g.dancers.iter().map(sequence_digest)).collect();
    assert_eq!(digests, manifest.sequences.iter().map(|e| e.sha256.clone()).collect::<Vec<_>>());
    let resolved = RunConfig::load(&out.join(RESOLVED_FILE)).unwrap();
    assert_eq!(resolved.seed, 3);
}

#[test]
fn empty_or_malformed_config_exits_one() {
    let run = Run::new("");
    std::fs::write(&run.config, "[data]\ngroups = 0\n").unwrap();
    assert_eq!(run.pdvae("a", &["synth"]).status.code(), Some(1));
    std::fs::write(&run.config, "[data]\ngroupz = 2\n").unwrap();
    assert_eq!(run.pdvae("a", &["synth"]).status.code(), Some(1));
}

#[test]
fn training_logs_resumes_and_ablates() {
    let run = Run::new("");
    run.ok("a", &["synth"]);
    run.ok("a", &["train"]);
    let first = log_steps(&run.out("a").join(LOG_FILE));
    assert_eq!(first.iter().map(|s| s.0).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    assert!(first.iter().all(|s| s.1 > 0.0));

    // resuming appends steps 6.. to the same log
    let ck = run.out("a").join(CHECKPOINT_FILE);
    let saved = run.out("first.ckpt");
    std::fs::copy(&ck, &saved).unwrap();
    run.ok("a", &["train", "--resume", saved.to_str().unwrap(), "--steps", "3"]);
    let all = log_steps(&run.out("a").join(LOG_FILE));
    assert_eq!(all.iter().map(|s| s.0).collect::<Vec<_>>(), (0..9).collect::<Vec<_>>());
    assert_eq!(Checkpoint::load(&ck).unwrap().step, 9);

    let data = run.out("a").join(DATASET_FILE);
    run.ok("b", &["train", "--data", data.to_str().unwrap(), "--ablate", "no-consistency"]);
    let ablated = log_steps(&run.out("b").join(LOG_FILE));
    assert_eq!(ablated.len(), 6);
    assert!(ablated.iter().all(|s| s.1 == 0.0));

    // resuming a phase checkpoint in direct mode is a configuration error
    let r = run.pdvae("c", &["train", "--data", data.to_str().unwrap(), "--ablate", "no-phase", "--resume", saved.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn zero_step_budget_checkpoints_the_initialisation() {
    let run = Run::new("");
    run.ok("a", &["synth"]);
    run.ok("a", &["train", "--steps", "0"]);
    let ck = Checkpoint::load(&run.out("a").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.step, 0);
    let cfg = RunConfig::load(&run.out("a").join(RESOLVED_FILE)).unwrap();
    let init = PdvaeModel::new(cfg.model, cfg.seed).unwrap();
    let expect: Vec<(String, Tensor)> = {
        let s = init.params();
        s.ids().map(|id| (s.name(id).to_string(), s.value(id).clone())).collect()
    };
    assert_eq!(ck.params, expect);
}

#[test]
fn divergence_exits_two_and_keeps_last_good_state() {
    let run = Run::new("[train.adam]\nlr = 1e300\n");
    run.ok("a", &["synth"]);
    let r = run.pdvae("a", &["train"]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    let good = Checkpoint::load(&run.out("a").join(LAST_GOOD_FILE)).unwrap();
    assert!(good.params.iter().all(|(_, t)| t.data().iter().all(|x| x.is_finite())));
    assert!(!run.out("a").join(CHECKPOINT_FILE).exists());
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let run = Run::new("");
    assert_eq!(run.pdvae("a", &["train"]).status.code(), Some(2));
    assert_eq!(run.pdvae("a", &["generate", "--checkpoint", "nope.ckpt"]).status.code(), Some(2));
}

#[test]
fn generation_exports_and_is_reproducible() {
    let run = Run::new("");
    run.ok("a", &["synth"]);
    run.ok("a", &["train", "--steps", "2"]);
    let ck = run.out("a").join(CHECKPOINT_FILE);
    let ck = ck.to_str().unwrap();
    run.ok("g1", &["generate", "--checkpoint", ck, "--dancers", "100"]);
    run.ok("g2", &["generate", "--checkpoint", ck, "--dancers", "100"]);
    let dir = run.out("g1").join(GENERATED_DIR);
    let files = std::fs::read_dir(&dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x != "toml")).count();
    assert_eq!(files, 100);
    let m1 = std::fs::read(dir.join(MANIFEST_FILE)).unwrap();
    let m2 = std::fs::read(run.out("g2").join(GENERATED_DIR).join(MANIFEST_FILE)).unwrap();
    assert_eq!(m1, m2);
    let manifest = Manifest::from_toml(&String::from_utf8(m1).unwrap()).unwrap();
    for e in &manifest.files {
        assert_eq!(e.sha256, sha256_hex(&std::fs::read(dir.join(&e.name)).unwrap()));
    }

    run.ok("g3", &["--seed", "99", "generate", "--checkpoint", ck, "--dancers", "100"]);
    assert_ne!(std::fs::read(run.out("g3").join(GENERATED_DIR).join(MANIFEST_FILE)).unwrap(), m2);

    run.ok("bvh", &["generate", "--checkpoint", ck, "--dancers", "2", "--format", "bvh"]);
    let bvh = std::fs::read_to_string(run.out("bvh").join(GENERATED_DIR).join("dancer001.bvh")).unwrap();
    assert!(bvh.starts_with("HIERARCHY"));

    assert_eq!(run.pdvae("g4", &["generate", "--checkpoint", ck, "--dancers", "0"]).status.code(), Some(1));
    assert_eq!(run.pdvae("g4", &["generate", "--checkpoint", ck, "--format", "fbx"]).status.code(), Some(1));
}

#[test]
fn evaluate_reports_every_metric() {
    let run = Run::new("");
    run.ok("a", &["synth"]);
    run.ok("a", &["train", "--steps", "1"]);
    let ck = run.out("a").join(CHECKPOINT_FILE);
    run.ok("self", &["evaluate"]);
    let own: toml::Table = toml::from_str(&std::fs::read_to_string(run.out("self").join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(own["metrics"]["fid_k"]["value"].as_float(), Some(0.0));
    for args in [vec!["evaluate"], vec!["evaluate", "--checkpoint", ck.to_str().unwrap()]] {
        run.ok("e", &args);
        run.ok("e2", &args);
        let a = std::fs::read(run.out("e").join(REPORT_FILE)).unwrap();
        assert_eq!(a, std::fs::read(run.out("e2").join(REPORT_FILE)).unwrap());
        let report: toml::Table = toml::from_str(&std::fs::read_to_string(run.out("e").join(REPORT_FILE)).unwrap()).unwrap();
        let metrics = report["metrics"].as_table().unwrap();
        for key in ["fid_k", "gmr", "gen_div", "mmc", "pfc", "gmc", "tif"] {
            let entry = metrics[key].as_table().unwrap();
            assert!(entry.contains_key("value") || entry.contains_key("error"), "{key}");
        }
    }
}

#[test]
fn bench_scale_writes_report() {
    let run = Run::new("");
    let stdout = run.ok("b", &["bench-scale", "--n-list", "1,3"]);
    assert!(stdout.contains("dancers=3"));
    let report: toml::Table = toml::from_str(&std::fs::read_to_string(run.out("b").join(BENCH_FILE)).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|r| r["prior_calls"].as_integer() == Some(1)));
    assert_eq!(run.pdvae("b", &["bench-scale", "--dancers", "0"]).status.code(), Some(1));
}
