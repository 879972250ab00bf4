use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rider_core::config::RunConfig;
use rider_core::encoder::Encoder;
use rider_core::metrics::metrics_report;
use rider_core::oracle::{helix_fold, HelixOracleParams};
use rider_core::policy::{FeatureSpec, PolicyParams};
use rider_core::rl::EpochLog;
use rider_core::struct_io::{parse_fasta, parse_pdb_backbone, sequence_to_onehot};

const SMALL: &str = "\
tasks.n_tasks = 2
tasks.length = 8
pretrain.iterations = 20
rl.epochs = 2
rl.batch_size = 6
rl.n_steps_rl = 5
sampler.n_steps = 10
";

fn rider(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rider"))
        .args(args)
        .env_remove("RIDER_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        let d = Dir(tempfile::tempdir().unwrap());
        std::fs::write(d.path("small.toml"), SMALL).unwrap();
        d
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write_fold(&self, name: &str, seq: &str) -> String {
        let s = helix_fold(&HelixOracleParams::default(), &sequence_to_onehot(seq).unwrap());
        std::fs::write(self.path(name), s.to_pdb()).unwrap();
        self.s(name)
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn score_matches_the_library() {
    let d = Dir::new();
    let a = d.write_fold("a.pdb", "GGACUUCGGUCC");
    let b = d.write_fold("b.pdb", "GGACUACGGUCA");
    let out = rider(&["score", &a, &a]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "{\"gdt_ts\":1.000000,\"tm_score\":1.000000,\"rmsd\":0.000000,\"n\":12}\n");

    let out = rider(&["score", &b, &a, "--json", &d.s("m.json")]);
    assert!(out.status.success());
    let lib = metrics_report(
        &parse_pdb_backbone(&std::fs::read_to_string(&b).unwrap()).unwrap().structure,
        &parse_pdb_backbone(&std::fs::read_to_string(&a).unwrap()).unwrap().structure,
    )
    .unwrap();
    assert_eq!(String::from_utf8(read(d.path("m.json"))).unwrap(), format!("{}\n", lib.to_json()));
}

#[test]
fn exit_codes() {
    let d = Dir::new();
    let a = d.write_fold("a.pdb", "GGACUUCGGUCC");
    let short = d.write_fold("s.pdb", "GGACU");
    assert_eq!(rider(&["score", &a, &short]).status.code(), Some(2));
    std::fs::write(d.path("empty.pdb"), "").unwrap();
    assert_eq!(rider(&["score", &a, &d.s("empty.pdb")]).status.code(), Some(2));
    assert_eq!(rider(&["score", &a]).status.code(), Some(1));
    assert_eq!(rider(&["nonsense"]).status.code(), Some(1));
    assert_eq!(rider(&["config"]).status.code(), Some(1));
    assert_eq!(rider(&["--help"]).status.code(), Some(0));

    std::fs::write(d.path("bad.toml"), "rl.epochz = 3\n").unwrap();
    assert_eq!(rider(&["config", "--check", &d.s("bad.toml")]).status.code(), Some(2));
    assert_eq!(rider(&["fold", "--sequence", "ACGX"]).status.code(), Some(2));

    // A runaway step size overflows the policy: numeric failure.
    let cfg = d.s("small.toml");
    assert!(rider(&["pretrain", "--config", &cfg, "--out", &d.s("p.ck"), "--seed", "1"]).status.success());
    let blown = rider(&["train-rl", "--config", &cfg, "--checkpoint", &d.s("p.ck"), "--out", &d.s("q.ck"), "--learning-rate", "1e300"]);
    assert_eq!(blown.status.code(), Some(3), "{}", String::from_utf8_lossy(&blown.stderr));
    std::fs::write(d.path("hot.toml"), format!("{SMALL}pretrain.learning_rate = 1e300\n")).unwrap();
    let blown = rider(&["pretrain", "--config", &d.s("hot.toml"), "--out", &d.s("h.ck")]);
    assert_eq!(blown.status.code(), Some(3));
}

#[test]
fn config_defaults_round_trip() {
    let d = Dir::new();
    let out = rider(&["config", "--defaults"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("rl.clip_eps = 0.5\n"));
    assert!(text.contains("pretrain.learning_rate = 0.0003\n"));
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    std::fs::write(d.path("all.toml"), &text).unwrap();
    assert_eq!(stdout(&rider(&["config", "--check", &d.s("all.toml")])), text);
}

#[test]
fn pretrain_zero_iterations_is_the_initialization() {
    let d = Dir::new();
    let out = rider(&["pretrain", "--config", &d.s("small.toml"), "--iterations", "0", "--seed", "12", "--out", &d.s("p.ck")]);
    assert!(out.status.success());
    let enc = Encoder::new(RunConfig::default().encoder).unwrap();
    let init = PolicyParams::init(FeatureSpec::new(enc.scalar_dim()), &mut ChaCha8Rng::seed_from_u64(12));
    assert_eq!(read(d.path("p.ck")), init.to_checkpoint_bytes());
}

#[test]
fn seeds_come_from_flag_or_environment() {
    let d = Dir::new();
    let cfg = d.s("small.toml");
    let run = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_rider"));
        cmd.args(["pretrain", "--config", &cfg, "--out", out]).env_remove("RIDER_SEED");
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        if let Some(e) = env {
            cmd.env("RIDER_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        read(out)
    };
    let flag = run(&d.s("a.ck"), Some("7"), None);
    assert_eq!(flag, run(&d.s("b.ck"), None, Some("7")));
    assert_eq!(flag, run(&d.s("c.ck"), Some("7"), Some("8")));
    assert_ne!(flag, run(&d.s("e.ck"), None, Some("8")));
}

#[test]
fn sample_records_and_metrics() {
    let d = Dir::new();
    let cfg = d.s("small.toml");
    assert!(rider(&["pretrain", "--config", &cfg, "--out", &d.s("p.ck")]).status.success());
    let target = d.write_fold("t.pdb", "GGACUUCGGUCC");

    let out = rider(&["sample", "--config", &cfg, "--checkpoint", &d.s("p.ck"), "--target", &target, "-n", "16", "--temperature", "0.1", "--metrics-json", &d.s("m.json")]);
    assert!(out.status.success());
    let records = parse_fasta(&stdout(&out)).unwrap();
    assert_eq!(records.len(), 16);
    assert!(records.iter().all(|(_, s)| s.len() == 12));
    let metrics: serde_json::Value = serde_json::from_slice(&read(d.path("m.json"))).unwrap();
    assert_eq!(metrics.as_array().unwrap().len(), 16);
    assert!(metrics[0]["metrics"]["gdt_ts"].as_f64().is_some());

    let det = |name: &str| {
        let out = rider(&["sample", "--config", &cfg, "--checkpoint", &d.s("p.ck"), "--target", &target, "-n", "2", "--temperature", "0", "--seed", "3", "--out", &d.s(name)]);
        assert!(out.status.success());
        read(d.path(name))
    };
    assert_eq!(det("x.fa"), det("y.fa"));

    let out = rider(&["sample", "--config", &cfg, "--checkpoint", &d.s("p.ck"), "--target", &target, "-n", "2", "--no-oracle", "--metrics-json", &d.s("none.json")]);
    assert!(out.status.success());
    assert_eq!(parse_fasta(&stdout(&out)).unwrap().len(), 2);
    assert!(!d.path("none.json").exists());
}

#[test]
fn train_rl_runs_and_copies_on_zero_epochs() {
    let d = Dir::new();
    let cfg = d.s("small.toml");
    assert!(rider(&["pretrain", "--config", &cfg, "--out", &d.s("p.ck")]).status.success());
    let out = rider(&["train-rl", "--config", &cfg, "--checkpoint", &d.s("p.ck"), "--out", &d.s("z.ck"), "--epochs", "0"]);
    assert!(out.status.success());
    assert_eq!(read(d.path("z.ck")), read(d.path("p.ck")));

    for mode in ["reward", "batch", "moving"] {
        let log = d.s(&format!("{mode}.jsonl"));
        let out = rider(&["train-rl", "--config", &cfg, "--checkpoint", &d.s("p.ck"), "--out", &d.s("r.ck"), "--log", &log, "--baseline-mode", mode]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let entries: Vec<EpochLog> = std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(entries.len(), 2);
        assert!(entries.iter().all(|e| e.objectives.len() == 2 && e.n_trajectories == 6));
        let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&log).unwrap().lines().next().unwrap()).unwrap();
        for key in ["epoch", "mean_reward", "baseline", "clip_frac", "mean_abs_adv", "wall_ms"] {
            assert!(line.get(key).is_some(), "{key}");
        }
        if mode == "reward" {
            assert_eq!(entries[0].baseline, 0.0);
        }
    }
    assert_eq!(rider(&["train-rl", "--config", &cfg, "--checkpoint", &d.s("p.ck"), "--out", &d.s("r.ck"), "--baseline-mode", "median"]).status.code(), Some(1));
}

#[test]
fn reward_and_fold() {
    let out = rider(&["reward", "--gdt", "0.6", "--tm", "0", "--rmsd", "4", "--kind", "gdt_rmsd"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["base"].as_f64(), Some(5.0));
    assert_eq!(rider(&["reward", "--gdt", "0.6"]).status.code(), Some(1));

    let d = Dir::new();
    let out = rider(&["fold", "--sequence", "AA"]);
    assert!(out.status.success());
    let s = parse_pdb_backbone(&stdout(&out)).unwrap().structure;
    let c = s.centroids();
    assert!((c[1].z - c[0].z - 2.0).abs() < 1e-3);

    std::fs::write(d.path("in.fa"), ">one\nACGUAC\n>two\nGGGGAA\n").unwrap();
    assert_eq!(rider(&["fold", "--fasta", &d.s("in.fa")]).status.code(), Some(2));
    assert!(rider(&["fold", "--fasta", &d.s("in.fa"), "--out-dir", &d.s("folds")]).status.success());
    assert!(d.path("folds/one.pdb").exists() && d.path("folds/two.pdb").exists());

    // The same folds through the external-command adapter.
    let fixture = d.s("folds/one.pdb");
    std::fs::write(d.path("sub.toml"), format!("oracle.kind = \"subprocess\"\noracle.command = \"cp '{fixture}' {{out_pdb}} # {{fasta}}\"\n")).unwrap();
    let out = rider(&["fold", "--config", &d.s("sub.toml"), "--sequence", "ACGUAC"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out), std::fs::read_to_string(&fixture).unwrap());
}

#[test]
fn featurize_dumps_the_graph() {
    let d = Dir::new();
    let a = d.write_fold("a.pdb", "GGACUUCGGUCC");
    let out = rider(&["featurize", &a, "--k", "4", "--dump-json", &d.s("g.json"), "--embed-json", &d.s("h.json")]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["n_edges"].as_u64(), Some(48));
    let g: serde_json::Value = serde_json::from_slice(&read(d.path("g.json"))).unwrap();
    assert_eq!(g["neighbors"].as_array().unwrap().len(), 12);
    let h: serde_json::Value = serde_json::from_slice(&read(d.path("h.json"))).unwrap();
    assert_eq!(h["scalar"][0].as_array().unwrap().len(), 256);
}
