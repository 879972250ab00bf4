//! End-to-end acceptance run: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Run with `cargo test -p rider-cli --test acceptance -- --nocapture` to see the table.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rider_core::diffusion::{
    forward_noise, pretrain, sample_from, standard_normal, NoiseSchedule, PretrainConfig, PretrainExample, SamplerConfig,
};
use rider_core::encoder::{ConditioningEmbedding, Encoder, EncoderConfig};
use rider_core::featurize::build_graph;
use rider_core::metrics::{d0, gdt_ts, rmsd, tm_score, MetricsReport};
use rider_core::oracle::{synthetic_tasks, HelixOracle, HelixOracleParams};
use rider_core::policy::{FeatureSpec, Latent, NoisePredictor, PolicyParams};
use rider_core::rewards::{base_reward, bonus_reward, total_reward, BaseKind, RewardConfig};
use rider_core::rl::{clipped_objective, evaluate_deterministic, train, EpochLog, RlConfig, RlTarget};
use rider_core::struct_io::{decode_argmax, Point, RnaSequence};
use rider_core::testing::{
    gdt_ts_bruteforce, log_prob_gradient_error, objective_gradient_error, perturbed, pretrain_gradient_error, random_rotation,
    random_sequence, random_structure, sample_variance, scripted_baseline_stream, tm_score_bruteforce,
};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

const RIGID_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-9;
const D0_TOL: f64 = 1e-4;
const SCHEDULE_TOL: f64 = 1e-12;
const RECONSTRUCTION_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-4;
const EQUIVARIANCE_TOL: f64 = 1e-6;
const F_TEST_LEVEL: f64 = 0.99;
const OBJECTIVE_VARIANCE_RATIO: f64 = 2.0;
const MIN_IMPROVED_TASKS: usize = 4;

/// Toy closed-loop task set and step sizes (see the decision log for how they were chosen).
const TASK_SEED: u64 = 7;
const TOY_PRETRAIN_LR: f64 = 1e-2;
const TOY_RL_LR: f64 = 3e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.detail = format!("{}; {:.1}s", o.detail, took.as_secs_f64());
    if let Some(limit) = limit {
        if took > limit {
            o.pass = false;
            o.detail = format!("{} exceeds {:.0}s", o.detail, limit.as_secs_f64());
        }
    }
    o
}

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_rmsd, mut worst_gdt, mut worst_tm) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(4..=60);
        let a = random_structure(&mut rng, n);
        let shift = Point::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let b = a.transformed(&random_rotation(&mut rng), &shift);
        worst_rmsd = worst_rmsd.max(rmsd(&a, &b, true).unwrap());
        worst_gdt = worst_gdt.max((1.0 - gdt_ts(&a, &b).unwrap()).abs());
        worst_tm = worst_tm.max((1.0 - tm_score(&a, &b).unwrap()).abs());
    }
    outcome(
        worst_rmsd < RIGID_TOL && worst_gdt < RIGID_TOL && worst_tm < RIGID_TOL,
        format!("max rmsd {worst_rmsd:.1e}, max |1-gdt| {worst_gdt:.1e}, max |1-tm| {worst_tm:.1e}"),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for k in 0..30 {
        let n = rng.random_range(3..=8);
        let a = random_structure(&mut rng, n);
        let b = perturbed(&mut rng, &a, [0.5, 1.0, 2.0, 4.0, 8.0][k % 5]);
        worst = worst.max((gdt_ts(&b, &a).unwrap() - gdt_ts_bruteforce(&b, &a)).abs());
        worst = worst.max((tm_score(&b, &a).unwrap() - tm_score_bruteforce(&b, &a)).abs());
    }
    outcome(worst < ORACLE_TOL, format!("max deviation from exhaustive search {worst:.1e}"))
}

fn d0_values() -> Outcome {
    let (a, b) = (d0(30), d0(64));
    outcome(
        (a - 1.2581).abs() < D0_TOL && (b - 2.7375).abs() < D0_TOL,
        format!("d0(30) = {a:.5}, d0(64) = {b:.5}"),
    )
}

fn schedule_identities() -> Outcome {
    let s = NoiseSchedule::default();
    let worst = (0..1000)
        .map(|i| {
            let v = s.alpha_sigma(i as f64 / 999.0).unwrap();
            (v.alpha * v.alpha + v.sigma * v.sigma - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let a1 = s.alpha_sigma(1.0).unwrap().alpha;
    let end = (a1 * a1 - (-10.05f64).exp()).abs();
    outcome(
        worst < SCHEDULE_TOL && end < SCHEDULE_TOL,
        format!("max |a²+s²-1| {worst:.1e}, |a1² - e^-10.05| {end:.1e}"),
    )
}

struct TrueNoise(Latent);

impl NoisePredictor for TrueNoise {
    fn predict_noise(&self, _x: &[[f64; 4]], _t: f64, _h: &ConditioningEmbedding) -> rider_core::Result<Latent> {
        Ok(self.0.clone())
    }
}

fn teacher_forced_reconstruction() -> Outcome {
    let sched = NoiseSchedule::default();
    let cfg = SamplerConfig {
        n_steps: 50,
        temperature: 0.0,
        sigma_min: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut decoded = 0;
    for _ in 0..20 {
        let n = rng.random_range(4..=40);
        let native = random_sequence(&mut rng, n);
        let x0 = native.onehot();
        let eps = standard_normal(&mut rng, n);
        let x_t = forward_noise(&x0, sched.t_final, &eps, &sched).unwrap();
        let h = ConditioningEmbedding {
            scalar: vec![vec![0.0]; n],
            vector: vec![vec![]; n],
        };
        let (seq, traj) = sample_from(&TrueNoise(eps), &h, x_t, &sched, &cfg, &mut rng).unwrap();
        for (a, b) in traj.final_x0.iter().zip(&x0) {
            for c in 0..4 {
                worst = worst.max((a[c] - b[c]).abs());
            }
        }
        decoded += usize::from(seq == native && decode_argmax(&traj.final_x0).unwrap() == native);
    }
    outcome(
        worst < RECONSTRUCTION_TOL && decoded == 20,
        format!("max |x0_hat - x0| {worst:.1e}, {decoded}/20 sequences recovered"),
    )
}

fn gradient_checks() -> Outcome {
    let worst = |seed: u64, check: fn(&mut ChaCha8Rng) -> f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..100).map(|_| check(&mut rng)).fold(0.0, f64::max)
    };
    let (p, l, o) = (worst(61, pretrain_gradient_error), worst(62, log_prob_gradient_error), worst(63, objective_gradient_error));
    outcome(
        p < GRADIENT_TOL && l < GRADIENT_TOL && o < GRADIENT_TOL,
        format!("max rel. error: pretrain loss {p:.1e}, log-prob {l:.1e}, clipped objective {o:.1e} (100 configs each)"),
    )
}

fn reward_table() -> Outcome {
    let m = |g: f64, t: f64, r: f64| MetricsReport {
        gdt_ts: g,
        tm_score: t,
        rmsd: r,
        n_residues: 20,
    };
    let kind = RewardConfig::with_kind;
    let cases: [(&str, f64, f64); 9] = [
        ("base gdt, GDT .6", base_reward(&kind(BaseKind::Gdt), &m(0.6, 0.0, 0.0)), 9.0),
        ("base rmsd, RMSD 0", base_reward(&kind(BaseKind::Rmsd), &m(0.0, 0.0, 0.0)), 0.0),
        ("base gdt_rmsd, GDT .6 RMSD 4", base_reward(&kind(BaseKind::GdtRmsd), &m(0.6, 0.0, 4.0)), 5.0),
        ("bonus GDT .6", bonus_reward(&kind(BaseKind::Gdt), &m(0.6, 0.0, 4.0)), 10.0),
        ("bonus GDT .3 RMSD 1.5", bonus_reward(&kind(BaseKind::Gdt), &m(0.3, 0.0, 1.5)), 10.0),
        ("bonus GDT .3 RMSD 5", bonus_reward(&kind(BaseKind::Gdt), &m(0.3, 0.0, 5.0)), 0.0),
        ("total gdt, GDT .6 RMSD 4", total_reward(&kind(BaseKind::Gdt), &m(0.6, 0.0, 4.0)), 19.0),
        // Zero RMSD is below the 2 Å threshold, so the RMSD bonus branch pays (2 - 0)·20.
        ("total tm, all-zero metrics", total_reward(&kind(BaseKind::Tm), &m(0.0, 0.0, 0.0)), 40.0),
        ("total gdt_rmsd, GDT .55 RMSD 1", total_reward(&kind(BaseKind::GdtRmsd), &m(0.55, 0.0, 1.0)), 12.3125),
    ];
    // Exact up to the last bit of the decimal weights (0.6 - 0.5 is not exactly 0.1).
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 4.0 * f64::EPSILON * want.abs().max(1.0))
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    outcome(bad.is_empty(), if bad.is_empty() { "9/9 examples reproduced".into() } else { bad.join("; ") })
}

fn clip_table() -> Outcome {
    let (a, b) = (clipped_objective(2.0, 1.0, 0.5), clipped_objective(0.2, -1.0, 0.5));
    outcome(a == 1.5 && b == -0.5, format!("(2, 1, .5) -> {a}, (.2, -1, .5) -> {b}"))
}

fn rider() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rider"));
    c.env_remove("RIDER_SEED");
    c
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("binary runs");
    assert!(out.status.success(), "{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn toy_rl_config(dir: &Path) -> String {
    let path = dir.join("toy.toml");
    std::fs::write(
        &path,
        format!(
            "tasks.n_tasks = 1\ntasks.length = 20\ntasks.seed = {TASK_SEED}\npretrain.learning_rate = {TOY_PRETRAIN_LR}\n\
             rl.epochs = 30\nrl.batch_size = 24\nrl.learning_rate = {TOY_RL_LR}\nreward.base_kind = \"gdt_rmsd\"\n"
        ),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

fn objective_variance(log: &Path) -> f64 {
    let objectives: Vec<f64> = std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .flat_map(|l| serde_json::from_str::<EpochLog>(l).unwrap().objectives)
        .collect();
    sample_variance(&objectives)
}

fn baseline_ablation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (raw, smoothed) = scripted_baseline_stream(&mut rng, 120, 40.0, 6.0, 0.9);
    let f = sample_variance(&raw) / sample_variance(&smoothed);
    let dof = (raw.len() - 1) as f64;
    let critical = FisherSnedecor::new(dof, dof).unwrap().inverse_cdf(F_TEST_LEVEL);

    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_rl_config(dir.path());
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let seed_s = seed.to_string();
        let ck = dir.path().join(format!("pre{seed}.ck"));
        run_ok(rider().args(["pretrain", "--config", &cfg, "--seed", &seed_s, "--out"]).arg(&ck));
        let variance = |mode: &str| {
            let log = dir.path().join(format!("{mode}{seed}.jsonl"));
            run_ok(
                rider()
                    .args(["train-rl", "--config", &cfg, "--seed", &seed_s, "--baseline-mode", mode, "--checkpoint"])
                    .arg(&ck)
                    .arg("--out")
                    .arg(dir.path().join("out.ck"))
                    .arg("--log")
                    .arg(&log),
            );
            objective_variance(&log)
        };
        let reward = variance("reward");
        let moving = variance("moving");
        ratios.push(reward / moving);
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[2];
    outcome(
        f > critical && median >= OBJECTIVE_VARIANCE_RATIO,
        format!("scripted stream F = {f:.1} (critical {critical:.2}); objective variance reward/moving median {median:.1}x over 5 seeds"),
    )
}

fn closed_loop() -> Outcome {
    let params_h = HelixOracleParams::default();
    let oracle = HelixOracle::default();
    let sched = NoiseSchedule::default();
    let encoder = Encoder::new(EncoderConfig::default()).unwrap();
    let tasks = synthetic_tasks(&params_h, 5, 20, &mut ChaCha8Rng::seed_from_u64(TASK_SEED)).unwrap();
    let targets: Vec<RlTarget> = tasks
        .iter()
        .map(|t| RlTarget {
            id: t.id.clone(),
            structure: t.target.clone(),
            embedding: encoder.encode_structure(&t.target).unwrap(),
        })
        .collect();
    let onehots: Vec<_> = tasks.iter().map(|t| t.native.onehot()).collect();
    let examples: Vec<PretrainExample<'_>> = onehots.iter().zip(&targets).map(|(x0, t)| PretrainExample { x0, h: &t.embedding }).collect();
    let reward = RewardConfig::with_kind(BaseKind::GdtRmsd);
    let rl = RlConfig {
        epochs: 30,
        batch_size: 24,
        learning_rate: TOY_RL_LR,
        ..RlConfig::default()
    };
    let pre_cfg = PretrainConfig {
        learning_rate: TOY_PRETRAIN_LR,
        ..PretrainConfig::default()
    };
    let mean_gdt = |r: &[Vec<MetricsReport>]| r.iter().flatten().map(|m| m.gdt_ts).sum::<f64>() / r.iter().flatten().count() as f64;

    let seeds = 3u64;
    let mut gain = [0.0; 5];
    let (mut pre_gdt, mut post_gdt) = (0.0, 0.0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = PolicyParams::init(FeatureSpec::new(encoder.scalar_dim()), &mut rng);
        pretrain(&mut params, &examples, &sched, &pre_cfg, &mut rng).unwrap();
        for (i, t) in targets.iter().enumerate() {
            let one = std::slice::from_ref(t);
            let before = evaluate_deterministic(&params, one, &oracle, &sched, rl.n_steps_rl, 16, seed).unwrap();
            let mut tuned = params.clone();
            let log = train(&mut tuned, one, &oracle, &reward, &rl, &sched, seed * 100 + i as u64, |_| {}).unwrap();
            let after = evaluate_deterministic(&tuned, one, &oracle, &sched, rl.n_steps_rl, 16, seed).unwrap();
            let window = |e: &[EpochLog]| e.iter().map(|x| x.mean_reward).sum::<f64>() / e.len() as f64;
            gain[i] += (window(&log[25..]) - window(&log[..5])) / seeds as f64;
            pre_gdt += mean_gdt(&before) / (seeds as f64 * 5.0);
            post_gdt += mean_gdt(&after) / (seeds as f64 * 5.0);
        }
    }
    let improved = gain.iter().filter(|g| **g > 0.0).count();
    outcome(
        improved >= MIN_IMPROVED_TASKS && post_gdt > pre_gdt,
        format!("{improved}/5 tasks improve (final-5 minus first-5 reward {gain:.1?}); tau=0 GDT_TS {pre_gdt:.4} -> {post_gdt:.4}"),
    )
}

fn equivariance() -> Outcome {
    let encoder = Encoder::new(EncoderConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(4..=40);
        let s = random_structure(&mut rng, n);
        let rot = random_rotation(&mut rng);
        let base = encoder.encode_structure(&s).unwrap();
        let rotated = encoder.encode_structure(&s.transformed(&rot, &Point::zeros())).unwrap();
        let shifted = encoder.encode_structure(&s.transformed(&nalgebra::Matrix3::identity(), &Point::new(10.0, 10.0, 10.0))).unwrap();
        let graph = build_graph(&s, encoder.config().k).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let unpermuted = encoder.encode(&graph).unwrap();
        let permuted = encoder.encode(&graph.permuted(&perm).unwrap()).unwrap();
        for i in 0..n {
            for c in 0..base.scalar[i].len() {
                worst = worst.max((base.scalar[i][c] - rotated.scalar[i][c]).abs());
                worst = worst.max((base.scalar[i][c] - shifted.scalar[i][c]).abs());
            }
            for c in 0..base.vector[i].len() {
                worst = worst.max((rot * base.vector[i][c] - rotated.vector[i][c]).norm());
                worst = worst.max((base.vector[i][c] - shifted.vector[i][c]).norm());
            }
        }
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..unpermuted.scalar[old].len() {
                worst = worst.max((unpermuted.scalar[old][c] - permuted.scalar[new][c]).abs());
            }
            for c in 0..unpermuted.vector[old].len() {
                worst = worst.max((unpermuted.vector[old][c] - permuted.vector[new][c]).norm());
            }
        }
    }
    outcome(worst < EQUIVARIANCE_TOL, format!("max deviation {worst:.1e} over rotation, translation and permutation"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    std::fs::write(
        p("small.toml"),
        "tasks.n_tasks = 2\ntasks.length = 12\npretrain.iterations = 40\nrl.epochs = 3\nrl.batch_size = 10\nrl.n_steps_rl = 8\n",
    )
    .unwrap();
    let target = HelixOracle::default();
    let seq: RnaSequence = "GGACUUCGGUCCAGU".parse().unwrap();
    std::fs::write(p("target.pdb"), rider_core::oracle::FoldingOracle::fold(&target, &seq).unwrap().to_pdb()).unwrap();
    std::fs::write(p("in.fa"), ">a\nACGUACGUAC\n>b\nGGGAAACCCU\n>c\nUUUUAAAAGG\n").unwrap();

    let runs: Vec<(&str, Vec<String>, Vec<&str>)> = vec![
        ("pretrain", vec!["pretrain".into(), "--config".into(), p("small.toml"), "--seed".into(), "5".into(), "--out".into(), "OUT/p.ck".into(), "--log".into(), "OUT/p.jsonl".into()], vec!["p.ck", "p.jsonl"]),
        ("train-rl", vec!["train-rl".into(), "--config".into(), p("small.toml"), "--seed".into(), "5".into(), "--checkpoint".into(), "OUT/p.ck".into(), "--out".into(), "OUT/r.ck".into(), "--log".into(), "OUT/r.jsonl".into()], vec!["r.ck", "r.jsonl"]),
        ("sample", vec!["sample".into(), "--config".into(), p("small.toml"), "--seed".into(), "5".into(), "--checkpoint".into(), "OUT/r.ck".into(), "--target".into(), p("target.pdb"), "-n".into(), "12".into(), "--out".into(), "OUT/s.fa".into(), "--metrics-json".into(), "OUT/s.json".into()], vec!["s.fa", "s.json"]),
        ("fold", vec!["fold".into(), "--fasta".into(), p("in.fa"), "--out-dir".into(), "OUT/folds".into()], vec!["folds/a.pdb", "folds/b.pdb", "folds/c.pdb"]),
    ];
    let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
    for (round, workers) in ["1", "4", "4"].iter().enumerate() {
        let out_dir = p(&format!("round{round}"));
        std::fs::create_dir(&out_dir).unwrap();
        let mut files = Vec::new();
        for (_, args, produced) in &runs {
            let args: Vec<String> = args.iter().map(|a| a.replace("OUT", &out_dir)).collect();
            let out = rider().arg("--workers").arg(workers).args(&args).output().unwrap();
            assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
            files.push(String::from_utf8_lossy(&out.stdout).replace(&out_dir, "OUT").into_bytes());
            for f in produced {
                files.push(std::fs::read(Path::new(&out_dir).join(f)).unwrap());
            }
        }
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1] && outputs[1] == outputs[2];
    let names: Vec<&str> = runs.iter().map(|r| r.0).collect();
    outcome(
        same,
        format!("{} outputs of {} byte-identical across 3 runs (1, 4, 4 workers)", outputs[0].len(), names.join("/")),
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("metric identities under rigid motion", Box::new(|| timed(Some(Duration::from_secs(5)), metric_identities))),
        ("GDT_TS / TM-score match exhaustive search (N <= 8)", Box::new(|| timed(Some(Duration::from_secs(60)), metric_oracle))),
        ("d0 length scale", Box::new(|| timed(None, d0_values))),
        ("variance-preserving schedule", Box::new(|| timed(None, schedule_identities))),
        ("teacher-forced DDIM reconstruction", Box::new(|| timed(None, teacher_forced_reconstruction))),
        ("analytic gradients vs central differences", Box::new(|| timed(Some(Duration::from_secs(30)), gradient_checks))),
        ("reward examples", Box::new(|| timed(None, reward_table))),
        ("clipped objective table", Box::new(|| timed(None, clip_table))),
        ("baseline variance ablation", Box::new(|| timed(None, baseline_ablation))),
        ("closed-loop improvement on helix tasks", Box::new(|| timed(Some(Duration::from_secs(900)), closed_loop))),
        ("encoder equivariance", Box::new(|| timed(None, equivariance))),
        ("seeded CLI runs are reproducible across worker counts", Box::new(|| timed(None, determinism))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let o = check();
        println!("{} #{:<2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
