use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rider_core::config::RunConfig;
use rider_core::diffusion::{pretrain, sample_sequence, PretrainExample};
use rider_core::encoder::Encoder;
use rider_core::featurize::{build_graph_with, EdgeLayout};
use rider_core::metrics::{metrics_report, MetricsReport};
use rider_core::oracle::{FoldingOracle, Task};
use rider_core::policy::{FeatureSpec, PolicyParams};
use rider_core::rewards::{reward_breakdown, RewardConfig};
use rider_core::rl::{train, trajectory_rng, RlTarget};
use rider_core::struct_io::{parse_fasta, parse_pdb_backbone_from, sequence_to_onehot, BackboneStructure, RnaSequence};
use rider_core::{Error, Result};
use serde_json::json;

use crate::Command;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Score { predicted, target, json } => score(&predicted, &target, json.as_deref()),
        Command::Featurize {
            pdb,
            k,
            dump_json,
            embed_json,
            run,
        } => featurize(&pdb, k, dump_json.as_deref(), embed_json.as_deref(), &run.load()?),
        Command::Sample {
            checkpoint,
            target,
            n,
            temperature,
            steps,
            out,
            metrics_json,
            no_oracle,
            run,
        } => {
            let mut cfg = run.load()?;
            if let Some(t) = temperature {
                cfg.sampler.temperature = t;
            }
            if let Some(s) = steps {
                cfg.sampler.n_steps = s;
            }
            cfg.sampler.validate()?;
            if no_oracle {
                cfg.oracle.kind = rider_core::config::OracleKind::None;
            }
            sample(&cfg, &checkpoint, &target, n, out.as_deref(), metrics_json.as_deref())
        }
        Command::Pretrain { out, log, iterations, run } => {
            let mut cfg = run.load()?;
            if let Some(i) = iterations {
                cfg.pretrain.iterations = i;
            }
            pretrain_cmd(&cfg, &out, log.as_deref())
        }
        Command::TrainRl {
            checkpoint,
            out,
            log,
            epochs,
            baseline_mode,
            batch_size,
            learning_rate,
            run,
        } => {
            let mut cfg = run.load()?;
            if let Some(e) = epochs {
                cfg.rl.epochs = e;
            }
            if let Some(m) = baseline_mode {
                cfg.rl.baseline_mode = m.parse()?;
            }
            if let Some(b) = batch_size {
                cfg.rl.batch_size = b;
            }
            if let Some(lr) = learning_rate {
                cfg.rl.learning_rate = lr;
            }
            cfg.rl.validate()?;
            train_rl(&cfg, &checkpoint, &out, log.as_deref())
        }
        Command::Reward {
            gdt,
            tm,
            rmsd,
            predicted,
            target,
            kind,
            run,
        } => {
            let mut reward = run.load()?.reward;
            if let Some(k) = kind {
                reward.base_kind = k.parse()?;
            }
            let metrics = match (gdt, tm, rmsd, predicted, target) {
                (Some(gdt_ts), Some(tm_score), Some(rmsd), _, _) => MetricsReport {
                    gdt_ts,
                    tm_score,
                    rmsd,
                    n_residues: 0,
                },
                (_, _, _, Some(p), Some(t)) => metrics_report(&read_structure(&p)?, &read_structure(&t)?)?,
                _ => return Err(Error::Config("give --gdt/--tm/--rmsd or --predicted/--target".into())),
            };
            reward_cmd(&reward, &metrics)
        }
        Command::Fold {
            sequence,
            fasta,
            out,
            out_dir,
            run,
        } => {
            let records = match (sequence, fasta) {
                (Some(s), _) => vec![("design".to_string(), sequence_to_onehot(s.trim())?)],
                (_, Some(path)) => parse_fasta(&std::fs::read_to_string(path)?)?,
                _ => return Err(Error::Config("give --sequence or --fasta".into())),
            };
            fold(&run.load()?, &records, out.as_deref(), out_dir.as_deref())
        }
        Command::Config { defaults, check } => {
            let cfg = match check {
                Some(path) if !defaults => RunConfig::load(&path)?,
                _ => RunConfig::default(),
            };
            print!("{}", cfg.to_flat());
            Ok(())
        }
    }
}

fn read_structure(path: &Path) -> Result<BackboneStructure> {
    let text = std::fs::read_to_string(path)?;
    let parsed = parse_pdb_backbone_from(&text, &path.to_string_lossy())?;
    if parsed.dropped > 0 {
        warn!("{}: dropped {} incomplete residues", path.display(), parsed.dropped);
    }
    Ok(parsed.structure)
}

/// Writes `text` to `path`, or to stdout when there is no path.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn score(predicted: &Path, target: &Path, json: Option<&Path>) -> Result<()> {
    let report = metrics_report(&read_structure(predicted)?, &read_structure(target)?)?;
    emit(json, &format!("{}\n", report.to_json()))
}

fn featurize(pdb: &Path, k: usize, dump: Option<&Path>, embed: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let s = read_structure(pdb)?;
    let graph = build_graph_with(&s, k, EdgeLayout::Compact)?;
    let summary = json!({
        "n_nodes": graph.n_nodes,
        "n_edges": graph.n_edges(),
        "k": k,
        "node_scalar_dim": graph.node_scalar.first().map_or(0, Vec::len),
        "node_vector_dim": graph.node_vector.first().map_or(0, Vec::len),
        "edge_scalar_dim": graph.layout.scalar_dim(),
        "edge_vector_dim": graph.layout.vector_dim(),
    });
    if let Some(path) = dump {
        std::fs::write(path, serde_json::to_string(&graph).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    if let Some(path) = embed {
        let h = Encoder::new(cfg.encoder.clone())?.encode_structure(&s)?;
        std::fs::write(path, serde_json::to_string(&h).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    emit(None, &format!("{summary}\n"))
}

fn load_checkpoint(path: &Path, encoder: &Encoder) -> Result<PolicyParams> {
    let params = PolicyParams::read_checkpoint(std::io::BufReader::new(File::open(path)?))?;
    let want = FeatureSpec::new(encoder.scalar_dim());
    if params.spec != want {
        return Err(Error::Shape(format!(
            "checkpoint expects {} conditioning channels, encoder gives {}",
            params.spec.h_dim, want.h_dim
        )));
    }
    Ok(params)
}

fn sample(cfg: &RunConfig, checkpoint: &Path, target: &Path, n: usize, out: Option<&Path>, metrics_json: Option<&Path>) -> Result<()> {
    let structure = read_structure(target)?;
    let encoder = Encoder::new(cfg.encoder.clone())?;
    let params = load_checkpoint(checkpoint, &encoder)?;
    let h = encoder.encode_structure(&structure)?;
    let oracle = cfg.build_oracle()?;
    let designs: Vec<(RnaSequence, Option<MetricsReport>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(cfg.run.seed, 0, i);
            let (seq, _) = sample_sequence(&params, &h, &cfg.schedule, &cfg.sampler, &mut rng)?;
            let metrics = match &oracle {
                Some(o) => Some(metrics_report(&o.fold(&seq)?, &structure)?),
                None => None,
            };
            Ok((seq, metrics))
        })
        .collect::<Result<_>>()?;

    let fasta: String = designs
        .iter()
        .enumerate()
        .map(|(i, (seq, _))| seq.to_fasta(&format!("design_{i} temperature={}", cfg.sampler.temperature)))
        .collect();
    emit(out, &fasta)?;

    if oracle.is_some() {
        let rows: Vec<String> = designs
            .iter()
            .enumerate()
            .filter_map(|(i, (seq, m))| m.map(|m| (i, seq, m)))
            .map(|(i, seq, m)| {
                let r = reward_breakdown(&cfg.reward, &m);
                format!(
                    "{{\"id\":\"design_{i}\",\"sequence\":\"{seq}\",\"metrics\":{},\"reward\":{:.6}}}",
                    m.to_json(),
                    r.total
                )
            })
            .collect();
        match metrics_json {
            Some(path) => std::fs::write(path, format!("[\n{}\n]\n", rows.join(",\n")))?,
            None => {
                for (i, (_, m)) in designs.iter().enumerate() {
                    if let Some(m) = m {
                        eprintln!("design_{i}\tgdt_ts {:.4}\ttm {:.4}\trmsd {:.3}", m.gdt_ts, m.tm_score, m.rmsd);
                    }
                }
            }
        }
    } else if metrics_json.is_some() {
        warn!("no oracle configured; --metrics-json not written");
    }
    Ok(())
}

fn rl_targets(tasks: &[Task], encoder: &Encoder) -> Result<Vec<RlTarget>> {
    tasks
        .par_iter()
        .map(|t| {
            Ok(RlTarget {
                id: t.id.clone(),
                structure: t.target.clone(),
                embedding: encoder.encode_structure(&t.target)?,
            })
        })
        .collect()
}

fn pretrain_cmd(cfg: &RunConfig, out: &Path, log: Option<&Path>) -> Result<()> {
    let tasks = cfg.build_tasks()?;
    let encoder = Encoder::new(cfg.encoder.clone())?;
    let targets = rl_targets(&tasks, &encoder)?;
    let onehots: Vec<_> = tasks.iter().map(|t| t.native.onehot()).collect();
    let examples: Vec<PretrainExample<'_>> = onehots
        .iter()
        .zip(&targets)
        .map(|(x0, t)| PretrainExample { x0, h: &t.embedding })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut params = PolicyParams::init(FeatureSpec::new(encoder.scalar_dim()), &mut rng);
    let losses = if cfg.pretrain.iterations == 0 {
        Vec::new()
    } else {
        pretrain(&mut params, &examples, &cfg.schedule, &cfg.pretrain, &mut rng)?
    };
    std::fs::write(out, params.to_checkpoint_bytes())?;
    if let Some(path) = log {
        let mut w = BufWriter::new(File::create(path)?);
        for (i, l) in losses.iter().enumerate() {
            writeln!(w, "{}", json!({"iteration": i, "loss": l}))?;
        }
        w.flush()?;
    }
    let tail = &losses[losses.len().saturating_sub(20)..];
    let summary = json!({
        "iterations": losses.len(),
        "tasks": tasks.len(),
        "first_loss": losses.first(),
        "final_loss_mean20": (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
        "checkpoint": out.to_string_lossy(),
    });
    emit(None, &format!("{summary}\n"))
}

fn train_rl(cfg: &RunConfig, checkpoint: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let encoder = Encoder::new(cfg.encoder.clone())?;
    let mut params = load_checkpoint(checkpoint, &encoder)?;
    let mut log_file = match log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    if cfg.rl.epochs == 0 {
        std::fs::copy(checkpoint, out)?;
        emit(None, &format!("{}\n", json!({"epochs": 0, "checkpoint": out.to_string_lossy()})))?;
        return Ok(());
    }
    let oracle = cfg
        .build_oracle()?
        .ok_or_else(|| Error::Config("train-rl needs an oracle (oracle.kind)".into()))?;
    let targets = rl_targets(&cfg.build_tasks()?, &encoder)?;
    let mut io_error = None;
    let history = train(
        &mut params,
        &targets,
        oracle.as_ref(),
        &cfg.reward,
        &cfg.rl,
        &cfg.schedule,
        cfg.run.seed,
        |entry| {
            info!(
                "epoch {:>3}  reward {:8.3}  baseline {:8.3}  clip {:.3}  det gdt {:.3}",
                entry.epoch, entry.mean_reward, entry.baseline, entry.clip_frac, entry.det_gdt
            );
            if let (Some(w), None) = (log_file.as_mut(), io_error.as_ref()) {
                if let Err(e) = writeln!(w, "{}", entry.to_json_line()) {
                    io_error = Some(e);
                }
            }
        },
    );
    if let Some(w) = log_file.as_mut() {
        w.flush()?;
    }
    let history = history?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    std::fs::write(out, params.to_checkpoint_bytes())?;
    let mean = |xs: &[rider_core::rl::EpochLog]| xs.iter().map(|e| e.mean_reward).sum::<f64>() / xs.len() as f64;
    let k = history.len().min(5);
    let summary = json!({
        "epochs": history.len(),
        "first5_mean_reward": mean(&history[..k]),
        "last5_mean_reward": mean(&history[history.len() - k..]),
        "checkpoint": out.to_string_lossy(),
    });
    emit(None, &format!("{summary}\n"))
}

fn reward_cmd(reward: &RewardConfig, m: &MetricsReport) -> Result<()> {
    reward.validate()?;
    let b = reward_breakdown(reward, m);
    emit(
        None,
        &format!("{}\n", json!({"kind": reward.base_kind, "base": b.base, "bonus": b.bonus, "total": b.total})),
    )
}

fn fold(cfg: &RunConfig, records: &[(String, RnaSequence)], out: Option<&Path>, out_dir: Option<&Path>) -> Result<()> {
    let oracle: Box<dyn FoldingOracle> = cfg
        .build_oracle()?
        .ok_or_else(|| Error::Config("fold needs an oracle (oracle.kind)".into()))?;
    let folds: Vec<BackboneStructure> = records.par_iter().map(|(_, s)| oracle.fold(s)).collect::<Result<_>>()?;
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            for ((id, _), s) in records.iter().zip(&folds) {
                let name = id.split_whitespace().next().unwrap_or("design");
                let path: PathBuf = dir.join(format!("{name}.pdb"));
                std::fs::write(path, s.to_pdb())?;
            }
            Ok(())
        }
        None if folds.len() == 1 => emit(out, &folds[0].to_pdb()),
        None => Err(Error::Config(format!("{} sequences need --out-dir", folds.len()))),
    }
}
