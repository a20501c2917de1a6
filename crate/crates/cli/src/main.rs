use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use multitap::corpus::load_domain;
use multitap::fixture::{write_fixture, DomainFiles, FixtureConfig};
use multitap::model::{AggregationMode, TransferMode};
use multitap::pipeline::{
    parse_stages, Boundary, ClientMode, HeldOut, PersonaStep, Pipeline, PipelineConfig, RunOptions, Stage,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "multitap", version, about = "Persona-based cross-domain recommendation pipeline")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow remote generator and encoder calls; the API key is read from
    /// the configured environment variable.
    #[arg(long, global = true, conflicts_with = "offline")]
    remote: bool,
    /// Use the offline clients (the default).
    #[arg(long, global = true)]
    offline: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the planted two-domain fixture and a matching config.
    Fixture {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        overlap_users: usize,
        #[arg(long)]
        heterogeneity: Option<f64>,
    },
    /// Validate and normalize domain files (standalone), or run the ingest stage.
    Ingest {
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        metadata: Option<PathBuf>,
    },
    /// Time-aware train/valid/test split.
    Split {
        /// ISO date (`2019-01-01`) or seconds since the epoch.
        #[arg(long)]
        boundary: Option<String>,
        #[arg(long)]
        valid_fraction: Option<f64>,
    },
    /// Heterogeneity analysis and preservation reports.
    Idh {
        /// Export only this domain's report (into `--out` when given).
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, value_delimiter = ',')]
        criteria: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
    },
    /// Persona databases, texts and vectors.
    Persona {
        #[command(subcommand)]
        step: PersonaCmd,
    },
    /// LightGCN ID-embedding pretraining.
    Pretrain {
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Source prerequisite and target training for every seed.
    Train {
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        aggregation: Option<AggregationMode>,
        #[arg(long)]
        transfer: Option<TransferMode>,
        /// Train only this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full-ranking evaluation of trained checkpoints.
    Eval {
        /// Evaluate one checkpoint instead of running the eval stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Run several stages in dependency order.
    Run {
        /// Comma-separated stage names, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Aggregation, transfer and hyperparameter ablations.
    Ablate {
        /// Run only these sweeps, e.g. `lambda=0:2:0.2`.
        #[arg(long)]
        sweep: Vec<String>,
        #[arg(long)]
        seed: Vec<u64>,
    },
}

#[derive(Subcommand)]
enum PersonaCmd {
    /// All three steps for both domains.
    All,
    /// Persona databases from the train history.
    Build {
        #[arg(long)]
        domain: String,
    },
    /// Persona texts from the databases.
    Generate {
        #[arg(long)]
        domain: String,
    },
    /// Persona and item vectors from the texts.
    Encode {
        #[arg(long)]
        domain: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.downcast_ref::<multitap::Error>().map_or("cli", |m| m.kind());
            let msg = format!("{e:#}");
            eprintln!("{}", json!({"error": msg, "kind": kind}));
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let Some(path) = &cli.config else {
        bail!("this command needs --config <path>");
    };
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.remote {
        cfg.persona.client = ClientMode::Remote;
    } else if cli.offline {
        cfg.persona.client = ClientMode::Offline;
    }
    Ok(cfg)
}

fn pipeline(cli: &Cli, cfg: PipelineConfig) -> Result<Pipeline> {
    Ok(Pipeline::new(
        cfg,
        RunOptions {
            allow_remote: cli.remote,
        },
    )?)
}

fn run_stages(cli: &Cli, cfg: PipelineConfig, stages: &[Stage]) -> Result<(Pipeline, Value)> {
    let p = pipeline(cli, cfg)?;
    let status = p.run(stages)?;
    let v = json!({
        "config_hash": p.config_hash(),
        "run_dir": p.root(),
        "stages": status,
    });
    Ok((p, v))
}

fn dispatch(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Fixture {
            seed,
            overlap_users,
            heterogeneity,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("fixture"));
            let mut fc = FixtureConfig {
                seed: *seed,
                overlap_users: *overlap_users,
                ..FixtureConfig::default()
            };
            if let Some(h) = heterogeneity {
                fc.heterogeneity = *h;
            }
            fixture(&out, &fc)
        }
        Command::Ingest {
            domain,
            interactions,
            metadata,
        } => match (interactions, metadata) {
            (Some(i), Some(m)) => ingest_standalone(domain.as_deref().unwrap_or("domain"), i, m, cli.out.as_deref()),
            (None, None) => Ok(run_stages(cli, load_config(cli)?, &[Stage::Ingest])?.1),
            _ => bail!("--interactions and --metadata go together"),
        },
        Command::Split {
            boundary,
            valid_fraction,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(b) = boundary {
                cfg.split.boundary = match b.parse::<i64>() {
                    Ok(t) => Boundary::Timestamp(t),
                    Err(_) => Boundary::Date(b.clone()),
                };
            }
            if let Some(f) = valid_fraction {
                cfg.split.valid_fraction = *f;
            }
            Ok(run_stages(cli, cfg, &[Stage::Split])?.1)
        }
        Command::Idh {
            domain,
            criteria,
            labels,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(cs) = criteria {
                cfg.idh.criteria = cs.iter().map(|c| c.parse()).collect::<Result<_, _>>()?;
            }
            if let Some(ls) = labels {
                cfg.idh.labels = ls.iter().map(|l| l.parse()).collect::<Result<_, _>>()?;
            }
            match domain {
                None => Ok(run_stages(cli, cfg, &[Stage::Idh])?.1),
                Some(d) => {
                    let p = pipeline(cli, cfg)?;
                    p.check_dependencies(Stage::Idh, &Default::default())?;
                    let role = p.role_of(d)?;
                    let out = cli
                        .out
                        .clone()
                        .unwrap_or_else(|| p.stage_dir(Stage::Idh).join(role.name()));
                    let files = p.idh_report(role, &out)?;
                    Ok(json!({"domain": d, "files": files}))
                }
            }
        }
        Command::Persona { step } => {
            let cfg = load_config(cli)?;
            let (domain, step) = match step {
                PersonaCmd::All => return Ok(run_stages(cli, cfg, &[Stage::Persona])?.1),
                PersonaCmd::Build { domain } => (domain, PersonaStep::Build),
                PersonaCmd::Generate { domain } => (domain, PersonaStep::Generate),
                PersonaCmd::Encode { domain } => (domain, PersonaStep::Encode),
            };
            let p = pipeline(cli, cfg)?;
            let role = p.role_of(domain)?;
            p.persona_step(role, step)?;
            Ok(json!({"domain": domain, "step": step.name(), "dir": p.stage_dir(Stage::Persona).join(role.name())}))
        }
        Command::Pretrain { domain, layers, epochs } => {
            let mut cfg = load_config(cli)?;
            if let Some(l) = layers {
                cfg.pretrain.layers = *l;
            }
            if let Some(e) = epochs {
                cfg.pretrain.epochs = *e;
            }
            match domain {
                None => Ok(run_stages(cli, cfg, &[Stage::Pretrain])?.1),
                Some(d) => {
                    let p = pipeline(cli, cfg)?;
                    p.check_dependencies(Stage::Pretrain, &Default::default())?;
                    let files = p.pretrain_role(p.role_of(d)?)?;
                    Ok(json!({"domain": d, "checkpoints": files}))
                }
            }
        }
        Command::Train {
            source,
            target,
            lambda,
            tau,
            aggregation,
            transfer,
            seed,
        } => {
            let mut cfg = load_config(cli)?;
            for (given, configured) in [(source, &cfg.source.name), (target, &cfg.target.name)] {
                if let Some(g) = given {
                    if !g.eq_ignore_ascii_case(configured) {
                        bail!("domain `{g}` does not match the configured `{configured}`");
                    }
                }
            }
            let t = &mut cfg.train;
            if let Some(v) = lambda {
                t.lambda = *v;
            }
            if let Some(v) = tau {
                t.tau = *v;
            }
            if let Some(v) = aggregation {
                t.aggregation = *v;
            }
            if let Some(v) = transfer {
                t.transfer = *v;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![*s];
            }
            Ok(run_stages(cli, cfg, &[Stage::Train])?.1)
        }
        Command::Eval { checkpoint, split, k } => {
            let mut cfg = load_config(cli)?;
            if let Some(ks) = k {
                cfg.eval.ks = ks.clone();
            }
            let heldout: HeldOut = split.parse()?;
            match checkpoint {
                Some(path) => {
                    let p = pipeline(cli, cfg)?;
                    let res = p.evaluate_checkpoint(path, heldout, &p.config().eval.ks)?;
                    Ok(json!({"checkpoint": path, "split": split, "result": res}))
                }
                None => {
                    if heldout != HeldOut::Test {
                        bail!("the eval stage reports the test split; pass --checkpoint to score validation");
                    }
                    let (p, mut v) = run_stages(cli, cfg, &[Stage::Eval])?;
                    v["report"] = serde_json::to_value(p.report()?)?;
                    Ok(v)
                }
            }
        }
        Command::Run { stages } => {
            let cfg = load_config(cli)?;
            let stages = parse_stages(stages)?;
            let (p, mut v) = run_stages(cli, cfg, &stages)?;
            if stages.contains(&Stage::Eval) {
                v["report"] = serde_json::to_value(p.report()?)?;
            }
            Ok(v)
        }
        Command::Ablate { sweep, seed } => {
            let mut cfg = load_config(cli)?;
            if !sweep.is_empty() {
                cfg.ablate.aggregations.clear();
                cfg.ablate.transfers.clear();
                cfg.ablate.sweeps = sweep.clone();
            }
            if !seed.is_empty() {
                cfg.ablate.seeds = seed.clone();
            }
            let (p, mut v) = run_stages(cli, cfg, &[Stage::Ablate])?;
            v["table"] = json!(p.stage_dir(Stage::Ablate).join("ablation.csv"));
            Ok(v)
        }
    }
}

fn fixture(out: &Path, fc: &FixtureConfig) -> Result<Value> {
    let data = out.join("data");
    let (src, tgt) = write_fixture(&data, fc)?;
    // The config refers to files relative to its own directory.
    let rel = |f: &DomainFiles| -> Result<DomainFiles> {
        let strip = |p: &Path| -> Result<PathBuf> {
            Ok(p.strip_prefix(out).context("fixture file outside the fixture dir")?.to_path_buf())
        };
        Ok(DomainFiles {
            domain: f.domain.clone(),
            interactions: strip(&f.interactions)?,
            metadata: strip(&f.metadata)?,
        })
    };
    let cfg = PipelineConfig::for_fixture(&rel(&src)?, &rel(&tgt)?, "run".into(), "cache".into());
    let config_path = out.join("multitap.toml");
    std::fs::write(&config_path, cfg.to_toml()?)?;
    Ok(json!({"config": config_path, "source": src, "target": tgt}))
}

fn ingest_standalone(domain: &str, interactions: &Path, metadata: &Path, out: Option<&Path>) -> Result<Value> {
    let ds = load_domain(interactions, metadata, domain)?;
    let mut v = json!({
        "domain": domain,
        "interactions": ds.interactions().len(),
        "users": ds.users().len(),
        "items": ds.items().len(),
        "categories": ds.categories().len(),
    });
    if let Some(dir) = out {
        let name = domain.to_ascii_lowercase();
        let i = dir.join(format!("{name}.interactions.jsonl"));
        let m = dir.join(format!("{name}.meta.jsonl"));
        ds.write_jsonl(&i, &m)?;
        v["written"] = json!([i, m]);
    }
    Ok(v)
}
