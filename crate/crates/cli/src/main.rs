use clap::{Args, Parser, Subcommand};
use regionprompt::ablation::{format_rows, run_ablation, TABLES};
use regionprompt::checkpoint::Checkpoint;
use regionprompt::config::{hex, Config};
use regionprompt::dataset::{read_records, split_by_kind, write_records};
use regionprompt::geometry::{partition, ClassId, Split};
use regionprompt::harness::{evaluate, evaluate_params, export_embeddings, import_embeddings};
use regionprompt::prompt::{ClassTokenTable, TOKEN_HEADER};
use regionprompt::synth::gen_benchmark;
use regionprompt::trainer::{build_encoder, class_embeddings, gradcheck, train_all};
use regionprompt::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const TRAIN_FILE: &str = "train.jsonl";
const EVAL_FILE: &str = "eval.jsonl";
const TOKEN_FILE: &str = "tokens.txt";

#[derive(Parser)]
#[command(name = "regionprompt", version, about = "Train and evaluate prompt contexts for region classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        Config::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark into a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train contexts on a data directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint, or a class-embedding file, on the evaluation
    /// records of a data directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
        checkpoint: Option<PathBuf>,
        /// Class embeddings written by `export` or computed elsewhere; the
        /// encoder is not used. Settings come from --config and --set.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest accepted relative error; defaults to 1e-5, or 1e-4 when
        /// the temperature is at most 0.01.
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the class embeddings of a checkpoint.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// base, novel or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Train and evaluate every cell of the ablation tables.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated table names; all tables by default.
        #[arg(long, value_delimiter = ',')]
        tables: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn tokens(dir: &Path) -> Result<ClassTokenTable<f64>> {
    ClassTokenTable::read_text(dir.join(TOKEN_FILE), &[TOKEN_HEADER])
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth { out, cfg } => {
            let c = cfg.load()?;
            let encoder = build_encoder::<f64>(&c.train);
            let bench = gen_benchmark(&c.synth, &encoder, c.train.context_len)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.display().to_string(), source: e })?;
            write_records(out.join(TRAIN_FILE), &bench.train.records)?;
            write_records(out.join(EVAL_FILE), &bench.eval.records)?;
            bench.tokens.write_text(out.join(TOKEN_FILE), TOKEN_HEADER)?;
            println!("records\ttrain\t{}", bench.train.records.len());
            println!("records\teval\t{}", bench.eval.records.len());
            println!("classes\tall\t{}", bench.tokens.len());
        }
        Command::Train { data, out, cfg } => {
            let c = cfg.load()?;
            let table = tokens(&data)?;
            let (gts, props) = split_by_kind(read_records::<f64>(data.join(TRAIN_FILE))?);
            let part = partition(&props, &gts, c.train.iou_threshold)?;
            let encoder = build_encoder(&c.train);
            let run = train_all(&part, &c.train, &encoder, &table)?;
            for (i, g) in run.groups.iter().enumerate() {
                let name = format!("group{i}[{:.2},{:.2}]", g.lo, g.hi);
                println!("positives\t{name}\t{}", g.positives);
                println!("initial_loss\t{name}\t{}", g.initial_loss);
                println!("final_loss\t{name}\t{}", g.final_loss);
            }
            for k in &run.skipped {
                println!("skipped_group\tall\t{k}");
            }
            let ckpt = Checkpoint::from_run(&run, &c);
            ckpt.save(&out)?;
            println!("config_hash\tall\t{}", hex(&ckpt.config_hash));
        }
        Command::Eval {
            data,
            checkpoint,
            embeddings,
            cfg,
        } => {
            let table = tokens(&data)?;
            let records = read_records::<f64>(data.join(EVAL_FILE))?;
            let report = match (checkpoint, embeddings) {
                (Some(path), _) => {
                    if cfg.config.is_some() || !cfg.set.is_empty() {
                        return Err(Error::Config(
                            "a checkpoint carries its own configuration; --config and --set apply only with --embeddings".into(),
                        ));
                    }
                    let ckpt = Checkpoint::<f64>::load(&path)?;
                    let c = ckpt.config()?;
                    let encoder = build_encoder(&c.train);
                    evaluate_params(&records, &ckpt.params(), &encoder, &table, &c.train, &ckpt.config_hash)?
                }
                (None, Some(path)) => {
                    let c = cfg.load()?;
                    let embs = import_embeddings::<f64>(&path)?;
                    evaluate(&records, &embs, &table, &c.train, &c.hash())?
                }
                (None, None) => return Err(Error::Config("eval needs --checkpoint or --embeddings".into())),
            };
            print!("{}", report.to_text());
        }
        Command::Gradcheck {
            instances,
            seed,
            tolerance,
            cfg,
        } => {
            let c = cfg.load()?;
            let tol = tolerance.unwrap_or(if c.train.temperature <= 0.01 { 1e-4 } else { 1e-5 });
            let reports = gradcheck(&c.train, seed, instances)?;
            let mut ok = true;
            for mode in regionprompt::losses::BgMode::ALL {
                let worst = reports
                    .iter()
                    .filter(|r| r.mode == mode)
                    .map(|r| r.max_rel_error)
                    .fold(0.0, f64::max);
                ok &= worst <= tol;
                println!("max_rel_error\t{mode}\t{worst:e}");
            }
            println!("tolerance\tall\t{tol:e}");
            println!("passed\tall\t{ok}");
            if !ok {
                return Ok(1);
            }
        }
        Command::Export {
            data,
            checkpoint,
            out,
            split,
        } => {
            let ckpt = Checkpoint::<f64>::load(&checkpoint)?;
            let c = ckpt.config()?;
            let table = tokens(&data)?;
            let ids: Vec<ClassId> = match split.as_str() {
                "all" => table.all_ids(),
                s => table.ids(
                    s.parse::<Split>()
                        .map_err(|_| Error::Config(format!("--split must be base, novel or all, got {s:?}")))?,
                ),
            };
            let encoder = build_encoder(&c.train);
            let embs = class_embeddings(
                &ckpt.params(),
                c.train.ensemble_level,
                c.train.token_position,
                &encoder,
                &table,
                &ids,
            )?;
            export_embeddings(&embs, &table, &out)?;
            println!("classes\t{split}\t{}", embs.len());
        }
        Command::Ablate { data, tables, cfg } => {
            let c = cfg.load()?;
            let names: Vec<&str> = if tables.is_empty() {
                TABLES.to_vec()
            } else {
                for t in &tables {
                    if !TABLES.contains(&t.as_str()) {
                        return Err(Error::Config(format!(
                            "unknown table {t:?}; expected one of {}",
                            TABLES.join(", ")
                        )));
                    }
                }
                tables.iter().map(String::as_str).collect()
            };
            let table = tokens(&data)?;
            let train = read_records::<f64>(data.join(TRAIN_FILE))?;
            let eval = read_records::<f64>(data.join(EVAL_FILE))?;
            let rows = run_ablation(&c, &names, &train, &eval, &table)?;
            print!("{}", format_rows(&rows));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
