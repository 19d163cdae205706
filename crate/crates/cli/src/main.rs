use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use lamp_core::alignment::MotionInput;
use lamp_core::captioner::{self, lamp_bertscore};
use lamp_core::config::{resolve_config, RunConfig};
use lamp_core::corpus::{self, MotionSequence};
use lamp_core::generator::{self, attention_rank_check, AttentionMode};
use lamp_core::invariants;
use lamp_core::pipeline::{self, RunDir};
use lamp_core::retrieval::{self, Modality};

/// Directory that holds run directories when neither `--out` nor `out_dir` is given.
const CACHE_ENV: &str = "LAMP_CACHE_DIR";

#[derive(Parser)]
#[command(name = "lamp", version, about = "Language-motion pretraining toolkit")]
struct Cli {
    /// JSON config file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `generator.alpha=2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Global seed; stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for data, checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Text2motion,
    Motion2text,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attention {
    Causal,
    Bidirectional,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus to `<out>/data`.
    MakeSynthetic,
    /// Train the motion tokenizer.
    TrainVq,
    /// Train the language-motion alignment model.
    TrainLamp,
    /// Train the text-to-motion generator.
    TrainT2m,
    /// Train the motion captioner.
    TrainM2t,
    /// Run every stage, then evaluate.
    RunAll,
    /// Generate a motion from text.
    Generate {
        #[arg(long)]
        text: String,
        /// Motion output (raw little-endian f32); defaults to `<out>/generated/motion.f32`.
        #[arg(long)]
        motion: Option<PathBuf>,
        /// JSON sidecar; defaults to the motion path with a `.json` extension.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Rank motions for a text, or texts for a motion.
    Retrieve {
        #[arg(long, value_enum)]
        mode: Mode,
        /// A text, or a motion given as a sample id or a `.f32` file.
        #[arg(long)]
        query: String,
        /// Dataset directory to search; defaults to `<out>/data`.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        json: bool,
        /// Rescore the head of a text-to-motion ranking with the matching head.
        #[arg(long)]
        rerank_matching: bool,
    },
    /// Caption a motion file.
    Caption {
        #[arg(long)]
        motion: PathBuf,
        /// Also write the caption to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate every trained model on the test split.
    Evaluate {
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Numerical rank of random softmax attention matrices.
    RankCheck {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d_head: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_enum, default_value = "causal")]
        attention: Attention,
    },
    /// Run the property checks.
    Selftest,
    /// Token-level BertScore between two texts using the trained alignment model.
    Bertscore {
        #[arg(long)]
        candidate: String,
        #[arg(long)]
        reference: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.insert(0, format!("seed={s}"));
    }
    let mut config = resolve_config(cli.config.as_deref(), &overrides)?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    } else if !overrides.iter().any(|o| o.starts_with("out_dir=")) {
        if let Some(cache) = std::env::var_os(CACHE_ENV) {
            config.out_dir = PathBuf::from(cache).join("default");
        }
    }
    Ok(config)
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn open_run(config: &RunConfig) -> Result<RunDir> {
    let run = RunDir::new(&config.out_dir)?;
    config.write_resolved(run.root())?;
    Ok(run)
}

fn read_motion(path: &Path, dim: usize) -> Result<MotionSequence> {
    MotionSequence::read_f32(path, dim).with_context(|| format!("reading motion {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    let config = load_config(&cli)?;
    init_logging(&config.log_level);
    match cli.command {
        Command::MakeSynthetic => {
            let run = open_run(&config)?;
            let ds = pipeline::make_synthetic(&config, &run)?;
            println!("wrote {} samples to {}", ds.len(), run.path(pipeline::DATA_DIR).display());
        }
        Command::TrainVq => print_json(&pipeline::train_vq(&config, &open_run(&config)?)?)?,
        Command::TrainLamp => print_json(&pipeline::train_lamp(&config, &open_run(&config)?)?)?,
        Command::TrainT2m => print_json(&pipeline::train_t2m(&config, &open_run(&config)?)?)?,
        Command::TrainM2t => print_json(&pipeline::train_m2t(&config, &open_run(&config)?)?)?,
        Command::RunAll => print_json(&pipeline::run_all(&config, &open_run(&config)?)?)?,
        Command::Generate { text, motion, meta } => {
            let run = RunDir::new(&config.out_dir)?;
            let t2m = run.t2m()?;
            let (tok, lamp) = (run.tokenizer()?, run.lamp()?);
            let out = generator::generate(&text, &lamp, &tok, &t2m, &config.generator)?;
            let motion_path = motion.unwrap_or_else(|| run.path("generated").join("motion.f32"));
            if let Some(dir) = motion_path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            out.motion.write_f32(&motion_path)?;
            let meta_path = meta.unwrap_or_else(|| motion_path.with_extension("json"));
            let g = &config.generator;
            let sidecar = json!({
                "text": text,
                "seed": g.seed,
                "alpha": g.alpha,
                "iterations": g.iterations,
                "attention": g.attention,
                "frames": out.motion.frames(),
                "dim": out.motion.dim(),
                "tokens": out.tokens.tokens,
            });
            std::fs::write(&meta_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
            println!("{}", motion_path.display());
        }
        Command::Retrieve { mode, query, index, k, json, rerank_matching } => {
            let run = RunDir::new(&config.out_dir)?;
            let (tok, lamp) = (run.tokenizer()?, run.lamp()?);
            let data_dir = match index {
                Some(p) => p,
                None => run.require(pipeline::DATA_DIR)?,
            };
            let ds = corpus::load_dataset(&data_dir)?;
            let k = k.unwrap_or(config.retrieval.k);
            let result = match mode {
                Mode::Text2motion => {
                    let idx = retrieval::build_index(&ds, &lamp, &tok, Modality::Motion)?;
                    let q = lamp.text_features(&query)?;
                    if rerank_matching || config.retrieval.rerank_matching {
                        let wide = retrieval::retrieve(&query, &q, &idx, k.max(config.retrieval.rerank_top))?;
                        let motions = ds
                            .records()
                            .iter()
                            .zip(ds.motions())
                            .map(|(r, m)| Ok((r.id.clone(), MotionInput::from_raw(&tok, m)?)))
                            .collect::<lamp_core::Result<BTreeMap<_, _>>>()?;
                        let mut r = retrieval::rerank_matching(&wide, &query, &motions, &lamp, config.retrieval.rerank_top)?;
                        r.ranked.truncate(k);
                        r
                    } else {
                        retrieval::retrieve(&query, &q, &idx, k)?
                    }
                }
                Mode::Motion2text => {
                    if rerank_matching {
                        bail!("--rerank-matching applies to text2motion only");
                    }
                    let motion = match ds.records().iter().position(|r| r.id == query) {
                        Some(i) => ds.motion(i).clone(),
                        None => read_motion(Path::new(&query), tok.input_dim())?,
                    };
                    let idx = retrieval::build_index(&ds, &lamp, &tok, Modality::Text)?;
                    let f = lamp.motion_features(&MotionInput::from_raw(&tok, &motion)?)?;
                    retrieval::retrieve(&query, &f.values, &idx, k)?
                }
            };
            if json {
                print_json(&result)?;
            } else {
                for (rank, (id, score)) in result.ranked.iter().enumerate() {
                    println!("{:>3}  {score:>9.4}  {id}", rank + 1);
                }
            }
        }
        Command::Caption { motion, output } => {
            let run = RunDir::new(&config.out_dir)?;
            let m2t = run.captioner()?;
            let (tok, lamp) = (run.tokenizer()?, run.lamp()?);
            let text = captioner::caption(&read_motion(&motion, tok.input_dim())?, &tok, &lamp, &m2t)?;
            if let Some(p) = output {
                std::fs::write(&p, format!("{text}\n"))?;
            }
            println!("{text}");
        }
        Command::Evaluate { repeats } => {
            let mut config = config;
            if let Some(r) = repeats {
                config.eval.repeats = r;
            }
            config.validate()?;
            let report = pipeline::evaluate(&config, &open_run(&config)?)?;
            print_json(&report)?;
        }
        Command::RankCheck { n, d_head, trials, attention } => {
            let mode = match attention {
                Attention::Causal => AttentionMode::Causal,
                Attention::Bidirectional => AttentionMode::Bidirectional,
            };
            let report = attention_rank_check(n, d_head, mode, trials, config.seed)?;
            print_json(&json!({
                "mode": report.mode,
                "n": n,
                "d_head": d_head,
                "trials": trials,
                "full_rank_fraction": report.full_rank_fraction(),
                "min_rank": report.ranks.iter().min(),
                "max_rank": report.ranks.iter().max(),
                "min_diagonal": (mode == AttentionMode::Causal).then_some(report.min_diagonal),
                "causal_invariants_hold": report.causal_invariants_hold,
            }))?;
            return Ok(mode == AttentionMode::Bidirectional || report.causal_invariants_hold);
        }
        Command::Selftest => {
            let checks = invariants::run_all();
            for c in &checks {
                println!("{} {:<28} {:>7.2}s  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            return Ok(failed == 0);
        }
        Command::Bertscore { candidate, reference } => {
            let lamp = RunDir::new(&config.out_dir)?.lamp()?;
            print_json(&lamp_bertscore(&candidate, &reference, &lamp)?)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
