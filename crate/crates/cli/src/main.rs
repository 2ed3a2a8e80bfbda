use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, warn};

use mvnas::cost::cost_model;
use mvnas::data::{load_directory, save_directory, split_train_val, synth_generate, Dataset};
use mvnas::eval::{evaluate, retrain, write_retrain_csv, TrainedModel};
use mvnas::genotype::{derive_genotype, Genotype};
use mvnas::pipeline::{seed_study, ExperimentConfig};
use mvnas::search::{alpha_entropy, run_epochs, write_log_csv, SearchState};
use mvnas::Error;

#[derive(Parser, Debug)]
#[command(name = "mvnas", version, about = "Multi-view architecture search on a desk budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for search and retraining (synthetic data seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON experiment configuration; missing fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "mvnas-out")]
    out: PathBuf,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-view dataset to <out>/train and <out>/test.
    Synth,
    /// Search cells and loss weights; writes genotype.json, search_log.csv and checkpoint.json.
    Search {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        /// Continue from a checkpoint written by an earlier search.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Derive a genotype from a search checkpoint.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print parameter and MAC counts of a genotype.
    Cost {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Retrain a genotype on the full training set; writes model.json and retrain_log.csv.
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        /// Comma-separated fixed loss weights, e.g. 1,0,0.
        #[arg(long)]
        loss_weights: Option<String>,
        /// Cosine learning-rate decay.
        #[arg(long)]
        cosine: bool,
    },
    /// Evaluate a retrained model on the test set; writes metrics.json.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a genotype as Graphviz DOT and normalized JSON.
    Export {
        #[arg(long)]
        genotype: PathBuf,
    },
    /// Run search, derivation, retraining and evaluation for several seeds.
    Seeds {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        retrain_epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_text(path: &Path) -> mvnas::Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> mvnas::Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> mvnas::Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn load_config(path: Option<&Path>) -> mvnas::Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn load_genotype(path: &Path) -> mvnas::Result<Genotype> {
    Genotype::from_json(&read_text(path)?)
}

/// Training and test sets: `<dir>/train` and `<dir>/test` when present,
/// otherwise `dir` for both; synthesized from the config without `--data`.
fn load_data(dir: Option<&Path>, cfg: &ExperimentConfig) -> mvnas::Result<(Dataset, Dataset)> {
    let Some(dir) = dir else {
        info!("no --data given, synthesizing {:?}", cfg.synth);
        return synth_generate(&cfg.synth);
    };
    let (train_dir, test_dir) = (dir.join("train"), dir.join("test"));
    if train_dir.is_dir() {
        let train = load_directory(&train_dir, None)?;
        let test = if test_dir.is_dir() {
            load_directory(&test_dir, Some(train.resolution))?
        } else {
            train.clone()
        };
        Ok((train, test))
    } else {
        let data = load_directory(dir, None)?;
        Ok((data.clone(), data))
    }
}

fn fit_network_to(cfg: &mut ExperimentConfig, data: &Dataset) {
    cfg.network.n_views = data.n_views;
    cfg.network.input_resolution = data.resolution;
    cfg.network.num_classes = data.num_classes();
    cfg.network.input_channels = data.channels;
}

fn set_search_epochs(cfg: &mut ExperimentConfig, epochs: usize) {
    cfg.search.epochs = epochs;
    if epochs > 0 && cfg.search.warmup_epochs >= epochs {
        let warmup = epochs / 2;
        warn!(
            "warmup of {} epochs does not fit in {epochs}; using {warmup}",
            cfg.search.warmup_epochs
        );
        cfg.search.warmup_epochs = warmup;
    }
}

fn parse_weights(text: &str) -> mvnas::Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Validation(format!("--loss-weights '{text}': {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Validation(format!("--loss-weights needs three values, got '{text}'")))
}

fn run(cli: Cli) -> mvnas::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth => {
            if let Some(seed) = cli.seed {
                cfg.synth.seed = seed;
            }
            let (train, test) = synth_generate(&cfg.synth)?;
            save_directory(&train, &out.join("train"))?;
            save_directory(&test, &out.join("test"))?;
            println!(
                "wrote {} training and {} test shapes ({} classes, {} views, {}x{}) to {}",
                train.len(),
                test.len(),
                train.num_classes(),
                train.n_views,
                train.resolution,
                train.resolution,
                out.display()
            );
        }
        Command::Search {
            data,
            epochs,
            channels,
            resume,
        } => {
            let (train, _) = load_data(data.as_deref(), &cfg)?;
            create_dir(out)?;
            let start = Instant::now();
            let (mut state, net) = match resume {
                Some(path) => {
                    let mut state = SearchState::load(&path)?;
                    if let Some(e) = epochs {
                        state.config.epochs = e;
                    }
                    let net = state.network()?;
                    (state, net)
                }
                None => {
                    if let Some(seed) = cli.seed {
                        cfg.search.seed = seed;
                    }
                    if let Some(e) = epochs {
                        set_search_epochs(&mut cfg, e);
                    }
                    if let Some(c) = channels {
                        cfg.network.init_channels = c;
                    }
                    fit_network_to(&mut cfg, &train);
                    SearchState::new(&cfg.search, &cfg.network)?
                }
            };
            let (tr, val) = split_train_val(&train, state.config.val_fraction, state.config.seed)?;
            let checkpoint = out.join("checkpoint.json");
            run_epochs(&mut state, &net, &tr, &val, |s| s.save(&checkpoint))?;
            let genotype = derive_genotype(&state.arch, &state.net_config)?;
            write_text(&out.join("genotype.json"), &genotype.to_json()?)?;
            write_text(&out.join("genotype.dot"), &genotype.to_dot()?)?;
            write_log_csv(&state.log, &out.join("search_log.csv"))?;
            let summary = serde_json::json!({
                "epochs": state.epochs_done,
                "seconds": start.elapsed().as_secs_f64(),
                "loss_weights": state.arch.lambda.weights(),
                "lambda_logits": state.arch.lambda.logits,
                "alpha_entropy": state.log.iter().map(|l| l.alpha_entropy).collect::<Vec<_>>(),
                "final_alpha_entropy": alpha_entropy(&state.arch),
            });
            write_text(&out.join("search_summary.json"), &format!("{summary:#}"))?;
            println!("{}", genotype.to_json()?);
            println!(
                "search finished after {} epochs; outputs in {}",
                state.epochs_done,
                out.display()
            );
        }
        Command::Derive { checkpoint } => {
            let state = SearchState::load(&checkpoint)?;
            let genotype = derive_genotype(&state.arch, &state.net_config)?;
            create_dir(out)?;
            write_text(&out.join("genotype.json"), &genotype.to_json()?)?;
            println!("{}", genotype.to_json()?);
        }
        Command::Cost {
            genotype,
            views,
            resolution,
            channels,
        } => {
            let g = load_genotype(&genotype)?;
            let mut net = g.config.clone();
            if let Some(c) = channels {
                net.init_channels = c;
            }
            let report = cost_model(
                &g,
                &net,
                resolution.unwrap_or(net.input_resolution),
                views.unwrap_or(net.n_views),
            )?;
            println!("{report}");
            if out.is_dir() {
                write_text(&out.join("cost.json"), &report.to_json())?;
            }
        }
        Command::Retrain {
            genotype,
            data,
            epochs,
            channels,
            loss_weights,
            cosine,
        } => {
            let g = load_genotype(&genotype)?;
            let (train, _) = load_data(data.as_deref(), &cfg)?;
            if let Some(seed) = cli.seed {
                cfg.retrain.seed = seed;
            }
            if let Some(e) = epochs {
                cfg.retrain.epochs = e;
            }
            if let Some(c) = channels {
                cfg.retrain.init_channels = c;
            }
            if let Some(w) = loss_weights {
                cfg.retrain.loss_weights = Some(parse_weights(&w)?);
            }
            cfg.retrain.cosine |= cosine;
            let (model, log) = retrain(&g, &train, &cfg.retrain)?;
            create_dir(out)?;
            model.save(&out.join("model.json"))?;
            write_retrain_csv(&log, &out.join("retrain_log.csv"))?;
            if let Some(last) = log.last() {
                println!("final epoch mean loss {:.4}", last.total);
            }
            println!("model written to {}", out.join("model.json").display());
        }
        Command::Eval { model, data } => {
            let mut m = TrainedModel::load(&model)?;
            let (_, test) = load_data(data.as_deref(), &cfg)?;
            let mut report = evaluate(&mut m, &test)?;
            report.genotype = format!("{} ({})", model.display(), report.genotype);
            println!("{report}");
            create_dir(out)?;
            write_text(&out.join("metrics.json"), &report.to_json())?;
        }
        Command::Export { genotype } => {
            let g = load_genotype(&genotype)?;
            create_dir(out)?;
            write_text(&out.join("genotype.dot"), &g.to_dot()?)?;
            write_text(&out.join("genotype.json"), &g.to_json()?)?;
            println!("wrote genotype.dot and genotype.json to {}", out.display());
        }
        Command::Seeds {
            n,
            data,
            epochs,
            retrain_epochs,
        } => {
            if n == 0 {
                return Err(Error::Validation("--n must be at least 1".into()));
            }
            let (train, test) = load_data(data.as_deref(), &cfg)?;
            fit_network_to(&mut cfg, &train);
            if let Some(e) = epochs {
                set_search_epochs(&mut cfg, e);
            }
            if let Some(e) = retrain_epochs {
                cfg.retrain.epochs = e;
            }
            let base = cli.seed.unwrap_or(0);
            let seeds: Vec<u64> = (base..base + n as u64).collect();
            create_dir(out)?;
            let (study, _) = seed_study(&cfg, &seeds, &train, &test, |run| {
                info!(
                    "seed {}: accuracy {:.3}, mAP {:.3} ({:.0}s search, {:.0}s retrain)",
                    run.seed, run.metrics.overall_accuracy, run.metrics.map, run.search_seconds, run.retrain_seconds
                );
                write_text(
                    &out.join(format!("genotype_seed{}.json", run.seed)),
                    &run.genotype.to_json()?,
                )
            })?;
            print!("{study}");
            write_text(&out.join("seeds.json"), &study.to_json())?;
        }
    }
    Ok(())
}
