use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hpst::bench::{bench_inference, render_event_display, CountingAllocator, DisplaySpec};
use hpst::config::{gen_config, train_config};
use hpst::event::{read_events, DatasetHeader, Event, LabelSpace};
use hpst::metrics::{evaluate, histogram_tsv, Model, Predictor};
use hpst::model::HyperParams;
use hpst::synth::{generate_dataset, GenError};
use hpst::train::{load_checkpoint, train, TrainError};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[derive(Parser)]
#[command(name = "hpst", version, about = "Two-view sparse event segmentation")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        events: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single-event inference.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one event as SVG.
    Display {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        event: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Incompatible(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Incompatible(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Incompatible(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn read_config(path: &Option<PathBuf>) -> Result<String, Failure> {
    match path {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
        None => Ok(String::new()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::InvalidConfig(m) => Failure::Usage(m),
        e @ TrainError::ConfigMismatch(_) => Failure::Incompatible(e.to_string()),
        e => Failure::Data(e.to_string()),
    }
}

fn load_model(ckpt: &Path) -> Result<Model, Failure> {
    let (weights, hyper) = load_checkpoint(ckpt).map_err(train_failure)?;
    Ok(Model { hyper, weights })
}

fn load_data(path: &Path) -> Result<(DatasetHeader, Vec<Event>), Failure> {
    read_events(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn check_compatible(h: &HyperParams, labels: LabelSpace) -> Outcome {
    if h.n_classes != labels.n_classes as usize || h.instance_slots < labels.p_max as usize {
        return Err(Failure::Incompatible(format!(
            "checkpoint has {} classes and {} slots, dataset has {} classes and up to {} instances",
            h.n_classes, h.instance_slots, labels.n_classes, labels.p_max
        )));
    }
    Ok(())
}

fn config_echo(h: &HyperParams) -> Vec<(String, String)> {
    h.to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen {
            events,
            seed,
            config,
            out,
        } => {
            let mut c =
                gen_config(&read_config(&config)?).map_err(|e| Failure::Usage(e.to_string()))?;
            if let Some(s) = seed {
                c.seed = s;
            }
            generate_dataset(events, &c, &out).map_err(|e| match e {
                GenError::InvalidConfig(m) => Failure::Usage(m),
                e => data_err(e),
            })?;
        }
        Command::Train { data, config, out } => {
            let (header, _) = load_data(&data)?;
            let c = train_config(&read_config(&config)?, header.labels())
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let r = train(&data, &c, &out).map_err(train_failure)?;
            eprintln!("best epoch {} of {}", r.best_epoch, r.history.len());
        }
        Command::Eval { ckpt, data, out } => {
            let model = load_model(&ckpt)?;
            let (header, events) = load_data(&data)?;
            check_compatible(&model.hyper, header.labels())?;
            let report = evaluate(&events, &model, config_echo(&model.hyper)).map_err(data_err)?;
            let json = serde_json::to_string_pretty(&report).map_err(data_err)?;
            write(&out, json + "\n")?;
            let mut hist = out.clone().into_os_string();
            hist.push(".hist.tsv");
            write(Path::new(&hist), histogram_tsv(&report))?;
        }
        Command::Bench {
            ckpt,
            data,
            samples,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let (header, events) = load_data(&data)?;
            check_compatible(&model.hyper, header.labels())?;
            if samples == 0 {
                return Err(Failure::Usage("--samples must be positive".into()));
            }
            if events.is_empty() {
                return Err(Failure::Data("dataset has no events".into()));
            }
            let report = bench_inference(&model, &events, samples).map_err(data_err)?;
            let json = serde_json::to_string_pretty(&report).map_err(data_err)?;
            write(&out, json + "\n")?;
        }
        Command::Display {
            data,
            ckpt,
            event,
            out,
        } => {
            let (header, events) = load_data(&data)?;
            let e = events
                .iter()
                .find(|e| e.event_id == event)
                .ok_or_else(|| Failure::Data(format!("no event with id {event}")))?;
            let prediction = match ckpt {
                Some(p) => {
                    let model = load_model(&p)?;
                    check_compatible(&model.hyper, header.labels())?;
                    Some(model.predict(e).map_err(data_err)?)
                }
                None => None,
            };
            write(
                &out,
                render_event_display(e, prediction.as_ref(), &DisplaySpec::default()),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
