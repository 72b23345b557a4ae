use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afn_core::config::{Profile, RunConfig, Seeds};
use afn_core::datagen::{
    generate_dataset, generate_grammar, oracle_accuracy, read_dataset, read_grammar, split_dataset, write_dataset, write_grammar, Dataset,
    DatasetSplit, VideoId,
};
use afn_core::evaluator::{anticipation_accuracy, build_report, evaluate, forecasting_accuracy, write_report, ModelPredictor, OraclePredictor};
use afn_core::gradcheck::run_suite;
use afn_core::model::AfnModel;
use afn_core::trainer::{activity_prototypes, append_log, load_checkpoint, save_checkpoint, TrainState};
use afn_core::{AfnError, Result};
use clap::{Args, Parser, Subcommand};

const GRAMMAR_FILE: &str = "grammar.json";
const DATASET_FILE: &str = "dataset.jsonl";
const SPLIT_FILE: &str = "split.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const LOG_FILE: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "afn", version, about = "Action anticipation and next-action forecasting on synthetic activity videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a grammar, a dataset and its split; prints the oracle accuracy.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train from a generated data directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Steps between checkpoints.
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the grammar oracle instead of a network.
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference gradient suite; nonzero exit on any failure.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_faulty_op: bool,
    },
}

fn exit_code(e: &AfnError) -> u8 {
    match e {
        AfnError::Config { .. } => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse_with_env(&format!("schema_version = {}", afn_core::config::SCHEMA_VERSION), std::env::vars())?,
    };
    if let Some(seed) = common.seed {
        config.seeds = Seeds::from_base(seed);
        config.gradcheck.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| config.out.clone());
    std::fs::create_dir_all(&out).map_err(|e| AfnError::io(&out, e))?;
    Ok((config, out))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AfnError::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| AfnError::io(path, e))
}

fn read_split(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| AfnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AfnError::Parse {
        record: 0,
        reason: e.to_string(),
    })
}

fn load_data(dir: &Path) -> Result<(Dataset, DatasetSplit)> {
    Ok((read_dataset(&dir.join(DATASET_FILE))?, read_split(&dir.join(SPLIT_FILE))?))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            data,
            resume,
            checkpoint_every,
        } => train(&common, &data, resume.as_deref(), checkpoint_every),
        Command::Eval {
            common,
            data,
            checkpoint,
            oracle,
        } => eval(&common, &data, checkpoint.as_deref(), oracle),
        Command::Gradcheck { common, inject_faulty_op } => gradcheck(&common, inject_faulty_op),
    }
}

fn gen_data(common: &Common) -> Result<ExitCode> {
    let (config, out) = load_config(common)?;
    let grammar = generate_grammar(&config.grammar, config.seeds.data)?;
    let dataset = generate_dataset(&grammar, config.data.per_activity, config.data.framerate, config.data.sigma, config.seeds.data)?;
    let ids: Vec<VideoId> = dataset.videos.iter().map(|v| v.id).collect();
    let split = split_dataset(&ids, config.data.split, config.seeds.split)?;
    write_grammar(&grammar, &out.join(GRAMMAR_FILE))?;
    write_dataset(&dataset, &out.join(DATASET_FILE))?;
    write_json(&split, &out.join(SPLIT_FILE))?;
    std::fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| AfnError::io(out.join("config.toml"), e))?;
    println!("videos {} (train {}, test {}, validation {})", ids.len(), split.train.len(), split.test.len(), split.validation.len());
    println!("mean length {:.3} s", dataset.mean_length());
    println!("oracle next-action accuracy {:.6}", oracle_accuracy(&grammar)?);
    Ok(ExitCode::SUCCESS)
}

fn train(common: &Common, data: &Path, resume: Option<&Path>, checkpoint_every: u64) -> Result<ExitCode> {
    let (config, out) = load_config(common)?;
    let (dataset, split) = load_data(data)?;
    let model_config = config.model_config(&dataset.meta)?;
    if config.profile == Profile::PaperShape {
        let plan = model_config.shape_plan()?;
        println!("paper-shape dry run, no training");
        println!("X {:?}  M(h,w,c) {:?}  H {}  W {:?}  s {}", plan.x, plan.m_hwc(), plan.hidden, plan.w_matrix, plan.state_width);
        println!("parameters {}", plan.param_count());
        return Ok(ExitCode::SUCCESS);
    }
    let log_path = out.join(LOG_FILE);
    let mut state: TrainState<f64> = match resume {
        Some(path) => load_checkpoint(path)?,
        None => {
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(|e| AfnError::io(&log_path, e))?;
            }
            let model = AfnModel::new(model_config, config.seeds.init)?;
            TrainState::new(model, config.train.clone(), &dataset, config.seeds.train)?
        }
    };
    let until = config.train.steps;
    let ckpt = out.join(CHECKPOINT_FILE);
    let every = checkpoint_every.max(1);
    while state.step < until {
        let row = state.train_step(&dataset, &split.train)?;
        append_log(&log_path, std::slice::from_ref(&row))?;
        if row.step % 100 == 0 {
            println!(
                "step {:>6}  l_tot {:.4}  acc now {:.2} next {:.2} aux {:.2}",
                row.step, row.l_tot, row.acc_now, row.acc_next, row.acc_aux
            );
        }
        if state.step.is_multiple_of(every) {
            save_checkpoint(&state, &ckpt)?;
        }
    }
    save_checkpoint(&state, &ckpt)?;
    println!("trained to step {}; checkpoint {}", state.step, ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(common: &Common, data: &Path, checkpoint: Option<&Path>, oracle: bool) -> Result<ExitCode> {
    let (config, out) = load_config(common)?;
    let (dataset, split) = load_data(data)?;
    let lambda = config.eval.lambda.resolve()?;
    let records = if oracle {
        let grammar = read_grammar(&data.join(GRAMMAR_FILE))?;
        evaluate::<f64, _>(&OraclePredictor { grammar: &grammar }, &dataset, &split.test)?
    } else {
        let path = checkpoint.ok_or_else(|| AfnError::config("checkpoint", "required without --oracle"))?;
        let state: TrainState<f64> = load_checkpoint(path)?;
        let prototypes = activity_prototypes(&state.model, &dataset, &split.train, config.eval.prototypes_per_video, config.seeds.train)?;
        let predictor = ModelPredictor {
            model: &state.model,
            prototypes: Some(&prototypes),
        };
        evaluate(&predictor, &dataset, &split.test)?
    };
    println!("anticipation accuracy {:.6}", anticipation_accuracy(&records)?);
    println!("forecasting accuracy {:.6}", forecasting_accuracy(&records)?);
    let report = build_report(records, &dataset.meta, dataset.mean_length(), lambda, config.eval.bin_width)?;
    for path in write_report(&report, &dataset.meta, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(common: &Common, inject_faulty_op: bool) -> Result<ExitCode> {
    let (config, out) = load_config(common)?;
    let model_config = match config.profile {
        // Full-scale shapes are far too large for finite differences.
        Profile::PaperShape => return Err(AfnError::config("profile", "gradcheck needs the desk or compact profile")),
        _ => {
            let grammar = generate_grammar(&config.grammar, config.seeds.data)?;
            let dataset = generate_dataset(&grammar, 1, config.data.framerate, 0.0, config.seeds.data)?;
            config.model_config(&dataset.meta)?
        }
    };
    let report = run_suite(model_config, &config.gradcheck, inject_faulty_op)?;
    let table = report.render();
    print!("{table}");
    let path = out.join("gradcheck.txt");
    std::fs::write(&path, &table).map_err(|e| AfnError::io(&path, e))?;
    if report.passed() {
        println!("all {} checks passed", report.results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} of {} checks failed", report.failures().len(), report.results.len());
        Ok(ExitCode::from(3))
    }
}
