use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use dropprune::format::{load_model, save_model, Precision};
use dropprune::pipeline::{
    baseline, load_task_data, measure_latency, model_accuracy, read_masks, run_pipeline, run_sweep,
    ExperimentConfig, Task,
};
use dropprune::prune::{prune, CompressedModel};
use dropprune::Error;

/// Consulted when neither `--data-dir` nor a config file names one.
const DATA_ENV: &str = "DROPPRUNE_DATA_DIR";

fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags given on the command line override it"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("set any config key"),
        );
    ExperimentConfig::keys().iter().fold(cmd, |cmd, &key| {
        cmd.arg(Arg::new(key).long(key).value_name("VALUE").help(format!("config key `{key}`")))
    })
}

fn cli() -> Command {
    Command::new("dropprune")
        .about("Compress neural networks by learning which units to drop, then prune them away")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("train").about("Pre-train (or load the cached) baseline critic and report its accuracy"),
        ))
        .subcommand(config_args(
            Command::new("compress").about("Run the full pipeline: baseline, three phases, prune, save"),
        ))
        .subcommand(
            Command::new("prune")
                .about("Prune a saved critic with a mask file into a compact model")
                .arg(Arg::new("critic").long("critic").required(true).value_name("FILE"))
                .arg(Arg::new("masks").long("masks").required(true).value_name("FILE"))
                .arg(Arg::new("out").long("out").required(true).value_name("FILE"))
                .arg(
                    Arg::new("f32")
                        .long("f32")
                        .action(ArgAction::SetTrue)
                        .help("store 32-bit floats (size reporting only)"),
                ),
        )
        .subcommand(config_args(
            Command::new("eval")
                .about("Report test accuracy, size and latency of a saved model")
                .arg(Arg::new("model").long("model").required(true).value_name("FILE")),
        ))
        .subcommand(config_args(
            Command::new("sweep")
                .about("Compress at several alpha values and write tradeoff.csv")
                .arg(
                    Arg::new("alphas")
                        .long("alphas")
                        .required(true)
                        .value_name("LIST")
                        .value_delimiter(',')
                        .help("comma-separated alpha values"),
                ),
        ))
}

fn build_config(m: &ArgMatches) -> Result<ExperimentConfig, Error> {
    let task = match m.get_one::<String>("task") {
        Some(t) => t.parse()?,
        None => Task::MnistLenet,
    };
    let mut cfg = ExperimentConfig::for_task(task);
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: PathBuf::from(path),
            source: e,
        })?;
        cfg.apply_kv_text(&text)?;
    }
    for &key in ExperimentConfig::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if cfg.data_dir.is_none() {
        if let Some(dir) = std::env::var_os(DATA_ENV) {
            cfg.data_dir = Some(PathBuf::from(dir));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(m: &ArgMatches) -> Result<(), Error> {
    let cfg = build_config(m)?;
    let data = load_task_data(&cfg)?;
    let (net, _) = baseline(&cfg, &data)?;
    let model = CompressedModel::from_critic(&net)?;
    let acc = model_accuracy(&model, &data.test)?;
    println!("baseline = {}", cfg.baseline_path().display());
    println!("params = {}", model.param_count());
    println!("test-accuracy = {acc:.6}");
    Ok(())
}

fn cmd_compress(m: &ArgMatches) -> Result<(), Error> {
    let cfg = build_config(m)?;
    let summary = run_pipeline(&cfg)?;
    print!("{}", summary.to_text());
    Ok(())
}

fn cmd_prune(m: &ArgMatches) -> Result<(), Error> {
    let path = |k: &str| Path::new(m.get_one::<String>(k).expect("required"));
    let critic = load_model(path("critic"))?.to_critic()?;
    let masks = read_masks(path("masks"))?;
    let model = prune(&critic, &masks)?;
    let precision = if m.get_flag("f32") { Precision::F32 } else { Precision::F64 };
    let bytes = save_model(&model, path("out"), precision)?;
    println!("params = {}", model.param_count());
    println!("model-bytes = {bytes}");
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<(), Error> {
    let cfg = build_config(m)?;
    let path = Path::new(m.get_one::<String>("model").expect("required"));
    let model = load_model(path)?;
    let data = load_task_data(&cfg)?;
    let acc = model_accuracy(&model, &data.test)?;
    let (mean, std) = measure_latency(&model, data.test.example(0), cfg.latency_runs)?;
    let bytes = std::fs::metadata(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    println!("params = {}", model.param_count());
    println!("model-bytes = {}", bytes.len());
    println!("test-accuracy = {acc:.6}");
    println!("latency-ms = {mean:.6}");
    println!("latency-std-ms = {std:.6}");
    Ok(())
}

fn cmd_sweep(m: &ArgMatches) -> Result<(), Error> {
    let cfg = build_config(m)?;
    let alphas = m
        .get_many::<String>("alphas")
        .into_iter()
        .flatten()
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("alpha {a:?} is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    // fail before any training when the curve could not be drawn
    let mut distinct = alphas.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("sweep needs at least two distinct alpha values".into()));
    }
    let (_, csv) = run_sweep(&cfg, &alphas)?;
    print!("{csv}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. } | Error::Data(_) => 3,
        Error::InfeasibleSchedule(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("compress", m)) => cmd_compress(m),
        Some(("prune", m)) => cmd_prune(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("sweep", m)) => cmd_sweep(m),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
