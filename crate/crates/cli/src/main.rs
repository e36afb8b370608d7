//! `ifs`: data generation, encoding, IFS training, synthesis, classifier
//! training, evaluation and inspection.
//!
//! Exit status is 0 on success, 1 for usage and validation errors and 2 for
//! runtime failures.

mod commands;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use ifs_core::config::KEYS;

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config").long("config").value_name("FILE").help("key = value config file; flags below override it"),
    );
    KEYS.iter().filter(|(k, _)| *k != "seed").fold(cmd, |cmd, (key, help)| {
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").help(*help).help_heading("Config keys");
        if *key == "num_clips" {
            arg = arg.visible_alias("clips");
        }
        cmd.arg(arg)
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").required(true).help(help)
}

pub fn cli() -> Command {
    Command::new("ifs")
        .about("Condense short video clips into one informative synthetic frame")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("seed").long("seed").global(true).value_name("N").value_parser(clap::value_parser!(u64)).help("seed for all randomness"))
        .arg(Arg::new("jobs").long("jobs").short('j').global(true).value_name("N").value_parser(clap::value_parser!(usize)).help("worker threads (default: all cores)"))
        .arg(Arg::new("verbose").long("verbose").short('v').global(true).action(ArgAction::Count).help("more log output"))
        .subcommand(config_args(
            Command::new("gen-data")
                .about("Generate the moving-shapes dataset and its manifest")
                .arg(path_arg("out", "output directory")),
        ))
        .subcommand(
            Command::new("encode")
                .about("Compress a .rvid clip into .cvid")
                .arg(path_arg("in", "input .rvid"))
                .arg(path_arg("out", "output .cvid"))
                .arg(Arg::new("block").long("block").default_value("8").value_parser(clap::value_parser!(usize)).help("block size"))
                .arg(Arg::new("search").long("search").default_value("4").value_parser(clap::value_parser!(usize)).help("search range")),
        )
        .subcommand(config_args(
            Command::new("train-ifs")
                .about("Jointly train the generator and its heads")
                .arg(path_arg("data", "dataset directory or manifest"))
                .arg(path_arg("out", "run directory"))
                .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("continue from <out>/ifs_last.ckpt")),
        ))
        .subcommand(
            Command::new("synthesize")
                .about("Write one synthetic frame per non-overlapping window as PPM")
                .arg(path_arg("checkpoint", "IFS checkpoint"))
                .arg(path_arg("in", "input .rvid"))
                .arg(path_arg("out", "output directory")),
        )
        .subcommand(config_args(
            Command::new("train-classifier")
                .about("Train a fresh classifier on frames from one source")
                .arg(path_arg("data", "dataset directory or manifest"))
                .arg(path_arg("out", "run directory"))
                .arg(
                    Arg::new("source")
                        .long("source")
                        .required(true)
                        .value_parser(["ifs", "i_frame", "ave", "ifs_mot"])
                        .help("frame source"),
                )
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("PATH").help("IFS checkpoint for ifs and ifs_mot")),
        ))
        .subcommand(config_args(
            Command::new("evaluate")
                .about("Top-1 accuracy on the validation split")
                .arg(path_arg("data", "dataset directory or manifest"))
                .arg(path_arg("classifier", "classifier checkpoint"))
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("PATH").help("IFS checkpoint for ifs and ifs_mot"))
                .arg(Arg::new("samples").long("samples").value_parser(clap::value_parser!(usize)).help("windows per video"))
                .arg(Arg::new("out").long("out").value_name("PATH").help("report file")),
        ))
        .subcommand(
            Command::new("inspect")
                .about("Describe a file, decode a .cvid, or dump PPM panels for a clip")
                .arg(Arg::new("file").value_name("FILE").help(".rvid, .cvid, checkpoint or manifest to describe"))
                .arg(Arg::new("decode").long("decode").value_name("CVID").help("decode a .cvid back to .rvid"))
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("PATH").help("IFS checkpoint for panels"))
                .arg(Arg::new("clip").long("clip").value_name("RVID").requires("checkpoint").help("clip for panels"))
                .arg(Arg::new("out").long("out").value_name("PATH").help("decoded .rvid or panel directory")),
        )
}

fn init(m: &ArgMatches) -> Result<(), String> {
    let level = match m.get_count("verbose") {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp_secs().try_init();
    if let Some(&jobs) = m.get_one::<usize>("jobs") {
        if jobs == 0 {
            return Err("--jobs must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init(&matches) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match commands::run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
