mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use config::{RawConfig, SCHEMA};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn schema_args() -> Vec<Arg> {
    SCHEMA
        .iter()
        .map(|k| {
            Arg::new(k.name)
                .long(k.flag())
                .value_name("VALUE")
                .global(true)
                .help_heading(format!("[{}] keys", k.section))
                .help(format!("{} [default: {}]", k.help, k.default))
        })
        .collect()
}

fn cli() -> Command {
    Command::new("densepoint")
        .about("Densely connected point-cloud networks: build, count, train, evaluate")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .global(true)
                .help("INI-style run configuration ([network], [train], [data], [output])"),
        )
        .args(schema_args())
        .subcommand(
            Command::new("count").about("Per-layer and total parameter / FLOP report").arg(
                Arg::new("sweep")
                    .long("sweep")
                    .value_name("VAR=V1,V2,..")
                    .help("sweep ng=.., k=.. or depth=.. and print one row per value"),
            ),
        )
        .subcommand(Command::new("train").about("Train and write a checkpoint plus epoch log"))
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint with test-time voting")
                .arg(Arg::new("dump").long("dump").value_name("FILE").help("per-sample TSV (id, label, pred, max_prob)")),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every op and layer")
                .arg(
                    Arg::new("inject_fault")
                        .long("inject-fault")
                        .value_name("OP")
                        .help("corrupt the backward of one op kind (negative control)"),
                ),
        )
        .subcommand(
            Command::new("bench")
                .about("Median forward and forward+backward time per batch")
                .arg(Arg::new("presets").long("presets").value_name("L1,L2,..").default_value("6,11").help("depth presets to time"))
                .arg(Arg::new("warmup").long("warmup").value_name("W").default_value("1").help("untimed warm-up batches"))
                .arg(Arg::new("reps").long("reps").value_name("R").default_value("5").help("timed batches"))
                .arg(Arg::new("batch").long("batch").value_name("B").default_value("4").help("clouds per batch")),
        )
        .subcommand(
            Command::new("synth")
                .about("Write the synthetic dataset as xyz files plus manifest, or as a binary cache")
                .arg(
                    Arg::new("format")
                        .long("format")
                        .value_name("FMT")
                        .default_value("xyz")
                        .help("xyz | cache"),
                ),
        )
}

fn raw_config(m: &ArgMatches) -> Result<RawConfig, densepoint::Error> {
    let mut raw = RawConfig::defaults();
    if let Some(path) = m.get_one::<String>("config") {
        raw.apply_file(std::path::Path::new(path))?;
    }
    for k in SCHEMA {
        if let Some(v) = m.get_one::<String>(k.name) {
            raw.set_flag(k.name, v.clone())?;
        }
    }
    Ok(raw)
}

fn run(m: &ArgMatches) -> Result<(), densepoint::Error> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let raw = raw_config(sub)?;
    eprint!("{}", raw.describe());
    let cfg = raw.resolve()?;
    match name {
        "count" => commands::count(&cfg, sub.get_one::<String>("sweep").map(String::as_str)),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg, sub.get_one::<String>("dump").map(std::path::Path::new)),
        "gradcheck" => commands::gradcheck(sub.get_one::<String>("inject_fault").map(String::as_str)),
        "bench" => {
            let num = |key: &str| -> Result<usize, densepoint::Error> {
                let v = sub.get_one::<String>(key).expect("has default");
                v.parse().map_err(|_| densepoint::Error::Config(format!("invalid --{key} `{v}`")))
            };
            let presets = commands::parse_list(sub.get_one::<String>("presets").expect("has default"))?;
            commands::bench(&cfg, &presets, num("warmup")?, num("reps")?, num("batch")?)
        }
        "synth" => commands::synth(&cfg, sub.get_one::<String>("format").expect("has default")),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return ExitCode::from(2);
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn help_lists_every_schema_flag() {
        let mut cmd = cli();
        cmd.build();
        let help = cmd.find_subcommand_mut("train").unwrap().render_long_help().to_string();
        for k in SCHEMA {
            assert!(help.contains(&format!("--{}", k.flag())), "{}", k.name);
        }
    }
}
