use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use protofed::config_file::{apply_override, finalize, parse_config_text, HarnessConfig};
use protofed::{accept, run_to_dir};

#[derive(Parser)]
#[command(
    name = "protofed",
    about = "Prototype-exchange federated learning simulator with a two-server secure aggregation protocol",
    after_help = "Any `--<section.key> <value>` pair overrides the config file, e.g. \
`--attack.kind label --attack.fraction 0.3`. See README.md for the key schema."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write metrics.csv, protos.csv, filters.csv and
    /// transcript.jsonl to the output directory.
    Run {
        /// Config file (flat key = value lines); defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $PROTOFED_OUT or ./out).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a grid of experiments over attack fraction, partition shape,
    /// detection threshold and auxiliary weight.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Comma-separated attack fractions, e.g. 0.2,0.3.
        #[arg(long, default_value = "0.0")]
        att: String,
        /// Comma-separated Avg values.
        #[arg(long, default_value = "3")]
        avg: String,
        /// Comma-separated Std values.
        #[arg(long, default_value = "2")]
        std: String,
        /// Comma-separated detection thresholds.
        #[arg(long, default_value = "0")]
        chi: String,
        /// Comma-separated auxiliary weights.
        #[arg(long, default_value = "1")]
        lambda: String,
    },
    /// Run the verification suite (all criteria, or one by id).
    Verify {
        #[arg(long)]
        criterion: Option<u32>,
    },
}

/// Pull `--section.key value` (or `--section.key=value`) pairs out of the
/// argument list before clap sees it.
fn extract_dotted(args: Vec<String>) -> Result<(Vec<(String, String)>, Vec<String>), String> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let key_part = body.split('=').next().unwrap_or("");
        if !key_part.contains('.') {
            rest.push(arg);
            continue;
        }
        if let Some((key, value)) = body.split_once('=') {
            overrides.push((key.to_string(), value.to_string()));
        } else {
            let value = it
                .next()
                .ok_or_else(|| format!("flag --{body} expects a value"))?;
            overrides.push((body.to_string(), value));
        }
    }
    Ok((overrides, rest))
}

fn load_config(
    path: &Option<PathBuf>,
    overrides: &[(String, String)],
    seed: Option<u64>,
) -> Result<HarnessConfig, String> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config file {}: {e}", p.display()))?;
            parse_config_text(&text)?
        }
        None => HarnessConfig::default(),
    };
    for (key, value) in overrides {
        apply_override(&mut cfg, key, value)?;
    }
    if let Some(s) = seed {
        cfg.core.seed = s;
    }
    finalize(&mut cfg);
    Ok(cfg)
}

fn out_dir_or_default(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("PROTOFED_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_list<T: std::str::FromStr>(name: &str, text: &str) -> Result<Vec<T>, String> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| format!("invalid {name} value '{s}'"))
        })
        .collect()
}

fn cmd_run(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    overrides: &[(String, String)],
) -> Result<(), (u8, String)> {
    let cfg = load_config(&config, overrides, seed).map_err(|e| (2, e))?;
    let out = out_dir_or_default(out_dir);
    let log = run_to_dir(&cfg, &out).map_err(|e| (1, e))?;
    let final_acc = log
        .benign_mean_accuracy(cfg.core.rounds)
        .unwrap_or(f64::NAN);
    println!(
        "run complete: {} rounds, {} clients, final benign accuracy {:.4}",
        cfg.core.rounds, cfg.core.n_clients, final_acc
    );
    println!("outputs in {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    att: &str,
    avg: &str,
    std_: &str,
    chi: &str,
    lambda: &str,
    overrides: &[(String, String)],
) -> Result<(), (u8, String)> {
    let base = load_config(&config, overrides, None).map_err(|e| (2, e))?;
    let atts: Vec<f64> = parse_list("att", att).map_err(|e| (2, e))?;
    let avgs: Vec<f64> = parse_list("avg", avg).map_err(|e| (2, e))?;
    let stds: Vec<f64> = parse_list("std", std_).map_err(|e| (2, e))?;
    let chis: Vec<f64> = parse_list("chi", chi).map_err(|e| (2, e))?;
    let lambdas: Vec<f64> = parse_list("lambda", lambda).map_err(|e| (2, e))?;
    let out = out_dir_or_default(out_dir);
    let mut summary = String::from("att,avg,std,chi,lambda,headline_accuracy,final_accuracy\n");
    for &a in &atts {
        for &avg_v in &avgs {
            for &std_v in &stds {
                for &chi_v in &chis {
                    for &lambda_v in &lambdas {
                        let mut cfg = base.clone();
                        cfg.core.attack.fraction = a;
                        cfg.core.avg_classes = avg_v;
                        cfg.core.std_classes = std_v;
                        cfg.core.chi = chi_v;
                        cfg.core.lambda = lambda_v;
                        let label = format!(
                            "att{a}_avg{avg_v}_std{std_v}_chi{chi_v}_lambda{lambda_v}"
                        );
                        let dir = out.join(&label);
                        let log = run_to_dir(&cfg, &dir).map_err(|e| (1, format!("{label}: {e}")))?;
                        let headline = log.top_k_benign_accuracy(5);
                        let final_acc = log
                            .benign_mean_accuracy(cfg.core.rounds)
                            .unwrap_or(f64::NAN);
                        println!("{label}: headline {headline:.4}, final {final_acc:.4}");
                        summary.push_str(&format!(
                            "{a},{avg_v},{std_v},{chi_v},{lambda_v},{headline},{final_acc}\n"
                        ));
                    }
                }
            }
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| (1, e.to_string()))?;
    std::fs::write(out.join("summary.csv"), summary).map_err(|e| (1, e.to_string()))?;
    println!("sweep summary in {}", out.join("summary.csv").display());
    Ok(())
}

fn cmd_verify(criterion: Option<u32>) -> Result<(), (u8, String)> {
    let results = match criterion {
        Some(id) => match accept::run_one(id) {
            Some(r) => vec![r],
            None => return Err((2, format!("no criterion with id {id}"))),
        },
        None => accept::run_all(),
    };
    let mut all_ok = true;
    for r in &results {
        println!("{}", r.line());
        all_ok &= r.pass;
    }
    if all_ok {
        println!("all criteria passed");
        Ok(())
    } else {
        Err((1, "one or more criteria failed".into()))
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let (overrides, rest) = match extract_dotted(raw) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(rest);
    let result = match cli.cmd {
        Cmd::Run {
            config,
            seed,
            out_dir,
        } => cmd_run(config, seed, out_dir, &overrides),
        Cmd::Sweep {
            config,
            out_dir,
            att,
            avg,
            std,
            chi,
            lambda,
        } => cmd_sweep(config, out_dir, &att, &avg, &std, &chi, &lambda, &overrides),
        Cmd::Verify { criterion } => cmd_verify(criterion),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
