//! `decs-lab`: train, probe, evaluate, report and sweep.
//!
//! Exit codes: 0 success (or probe pass), 1 runtime failure (or probe fail),
//! 2 usage error (bad arguments, unreadable or invalid config).

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};

use decs_lab::config::{is_list_key, RunConfig, KEYS};
use decs_lab::env::SynthEnv;
use decs_lab::metrics::{default_ks, read_dump, summarize, write_summary_csv};
use decs_lab::par::{init_threads, Exec};
use decs_lab::probe::{self, instances, ProbeReport};
use decs_lab::trainer::{self, RunSetup};
use decs_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "decs-lab", version, about = "Decoupled-reward training laboratory on a tabular policy")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file into a run directory.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// `key=value`, applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue an existing run from the checkpoint saved after this step.
        #[arg(long)]
        resume: Option<usize>,
    },
    /// Run one of the theory probes; exits 0 iff it passes.
    Probe {
        config: PathBuf,
        name: ProbeName,
        #[arg(long)]
        json: bool,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Summarize a rollout dump into a per-prompt CSV.
    Eval {
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated K values; defaults to powers of two.
        #[arg(long, value_delimiter = ',')]
        k: Vec<u64>,
    },
    /// Write plot-data CSVs for a finished run directory.
    Report { run: PathBuf },
    /// Train once per value of a scalar key and compare the results.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run each point as a separate process instead of sequentially.
        #[arg(long)]
        processes: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeName {
    Lemma1,
    Lemma2,
    Theorem1,
    Theorem2,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn threads_from_env() -> std::result::Result<Option<usize>, Failure> {
    match std::env::var("DECS_LAB_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("DECS_LAB_THREADS must be a nonnegative integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Any problem with the config file or overrides is a usage error.
fn load_config(path: &Path, overrides: &[String]) -> std::result::Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::parse(&text, overrides).map_err(|e| usage(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(config: &RunConfig, out: &Path, resume: Option<usize>, exec: Exec) -> Result<trainer::RunReport> {
    let env = SynthEnv::new(config.env.clone())?;
    let judge = config.build_judge()?;
    let snapshot = config.snapshot();
    let setup = RunSetup {
        env: &env,
        config: &config.train,
        judge: judge.as_ref(),
        seed: config.seed,
        exec,
        snapshot: &snapshot,
    };
    match resume {
        Some(step) => trainer::resume(&setup, out, step),
        None => trainer::run(&setup, out),
    }
}

fn run_probe(config: &RunConfig, name: ProbeName, exec: Exec) -> Result<ProbeReport> {
    let gamma = config.train.reward_params.gamma;
    match name {
        ProbeName::Lemma1 => probe::lemma1_suite(config.probe.lemma1_trials, config.seed),
        ProbeName::Lemma2 => probe::lemma2_suite_report(&instances::lemma2_suite()?, gamma, exec),
        ProbeName::Theorem1 => probe::probe_theorem1(
            &instances::theorem1_instance()?,
            config.probe.h,
            gamma,
            config.probe.kappa_points,
            exec,
        ),
        ProbeName::Theorem2 => probe::probe_theorem2(
            &instances::theorem2_suite()?,
            gamma,
            &config.train.reward_params,
            exec,
        ),
    }
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    write_text(path, &text)
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn report(run: &Path) -> Result<()> {
    let records = trainer::read_records(run)?;
    let out = run.join("report");
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_csv(
        &out.join("length_curve.csv"),
        "step,mean_length,mean_thinking_length,accuracy",
        records
            .iter()
            .map(|r| format!("{},{},{},{}", r.step, r.mean_length, r.mean_thinking_length, r.accuracy)),
    )?;
    write_csv(
        &out.join("pnrp_curve.csv"),
        "step,pnrp,r,high_entropy_freq",
        records
            .iter()
            .map(|r| format!("{},{},{},{}", r.step, opt(r.pnrp), r.r, r.high_entropy_freq)),
    )?;
    write_csv(
        &out.join("kappa_trace.csv"),
        "step,kappa,kappa0,easy_in_batch",
        records
            .iter()
            .map(|r| format!("{},{},{},{}", r.step, r.kappa, r.kappa0, r.easy_in_batch)),
    )?;
    let dump_path = run.join("eval_rollouts.jsonl");
    let dump = match fs::File::open(&dump_path) {
        Ok(f) => read_dump(BufReader::new(f))?,
        Err(_) => Vec::new(),
    };
    let n = dump.iter().fold(std::collections::BTreeMap::new(), |mut m, r| {
        *m.entry(r.prompt).or_insert(0u64) += 1;
        m
    });
    let ks = default_ks(n.values().copied().min().unwrap_or(0));
    let summaries = summarize(&dump, &ks)?;
    let path = out.join("pass_at_k.csv");
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &summaries, &ks).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, buf).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn sweep_dir(out: &Path, key: &str, value: &str) -> PathBuf {
    out.join(format!("{key}={value}"))
}

fn sweep(
    config_path: &Path,
    key: &str,
    values: &[String],
    out: &Path,
    overrides: &[String],
    processes: bool,
    exec: Exec,
) -> std::result::Result<(), Failure> {
    if !KEYS.iter().any(|(k, _)| *k == key) {
        return Err(usage(format!("unknown sweep key `{key}`")));
    }
    if is_list_key(key) {
        return Err(usage(format!("`{key}` is a list, only scalar keys can be swept")));
    }
    let mut configs = Vec::new();
    for v in values {
        let mut o = overrides.to_vec();
        o.push(format!("{key}={v}"));
        configs.push((v, o.clone(), load_config(config_path, &o)?));
    }
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    if processes {
        let exe = std::env::current_exe().map_err(|e| Error::Io {
            path: PathBuf::from("<current exe>"),
            source: e,
        })?;
        let children = configs
            .iter()
            .map(|(v, o, _)| {
                let mut cmd = Command::new(&exe);
                cmd.arg("train").arg(config_path).arg("--out").arg(sweep_dir(out, key, v));
                for x in o {
                    cmd.arg("--override").arg(x);
                }
                cmd.stdout(std::process::Stdio::null());
                cmd.spawn().map_err(|e| Error::Io {
                    path: exe.clone(),
                    source: e,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (mut child, (v, _, _)) in children.into_iter().zip(&configs) {
            let status = child.wait().map_err(|e| Error::Io {
                path: exe.clone(),
                source: e,
            })?;
            if !status.success() {
                return Err(Failure {
                    code: 1,
                    message: format!("sweep point {key}={v} failed with {status}"),
                });
            }
        }
    } else {
        for (v, _, c) in &configs {
            train(c, &sweep_dir(out, key, v), None, exec)?;
        }
    }
    let mut rows = Vec::new();
    for (v, _, _) in &configs {
        let path = sweep_dir(out, key, v).join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let r: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
        let f = &r["final"];
        let num = |x: &serde_json::Value| x.as_f64().map_or(String::new(), |v| v.to_string());
        rows.push(format!(
            "{v},{},{},{},{},{},{}",
            num(&f["accuracy"]),
            num(&f["mean_length"]),
            num(&f["mean_thinking_length"]),
            num(&f["pnrp"]),
            num(&r["thinking_length_reduction"]),
            num(&r["accuracy_change"]),
        ));
    }
    write_csv(
        &out.join("comparison.csv"),
        "value,final_accuracy,final_mean_length,final_mean_thinking_length,final_pnrp,thinking_length_reduction,accuracy_change",
        rows.into_iter(),
    )?;
    Ok(())
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    let exec = init_threads(threads_from_env()?);
    match cli.command {
        Cmd::Train {
            config,
            out,
            overrides,
            resume,
        } => {
            let c = load_config(&config, &overrides)?;
            let r = train(&c, &out, resume, exec)?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(Error::from)?);
            Ok(())
        }
        Cmd::Probe {
            config,
            name,
            json,
            overrides,
        } => {
            let c = load_config(&config, &overrides)?;
            let r = run_probe(&c, name, exec)?;
            let mut stdout = std::io::stdout();
            let text = if json {
                serde_json::to_string_pretty(&r).map_err(Error::from)?
            } else {
                r.table()
            };
            let _ = writeln!(stdout, "{text}");
            if r.passed() {
                Ok(())
            } else {
                Err(Failure {
                    code: 1,
                    message: format!("probe {} verdict {:?}", r.probe, r.verdict),
                })
            }
        }
        Cmd::Eval { dump, out, k } => {
            let f = fs::File::open(&dump).map_err(|e| Error::Io {
                path: dump.clone(),
                source: e,
            })?;
            let records = read_dump(BufReader::new(f))?;
            let ks = if k.is_empty() {
                let n = records.iter().fold(std::collections::BTreeMap::new(), |mut m, r| {
                    *m.entry(r.prompt).or_insert(0u64) += 1;
                    m
                });
                default_ks(n.values().copied().min().unwrap_or(0))
            } else {
                k
            };
            if ks.contains(&0) {
                return Err(usage("K values must be positive".into()));
            }
            let summaries = summarize(&records, &ks)?;
            let mut buf = Vec::new();
            write_summary_csv(&mut buf, &summaries, &ks).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            fs::write(&out, buf).map_err(|e| Error::Io { path: out, source: e })?;
            Ok(())
        }
        Cmd::Report { run } => Ok(report(&run)?),
        Cmd::Sweep {
            config,
            key,
            values,
            out,
            overrides,
            processes,
        } => sweep(&config, &key, &values, &out, &overrides, processes, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("decs-lab: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
