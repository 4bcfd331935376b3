//! Command line front end.
//!
//! Every subcommand reads the same config file and works inside one output
//! directory, so the phases can run one at a time or all at once via `run`.
//! Failures print a single `error kind=... msg="..."` line to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::pipeline::{self, PhaseSummary, RunLayout};

/// Exit status for config and usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for failures while running a phase.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "ucc", version, about = "Teacher/student consistency training for cold-start recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load or synthesize interactions, filter, split, and write the splits.
    Prepare(Common),
    /// Train the teacher on prepared splits.
    TrainTeacher(Common),
    /// Generate pseudo interactions from the teacher checkpoint.
    Generate(Common),
    /// Train the student on the augmented graph.
    TrainStudent(Common),
    /// Evaluate existing checkpoints on the test split.
    Evaluate(Common),
    /// All phases end to end.
    Run(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file, or the manifest of an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives a fully sequential run.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Named hyperparameter preset filling keys the config leaves unset.
    #[arg(long)]
    pub preset: Option<String>,
    /// Skip generation and the student.
    #[arg(long)]
    pub teacher_only: bool,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare(c)
            | Command::TrainTeacher(c)
            | Command::Generate(c)
            | Command::TrainStudent(c)
            | Command::Evaluate(c)
            | Command::Run(c) => c,
        }
    }
}

fn quote(msg: &str) -> String {
    let flat = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("\"{flat}\"")
}

pub fn error_line(kind: &str, msg: &str) -> String {
    format!("error kind={kind} msg={}", quote(msg))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn summary_line(phase: &str, s: &PhaseSummary) -> String {
    let opt = |x: Option<f64>| x.map_or("none".to_owned(), |v| format!("{v:.6}"));
    format!(
        "{phase}: best_epoch={} epochs={} val_recall={} test_recall={:.6} test_ndcg={:.6} cold_recall={}",
        s.best_epoch,
        s.epochs_run,
        opt(s.val_recall),
        s.test_recall,
        s.test_ndcg,
        opt(s.test_cold_recall)
    )
}

fn report_line(phase: &str, r: &MetricsReport) -> String {
    let cold = r.cold_recall().map_or("none".to_owned(), |v| format!("{v:.6}"));
    format!(
        "{phase}: users={} recall@{k}={:.6} ndcg@{k}={:.6} cold_recall={cold}",
        r.num_users,
        r.recall,
        r.ndcg,
        k = r.k
    )
}

fn execute(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    let c = cmd.common();
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        // Fails only if the pool already exists, e.g. on a second call in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let overrides = Overrides {
        seed: c.seed,
        preset: c.preset.clone(),
        teacher_only: c.teacher_only,
    };
    let cfg = RunConfig::load(&c.config, &overrides)?;
    let layout = RunLayout::new(&c.out);
    std::fs::create_dir_all(&layout.root)?;
    match cmd {
        Command::Prepare(_) => {
            pipeline::prepare(&cfg, &layout)?;
            let data = pipeline::load_prepared(&layout)?;
            writeln!(
                out,
                "prepared: users={} items={} train={} validation={} test={}",
                data.num_users(),
                data.num_items(),
                data.train.len(),
                data.validation.len(),
                data.test.len()
            )?;
        }
        Command::TrainTeacher(_) => {
            let s = pipeline::teacher_phase(&cfg, &layout)?;
            writeln!(out, "{}", summary_line("teacher", &s))?;
        }
        Command::Generate(_) => {
            let p = pipeline::generation_phase(&cfg, &layout)?;
            writeln!(out, "generated: pseudo={} path={}", p.len(), layout.pseudo().display())?;
        }
        Command::TrainStudent(_) => {
            let s = pipeline::student_phase(&cfg, &layout)?;
            writeln!(out, "{}", summary_line("student", &s))?;
        }
        Command::Evaluate(_) => {
            for (phase, r) in pipeline::evaluation_phase(&cfg, &layout)? {
                writeln!(out, "{}", report_line(&phase, &r))?;
            }
        }
        Command::Run(_) => {
            let a = pipeline::run(&cfg, &layout.root)?;
            writeln!(out, "{}", summary_line("teacher", &a.manifest.teacher))?;
            if let Some(s) = &a.manifest.student {
                writeln!(out, "{}", summary_line("student", s))?;
            }
            writeln!(out, "manifest: {}", layout.manifest().display())?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = writeln!(err, "{}", error_line("UsageError", e.to_string().trim()));
            return EXIT_USAGE;
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_from(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_escapes_quotes_and_newlines() {
        assert_eq!(error_line("X", "a \"b\"\nc"), r#"error kind=X msg="a \"b\" c""#);
    }

    #[test]
    fn help_exits_zero() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_from(["ucc", "--help"], &mut out, &mut err), 0);
        assert!(String::from_utf8(out).unwrap().contains("train-teacher"));
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_from(["ucc", "run", "--bogus"], &mut out, &mut err), EXIT_USAGE);
        assert!(String::from_utf8(err).unwrap().starts_with("error kind=UsageError"));
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_from(["ucc", "prepare", "--config", "/nonexistent/x.toml"], &mut out, &mut err);
        assert_eq!(code, EXIT_USAGE);
        assert!(String::from_utf8(err).unwrap().starts_with("error kind=ConfigParseError"));
    }
}
