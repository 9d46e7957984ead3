use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpt_core::baselines::{parse_methods, Method};
use mpt_core::config::RunConfig;
use mpt_core::pipeline;
use mpt_core::promptkit::{param_count, ParamMode};
use mpt_core::verify::{run_gradcheck_suite, REL_TOL};
use mpt_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mpt",
    version,
    about = "Multitask prompt distillation and decomposition on a tiny frozen decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world, task corpora and pretraining stream.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the backbone.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one teacher prompt per source task type.
    TrainTeachers {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill the teachers into a shared meta-prompt and per-type factors.
    Distill {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        teachers: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt to one target task on its full training split.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        /// Distillation output directory; required for MPT.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mpt")]
        method: String,
        /// Also write the composed L×d prompt to this path.
        #[arg(long)]
        compress: Option<PathBuf>,
    },
    /// Few-shot sweep over k and seeded draws.
    Fewshot {
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score an artifact on a target task's test split.
    Eval {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect evaluation records into a method-by-task table.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Number of trainable prompt parameters.
    ParamCount {
        #[arg(long = "L")]
        l: i64,
        #[arg(long)]
        d: i64,
        #[arg(long)]
        tau: i64,
        #[arg(long)]
        mode: String,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Every stage in order into one run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => pipeline::gen_data(&RunConfig::load(&config)?, &out),
        Command::Pretrain { config, data, out } => {
            let losses = pipeline::pretrain(&RunConfig::load(&config)?, &data, &out)?;
            println!(
                "pretrained {} epochs, final loss {:.4}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::TrainTeachers {
            ckpt,
            data,
            config,
            out,
        } => {
            for (t, losses) in
                pipeline::train_teachers(&RunConfig::load(&config)?, &ckpt, &data, &out)?
            {
                println!(
                    "teacher {}: first epoch {:.4}, last epoch {:.4}",
                    t.task_type,
                    losses[0],
                    losses[losses.len() - 1]
                );
            }
            Ok(())
        }
        Command::Distill {
            ckpt,
            teachers,
            data,
            config,
            out,
        } => {
            let (_, losses) =
                pipeline::distill(&RunConfig::load(&config)?, &ckpt, &teachers, &data, &out)?;
            println!(
                "distilled: first epoch {:.4}, last epoch {:.4}",
                losses[0],
                losses[losses.len() - 1]
            );
            Ok(())
        }
        Command::Adapt {
            ckpt,
            meta,
            task,
            data,
            config,
            out,
            method,
            compress,
        } => {
            let m: Method = method.parse()?;
            let cfg = RunConfig::load(&config)?;
            let r = pipeline::adapt(
                &cfg,
                &ckpt,
                meta.as_deref(),
                &data,
                &task,
                m,
                &out,
                compress.as_deref(),
            )?;
            println!(
                "{m} on {task}: best epoch {}, {} trainable scalars ({:.3}% of backbone)",
                r.fit.best_epoch, r.fit.trainable_scalars, r.params_pct
            );
            Ok(())
        }
        Command::Fewshot {
            methods,
            ckpt,
            meta,
            data,
            config,
            out,
            jobs,
        } => {
            let cfg = RunConfig::load(&config)?;
            let methods = match methods {
                Some(s) => parse_methods(&s)?,
                None => cfg.fewshot_methods.clone(),
            };
            let r = pipeline::fewshot(&cfg, &ckpt, &meta, &data, &methods, &out, jobs.max(1))?;
            println!(
                "few-shot sweep: {} draws written to {}",
                r.draws.len(),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            artifact,
            ckpt,
            meta,
            task,
            data,
            config,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let r = pipeline::eval(&cfg, &ckpt, &artifact, meta.as_deref(), &data, &task, &out)?;
            println!(
                "{} on {task}: {} = {:.4}",
                r.method, r.outcome.metric, r.outcome.value
            );
            Ok(())
        }
        Command::Report { runs, out } => {
            let r = pipeline::report(&runs, &out)?;
            print!("{}", r.to_tsv());
            Ok(())
        }
        Command::ParamCount { l, d, tau, mode } => {
            let mode: ParamMode = mode.parse()?;
            println!("{}", param_count(l, d, tau, mode)?);
            Ok(())
        }
        Command::Gradcheck => {
            let r = run_gradcheck_suite()?;
            for c in &r.cases {
                println!(
                    "{:<24} checked {:>4}  max rel err {:.3e}",
                    c.name, c.report.checked, c.report.max_rel_error
                );
            }
            println!(
                "all cases below {REL_TOL:e}; max rel err {:.3e} in {:.2}s",
                r.max_rel_error, r.seconds
            );
            Ok(())
        }
        Command::Run { config, out, jobs } => {
            let s = pipeline::run_all(&RunConfig::load(&config)?, &out, jobs.max(1))?;
            print!("{}", s.report.to_tsv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
