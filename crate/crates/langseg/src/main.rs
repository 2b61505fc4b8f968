use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use langseg::checkpoint::Checkpoint;
use langseg::config::{architecture_hash, RunConfig};
use langseg::core::eval::{self, AblationVariant, ABLATION_VARIANTS};
use langseg::core::gradcheck::{check_micro_model, GradCheckConfig};
use langseg::core::synth::{self, Scenario};
use langseg::{dataset, error, run, AppError, Result};

#[derive(Parser)]
#[command(name = "langseg", about = "Language-guided segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Comma-separated scenarios, cycled by sample index.
        #[arg(long, default_value = "clean")]
        scenarios: String,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train_log.csv and ckpt_<step>.bin into the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.json, report.csv and predicted masks.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated scenarios to keep.
        #[arg(long)]
        scenarios: Option<String>,
        /// Which part of the dataset to score: all, train or heldout.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Train and evaluate the four ablation variants; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated training seeds (overrides ablation_seeds).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Finite-difference check of every loss on the 8x8 micro-model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    holdout: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            c.dataset = Some(v.clone());
        }
        if let Some(v) = &self.out {
            c.output = v.clone();
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = &self.schedule {
            c.schedule = v.clone();
        }
        if let Some(v) = self.checkpoint_interval {
            c.checkpoint_interval = v;
        }
        c.holdout |= self.holdout;
        Ok(c)
    }
}

fn parse_scenarios(s: &str) -> Result<Vec<Scenario>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|e: langseg::core::Error| AppError::Config(e.to_string())))
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| AppError::Config(format!("bad seed {t:?}"))))
        .collect()
}

fn dataset_dir(c: &RunConfig) -> Result<&Path> {
    let d = c.dataset.as_deref().ok_or_else(|| AppError::Config("no dataset given".into()))?;
    if !dataset::manifest_path(d).is_file() {
        return Err(AppError::Config(format!("dataset not found: {}", d.display())));
    }
    Ok(d)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    threads_from_env();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Everything runs single-threaded; `LANGSEG_THREADS` is only validated.
fn threads_from_env() {
    if let Ok(v) = std::env::var("LANGSEG_THREADS") {
        if v.parse::<usize>().map_or(true, |n| n == 0) {
            eprintln!("warning: ignoring LANGSEG_THREADS={v:?}; expected a positive integer");
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Synth {
            n,
            seed,
            scenarios,
            height,
            width,
            out,
        } => {
            if n == 0 {
                return Err(AppError::Config("--n must be >= 1".into()));
            }
            let mix = parse_scenarios(&scenarios)?;
            let samples = synth::generate_dataset(n, seed, height, width, &mix)
                .map_err(|e| AppError::Config(e.to_string()))?;
            dataset::write_dataset(&samples, &out)?;
            println!("{}", dataset::manifest_path(&out).display());
            Ok(0)
        }
        Cmd::Train { run: args, resume } => {
            let cfg = args.config()?;
            let res = cfg.resolve()?;
            let dir = dataset_dir(&cfg)?;
            let all = dataset::load_dataset(dir, res.model.classes)?;
            let data = if cfg.holdout { eval::held_out_split(&all).0 } else { &all[..] };
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            cfg.save(&cfg.output.join("config.json"))?;
            let ck = run::train(&res, data, resume, &cfg.output, &mut |l| {
                if l.step % 100 == 0 || l.step == 1 {
                    eprintln!("{}", run::log_line(l));
                }
            })?;
            println!("{}", langseg::checkpoint::checkpoint_path(&cfg.output, ck.step).display());
            Ok(0)
        }
        Cmd::Eval {
            run: args,
            checkpoint,
            scenarios,
            split,
        } => {
            let cfg = args.config()?;
            let res = cfg.resolve()?;
            let ck = Checkpoint::load(&checkpoint)?;
            ck.check_hash(&architecture_hash(&res.model, &res.vocab))?;
            let dir = dataset_dir(&cfg)?;
            let all = dataset::load_dataset(dir, res.model.classes)?;
            let (tr, held) = eval::held_out_split(&all);
            let samples = match split.as_str() {
                "all" => &all[..],
                "train" => tr,
                "heldout" => held,
                other => return Err(AppError::Config(format!("unknown split {other:?}"))),
            };
            let filter = scenarios.as_deref().map(parse_scenarios).transpose()?;
            let out = run::evaluate(&ck, &res.vocab, samples, filter.as_deref(), cfg.zero_text, &cfg.output)?;
            let r = &out.report;
            println!("miou {:.4} pixel_accuracy {:.4} class_iou {:.4}", r.miou, r.pixel_accuracy, r.mean_class_iou);
            for (name, s) in &r.scenarios {
                println!("  {name}: miou {:.4} pixel_accuracy {:.4}", s.miou, s.pixel_accuracy);
            }
            Ok(0)
        }
        Cmd::Ablate { run: args, seeds } => {
            let mut cfg = args.config()?;
            if let Some(s) = seeds {
                cfg.ablation_seeds = parse_seeds(&s)?;
            }
            let res = cfg.resolve()?;
            let dir = dataset_dir(&cfg)?;
            let all = dataset::load_dataset(dir, res.model.classes)?;
            let rows = run::run_ablation(&res, &all, &ABLATION_VARIANTS, &cfg.ablation_seeds, &mut |v: AblationVariant, seed, r| {
                eprintln!("{} seed {seed}: miou {:.4}", v.name(), r.miou);
            })?;
            let table = run::ablation_csv(&rows);
            error::write(&cfg.output.join("ablation.csv"), table.as_bytes())?;
            error::write(
                &cfg.output.join("ablation_scenarios.csv"),
                run::ablation_scenarios_csv(&rows).as_bytes(),
            )?;
            print!("{table}");
            Ok(0)
        }
        Cmd::Gradcheck { seed, tol } => {
            let gc = GradCheckConfig {
                tol,
                seed,
                ..Default::default()
            };
            let reports = check_micro_model(seed, &gc)?;
            let mut pass = true;
            for (name, r) in &reports {
                println!("{name:<12} max_rel_err {:.3e} {}", r.max_rel_error, if r.pass { "ok" } else { "FAIL" });
                pass &= r.pass;
            }
            let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
            println!("max_rel_err {worst:.3e} (h {:e}, tol {:e})", gc.h, gc.tol);
            Ok(if pass { 0 } else { 3 })
        }
    }
}
