use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use l2nnn::baselines::Ablation;
use l2nnn_cli::commands::{self, CliError, Threshold};
use l2nnn_cli::config::RunConfig;
use l2nnn_cli::report::{num, Table};

#[derive(Parser)]
#[command(name = "l2nnn", version, about = "Train, certify and attack L2-nonexpansive networks")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, metrics.tsv and config.toml.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint, restoring optimizer and loss state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-input certificates for the test subset; writes certificates.tsv.
    Certify { checkpoint: PathBuf },
    /// Iteration sweep and certificate check; writes sweep.tsv.
    Attack {
        checkpoint: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Comma-separated ascending iteration budgets.
        #[arg(long, value_delimiter = ',')]
        ladder: Option<Vec<usize>>,
    },
    /// Accuracy and robust accuracy per confidence-gap bin; writes bins.tsv.
    Bins {
        checkpoint: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Gap-thresholded delegation to a fallback model; writes hybrid.tsv.
    Hybrid {
        l2nnn: PathBuf,
        fallback: PathBuf,
        /// A number, `inf`, or `median` (the L2NNN's median test gap).
        #[arg(long, default_value = "median")]
        threshold: Threshold,
    },
    /// L2NNN versus baselines on partly scrambled labels; writes scramble.tsv.
    Scramble {
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Full model versus single-technique ablations; writes ablation.tsv.
    Ablate {
        /// Techniques to remove (default: all).
        #[arg(long, value_delimiter = ',')]
        without: Option<Vec<Ablation>>,
    },
}

fn list<T: ToString>(v: &[T]) -> String {
    format!("[{}]", v.iter().map(T::to_string).collect::<Vec<_>>().join(", "))
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut o = Vec::new();
    if let Some(s) = cli.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(p) = &cli.out {
        o.push(format!("out={}", toml::Value::String(p.display().to_string())));
    }
    o.extend(cli.set.iter().cloned());
    match &cli.command {
        Command::Train { epochs: Some(e), .. } => o.push(format!("epochs={e}")),
        Command::Attack { epsilon, ladder, .. } => {
            if let Some(e) = epsilon {
                o.push(format!("attack_epsilon={e:?}"));
            }
            if let Some(l) = ladder {
                o.push(format!("attack_ladder={}", list(l)));
            }
        }
        Command::Bins { bins, epsilon, .. } => {
            if let Some(b) = bins {
                o.push(format!("bins={b}"));
            }
            if let Some(e) = epsilon {
                o.push(format!("attack_epsilon={e:?}"));
            }
        }
        Command::Scramble { fractions: Some(f) } => o.push(format!(
            "scramble_fractions={}",
            list(&f.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>())
        )),
        _ => {}
    }
    o
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(cli))?;
    let quiet = cli.quiet;
    let mut log = |s: &str| {
        if !quiet {
            eprintln!("{s}");
        }
    };
    match &cli.command {
        Command::Train { resume, .. } => {
            let s = commands::cmd_train(&cfg, resume.as_deref(), &mut log)?;
            if let Some(m) = s.metrics.last() {
                println!("test accuracy {}  test gap {}", num(m.test_accuracy), num(m.test_gap));
            }
            println!("checkpoint {}", s.checkpoint.display());
            if let Some(a) = &s.audit {
                println!(
                    "audit: {} pairs, max ratio {}, {} violation(s)",
                    a.pairs,
                    num(a.max_ratio),
                    a.violations.len()
                );
                if let Some(v) = a.violations.first() {
                    for step in &v.trace {
                        eprintln!("  {}: {} -> {}", step.layer, num(step.input_distance), num(step.output_distance));
                    }
                    return Err(CliError::Violation {
                        count: a.violations.len(),
                        dump: "stderr".into(),
                    });
                }
            }
        }
        Command::Certify { checkpoint } => {
            let s = commands::cmd_certify(&cfg, checkpoint)?;
            println!("inputs {}  accuracy {}", s.count, num(s.accuracy));
            println!("average gap {}  median gap {}", num(s.mean_gap), num(s.median_gap));
            println!("mean radius {}  certified {}", num(s.mean_radius), num(s.certified_fraction));
        }
        Command::Attack { checkpoint, .. } => {
            let s = commands::cmd_attack(&cfg, checkpoint, &mut log)?;
            let mut t = Table::new(&["iterations", "robust_accuracy"]);
            for &(m, a) in &s.sweep.rows {
                t.push(vec![m.to_string(), num(a)]);
            }
            println!("epsilon {}  nominal accuracy {}", num(s.sweep.epsilon), num(s.nominal_accuracy));
            print!("{}", t.to_text());
            match &s.certificate {
                Some(c) => println!("certificate check: {} attacked, 0 violations", c.attacked),
                None => println!("certificate check: not applicable (unconstrained model)"),
            }
        }
        Command::Bins { checkpoint, .. } => {
            let rows = commands::cmd_bins(&cfg, checkpoint)?;
            let mut t = Table::new(&["bin", "count", "min_gap", "max_gap", "accuracy", "robust"]);
            for (i, r) in rows.iter().enumerate() {
                t.push(vec![
                    (i + 1).to_string(),
                    r.count.to_string(),
                    num(r.min_gap),
                    num(r.max_gap),
                    num(r.accuracy),
                    num(r.robust_accuracy),
                ]);
            }
            print!("{}", t.to_text());
        }
        Command::Hybrid {
            l2nnn,
            fallback,
            threshold,
        } => {
            let s = commands::cmd_hybrid(&cfg, l2nnn, fallback, *threshold)?;
            println!(
                "threshold {}  accuracy {}  delegated {}",
                num(s.threshold),
                num(s.accuracy),
                num(s.delegated)
            );
            println!("l2nnn_only {}  fallback_only {}", num(s.l2nnn_accuracy), num(s.fallback_accuracy));
        }
        Command::Scramble { .. } => {
            let rows = commands::cmd_scramble(&cfg, &mut log)?;
            let mut t = Table::new(&["fraction", "model", "train_acc", "test_acc", "gap1", "gap2", "note"]);
            for r in &rows {
                t.push(vec![
                    format!("{}", r.fraction),
                    r.model.clone(),
                    num(r.train_accuracy),
                    num(r.test_accuracy),
                    num(r.train_gap),
                    num(r.test_gap),
                    r.note.clone(),
                ]);
            }
            print!("{}", t.to_text());
        }
        Command::Ablate { without } => {
            let which = without.clone().unwrap_or_else(|| Ablation::ALL.to_vec());
            let rows = commands::cmd_ablate(&cfg, &which, &mut log)?;
            let mut t = Table::new(&["variant", "accuracy", "gap", "robust", "gap*robust"]);
            for r in &rows {
                let gap = if r.gap_meaningful {
                    num(r.mean_gap)
                } else {
                    format!("{} (uncertified)", num(r.mean_gap))
                };
                t.push(vec![
                    r.variant.clone(),
                    num(r.accuracy),
                    gap,
                    num(r.robust_accuracy),
                    num(r.score()),
                ]);
            }
            print!("{}", t.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
