use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgb_core::pipeline::{
    self, ConfigError, ExportKind, PipelineConfig, PipelineError, RunOptions, Variant, ABLATIONS, DEFAULT_C_GRID,
};

#[derive(Parser)]
#[command(name = "cgb", version, about = "Causal graphs, curvature rewiring and GCN classification of multichannel signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply to everything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for data generation, splits, rewiring and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Reference preset: cobre, acpi, abide or adni.
    #[arg(long)]
    preset: Option<String>,
    /// Transfer entropy threshold (overrides graph.c).
    #[arg(long, allow_negative_numbers = true)]
    c: Option<f64>,
    /// Dataset manifest (overrides data.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage end to end.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cgb-out")]
        out: PathBuf,
        /// Feed thresholded graphs to the classifier without rewiring.
        #[arg(long)]
        skip_rewire: bool,
        /// Stop after graph construction and rewiring.
        #[arg(long)]
        skip_train: bool,
    },
    /// Compare the full pipeline with its ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cgb-ablate")]
        out: PathBuf,
        /// no_caugraph, no_csdrf or no_gconv; repeatable, all when omitted.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// One full run per transfer entropy threshold.
    SweepC {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cgb-sweep")]
        out: PathBuf,
        /// Comma-separated ascending thresholds.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Plot-ready CSV from a saved graph.
    Export {
        /// Graph JSON written by `run`.
        #[arg(long)]
        graph: PathBuf,
        /// edges_topk, te_heatmap, curvature_report or rewiring_log.
        #[arg(long)]
        what: String,
        /// Fraction of strongest edges for edges_topk.
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as CSVs plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cgb-data")]
        out: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(p)) => PipelineConfig::with_preset(p)?,
        (None, None) => PipelineConfig::default(),
    };
    if let (Some(p), Some(_)) = (&common.preset, &common.config) {
        let preset = PipelineConfig::with_preset(p)?;
        cfg.preset = preset.preset;
        cfg.model = preset.model;
        cfg.graph.c = preset.graph.c;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(c) = common.c {
        cfg.graph.c = c;
    }
    if let Some(m) = &common.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &pipeline::RunReport) {
    match r.test {
        Some(m) => println!(
            "{:<12} f1={:.4} sensitivity={:.4} specificity={:.4} auc={} edges={}->{}",
            r.variant.name(),
            m.f1,
            m.sensitivity,
            m.specificity,
            m.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
            r.edge_count,
            r.edge_count_post
        ),
        None => println!("{:<12} edges={}->{} (training skipped)", r.variant.name(), r.edge_count, r.edge_count_post),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), PipelineError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| PipelineError::Stage {
            stage: "write",
            message: format!("{}: {e}", p.display()),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Run {
            common,
            out,
            skip_rewire,
            skip_train,
        } => {
            let cfg = resolve(&common)?;
            let opts = RunOptions {
                variant: Variant::Full,
                skip_rewire,
                skip_train,
            };
            let r = pipeline::cmd_run(&cfg, opts, &out)?;
            print_report(&r);
            println!("artifacts in {}", out.display());
        }
        Command::Ablate { common, out, variants } => {
            let cfg = resolve(&common)?;
            let variants = if variants.is_empty() {
                ABLATIONS.to_vec()
            } else {
                variants
                    .iter()
                    .map(|v| v.parse::<Variant>())
                    .collect::<Result<Vec<_>, ConfigError>>()?
            };
            for r in pipeline::cmd_ablate(&cfg, &variants, Some(&out))? {
                print_report(&r);
            }
            println!("table in {}", out.join("ablation.csv").display());
        }
        Command::SweepC { common, out, values } => {
            let values = values.unwrap_or_else(|| DEFAULT_C_GRID.to_vec());
            pipeline::validate_sweep(&values)?;
            let cfg = resolve(&common)?;
            let table = pipeline::cmd_sweep_c(&cfg, &values, Some(&out))?;
            print!("{}", table.to_csv());
        }
        Command::Export {
            graph,
            what,
            fraction,
            out,
        } => {
            let kind: ExportKind = what.parse()?;
            let text = pipeline::cmd_export(&graph, kind, fraction)?;
            write_or_print(out.as_deref(), &text)?;
        }
        Command::GenData { common, out } => {
            let cfg = resolve(&common)?;
            let manifest = pipeline::cmd_gen_data(&cfg, &out)?;
            println!("wrote {}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
