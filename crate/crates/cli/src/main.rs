use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use detlab_core::error::{Error, Result};
use detlab_core::split::{complement, make_prefix_fractions, save_manifest};

use detlab_cli::config::{parse_fraction, ExperimentConfig};
use detlab_cli::presets::table_config;
use detlab_cli::report::{render_matrix, render_record};
use detlab_cli::runner::{eval_stage, load_run_record, run_matrix, run_single_stage};

#[derive(Parser)]
#[command(name = "detlab", version, about = "Detection-lab experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize nested split manifests from a pool of ids
    #[command(group(ArgGroup::new("pool").required(true).args(["ids_file", "count"])))]
    Split {
        /// Comma-separated fractions, e.g. 1/2,1/4,1/8
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<String>,
        /// File with one id per line
        #[arg(long)]
        ids_file: Option<PathBuf>,
        /// Use n generated placeholder ids instead of a file
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write each fraction's complement
        #[arg(long)]
        complements: bool,
        /// Directory for the manifests
        #[arg(long, default_value = "splits")]
        out: PathBuf,
    },
    /// Run one training stage of a config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
        /// Run directory; defaults to the config's output_dir or runs/<name>
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a finished stage on the config's validation set
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the detection report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render stored run records as tables
    Report {
        /// Run directories containing record.json
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run the prebuilt toy-scale matrix for one paper table
    Reproduce {
        /// Table number, 1 through 5
        #[arg(long)]
        table: u8,
        /// Only "toy" runs on a desk machine
        #[arg(long, default_value = "toy")]
        scale: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Base directory; the run lands in a per-config subdirectory
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
}

fn run_dir_for(cfg: &ExperimentConfig, cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Split {
            fractions,
            ids_file,
            count,
            seed,
            complements,
            out,
        } => {
            let ids: Vec<String> = match (ids_file, count) {
                (Some(path), _) => std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("ids file {}: {e}", path.display())))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
                (None, Some(n)) => (0..n).map(|i| format!("id{i:06}")).collect(),
                (None, None) => unreachable!("clap enforces the pool group"),
            };
            let fractions = fractions
                .iter()
                .map(|f| parse_fraction(f))
                .collect::<Result<Vec<_>>>()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let manifests = make_prefix_fractions(&ids, &fractions, seed)?;
            let mut all = manifests.clone();
            if complements {
                for m in &manifests {
                    all.push(complement(m, &ids)?);
                }
            }
            for m in &all {
                let path = out.join(format!("{}.split", m.name));
                save_manifest(m, &path)?;
                println!("{}: {} ids -> {}", m.name, m.len(), path.display());
            }
            Ok(())
        }
        Cmd::Train { config, stage, out } => {
            let cfg = load_config(&config)?;
            let dir = run_dir_for(&cfg, out);
            let rec = run_single_stage(&cfg, &dir, &stage)?;
            println!(
                "{}: mAP {:.4} AP50 {:.4}{} ({} epochs, best {}, {:.1}s)",
                rec.name,
                rec.val_map,
                rec.val_ap50,
                rec.val_seg_iou
                    .map(|v| format!(" SegIoU {v:.4}"))
                    .unwrap_or_default(),
                rec.epochs_run,
                rec.best_epoch,
                rec.wall_time_s
            );
            Ok(())
        }
        Cmd::Eval {
            config,
            stage,
            out,
            json,
        } => {
            let cfg = load_config(&config)?;
            let dir = run_dir_for(&cfg, out);
            let (map, report, seg_iou) = eval_stage(&cfg, &dir, &stage)?;
            match &report {
                Some(r) => {
                    print!("{}", r.table());
                    if let Some(path) = json {
                        std::fs::write(&path, r.to_json()?).map_err(|e| Error::Io {
                            path,
                            source: e,
                        })?;
                    }
                }
                None => println!("mAP {map:.4} (no detection report)"),
            }
            if let Some(v) = seg_iou {
                println!("SegIoU {v:.4}");
            }
            Ok(())
        }
        Cmd::Report { runs } => {
            for dir in runs {
                let rec = load_run_record(&dir)?;
                print!("{}", render_record(&rec));
                println!();
            }
            Ok(())
        }
        Cmd::Reproduce {
            table,
            scale,
            seed,
            out,
        } => {
            if scale != "toy" {
                return Err(Error::Config(format!(
                    "scale `{scale}` is not runnable here; only `toy` is prebuilt"
                )));
            }
            let cfg = table_config(table, seed)?;
            let name = cfg.name.clone();
            let entries = run_matrix(&[cfg], &out)?;
            let text = render_matrix(&format!("Table {table} (toy scale)"), &entries);
            print!("{text}");
            let path = out.join(&name).join("table.txt");
            std::fs::write(&path, &text).map_err(|e| Error::Io { path, source: e })?;
            if entries.iter().any(|e| e.outcome.is_err()) {
                return Err(Error::Data("reproduce: a run failed; see above".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(detlab_cli::exit_code(&e))
        }
    }
}
