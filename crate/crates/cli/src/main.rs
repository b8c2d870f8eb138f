use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ptsim::analyzer::{level_distribution, remote_leaf_view, render_csv, render_matrix, View};
use ptsim::experiment::{
    memtable, memtable_csv, parse_bytes, preset, render_memtable, run_experiment, write_outputs, ExperimentConfig,
    MemtableSpec,
};
use ptsim::policy::SystemPolicy;
use ptsim::{PageSize, SnapshotDump, SocketMask};

#[derive(Parser)]
#[command(name = "ptsim", version, about = "NUMA page-table placement and replication simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every workload.
    #[arg(long, global = true, env = "PTSIM_SEED")]
    seed: Option<u64>,
    /// Number of sockets in the simulated machine.
    #[arg(long, global = true)]
    sockets: Option<usize>,
    /// Replicate page-tables on these sockets, e.g. 0-3 or 0,2.
    #[arg(short = 'r', long = "pgtablerepl", global = true, value_parser = parse_mask)]
    pgtablerepl: Option<SocketMask>,
    /// System-wide policy: off, per-process, fixed:<s> or all.
    #[arg(long, global = true)]
    sys_policy: Option<SystemPolicy>,
    /// Page size for every scenario: 4k or 2m.
    #[arg(long, global = true)]
    page_size: Option<PageSize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config file.
    Run {
        config: PathBuf,
        /// Directory for CSV and dump outputs (default: next to the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in experiment.
    Preset {
        name: String,
        /// Write the CSV (and config) into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the preset's config instead of running it.
        #[arg(long)]
        print_config: bool,
    },
    /// Analyze a page-table snapshot dump.
    Analyze {
        dump: PathBuf,
        /// Analyze the tree walked from this socket.
        #[arg(long)]
        observer: Option<usize>,
        #[arg(long, conflicts_with = "csv")]
        matrix: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Print the page-table memory overhead table.
    Memtable {
        /// Footprints, e.g. 1MB,1GB,1TB,16TB.
        #[arg(long, value_delimiter = ',', value_parser = parse_bytes)]
        footprints: Option<Vec<u64>>,
        /// Replica counts, e.g. 1,2,4,8,16.
        #[arg(long, value_delimiter = ',')]
        replicas: Option<Vec<u32>>,
        #[arg(long)]
        csv: bool,
    },
}

fn parse_mask(text: &str) -> Result<SocketMask, String> {
    let mask = SocketMask::parse(text)?;
    if mask.is_empty() {
        return Err("empty socket list".into());
    }
    Ok(mask)
}

fn apply_overrides(cfg: &mut ExperimentConfig, g: &Global) -> Result<(), String> {
    if let Some(seed) = g.seed {
        cfg.seed = Some(seed);
    }
    if let Some(n) = g.sockets {
        cfg.set_sockets(n);
        for w in &mut cfg.workloads {
            w.threads.retain(|t| t.socket < n);
            if w.threads.is_empty() {
                return Err(format!("workload {} has no threads on {n} sockets", w.name));
            }
        }
    }
    if let Some(mask) = g.pgtablerepl {
        cfg.set_replication(mask);
    }
    if let Some(p) = g.sys_policy {
        cfg.sys_policy = p;
    }
    if let Some(size) = g.page_size {
        cfg.set_page_size(size);
    }
    Ok(())
}

fn execute(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(), String> {
    let result = run_experiment(cfg).map_err(|e| e.to_string())?;
    if let Some((spec, rows)) = &result.memtable {
        print!("{}", render_memtable(spec, rows));
    }
    if !result.rows.is_empty() {
        print!("{}", result.to_csv());
    }
    if let Some(dir) = out {
        write_outputs(cfg, &result, dir).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            apply_overrides(&mut cfg, &cli.global)?;
            let dir = out.unwrap_or_else(|| config.parent().map(Path::to_path_buf).unwrap_or_default());
            execute(&cfg, Some(&dir))
        }
        Command::Preset { name, out, print_config } => {
            let mut cfg = preset(&name).map_err(|e| e.to_string())?;
            apply_overrides(&mut cfg, &cli.global)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                std::fs::write(dir.join(format!("{name}.toml")), cfg.to_toml()).map_err(|e| e.to_string())?;
            }
            execute(&cfg, out.as_deref())
        }
        Command::Analyze { dump, observer, matrix: _, csv } => {
            let file = File::open(&dump).map_err(|e| format!("{}: {e}", dump.display()))?;
            let parsed = SnapshotDump::parse(BufReader::new(file)).map_err(|e| format!("{}: {e}", dump.display()))?;
            let n = parsed.socket_count();
            if let Some(s) = observer.filter(|&s| s >= n) {
                return Err(format!("observer {s} outside the dump's {n} sockets"));
            }
            let view = observer.map_or(View::Merged, View::Replica);
            let dist = level_distribution(&parsed, view);
            if csv {
                print!("{}", render_csv(&dist));
            } else {
                print!("{}", render_matrix(&dist));
                let observers: Vec<usize> = observer.map_or_else(|| (0..n).collect(), |s| vec![s]);
                for s in observers {
                    println!("remote leaf PTEs from socket {s}: {:.1}%", remote_leaf_view(&parsed, s) * 100.0);
                }
            }
            Ok(())
        }
        Command::Memtable { footprints, replicas, csv } => {
            let defaults = MemtableSpec::default();
            let spec = MemtableSpec {
                footprints: footprints.unwrap_or(defaults.footprints),
                replicas: replicas.unwrap_or(defaults.replicas),
            };
            let rows = memtable(&spec).map_err(|e| e.to_string())?;
            if csv {
                print!("{}", memtable_csv(&spec, &rows));
            } else {
                print!("{}", render_memtable(&spec, &rows));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
