use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kvmon::harness::{self, benefit, overhead, stable_phase_metrics, ExperimentConfig, MetricsRecord, Summary};
use kvmon::simnet::{MS, SEC};
use kvmon::workloads::graph::{gen_graph, GraphKind};

#[derive(Parser)]
#[command(version, about = "Simulated quorum key-value store with predicate monitors")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every trial of an experiment and write CSV and event logs.
    Run {
        config: PathBuf,
        /// Output directory; defaults to `results/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stable-phase comparison of two CSV records (baseline first).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        warmup: f64,
    },
    /// Print a generated graph as an edge list.
    GenGraph {
        /// `power_law`, `regular:<d>`, `line` or `grid:<width>`.
        kind: String,
        n: usize,
        seed: u64,
        /// Also write the ownership map for this many clients.
        #[arg(long, requires = "owners")]
        clients: Option<usize>,
        #[arg(long)]
        owners: Option<PathBuf>,
    },
}

fn print_summary(label: &str, s: &Summary) {
    let ms = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.1}"));
    println!(
        "{label}: server {:.1} ops/s, app {:.1} ops/s, candidates {:.1}/s ({:.2} per server op), detection ms p50 {} p99 {} max {}",
        s.server_ops,
        s.app_ops,
        s.candidates,
        s.candidate_overhead,
        ms(s.detection_ms_p50),
        ms(s.detection_ms_p99),
        ms(s.detection_ms_max),
    );
}

fn run(config: PathBuf, out: Option<PathBuf>) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::load(&config)?;
    let (trials, avg) = harness::run_experiment(&cfg)?;
    let dir = out.unwrap_or_else(|| PathBuf::from("results").join(&cfg.name));
    let paths = harness::write_outputs(&dir, &trials, &avg)?;
    for r in &trials {
        match stable_phase_metrics(r, cfg.warmup_fraction) {
            Ok(s) => print_summary(&r.label, &s),
            Err(e) => println!("{}: {e}", r.label),
        }
        println!(
            "  ran {:.1}s, completed {}, aborts {}, detections {}",
            r.duration as f64 / SEC as f64,
            r.completed,
            r.aborts().count(),
            r.detections().count(),
        );
        if r.total_nodes > 0 {
            let t90 = r.time_to_progress(0.9).map_or("-".into(), |t| format!("{:.1}s", t as f64 / SEC as f64));
            let coloring = r.proper_coloring.map_or(String::new(), |p| format!(", proper coloring {p}"));
            println!(
                "  nodes processed {} (graph has {}), 90% at {t90}{coloring}",
                r.progress.last().map_or(0, |p| p.1),
                r.total_nodes,
            );
        }
        let (hit, total) = r.detected_within("conjunctive", "conjunctive", 50 * MS);
        if total > 0 {
            println!("  conjunctive violations detected within 50 ms: {hit} / {total}");
        }
    }
    if let Ok(s) = stable_phase_metrics(&avg, cfg.warmup_fraction) {
        print_summary(&avg.label, &s);
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn compare(a: PathBuf, b: PathBuf, warmup: f64) -> Result<(), Box<dyn std::error::Error>> {
    let load = |p: &PathBuf| -> Result<MetricsRecord, Box<dyn std::error::Error>> {
        let label = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        Ok(MetricsRecord::read_csv(&label, BufReader::new(std::fs::File::open(p)?))?)
    };
    let (ra, rb) = (load(&a)?, load(&b)?);
    let (sa, sb) = (stable_phase_metrics(&ra, warmup)?, stable_phase_metrics(&rb, warmup)?);
    print_summary(&ra.label, &sa);
    print_summary(&rb.label, &sb);
    println!(
        "overhead of {} over {} (server ops): {:.1}%",
        rb.label,
        ra.label,
        100.0 * overhead(sa.server_ops, sb.server_ops)
    );
    println!("benefit of {} over {} (app ops): {:.1}%", rb.label, ra.label, 100.0 * benefit(sb.app_ops, sa.app_ops));
    Ok(())
}

fn gen(
    kind: String,
    n: usize,
    seed: u64,
    clients: Option<usize>,
    owners: Option<PathBuf>,
) -> Result<(), Box<dyn std::error::Error>> {
    let k = GraphKind::parse(&kind).ok_or_else(|| format!("unknown graph kind {kind:?}"))?;
    let g = gen_graph(k, n, seed)?.split(clients.unwrap_or(1))?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    g.write_edge_list(&mut lock)?;
    lock.flush()?;
    if let Some(p) = owners {
        g.write_ownership(std::io::BufWriter::new(std::fs::File::create(p)?))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config, out } => run(config, out),
        Cmd::Compare { a, b, warmup } => compare(a, b, warmup),
        Cmd::GenGraph { kind, n, seed, clients, owners } => gen(kind, n, seed, clients, owners),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
