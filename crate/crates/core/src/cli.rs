// SPDX-License-Identifier: Apache-2.0

//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::overlay::{build_overlay, overlay_metrics, Algorithm, Overlay, OverlayMetrics};
use crate::protocol::PacketTrace;
use crate::simulator::{run_scenario, Scenario};
use crate::topology::{distance, generate_random_topology, DcrId, Point, Topology};

/// User positions sampled per topology for the stretch columns of `compare`.
pub const STRETCH_SAMPLES: usize = 32;

// keeps user draws independent of the topology draws made from the same seed
const STRETCH_SEED_SALT: u64 = 0x5eed_57e7_c4a1_1005;

#[derive(Debug, Parser)]
#[command(
    name = "dcrsim",
    version,
    about = "Anycast overlay and VM mobility simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random topology.
    GenTopology {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u64).range(2..))]
        n: u64,
        #[arg(long, default_value_t = 100.0)]
        extent: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build an overlay over a topology file.
    BuildOverlay {
        topology: PathBuf,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
        alg: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print worst delay, average delay and flooding overhead of an overlay.
    EvalOverlay {
        overlay: PathBuf,
        /// Check edge costs against this topology.
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Compare the three algorithms over seeded random topologies.
    Compare {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        /// Fixed topology size; overrides the range.
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        n: Option<u64>,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
        n_min: u64,
        #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(2..))]
        n_max: u64,
        #[arg(long, default_value_t = 100.0)]
        extent: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and write the packet report.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overlay file; built from the topology with `--alg` when absent.
    #[arg(long, conflicts_with = "alg")]
    pub overlay: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub alg: Option<u8>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the NOTIFY/PKT/TABLE trace here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_topology(path: &Path) -> Result<Topology> {
    Topology::parse(&read(path)?).with_context(|| format!("{}", path.display()))
}

fn algorithm(n: u8) -> Result<Algorithm> {
    Algorithm::from_number(n).with_context(|| format!("unknown algorithm {n}"))
}

/// Stretch of a tunneled packet from each sampled user to a VM hosted at a
/// random data center, as (mean, max). Depends only on the topology.
pub fn sampled_stretch(topology: &Topology, seed: u64, extent: f64, samples: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for _ in 0..samples {
        let user = Point::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent));
        let host = DcrId(rng.gen_range(1..=topology.len() as u32));
        let ingress = topology.nearest_dcr(user);
        let trace = PacketTrace::tunneled(user, ingress, host, topology, true);
        let direct = distance(
            user,
            topology.position(host).expect("sampled from the topology"),
        );
        let stretch = if direct == 0.0 {
            1.0
        } else {
            trace.total_delay / direct
        };
        sum += stretch;
        max = max.max(stretch);
    }
    (sum / samples.max(1) as f64, max)
}

/// The `compare` CSV: one row per topology and algorithm, then a `# mean`
/// trailer.
pub fn compare_csv(
    seed: u64,
    count: usize,
    sizes: RangeInclusive<usize>,
    extent: f64,
) -> Result<String> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    if sizes.is_empty() || *sizes.start() < 2 {
        bail!(
            "topology size range {}..={} is empty or below 2",
            sizes.start(),
            sizes.end()
        );
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from(
        "topology,seed,n,alg,edges,worst_delay,average_delay,flooding_overhead,mean_stretch,max_stretch\n",
    );
    let mut totals = [[0.0f64; 3]; 3];
    let mut stretch_total = 0.0;
    let mut stretch_max = 0.0f64;
    for index in 0..count {
        let topo_seed: u64 = master.gen();
        let n = master.gen_range(sizes.clone());
        let topology = generate_random_topology(topo_seed, n, extent)?;
        let (mean_stretch, max_stretch) = sampled_stretch(
            &topology,
            topo_seed ^ STRETCH_SEED_SALT,
            extent,
            STRETCH_SAMPLES,
        );
        stretch_total += mean_stretch;
        stretch_max = stretch_max.max(max_stretch);
        for (k, alg) in Algorithm::ALL.into_iter().enumerate() {
            let overlay = build_overlay(&topology, alg);
            let m = overlay_metrics(&overlay)?;
            totals[k][0] += m.worst_delay;
            totals[k][1] += m.average_delay;
            totals[k][2] += m.flooding_overhead;
            let _ = writeln!(
                out,
                "{index},{topo_seed},{n},{},{},{:.6},{:.6},{:.6},{mean_stretch:.6},{max_stretch:.6}",
                alg.number(),
                overlay.edge_count(),
                m.worst_delay,
                m.average_delay,
                m.flooding_overhead,
            );
        }
    }
    let c = count as f64;
    out.push_str("# mean");
    for (k, t) in totals.iter().enumerate() {
        let _ = write!(
            out,
            " alg{}_worst={:.6} alg{}_avg={:.6} alg{}_overhead={:.6}",
            k + 1,
            t[0] / c,
            k + 1,
            t[1] / c,
            k + 1,
            t[2] / c
        );
    }
    let _ = writeln!(
        out,
        " overhead_ratio_2_1={:.6} mean_stretch={:.6} max_stretch={:.6}",
        totals[1][2] / totals[0][2],
        stretch_total / c,
        stretch_max
    );
    Ok(out)
}

pub fn eval_line(metrics: &OverlayMetrics) -> String {
    format!("{metrics}\n")
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTopology {
            seed,
            n,
            extent,
            out,
        } => {
            let t = generate_random_topology(seed, n as usize, extent)?;
            emit(out.as_deref(), &t.to_text())
        }
        Command::BuildOverlay { topology, alg, out } => {
            let t = load_topology(&topology)?;
            let o = build_overlay(&t, algorithm(alg)?);
            emit(out.as_deref(), &o.to_text())
        }
        Command::EvalOverlay { overlay, topology } => {
            let text = read(&overlay)?;
            let o = match topology {
                Some(path) => Overlay::parse_for(&text, &load_topology(&path)?),
                None => Overlay::parse(&text),
            }
            .with_context(|| format!("{}", overlay.display()))?;
            emit(None, &eval_line(&overlay_metrics(&o)?))
        }
        Command::Compare {
            seed,
            count,
            n,
            n_min,
            n_max,
            extent,
            out,
        } => {
            let sizes = match n {
                Some(n) => n as usize..=n as usize,
                None => n_min as usize..=n_max as usize,
            };
            emit(
                out.as_deref(),
                &compare_csv(seed, count as usize, sizes, extent)?,
            )
        }
        Command::Run(args) => {
            let t = load_topology(&args.topology)?;
            let o = match (&args.overlay, args.alg) {
                (Some(path), _) => Overlay::parse_for(&read(path)?, &t)
                    .with_context(|| format!("{}", path.display()))?,
                (None, alg) => build_overlay(&t, algorithm(alg.unwrap_or(3))?),
            };
            let scenario = Scenario::parse(&read(&args.scenario)?)
                .with_context(|| format!("{}", args.scenario.display()))?;
            let report = run_scenario(&t, &o, scenario)
                .with_context(|| format!("{}", args.scenario.display()))?;
            if let Some(path) = &args.trace {
                emit(Some(path), &report.trace_log())?;
            }
            emit(args.out.as_deref(), &report.to_csv())
        }
    }
}
