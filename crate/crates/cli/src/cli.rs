use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rof_core::stats::{Reducer, Side};
use rof_core::Layout;

#[derive(Debug, Parser)]
#[command(name = "rof", version, about = "Rotary query/key activation analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print dump metadata and the derived rotary config.
    Inspect(InspectArgs),
    /// Per-pair mean vectors, radii, angles and spreads as CSV.
    Stats(StatsArgs),
    /// Mean-vector decomposition d_i(p) and D(p) for one head.
    Decompose(DecomposeArgs),
    /// Frequency and angle bounds for a config, with %ROF and Mean LB.
    Bounds(BoundsArgs),
    /// Offset-feature verdict per (layer, head, pair) as CSV.
    Classify(MultiInputArgs),
    /// Recall of the bounds among large-radius features as CSV.
    Recall(RecallArgs),
    /// Layer-by-dim magnitude heatmap (SVG).
    Heatmap(HeatmapArgs),
    /// Angle versus key radius scatter, one panel per pair (SVG).
    Scatter(MultiInputArgs),
    /// Radius changes between a base and a context-extended model.
    CompareExtension(CompareArgs),
    /// Write a synthetic dump from a JSON recipe.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigOverrides {
    /// Override the rope base from the dump metadata.
    #[arg(long)]
    pub base: Option<f64>,
    /// Effective context length for the bounds (defaults to the dump's p_max_config).
    #[arg(long)]
    pub p_max: Option<usize>,
    #[arg(long, value_parser = parse_layout)]
    pub layout: Option<Layout>,
    /// File with one frequency per rotary pair (whitespace or comma separated).
    #[arg(long)]
    pub theta_override: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigOverrides,
    /// Positions left out of the means (sink sensitivity).
    #[arg(long, value_delimiter = ',')]
    pub exclude_positions: Vec<usize>,
    /// Pair norms below this are ignored in angular statistics.
    #[arg(long, default_value_t = rof_core::stats::DEFAULT_ANGLE_FLOOR)]
    pub angle_floor: f64,
    /// Emit (radius, circular std) per head for this pair instead of the full table.
    #[arg(long)]
    pub spread_pair: Option<usize>,
    #[arg(long, default_value = "key", value_parser = parse_side)]
    pub side: Side,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    /// Largest distance (defaults to p_max + 512).
    #[arg(long)]
    pub positions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub exclude_features: Vec<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigOverrides,
    /// Write the positional attention reconstructed from the profile as SVG.
    #[arg(long)]
    pub attention_svg: Option<PathBuf>,
    /// Write the same attention as CSV (m, n, weight).
    #[arg(long)]
    pub attention_csv: Option<PathBuf>,
    /// Use the dump's actual rotated queries and keys for the attention output.
    #[arg(long)]
    pub full: bool,
    /// Pair whose sink scores are written to --sinks-output.
    #[arg(long, requires = "sinks_output")]
    pub sink_pair: Option<usize>,
    #[arg(long, requires = "sink_pair")]
    pub sinks_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Take geometry from a dump instead of flags.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub rotary_dim: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[command(flatten)]
    pub config: ConfigOverrides,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MultiInputArgs {
    /// One or more dumps; verdicts are pooled.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct RecallArgs {
    #[command(flatten)]
    pub inputs: MultiInputArgs,
    #[arg(long, value_delimiter = ',', default_values_t = rof_core::offset::DEFAULT_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = rof_core::offset::DEFAULT_RELAX)]
    pub relax: f64,
    /// Radius used to define positives.
    #[arg(long, default_value = "key", value_parser = parse_side)]
    pub side: Side,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "key", value_parser = parse_side)]
    pub side: Side,
    #[arg(long, default_value = "max_abs", value_parser = parse_reducer)]
    pub reducer: Reducer,
    #[command(flatten)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub base_input: PathBuf,
    #[arg(long)]
    pub ext_input: PathBuf,
    #[arg(long)]
    pub base_p_max: Option<usize>,
    #[arg(long)]
    pub ext_p_max: Option<usize>,
    #[arg(long)]
    pub base_theta_override: Option<PathBuf>,
    #[arg(long)]
    pub ext_theta_override: Option<PathBuf>,
    /// Per-feature deltas CSV.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Group sums CSV (per head and global).
    #[arg(long)]
    pub sums_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic recipe.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 10000.0)]
    pub base: f64,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub rotary_dim: usize,
    #[arg(long)]
    pub p_max: usize,
    #[arg(long, default_value = "sliced_first", value_parser = parse_layout)]
    pub layout: Layout,
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    s.parse().map_err(|e: rof_core::Error| e.to_string())
}

fn parse_side(s: &str) -> Result<Side, String> {
    s.parse().map_err(|e: rof_core::Error| e.to_string())
}

fn parse_reducer(s: &str) -> Result<Reducer, String> {
    s.parse().map_err(|e: rof_core::Error| e.to_string())
}
