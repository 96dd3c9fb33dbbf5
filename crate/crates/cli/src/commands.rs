use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rof_core::decompose::{d_profile, full_attention, positional_attention, sink_scores};
use rof_core::dump::{read_dump_file, synth_dump, write_dump_file, ActivationDump, DumpMeta, SynthSpec};
use rof_core::offset::{bounds_table, compare_extension, recall_table, summary, verdicts, OffsetVerdict};
use rof_core::report;
use rof_core::stats::{magnitude_summary, mean_vectors, spread_vs_radius, StatsOptions};
use rof_core::{Error, RopeConfig};

use crate::cli::*;

/// An error tagged with the pipeline stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

pub type Result<T> = std::result::Result<T, StageError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| StageError { stage, error: e.into() })
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Inspect(a) => inspect(a),
        Command::Stats(a) => stats(a),
        Command::Decompose(a) => decompose(a),
        Command::Bounds(a) => bounds(a),
        Command::Classify(a) => classify(a),
        Command::Recall(a) => recall(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Scatter(a) => scatter(a),
        Command::CompareExtension(a) => compare(a),
        Command::Synth(a) => synth(a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).stage("open output")?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load(path: &Path) -> Result<ActivationDump> {
    read_dump_file(path).map_err(|error| StageError {
        stage: "read dump",
        error: match error {
            Error::Io(e) => Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
            other => other,
        },
    })
}

fn read_thetas(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).stage("read theta override")?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad theta '{t}' in {}: {e}", path.display())))
        })
        .collect::<std::result::Result<_, _>>()
        .stage("read theta override")
}

fn resolve_config(meta: &DumpMeta, o: &ConfigOverrides) -> Result<RopeConfig> {
    let mut config = RopeConfig::new(
        o.base.unwrap_or(meta.rope_base),
        meta.head_dim,
        meta.rotary_dim,
        o.p_max.unwrap_or(meta.p_max_config),
    )
    .stage("config")?
    .with_layout(o.layout.unwrap_or(meta.layout));
    if let Some(path) = &o.theta_override {
        config = config.with_theta_override(read_thetas(path)?).stage("config")?;
    }
    Ok(config)
}

fn inspect(a: InspectArgs) -> Result<()> {
    let dump = load(&a.input)?;
    let config = resolve_config(&dump.meta, &a.config)?;
    let m = &dump.meta;
    let mut out = output(None)?;
    let text = format!(
        "model: {}\nlayers: {}\nquery heads: {}\nkv heads: {}\npositions: {}\nhead_dim: {}\nrotary_dim: {}\n\
         rope_base: {}\np_max_config: {}\nlayout: {}\npre_rotation: {}\ntokens: {}\nanalysis p_max: {}\n",
        m.model_name,
        m.n_layers,
        m.n_q_heads,
        m.n_kv_heads,
        m.n_positions,
        m.head_dim,
        m.rotary_dim,
        m.rope_base,
        m.p_max_config,
        m.layout,
        m.pre_rotation,
        if m.tokens.is_some() { "present" } else { "absent" },
        config.p_max,
    );
    out.write_all(text.as_bytes()).stage("write output")?;
    out.flush().stage("write output")
}

fn stats(a: StatsArgs) -> Result<()> {
    let dump = load(&a.input)?;
    let config = resolve_config(&dump.meta, &a.config)?;
    let out = output(a.output.as_deref())?;
    if let Some(pair) = a.spread_pair {
        let points = spread_vs_radius(&dump, &config, a.side, pair, a.angle_floor).stage("spread")?;
        return report::write_spread_csv(&points, out).stage("write output");
    }
    let opts = StatsOptions {
        angle_floor: a.angle_floor,
        exclude_positions: a.exclude_positions.into_iter().collect(),
    };
    let table = mean_vectors(&dump, &config, &opts).stage("statistics")?;
    table.write_csv(out).stage("write output")
}

fn decompose(a: DecomposeArgs) -> Result<()> {
    let dump = load(&a.input)?;
    let config = resolve_config(&dump.meta, &a.config)?;
    let table = mean_vectors(&dump, &config, &StatsOptions::default()).stage("statistics")?;
    let head = table.head(a.layer, a.head).stage("select head")?;
    let max_distance = a.positions.unwrap_or(config.p_max + 512);
    let exclude: BTreeSet<usize> = a.exclude_features.iter().copied().collect();
    let profile = d_profile(head, max_distance, &exclude, &config).stage("decompose")?;
    profile.write_csv(output(a.output.as_deref())?).stage("write output")?;

    if a.attention_svg.is_some() || a.attention_csv.is_some() {
        let attn = if a.full {
            full_attention(&dump, a.layer, a.head, &config).stage("attention")?
        } else {
            positional_attention(&profile, config.head_dim)
        };
        if let Some(p) = &a.attention_svg {
            report::emit_attention_svg(&attn, 256, output(Some(p))?).stage("write attention")?;
        }
        if let Some(p) = &a.attention_csv {
            attn.write_csv(output(Some(p))?).stage("write attention")?;
        }
    }
    if let (Some(pair), Some(path)) = (a.sink_pair, &a.sinks_output) {
        let s = sink_scores(&dump, a.layer, a.head, pair, &config).stage("sink scores")?;
        let mut out = output(Some(path))?;
        let mut text = String::from("position,token,score,positive\n");
        for (p, score) in s.scores.iter().enumerate() {
            let token = dump.meta.token_label(p).replace(['"', '\n', ','], " ");
            text.push_str(&format!("{p},{token},{score},{}\n", s.positive.contains(&p)));
        }
        out.write_all(text.as_bytes()).stage("write sinks")?;
        out.flush().stage("write sinks")?;
    }
    Ok(())
}

fn bounds(a: BoundsArgs) -> Result<()> {
    let mut config = match &a.input {
        Some(path) => resolve_config(&load(path)?.meta, &a.config)?,
        None => {
            let rotary_dim = a.rotary_dim.ok_or_else(|| StageError {
                stage: "config",
                error: Error::Config("--rotary-dim is required without --input".into()),
            })?;
            let (Some(base), Some(p_max)) = (a.config.base, a.config.p_max) else {
                return Err(StageError {
                    stage: "config",
                    error: Error::Config("--base and --p-max are required without --input".into()),
                });
            };
            let c = RopeConfig::new(base, a.head_dim.unwrap_or(rotary_dim), rotary_dim, p_max).stage("config")?;
            c.with_layout(a.config.layout.unwrap_or(rof_core::Layout::SlicedFirst))
        }
    };
    if a.input.is_none() {
        if let Some(path) = &a.config.theta_override {
            config = config.with_theta_override(read_thetas(path)?).stage("config")?;
        }
    }
    let table = bounds_table(&config).stage("bounds")?;
    let s = summary(&config).stage("bounds")?;
    let mut out = output(a.output.as_deref())?;
    out.write_all(report::format_bounds(&config, &table, &s).as_bytes()).stage("write output")?;
    out.flush().stage("write output")
}

fn pooled_verdicts(inputs: &[PathBuf], overrides: &ConfigOverrides) -> Result<(Vec<OffsetVerdict>, RopeConfig)> {
    let mut all = Vec::new();
    let mut first: Option<RopeConfig> = None;
    for path in inputs {
        let dump = load(path)?;
        let config = resolve_config(&dump.meta, overrides)?;
        if let Some(f) = &first {
            if f.n_pairs() != config.n_pairs() {
                return Err(StageError {
                    stage: "pool inputs",
                    error: Error::Shape(format!("{} has a different number of rotary pairs", path.display())),
                });
            }
        }
        let table = mean_vectors(&dump, &config, &StatsOptions::default()).stage("statistics")?;
        all.extend(verdicts(&table, &config).stage("classify")?);
        first.get_or_insert(config);
    }
    Ok((all, first.expect("clap requires at least one input")))
}

fn classify(a: MultiInputArgs) -> Result<()> {
    let (v, _) = pooled_verdicts(&a.input, &a.config)?;
    report::write_verdicts_csv(&v, output(a.output.as_deref())?).stage("write output")
}

fn recall(a: RecallArgs) -> Result<()> {
    let (v, _) = pooled_verdicts(&a.inputs.input, &a.inputs.config)?;
    let rows = recall_table(&v, &a.thresholds, a.relax, a.side).stage("recall")?;
    report::write_recall_csv(&rows, output(a.inputs.output.as_deref())?).stage("write output")
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let dump = load(&a.input)?;
    let config = resolve_config(&dump.meta, &a.config)?;
    let m = magnitude_summary(&dump, a.side, a.reducer);
    report::emit_heatmap(&m, &config, output(a.output.as_deref())?).stage("heatmap")
}

fn scatter(a: MultiInputArgs) -> Result<()> {
    let (v, config) = pooled_verdicts(&a.input, &a.config)?;
    report::emit_scatter(&v, &config, output(a.output.as_deref())?).stage("scatter")
}

fn compare(a: CompareArgs) -> Result<()> {
    let base = load(&a.base_input)?;
    let ext = load(&a.ext_input)?;
    let base_cfg = resolve_config(
        &base.meta,
        &ConfigOverrides { p_max: a.base_p_max, theta_override: a.base_theta_override.clone(), ..Default::default() },
    )?;
    let ext_cfg = resolve_config(
        &ext.meta,
        &ConfigOverrides { p_max: a.ext_p_max, theta_override: a.ext_theta_override.clone(), ..Default::default() },
    )?;
    let sb = mean_vectors(&base, &base_cfg, &StatsOptions::default()).stage("statistics")?;
    let se = mean_vectors(&ext, &ext_cfg, &StatsOptions::default()).stage("statistics")?;
    let cmp = compare_extension(&sb, &base_cfg, &se, &ext_cfg).stage("compare")?;
    let deltas = output(a.output.as_deref())?;
    let sums: Box<dyn Write> = match &a.sums_output {
        Some(p) => output(Some(p))?,
        None => Box::new(io::sink()),
    };
    report::write_extension_csv(&cmp, deltas, sums).stage("write output")
}

fn synth(a: SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).stage("read synth spec")?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", a.spec.display())))
        .stage("read synth spec")?;
    let config = RopeConfig::new(a.base, a.head_dim.unwrap_or(a.rotary_dim), a.rotary_dim, a.p_max)
        .stage("config")?
        .with_layout(a.layout);
    let dump = synth_dump(&spec, &config).stage("synthesize")?;
    write_dump_file(&dump, &a.output).stage("write dump")?;
    Ok(())
}
