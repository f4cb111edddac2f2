//! The `tsrec` command line.

mod plot;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    ingest, save_instances, write_header, Column, ColumnSpec, DataSplit, InteractionLog, ItemId, RtimCache,
    UserId,
};
use crate::eval::{
    build_eval_groups, curve_argmax, evaluate, interval_histogram, jaccard_repeat_similarity,
    probe_interval_response, DatasetStats, ModelRanker, Part,
};
use crate::model::{load_checkpoint, save_checkpoint, train, training_positives, EpochRecord, PopRec, TsRec};
use crate::numerics::GradCheckOptions;
use crate::pipeline::{gradient_check, prepare, probe_instance};
use crate::synth::generate;

pub use plot::{bar_chart_svg, line_chart_svg};

const CHECKPOINT: &str = "model.ckpt";
const RUN_CONF: &str = "run.conf";

#[derive(Debug, Parser)]
#[command(name = "tsrec", version, about = "Repeat-aware sequential recommendation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand. Precedence: built-in defaults, then
/// `--config`, then `--set`, then the dedicated flags.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for both the model and the synthetic generator.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub min_item_count: Option<usize>,
    /// Train, validation and test fractions, e.g. `0.7,0.1,0.2`.
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// Interval unit in seconds; 0 picks the smallest repeat gap.
    #[arg(long, global = true)]
    pub p_min: Option<i64>,
    #[arg(long, global = true)]
    pub bin_max: Option<u32>,
    /// Rows of the repeat interval matrix.
    #[arg(long, global = true)]
    pub matrix_m: Option<usize>,
    /// Columns of the repeat interval matrix and interval history width.
    #[arg(long, global = true)]
    pub matrix_n: Option<usize>,
    #[arg(long, global = true)]
    pub seq_len: Option<usize>,
    /// Also render the histogram or curve as an SVG file.
    #[arg(long, global = true)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic log with planted periodic repurchases.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a delimited event file into a dataset directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// User column, by header name or zero-based index.
        #[arg(long, default_value = "user_id")]
        user_col: String,
        #[arg(long, default_value = "item_id")]
        item_col: String,
        #[arg(long, default_value = "timestamp")]
        time_col: String,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
        /// The first row holds data, not column names.
        #[arg(long)]
        no_header: bool,
    },
    /// Dataset statistics, repeat-context Jaccard and the interval histogram.
    Analyze {
        #[command(flatten)]
        data: DataArg,
        /// Restrict the histogram to one raw item id.
        #[arg(long)]
        item: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split, build instances and repeat interval matrices.
    Prepare {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with early stopping; writes the checkpoint and history.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the held-out events against sampled negatives.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: PartArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one user/item pair across target interval bins.
    Probe {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        /// Raw user id.
        #[arg(long)]
        user: String,
        /// Raw item id.
        #[arg(long)]
        item: String,
        /// Inclusive bin range `lo:hi` or a comma list.
        #[arg(long, default_value = "0:16")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        /// Dataset to draw instances from; a small synthetic log by default.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 4)]
        groups: usize,
    },
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory (from `ingest` or `generate`) or an events CSV.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum PartArg {
    Validation,
    Test,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::Validation => Part::Validation,
            PartArg::Test => Part::Test,
        }
    }
}

impl GlobalArgs {
    /// Resolves the run configuration on top of `base`.
    pub fn resolve(&self, mut base: RunConfig) -> anyhow::Result<RunConfig> {
        if let Some(path) = &self.config {
            base.apply_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            base.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            base.model.seed = s;
            base.synth.seed = s;
        }
        if let Some(v) = self.min_item_count {
            base.min_item_count = v;
        }
        if let Some(v) = &self.split {
            base.set("split", v)?;
        }
        if let Some(v) = self.p_min {
            base.model.p_min = v;
        }
        if let Some(v) = self.bin_max {
            base.model.bin_max = v;
        }
        if let Some(v) = self.matrix_m {
            base.model.matrix_rows = v;
        }
        if let Some(v) = self.matrix_n {
            base.model.history_len = v;
        }
        if let Some(v) = self.seq_len {
            base.model.seq_len = v;
        }
        base.validate()?;
        Ok(base)
    }
}

/// Parses `lo:hi` (inclusive) or `a,b,c`.
pub fn parse_grid(spec: &str) -> anyhow::Result<Vec<u32>> {
    let grid: Vec<u32> = if let Some((lo, hi)) = spec.split_once(':') {
        let (lo, hi): (u32, u32) = (lo.trim().parse()?, hi.trim().parse()?);
        (lo..=hi).collect()
    } else {
        spec.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
    };
    if grid.is_empty() {
        bail!("empty bin grid `{spec}`");
    }
    Ok(grid)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Generate { out } => cmd_generate(g, out),
        Command::Ingest {
            input,
            out,
            user_col,
            item_col,
            time_col,
            delimiter,
            no_header,
        } => {
            let cfg = g.resolve(RunConfig::default())?;
            let spec = ColumnSpec {
                user: user_col.parse::<Column>()?,
                item: item_col.parse::<Column>()?,
                timestamp: time_col.parse::<Column>()?,
                delimiter: *delimiter,
                has_header: !no_header,
            };
            let log = ingest(input, &spec).with_context(|| format!("reading {}", input.display()))?;
            log.save_dir(out, &cfg.header(cfg.model.seed))?;
            eprintln!("{} users, {} items, {} events", log.num_users(), log.num_items(), log.num_events());
            Ok(())
        }
        Command::Analyze { data, item, out } => cmd_analyze(g, &data.data, item.as_deref(), out.as_deref()),
        Command::Prepare { data, out } => cmd_prepare(g, &data.data, out),
        Command::Train { data, out } => cmd_train(g, &data.data, out),
        Command::Evaluate { data, model, part, out } => {
            cmd_evaluate(g, &data.data, model, (*part).into(), out.as_deref())
        }
        Command::Probe {
            data,
            model,
            user,
            item,
            grid,
            out,
        } => cmd_probe(g, &data.data, model, user, item, grid, out.as_deref()),
        Command::Gradcheck {
            data,
            tolerance,
            groups,
        } => cmd_gradcheck(g, data.as_deref(), *tolerance, *groups),
    }
}

/// Loads a dataset directory, or ingests an events CSV with default columns.
pub fn load_log(path: &Path) -> anyhow::Result<InteractionLog> {
    let log = if path.is_dir() {
        InteractionLog::load_dir(path)
    } else {
        ingest(path, &ColumnSpec::default())
    };
    log.with_context(|| format!("loading {}", path.display()))
}

/// Text output to a file, or to stdout when `path` is `None`.
fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_lines(path: Option<&Path>, header: &str, lines: &[String]) -> anyhow::Result<()> {
    let mut w = sink(path)?;
    write_header(&mut w, header)?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn save_plot(path: &Path, svg: &str) -> anyhow::Result<()> {
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(g: &GlobalArgs, out: &Path) -> anyhow::Result<()> {
    let cfg = g.resolve(RunConfig::default())?;
    let header = cfg.header(cfg.synth.seed);
    let synth = generate(&cfg.synth)?;
    let log = &synth.log;
    log.save_dir(out, &header)?;
    let raw_items = |items: &[ItemId]| -> String {
        let v: Vec<&str> = items.iter().map(|&i| log.item_vocab()[i as usize - 1].as_str()).collect();
        v.join(",")
    };
    let mut lines = vec!["user\tperiodic_items\tblock_items".to_string()];
    for (u, (p, b)) in synth.periodic.iter().zip(&synth.blocks).enumerate() {
        lines.push(format!("{}\t{}\t{}", log.user_vocab()[u], raw_items(p), raw_items(b)));
    }
    write_lines(Some(&out.join("truth.tsv")), &header, &lines)?;
    write_lines(Some(&out.join(RUN_CONF)), &header, &[cfg.to_text()])?;
    eprintln!("wrote {} events to {}", log.num_events(), out.display());
    Ok(())
}

fn cmd_analyze(g: &GlobalArgs, data: &Path, item: Option<&str>, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = g.resolve(RunConfig::default())?;
    let log = load_log(data)?;
    let item = item.map(|raw| raw_item(&log, raw)).transpose()?;
    let mut p_min = cfg.model.p_min;
    if p_min == 0 {
        p_min = crate::data::min_repeat_gap(log.histories()).max(1);
    }
    let mut lines = DatasetStats::of(&log).to_records();
    lines.push(format!("jaccard_percent\t{:.6}", jaccard_repeat_similarity(&log)));
    lines.push(format!("p_min\t{p_min}"));
    let hist = interval_histogram(&log, item, p_min, cfg.model.bin_max);
    for (bin, count) in &hist {
        lines.push(format!("interval_bin\t{bin}\t{count}"));
    }
    write_lines(out, &cfg.header(cfg.model.seed), &lines)?;
    if let Some(path) = &g.plot {
        let bars: Vec<(String, f64)> = hist.iter().map(|(b, c)| (b.to_string(), *c as f64)).collect();
        save_plot(path, &bar_chart_svg("Repeat interval histogram", "interval bin", "count", &bars))?;
    }
    Ok(())
}

fn raw_item(log: &InteractionLog, raw: &str) -> anyhow::Result<ItemId> {
    log.item_vocab()
        .iter()
        .position(|v| v == raw)
        .map(|i| i as ItemId + 1)
        .ok_or_else(|| anyhow!("unknown item id `{raw}`"))
}

fn raw_user(log: &InteractionLog, raw: &str) -> anyhow::Result<UserId> {
    log.user_vocab()
        .iter()
        .position(|v| v == raw)
        .map(|i| i as UserId + 1)
        .ok_or_else(|| anyhow!("unknown user id `{raw}`"))
}

fn prepared(cfg: &mut RunConfig, data: &Path) -> anyhow::Result<(DataSplit, RtimCache)> {
    let log = load_log(data)?;
    let (split, rtim) = prepare(&log, cfg.min_item_count, cfg.split, &mut cfg.model)?;
    Ok((split, rtim))
}

fn cmd_prepare(g: &GlobalArgs, data: &Path, out: &Path) -> anyhow::Result<()> {
    let mut cfg = g.resolve(RunConfig::default())?;
    let (split, rtim) = prepared(&mut cfg, data)?;
    let header = cfg.header(cfg.model.seed);
    std::fs::create_dir_all(out)?;
    let m = &cfg.model;
    save_instances(&out.join("train.tsv"), &training_positives(m, &split), &header)?;
    for (part, name) in [(Part::Validation, "val.tsv"), (Part::Test, "test.tsv")] {
        let k = if part == Part::Test { m.test_negatives } else { m.val_negatives };
        let groups = build_eval_groups(&split, part, k, &m.features(), m.seed)?;
        let flat: Vec<_> = groups
            .into_iter()
            .flat_map(|g| std::iter::once(g.positive).chain(g.negatives))
            .collect();
        save_instances(&out.join(name), &flat, &header)?;
    }
    rtim.save(&out.join("rtim.tsv"), &header)?;
    write_lines(Some(&out.join(RUN_CONF)), &header, &[cfg.to_text()])?;
    let (a, b, c) = split.sizes();
    eprintln!("train {a}, validation {b}, test {c} events; p_min {}", m.p_min);
    Ok(())
}

fn cmd_train(g: &GlobalArgs, data: &Path, out: &Path) -> anyhow::Result<()> {
    let mut cfg = g.resolve(RunConfig::default())?;
    let (split, rtim) = prepared(&mut cfg, data)?;
    let header = cfg.header(cfg.model.seed);
    std::fs::create_dir_all(out)?;
    let outcome = train(&cfg.model, &split, &rtim, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  HR@10 {:.4}  ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.val_hr10, r.wall_secs
        )
    })?;
    save_checkpoint(&out.join(CHECKPOINT), &outcome.model, &header)?;
    let mut lines = vec![EpochRecord::COLUMNS.to_string()];
    lines.extend(outcome.history.iter().map(|r| r.to_line(true)));
    lines.push(format!("# best_epoch {}", outcome.best_epoch));
    write_lines(Some(&out.join("history.tsv")), &header, &lines)?;
    write_lines(Some(&out.join(RUN_CONF)), &header, &[cfg.to_text()])?;
    eprintln!("best epoch {}", outcome.best_epoch);
    Ok(())
}

/// Run configuration recorded next to a checkpoint, with the current flags
/// applied on top.
fn model_config(g: &GlobalArgs, dir: &Path) -> anyhow::Result<(RunConfig, TsRec)> {
    let mut base = RunConfig::default();
    let conf = dir.join(RUN_CONF);
    if conf.exists() {
        base.apply_file(&conf)?;
    }
    let mut cfg = g.resolve(base)?;
    let path = dir.join(CHECKPOINT);
    let model = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    // Features must match the trained model; evaluation settings may not.
    let keep = cfg.model.clone();
    cfg.model = model.config.clone();
    cfg.model.val_negatives = keep.val_negatives;
    cfg.model.test_negatives = keep.test_negatives;
    cfg.model.seed = keep.seed;
    Ok((cfg, model))
}

fn cmd_evaluate(g: &GlobalArgs, data: &Path, dir: &Path, part: Part, out: Option<&Path>) -> anyhow::Result<()> {
    let (mut cfg, model) = model_config(g, dir)?;
    let (split, rtim) = prepared(&mut cfg, data)?;
    let m = &cfg.model;
    let k = if part == Part::Test { m.test_negatives } else { m.val_negatives };
    let groups = build_eval_groups(&split, part, k, &m.features(), m.seed)?;
    let report = evaluate(&ModelRanker::new(&model, &rtim)?, &groups)?;
    let pop = PopRec::fit(&split.train_histories(), split.log.num_items());
    let baseline = evaluate(&pop, &groups)?;
    let mut lines: Vec<String> = report.to_records().into_iter().map(|l| format!("tsrec\t{l}")).collect();
    lines.extend(baseline.to_records().into_iter().map(|l| format!("poprec\t{l}")));
    write_lines(out, &cfg.header(cfg.model.seed), &lines)
}

fn cmd_probe(
    g: &GlobalArgs,
    data: &Path,
    dir: &Path,
    user: &str,
    item: &str,
    grid: &str,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let (mut cfg, model) = model_config(g, dir)?;
    let (split, rtim) = prepared(&mut cfg, data)?;
    let (u, i) = (raw_user(&split.log, user)?, raw_item(&split.log, item)?);
    let base = probe_instance(&split, u, i, &model.config).ok_or_else(|| {
        anyhow!("user `{user}` needs a test event and two earlier occurrences of item `{item}`")
    })?;
    let grid = parse_grid(grid)?;
    let curve = probe_interval_response(&model, &rtim, &base, &grid)?;
    let mut lines = vec!["bin\tscore".to_string()];
    lines.extend(curve.iter().map(|(b, s)| format!("{b}\t{s:.9}")));
    if let Some(best) = curve_argmax(&curve) {
        lines.push(format!("# argmax {best}"));
    }
    write_lines(out, &cfg.header(cfg.model.seed), &lines)?;
    if let Some(path) = &g.plot {
        let points: Vec<(f64, f64)> = curve.iter().map(|&(b, s)| (b as f64, s)).collect();
        let title = format!("Interval response: user {user}, item {item}");
        save_plot(path, &line_chart_svg(&title, "target interval bin", "score", &points))?;
    }
    Ok(())
}

fn cmd_gradcheck(g: &GlobalArgs, data: Option<&Path>, tolerance: f64, groups: usize) -> anyhow::Result<()> {
    let mut base = RunConfig::default();
    base.model.d = 8;
    base.model.seq_len = 4;
    base.model.history_len = 4;
    base.model.matrix_rows = 2;
    base.model.conv_channels = 2;
    base.model.bin_max = 16;
    base.synth.users = 12;
    base.synth.items = 12;
    base.synth.periodic_items = 3;
    base.synth.events_per_user = 20;
    let mut cfg = g.resolve(base)?;
    cfg.model.dropout = 0.0;
    let log = match data {
        Some(p) => load_log(p)?,
        None => generate(&cfg.synth)?.log,
    };
    let (split, rtim) = prepare(&log, cfg.min_item_count, cfg.split, &mut cfg.model)?;
    let opts = GradCheckOptions {
        seed: cfg.model.seed,
        ..Default::default()
    };
    let report = gradient_check(&split, &rtim, &cfg.model, groups, &opts)?;
    let worst = report
        .worst
        .as_ref()
        .map_or("-".to_string(), |(name, i)| format!("{name}[{i}]"));
    println!(
        "checked {} coordinates, max relative error {:.3e} at {worst}",
        report.checked, report.max_rel_error
    );
    if report.max_rel_error < tolerance {
        Ok(())
    } else {
        bail!("gradient check failed: {:.3e} >= {tolerance:.0e}", report.max_rel_error)
    }
}
