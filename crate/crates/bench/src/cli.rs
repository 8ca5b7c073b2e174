use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use tomesd::diffusion::sample_inputs;
use tomesd::matching::{build_merge_plan, MergeEdge, MergePlan, RatioPolicy};
use tomesd::partition::{make_partition, GridShape, PartitionScheme};
use tomesd::rng::Rng;
use tomesd::viz::{render_mask, render_merge_map};

use crate::config::{parse_dims, HarnessConfig};
use crate::error::BenchError;
use crate::report::{write_file, write_partition_views, write_run, write_sweep};
use crate::runner::{run_sweep, Harness};

#[derive(Debug, Parser)]
#[command(name = "tomesd-bench", version, about = "Token merging benchmarks on a toy diffusion U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the baseline and the configured policy on the same seeds.
    Run(Flags),
    /// Run every combination of the sweep axes. `--ratio` takes a list or
    /// `start:stop:step`, `--partition` a comma list, `--apply` sets separated by `|`.
    Sweep(Flags),
    /// Render a partition and its merge map, or the merge map of an edge list.
    Viz {
        #[command(flatten)]
        flags: Flags,
        /// Edge list (`src dst` per line) to render instead of a fresh partition.
        #[arg(long, value_name = "FILE")]
        plan: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<String>,
    #[arg(long)]
    pub ratio_start: Option<String>,
    #[arg(long)]
    pub ratio_end: Option<String>,
    /// alt | strided:SYxSX | rand:F | rand2x2 | randtile:TYxTX
    #[arg(long)]
    pub partition: Option<String>,
    #[arg(long, overrides_with = "no_batch_fix")]
    pub batch_fix: bool,
    #[arg(long, overrides_with = "batch_fix")]
    pub no_batch_fix: bool,
    /// Comma list of self, cross, mlp.
    #[arg(long)]
    pub apply: Option<String>,
    #[arg(long)]
    pub min_tokens: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub seed_count: Option<String>,
    /// Top-scale grid, HxW.
    #[arg(long)]
    pub latent: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    #[arg(long, value_parser = ["json", "csv"])]
    pub format: Option<String>,
    /// Also write partition masks, merge maps and edge lists.
    #[arg(long)]
    pub viz_partition: bool,
    #[arg(long, overrides_with = "no_compare_baseline")]
    pub compare_baseline: bool,
    #[arg(long, overrides_with = "compare_baseline")]
    pub no_compare_baseline: bool,
    /// Drop selected tokens instead of merging them.
    #[arg(long)]
    pub prune: bool,
}

impl Flags {
    /// Flag values as config entries; `sweep` routes the axis flags to the sweep lists.
    pub fn overrides(&self, sweep: bool) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |key: &'static str, v: &Option<String>| {
            if let Some(v) = v {
                out.push((key, v.clone()));
            }
        };
        put(if sweep { "sweep_ratios" } else { "ratio" }, &self.ratio);
        put("ratio_start", &self.ratio_start);
        put("ratio_end", &self.ratio_end);
        put(if sweep { "sweep_partitions" } else { "partition" }, &self.partition);
        put(if sweep { "sweep_apply" } else { "apply" }, &self.apply);
        put("min_tokens", &self.min_tokens);
        put("steps", &self.steps);
        put("seed", &self.seed);
        put("seed_count", &self.seed_count);
        put("latent", &self.latent);
        put("out", &self.out);
        put("format", &self.format);
        let flag = |on: bool, off: bool| (on || off).then(|| on.to_string());
        for (key, v) in [
            ("batch_fix", flag(self.batch_fix, self.no_batch_fix)),
            ("compare_baseline", flag(self.compare_baseline, self.no_compare_baseline)),
            ("viz_partition", self.viz_partition.then(|| "true".to_string())),
            ("prune", self.prune.then(|| "true".to_string())),
        ] {
            if let Some(v) = v {
                out.push((key, v));
            }
        }
        out
    }

    pub fn resolve(&self, sweep: bool) -> Result<HarnessConfig, BenchError> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
                HarnessConfig::parse_flat(&text)?
            }
            None => BTreeMap::new(),
        };
        HarnessConfig::resolve(&file, &self.overrides(sweep))
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<Vec<PathBuf>, BenchError> {
    match command {
        Command::Run(flags) => {
            let cfg = flags.resolve(false)?;
            let harness = Harness::new(&cfg)?;
            let (report, extras) = harness.run(&cfg, cfg.viz_partition)?;
            let mut written = write_run(&cfg, &report, &extras)?;
            if cfg.viz_partition {
                let last = cfg.steps - 1;
                let records: Vec<_> = extras
                    .partitions
                    .iter()
                    .filter(|r| r.step == 0 || r.step == last)
                    .cloned()
                    .collect();
                let dir = Path::new(&cfg.out).join("viz");
                written.extend(write_partition_views(&dir, harness.model().sites(), &records)?);
            }
            let s = &report.summary;
            eprintln!(
                "speedup estimate {:.3}; relative L2 vs baseline {}",
                s.speedup_estimate,
                s.mean_relative_l2.map_or_else(|| "not computed".to_string(), |e| format!("{e:.6}"))
            );
            Ok(written)
        }
        Command::Sweep(flags) => {
            let cfg = flags.resolve(true)?;
            let (points, extras) = run_sweep(&cfg)?;
            write_sweep(&cfg, &points, &extras)
        }
        Command::Viz { flags, plan } => {
            let cfg = flags.resolve(false)?;
            match plan {
                Some(path) => viz_plan(&cfg, path),
                None => viz_partition(&cfg),
            }
        }
    }
}

/// Mask of the step-0 partition of the top scale and the merge map it yields on
/// the seed's noise at the configured ratio.
fn viz_partition(cfg: &HarnessConfig) -> Result<Vec<PathBuf>, BenchError> {
    let (h, w) = cfg.latent;
    let shape = GridShape::new(1, h, w)?;
    let scheme = PartitionScheme::new(cfg.partition).with_batch_fix(cfg.batch_fix);
    let partition = make_partition(shape, &scheme, &Rng::new(cfg.seed), 0, 0)?;
    let policy = RatioPolicy::new(cfg.ratio)?;
    let noise = sample_inputs(&cfg.unet_spec(), cfg.seed)?.noise;
    let plan = build_merge_plan(noise.element(0), &partition, 0, policy)
        .map_err(|e| BenchError::config("ratio", e.to_string()))?;
    let out = Path::new(&cfg.out);
    Ok(vec![
        write_file(&out.join("mask.ppm"), &render_mask(partition.dst_mask(0), h, w)?.to_ppm())?,
        write_file(&out.join("merge.ppm"), &render_merge_map(&plan, h, w)?.to_ppm())?,
        write_file(&out.join("edges.txt"), plan.to_edge_list().as_bytes())?,
    ])
}

/// Merge map of an edge list. Tokens named as a `dst` count as `dst`; all
/// others as `src`.
fn viz_plan(cfg: &HarnessConfig, path: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let text = fs::read_to_string(path)
        .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
    let pairs = MergePlan::parse_edge_list(&text).map_err(|e| BenchError::config("plan", e.to_string()))?;
    let (h, w) = parse_dims("latent", &format!("{}x{}", cfg.latent.0, cfg.latent.1))?;
    let mut mask = vec![false; h * w];
    for &(_, d) in &pairs {
        if d >= mask.len() {
            return Err(BenchError::config("plan", format!("token {d} is outside the {h}x{w} grid")));
        }
        mask[d] = true;
    }
    let edges = pairs
        .into_iter()
        .map(|(src, dst)| MergeEdge {
            src,
            dst,
            similarity: 0.0,
        })
        .collect();
    let plan = MergePlan::from_edges(&mask, edges).map_err(|e| BenchError::config("plan", e.to_string()))?;
    let out = Path::new(&cfg.out).join("plan_merge.ppm");
    Ok(vec![write_file(&out, &render_merge_map(&plan, h, w)?.to_ppm())?])
}
