use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use pccomp::config::{RunConfig, KEYS};
use pccomp::distances::{cd, mmd, rcd_with, ucd, uhd, Norm, RcdParams};
use pccomp::gradcheck::{run_term, SuiteOptions, TERMS, TOLERANCE};
use pccomp::io::{read_cloud, write_cloud, CloudFormat};
use pccomp::optimize::{ablate, evaluate, step_seeds, synthetic_suite, variant_grid, AblationTable};
use pccomp::patch::{gather_group, partition, patchify, Group};
use pccomp::run::{run_complete, RunOutput};
use pccomp::{Error, PointCloud};

mod fmt;

use fmt::sig6;

#[derive(Parser)]
#[command(name = "pccomp", version, about = "Point-cloud completion metrics, gradient checks and runs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Distances between a predicted and a reference cloud.
    Metrics {
        prediction: PathBuf,
        /// Reference cloud; also supplies the skeleton for the region-aware distance.
        reference: PathBuf,
        /// Directory of complete example shapes for the minimal matching distance.
        #[arg(long)]
        examples: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        /// Seeded instances per term.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Seed of the first instance.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict the run to these terms.
        #[arg(long = "term", value_parser = clap::builder::PossibleValuesParser::new(TERMS))]
        terms: Vec<String>,
        /// Test hook: corrupts the analytic gradient of the named term.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Patches and group split of a cloud as drawn at one optimizer step.
    Patchify {
        input: PathBuf,
        /// Optimizer step whose seeds are used.
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Writes rec.xyz, com.xyz and latent.xyz into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Completes a partial cloud, or the configured synthetic shape.
    Complete {
        /// Partial cloud to complete; omitted, the synthetic shape is used.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory for final.ply, trace.txt and config.txt.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Runs the distance x NCC variant grid over the synthetic suite.
    Ablate {
        /// Tab-separated metrics table to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// `--config FILE` plus one flag per configuration key.
#[derive(Debug, Clone, Default)]
struct ConfigArgs {
    config: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let config = m.get_one::<PathBuf>("config").cloned();
        let overrides = KEYS
            .iter()
            .filter_map(|(key, _, _)| m.get_one::<String>(key).map(|v| (*key, v.clone())))
            .collect();
        Ok(ConfigArgs { config, overrides })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value configuration file; flags override it"),
        );
        for (key, default, doc) in KEYS {
            cmd = cmd.arg(
                Arg::new(*key)
                    .long(flag_name(key))
                    .value_name("VALUE")
                    .help(format!("{doc} [default: {default}]")),
            );
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl ConfigArgs {
    /// File, then the seed environment variable, then explicit flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        config.apply_env()?;
        for (key, value) in &self.overrides {
            config
                .set(key, value)
                .with_context(|| format!("--{}", flag_name(key)))?;
        }
        Ok(config)
    }
}

fn read(path: &Path) -> Result<PointCloud> {
    Ok(read_cloud(path)?)
}

fn metrics(prediction: &Path, reference: &Path, examples: Option<&Path>, config: &RunConfig) -> Result<()> {
    let pred = read(prediction)?;
    let refc = read(reference)?;
    let loss = &config.completion.loss;
    let rcd_params = |norm| RcdParams {
        m: loss.rcd.m.min(refc.len()),
        k_region: loss.rcd.k_region,
        seed_index: 0,
        norm,
    };
    let example_set = match examples {
        Some(dir) => Some(read_example_dir(dir)?),
        None => None,
    };

    println!("{:<22}{:>14}{:>14}{:>16}", "metric", "l2", "sq-l2", "sq-l2 x1e4");
    let row = |name: &str, f: &dyn Fn(Norm) -> pccomp::Result<f64>| -> Result<()> {
        let l2 = f(Norm::L2)?;
        let sq = f(Norm::SquaredL2)?;
        println!("{name:<22}{:>14}{:>14}{:>16}", sig6(l2), sig6(sq), sig6(sq * 1e4));
        Ok(())
    };
    row("cd", &|n| cd(&pred, &refc, n))?;
    row("ucd(ref->pred)", &|n| ucd(&refc, &pred, n))?;
    row("ucd(pred->ref)", &|n| ucd(&pred, &refc, n))?;
    row(
        &format!("rcd(m={},k={})", loss.rcd.m.min(refc.len()), loss.rcd.k_region),
        &|n| rcd_with(&refc, &pred, &rcd_params(n)),
    )?;
    if let Some(set) = &example_set {
        row("mmd", &|n| mmd(&pred, set, n))?;
    }
    println!("{:<22}{:>14}", "uhd(ref->pred)", sig6(uhd(&refc, &pred)?));
    Ok(())
}

fn read_example_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("{}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("xyz" | "ply")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("{}: no .xyz or .ply files", dir.display());
    }
    paths.iter().map(|p| read(p)).collect()
}

fn gradcheck(instances: usize, seed: u64, terms: &[String], corrupt: Option<String>) -> Result<bool> {
    let opts = SuiteOptions {
        instances,
        base_seed: seed,
        corrupt,
    };
    let selected: Vec<&str> = if terms.is_empty() {
        TERMS.to_vec()
    } else {
        terms.iter().map(String::as_str).collect()
    };
    println!(
        "{:<20}{:>10}{:>15}{:>12}{:>12}  result",
        "term", "instances", "max rel err", "worst seed", "screened"
    );
    let mut all_passed = true;
    for term in selected {
        let r = run_term(term, &opts)?;
        let passed = r.passed();
        all_passed &= passed;
        println!(
            "{:<20}{:>10}{:>15}{:>12}{:>12}  {}",
            r.term,
            r.instances,
            sig6(r.max_rel_error),
            r.worst_seed,
            format!("{}/{}", r.screened, r.probed),
            if passed { "PASS" } else { "FAIL" }
        );
    }
    println!("tolerance {}", sig6(TOLERANCE));
    Ok(all_passed)
}

fn patchify_cmd(input: &Path, iteration: usize, out: Option<&Path>, config: &RunConfig) -> Result<()> {
    let cloud = read(input)?;
    let c = &config.completion;
    let seeds = step_seeds(c.global_seed, iteration, cloud.len());
    let patches = patchify(&cloud, c.n_patches, c.k_patch, seeds.fps_seed)?;
    let split = partition(patches, c.ratio, seeds.partition_seed)?;
    println!("{:>5}  {:<7}{:>8}{:>12}{:>12}{:>12}", "patch", "group", "center", "x", "y", "z");
    for (i, group) in split.group_of.iter().enumerate() {
        let p = split.patches.center_points[i];
        println!(
            "{i:>5}  {:<7}{:>8}{:>12}{:>12}{:>12}",
            group.to_string(),
            split.patches.centers.indices[i],
            sig6(p.x),
            sig6(p.y),
            sig6(p.z)
        );
    }
    for label in [Group::Rec, Group::Com, Group::Latent] {
        println!("{label}: {} patches", split.members(label).len());
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
        for label in [Group::Rec, Group::Com, Group::Latent] {
            let points = gather_group(&cloud, &split, label)?;
            write_cloud(&points, dir.join(format!("{label}.xyz")), CloudFormat::Xyz)?;
        }
    }
    Ok(())
}

fn complete_cmd(input: Option<&Path>, out: &Path, config: &RunConfig) -> Result<()> {
    let RunOutput { completion, instance } = match run_complete(config, input, out) {
        Err(Error::Diverged { iteration, .. }) => {
            bail!("optimization diverged at iteration {iteration}; partial trace written to {}", out.display())
        }
        other => other?,
    };
    if let Some(last) = completion.trace.records.last() {
        println!("final total loss {}", sig6(last.total));
    }
    let final_cloud = &completion.candidate;
    match instance {
        Some(inst) => {
            let m = evaluate(final_cloud, &inst.partial, &inst.complete, &inst.occluded)?;
            println!("cd to ground truth (sq-l2 x1e4) {}", sig6(m.cd_gt * 1e4));
            println!("ucd partial->final (sq-l2 x1e4) {}", sig6(m.ucd * 1e4));
            println!("uhd partial->final {}", sig6(m.uhd));
            println!("occluded coverage {}", sig6(m.coverage));
        }
        None => {
            let partial = read(input.expect("input given when no synthetic instance"))?;
            println!("ucd partial->final (sq-l2 x1e4) {}", sig6(ucd(&partial, final_cloud, Norm::SquaredL2)? * 1e4));
            println!("uhd partial->final {}", sig6(uhd(&partial, final_cloud)?));
        }
    }
    Ok(())
}

fn ablate_cmd(out: &Path, config: &RunConfig) -> Result<()> {
    let suite = synthetic_suite(config.instances, config.n_points, config.shape_seed)?;
    let table = ablate(&suite, &variant_grid(), &config.completion)?;
    fs::write(out, table.to_tsv()).with_context(|| format!("{}", out.display()))?;
    println!("{}", AblationTable::COLUMNS.map(|c| format!("{c:>14}")).join(""));
    for r in &table.rows {
        let m = &r.mean;
        println!(
            "{:>14}{:>14}{:>14}{:>14}{:>14}{:>14}",
            r.variant.label(),
            sig6(m.cd_gt),
            sig6(m.ucd),
            sig6(m.uhd),
            sig6(m.rcd),
            sig6(m.coverage)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Cmd::Metrics {
            prediction,
            reference,
            examples,
            config,
        } => metrics(&prediction, &reference, examples.as_deref(), &config.resolve()?)?,
        Cmd::Gradcheck {
            instances,
            seed,
            terms,
            corrupt,
        } => return gradcheck(instances, seed, &terms, corrupt),
        Cmd::Patchify {
            input,
            iteration,
            out,
            config,
        } => patchify_cmd(&input, iteration, out.as_deref(), &config.resolve()?)?,
        Cmd::Complete { input, out, config } => complete_cmd(input.as_deref(), &out, &config.resolve()?)?,
        Cmd::Ablate { out, config } => ablate_cmd(&out, &config.resolve()?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
