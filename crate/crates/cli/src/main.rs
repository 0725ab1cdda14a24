//! `mrp`: runs the analysis stages over a run directory.
//!
//! Every stage reads the run's manifest, checks upstream artifacts and
//! writes its own under `<run>/<stage>/`. Settings come from the run's
//! config snapshot, then `--config`, then individual flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrp_core::error::ErrorClass;
use mrp_core::pipeline::{Run, RunConfig, RunManifest};
use mrp_core::sampler::{Progress, Stage};
use mrp_core::simulate::{raw_fixture, SimConfig};
use mrp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mrp", version, about = "Multilevel regression and poststratification for test records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, impute, filter and link the inputs.
    Preprocess(RunArgs),
    /// Weekly positivity, county maxima and sample-vs-population shares.
    Describe(RunArgs),
    /// Sample every configured model.
    Fit(RunArgs),
    /// PSIS-LOO, model comparison and posterior predictive replicates.
    Diagnose(RunArgs),
    /// Population estimates for each configured grouping.
    Poststratify(RunArgs),
    /// Bundle all results into report/report.json and report/plot-data/.
    Report(RunArgs),
    /// All stages in order.
    Run(RunArgs),
    /// Write a synthetic input set (records, population, crosswalk, tracts).
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run directory [default: $MRP_RUN_DIR, else ./mrp-run]
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML run config; its relative paths resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual test records.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Population counts by zip, sex, age and race.
    #[arg(long)]
    acs: Option<PathBuf>,
    /// Zip to census tract crosswalk.
    #[arg(long)]
    crosswalk: Option<PathBuf>,
    /// Tract-level covariates.
    #[arg(long)]
    tracts: Option<PathBuf>,
    /// Model preset (A, B, C) or spec JSON file; repeat for several models.
    #[arg(long)]
    spec: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    /// Post-warmup draws per chain.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Estimate grouping such as `overall`, `week` or `county:week`; repeatable.
    #[arg(long)]
    grouping: Vec<String>,
    /// No sampler progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for the four input files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    zips: usize,
    #[arg(long, default_value_t = 3)]
    counties: usize,
    #[arg(long, default_value_t = 40)]
    weeks: u32,
    /// Probability that a stratum has tests in a given week.
    #[arg(long, default_value_t = 0.15)]
    tested_share: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 3,
        ErrorClass::Input => 4,
        ErrorClass::Model => 5,
        ErrorClass::Sampling => 6,
        ErrorClass::Artifact => 7,
        ErrorClass::Locked => 8,
    }
}

struct StderrProgress {
    total: [usize; 2],
}

impl Progress for StderrProgress {
    fn update(&self, stage: Stage, chain: usize, iteration: usize) {
        let total = match stage {
            Stage::Warmup => self.total[0],
            Stage::Sampling => self.total[1],
        };
        let step = (total / 4).max(1);
        if iteration % step == 0 {
            eprintln!("  chain {}: {} {}/{}", chain + 1, stage.as_str(), iteration, total);
        }
    }
}

fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

impl RunArgs {
    fn run_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("MRP_RUN_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("mrp-run"))
    }

    /// The run's config: manifest snapshot, replaced by `--config`, then
    /// overridden field by field.
    fn config(&self, dir: &Path) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => match RunManifest::load(dir) {
                Ok(m) => m.config,
                Err(Error::MissingArtifact(_)) => RunConfig::default(),
                Err(e) => return Err(e),
            },
        };
        let inputs = &mut cfg.inputs;
        for (flag, slot) in [
            (&self.input, &mut inputs.records),
            (&self.acs, &mut inputs.acs),
            (&self.crosswalk, &mut inputs.crosswalk),
            (&self.tracts, &mut inputs.tracts),
        ] {
            if let Some(p) = flag {
                *slot = Some(absolute(p.clone()));
            }
        }
        if !self.spec.is_empty() {
            cfg.models = self
                .spec
                .iter()
                .map(|s| {
                    let p = Path::new(s);
                    if p.exists() {
                        absolute(p.to_path_buf()).display().to_string()
                    } else {
                        s.clone()
                    }
                })
                .collect();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.chains {
            cfg.sampler.chains = c;
        }
        if let Some(i) = self.iters {
            cfg.sampler.sampling_iters = i;
        }
        if let Some(w) = self.warmup {
            cfg.sampler.warmup_iters = w;
        }
        if !self.grouping.is_empty() {
            cfg.poststratify.groupings = self.grouping.clone();
        }
        cfg.sampler_config().validate()?;
        Ok(cfg)
    }
}

fn stage(name: &str, args: &RunArgs) -> Result<()> {
    let dir = args.run_dir();
    let cfg = args.config(&dir)?;
    let progress = StderrProgress {
        total: [cfg.sampler.warmup_iters, cfg.sampler.sampling_iters],
    };
    let quiet = args.quiet;
    let mut run = Run::create(&dir, cfg)?;
    let progress: &dyn Progress = if quiet { &() } else { &progress };
    match name {
        "preprocess" => {
            let report = run.preprocess()?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
        }
        "describe" => run.describe()?,
        "fit" => {
            for m in run.fit(progress)? {
                eprintln!("fitted {m}");
            }
        }
        "diagnose" => run.diagnose()?,
        "poststratify" => run.poststratify()?,
        "report" => run.report()?,
        "run" => run.run_all(progress)?,
        _ => unreachable!("stage names are fixed"),
    }
    for (s, rec) in &run.manifest.stages {
        if name != "run" && s != name {
            continue;
        }
        for w in &rec.warnings {
            eprintln!("warning [{s}]: {w}");
        }
    }
    eprintln!("{name}: done ({})", dir.display());
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = SimConfig {
        zips: args.zips,
        counties: args.counties,
        weeks: args.weeks,
        tested_share: args.tested_share,
        seed: args.seed,
        ..SimConfig::default()
    };
    let fixture = raw_fixture(&cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    fixture.write_dir(&args.out)?;
    eprintln!(
        "wrote {} records ({} malformed) to {}",
        fixture.n_records,
        fixture.n_malformed,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match &cli.command {
        Command::Preprocess(a) => ("preprocess", stage("preprocess", a)),
        Command::Describe(a) => ("describe", stage("describe", a)),
        Command::Fit(a) => ("fit", stage("fit", a)),
        Command::Diagnose(a) => ("diagnose", stage("diagnose", a)),
        Command::Poststratify(a) => ("poststratify", stage("poststratify", a)),
        Command::Report(a) => ("report", stage("report", a)),
        Command::Run(a) => ("run", stage("run", a)),
        Command::Simulate(a) => ("simulate", simulate(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{name}]: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
