use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::manifest::{sha256_file, Artifact, InputDigest, RunLock, RunManifest, StageRecord};
use super::TOOL_VERSION;
use crate::data::io::{
    create, open, read_cells, read_crosswalk, read_geo, read_population, read_poststrat,
    read_tracts, write_cells, write_geo, write_geo_meta, write_poststrat,
};
use crate::data::{
    aggregate_to_cells, build_poststrat_table, filter_geography, impute_missing,
    link_zip_predictors, parse_records, standardize_predictors, CellTable, FilterReport,
    GeoPredictorTable, ImputationReport, PoststratTable, Reject, Zip,
};
use crate::describe::describe;
use crate::error::{Error, Result};
use crate::loo::{loo_compare, pointwise_loglik, psis_loo, LooResult};
use crate::model::{compile_spec_with_ages, ModelData, ModelSpec};
use crate::poststrat::{Grouping, Poststratifier};
use crate::ppc::{ppc_replicates, PpcGroup};
use crate::sampler::{model_summary_rows, sample_model, summarize, DrawsMatrix, Progress};

pub const STAGES: [&str; 6] = [
    "preprocess",
    "describe",
    "fit",
    "diagnose",
    "poststratify",
    "report",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub total_rows: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub reject_reasons: BTreeMap<String, usize>,
    pub imputed: ImputationReport,
    pub filter: FilterReport,
    pub week_origin: Option<NaiveDate>,
    pub weeks: usize,
    pub cells: usize,
    pub retained_zips: usize,
    pub population_total: f64,
}

/// The three tables every later stage reads.
#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub cells: CellTable,
    pub poststrat: PoststratTable,
    pub geo: GeoPredictorTable,
}

/// Directory name for a model: its name with anything but ASCII
/// alphanumerics, `-` and `_` replaced.
pub fn model_dir_name(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "model".into()
    } else {
        s
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = create(path)?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n").map_err(|e| Error::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = open_artifact(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

fn open_artifact(path: &Path) -> Result<File> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    open(path)
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(create(path)?))
}

fn grouping_file(g: &Grouping) -> String {
    g.name().replace(':', "_by_")
}

fn files_under(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, base, out)?;
        } else {
            out.push(p.strip_prefix(base).expect("under base").to_path_buf());
        }
    }
    Ok(())
}

/// A locked run directory with its manifest.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    _lock: RunLock,
}

impl Run {
    /// Opens `dir` with `config`, keeping any stages already recorded there.
    pub fn create(dir: &Path, config: RunConfig) -> Result<Run> {
        let lock = RunLock::acquire(dir)?;
        let run_id = {
            let mut h = Sha256::new();
            h.update(config.to_toml().as_bytes());
            format!("run-{}", &hex::encode(h.finalize())[..12])
        };
        let manifest = match RunManifest::load(dir) {
            Ok(mut m) => {
                m.config = config;
                m.run_id = run_id;
                m
            }
            Err(Error::MissingArtifact(_)) => RunManifest {
                run_id,
                tool_version: TOOL_VERSION.into(),
                config,
                inputs: BTreeMap::new(),
                stages: BTreeMap::new(),
            },
            Err(e) => return Err(e),
        };
        manifest.save(dir)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            manifest,
            _lock: lock,
        })
    }

    /// Opens an existing run with its recorded config.
    pub fn open(dir: &Path) -> Result<Run> {
        let lock = RunLock::acquire(dir)?;
        let manifest = RunManifest::load(dir)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            manifest,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    /// Replaces the config snapshot (flag overrides for later stages).
    pub fn set_config(&mut self, config: RunConfig) -> Result<()> {
        self.manifest.config = config;
        self.manifest.save(&self.dir)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.dir.join(stage)
    }

    fn preprocess_dir(&self) -> PathBuf {
        self.config()
            .inputs
            .preprocessed
            .clone()
            .map(|p| p.join("preprocess"))
            .unwrap_or_else(|| self.stage_dir("preprocess"))
    }

    fn begin(&self, stage: &str) -> Result<(PathBuf, String)> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok((dir, now()))
    }

    fn finish(&mut self, stage: &str, started: String, warnings: Vec<String>) -> Result<()> {
        let mut files = Vec::new();
        files_under(&self.stage_dir(stage), &self.dir, &mut files)?;
        let artifacts = files
            .into_iter()
            .map(|rel| {
                Ok(Artifact {
                    sha256: sha256_file(&self.dir.join(&rel))?,
                    path: rel
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // downstream results are stale once an upstream stage is redone
        for later in dependents(stage) {
            self.manifest.stages.remove(*later);
        }
        self.manifest.stages.insert(
            stage.into(),
            StageRecord {
                started,
                finished: now(),
                artifacts,
                warnings,
            },
        );
        self.manifest.save(&self.dir)
    }

    fn require(&self, stage: &str) -> Result<()> {
        if stage == "preprocess" && self.config().inputs.preprocessed.is_some() {
            let dir = self.preprocess_dir();
            for f in ["cells.csv", "poststrat.csv", "geo.csv", "geo_meta.json"] {
                if !dir.join(f).exists() {
                    return Err(Error::MissingArtifact(dir.join(f)));
                }
            }
            return Ok(());
        }
        self.manifest.verify_stage(&self.dir, stage)?;
        if stage == "preprocess" {
            self.manifest.verify_inputs()?;
        }
        Ok(())
    }

    fn input(&self, name: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| Error::Config(format!("missing input path --{name}")))?;
        if !p.exists() {
            return Err(Error::io(
                &p,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("--{name} not found")),
            ));
        }
        Ok(p)
    }

    /// Parse, impute, aggregate, filter, link and build the population
    /// table, in that order.
    pub fn preprocess(&mut self) -> Result<PreprocessReport> {
        let cfg = self.config().clone();
        let inputs = [
            ("input", self.input("input", &cfg.inputs.records)?),
            ("acs", self.input("acs", &cfg.inputs.acs)?),
            ("crosswalk", self.input("crosswalk", &cfg.inputs.crosswalk)?),
            ("tracts", self.input("tracts", &cfg.inputs.tracts)?),
        ];
        let (dir, started) = self.begin("preprocess")?;
        let mut digests = BTreeMap::new();
        for (name, p) in &inputs {
            digests.insert(
                name.to_string(),
                InputDigest {
                    path: p.clone(),
                    sha256: sha256_file(p)?,
                },
            );
        }
        self.manifest.inputs = digests;

        let bins = cfg.preprocess.age_bins()?;
        let delim = cfg.preprocess.delimiter_byte()?;
        let parsed = parse_records(open(&inputs[0].1)?, &cfg.schema)?;
        let (records, imputed) = impute_missing(&parsed.records, cfg.seed)?;
        let cells = aggregate_to_cells(&records, &bins, cfg.preprocess.week_origin)?;
        let crosswalk = read_crosswalk(open(&inputs[2].1)?, delim)?;
        let (cells, filter) = filter_geography(&cells, &crosswalk.zip_states())?;
        let zips: Vec<Zip> = cells.zips().into_iter().collect();
        let tracts = read_tracts(open(&inputs[3].1)?, delim)?;
        let geo = standardize_predictors(&link_zip_predictors(&crosswalk, &tracts, &zips)?)?;
        let population = read_population(open(&inputs[1].1)?, delim)?;
        let poststrat = build_poststrat_table(&population, &zips, &bins)?;

        write_cells(writer(&dir.join("cells.csv"))?, &cells)?;
        write_poststrat(writer(&dir.join("poststrat.csv"))?, &poststrat)?;
        write_geo(writer(&dir.join("geo.csv"))?, &geo)?;
        write_geo_meta(writer(&dir.join("geo_meta.json"))?, &geo)?;
        write_rejects(&dir.join("rejects.csv"), &parsed.rejects)?;

        let mut reasons = BTreeMap::new();
        for r in &parsed.rejects {
            *reasons.entry(r.reason.clone()).or_insert(0) += 1;
        }
        let report = PreprocessReport {
            total_rows: parsed.total_rows,
            accepted: parsed.records.len(),
            rejected: parsed.rejects.len(),
            reject_reasons: reasons,
            imputed,
            filter,
            week_origin: cells.week_origin,
            weeks: cells.n_weeks(),
            cells: cells.rows.len(),
            retained_zips: zips.len(),
            population_total: poststrat.total(),
        };
        write_json(&dir.join("report.json"), &report)?;
        let mut warnings = Vec::new();
        if report.rejected > 0 {
            warnings.push(format!(
                "{} of {} rows rejected; see preprocess/rejects.csv",
                report.rejected, report.total_rows
            ));
        }
        self.finish("preprocess", started, warnings)?;
        Ok(report)
    }

    pub fn load_preprocessed(&self) -> Result<PreprocessOutput> {
        self.require("preprocess")?;
        let dir = self.preprocess_dir();
        Ok(PreprocessOutput {
            cells: read_cells(open_artifact(&dir.join("cells.csv"))?)?,
            poststrat: read_poststrat(open_artifact(&dir.join("poststrat.csv"))?)?,
            geo: read_geo(
                open_artifact(&dir.join("geo.csv"))?,
                Some(open_artifact(&dir.join("geo_meta.json"))?),
            )?,
        })
    }

    pub fn describe(&mut self) -> Result<()> {
        let pre = self.load_preprocessed()?;
        let (dir, started) = self.begin("describe")?;
        let d = describe(&pre.cells, &pre.poststrat, &pre.geo)?;
        d.write_weekly_csv(writer(&dir.join("weekly.csv"))?)?;
        d.write_counties_csv(writer(&dir.join("counties.csv"))?)?;
        d.write_demographics_csv(writer(&dir.join("demographics.csv"))?)?;
        write_json(&dir.join("describe.json"), &d)?;
        self.finish("describe", started, Vec::new())
    }

    fn resolve_specs(&self, geo: &GeoPredictorTable) -> Result<Vec<ModelSpec>> {
        let mut out: Vec<ModelSpec> = Vec::new();
        for m in &self.config().models {
            let spec = match ModelSpec::preset(m) {
                Some(s) => s.with_predictors(&geo.columns),
                None => {
                    let p = Path::new(m);
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    ModelSpec::from_json(&text)?
                }
            };
            if out.iter().any(|s| model_dir_name(&s.name) == model_dir_name(&spec.name)) {
                return Err(Error::Config(format!("model name `{}` used twice", spec.name)));
            }
            out.push(spec);
        }
        if out.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        Ok(out)
    }

    fn compile(&self, spec: &ModelSpec, pre: &PreprocessOutput) -> Result<ModelData> {
        let ages = self.config().preprocess.age_bins()?.labels();
        compile_spec_with_ages(spec, &pre.cells, &pre.geo, &ages)
    }

    /// Fits every configured model.
    pub fn fit(&mut self, progress: &dyn Progress) -> Result<Vec<String>> {
        let pre = self.load_preprocessed()?;
        let specs = self.resolve_specs(&pre.geo)?;
        let sampler = self.config().sampler_config();
        let (dir, started) = self.begin("fit")?;
        let mut warnings = Vec::new();
        let mut names = Vec::new();
        for spec in &specs {
            let data = self.compile(spec, &pre)?;
            let draws = sample_model(&data, &sampler, progress)?;
            let mdir = dir.join(model_dir_name(&spec.name));
            write_json(&mdir.join("spec.json"), spec)?;
            write_json(&mdir.join("layout.json"), &data.layout)?;
            draws.write_csv(writer(&mdir.join("draws.csv"))?)?;
            write_json(
                &mdir.join("draws_meta.json"),
                &serde_json::json!({
                    "seed": sampler.seed,
                    "sampler": sampler,
                    "parameters": draws.names,
                    "divergences": draws.divergences(),
                    "divergences_per_chain": draws.divergences_per_chain(),
                    "chains": draws.info,
                }),
            )?;
            let table = summarize(&draws, &model_summary_rows(&data.layout));
            table.write_csv(writer(&mdir.join("summary.csv"))?)?;
            write_json(&mdir.join("summary.json"), &table)?;
            warnings.extend(table.warnings.iter().map(|w| format!("model {}: {w}", spec.name)));
            names.push(model_dir_name(&spec.name));
        }
        self.finish("fit", started, warnings)?;
        Ok(names)
    }

    /// Fitted model directories, in name order.
    pub fn fitted_models(&self) -> Result<Vec<String>> {
        self.require("fit")?;
        let dir = self.stage_dir("fit");
        let mut out: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        out.sort();
        Ok(out)
    }

    /// Compiled model and its draws, as written by the fit stage.
    pub fn load_fit(&self, model: &str, pre: &PreprocessOutput) -> Result<(ModelData, DrawsMatrix)> {
        let mdir = self.stage_dir("fit").join(model);
        let spec: ModelSpec = read_json(&mdir.join("spec.json"))?;
        spec.validate()?;
        let data = self.compile(&spec, pre)?;
        let draws = DrawsMatrix::read_csv(std::io::BufReader::new(open_artifact(
            &mdir.join("draws.csv"),
        )?))?;
        Ok((data, draws))
    }

    /// PSIS-LOO and posterior predictive replicates for every fitted model,
    /// then the comparison table.
    pub fn diagnose(&mut self) -> Result<()> {
        let pre = self.load_preprocessed()?;
        let models = self.fitted_models()?;
        let cfg = self.config().clone();
        let group: PpcGroup = cfg.diagnose.ppc_group.parse()?;
        let (dir, started) = self.begin("diagnose")?;
        let mut results: Vec<(String, LooResult)> = Vec::new();
        let mut warnings = Vec::new();
        for model in &models {
            let (data, draws) = self.load_fit(model, &pre)?;
            let ll = pointwise_loglik(&draws, &data)?;
            let loo = psis_loo(&ll)?;
            let mdir = dir.join(model);
            write_json(&mdir.join("loo.json"), &loo)?;
            let mut w = csv::Writer::from_writer(writer(&mdir.join("loo_pointwise.csv"))?);
            w.write_record(["cell", "elpd_loo", "pareto_k"])?;
            for j in 0..loo.pointwise.len() {
                w.write_record([
                    loo.cell_labels[j].clone(),
                    loo.pointwise[j].to_string(),
                    loo.pareto_k[j].to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(&mdir, e))?;
            warnings.extend(loo.warnings.iter().map(|w| format!("model {model}: {w}")));

            let ppc = ppc_replicates(&draws, &data, group, cfg.diagnose.ppc_reps, cfg.seed)?
                .with_week_origin(pre.cells.week_origin);
            write_json(&mdir.join("ppc.json"), &ppc)?;
            ppc.write_csv(writer(&mdir.join("ppc.csv"))?)?;
            results.push((model.clone(), loo));
        }
        let cmp = loo_compare(&results)?;
        cmp.write_csv(writer(&dir.join("comparison.csv"))?)?;
        write_json(
            &dir.join("comparison.json"),
            &serde_json::json!({
                "rows": cmp.rows,
                "note": "LOO data points are poststratification cells; an elpd_diff interval of ±2·se_diff that covers 0 does not separate the models",
            }),
        )?;
        self.finish("diagnose", started, warnings)
    }

    /// Estimates for every fitted model and configured grouping.
    pub fn poststratify(&mut self) -> Result<()> {
        let pre = self.load_preprocessed()?;
        let models = self.fitted_models()?;
        let groupings: Vec<Grouping> = self
            .config()
            .poststratify
            .groupings
            .iter()
            .map(|g| g.parse())
            .collect::<Result<_>>()?;
        let (dir, started) = self.begin("poststratify")?;
        let mut warnings = Vec::new();
        for model in &models {
            let (data, draws) = self.load_fit(model, &pre)?;
            let ps = Poststratifier::new(&data, &pre.poststrat, &pre.geo, pre.cells.week_origin)?;
            for g in &groupings {
                let series = ps.estimate(&draws, *g)?;
                let base = dir.join(model).join(grouping_file(g));
                series.write_csv(writer(&base.with_extension("csv"))?)?;
                write_json(&base.with_extension("json"), &series)?;
                warnings.extend(series.notes.iter().map(|n| format!("model {model}, {}: {n}", g.name())));
            }
        }
        self.finish("poststratify", started, warnings)
    }

    /// One JSON bundle with sections summary, loo, ppc and estimates, plus
    /// a flat directory of plot data.
    pub fn report(&mut self) -> Result<()> {
        for s in ["fit", "diagnose", "poststratify"] {
            self.require(s)?;
        }
        let models = self.fitted_models()?;
        let (dir, started) = self.begin("report")?;
        let plot = dir.join("plot-data");
        let mut summary = serde_json::Map::new();
        let mut loo = serde_json::Map::new();
        let mut ppc = serde_json::Map::new();
        let mut estimates = serde_json::Map::new();
        let copy = |from: PathBuf, to: String| -> Result<()> {
            let dest = plot.join(to);
            std::fs::create_dir_all(&plot).map_err(|e| Error::io(&plot, e))?;
            std::fs::copy(&from, &dest).map_err(|e| Error::io(&from, e))?;
            Ok(())
        };
        for model in &models {
            let fit = self.stage_dir("fit").join(model);
            let diag = self.stage_dir("diagnose").join(model);
            let post = self.stage_dir("poststratify").join(model);
            summary.insert(model.clone(), read_json(&fit.join("summary.json"))?);
            loo.insert(model.clone(), read_json(&diag.join("loo.json"))?);
            ppc.insert(model.clone(), read_json(&diag.join("ppc.json"))?);
            copy(fit.join("summary.csv"), format!("{model}_summary.csv"))?;
            copy(diag.join("ppc.csv"), format!("{model}_ppc.csv"))?;
            let mut groups = serde_json::Map::new();
            let mut files = Vec::new();
            files_under(&post, &post, &mut files)?;
            for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "json")) {
                let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
                groups.insert(stem.clone(), read_json(&post.join(f))?);
                copy(post.join(f).with_extension("csv"), format!("{model}_estimates_{stem}.csv"))?;
            }
            estimates.insert(model.clone(), serde_json::Value::Object(groups));
        }
        let comparison: serde_json::Value =
            read_json(&self.stage_dir("diagnose").join("comparison.json"))?;
        copy(self.stage_dir("diagnose").join("comparison.csv"), "comparison.csv".into())?;
        let describe_dir = self.stage_dir("describe");
        if describe_dir.join("weekly.csv").exists() {
            for f in ["weekly.csv", "counties.csv", "demographics.csv"] {
                copy(describe_dir.join(f), format!("describe_{f}"))?;
            }
        }

        let mut warnings: Vec<String> = Vec::new();
        for s in STAGES {
            if let Some(r) = self.manifest.stages.get(s) {
                warnings.extend(r.warnings.iter().map(|w| format!("[{s}] {w}")));
            }
        }
        let bundle = serde_json::json!({
            "run_id": self.manifest.run_id,
            "tool_version": TOOL_VERSION,
            "warnings": warnings,
            "models": models,
            "summary": summary,
            "loo": { "models": loo, "comparison": comparison },
            "ppc": ppc,
            "estimates": estimates,
        });
        write_json(&dir.join("report.json"), &bundle)?;
        self.finish("report", started, Vec::new())
    }

    /// Every stage in order.
    pub fn run_all(&mut self, progress: &dyn Progress) -> Result<()> {
        if self.config().inputs.preprocessed.is_none() {
            self.preprocess()?;
        }
        self.describe()?;
        self.fit(progress)?;
        self.diagnose()?;
        self.poststratify()?;
        self.report()
    }
}

fn dependents(stage: &str) -> &'static [&'static str] {
    match stage {
        "preprocess" => &STAGES[1..],
        "describe" => &["report"],
        "fit" => &["diagnose", "poststratify", "report"],
        "diagnose" | "poststratify" => &["report"],
        _ => &[],
    }
}

fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer(path)?);
    w.write_record(["line", "record_id", "reason"])?;
    for r in rejects {
        w.write_record([r.line.to_string(), r.record_id.clone(), r.reason.clone()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
