//! Config-driven experiment driver behind the `arlab` binary.
//!
//! A run directory holds `config.json` (the effective config), `metrics.csv`,
//! `runs.json`, `summary.md`, `summary.csv` and one `<method>_<lambda>_<seed>`
//! directory per successful cell with its `weights.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{gen_minidigits, load_idx, LabeledImages};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_with, read_metrics_csv, report_table, write_metrics_csv, Distance, EvalReport, MetricsRow, ReportTable,
};
use crate::model::Classifier;
use crate::regularizers::{WassersteinMode, DEFAULT_AUX_LR, DEFAULT_CRITIC_CLIP};
use crate::theory::{run_all, TheoryReport};
use crate::training::{default_lambda_grid, sweep_cells, LrSchedule, Method, TrainMode, TrainPlan};
use crate::transforms::TransformFamily;

/// Environment variable that replaces the configured output root.
pub const OUT_ENV: &str = "ARLAB_OUT";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated digits; the test split comes from a second seed.
    Minidigits {
        seed: u64,
        n: usize,
        test_seed: u64,
        test_n: usize,
        #[serde(default = "ten")]
        classes: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `limit` training samples.
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn ten() -> usize {
    10
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_epochs() -> usize {
    10
}

fn default_lr() -> LrSchedule {
    LrSchedule::constant(0.1)
}

fn default_batch() -> usize {
    64
}

fn default_wmode() -> WassersteinMode {
    WassersteinMode::ExactMatch
}

fn default_clip() -> f64 {
    DEFAULT_CRITIC_CLIP
}

fn default_aux_lr() -> f64 {
    DEFAULT_AUX_LR
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// JSON experiment description. Only `name`, `dataset`, `family` and
/// `methods` are required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub family: String,
    pub methods: Vec<Method>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: LrSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_wmode")]
    pub wasserstein_mode: WassersteinMode,
    #[serde(default = "default_clip")]
    pub critic_clip: f64,
    #[serde(default = "default_aux_lr")]
    pub aux_lr: f64,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let safe = |c: char| c.is_ascii_alphanumeric() || "-_.".contains(c);
        if self.name.is_empty() || !self.name.chars().all(safe) || self.name.starts_with('.') {
            return Err(Error::config("name", "must be a nonempty file name of [A-Za-z0-9._-]"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "must not be empty"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::config("methods", format!("`{m}` listed twice")));
            }
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::config("lambda_grid", "must not be empty"));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::config(
                "lambda_grid",
                format!("values must be finite and > 0, got {l}"),
            ));
        }
        for (i, l) in self.lambda_grid.iter().enumerate() {
            if self.lambda_grid[..i].contains(l) {
                return Err(Error::config("lambda_grid", format!("{l} listed twice")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::config("seeds", format!("{s} listed twice")));
            }
        }
        TransformFamily::by_name(&self.family).map_err(|e| Error::config("family", e.to_string()))?;
        if !(self.critic_clip > 0.0 && self.critic_clip.is_finite()) {
            return Err(Error::config("critic_clip", "must be finite and > 0"));
        }
        if !(self.aux_lr > 0.0 && self.aux_lr.is_finite()) {
            return Err(Error::config("aux_lr", "must be finite and > 0"));
        }
        match &self.dataset {
            DatasetConfig::Minidigits { n, test_n, classes, .. } => {
                if *n == 0 || *test_n == 0 {
                    return Err(Error::config("dataset", "n and test_n must be positive"));
                }
                if !(2..=10).contains(classes) {
                    return Err(Error::config("dataset.classes", "must be in 2..=10"));
                }
            }
            DatasetConfig::Idx { limit, test_limit, .. } => {
                if *limit == Some(0) || *test_limit == Some(0) {
                    return Err(Error::config("dataset", "limits must be positive"));
                }
            }
        }
        self.template(TrainMode::Baseline).validate()
    }

    /// The training plan shared by every method, before method selection.
    fn template(&self, mode: TrainMode) -> TrainPlan {
        let mut p = TrainPlan::new(
            mode,
            TransformFamily::by_name(&self.family).unwrap_or_else(|_| TransformFamily::identity_only()),
        );
        p.epochs = self.epochs;
        p.lr = self.lr;
        p.batch_size = self.batch_size;
        p.hidden = self.hidden.clone();
        p.aux_lr = self.aux_lr;
        p.critic_clip = self.critic_clip;
        p
    }

    /// `(train, test)` splits.
    pub fn load_data(&self) -> Result<(LabeledImages, LabeledImages)> {
        match &self.dataset {
            DatasetConfig::Minidigits {
                seed,
                n,
                test_seed,
                test_n,
                classes,
            } => Ok((
                gen_minidigits(*seed, *n, *classes)?,
                gen_minidigits(*test_seed, *test_n, *classes)?,
            )),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
                test_limit,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                Ok((
                    limit.map_or(Ok(train.clone()), |l| train.take(l))?,
                    test_limit.map_or(Ok(test.clone()), |l| test.take(l))?,
                ))
            }
        }
    }

    /// Cells the sweep will train: one per seed for methods without a
    /// penalty weight, one per `(lambda, seed)` otherwise.
    pub fn expected_cells(&self) -> usize {
        self.methods
            .iter()
            .map(|m| if m.uses_lambda() { self.lambda_grid.len() } else { 1 } * self.seeds.len())
            .sum()
    }
}

/// Parses a data spec: `minidigits:<seed>:<n>[:<classes>]` or
/// `idx:<images>:<labels>[:<limit>]`.
pub fn load_data_spec(spec: &str) -> Result<LabeledImages> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Argument(format!("bad data spec `{spec}`"));
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        ["minidigits", seed, n] => gen_minidigits(seed.parse().map_err(|_| bad())?, num(n)?, 10),
        ["minidigits", seed, n, classes] => gen_minidigits(seed.parse().map_err(|_| bad())?, num(n)?, num(classes)?),
        ["idx", images, labels] => load_idx(images, labels),
        ["idx", images, labels, limit] => load_idx(images, labels)?.take(num(limit)?),
        _ => Err(bad()),
    }
}

/// A named family adapted to the data's image size.
pub fn family_for(name: &str, data: &LabeledImages) -> Result<TransformFamily> {
    Ok(TransformFamily::by_name(name)?.for_image_size(data.image_size().0))
}

/// `<method>_<lambda>_<seed>`, lambda in `{:e}` form.
pub fn cell_dir_name(method: Method, lambda: f64, seed: u64) -> String {
    format!("{}_{lambda:e}_{seed}", method.label())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Sweep threads; 0 or 1 trains serially.
    pub threads: usize,
    /// Replaces the configured seeds with this single seed.
    pub seed: Option<u64>,
    /// Replaces the configured output root.
    pub output_root: Option<PathBuf>,
}

impl TrainOptions {
    /// Options with the output root taken from the environment, if set.
    pub fn from_env() -> Self {
        Self {
            output_root: std::env::var_os(OUT_ENV).map(PathBuf::from),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    /// Relative to the run directory; absent for failed cells.
    pub weights: Option<PathBuf>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    /// Wall-clock seconds; the only non-reproducible field.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRecord {
    pub name: String,
    pub members: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub family: FamilyRecord,
    pub cells: Vec<CellRecord>,
}

impl RunRecord {
    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        let path = run_dir.as_ref().join("runs.json");
        let text = fs::read_to_string(&path).map_err(Error::at_path(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.report.as_ref().map(|r| MetricsRow {
                    method: c.method.label().to_string(),
                    shift: self.family.name.clone(),
                    seed: c.seed,
                    lambda: c.lambda,
                    accuracy: r.accuracy,
                    robustness: r.robust_accuracy,
                    invariance: r.invariance,
                })
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub record: RunRecord,
    pub table: ReportTable,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::at_path(path))
}

/// Runs the sweep for every configured method and writes the run directory.
/// Methods whose cells all fail are recorded; the command fails only if no
/// cell succeeds.
pub fn cmd_train(config: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut config = config.clone();
    if let Some(seed) = opts.seed {
        config.seeds = vec![seed];
    }
    if let Some(root) = &opts.output_root {
        config.output_dir = root.clone();
    }
    config.validate()?;
    let run_dir = config.output_dir.join(&config.name);
    fs::create_dir_all(&run_dir).map_err(|e| Error::config("output_dir", format!("{}: {e}", run_dir.display())))?;
    write(&run_dir.join("config.json"), &config.to_json()?)?;

    let (train, test) = config.load_data()?;
    let family = family_for(&config.family, &train)?;
    let mut template = config.template(TrainMode::Baseline);
    template.family = family.clone();

    let mut cells = Vec::with_capacity(config.expected_cells());
    for &method in &config.methods {
        let plan = template.for_method(method, config.wasserstein_mode);
        log::info!(
            "training {method} ({} cells)",
            if method.uses_lambda() {
                config.lambda_grid.len()
            } else {
                1
            } * config.seeds.len()
        );
        let swept = sweep_cells(
            &plan,
            &config.lambda_grid,
            &config.seeds,
            &train,
            &test,
            &family,
            config.distance,
            opts.threads,
        )?;
        for cell in swept {
            match cell.outcome {
                Ok(result) => {
                    let rel = PathBuf::from(cell_dir_name(method, cell.lambda, cell.seed)).join(WEIGHTS_FILE);
                    let abs = run_dir.join(&rel);
                    fs::create_dir_all(abs.parent().expect("cell dir")).map_err(Error::at_path(&abs))?;
                    result.history.model.save(&abs)?;
                    cells.push(CellRecord {
                        method,
                        lambda: cell.lambda,
                        seed: cell.seed,
                        weights: Some(rel),
                        report: Some(result.report),
                        error: None,
                        seconds: result.seconds,
                    });
                }
                Err(e) => cells.push(CellRecord {
                    method,
                    lambda: cell.lambda,
                    seed: cell.seed,
                    weights: None,
                    report: None,
                    error: Some(e.to_string()),
                    seconds: 0.0,
                }),
            }
        }
    }

    let record = RunRecord {
        family: FamilyRecord {
            name: family.name().to_string(),
            members: family.spec_string(),
        },
        config,
        cells,
    };
    let rows = record.metrics_rows();
    if rows.is_empty() {
        write(&run_dir.join("runs.json"), &serde_json::to_string_pretty(&record)?)?;
        return Err(Error::AllCellsFailed(record.cells.len()));
    }
    write_metrics_csv(run_dir.join("metrics.csv"), &rows)?;
    write(&run_dir.join("runs.json"), &serde_json::to_string_pretty(&record)?)?;
    let table = report_table(&rows)?;
    write(&run_dir.join("summary.md"), &table.to_markdown())?;
    write(&run_dir.join("summary.csv"), &table.to_csv()?)?;
    Ok(TrainOutcome { run_dir, record, table })
}

/// Loads weights and scores them on `data_spec` under the named family.
pub fn cmd_eval(weights: impl AsRef<Path>, data_spec: &str, family: &str, distance: Distance) -> Result<EvalReport> {
    let model = Classifier::load(weights)?;
    let data = load_data_spec(data_spec)?;
    let family = family_for(family, &data)?;
    evaluate_with(&model, &data, &family, model.seed(), distance)
}

/// Every assumption check and both bound modes. Bound terms use
/// `train_spec` for the empirical side when given, `data_spec` otherwise.
pub fn cmd_theory(
    weights: impl AsRef<Path>,
    data_spec: &str,
    family: &str,
    train_spec: Option<&str>,
) -> Result<TheoryReport> {
    let model = Classifier::load(weights)?;
    let data = load_data_spec(data_spec)?;
    let train = match train_spec {
        Some(s) => load_data_spec(s)?,
        None => data.clone(),
    };
    let family = family_for(family, &data)?;
    run_all(&model, &train, &data, &family)
}

/// Merges the metrics of several run directories into one table. Runs
/// naming the same family must agree on its members.
pub fn cmd_report<P: AsRef<Path>>(run_dirs: &[P]) -> Result<ReportTable> {
    if run_dirs.is_empty() {
        return Err(Error::Usage("report needs at least one run directory".into()));
    }
    let mut families: Vec<FamilyRecord> = Vec::new();
    let mut rows = Vec::new();
    for dir in run_dirs {
        let dir = dir.as_ref();
        let record = RunRecord::load(dir)?;
        if let Some(prev) = families.iter().find(|f| f.name == record.family.name) {
            if prev.members != record.family.members {
                return Err(Error::Report(format!(
                    "family `{}` differs across runs: {} vs {}",
                    prev.name, prev.members, record.family.members
                )));
            }
        } else {
            families.push(record.family.clone());
        }
        rows.extend(read_metrics_csv(dir.join("metrics.csv"))?);
    }
    report_table(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path, methods: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "name": "tiny",
                "dataset": {{"kind": "minidigits", "seed": 1, "n": 40, "test_seed": 2, "test_n": 30, "classes": 4}},
                "hidden": [8],
                "family": "contrast",
                "methods": {methods},
                "lambda_grid": [0.01, 0.1],
                "seeds": [0, 1],
                "epochs": 1,
                "batch_size": 16,
                "output_dir": {:?}
            }}"#,
            dir.display().to_string()
        ))
        .unwrap()
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let good = tiny_config(dir.path(), r#"["B"]"#);
        let field = |f: fn(&mut ExperimentConfig)| {
            let mut c = good.clone();
            f(&mut c);
            match c.validate() {
                Err(Error::Config { field, .. }) => field,
                other => panic!("{other:?}"),
            }
        };
        assert_eq!(field(|c| c.methods.clear()), "methods");
        assert_eq!(field(|c| c.lambda_grid = vec![0.0]), "lambda_grid");
        assert_eq!(field(|c| c.lambda_grid = vec![-1.0]), "lambda_grid");
        assert_eq!(field(|c| c.seeds.clear()), "seeds");
        assert_eq!(field(|c| c.family = "blur".into()), "family");
        assert_eq!(field(|c| c.epochs = 0), "epochs");
        assert_eq!(field(|c| c.name = "../x".into()), "name");
        let e = ExperimentConfig::from_json(r#"{"name": "x"}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::from_json(r#"{"name":"x","dataset":{"kind":"minidigits","seed":0,"n":5,"test_seed":1,"test_n":5},"family":"rotation","methods":["Q"]}"#)
            .unwrap_err();
        assert!(e.to_string().contains("unknown method"), "{e}");
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../../../configs/rotation.json"),
            include_str!("../../../configs/smoke.json"),
        ] {
            let cfg = ExperimentConfig::from_json(text).unwrap();
            let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn data_specs() {
        assert_eq!(load_data_spec("minidigits:3:12").unwrap().len(), 12);
        assert_eq!(load_data_spec("minidigits:3:12:4").unwrap().classes(), 4);
        assert!(matches!(load_data_spec("mnist"), Err(Error::Argument(_))));
        assert!(matches!(load_data_spec("minidigits:x:1"), Err(Error::Argument(_))));
    }

    #[test]
    fn cell_names() {
        assert_eq!(cell_dir_name(Method::S, 1e-4, 2), "S_1e-4_2");
        assert_eq!(cell_dir_name(Method::B, 0.0, 0), "B_0e0_0");
    }

    #[test]
    fn train_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), r#"["B","V","S"]"#);
        let out = cmd_train(&cfg, &TrainOptions::default()).unwrap();
        assert_eq!(cfg.expected_cells(), 2 + 2 + 2 * 2);
        let rows = read_metrics_csv(out.run_dir.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 8);
        for name in ["config.json", "runs.json", "summary.md", "summary.csv"] {
            assert!(out.run_dir.join(name).is_file(), "{name}");
        }
        for c in &out.record.cells {
            assert!(out.run_dir.join(c.weights.as_ref().unwrap()).is_file());
        }
        assert_eq!(out.table.body_rows(), 3);
        let again = cmd_report(&[&out.run_dir]).unwrap();
        assert_eq!(again.to_csv().unwrap(), out.table.to_csv().unwrap());
    }

    #[test]
    fn seed_and_root_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let other = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), r#"["B"]"#);
        let opts = TrainOptions {
            threads: 1,
            seed: Some(7),
            output_root: Some(other.path().to_path_buf()),
        };
        let out = cmd_train(&cfg, &opts).unwrap();
        assert!(out.run_dir.starts_with(other.path()));
        assert_eq!(out.record.cells.len(), 1);
        assert_eq!(out.record.cells[0].seed, 7);
        assert!(out.run_dir.join("B_0e0_7").join(WEIGHTS_FILE).is_file());
    }

    #[test]
    fn report_rejects_incompatible_families() {
        let a = tempfile::tempdir().unwrap();
        let cfg = tiny_config(a.path(), r#"["B"]"#);
        let out = cmd_train(&cfg, &TrainOptions::default()).unwrap();
        let b = tempfile::tempdir().unwrap();
        let copy = b.path().join("copy");
        fs::create_dir_all(&copy).unwrap();
        fs::copy(out.run_dir.join("metrics.csv"), copy.join("metrics.csv")).unwrap();
        let mut rec = out.record.clone();
        rec.family.members = "identity,rot:90".into();
        fs::write(copy.join("runs.json"), serde_json::to_string(&rec).unwrap()).unwrap();
        assert!(matches!(cmd_report(&[&out.run_dir, &copy]), Err(Error::Report(_))));
    }
}
