//! Multi-seed experiments: every arm is a session config run once per seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::report::{ArmReport, Cell, Report, SensitivityCell};
use crate::saliency::SensitivityReport;
use crate::session::{LoopConfig, Mode, Session, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    /// JSON merged over the base config.
    #[serde(default)]
    pub overrides: Value,
    /// Which trained round to report; the last one when unset.
    #[serde(default)]
    pub round: Option<String>,
}

impl ArmSpec {
    pub fn new(name: &str, overrides: Value) -> Self {
        ArmSpec {
            name: name.to_string(),
            overrides,
            round: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(default)]
    pub base: LoopConfig,
    pub arms: Vec<ArmSpec>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    /// Explicit seeds; `0..n_seeds` when unset.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

fn default_n_seeds() -> usize {
    10
}

/// Recursive object merge; non-object values (including null) replace.
pub fn merge_json(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

impl Experiment {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut exp: Experiment = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        exp.base.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(exp)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.n_seeds as u64).collect(),
        }
    }

    /// The base config with an arm's overrides and a seed applied.
    pub fn arm_config(&self, arm: &ArmSpec, seed: u64) -> Result<LoopConfig> {
        let mut value = serde_json::to_value(&self.base)?;
        if !arm.overrides.is_null() {
            merge_json(&mut value, &arm.overrides);
        }
        let mut config: LoopConfig =
            serde_json::from_value(value).map_err(|e| Error::Validation(format!("arm {}: {e}", arm.name)))?;
        config.seed = seed;
        config
            .validate()
            .map_err(|e| Error::Validation(format!("arm {}: {e}", arm.name)))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::Validation("arms: at least one arm is required".into()));
        }
        if self.seeds().is_empty() {
            return Err(Error::Validation("n_seeds: at least one seed is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for arm in &self.arms {
            if !names.insert(arm.name.as_str()) {
                return Err(Error::Validation(format!("arms: duplicate name {}", arm.name)));
            }
        }
        Ok(())
    }
}

/// Static, static with 350 generated examples, and the two-round dynamic
/// arm; the base config must carry the round-two settings.
pub fn standard_arms() -> Vec<ArmSpec> {
    vec![
        ArmSpec::new("Static", serde_json::json!({"per_doc": 0, "round2": null})),
        ArmSpec::new("Static+350", serde_json::json!({"per_doc": 7, "round2": null})),
        ArmSpec::new("Dynamic", serde_json::json!({"per_doc": 7})),
    ]
}

/// Every arm of the results table: the standard three plus the baselines
/// and single-branch dynamic variants.
pub fn full_arms() -> Vec<ArmSpec> {
    let mut arms = standard_arms();
    arms.extend([
        ArmSpec::new(
            "DP",
            serde_json::json!({"per_doc": 7, "augmentation": "duplicate", "round2": null}),
        ),
        ArmSpec::new(
            "RR",
            serde_json::json!({"per_doc": 7, "augmentation": "random_replacement", "round2": null}),
        ),
        ArmSpec::new("AL", serde_json::json!({"per_doc": 7, "round2": {"kind": "active"}})),
        ArmSpec::new(
            "Dynamic-MR",
            serde_json::json!({"per_doc": 7, "round2": {"correction": {"mr_count": 7, "fr_count": 0}}}),
        ),
        ArmSpec::new(
            "Dynamic-FR",
            serde_json::json!({"per_doc": 7, "round2": {"correction": {"mr_count": 0, "fr_count": 7}}}),
        ),
    ]);
    arms
}

/// One finished (arm, seed) run.
#[derive(Debug, Clone)]
struct RunResult {
    train_size: usize,
    accuracy: BTreeMap<String, f64>,
    sensitivity: Option<SensitivityReport>,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect()
}

fn run_one(dir: PathBuf, arm: &ArmSpec, config: LoopConfig, data: Arc<Workspace>) -> Result<RunResult> {
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let seed = config.seed;
    let mut session = Session::create_with(&dir, &format!("{}-{seed}", slug(&arm.name)), config, Mode::Oracle, data)?;
    session.run_to_end()?;
    let metrics = session.metrics()?;
    let round = match &arm.round {
        Some(r) => metrics.arm(r),
        None => metrics.arms.last(),
    }
    .ok_or_else(|| Error::NotFound(format!("round {:?} in session metrics", arm.round)))?;
    Ok(RunResult {
        train_size: round.train_size.unwrap_or(0),
        accuracy: round
            .cells
            .iter()
            .map(|c| (c.dataset.clone(), c.mean / 100.0))
            .collect(),
        sensitivity: round.sensitivity.as_ref().and_then(|s| s.per_seed.first().copied()),
    })
}

/// Run every arm for every seed, each in its own session directory under
/// `root`. A failing seed marks its arm failed; the table is still built.
pub fn run_experiment(exp: &Experiment, root: &Path) -> Result<Report> {
    exp.validate()?;
    let seeds = exp.seeds();

    // workspaces shared between runs reading the same data
    let mut workspaces: BTreeMap<String, Arc<Workspace>> = BTreeMap::new();
    let mut jobs = Vec::new();
    for (a, arm) in exp.arms.iter().enumerate() {
        for &seed in &seeds {
            let job = match exp.arm_config(arm, seed) {
                Ok(config) => {
                    let key = serde_json::to_string(&(&config.data, config.val_size))?;
                    match workspaces.get(&key) {
                        Some(ws) => Ok((config, ws.clone())),
                        None => match Workspace::load(&config) {
                            Ok(ws) => {
                                let ws = Arc::new(ws);
                                workspaces.insert(key, ws.clone());
                                Ok((config, ws))
                            }
                            Err(e) => Err(e),
                        },
                    }
                }
                Err(e) => Err(e),
            };
            jobs.push((a, seed, job));
        }
    }

    let results: Vec<(usize, u64, Result<RunResult>)> = jobs
        .into_par_iter()
        .map(|(a, seed, job)| {
            let arm = &exp.arms[a];
            let dir = root.join(slug(&arm.name)).join(format!("seed-{seed}"));
            let result = job.and_then(|(config, ws)| run_one(dir, arm, config, ws));
            (a, seed, result)
        })
        .collect();

    let datasets: Vec<String> = workspaces
        .values()
        .next()
        .map(|ws| ws.tests.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();

    let mut arms = Vec::with_capacity(exp.arms.len());
    for (a, spec) in exp.arms.iter().enumerate() {
        let runs: Vec<&(usize, u64, Result<RunResult>)> = results.iter().filter(|r| r.0 == a).collect();
        let failed = runs
            .iter()
            .find_map(|(_, seed, r)| r.as_ref().err().map(|e| format!("seed {seed}: {e}")));
        let ok: Vec<&RunResult> = runs.iter().filter_map(|(_, _, r)| r.as_ref().ok()).collect();
        let mut report = ArmReport {
            name: spec.name.clone(),
            train_size: None,
            seeds: seeds.clone(),
            cells: Vec::new(),
            sensitivity: None,
            failed,
        };
        if report.failed.is_none() {
            report.train_size = ok.first().map(|r| r.train_size);
            if ok.iter().any(|r| Some(r.train_size) != report.train_size) {
                report.train_size = None;
            }
            for name in &datasets {
                let values: Vec<f64> = ok.iter().filter_map(|r| r.accuracy.get(name).copied()).collect();
                if values.len() == ok.len() {
                    report.cells.push(Cell::from_fractions(name, &values));
                }
            }
            let sens: Option<Vec<SensitivityReport>> = ok.iter().map(|r| r.sensitivity).collect();
            let sens_dataset = exp.base.sensitivity.dataset.clone().or_else(|| {
                workspaces.values().next().and_then(|ws| {
                    ws.tests
                        .iter()
                        .find(|(_, d)| d.documents.iter().any(|doc| !doc.rationales().is_empty()))
                        .map(|(n, _)| n.clone())
                })
            });
            if let (Some(sens), Some(ds)) = (sens, sens_dataset) {
                report.sensitivity = Some(SensitivityCell::from_reports(&ds, sens));
            }
        }
        arms.push(report);
    }
    Ok(Report { datasets, arms })
}
