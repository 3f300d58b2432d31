//! One run per value of a single config parameter, plus a comparison table.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{config_hash, make_run_id, prepare_run, write_json, ExperimentConfig, RunError, RunManifest, RunOptions};

pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub force: bool,
    pub sample: Option<usize>,
    pub seed: Option<u64>,
    /// Run the values concurrently instead of one after another.
    pub parallel: bool,
    pub sweep_id: Option<String>,
    /// Exact sweep directory, bypassing `output_dir/<sweep_id>`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub value: Value,
    pub run_id: String,
    /// Run directory relative to the sweep directory.
    pub run_dir: String,
    pub item_count: usize,
    pub error_count: usize,
    pub aggregate: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub sweep_id: String,
    /// Resolved dotted path of the swept parameter.
    pub axis: String,
    pub values: Vec<Value>,
    pub rows: Vec<ComparisonRow>,
    #[serde(skip)]
    pub manifests: Vec<RunManifest>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn axis_error(axis: &str, message: impl Into<String>) -> RunError {
    RunError::Axis {
        axis: axis.into(),
        message: message.into(),
    }
}

fn find_key(v: &Value, key: &str, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            if k == key {
                out.push(prefix.clone());
            }
            find_key(child, key, prefix, out);
            prefix.pop();
        }
    }
}

/// Resolves `axis` against the serialized config. Dotted paths are taken
/// as given; a bare name must occur exactly once in the tree.
pub fn resolve_axis(cfg: &Value, axis: &str) -> Result<Vec<String>, RunError> {
    if axis.is_empty() {
        return Err(axis_error(axis, "empty path"));
    }
    if axis.contains('.') {
        return Ok(axis.split('.').map(String::from).collect());
    }
    if cfg.get(axis).is_some() {
        return Ok(vec![axis.to_string()]);
    }
    let mut found = Vec::new();
    find_key(cfg, axis, &mut Vec::new(), &mut found);
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => Err(axis_error(axis, "no such key in the config")),
        _ => Err(axis_error(
            axis,
            format!(
                "ambiguous, matches {}",
                found.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
            ),
        )),
    }
}

/// Returns a copy of `base` with the parameter at `path` set to `value`.
pub fn with_axis_value(base: &ExperimentConfig, path: &[String], value: &Value) -> Result<ExperimentConfig, RunError> {
    let dotted = path.join(".");
    let mut tree = serde_json::to_value(base).expect("config serializes");
    let (last, parents) = path.split_last().ok_or_else(|| axis_error(&dotted, "empty path"))?;
    let mut node = &mut tree;
    for seg in parents {
        node = node
            .get_mut(seg)
            .filter(|n| n.is_object())
            .ok_or_else(|| axis_error(&dotted, format!("`{seg}` is not a config section")))?;
    }
    node.as_object_mut()
        .expect("checked above")
        .insert(last.clone(), value.clone());
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(tree)
        .map_err(|e| axis_error(&dotted, format!("at `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn label_for(i: usize, leaf: &str, value: &Value) -> String {
    let raw = match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let clean: String = raw
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{i:02}-{leaf}-{clean}")
}

fn csv_cell(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

impl SweepOutcome {
    /// Axis value, run id, then one column per metric key seen in any row.
    pub fn to_csv(&self) -> String {
        let leaf = self.axis.rsplit('.').next().unwrap_or(&self.axis);
        let keys: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.aggregate.keys()).collect();
        let mut out = format!("{leaf},run_id");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_cell(&r.value));
            out.push(',');
            out.push_str(&r.run_id);
            for k in &keys {
                out.push(',');
                if let Some(v) = r.aggregate.get(*k) {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[Value],
    opts: &SweepOptions,
) -> Result<SweepOutcome, RunError> {
    if values.is_empty() {
        return Err(axis_error(axis, "no values given"));
    }
    let tree = serde_json::to_value(base).expect("config serializes");
    let path = resolve_axis(&tree, axis)?;
    let dotted = path.join(".");
    let leaf = path.last().expect("non-empty path").clone();
    let variants: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| with_axis_value(base, &path, v))
        .collect::<Result<_, _>>()?;

    let sweep_id = opts.sweep_id.clone().unwrap_or_else(|| {
        let mut h = Sha256::new();
        h.update(config_hash(base, None));
        h.update(&dotted);
        h.update(serde_json::to_vec(values).expect("values serialize"));
        format!("sweep-{}", make_run_id(&hex::encode(h.finalize())))
    });
    let dir = opts.out_dir.clone().unwrap_or_else(|| base.output_dir.join(&sweep_id));
    if dir.exists() && fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !opts.force {
            return Err(RunError::OutputExists(dir.display().to_string()));
        }
        fs::remove_dir_all(&dir).map_err(|e| RunError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
    }

    let jobs: Vec<(usize, &ExperimentConfig)> = variants.iter().enumerate().collect();
    let run_one = |(i, cfg): &(usize, &ExperimentConfig)| -> Result<RunManifest, RunError> {
        let label = label_for(*i, &leaf, &values[*i]);
        let run_opts = RunOptions {
            force: opts.force,
            sample: opts.sample,
            seed: opts.seed,
            run_id: Some(format!("{sweep_id}-{label}")),
            out_dir: Some(dir.join("runs").join(&label)),
            ..RunOptions::default()
        };
        log::info!("sweep {sweep_id}: {dotted} = {}", values[*i]);
        Ok(prepare_run(cfg, &run_opts)?.execute(None)?.manifest)
    };
    let manifests: Vec<RunManifest> = if opts.parallel {
        jobs.par_iter().map(run_one).collect::<Result<_, _>>()?
    } else {
        jobs.iter().map(run_one).collect::<Result<_, _>>()?
    };

    let mut rows = Vec::with_capacity(manifests.len());
    for (i, m) in manifests.iter().enumerate() {
        let run_dir = Path::new("runs").join(label_for(i, &leaf, &values[i]));
        let report = super::load_report(&dir.join(&run_dir).join(super::REPORT_FILE))?;
        rows.push(ComparisonRow {
            value: values[i].clone(),
            run_id: m.run_id.clone(),
            run_dir: run_dir.display().to_string(),
            item_count: m.item_count,
            error_count: m.error_count,
            aggregate: report.aggregate,
        });
    }
    let outcome = SweepOutcome {
        sweep_id,
        axis: dotted,
        values: values.to_vec(),
        rows,
        manifests,
        out_dir: dir.clone(),
    };
    write_json(&dir.join(COMPARISON_JSON), &outcome)?;
    let csv = dir.join(COMPARISON_CSV);
    fs::write(&csv, outcome.to_csv()).map_err(|e| RunError::Io {
        path: csv.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(outcome)
}
