//! Run configuration: a TOML document with one table per pipeline stage,
//! overridable from the environment and from `--set` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lvrt_pinn::analysis::DEFAULT_MU_VALUES;
use lvrt_pinn::dataset::GridSpec;
use lvrt_pinn::dynamics::{ConverterParams, SimSettings};
use lvrt_pinn::milp::BoundsSource;
use lvrt_pinn::pinn::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Prefix of environment overrides: `LVRT_PINN__TRAINING__EPOCHS=500`.
pub const ENV_PREFIX: &str = "LVRT_PINN__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Keep every `stride`-th sample of each trajectory.
    pub stride: usize,
    pub n_collocation: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            n_collocation: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub epsilons: Vec<f64>,
    pub mus: Vec<f64>,
    pub delta_v_start: f64,
    pub delta_v_stop: f64,
    pub delta_v_step: f64,
    pub bounds_source: BoundsSource,
    /// Bisection bracket of the simulated ground truth.
    pub ground_truth_bracket: [f64; 2],
    /// Write measured solve times into curve CSVs (breaks byte-identical
    /// reruns; the sidecar always carries the total).
    pub solve_times_in_csv: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.025, 0.05],
            mus: DEFAULT_MU_VALUES.to_vec(),
            delta_v_start: 0.2,
            delta_v_stop: 0.8,
            delta_v_step: 0.01,
            bounds_source: BoundsSource::LpTightened,
            ground_truth_bracket: [0.0, 0.25],
            solve_times_in_csv: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub bounds: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            dataset: PathBuf::from("out/dataset"),
            model: PathBuf::from("out/model.json"),
            bounds: None,
        }
    }
}

/// Everything a run needs. `seed` drives both collocation sampling and
/// training; `training.seed` is replaced by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub converter: ConverterParams,
    pub simulation: SimSettings,
    pub grid: GridSpec,
    pub dataset: DatasetConfig,
    pub training: TrainConfig,
    pub analysis: AnalysisConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            converter: ConverterParams::default(),
            simulation: SimSettings::default(),
            grid: GridSpec::standard(),
            dataset: DatasetConfig::default(),
            training: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            n_collocation: self.dataset.n_collocation,
            ..self.training.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable as TOML")
    }
}

/// Parse an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| CliError::Usage("empty override key".into()))?;
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override path crosses non-table `{key}`")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn unknown_key(given: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    given.iter().find_map(|(k, v)| {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => Some(path),
            (toml::Value::Table(g), Some(toml::Value::Table(c))) => unknown_key(g, c, &format!("{path}.")),
            _ => None,
        }
    })
}

/// Load `path` (or defaults), then apply environment overrides, then
/// `key.path=value` overrides, later ones winning.
pub fn load(
    path: Option<&Path>,
    env: &BTreeMap<String, String>,
    sets: &[String],
) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("reading config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in env {
        if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
            let keys: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            set_path(&mut table, &keys, parse_value(v))?;
        }
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{s}` is not key=value")))?;
        let keys: Vec<String> = k.trim().split('.').map(str::to_string).collect();
        set_path(&mut table, &keys, parse_value(v.trim()))?;
    }
    let cfg: RunConfig = toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e| CliError::Usage(format!("configuration: {e}")))?;
    // nested library tables tolerate unknown keys; anything that does not
    // survive a round trip was misspelled
    let canonical: toml::Table = cfg.to_toml().parse().expect("configuration re-parses");
    if let Some(key) = unknown_key(&table, &canonical, "") {
        return Err(CliError::Usage(format!("configuration: unknown key `{key}`")));
    }
    cfg.converter
        .validate()
        .map_err(|e| CliError::Usage(format!("converter parameters: {e}")))?;
    cfg.grid
        .validate()
        .map_err(|e| CliError::Usage(format!("grid: {e}")))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\n[training]\nepochs = 10\n").unwrap();
        let mut env = BTreeMap::new();
        env.insert("LVRT_PINN__TRAINING__EPOCHS".to_string(), "20".to_string());
        env.insert("LVRT_PINN__ANALYSIS__BOUNDS_SOURCE".to_string(), "interval".to_string());
        env.insert("UNRELATED".to_string(), "x".to_string());
        let cfg = load(Some(&path), &env, &["training.hidden=[4, 4]".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.training.epochs, 20);
        assert_eq!(cfg.training.hidden, vec![4, 4]);
        assert_eq!(cfg.analysis.bounds_source, BoundsSource::Interval);
        let cfg = load(Some(&path), &env, &["training.epochs=5".into()]).unwrap();
        assert_eq!(cfg.training.epochs, 5);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = load(None, &BTreeMap::new(), &["analysis.epsilon=0.1".into()]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        let err = load(None, &BTreeMap::new(), &["training.weights.typo=1".into()]).unwrap_err();
        assert!(matches!(err, CliError::Usage(m) if m.contains("training.weights.typo")));
        let err = load(None, &BTreeMap::new(), &["no_equals".into()]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }
}
