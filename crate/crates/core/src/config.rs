//! The run configuration: one TOML file covering every module, `key=value`
//! overrides, and grid sweeps under a `[sweep]` table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datagen::DataConfig;
use crate::distill_losses::DistillConfig;
use crate::energy_model::EnergyModelConfig;
use crate::error::{Error, Result};
use crate::nets::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::vem_objective::VemConfig;

pub const ECHO_FILE: &str = "config.toml";
pub const DETERMINISTIC_ENV: &str = "VEMKD_DETERMINISTIC";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OnlinePaired,
    OfflinePaired,
    OfflineUnpairedTeacherTarget,
}

impl Mode {
    pub fn online(self) -> bool {
        self == Mode::OnlinePaired
    }

    pub fn paired(self) -> bool {
        self != Mode::OfflineUnpairedTeacherTarget
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Dilated input edges.
    Edges,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub lr_student: f64,
    pub lr_teacher: f64,
    pub lr_ebm: f64,
    pub mode: Mode,
    /// Teacher reconstruction weight.
    pub lambda_rec: f64,
    /// Whether the teacher reconstruction term is used at all.
    pub teacher_recon: bool,
    /// Weight of every least-squares adversarial generator term.
    pub lambda_gan: f64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints; the final state is always saved.
    pub checkpoint_every: usize,
    /// Pretrained teacher checkpoint for offline modes.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Teacher pretraining iterations for offline modes without a checkpoint.
    pub teacher_pretrain_iters: usize,
    pub nonfinite_patience: usize,
    pub mask_source: MaskSource,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_iters: 5000,
            batch_size: 16,
            lr_student: 2e-4,
            lr_teacher: 2e-4,
            lr_ebm: 1e-4,
            mode: Mode::OnlinePaired,
            lambda_rec: 100.0,
            teacher_recon: true,
            lambda_gan: 1.0,
            log_every: 1,
            checkpoint_every: 0,
            teacher_checkpoint: None,
            teacher_pretrain_iters: 1000,
            nonfinite_patience: 10,
            mask_source: MaskSource::Edges,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("schedule.total_iters", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be positive"));
        }
        for (k, v) in [
            ("schedule.lr_student", self.lr_student),
            ("schedule.lr_teacher", self.lr_teacher),
            ("schedule.lr_ebm", self.lr_ebm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "learning rates must be positive"));
            }
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_gan >= 0.0) {
            return Err(Error::config("schedule.lambda_rec", "weights must be non-negative"));
        }
        if self.log_every == 0 || self.nonfinite_patience == 0 {
            return Err(Error::config(
                "schedule.log_every",
                "log_every and nonfinite_patience must be positive",
            ));
        }
        Ok(())
    }

    /// `lr0 · (1 − i / total_iters)`.
    pub fn decayed(&self, lr0: f64, iteration: usize) -> f64 {
        lr0 * (1.0 - iteration as f64 / self.total_iters as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// 0 evaluates only at the end of the run.
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            eval_every: 0,
            eval_batch: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub ebm: EnergyModelConfig,
    pub sampler: SamplerConfig,
    pub vem: VemConfig,
    pub distill: DistillConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            deterministic: true,
            model: ModelConfig::default(),
            ebm: EnergyModelConfig {
                base_channels: 8,
                ..Default::default()
            },
            sampler: SamplerConfig::default(),
            vem: VemConfig::default(),
            distill: DistillConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ebm.validate()?;
        self.sampler.validate()?;
        self.vem.validate()?;
        self.distill.validate()?;
        self.schedule.validate()?;
        self.data.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::config("data.image_size", "must equal model.image_size"));
        }
        if self.ebm.input_channels != self.model.channels {
            return Err(Error::config("ebm.input_channels", "must equal model.channels"));
        }
        if self.metrics.eval_batch == 0 {
            return Err(Error::config("metrics.eval_batch", "must be positive"));
        }
        if !self.schedule.mode.paired() && self.vem.target_source == crate::vem_objective::TargetSource::RealOutput {
            return Err(Error::config(
                "vem.target_source",
                "real outputs are unavailable in unpaired mode",
            ));
        }
        Ok(())
    }

    /// Deterministic numerics are on when the config or the environment asks.
    pub fn deterministic_effective(&self) -> bool {
        self.deterministic || std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config to `output_dir/config.toml`.
    pub fn echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join(ECHO_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a TOML document, keeping the `[sweep]` table separate.
pub fn parse_document(text: &str) -> Result<(Table, Option<Table>)> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
    let sweep = match table.remove("sweep") {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => return Err(Error::config("sweep", "must be a table")),
    };
    Ok((table, sweep))
}

pub fn read_document(path: &Path) -> Result<(Table, Option<Table>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text)
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `dotted.key` in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("{p} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides; values are parsed as TOML, falling back
/// to plain strings.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.as_str(), "overrides take the form key=value"))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Vec<Value>)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            Value::Array(a) if !a.is_empty() => out.push((key, a.clone())),
            _ => {
                return Err(Error::config(
                    format!("sweep.{key}"),
                    "sweep values must be non-empty arrays",
                ))
            }
        }
    }
    Ok(())
}

fn label_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One config per grid point, each with `output_dir/<key=value,...>`.
/// Without a sweep the base config is returned unchanged.
pub fn expand_sweep(base: &Table, sweep: Option<&Table>) -> Result<Vec<(String, RunConfig)>> {
    let Some(sweep) = sweep else {
        return Ok(vec![(String::new(), RunConfig::from_table(base.clone())?)]);
    };
    let mut axes = Vec::new();
    flatten("", sweep, &mut axes)?;
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (key, values) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let probe = RunConfig::from_table(base.clone())?;
    points
        .into_iter()
        .map(|p| {
            let mut t = base.clone();
            let label = p
                .iter()
                .map(|(k, v)| format!("{k}={}", label_value(v)))
                .collect::<Vec<_>>()
                .join(",");
            for (k, v) in p {
                set_path(&mut t, &k, v)?;
            }
            let dir = probe.output_dir.join(&label);
            set_path(&mut t, "output_dir", Value::String(dir.to_string_lossy().into_owned()))?;
            Ok((label, RunConfig::from_table(t)?))
        })
        .collect()
}

/// Loads a config file, applies overrides and expands sweeps.
pub fn load_runs(path: &Path, overrides: &[String]) -> Result<Vec<(String, RunConfig)>> {
    let (mut table, sweep) = read_document(path)?;
    apply_overrides(&mut table, overrides)?;
    expand_sweep(&table, sweep.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let (t, sweep) = parse_document(&text).unwrap();
        assert!(sweep.is_none());
        assert_eq!(RunConfig::from_table(t).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let (t, _) = parse_document("[vem]\nlambda_mj = 0.1\n").unwrap();
        let err = RunConfig::from_table(t).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("lambda_mj"), "{err}");
    }

    #[test]
    fn overrides_apply_typed_values() {
        let (mut t, _) = parse_document("seed = 3\n").unwrap();
        apply_overrides(
            &mut t,
            &[
                "vem.lambda_mi=0".into(),
                "schedule.mode=offline_paired".into(),
                "output_dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        let cfg = RunConfig::from_table(t).unwrap();
        assert_eq!(cfg.vem.lambda_mi, 0.0);
        assert_eq!(cfg.schedule.mode, Mode::OfflinePaired);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert!(apply_overrides(&mut Table::new(), &["novalue".into()]).is_err());
    }

    #[test]
    fn sweep_fans_out() {
        let doc = "output_dir = \"runs/s\"\n[sweep.vem]\nlambda_mi = [0.05, 0.1, 0.2]\n[sweep]\nseed = [0, 1]\n";
        let (t, s) = parse_document(doc).unwrap();
        let runs = expand_sweep(&t, s.as_ref()).unwrap();
        assert_eq!(runs.len(), 6);
        let lambdas: Vec<f64> = runs.iter().map(|(_, c)| c.vem.lambda_mi).collect();
        assert!(lambdas.contains(&0.05) && lambdas.contains(&0.2));
        let dirs: std::collections::BTreeSet<_> = runs.iter().map(|(_, c)| c.output_dir.clone()).collect();
        assert_eq!(dirs.len(), 6);
        assert!(runs.iter().all(|(_, c)| c.output_dir.starts_with("runs/s")));
    }

    #[test]
    fn lr_decay_is_exact() {
        let s = ScheduleConfig {
            total_iters: 4,
            ..Default::default()
        };
        assert_eq!(s.decayed(2e-4, 0), 2e-4);
        assert_eq!(s.decayed(2e-4, 2), 1e-4);
        assert_eq!(s.decayed(2e-4, 4), 0.0);
    }
}
