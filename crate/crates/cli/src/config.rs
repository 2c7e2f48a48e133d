//! The run configuration: one TOML file, `--key=value` overrides, and the
//! resolved echo written next to every output.

use std::path::{Path, PathBuf};

use mcrec_core::data::{GeneratorConfig, DEFAULT_MIN_RECORDS_PER_CENTER};
use mcrec_core::tune::Regime;
use mcrec_core::{EncoderConfig, GroupThresholds, PretrainConfig, TuneConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MCREC_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
/// Name of the resolved-config echo inside each output directory.
pub const ECHO_FILE: &str = "config.toml";

/// Keys accepted as `--key=value` without a section prefix.
pub const TOP_LEVEL_KEYS: [&str; 4] = ["seed", "seeds", "jobs", "output_root"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Split and initialization seed for the single-step commands.
    pub seed: u64,
    /// Seeds of the experiment matrix.
    pub seeds: Vec<u64>,
    /// Worker threads: centers for `tune`, seeds for `matrix`.
    pub jobs: usize,
    /// Empty means `$MCREC_OUTPUT_ROOT`, then `runs`.
    pub output_root: String,
    pub ingest: IngestConfig,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub tune: TuneConfig,
    pub groups: GroupThresholds,
    pub matrix: MatrixConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            seeds: vec![42, 43, 44, 45, 46],
            jobs: 1,
            output_root: String::new(),
            ingest: IngestConfig::default(),
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            tune: TuneConfig::default(),
            groups: GroupThresholds::default(),
            matrix: MatrixConfig::default(),
        }
    }
}

/// Optional external records file used by `gen-data` instead of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// JSON Lines file; empty means synthetic data.
    pub records_file: String,
    pub min_records_per_center: usize,
    /// Keep only the most frequent codes; 0 keeps all.
    pub top_diagnoses: usize,
    pub top_procedures: usize,
    pub top_medications: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            records_file: String::new(),
            min_records_per_center: DEFAULT_MIN_RECORDS_PER_CENTER,
            top_diagnoses: 0,
            top_procedures: 0,
            top_medications: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    pub regimes: Vec<Regime>,
    /// Model the per-group improvement column is measured against.
    pub baseline: Regime,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            regimes: Regime::ALL.to_vec(),
            baseline: Regime::SingleTrain,
        }
    }
}

/// Ablation switches shared by `pretrain`, `tune`, `evaluate` and `matrix`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::Args)]
pub struct Ablations {
    /// Pretrain without the mask-prediction task.
    #[arg(long)]
    pub no_mask_task: bool,
    /// Pretrain without the contrastive task.
    #[arg(long)]
    pub no_contrastive_task: bool,
    /// Separate encoder weights for the diagnosis and procedure towers.
    #[arg(long)]
    pub separate_encoders: bool,
    /// Share the hidden layer of the two pretraining heads.
    #[arg(long)]
    pub shared_pretrain_heads: bool,
}

impl Ablations {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.no_mask_task {
            cfg.pretrain.mask_task = false;
        }
        if self.no_contrastive_task {
            cfg.pretrain.contrastive_task = false;
        }
        if self.separate_encoders {
            cfg.encoder.shared_towers = false;
        }
        if self.shared_pretrain_heads {
            cfg.pretrain.shared_heads = true;
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies `overrides` and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::NotFound {
                        CliError::Missing(format!("config file {}", p.display()))
                    } else {
                        CliError::Io(p.to_path_buf(), e)
                    }
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.tune.validate()?;
        self.groups.validate()?;
        if self.seeds.is_empty() {
            return Err(mcrec_core::Error::config("seeds", "must not be empty").into());
        }
        if self.jobs == 0 {
            return Err(mcrec_core::Error::config("jobs", "must be positive").into());
        }
        if self.matrix.regimes.is_empty() {
            return Err(mcrec_core::Error::config("matrix.regimes", "must not be empty").into());
        }
        Ok(())
    }

    pub fn output_root(&self) -> PathBuf {
        if !self.output_root.is_empty() {
            return PathBuf::from(&self.output_root);
        }
        match std::env::var(OUTPUT_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(DEFAULT_OUTPUT_ROOT),
        }
    }

    /// Canonical TOML of the resolved configuration. Feeding it back in
    /// reproduces the run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML, ignoring `output_root` and
    /// `jobs`, which do not change results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_root.clear();
        c.jobs = 1;
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    /// Name of the pretraining variant: `full`, or the enabled ablations
    /// joined by `+`.
    pub fn variant(&self) -> String {
        let mut parts = Vec::new();
        if !self.pretrain.mask_task {
            parts.push("no-mask-task");
        }
        if !self.pretrain.contrastive_task {
            parts.push("no-contrastive-task");
        }
        if !self.encoder.shared_towers {
            parts.push("separate-encoders");
        }
        if self.pretrain.shared_heads {
            parts.push("shared-pretrain-heads");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// TOML literal when it parses as one, otherwise a bare string, so that
/// `--tune.regime=finetune` works without quoting.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `--key=value` overrides (dotted keys or [`TOP_LEVEL_KEYS`]) from
/// the arguments meant for the command parser.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(body) = a.strip_prefix("--") {
            if let Some((k, v)) = body.split_once('=') {
                if k.contains('.') || TOP_LEVEL_KEYS.contains(&k) {
                    overrides.push((k.to_string(), v.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

/// Writes the resolved configuration into `dir`.
pub fn echo(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
    mcrec_core::metrics::report::write_file(&dir.join(ECHO_FILE), text)?;
    Ok(())
}
