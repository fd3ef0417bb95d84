//! Experiment files: TOML with an explicit schema version.
//!
//! ```toml
//! schema_version = 1
//! name = "desk"
//! repeats = 3
//!
//! [data]
//! dataset = "mnist"
//! train_cap = 2000
//! test_cap = 1000
//!
//! [partition]
//! alpha = 0.1
//!
//! [run]              # any RunConfig field; unspecified fields keep defaults
//! rounds = 20
//!
//! [[variant]]        # suite members: a name plus overrides of [run]
//! name = "no-finetune"
//! fine_tune_rounds = 0
//! ```

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fedvtc::datapart::{load_dataset, synthetic_bundle, SizeCap};
use fedvtc::modelzoo::DatasetProfile;
use fedvtc::orchestrator::RunConfig;
use fedvtc::DatasetBundleF32;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the dataset root.
pub const DATA_ROOT_ENV: &str = "FEDVTC_DATA_ROOT";

/// Dataset name that selects the procedurally generated image set.
pub const SYNTHETIC_DATASET: &str = "synthetic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub root: Option<PathBuf>,
    pub train_cap: Option<usize>,
    pub test_cap: Option<usize>,
    /// Seed of the cap subsample (and of the synthetic image set).
    #[serde(default)]
    pub seed: u64,
}

fn default_dataset() -> String {
    "mnist".into()
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: default_dataset(),
            root: None,
            train_cap: None,
            test_cap: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { alpha: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub run: toml::Table,
    #[serde(default, rename = "variant")]
    pub variants: Vec<toml::Table>,
    /// Seeds per suite member when `seeds` is absent.
    pub repeats: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    /// Concurrent runs in a suite.
    pub workers: Option<usize>,
}

fn default_name() -> String {
    "experiment".into()
}

/// A named, fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

/// Command-line overrides shared by all subcommands.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub train_cap: Option<usize>,
    pub test_cap: Option<usize>,
    pub seed: Option<u64>,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ExperimentFile = toml::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                file.schema_version
            );
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(r) = &o.data_root {
            self.data.root = Some(r.clone());
        }
        if o.train_cap.is_some() {
            self.data.train_cap = o.train_cap;
        }
        if o.test_cap.is_some() {
            self.data.test_cap = o.test_cap;
        }
        if let Some(s) = o.seed {
            self.run.insert("seed".into(), toml::Value::Integer(s as i64));
            self.seeds = Some(vec![s]);
        }
    }

    /// The `[run]` table on top of the defaults.
    pub fn base_config(&self) -> Result<RunConfig> {
        resolve(&self.run, &toml::Table::new())
    }

    /// Suite members; a file without `[[variant]]` yields one member named
    /// after the experiment.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        if self.variants.is_empty() {
            return Ok(vec![Variant {
                name: self.name.clone(),
                config: self.base_config()?,
            }]);
        }
        let mut out: Vec<Variant> = Vec::new();
        for v in &self.variants {
            let name = v
                .get("name")
                .and_then(toml::Value::as_str)
                .ok_or_else(|| anyhow!("every [[variant]] needs a string `name`"))?
                .to_string();
            if out.iter().any(|o| o.name == name) {
                bail!("duplicate variant name {name:?}");
            }
            let mut over = v.clone();
            over.remove("name");
            let config = resolve(&self.run, &over).with_context(|| format!("variant {name:?}"))?;
            out.push(Variant { name, config });
        }
        Ok(out)
    }

    /// Explicit `seeds`, else `repeats` consecutive seeds from the base seed.
    pub fn seed_list(&self) -> Result<Vec<u64>> {
        if let Some(s) = &self.seeds {
            if s.is_empty() {
                bail!("`seeds` is empty");
            }
            return Ok(s.clone());
        }
        let base = self.base_config()?.seed;
        let n = self.repeats.unwrap_or(1).max(1) as u64;
        Ok((base..base + n).collect())
    }

    /// Dataset root: `--data-root` (or `FEDVTC_DATA_ROOT`, resolved by the
    /// CLI into the override), then the file's `data.root`, then `./data`.
    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    /// Image profile of the configured dataset.
    pub fn profile(&self) -> Result<DatasetProfile> {
        if self.data.dataset == SYNTHETIC_DATASET {
            return Ok(DatasetProfile::tiny(10));
        }
        Ok(DatasetProfile::by_name(&self.data.dataset)?)
    }

    pub fn load_bundle(&self) -> Result<DatasetBundleF32> {
        let d = &self.data;
        let profile = self.profile()?;
        if d.dataset == SYNTHETIC_DATASET {
            return Ok(synthetic_bundle(
                &profile,
                d.train_cap.unwrap_or(500),
                d.test_cap.unwrap_or(200),
                d.seed,
            )?);
        }
        let cap = SizeCap {
            train: d.train_cap,
            test: d.test_cap,
        };
        Ok(load_dataset(&profile, &self.data_root(), cap, d.seed)?)
    }

    /// The file as resolved, for archiving next to run outputs.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

fn merge(into: &mut toml::Table, from: &toml::Table) {
    for (k, v) in from {
        into.insert(k.clone(), v.clone());
    }
}

fn resolve(base: &toml::Table, over: &toml::Table) -> Result<RunConfig> {
    let mut t = toml::Table::try_from(RunConfig::default())?;
    merge(&mut t, base);
    merge(&mut t, over);
    let cfg: RunConfig = toml::Value::Table(t).try_into()?;
    cfg.validate()?;
    Ok(cfg)
}
