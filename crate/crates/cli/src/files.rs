//! Documents the CLI keeps on disk besides the wire messages.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dcdml_core::dimred::DimReducer;
use dcdml_core::dml::TestResult;
use dcdml_core::protocol::messages::SCHEMA_VERSION;
use dcdml_core::protocol::{gen_anchor, AnalystFit, AnchorDataset, UserCateModel};

pub const FILE_VERSION: u32 = 1;
pub const PRIVATE_NOTICE: &str =
    "PRIVATE - DO NOT SHARE. Holds this party's reducer; keep it local.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaVersions {
    pub share: u32,
    #[serde(rename = "return")]
    pub ret: u32,
}

/// Public parameters every participant agrees on before sharing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub v: u32,
    pub session_id: String,
    pub m: usize,
    pub m_check: usize,
    pub r: usize,
    pub anchor_ranges: Vec<(f64, f64)>,
    pub anchor_seed: u64,
    pub parties: Vec<usize>,
    pub treatment_column: String,
    pub outcome_column: String,
    pub schema_versions: SchemaVersions,
}

impl SessionManifest {
    pub fn schema_versions() -> SchemaVersions {
        SchemaVersions {
            share: SCHEMA_VERSION,
            ret: SCHEMA_VERSION,
        }
    }

    pub fn anchor(&self) -> Result<AnchorDataset> {
        Ok(gen_anchor(&self.anchor_ranges, self.r, self.anchor_seed)?)
    }

    pub fn check(&self) -> Result<()> {
        if self.v != FILE_VERSION {
            bail!("unsupported manifest version {}", self.v);
        }
        if self.anchor_ranges.len() != self.m {
            bail!(
                "manifest has {} anchor ranges for m = {}",
                self.anchor_ranges.len(),
                self.m
            );
        }
        if self.schema_versions != Self::schema_versions() {
            bail!("manifest expects message schema {:?}", self.schema_versions);
        }
        Ok(())
    }
}

/// A user's private state between `prepare` and `finalize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducerState {
    pub notice: String,
    pub v: u32,
    pub session_id: String,
    pub party_id: usize,
    pub ni: bool,
    pub reducer: DimReducer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    #[serde(flatten)]
    pub test: TestResult,
    pub stars: String,
}

/// A user's final CATE model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub v: u32,
    pub session_id: String,
    pub party_id: usize,
    pub covariate_names: Vec<String>,
    pub model: UserCateModel,
    pub coefficients: Vec<CoefficientRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalystFile {
    pub v: u32,
    pub session_id: String,
    pub ni: bool,
    pub parties: Vec<usize>,
    pub m_check: usize,
    pub svd_residual: f64,
    pub max_anchor_misalignment: f64,
    pub fit: AnalystFit,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}
