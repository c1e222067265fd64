//! Versioned JSON wire formats. These are the only artifacts that cross
//! the user/analyst boundary.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{IntermediateShare, ReturnPackage};
use crate::error::{Error, Result};
use crate::ni::NiReturnPackage;

pub const SCHEMA_VERSION: u32 = 1;

/// Keys that would leak a user's private reducer, mixing, permutation or raw data.
pub const FORBIDDEN_KEYS: &[&str] = &["F", "mu", "X", "E", "P", "F_prime", "X_raw"];

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if rows.checked_mul(cols) != Some(data.len()) {
        return Err(Error::Schema(format!(
            "{what}: expected {rows}x{cols} values, got {}",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

fn parse_checked<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T> {
    let value: Value = serde_json::from_str(json)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Schema("message is not a JSON object".into()))?;
    if let Some(k) = FORBIDDEN_KEYS.iter().find(|k| obj.contains_key(**k)) {
        return Err(Error::Schema(format!("forbidden field {k:?} in message")));
    }
    match obj.get("version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err(Error::Schema(format!("unsupported schema version {v}"))),
        None => return Err(Error::Schema("missing schema version".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
}

fn require_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Schema(format!("{what} contains non-finite values")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareMessage {
    pub version: u32,
    pub party_id: usize,
    pub r: usize,
    pub m_tilde: usize,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "B_anc")]
    pub b_anc: Vec<f64>,
    #[serde(rename = "Z")]
    pub z: Vec<f64>,
    #[serde(rename = "Y")]
    pub y: Vec<f64>,
}

impl ShareMessage {
    pub fn from_share(s: &IntermediateShare) -> Self {
        Self {
            version: SCHEMA_VERSION,
            party_id: s.party_id,
            r: s.b_anc.nrows(),
            m_tilde: s.b.ncols() - 1,
            b: row_major(&s.b),
            b_anc: row_major(&s.b_anc),
            z: s.z.as_slice().to_vec(),
            y: s.y.as_slice().to_vec(),
        }
    }

    pub fn into_share(self) -> Result<IntermediateShare> {
        let n = self.z.len();
        if self.y.len() != n {
            return Err(Error::Schema(format!(
                "Z has {n} entries but Y has {}",
                self.y.len()
            )));
        }
        let cols = self.m_tilde + 1;
        let b = from_row_major(n, cols, &self.b, "B")?;
        let b_anc = from_row_major(self.r, cols, &self.b_anc, "B_anc")?;
        require_finite(&self.b, "B")?;
        require_finite(&self.b_anc, "B_anc")?;
        require_finite(&self.y, "Y")?;
        if b.column(0)
            .iter()
            .chain(b_anc.column(0).iter())
            .any(|v| *v != 1.0)
        {
            return Err(Error::Schema(
                "column 0 of B and B_anc must be all ones".into(),
            ));
        }
        if let Some(row) = self.z.iter().position(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::NonBinaryTreatment {
                row,
                value: self.z[row],
            });
        }
        Ok(IntermediateShare {
            party_id: self.party_id,
            b,
            b_anc,
            z: DVector::from_vec(self.z),
            y: DVector::from_vec(self.y),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        parse_checked(json)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReturnMessage {
    pub version: u32,
    pub party_id: usize,
    #[serde(rename = "R_point")]
    pub r_point: Vec<f64>,
    #[serde(rename = "R_var")]
    pub r_var: Vec<f64>,
}

impl ReturnMessage {
    pub fn from_package(p: &ReturnPackage) -> Self {
        Self {
            version: SCHEMA_VERSION,
            party_id: p.party_id,
            r_point: p.r_point.as_slice().to_vec(),
            r_var: row_major(&p.r_var),
        }
    }

    pub fn into_package(self) -> Result<ReturnPackage> {
        let d = self.r_point.len();
        let r_var = from_row_major(d, d, &self.r_var, "R_var")?;
        Ok(ReturnPackage {
            party_id: self.party_id,
            r_point: DVector::from_vec(self.r_point),
            r_var,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        parse_checked(json)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiReturnMessage {
    pub version: u32,
    pub party_id: usize,
    #[serde(rename = "R_point_anc")]
    pub r_point_anc: Vec<f64>,
    #[serde(rename = "R_var_anc")]
    pub r_var_anc: Vec<f64>,
}

impl NiReturnMessage {
    pub fn from_package(p: &NiReturnPackage) -> Self {
        Self {
            version: SCHEMA_VERSION,
            party_id: p.party_id,
            r_point_anc: p.r_point_anc.as_slice().to_vec(),
            r_var_anc: row_major(&p.r_var_anc),
        }
    }

    pub fn into_package(self) -> Result<NiReturnPackage> {
        let r = self.r_point_anc.len();
        let r_var_anc = from_row_major(r, r, &self.r_var_anc, "R_var_anc")?;
        Ok(NiReturnPackage {
            party_id: self.party_id,
            r_point_anc: DVector::from_vec(self.r_point_anc),
            r_var_anc,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        parse_checked(json)
    }
}

/// Counts protocol messages and pushes each one through its wire encoding.
#[derive(Debug, Default)]
pub struct MessageLog {
    pub to_analyst: usize,
    pub to_users: usize,
}

impl MessageLog {
    pub fn total(&self) -> usize {
        self.to_analyst + self.to_users
    }

    pub fn send_share(&mut self, share: &IntermediateShare) -> Result<IntermediateShare> {
        self.to_analyst += 1;
        ShareMessage::from_json(&ShareMessage::from_share(share).to_json()?)?.into_share()
    }

    pub fn send_return(&mut self, pkg: &ReturnPackage) -> Result<ReturnPackage> {
        self.to_users += 1;
        ReturnMessage::from_json(&ReturnMessage::from_package(pkg).to_json()?)?.into_package()
    }

    pub fn send_ni_return(&mut self, pkg: &NiReturnPackage) -> Result<NiReturnPackage> {
        self.to_users += 1;
        NiReturnMessage::from_json(&NiReturnMessage::from_package(pkg).to_json()?)?.into_package()
    }
}
