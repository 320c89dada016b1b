//! Parameter checkpoints: a single JSON document holding an architecture
//! header, row-major parameter tensors, and optionally the optimizer state.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimizerState};
use super::tape::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "grutrack-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub header: serde_json::Value,
    pub params: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

impl Checkpoint {
    pub fn new(header: serde_json::Value, params: &ParamStore, optimizer: Option<&OptimizerState>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            header,
            params: params
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                    values: row_major(&p.value),
                })
                .collect(),
            optimizer: optimizer.map(|o| OptimizerRecord {
                config: o.config,
                step: o.step,
                first_moment: o.first_moment.iter().map(row_major).collect(),
                second_moment: o.second_moment.iter().map(row_major).collect(),
            }),
        }
    }

    fn check_layout(&self, store: &ParamStore) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                self.format, self.version
            )));
        }
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                store.len(),
                self.params.len()
            )));
        }
        for (rec, p) in self.params.iter().zip(store.iter()) {
            if rec.name != p.name || rec.rows != p.value.nrows() || rec.cols != p.value.ncols() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {}x{} does not match `{}` {}x{}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    p.name,
                    p.value.nrows(),
                    p.value.ncols()
                )));
            }
            if rec.values.len() != rec.rows * rec.cols {
                return Err(Error::Checkpoint(format!("tensor `{}` has wrong value count", rec.name)));
            }
        }
        Ok(())
    }

    /// Copies the stored tensors into `store` after validating names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        self.check_layout(store)?;
        for (rec, p) in self.params.iter().zip(store.iter_mut()) {
            p.value = DMatrix::from_row_slice(rec.rows, rec.cols, &rec.values);
        }
        Ok(())
    }

    pub fn optimizer_state(&self, store: &ParamStore) -> Result<Option<OptimizerState>> {
        self.check_layout(store)?;
        let Some(rec) = &self.optimizer else {
            return Ok(None);
        };
        let rebuild = |moments: &[Vec<f64>]| -> Result<Vec<DMatrix<f64>>> {
            if moments.len() != store.len() {
                return Err(Error::Checkpoint("optimizer moment count mismatch".into()));
            }
            store
                .iter()
                .zip(moments)
                .map(|(p, m)| {
                    if m.len() != p.value.len() {
                        return Err(Error::Checkpoint(format!("optimizer moment for `{}` has wrong size", p.name)));
                    }
                    Ok(DMatrix::from_row_slice(p.value.nrows(), p.value.ncols(), m))
                })
                .collect()
        };
        Ok(Some(OptimizerState {
            config: rec.config,
            step: rec.step,
            first_moment: rebuild(&rec.first_moment)?,
            second_moment: rebuild(&rec.second_moment)?,
        }))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
