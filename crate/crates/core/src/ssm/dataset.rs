//! Trajectories, datasets, and their newline-delimited JSON files.
//!
//! One trajectory per line:
//! `{"id": "...", "dt": 0.02, "obs": [[...], ...], "states": [[...], ...] | null}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmath::Vector;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub dt: f64,
    pub obs: Vec<Vector>,
    pub states: Option<Vec<Vector>>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, dt: f64, obs: Vec<Vector>, states: Option<Vec<Vector>>) -> Result<Self> {
        let t = Self {
            id: id.into(),
            dt,
            obs,
            states,
        };
        t.validate().map_err(Error::InvalidArgument)?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.first().map_or(0, |y| y.len())
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.states.as_ref().and_then(|s| s.first()).map(|x| x.len())
    }

    /// Drops the ground-truth states.
    pub fn unlabeled(&self) -> Self {
        Self {
            states: None,
            ..self.clone()
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.obs.is_empty() {
            return Err("trajectory needs at least one observation".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(format!("dt must be positive, got {}", self.dt));
        }
        let n = self.obs[0].len();
        if self.obs.iter().any(|y| y.len() != n) {
            return Err("observations have inconsistent dimensions".into());
        }
        if let Some(states) = &self.states {
            if states.len() != self.obs.len() {
                return Err(format!(
                    "{} states for {} observations",
                    states.len(),
                    self.obs.len()
                ));
            }
            let m = states[0].len();
            if states.iter().any(|x| x.len() != m) {
                return Err("states have inconsistent dimensions".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Every trajectory carries ground-truth states.
    pub fn supervised(&self) -> bool {
        !self.trajectories.is_empty() && self.trajectories.iter().all(|t| t.states.is_some())
    }

    pub fn unlabeled(&self) -> Self {
        Self::new(self.trajectories.iter().map(Trajectory::unlabeled).collect())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for t in &self.trajectories {
            let rec = Record {
                id: Some(t.id.clone()),
                dt: Some(t.dt),
                obs: Some(t.obs.iter().map(|v| v.as_slice().to_vec()).collect()),
                states: t
                    .states
                    .as_ref()
                    .map(|s| s.iter().map(|v| v.as_slice().to_vec()).collect()),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut trajectories = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let schema = |message: String| Error::Schema {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let rec: Record = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
            let id = rec.id.ok_or_else(|| schema("missing \"id\" field".into()))?;
            let dt = rec.dt.ok_or_else(|| schema("missing \"dt\" field".into()))?;
            let obs = rec.obs.ok_or_else(|| schema("missing \"obs\" field".into()))?;
            let t = Trajectory {
                id,
                dt,
                obs: obs.into_iter().map(Vector::from_vec).collect(),
                states: rec
                    .states
                    .map(|s| s.into_iter().map(Vector::from_vec).collect()),
            };
            t.validate().map_err(schema)?;
            trajectories.push(t);
        }
        Ok(Self { trajectories })
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: Option<String>,
    dt: Option<f64>,
    obs: Option<Vec<Vec<f64>>>,
    // Serialized as an explicit `null` for unlabeled trajectories.
    states: Option<Vec<Vec<f64>>>,
}
