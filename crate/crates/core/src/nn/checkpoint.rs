use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Slice};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub config_hash: String,
}

/// Trained parameters on disk. `arch` carries method-specific fields
/// needed to rebuild the model around the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub method: String,
    pub layout: Vec<Slice>,
    pub values: Vec<f64>,
    pub meta: CheckpointMeta,
    #[serde(default)]
    pub arch: serde_json::Value,
}

impl Checkpoint {
    pub fn new(method: &str, store: &ParamStore, meta: CheckpointMeta, arch: serde_json::Value) -> Self {
        Self {
            method: method.to_string(),
            layout: store.layout().to_vec(),
            values: store.values.clone(),
            meta,
            arch,
        }
    }

    pub fn store(&self) -> Result<ParamStore> {
        ParamStore::from_parts(self.layout.clone(), self.values.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        ckpt.store().map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
        Ok(ckpt)
    }

    /// Fails unless the checkpoint was written by `method`.
    pub fn expect_method(&self, method: &str) -> Result<()> {
        if self.method != method {
            return Err(Error::Config(format!(
                "checkpoint holds a {:?} model, expected {method:?}",
                self.method
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("a", &[4, 5], Init::FanIn(5), &mut rng);
        store.add_frozen("norm", &[0.1, 1.0 / 3.0]);
        let ck = Checkpoint::new(
            "knet",
            &store,
            CheckpointMeta {
                seed: 9,
                epochs: 2,
                config_hash: "abc".into(),
            },
            serde_json::json!({"hidden": 5}),
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.store().unwrap(), store);
    }

    #[test]
    fn truncated_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(
            &p,
            r#"{"method":"x","layout":[{"name":"a","offset":0,"shape":[3]}],"values":[1.0],"meta":{"seed":0,"epochs":0,"config_hash":""}}"#,
        )
        .unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Schema { .. })));
    }
}
