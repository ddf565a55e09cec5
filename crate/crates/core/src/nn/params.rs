use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Frozen slices (normalization statistics and the like) are stored with
    /// the model but never receive gradient.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl Slice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
}

/// Flat parameter vector with a named layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub values: Vec<f64>,
    layout: Vec<Slice>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a store from a saved layout, checking that slices are
    /// contiguous, disjoint, and cover `values` exactly.
    pub fn from_parts(layout: Vec<Slice>, values: Vec<f64>) -> Result<Self> {
        let mut at = 0;
        for s in &layout {
            if s.offset != at {
                return Err(Error::Config(format!(
                    "parameter slice {:?} starts at {} but {} was expected",
                    s.name, s.offset, at
                )));
            }
            at += s.len();
        }
        if at != values.len() {
            return Err(Error::Config(format!(
                "layout covers {at} values but {} were given",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite parameter value".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[Slice] {
        &self.layout
    }

    /// Appends a block and returns its offset.
    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> usize {
        let offset = self.values.len();
        let len: usize = shape.iter().product();
        match init {
            Init::Zeros => self.values.resize(offset + len, 0.0),
            Init::Const(c) => self.values.resize(offset + len, c),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                self.values
                    .extend((0..len).map(|_| rng.random_range(-bound..=bound)));
            }
        }
        self.layout.push(Slice {
            name: name.to_string(),
            offset,
            shape: shape.to_vec(),
            trainable: true,
        });
        offset
    }

    /// Appends a frozen block holding `values`.
    pub fn add_frozen(&mut self, name: &str, values: &[f64]) -> usize {
        let offset = self.values.len();
        self.values.extend_from_slice(values);
        self.layout.push(Slice {
            name: name.to_string(),
            offset,
            shape: vec![values.len()],
            trainable: false,
        });
        offset
    }

    pub fn slice(&self, name: &str) -> Option<&Slice> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn offset(&self, name: &str) -> Result<usize> {
        self.slice(name)
            .map(|s| s.offset)
            .ok_or_else(|| Error::Config(format!("no parameter slice named {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let s = self
            .slice(name)
            .ok_or_else(|| Error::Config(format!("no parameter slice named {name:?}")))?;
        Ok(&self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self
            .slice(name)
            .ok_or_else(|| Error::Config(format!("no parameter slice named {name:?}")))?
            .range();
        Ok(&mut self.values[range])
    }

    /// Zeroes gradient entries of frozen slices.
    pub fn mask_frozen(&self, grad: &mut [f64]) {
        for s in self.layout.iter().filter(|s| !s.trainable) {
            grad[s.range()].iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_is_contiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        let a = p.add("w", &[3, 4], Init::FanIn(4), &mut rng);
        let b = p.add("b", &[3], Init::Zeros, &mut rng);
        let c = p.add_frozen("stats", &[1.0, 2.0]);
        assert_eq!((a, b, c), (0, 12, 15));
        assert_eq!(p.len(), 17);
        assert!(p.get("w").unwrap().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(p.get("b").unwrap(), &[0.0; 3]);
        let back = ParamStore::from_parts(p.layout().to_vec(), p.values.clone()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_gaps_and_short_values() {
        let s = Slice {
            name: "a".into(),
            offset: 1,
            shape: vec![2],
            trainable: true,
        };
        assert!(ParamStore::from_parts(vec![s.clone()], vec![0.0; 3]).is_err());
        let s = Slice { offset: 0, ..s };
        assert!(ParamStore::from_parts(vec![s], vec![0.0; 3]).is_err());
    }
}
