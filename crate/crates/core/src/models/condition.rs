use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    OneHot,
    Embedding,
}

impl std::str::FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_hot" | "one-hot" => Ok(ConditionKind::OneHot),
            "embedding" => Ok(ConditionKind::Embedding),
            other => Err(Error::Config(format!("unknown condition kind `{other}`"))),
        }
    }
}

/// Vector identifying a condition: one-hot over the condition set, or a
/// dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    values: Vec<f64>,
    kind: ConditionKind,
}

impl ConditionVector {
    pub fn one_hot(id: usize, num_conditions: usize) -> Result<Self> {
        if id >= num_conditions {
            return Err(Error::Data(format!(
                "condition {id} out of range for {num_conditions} conditions"
            )));
        }
        let mut values = vec![0.0; num_conditions];
        values[id] = 1.0;
        Ok(ConditionVector {
            values,
            kind: ConditionKind::OneHot,
        })
    }

    pub fn embedding(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding must be non-empty and finite".into()));
        }
        Ok(ConditionVector {
            values,
            kind: ConditionKind::Embedding,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Observation with its condition.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub condition_id: usize,
    pub condition: ConditionVector,
}

/// One condition vector per condition id, all of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTable {
    kind: ConditionKind,
    vectors: Vec<ConditionVector>,
}

impl ConditionTable {
    pub fn one_hot(num_conditions: usize) -> Self {
        ConditionTable {
            kind: ConditionKind::OneHot,
            vectors: (0..num_conditions)
                .map(|k| ConditionVector::one_hot(k, num_conditions).expect("k in range"))
                .collect(),
        }
    }

    pub fn embeddings(table: &[Vec<f64>]) -> Result<Self> {
        let vectors = table
            .iter()
            .map(|v| ConditionVector::embedding(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let dim = vectors.first().map_or(0, ConditionVector::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Data("embedding table rows differ in length".into()));
        }
        Ok(ConditionTable {
            kind: ConditionKind::Embedding,
            vectors,
        })
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn num_conditions(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, ConditionVector::len)
    }

    pub fn get(&self, id: usize) -> Result<&ConditionVector> {
        self.vectors.get(id).ok_or_else(|| {
            Error::Data(format!(
                "condition {id} out of range for {} conditions",
                self.vectors.len()
            ))
        })
    }

    /// `[ids.len(), dim]` matrix of condition vectors.
    pub fn tensor(&self, ids: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            data.extend_from_slice(self.get(id)?.values());
        }
        Tensor::new(vec![ids.len(), self.dim()], data)
    }
}
