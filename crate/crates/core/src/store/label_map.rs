use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, StoreError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wordnet_id: Option<String>,
    pub name: String,
}

/// Label index → display name (and optional WordNet id), stored as a JSON array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap(pub Vec<Label>);

impl LabelMap {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        LabelMap(
            names
                .iter()
                .enumerate()
                .map(|(index, n)| Label {
                    index,
                    wordnet_id: None,
                    name: n.as_ref().to_string(),
                })
                .collect(),
        )
    }

    /// Indices must be unique and dense from 0 (any order on disk).
    pub fn validate(&self) -> Result<(), StoreError> {
        let mut seen = vec![false; self.0.len()];
        for l in &self.0 {
            match seen.get_mut(l.index) {
                Some(s) if !*s => *s = true,
                _ => {
                    return Err(StoreError::Inconsistent(format!(
                        "label map index {} is duplicated or out of 0..{}",
                        l.index,
                        self.0.len()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.0.iter().find(|l| l.index == index).map(|l| l.name.as_str())
    }

    /// Names ordered by index.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<&Label> = self.0.iter().collect();
        v.sort_by_key(|l| l.index);
        v.into_iter().map(|l| l.name.clone()).collect()
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let map: LabelMap = serde_json::from_str(&text).map_err(|e| StoreError::Schema {
            field: "label_map".into(),
            detail: e.to_string(),
        })?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).expect("label map serializes");
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_indices_required() {
        assert!(LabelMap::from_names(&["a", "b"]).validate().is_ok());
        let mut m = LabelMap::from_names(&["a", "b"]);
        m.0[1].index = 0;
        assert!(m.validate().is_err());
        m.0[1].index = 5;
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_shape() {
        let mut m = LabelMap::from_names(&["circle"]);
        m.0[0].wordnet_id = Some("n0001".into());
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"[{"index":0,"wordnet_id":"n0001","name":"circle"}]"#);
    }
}
