use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{read_json, Error, Result};
use crate::rig::BlendRig;

/// The canonical expressions shipped with the procedural face rig.
pub const DEFAULT_CANONICAL_JSON: &str = include_str!("../../assets/canonical_expressions.json");

/// Editable set of named weight combinations, keyed by control name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSet {
    pub expressions: Vec<CanonicalExpression>,
}

/// Where the canonical combinations come from: `"none"`, `"builtin"` or a
/// JSON file path.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum CanonicalSource {
    #[default]
    None,
    Builtin,
    File(PathBuf),
}

impl CanonicalSource {
    pub fn load(&self) -> Result<CanonicalSet> {
        match self {
            CanonicalSource::None => Ok(CanonicalSet::default()),
            CanonicalSource::Builtin => Ok(CanonicalSet::builtin()),
            CanonicalSource::File(p) => CanonicalSet::load(p),
        }
    }
}

impl From<String> for CanonicalSource {
    fn from(s: String) -> Self {
        match s.as_str() {
            "none" => CanonicalSource::None,
            "builtin" => CanonicalSource::Builtin,
            _ => CanonicalSource::File(PathBuf::from(s)),
        }
    }
}

impl From<CanonicalSource> for String {
    fn from(c: CanonicalSource) -> Self {
        match c {
            CanonicalSource::None => "none".into(),
            CanonicalSource::Builtin => "builtin".into(),
            CanonicalSource::File(p) => p.to_string_lossy().into_owned(),
        }
    }
}

impl FromStr for CanonicalSource {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(s.to_string().into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalExpression {
    pub name: String,
    pub weights: BTreeMap<String, f64>,
}

impl CanonicalSet {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_CANONICAL_JSON).expect("bundled canonical set parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn len(&self) -> usize {
        self.expressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expressions.is_empty()
    }

    /// Dense weight vectors in the rig's control order.
    pub fn resolve(&self, rig: &BlendRig<f64>) -> Result<Vec<(String, Vec<f64>)>> {
        self.expressions
            .iter()
            .map(|e| {
                let mut v = vec![0.0; rig.control_count()];
                for (name, &w) in &e.weights {
                    let i = rig.control_index(name).ok_or_else(|| {
                        Error::Invalid(format!("expression `{}` names unknown control `{name}`", e.name))
                    })?;
                    v[i] = w;
                }
                Ok((e.name.clone(), v))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::procedural;

    #[test]
    fn builtin_set_resolves_against_face_rig() {
        let set = CanonicalSet::builtin();
        assert_eq!(set.len(), 20);
        let resolved = set.resolve(&procedural::face_rig(6, 0)).unwrap();
        assert_eq!(resolved.len(), 20);
        assert!(resolved.iter().all(|(_, v)| v.iter().any(|&w| w > 0.0)));
    }

    #[test]
    fn unknown_control_is_rejected() {
        let mut set = CanonicalSet::builtin();
        set.expressions[0].weights.insert("nope".into(), 1.0);
        assert!(set.resolve(&procedural::face_rig(6, 0)).is_err());
    }
}
