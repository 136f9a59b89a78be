//! Expert descriptions of each species, kept in a TOML file:
//!
//! ```toml
//! [[species]]
//! name = "aphid"
//! attributes = [
//!     { facet = "color", description = "pale green to black" },
//! ]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CaptionError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub facet: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertKnowledgeEntry {
    #[serde(rename = "name")]
    pub species_name: String,
    pub attributes: Vec<Attribute>,
}

impl ExpertKnowledgeEntry {
    pub fn validate(&self) -> Result<()> {
        if self.species_name.trim().is_empty() {
            return Err(CaptionError::Invalid("species name is empty".into()));
        }
        if self.attributes.is_empty() {
            return Err(CaptionError::Invalid(format!("{}: no attributes", self.species_name)));
        }
        Ok(())
    }

    /// `facet: description` pairs in file order, one per line.
    pub fn attribute_text(&self) -> String {
        self.attributes
            .iter()
            .map(|a| format!("- {}: {}", a.facet, a.description))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeBase {
    #[serde(default)]
    pub species: Vec<ExpertKnowledgeEntry>,
}

impl KnowledgeBase {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let kb: KnowledgeBase = toml::from_str(text).map_err(|e| CaptionError::Invalid(e.to_string()))?;
        let mut names = std::collections::BTreeSet::new();
        for e in &kb.species {
            e.validate()?;
            if !names.insert(e.species_name.as_str()) {
                return Err(CaptionError::Invalid(format!("species {:?} listed twice", e.species_name)));
            }
        }
        Ok(kb)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| CaptionError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, species: &str) -> Result<&ExpertKnowledgeEntry> {
        self.species
            .iter()
            .find(|e| e.species_name == species)
            .ok_or_else(|| CaptionError::Invalid(format!("no knowledge entry for species {species:?}")))
    }
}
