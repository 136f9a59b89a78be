//! Chain-of-thought prompt templates with `{name}` placeholders.
//!
//! `{{` and `}}` produce literal braces.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CaptionError, Result};
use crate::knowledge::ExpertKnowledgeEntry;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotTemplate {
    pub version: String,
    pub steps: Vec<String>,
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn pieces(step: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let bytes = step.as_bytes();
    let (mut i, mut start) = (0, 0);
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                out.push(Piece::Text(&step[start..i]));
                out.push(Piece::Brace(bytes[i] as char));
                i += 2;
                start = i;
            }
            b'{' => {
                let end = step[i + 1..]
                    .find(['{', '}'])
                    .map(|e| e + i + 1)
                    .filter(|&e| bytes[e] == b'}')
                    .ok_or_else(|| CaptionError::Template(format!("unterminated placeholder at byte {i} in {step:?}")))?;
                let name = &step[i + 1..end];
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(CaptionError::Template(format!("bad placeholder name {name:?}")));
                }
                out.push(Piece::Text(&step[start..i]));
                out.push(Piece::Slot(name));
                i = end + 1;
                start = i;
            }
            b'}' => return Err(CaptionError::Template(format!("stray '}}' at byte {i} in {step:?}"))),
            _ => i += 1,
        }
    }
    out.push(Piece::Text(&step[start..]));
    Ok(out)
}

impl CotTemplate {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let t: CotTemplate = toml::from_str(text).map_err(|e| CaptionError::Invalid(e.to_string()))?;
        if t.steps.is_empty() {
            return Err(CaptionError::Invalid("template has no steps".into()));
        }
        for s in &t.steps {
            pieces(s)?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| CaptionError::Invalid(format!("{}: {e}", path.display())))
    }

    /// Placeholder names in order of first use.
    pub fn placeholders(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = Vec::new();
        for s in &self.steps {
            for p in pieces(s)? {
                if let Piece::Slot(n) = p {
                    if !names.iter().any(|x| x == n) {
                        names.push(n.to_string());
                    }
                }
            }
        }
        Ok(names)
    }

    /// Steps rendered in order, joined by newlines.
    pub fn render(&self, binding: &BTreeMap<&str, &str>) -> Result<String> {
        let mut steps = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let mut out = String::new();
            for p in pieces(s)? {
                match p {
                    Piece::Text(t) => out.push_str(t),
                    Piece::Brace(c) => out.push(c),
                    Piece::Slot(n) => out.push_str(
                        binding
                            .get(n)
                            .ok_or_else(|| CaptionError::UnboundPlaceholder(n.to_string()))?,
                    ),
                }
            }
            steps.push(out);
        }
        Ok(steps.join("\n"))
    }
}

/// Binds `{species}`, `{attributes}` and `{image_context}`.
pub fn build_prompt(entry: &ExpertKnowledgeEntry, template: &CotTemplate, image_context: &str) -> Result<String> {
    entry.validate()?;
    let attributes = entry.attribute_text();
    let binding = BTreeMap::from([
        ("species", entry.species_name.as_str()),
        ("attributes", attributes.as_str()),
        ("image_context", image_context),
    ]);
    template.render(&binding)
}

/// Lowercase hex SHA-256 of the UTF-8 prompt.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::Attribute;

    fn entry(name: &str) -> ExpertKnowledgeEntry {
        ExpertKnowledgeEntry {
            species_name: name.into(),
            attributes: vec![Attribute {
                facet: "color".into(),
                description: "green".into(),
            }],
        }
    }

    fn template(steps: &[&str]) -> CotTemplate {
        CotTemplate {
            version: "t".into(),
            steps: steps.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn single_step() {
        let p = build_prompt(&entry("aphid"), &template(&["Describe {species}."]), "").unwrap();
        assert_eq!(p, "Describe aphid.");
    }

    #[test]
    fn deterministic_with_hash() {
        let t = template(&["{species}", "Traits:\n{attributes}", "Seen in {image_context}."]);
        let a = build_prompt(&entry("aphid"), &t, "leaf.png").unwrap();
        let b = build_prompt(&entry("aphid"), &t, "leaf.png").unwrap();
        assert_eq!(a, b);
        assert_eq!(prompt_hash(&a), prompt_hash(&b));
        assert_eq!(a, "aphid\nTraits:\n- color: green\nSeen in leaf.png.");
    }

    #[test]
    fn unbound_placeholder_is_named() {
        let err = build_prompt(&entry("aphid"), &template(&["{species} on {host}"]), "").unwrap_err();
        assert!(matches!(&err, CaptionError::UnboundPlaceholder(n) if n == "host"), "{err}");
    }

    #[test]
    fn escaped_braces() {
        let t = template(&["{{literal}} {species} }}"]);
        assert_eq!(build_prompt(&entry("aphid"), &t, "").unwrap(), "{literal} aphid }");
        assert_eq!(t.placeholders().unwrap(), vec!["species"]);
    }

    #[test]
    fn syntax_errors() {
        for bad in ["{species", "species}", "{}", "{a b}", "{a{b}"] {
            let t = template(&[bad]);
            assert!(matches!(t.render(&BTreeMap::new()), Err(CaptionError::Template(_))), "{bad}");
        }
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            prompt_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
