use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One parsed IOB label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IobTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> IobTag<'a> {
    pub fn parse(label: &'a str) -> Option<Self> {
        if label == "O" {
            return Some(IobTag::Outside);
        }
        let (prefix, ty) = label.split_once('-')?;
        if ty.is_empty() || ty.chars().any(char::is_whitespace) {
            return None;
        }
        match prefix {
            "B" => Some(IobTag::Begin(ty)),
            "I" => Some(IobTag::Inside(ty)),
            _ => None,
        }
    }

    pub fn entity_type(&self) -> Option<&'a str> {
        match self {
            IobTag::Outside => None,
            IobTag::Begin(t) | IobTag::Inside(t) => Some(t),
        }
    }
}

pub fn is_valid_label(label: &str) -> bool {
    IobTag::parse(label).is_some()
}

/// Ordered label inventory of one task; the position of a label is its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelMap {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    /// Validates IOB syntax, uniqueness, presence of `O`, and that every
    /// `B-X` has a matching `I-X`.
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if !is_valid_label(label) {
                return Err(Error::InvalidLabel {
                    line: None,
                    label: label.clone(),
                });
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label {label:?}")));
            }
        }
        if !index.contains_key("O") {
            return Err(Error::Config("label set must contain \"O\"".into()));
        }
        for label in &labels {
            if let Some(IobTag::Begin(ty)) = IobTag::parse(label) {
                if !index.contains_key(&format!("I-{ty}")) {
                    return Err(Error::Config(format!("label set has B-{ty} but no I-{ty}")));
                }
            }
        }
        Ok(Self { labels, index })
    }

    /// `O` followed by `B-X`, `I-X` for each type in sorted order.
    pub fn from_types<I, S>(types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let types: BTreeSet<String> = types.into_iter().map(|s| s.as_ref().to_string()).collect();
        let mut labels = vec!["O".to_string()];
        for ty in types {
            labels.push(format!("B-{ty}"));
            labels.push(format!("I-{ty}"));
        }
        Self::new(labels).expect("generated label set is valid")
    }

    /// Collects every entity type named by any label in `label_seqs`.
    pub fn from_label_sequences<'a, I>(label_seqs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut types = BTreeSet::new();
        for seq in label_seqs {
            for label in seq {
                let tag = IobTag::parse(label).ok_or_else(|| Error::InvalidLabel {
                    line: None,
                    label: label.clone(),
                })?;
                if let Some(ty) = tag.entity_type() {
                    types.insert(ty.to_string());
                }
            }
        }
        Ok(Self::from_types(types))
    }

    /// One label per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let labels = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for label in &self.labels {
            out.push_str(label);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn outside_id(&self) -> usize {
        self.index["O"]
    }
}

impl TryFrom<Vec<String>> for LabelMap {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<LabelMap> for Vec<String> {
    fn from(map: LabelMap) -> Self {
        map.labels
    }
}
