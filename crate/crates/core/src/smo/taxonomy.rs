//! Two-level category tree: parent categories over subcategories.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parent categories in first-seen order, each with its ordered children.
///
/// Parent codes follow `parents`; subcategory codes enumerate children
/// parent by parent, so both code maps are dense and recomputable from the
/// serialized form alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTree {
    parents: Vec<String>,
    children: BTreeMap<String, Vec<String>>,
    parent_code: HashMap<String, usize>,
    sub_code: HashMap<String, usize>,
    sub_parent: HashMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    parents: Vec<String>,
    children: BTreeMap<String, Vec<String>>,
}

impl CategoryTree {
    /// Build from `(parent, subcategory)` pairs; a missing subcategory is
    /// replaced by the parent name. Repeated pairs are ignored.
    pub fn build<P, S>(pairs: impl IntoIterator<Item = (P, Option<S>)>) -> Result<Self>
    where
        P: AsRef<str>,
        S: AsRef<str>,
    {
        let mut parents: Vec<String> = Vec::new();
        let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut owner: HashMap<String, String> = HashMap::new();
        for (parent, sub) in pairs {
            let parent = parent.as_ref().trim();
            if parent.is_empty() {
                return Err(Error::InvalidArgument("parent category name is empty".into()));
            }
            let sub = match &sub {
                Some(s) if !s.as_ref().trim().is_empty() => s.as_ref().trim(),
                _ => parent,
            };
            if !children.contains_key(parent) {
                parents.push(parent.to_string());
                children.insert(parent.to_string(), Vec::new());
            }
            match owner.get(sub) {
                Some(existing) if existing != parent => {
                    return Err(Error::ConflictingParent {
                        sub: sub.to_string(),
                        first: existing.clone(),
                        second: parent.to_string(),
                    })
                }
                Some(_) => {}
                None => {
                    owner.insert(sub.to_string(), parent.to_string());
                    children.get_mut(parent).expect("inserted above").push(sub.to_string());
                }
            }
        }
        Self::from_parts(parents, children)
    }

    fn from_parts(parents: Vec<String>, children: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if children.len() != parents.len() || parents.iter().any(|p| !children.contains_key(p)) {
            return Err(Error::format("category tree", "children keys must match parents"));
        }
        let mut parent_code = HashMap::new();
        let mut sub_code = HashMap::new();
        let mut sub_parent = HashMap::new();
        for (i, p) in parents.iter().enumerate() {
            if parent_code.insert(p.clone(), i).is_some() {
                return Err(Error::format("category tree", format!("duplicate parent {p:?}")));
            }
        }
        for p in &parents {
            let subs = &children[p];
            if subs.is_empty() {
                return Err(Error::format("category tree", format!("parent {p:?} has no children")));
            }
            for s in subs {
                if let Some(prev) = sub_parent.insert(s.clone(), p.clone()) {
                    return Err(Error::ConflictingParent { sub: s.clone(), first: prev, second: p.clone() });
                }
                let code = sub_code.len();
                sub_code.insert(s.clone(), code);
            }
        }
        Ok(Self { parents, children, parent_code, sub_code, sub_parent })
    }

    pub fn parents(&self) -> &[String] {
        &self.parents
    }

    pub fn children(&self, parent: &str) -> Option<&[String]> {
        self.children.get(parent).map(Vec::as_slice)
    }

    /// Every subcategory in code order.
    pub fn subcategories(&self) -> Vec<String> {
        self.parents.iter().flat_map(|p| self.children[p].iter().cloned()).collect()
    }

    pub fn parent_code(&self, parent: &str) -> Option<usize> {
        self.parent_code.get(parent).copied()
    }

    pub fn sub_code(&self, sub: &str) -> Option<usize> {
        self.sub_code.get(sub).copied()
    }

    pub fn parent_of(&self, sub: &str) -> Option<&str> {
        self.sub_parent.get(sub).map(String::as_str)
    }

    pub fn num_parents(&self) -> usize {
        self.parents.len()
    }

    pub fn num_subcategories(&self) -> usize {
        self.sub_code.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TreeFile { parents: self.parents.clone(), children: self.children.clone() };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TreeFile = serde_json::from_str(text)?;
        Self::from_parts(file.parents, file.children)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
