//! Class hierarchy, label paths and per-step level masks.
//!
//! Classes of all levels share one global index space: level 0 classes come
//! first, then level 1, and so on. Decoding restricts each step to one level
//! with a boolean mask over that union.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A class, addressed by its level and its position inside that level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId {
    pub level: usize,
    pub index: usize,
}

impl ClassId {
    pub fn new(level: usize, index: usize) -> Self {
        Self { level, index }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:{}", self.level, self.index)
    }
}

/// Order in which the label path is emitted by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Top level first (the main task).
    Forward,
    /// Bottom level first (the auxiliary task).
    Reversed,
}

impl Direction {
    /// Taxonomy level predicted at decode step `step`.
    pub fn level_at(self, step: usize, num_levels: usize) -> usize {
        match self {
            Direction::Forward => step,
            Direction::Reversed => num_levels - 1 - step,
        }
    }
}

/// On-disk form of a taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySpec {
    pub levels: Vec<LevelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(String, String)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub name: String,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    levels: Vec<LevelSpec>,
    offsets: Vec<usize>,
    by_name: Vec<HashMap<String, usize>>,
    edges: Option<BTreeSet<(ClassId, ClassId)>>,
}

impl Taxonomy {
    /// Builds a taxonomy from level inventories and optional parent/child edges.
    pub fn new(levels: Vec<LevelSpec>, edges: Option<Vec<(ClassId, ClassId)>>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Taxonomy(format!(
                "at least 2 levels are required, found {}",
                levels.len()
            )));
        }
        let mut by_name = Vec::with_capacity(levels.len());
        let mut offsets = Vec::with_capacity(levels.len() + 1);
        let mut total = 0;
        for (j, level) in levels.iter().enumerate() {
            if level.classes.is_empty() {
                return Err(Error::Taxonomy(format!("level {j} ({}) has no classes", level.name)));
            }
            let mut names = HashMap::with_capacity(level.classes.len());
            for (k, class) in level.classes.iter().enumerate() {
                if names.insert(class.clone(), k).is_some() {
                    return Err(Error::Taxonomy(format!(
                        "duplicate class {class:?} in level {j} ({})",
                        level.name
                    )));
                }
            }
            by_name.push(names);
            offsets.push(total);
            total += level.classes.len();
        }
        offsets.push(total);

        let edges = match edges {
            None => None,
            Some(list) => {
                let mut set = BTreeSet::new();
                for (parent, child) in list {
                    for id in [parent, child] {
                        if id.level >= levels.len() || id.index >= levels[id.level].classes.len() {
                            return Err(Error::Taxonomy(format!("edge references unknown class {id}")));
                        }
                    }
                    if child.level != parent.level + 1 {
                        return Err(Error::Taxonomy(format!(
                            "edge {parent} -> {child} does not connect adjacent levels"
                        )));
                    }
                    set.insert((parent, child));
                }
                for (j, level) in levels.iter().enumerate().skip(1) {
                    for k in 0..level.classes.len() {
                        let child = ClassId::new(j, k);
                        if !set.iter().any(|&(_, c)| c == child) {
                            return Err(Error::Taxonomy(format!(
                                "class {:?} at level {j} has no parent",
                                level.classes[k]
                            )));
                        }
                    }
                }
                Some(set)
            }
        };

        Ok(Self {
            levels,
            offsets,
            by_name,
            edges,
        })
    }

    /// Resolves a parsed file, mapping edge names onto adjacent levels.
    pub fn from_spec(spec: TaxonomySpec) -> Result<Self> {
        let TaxonomySpec { levels, edges } = spec;
        let Some(named) = edges else {
            return Self::new(levels, None);
        };
        // Names are only unique within a level, so each edge is resolved
        // against every adjacent pair and must match exactly one.
        let lookup = |j: usize, name: &str| levels[j].classes.iter().position(|c| c == name);
        let mut resolved = Vec::with_capacity(named.len());
        for (parent, child) in &named {
            let mut hits = Vec::new();
            for j in 0..levels.len().saturating_sub(1) {
                if let (Some(p), Some(c)) = (lookup(j, parent), lookup(j + 1, child)) {
                    hits.push((ClassId::new(j, p), ClassId::new(j + 1, c)));
                }
            }
            match hits.len() {
                1 => resolved.push(hits[0]),
                0 => {
                    return Err(Error::Taxonomy(format!(
                        "edge [{parent:?}, {child:?}] does not connect classes of adjacent levels"
                    )))
                }
                _ => {
                    return Err(Error::Taxonomy(format!(
                        "edge [{parent:?}, {child:?}] is ambiguous across levels"
                    )))
                }
            }
        }
        Self::new(levels, Some(resolved))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: TaxonomySpec =
            toml::from_str(text).map_err(|e| Error::Taxonomy(format!("cannot parse taxonomy: {e}")))?;
        Self::from_spec(spec)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: TaxonomySpec =
            serde_json::from_str(text).map_err(|e| Error::Taxonomy(format!("cannot parse taxonomy: {e}")))?;
        Self::from_spec(spec)
    }

    /// Loads a `.toml` or `.json` taxonomy file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    /// Canonical on-disk form (edges by name, sorted).
    pub fn to_spec(&self) -> TaxonomySpec {
        TaxonomySpec {
            levels: self.levels.clone(),
            edges: self.edges.as_ref().map(|set| {
                set.iter()
                    .map(|(p, c)| (self.class_name(*p).to_owned(), self.class_name(*c).to_owned()))
                    .collect()
            }),
        }
    }

    /// SHA-256 of the canonical JSON form, used to tie checkpoints to a taxonomy.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.to_spec()).expect("taxonomy serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_name(&self, level: usize) -> &str {
        &self.levels[level].name
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.levels[level].classes.len()
    }

    pub fn level_classes(&self, level: usize) -> &[String] {
        &self.levels[level].classes
    }

    /// Size of the union class vocabulary.
    pub fn num_classes(&self) -> usize {
        self.offsets[self.levels.len()]
    }

    /// Global indices occupied by `level`.
    pub fn level_range(&self, level: usize) -> Range<usize> {
        self.offsets[level]..self.offsets[level + 1]
    }

    pub fn global_index(&self, id: ClassId) -> usize {
        self.offsets[id.level] + id.index
    }

    pub fn class_at(&self, global: usize) -> ClassId {
        assert!(global < self.num_classes(), "global class index {global} out of range");
        let level = self.offsets.partition_point(|&o| o <= global) - 1;
        ClassId::new(level, global - self.offsets[level])
    }

    pub fn class_name(&self, id: ClassId) -> &str {
        &self.levels[id.level].classes[id.index]
    }

    pub fn find(&self, level: usize, name: &str) -> Option<ClassId> {
        self.by_name
            .get(level)?
            .get(name)
            .map(|&index| ClassId::new(level, index))
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.level < self.levels.len() && id.index < self.levels[id.level].classes.len()
    }

    pub fn has_edges(&self) -> bool {
        self.edges.is_some()
    }

    pub fn edges(&self) -> Option<&BTreeSet<(ClassId, ClassId)>> {
        self.edges.as_ref()
    }

    pub fn is_edge(&self, parent: ClassId, child: ClassId) -> bool {
        self.edges.as_ref().is_some_and(|set| set.contains(&(parent, child)))
    }

    /// Boolean mask over the union vocabulary selecting the level decoded at `step`.
    pub fn level_mask(&self, step: usize, direction: Direction) -> Result<Vec<bool>> {
        let m = self.num_levels();
        if step >= m {
            return Err(Error::Taxonomy(format!("step {step} out of range for {m} levels")));
        }
        let range = self.level_range(direction.level_at(step, m));
        Ok((0..self.num_classes()).map(|g| range.contains(&g)).collect())
    }

    /// Checks level order and, when edges exist, parent/child consistency.
    pub fn validate_path(&self, classes: &[ClassId]) -> Result<()> {
        if classes.len() != self.num_levels() {
            return Err(Error::Data(format!(
                "label path has {} classes, taxonomy has {} levels",
                classes.len(),
                self.num_levels()
            )));
        }
        for (j, id) in classes.iter().enumerate() {
            if id.level != j || !self.contains(*id) {
                return Err(Error::Data(format!("class {id} is not a valid level-{j} class")));
            }
        }
        if let Some(step) = self.edge_violations(classes).first() {
            return Err(Error::Data(format!(
                "{} -> {} is not a parent/child edge",
                self.class_name(classes[*step - 1]),
                self.class_name(classes[*step])
            )));
        }
        Ok(())
    }

    /// Steps `j` (≥ 1) whose pair `(path[j-1], path[j])` is not an edge.
    /// Always empty when the taxonomy has no edges.
    pub fn edge_violations(&self, classes: &[ClassId]) -> Vec<usize> {
        match &self.edges {
            None => Vec::new(),
            Some(set) => (1..classes.len())
                .filter(|&j| !set.contains(&(classes[j - 1], classes[j])))
                .collect(),
        }
    }

    /// Number of level sequences (one class per level, edges ignored).
    pub fn level_sequence_count(&self) -> usize {
        self.levels.iter().map(|l| l.classes.len()).product()
    }

    /// Every level sequence in lexicographic order of class indices.
    pub fn level_sequences(&self) -> Vec<Vec<ClassId>> {
        let mut out = vec![Vec::new()];
        for (j, level) in self.levels.iter().enumerate() {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..level.classes.len()).map(move |k| {
                        let mut p = prefix.clone();
                        p.push(ClassId::new(j, k));
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// One class per level, top level first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelPath {
    classes: Vec<ClassId>,
}

impl AsRef<[ClassId]> for LabelPath {
    fn as_ref(&self) -> &[ClassId] {
        &self.classes
    }
}

impl LabelPath {
    pub fn new(taxonomy: &Taxonomy, classes: Vec<ClassId>) -> Result<Self> {
        taxonomy.validate_path(&classes)?;
        Ok(Self { classes })
    }

    /// Resolves class names, one per level.
    pub fn from_names<S: AsRef<str>>(taxonomy: &Taxonomy, names: &[S]) -> Result<Self> {
        if names.len() != taxonomy.num_levels() {
            return Err(Error::Data(format!(
                "expected {} labels, found {}",
                taxonomy.num_levels(),
                names.len()
            )));
        }
        let classes = names
            .iter()
            .enumerate()
            .map(|(j, n)| {
                taxonomy
                    .find(j, n.as_ref())
                    .ok_or_else(|| Error::Data(format!("unknown level-{j} class {:?}", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(taxonomy, classes)
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn reversed(&self) -> ReversedLabelPath {
        ReversedLabelPath {
            classes: self.classes.iter().rev().copied().collect(),
        }
    }

    /// Classes in the order the decoder emits them for `direction`.
    pub fn in_order(&self, direction: Direction) -> Vec<ClassId> {
        match direction {
            Direction::Forward => self.classes.clone(),
            Direction::Reversed => self.reversed().classes,
        }
    }

    pub fn names<'a>(&self, taxonomy: &'a Taxonomy) -> Vec<&'a str> {
        self.classes.iter().map(|&c| taxonomy.class_name(c)).collect()
    }
}

/// A label path listed bottom level first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReversedLabelPath {
    classes: Vec<ClassId>,
}

impl ReversedLabelPath {
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn reversed(&self) -> LabelPath {
        LabelPath {
            classes: self.classes.iter().rev().copied().collect(),
        }
    }
}

pub fn reverse_path(path: &LabelPath) -> ReversedLabelPath {
    path.reversed()
}
