//! Documents, tokenization, dataset splits and class definitions.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, LabelPath, Taxonomy};

/// Lowercases, splits on whitespace and emits every punctuation or symbol
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: LabelPath,
}

/// A dataset row that failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub documents: Vec<Document>,
    pub rejections: Vec<Rejection>,
}

impl LoadedDataset {
    /// Fails on the first rejected row.
    pub fn into_documents(self, path: &Path) -> Result<Vec<Document>> {
        match self.rejections.into_iter().next() {
            Some(r) => Err(Error::parse(path, r.line, r.reason)),
            None => Ok(self.documents),
        }
    }
}

/// Parses `id<TAB>text<TAB>label_1<TAB>...<TAB>label_M` rows.
///
/// Bad rows are collected as rejections with their 1-based line number.
/// Blank lines are skipped.
pub fn parse_dataset(text: &str, taxonomy: &Taxonomy) -> LoadedDataset {
    let mut out = LoadedDataset::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_row(line, taxonomy) {
            Ok(doc) => {
                if !seen.insert(doc.id.clone()) {
                    out.rejections.push(Rejection {
                        line: line_no,
                        reason: format!("duplicate document id {:?}", doc.id),
                    });
                } else {
                    out.documents.push(doc);
                }
            }
            Err(reason) => out.rejections.push(Rejection { line: line_no, reason }),
        }
    }
    out
}

fn parse_row(line: &str, taxonomy: &Taxonomy) -> std::result::Result<Document, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let m = taxonomy.num_levels();
    if fields.len() != m + 2 {
        return Err(format!(
            "expected id, text and {m} label columns, found {} columns",
            fields.len()
        ));
    }
    let tokens = tokenize(fields[1]);
    if tokens.is_empty() {
        return Err("empty text".into());
    }
    let labels = LabelPath::from_names(taxonomy, &fields[2..]).map_err(|e| match e {
        Error::Data(msg) => msg,
        other => other.to_string(),
    })?;
    Ok(Document {
        id: fields[0].to_owned(),
        tokens,
        labels,
    })
}

pub fn load_dataset(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_dataset(&text, taxonomy))
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub test: Vec<Document>,
}

/// Shuffles with `seed` and cuts into train/validation/test by `ratios`.
///
/// Sizes use largest-remainder rounding (ties favour the earlier split), so
/// every split is within one document of its exact share.
pub fn split(documents: Vec<Document>, ratios: [f64; 3], seed: u64) -> Result<SplitDataset> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let n = documents.len();
    let [n_train, n_val, n_test] = apportion(n, ratios);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "split of {n} documents with ratios {ratios:?} leaves an empty split ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Document>> = documents.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Document> {
        idx.iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let validation = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(SplitDataset {
        train,
        validation,
        test,
    })
}

fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut sizes = exact.map(|x| (x + 1e-9).floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| {
        let frac = |k: usize| exact[k] - sizes[k] as f64;
        frac(j).total_cmp(&frac(i)).then(i.cmp(&j))
    });
    let assigned: usize = sizes.iter().sum();
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        sizes[k] += 1;
    }
    sizes
}

/// Raw definition text per class.
#[derive(Debug, Clone, Default)]
pub struct DefinitionStore {
    entries: BTreeMap<ClassId, String>,
    /// Classes with no definition, in taxonomy order.
    pub missing: Vec<ClassId>,
    /// Human-readable notes about duplicates and unknown classes.
    pub warnings: Vec<String>,
}

impl DefinitionStore {
    pub fn get(&self, id: ClassId) -> Option<&str> {
        self.entries.get(&id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds a store from in-memory entries.
    pub fn from_entries(taxonomy: &Taxonomy, entries: impl IntoIterator<Item = (ClassId, String)>) -> Self {
        let entries: BTreeMap<_, _> = entries.into_iter().collect();
        let missing = all_classes(taxonomy).filter(|c| !entries.contains_key(c)).collect();
        Self {
            entries,
            missing,
            warnings: Vec::new(),
        }
    }
}

fn all_classes(taxonomy: &Taxonomy) -> impl Iterator<Item = ClassId> + '_ {
    (0..taxonomy.num_classes()).map(|g| taxonomy.class_at(g))
}

/// Parses `level_index<TAB>class_name<TAB>definition` rows.
///
/// Duplicate entries keep the last occurrence. Unknown classes are skipped.
/// Both cases are recorded in `warnings`.
pub fn parse_definitions(text: &str, taxonomy: &Taxonomy, origin: &Path) -> Result<DefinitionStore> {
    let mut entries = BTreeMap::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(level), Some(name), Some(definition)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(origin, line_no, "expected level<TAB>class<TAB>definition"));
        };
        let level: usize = level
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, line_no, format!("level index {level:?} is not an integer")))?;
        let Some(id) = taxonomy.find(level, name) else {
            let msg = format!("line {line_no}: no class {name:?} at level {level}; ignored");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        };
        if entries.insert(id, definition.to_owned()).is_some() {
            let msg = format!("line {line_no}: duplicate definition for {name:?}; keeping the later one");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut store = DefinitionStore::from_entries(taxonomy, entries);
    store.warnings = warnings;
    for id in &store.missing {
        log::warn!(
            "no definition for level-{} class {:?}",
            id.level,
            taxonomy.class_name(*id)
        );
    }
    Ok(store)
}

pub fn load_definitions(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<DefinitionStore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_definitions(&text, taxonomy, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::LevelSpec;
    use proptest::prelude::*;

    fn toy() -> Taxonomy {
        Taxonomy::new(
            vec![
                LevelSpec {
                    name: "top".into(),
                    classes: (0..4).map(|k| format!("T{k}")).collect(),
                },
                LevelSpec {
                    name: "leaf".into(),
                    classes: (0..12).map(|k| format!("L{k}")).collect(),
                },
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(
            tokenize("Deep Learning, today."),
            ["deep", "learning", ",", "today", "."]
        );
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \t\n").is_empty());
        assert_eq!(tokenize("ÉCOLE  Été"), ["école", "été"]);
    }

    proptest! {
        #[test]
        fn tokenizer_idempotent(text in "\\PC{0,40}") {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }

    #[test]
    fn dataset_rows() {
        let t = toy();
        let text = "a\tSome text here\tT0\tL3\n\
                    b\tmore\tT1\tL2\tL3\n\
                    c\t   \tT1\tL2\n\
                    d\tok\tT9\tL2\n\
                    \n\
                    e\tfine words\tT3\tL11\n";
        let loaded = parse_dataset(text, &t);
        let ids: Vec<_> = loaded.documents.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "e"]);
        let lines: Vec<_> = loaded.rejections.iter().map(|r| r.line).collect();
        assert_eq!(lines, [2, 3, 4]);
        assert!(loaded.rejections[0].reason.contains("columns"));
        assert!(loaded.rejections[1].reason.contains("empty"));
        assert!(loaded.rejections[2].reason.contains("unknown"));
        assert_eq!(loaded.documents[0].tokens, ["some", "text", "here"]);
    }

    #[test]
    fn three_level_rows_accepted() {
        let t = Taxonomy::new(
            (0..3)
                .map(|j| LevelSpec {
                    name: format!("l{j}"),
                    classes: vec![format!("x{j}")],
                })
                .collect(),
            None,
        )
        .unwrap();
        let loaded = parse_dataset("1\ttext\tx0\tx1\tx2\n", &t);
        assert_eq!(loaded.documents.len(), 1);
        assert!(loaded.rejections.is_empty());
    }

    fn docs(n: usize) -> Vec<Document> {
        let t = toy();
        (0..n)
            .map(|i| Document {
                id: i.to_string(),
                tokens: vec!["w".into()],
                labels: LabelPath::from_names(&t, &["T0", "L0"]).unwrap(),
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split(docs(100), [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        let again = split(docs(100), [0.8, 0.1, 0.1], 7).unwrap();
        let ids = |v: &[Document]| v.iter().map(|d| d.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&s.train), ids(&again.train));
        assert_eq!(ids(&s.test), ids(&again.test));
        assert!(split(docs(10), [0.98, 0.01, 0.01], 7).is_err());
        assert!(split(docs(10), [0.5, 0.1, 0.1], 7).is_err());
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 3usize..200, a in 0.1f64..0.8, seed in any::<u64>()) {
            let rest = 1.0 - a;
            let ratios = [a, rest / 2.0, rest / 2.0];
            if let Ok(s) = split(docs(n), ratios, seed) {
                let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test)
                    .map(|d| d.id.parse().unwrap()).collect();
                all.sort();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                for (len, r) in [(s.train.len(), ratios[0]), (s.validation.len(), ratios[1]), (s.test.len(), ratios[2])] {
                    prop_assert!((len as f64 - r * n as f64).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn definitions_coverage() {
        let t = toy();
        let mut text = String::new();
        for k in 0..4 {
            text += &format!("0\tT{k}\tthe top class {k}\n");
        }
        for k in 0..12 {
            text += &format!("1\tL{k}\tthe leaf class {k}\n");
        }
        let store = parse_definitions(&text, &t, Path::new("defs.tsv")).unwrap();
        assert_eq!(store.len(), 16);
        assert!(store.missing.is_empty());

        let partial: String = text
            .lines()
            .filter(|l| !l.contains("L5"))
            .map(|l| format!("{l}\n"))
            .collect();
        let store = parse_definitions(&partial, &t, Path::new("defs.tsv")).unwrap();
        assert_eq!(store.len(), 15);
        assert_eq!(store.missing, [ClassId::new(1, 5)]);

        let dup = format!("{text}1\tL0\tsecond wording\n");
        let store = parse_definitions(&dup, &t, Path::new("defs.tsv")).unwrap();
        assert_eq!(store.get(ClassId::new(1, 0)), Some("second wording"));
        assert_eq!(store.warnings.len(), 1);

        let err = parse_definitions("zero\tT0\tdef\n", &t, Path::new("defs.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(parse_definitions("0\tT0\n", &t, Path::new("defs.tsv")).is_err());
    }
}
