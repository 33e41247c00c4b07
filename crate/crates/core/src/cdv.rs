//! Class-definition vectors (CDVs) and the definition-similarity score.
//!
//! A CDV is the mean word vector of a class's tokenized definition. The
//! same tokenizer and table are used for documents, so a document's mean
//! vector can be compared against every CDV by cosine.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, DefinitionStore};
use crate::embeddings::{EmbeddingTable, MeanDenominator, SentenceVector};
use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, Taxonomy};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// How the cosine enters the decoding score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdSign {
    /// Add the cosine similarity: similar classes score higher.
    #[default]
    Similarity,
    /// Add its negation, the literal "distance" reading.
    Negated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdvStore {
    vectors: Vec<Array1<f64>>,
    has_definition: Vec<bool>,
    dim: usize,
}

impl CdvStore {
    /// All-zero store: every class flagged as lacking a definition.
    pub fn zeros(taxonomy: &Taxonomy, dim: usize) -> Self {
        let n = taxonomy.num_classes();
        Self {
            vectors: vec![Array1::zeros(dim); n],
            has_definition: vec![false; n],
            dim,
        }
    }

    /// Store from explicit per-class vectors, indexed globally.
    pub fn from_vectors(vectors: Vec<Array1<f64>>, has_definition: Vec<bool>) -> Result<Self> {
        let dim = vectors.first().map_or(0, |v| v.len());
        if vectors.len() != has_definition.len() || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("CDV vectors and flags disagree in shape".into()));
        }
        Ok(Self {
            vectors,
            has_definition,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// CDV by global class index.
    pub fn vector(&self, global: usize) -> &Array1<f64> {
        &self.vectors[global]
    }

    pub fn has_definition(&self, global: usize) -> bool {
        self.has_definition[global]
    }

    /// Writes `level<TAB>class<TAB>has_definition<TAB>v1 ... vd` rows.
    pub fn to_text(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::new();
        for (g, (v, has)) in self.vectors.iter().zip(&self.has_definition).enumerate() {
            let id = taxonomy.class_at(g);
            write!(out, "{}\t{}\t{}\t", id.level, taxonomy.class_name(id), has).unwrap();
            let values: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, taxonomy: &Taxonomy, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text(taxonomy)).map_err(|e| Error::io(path, e))
    }

    /// Reads the text form back. Every taxonomy class must appear exactly once.
    pub fn parse(text: &str, taxonomy: &Taxonomy, origin: &Path) -> Result<Self> {
        let n = taxonomy.num_classes();
        let mut vectors: Vec<Option<Array1<f64>>> = vec![None; n];
        let mut flags = vec![false; n];
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(4, '\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(origin, line_no, "expected 4 tab-separated fields"));
            }
            let level: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(origin, line_no, "bad level index"))?;
            let id = taxonomy
                .find(level, fields[1])
                .ok_or_else(|| Error::parse(origin, line_no, format!("unknown class {:?}", fields[1])))?;
            let has: bool = fields[2]
                .parse()
                .map_err(|_| Error::parse(origin, line_no, "has_definition must be true or false"))?;
            let values = fields[3]
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::parse(origin, line_no, format!("bad value {s:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if *dim.get_or_insert(values.len()) != values.len() {
                return Err(Error::parse(origin, line_no, "inconsistent vector dimension"));
            }
            let g = taxonomy.global_index(id);
            if vectors[g].replace(Array1::from(values)).is_some() {
                return Err(Error::parse(origin, line_no, "duplicate class"));
            }
            flags[g] = has;
        }
        let vectors = vectors
            .into_iter()
            .enumerate()
            .map(|(g, v)| {
                v.ok_or_else(|| {
                    Error::Data(format!(
                        "CDV file lacks class {:?}",
                        taxonomy.class_name(taxonomy.class_at(g))
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_vectors(vectors, flags)
    }

    pub fn load(taxonomy: &Taxonomy, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, taxonomy, path)
    }
}

/// Mean-pools every class definition. Classes without one get zeros.
pub fn build_cdv_store(
    taxonomy: &Taxonomy,
    definitions: &DefinitionStore,
    table: &EmbeddingTable,
    denominator: MeanDenominator,
) -> CdvStore {
    let n = taxonomy.num_classes();
    let mut vectors = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for g in 0..n {
        let id: ClassId = taxonomy.class_at(g);
        match definitions.get(id) {
            Some(text) => {
                vectors.push(table.mean_pool_with(&tokenize(text), denominator).values);
                flags.push(true);
            }
            None => {
                vectors.push(Array1::zeros(table.dim()));
                flags.push(false);
            }
        }
    }
    CdvStore {
        vectors,
        has_definition: flags,
        dim: table.dim(),
    }
}

/// Cosine of the angle between `a` and `b`; 0 when either is (near) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `lambda * cos(CDV(candidate), z)`, with the sign convention applied.
pub fn cd_score_signed(store: &CdvStore, candidate: usize, doc: &SentenceVector, lambda: f64, sign: CdSign) -> f64 {
    let cos = cosine_similarity(
        store.vector(candidate).as_slice().expect("contiguous"),
        doc.values.as_slice().expect("contiguous"),
    );
    match sign {
        CdSign::Similarity => lambda * cos,
        CdSign::Negated => -(lambda * cos),
    }
}

pub fn cd_score(
    store: &CdvStore,
    taxonomy: &Taxonomy,
    candidate: ClassId,
    doc: &SentenceVector,
    lambda: f64,
) -> Result<f64> {
    if doc.values.len() != store.dim() {
        return Err(Error::Shape(format!(
            "document vector has dimension {}, CDVs have {}",
            doc.values.len(),
            store.dim()
        )));
    }
    Ok(cd_score_signed(
        store,
        taxonomy.global_index(candidate),
        doc,
        lambda,
        CdSign::Similarity,
    ))
}
