//! Frozen word vectors in the common text format.
//!
//! ```text
//! 5 4
//! science 0.1 0.2 0.3 0.4
//! ...
//! ```
//!
//! The `count dim` header is optional. Values are held as `f64`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Denominator used when averaging token vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanDenominator {
    /// Every token counts, out-of-vocabulary ones contribute zeros.
    #[default]
    All,
    /// Only in-vocabulary tokens count.
    Known,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vocab: HashMap<String, usize>,
    tokens: Vec<String>,
    matrix: Array2<f64>,
}

/// Mean of a token sequence's vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVector {
    pub values: Array1<f64>,
    pub source_token_count: usize,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` rows. Later duplicates are ignored.
    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut vocab = HashMap::new();
        let mut tokens = Vec::new();
        let mut data = Vec::new();
        for (token, vector) in rows {
            let token = token.into();
            if vector.len() != dim {
                return Err(Error::Shape(format!(
                    "vector for {token:?} has {} components, expected {dim}",
                    vector.len()
                )));
            }
            if vocab.contains_key(&token) {
                log::warn!("duplicate word vector for {token:?}; keeping the first");
                continue;
            }
            vocab.insert(token.clone(), tokens.len());
            tokens.push(token);
            data.extend(vector);
        }
        let matrix = Array2::from_shape_vec((tokens.len(), dim), data).expect("row-major data");
        Ok(Self { vocab, tokens, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(token)
    }

    pub fn row(&self, token: &str) -> Option<ArrayView1<'_, f64>> {
        self.vocab.get(token).map(|&i| self.matrix.row(i))
    }

    /// Stored vector, or zeros for out-of-vocabulary tokens.
    pub fn lookup(&self, token: &str) -> Array1<f64> {
        match self.row(token) {
            Some(row) => row.to_owned(),
            None => Array1::zeros(self.dim()),
        }
    }

    /// One vector per token, OOV tokens as zeros.
    pub fn embed(&self, tokens: &[String]) -> Vec<Array1<f64>> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn mean_pool<S: AsRef<str>>(&self, tokens: &[S]) -> SentenceVector {
        self.mean_pool_with(tokens, MeanDenominator::All)
    }

    pub fn mean_pool_with<S: AsRef<str>>(&self, tokens: &[S], denominator: MeanDenominator) -> SentenceVector {
        let mut sum = Array1::zeros(self.dim());
        let mut known = 0usize;
        for token in tokens {
            if let Some(row) = self.row(token.as_ref()) {
                sum += &row;
                known += 1;
            }
        }
        let count = match denominator {
            MeanDenominator::All => tokens.len(),
            MeanDenominator::Known => known,
        };
        if count > 0 {
            sum /= count as f64;
        }
        SentenceVector {
            values: sum,
            source_token_count: tokens.len(),
        }
    }

    /// SHA-256 over tokens and the bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (token, row) in self.tokens.iter().zip(self.matrix.rows()) {
            hasher.update(token.as_bytes());
            hasher.update([0u8]);
            for v in row {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Text form with a `count dim` header. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim());
        for (token, row) in self.tokens.iter().zip(self.matrix.rows()) {
            out.push_str(token);
            for v in row {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses the text format from any reader. `limit` caps the number of
    /// rows kept (the first ones in file order).
    pub fn read_from(reader: impl BufRead, limit: Option<usize>, origin: &Path) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut header_count: Option<usize> = None;
        let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(origin, e))?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
            if line_no == 1 && fields.len() == 2 {
                if let (Ok(count), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    header_count = Some(count);
                    dim = Some(d);
                    continue;
                }
            }
            if limit.is_some_and(|l| rows.len() >= l) {
                break;
            }
            let token = fields[0];
            let values = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse(origin, line_no, format!("component {f:?} is not a finite number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected || expected == 0 {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("{:?} has {} components, expected {expected}", token, values.len()),
                ));
            }
            rows.push((token.to_owned(), values));
        }
        if let (Some(count), None) = (header_count, limit) {
            if count != rows.len() {
                log::warn!(
                    "{}: header announces {count} vectors, found {}",
                    origin.display(),
                    rows.len()
                );
            }
        }
        Self::from_rows(dim.unwrap_or(0), rows)
    }

    pub fn load(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), limit, path)
    }
}

pub fn load_vectors(path: impl AsRef<Path>, limit: Option<usize>) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path, limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIVE: &str = "5 4\n\
        science 0.1 0.2 0.3 0.4\n\
        deep 1 0 0 0\n\
        learning 0 1 0 0\n\
        , 0 0 1 0\n\
        today -1.5 2.25 1e-3 7\n";

    fn parse(text: &str, limit: Option<usize>) -> Result<EmbeddingTable> {
        EmbeddingTable::read_from(text.as_bytes(), limit, Path::new("vec.txt"))
    }

    #[test]
    fn parses_header_and_rows() {
        let t = parse(FIVE, None).unwrap();
        assert_eq!((t.len(), t.dim()), (5, 4));
        assert_eq!(t.lookup("science").to_vec(), vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(t.lookup("unknown").to_vec(), vec![0.0; 4]);
        assert_eq!(t.lookup("today"), t.lookup("today"));
    }

    #[test]
    fn headerless_infers_dimension() {
        let t = parse("a 1 2 3\nb 4 5 6\n", None).unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
    }

    #[test]
    fn inconsistent_dimension_names_line() {
        let err = parse("2 4\na 1 2 3 4\nb 1 2 3\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse("a 1 2 x\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn limit_keeps_first_rows() {
        let t = parse(FIVE, Some(2)).unwrap();
        assert_eq!(t.tokens(), ["science", "deep"]);
    }

    #[test]
    fn mean_pool_examples() {
        let t = EmbeddingTable::from_rows(2, [("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]).unwrap();
        let v = t.mean_pool(&["x", "y"]);
        assert_eq!(v.values.to_vec(), vec![0.5, 0.5]);
        assert_eq!(v.source_token_count, 2);

        let oov = t.mean_pool(&["p", "q", "r"]);
        assert_eq!(oov.values.to_vec(), vec![0.0, 0.0]);
        assert_eq!(oov.source_token_count, 3);

        let empty = t.mean_pool::<&str>(&[]);
        assert_eq!(empty.values.to_vec(), vec![0.0, 0.0]);
        assert_eq!(empty.source_token_count, 0);

        assert_eq!(t.mean_pool(&["x", "zz"]).values.to_vec(), vec![0.5, 0.0]);
        let known = t.mean_pool_with(&["x", "zz"], MeanDenominator::Known);
        assert_eq!(known.values.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let t = parse(FIVE, None).unwrap();
        let back = parse(&t.to_text(), None).unwrap();
        assert_eq!(t.tokens(), back.tokens());
        assert_eq!(t.checksum(), back.checksum());
    }

    proptest! {
        #[test]
        fn mean_pool_order_free_and_duplication_stable(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..6),
            picks in prop::collection::vec(0usize..8, 1..8),
        ) {
            let table = EmbeddingTable::from_rows(
                3,
                rows.iter().enumerate().map(|(i, r)| (format!("t{i}"), r.clone())),
            ).unwrap();
            let tokens: Vec<String> = picks.iter().map(|p| format!("t{p}")).collect();
            let mut reversed = tokens.clone();
            reversed.reverse();
            let a = table.mean_pool(&tokens).values;
            let b = table.mean_pool(&reversed).values;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let single = table.mean_pool(&tokens[..1]).values;
            let doubled = table.mean_pool(&[tokens[0].clone(), tokens[0].clone()]).values;
            for (x, y) in single.iter().zip(&doubled) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn write_read_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 2), 1..6)) {
            let table = EmbeddingTable::from_rows(
                2,
                rows.iter().enumerate().map(|(i, r)| (format!("w{i}"), r.clone())),
            ).unwrap();
            let back = EmbeddingTable::read_from(table.to_text().as_bytes(), None, Path::new("p")).unwrap();
            prop_assert_eq!(table.checksum(), back.checksum());
        }
    }
}
