use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use seqhtc::cdv::{build_cdv_store, CdvStore};
use seqhtc::corpus::{load_dataset, load_definitions, split, tokenize, Document, Rejection, SplitDataset};
use seqhtc::decode::{decode_tokens, DecodeConfig, DecodeMode, DecodeResources, PredictionRecord};
use seqhtc::embeddings::{EmbeddingTable, MeanDenominator};
use seqhtc::metrics::{evaluate, EvalReport};
use seqhtc::neural::{Checkpoint, ModelParams};
use seqhtc::taxonomy::Taxonomy;
use seqhtc::training::{derive_seed, fit, initial_model, TrainContext};
use seqhtc::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};

/// Seed stream for the train/validation/test shuffle.
const STREAM_SPLIT: u64 = 1 << 32;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CDV_FILE: &str = "cdv.tsv";

pub fn mode_name(mode: DecodeMode) -> &'static str {
    match mode {
        DecodeMode::Greedy => "greedy",
        DecodeMode::Beam => "beam",
        DecodeMode::AdaptedBeam => "adapted_beam",
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn load_table(config: &RunConfig) -> Result<EmbeddingTable> {
    EmbeddingTable::load(&config.paths.embeddings, config.embeddings.limit)
}

fn strict(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<Document>> {
    load_dataset(path, taxonomy)?.into_documents(path)
}

fn load_splits(config: &RunConfig, taxonomy: &Taxonomy) -> Result<SplitDataset> {
    match config.data_source()? {
        DataSource::Single(path) => split(
            strict(path, taxonomy)?,
            config.split.ratios,
            derive_seed(config.seed, STREAM_SPLIT),
        ),
        DataSource::Splits {
            train,
            validation,
            test,
        } => Ok(SplitDataset {
            train: strict(train, taxonomy)?,
            validation: strict(validation, taxonomy)?,
            test: strict(test, taxonomy)?,
        }),
    }
}

/// Loads `paths.cdv` when it exists, otherwise builds from the definitions.
fn resolve_cdv(config: &RunConfig, taxonomy: &Taxonomy, table: &EmbeddingTable) -> Result<Option<CdvStore>> {
    if let Some(path) = config.paths.cdv.as_ref().filter(|p| p.is_file()) {
        let store = CdvStore::load(taxonomy, path)?;
        if store.dim() != table.dim() {
            return Err(Error::Shape(format!(
                "{} holds {}-dimensional vectors, the embeddings are {}-dimensional",
                path.display(),
                store.dim(),
                table.dim()
            )));
        }
        return Ok(Some(store));
    }
    match &config.paths.definitions {
        Some(path) => {
            let defs = load_definitions(path, taxonomy)?;
            Ok(Some(build_cdv_store(
                taxonomy,
                &defs,
                table,
                config.embeddings.mean_denominator,
            )))
        }
        None => Ok(None),
    }
}

fn require_cdv(cdv: Option<CdvStore>, why: &str) -> Result<CdvStore> {
    cdv.ok_or_else(|| Error::Config(format!("{why} needs paths.definitions or paths.cdv")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileReport {
    pub path: PathBuf,
    pub documents: usize,
    pub rejections: Vec<(usize, String)>,
    pub tokens: usize,
    pub oov_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataReport {
    pub files: Vec<FileReport>,
    pub definitions: Option<usize>,
    /// `level/class` names without a definition.
    pub missing_definitions: Vec<String>,
    pub definition_warnings: Vec<String>,
}

impl DataReport {
    pub fn rejection_count(&self) -> usize {
        self.files.iter().map(|f| f.rejections.len()).sum()
    }

    pub fn oov_rate(&self) -> f64 {
        let total: usize = self.files.iter().map(|f| f.tokens).sum();
        let oov: usize = self.files.iter().map(|f| f.oov_tokens).sum();
        if total == 0 {
            0.0
        } else {
            oov as f64 / total as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in &self.files {
            writeln!(
                out,
                "{}: {} documents, {} rejected, {} of {} tokens out of vocabulary",
                f.path.display(),
                f.documents,
                f.rejections.len(),
                f.oov_tokens,
                f.tokens
            )
            .unwrap();
            for (line, reason) in &f.rejections {
                writeln!(out, "  line {line}: {reason}").unwrap();
            }
        }
        match self.definitions {
            Some(n) => {
                writeln!(
                    out,
                    "definitions: {n} classes covered, {} missing",
                    self.missing_definitions.len()
                )
                .unwrap();
                for name in &self.missing_definitions {
                    writeln!(out, "  missing: {name}").unwrap();
                }
                for w in &self.definition_warnings {
                    writeln!(out, "  warning: {w}").unwrap();
                }
            }
            None => writeln!(out, "definitions: none configured").unwrap(),
        }
        writeln!(out, "oov rate: {:.4}", self.oov_rate()).unwrap();
        out
    }
}

/// Checks every input file without stopping at the first bad row.
pub fn data_validate(config: &RunConfig) -> Result<DataReport> {
    let taxonomy = Taxonomy::load(&config.paths.taxonomy)?;
    let table = load_table(config)?;
    let paths: Vec<&Path> = match config.data_source()? {
        DataSource::Single(p) => vec![p],
        DataSource::Splits {
            train,
            validation,
            test,
        } => vec![train, validation, test],
    };
    let mut files = Vec::new();
    for path in paths {
        let loaded = load_dataset(path, &taxonomy)?;
        let tokens = loaded.documents.iter().map(|d| d.tokens.len()).sum();
        let oov_tokens = loaded
            .documents
            .iter()
            .flat_map(|d| &d.tokens)
            .filter(|t| !table.contains(t))
            .count();
        files.push(FileReport {
            path: path.to_owned(),
            documents: loaded.documents.len(),
            rejections: loaded
                .rejections
                .into_iter()
                .map(|Rejection { line, reason }| (line, reason))
                .collect(),
            tokens,
            oov_tokens,
        });
    }
    let (definitions, missing_definitions, definition_warnings) = match &config.paths.definitions {
        Some(path) => {
            let defs = load_definitions(path, &taxonomy)?;
            let missing = defs
                .missing
                .iter()
                .map(|&c| format!("{}/{}", taxonomy.level_name(c.level), taxonomy.class_name(c)))
                .collect();
            (Some(defs.len()), missing, defs.warnings)
        }
        None => (None, Vec::new(), Vec::new()),
    };
    Ok(DataReport {
        files,
        definitions,
        missing_definitions,
        definition_warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdvReport {
    pub path: PathBuf,
    pub classes: usize,
    pub missing: Vec<String>,
}

/// Builds class definition vectors and writes them to `paths.cdv`, or
/// `cdv.tsv` in the output directory.
pub fn cdv_build(config: &RunConfig) -> Result<CdvReport> {
    let taxonomy = Taxonomy::load(&config.paths.taxonomy)?;
    let table = load_table(config)?;
    let defs_path = config
        .paths
        .definitions
        .as_ref()
        .ok_or_else(|| Error::Config("cdv-build needs paths.definitions".into()))?;
    let defs = load_definitions(defs_path, &taxonomy)?;
    let store = build_cdv_store(&taxonomy, &defs, &table, config.embeddings.mean_denominator);
    let path = config
        .paths
        .cdv
        .clone()
        .unwrap_or_else(|| config.paths.output.join(CDV_FILE));
    write_file(&path, &store.to_text(&taxonomy))?;
    Ok(CdvReport {
        path,
        classes: store.len(),
        missing: defs
            .missing
            .iter()
            .map(|&c| taxonomy.class_name(c).to_owned())
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_accuracy: Option<f64>,
    pub epochs: usize,
}

/// Trains on the train split, selecting by validation path accuracy.
/// Writes the best checkpoint, the epoch log and the effective config.
pub fn train(config: &RunConfig) -> Result<TrainReport> {
    let taxonomy = Taxonomy::load(&config.paths.taxonomy)?;
    let table = load_table(config)?;
    let data = load_splits(config, &taxonomy)?;
    let cdv = if config.train.pnc_enabled {
        Some(require_cdv(resolve_cdv(config, &taxonomy, &table)?, "pnc_enabled")?)
    } else {
        None
    };
    let ctx = TrainContext {
        taxonomy: &taxonomy,
        table: &table,
        cdv: cdv.as_ref(),
    };
    log::info!(
        "training on {} documents, validating on {}",
        data.train.len(),
        data.validation.len()
    );
    let initial = initial_model(&config.train, taxonomy.num_classes());
    let outcome = fit(initial, &data.train, &data.validation, &ctx, &config.train)?;
    let out = &config.paths.output;
    let metadata = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_val_path_accuracy": outcome.best_accuracy,
        "embeddings_checksum": table.checksum(),
        "config": config,
    });
    let checkpoint = out.join(CHECKPOINT_FILE);
    let log = out.join(TRAIN_LOG_FILE);
    write_file(
        &checkpoint,
        &Checkpoint::new(&outcome.best, taxonomy.content_hash(), metadata).to_json(),
    )?;
    write_file(&log, &outcome.log_jsonl())?;
    write_file(&out.join("config.toml"), &config.to_toml())?;
    Ok(TrainReport {
        checkpoint,
        log,
        best_epoch: outcome.best_epoch,
        best_accuracy: outcome.best_accuracy,
        epochs: outcome.log.len(),
    })
}

/// Frozen state shared by `eval` and `predict`.
struct Inference {
    taxonomy: Taxonomy,
    table: EmbeddingTable,
    params: ModelParams,
    cdv: Option<CdvStore>,
    decode: DecodeConfig,
    mean_denominator: MeanDenominator,
}

impl Inference {
    fn load(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Self> {
        let taxonomy = Taxonomy::load(&config.paths.taxonomy)?;
        let table = load_table(config)?;
        let default_path = config.paths.output.join(CHECKPOINT_FILE);
        let ckpt = Checkpoint::load(checkpoint.unwrap_or(&default_path))?;
        ckpt.check_taxonomy(&taxonomy.content_hash())?;
        if ckpt.metadata.get("embeddings_checksum").and_then(|v| v.as_str()) != Some(table.checksum().as_str()) {
            log::warn!("embedding table differs from the one used in training");
        }
        let params = ckpt.to_params()?;
        if params.config.word_dim != table.dim() {
            return Err(Error::Shape(format!(
                "model expects {}-dimensional word vectors, table has {}",
                params.config.word_dim,
                table.dim()
            )));
        }
        let mut decode = config.decode.clone();
        if decode.pnc_enabled != params.config.pnc {
            log::info!("decode.pnc_enabled follows the checkpoint ({})", params.config.pnc);
        }
        decode.pnc_enabled = params.config.pnc;
        let needs_cdv = decode.pnc_enabled || decode.mode == DecodeMode::AdaptedBeam;
        let cdv = if needs_cdv {
            Some(require_cdv(
                resolve_cdv(config, &taxonomy, &table)?,
                "this model and decode mode",
            )?)
        } else {
            None
        };
        Ok(Self {
            taxonomy,
            table,
            params,
            cdv,
            decode,
            mean_denominator: config.embeddings.mean_denominator,
        })
    }

    fn decode_all<'d>(
        &self,
        docs: impl IndexedParallelIterator<Item = (&'d str, &'d [String])>,
    ) -> Result<Vec<PredictionRecord>> {
        let res = DecodeResources {
            params: &self.params,
            taxonomy: &self.taxonomy,
            table: &self.table,
            cdv: self.cdv.as_ref(),
            mean_denominator: self.mean_denominator,
        };
        docs.map(|(id, tokens)| {
            let hyps = decode_tokens(&res, tokens, &self.decode)?;
            let best = hyps
                .first()
                .ok_or_else(|| Error::Numeric("decoder returned no hypothesis".into()))?;
            Ok(PredictionRecord::new(id, best, &self.taxonomy, self.decode.mode))
        })
        .collect()
    }
}

/// A prediction on a labelled document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPrediction {
    #[serde(flatten)]
    pub prediction: PredictionRecord,
    pub gold: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub mode: DecodeMode,
    pub report: EvalReport,
    pub text: String,
    pub predictions: Vec<EvalPrediction>,
    pub report_path: PathBuf,
    pub summary_path: PathBuf,
    pub predictions_path: PathBuf,
}

/// Decodes the test split and scores it. Outputs are named after the
/// decode mode, so several modes can share one output directory.
pub fn eval(config: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    let inf = Inference::load(config, checkpoint)?;
    let test = load_splits(config, &inf.taxonomy)?.test;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let records = inf.decode_all(test.par_iter().map(|d| (d.id.as_str(), d.tokens.as_slice())))?;
    let predicted: Vec<Vec<_>> = records
        .iter()
        .map(|r| {
            r.path
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    inf.taxonomy
                        .find(j, name)
                        .expect("decoded names come from the taxonomy")
                })
                .collect()
        })
        .collect();
    let gold: Vec<_> = test.iter().map(|d| d.labels.clone()).collect();
    let report = evaluate(&inf.taxonomy, &predicted, &gold)?;

    let mode = inf.decode.mode;
    let name = mode_name(mode);
    let mut text = format!("# mode {name}\n");
    text.push_str(&report.to_text(&inf.taxonomy));
    let mut summary = report.summary_record();
    summary["mode"] = name.into();
    summary["decode"] = serde_json::to_value(&inf.decode).expect("config serializes");
    let predictions: Vec<EvalPrediction> = records
        .into_iter()
        .zip(&test)
        .map(|(prediction, doc)| EvalPrediction {
            prediction,
            gold: doc.labels.names(&inf.taxonomy).into_iter().map(str::to_owned).collect(),
        })
        .collect();

    let out = &config.paths.output;
    let report_path = out.join(format!("eval-{name}.txt"));
    let summary_path = out.join(format!("eval-{name}.jsonl"));
    let predictions_path = out.join(format!("eval-{name}-predictions.jsonl"));
    write_file(&report_path, &text)?;
    write_file(
        &summary_path,
        &(serde_json::to_string(&summary).expect("summary serializes") + "\n"),
    )?;
    write_file(&predictions_path, &to_jsonl(&predictions))?;
    Ok(EvalOutcome {
        mode,
        report,
        text,
        predictions,
        report_path,
        summary_path,
        predictions_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutcome {
    pub records: Vec<PredictionRecord>,
    /// 1-based line numbers with no usable text.
    pub rejections: Vec<(usize, String)>,
    pub path: PathBuf,
}

/// A 1-based line number and the reason it was skipped.
pub type LineRejection = (usize, String);

/// Parses prediction input: `id<TAB>text[<TAB>...]` or bare text, whose id
/// becomes `line<N>`. Blank lines are skipped.
pub fn parse_predict_input(text: &str) -> (Vec<(String, Vec<String>)>, Vec<LineRejection>) {
    let mut docs = Vec::new();
    let mut rejections = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = match line.split_once('\t') {
            Some((id, rest)) => (id.to_owned(), rest.split('\t').next().unwrap_or("")),
            None => (format!("line{line_no}"), line),
        };
        let tokens = tokenize(body);
        if tokens.is_empty() {
            rejections.push((line_no, format!("document {id:?} has empty text")));
        } else {
            docs.push((id, tokens));
        }
    }
    (docs, rejections)
}

/// Labels every document in `input`, writing JSON lines to `output`
/// (default `predictions.jsonl` in the output directory).
pub fn predict(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    input: &Path,
    output: Option<&Path>,
) -> Result<PredictOutcome> {
    let inf = Inference::load(config, checkpoint)?;
    let text = fs::read_to_string(input).map_err(|e| Error::Io {
        path: input.into(),
        source: e,
    })?;
    let (docs, rejections) = parse_predict_input(&text);
    for (line, reason) in &rejections {
        log::warn!("{}:{line}: {reason}", input.display());
    }
    let records = inf.decode_all(docs.par_iter().map(|(id, tokens)| (id.as_str(), tokens.as_slice())))?;
    let path = output.map_or_else(|| config.paths.output.join("predictions.jsonl"), Path::to_owned);
    write_file(&path, &to_jsonl(&records))?;
    Ok(PredictOutcome {
        records,
        rejections,
        path,
    })
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Taxonomy(_)
        | Error::Data(_)
        | Error::Shape(_)
        | Error::Checkpoint(_) => 3,
    }
}
