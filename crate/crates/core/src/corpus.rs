//! Data model, validation, ingestion, and persistence for labeled pools,
//! query sets, and predictions.
//!
//! On-disk formats:
//! - examples / queries / schema files: one JSON record per line, UTF-8;
//! - embedding sidecar: magic `FADSEMB1`, u32-LE row count, u32-LE dim,
//!   then row-major f32-LE values;
//! - predictions: one JSON record per line, round-trips byte-exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::vectorspace::EmbeddingMatrix;

const SIDECAR_MAGIC: &[u8; 8] = b"FADSEMB1";

/// Category value used for unknown/undisclosed attribute values when the
/// schema allows them. Participates in ratios, MaxDiff, and stratification
/// cells like any declared category.
pub const UNKNOWN_CATEGORY: &str = "Unknown";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("record {id}: attribute {attribute} has undeclared category {value:?}")]
    UnknownCategory {
        id: String,
        attribute: String,
        value: String,
    },
    #[error("record {id}: attribute {attribute} missing")]
    MissingAttribute { id: String, attribute: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate id {id}")]
    DuplicateId { id: String },
    #[error("record {id}: embedding index {index} out of range (matrix has {rows} rows)")]
    EmbeddingIndexOutOfRange { id: String, index: usize, rows: usize },
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("embedding matrix: {0}")]
    Matrix(#[from] crate::vectorspace::MatrixError),
    #[error("bad sidecar file {path}: {detail}")]
    BadSidecar { path: String, detail: String },
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::IoFailure {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One sensitive attribute: a name, its declared categories, and whether the
/// literal `"Unknown"` is accepted as a first-class extra category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub categories: Vec<String>,
    #[serde(default)]
    pub allow_unknown: bool,
}

impl AttributeDef {
    /// Declared categories plus `"Unknown"` when allowed and not already
    /// declared. This is the category set used everywhere: counts, ratios,
    /// stratification cells, and MaxDiff.
    pub fn effective_categories(&self) -> Vec<String> {
        let mut cats = self.categories.clone();
        if self.allow_unknown && !cats.iter().any(|c| c == UNKNOWN_CATEGORY) {
            cats.push(UNKNOWN_CATEGORY.to_string());
        }
        cats
    }

    pub fn accepts(&self, value: &str) -> bool {
        self.categories.iter().any(|c| c == value)
            || (self.allow_unknown && value == UNKNOWN_CATEGORY)
    }
}

/// Ordered list of sensitive attributes and their category sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveAttributeSchema {
    pub attributes: Vec<AttributeDef>,
}

impl SensitiveAttributeSchema {
    pub fn new(attributes: Vec<AttributeDef>) -> Result<Self, CorpusError> {
        let schema = SensitiveAttributeSchema { attributes };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut names = HashSet::new();
        for attr in &self.attributes {
            if attr.name.is_empty() {
                return Err(CorpusError::InvalidSchema("empty attribute name".into()));
            }
            if !names.insert(attr.name.clone()) {
                return Err(CorpusError::InvalidSchema(format!(
                    "duplicate attribute name {}",
                    attr.name
                )));
            }
            if attr.categories.len() < 2 {
                return Err(CorpusError::InvalidSchema(format!(
                    "attribute {} needs at least 2 categories",
                    attr.name
                )));
            }
            let mut cats = HashSet::new();
            for c in &attr.categories {
                if !cats.insert(c.clone()) {
                    return Err(CorpusError::InvalidSchema(format!(
                        "attribute {} has duplicate category {c:?}",
                        attr.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    /// Loads a schema file: one JSON record per attribute, in order.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let mut attributes = Vec::new();
        for (line_no, line) in read_lines(path)?.into_iter() {
            let attr: AttributeDef =
                serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                    line: line_no,
                    detail: e.to_string(),
                })?;
            attributes.push(attr);
        }
        SensitiveAttributeSchema::new(attributes)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| CorpusError::io(path, e))?);
        for attr in &self.attributes {
            serde_json::to_writer(&mut w, attr)
                .map_err(|e| CorpusError::io(path, std::io::Error::other(e)))?;
            w.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
        }
        w.flush().map_err(|e| CorpusError::io(path, e))
    }
}

fn deserialize_binary_label<'de, D: Deserializer<'de>>(d: D) -> Result<u8, D::Error> {
    let v = u8::deserialize(d)?;
    if v > 1 {
        return Err(serde::de::Error::custom(format!(
            "label must be 0 or 1, got {v}"
        )));
    }
    Ok(v)
}

fn deserialize_opt_binary_label<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u8>, D::Error> {
    let v = Option::<u8>::deserialize(d)?;
    if let Some(v) = v {
        if v > 1 {
            return Err(serde::de::Error::custom(format!(
                "ground_truth must be 0 or 1, got {v}"
            )));
        }
    }
    Ok(v)
}

/// Wire form of one labeled example.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExampleRecord {
    id: String,
    #[serde(deserialize_with = "deserialize_binary_label")]
    label: u8,
    attributes: BTreeMap<String, String>,
    payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_index: Option<u32>,
}

/// One pool item: binary task label, sensitive attributes, payload text,
/// and a row reference into the pool's embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub label: u8,
    pub attributes: BTreeMap<String, String>,
    pub payload: String,
    pub embedding_ref: usize,
}

/// Wire form of one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueryRecord {
    id: String,
    payload: String,
    #[serde(
        default,
        deserialize_with = "deserialize_opt_binary_label",
        skip_serializing_if = "Option::is_none"
    )]
    ground_truth: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attributes: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_index: Option<u32>,
}

/// One evaluation query. Attributes and ground truth are only consumed by
/// evaluation; selection never sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryExample {
    pub id: String,
    pub payload: String,
    pub embedding_ref: usize,
    pub ground_truth: Option<u8>,
    pub attributes: Option<BTreeMap<String, String>>,
}

/// A validated labeled pool bound to its embedding matrix.
///
/// Immutable after load; safe to share across any number of selection
/// workers.
#[derive(Debug, Clone)]
pub struct Pool {
    pub schema: SensitiveAttributeSchema,
    pub examples: Vec<LabeledExample>,
    pub embeddings: EmbeddingMatrix,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example_by_id(&self, id: &str) -> Option<&LabeledExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Embedding row for one example.
    pub fn vector_of(&self, example: &LabeledExample) -> &[f32] {
        self.embeddings.row(example.embedding_ref)
    }

    /// Keeps only the examples whose id passes the filter. The embedding
    /// matrix is shared as-is; row refs stay valid.
    pub fn subset<F: Fn(&LabeledExample) -> bool>(&self, keep: F) -> Pool {
        Pool {
            schema: self.schema.clone(),
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
            embeddings: self.embeddings.clone(),
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((idx + 1, line));
    }
    Ok(out)
}

fn validate_attributes(
    id: &str,
    attrs: &BTreeMap<String, String>,
    schema: &SensitiveAttributeSchema,
) -> Result<(), CorpusError> {
    for attr in &schema.attributes {
        match attrs.get(&attr.name) {
            None => {
                return Err(CorpusError::MissingAttribute {
                    id: id.to_string(),
                    attribute: attr.name.clone(),
                })
            }
            Some(value) if !attr.accepts(value) => {
                return Err(CorpusError::UnknownCategory {
                    id: id.to_string(),
                    attribute: attr.name.clone(),
                    value: value.clone(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Resolves the embedding carried by a record (inline or sidecar index)
/// against the loading mode, returning the row reference.
fn resolve_embedding(
    id: &str,
    line: usize,
    inline: Option<Vec<f32>>,
    index: Option<u32>,
    sidecar: Option<&EmbeddingMatrix>,
    inline_rows: &mut Vec<Vec<f32>>,
    expected_dim: &mut Option<usize>,
) -> Result<usize, CorpusError> {
    match sidecar {
        Some(matrix) => {
            let idx = index.ok_or_else(|| CorpusError::MalformedRecord {
                line,
                detail: format!("record {id}: sidecar matrix given but embedding_index missing"),
            })? as usize;
            if idx >= matrix.row_count() {
                return Err(CorpusError::EmbeddingIndexOutOfRange {
                    id: id.to_string(),
                    index: idx,
                    rows: matrix.row_count(),
                });
            }
            Ok(idx)
        }
        None => {
            let vec = inline.ok_or_else(|| CorpusError::MalformedRecord {
                line,
                detail: format!("record {id}: no sidecar matrix and no inline embedding"),
            })?;
            if let Some(dim) = *expected_dim {
                if vec.len() != dim {
                    return Err(CorpusError::DimensionMismatch {
                        expected: dim,
                        got: vec.len(),
                    });
                }
            } else {
                *expected_dim = Some(vec.len());
            }
            inline_rows.push(vec);
            Ok(inline_rows.len() - 1)
        }
    }
}

/// Loads and validates a pool. With `embeddings_path` set, records must carry
/// `embedding_index` into the sidecar matrix; otherwise each record must
/// carry an inline `embedding` array of uniform dimension.
///
/// No partial pool is ever returned: the first violation aborts the load
/// with an error naming the offending record.
pub fn load_pool(
    examples_path: &Path,
    embeddings_path: Option<&Path>,
    schema: &SensitiveAttributeSchema,
) -> Result<Pool, CorpusError> {
    schema.validate()?;
    let sidecar = embeddings_path.map(read_embedding_matrix).transpose()?;

    let mut examples = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut inline_rows: Vec<Vec<f32>> = Vec::new();
    let mut expected_dim: Option<usize> = None;

    for (line_no, line) in read_lines(examples_path)? {
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                detail: e.to_string(),
            })?;
        if !seen_ids.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId { id: rec.id });
        }
        validate_attributes(&rec.id, &rec.attributes, schema)?;
        let embedding_ref = resolve_embedding(
            &rec.id,
            line_no,
            rec.embedding,
            rec.embedding_index,
            sidecar.as_ref(),
            &mut inline_rows,
            &mut expected_dim,
        )?;
        examples.push(LabeledExample {
            id: rec.id,
            label: rec.label,
            attributes: rec.attributes,
            payload: rec.payload,
            embedding_ref,
        });
    }

    let embeddings = match sidecar {
        Some(m) => m,
        None => EmbeddingMatrix::from_rows(&inline_rows)?,
    };
    if embeddings_path.is_none() && examples.len() != embeddings.row_count() {
        // Cannot happen with inline packing; kept as a load-time invariant.
        return Err(CorpusError::DimensionMismatch {
            expected: examples.len(),
            got: embeddings.row_count(),
        });
    }

    Ok(Pool {
        schema: schema.clone(),
        examples,
        embeddings,
    })
}

/// Writes a pool back out: examples with `embedding_index` fields plus a
/// binary sidecar matrix. `load_pool` on the result reproduces ids, labels,
/// attributes, payloads, and embedding bits exactly.
pub fn save_pool(
    pool: &Pool,
    examples_path: &Path,
    embeddings_path: &Path,
) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(
        File::create(examples_path).map_err(|e| CorpusError::io(examples_path, e))?,
    );
    for ex in &pool.examples {
        let rec = ExampleRecord {
            id: ex.id.clone(),
            label: ex.label,
            attributes: ex.attributes.clone(),
            payload: ex.payload.clone(),
            embedding: None,
            embedding_index: Some(ex.embedding_ref as u32),
        };
        serde_json::to_writer(&mut w, &rec)
            .map_err(|e| CorpusError::io(examples_path, std::io::Error::other(e)))?;
        w.write_all(b"\n")
            .map_err(|e| CorpusError::io(examples_path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(examples_path, e))?;
    write_embedding_matrix(&pool.embeddings, embeddings_path)
}

/// Loads a query set. Queries follow the same record syntax as examples but
/// `label` is replaced by optional `ground_truth` and attributes are
/// optional. Attributes, when present, are validated against the schema.
pub fn load_queries(
    queries_path: &Path,
    embeddings_path: Option<&Path>,
    schema: &SensitiveAttributeSchema,
) -> Result<(Vec<QueryExample>, EmbeddingMatrix), CorpusError> {
    let sidecar = embeddings_path.map(read_embedding_matrix).transpose()?;
    let mut queries = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut inline_rows: Vec<Vec<f32>> = Vec::new();
    let mut expected_dim: Option<usize> = None;

    for (line_no, line) in read_lines(queries_path)? {
        let rec: QueryRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                detail: e.to_string(),
            })?;
        if !seen_ids.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId { id: rec.id });
        }
        if let Some(attrs) = &rec.attributes {
            validate_attributes(&rec.id, attrs, schema)?;
        }
        let embedding_ref = resolve_embedding(
            &rec.id,
            line_no,
            rec.embedding,
            rec.embedding_index,
            sidecar.as_ref(),
            &mut inline_rows,
            &mut expected_dim,
        )?;
        queries.push(QueryExample {
            id: rec.id,
            payload: rec.payload,
            embedding_ref,
            ground_truth: rec.ground_truth,
            attributes: rec.attributes,
        });
    }

    let embeddings = match sidecar {
        Some(m) => m,
        None => EmbeddingMatrix::from_rows(&inline_rows)?,
    };
    Ok((queries, embeddings))
}

/// Writes a query set with inline embeddings.
pub fn save_queries(
    queries: &[QueryExample],
    matrix: &EmbeddingMatrix,
    path: &Path,
) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CorpusError::io(path, e))?);
    for q in queries {
        let rec = QueryRecord {
            id: q.id.clone(),
            payload: q.payload.clone(),
            ground_truth: q.ground_truth,
            attributes: q.attributes.clone(),
            embedding: Some(matrix.row(q.embedding_ref).to_vec()),
            embedding_index: None,
        };
        serde_json::to_writer(&mut w, &rec)
            .map_err(|e| CorpusError::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// One model answer for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    #[serde(deserialize_with = "deserialize_binary_label")]
    pub prediction: u8,
    pub raw_response: String,
}

/// Writes predictions as line-delimited records. `load_predictions` of the
/// output equals the input.
pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<(), CorpusError> {
    let mut ids = HashSet::new();
    for r in records {
        if !ids.insert(r.query_id.as_str()) {
            return Err(CorpusError::DuplicateId {
                id: r.query_id.clone(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| CorpusError::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| CorpusError::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, CorpusError> {
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                detail: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-category member counts for one attribute. Categories with zero
/// members appear with count 0; counts sum to the pool size.
pub fn subgroup_counts(pool: &Pool, attribute: &str) -> Result<BTreeMap<String, usize>, CorpusError> {
    let attr = pool
        .schema
        .attribute(attribute)
        .ok_or_else(|| CorpusError::UnknownAttribute(attribute.to_string()))?;
    let mut counts: BTreeMap<String, usize> = attr
        .effective_categories()
        .into_iter()
        .map(|c| (c, 0))
        .collect();
    for ex in &pool.examples {
        // Attribute presence was validated at load.
        let value = &ex.attributes[attribute];
        *counts.get_mut(value).expect("validated category") += 1;
    }
    Ok(counts)
}

fn read_embedding_matrix(path: &Path) -> Result<EmbeddingMatrix, CorpusError> {
    let mut f = BufReader::new(File::open(path).map_err(|e| CorpusError::io(path, e))?);
    let bad = |detail: &str| CorpusError::BadSidecar {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };

    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| CorpusError::io(path, e))?;
    if &magic != SIDECAR_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(|e| CorpusError::io(path, e))?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf).map_err(|e| CorpusError::io(path, e))?;
    let dim = u32::from_le_bytes(u32buf) as usize;

    let mut data = vec![0u8; rows * dim * 4];
    f.read_exact(&mut data).map_err(|e| CorpusError::io(path, e))?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing).map_err(|e| CorpusError::io(path, e))? != 0 {
        return Err(bad("trailing bytes after matrix payload"));
    }

    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(EmbeddingMatrix::from_flat(values, rows, dim)?)
}

fn write_embedding_matrix(matrix: &EmbeddingMatrix, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CorpusError::io(path, e))?);
    w.write_all(SIDECAR_MAGIC).map_err(|e| CorpusError::io(path, e))?;
    w.write_all(&(matrix.row_count() as u32).to_le_bytes())
        .map_err(|e| CorpusError::io(path, e))?;
    w.write_all(&(matrix.dim() as u32).to_le_bytes())
        .map_err(|e| CorpusError::io(path, e))?;
    for v in matrix.values() {
        w.write_all(&v.to_le_bytes()).map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    pub(crate) fn gender_schema() -> SensitiveAttributeSchema {
        SensitiveAttributeSchema::new(vec![AttributeDef {
            name: "gender".into(),
            categories: vec!["M".into(), "F".into()],
            allow_unknown: false,
        }])
        .unwrap()
    }

    fn write_file(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn example_line(id: &str, gender: &str, label: u8, emb: &[f32]) -> String {
        format!(
            r#"{{"id":"{id}","label":{label},"attributes":{{"gender":"{gender}"}},"payload":"note {id}","embedding":{}}}"#,
            serde_json::to_string(emb).unwrap()
        )
    }

    #[test]
    fn loads_inline_pool() {
        let dir = tempfile::tempdir().unwrap();
        let lines = [
            example_line("a", "M", 1, &[1.0, 0.0, 0.0, 0.0]),
            example_line("b", "F", 0, &[0.0, 1.0, 0.0, 0.0]),
            example_line("c", "M", 0, &[0.0, 0.0, 1.0, 0.0]),
        ]
        .join("\n");
        let path = write_file(dir.path(), "pool.records", &lines);
        let pool = load_pool(&path, None, &gender_schema()).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.embeddings.dim(), 4);
        assert_eq!(pool.examples[1].attributes["gender"], "F");
    }

    #[test]
    fn rejects_undeclared_category() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "pool.records",
            &example_line("a", "X", 1, &[1.0, 0.0]),
        );
        let err = load_pool(&path, None, &gender_schema()).unwrap_err();
        match err {
            CorpusError::UnknownCategory { id, attribute, value } => {
                assert_eq!((id.as_str(), attribute.as_str(), value.as_str()), ("a", "gender", "X"));
            }
            other => panic!("expected UnknownCategory, got {other}"),
        }
    }

    #[test]
    fn unknown_accepted_when_allowed() {
        let schema = SensitiveAttributeSchema::new(vec![AttributeDef {
            name: "ethnicity".into(),
            categories: vec!["Hispanic".into(), "Non-Hispanic".into()],
            allow_unknown: true,
        }])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "pool.records",
            r#"{"id":"a","label":1,"attributes":{"ethnicity":"Unknown"},"payload":"p","embedding":[1.0]}"#,
        );
        let pool = load_pool(&path, None, &schema).unwrap();
        let counts = subgroup_counts(&pool, "ethnicity").unwrap();
        assert_eq!(counts["Unknown"], 1);
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn rejects_multiclass_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "pool.records",
            r#"{"id":"a","label":2,"attributes":{"gender":"M"},"payload":"p","embedding":[1.0]}"#,
        );
        match load_pool(&path, None, &gender_schema()).unwrap_err() {
            CorpusError::MalformedRecord { line: 1, .. } => {}
            other => panic!("expected MalformedRecord line 1, got {other}"),
        }
    }

    #[test]
    fn rejects_duplicate_id_and_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let dup = [
            example_line("a", "M", 1, &[1.0]),
            example_line("a", "F", 0, &[2.0]),
        ]
        .join("\n");
        let path = write_file(dir.path(), "dup.records", &dup);
        assert!(matches!(
            load_pool(&path, None, &gender_schema()).unwrap_err(),
            CorpusError::DuplicateId { .. }
        ));

        let mismatch = [
            example_line("a", "M", 1, &[1.0, 2.0]),
            example_line("b", "F", 0, &[2.0]),
        ]
        .join("\n");
        let path = write_file(dir.path(), "dim.records", &mismatch);
        assert!(matches!(
            load_pool(&path, None, &gender_schema()).unwrap_err(),
            CorpusError::DimensionMismatch { expected: 2, got: 1 }
        ));
    }

    #[test]
    fn missing_attribute_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "pool.records",
            r#"{"id":"a","label":1,"attributes":{},"payload":"p","embedding":[1.0]}"#,
        );
        assert!(matches!(
            load_pool(&path, None, &gender_schema()).unwrap_err(),
            CorpusError::MissingAttribute { .. }
        ));
    }

    #[test]
    fn sidecar_roundtrip_matches_rows() {
        // 100-record fixture against a 100x16 sidecar matrix: each example's
        // row must equal the matrix row at its recorded index, bit-exact.
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<Vec<f32>> = (0..100)
            .map(|r| (0..16).map(|c| (r * 16 + c) as f32 * 0.25 - 3.0).collect())
            .collect();
        let matrix = EmbeddingMatrix::from_rows(&rows).unwrap();
        let emb_path = dir.path().join("pool.emb");
        write_embedding_matrix(&matrix, &emb_path).unwrap();

        let lines: Vec<String> = (0..100)
            .map(|i| {
                let g = if i % 2 == 0 { "M" } else { "F" };
                // Reference rows in reverse to prove the index is honored.
                format!(
                    r#"{{"id":"e{i}","label":{},"attributes":{{"gender":"{g}"}},"payload":"p{i}","embedding_index":{}}}"#,
                    i % 2,
                    99 - i
                )
            })
            .collect();
        let path = write_file(dir.path(), "pool.records", &lines.join("\n"));
        let pool = load_pool(&path, Some(&emb_path), &gender_schema()).unwrap();

        for (i, ex) in pool.examples.iter().enumerate() {
            let expected: Vec<u32> = rows[99 - i].iter().map(|v| v.to_bits()).collect();
            let got: Vec<u32> = pool.vector_of(ex).iter().map(|v| v.to_bits()).collect();
            assert_eq!(expected, got, "row bits for {}", ex.id);
        }
    }

    #[test]
    fn pool_save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let lines = [
            example_line("a", "M", 1, &[0.1, -2.5e-3, 7.0]),
            example_line("b", "F", 0, &[1.0 / 3.0, f32::MIN_POSITIVE, -0.0]),
        ]
        .join("\n");
        let path = write_file(dir.path(), "orig.records", &lines);
        let pool = load_pool(&path, None, &gender_schema()).unwrap();

        let ex_path = dir.path().join("saved.records");
        let emb_path = dir.path().join("saved.emb");
        save_pool(&pool, &ex_path, &emb_path).unwrap();
        let reloaded = load_pool(&ex_path, Some(&emb_path), &gender_schema()).unwrap();

        assert_eq!(pool.examples, reloaded.examples);
        let orig_bits: Vec<u32> = pool.embeddings.values().iter().map(|v| v.to_bits()).collect();
        let new_bits: Vec<u32> = reloaded.embeddings.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(orig_bits, new_bits);
    }

    #[test]
    fn predictions_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.records");
        save_predictions(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(load_predictions(&path).unwrap().is_empty());

        let recs: Vec<PredictionRecord> = (0..1000)
            .map(|i| PredictionRecord {
                query_id: format!("q{i}"),
                prediction: (i % 2) as u8,
                raw_response: format!("Ja, ✓ ответ {i} — \"yes\"\tnewline\\n"),
            })
            .collect();
        save_predictions(&recs, &path).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), recs);

        // Byte-identical when re-saved.
        let first = std::fs::read(&path).unwrap();
        save_predictions(&recs, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn subgroup_counts_zero_fill_and_total() {
        let dir = tempfile::tempdir().unwrap();
        let lines = [
            example_line("a", "M", 1, &[1.0]),
            example_line("b", "M", 0, &[2.0]),
            example_line("c", "M", 1, &[3.0]),
            example_line("d", "M", 0, &[4.0]),
        ]
        .join("\n");
        let path = write_file(dir.path(), "pool.records", &lines);
        let pool = load_pool(&path, None, &gender_schema()).unwrap();
        let counts = subgroup_counts(&pool, "gender").unwrap();
        assert_eq!(counts["M"], 4);
        assert_eq!(counts["F"], 0);
        assert!(matches!(
            subgroup_counts(&pool, "age").unwrap_err(),
            CorpusError::UnknownAttribute(_)
        ));
    }

    #[test]
    fn subgroup_counts_match_linear_scan() {
        // Independent recount over a 200-item pool with a 3-way attribute.
        let schema = SensitiveAttributeSchema::new(vec![AttributeDef {
            name: "race".into(),
            categories: vec!["White".into(), "Black".into(), "Asian".into()],
            allow_unknown: false,
        }])
        .unwrap();
        let cats = ["White", "Black", "Asian"];
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..200)
            .map(|i| {
                let c = cats[(i * 7 + 3) % 3];
                format!(
                    r#"{{"id":"e{i}","label":{},"attributes":{{"race":"{c}"}},"payload":"p","embedding":[{}.0]}}"#,
                    i % 2,
                    i
                )
            })
            .collect();
        let path = write_file(dir.path(), "pool.records", &lines.join("\n"));
        let pool = load_pool(&path, None, &schema).unwrap();

        let counts = subgroup_counts(&pool, "race").unwrap();
        let mut brute: BTreeMap<String, usize> =
            cats.iter().map(|c| (c.to_string(), 0)).collect();
        for i in 0..200usize {
            *brute.get_mut(cats[(i * 7 + 3) % 3]).unwrap() += 1;
        }
        assert_eq!(counts, brute);
        assert_eq!(counts.values().sum::<usize>(), pool.len());
    }
}
