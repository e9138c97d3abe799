//! Embedding geometry: cosine similarity, seeded k-means, cluster balance
//! scoring, and exact top-k retrieval.
//!
//! Everything here is a pure function of its inputs and an explicit seed.
//! The k-means assignment step runs on rayon when the `parallel` feature is
//! enabled; each row is scored independently into its own slot, so the
//! parallel and sequential paths are bit-identical.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Pool;
use crate::exec;

#[derive(Debug, thiserror::Error)]
pub enum MatrixError {
    #[error("row {row} has dimension {got}, expected {expected}")]
    RaggedRow { row: usize, expected: usize, got: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("flat buffer of {len} values does not factor as {rows}x{dim}")]
    BadShape { len: usize, rows: usize, dim: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum VectorspaceError {
    #[error("vectors have mismatched dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNormVector,
    #[error("k={k} exceeds row count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("empty cluster")]
    EmptyCluster,
    #[error("n_d={n_d} exceeds cluster count {k}")]
    NdTooLarge { n_d: usize, k: usize },
    #[error("attribute {0} not in schema")]
    UnknownAttribute(String),
    #[error("cluster model does not match pool: {0}")]
    ModelPoolMismatch(String),
    #[error("malformed model record at line {line}: {detail}")]
    MalformedModel { line: usize, detail: String },
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Dense row-major f32 matrix. Validated on construction: uniform row
/// dimension, no NaN/Inf entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Vec<f32>,
    dim: usize,
    row_count: usize,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, MatrixError> {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(MatrixError::RaggedRow {
                    row: i,
                    expected: dim,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(values, rows.len(), dim)
    }

    pub fn from_flat(values: Vec<f32>, rows: usize, dim: usize) -> Result<Self, MatrixError> {
        if values.len() != rows * dim {
            return Err(MatrixError::BadShape {
                len: values.len(),
                rows,
                dim,
            });
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatrixError::NonFiniteValue {
                    row: if dim == 0 { 0 } else { i / dim },
                    col: if dim == 0 { 0 } else { i % dim },
                });
            }
        }
        Ok(EmbeddingMatrix {
            values,
            dim,
            row_count: rows,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Cosine similarity in `[-1, 1]`, accumulated in f64.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, VectorspaceError> {
    if a.len() != b.len() {
        return Err(VectorspaceError::DimensionMismatch(a.len(), b.len()));
    }
    let na = dot_f64(a, a).sqrt();
    let nb = dot_f64(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(VectorspaceError::ZeroNormVector);
    }
    Ok((dot_f64(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct KmeansParams {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KmeansParams {
    fn default() -> Self {
        KmeansParams {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Geometry-level k-means output: centroids and the row-to-cluster map.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub k: usize,
    pub centroids: EmbeddingMatrix,
    pub assignment: Vec<usize>,
    pub iterations_run: usize,
    pub inertia: f64,
    /// Inertia recorded after each assignment step; non-increasing.
    pub inertia_trace: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding, driven solely by `seed`.
///
/// Terminates when the largest centroid displacement drops below `tol` or
/// after `max_iter` iterations. Clusters that lose all members are re-seeded
/// to the point currently farthest from its assigned centroid, so the final
/// assignment never contains an empty cluster. Identical `(matrix, k, seed)`
/// always produce the identical model.
pub fn kmeans(
    matrix: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    params: &KmeansParams,
) -> Result<Clustering, VectorspaceError> {
    kmeans_impl(matrix, k, seed, params, cfg!(feature = "parallel"))
}

/// Single-threaded variant of [`kmeans`]; same results, useful for
/// benchmarking the parallel speedup and asserting path equivalence.
pub fn kmeans_seq(
    matrix: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    params: &KmeansParams,
) -> Result<Clustering, VectorspaceError> {
    kmeans_impl(matrix, k, seed, params, false)
}

fn kmeans_impl(
    matrix: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    params: &KmeansParams,
    parallel: bool,
) -> Result<Clustering, VectorspaceError> {
    let n = matrix.row_count();
    if n == 0 {
        return Err(VectorspaceError::EmptyMatrix);
    }
    if k == 0 || k > n {
        return Err(VectorspaceError::KTooLarge { k, n });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(matrix, k, &mut rng);

    let mut assignment = vec![0usize; n];
    let mut distances = vec![0f64; n];
    let mut inertia_trace = Vec::new();
    let mut iterations_run = 0;

    for _ in 0..params.max_iter {
        iterations_run += 1;
        assign_rows(matrix, &centroids, &mut assignment, &mut distances, parallel);
        inertia_trace.push(distances.iter().sum());

        let new_centroids = update_centroids(matrix, k, &mut assignment, &mut distances);
        let max_shift = (0..k)
            .map(|c| squared_distance(centroid_row(&centroids, matrix.dim(), c), centroid_row(&new_centroids, matrix.dim(), c)).sqrt())
            .fold(0.0f64, f64::max);
        centroids = new_centroids;
        if max_shift < params.tol {
            break;
        }
    }

    // Final assignment against the converged centroids.
    assign_rows(matrix, &centroids, &mut assignment, &mut distances, parallel);
    inertia_trace.push(distances.iter().sum());
    let inertia = *inertia_trace.last().expect("at least one iteration");

    let centroid_matrix = EmbeddingMatrix::from_flat(
        centroids.iter().map(|&v| v as f32).collect(),
        k,
        matrix.dim(),
    )?;
    Ok(Clustering {
        k,
        centroids: centroid_matrix,
        assignment,
        iterations_run,
        inertia,
        inertia_trace,
    })
}

fn centroid_row(flat: &[f64], dim: usize, c: usize) -> &[f64] {
    &flat[c * dim..(c + 1) * dim]
}

fn distance_to_centroid(row: &[f32], centroid: &[f64]) -> f64 {
    row.iter()
        .zip(centroid)
        .map(|(x, c)| {
            let d = f64::from(*x) - c;
            d * d
        })
        .sum()
}

/// k-means++: first center uniform, each next center sampled with
/// probability proportional to the squared distance to the nearest center.
fn init_plus_plus(matrix: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = matrix.row_count();
    let dim = matrix.dim();
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(matrix.row(first).iter().map(|&v| f64::from(v)));

    let mut best: Vec<f64> = (0..n)
        .map(|i| distance_to_centroid(matrix.row(i), centroid_row(&centroids, dim, 0)))
        .collect();

    while centroids.len() / dim < k {
        let total: f64 = best.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with chosen centers; k <= n
            // guarantees duplicates are acceptable here.
            rng.random_range(0..n)
        } else {
            WeightedIndex::new(best.iter().copied())
                .expect("positive weights")
                .sample(rng)
        };
        let c = centroids.len() / dim;
        centroids.extend(matrix.row(next).iter().map(|&v| f64::from(v)));
        for i in 0..n {
            let d = distance_to_centroid(matrix.row(i), centroid_row(&centroids, dim, c));
            if d < best[i] {
                best[i] = d;
            }
        }
    }
    centroids
}

fn assign_rows(
    matrix: &EmbeddingMatrix,
    centroids: &[f64],
    assignment: &mut [usize],
    distances: &mut [f64],
    parallel: bool,
) {
    let dim = matrix.dim();
    let k = centroids.len() / dim;
    let score = |i: usize| -> (usize, f64) {
        let row = matrix.row(i);
        let mut best = (0usize, f64::INFINITY);
        for c in 0..k {
            let d = distance_to_centroid(row, centroid_row(centroids, dim, c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };
    let results = if parallel {
        exec::map_indexed(matrix.row_count(), score)
    } else {
        exec::map_indexed_seq(matrix.row_count(), score)
    };
    for (i, (c, d)) in results.into_iter().enumerate() {
        assignment[i] = c;
        distances[i] = d;
    }
}

/// Mean-update step. Empty clusters are relocated onto the point farthest
/// from its assigned centroid (reassigning that point), so no cluster stays
/// empty and inertia remains non-increasing.
fn update_centroids(
    matrix: &EmbeddingMatrix,
    k: usize,
    assignment: &mut [usize],
    distances: &mut [f64],
) -> Vec<f64> {
    let dim = matrix.dim();
    let n = matrix.row_count();
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let c = assignment[i];
        counts[c] += 1;
        let row = matrix.row(i);
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
            *s += f64::from(*v);
        }
    }

    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
        let mut taken = 0usize;
        for c in empty {
            // Skip donors that would themselves empty a singleton cluster.
            while taken < n && counts[assignment[order[taken]]] <= 1 {
                taken += 1;
            }
            if taken >= n {
                break;
            }
            let i = order[taken];
            taken += 1;
            let old = assignment[i];
            counts[old] -= 1;
            counts[c] = 1;
            let row = matrix.row(i);
            for d in 0..dim {
                sums[old * dim + d] -= f64::from(row[d]);
                sums[c * dim + d] = f64::from(row[d]);
            }
            assignment[i] = c;
            distances[i] = 0.0;
        }
    }

    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for s in sums[c * dim..(c + 1) * dim].iter_mut() {
                *s *= inv;
            }
        }
    }
    sums
}

/// Key of one stratification cell: (attribute, category, label).
pub type CellKey = (String, String, u8);

/// A k-means model annotated with pool membership and per-cluster
/// stratification cell counts.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: EmbeddingMatrix,
    /// Example position in the pool -> cluster index.
    pub assignment: Vec<usize>,
    /// Per cluster, member ids in pool order. Partitions the pool.
    pub members: Vec<Vec<String>>,
    /// Per cluster, (attribute, category, label) -> member count.
    pub cell_counts: Vec<BTreeMap<CellKey, usize>>,
    pub iterations_run: usize,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    /// Clusters a pool's embeddings (gathered in example order) and attaches
    /// membership and cell-count statistics.
    pub fn build(
        pool: &Pool,
        k: usize,
        seed: u64,
        params: &KmeansParams,
    ) -> Result<Self, VectorspaceError> {
        let rows: Vec<Vec<f32>> = pool
            .examples
            .iter()
            .map(|e| pool.vector_of(e).to_vec())
            .collect();
        let matrix = EmbeddingMatrix::from_rows(&rows)?;
        let clustering = kmeans(&matrix, k, seed, params)?;
        Ok(Self::from_clustering(clustering, pool))
    }

    pub fn from_clustering(clustering: Clustering, pool: &Pool) -> Self {
        let k = clustering.k;
        let mut members: Vec<Vec<String>> = vec![Vec::new(); k];
        let mut cell_counts: Vec<BTreeMap<CellKey, usize>> = vec![BTreeMap::new(); k];
        for (i, ex) in pool.examples.iter().enumerate() {
            let c = clustering.assignment[i];
            members[c].push(ex.id.clone());
            for (attr, value) in &ex.attributes {
                *cell_counts[c]
                    .entry((attr.clone(), value.clone(), ex.label))
                    .or_insert(0) += 1;
            }
        }
        ClusterModel {
            k,
            centroids: clustering.centroids,
            assignment: clustering.assignment,
            members,
            cell_counts,
            iterations_run: clustering.iterations_run,
            inertia: clustering.inertia,
            inertia_trace: clustering.inertia_trace,
        }
    }

    pub fn validate_against(&self, pool: &Pool) -> Result<(), VectorspaceError> {
        if self.assignment.len() != pool.len() {
            return Err(VectorspaceError::ModelPoolMismatch(format!(
                "model covers {} examples, pool has {}",
                self.assignment.len(),
                pool.len()
            )));
        }
        let pool_ids: HashSet<&str> = pool.examples.iter().map(|e| e.id.as_str()).collect();
        let mut seen = 0usize;
        for m in &self.members {
            for id in m {
                if !pool_ids.contains(id.as_str()) {
                    return Err(VectorspaceError::ModelPoolMismatch(format!(
                        "member id {id} not in pool"
                    )));
                }
                seen += 1;
            }
        }
        if seen != pool.len() {
            return Err(VectorspaceError::ModelPoolMismatch(format!(
                "members cover {seen} ids, pool has {}",
                pool.len()
            )));
        }
        Ok(())
    }

    /// Balance score of every cluster for one attribute, computed from the
    /// stored cell counts.
    pub fn balance_scores(
        &self,
        pool: &Pool,
        attribute: &str,
    ) -> Result<Vec<ClusterBalanceScore>, VectorspaceError> {
        let attr = pool
            .schema
            .attribute(attribute)
            .ok_or_else(|| VectorspaceError::UnknownAttribute(attribute.to_string()))?;
        let categories = attr.effective_categories();
        (0..self.k)
            .map(|c| {
                let size = self.members[c].len();
                let counts: Vec<usize> = categories
                    .iter()
                    .flat_map(|cat| {
                        [1u8, 0u8].into_iter().map(|label| {
                            self.cell_counts[c]
                                .get(&(attribute.to_string(), cat.clone(), label))
                                .copied()
                                .unwrap_or(0)
                        })
                    })
                    .collect();
                score_from_cell_counts(c, size, &counts, attribute)
            })
            .collect()
    }
}

/// Per-cluster deviation from uniform stratification cells; 0 exactly when
/// every (category, label) cell holds `|C| / n_cells` members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBalanceScore {
    pub cluster_index: usize,
    pub score: f64,
    pub stratify_attribute: String,
}

fn score_from_cell_counts(
    cluster_index: usize,
    cluster_size: usize,
    cell_counts: &[usize],
    attribute: &str,
) -> Result<ClusterBalanceScore, VectorspaceError> {
    if cluster_size == 0 {
        return Err(VectorspaceError::EmptyCluster);
    }
    let uniform = cluster_size as f64 / cell_counts.len() as f64;
    let deviation: f64 = cell_counts
        .iter()
        .map(|&c| (c as f64 - uniform).abs())
        .sum();
    Ok(ClusterBalanceScore {
        cluster_index,
        score: deviation / cluster_size as f64,
        stratify_attribute: attribute.to_string(),
    })
}

/// Balance score from raw members: `(1/|C|) * sum over (category, label)
/// cells of |count - |C|/n_cells|` with `n_cells = |categories| * 2`.
/// Order-invariant; categories absent from the cluster still contribute.
pub fn balance_score(
    cluster_index: usize,
    members: &[(&str, u8)],
    categories: &[String],
    attribute: &str,
) -> Result<ClusterBalanceScore, VectorspaceError> {
    if members.is_empty() {
        return Err(VectorspaceError::EmptyCluster);
    }
    let counts: Vec<usize> = categories
        .iter()
        .flat_map(|cat| {
            [1u8, 0u8].into_iter().map(|label| {
                members
                    .iter()
                    .filter(|(c, l)| *c == cat.as_str() && *l == label)
                    .count()
            })
        })
        .collect();
    score_from_cell_counts(cluster_index, members.len(), &counts, attribute)
}

/// The Step-1 filter: the `n_d` clusters with the smallest balance score
/// for `attribute`, ties broken by ascending cluster index. The union of
/// their members is the candidate pool for balanced selection.
pub fn select_balanced_clusters(
    model: &ClusterModel,
    pool: &Pool,
    attribute: &str,
    n_d: usize,
) -> Result<Vec<usize>, VectorspaceError> {
    if n_d > model.k {
        return Err(VectorspaceError::NdTooLarge { n_d, k: model.k });
    }
    let scores = model.balance_scores(pool, attribute)?;
    Ok(rank_by_score(scores, n_d))
}

/// Same filter with cells built from the cross product of several
/// attributes' categories, for intersectional selection.
pub fn select_balanced_clusters_multi(
    model: &ClusterModel,
    pool: &Pool,
    attributes: &[String],
    n_d: usize,
) -> Result<Vec<usize>, VectorspaceError> {
    if n_d > model.k {
        return Err(VectorspaceError::NdTooLarge { n_d, k: model.k });
    }
    let combos = combo_categories(pool, attributes)?;
    let id_to_example: BTreeMap<&str, &crate::corpus::LabeledExample> =
        pool.examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let attr_label = attributes.join("x");

    let mut scores = Vec::with_capacity(model.k);
    for (c, member_ids) in model.members.iter().enumerate() {
        let mut counts: BTreeMap<(String, u8), usize> = combos
            .iter()
            .flat_map(|combo| [1u8, 0u8].into_iter().map(|l| ((combo.clone(), l), 0usize)))
            .collect();
        for id in member_ids {
            let ex = id_to_example
                .get(id.as_str())
                .ok_or_else(|| VectorspaceError::ModelPoolMismatch(format!("member id {id} not in pool")))?;
            let combo = combo_of(ex, attributes);
            *counts.get_mut(&(combo, ex.label)).expect("combo enumerated") += 1;
        }
        let flat: Vec<usize> = counts.values().copied().collect();
        scores.push(score_from_cell_counts(c, member_ids.len(), &flat, &attr_label)?);
    }
    Ok(rank_by_score(scores, n_d))
}

fn rank_by_score(mut scores: Vec<ClusterBalanceScore>, n_d: usize) -> Vec<usize> {
    scores.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.cluster_index.cmp(&b.cluster_index))
    });
    scores.into_iter().take(n_d).map(|s| s.cluster_index).collect()
}

/// Cross-product category strings for a list of attributes, joined with `|`.
pub(crate) fn combo_categories(
    pool: &Pool,
    attributes: &[String],
) -> Result<Vec<String>, VectorspaceError> {
    let mut combos = vec![String::new()];
    for name in attributes {
        let attr = pool
            .schema
            .attribute(name)
            .ok_or_else(|| VectorspaceError::UnknownAttribute(name.clone()))?;
        let mut next = Vec::with_capacity(combos.len() * attr.categories.len());
        for prefix in &combos {
            for cat in attr.effective_categories() {
                next.push(if prefix.is_empty() {
                    cat.clone()
                } else {
                    format!("{prefix}|{cat}")
                });
            }
        }
        combos = next;
    }
    Ok(combos)
}

pub(crate) fn combo_of(example: &crate::corpus::LabeledExample, attributes: &[String]) -> String {
    attributes
        .iter()
        .map(|a| example.attributes[a].as_str())
        .collect::<Vec<_>>()
        .join("|")
}

/// Ranked retrieval output; zero-norm candidates are skipped, not fatal.
#[derive(Debug, Clone, Default)]
pub struct RankedIds {
    pub ids: Vec<String>,
    pub zero_norm_skipped: Vec<String>,
}

/// Top-k by descending cosine similarity to the query, ties broken by
/// ascending id. Excluded ids never appear; if fewer than `k` candidates
/// remain, all of them are returned.
pub fn top_k_similar(
    query_vec: &[f32],
    candidates: &[(String, usize)],
    matrix: &EmbeddingMatrix,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<RankedIds, VectorspaceError> {
    let ranked = rank_by_similarity(query_vec, candidates, matrix, exclude)?;
    Ok(RankedIds {
        ids: ranked
            .ids
            .into_iter()
            .take(k)
            .map(|(id, _)| id)
            .collect(),
        zero_norm_skipped: ranked.zero_norm_skipped,
    })
}

pub(crate) struct ScoredIds {
    pub ids: Vec<(String, f64)>,
    pub zero_norm_skipped: Vec<String>,
}

/// Full similarity ranking of the candidates (descending, ties by id).
pub(crate) fn rank_by_similarity(
    query_vec: &[f32],
    candidates: &[(String, usize)],
    matrix: &EmbeddingMatrix,
    exclude: &HashSet<String>,
) -> Result<ScoredIds, VectorspaceError> {
    let qn = dot_f64(query_vec, query_vec).sqrt();
    if qn == 0.0 {
        return Err(VectorspaceError::ZeroNormVector);
    }
    let scores = exec::map_indexed(candidates.len(), |i| {
        let (id, row) = &candidates[i];
        if exclude.contains(id) {
            return None;
        }
        match cosine_similarity(query_vec, matrix.row(*row)) {
            Ok(s) => Some((i, Ok(s))),
            Err(VectorspaceError::ZeroNormVector) => Some((i, Err(()))),
            Err(_) => unreachable!("dims validated by matrix construction"),
        }
    });

    let mut ids = Vec::new();
    let mut zero_norm_skipped = Vec::new();
    for entry in scores.into_iter().flatten() {
        match entry {
            (i, Ok(s)) => ids.push((candidates[i].0.clone(), s)),
            (i, Err(())) => zero_norm_skipped.push(candidates[i].0.clone()),
        }
    }
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ScoredIds {
        ids,
        zero_norm_skipped,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ModelRecord {
    Header {
        k: usize,
        dim: usize,
        rows: usize,
        iterations_run: usize,
        inertia: f64,
    },
    Cluster {
        cluster: usize,
        member_ids: Vec<String>,
        centroid: Vec<f32>,
    },
}

/// Serializes a model as line-delimited records: a header line, then one
/// record per cluster with member ids and the centroid.
pub fn save_model(model: &ClusterModel, path: &Path) -> Result<(), VectorspaceError> {
    let io_err = |e: std::io::Error| VectorspaceError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let header = ModelRecord::Header {
        k: model.k,
        dim: model.centroids.dim(),
        rows: model.assignment.len(),
        iterations_run: model.iterations_run,
        inertia: model.inertia,
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| io_err(std::io::Error::other(e)))?;
    w.write_all(b"\n").map_err(io_err)?;
    for c in 0..model.k {
        let rec = ModelRecord::Cluster {
            cluster: c,
            member_ids: model.members[c].clone(),
            centroid: model.centroids.row(c).to_vec(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| io_err(std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Loads a serialized model and re-derives assignment and cell counts from
/// the pool. The inertia trace is not persisted.
pub fn load_model(path: &Path, pool: &Pool) -> Result<ClusterModel, VectorspaceError> {
    let io_err = |e: std::io::Error| VectorspaceError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let contents = std::fs::read_to_string(path).map_err(io_err)?;
    let mut lines = contents.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    #[derive(Deserialize)]
    struct Header {
        k: usize,
        dim: usize,
        rows: usize,
        iterations_run: usize,
        inertia: f64,
    }
    #[derive(Deserialize)]
    struct ClusterLine {
        cluster: usize,
        member_ids: Vec<String>,
        centroid: Vec<f32>,
    }

    let (line_no, header_line) = lines.next().ok_or(VectorspaceError::MalformedModel {
        line: 1,
        detail: "empty model file".into(),
    })?;
    let header: Header =
        serde_json::from_str(header_line).map_err(|e| VectorspaceError::MalformedModel {
            line: line_no + 1,
            detail: e.to_string(),
        })?;

    let mut members: Vec<Vec<String>> = vec![Vec::new(); header.k];
    let mut centroid_rows: Vec<Vec<f32>> = vec![vec![0.0; header.dim]; header.k];
    for (line_no, line) in lines {
        let rec: ClusterLine =
            serde_json::from_str(line).map_err(|e| VectorspaceError::MalformedModel {
                line: line_no + 1,
                detail: e.to_string(),
            })?;
        if rec.cluster >= header.k || rec.centroid.len() != header.dim {
            return Err(VectorspaceError::MalformedModel {
                line: line_no + 1,
                detail: "cluster index or centroid dim out of range".into(),
            });
        }
        members[rec.cluster] = rec.member_ids;
        centroid_rows[rec.cluster] = rec.centroid;
    }

    if header.rows != pool.len() {
        return Err(VectorspaceError::ModelPoolMismatch(format!(
            "model covers {} examples, pool has {}",
            header.rows,
            pool.len()
        )));
    }
    let id_to_pos: BTreeMap<&str, usize> = pool
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let mut assignment = vec![usize::MAX; pool.len()];
    for (c, ids) in members.iter().enumerate() {
        for id in ids {
            let pos = *id_to_pos
                .get(id.as_str())
                .ok_or_else(|| VectorspaceError::ModelPoolMismatch(format!("member id {id} not in pool")))?;
            if assignment[pos] != usize::MAX {
                return Err(VectorspaceError::ModelPoolMismatch(format!(
                    "id {id} appears in more than one cluster"
                )));
            }
            assignment[pos] = c;
        }
    }
    if assignment.iter().any(|&c| c == usize::MAX) {
        return Err(VectorspaceError::ModelPoolMismatch(
            "members do not cover the pool".into(),
        ));
    }

    let clustering = Clustering {
        k: header.k,
        centroids: EmbeddingMatrix::from_rows(&centroid_rows)?,
        assignment,
        iterations_run: header.iterations_run,
        inertia: header.inertia,
        inertia_trace: Vec::new(),
    };
    let model = ClusterModel::from_clustering(clustering, pool);
    model.validate_against(pool)?;
    Ok(model)
}
