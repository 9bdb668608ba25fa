//! Nearest-neighbour retrieval in the embedding space and the mAP@k /
//! Prec@k evaluation protocols.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{strip_labels, ImageSample};
use crate::error::{Error, Result};
use crate::model::{images_to_input, ModelParams};
use crate::optim::{run_ttt, TTTConfig};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 200;

/// Rows embedded per forward pass.
const EMBED_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Squared Euclidean distance.
    #[default]
    Euclidean,
    /// `1 − cos(q, g)`; zero vectors have distance 1 to everything.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    NonGeneralized,
    Generalized,
    CrossDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub vectors: Tensor,
    pub ids: Vec<String>,
    pub class_ids: Vec<usize>,
    pub domain_ids: Vec<usize>,
    pub seen_flags: Vec<bool>,
}

impl EmbeddingIndex {
    pub fn new(
        vectors: Tensor,
        ids: Vec<String>,
        class_ids: Vec<usize>,
        domain_ids: Vec<usize>,
        seen_flags: Vec<bool>,
    ) -> Result<Self> {
        let g = vectors.shape().first().copied().unwrap_or(0);
        if vectors.shape().len() != 2 || g == 0 {
            return Err(Error::contract(format!("index vectors must be a non-empty matrix, got {:?}", vectors.shape())));
        }
        if [ids.len(), class_ids.len(), domain_ids.len(), seen_flags.len()].iter().any(|&l| l != g) {
            return Err(Error::contract(format!("index metadata lengths differ from {g} vectors")));
        }
        if !vectors.is_finite() {
            return Err(Error::contract("index vectors must be finite"));
        }
        Ok(Self {
            vectors,
            ids,
            class_ids,
            domain_ids,
            seen_flags,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Keeps the rows whose position satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        if rows.is_empty() {
            return Err(Error::Protocol("search set is empty after filtering".into()));
        }
        let m = self.dim();
        let data = rows.iter().flat_map(|&i| self.vectors.row(i).iter().copied()).collect();
        Self::new(
            Tensor::matrix(rows.len(), m, data)?,
            rows.iter().map(|&i| self.ids[i].clone()).collect(),
            rows.iter().map(|&i| self.class_ids[i]).collect(),
            rows.iter().map(|&i| self.domain_ids[i]).collect(),
            rows.iter().map(|&i| self.seen_flags[i]).collect(),
        )
    }
}

/// Embeds images without augmentation, `EMBED_CHUNK` rows at a time on up
/// to `workers` threads. Rows are independent, so the result does not
/// depend on the worker count.
pub fn embed_samples(params: &ModelParams, samples: &[ImageSample], workers: usize) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::contract("nothing to embed"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let chunks: Vec<Tensor> = pool.install(|| {
        samples
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| params.embed(&images_to_input(chunk.iter().map(|s| &s.image))?))
            .collect::<Result<_>>()
    })?;
    let m = params.latent_dim();
    let data: Vec<f64> = chunks.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(samples.len(), m, data)
}

pub fn embed_gallery(
    params: &ModelParams,
    samples: &[ImageSample],
    seen_class_ids: &[usize],
    workers: usize,
) -> Result<EmbeddingIndex> {
    let vectors = embed_samples(params, samples, workers)?;
    let class_ids: Vec<usize> = samples.iter().map(ImageSample::class_id).collect();
    let seen_flags = class_ids.iter().map(|c| seen_class_ids.contains(c)).collect();
    EmbeddingIndex::new(
        vectors,
        samples.iter().map(|s| s.id.clone()).collect(),
        class_ids,
        samples.iter().map(|s| s.domain_id).collect(),
        seen_flags,
    )
}

fn distance(metric: Metric, q: &[f64], g: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum(),
        Metric::Cosine => {
            let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ng = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nq == 0.0 || ng == 0.0 {
                1.0
            } else {
                1.0 - dot / (nq * ng)
            }
        }
    }
}

/// Positions of the `min(k, G)` nearest gallery vectors, nearest first,
/// ties broken by ascending position.
pub fn retrieve(index: &EmbeddingIndex, query: &[f64], k: usize, metric: Metric) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if query.len() != index.dim() {
        return Err(Error::Shape {
            op: "retrieve",
            left: vec![query.len()],
            right: vec![index.dim()],
        });
    }
    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .map(|i| (distance(metric, query, index.vectors.row(i)), i))
        .collect();
    let k = k.min(scored.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Fraction of relevant items among the first `k`.
pub fn precision_at_k(relevance: &[bool], k: usize) -> Result<f64> {
    if k == 0 || k > relevance.len() {
        return Err(Error::contract(format!(
            "precision at {k} needs 1 <= k <= {} ranked items",
            relevance.len()
        )));
    }
    Ok(relevance[..k].iter().filter(|&&r| r).count() as f64 / k as f64)
}

/// `Σ_{i ≤ k} Prec@i · rel_i / max(1, min(R, k))`, and 0 when `R = 0`.
pub fn average_precision_at_k(relevance: &[bool], k: usize, total_relevant: usize) -> Result<f64> {
    let top = &relevance[..k.min(relevance.len())];
    let hits_in_top = top.iter().filter(|&&r| r).count();
    if hits_in_top > total_relevant {
        return Err(Error::contract(format!(
            "{hits_in_top} relevant items ranked but only {total_relevant} exist"
        )));
    }
    if total_relevant == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in top.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total_relevant.min(k).max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub ap: f64,
    pub prec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub k: usize,
    pub map_at_k: f64,
    pub prec_at_k: f64,
    pub per_query: Vec<QueryRecord>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Bitwise equality of every number in the report.
    pub fn bit_eq(&self, other: &MetricsReport) -> bool {
        self.protocol == other.protocol
            && self.k == other.k
            && self.map_at_k.to_bits() == other.map_at_k.to_bits()
            && self.prec_at_k.to_bits() == other.prec_at_k.to_bits()
            && self.per_query.len() == other.per_query.len()
            && self.per_query.iter().zip(&other.per_query).all(|(a, b)| {
                a.id == b.id && a.ap.to_bits() == b.ap.to_bits() && a.prec.to_bits() == b.prec.to_bits()
            })
    }
}

/// Scores embedded queries against an index. A `k` larger than the index
/// is clipped to its size `G`; the report carries the clipped value and
/// precision divides by it.
pub fn score_queries(
    index: &EmbeddingIndex,
    query_vectors: &Tensor,
    query_classes: &[usize],
    query_ids: &[String],
    k: usize,
    metric: Metric,
    protocol: Protocol,
) -> Result<MetricsReport> {
    let nq = query_classes.len();
    if nq == 0 || query_ids.len() != nq || query_vectors.shape() != [nq, index.dim()] {
        return Err(Error::Protocol(format!(
            "{nq} query classes, {} ids and a {:?} embedding matrix do not line up",
            query_ids.len(),
            query_vectors.shape()
        )));
    }
    let k_eff = k.min(index.len());
    let per_query = (0..nq)
        .into_par_iter()
        .map(|q| {
            let class = query_classes[q];
            let ranked = retrieve(index, query_vectors.row(q), k_eff, metric)?;
            let relevance: Vec<bool> = ranked.iter().map(|&g| index.class_ids[g] == class).collect();
            let total = index.class_ids.iter().filter(|&&c| c == class).count();
            Ok(QueryRecord {
                id: query_ids[q].clone(),
                ap: average_precision_at_k(&relevance, k_eff, total)?,
                prec: precision_at_k(&relevance, k_eff)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&QueryRecord) -> f64| per_query.iter().map(f).sum::<f64>() / nq as f64;
    Ok(MetricsReport {
        protocol,
        k: k_eff,
        map_at_k: mean(|r| r.ap),
        prec_at_k: mean(|r| r.prec),
        per_query,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub metric: Metric,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            metric: Metric::Euclidean,
            workers: 1,
        }
    }
}

/// Runs one protocol. The non-generalized mode restricts both the search
/// set and the queries to unseen classes; the generalized mode keeps
/// everything; the cross-dataset mode keeps everything and only changes
/// the report tag.
pub fn evaluate_protocol(
    params: &ModelParams,
    queries: &[ImageSample],
    gallery: &[ImageSample],
    seen_class_ids: &[usize],
    protocol: Protocol,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let gallery_domains: HashSet<usize> = gallery.iter().map(|s| s.domain_id).collect();
    if let Some(q) = queries.iter().find(|q| gallery_domains.contains(&q.domain_id)) {
        return Err(Error::Protocol(format!(
            "query {} shares domain {} with the search set",
            q.id, q.domain_id
        )));
    }
    let index = embed_gallery(params, gallery, seen_class_ids, opts.workers)?;
    let (index, queries): (EmbeddingIndex, Vec<ImageSample>) = match protocol {
        Protocol::NonGeneralized => (
            index.filter(|i| !index.seen_flags[i])?,
            queries
                .iter()
                .filter(|q| !seen_class_ids.contains(&q.class_id()))
                .cloned()
                .collect(),
        ),
        _ => (index, queries.to_vec()),
    };
    if queries.is_empty() {
        return Err(Error::Protocol("query set is empty after filtering".into()));
    }
    let qv = embed_samples(params, &queries, opts.workers)?;
    let classes: Vec<usize> = queries.iter().map(ImageSample::class_id).collect();
    let ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    score_queries(&index, &qv, &classes, &ids, opts.k, opts.metric, protocol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub delta_map: f64,
    pub delta_prec: f64,
}

/// Evaluates a model on another dataset before and after test-time
/// training on that dataset's queries. Every class of the other dataset is
/// new to the model, so the whole search set is used.
pub fn cross_dataset_eval(
    params: &ModelParams,
    queries: &[ImageSample],
    gallery: &[ImageSample],
    ttt: Option<&TTTConfig>,
    opts: EvalOptions,
) -> Result<CrossDatasetReport> {
    let before = evaluate_protocol(params, queries, gallery, &[], Protocol::CrossDataset, opts)?;
    let after = match ttt {
        Some(cfg) => {
            let (adapted, _) = run_ttt(params, &strip_labels(queries), cfg)?;
            evaluate_protocol(&adapted, queries, gallery, &[], Protocol::CrossDataset, opts)?
        }
        None => before.clone(),
    };
    Ok(CrossDatasetReport {
        delta_map: after.map_at_k - before.map_at_k,
        delta_prec: after.prec_at_k - before.prec_at_k,
        before,
        after,
    })
}
