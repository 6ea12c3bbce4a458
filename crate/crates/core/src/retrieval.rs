//! Inference-time similarity fusion and Rank-K evaluation.
//!
//! Queries are text embeddings, the gallery holds image embeddings.
//! Global and local (concatenated-center) cosine similarities are
//! computed separately and fused by addition; ranking sorts scores
//! descending with ties broken toward the lower gallery index.

use ndarray::Array2;
use thiserror::Error;

use crate::alignment::EmbeddingBundle;
use crate::config::{ModuleFlags, RunConfig};
use crate::datagen::Dataset;
use crate::objectives::cosine_plain;
use crate::parallel::map_indexed;
use crate::training::{self, TrainError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("rank_at_k needs k >= 1")]
    ZeroK,
    #[error("query/gallery label counts do not match the similarity matrix")]
    LabelShape,
}

/// Pairwise similarity scores between queries and the gallery.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    /// Fused scores `s = s_global + s_local`.
    pub s: Array2<f64>,
    pub s_global: Array2<f64>,
    pub s_local: Array2<f64>,
}

/// Cosine similarities at both granularities. Bundles without locals
/// contribute zero to the local term; zero-norm embeddings score 0 and
/// are flagged in the log.
pub fn fuse_similarity(
    queries: &[EmbeddingBundle],
    gallery: &[EmbeddingBundle],
) -> SimilarityMatrix {
    let (nq, ng) = (queries.len(), gallery.len());
    let rows = map_indexed(nq, |qi| {
        let q = &queries[qi];
        let q_local = q.local_concat();
        if q.global.iter().all(|&v| v == 0.0) {
            log::warn!("query {qi} has a zero-norm global embedding; cosine forced to 0");
        }
        let mut s_g = vec![0.0; ng];
        let mut s_l = vec![0.0; ng];
        for (gi, cand) in gallery.iter().enumerate() {
            s_g[gi] = cosine_plain(
                q.global.as_slice().unwrap(),
                cand.global.as_slice().unwrap(),
            );
            if q_local.len() > 0 && cand.locals.len() > 0 {
                let c_local = cand.local_concat();
                s_l[gi] = cosine_plain(q_local.as_slice().unwrap(), c_local.as_slice().unwrap());
            }
        }
        (s_g, s_l)
    });
    let mut s_global = Array2::zeros((nq, ng));
    let mut s_local = Array2::zeros((nq, ng));
    for (qi, (sg, sl)) in rows.into_iter().enumerate() {
        for gi in 0..ng {
            s_global[[qi, gi]] = sg[gi];
            s_local[[qi, gi]] = sl[gi];
        }
    }
    let s = &s_global + &s_local;
    SimilarityMatrix {
        s,
        s_global,
        s_local,
    }
}

/// Fraction of queries whose top-`k` gallery entries (descending score,
/// ties toward the lower index) contain at least one matching label.
pub fn rank_at_k(
    s: &Array2<f64>,
    query_labels: &[usize],
    gallery_labels: &[usize],
    k: usize,
) -> Result<f64, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let (nq, ng) = (s.shape()[0], s.shape()[1]);
    if ng == 0 {
        return Err(RetrievalError::EmptyGallery);
    }
    if query_labels.len() != nq || gallery_labels.len() != ng {
        return Err(RetrievalError::LabelShape);
    }
    let mut hits = 0usize;
    for qi in 0..nq {
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| {
            s[[qi, b]]
                .partial_cmp(&s[[qi, a]])
                .expect("similarity scores must be comparable")
                .then(a.cmp(&b))
        });
        if order
            .iter()
            .take(k)
            .any(|&gi| gallery_labels[gi] == query_labels[qi])
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / nq as f64)
}

/// One row of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub params: usize,
}

/// Train one model per flag combination and seed, evaluating Rank-K on
/// the held-out split. An empty `variants` list runs the Baseline row
/// only.
pub fn ablation_run(
    variants: &[ModuleFlags],
    cfg: &RunConfig,
    dataset: &Dataset,
    seeds: &[u64],
) -> Result<Vec<AblationRow>, TrainError> {
    let list: Vec<ModuleFlags> = if variants.is_empty() {
        vec![ModuleFlags::baseline()]
    } else {
        variants.to_vec()
    };
    let mut rows = Vec::new();
    for flags in &list {
        for &seed in seeds {
            let mut run = cfg.clone();
            run.model.flags = *flags;
            run.train.seed = seed;
            let outcome = training::train(&run, dataset, None)?;
            let last = outcome.metrics.last().expect("at least one epoch");
            rows.push(AblationRow {
                variant: flags.label(),
                seed,
                r1: outcome.best_r1.max(last.r1),
                r5: last.r5,
                r10: last.r10,
                params: outcome.model.param_count(),
            });
        }
    }
    Ok(rows)
}

/// `variant,seed,r1,r5,r10,params` CSV text for ablation rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,r1,r5,r10,params\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{}\n",
            r.variant, r.seed, r.r1, r.r5, r.r10, r.params
        ));
    }
    out
}
