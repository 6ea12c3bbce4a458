//! End-to-end optimization: two learning-rate groups (visual backbone
//! vs everything else), linear warmup into step decay, an identity-
//! balanced P×Q batch sampler, Adam, per-epoch Rank-K metrics and
//! checkpointing. Every run is a pure function of its seed: batch
//! order, flips and surrogate draws all come from derived streams, and
//! every reduction folds in a fixed order.

use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;
use thiserror::Error;

use crate::autodiff::Arr;
use crate::config::{RunConfig, TrainConfig};
use crate::datagen::{Dataset, Sample};
use crate::io::{Archive, IoError};
use crate::model::{Batch, Manet, ModelError};
use crate::objectives::{sample_surrogates, ObjectiveError};
#[cfg(test)]
use crate::objectives::total_loss;
use crate::params::ParamStore;
use crate::retrieval;
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (ids {ids:?})")]
    NanLoss {
        epoch: usize,
        batch: usize,
        ids: Vec<usize>,
    },
    #[error("dataset provides no training samples")]
    EmptyTrainSplit,
    #[error("batch sampler needs at least 2 identities, dataset has {0}")]
    TooFewIdentities(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

/// Warmup then step decay: during the first `warmup_epochs` the rate
/// ramps linearly from 10% of base; afterwards each passed decay epoch
/// multiplies by `decay_factor`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize, base_lr: f64) -> f64 {
    if epoch < cfg.warmup_epochs {
        return base_lr * (0.1 + 0.9 * epoch as f64 / cfg.warmup_epochs as f64);
    }
    let decays = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    base_lr * cfg.decay_factor.powi(decays as i32)
}

/// Adam with per-parameter learning rates (group schedule applied by the
/// caller).
pub struct Adam {
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .iter()
            .map(|(_, _, value)| Arr::zeros(value.raw_dim()))
            .collect();
        let v = store
            .iter()
            .map(|(_, _, value)| Arr::zeros(value.raw_dim()))
            .collect();
        Self {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]`/`lrs[i]` line up with the store order;
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Arr>], lrs: &[f64]) {
        assert_eq!(grads.len(), store.len());
        assert_eq!(lrs.len(), store.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let Some(grad) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(grad, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(grad, |vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi
            });
            let lr = lrs[i];
            let value = store.value_mut(crate::params::ParamId::from_index(i));
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

/// Identity-balanced batches: P identities × Q images each, drawn from a
/// shuffled identity ring. Guarantees in-batch positives (Q > 1) and
/// negatives (P > 1).
pub fn epoch_batches(
    dataset: &Dataset,
    train_idx: &[usize],
    p: usize,
    q: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut by_id: Vec<(usize, Vec<usize>)> = Vec::new();
    for &s in train_idx {
        let id = dataset.samples[s].identity.id;
        match by_id.iter_mut().find(|(i, _)| *i == id) {
            Some((_, v)) => v.push(s),
            None => by_id.push((id, vec![s])),
        }
    }
    if by_id.len() < 2 {
        return Err(TrainError::TooFewIdentities(by_id.len()));
    }
    let p = p.min(by_id.len());
    let n_batches = train_idx.len().div_ceil(p * q);
    let mut id_order: Vec<usize> = (0..by_id.len()).collect();
    id_order.shuffle(rng);
    let mut cursor = 0usize;
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(p * q);
        for _ in 0..p {
            if cursor == id_order.len() {
                id_order.shuffle(rng);
                cursor = 0;
            }
            let (_, pool) = &by_id[id_order[cursor]];
            cursor += 1;
            if pool.len() >= q {
                let mut picks: Vec<usize> = pool.clone();
                picks.shuffle(rng);
                batch.extend(picks.into_iter().take(q));
            } else {
                for _ in 0..q {
                    batch.push(pool[rng.gen_range(0..pool.len())]);
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

fn flip_width(image: &Arr) -> Arr {
    let mut out = image.clone();
    let w = image.shape()[2];
    for c in 0..image.shape()[0] {
        for y in 0..image.shape()[1] {
            for x in 0..w {
                out[[c, y, x]] = image[[c, y, w - 1 - x]];
            }
        }
    }
    out
}

fn assemble_batch(
    dataset: &Dataset,
    indices: &[usize],
    flip_prob: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Batch {
    let s0 = &dataset.samples[indices[0]];
    let (c, h, w) = (s0.image.shape()[0], s0.image.shape()[1], s0.image.shape()[2]);
    let mut images = Arr::zeros(IxDyn(&[indices.len(), c, h, w]));
    let mut tokens = Vec::with_capacity(indices.len());
    let mut valid = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for (i, &s) in indices.iter().enumerate() {
        let sample = &dataset.samples[s];
        let img = if rng.gen_bool(flip_prob) {
            flip_width(&sample.image)
        } else {
            sample.image.clone()
        };
        images.index_axis_mut(Axis(0), i).assign(&img);
        tokens.push(sample.tokens.clone());
        valid.push(sample.valid_length);
        labels.push(sample.identity.id);
    }
    Batch {
        images,
        tokens,
        valid,
        labels,
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_id: f64,
    pub loss_rank: f64,
    pub loss_cons: f64,
    pub loss_total: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,loss_id,loss_rank,loss_cons,loss_total,r1,r5,r10\n");
    for m in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4}\n",
            m.epoch, m.lr, m.loss_id, m.loss_rank, m.loss_cons, m.loss_total, m.r1, m.r5, m.r10
        ));
    }
    out
}

pub struct TrainOutcome {
    pub model: Manet,
    pub metrics: Vec<EpochMetrics>,
    pub best_r1: f64,
    pub best_epoch: usize,
}

/// Rank-K of a model on a sample split (queries = captions, gallery =
/// images).
pub fn evaluate_split(
    model: &Manet,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, f64, f64), TrainError> {
    let samples: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
    let bundles = model.embed(&samples)?;
    let gallery: Vec<_> = bundles.iter().map(|(im, _)| im.clone()).collect();
    let queries: Vec<_> = bundles.iter().map(|(_, tx)| tx.clone()).collect();
    let labels = dataset.labels(indices);
    let sim = retrieval::fuse_similarity(&queries, &gallery);
    let r1 = retrieval::rank_at_k(&sim.s, &labels, &labels, 1)?;
    let r5 = retrieval::rank_at_k(&sim.s, &labels, &labels, 5)?;
    let r10 = retrieval::rank_at_k(&sim.s, &labels, &labels, 10)?;
    Ok((r1, r5, r10))
}

/// Train a model on the dataset's train split. When `out_dir` is given,
/// `metrics.csv`, `best.ckpt` and `last.ckpt` are written there.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let (train_idx, test_idx) = dataset.split();
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let seed = cfg.train.seed;
    let mut model = Manet::new(
        &cfg.model,
        dataset.num_identities(),
        dataset.vocab.size(),
        seed,
    );
    let mut adam = Adam::new(&model.params);
    let backbone_mask: Vec<bool> = model
        .params
        .iter()
        .map(|(_, name, _)| Manet::is_backbone_param(name))
        .collect();

    let eval_idx: &[usize] = if test_idx.is_empty() { &train_idx } else { &test_idx };
    let mut metrics = Vec::with_capacity(cfg.train.epochs);
    let mut best_r1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    for epoch in 0..cfg.train.epochs {
        let lr_b = lr_schedule(&cfg.train, epoch, cfg.train.lr_backbone);
        let lr_r = lr_schedule(&cfg.train, epoch, cfg.train.lr_rest);
        let lrs: Vec<f64> = backbone_mask
            .iter()
            .map(|&is_b| if is_b { lr_b } else { lr_r })
            .collect();
        let mut rng = substream(seed, 0x2000 + epoch as u64);
        let batches = epoch_batches(dataset, &train_idx, cfg.train.batch_p, cfg.train.batch_q, &mut rng)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (bi, indices) in batches.iter().enumerate() {
            let batch = assemble_batch(dataset, indices, cfg.train.flip_prob, &mut rng);
            let surrogate = sample_surrogates(&batch.labels, &mut rng);
            let fwd = model.forward_train(&batch, &cfg.loss, &surrogate)?;
            if !fwd.breakdown.total.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: bi,
                    ids: indices.clone(),
                });
            }
            let mut grads_by_node = fwd.graph.backward(fwd.total);
            let grads: Vec<Option<Arr>> = (0..model.params.len())
                .map(|i| grads_by_node.take(fwd.binding.ids()[i]))
                .collect();
            adam.step(&mut model.params, &grads, &lrs);
            model.freeze_padding_row();
            sums.0 += fwd.breakdown.id;
            sums.1 += fwd.breakdown.rank_global + fwd.breakdown.rank_local;
            sums.2 += fwd.breakdown.cons;
            sums.3 += fwd.breakdown.total;
        }
        let nb = batches.len() as f64;
        let (r1, r5, r10) = evaluate_split(&model, dataset, eval_idx)?;
        let row = EpochMetrics {
            epoch,
            lr: lr_r,
            loss_id: sums.0 / nb,
            loss_rank: sums.1 / nb,
            loss_cons: sums.2 / nb,
            loss_total: sums.3 / nb,
            r1,
            r5,
            r10,
        };
        metrics.push(row);
        if r1 > best_r1 {
            best_r1 = r1;
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.ckpt"), &model, &adam, epoch, cfg)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(
            &dir.join("last.ckpt"),
            &model,
            &adam,
            cfg.train.epochs.saturating_sub(1),
            cfg,
        )?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics)).map_err(|e| {
            IoError::Io {
                path: dir.join("metrics.csv").display().to_string(),
                source: e,
            }
        })?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        best_r1,
        best_epoch,
    })
}

// ---- checkpointing ---------------------------------------------------------

pub fn save_checkpoint(
    path: &Path,
    model: &Manet,
    adam: &Adam,
    epoch: usize,
    cfg: &RunConfig,
) -> Result<(), TrainError> {
    let hash = cfg.model_hash(model.n_y, model.vocab_size);
    let mut arch = Archive {
        meta: vec![
            ("epoch".into(), epoch.to_string()),
            ("model_hash".into(), format!("{hash:016x}")),
            ("n_y".into(), model.n_y.to_string()),
            ("vocab_size".into(), model.vocab_size.to_string()),
            ("adam_t".into(), adam.t.to_string()),
        ],
        entries: Vec::new(),
    };
    for (_, name, value) in model.params.iter() {
        arch.entries.push((format!("param.{name}"), value.clone()));
    }
    for (name, value) in model.buffers.iter() {
        arch.entries
            .push((format!("buffer.{name}"), value.clone().into_dyn()));
    }
    for (i, (_, name, _)) in model.params.iter().enumerate() {
        arch.entries.push((format!("adam.m.{name}"), adam.m[i].clone()));
        arch.entries.push((format!("adam.v.{name}"), adam.v[i].clone()));
    }
    arch.save(path)?;
    Ok(())
}

/// Rebuild a model (and optimizer state) from a checkpoint. The stored
/// model hash must match the supplied configuration.
pub fn load_checkpoint(
    path: &Path,
    cfg: &RunConfig,
) -> Result<(Manet, Adam, usize), TrainError> {
    let arch = Archive::load(path)?;
    let get_meta = |key: &str| -> Result<String, TrainError> {
        arch.meta_value(key)
            .map(|s| s.to_string())
            .ok_or_else(|| TrainError::Checkpoint {
                path: path.display().to_string(),
                reason: format!("missing meta key {key}"),
            })
    };
    let epoch: usize = get_meta("epoch")?.parse().unwrap_or(0);
    let n_y: usize = get_meta("n_y")?.parse().map_err(|_| TrainError::Checkpoint {
        path: path.display().to_string(),
        reason: "bad n_y".into(),
    })?;
    let vocab: usize = get_meta("vocab_size")?
        .parse()
        .map_err(|_| TrainError::Checkpoint {
            path: path.display().to_string(),
            reason: "bad vocab_size".into(),
        })?;
    let want = format!("{:016x}", cfg.model_hash(n_y, vocab));
    let got = get_meta("model_hash")?;
    if want != got {
        return Err(TrainError::Checkpoint {
            path: path.display().to_string(),
            reason: format!("config hash mismatch: checkpoint {got}, requested {want}"),
        });
    }
    let mut model = Manet::new(&cfg.model, n_y, vocab, cfg.train.seed);
    for (pid, name, value) in model.params.clone().iter() {
        let entry =
            arch.entry(&format!("param.{name}"))
                .ok_or_else(|| TrainError::Checkpoint {
                    path: path.display().to_string(),
                    reason: format!("missing parameter {name}"),
                })?;
        if entry.shape() != value.shape() {
            return Err(TrainError::Checkpoint {
                path: path.display().to_string(),
                reason: format!("shape mismatch for {name}"),
            });
        }
        *model.params.value_mut(pid) = entry.clone();
    }
    let buffer_names: Vec<String> = model
        .buffers
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    for name in buffer_names {
        let entry =
            arch.entry(&format!("buffer.{name}"))
                .ok_or_else(|| TrainError::Checkpoint {
                    path: path.display().to_string(),
                    reason: format!("missing buffer {name}"),
                })?;
        let id = model.buffers.lookup(&name).expect("buffer exists");
        *model.buffers.value_mut(id) = entry
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| TrainError::Checkpoint {
                path: path.display().to_string(),
                reason: format!("buffer {name} is not 1-D"),
            })?;
    }
    let mut adam = Adam::new(&model.params);
    adam.t = get_meta("adam_t")?.parse().unwrap_or(0);
    for (i, (_, name, _)) in model.params.iter().enumerate() {
        if let Some(m) = arch.entry(&format!("adam.m.{name}")) {
            adam.m[i] = m.clone();
        }
        if let Some(v) = arch.entry(&format!("adam.v.{name}")) {
            adam.v[i] = v.clone();
        }
    }
    Ok((model, adam, epoch))
}

/// Stable digest of all parameter values (determinism checks).
pub fn param_digest(store: &ParamStore) -> u64 {
    let mut bytes = Vec::new();
    for (_, name, value) in store.iter() {
        bytes.extend_from_slice(name.as_bytes());
        for &v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::rng::fnv1a64(&bytes)
}
