//! The full network: encoders, optional suppression (RGL, CAF), optional
//! local alignment over shared centers, and a global head (either the
//! per-modality projections or the max-pool-plus-shared-projection
//! baseline). Flags select which blocks exist, so parameter counts vary
//! per ablation variant.

use ndarray::{Array1, Array2, Axis, IxDyn};
use thiserror::Error;

use crate::alignment::{AlignmentError, BaselineHead, EmbeddingBundle, GlobalHeads, Ila};
use crate::autodiff::{Arr, Graph, Tid};
use crate::config::{LossConfig, ModelConfig};
use crate::datagen::Sample;
use crate::encoders::{EncoderError, TextEncoder, VisualEncoder};
use crate::objectives::{
    consistency_loss, id_loss, ranking_loss, ClassifierBank, LossBreakdown, ObjectiveError,
};
use crate::params::{Binding, BufferStore, Mode, ParamStore};
use crate::parallel::map_indexed;
use crate::suppression::{Caf, Rgl};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// One training batch in array form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Arr, // [B, C_in, H, W]
    pub tokens: Vec<Vec<u32>>,
    pub valid: Vec<usize>,
    pub labels: Vec<usize>,
}

/// A recorded training forward: the tape plus the loss nodes.
pub struct TrainForward {
    pub graph: Graph,
    pub binding: Binding,
    pub total: Tid,
    pub breakdown: LossBreakdown,
    /// RGL attention node, when the block is active (introspection).
    pub attention: Option<Tid>,
}

pub struct Manet {
    pub cfg: ModelConfig,
    pub n_y: usize,
    pub vocab_size: usize,
    pub params: ParamStore,
    pub buffers: BufferStore,
    visual: VisualEncoder,
    text: TextEncoder,
    rgl: Option<Rgl>,
    caf: Option<Caf>,
    ila: Option<Ila>,
    global: Option<GlobalHeads>,
    baseline: Option<BaselineHead>,
    cls: ClassifierBank,
}

impl Manet {
    pub fn new(cfg: &ModelConfig, n_y: usize, vocab_size: usize, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut rng = crate::rng::substream(seed, 0xA0);
        let c = cfg.c();
        let (fh, fw) = cfg.feat_hw();
        let visual = VisualEncoder::new(
            &mut params,
            &mut rng,
            (cfg.image_c, cfg.image_h, cfg.image_w),
            &cfg.conv_channels,
        );
        let text = TextEncoder::new(&mut params, &mut rng, vocab_size, cfg.d_e, c);
        let rgl = cfg.flags.rgl.then(|| {
            Rgl::new(
                &mut params,
                &mut buffers,
                &mut rng,
                "rgl",
                c,
                fh,
                fw,
                cfg.r1,
                cfg.r2,
            )
        });
        let caf = cfg
            .flags
            .caf
            .then(|| Caf::new(&mut params, &mut rng, "caf", c, cfg.se_ratio));
        let ila = cfg.flags.ila.then(|| {
            Ila::new(
                &mut params,
                &mut buffers,
                &mut rng,
                "ila",
                c,
                cfg.d_c,
                cfg.k_centers,
                cfg.r3,
                cfg.assignment,
                cfg.center_init,
            )
        });
        let (global, baseline) = if cfg.flags.ga {
            (
                Some(GlobalHeads::new(&mut params, &mut rng, "ga", c, cfg.d_g)),
                None,
            )
        } else {
            (
                None,
                Some(BaselineHead::new(&mut params, &mut rng, "baseline", c, cfg.d_g)),
            )
        };
        let k_locals = if cfg.flags.ila { cfg.k_centers } else { 0 };
        let cls = ClassifierBank::new(&mut params, &mut rng, "cls", cfg.d_g, cfg.d_c, k_locals, n_y);
        Self {
            cfg: cfg.clone(),
            n_y,
            vocab_size,
            params,
            buffers,
            visual,
            text,
            rgl,
            caf,
            ila,
            global,
            baseline,
            cls,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Visual-backbone parameter group (everything else is the "rest"
    /// group with its own learning rate).
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("visual_encoder.")
    }

    pub fn embed_table_id(&self) -> crate::params::ParamId {
        self.text.embed
    }

    /// Hard-zero the padding embedding row (kept as an invariant after
    /// every optimizer step).
    pub fn freeze_padding_row(&mut self) {
        self.params
            .value_mut(self.text.embed)
            .index_axis_mut(Axis(0), 0)
            .fill(0.0);
    }

    /// Image branch through suppression: returns (F̃, F̂) plus the
    /// attention map when RGL is active.
    fn image_branch(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        images: Tid,
    ) -> Result<(Tid, Tid, Option<Tid>), ModelError> {
        let f = self.visual.encode(g, b, images)?;
        let (f_tilde, attention) = match &self.rgl {
            Some(rgl) => {
                let out = rgl.forward(g, b, buffers, mode, f);
                (out.gated, Some(out.attention))
            }
            None => (f, None),
        };
        let f_hat = match &self.caf {
            Some(caf) => caf.forward(g, b, f_tilde).restituted,
            None => f_tilde,
        };
        Ok((f_tilde, f_hat, attention))
    }

    fn global_pair(
        &self,
        g: &mut Graph,
        b: &Binding,
        f_hat: Tid,
        e: Tid,
        valid: &[usize],
    ) -> Result<(Tid, Tid), ModelError> {
        match (&self.global, &self.baseline) {
            (Some(ga), None) => {
                let v = ga.global_image(g, b, f_hat);
                let t = ga.global_text(g, b, e, valid)?;
                Ok((v, t))
            }
            (None, Some(base)) => {
                let v = base.image(g, b, f_hat);
                let t = base.text(g, b, e, valid)?;
                Ok((v, t))
            }
            _ => unreachable!("exactly one global head exists"),
        }
    }

    fn local_pair(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        f_hat: Tid,
        e: Tid,
    ) -> Option<(Tid, Tid)> {
        self.ila.as_ref().map(|ila| {
            let dims: Vec<usize> = g.value(f_hat).shape().to_vec();
            let (bs, c) = (dims[0], dims[1]);
            let n: usize = dims[2..].iter().product();
            let f3 = g.reshape(f_hat, &[bs, c, n]);
            ila.forward_joint(g, b, buffers, mode, f3, e)
        })
    }

    /// Record one training step's forward pass and loss.
    pub fn forward_train(
        &mut self,
        batch: &Batch,
        loss_cfg: &LossConfig,
        surrogate: &[usize],
    ) -> Result<TrainForward, ModelError> {
        let mut g = Graph::new();
        let binding = self.params.bind(&mut g);
        let images = g.constant(batch.images.clone());
        let mut buffers = std::mem::take(&mut self.buffers);
        let result = (|| -> Result<(Tid, LossBreakdown, Option<Tid>), ModelError> {
            let (f_tilde, f_hat, attention) =
                self.image_branch(&mut g, &binding, &mut buffers, Mode::Train, images)?;
            let e = self.text.encode(&mut g, &binding, &batch.tokens, &batch.valid)?;
            let (v_g, t_g) = self.global_pair(&mut g, &binding, f_hat, e, &batch.valid)?;
            let locals = self.local_pair(&mut g, &binding, &mut buffers, Mode::Train, f_hat, e);

            let id = id_loss(
                &mut g,
                &self.cls,
                &binding,
                v_g,
                t_g,
                locals.map(|l| l.0),
                locals.map(|l| l.1),
                &batch.labels,
            )?;
            let rank_g = ranking_loss(
                &mut g,
                v_g,
                t_g,
                surrogate,
                &batch.labels,
                loss_cfg.alpha1,
                loss_cfg.alpha2,
                loss_cfg.lambda1,
            )?;
            let rank_l = match locals {
                Some((v_l, t_l)) => {
                    let bsz = batch.labels.len();
                    let width = self.cfg.k_centers * self.cfg.d_c;
                    let v_flat = g.reshape(v_l, &[bsz, width]);
                    let t_flat = g.reshape(t_l, &[bsz, width]);
                    Some(ranking_loss(
                        &mut g,
                        v_flat,
                        t_flat,
                        surrogate,
                        &batch.labels,
                        loss_cfg.alpha1,
                        loss_cfg.alpha2,
                        loss_cfg.lambda1,
                    )?)
                }
                None => None,
            };
            let cons = match &self.caf {
                Some(_) => Some(consistency_loss(
                    &mut g,
                    f_tilde,
                    f_hat,
                    &batch.labels,
                    loss_cfg.alpha3,
                )?),
                None => None,
            };

            let mut total = g.add(id, rank_g);
            if let Some(rl) = rank_l {
                total = g.add(total, rl);
            }
            if let Some(cl) = cons {
                let weighted = g.scale(cl, loss_cfg.lambda2);
                total = g.add(total, weighted);
            }
            let breakdown = LossBreakdown {
                id: g.value(id)[[0]],
                rank_global: g.value(rank_g)[[0]],
                rank_local: rank_l.map_or(0.0, |t| g.value(t)[[0]]),
                cons: cons.map_or(0.0, |t| g.value(t)[[0]]),
                total: g.value(total)[[0]],
            };
            Ok((total, breakdown, attention))
        })();
        self.buffers = buffers;
        let (total, breakdown, attention) = result?;
        Ok(TrainForward {
            graph: g,
            binding,
            total,
            breakdown,
            attention,
        })
    }

    fn batch_images(&self, samples: &[&Sample]) -> Arr {
        let (c, h, w) = (self.cfg.image_c, self.cfg.image_h, self.cfg.image_w);
        let mut images = Arr::zeros(IxDyn(&[samples.len(), c, h, w]));
        for (i, s) in samples.iter().enumerate() {
            images.index_axis_mut(Axis(0), i).assign(&s.image);
        }
        images
    }

    /// Frozen-statistics embeddings for retrieval: one (image, text)
    /// bundle pair per sample. Chunks run in parallel; each chunk works
    /// on its own copy of the running statistics (evaluation reads them
    /// only).
    pub fn embed(&self, samples: &[&Sample]) -> Result<Vec<(EmbeddingBundle, EmbeddingBundle)>, ModelError> {
        const CHUNK: usize = 16;
        let n_chunks = samples.len().div_ceil(CHUNK);
        let results = map_indexed(n_chunks, |ci| -> Result<Vec<_>, ModelError> {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(samples.len());
            let chunk = &samples[lo..hi];
            let mut g = Graph::new();
            let binding = self.params.bind_frozen(&mut g);
            let mut buffers = self.buffers.clone();
            let images = g.constant(self.batch_images(chunk));
            let tokens: Vec<Vec<u32>> = chunk.iter().map(|s| s.tokens.clone()).collect();
            let valid: Vec<usize> = chunk.iter().map(|s| s.valid_length).collect();
            let (_, f_hat, _) =
                self.image_branch(&mut g, &binding, &mut buffers, Mode::Eval, images)?;
            let e = self.text.encode(&mut g, &binding, &tokens, &valid)?;
            let (v_g, t_g) = self.global_pair(&mut g, &binding, f_hat, e, &valid)?;
            let locals = self.local_pair(&mut g, &binding, &mut buffers, Mode::Eval, f_hat, e);
            let mut out = Vec::with_capacity(chunk.len());
            for i in 0..chunk.len() {
                let take = |t: Tid, g: &Graph| -> Array1<f64> {
                    g.value(t).index_axis(Axis(0), i).iter().cloned().collect()
                };
                let locals_of = |t: Option<Tid>, g: &Graph| -> Array2<f64> {
                    match t {
                        Some(t) => {
                            let sl = g.value(t).index_axis(Axis(0), i).to_owned();
                            let k = sl.shape()[0];
                            let d = sl.shape()[1];
                            Array2::from_shape_vec((k, d), sl.iter().cloned().collect()).unwrap()
                        }
                        None => Array2::zeros((0, self.cfg.d_c)),
                    }
                };
                let image_bundle = EmbeddingBundle {
                    global: take(v_g, &g),
                    locals: locals_of(locals.map(|l| l.0), &g),
                };
                let text_bundle = EmbeddingBundle {
                    global: take(t_g, &g),
                    locals: locals_of(locals.map(|l| l.1), &g),
                };
                out.push((image_bundle, text_bundle));
            }
            Ok(out)
        });
        let mut flat = Vec::with_capacity(samples.len());
        for r in results {
            flat.extend(r?);
        }
        Ok(flat)
    }

    /// Frozen-statistics RGL attention maps (`[C, h, w]` per sample), if
    /// the block exists.
    pub fn attention_maps(&self, samples: &[&Sample]) -> Result<Option<Vec<Arr>>, ModelError> {
        if self.rgl.is_none() {
            return Ok(None);
        }
        const CHUNK: usize = 16;
        let n_chunks = samples.len().div_ceil(CHUNK);
        let results = map_indexed(n_chunks, |ci| -> Result<Vec<Arr>, ModelError> {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(samples.len());
            let chunk = &samples[lo..hi];
            let mut g = Graph::new();
            let binding = self.params.bind_frozen(&mut g);
            let mut buffers = self.buffers.clone();
            let images = g.constant(self.batch_images(chunk));
            let (_, _, attention) =
                self.image_branch(&mut g, &binding, &mut buffers, Mode::Eval, images)?;
            let att = attention.expect("rgl present");
            Ok((0..chunk.len())
                .map(|i| g.value(att).index_axis(Axis(0), i).to_owned())
                .collect())
        });
        let mut flat = Vec::new();
        for r in results {
            flat.extend(r?);
        }
        Ok(Some(flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModuleFlags;
    use crate::config::DatagenConfig;
    use crate::datagen;

    fn tiny_dataset() -> crate::datagen::Dataset {
        let cfg = DatagenConfig {
            num_ids: 4,
            images_per_id: 4,
            holdout_per_id: 1,
            ..DatagenConfig::default()
        };
        datagen::generate(&cfg, 24, 48, 24).unwrap()
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            conv_channels: vec![8, 16],
            d_e: 8,
            d_g: 12,
            d_c: 8,
            k_centers: 2,
            r1: 2,
            r2: 4,
            r3: 2,
            se_ratio: 4,
            ..ModelConfig::default()
        }
    }

    fn batch_from(ds: &crate::datagen::Dataset, idx: &[usize], model: &Manet) -> Batch {
        let samples: Vec<&crate::datagen::Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
        Batch {
            images: model.batch_images(&samples),
            tokens: samples.iter().map(|s| s.tokens.clone()).collect(),
            valid: samples.iter().map(|s| s.valid_length).collect(),
            labels: samples.iter().map(|s| s.identity.id).collect(),
        }
    }

    #[test]
    fn full_model_trains_forward_with_finite_losses() {
        let ds = tiny_dataset();
        let mut model = Manet::new(&tiny_model_cfg(), 4, ds.vocab.size(), 3);
        let batch = batch_from(&ds, &[0, 4, 8, 12, 1, 5], &model);
        let surrogate = vec![4usize, 0, 1, 5, 2, 3]; // any valid indices
        let fwd = model
            .forward_train(&batch, &LossConfig::default(), &surrogate)
            .unwrap();
        assert!(fwd.breakdown.total.is_finite());
        assert!(fwd.breakdown.id > 0.0);
        assert!(fwd.breakdown.rank_global >= 0.0);
        assert!(fwd.breakdown.rank_local >= 0.0);
        assert!(fwd.breakdown.cons >= 0.0);
        let expected = fwd.breakdown.id
            + fwd.breakdown.rank_global
            + fwd.breakdown.rank_local
            + LossConfig::default().lambda2 * fwd.breakdown.cons;
        assert!((fwd.breakdown.total - expected).abs() < 1e-10);
        // gradients reach both ends of the network
        let grads = fwd.graph.backward(fwd.total);
        let conv0 = model.params.lookup("visual_encoder.conv0.weight").unwrap();
        let centers = model.params.lookup("ila.centers").unwrap();
        assert!(grads
            .get(fwd.binding.id(conv0))
            .is_some_and(|gr| gr.iter().any(|&v| v != 0.0)));
        assert!(grads
            .get(fwd.binding.id(centers))
            .is_some_and(|gr| gr.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn baseline_variant_has_fewer_params_and_no_locals() {
        let ds = tiny_dataset();
        let mut cfg = tiny_model_cfg();
        cfg.flags = ModuleFlags::baseline();
        let model = Manet::new(&cfg, 4, ds.vocab.size(), 3);
        let full = Manet::new(&tiny_model_cfg(), 4, ds.vocab.size(), 3);
        assert!(model.param_count() < full.param_count());
        let samples: Vec<&crate::datagen::Sample> = ds.samples.iter().take(3).collect();
        let bundles = model.embed(&samples).unwrap();
        assert_eq!(bundles.len(), 3);
        assert_eq!(bundles[0].0.locals.shape()[0], 0);
        assert_eq!(bundles[0].0.global.len(), cfg.d_g);
        assert!(model.attention_maps(&samples).unwrap().is_none());
    }

    #[test]
    fn embeddings_are_deterministic_and_chunking_invariant() {
        let ds = tiny_dataset();
        let model = Manet::new(&tiny_model_cfg(), 4, ds.vocab.size(), 3);
        let all: Vec<&crate::datagen::Sample> = ds.samples.iter().collect();
        let a = model.embed(&all).unwrap();
        let b = model.embed(&all).unwrap();
        for ((ia, ta), (ib, tb)) in a.iter().zip(&b) {
            assert_eq!(ia.global, ib.global);
            assert_eq!(ta.locals, tb.locals);
        }
    }

    #[test]
    fn param_groups_cover_every_parameter_exactly_once() {
        let ds = tiny_dataset();
        let model = Manet::new(&tiny_model_cfg(), 4, ds.vocab.size(), 3);
        let mut backbone = 0;
        let mut rest = 0;
        for (_, name, _) in model.params.iter() {
            if Manet::is_backbone_param(name) {
                backbone += 1;
            } else {
                rest += 1;
            }
        }
        assert!(backbone > 0);
        assert!(rest > 0);
        assert_eq!(backbone + rest, model.params.len());
    }

    #[test]
    fn attention_maps_have_feature_geometry() {
        let ds = tiny_dataset();
        let model = Manet::new(&tiny_model_cfg(), 4, ds.vocab.size(), 3);
        let samples: Vec<&crate::datagen::Sample> = ds.samples.iter().take(2).collect();
        let maps = model.attention_maps(&samples).unwrap().unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].shape(), &[16, 12, 6]);
        assert!(maps[0].iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
