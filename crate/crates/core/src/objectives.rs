//! Training objective: identification loss over shared classifiers,
//! bi-directional dual-constrained ranking loss with surrogate texts,
//! and the identity-relevant content consistency loss, combined as
//! `total = id + rank + λ2 · cons`.
//!
//! Similarity is cosine throughout. Negatives are mined hardest-in-batch
//! (maximum cosine against the anchor among different-identity samples,
//! ties toward the lowest index); the mined indices are treated as
//! constants, gradients flow through the selected pairs.

use ndarray::Ix2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, Tid};
use crate::params::{xavier_normal, Binding, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("label {label} out of range for {n_y} identities")]
    LabelOutOfRange { label: usize, n_y: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),
    #[error("non-finite loss component: {0}")]
    NonFinite(&'static str),
}

/// Identity classifiers, one per head, each shared by both modalities.
/// Weights are stored `[n_y, dim]` so `logits = features · Wᵀ`.
#[derive(Debug, Clone)]
pub struct ClassifierBank {
    pub global: ParamId,
    pub locals: Vec<ParamId>,
    pub n_y: usize,
}

impl ClassifierBank {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_g: usize,
        d_c: usize,
        k_locals: usize,
        n_y: usize,
    ) -> Self {
        let global = params.add(
            &format!("{name}.global"),
            xavier_normal(rng, &[n_y, d_g], d_g),
        );
        let locals = (0..k_locals)
            .map(|k| {
                params.add(
                    &format!("{name}.local{k}"),
                    xavier_normal(rng, &[n_y, d_c], d_c),
                )
            })
            .collect();
        Self { global, locals, n_y }
    }
}

fn check_labels(labels: &[usize], n_y: usize) -> Result<(), ObjectiveError> {
    for &y in labels {
        if y >= n_y {
            return Err(ObjectiveError::LabelOutOfRange { label: y, n_y });
        }
    }
    Ok(())
}

/// Cross-entropy over every head and both modalities, batch-averaged.
/// `v_l`/`t_l` are `[batch, K, d_c]` local stacks when the local branch
/// is active.
#[allow(clippy::too_many_arguments)]
pub fn id_loss(
    g: &mut Graph,
    bank: &ClassifierBank,
    binding: &Binding,
    v_g: Tid,
    t_g: Tid,
    v_l: Option<Tid>,
    t_l: Option<Tid>,
    labels: &[usize],
) -> Result<Tid, ObjectiveError> {
    check_labels(labels, bank.n_y)?;
    let mut terms = Vec::new();
    for &feat in &[v_g, t_g] {
        let logits = g.linear(feat, binding.id(bank.global));
        terms.push(g.softmax_cross_entropy(logits, labels));
    }
    if let (Some(v_l), Some(t_l)) = (v_l, t_l) {
        for (k, &w) in bank.locals.iter().enumerate() {
            for &stack in &[v_l, t_l] {
                let feat = g.select_axis(stack, 1, k); // [B, d_c]
                let logits = g.linear(feat, binding.id(w));
                terms.push(g.softmax_cross_entropy(logits, labels));
            }
        }
    }
    Ok(g.add_many(&terms))
}

/// Plain-array cosine with the same zero-norm convention as the graph op.
pub fn cosine_plain(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Hardest (maximum-cosine) different-identity index for each anchor row
/// of `anchors` against `candidates`; ties break toward the lowest index.
fn mine_hardest(
    anchors: &ndarray::ArrayView2<f64>,
    candidates: &ndarray::ArrayView2<f64>,
    labels: &[usize],
) -> Result<Vec<usize>, ObjectiveError> {
    let n = anchors.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if labels[j] == labels[i] {
                continue;
            }
            let s = cosine_plain(
                anchors.row(i).as_slice().unwrap(),
                candidates.row(j).as_slice().unwrap(),
            );
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((j, s));
            }
        }
        match best {
            Some((j, _)) => out.push(j),
            None => {
                return Err(ObjectiveError::DegenerateBatch(
                    "no different-identity sample to mine as negative",
                ))
            }
        }
    }
    Ok(out)
}

/// Uniformly pick, per anchor, a different sample with the same identity
/// (the surrogate text); falls back to the anchor itself when its
/// identity appears only once in the batch.
pub fn sample_surrogates(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let mates: Vec<usize> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if mates.is_empty() {
                i
            } else {
                mates[rng.gen_range(0..mates.len())]
            }
        })
        .collect()
}

fn hinge(g: &mut Graph, margin: f64, pos: Tid, neg: Tid) -> Tid {
    // max(margin - pos + neg, 0)
    let d = g.sub(neg, pos);
    let shifted = g.add_scalar(d, margin);
    g.relu(shifted)
}

/// Bi-directional dual-constrained ranking loss for one granularity
/// (`v`, `t` are `[batch, dim]`), batch-averaged. `surrogate[i]` indexes
/// the weak-supervision text for anchor `i`.
#[allow(clippy::too_many_arguments)]
pub fn ranking_loss(
    g: &mut Graph,
    v: Tid,
    t: Tid,
    surrogate: &[usize],
    labels: &[usize],
    alpha1: f64,
    alpha2: f64,
    lambda1: f64,
) -> Result<Tid, ObjectiveError> {
    let n = labels.len();
    assert_eq!(g.value(v).shape()[0], n);
    assert_eq!(g.value(t).shape()[0], n);
    assert_eq!(surrogate.len(), n);
    let vv = g.value_rc(v);
    let tv = g.value_rc(t);
    let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();
    let t2 = tv.view().into_dimensionality::<Ix2>().unwrap();
    let hard_text = mine_hardest(&v2, &t2, labels)?; // t_n per image anchor
    let hard_image = mine_hardest(&t2, &v2, labels)?; // v_n per text anchor

    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let v_p = g.select_axis(v, 0, i);
        let t_p = g.select_axis(t, 0, i);
        let t_n = g.select_axis(t, 0, hard_text[i]);
        let v_n = g.select_axis(v, 0, hard_image[i]);
        let s_pos = g.cosine(v_p, t_p);
        let s_vp_tn = g.cosine(v_p, t_n);
        let s_vn_tp = g.cosine(v_n, t_p);
        let h1 = hinge(g, alpha1, s_pos, s_vp_tn);
        let h2 = hinge(g, alpha1, s_pos, s_vn_tp);
        let mut anchor = g.add(h1, h2);
        if lambda1 != 0.0 {
            let t_bar = g.select_axis(t, 0, surrogate[i]);
            let s_vp_tbar = g.cosine(v_p, t_bar);
            let s_vn_tbar = g.cosine(v_n, t_bar);
            let h3 = hinge(g, alpha2, s_vp_tbar, s_vp_tn);
            let h4 = hinge(g, alpha2, s_vp_tbar, s_vn_tbar);
            let h34 = g.add(h3, h4);
            let weighted = g.scale(h34, lambda1);
            anchor = g.add(anchor, weighted);
        }
        terms.push(anchor);
    }
    let total = g.add_many(&terms);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Identity-relevant content consistency loss between the pre- and
/// post-filtration maps (`[batch, C, h, w]`), batch-averaged.
pub fn consistency_loss(
    g: &mut Graph,
    f_tilde: Tid,
    f_hat: Tid,
    labels: &[usize],
    alpha3: f64,
) -> Result<Tid, ObjectiveError> {
    let dims: Vec<usize> = g.value(f_tilde).shape().to_vec();
    assert_eq!(dims.len(), 4);
    let (bs, c) = (dims[0], dims[1]);
    let s: usize = dims[2..].iter().product();
    assert_eq!(labels.len(), bs);
    let ft3 = g.reshape(f_tilde, &[bs, c, s]);
    let fh3 = g.reshape(f_hat, &[bs, c, s]);
    let pre = g.mean_last(ft3); // f̃ [B, C]
    let post = g.mean_last(fh3); // f̂ [B, C]

    let pre_v = g.value_rc(pre);
    let post_v = g.value_rc(post);
    let pre2 = pre_v.view().into_dimensionality::<Ix2>().unwrap();
    let post2 = post_v.view().into_dimensionality::<Ix2>().unwrap();
    let hard_post = mine_hardest(&pre2, &post2, labels)?; // f̂_n per f̃ anchor
    let hard_pre = mine_hardest(&post2, &pre2, labels)?; // f̃_n per f̂ anchor

    let mut terms = Vec::with_capacity(bs);
    for i in 0..bs {
        let a = g.select_axis(pre, 0, i);
        let b = g.select_axis(post, 0, i);
        let bn = g.select_axis(post, 0, hard_post[i]);
        let an = g.select_axis(pre, 0, hard_pre[i]);
        let s_pos = g.cosine(a, b);
        let s_a_bn = g.cosine(a, bn);
        let s_an_b = g.cosine(an, b);
        let h1 = hinge(g, alpha3, s_pos, s_a_bn);
        let h2 = hinge(g, alpha3, s_pos, s_an_b);
        terms.push(g.add(h1, h2));
    }
    let total = g.add_many(&terms);
    Ok(g.scale(total, 1.0 / bs as f64))
}

/// Scalar components of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub id: f64,
    pub rank_global: f64,
    pub rank_local: f64,
    pub cons: f64,
    pub total: f64,
}

/// Combine components: `total = id + rank_global + rank_local + λ2·cons`.
pub fn total_loss(
    id: f64,
    rank_global: f64,
    rank_local: f64,
    cons: f64,
    lambda2: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    for (v, name) in [
        (id, "id"),
        (rank_global, "rank_global"),
        (rank_local, "rank_local"),
        (cons, "cons"),
    ] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite(name));
        }
    }
    Ok(LossBreakdown {
        id,
        rank_global,
        rank_local,
        cons,
        total: id + rank_global + rank_local + lambda2 * cons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Arr;
    use crate::params::randn_arr;
    use crate::rng::stream;
    use ndarray::IxDyn;

    fn bank_fixture(d_g: usize, d_c: usize, k: usize, n_y: usize) -> (ParamStore, ClassifierBank) {
        let mut params = ParamStore::new();
        let mut rng = stream(61);
        let bank = ClassifierBank::new(&mut params, &mut rng, "cls", d_g, d_c, k, n_y);
        (params, bank)
    }

    #[test]
    fn confident_logits_drive_id_loss_to_zero() {
        let (mut params, bank) = bank_fixture(3, 2, 0, 3);
        // classifier = identity: feature e_y scaled large => confident
        let mut w = Arr::zeros(IxDyn(&[3, 3]));
        for i in 0..3 {
            w[[i, i]] = 1.0;
        }
        *params.value_mut(bank.global) = w;
        let mut g = Graph::new();
        let binding = params.bind_frozen(&mut g);
        let mut feats = Arr::zeros(IxDyn(&[2, 3]));
        feats[[0, 1]] = 1e3;
        feats[[1, 2]] = 1e3;
        let f = g.constant(feats);
        let loss = id_loss(&mut g, &bank, &binding, f, f, None, None, &[1, 2]).unwrap();
        assert!(g.value(loss)[[0]] < 1e-6);
    }

    #[test]
    fn uniform_logits_give_ln_ny_per_head_and_modality() {
        let (mut params, bank) = bank_fixture(3, 2, 2, 5);
        *params.value_mut(bank.global) = Arr::zeros(IxDyn(&[5, 3]));
        for &l in &bank.locals {
            *params.value_mut(l) = Arr::zeros(IxDyn(&[5, 2]));
        }
        let mut g = Graph::new();
        let binding = params.bind_frozen(&mut g);
        let v_g = g.constant(randn_arr(&mut stream(1), &[4, 3], 1.0));
        let t_g = g.constant(randn_arr(&mut stream(2), &[4, 3], 1.0));
        let v_l = g.constant(randn_arr(&mut stream(3), &[4, 2, 2], 1.0));
        let t_l = g.constant(randn_arr(&mut stream(4), &[4, 2, 2], 1.0));
        let loss = id_loss(
            &mut g,
            &bank,
            &binding,
            v_g,
            t_g,
            Some(v_l),
            Some(t_l),
            &[0, 1, 2, 3],
        )
        .unwrap();
        // (1 global + 2 local heads) x 2 modalities
        let expect = 6.0 * 5.0f64.ln();
        assert!((g.value(loss)[[0]] - expect).abs() < 1e-10);
    }

    #[test]
    fn hand_built_two_head_case_matches_manual_sum() {
        let (mut params, bank) = bank_fixture(2, 2, 1, 2);
        let mut wg = Arr::zeros(IxDyn(&[2, 2]));
        wg[[0, 0]] = 1.0;
        wg[[1, 1]] = 1.0;
        *params.value_mut(bank.global) = wg.clone();
        *params.value_mut(bank.locals[0]) = wg;
        let mut g = Graph::new();
        let binding = params.bind_frozen(&mut g);
        let feats = Arr::from_shape_vec(IxDyn(&[2, 2]), vec![0.5, -0.5, -1.0, 1.0]).unwrap();
        let locals =
            Arr::from_shape_vec(IxDyn(&[2, 1, 2]), vec![0.2, 0.1, -0.3, 0.4]).unwrap();
        let f = g.constant(feats.clone());
        let lo = g.constant(locals.clone());
        let labels = [0usize, 1];
        let loss = id_loss(&mut g, &bank, &binding, f, f, Some(lo), Some(lo), &labels).unwrap();
        // manual cross-entropy per head, both modalities identical here
        let ce = |x0: f64, x1: f64, y: usize| {
            let m = x0.max(x1);
            let lse = m + ((x0 - m).exp() + (x1 - m).exp()).ln();
            lse - if y == 0 { x0 } else { x1 }
        };
        let g_head = (ce(0.5, -0.5, 0) + ce(-1.0, 1.0, 1)) / 2.0;
        let l_head = (ce(0.2, 0.1, 0) + ce(-0.3, 0.4, 1)) / 2.0;
        let expect = 2.0 * g_head + 2.0 * l_head;
        assert!((g.value(loss)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_errors() {
        let (params, bank) = bank_fixture(2, 2, 0, 2);
        let mut g = Graph::new();
        let binding = params.bind_frozen(&mut g);
        let f = g.constant(randn_arr(&mut stream(5), &[1, 2], 1.0));
        assert!(matches!(
            id_loss(&mut g, &bank, &binding, f, f, None, None, &[2]),
            Err(ObjectiveError::LabelOutOfRange { label: 2, n_y: 2 })
        ));
    }

    #[test]
    fn separated_batch_has_zero_ranking_loss() {
        let mut g = Graph::new();
        // matched pairs identical (cos 1), different ids orthogonal (cos 0)
        let feats = Arr::from_shape_vec(
            IxDyn(&[2, 2]),
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let v = g.constant(feats.clone());
        let t = g.constant(feats);
        let loss = ranking_loss(&mut g, v, t, &[0, 1], &[0, 1], 0.2, 0.2, 0.1).unwrap();
        assert_eq!(g.value(loss)[[0]], 0.0);
    }

    #[test]
    fn two_identity_toy_batch_matches_hand_evaluation() {
        let mut g = Graph::new();
        let v_arr =
            Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.2, -0.3, 1.0]).unwrap();
        let t_arr =
            Arr::from_shape_vec(IxDyn(&[2, 2]), vec![0.9, 0.1, 0.3, -0.8]).unwrap();
        let (a1, a2, l1) = (0.2, 0.15, 0.3);
        let labels = [0usize, 1];
        let surrogate = [0usize, 1]; // single-image ids fall back to self
        let v = g.constant(v_arr.clone());
        let t = g.constant(t_arr.clone());
        let loss =
            ranking_loss(&mut g, v, t, &surrogate, &labels, a1, a2, l1).unwrap();
        // hand evaluation
        let row = |m: &Arr, i: usize| [m[[i, 0]], m[[i, 1]]];
        let mut total = 0.0;
        for i in 0..2 {
            let j = 1 - i; // the only negative
            let s_pos = cosine_plain(&row(&v_arr, i), &row(&t_arr, i));
            let s_vp_tn = cosine_plain(&row(&v_arr, i), &row(&t_arr, j));
            let s_vn_tp = cosine_plain(&row(&v_arr, j), &row(&t_arr, i));
            let s_vp_tbar = cosine_plain(&row(&v_arr, i), &row(&t_arr, i));
            let s_vn_tbar = cosine_plain(&row(&v_arr, j), &row(&t_arr, i));
            total += (a1 - s_pos + s_vp_tn).max(0.0)
                + (a1 - s_pos + s_vn_tp).max(0.0)
                + l1 * (a2 - s_vp_tbar + s_vp_tn).max(0.0)
                + l1 * (a2 - s_vp_tbar + s_vn_tbar).max(0.0);
        }
        total /= 2.0;
        assert!((g.value(loss)[[0]] - total).abs() < 1e-12);
    }

    #[test]
    fn lambda1_zero_disables_surrogate_terms_exactly() {
        let mut g = Graph::new();
        let v_arr = randn_arr(&mut stream(6), &[4, 3], 1.0);
        let t_arr = randn_arr(&mut stream(7), &[4, 3], 1.0);
        let labels = [0usize, 0, 1, 1];
        let surrogate = [1usize, 0, 3, 2];
        let v = g.constant(v_arr.clone());
        let t = g.constant(t_arr.clone());
        let with = ranking_loss(&mut g, v, t, &surrogate, &labels, 0.2, 0.2, 0.0).unwrap();
        // manual first-two-terms evaluation
        let row = |m: &Arr, i: usize| vec![m[[i, 0]], m[[i, 1]], m[[i, 2]]];
        let mut expect = 0.0;
        for i in 0..4 {
            let negs: Vec<usize> = (0..4).filter(|&j| labels[j] != labels[i]).collect();
            let s_pos = cosine_plain(&row(&v_arr, i), &row(&t_arr, i));
            let tn = negs
                .iter()
                .cloned()
                .max_by(|&a, &b| {
                    cosine_plain(&row(&v_arr, i), &row(&t_arr, a))
                        .partial_cmp(&cosine_plain(&row(&v_arr, i), &row(&t_arr, b)))
                        .unwrap()
                })
                .unwrap();
            let vn = negs
                .iter()
                .cloned()
                .max_by(|&a, &b| {
                    cosine_plain(&row(&v_arr, a), &row(&t_arr, i))
                        .partial_cmp(&cosine_plain(&row(&v_arr, b), &row(&t_arr, i)))
                        .unwrap()
                })
                .unwrap();
            expect += (0.2 - s_pos + cosine_plain(&row(&v_arr, i), &row(&t_arr, tn))).max(0.0);
            expect += (0.2 - s_pos + cosine_plain(&row(&v_arr, vn), &row(&t_arr, i))).max(0.0);
        }
        expect /= 4.0;
        assert!((g.value(with)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn single_identity_batch_is_degenerate() {
        let mut g = Graph::new();
        let v = g.constant(randn_arr(&mut stream(8), &[3, 2], 1.0));
        let t = g.constant(randn_arr(&mut stream(9), &[3, 2], 1.0));
        assert!(matches!(
            ranking_loss(&mut g, v, t, &[0, 1, 2], &[5, 5, 5], 0.2, 0.2, 0.1),
            Err(ObjectiveError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn identical_maps_with_separated_negatives_cost_nothing() {
        let mut g = Graph::new();
        // two orthogonal constant maps, one per identity
        let mut f = Arr::zeros(IxDyn(&[2, 2, 2, 1]));
        f[[0, 0, 0, 0]] = 1.0;
        f[[0, 0, 1, 0]] = 1.0;
        f[[1, 1, 0, 0]] = 1.0;
        f[[1, 1, 1, 0]] = 1.0;
        let ft = g.constant(f.clone());
        let fh = g.constant(f);
        let loss = consistency_loss(&mut g, ft, fh, &[0, 1], 0.2).unwrap();
        // s_pos = 1, negatives orthogonal (cos 0): hinge(0.2 - 1 + 0) = 0
        assert_eq!(g.value(loss)[[0]], 0.0);
    }

    #[test]
    fn three_sample_case_matches_exhaustive_enumeration() {
        let mut g = Graph::new();
        let ft_arr = randn_arr(&mut stream(10), &[3, 4, 2, 2], 1.0);
        let fh_arr = randn_arr(&mut stream(11), &[3, 4, 2, 2], 1.0);
        let labels = [0usize, 0, 1];
        let alpha3 = 0.25;
        let ft = g.constant(ft_arr.clone());
        let fh = g.constant(fh_arr.clone());
        let loss = consistency_loss(&mut g, ft, fh, &labels, alpha3).unwrap();
        // oracle: GAP then exhaustive hardest-negative search
        let gap = |m: &Arr, i: usize| -> Vec<f64> {
            (0..4)
                .map(|c| {
                    let mut s = 0.0;
                    for y in 0..2 {
                        for x in 0..2 {
                            s += m[[i, c, y, x]];
                        }
                    }
                    s / 4.0
                })
                .collect()
        };
        let mut expect = 0.0;
        for i in 0..3 {
            let a = gap(&ft_arr, i);
            let b = gap(&fh_arr, i);
            let s_pos = cosine_plain(&a, &b);
            let negs: Vec<usize> = (0..3).filter(|&j| labels[j] != labels[i]).collect();
            let best_bn = negs
                .iter()
                .map(|&j| cosine_plain(&a, &gap(&fh_arr, j)))
                .fold(f64::NEG_INFINITY, f64::max);
            let best_an = negs
                .iter()
                .map(|&j| cosine_plain(&gap(&ft_arr, j), &b))
                .fold(f64::NEG_INFINITY, f64::max);
            expect += (alpha3 - s_pos + best_bn).max(0.0) + (alpha3 - s_pos + best_an).max(0.0);
        }
        expect /= 3.0;
        assert!((g.value(loss)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn swapping_pre_and_post_batches_swaps_nothing_when_equal() {
        let mut g = Graph::new();
        let f_arr = randn_arr(&mut stream(12), &[3, 4, 2, 2], 1.0);
        let a = g.constant(f_arr.clone());
        let b = g.constant(f_arr);
        let l1 = consistency_loss(&mut g, a, b, &[0, 0, 1], 0.3).unwrap();
        let l2 = consistency_loss(&mut g, b, a, &[0, 0, 1], 0.3).unwrap();
        assert_eq!(g.value(l1)[[0]], g.value(l2)[[0]]);
    }

    #[test]
    fn consistency_needs_two_identities() {
        let mut g = Graph::new();
        let f = g.constant(randn_arr(&mut stream(13), &[2, 3, 2, 1], 1.0));
        assert!(matches!(
            consistency_loss(&mut g, f, f, &[4, 4], 0.2),
            Err(ObjectiveError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn total_combines_components_linearly() {
        let b = total_loss(1.0, 2.0, 3.0, 0.5, 1.0).unwrap();
        assert_eq!(b.total, 6.5);
        let b0 = total_loss(1.0, 2.0, 3.0, 123.0, 0.0).unwrap();
        assert_eq!(b0.total, 6.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn losses_are_nonnegative_on_random_batches() {
        for s in 0..10 {
            let mut g = Graph::new();
            let v = g.constant(randn_arr(&mut stream(100 + s), &[4, 3], 1.0));
            let t = g.constant(randn_arr(&mut stream(200 + s), &[4, 3], 1.0));
            let labels = [0usize, 0, 1, 1];
            let rank =
                ranking_loss(&mut g, v, t, &[1, 0, 3, 2], &labels, 0.2, 0.2, 0.1).unwrap();
            assert!(g.value(rank)[[0]] >= 0.0);
            let ft = g.constant(randn_arr(&mut stream(300 + s), &[4, 3, 2, 2], 1.0));
            let fh = g.constant(randn_arr(&mut stream(400 + s), &[4, 3, 2, 2], 1.0));
            let cons = consistency_loss(&mut g, ft, fh, &labels, 0.2).unwrap();
            assert!(g.value(cons)[[0]] >= 0.0);
        }
    }

    #[test]
    fn surrogate_sampling_prefers_same_identity_mates() {
        let mut rng = stream(14);
        let labels = [0usize, 0, 1, 2, 2, 2];
        for _ in 0..20 {
            let s = sample_surrogates(&labels, &mut rng);
            assert_eq!(s[0], 1);
            assert_eq!(s[1], 0);
            assert_eq!(s[2], 2); // lone identity falls back to itself
            assert!(s[3] == 4 || s[3] == 5);
            assert!(labels[s[4]] == 2 && s[4] != 4);
        }
    }
}
