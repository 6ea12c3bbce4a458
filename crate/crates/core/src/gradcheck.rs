//! Central finite-difference verification of every differentiable
//! operation against its tape gradient.
//!
//! Each check builds a scalar probe (a fixed random weighting of the
//! operation's outputs, or the loss itself), takes the analytic gradient
//! of every parameter and input element in one backward sweep, and
//! compares element-by-element against `(f(x+h) − f(x−h)) / 2h` with
//! `h = 1e-5` at 64-bit. Batch-norm layers run in frozen-statistics mode
//! with randomized running estimates, so the checked map is smooth and
//! non-trivial.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{GlobalHeads, Ila};
use crate::autodiff::{Arr, Graph, Tid};
use crate::config::AssignmentMode;
use crate::config::CenterInit;
use crate::encoders::{TextEncoder, VisualEncoder};
use crate::objectives::{consistency_loss, id_loss, ranking_loss, ClassifierBank};
use crate::params::{randn_arr, Binding, BufferStore, Mode, ParamStore};
use crate::rng::substream;
use crate::suppression::{Caf, RelationUnit, Rgl};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one operation's check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub elements: usize,
    pub passed: bool,
}

/// Operations the checker knows, in reporting order.
pub const OPS: &[&str] = &[
    "relation_vector",
    "rgl_forward",
    "instance_norm",
    "caf_forward",
    "project_shared",
    "ila_assign",
    "ila_aggregate",
    "global_image",
    "global_text",
    "id_loss",
    "ranking_loss",
    "consistency_loss",
    "encode_text",
    "encode_image",
];

/// The twelve operations the gradient acceptance gate runs.
pub const CORE_OPS: &[&str] = &[
    "relation_vector",
    "rgl_forward",
    "instance_norm",
    "caf_forward",
    "project_shared",
    "ila_assign",
    "ila_aggregate",
    "global_image",
    "global_text",
    "id_loss",
    "ranking_loss",
    "consistency_loss",
];

struct Probe {
    inputs: Vec<Arr>,
    build: Box<dyn Fn(&mut Graph, &[Tid]) -> Tid>,
}

fn run_probe(probe: &Probe) -> (f64, usize) {
    let mut g = Graph::new();
    let ids: Vec<Tid> = probe.inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let root = (probe.build)(&mut g, &ids);
    assert_eq!(g.value(root).len(), 1, "probe must be scalar");
    let grads = g.backward(root);
    let mut max_rel = 0.0f64;
    let mut count = 0usize;
    for (k, base) in probe.inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .cloned()
            .unwrap_or_else(|| Arr::zeros(base.raw_dim()));
        let analytic = analytic.as_slice().unwrap();
        for idx in 0..base.len() {
            let eval = |delta: f64| -> f64 {
                let mut pert = probe.inputs.clone();
                pert[k].as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let ids: Vec<Tid> = pert.iter().map(|a| g.leaf(a.clone())).collect();
                let root = (probe.build)(&mut g, &ids);
                g.value(root)[[0]]
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let ana = analytic[idx];
            let denom = ana.abs().max(numeric.abs());
            count += 1;
            if denom < 1e-8 {
                continue; // both effectively zero, below FD resolution
            }
            let rel = (ana - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    (max_rel, count)
}

/// Randomize parameters (around their init) and running statistics so the
/// frozen affine maps are non-trivial.
fn scramble(params: &mut ParamStore, buffers: &mut BufferStore, rng: &mut ChaCha8Rng) {
    for i in 0..params.len() {
        let id = crate::params::ParamId::from_index(i);
        let value = params.value_mut(id);
        for v in value.iter_mut() {
            *v += 0.2 * crate::rng::normal(rng);
        }
    }
    let names: Vec<String> = buffers.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let id = buffers.lookup(&name).unwrap();
        let value = buffers.value_mut(id);
        let is_var = name.ends_with("running_var");
        for v in value.iter_mut() {
            *v = if is_var {
                0.5 + rng.gen::<f64>()
            } else {
                crate::rng::normal(rng) * 0.3
            };
        }
    }
}

fn weighted_scalar(g: &mut Graph, outputs: &[Tid], rng: &mut ChaCha8Rng) -> Tid {
    let mut terms = Vec::with_capacity(outputs.len());
    for &out in outputs {
        let dims: Vec<usize> = g.value(out).shape().to_vec();
        let w = g.constant(randn_arr(rng, &dims, 1.0));
        let prod = g.mul(out, w);
        terms.push(g.sum_all(prod));
    }
    g.add_many(&terms)
}

fn params_plus(params: &ParamStore, extra: Vec<Arr>) -> Vec<Arr> {
    let mut inputs: Vec<Arr> = params.iter().map(|(_, _, v)| v.clone()).collect();
    inputs.extend(extra);
    inputs
}

fn probe_relation_vector(seed: u64, d_in: usize, d_mid: usize, d_out: usize) -> Probe {
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = substream(seed, 1);
    let unit = RelationUnit::new(&mut params, &mut buffers, &mut rng, "rel", d_in, d_mid, d_out);
    scramble(&mut params, &mut buffers, &mut rng);
    let n_params = params.len();
    let x = randn_arr(&mut rng, &[d_in], 1.0);
    let y = randn_arr(&mut rng, &[d_in], 1.0);
    let inputs = params_plus(&params, vec![x, y]);
    let mut wrng = substream(seed, 2);
    let w_dims = vec![d_out];
    let weights = randn_arr(&mut wrng, &w_dims, 1.0);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let mut bufs = buffers.clone();
            let r = unit.relation_vector(
                g,
                &binding,
                &mut bufs,
                Mode::Eval,
                ids[n_params],
                ids[n_params + 1],
            );
            let w = g.constant(weights.clone());
            let prod = g.mul(r, w);
            g.sum_all(prod)
        }),
    }
}

fn probe_rgl(seed: u64) -> Probe {
    let (bsz, c, h, w) = (2usize, 8usize, 3usize, 2usize);
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = substream(seed, 3);
    let rgl = Rgl::new(&mut params, &mut buffers, &mut rng, "rgl", c, h, w, 2, 2);
    scramble(&mut params, &mut buffers, &mut rng);
    let n_params = params.len();
    let feat = randn_arr(&mut rng, &[bsz, c, h, w], 1.0);
    let inputs = params_plus(&params, vec![feat]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let mut bufs = buffers.clone();
            let out = rgl.forward(g, &binding, &mut bufs, Mode::Eval, ids[n_params]);
            let mut wrng = substream(seed, 4);
            weighted_scalar(g, &[out.attention, out.gated], &mut wrng)
        }),
    }
}

fn probe_instance_norm(seed: u64) -> Probe {
    let (bsz, c, s) = (2usize, 4usize, 6usize);
    let mut rng = substream(seed, 5);
    let x = randn_arr(&mut rng, &[bsz, c, s], 1.0);
    let gamma = randn_arr(&mut rng, &[c], 0.3).mapv(|v| v + 1.0);
    let beta = randn_arr(&mut rng, &[c], 0.3);
    Probe {
        inputs: vec![x, gamma, beta],
        build: Box::new(move |g, ids| {
            let y = g.instance_norm(ids[0], ids[1], ids[2], crate::params::IN_EPS);
            let mut wrng = substream(seed, 6);
            weighted_scalar(g, &[y], &mut wrng)
        }),
    }
}

fn probe_caf(seed: u64) -> Probe {
    let (bsz, c, h, w) = (2usize, 6usize, 2usize, 2usize);
    let mut params = ParamStore::new();
    let mut rng = substream(seed, 7);
    let caf = Caf::new(&mut params, &mut rng, "caf", c, 2);
    let mut buffers = BufferStore::new();
    scramble(&mut params, &mut buffers, &mut rng);
    let n_params = params.len();
    let feat = randn_arr(&mut rng, &[bsz, c, h, w], 1.0);
    let inputs = params_plus(&params, vec![feat]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let out = caf.forward(g, &binding, ids[n_params]);
            let mut wrng = substream(seed, 8);
            weighted_scalar(
                g,
                &[out.restituted, out.residual, out.channel_gate],
                &mut wrng,
            )
        }),
    }
}

fn ila_fixture(
    seed: u64,
    c: usize,
    d_c: usize,
    k: usize,
    r3: usize,
) -> (ParamStore, BufferStore, Ila) {
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = substream(seed, 9);
    let ila = Ila::new(
        &mut params,
        &mut buffers,
        &mut rng,
        "ila",
        c,
        d_c,
        k,
        r3,
        AssignmentMode::Relation,
        CenterInit::StandardNormal,
    );
    scramble(&mut params, &mut buffers, &mut rng);
    (params, buffers, ila)
}

fn probe_project_shared(seed: u64) -> Probe {
    let (bsz, c, p, d_c) = (2usize, 6usize, 4usize, 5usize);
    let (params, buffers, ila) = ila_fixture(seed, c, d_c, 2, 1);
    let mut rng = substream(seed, 10);
    let feat = randn_arr(&mut rng, &[bsz, c, p], 1.0);
    let n_params = params.len();
    let inputs = params_plus(&params, vec![feat]);
    let _ = buffers;
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let z = ila.project_shared(g, &binding, ids[n_params]);
            let mut wrng = substream(seed, 11);
            weighted_scalar(g, &[z], &mut wrng)
        }),
    }
}

fn probe_ila_assign(seed: u64) -> Probe {
    let d_c = 6usize;
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = substream(seed, 12);
    let unit = RelationUnit::new(&mut params, &mut buffers, &mut rng, "ila.rel", d_c, 3, d_c);
    scramble(&mut params, &mut buffers, &mut rng);
    let n_params = params.len();
    let z = randn_arr(&mut rng, &[d_c], 1.0);
    let center = randn_arr(&mut rng, &[d_c], 1.0);
    let inputs = params_plus(&params, vec![z, center]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let mut bufs = buffers.clone();
            let a = unit.relation_vector(
                g,
                &binding,
                &mut bufs,
                Mode::Eval,
                ids[n_params],
                ids[n_params + 1],
            );
            let mut wrng = substream(seed, 13);
            weighted_scalar(g, &[a], &mut wrng)
        }),
    }
}

fn probe_ila_aggregate(seed: u64) -> Probe {
    let (bsz, p, d_c, k) = (2usize, 3usize, 6usize, 2usize);
    let (params, buffers, ila) = ila_fixture(seed, 4, d_c, k, 2);
    let mut rng = substream(seed, 14);
    let z = randn_arr(&mut rng, &[bsz, p, d_c], 1.0);
    let n_params = params.len();
    let inputs = params_plus(&params, vec![z]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let mut bufs = buffers.clone();
            let a = ila.assign(g, &binding, &mut bufs, Mode::Eval, ids[n_params]);
            let v = ila.aggregate(g, a, ids[n_params]);
            let mut wrng = substream(seed, 15);
            weighted_scalar(g, &[v], &mut wrng)
        }),
    }
}

fn probe_global_image(seed: u64) -> Probe {
    let (bsz, c, h, w, d_g) = (2usize, 5usize, 2usize, 2usize, 4usize);
    let mut params = ParamStore::new();
    let mut rng = substream(seed, 16);
    let heads = GlobalHeads::new(&mut params, &mut rng, "ga", c, d_g);
    let mut buffers = BufferStore::new();
    scramble(&mut params, &mut buffers, &mut rng);
    let n_params = params.len();
    let feat = randn_arr(&mut rng, &[bsz, c, h, w], 1.0);
    let inputs = params_plus(&params, vec![feat]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let v = heads.global_image(g, &binding, ids[n_params]);
            let mut wrng = substream(seed, 17);
            weighted_scalar(g, &[v], &mut wrng)
        }),
    }
}

fn probe_global_text(seed: u64) -> Probe {
    let (bsz, c, l, d_g) = (2usize, 5usize, 4usize, 4usize);
    let valid = vec![3usize, 2];
    let mut params = ParamStore::new();
    let mut rng = substream(seed, 18);
    let heads = GlobalHeads::new(&mut params, &mut rng, "ga", c, d_g);
    let mut buffers = BufferStore::new();
    scramble(&mut params, &mut buffers, &mut rng);
    let n_params = params.len();
    let e = randn_arr(&mut rng, &[bsz, c, l], 1.0);
    let inputs = params_plus(&params, vec![e]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let t = heads
                .global_text(g, &binding, ids[n_params], &valid)
                .expect("valid spans");
            let mut wrng = substream(seed, 19);
            weighted_scalar(g, &[t], &mut wrng)
        }),
    }
}

fn probe_id_loss(seed: u64) -> Probe {
    let (bsz, d_g, d_c, k, n_y) = (3usize, 5usize, 4usize, 2usize, 4usize);
    let mut params = ParamStore::new();
    let mut rng = substream(seed, 20);
    let bank = ClassifierBank::new(&mut params, &mut rng, "cls", d_g, d_c, k, n_y);
    let mut buffers = BufferStore::new();
    scramble(&mut params, &mut buffers, &mut rng);
    let n_params = params.len();
    let labels = vec![0usize, 2, 3];
    let v_g = randn_arr(&mut rng, &[bsz, d_g], 1.0);
    let t_g = randn_arr(&mut rng, &[bsz, d_g], 1.0);
    let v_l = randn_arr(&mut rng, &[bsz, k, d_c], 1.0);
    let t_l = randn_arr(&mut rng, &[bsz, k, d_c], 1.0);
    let inputs = params_plus(&params, vec![v_g, t_g, v_l, t_l]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            id_loss(
                g,
                &bank,
                &binding,
                ids[n_params],
                ids[n_params + 1],
                Some(ids[n_params + 2]),
                Some(ids[n_params + 3]),
                &labels,
            )
            .expect("valid labels")
        }),
    }
}

fn probe_ranking_loss(seed: u64) -> Probe {
    let (bsz, dim) = (4usize, 6usize);
    let mut rng = substream(seed, 21);
    let labels = vec![0usize, 0, 1, 1];
    let surrogate = vec![1usize, 0, 3, 2];
    let v = randn_arr(&mut rng, &[bsz, dim], 1.0);
    let t = randn_arr(&mut rng, &[bsz, dim], 1.0);
    Probe {
        inputs: vec![v, t],
        build: Box::new(move |g, ids| {
            ranking_loss(g, ids[0], ids[1], &surrogate, &labels, 0.2, 0.2, 0.1)
                .expect("non-degenerate batch")
        }),
    }
}

fn probe_consistency_loss(seed: u64) -> Probe {
    let (bsz, c, h, w) = (3usize, 4usize, 2usize, 2usize);
    let mut rng = substream(seed, 22);
    let labels = vec![0usize, 0, 1];
    let ft = randn_arr(&mut rng, &[bsz, c, h, w], 1.0);
    let fh = randn_arr(&mut rng, &[bsz, c, h, w], 1.0);
    Probe {
        inputs: vec![ft, fh],
        build: Box::new(move |g, ids| {
            consistency_loss(g, ids[0], ids[1], &labels, 0.2).expect("two identities")
        }),
    }
}

fn probe_encode_text(seed: u64) -> Probe {
    let (vocab, d_e, hidden) = (6usize, 3usize, 4usize);
    let tokens = vec![vec![2u32, 4, 0, 0], vec![1, 3, 5, 0]];
    let valid = vec![2usize, 3];
    let mut params = ParamStore::new();
    let mut rng = substream(seed, 23);
    let enc = TextEncoder::new(&mut params, &mut rng, vocab, d_e, hidden);
    let mut buffers = BufferStore::new();
    scramble(&mut params, &mut buffers, &mut rng);
    // keep the padding row frozen at zero, as the optimizer would
    params
        .value_mut(enc.embed)
        .index_axis_mut(ndarray::Axis(0), 0)
        .fill(0.0);
    let n_params = params.len();
    let inputs = params_plus(&params, vec![]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let e = enc.encode(g, &binding, &tokens, &valid).expect("valid tokens");
            let mut wrng = substream(seed, 24);
            weighted_scalar(g, &[e], &mut wrng)
        }),
    }
}

fn probe_encode_image(seed: u64) -> Probe {
    let mut params = ParamStore::new();
    let mut rng = substream(seed, 25);
    let enc = VisualEncoder::new(&mut params, &mut rng, (3, 8, 6), &[4, 6]);
    let mut buffers = BufferStore::new();
    scramble(&mut params, &mut buffers, &mut rng);
    let n_params = params.len();
    let image = Arr::from_shape_simple_fn(IxDyn(&[2, 3, 8, 6]), || {
        0.5 + 0.4 * crate::rng::normal(&mut rng)
    });
    let inputs = params_plus(&params, vec![image]);
    Probe {
        inputs,
        build: Box::new(move |g, ids| {
            let binding = Binding::from_ids(ids[..n_params].to_vec());
            let f = enc.encode(g, &binding, ids[n_params]).expect("shape ok");
            let mut wrng = substream(seed, 26);
            weighted_scalar(g, &[f], &mut wrng)
        }),
    }
}

/// Check one operation by name. `None` for an unknown name.
pub fn check_op(name: &str, seed: u64) -> Option<GradCheckReport> {
    let probe = match name {
        "relation_vector" => probe_relation_vector(seed, 10, 5, 4),
        "rgl_forward" => probe_rgl(seed),
        "instance_norm" => probe_instance_norm(seed),
        "caf_forward" => probe_caf(seed),
        "project_shared" => probe_project_shared(seed),
        "ila_assign" => probe_ila_assign(seed),
        "ila_aggregate" => probe_ila_aggregate(seed),
        "global_image" => probe_global_image(seed),
        "global_text" => probe_global_text(seed),
        "id_loss" => probe_id_loss(seed),
        "ranking_loss" => probe_ranking_loss(seed),
        "consistency_loss" => probe_consistency_loss(seed),
        "encode_text" => probe_encode_text(seed),
        "encode_image" => probe_encode_image(seed),
        _ => return None,
    };
    let (max_rel_err, elements) = run_probe(&probe);
    Some(GradCheckReport {
        op: name.to_string(),
        max_rel_err,
        elements,
        passed: max_rel_err < TOLERANCE,
    })
}

pub fn check_many(names: &[&str], seed: u64) -> Vec<GradCheckReport> {
    names
        .iter()
        .map(|n| check_op(n, seed).expect("known op"))
        .collect()
}

pub fn check_all(seed: u64) -> Vec<GradCheckReport> {
    check_many(OPS, seed)
}
