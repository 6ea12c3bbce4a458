//! Image-specific information suppression.
//!
//! RGL computes a relation vector between every pair of spatial
//! positions (a learned, BN/ReLU-shaped difference embedding), gathers
//! each position's relations to all positions into one long vector and
//! projects it, together with the position's own feature, through a
//! sigmoid head into a per-position per-channel gate. CAF then strips
//! instance style with instance normalization and restitutes
//! identity-relevant channels from the removed residual via a
//! squeeze-excite gate.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tid};
use crate::params::{
    he_normal, xavier_normal, Binding, BnLayer, BufferStore, Mode, ParamId, ParamStore, IN_EPS,
};

/// Learned relation function between two vectors:
/// `r(x, y) = ReLU(BN(W (xθ − yφ)))` with `xθ = ReLU(BN(Wθ x))` and
/// `yφ = ReLU(BN(Wφ y))`.
#[derive(Debug, Clone)]
pub struct RelationUnit {
    pub w_theta: ParamId,
    pub w_phi: ParamId,
    pub w: ParamId,
    pub bn_theta: BnLayer,
    pub bn_phi: BnLayer,
    pub bn_out: BnLayer,
    pub d_in: usize,
    pub d_mid: usize,
    pub d_out: usize,
}

impl RelationUnit {
    pub fn new(
        params: &mut ParamStore,
        buffers: &mut BufferStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_mid: usize,
        d_out: usize,
    ) -> Self {
        let w_theta = params.add(
            &format!("{name}.w_theta"),
            he_normal(rng, &[d_mid, d_in], d_in),
        );
        let w_phi = params.add(
            &format!("{name}.w_phi"),
            he_normal(rng, &[d_mid, d_in], d_in),
        );
        let w = params.add(&format!("{name}.w"), he_normal(rng, &[d_out, d_mid], d_mid));
        let bn_theta = BnLayer::new(params, buffers, &format!("{name}.bn_theta"), d_mid);
        let bn_phi = BnLayer::new(params, buffers, &format!("{name}.bn_phi"), d_mid);
        let bn_out = BnLayer::new(params, buffers, &format!("{name}.bn_out"), d_out);
        Self {
            w_theta,
            w_phi,
            w,
            bn_theta,
            bn_phi,
            bn_out,
            d_in,
            d_mid,
            d_out,
        }
    }

    /// θ-side embedding of `x [rows, d_in] -> [rows, d_mid]`.
    pub fn theta(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        x: Tid,
    ) -> Tid {
        let lin = g.linear(x, b.id(self.w_theta));
        let bn = self.bn_theta.apply(g, lin, b, buffers, mode);
        g.relu(bn)
    }

    /// φ-side embedding of `y [rows, d_in] -> [rows, d_mid]`.
    pub fn phi(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        y: Tid,
    ) -> Tid {
        let lin = g.linear(y, b.id(self.w_phi));
        let bn = self.bn_phi.apply(g, lin, b, buffers, mode);
        g.relu(bn)
    }

    /// Output stage on difference rows: `[rows, d_mid] -> [rows, d_out]`.
    /// Exposed so callers can push several modalities through one batch
    /// of statistics.
    pub fn relate_rows(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        diff_rows: Tid,
    ) -> Tid {
        let w_applied = g.linear(diff_rows, b.id(self.w));
        let bn = self.bn_out.apply(g, w_applied, b, buffers, mode);
        g.relu(bn)
    }

    fn output_stage(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        diff: Tid,
        lead: &[usize],
    ) -> Tid {
        let rows: usize = lead.iter().product();
        let flat = g.reshape(diff, &[rows, self.d_mid]);
        let act = self.relate_rows(g, b, buffers, mode, flat);
        let mut out_dims = lead.to_vec();
        out_dims.push(self.d_out);
        g.reshape(act, &out_dims)
    }

    /// All-pairs relations between per-position embeddings:
    /// `xθ [batch, nx, d_mid]`, `yφ [batch, ny, d_mid]`
    /// `-> [batch, nx, ny, d_out]`.
    pub fn relate_pairs(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        x_theta: Tid,
        y_phi: Tid,
    ) -> Tid {
        let (bs, nx) = {
            let s = g.value(x_theta).shape();
            (s[0], s[1])
        };
        let ny = g.value(y_phi).shape()[1];
        let diff = g.pairwise_diff(x_theta, y_phi);
        self.output_stage(g, b, buffers, mode, diff, &[bs, nx, ny])
    }

    /// Relations against a batch-shared set of vectors (topic centers):
    /// `xθ [batch, nx, d_mid]`, `yφ [k, d_mid] -> [batch, nx, k, d_out]`.
    pub fn relate_shared(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        x_theta: Tid,
        y_phi: Tid,
    ) -> Tid {
        let (bs, nx) = {
            let s = g.value(x_theta).shape();
            (s[0], s[1])
        };
        let k = g.value(y_phi).shape()[0];
        let diff = g.pairwise_diff_shared(x_theta, y_phi);
        self.output_stage(g, b, buffers, mode, diff, &[bs, nx, k])
    }

    /// Single-pair relation vector `r(x, y)` for 1-D `x`, `y`.
    pub fn relation_vector(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        x: Tid,
        y: Tid,
    ) -> Tid {
        assert_eq!(g.value(x).ndim(), 1);
        assert_eq!(g.value(y).ndim(), 1);
        let x2 = g.reshape(x, &[1, self.d_in]);
        let y2 = g.reshape(y, &[1, self.d_in]);
        let xt = self.theta(g, b, buffers, mode, x2);
        let yp = self.phi(g, b, buffers, mode, y2);
        let xt3 = g.reshape(xt, &[1, 1, self.d_mid]);
        let yp3 = g.reshape(yp, &[1, 1, self.d_mid]);
        let rel = self.relate_pairs(g, b, buffers, mode, xt3, yp3);
        g.reshape(rel, &[self.d_out])
    }
}

/// Relation-guided localization over a `[batch, C, H, W]` feature map.
#[derive(Debug, Clone)]
pub struct Rgl {
    pub unit: RelationUnit,
    pub w_a: ParamId,
    pub bn_a: BnLayer,
    pub channels: usize,
    pub positions: usize,
}

pub struct RglOut {
    /// Per-position per-channel sigmoid gates, shaped like the input map.
    pub attention: Tid,
    /// Gated feature map `F̃ = A ⊙ F`.
    pub gated: Tid,
}

impl Rgl {
    pub fn new(
        params: &mut ParamStore,
        buffers: &mut BufferStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        feat_h: usize,
        feat_w: usize,
        r1: usize,
        r2: usize,
    ) -> Self {
        assert_eq!(channels % r1, 0, "C must be divisible by r1");
        assert_eq!(channels % r2, 0, "C must be divisible by r2");
        let positions = feat_h * feat_w;
        let unit = RelationUnit::new(
            params,
            buffers,
            rng,
            &format!("{name}.rel"),
            channels,
            channels / r1,
            channels / r2,
        );
        let gate_in = channels + positions * (channels / r2);
        let w_a = params.add(
            &format!("{name}.w_a"),
            xavier_normal(rng, &[channels, gate_in], gate_in),
        );
        let bn_a = BnLayer::new(params, buffers, &format!("{name}.bn_a"), channels);
        Self {
            unit,
            w_a,
            bn_a,
            channels,
            positions,
        }
    }

    /// Gate width expected by `w_a` (`C + N·C/r2`).
    pub fn gate_input_width(&self) -> usize {
        self.channels + self.positions * self.unit.d_out
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
        feat: Tid,
    ) -> RglOut {
        let dims: Vec<usize> = g.value(feat).shape().to_vec();
        assert_eq!(dims.len(), 4, "rgl expects [batch, c, h, w]");
        let (bs, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        assert_eq!(c, self.channels);
        let n = h * w;
        assert_eq!(n, self.positions, "rgl built for a different map size");

        let f3 = g.reshape(feat, &[bs, c, n]);
        let rows = g.permute(f3, &[0, 2, 1]); // [B, N, C]
        let rows2 = g.reshape(rows, &[bs * n, c]);
        let theta2 = self.unit.theta(g, b, buffers, mode, rows2);
        let phi2 = self.unit.phi(g, b, buffers, mode, rows2);
        let theta3 = g.reshape(theta2, &[bs, n, self.unit.d_mid]);
        let phi3 = g.reshape(phi2, &[bs, n, self.unit.d_mid]);
        // relations of position i to every position j, j ordered row-major
        let rel = self.unit.relate_pairs(g, b, buffers, mode, theta3, phi3);
        let global_rel = g.reshape(rel, &[bs, n, n * self.unit.d_out]);
        let cat = g.concat_last(&[rows, global_rel]);
        let proj = g.linear(cat, b.id(self.w_a)); // [B, N, C]
        let proj2 = g.reshape(proj, &[bs * n, c]);
        let bn = self.bn_a.apply(g, proj2, b, buffers, mode);
        let gates = g.sigmoid(bn);
        let gates3 = g.reshape(gates, &[bs, n, c]);
        let gates_cn = g.permute(gates3, &[0, 2, 1]);
        let attention = g.reshape(gates_cn, &[bs, c, h, w]);
        let gated = g.mul(attention, feat);
        RglOut { attention, gated }
    }

    /// The final gating product alone, for forcing attention in tests.
    pub fn apply_gate(g: &mut Graph, feat: Tid, attention: Tid) -> Tid {
        g.mul(attention, feat)
    }
}

/// Channel attention filtration: instance-normalize, then gate the
/// removed residual back per channel.
#[derive(Debug, Clone)]
pub struct Caf {
    pub in_gamma: ParamId,
    pub in_beta: ParamId,
    pub se_reduce: ParamId,
    pub se_expand: ParamId,
    pub channels: usize,
}

pub struct CafOut {
    /// Restituted map `F̂ = F̃_IN + w_C ⊙ R`.
    pub restituted: Tid,
    /// Instance-normalized map `F̃_IN`.
    pub normalized: Tid,
    /// Removed residual `R = F̃ − F̃_IN`.
    pub residual: Tid,
    /// Channel gate `w_C [batch, C]`.
    pub channel_gate: Tid,
}

impl Caf {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        se_ratio: usize,
    ) -> Self {
        assert_eq!(channels % se_ratio, 0, "C must be divisible by se_ratio");
        let hidden = channels / se_ratio;
        let in_gamma = params.add(
            &format!("{name}.in_gamma"),
            crate::autodiff::Arr::ones(ndarray::IxDyn(&[channels])),
        );
        let in_beta = params.add(
            &format!("{name}.in_beta"),
            crate::autodiff::Arr::zeros(ndarray::IxDyn(&[channels])),
        );
        let se_reduce = params.add(
            &format!("{name}.se_reduce"),
            he_normal(rng, &[hidden, channels], channels),
        );
        let se_expand = params.add(
            &format!("{name}.se_expand"),
            xavier_normal(rng, &[channels, hidden], hidden),
        );
        Self {
            in_gamma,
            in_beta,
            se_reduce,
            se_expand,
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, feat: Tid) -> CafOut {
        let dims: Vec<usize> = g.value(feat).shape().to_vec();
        assert_eq!(dims.len(), 4, "caf expects [batch, c, h, w]");
        let (bs, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        assert_eq!(c, self.channels);
        let s = h * w;
        let x3 = g.reshape(feat, &[bs, c, s]);
        let norm3 = g.instance_norm(x3, b.id(self.in_gamma), b.id(self.in_beta), IN_EPS);
        let res3 = g.sub(x3, norm3);
        let gap = g.mean_last(res3); // [B, C]
        let red = g.linear(gap, b.id(self.se_reduce));
        let red = g.relu(red);
        let exp = g.linear(red, b.id(self.se_expand));
        let channel_gate = g.sigmoid(exp); // [B, C]
        let gated = g.mul_bc_channel(res3, channel_gate);
        let hat3 = g.add(norm3, gated);
        CafOut {
            restituted: g.reshape(hat3, &[bs, c, h, w]),
            normalized: g.reshape(norm3, &[bs, c, h, w]),
            residual: g.reshape(res3, &[bs, c, h, w]),
            channel_gate,
        }
    }

    /// Restitution with an externally supplied channel gate (tests force
    /// all-ones / all-zeros).
    pub fn restitute_with_gate(
        g: &mut Graph,
        normalized: Tid,
        residual: Tid,
        gate: Tid,
    ) -> Tid {
        let dims: Vec<usize> = g.value(normalized).shape().to_vec();
        let (bs, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let n3 = g.reshape(normalized, &[bs, c, h * w]);
        let r3 = g.reshape(residual, &[bs, c, h * w]);
        let gated = g.mul_bc_channel(r3, gate);
        let out = g.add(n3, gated);
        g.reshape(out, &[bs, c, h, w])
    }
}

/// Standalone instance normalization of a `[batch, C, H, W]` map with
/// explicit affine parameters.
pub fn instance_norm_map(g: &mut Graph, feat: Tid, gamma: Tid, beta: Tid) -> Tid {
    let dims: Vec<usize> = g.value(feat).shape().to_vec();
    assert_eq!(dims.len(), 4);
    let (bs, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let x3 = g.reshape(feat, &[bs, c, h * w]);
    let out = g.instance_norm(x3, gamma, beta, IN_EPS);
    g.reshape(out, &[bs, c, h, w])
}
