//! Desk-scale encoders producing the visual feature map `F [C, H, W]`
//! and the textual feature map `E [C, L]`.
//!
//! The visual backbone is a stack of stride-2 conv/ReLU stages; the text
//! backbone embeds tokens and runs a gated recurrent cell in both
//! directions, averaging the two hidden states per position. Positions at
//! or beyond a caption's valid length are masked to exactly zero, and the
//! recurrences themselves are step-masked so padding never leaks into
//! valid states.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Arr, Graph, Tid};
use crate::params::{he_normal, randn_arr, xavier_normal, Binding, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("valid_length {valid} exceeds caption length {len}")]
    ValidLength { valid: usize, len: usize },
    #[error("input shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// One direction of the recurrent text backbone (GRU-style gates).
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let mut w = |suffix: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            params.add(
                &format!("{name}.{suffix}"),
                xavier_normal(rng, &[rows, cols], cols),
            )
        };
        let w_z = w("w_z", hidden, d_in, rng);
        let u_z = w("u_z", hidden, hidden, rng);
        let w_r = w("w_r", hidden, d_in, rng);
        let u_r = w("u_r", hidden, hidden, rng);
        let w_h = w("w_h", hidden, d_in, rng);
        let u_h = w("u_h", hidden, hidden, rng);
        let b_z = params.add(&format!("{name}.b_z"), Arr::zeros(IxDyn(&[hidden])));
        let b_r = params.add(&format!("{name}.b_r"), Arr::zeros(IxDyn(&[hidden])));
        let b_h = params.add(&format!("{name}.b_h"), Arr::zeros(IxDyn(&[hidden])));
        Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    /// One recurrence step on a `[batch, d_in]` input. `step_mask` is a
    /// `[batch, hidden]` 0/1 constant: masked samples keep their previous
    /// state.
    fn step(&self, g: &mut Graph, b: &Binding, x: Tid, h: Tid, step_mask: Tid) -> Tid {
        let zx = g.linear(x, b.id(self.w_z));
        let zh = g.linear(h, b.id(self.u_z));
        let z_pre = g.add(zx, zh);
        let z_pre = g.add_bias(z_pre, b.id(self.b_z));
        let z = g.sigmoid(z_pre);

        let rx = g.linear(x, b.id(self.w_r));
        let rh = g.linear(h, b.id(self.u_r));
        let r_pre = g.add(rx, rh);
        let r_pre = g.add_bias(r_pre, b.id(self.b_r));
        let r = g.sigmoid(r_pre);

        let rh_gated = g.mul(r, h);
        let cx = g.linear(x, b.id(self.w_h));
        let ch = g.linear(rh_gated, b.id(self.u_h));
        let c_pre = g.add(cx, ch);
        let c_pre = g.add_bias(c_pre, b.id(self.b_h));
        let cand = g.tanh(c_pre);

        // h' = h + m ⊙ z ⊙ (cand − h)
        let delta = g.sub(cand, h);
        let mz = g.mul(z, step_mask);
        let update = g.mul(mz, delta);
        g.add(h, update)
    }
}

/// Word embedding plus bidirectional recurrence. Hidden size equals the
/// visual channel count `C` so `E` matches `F` channel-wise.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub vocab: usize,
    pub d_e: usize,
    pub hidden: usize,
}

impl TextEncoder {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        d_e: usize,
        hidden: usize,
    ) -> Self {
        let mut table = randn_arr(rng, &[vocab, d_e], 0.1);
        table.index_axis_mut(ndarray::Axis(0), 0).fill(0.0); // padding row
        let embed = params.add("text_encoder.embed", table);
        let fwd = GruCell::new(params, rng, "text_encoder.fwd", d_e, hidden);
        let bwd = GruCell::new(params, rng, "text_encoder.bwd", d_e, hidden);
        Self {
            embed,
            fwd,
            bwd,
            vocab,
            d_e,
            hidden,
        }
    }

    fn check_tokens(&self, tokens: &[Vec<u32>], valid: &[usize]) -> Result<usize, EncoderError> {
        assert_eq!(tokens.len(), valid.len());
        let l = tokens[0].len();
        for (seq, &v) in tokens.iter().zip(valid) {
            assert_eq!(seq.len(), l, "ragged token batch");
            if v > l {
                return Err(EncoderError::ValidLength { valid: v, len: l });
            }
            for &t in seq {
                if t as usize >= self.vocab {
                    return Err(EncoderError::TokenOutOfRange {
                        id: t,
                        vocab: self.vocab,
                    });
                }
            }
        }
        Ok(l)
    }

    /// Embedding lookup: `[batch, L, d_e]`. Padding columns are zero
    /// because row 0 of the table is frozen at zero.
    pub fn embed_words(
        &self,
        g: &mut Graph,
        b: &Binding,
        tokens: &[Vec<u32>],
        valid: &[usize],
    ) -> Result<Tid, EncoderError> {
        let l = self.check_tokens(tokens, valid)?;
        let flat: Vec<usize> = tokens
            .iter()
            .flat_map(|seq| seq.iter().map(|&t| t as usize))
            .collect();
        let rows = g.gather_rows(b.id(self.embed), &flat);
        Ok(g.reshape(rows, &[tokens.len(), l, self.d_e]))
    }

    /// Full text forward: `E [batch, C, L]` with columns at or beyond the
    /// valid length zeroed.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Binding,
        tokens: &[Vec<u32>],
        valid: &[usize],
    ) -> Result<Tid, EncoderError> {
        let l = self.check_tokens(tokens, valid)?;
        let batch = tokens.len();
        let x = self.embed_words(g, b, tokens, valid)?;
        let steps: Vec<Tid> = (0..l).map(|j| g.select_axis(x, 1, j)).collect();

        let step_mask = |g: &mut Graph, j: usize| {
            let mut m = Arr::zeros(IxDyn(&[batch, self.hidden]));
            for (bi, &v) in valid.iter().enumerate() {
                if j < v {
                    m.index_axis_mut(ndarray::Axis(0), bi).fill(1.0);
                }
            }
            g.constant(m)
        };

        let h0 = g.constant(Arr::zeros(IxDyn(&[batch, self.hidden])));
        let mut h_fwd = Vec::with_capacity(l);
        let mut h = h0;
        for (j, &xj) in steps.iter().enumerate() {
            let m = step_mask(g, j);
            h = self.fwd.step(g, b, xj, h, m);
            h_fwd.push(h);
        }
        let mut h_bwd = vec![h0; l];
        let mut hb = h0;
        for j in (0..l).rev() {
            let m = step_mask(g, j);
            hb = self.bwd.step(g, b, steps[j], hb, m);
            h_bwd[j] = hb;
        }

        let mut columns = Vec::with_capacity(l);
        for j in 0..l {
            let sum = g.add(h_fwd[j], h_bwd[j]);
            let avg = g.scale(sum, 0.5);
            let m = step_mask(g, j);
            let masked = g.mul(avg, m);
            columns.push(g.reshape(masked, &[batch, self.hidden, 1]));
        }
        Ok(g.concat_last(&columns))
    }
}

/// Stride-2 conv/ReLU stack standing in for a pretrained backbone.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    stages: Vec<(ParamId, ParamId)>,
    pub in_shape: (usize, usize, usize),
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;

impl VisualEncoder {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_shape: (usize, usize, usize),
        channels: &[usize],
    ) -> Self {
        let mut stages = Vec::new();
        let mut cin = in_shape.0;
        for (i, &cout) in channels.iter().enumerate() {
            let fan_in = cin * CONV_KERNEL * CONV_KERNEL;
            let w = params.add(
                &format!("visual_encoder.conv{i}.weight"),
                he_normal(rng, &[cout, cin, CONV_KERNEL, CONV_KERNEL], fan_in),
            );
            let bias = params.add(
                &format!("visual_encoder.conv{i}.bias"),
                Arr::zeros(IxDyn(&[cout])),
            );
            stages.push((w, bias));
            cin = cout;
        }
        Self { stages, in_shape }
    }

    /// `images [batch, c, h, w] -> F [batch, C, h', w']`.
    pub fn encode(&self, g: &mut Graph, b: &Binding, images: Tid) -> Result<Tid, EncoderError> {
        let got: Vec<usize> = g.value(images).shape().to_vec();
        let expected = vec![got[0], self.in_shape.0, self.in_shape.1, self.in_shape.2];
        if got != expected {
            return Err(EncoderError::ShapeMismatch { got, expected });
        }
        let mut x = images;
        for &(w, bias) in &self.stages {
            let conv = g.conv2d(x, b.id(w), b.id(bias), CONV_STRIDE, CONV_PAD);
            x = g.relu(conv);
        }
        Ok(x)
    }
}

/// Plain-array embedding of one caption as a `[d_e, L]` matrix (column
/// `j` is the embedding row of token `j`).
pub fn embed_words_single(tokens: &[u32], table: &Arr) -> Result<Arr, EncoderError> {
    assert_eq!(table.ndim(), 2);
    let (v, d_e) = (table.shape()[0], table.shape()[1]);
    let l = tokens.len();
    let mut out = Arr::zeros(IxDyn(&[d_e, l]));
    for (j, &t) in tokens.iter().enumerate() {
        if t as usize >= v {
            return Err(EncoderError::TokenOutOfRange { id: t, vocab: v });
        }
        for k in 0..d_e {
            out[[k, j]] = table[[t as usize, k]];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::rng::stream;
    use ndarray::Axis;

    fn build(vocab: usize, d_e: usize, hidden: usize) -> (ParamStore, TextEncoder) {
        let mut params = ParamStore::new();
        let mut rng = stream(11);
        let enc = TextEncoder::new(&mut params, &mut rng, vocab, d_e, hidden);
        (params, enc)
    }

    fn run_encode(
        params: &ParamStore,
        enc: &TextEncoder,
        tokens: &[Vec<u32>],
        valid: &[usize],
    ) -> Arr {
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let e = enc.encode(&mut g, &b, tokens, valid).unwrap();
        g.value(e).clone()
    }

    #[test]
    fn embedding_selects_rows_and_zeroes_padding() {
        let (params, enc) = build(6, 4, 5);
        let table = params.value(enc.embed);
        let single = embed_words_single(&[3], table).unwrap();
        for k in 0..4 {
            assert_eq!(single[[k, 0]], table[[3, k]]);
        }
        let allpad = embed_words_single(&[0, 0, 0], table).unwrap();
        assert!(allpad.iter().all(|&v| v == 0.0));
        assert!(embed_words_single(&[9], table).is_err());
    }

    #[test]
    fn embedding_shape_follows_config() {
        let (params, enc) = build(40, 32, 8);
        let table = params.value(enc.embed);
        let out = embed_words_single(&vec![1u32; 24], table).unwrap();
        assert_eq!(out.shape(), &[32, 24]);
    }

    #[test]
    fn zero_valid_length_gives_zero_map() {
        let (params, enc) = build(6, 4, 5);
        let e = run_encode(&params, &enc, &[vec![1, 2, 0, 0]], &[0]);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn valid_length_beyond_l_is_an_error() {
        let (params, enc) = build(6, 4, 5);
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let err = enc.encode(&mut g, &b, &[vec![1, 2]], &[3]);
        assert!(matches!(err, Err(EncoderError::ValidLength { .. })));
    }

    #[test]
    fn single_token_state_ignores_padding_tail() {
        let (params, enc) = build(6, 4, 5);
        let long = run_encode(&params, &enc, &[vec![3, 0, 0, 0, 0, 0]], &[1]);
        let short = run_encode(&params, &enc, &[vec![3]], &[1]);
        for c in 0..5 {
            assert!((long[[0, c, 0]] - short[[0, c, 0]]).abs() < 1e-12);
        }
        // everything past the valid span is exactly zero
        for j in 1..6 {
            for c in 0..5 {
                assert_eq!(long[[0, c, j]], 0.0);
            }
        }
    }

    #[test]
    fn reversed_input_with_swapped_directions_reverses_columns() {
        let mut params = ParamStore::new();
        let mut rng = stream(11);
        let enc = TextEncoder::new(&mut params, &mut rng, 8, 4, 5);
        // clone the store but swap the forward/backward parameter values
        let mut swapped = params.clone();
        let names = [
            "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h",
        ];
        for n in names {
            let f = params
                .value(params.lookup(&format!("text_encoder.fwd.{n}")).unwrap())
                .clone();
            let bwd = params
                .value(params.lookup(&format!("text_encoder.bwd.{n}")).unwrap())
                .clone();
            *swapped.value_mut(swapped.lookup(&format!("text_encoder.fwd.{n}")).unwrap()) = bwd;
            *swapped.value_mut(swapped.lookup(&format!("text_encoder.bwd.{n}")).unwrap()) = f;
        }
        let tokens = vec![vec![3u32, 1, 5, 2, 0, 0]];
        let valid = [4usize];
        let e = run_encode(&params, &enc, &tokens, &valid);
        let reversed = vec![vec![2u32, 5, 1, 3, 0, 0]];
        let e_rev = run_encode(&swapped, &enc, &reversed, &valid);
        for j in 0..4 {
            for c in 0..5 {
                assert!(
                    (e[[0, c, j]] - e_rev[[0, c, 3 - j]]).abs() < 1e-10,
                    "col {j} chan {c}"
                );
            }
        }
    }

    #[test]
    fn conv_stack_shapes() {
        let mut params = ParamStore::new();
        let mut rng = stream(5);
        let enc = VisualEncoder::new(&mut params, &mut rng, (3, 48, 16), &[32, 64]);
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let img = g.constant(randn_arr(&mut rng, &[2, 3, 48, 16], 1.0));
        let f = enc.encode(&mut g, &b, img).unwrap();
        assert_eq!(g.value(f).shape(), &[2, 64, 12, 4]);

        let bad = g.constant(Arr::zeros(IxDyn(&[2, 3, 32, 16])));
        assert!(matches!(
            enc.encode(&mut g, &b, bad),
            Err(EncoderError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_image_with_zero_bias_encodes_to_zero() {
        let mut params = ParamStore::new();
        let mut rng = stream(5);
        let enc = VisualEncoder::new(&mut params, &mut rng, (3, 48, 16), &[32, 64]);
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let img = g.constant(Arr::zeros(IxDyn(&[1, 3, 48, 16])));
        let f = enc.encode(&mut g, &b, img).unwrap();
        assert!(g.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_dims_feature_map_shape() {
        let mut params = ParamStore::new();
        let mut rng = stream(5);
        let enc = VisualEncoder::new(
            &mut params,
            &mut rng,
            (3, 384, 128),
            &[64, 128, 256, 2048],
        );
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let img = g.constant(Arr::zeros(IxDyn(&[1, 3, 384, 128])));
        let f = enc.encode(&mut g, &b, img).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 2048, 24, 8]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        // scalar probe: weighted sum of E (text) and F (image)
        let (params, enc) = build(6, 3, 4);
        let tokens = vec![vec![2u32, 4, 0, 0], vec![1, 3, 5, 0]];
        let valid = vec![2usize, 3];
        let weights = randn_arr(&mut stream(3), &[2, 4, 4], 1.0);
        let loss_of = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let e = enc.encode(&mut g, &b, &tokens, &valid).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(e, w);
            let s = g.sum_all(p);
            g.value(s)[[0]]
        };
        // analytic gradients
        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let e = enc.encode(&mut g, &binding, &tokens, &valid).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(e, w);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        let h = 1e-5;
        for (pid, name, value) in params.iter() {
            let analytic = grads
                .get(binding.id(pid))
                .cloned()
                .unwrap_or_else(|| Arr::zeros(value.raw_dim()));
            for idx in 0..value.len().min(40) {
                let mut plus = params.clone();
                plus.value_mut(pid).as_slice_mut().unwrap()[idx] += h;
                let mut minus = params.clone();
                minus.value_mut(pid).as_slice_mut().unwrap()[idx] -= h;
                let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let ana = analytic.as_slice().unwrap()[idx];
                let denom = ana.abs().max(num.abs()).max(1e-8);
                assert!(
                    ((ana - num) / denom).abs() < 1e-4,
                    "{name}[{idx}]: {ana} vs {num}"
                );
            }
        }
        let _ = Mode::Eval; // silence unused import in feature-combos
    }

    #[test]
    fn padding_row_stays_zero_at_init() {
        let (params, enc) = build(6, 4, 5);
        let row = params.value(enc.embed).index_axis(Axis(0), 0).to_owned();
        assert!(row.iter().all(|&v| v == 0.0));
    }
}
