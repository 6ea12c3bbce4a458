use manet_core::config::RunConfig;
use manet_core::datagen;
use manet_core::model::{Batch, Manet};
use manet_core::objectives::sample_surrogates;
use manet_core::rng::substream;
use manet_core::ndarray::{Axis, IxDyn};

fn main() {
    let cfg = RunConfig::default();
    let ds = datagen::generate(&cfg.datagen, cfg.model.cap_len, cfg.model.image_h, cfg.model.image_w).unwrap();
    let mut model = Manet::new(&cfg.model, ds.num_identities(), ds.vocab.size(), cfg.train.seed);
    let (train_idx, _) = ds.split();
    let indices = &train_idx[..32];
    let samples: Vec<&datagen::Sample> = indices.iter().map(|&i| &ds.samples[i]).collect();
    let mut images = manet_core::Arr::zeros(IxDyn(&[32, 3, 48, 24]));
    for (i, s) in samples.iter().enumerate() { images.index_axis_mut(Axis(0), i).assign(&s.image); }
    let batch = Batch {
        images,
        tokens: samples.iter().map(|s| s.tokens.clone()).collect(),
        valid: samples.iter().map(|s| s.valid_length).collect(),
        labels: samples.iter().map(|s| s.identity.id).collect(),
    };
    let mut rng = substream(9, 9);
    let surrogate = sample_surrogates(&batch.labels, &mut rng);
    let fwd = model.forward_train(&batch, &cfg.loss, &surrogate).unwrap();
    let grads = fwd.graph.backward(fwd.total);
    let att = fwd.attention.unwrap();
    let g = grads.get(att).expect("attention gets gradient");
    // channel-mean gradient on/off mask at feature cells
    let (fh, fw) = cfg.model.feat_hw();
    let c = g.shape()[1];
    let (mut on, mut off, mut on_n, mut off_n) = (0.0, 0.0, 0usize, 0usize);
    let (mut on_abs, mut off_abs) = (0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        for fy in 0..fh { for fx in 0..fw {
            let mut m = 0.0;
            for y in fy*4..(fy+1)*4 { for x in fx*4..(fx+1)*4 { m += s.body_mask[[y, x]]; } }
            let is_on = m / 16.0 >= 0.5;
            for ci in 0..c {
                let v = g[[i, ci, fy, fx]];
                if is_on { on += v; on_abs += v.abs(); } else { off += v; off_abs += v.abs(); }
            }
            if is_on { on_n += c; } else { off_n += c; }
        }}
    }
    println!("dL/dA: on-mask mean {:+.3e} (|.| {:.3e})   off-mask mean {:+.3e} (|.| {:.3e})",
        on / on_n as f64, on_abs / on_n as f64, off / off_n as f64, off_abs / off_n as f64);
}
