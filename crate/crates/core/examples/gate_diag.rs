use manet_core::config::RunConfig;
use manet_core::datagen;
use manet_core::training;
use manet_core::params::Mode;

fn main() {
    let mut cfg = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("k=v");
        cfg.set(k, v).unwrap();
    }
    let ds = datagen::generate(&cfg.datagen, cfg.model.cap_len, cfg.model.image_h, cfg.model.image_w).unwrap();
    let (_, test_idx) = ds.split();
    let outcome = training::train(&cfg, &ds, None).unwrap();
    let model = &outcome.model;
    println!("best_r1={:.4}", outcome.best_r1);
    let samples: Vec<&datagen::Sample> = test_idx.iter().take(16).map(|&i| &ds.samples[i]).collect();
    let maps = model.attention_maps(&samples).unwrap().unwrap();

    // also need F (pre-RGL conv features): recompute via public pieces — use embed? No. Quick hack:
    // re-encode via a fresh graph using internals is not public; instead measure A statistics and
    // correlate with mask.
    let (fh, fw) = cfg.model.feat_hw();
    let (ih, iw) = (cfg.model.image_h, cfg.model.image_w);
    let c = maps[0].shape()[0];
    let mut on_mean = vec![0.0; c]; let mut off_mean = vec![0.0; c];
    let (mut on_n, mut off_n) = (0usize, 0usize);
    for (s, map) in samples.iter().zip(&maps) {
        for fy in 0..fh { for fx in 0..fw {
            let (y0, y1) = (fy * ih / fh, (fy + 1) * ih / fh);
            let (x0, x1) = (fx * iw / fw, (fx + 1) * iw / fw);
            let mut m = 0.0; let mut n = 0;
            for y in y0..y1 { for x in x0..x1 { m += s.body_mask[[y, x]]; n += 1; } }
            let on = m / n as f64 >= 0.5;
            for ci in 0..c {
                if on { on_mean[ci] += map[[ci, fy, fx]]; } else { off_mean[ci] += map[[ci, fy, fx]]; }
            }
            if on { on_n += 1; } else { off_n += 1; }
        }}
    }
    let mut ratios: Vec<f64> = (0..c).map(|ci| (on_mean[ci] / on_n as f64) / (off_mean[ci] / off_n as f64)).collect();
    let overall = (on_mean.iter().sum::<f64>() / on_n as f64) / (off_mean.iter().sum::<f64>() / off_n as f64);
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("per-channel gate on/off ratios: min={:.2} p25={:.2} med={:.2} p75={:.2} max={:.2} overall={:.3}",
        ratios[0], ratios[c/4], ratios[c/2], ratios[3*c/4], ratios[c-1], overall);
    let _ = Mode::Eval;
}
