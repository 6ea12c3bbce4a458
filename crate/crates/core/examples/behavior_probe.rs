use manet_core::config::RunConfig;
use manet_core::datagen;
use manet_core::training;

fn attention_ratio(model: &manet_core::Manet, ds: &datagen::Dataset, idx: &[usize], cfg: &RunConfig) -> f64 {
    let samples: Vec<&datagen::Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
    let maps = model.attention_maps(&samples).unwrap().unwrap();
    let (fh, fw) = cfg.model.feat_hw();
    let (ih, iw) = (cfg.model.image_h, cfg.model.image_w);
    let (mut on_sum, mut on_n, mut off_sum, mut off_n) = (0.0, 0usize, 0.0, 0usize);
    for (s, map) in samples.iter().zip(&maps) {
        let c = map.shape()[0];
        for fy in 0..fh {
            for fx in 0..fw {
                let (y0, y1) = (fy * ih / fh, (fy + 1) * ih / fh);
                let (x0, x1) = (fx * iw / fw, (fx + 1) * iw / fw);
                let mut m = 0.0; let mut n = 0;
                for y in y0..y1 { for x in x0..x1 { m += s.body_mask[[y, x]]; n += 1; } }
                let on = m / n as f64 >= 0.5;
                let mut a = 0.0;
                for ci in 0..c { a += map[[ci, fy, fx]]; }
                a /= c as f64;
                if on { on_sum += a; on_n += 1; } else { off_sum += a; off_n += 1; }
            }
        }
    }
    (on_sum / on_n as f64) / (off_sum / off_n as f64)
}

fn main() {
    let mut cfg = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("k=v");
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    let ds = datagen::generate(&cfg.datagen, cfg.model.cap_len, cfg.model.image_h, cfg.model.image_w).unwrap();
    let (_, test_idx) = ds.split();
    let t0 = std::time::Instant::now();
    let outcome = training::train(&cfg, &ds, None).unwrap();
    let ratio = attention_ratio(&outcome.model, &ds, &test_idx, &cfg);
    println!("best_r1={:.4} ratio={:.3} elapsed={:?}", outcome.best_r1, ratio, t0.elapsed());
}
