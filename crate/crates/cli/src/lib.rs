//! `manetlab` command-line entry point: dataset generation, training,
//! evaluation, ablation, gradient checking and the K-sweep.
//!
//! Every command resolves one flat configuration (defaults < config file
//! < `MANETLAB_*` environment < `--set key=value`), echoes it as
//! `config.resolved` into its output directory and is reproducible from
//! that file plus the seed. Exit codes: 0 success, 1 assertion or
//! run failure, 2 usage error.

pub mod plot;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use manet_core::config::{ModuleFlags, RunConfig};
use manet_core::datagen;
use manet_core::gradcheck;
use manet_core::io::Archive;
use manet_core::retrieval;
use manet_core::training;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(
    name = "manetlab",
    about = "Text-to-image person retrieval lab: synthetic data, suppression/alignment model, training and Rank-K evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigOpts {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. `--set epochs=5` (repeatable, applied last).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<RunConfig, manet_core::config::ConfigError> {
        RunConfig::resolve(self.config.as_deref(), &self.sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Datagen {
        #[command(flatten)]
        cfg: ConfigOpts,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_ids: Option<usize>,
        #[arg(long)]
        images_per_id: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: Rank-K metrics plus an embedding dump.
    Eval {
        #[command(flatten)]
        cfg: ConfigOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which samples form the gallery/queries: train | test | all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a ladder of module combinations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma list of variants (`baseline`, `ga`, `ila`, `ga+ila`,
        /// `full`, ...). Default: the incremental ladder.
        #[arg(long)]
        variants: Option<String>,
        /// Comma list of seeds; one run per (variant, seed).
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Operation name or `all` (also: `core` for the 12-op gate).
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per number of topic centers and plot R@1.
    SweepK {
        #[command(flatten)]
        cfg: ConfigOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma list of center counts.
        #[arg(long, default_value = "2,4,6,8")]
        values: String,
    },
}

fn ensure_run_dir(out: &Path, cfg: &RunConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), cfg.resolved_text())
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad integer `{p}`")))
        .collect()
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>, String> {
    text.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| format!("bad integer `{p}`")))
        .collect()
}

fn parse_variant(name: &str) -> Result<ModuleFlags, String> {
    let lower = name.trim().to_lowercase();
    match lower.as_str() {
        "baseline" => return Ok(ModuleFlags::baseline()),
        "full" | "manet" => return Ok(ModuleFlags::full()),
        _ => {}
    }
    let mut flags = ModuleFlags::baseline();
    for part in lower.split('+') {
        match part.trim() {
            "ga" => flags.ga = true,
            "ila" => flags.ila = true,
            "rgl" => flags.rgl = true,
            "caf" => flags.caf = true,
            other => return Err(format!("unknown variant component `{other}`")),
        }
    }
    Ok(flags)
}

fn default_ladder() -> Vec<ModuleFlags> {
    [
        "baseline",
        "ga",
        "ila",
        "ga+ila",
        "ga+ila+rgl",
        "ga+ila+caf",
        "full",
    ]
    .iter()
    .map(|v| parse_variant(v).expect("static ladder"))
    .collect()
}

fn split_indices(dataset: &datagen::Dataset, split: &str) -> Result<Vec<usize>, String> {
    let (train, test) = dataset.split();
    match split {
        "train" => Ok(train),
        "test" => Ok(test),
        "all" => Ok((0..dataset.samples.len()).collect()),
        other => Err(format!("unknown split `{other}` (train | test | all)")),
    }
}

fn cmd_datagen(
    cfg: ConfigOpts,
    seed: Option<u64>,
    num_ids: Option<usize>,
    images_per_id: Option<usize>,
    out: &Path,
) -> Result<i32, String> {
    let mut run = cfg.resolve().map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        run.datagen.seed = s;
    }
    if let Some(n) = num_ids {
        run.datagen.num_ids = n;
    }
    if let Some(n) = images_per_id {
        run.datagen.images_per_id = n;
    }
    let dataset = datagen::generate(
        &run.datagen,
        run.model.cap_len,
        run.model.image_h,
        run.model.image_w,
    )
    .map_err(|e| e.to_string())?;
    ensure_run_dir(out, &run).map_err(|e| e.to_string())?;
    datagen::write_dataset(&dataset, out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} samples ({} identities x {} images) to {}",
        dataset.samples.len(),
        run.datagen.num_ids,
        run.datagen.images_per_id,
        out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_train(cfg: ConfigOpts, data: &Path, out: &Path) -> Result<i32, String> {
    let run = cfg.resolve().map_err(|e| e.to_string())?;
    let dataset = datagen::load_dataset(data).map_err(|e| e.to_string())?;
    ensure_run_dir(out, &run).map_err(|e| e.to_string())?;
    let outcome = training::train(&run, &dataset, Some(out)).map_err(|e| e.to_string())?;
    let last = outcome.metrics.last().expect("epochs >= 1");
    println!(
        "trained {} epochs: loss {:.4}, held-out R@1 {:.4} (best {:.4} at epoch {})",
        outcome.metrics.len(),
        last.loss_total,
        last.r1,
        outcome.best_r1,
        outcome.best_epoch
    );
    Ok(EXIT_OK)
}

fn cmd_eval(
    cfg: ConfigOpts,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    out: &Path,
) -> Result<i32, String> {
    let run = cfg.resolve().map_err(|e| e.to_string())?;
    let dataset = datagen::load_dataset(data).map_err(|e| e.to_string())?;
    let (model, _, epoch) =
        training::load_checkpoint(checkpoint, &run).map_err(|e| e.to_string())?;
    if model.vocab_size != dataset.vocab.size() {
        return Err(format!(
            "checkpoint was trained with vocabulary size {}, dataset has {}",
            model.vocab_size,
            dataset.vocab.size()
        ));
    }
    let indices = split_indices(&dataset, split)?;
    if indices.is_empty() {
        return Err(format!("split `{split}` is empty"));
    }
    ensure_run_dir(out, &run).map_err(|e| e.to_string())?;
    let samples: Vec<&datagen::Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
    let bundles = model.embed(&samples).map_err(|e| e.to_string())?;
    let gallery: Vec<_> = bundles.iter().map(|(im, _)| im.clone()).collect();
    let queries: Vec<_> = bundles.iter().map(|(_, tx)| tx.clone()).collect();
    let labels = dataset.labels(&indices);
    let sim = retrieval::fuse_similarity(&queries, &gallery);
    let mut csv = String::from("split,epoch,r1,r5,r10\n");
    let r1 = retrieval::rank_at_k(&sim.s, &labels, &labels, 1).map_err(|e| e.to_string())?;
    let r5 = retrieval::rank_at_k(&sim.s, &labels, &labels, 5).map_err(|e| e.to_string())?;
    let r10 = retrieval::rank_at_k(&sim.s, &labels, &labels, 10).map_err(|e| e.to_string())?;
    csv.push_str(&format!("{split},{epoch},{r1:.4},{r5:.4},{r10:.4}\n"));
    std::fs::write(out.join("eval.csv"), &csv).map_err(|e| e.to_string())?;

    // embedding dump in the shared named-array container
    let n = bundles.len();
    let d_g = gallery[0].global.len();
    let kd = gallery[0].local_concat().len();
    let pack = |select: &dyn Fn(usize) -> Vec<f64>, width: usize| -> manet_core::Arr {
        let mut arr = manet_core::Arr::zeros(manet_core::ndarray::IxDyn(&[n, width]));
        for i in 0..n {
            let row = select(i);
            for (j, v) in row.into_iter().enumerate() {
                arr[[i, j]] = v;
            }
        }
        arr
    };
    let arch = Archive {
        meta: vec![
            ("split".into(), split.to_string()),
            ("epoch".into(), epoch.to_string()),
        ],
        entries: vec![
            (
                "image.global".into(),
                pack(&|i| gallery[i].global.to_vec(), d_g),
            ),
            (
                "image.local".into(),
                pack(&|i| gala_local(&gallery, i), kd.max(1)),
            ),
            (
                "text.global".into(),
                pack(&|i| queries[i].global.to_vec(), d_g),
            ),
            (
                "text.local".into(),
                pack(&|i| gala_local(&queries, i), kd.max(1)),
            ),
            ("labels".into(), {
                let mut arr = manet_core::Arr::zeros(manet_core::ndarray::IxDyn(&[n]));
                for i in 0..n {
                    arr[[i]] = labels[i] as f64;
                }
                arr
            }),
        ],
    };
    arch.save(&out.join("embeddings.bin")).map_err(|e| e.to_string())?;
    println!("split {split}: R@1 {r1:.4}  R@5 {r5:.4}  R@10 {r10:.4}");
    Ok(EXIT_OK)
}

fn gala_local(bundles: &[manet_core::alignment::EmbeddingBundle], i: usize) -> Vec<f64> {
    let v = bundles[i].local_concat();
    if v.is_empty() {
        vec![0.0]
    } else {
        v.to_vec()
    }
}

fn cmd_ablate(
    cfg: ConfigOpts,
    data: &Path,
    out: &Path,
    variants: Option<&str>,
    seeds: &str,
) -> Result<i32, String> {
    let run = cfg.resolve().map_err(|e| e.to_string())?;
    let dataset = datagen::load_dataset(data).map_err(|e| e.to_string())?;
    let variant_list = match variants {
        Some(text) => text
            .split(',')
            .map(parse_variant)
            .collect::<Result<Vec<_>, _>>()?,
        None => default_ladder(),
    };
    let seed_list = parse_u64_list(seeds)?;
    ensure_run_dir(out, &run).map_err(|e| e.to_string())?;
    let rows = retrieval::ablation_run(&variant_list, &run, &dataset, &seed_list)
        .map_err(|e| e.to_string())?;
    let csv = retrieval::ablation_csv(&rows);
    std::fs::write(out.join("ablation.csv"), &csv).map_err(|e| e.to_string())?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(module: &str, seed: u64) -> Result<i32, String> {
    let reports = match module {
        "all" => gradcheck::check_all(seed),
        "core" => gradcheck::check_many(gradcheck::CORE_OPS, seed),
        name => match gradcheck::check_op(name, seed) {
            Some(r) => vec![r],
            None => {
                eprintln!(
                    "unknown gradcheck selector `{name}`; known: all, core, {}",
                    gradcheck::OPS.join(", ")
                );
                return Ok(EXIT_USAGE);
            }
        },
    };
    let mut all_pass = true;
    for r in &reports {
        println!(
            "{:<18} max_rel_err={:10.3e} elements={:5} {}",
            r.op,
            r.max_rel_err,
            r.elements,
            if r.passed { "PASS" } else { "FAIL" }
        );
        all_pass &= r.passed;
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_sweep_k(cfg: ConfigOpts, data: &Path, out: &Path, values: &str) -> Result<i32, String> {
    let run = cfg.resolve().map_err(|e| e.to_string())?;
    let dataset = datagen::load_dataset(data).map_err(|e| e.to_string())?;
    let ks = parse_usize_list(values)?;
    if ks.iter().any(|&k| k == 0) {
        return Err("k values must be >= 1".into());
    }
    let mut ks = ks;
    ks.sort_unstable();
    ensure_run_dir(out, &run).map_err(|e| e.to_string())?;
    let mut csv = String::from("k,r1\n");
    let mut points = Vec::new();
    for &k in &ks {
        let mut variant = run.clone();
        variant.model.k_centers = k;
        let outcome = training::train(&variant, &dataset, None).map_err(|e| e.to_string())?;
        let r1 = outcome.best_r1;
        csv.push_str(&format!("{k},{r1:.4}\n"));
        points.push((k as f64, r1));
        println!("k={k}: best held-out R@1 {r1:.4}");
    }
    std::fs::write(out.join("sweep_k.csv"), &csv).map_err(|e| e.to_string())?;
    let svg = plot::svg_line_plot(&points, "number of topic centers K", "R@1", "K sweep");
    std::fs::write(out.join("sweep_k.svg"), svg).map_err(|e| e.to_string())?;
    Ok(EXIT_OK)
}

/// Run the CLI on explicit arguments; returns the process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version requests exit cleanly
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Datagen {
            cfg,
            seed,
            num_ids,
            images_per_id,
            out,
        } => cmd_datagen(cfg, seed, num_ids, images_per_id, &out),
        Command::Train { cfg, data, out } => cmd_train(cfg, &data, &out),
        Command::Eval {
            cfg,
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(cfg, &checkpoint, &data, &split, &out),
        Command::Ablate {
            cfg,
            data,
            out,
            variants,
            seeds,
        } => cmd_ablate(cfg, &data, &out, variants.as_deref(), &seeds),
        Command::Gradcheck { module, seed } => cmd_gradcheck(&module, seed),
        Command::SweepK {
            cfg,
            data,
            out,
            values,
        } => cmd_sweep_k(cfg, &data, &out, &values),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}
