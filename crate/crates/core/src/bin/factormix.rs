use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use factormix::autograd::{gradient_check, Graph, Reduction};
use factormix::dataset::{generate_synthetic, load_dataset, save_dataset, Dataset, Sample, PAPER_COUNTS};
use factormix::harness::{
    aggregate_folds, emit_report, evaluate, load_checkpoint, load_results, run_experiment, ConfusionMatrix,
    RunConfig, Scheme,
};
use factormix::mixture::{build_code_bank, synthesize_mixture_sample, MixtureConfig};
use factormix::rng::{self, tag};
use factormix::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "factormix", version, about = "Disentangled mixture augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as an FFDS file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = PAPER_COUNTS.to_vec())]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = factormix::harness::DEFAULT_SEED)]
        seed: u64,
    },
    /// Run the k-fold experiment and write checkpoints, logs and the report.
    Train(RunArgs),
    /// Decode mixture samples from a step-2 checkpoint into an FFDS file.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint's classifier on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Re-render the report from a saved results.json.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quick numerical sanity checks.
    Selftest,
}

/// Every RunConfig field as an optional override.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    code_dim: Option<usize>,
    #[arg(long)]
    decoder_seed_hw: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs_step1: Option<usize>,
    #[arg(long)]
    epochs_step2: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    adv_updates_per_gen_update: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    views_per_epoch: Option<usize>,
    #[arg(long)]
    step2_views_per_epoch: Option<usize>,
    #[arg(long)]
    step2_batch_size: Option<usize>,
    #[arg(long)]
    decoder_dropout: Option<f64>,
    #[arg(long, value_parser = parse_reduction)]
    reconstruction: Option<Reduction>,
    #[arg(long)]
    scale_min: Option<f64>,
    #[arg(long)]
    scale_max: Option<f64>,
    #[arg(long)]
    rotation_deg: Option<f64>,
    #[arg(long)]
    translation: Option<f64>,
    #[arg(long)]
    recalibrate_bn: Option<bool>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    synthetic_ratio: Option<f64>,
    #[arg(long)]
    neighbors_per_class: Option<usize>,
    #[arg(long)]
    classes_in_mixture: Option<usize>,
    #[arg(long)]
    probe: Option<bool>,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    match s {
        "baseline" => Ok(Scheme::Baseline),
        "proposed" => Ok(Scheme::Proposed),
        _ => Err(format!("unknown scheme '{s}' (baseline|proposed)")),
    }
}

fn parse_reduction(s: &str) -> std::result::Result<Reduction, String> {
    match s {
        "sum" => Ok(Reduction::Sum),
        "sum_per_sample" => Ok(Reduction::SumPerSample),
        "mean" => Ok(Reduction::Mean),
        _ => Err(format!("unknown reduction '{s}' (sum|sum_per_sample|mean)")),
    }
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        apply!(
            cfg, self, seed, scheme, out_dir, counts, image_size, channels, code_dim, decoder_seed_hw, k,
            val_fraction, lambda, epochs_step1, epochs_step2, batch_size, lr, adv_updates_per_gen_update,
            early_stop_patience, views_per_epoch, step2_views_per_epoch, step2_batch_size,
            decoder_dropout, reconstruction, scale_min, scale_max,
            rotation_deg, translation, recalibrate_bn, alpha, synthetic_ratio, neighbors_per_class, classes_in_mixture, probe
        );
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        if self.data_seed.is_some() {
            cfg.data_seed = self.data_seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let results = run_experiment(&cfg, Some(&cfg.out_dir))?;
    emit_report(&results, &cfg.out_dir)?;
    let b = &results.baseline.aggregate;
    println!(
        "baseline  {:.2} ± {:.2}",
        100.0 * b.mean,
        100.0 * b.population_sd
    );
    if let Some(p) = &results.proposed {
        println!(
            "proposed  {:.2} ± {:.2}",
            100.0 * p.aggregate.mean,
            100.0 * p.aggregate.population_sd
        );
    }
    if let Some(p) = results.mean_probe() {
        println!(
            "probe r {:.3}  c {:.3}  chance {:.3}",
            p.r.accuracy, p.c.accuracy, p.r.chance
        );
    }
    println!("report written to {}", cfg.out_dir.display());
    Ok(())
}

fn synthesize(
    checkpoint: &PathBuf,
    dataset: &PathBuf,
    out: &PathBuf,
    count: usize,
    alpha: f64,
    seed: u64,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    if ds.image_shape != ck.profile().image_shape() || ds.class_count() != ck.profile().class_count {
        return Err(Error::ProfileMismatch(format!(
            "dataset images {:?} with {} classes do not fit the checkpoint profile {:?}",
            ds.image_shape,
            ds.class_count(),
            ck.profile()
        )));
    }
    let cfg = MixtureConfig {
        alpha,
        ..MixtureConfig::default()
    };
    cfg.validate()?;
    let bank = build_code_bank(&ds, &ck.models.encoder_c)?;
    let mut r = rng::stream(seed, &[tag("synthesize")]);
    let next_id = ds.samples.iter().map(|s| s.id).max().unwrap_or(0) + 1;
    let mut samples = Vec::with_capacity(count);
    for j in 0..count {
        let s = &ds.samples[j % ds.len()];
        let syn = synthesize_mixture_sample(&s.image, s.label, s.id, &bank, &ck.models, &cfg, None, &mut r)?;
        samples.push(Sample {
            id: next_id + j as u64,
            label: syn.target.argmax(),
            target: syn.target,
            image: syn.image,
        });
    }
    let out_ds = Dataset::new(samples, ds.class_names.clone(), ds.image_shape)?;
    save_dataset(&out_ds, out)?;
    println!("wrote {count} synthesized samples to {}", out.display());
    Ok(())
}

fn print_matrix(m: &ConfusionMatrix) {
    for row in &m.counts {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
        println!("{}", cells.join(""));
    }
}

fn evaluate_cmd(checkpoint: &PathBuf, dataset: &PathBuf) -> Result<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    if ds.image_shape != ck.profile().image_shape() {
        return Err(Error::ProfileMismatch(format!(
            "dataset images {:?} vs profile {:?}",
            ds.image_shape,
            ck.profile().image_shape()
        )));
    }
    let eval = evaluate(&ck.models.encoder_c, &mut ck.models.classifier, &ds)?;
    println!("accuracy {:.4} ({}/{})", eval.accuracy, eval.confusion.trace(), eval.confusion.total());
    print_matrix(&eval.confusion);
    Ok(())
}

fn selftest() -> Result<()> {
    let mut failures = 0;
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let mut r = rng::stream(1, &[tag("selftest")]);
    let mut rand = |shape: &[usize]| {
        use rand::Rng;
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape")
    };
    let x = rand(&[2, 1, 5, 5]);
    let k = rand(&[3, 1, 3, 3]);
    let b = rand(&[3]);
    let err = gradient_check(
        |g: &mut Graph<f64>, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2)?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        },
        &[x, k, b],
        1e-5,
    )?;
    check("conv2d gradient", err < 1e-4, format!("relative error {err:.2e}"));

    let classic = ConfusionMatrix::from_counts(vec![
        vec![60, 5, 1, 0],
        vec![13, 43, 19, 6],
        vec![3, 19, 34, 9],
        vec![0, 0, 2, 25],
    ])?;
    check(
        "confusion accuracy",
        classic.trace() == 162 && classic.total() == 239,
        format!("{}/{}", classic.trace(), classic.total()),
    );
    let agg = aggregate_folds(&[64.8, 69.5, 68.6])?;
    check(
        "fold aggregate",
        (agg.mean - 67.6).abs() < 0.1 && (agg.population_sd - 2.0).abs() < 0.1,
        format!("{:.2} ± {:.2}", agg.mean, agg.population_sd),
    );
    let ds = generate_synthetic(&[4, 4], 32, 3)?;
    check("synthetic data", ds.len() == 8, format!("{} samples", ds.len()));

    if failures > 0 {
        return Err(Error::Numeric {
            stage: "selftest",
            epoch: 0,
            detail: format!("{failures} check(s) failed"),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            counts,
            image_size,
            seed,
        } => {
            let ds = generate_synthetic(&counts, image_size, seed)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train(args) => train(&args),
        Command::Synthesize {
            checkpoint,
            dataset,
            out,
            count,
            alpha,
            seed,
        } => synthesize(&checkpoint, &dataset, &out, count, alpha, seed),
        Command::Evaluate { checkpoint, dataset } => evaluate_cmd(&checkpoint, &dataset),
        Command::Report { results, out } => {
            emit_report(&load_results(&results)?, &out)?;
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category() as u8)
        }
    }
}
