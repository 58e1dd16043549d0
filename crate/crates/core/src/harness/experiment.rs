use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{affine_augment, generate_synthetic, load_dataset, resize_roi, Dataset, FoldPlan};
use crate::error::Result;
use crate::harness::checkpoint::{save_checkpoint, Checkpoint};
use crate::harness::config::{RunConfig, Scheme};
use crate::harness::metrics::{aggregate_folds, evaluate, Aggregate, ConfusionMatrix, Evaluation};
use crate::mixture::{build_code_bank, synthesize_mixture_sample, CodeBank, MixtureConfig};
use crate::models::{build_models, ModelSet};
use crate::rng::{self, tag};
use crate::trainer::{
    encode_dataset, fit_classifier, probe_accuracy, real_epoch_items, train_step1, train_step2,
    LabeledItem, ProbeResult, TrainConfig, TrainLog,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeFold {
    pub evaluation: Evaluation,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step2Summary {
    pub initial_val_rec: f64,
    pub best_val_rec: f64,
    pub log: TrainLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub r: ProbeResult,
    pub c: ProbeResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub baseline: SchemeFold,
    pub step2: Option<Step2Summary>,
    pub probe: Option<ProbeSummary>,
    pub proposed: Option<SchemeFold>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub fold_accuracies: Vec<f64>,
    pub aggregate: Aggregate,
    pub pooled: ConfusionMatrix,
}

impl SchemeSummary {
    fn from_folds<'a>(folds: impl Iterator<Item = &'a SchemeFold>, class_count: usize) -> Result<Self> {
        let mut pooled = ConfusionMatrix::new(class_count);
        let mut fold_accuracies = Vec::new();
        for f in folds {
            pooled.merge(&f.evaluation.confusion)?;
            fold_accuracies.push(f.evaluation.accuracy);
        }
        Ok(SchemeSummary {
            aggregate: aggregate_folds(&fold_accuracies)?,
            fold_accuracies,
            pooled,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub param_counts: [usize; 5],
    pub folds: Vec<FoldResult>,
    pub baseline: SchemeSummary,
    pub proposed: Option<SchemeSummary>,
}

impl ExperimentResults {
    /// Fold means of the r and c probe accuracies and their chance levels.
    pub fn mean_probe(&self) -> Option<ProbeSummary> {
        let probes: Vec<&ProbeSummary> = self.folds.iter().filter_map(|f| f.probe.as_ref()).collect();
        if probes.is_empty() {
            return None;
        }
        let n = probes.len() as f64;
        let mean = |f: &dyn Fn(&ProbeSummary) -> f64| probes.iter().map(|p| f(p)).sum::<f64>() / n;
        Some(ProbeSummary {
            r: ProbeResult {
                accuracy: mean(&|p| p.r.accuracy),
                chance: mean(&|p| p.r.chance),
            },
            c: ProbeResult {
                accuracy: mean(&|p| p.c.accuracy),
                chance: mean(&|p| p.c.chance),
            },
        })
    }
}

/// The configured dataset, resized to the profile's image side if needed.
pub fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut ds = match &cfg.dataset {
        Some(path) => load_dataset(path)?,
        None => generate_synthetic(&cfg.counts, cfg.image_size, cfg.data_seed())?,
    };
    if ds.image_shape != [1, cfg.image_size, cfg.image_size] {
        for s in &mut ds.samples {
            s.image = resize_roi(&s.image, cfg.image_size)?;
        }
        ds.image_shape = [1, cfg.image_size, cfg.image_size];
    }
    Ok(ds)
}

/// Per-epoch training items for the proposed classifier: the same real views
/// as the baseline plus freshly drawn mixtures.
fn mixture_epoch_items(
    train: &Dataset,
    tcfg: &TrainConfig,
    mix: &MixtureConfig,
    bank: &CodeBank,
    models: &ModelSet<f32>,
    epoch: usize,
) -> Result<Vec<LabeledItem>> {
    let mut items = real_epoch_items(train, tcfg, epoch);
    let n_syn = (mix.synthetic_ratio * train.len() as f64).round() as usize;
    let mut r = rng::stream(tcfg.seed, &[tag("mixture"), epoch as u64]);
    let mut order: Vec<usize> = Vec::with_capacity(n_syn);
    while order.len() < n_syn {
        let mut round: Vec<usize> = (0..train.len()).collect();
        round.shuffle(&mut r);
        order.extend(round);
    }
    order.truncate(n_syn);
    for i in order {
        let s = &train.samples[i];
        let syn = synthesize_mixture_sample(&s.image, s.label, s.id, bank, models, mix, None, &mut r)?;
        items.push(LabeledItem {
            image: affine_augment(&syn.image, &mut r, &tcfg.augment),
            target: syn.target.to_tensor(),
        });
    }
    Ok(items)
}

struct FoldOutput {
    result: FoldResult,
    disentangle: ModelSet<f32>,
    proposed: Option<ModelSet<f32>>,
}

fn run_fold(cfg: &RunConfig, ds: &Dataset, plan: &FoldPlan, fold: usize) -> Result<FoldOutput> {
    let split = &plan.folds[fold];
    let train = ds.subset(&split.train);
    let val = ds.subset(&split.val);
    let test = ds.subset(&split.test);
    let fold_seed = rng::derive(cfg.seed, &[tag("fold"), fold as u64]);
    let tcfg = cfg.train_config(fold_seed);
    let profile = cfg.profile(ds.class_count());

    let init = build_models::<f32, _>(&profile, &mut rng::stream(fold_seed, &[tag("init")]))?;
    let mut models = init.clone();
    let log1 = train_step1(&train, &val, &mut models.encoder_c, &mut models.classifier, &tcfg)?;
    let baseline = SchemeFold {
        evaluation: evaluate(&models.encoder_c, &mut models.classifier, &test)?,
        log: log1,
    };
    let mut result = FoldResult {
        fold,
        train_size: train.len(),
        val_size: val.len(),
        test_size: test.len(),
        baseline,
        step2: None,
        probe: None,
        proposed: None,
    };
    if cfg.scheme == Scheme::Baseline {
        return Ok(FoldOutput {
            result,
            disentangle: models,
            proposed: None,
        });
    }

    let ModelSet {
        encoder_c,
        encoder_r,
        decoder,
        adversary,
        ..
    } = &mut models;
    let out2 = train_step2(&train, &val, encoder_c, encoder_r, decoder, adversary, &tcfg)?;
    result.step2 = Some(Step2Summary {
        initial_val_rec: out2.initial_val_rec,
        best_val_rec: out2.best_val_rec,
        log: out2.log,
    });

    if cfg.probe {
        // The probe sees every non-test sample.
        let fit_idx: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
        let fit = ds.subset(&fit_idx);
        let fit_labels: Vec<usize> = fit.samples.iter().map(|s| s.label).collect();
        let test_labels: Vec<usize> = test.samples.iter().map(|s| s.label).collect();
        let probe_seed = rng::derive(fold_seed, &[tag("probe")]);
        let run = |enc| -> Result<ProbeResult> {
            probe_accuracy(
                &encode_dataset(enc, &fit)?,
                &fit_labels,
                &encode_dataset(enc, &test)?,
                &test_labels,
                ds.class_count(),
                probe_seed,
            )
        };
        result.probe = Some(ProbeSummary {
            r: run(&models.encoder_r)?,
            c: run(&models.encoder_c)?,
        });
    }

    let mix = cfg.mixture_config();
    let bank = build_code_bank(&train, &models.encoder_c)?;
    let mut encoder = init.encoder_c.clone();
    let mut head = init.classifier.clone();
    let log = fit_classifier("proposed", &mut encoder, &mut head, &train, &val, &tcfg, tcfg.epochs_step1, |epoch| {
        mixture_epoch_items(&train, &tcfg, &mix, &bank, &models, epoch)
    })?;
    result.proposed = Some(SchemeFold {
        evaluation: evaluate(&encoder, &mut head, &test)?,
        log,
    });
    let mut proposed = models.clone();
    proposed.encoder_c = encoder;
    proposed.classifier = head;
    Ok(FoldOutput {
        result,
        disentangle: models,
        proposed: Some(proposed),
    })
}

fn write_fold_artifacts(dir: &Path, cfg: &RunConfig, out: &FoldOutput) -> Result<()> {
    let fold_dir = dir.join(format!("fold{}", out.result.fold));
    fs::create_dir_all(&fold_dir)?;
    let r = &out.result;
    let mut log = r.baseline.log.clone();
    if let Some(s2) = &r.step2 {
        log.extend(s2.log.clone());
    }
    if let Some(p) = &r.proposed {
        log.extend(p.log.clone());
    }
    log.write_jsonl(fold_dir.join("train_log.jsonl"))?;
    let epoch = |l: &TrainLog| l.records.last().map_or(0, |e| e.epoch as u32);
    let last_epoch = r.step2.as_ref().map_or(epoch(&r.baseline.log), |s| epoch(&s.log));
    save_checkpoint(
        &Checkpoint {
            seed: cfg.seed,
            epoch: last_epoch,
            models: out.disentangle.clone(),
        },
        fold_dir.join("disentangle.ffck"),
    )?;
    if let (Some(models), Some(p)) = (&out.proposed, &r.proposed) {
        save_checkpoint(
            &Checkpoint {
                seed: cfg.seed,
                epoch: epoch(&p.log),
                models: models.clone(),
            },
            fold_dir.join("proposed.ffck"),
        )?;
    }
    Ok(())
}

/// Runs every fold with paired baseline/proposed schemes. With `artifacts`
/// set, per-fold logs and checkpoints are written below it.
pub fn run_experiment(cfg: &RunConfig, artifacts: Option<&Path>) -> Result<ExperimentResults> {
    cfg.validate()?;
    let ds = load_run_dataset(cfg)?;
    run_experiment_on(cfg, &ds, artifacts)
}

pub fn run_experiment_on(cfg: &RunConfig, ds: &Dataset, artifacts: Option<&Path>) -> Result<ExperimentResults> {
    cfg.validate()?;
    let plan = crate::dataset::kfold_split(ds, cfg.k, cfg.val_fraction, cfg.seed)?;
    let profile = cfg.profile(ds.class_count());
    profile.validate()?;
    let param_counts = build_models::<f32, _>(&profile, &mut rng::stream(0, &[]))?.param_counts();
    let mut folds = Vec::with_capacity(cfg.k);
    for fold in 0..cfg.k {
        let out = run_fold(cfg, ds, &plan, fold).map_err(|e| e.with_fold(fold))?;
        if let Some(dir) = artifacts {
            write_fold_artifacts(dir, cfg, &out).map_err(|e| e.with_fold(fold))?;
        }
        folds.push(out.result);
    }
    let k = ds.class_count();
    let baseline = SchemeSummary::from_folds(folds.iter().map(|f| &f.baseline), k)?;
    let proposed = if cfg.scheme == Scheme::Proposed {
        Some(SchemeSummary::from_folds(
            folds.iter().filter_map(|f| f.proposed.as_ref()),
            k,
        )?)
    } else {
        None
    };
    Ok(ExperimentResults {
        config: cfg.clone(),
        class_names: ds.class_names.clone(),
        class_counts: ds.class_counts(),
        param_counts,
        folds,
        baseline,
        proposed,
    })
}
