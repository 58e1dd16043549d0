//! Two-step disentanglement training.
//!
//! Step 1 fits the specified encoder `E_C` and a classifier head with
//! cross-entropy. Step 2 freezes `E_C` and fits the unspecified encoder `E_R`
//! and decoder `G_R` on `L_rec + λ·L_adv` (λ < 0), alternating with updates of
//! an adversarial head that predicts the class from `r = E_R(x)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Reduction};
use crate::dataset::{epoch_views, AffineRanges, Dataset};
use crate::error::{Error, Result};
use crate::mixture::argmax;
use crate::models::{encode, ClassifierHead, Decoder, Encoder, Module};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, tag, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the adversarial term; must be negative.
    pub lambda: f64,
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adv_updates_per_gen_update: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Augmented views of every real sample per classifier epoch.
    pub views_per_epoch: usize,
    /// Augmented views of every real sample per step-2 epoch.
    pub step2_views_per_epoch: usize,
    pub step2_batch_size: usize,
    /// Dropout rate on the decoder's seed features during step 2.
    pub decoder_dropout: f64,
    pub reconstruction: Reduction,
    pub augment: AffineRanges,
    /// Reset the classifier's batch-norm statistics to full-batch statistics
    /// of the unaugmented training images after every epoch.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: -0.1,
            epochs_step1: 30,
            epochs_step2: 30,
            batch_size: 32,
            lr: 1e-3,
            adv_updates_per_gen_update: 1,
            seed: 0,
            early_stop_patience: 0,
            views_per_epoch: 10,
            step2_views_per_epoch: 1,
            step2_batch_size: 32,
            decoder_dropout: crate::models::DECODER_DROPOUT,
            reconstruction: Reduction::SumPerSample,
            augment: AffineRanges::default(),
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda < 0.0) {
            return Err(Error::Config(format!(
                "lambda must be negative, got {}",
                self.lambda
            )));
        }
        if self.batch_size < 2 || self.step2_batch_size < 2 {
            return Err(Error::Config("batch sizes must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.adv_updates_per_gen_update == 0 {
            return Err(Error::Config("adv_updates_per_gen_update must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.decoder_dropout) {
            return Err(Error::Config(format!(
                "decoder_dropout {} outside [0, 1)",
                self.decoder_dropout
            )));
        }
        if self.views_per_epoch == 0 || self.step2_views_per_epoch == 0 {
            return Err(Error::Config("views per epoch must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One epoch of either step. Step-1 records fill the classification fields,
/// step-2 records the reconstruction/adversarial fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_adv_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }
}

/// The terms of the step-2 generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub adv: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = rec + lambda·adv` with `lambda < 0`.
pub fn combine_losses(rec: f64, adv: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda < 0.0) {
        return Err(Error::Config(format!("lambda must be negative, got {lambda}")));
    }
    if !(rec >= 0.0) || !(adv >= 0.0) {
        return Err(Error::invalid(format!("losses must be nonnegative: rec={rec} adv={adv}")));
    }
    Ok(LossBreakdown {
        rec,
        adv,
        lambda,
        total: rec + lambda * adv,
    })
}

/// A classifier training example with a (possibly soft) target.
#[derive(Clone, Debug)]
pub struct LabeledItem {
    pub image: Tensor<f32>,
    pub target: Tensor<f32>,
}

fn ensure_finite(stage: &'static str, epoch: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage,
            epoch,
            detail: format!("{what} = {v}"),
        })
    }
}

fn ensure_params_finite<M: Module<f32>>(stage: &'static str, epoch: usize, m: &M) -> Result<()> {
    if m.params().iter().all(|p| p.all_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage,
            epoch,
            detail: "parameter update produced a non-finite value".into(),
        })
    }
}

/// Shuffled batches of at least two items; a trailing singleton joins the
/// previous batch.
fn batches(n: usize, batch_size: usize, rng: &mut Stream) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::Data(format!("training needs at least 2 items, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out[out.len() - 1].len() == 1 {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    Ok(out)
}

fn stack_images<'a>(items: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let v: Vec<&Tensor<f32>> = items.collect();
    Tensor::stack(&v)
}

fn one_hot_batch(labels: &[usize], k: usize) -> Tensor<f32> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        data[i * k + l] = 1.0;
    }
    Tensor::new([labels.len(), k], data).expect("one-hot shape")
}

/// Eval-mode class probabilities for a dataset, `[N,k]`.
pub fn predict(encoder: &Encoder<f32>, head: &mut ClassifierHead<f32>, ds: &Dataset) -> Result<Tensor<f32>> {
    if ds.is_empty() {
        return Err(Error::Data("cannot predict on an empty split".into()));
    }
    let k = head.class_count();
    let mut out = Vec::with_capacity(ds.len() * k);
    for chunk in ds.samples.chunks(64) {
        let x = stack_images(chunk.iter().map(|s| &s.image))?;
        let code = encode(encoder, &x)?;
        let mut g = Graph::new();
        let pv = head.bind(&mut g, false);
        let cv = g.input(code);
        let p = head.forward(&mut g, &pv, cv, Mode::Eval)?;
        out.extend_from_slice(g.value(p).data());
    }
    Tensor::new([ds.len(), k], out)
}

fn accuracy_and_loss(probs: &Tensor<f32>, ds: &Dataset) -> (f64, f64) {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (i, s) in ds.samples.iter().enumerate() {
        let row = probs.row(i);
        if argmax(row) == s.label {
            correct += 1;
        }
        loss -= (row[s.label] as f64).max(crate::autograd::LOG_EPSILON).ln();
    }
    let n = ds.len() as f64;
    (correct as f64 / n, loss / n)
}

/// Generic classifier fit over per-epoch item lists with best-validation
/// retention. Items from `epoch_items` are shuffled before batching.
pub fn fit_classifier(
    stage: &'static str,
    encoder: &mut Encoder<f32>,
    head: &mut ClassifierHead<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    mut epoch_items: impl FnMut(usize) -> Result<Vec<LabeledItem>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Data(format!("{stage}: empty validation split")));
    }
    let mut log = TrainLog::default();
    let mut opt_enc = Adam::new(cfg.adam());
    let mut opt_head = Adam::new(cfg.adam());
    let mut best: Option<(f64, f64, Encoder<f32>, ClassifierHead<f32>)> = None;
    let mut since_best = 0;
    for epoch in 1..=epochs {
        let items = epoch_items(epoch)?;
        let mut shuffle = rng::stream(cfg.seed, &[tag(stage), tag("shuffle"), epoch as u64]);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in batches(items.len(), cfg.batch_size, &mut shuffle)? {
            let x = stack_images(batch.iter().map(|&i| &items[i].image))?;
            let t = stack_images(batch.iter().map(|&i| &items[i].target))?;
            let mut g = Graph::new();
            let pe = encoder.bind(&mut g, true);
            let ph = head.bind(&mut g, true);
            let xv = g.input(x);
            let tv = g.input(t);
            let code = encoder.forward(&mut g, &pe, xv)?;
            let probs = head.forward(&mut g, &ph, code, Mode::Train)?;
            let loss = g.cross_entropy(probs, tv)?;
            let lv = g.value(loss).item() as f64;
            ensure_finite(stage, epoch, "classification loss", lv)?;
            loss_sum += lv * batch.len() as f64;
            let pm = g.value(probs);
            for (r, &i) in batch.iter().enumerate() {
                if argmax(pm.row(r)) == argmax(items[i].target.data()) {
                    correct += 1;
                }
            }
            let grads = g.backward(loss)?;
            let ge: Vec<Tensor<f32>> = pe.iter().map(|&v| grads.get(v)).collect();
            let gh: Vec<Tensor<f32>> = ph.iter().map(|&v| grads.get(v)).collect();
            opt_enc.step(encoder.params_mut(), &ge)?;
            opt_head.step(head.params_mut(), &gh)?;
            ensure_params_finite(stage, epoch, encoder)?;
            ensure_params_finite(stage, epoch, head)?;
        }
        if cfg.recalibrate_bn {
            head.recalibrate(&encode_dataset(encoder, train)?)?;
        }
        let probs = predict(encoder, head, val)?;
        let (val_acc, val_loss) = accuracy_and_loss(&probs, val);
        let n = items.len() as f64;
        log.records.push(EpochRecord {
            stage: stage.to_string(),
            epoch,
            train_loss: Some(loss_sum / n),
            train_accuracy: Some(correct as f64 / n),
            val_loss: Some(val_loss),
            val_accuracy: Some(val_acc),
            ..EpochRecord::default()
        });
        let improved = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if improved {
            best = Some((val_acc, val_loss, encoder.clone(), head.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    if let Some((_, _, e, h)) = best {
        *encoder = e;
        *head = h;
    }
    Ok(log)
}

/// Augmented real views with one-hot targets for one epoch. The augmentation
/// stream depends only on (seed, epoch), so every scheme sees the same views.
pub fn real_epoch_items(train: &Dataset, cfg: &TrainConfig, epoch: usize) -> Vec<LabeledItem> {
    let mut aug = rng::stream(cfg.seed, &[tag("augment"), epoch as u64]);
    let indices: Vec<usize> = (0..train.len()).collect();
    epoch_views(train, &indices, cfg.views_per_epoch, &cfg.augment, &mut aug)
        .into_iter()
        .map(|v| LabeledItem {
            target: train.samples[v.index].target.to_tensor(),
            image: v.image,
        })
        .collect()
}

/// Step 1: fits `E_C` and the classifier head on augmented real data,
/// keeping the parameters with the best validation accuracy.
pub fn train_step1(
    train: &Dataset,
    val: &Dataset,
    encoder_c: &mut Encoder<f32>,
    classifier: &mut ClassifierHead<f32>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("step 1: empty training split".into()));
    }
    fit_classifier("step1", encoder_c, classifier, train, val, cfg, cfg.epochs_step1, |epoch| {
        Ok(real_epoch_items(train, cfg, epoch))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step2Outcome {
    pub log: TrainLog,
    /// Mean validation reconstruction loss before any update.
    pub initial_val_rec: f64,
    /// Mean validation reconstruction loss of the retained parameters.
    pub best_val_rec: f64,
}

struct Step2Eval {
    rec: f64,
    adv: f64,
    adv_accuracy: f64,
}

fn evaluate_step2(
    val: &Dataset,
    encoder_c: &Encoder<f32>,
    encoder_r: &Encoder<f32>,
    decoder: &Decoder<f32>,
    adversary: &ClassifierHead<f32>,
) -> Result<Step2Eval> {
    let mut rec = 0.0;
    let mut adv = 0.0;
    let mut correct = 0usize;
    let mut unused = rng::stream(0, &[]);
    let mut adversary = adversary.clone();
    for chunk in val.samples.chunks(64) {
        let x = stack_images(chunk.iter().map(|s| &s.image))?;
        let c = encode(encoder_c, &x)?;
        let mut g = Graph::new();
        let pr = encoder_r.bind(&mut g, false);
        let pd = decoder.bind(&mut g, false);
        let pa = adversary.bind(&mut g, false);
        let xv = g.input(x);
        let cv = g.input(c);
        let r = encoder_r.forward(&mut g, &pr, xv)?;
        let z = g.concat(cv, r)?;
        let xhat = decoder.forward(&mut g, &pd, z, Mode::Eval, &mut unused)?;
        let l = g.mse_loss(xhat, xv, Reduction::Sum)?;
        rec += g.value(l).item() as f64;
        let p = adversary.forward(&mut g, &pa, r, Mode::Eval)?;
        let pm = g.value(p);
        for (i, s) in chunk.iter().enumerate() {
            let row = pm.row(i);
            if argmax(row) == s.label {
                correct += 1;
            }
            adv -= (row[s.label] as f64).max(crate::autograd::LOG_EPSILON).ln();
        }
    }
    let n = val.len() as f64;
    Ok(Step2Eval {
        rec: rec / n,
        adv: adv / n,
        adv_accuracy: correct as f64 / n,
    })
}

/// Step 2: with `E_C` frozen, alternates adversary updates (cross-entropy on
/// `r`) with `E_R`/`G_R` updates on `L_rec + λ·L_adv`. Keeps the parameters
/// with the lowest validation reconstruction loss.
pub fn train_step2(
    train: &Dataset,
    val: &Dataset,
    encoder_c: &Encoder<f32>,
    encoder_r: &mut Encoder<f32>,
    decoder: &mut Decoder<f32>,
    adversary: &mut ClassifierHead<f32>,
    cfg: &TrainConfig,
) -> Result<Step2Outcome> {
    const STAGE: &str = "step2";
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Data("step 2: empty training or validation split".into()));
    }
    let k = train.class_count();
    let lambda = cfg.lambda as f32;
    decoder.dropout = cfg.decoder_dropout;
    let mut opt_r = Adam::new(cfg.adam());
    let mut opt_d = Adam::new(cfg.adam());
    let mut opt_a = Adam::new(cfg.adam());
    let initial = evaluate_step2(val, encoder_c, encoder_r, decoder, adversary)?;
    let mut best = (initial.rec, encoder_r.clone(), decoder.clone(), adversary.clone());
    let mut since_best = 0;
    let mut log = TrainLog::default();
    let indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs_step2 {
        let mut aug = rng::stream(cfg.seed, &[tag("augment-step2"), epoch as u64]);
        let views = epoch_views(train, &indices, cfg.step2_views_per_epoch, &cfg.augment, &mut aug);
        let mut shuffle = rng::stream(cfg.seed, &[tag(STAGE), tag("shuffle"), epoch as u64]);
        let mut dropout = rng::stream(cfg.seed, &[tag(STAGE), tag("dropout"), epoch as u64]);
        let (mut rec_sum, mut adv_sum, mut total_sum, mut adv_correct) = (0.0, 0.0, 0.0, 0usize);

        for batch in batches(views.len(), cfg.step2_batch_size, &mut shuffle)? {
            let x = stack_images(batch.iter().map(|&i| &views[i].image))?;
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| train.samples[views[i].index].label)
                .collect();
            let t = one_hot_batch(&labels, k);
            let c = encode(encoder_c, &x)?;

            // adversary: predict the class from r
            let r_const = encode(encoder_r, &x)?;
            for _ in 0..cfg.adv_updates_per_gen_update {
                let mut g = Graph::new();
                let pa = adversary.bind(&mut g, true);
                let rv = g.input(r_const.clone());
                let tv = g.input(t.clone());
                let p = adversary.forward(&mut g, &pa, rv, Mode::Train)?;
                let l = g.cross_entropy(p, tv)?;
                ensure_finite(STAGE, epoch, "adversary loss", g.value(l).item() as f64)?;
                let grads = g.backward(l)?;
                let ga: Vec<Tensor<f32>> = pa.iter().map(|&v| grads.get(v)).collect();
                opt_a.step(adversary.params_mut(), &ga)?;
            }
            ensure_params_finite(STAGE, epoch, adversary)?;

            // generator: reconstruction plus negatively weighted adversary loss
            let mut frozen_adv = adversary.clone();
            let mut g = Graph::new();
            let pr = encoder_r.bind(&mut g, true);
            let pd = decoder.bind(&mut g, true);
            let pa = frozen_adv.bind(&mut g, false);
            let xv = g.input(x);
            let cv = g.input(c);
            let tv = g.input(t);
            let r = encoder_r.forward(&mut g, &pr, xv)?;
            let z = g.concat(cv, r)?;
            let xhat = decoder.forward(&mut g, &pd, z, Mode::Train, &mut dropout)?;
            let rec = g.mse_loss(xhat, xv, cfg.reconstruction)?;
            let p = frozen_adv.forward(&mut g, &pa, r, Mode::Train)?;
            let adv = g.cross_entropy(p, tv)?;
            let weighted = g.scale(adv, lambda);
            let total = g.add(rec, weighted)?;
            let parts = combine_losses(
                g.value(rec).item() as f64,
                g.value(adv).item() as f64,
                cfg.lambda,
            )?;
            ensure_finite(STAGE, epoch, "step-2 total loss", g.value(total).item() as f64)?;
            let pm = g.value(p);
            for (i, &l) in labels.iter().enumerate() {
                if argmax(pm.row(i)) == l {
                    adv_correct += 1;
                }
            }
            let grads = g.backward(total)?;
            let gr: Vec<Tensor<f32>> = pr.iter().map(|&v| grads.get(v)).collect();
            let gd: Vec<Tensor<f32>> = pd.iter().map(|&v| grads.get(v)).collect();
            opt_r.step(encoder_r.params_mut(), &gr)?;
            opt_d.step(decoder.params_mut(), &gd)?;
            ensure_params_finite(STAGE, epoch, encoder_r)?;
            ensure_params_finite(STAGE, epoch, decoder)?;

            let bn = batch.len() as f64;
            rec_sum += parts.rec * bn;
            adv_sum += parts.adv * bn;
            total_sum += parts.total * bn;
        }

        let ev = evaluate_step2(val, encoder_c, encoder_r, decoder, adversary)?;
        ensure_finite(STAGE, epoch, "validation reconstruction", ev.rec)?;
        let n = views.len() as f64;
        let scale = match cfg.reconstruction {
            Reduction::Mean => 1.0 / train.samples[0].image.len() as f64,
            _ => 1.0,
        };
        log.records.push(EpochRecord {
            stage: STAGE.to_string(),
            epoch,
            rec: Some(rec_sum / n),
            adv: Some(adv_sum / n),
            total: Some(total_sum / n),
            adv_accuracy: Some(adv_correct as f64 / n),
            val_rec: Some(ev.rec * scale),
            val_adv: Some(ev.adv),
            val_adv_accuracy: Some(ev.adv_accuracy),
            ..EpochRecord::default()
        });
        if ev.rec < best.0 {
            best = (ev.rec, encoder_r.clone(), decoder.clone(), adversary.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (best_rec, er, dec, adv) = best;
    *encoder_r = er;
    *decoder = dec;
    *adversary = adv;
    Ok(Step2Outcome {
        log,
        initial_val_rec: initial.rec,
        best_val_rec: best_rec,
    })
}

/// `G_R(concat(E_C(x), E_R(x)))` in eval mode.
pub fn reconstruct(
    encoder_c: &Encoder<f32>,
    encoder_r: &Encoder<f32>,
    decoder: &Decoder<f32>,
    x: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let c = encode(encoder_c, x)?;
    let r = encode(encoder_r, x)?;
    let mut g = Graph::new();
    let pd = decoder.bind(&mut g, false);
    let cv = g.input(c);
    let rv = g.input(r);
    let z = g.concat(cv, rv)?;
    let mut unused = rng::stream(0, &[]);
    let out = decoder.forward(&mut g, &pd, z, Mode::Eval, &mut unused)?;
    Ok(g.value(out).clone())
}

/// Codes `[N,D]` for every image in `ds`.
pub fn encode_dataset(encoder: &Encoder<f32>, ds: &Dataset) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(ds.len() * encoder.code_dim());
    for chunk in ds.samples.chunks(64) {
        let x = stack_images(chunk.iter().map(|s| &s.image))?;
        out.extend_from_slice(encode(encoder, &x)?.data());
    }
    Tensor::new([ds.len(), encoder.code_dim()], out)
}

/// How much class information a representation carries: accuracy of a fresh
/// classifier head trained on one set of codes and scored on another.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent test class.
    pub chance: f64,
}

pub const PROBE_EPOCHS: usize = 100;

pub fn probe_accuracy(
    train_codes: &Tensor<f32>,
    train_labels: &[usize],
    test_codes: &Tensor<f32>,
    test_labels: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if train_labels.len() < 2 || test_labels.is_empty() {
        return Err(Error::Data("probe needs at least 2 training and 1 test code".into()));
    }
    let dim = train_codes.shape()[1];
    let mut init = rng::stream(seed, &[tag("probe-init")]);
    let mut head = ClassifierHead::<f32>::new(dim, class_count, &mut init);
    let mut opt = Adam::new(AdamConfig::default());
    let t_all = one_hot_batch(train_labels, class_count);
    for epoch in 0..PROBE_EPOCHS {
        let mut shuffle = rng::stream(seed, &[tag("probe-shuffle"), epoch as u64]);
        for batch in batches(train_labels.len(), 32, &mut shuffle)? {
            let codes: Vec<f32> = batch.iter().flat_map(|&i| train_codes.row(i).to_vec()).collect();
            let targets: Vec<f32> = batch.iter().flat_map(|&i| t_all.row(i).to_vec()).collect();
            let mut g = Graph::new();
            let ph = head.bind(&mut g, true);
            let cv = g.input(Tensor::new([batch.len(), dim], codes)?);
            let tv = g.input(Tensor::new([batch.len(), class_count], targets)?);
            let p = head.forward(&mut g, &ph, cv, Mode::Train)?;
            let l = g.cross_entropy(p, tv)?;
            let grads = g.backward(l)?;
            let gh: Vec<Tensor<f32>> = ph.iter().map(|&v| grads.get(v)).collect();
            opt.step(head.params_mut(), &gh)?;
        }
    }
    head.recalibrate(train_codes)?;
    let mut g = Graph::new();
    let ph = head.bind(&mut g, false);
    let cv = g.input(test_codes.clone());
    let p = head.forward(&mut g, &ph, cv, Mode::Eval)?;
    let pm = g.value(p);
    let correct = test_labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(pm.row(*i)) == l)
        .count();
    let mut counts = vec![0usize; class_count];
    for &l in test_labels {
        counts[l] += 1;
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / test_labels.len() as f64,
        chance: *counts.iter().max().unwrap_or(&0) as f64 / test_labels.len() as f64,
    })
}
