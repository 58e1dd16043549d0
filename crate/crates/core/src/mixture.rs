//! Synthetic samples from specified codes.
//!
//! A mixture sample keeps the unspecified code `r` of a training image and
//! replaces its specified code `c` with a convex combination of `c` and the
//! nearest specified codes (Euclidean) of every other class. The classifier
//! target is the vector of mixing proportions placed at the component classes.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autograd::Mode;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{decode, encode, Encoder, ModelSet};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// Simplex tolerance for proportions and targets.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::invalid(format!(
            "{what} {p:?} is not on the probability simplex (sum {total})"
        )));
    }
    Ok(())
}

/// Probability vector over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    probs: Vec<f64>,
}

impl SoftTarget {
    pub fn one_hot(label: usize, class_count: usize) -> Self {
        let mut probs = vec![0.0; class_count];
        probs[label] = 1.0;
        SoftTarget { probs }
    }

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs, "target")?;
        Ok(SoftTarget { probs })
    }

    /// From single-precision storage: renormalized after checking the values
    /// are nonnegative and sum to one at `f32` precision.
    pub fn from_stored(raw: &[f32]) -> Result<Self> {
        let probs: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("stored target {raw:?} is not a distribution")));
        }
        Ok(SoftTarget {
            probs: probs.into_iter().map(|v| v / total).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest mass, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::vector(self.probs.iter().map(|&p| T::lit(p)).collect())
    }
}

/// Lowest index of the maximum.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub id: u64,
    pub code: Vec<f32>,
}

/// Specified codes of the training split, grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBank {
    pub code_dim: usize,
    pub classes: Vec<Vec<BankEntry>>,
}

impl CodeBank {
    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.classes.iter().flatten().map(|e| e.id).collect()
    }
}

/// Encodes every sample of `train` with the specified encoder. Fails if any
/// class of the dataset has no sample.
pub fn build_code_bank(train: &Dataset, encoder: &Encoder<f32>) -> Result<CodeBank> {
    let mut classes: Vec<Vec<BankEntry>> = vec![Vec::new(); train.class_count()];
    for chunk in train.samples.chunks(64) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let codes = encode(encoder, &Tensor::stack(&images)?)?;
        for (s, code) in chunk.iter().zip(codes.unstack()) {
            classes[s.label].push(BankEntry {
                id: s.id,
                code: code.into_data(),
            });
        }
    }
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!(
            "class '{}' has no training samples for the code bank",
            train.class_names[c]
        )));
    }
    Ok(CodeBank {
        code_dim: encoder.code_dim(),
        classes,
    })
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub class: usize,
    pub id: u64,
    pub code: Vec<f32>,
    pub distance: f64,
}

/// The `k` nearest entries of one class ordered by (distance, id).
fn nearest_in_class(c: &[f32], class: usize, bank: &CodeBank, k: usize) -> Result<Vec<Neighbor>> {
    let entries = bank
        .classes
        .get(class)
        .filter(|e| !e.is_empty())
        .ok_or_else(|| Error::Data(format!("code bank has no entries for class {class}")))?;
    let mut scored: Vec<(f64, u64, &BankEntry)> = entries
        .iter()
        .map(|e| (squared_distance(c, &e.code), e.id, e))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(k.max(1))
        .map(|(d, id, e)| Neighbor {
            class,
            id,
            code: e.code.clone(),
            distance: d.sqrt(),
        })
        .collect())
}

/// For every class other than `source_class`, the bank entry closest to `c`
/// in Euclidean distance, lowest sample id first on ties.
pub fn nearest_cross_class_codes(c: &[f32], source_class: usize, bank: &CodeBank) -> Result<Vec<Neighbor>> {
    if c.len() != bank.code_dim {
        return Err(Error::shape("nearest_cross_class_codes", &[c.len()], &[bank.code_dim]));
    }
    (0..bank.classes.len())
        .filter(|&k| k != source_class)
        .map(|k| nearest_in_class(c, k, bank, 1).map(|mut v| v.remove(0)))
        .collect()
}

/// Symmetric Dirichlet(`alpha`) draw of length `k`.
pub fn sample_proportions<R: Rng + ?Sized>(k: usize, rng: &mut R, alpha: f64) -> Result<Vec<f64>> {
    if k == 0 || !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "proportions need k >= 1 and alpha > 0, got k={k} alpha={alpha}"
        )));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        // every draw underflowed: the limit of a tiny concentration is a vertex
        let mut out = vec![0.0; k];
        out[rng.random_range(0..k)] = 1.0;
        return Ok(out);
    }
    Ok(draws.into_iter().map(|g| g / total).collect())
}

/// `Σ proportion_i · code_i`, accumulated in double precision.
pub fn mix_codes(components: &[(&[f32], f64)]) -> Result<Vec<f32>> {
    let first = components
        .first()
        .ok_or_else(|| Error::invalid("mixture of zero codes"))?;
    let dim = first.0.len();
    let props: Vec<f64> = components.iter().map(|c| c.1).collect();
    check_simplex(&props, "mixture proportions")?;
    let mut acc = vec![0.0f64; dim];
    for (code, p) in components {
        if code.len() != dim {
            return Err(Error::shape("mix_codes", &[dim], &[code.len()]));
        }
        for (a, &v) in acc.iter_mut().zip(*code) {
            *a += p * v as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Target placing `proportions[i]` at `classes[i]` and zero elsewhere.
pub fn mixture_target(classes: &[usize], proportions: &[f64], class_count: usize) -> Result<SoftTarget> {
    if classes.len() != proportions.len() {
        return Err(Error::invalid(format!(
            "{} classes but {} proportions",
            classes.len(),
            proportions.len()
        )));
    }
    let mut probs = vec![0.0; class_count];
    let mut seen = BTreeSet::new();
    for (&c, &p) in classes.iter().zip(proportions) {
        if c >= class_count {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        if !seen.insert(c) {
            return Err(Error::invalid(format!("class {c} appears twice in the mixture")));
        }
        probs[c] = p;
    }
    SoftTarget::new(probs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// Dirichlet concentration of the proportions.
    pub alpha: f64,
    /// Synthetic samples per real sample per epoch.
    pub synthetic_ratio: f64,
    /// Candidate neighbours per other class; one is picked at random.
    pub neighbors_per_class: usize,
    /// Classes taking part in each mixture including the source class; all
    /// classes when unset.
    pub classes_in_mixture: Option<usize>,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            alpha: 1.0,
            synthetic_ratio: 1.0,
            neighbors_per_class: 1,
            classes_in_mixture: None,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("mixture alpha {} must be positive", self.alpha)));
        }
        if !(self.synthetic_ratio >= 0.0) {
            return Err(Error::Config("synthetic_ratio must be nonnegative".into()));
        }
        if self.neighbors_per_class == 0 {
            return Err(Error::Config("neighbors_per_class must be at least 1".into()));
        }
        if self.classes_in_mixture == Some(0) {
            return Err(Error::Config("classes_in_mixture must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub class: usize,
    /// Sample whose specified code is used.
    pub id: u64,
    pub code: Vec<f32>,
    pub proportion: f64,
}

/// Recipe for one synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
    /// Sample whose unspecified code is used.
    pub r_source: u64,
}

impl MixtureSpec {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let props: Vec<f64> = self.components.iter().map(|c| c.proportion).collect();
        check_simplex(&props, "mixture proportions")?;
        let classes: BTreeSet<usize> = self.components.iter().map(|c| c.class).collect();
        if classes.len() != self.components.len() || classes.len() > class_count {
            return Err(Error::invalid("mixture component classes must be distinct"));
        }
        if !self.components.iter().any(|c| c.id == self.r_source) {
            return Err(Error::invalid("mixture must include the source sample's own code"));
        }
        Ok(())
    }

    pub fn mixed_code(&self) -> Result<Vec<f32>> {
        let parts: Vec<(&[f32], f64)> = self
            .components
            .iter()
            .map(|c| (c.code.as_slice(), c.proportion))
            .collect();
        mix_codes(&parts)
    }

    pub fn target(&self, class_count: usize) -> Result<SoftTarget> {
        let classes: Vec<usize> = self.components.iter().map(|c| c.class).collect();
        let props: Vec<f64> = self.components.iter().map(|c| c.proportion).collect();
        mixture_target(&classes, &props, class_count)
    }
}

/// Chooses the mixture components for a source code and draws proportions.
/// `forced` replaces the random proportions (source first, then the other
/// classes in ascending order).
pub fn plan_mixture(
    c: &[f32],
    label: usize,
    id: u64,
    bank: &CodeBank,
    cfg: &MixtureConfig,
    forced: Option<&[f64]>,
    rng: &mut Stream,
) -> Result<MixtureSpec> {
    let class_count = bank.classes.len();
    let mut others: Vec<usize> = (0..class_count).filter(|&k| k != label).collect();
    if let Some(m) = cfg.classes_in_mixture {
        let keep = m.saturating_sub(1).min(others.len());
        if keep < others.len() {
            others.shuffle(rng);
            others.truncate(keep);
            others.sort_unstable();
        }
    }
    let mut components = vec![MixtureComponent {
        class: label,
        id,
        code: c.to_vec(),
        proportion: 0.0,
    }];
    for &k in &others {
        let candidates = nearest_in_class(c, k, bank, cfg.neighbors_per_class)?;
        let pick = if candidates.len() > 1 {
            rng.random_range(0..candidates.len())
        } else {
            0
        };
        let n = &candidates[pick];
        components.push(MixtureComponent {
            class: k,
            id: n.id,
            code: n.code.clone(),
            proportion: 0.0,
        });
    }
    let props = match forced {
        Some(p) => {
            if p.len() != components.len() {
                return Err(Error::invalid(format!(
                    "{} forced proportions for {} components",
                    p.len(),
                    components.len()
                )));
            }
            p.to_vec()
        }
        None => sample_proportions(components.len(), rng, cfg.alpha)?,
    };
    for (comp, p) in components.iter_mut().zip(props) {
        comp.proportion = p;
    }
    let spec = MixtureSpec {
        components,
        r_source: id,
    };
    spec.validate(class_count)?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    pub image: Tensor<f32>,
    pub target: SoftTarget,
    pub spec: MixtureSpec,
}

/// Decodes `concat(mix, r)` in eval mode.
fn decode_latent(models: &ModelSet<f32>, c: Vec<f32>, r: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut z = c;
    z.extend_from_slice(r.data());
    // eval mode never draws from the stream
    let mut unused = <Stream as rand::SeedableRng>::seed_from_u64(0);
    decode(&models.decoder, &Tensor::vector(z), Mode::Eval, &mut unused)
}

/// New training sample from image `x` (class `label`, id `id`): its own
/// unspecified code with a mixture of specified codes.
pub fn synthesize_mixture_sample(
    x: &Tensor<f32>,
    label: usize,
    id: u64,
    bank: &CodeBank,
    models: &ModelSet<f32>,
    cfg: &MixtureConfig,
    forced: Option<&[f64]>,
    rng: &mut Stream,
) -> Result<Synthesized> {
    let c = encode(&models.encoder_c, x)?;
    let r = encode(&models.encoder_r, x)?;
    let spec = plan_mixture(c.data(), label, id, bank, cfg, forced, rng)?;
    let image = decode_latent(models, spec.mixed_code()?, r)?;
    let target = spec.target(bank.classes.len())?;
    Ok(Synthesized {
        image,
        target,
        spec,
    })
}

/// `G_R(E_C(y), E_R(x))`: unspecified factors of `x` with the specified
/// factors of `y`.
pub fn swap_codes(x: &Tensor<f32>, y: &Tensor<f32>, models: &ModelSet<f32>) -> Result<Tensor<f32>> {
    if x.shape() != y.shape() {
        return Err(Error::shape("swap_codes", x.shape(), y.shape()));
    }
    let c = encode(&models.encoder_c, y)?;
    let r = encode(&models.encoder_r, x)?;
    decode_latent(models, c.into_data(), r)
}
