//! Labelled image sets: the procedural four-class benchmark, ROI resizing,
//! online affine augmentation, stratified k-fold planning and the `FFDS`
//! binary file format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::SoftTarget;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_CLASS_NAMES: [&str; 4] = ["cyst", "metastasis", "hemangioma", "healthy"];

/// Class counts of the reference lesion collection.
pub const PAPER_COUNTS: [usize; 4] = [66, 81, 65, 27];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub target: SoftTarget,
    /// `[1,H,W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// `[C,H,W]` shared by every image.
    pub image_shape: [usize; 3],
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, image_shape: [usize; 3]) -> Result<Self> {
        let ds = Dataset {
            samples,
            class_names,
            image_shape,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            if s.label >= self.class_count() {
                return Err(Error::Data(format!(
                    "sample {} has label {} but only {} classes",
                    s.id,
                    s.label,
                    self.class_count()
                )));
            }
            if s.image.shape() != self.image_shape {
                return Err(Error::shape("dataset image", s.image.shape(), &self.image_shape));
            }
            if s.target.len() != self.class_count() {
                return Err(Error::Data(format!("sample {} target has wrong length", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            image_shape: self.image_shape,
        }
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }
}

fn class_names_for(k: usize) -> Vec<String> {
    if k == DEFAULT_CLASS_NAMES.len() {
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Procedural benchmark
// ---------------------------------------------------------------------------

/// Smooth random field in roughly `[-1,1]`: a coarse uniform grid upsampled
/// bilinearly.
fn value_noise(rng: &mut Stream, grid: usize, size: usize) -> Vec<f32> {
    let coarse: Vec<f32> = (0..grid * grid).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = Tensor::new([1, grid, grid], coarse).expect("grid shape");
    bilinear_resize(&t, size, size).into_data()
}

fn gaussian(rng: &mut Stream) -> f32 {
    // Box–Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

fn smoothstep(edge0: f32, edge1: f32, x: f32) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one image of class `label`. Class identity lives in interior
/// contrast and texture; placement, size, orientation and background vary
/// freely for every class.
fn render(label: usize, size: usize, rng: &mut Stream) -> Tensor<f32> {
    let s = size as f32;
    let base = rng.random_range(0.36..0.52f32);
    let bg_tex = value_noise(rng, 5, size);
    let bg_amp = rng.random_range(0.03..0.07f32);
    let mut img: Vec<f32> = bg_tex.iter().map(|&n| base + bg_amp * n).collect();

    let cx = rng.random_range(0.3..0.7f32) * s;
    let cy = rng.random_range(0.3..0.7f32) * s;
    let ra = rng.random_range(0.13..0.27f32) * s;
    let rb = ra * rng.random_range(0.6..1.0f32);
    let theta = rng.random_range(0.0..std::f32::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let mottle = value_noise(rng, 6, size);

    let lesion = label < 3;
    let (interior, rim, speckle, mottle_amp) = match label {
        // dark, smooth interior
        0 => (base - rng.random_range(0.12..0.28f32), 0.0, 0.015, 0.0),
        // mid-gray interior with fine speckle
        1 => (
            base + rng.random_range(-0.08..0.06f32),
            0.0,
            rng.random_range(0.05..0.11f32),
            0.0,
        ),
        // bright rim, mottled interior
        2 => (
            base + rng.random_range(-0.02..0.1f32),
            rng.random_range(0.08..0.25f32),
            0.02,
            rng.random_range(0.05..0.12f32),
        ),
        _ => (base, 0.0, 0.0, 0.0),
    };
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let u = (cos * dx + sin * dy) / ra;
            let v = (-sin * dx + cos * dy) / rb;
            let d = (u * u + v * v).sqrt();
            if lesion {
                let inside = 1.0 - smoothstep(0.85, 1.05, d);
                let ring = (-((d - 0.95) * (d - 0.95)) / 0.012).exp();
                let tex = interior + mottle_amp * mottle[i] + speckle * gaussian(rng);
                img[i] = img[i] * (1.0 - inside) + tex * inside + rim * ring;
            }
            img[i] += 0.02 * gaussian(rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new([1, size, size], img).expect("image shape")
}

/// Deterministic benchmark with exactly `counts[c]` images of class `c`.
/// Sample ids are assigned in class order starting from 0.
pub fn generate_synthetic(counts: &[usize], image_size: usize, seed: u64) -> Result<Dataset> {
    if counts.len() < 2 || counts.contains(&0) {
        return Err(Error::Config(format!(
            "synthetic counts must be positive for at least two classes, got {counts:?}"
        )));
    }
    if image_size < 4 {
        return Err(Error::Config(format!("image size {image_size} too small")));
    }
    let k = counts.len();
    let mut samples = Vec::with_capacity(counts.iter().sum());
    for (label, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let id = samples.len() as u64;
            let mut r = rng::stream(seed, &[rng::tag("synthetic"), id]);
            samples.push(Sample {
                id,
                label,
                target: SoftTarget::one_hot(label, k),
                image: render(label % 4, image_size, &mut r),
            });
        }
    }
    Dataset::new(samples, class_names_for(k), [1, image_size, image_size])
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

fn bilinear_resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let src = image.data();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] as f64 * (1.0 - tx) + src[y0 * w + x1] as f64 * tx;
            let bot = src[y1 * w + x0] as f64 * (1.0 - tx) + src[y1 * w + x1] as f64 * tx;
            out.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    Tensor::new([1, out_h, out_w], out).expect("resize shape")
}

/// Bilinear resize of a `[1,h,w]` region of interest to `[1,side,side]`,
/// sampling at pixel centres with edge clamping.
pub fn resize_roi(image: &Tensor<f32>, side: usize) -> Result<Tensor<f32>> {
    match image.shape() {
        [1, h, w] if *h >= 2 && *w >= 2 && side >= 1 => Ok(bilinear_resize(image, side, side)),
        s => Err(Error::Data(format!(
            "cannot resize image of shape {s:?} to {side}x{side}"
        ))),
    }
}

/// Ranges from which one random affine transform is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRanges {
    pub scale: (f64, f64),
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of the image side.
    pub translation: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            scale: (0.9, 1.1),
            rotation_deg: 15.0,
            translation: 0.1,
        }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        AffineRanges {
            scale: (1.0, 1.0),
            rotation_deg: 0.0,
            translation: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let draw = |rng: &mut R, lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        AffineParams {
            scale: draw(rng, self.scale.0, self.scale.1),
            rotation_deg: draw(rng, -self.rotation_deg, self.rotation_deg),
            tx: draw(rng, -self.translation, self.translation),
            ty: draw(rng, -self.translation, self.translation),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    pub rotation_deg: f64,
    /// Translation as a fraction of the image side.
    pub tx: f64,
    pub ty: f64,
}

/// Applies a scale/rotation/translation about the image centre with bilinear
/// resampling; pixels mapping outside the frame read as zero.
pub fn apply_affine(image: &Tensor<f32>, p: &AffineParams) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let src = image.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let (tx, ty) = (p.tx * w as f64, p.ty * h as f64);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let px = (ox as f64 - cx - tx) / p.scale;
            let py = (oy as f64 - cy - ty) / p.scale;
            // inverse rotation
            let sx = cos * px + sin * py + cx;
            let sy = -sin * px + cos * py + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// One random affine view of `image`.
pub fn affine_augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R, ranges: &AffineRanges) -> Tensor<f32> {
    let p = ranges.sample(rng);
    apply_affine(image, &p)
}

/// One augmented view of a dataset sample.
#[derive(Clone, Debug)]
pub struct View {
    /// Index into the dataset's sample list.
    pub index: usize,
    pub image: Tensor<f32>,
}

/// All views of one epoch: `views` independent augmentations of every sample
/// in `indices`, in sample-major order.
pub fn epoch_views<R: Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    views: usize,
    ranges: &AffineRanges,
    rng: &mut R,
) -> Vec<View> {
    let mut out = Vec::with_capacity(indices.len() * views);
    for &i in indices {
        for _ in 0..views {
            out.push(View {
                index: i,
                image: affine_augment(&dataset.samples[i].image, rng, ranges),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fold planning
// ---------------------------------------------------------------------------

/// Index sets (into the dataset's sample list) for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub val_fraction: f64,
    /// Sample id to test-fold index.
    pub assignments: BTreeMap<u64, usize>,
    pub folds: Vec<FoldSplit>,
}

/// Splits `total` into per-class quotas proportional to `sizes` by the
/// largest-remainder rule, lowest class index first on ties.
fn apportion(sizes: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes.iter().map(|&n| n as f64 * fraction).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(sizes.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[c] < sizes[c] {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    quota
}

/// Stratified k-fold plan. Fold `i` tests on its own samples; the remaining
/// samples are split into train and a stratified validation set holding
/// `round(val_fraction · n)` of them.
pub fn kfold_split(dataset: &Dataset, k: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0,1)")));
    }
    let classes = dataset.class_count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::Data(format!(
                "class '{}' has {} samples, fewer than k = {k}",
                dataset.class_names[c],
                members.len()
            )));
        }
    }
    let mut r = rng::stream(seed, &[rng::tag("kfold")]);
    let mut fold_of = vec![0usize; dataset.len()];
    let mut offset = 0;
    for members in &mut by_class {
        members.shuffle(&mut r);
        for (j, &i) in members.iter().enumerate() {
            fold_of[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test: Vec<usize> = (0..dataset.len()).filter(|&i| fold_of[i] == f).collect();
        let mut rest: Vec<Vec<usize>> = by_class
            .iter()
            .map(|m| {
                let mut v: Vec<usize> = m.iter().copied().filter(|&i| fold_of[i] != f).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let sizes: Vec<usize> = rest.iter().map(Vec::len).collect();
        let n_rest: usize = sizes.iter().sum();
        let n_val = (val_fraction * n_rest as f64).round() as usize;
        let quota = apportion(&sizes, val_fraction, n_val);
        let mut vr = rng::stream(seed, &[rng::tag("validation"), f as u64]);
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (members, q) in rest.iter_mut().zip(quota) {
            members.shuffle(&mut vr);
            val.extend_from_slice(&members[..q]);
            train.extend_from_slice(&members[q..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        folds.push(FoldSplit { train, val, test });
    }
    let assignments = dataset
        .samples
        .iter()
        .zip(&fold_of)
        .map(|(s, &f)| (s.id, f))
        .collect();
    Ok(FoldPlan {
        k,
        val_fraction,
        assignments,
        folds,
    })
}

// ---------------------------------------------------------------------------
// FFDS file format
// ---------------------------------------------------------------------------

pub const FFDS_MAGIC: &[u8; 4] = b"FFDS";
pub const FFDS_VERSION: u16 = 1;

/// Little-endian cursor that reports the byte offset of any failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.offset(),
            message: message.into(),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("unexpected end of data reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| self.fail("length overflow"))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let start = self.offset();
        let raw = self.bytes(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            offset: start,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::invalid(format!("string too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let k = ds.class_count();
    if k > u8::MAX as usize + 1 || k > u16::MAX as usize {
        return Err(Error::Data(format!("{k} classes do not fit the label field")));
    }
    let count = u32::try_from(ds.len()).map_err(|_| Error::Data("too many samples".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(FFDS_MAGIC);
    out.extend_from_slice(&FFDS_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for d in ds.image_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(k as u16).to_le_bytes());
    for name in &ds.class_names {
        put_string(&mut out, name)?;
    }
    for s in &ds.samples {
        out.extend_from_slice(&s.id.to_le_bytes());
        out.push(s.label as u8);
        for &p in s.target.probs() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        for &v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    if r.bytes(4, "magic")? != FFDS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected FFDS".into(),
        });
    }
    let version = r.u16("version")?;
    if version != FFDS_VERSION {
        return Err(Error::Version {
            kind: "FFDS",
            found: version,
            expected: FFDS_VERSION,
        });
    }
    let count = r.u32("sample count")? as usize;
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let k = r.u16("class count")? as usize;
    let mut class_names = Vec::with_capacity(k);
    for _ in 0..k {
        class_names.push(r.string("class name")?);
    }
    let pixels = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| r.fail("image dimensions overflow"))?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut ids = BTreeSet::new();
    for _ in 0..count {
        let at = r.offset();
        let id = r.u64("sample id")?;
        let label = r.u8("label")? as usize;
        if label >= k {
            return Err(Error::Parse {
                offset: at + 8,
                message: format!("label {label} out of range for {k} classes"),
            });
        }
        if !ids.insert(id) {
            return Err(Error::Parse {
                offset: at,
                message: format!("duplicate sample id {id}"),
            });
        }
        let target_at = r.offset();
        let raw_target = r.f32s(k, "target")?;
        let target = SoftTarget::from_stored(&raw_target).map_err(|e| Error::Parse {
            offset: target_at,
            message: e.to_string(),
        })?;
        let image = r.f32s(pixels, "image")?;
        samples.push(Sample {
            id,
            label,
            target,
            image: Tensor::new([c, h, w], image)?,
        });
    }
    r.finish()?;
    Dataset::new(samples, class_names, [c, h, w])
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generates_requested_counts() {
        let ds = generate_synthetic(&PAPER_COUNTS, 32, 1).unwrap();
        assert_eq!(ds.len(), 239);
        assert_eq!(ds.class_counts(), PAPER_COUNTS.to_vec());
        let small = generate_synthetic(&[1, 1, 1, 1], 32, 1).unwrap();
        let labels: BTreeSet<usize> = small.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels.len(), 4);
        assert!(ds
            .samples
            .iter()
            .all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&[3, 3, 3, 3], 32, 9).unwrap();
        let b = generate_synthetic(&[3, 3, 3, 3], 32, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&[3, 3, 3, 3], 32, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn resize_identity_and_constant() {
        let ds = generate_synthetic(&[1, 1], 32, 3).unwrap();
        let img = &ds.samples[0].image;
        assert!(resize_roi(img, 32).unwrap().max_abs_diff(img) < 1e-6);
        let flat = Tensor::full([1, 5, 7], 0.3f32);
        let out = resize_roi(&flat, 11).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(resize_roi(&Tensor::full([1, 1, 5], 0.3f32), 4).is_err());
    }

    #[test]
    fn resize_two_by_two_to_four() {
        // Pixel-centre sampling: output coordinates map to source rows/cols
        // -0.25→0 (clamped), 0.25, 0.75, 1.25→1 (clamped).
        let img = Tensor::new([1, 2, 2], vec![0.0f32, 1.0, 0.5, 0.25]).unwrap();
        let out = resize_roi(&img, 4).unwrap();
        let t = [0.0, 0.25, 0.75, 1.0];
        for (oy, &ty) in t.iter().enumerate() {
            for (ox, &tx) in t.iter().enumerate() {
                let top = 0.0 * (1.0 - tx) + 1.0 * tx;
                let bot = 0.5 * (1.0 - tx) + 0.25 * tx;
                let want = top * (1.0 - ty) + bot * ty;
                assert!((out.data()[oy * 4 + ox] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_affine_is_identity() {
        let ds = generate_synthetic(&[1, 1], 32, 4).unwrap();
        let img = &ds.samples[1].image;
        let mut r = Stream::seed_from_u64(0);
        let out = affine_augment(img, &mut r, &AffineRanges::identity());
        assert!(out.max_abs_diff(img) < 1e-6);
    }

    #[test]
    fn quarter_turn_permutes_indices() {
        let n = 9;
        let data: Vec<f32> = (0..n * n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let img = Tensor::new([1, n, n], data).unwrap();
        let out = apply_affine(
            &img,
            &AffineParams {
                scale: 1.0,
                rotation_deg: 90.0,
                tx: 0.0,
                ty: 0.0,
            },
        );
        for y in 0..n {
            for x in 0..n {
                let want = img.data()[(n - 1 - x) * n + y];
                assert!((out.data()[y * n + x] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn epoch_yields_views_per_sample() {
        let ds = generate_synthetic(&[2, 3], 32, 4).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut r = Stream::seed_from_u64(0);
        let views = epoch_views(&ds, &idx, 10, &AffineRanges::default(), &mut r);
        assert_eq!(views.len(), 50);
        for v in &views {
            assert_eq!(v.image.shape(), &[1, 32, 32]);
            assert!(v.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn kfold_paper_counts() {
        let ds = generate_synthetic(&PAPER_COUNTS, 32, 2).unwrap();
        let plan = kfold_split(&ds, 3, 0.3, 5).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![79, 80, 80]);
        assert!(matches!(kfold_split(&ds, 1, 0.3, 5), Err(Error::Config(_))));
    }

    #[test]
    fn kfold_rejects_small_class_by_name() {
        let ds = generate_synthetic(&[5, 2, 5, 5], 32, 2).unwrap();
        match kfold_split(&ds, 3, 0.3, 1) {
            Err(Error::Data(msg)) => assert!(msg.contains("metastasis")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn ffds_round_trip_and_errors() {
        let ds = generate_synthetic(&[2, 1, 1, 3], 32, 6).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(&bytes[..4], b"FFDS");
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);

        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_dataset(cut), Err(Error::Parse { .. })));

        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(decode_dataset(&wrong), Err(Error::Version { found: 9, .. })));

        let empty = Dataset::new(vec![], ds.class_names.clone(), [1, 32, 32]).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&empty).unwrap()).unwrap(), empty);
    }
}
