//! Synthetic paired data, the loss, the Adam training loop and inference.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{load_gray, load_image, save_image, ImageGray, ImageRGB};
use crate::metrics::{psnr, ssim};
use crate::network::MturModel;
use crate::physics::{
    degrade_rgb, depth_field, estimate_airlight, estimate_mt, synth_transmission_rgb, Airlight, DepthStyle, MapRole,
    PhysicsParams, TransmissionMap,
};
use crate::tensor::{adam_step, AdamConfig, AdamState, Element, Graph, Tensor, Var};

/// One training pair with its transmission supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub degraded: ImageRGB,
    pub reference: ImageRGB,
    pub mt_target: TransmissionMap,
}

impl Sample {
    pub fn new(degraded: ImageRGB, reference: ImageRGB, mt_target: TransmissionMap) -> Result<Self> {
        for (what, dims) in [("reference", reference.dims()), ("mt_target", mt_target.dims())] {
            if dims != degraded.dims() {
                return Err(Error::shape(
                    "sample",
                    format!("{what} is {}x{}, degraded is {}x{}", dims.0, dims.1, degraded.height(), degraded.width()),
                ));
            }
        }
        Ok(Self {
            degraded,
            reference,
            mt_target,
        })
    }
}

/// Where clean images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CleanSource {
    /// Fractal colour fields with random flat shapes on top.
    Procedural,
    /// Every PNG/PPM/MTTB file of a directory, randomly cropped or resized.
    Directory(PathBuf),
}

/// What the MT branch is supervised with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtTargetMode {
    /// Dark-channel estimate of the degraded image (with estimated airlight).
    Estimated,
    /// The generating transmission of the green channel.
    True,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub image_size: usize,
    pub physics: PhysicsParams,
    pub mt_target: MtTargetMode,
    /// `[lo, hi]` per channel (r, g, b).
    pub airlight_ranges: [[f64; 2]; 3],
    pub beta_ranges: [[f64; 2]; 3],
    pub d_max_range: [f64; 2],
    /// Use `T = 1` for every sample (degraded equals reference).
    pub force_clear: bool,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            physics: PhysicsParams::default(),
            mt_target: MtTargetMode::Estimated,
            airlight_ranges: [[0.05, 0.3], [0.4, 0.9], [0.4, 0.9]],
            beta_ranges: [[0.6, 2.0], [0.1, 0.6], [0.05, 0.4]],
            d_max_range: [0.5, 2.5],
            force_clear: false,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be at least 1".into()));
        }
        let ok = |r: &[f64; 2], lo: f64, hi: f64| r[0] <= r[1] && r[0] >= lo && r[1] <= hi;
        for r in &self.airlight_ranges {
            if !ok(r, f64::MIN_POSITIVE, 1.0) {
                return Err(Error::Config(format!("airlight range {r:?} must lie in (0, 1]")));
            }
        }
        for r in &self.beta_ranges {
            if !ok(r, f64::MIN_POSITIVE, f64::MAX) {
                return Err(Error::Config(format!("attenuation range {r:?} must be positive")));
            }
        }
        if !ok(&self.d_max_range, 0.0, f64::MAX) {
            return Err(Error::Config(format!("depth range {:?} must be non-negative", self.d_max_range)));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Procedural clean scene: a fractal colour field plus a few flat discs and
/// rectangles.
pub fn procedural_clean(size: usize, rng: &mut ChaCha8Rng) -> Result<ImageRGB> {
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|_| depth_field(size, size, rng.random(), DepthStyle::Perlin, 1.0))
        .collect::<Result<_>>()?;
    let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.4));
    let hi: [f64; 3] = std::array::from_fn(|c| rng.random_range(lo[c] + 0.3..1.0));
    let mut img: Vec<[f64; 3]> = (0..size * size)
        .map(|i| std::array::from_fn(|c| lo[c] + (hi[c] - lo[c]) * planes[c][i]))
        .collect();
    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
        let cy = rng.random_range(0.0..size as f64);
        let cx = rng.random_range(0.0..size as f64);
        let r = rng.random_range(size as f64 / 12.0..size as f64 / 4.0);
        let disc = rng.random::<bool>();
        for (i, px) in img.iter_mut().enumerate() {
            let (dy, dx) = ((i / size) as f64 + 0.5 - cy, (i % size) as f64 + 0.5 - cx);
            let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r * 0.7 };
            if inside {
                *px = colour;
            }
        }
    }
    ImageRGB::from_vec(size, size, img.into_iter().flatten().collect())
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm" | "pgm" | "mttb")
    )
}

/// Image files of `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn crop_or_resize(img: &ImageRGB, size: usize, rng: &mut ChaCha8Rng) -> Result<ImageRGB> {
    let (h, w) = img.dims();
    if h >= size && w >= size {
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        img.crop(top, left, size, size)
    } else {
        Ok(img.resize(size, size))
    }
}

/// Degrade `clean` with a random underwater medium and build its sample.
pub fn synthesize_sample(clean: ImageRGB, params: &DatasetParams, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = clean.dims();
    let a = Airlight::new(
        draw(rng, params.airlight_ranges[0]),
        draw(rng, params.airlight_ranges[1]),
        draw(rng, params.airlight_ranges[2]),
    )?;
    let beta: [f64; 3] = std::array::from_fn(|c| draw(rng, params.beta_ranges[c]));
    let style = [DepthStyle::Constant, DepthStyle::LinearRamp, DepthStyle::Perlin][rng.random_range(0..3)];
    let d_max = if params.force_clear { 0.0 } else { draw(rng, params.d_max_range) };
    let t = synth_transmission_rgb(h, w, rng.random(), beta, style, d_max)?;
    let degraded = degrade_rgb(&clean, [&t[0], &t[1], &t[2]], &a)?;
    let mt_target = match params.mt_target {
        MtTargetMode::True => t[1].clone(),
        MtTargetMode::Estimated => {
            let est_a = estimate_airlight(&degraded, &params.physics)?;
            estimate_mt(&degraded, &est_a, params.physics.patch_radius)
        }
    };
    Sample::new(degraded, clean, mt_target)
}

/// `n` samples; sample `i` draws from its own ChaCha8 stream, so the result
/// does not depend on thread scheduling.
pub fn make_synthetic_dataset(source: &CleanSource, n: usize, params: &DatasetParams, seed: u64) -> Result<Vec<Sample>> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let pool: Vec<ImageRGB> = match source {
        CleanSource::Procedural => Vec::new(),
        CleanSource::Directory(dir) => {
            let files = list_images(dir)?;
            if files.is_empty() {
                return Err(Error::Config(format!("no images found in {}", dir.display())));
            }
            files.iter().map(load_image).collect::<Result<_>>()?
        }
    };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let clean = if pool.is_empty() {
                procedural_clean(params.image_size, &mut rng)?
            } else {
                let pick = rng.random_range(0..pool.len());
                crop_or_resize(&pool[pick], params.image_size, &mut rng)?
            };
            synthesize_sample(clean, params, &mut rng)
        })
        .collect()
}

/// SHA-256 (hex) over the dimensions and exact values of every sample.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        for (dims, data) in [
            (s.degraded.dims(), s.degraded.data()),
            (s.reference.dims(), s.reference.data()),
            (s.mt_target.dims(), s.mt_target.values()),
        ] {
            h.update((dims.0 as u64).to_le_bytes());
            h.update((dims.1 as u64).to_le_bytes());
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// One row of a dataset manifest; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub degraded_path: PathBuf,
    pub reference_path: PathBuf,
    pub mt_path: PathBuf,
}

/// Write every sample as images (`ext` = `png` or `mttb`) plus
/// `manifest.json` into `dir`; returns the manifest path.
pub fn save_dataset(samples: &[Sample], dir: &Path, ext: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let e = ManifestEntry {
                degraded_path: format!("{i:05}_degraded.{ext}").into(),
                reference_path: format!("{i:05}_reference.{ext}").into(),
                mt_path: format!("{i:05}_mt.{ext}").into(),
            };
            save_image(&s.degraded, dir.join(&e.degraded_path))?;
            save_image(&s.reference, dir.join(&e.reference_path))?;
            save_image(s.mt_target.map(), dir.join(&e.mt_path))?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries)? + "\n";
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Decode {
            path: manifest.to_path_buf(),
            msg: e.to_string(),
        })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    entries
        .par_iter()
        .map(|e| {
            let mt = load_gray(base.join(&e.mt_path))?;
            Sample::new(
                load_image(base.join(&e.degraded_path))?,
                load_image(base.join(&e.reference_path))?,
                TransmissionMap::new(mt, MapRole::Estimated),
            )
        })
        .collect()
}

/// Loss graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub image: Var,
    pub mt: Var,
}

/// `mean|enh - ref| + lambda_mt * mean (mt - target)^2`.
pub fn loss_graph<T: Element>(
    g: &mut Graph<T>,
    enhanced: Var,
    reference: Var,
    mt_pred: Var,
    mt_target: Var,
    lambda_mt: f64,
) -> Result<LossVars> {
    let d = g.sub(enhanced, reference)?;
    let d = g.abs(d);
    let image = g.mean(d);
    let e = g.sub(mt_pred, mt_target)?;
    let e = g.square(e);
    let mt = g.mean(e);
    let weighted = g.scale(mt, lambda_mt);
    let total = g.add(image, weighted)?;
    Ok(LossVars { total, image, mt })
}

/// [`loss_graph`] on plain tensors; shapes must match exactly.
pub fn compute_loss<T: Element>(
    enhanced: &Tensor<T>,
    reference: &Tensor<T>,
    mt_pred: &Tensor<T>,
    mt_target: &Tensor<T>,
    lambda_mt: f64,
) -> Result<f64> {
    for (what, a, b) in [("image", enhanced, reference), ("mt", mt_pred, mt_target)] {
        if a.shape() != b.shape() {
            return Err(Error::shape("loss", format!("{what} shapes {:?} and {:?} differ", a.shape(), b.shape())));
        }
    }
    let mut g = Graph::inference();
    let vars = [enhanced, reference, mt_pred, mt_target].map(|t| g.input(t.clone()));
    let l = loss_graph(&mut g, vars[0], vars[1], vars[2], vars[3], lambda_mt)?;
    Ok(g.value(l.total).item()?.as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero at the last iteration.
    Cosine,
}

impl LrSchedule {
    /// Learning rate for 1-based iteration `it` of `total`.
    pub fn at(self, lr: f64, it: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let p = (it - 1) as f64 / total.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub iterations: usize,
    pub lambda_mt: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = only the final one).
    pub checkpoint_every: usize,
    pub image_size: usize,
    /// Validate every this many iterations (0 = only at the end).
    pub validate_every: usize,
    /// Random horizontal and vertical flips of each drawn sample.
    pub augment: bool,
    /// Where checkpoints and the report go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            iterations: 2000,
            lambda_mt: 1.0,
            seed: 0,
            checkpoint_every: 0,
            image_size: 64,
            validate_every: 0,
            augment: true,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted (it freezes the parameters).
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if !(self.lambda_mt >= 0.0 && self.lambda_mt.is_finite()) {
            return Err(Error::Config(format!("lambda_mt {} must be non-negative", self.lambda_mt)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub image_loss: f64,
    pub mt_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mt_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub dataset_hash: String,
    /// Loss over the whole training set before the first step.
    pub initial_loss: f64,
    /// Loss over the whole training set after the last step.
    pub final_loss: f64,
    pub iterations: Vec<IterationRecord>,
    pub validation: Vec<ValidationRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Stack samples `idx` into `(input, reference, mt_target)` batch tensors.
pub fn batch_tensors<T: Element>(samples: &[Sample], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w) = samples[idx[0]].degraded.dims();
    let mut x = Vec::with_capacity(idx.len() * 3 * h * w);
    let mut r = Vec::with_capacity(idx.len() * 3 * h * w);
    let mut t = Vec::with_capacity(idx.len() * h * w);
    for &i in idx {
        let s = &samples[i];
        if s.degraded.dims() != (h, w) {
            return Err(Error::shape("batch", format!("sample {i} is {:?}, batch is {h}x{w}", s.degraded.dims())));
        }
        x.extend_from_slice(s.degraded.to_tensor::<T>().data());
        r.extend_from_slice(s.reference.to_tensor::<T>().data());
        t.extend(s.mt_target.values().iter().map(|&v| T::from_f64(v)));
    }
    let n = idx.len();
    Ok((
        Tensor::from_vec([n, 3, h, w], x)?,
        Tensor::from_vec([n, 3, h, w], r)?,
        Tensor::from_vec([n, 1, h, w], t)?,
    ))
}

/// The sample mirrored left-right and/or upside down.
pub fn flip_sample(s: &Sample, horizontal: bool, vertical: bool) -> Sample {
    let mut out = s.clone();
    if horizontal {
        out.degraded = out.degraded.flip_horizontal();
        out.reference = out.reference.flip_horizontal();
        out.mt_target = TransmissionMap::new(out.mt_target.map().flip_horizontal(), out.mt_target.role());
    }
    if vertical {
        out.degraded = out.degraded.flip_vertical();
        out.reference = out.reference.flip_vertical();
        out.mt_target = TransmissionMap::new(out.mt_target.map().flip_vertical(), out.mt_target.role());
    }
    out
}

/// Mean loss over `samples`, evaluated in chunks without gradients.
pub fn dataset_loss<T: Element>(model: &MturModel<T>, samples: &[Sample], lambda_mt: f64, chunk: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for part in idx.chunks(chunk.max(1)) {
        let (x, r, t) = batch_tensors::<T>(samples, part)?;
        let (enh, mt) = model.predict(&x)?;
        total += compute_loss(&enh, &r, &mt, &t, lambda_mt)? * part.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Forward, clamp to `[0, 1]` and split into image and map.
pub fn infer<T: Element>(model: &MturModel<T>, img: &ImageRGB) -> Result<(ImageRGB, ImageGray)> {
    let (enh, mt) = model.predict(&img.to_tensor::<T>())?;
    Ok((ImageRGB::from_tensor(&enh, 0)?, ImageGray::from_tensor(&mt, 0)?))
}

/// Mean PSNR, SSIM and MT mean absolute error of `model` on `samples`.
pub fn validate<T: Element>(model: &MturModel<T>, samples: &[Sample], iteration: usize) -> Result<ValidationRecord> {
    let mut acc = [0.0; 3];
    for s in samples {
        let (enh, mt) = infer(model, &s.degraded)?;
        acc[0] += psnr(&enh, &s.reference)?;
        acc[1] += ssim(&enh, &s.reference)?;
        acc[2] += mt
            .data()
            .iter()
            .zip(s.mt_target.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / mt.data().len() as f64;
    }
    let n = samples.len().max(1) as f64;
    Ok(ValidationRecord {
        iteration,
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        mt_mae: acc[2] / n,
    })
}

fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.mttb"))
}

/// Adam over seeded, shuffled minibatches (last partial batch dropped). `progress` sees every iteration record.
///
/// A non-finite loss aborts with [`Error::Numerical`] naming the batch; the
/// parameters from before that step are written to `last_good.mttb` when an
/// output directory is configured.
pub fn train<T: Element>(
    model: &mut MturModel<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&IterationRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} samples, fewer than batch_size {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut report = TrainReport {
        config: cfg.clone(),
        dataset_hash: dataset_hash(train_set),
        initial_loss: dataset_loss(model, train_set, cfg.lambda_mt, cfg.batch_size)?,
        final_loss: f64::NAN,
        iterations: Vec::with_capacity(cfg.iterations),
        validation: Vec::new(),
        final_checkpoint: None,
    };
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let start = Instant::now();

    for it in 1..=cfg.iterations {
        if cursor + cfg.batch_size > order.len() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;

        let (x, r, t) = if cfg.augment {
            let flipped: Vec<Sample> = idx
                .iter()
                .map(|&i| flip_sample(&train_set[i], rng.random(), rng.random()))
                .collect();
            batch_tensors::<T>(&flipped, &(0..flipped.len()).collect::<Vec<_>>())?
        } else {
            batch_tensors::<T>(train_set, idx)?
        };
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = model.forward(&mut g, xv)?;
        let rv = g.input(r);
        let tv = g.input(t);
        let loss = loss_graph(&mut g, out.enhanced, rv, out.mt_pred, tv, cfg.lambda_mt)?;
        let value = g.value(loss.total).item()?.as_f64();
        if !value.is_finite() {
            let mut msg = format!("loss is {value} at iteration {it}, batch indices {idx:?}");
            if let Some(dir) = &cfg.out_dir {
                let p = checkpoint_path(dir, "last_good");
                model.save(&p)?;
                msg.push_str(&format!("; last good parameters written to {}", p.display()));
            }
            return Err(Error::Numerical(msg));
        }
        let rec = IterationRecord {
            iteration: it,
            lr: cfg.lr_schedule.at(cfg.lr, it, cfg.iterations),
            loss: value,
            image_loss: g.value(loss.image).item()?.as_f64(),
            mt_loss: g.value(loss.mt).item()?.as_f64(),
            seconds: 0.0,
        };
        let grads = g.backward(loss.total)?.into_named();
        drop(g);
        adam.config.lr = cfg.lr_schedule.at(cfg.lr, it, cfg.iterations);
        adam_step(model.params_mut(), &grads, &mut adam)
            .map_err(|e| Error::Numerical(format!("{e} at iteration {it}, batch indices {idx:?}")))?;
        let rec = IterationRecord {
            seconds: start.elapsed().as_secs_f64(),
            ..rec
        };
        progress(&rec);
        report.iterations.push(rec);

        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it != cfg.iterations {
                model.save(checkpoint_path(dir, &format!("checkpoint_{it:06}")))?;
            }
        }
        if cfg.validate_every > 0 && it % cfg.validate_every == 0 && it != cfg.iterations && !val_set.is_empty() {
            report.validation.push(validate(model, val_set, it)?);
        }
    }

    if !val_set.is_empty() {
        report.validation.push(validate(model, val_set, cfg.iterations)?);
    }
    report.final_loss = dataset_loss(model, train_set, cfg.lambda_mt, cfg.batch_size)?;
    if let Some(dir) = &cfg.out_dir {
        let p = checkpoint_path(dir, "final");
        model.save(&p)?;
        report.final_checkpoint = Some(p);
        report.save(dir.join("report.json"))?;
    }
    Ok(report)
}
