//! Image quality metrics and the inference-speed benchmark.
//!
//! All metrics take images in `[0, 1]`. Coefficients and window sizes live in
//! [`MetricConstants`] so they can be varied for sensitivity checks.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{luma, rgb_to_hsv, rgb_to_lab, ImageRGB};
use crate::network::MturModel;
use crate::tensor::{Element, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConstants {
    // SSIM (Wang et al. 2004)
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    // UCIQE (Yang & Sowmya 2015): chroma std, luminance contrast, saturation
    pub uciqe_coeffs: [f64; 3],
    /// Fraction of pixels in each tail for the luminance contrast.
    pub uciqe_tail: f64,
    // UIQM (Panetta et al. 2016): colourfulness, sharpness, contrast
    pub uiqm_coeffs: [f64; 3],
    /// UICM weights of the opponent mean and spread magnitudes.
    pub uicm_coeffs: [f64; 2],
    pub uicm_trim: f64,
    /// Opponent channels are measured on this scale (255 = 8-bit units).
    pub uicm_scale: f64,
    pub uism_channel_weights: [f64; 3],
    pub block_size: usize,
}

impl Default for MetricConstants {
    fn default() -> Self {
        Self {
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            uciqe_coeffs: [0.4680, 0.2745, 0.2576],
            uciqe_tail: 0.01,
            uiqm_coeffs: [0.0282, 0.2953, 3.5753],
            uicm_coeffs: [-0.0268, 0.1586],
            uicm_trim: 0.1,
            uicm_scale: 255.0,
            uism_channel_weights: [0.299, 0.587, 0.114],
            block_size: 8,
        }
    }
}

fn check_same_dims(op: &'static str, a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    if a.height() != b.height() {
        return Err(Error::Dim {
            op,
            axis: "H",
            expected: a.height(),
            got: b.height(),
        });
    }
    if a.width() != b.width() {
        return Err(Error::Dim {
            op,
            axis: "W",
            expected: a.width(),
            got: b.width(),
        });
    }
    Ok(())
}

/// Mean and population standard deviation. Deviations are taken from the
/// first value before accumulating, so constant data gives exactly 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let k = values[0];
    let (s, s2) = values.iter().fold((0.0, 0.0), |(s, s2), &v| {
        let d = v - k;
        (s + d, s2 + d * d)
    });
    let var = ((s2 - s * s / n) / n).max(0.0);
    (k + s / n, var.sqrt())
}

/// `10 log10(1 / MSE)` with the MSE over all channels, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_same_dims("psnr", a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::shape("psnr", "empty image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    ssim_with(a, b, &MetricConstants::default())
}

/// Single-scale SSIM of the luma planes, mean over all fully inside windows.
pub fn ssim_with(a: &ImageRGB, b: &ImageRGB, k: &MetricConstants) -> Result<f64> {
    check_same_dims("ssim", a, b)?;
    let (h, w) = a.dims();
    let n = k.ssim_window;
    if h < n || w < n {
        return Err(Error::shape("ssim", format!("{h}x{w} image is smaller than the {n}x{n} window")));
    }
    let x = luma(a);
    let y = luma(b);
    let g = gaussian_kernel(n, k.ssim_sigma);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let sxx = filter_valid(&prod(&x, &x), h, w, &g);
    let syy = filter_valid(&prod(&y, &y), h, w, &g);
    let sxy = filter_valid(&prod(&x, &y), h, w, &g);
    let c1 = k.ssim_k1 * k.ssim_k1;
    let c2 = k.ssim_k2 * k.ssim_k2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// The three UCIQE terms before weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UciqeTerms {
    pub chroma_std: f64,
    pub luminance_contrast: f64,
    pub mean_saturation: f64,
}

/// Mean of the `k` largest minus mean of the `k` smallest values,
/// `k = max(1, floor(tail * n))`.
fn tail_contrast(values: &[f64], tail: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((tail * v.len() as f64).floor() as usize).clamp(1, v.len());
    let lo = v[..k].iter().sum::<f64>() / k as f64;
    let hi = v[v.len() - k..].iter().sum::<f64>() / k as f64;
    hi - lo
}

/// Lab components are divided by 100 so all three terms live on comparable
/// unit scales.
pub fn uciqe_terms(img: &ImageRGB, k: &MetricConstants) -> UciqeTerms {
    let lab = rgb_to_lab(img);
    let chroma: Vec<f64> = lab
        .data
        .iter()
        .map(|[_, a, b]| ((a / 100.0).powi(2) + (b / 100.0).powi(2)).sqrt())
        .collect();
    let l: Vec<f64> = lab.data.iter().map(|p| p[0] / 100.0).collect();
    let sat: Vec<f64> = rgb_to_hsv(img).data.iter().map(|p| p[1]).collect();
    UciqeTerms {
        chroma_std: mean_std(&chroma).1,
        luminance_contrast: tail_contrast(&l, k.uciqe_tail),
        mean_saturation: if sat.is_empty() { 0.0 } else { sat.iter().sum::<f64>() / sat.len() as f64 },
    }
}

pub fn uciqe(img: &ImageRGB) -> f64 {
    uciqe_with(img, &MetricConstants::default())
}

pub fn uciqe_with(img: &ImageRGB, k: &MetricConstants) -> f64 {
    let t = uciqe_terms(img, k);
    let c = k.uciqe_coeffs;
    c[0] * t.chroma_std + c[1] * t.luminance_contrast + c[2] * t.mean_saturation
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UiqmScores {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

/// Asymmetrically trimmed mean (drops `ceil(a n)` smallest and `floor(a n)`
/// largest values) and the spread around it over all values.
fn trimmed_stats(values: &[f64], alpha: f64) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let lo = ((alpha * n as f64).ceil() as usize).min(n - 1);
    let hi = ((alpha * n as f64).floor() as usize).min(n - lo - 1);
    let kept = &v[lo..n - hi];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = values.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
    (mu, var)
}

pub fn uicm(img: &ImageRGB, k: &MetricConstants) -> f64 {
    let s = k.uicm_scale;
    let (rg, yb): (Vec<f64>, Vec<f64>) = img
        .pixels()
        .map(|[r, g, b]| (s * (r - g), s * ((r + g) / 2.0 - b)))
        .unzip();
    let (mu_rg, var_rg) = trimmed_stats(&rg, k.uicm_trim);
    let (mu_yb, var_yb) = trimmed_stats(&yb, k.uicm_trim);
    k.uicm_coeffs[0] * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + k.uicm_coeffs[1] * (var_rg + var_yb).sqrt()
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, xx: isize| x[(y.clamp(0, h as isize - 1) as usize) * w + xx.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let gx = (at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y, xx - 1) + at(y + 1, xx - 1));
            let gy = (at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y - 1, xx) + at(y - 1, xx + 1));
            out[y as usize * w + xx as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Visit the (max, min) of every full `b x b` block, starting at the top-left;
/// returns the block count.
fn for_each_block(x: &[f64], h: usize, w: usize, b: usize, mut f: impl FnMut(f64, f64)) -> usize {
    let (k1, k2) = (h / b, w / b);
    for by in 0..k1 {
        for bx in 0..k2 {
            let mut mx = f64::NEG_INFINITY;
            let mut mn = f64::INFINITY;
            for y in by * b..(by + 1) * b {
                for v in &x[y * w + bx * b..y * w + (bx + 1) * b] {
                    mx = mx.max(*v);
                    mn = mn.min(*v);
                }
            }
            f(mx, mn);
        }
    }
    k1 * k2
}

/// `2 / (k1 k2) * sum ln(max / min)`; blocks with a zero extreme add 0.
pub fn eme(x: &[f64], h: usize, w: usize, b: usize) -> f64 {
    let mut sum = 0.0;
    let blocks = for_each_block(x, h, w, b, |mx, mn| {
        if mx > 0.0 && mn > 0.0 {
            sum += (mx / mn).ln();
        }
    });
    if blocks == 0 {
        0.0
    } else {
        2.0 * sum / blocks as f64
    }
}

/// `-1 / (k1 k2) * sum r ln r` with `r = (max - min) / (max + min)`; blocks
/// where `r` is 0 or undefined add 0.
pub fn log_amee(x: &[f64], h: usize, w: usize, b: usize) -> f64 {
    let mut sum = 0.0;
    let blocks = for_each_block(x, h, w, b, |mx, mn| {
        let top = mx - mn;
        let bot = mx + mn;
        if top > 0.0 && bot > 0.0 {
            let r = top / bot;
            sum += r * r.ln();
        }
    });
    if blocks == 0 {
        0.0
    } else {
        -sum / blocks as f64
    }
}

pub fn uism(img: &ImageRGB, k: &MetricConstants) -> f64 {
    let (h, w) = img.dims();
    (0..3)
        .map(|c| {
            let ch = img.channel(c);
            let edges = sobel_magnitude(&ch, h, w);
            let weighted: Vec<f64> = edges.iter().zip(&ch).map(|(e, v)| e * v).collect();
            k.uism_channel_weights[c] * eme(&weighted, h, w, k.block_size)
        })
        .sum()
}

pub fn uiconm(img: &ImageRGB, k: &MetricConstants) -> f64 {
    let (h, w) = img.dims();
    log_amee(&luma(img), h, w, k.block_size)
}

pub fn uiqm(img: &ImageRGB) -> UiqmScores {
    uiqm_with(img, &MetricConstants::default())
}

pub fn uiqm_with(img: &ImageRGB, k: &MetricConstants) -> UiqmScores {
    let (a, b, c) = (uicm(img, k), uism(img, k), uiconm(img, k));
    let w = k.uiqm_coeffs;
    UiqmScores {
        uicm: a,
        uism: b,
        uiconm: c,
        uiqm: w[0] * a + w[1] * b + w[2] * c,
    }
}

/// Scores of one image. Full-reference fields are present only when a
/// reference was supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    pub uiqm: f64,
    pub uciqe: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing_ms: Option<f64>,
}

impl MetricRecord {
    pub fn compute(id: impl Into<String>, img: &ImageRGB, reference: Option<&ImageRGB>, k: &MetricConstants) -> Result<Self> {
        let id = id.into();
        let start = Instant::now();
        let (psnr_v, ssim_v) = match reference {
            Some(r) => (Some(psnr(img, r)?), Some(ssim_with(img, r, k)?)),
            None => (None, None),
        };
        let rec = Self {
            psnr: psnr_v,
            ssim: ssim_v,
            uiqm: uiqm_with(img, k).uiqm,
            uciqe: uciqe_with(img, k),
            timing_ms: Some(start.elapsed().as_secs_f64() * 1e3),
            id,
        };
        rec.check_finite()?;
        Ok(rec)
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in self.values() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("{name} of `{}` is not finite", self.id)));
            }
        }
        Ok(())
    }

    /// Metric values present in this record, in report order.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        let mut v = Vec::new();
        if let Some(p) = self.psnr {
            v.push(("psnr", p));
        }
        if let Some(s) = self.ssim {
            v.push(("ssim", s));
        }
        v.push(("uiqm", self.uiqm));
        v.push(("uciqe", self.uciqe));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub per_image: Vec<MetricRecord>,
    pub aggregate: IndexMap<String, Aggregate>,
}

/// SHA-256 (hex) of the canonical JSON of any serializable configuration.
pub fn config_hash<S: Serialize>(config: &S) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// One image to score, with an optional reference.
pub struct EvalItem {
    pub id: String,
    pub image: ImageRGB,
    pub reference: Option<ImageRGB>,
}

/// Score `items` in parallel (order preserved) and aggregate. `timing_ms` is
/// left out so reruns produce identical reports.
pub fn evaluate(items: &[EvalItem], k: &MetricConstants, config_hash: String) -> Result<EvalReport> {
    let per_image = items
        .par_iter()
        .map(|it| {
            let mut r = MetricRecord::compute(it.id.clone(), &it.image, it.reference.as_ref(), k)?;
            r.timing_ms = None;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        aggregate: aggregate(&per_image),
        config_hash,
        per_image,
    })
}

pub fn aggregate(records: &[MetricRecord]) -> IndexMap<String, Aggregate> {
    let mut cols: IndexMap<String, Vec<f64>> = IndexMap::new();
    for r in records {
        for (name, v) in r.values() {
            cols.entry(name.to_string()).or_default().push(v);
        }
    }
    cols.into_iter()
        .map(|(name, vals)| {
            let (mean, std) = mean_std(&vals);
            (name, Aggregate { mean, std })
        })
        .collect()
}

impl EvalReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per method: `method,n,<metric>_mean,<metric>_std,...`.
    pub fn write_csv<W: Write>(&self, method: &str, out: W) -> Result<()> {
        let to_err = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method".to_string(), "n".to_string()];
        let mut row = vec![method.to_string(), self.per_image.len().to_string()];
        for (name, agg) in &self.aggregate {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_std"));
            row.push(format!("{:.6}", agg.mean));
            row.push(format!("{:.6}", agg.std));
        }
        w.write_record(&header).map_err(to_err)?;
        w.write_record(&row).map_err(to_err)?;
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_csv(&self, method: &str, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(method, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threading {
    Single,
    /// All available cores, or the given count.
    Multi(Option<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub image_size: usize,
    pub threads: usize,
    pub n_warmup: usize,
    pub n_runs: usize,
    pub total_seconds: f64,
    pub fps: f64,
    pub mean_latency_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub latencies_ms: Vec<f64>,
}

impl BenchResult {
    /// Relative gap between the wall-clock total and the sum of per-run
    /// latencies.
    pub fn consistency_gap(&self) -> f64 {
        let sum: f64 = self.latencies_ms.iter().sum::<f64>() / 1e3;
        (self.total_seconds - sum).abs() / self.total_seconds
    }
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Time `n_runs` single-image forwards of a fixed random `size x size` input
/// after `n_warmup` untimed ones.
pub fn fps_benchmark<T: Element>(
    model: &MturModel<T>,
    size: usize,
    n_warmup: usize,
    n_runs: usize,
    threading: Threading,
) -> Result<BenchResult> {
    if n_runs < 3 {
        return Err(Error::Config(format!("n_runs must be at least 3, got {n_runs}")));
    }
    let threads = match threading {
        Threading::Single => 1,
        Threading::Multi(Some(n)) => n.max(1),
        Threading::Multi(None) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::<T>::uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
    pool.install(|| {
        for _ in 0..n_warmup {
            model.predict(&input)?;
        }
        let mut lat = Vec::with_capacity(n_runs);
        let start = Instant::now();
        for _ in 0..n_runs {
            let t = Instant::now();
            model.predict(&input)?;
            lat.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let total = start.elapsed().as_secs_f64();
        let mut sorted = lat.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(BenchResult {
            image_size: size,
            threads,
            n_warmup,
            n_runs,
            total_seconds: total,
            fps: n_runs as f64 / total,
            mean_latency_ms: lat.iter().sum::<f64>() / n_runs as f64,
            p50_ms: percentile(&sorted, 50.0),
            p95_ms: percentile(&sorted, 95.0),
            latencies_ms: lat,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MturConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageRGB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRGB::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let zero = ImageRGB::filled(4, 4, [0.0; 3]);
        let one = ImageRGB::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        let off = ImageRGB::filled(4, 4, [0.6; 3]);
        let base = ImageRGB::filled(4, 4, [0.5; 3]);
        assert!((psnr(&off, &base).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &zero), Err(Error::Dim { .. })));
    }

    #[test]
    fn ssim_closed_forms() {
        let a = random_image(16, 16, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let zero = ImageRGB::filled(16, 16, [0.0; 3]);
        let one = ImageRGB::filled(16, 16, [1.0; 3]);
        let c1 = 0.01f64 * 0.01;
        assert!((ssim(&zero, &one).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&random_image(10, 20, 0), &random_image(10, 20, 1)).is_err());
    }

    #[test]
    fn uciqe_term_isolation() {
        assert_eq!(uciqe(&ImageRGB::filled(9, 9, [0.4; 3])), 0.0);
        let red = ImageRGB::filled(9, 9, [1.0, 0.0, 0.0]);
        assert_eq!(uciqe(&red), 0.2576);
    }

    #[test]
    fn uiqm_closed_forms() {
        let gray = uiqm(&ImageRGB::filled(16, 16, [0.3; 3]));
        assert_eq!((gray.uicm, gray.uism, gray.uiconm, gray.uiqm), (0.0, 0.0, 0.0, 0.0));
        let red = uiqm(&ImageRGB::filled(16, 16, [1.0, 0.0, 0.0]));
        assert!(red.uicm.abs() > 0.0);
        // constant colour: only the opponent-mean term survives
        let expected = -0.0268 * (255.0f64.powi(2) + 127.5f64.powi(2)).sqrt();
        assert!((red.uicm - expected).abs() < 1e-9);
        assert_eq!((red.uism, red.uiconm), (0.0, 0.0));
    }

    #[test]
    fn mean_std_is_exact_on_constants() {
        assert_eq!(mean_std(&[0.1; 7]), (0.1, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15 && (s - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 95.0), 10.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }

    #[test]
    fn records_serialize_without_nan_and_aggregate() {
        let k = MetricConstants::default();
        let items: Vec<EvalItem> = (0..3)
            .map(|i| {
                let img = random_image(16, 16, i);
                EvalItem {
                    id: format!("img{i}"),
                    reference: Some(img.clone()),
                    image: img,
                }
            })
            .collect();
        let rep = evaluate(&items, &k, config_hash(&k).unwrap()).unwrap();
        assert_eq!(rep.aggregate["psnr"], Aggregate { mean: 100.0, std: 0.0 });
        assert_eq!(rep.aggregate["ssim"], Aggregate { mean: 1.0, std: 0.0 });
        let json = serde_json::to_string(&rep).unwrap();
        assert!(!json.contains("NaN") && !json.contains("timing_ms"));
        let mut csv = Vec::new();
        rep.write_csv("identity", &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("method,n,psnr_mean,psnr_std,ssim_mean"));
        assert!(text.contains("identity,3,100.000000"));
    }

    #[test]
    fn bench_bookkeeping() {
        let m = MturModel::<f32>::build(MturConfig::tiny(), 0).unwrap();
        let r = fps_benchmark(&m, 32, 1, 3, Threading::Single).unwrap();
        assert_eq!(r.latencies_ms.len(), 3);
        assert!((r.fps - 3.0 / r.total_seconds).abs() < 1e-9);
        assert!(r.consistency_gap() < 0.01);
        assert!(r.p50_ms <= r.p95_ms);
        assert!(fps_benchmark(&m, 32, 0, 2, Threading::Single).is_err());
    }

    proptest! {
        #[test]
        fn full_reference_metrics_are_symmetric(seed in 0u64..500) {
            let a = random_image(12, 13, seed);
            let b = random_image(12, 13, seed + 1000);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn psnr_falls_as_noise_grows(seed in 0u64..500) {
            let clean = ImageRGB::filled(8, 8, [0.5; 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let p: Vec<f64> = [0.05, 0.1, 0.2]
                .iter()
                .map(|amp| {
                    let d = clean.data().iter().zip(&noise).map(|(c, n)| c + amp * n).collect();
                    psnr(&ImageRGB::from_vec(8, 8, d).unwrap(), &clean).unwrap()
                })
                .collect();
            prop_assert!(p[0] > p[1] && p[1] > p[2]);
        }

        #[test]
        fn no_reference_metrics_ignore_flips(seed in 0u64..200) {
            let img = random_image(16, 24, seed);
            for f in [img.flip_horizontal(), img.flip_vertical()] {
                prop_assert!((uciqe(&img) - uciqe(&f)).abs() < 1e-6);
                prop_assert!((uiqm(&img).uiqm - uiqm(&f).uiqm).abs() < 1e-6);
            }
        }
    }
}
