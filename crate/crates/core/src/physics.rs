//! Underwater image formation `I = J T + A (1 - T)`, the dark-channel
//! transmission estimate and synthetic transmission fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ImageGray, ImageRGB};

/// Lower clamp for estimated airlight channels.
pub const AIRLIGHT_FLOOR: f64 = 0.05;

/// Ambient back-scattered light colour.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Airlight {
    pub a_r: f64,
    pub a_g: f64,
    pub a_b: f64,
}

impl Airlight {
    pub fn new(a_r: f64, a_g: f64, a_b: f64) -> Result<Self> {
        for v in [a_r, a_g, a_b] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("airlight channel {v} outside (0, 1]")));
            }
        }
        Ok(Self { a_r, a_g, a_b })
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::new(v, v, v)
    }

    pub fn rgb(&self) -> [f64; 3] {
        [self.a_r, self.a_g, self.a_b]
    }

    fn from_rgb([r, g, b]: [f64; 3]) -> Result<Self> {
        Self::new(r, g, b)
    }
}

/// Where a transmission map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapRole {
    /// Ground truth used to synthesize data.
    True,
    /// Dark-channel estimate.
    Estimated,
    /// Network prediction.
    Predicted,
}

/// Per-pixel transmission in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap {
    map: ImageGray,
    role: MapRole,
}

impl TransmissionMap {
    pub fn new(map: ImageGray, role: MapRole) -> Self {
        Self { map, role }
    }

    pub fn constant(height: usize, width: usize, t: f64, role: MapRole) -> Self {
        Self::new(ImageGray::filled(height, width, t), role)
    }

    pub fn role(&self) -> MapRole {
        self.role
    }

    pub fn map(&self) -> &ImageGray {
        &self.map
    }

    pub fn into_map(self) -> ImageGray {
        self.map
    }

    pub fn dims(&self) -> (usize, usize) {
        self.map.dims()
    }

    pub fn values(&self) -> &[f64] {
        self.map.data()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsParams {
    /// Half-width of the square patch.
    pub patch_radius: usize,
    /// Fraction of brightest dark-channel pixels averaged into the airlight.
    pub airlight_quantile: f64,
    /// Smallest transmission divided by during inversion.
    pub t0: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            patch_radius: 7,
            airlight_quantile: 0.001,
            t0: 0.1,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 1 {
            return Err(Error::Config("patch_radius must be at least 1".into()));
        }
        if !(self.airlight_quantile > 0.0 && self.airlight_quantile <= 0.05) {
            return Err(Error::Config(format!(
                "airlight_quantile {} outside (0, 0.05]",
                self.airlight_quantile
            )));
        }
        check_t0(self.t0)
    }
}

fn check_t0(t0: f64) -> Result<()> {
    if t0 > 0.0 && t0 < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("t0 {t0} outside (0, 1)")))
    }
}

fn check_dims(op: &'static str, img: (usize, usize), map: (usize, usize)) -> Result<()> {
    if img.0 != map.0 {
        return Err(Error::Dim {
            op,
            axis: "H",
            expected: img.0,
            got: map.0,
        });
    }
    if img.1 != map.1 {
        return Err(Error::Dim {
            op,
            axis: "W",
            expected: img.1,
            got: map.1,
        });
    }
    Ok(())
}

/// Square min filter of radius `r` with edge replication, done as two 1-D
/// passes (the clamped square window is separable).
pub fn min_filter(data: &[f64], height: usize, width: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; data.len()];
    rows.par_chunks_mut(width.max(1))
        .zip(data.par_chunks(width.max(1)))
        .for_each(|(out, src)| {
            for (x, o) in out.iter_mut().enumerate() {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(width - 1);
                *o = src[lo..=hi].iter().copied().fold(f64::INFINITY, f64::min);
            }
        });
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(width.max(1)).enumerate().for_each(|(y, row)| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        for (x, o) in row.iter_mut().enumerate() {
            *o = (lo..=hi).map(|yy| rows[yy * width + x]).fold(f64::INFINITY, f64::min);
        }
    });
    out
}

/// `min` over the `(2r+1)^2` patch of `min_c I^c / A^c`, clamped to `[0, 1]`.
pub fn dark_channel(img: &ImageRGB, airlight: &Airlight, patch_radius: usize) -> ImageGray {
    let a = airlight.rgb();
    let ratio: Vec<f64> = img
        .pixels()
        .map(|p| (p[0] / a[0]).min(p[1] / a[1]).min(p[2] / a[2]))
        .collect();
    let (h, w) = img.dims();
    let dc = min_filter(&ratio, h, w, patch_radius);
    ImageGray::from_vec(h, w, dc).expect("same dims")
}

/// Mean colour of the brightest `airlight_quantile` fraction of pixels by
/// plain dark channel, clamped to `[AIRLIGHT_FLOOR, 1]`.
///
/// At least one pixel is always used, so images smaller than
/// `1 / airlight_quantile` pixels fall back to their single brightest pixel.
pub fn estimate_airlight(img: &ImageRGB, params: &PhysicsParams) -> Result<Airlight> {
    params.validate()?;
    let n = img.height() * img.width();
    if n == 0 {
        return Err(Error::shape("estimate_airlight", "empty image"));
    }
    let white = Airlight::gray(1.0)?;
    let dc = dark_channel(img, &white, params.patch_radius);
    let k = ((params.airlight_quantile * n as f64).floor() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // descending; ties keep raster order
    order.sort_by(|&i, &j| dc.data()[j].total_cmp(&dc.data()[i]).then(i.cmp(&j)));
    let mut sum = [0.0; 3];
    for &i in &order[..k] {
        let px = img.pixel(i / img.width(), i % img.width());
        for c in 0..3 {
            sum[c] += px[c];
        }
    }
    Airlight::from_rgb(sum.map(|s| (s / k as f64).clamp(AIRLIGHT_FLOOR, 1.0)))
}

/// `T~ = 1 - dark_channel(I, A, r)`.
pub fn estimate_mt(img: &ImageRGB, airlight: &Airlight, patch_radius: usize) -> TransmissionMap {
    let dc = dark_channel(img, airlight, patch_radius);
    let (h, w) = dc.dims();
    let t = dc.data().iter().map(|d| 1.0 - d).collect();
    TransmissionMap::new(ImageGray::from_vec(h, w, t).expect("same dims"), MapRole::Estimated)
}

/// Forward model with one transmission shared by all channels.
pub fn degrade(clean: &ImageRGB, t: &TransmissionMap, airlight: &Airlight) -> Result<ImageRGB> {
    degrade_rgb(clean, [t, t, t], airlight)
}

/// Forward model with a separate transmission per channel.
pub fn degrade_rgb(clean: &ImageRGB, t: [&TransmissionMap; 3], airlight: &Airlight) -> Result<ImageRGB> {
    for m in t {
        check_dims("degrade", clean.dims(), m.dims())?;
    }
    let a = airlight.rgb();
    let w = clean.width();
    Ok(ImageRGB::from_fn(clean.height(), w, |y, x| {
        let j = clean.pixel(y, x);
        let i = y * w + x;
        std::array::from_fn(|c| {
            let tc = t[c].values()[i];
            j[c] * tc + a[c] * (1.0 - tc)
        })
    }))
}

/// Classical inversion `J = (I - A (1 - T)) / max(T, t0)`.
pub fn invert_restore(img: &ImageRGB, t: &TransmissionMap, airlight: &Airlight, t0: f64) -> Result<ImageRGB> {
    check_t0(t0)?;
    check_dims("invert_restore", img.dims(), t.dims())?;
    let a = airlight.rgb();
    let w = img.width();
    Ok(ImageRGB::from_fn(img.height(), w, |y, x| {
        let px = img.pixel(y, x);
        let tv = t.values()[y * w + x];
        let d = tv.max(t0);
        std::array::from_fn(|c| (px[c] - a[c] * (1.0 - tv)) / d)
    }))
}

/// Shape of the synthetic depth field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthStyle {
    /// `d_max` everywhere.
    Constant,
    /// Planar ramp from 0 to `d_max` along a seeded direction.
    LinearRamp,
    /// Fractal lattice noise rescaled to span `[0, d_max]`.
    Perlin,
}

/// Sum of octaves of smoothly interpolated random lattice values.
struct FractalNoise {
    octaves: Vec<(u64, f64, f64)>,
}

impl FractalNoise {
    fn new(rng: &mut ChaCha8Rng, octaves: usize) -> Self {
        Self {
            octaves: (0..octaves)
                .map(|_| (rng.random::<u64>(), rng.random::<f64>() * 64.0, rng.random::<f64>() * 64.0))
                .collect(),
        }
    }

    fn lattice(key: u64, x: i64, y: i64) -> f64 {
        // splitmix64 finalizer over the packed coordinates
        let mut z = key ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }

    fn value(key: u64, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let smooth = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let (sx, sy) = (smooth(x - x0), smooth(y - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let top = Self::lattice(key, ix, iy) * (1.0 - sx) + Self::lattice(key, ix + 1, iy) * sx;
        let bottom = Self::lattice(key, ix, iy + 1) * (1.0 - sx) + Self::lattice(key, ix + 1, iy + 1) * sx;
        top * (1.0 - sy) + bottom * sy
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let mut freq = 1.0;
        let mut amp = 1.0;
        let mut total = 0.0;
        for &(key, ox, oy) in &self.octaves {
            total += amp * Self::value(key, ox + x * freq, oy + y * freq);
            freq *= 2.0;
            amp *= 0.5;
        }
        total
    }
}

/// Depth field in `[0, d_max]`, deterministic in `seed`.
pub fn depth_field(height: usize, width: usize, seed: u64, style: DepthStyle, d_max: f64) -> Result<Vec<f64>> {
    if !(d_max >= 0.0 && d_max.is_finite()) {
        return Err(Error::Config(format!("d_max {d_max} must be finite and non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = match style {
        DepthStyle::Constant => return Ok(vec![d_max; height * width]),
        DepthStyle::LinearRamp => {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let (s, c) = theta.sin_cos();
            (0..height * width)
                .map(|i| (i % width) as f64 * c + (i / width) as f64 * s)
                .collect()
        }
        DepthStyle::Perlin => {
            let cells = 3.0 / height.max(width).max(1) as f64;
            let noise = FractalNoise::new(&mut rng, 4);
            (0..height * width)
                .map(|i| noise.sample((i % width) as f64 * cells, (i / width) as f64 * cells))
                .collect()
        }
    };
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(raw
        .into_iter()
        .map(|v| if span > 0.0 { (v - lo) / span * d_max } else { 0.0 })
        .collect())
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("attenuation {beta} must be positive")))
    }
}

fn attenuate(depth: &[f64], beta: f64, height: usize, width: usize) -> TransmissionMap {
    let t = depth.iter().map(|d| (-beta * d).exp()).collect();
    TransmissionMap::new(ImageGray::from_vec(height, width, t).expect("same dims"), MapRole::True)
}

/// `T = exp(-beta d)` over a seeded depth field.
pub fn synth_transmission(
    height: usize,
    width: usize,
    seed: u64,
    beta: f64,
    style: DepthStyle,
    d_max: f64,
) -> Result<TransmissionMap> {
    check_beta(beta)?;
    let depth = depth_field(height, width, seed, style, d_max)?;
    Ok(attenuate(&depth, beta, height, width))
}

/// Per-channel variant: one shared depth field, one attenuation per channel.
pub fn synth_transmission_rgb(
    height: usize,
    width: usize,
    seed: u64,
    beta: [f64; 3],
    style: DepthStyle,
    d_max: f64,
) -> Result<[TransmissionMap; 3]> {
    for b in beta {
        check_beta(b)?;
    }
    let depth = depth_field(height, width, seed, style, d_max)?;
    Ok(beta.map(|b| attenuate(&depth, b, height, width)))
}
