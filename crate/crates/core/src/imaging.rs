//! Float RGB/gray images, file I/O and colour-space conversions.
//!
//! Pixel values live in `[0, 1]` as `f64`; every constructor and transform
//! clamps rather than wraps. Files ending in `.mttb` hold the exact values as
//! an `MTTB` tensor (`HxWx3` or `HxW`, f64) named `image`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{read_mttb_file, write_mttb_file, AnyTensor, Element, Tensor};

const MTTB_IMAGE_ENTRY: &str = "image";

fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `H x W x 3` image, row-major, channels interleaved as (r, g, b).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// `H x W` single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageRGB {
    /// Build from interleaved values, clamping into `[0, 1]` (NaN maps to 0).
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(clamp01).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let px = rgb.map(clamp01);
        Self {
            height,
            width,
            data: (0..height * width).flat_map(|_| px).collect(),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).map(clamp01));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// One colour plane as a row-major vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.pixels().flat_map(|p| f(p).map(clamp01)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(self.height - 1 - y, x))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(
                "crop",
                format!("{height}x{width} at ({top},{left}) exceeds {}x{}", self.height, self.width),
            ));
        }
        Ok(Self::from_fn(height, width, |y, x| self.pixel(top + y, left + x)))
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |y, x| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let (y0, x0) = ((fy as usize).min(self.height - 1), (fx as usize).min(self.width - 1));
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let (a, b, c, d) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
            std::array::from_fn(|k| {
                (1.0 - ty) * ((1.0 - tx) * a[k] + tx * b[k]) + ty * ((1.0 - tx) * c[k] + tx * d[k])
            })
        })
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut data = vec![T::zero(); 3 * plane];
        for (i, px) in self.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::from_f64(px[c]);
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("consistent shape")
    }

    /// Sample `index` of an `N x 3 x H x W` tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims4("image")?;
        if c != 3 {
            return Err(Error::Dim {
                op: "image",
                axis: "C",
                expected: 3,
                got: c,
            });
        }
        if index >= n {
            return Err(Error::Dim {
                op: "image",
                axis: "N",
                expected: index + 1,
                got: n,
            });
        }
        let plane = h * w;
        let base = index * 3 * plane;
        let d = t.data();
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3 {
                data.push(d[base + ch * plane + i].as_f64());
            }
        }
        Self::from_vec(h, w, data)
    }
}

impl ImageGray {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(clamp01).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            data: vec![clamp01(v); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let data = self.data.chunks(self.width.max(1)).flat_map(|row| row.iter().rev().copied()).collect();
        Self { data, ..*self }
    }

    pub fn flip_vertical(&self) -> Self {
        let data = self.data.chunks(self.width.max(1)).rev().flatten().copied().collect();
        Self { data, ..*self }
    }

    pub fn to_rgb(&self) -> ImageRGB {
        ImageRGB {
            height: self.height,
            width: self.width,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// `1 x 1 x H x W` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("consistent shape")
    }

    /// Sample `index` of an `N x 1 x H x W` tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims4("image")?;
        if c != 1 || index >= n {
            return Err(Error::shape("image", format!("cannot take gray sample {index} of {:?}", t.shape())));
        }
        let plane = h * w;
        Self::from_vec(h, w, t.data()[index * plane..(index + 1) * plane].iter().map(|v| v.as_f64()).collect())
    }
}

/// Borrowed image of either kind, accepted by [`save_image`].
#[derive(Clone, Copy, Debug)]
pub enum ImageRef<'a> {
    Rgb(&'a ImageRGB),
    Gray(&'a ImageGray),
}

impl<'a> From<&'a ImageRGB> for ImageRef<'a> {
    fn from(img: &'a ImageRGB) -> Self {
        ImageRef::Rgb(img)
    }
}

impl<'a> From<&'a ImageGray> for ImageRef<'a> {
    fn from(img: &'a ImageGray) -> Self {
        ImageRef::Gray(img)
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// 8-bit quantisation with round-half-up.
pub fn quantize_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor() as u8
}

/// Load a PNG, PPM/PGM or `.mttb` image. Gray inputs are replicated to three
/// channels; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    if extension(path) == "mttb" {
        return load_mttb_image(path);
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f64> = match &decoded {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => decoded.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => decoded
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        _ => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                msg: format!("unsupported pixel format {:?}", decoded.color()),
            })
        }
    };
    ImageRGB::from_vec(h, w, data)
}

fn load_mttb_image(path: &Path) -> Result<ImageRGB> {
    let entries = read_mttb_file(path)?;
    let tensor = entries
        .iter()
        .find(|(n, _)| n == MTTB_IMAGE_ENTRY)
        .or_else(|| entries.first())
        .map(|(_, t)| t.to_f64())
        .ok_or_else(|| Error::Decode {
            path: path.to_path_buf(),
            msg: "container holds no tensors".into(),
        })?;
    match *tensor.shape() {
        [h, w, 3] => ImageRGB::from_vec(h, w, tensor.into_vec()),
        [h, w] => Ok(ImageGray::from_vec(h, w, tensor.into_vec())?.to_rgb()),
        ref other => Err(Error::Decode {
            path: path.to_path_buf(),
            msg: format!("tensor shape {other:?} is not an image"),
        }),
    }
}

/// Load a single-channel map (PNG/PGM luma or `.mttb`).
pub fn load_gray(path: impl AsRef<Path>) -> Result<ImageGray> {
    let path = path.as_ref();
    if extension(path) == "mttb" {
        let entries = read_mttb_file(path)?;
        let t = entries.first().map(|(_, t)| t.to_f64()).ok_or_else(|| Error::Decode {
            path: path.to_path_buf(),
            msg: "container holds no tensors".into(),
        })?;
        return match *t.shape() {
            [h, w] | [1, 1, h, w] => ImageGray::from_vec(h, w, t.into_vec()),
            ref other => Err(Error::Decode {
                path: path.to_path_buf(),
                msg: format!("tensor shape {other:?} is not a single-channel map"),
            }),
        };
    }
    let rgb = load_image(path)?;
    ImageGray::from_vec(rgb.height, rgb.width, rgb.channel(0))
}

/// Save as 8-bit PNG/PNM, or exactly as `.mttb`, chosen by extension.
pub fn save_image<'a>(img: impl Into<ImageRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = img.into();
    let ext = extension(path);
    if ext == "mttb" {
        let tensor = match img {
            ImageRef::Rgb(i) => Tensor::from_vec([i.height, i.width, 3], i.data.clone())?,
            ImageRef::Gray(i) => Tensor::from_vec([i.height, i.width], i.data.clone())?,
        };
        return write_mttb_file(path, &[(MTTB_IMAGE_ENTRY.to_string(), AnyTensor::F64(tensor))]);
    }
    let format = match ext.as_str() {
        "png" => ImageFormat::Png,
        "ppm" | "pgm" | "pnm" => ImageFormat::Pnm,
        other => {
            return Err(Error::Usage(format!(
                "cannot save `{}`: unsupported extension `{other}` (use png, ppm, pgm or mttb)",
                path.display()
            )))
        }
    };
    let bytes = |d: &[f64]| d.iter().map(|&v| quantize_u8(v)).collect::<Vec<u8>>();
    let dynamic = match img {
        ImageRef::Rgb(i) => DynamicImage::ImageRgb8(
            RgbImage::from_raw(i.width as u32, i.height as u32, bytes(&i.data)).expect("buffer size"),
        ),
        ImageRef::Gray(i) => DynamicImage::ImageLuma8(
            GrayImage::from_raw(i.width as u32, i.height as u32, bytes(&i.data)).expect("buffer size"),
        ),
    };
    dynamic.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })
}

/// Per-pixel three-component colour values (Lab or HSV), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorPlanes {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 3]>,
}

/// D65 reference white in XYZ.
pub const D65_WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIE L*a*b* of one sRGB pixel (L in `[0, 100]`).
pub fn srgb_pixel_to_lab(px: [f64; 3]) -> [f64; 3] {
    let lin = px.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|r| {
        SRGB_TO_XYZ[r][0] * lin[0] + SRGB_TO_XYZ[r][1] * lin[1] + SRGB_TO_XYZ[r][2] * lin[2]
    });
    let f: [f64; 3] = std::array::from_fn(|i| lab_f(xyz[i] / D65_WHITE[i]));
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

pub fn rgb_to_lab(img: &ImageRGB) -> ColorPlanes {
    ColorPlanes {
        height: img.height,
        width: img.width,
        data: img.pixels().map(srgb_pixel_to_lab).collect(),
    }
}

/// Hexcone HSV of one pixel: hue in degrees `[0, 360)`, S and V in `[0, 1]`.
pub fn rgb_pixel_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    [if h >= 360.0 { h - 360.0 } else { h }, s, max]
}

pub fn rgb_to_hsv(img: &ImageRGB) -> ColorPlanes {
    ColorPlanes {
        height: img.height,
        width: img.width,
        data: img.pixels().map(rgb_pixel_to_hsv).collect(),
    }
}

/// ITU-R BT.601 luma.
pub fn luma(img: &ImageRGB) -> Vec<f64> {
    img.pixels()
        .map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect()
}
