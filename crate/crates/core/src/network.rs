//! The two-branch restoration network.
//!
//! ```text
//! input ─ stem (3x3 s2, GN, SELU) ─┬─ MT encoder (B x [3x3 s2, GN, SELU])
//!                                  │    └─ MT decoder (B x [nearest up, 3x3, GN, SELU, + skip])
//!                                  │         └─ 1x1 head ─ bilinear up ─ sigmoid ─ mt_pred
//!                                  └─ entry (3x3 s2, ReLU) ─ DRB x D ─ bilinear up
//!                                       (+ 1x1 laterals from the decoder after the fusion points)
//!       F = O + O * mt_pred ─ concat mt_pred ─ head (3x3, ReLU, 3x3) ─ + input ─ enhanced
//! ```
//!
//! Channel widths: the stem and the enhancement stream carry `C =
//! base_channels`; encoder block `i` (1-based) carries `C * 2^i`; decoder
//! block `j` mirrors encoder level `B - j`. Fusion points are matched to
//! decoder levels from the finest usable one (`C * 2`, at a quarter of the
//! input size) outwards.
//!
//! Parameter count with `B` encoder blocks, `D` residual blocks, `k` fusion
//! points and a head input of `c_h = C + 1` channels (`C` without concat):
//!
//! ```text
//! stem      27C + C + 2C
//! encoder   sum_i 9 C^2 2^(2i-1) + 3 C 2^i
//! decoder   sum_j 9 C^2 2^(2(B-j)+1) + 3 C 2^(B-j)
//! mt head   C + 1
//! entry     9C^2 + C
//! DRBs      D (18C^2 + 2C)
//! laterals  sum_p (C_level(p) C + C)
//! head      9 c_h C + C + 27C + 3        (1x1 variant: 3 c_h + 3)
//! ```
//!
//! Inputs whose sides are not multiples of `2^(B+1)` are replicate-padded on
//! the bottom and right and the outputs cropped back.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    read_mttb_file, write_mttb_file, Activation, AnyTensor, Element, Graph, PaddingMode, ParamStore,
    ResampleMode, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MturConfig {
    pub base_channels: usize,
    pub drb_dilations: Vec<usize>,
    pub mt_encoder_blocks: usize,
    /// 1-based DRB indices after which decoder features are added.
    pub fusion_points: Vec<usize>,
    pub groups_gn: usize,
    pub gn_eps: f64,
    pub use_mt_guidance: bool,
    pub use_skip_connection: bool,
    pub use_final_concat: bool,
    pub use_conv_after_concat: bool,
    /// Predict a correction added to the input instead of the image itself.
    pub global_residual: bool,
    /// Replicate-pad inputs to the downsampling multiple instead of failing.
    pub pad_to_multiple: bool,
    /// Zero the second conv of every DRB so each block starts as the identity.
    pub zero_init_residual: bool,
    /// Zero the last enhancement conv so an untrained model returns its input
    /// (with `global_residual`).
    pub zero_init_output: bool,
}

impl Default for MturConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            drb_dilations: vec![1, 1, 2, 2, 4, 8, 4, 2, 2, 1],
            mt_encoder_blocks: 4,
            fusion_points: vec![4, 8],
            groups_gn: 8,
            gn_eps: 1e-5,
            use_mt_guidance: true,
            use_skip_connection: true,
            use_final_concat: true,
            use_conv_after_concat: true,
            global_residual: true,
            pad_to_multiple: true,
            zero_init_residual: false,
            zero_init_output: true,
        }
    }
}

/// Named configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    Tiny,
}

/// The ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// No MT guidance at all: no laterals, fusion or concat.
    Basic,
    NoSkip,
    NoConcat,
    NoConvAfterConcat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Basic,
        Variant::NoSkip,
        Variant::NoConcat,
        Variant::NoConvAfterConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Basic => "basic",
            Variant::NoSkip => "no_skip",
            Variant::NoConcat => "no_concat",
            Variant::NoConvAfterConcat => "no_conv_after_concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl MturConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Default => Self::default(),
            Preset::Tiny => Self::tiny(),
        }
    }

    /// Eight channels in two GN groups.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            groups_gn: 2,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.use_mt_guidance = true;
        self.use_skip_connection = true;
        self.use_final_concat = true;
        self.use_conv_after_concat = true;
        match v {
            Variant::Full => {}
            Variant::Basic => self.use_mt_guidance = false,
            Variant::NoSkip => self.use_skip_connection = false,
            Variant::NoConcat => self.use_final_concat = false,
            Variant::NoConvAfterConcat => self.use_conv_after_concat = false,
        }
        self
    }

    /// Total downsampling of the MT encoder, `2^(B+1)`.
    pub fn downsampling(&self) -> usize {
        1 << (self.mt_encoder_blocks + 1)
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn gn_groups(&self, channels: usize) -> usize {
        self.groups_gn.min(channels)
    }

    fn laterals_active(&self) -> bool {
        self.use_mt_guidance && self.use_skip_connection
    }

    fn concat_active(&self) -> bool {
        self.use_mt_guidance && self.use_final_concat
    }

    fn head_in_channels(&self) -> usize {
        self.base_channels + usize::from(self.concat_active())
    }

    /// Sorted fusion points paired with the decoder block (1-based) whose
    /// output feeds them.
    pub fn fusion_levels(&self) -> Vec<(usize, usize)> {
        let mut points = self.fusion_points.clone();
        points.sort_unstable();
        let b = self.mt_encoder_blocks;
        let k = points.len();
        let finest = b.saturating_sub(1).max(1);
        points
            .into_iter()
            .enumerate()
            .map(|(j, p)| (p, finest.saturating_sub(k - 1 - j).max(1)))
            .collect()
    }

    /// Channels of decoder block `j` (1-based).
    fn decoder_channels(&self, j: usize) -> usize {
        self.level_channels(self.mt_encoder_blocks - j)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_channels == 0 {
            problems.push("base_channels must be at least 1".to_string());
        }
        if self.mt_encoder_blocks == 0 || self.mt_encoder_blocks > 8 {
            problems.push("mt_encoder_blocks must be in 1..=8".to_string());
        }
        if self.drb_dilations.is_empty() {
            problems.push("drb_dilations must be nonempty".to_string());
        }
        if self.drb_dilations.iter().any(|&d| d == 0) {
            problems.push("every drb dilation must be at least 1".to_string());
        }
        let d = self.drb_dilations.len();
        for &p in &self.fusion_points {
            if p == 0 || p > d {
                problems.push(format!("fusion point {p} outside [1, {d}]"));
            }
        }
        let mut sorted = self.fusion_points.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.fusion_points.len() {
            problems.push("fusion points must be distinct".to_string());
        }
        if self.groups_gn == 0 {
            problems.push("groups_gn must be at least 1".to_string());
        } else if self.base_channels > 0 && self.mt_encoder_blocks <= 8 {
            for level in 0..=self.mt_encoder_blocks {
                let c = self.level_channels(level);
                if c % self.gn_groups(c) != 0 {
                    problems.push(format!("{c} channels not divisible into {} groups", self.groups_gn));
                    break;
                }
            }
        }
        if !(self.gn_eps > 0.0 && self.gn_eps.is_finite()) {
            problems.push("gn_eps must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `±sqrt(3 / fan_in)`.
    LeCun { fan_in: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize, k: usize, zero: bool) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![cout, cin, k, k],
        init: if zero { Init::Zeros } else { Init::LeCun { fan_in: cin * k * k } },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

fn gn_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![c],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.beta"),
        shape: vec![c],
        init: Init::Zeros,
    });
}

/// Every parameter of `cfg` in creation order.
fn param_specs(cfg: &MturConfig) -> Vec<ParamSpec> {
    let c = cfg.base_channels;
    let b = cfg.mt_encoder_blocks;
    let mut s = Vec::new();
    conv_specs(&mut s, "stem.conv", c, 3, 3, false);
    gn_specs(&mut s, "stem.gn", c);
    for i in 1..=b {
        let (cin, cout) = (cfg.level_channels(i - 1), cfg.level_channels(i));
        conv_specs(&mut s, &format!("mt.enc{i}.conv"), cout, cin, 3, false);
        gn_specs(&mut s, &format!("mt.enc{i}.gn"), cout);
    }
    for j in 1..=b {
        let (cin, cout) = (cfg.level_channels(b - j + 1), cfg.decoder_channels(j));
        conv_specs(&mut s, &format!("mt.dec{j}.conv"), cout, cin, 3, false);
        gn_specs(&mut s, &format!("mt.dec{j}.gn"), cout);
    }
    conv_specs(&mut s, "mt.head", 1, c, 1, false);
    conv_specs(&mut s, "enh.entry", c, c, 3, false);
    for i in 1..=cfg.drb_dilations.len() {
        conv_specs(&mut s, &format!("enh.drb{i}.conv1"), c, c, 3, false);
        conv_specs(&mut s, &format!("enh.drb{i}.conv2"), c, c, 3, cfg.zero_init_residual);
    }
    if cfg.laterals_active() {
        for (p, level) in cfg.fusion_levels() {
            conv_specs(&mut s, &format!("enh.lateral{p}"), c, cfg.decoder_channels(level), 1, false);
        }
    }
    let ch = cfg.head_in_channels();
    if cfg.use_conv_after_concat {
        conv_specs(&mut s, "enh.head.conv1", c, ch, 3, false);
        conv_specs(&mut s, "enh.head.conv2", 3, c, 3, cfg.zero_init_output);
    } else {
        conv_specs(&mut s, "enh.head.proj", 3, ch, 1, cfg.zero_init_output);
    }
    s
}

/// Number of scalar parameters of a model built from `cfg`.
pub fn parameter_count(cfg: &MturConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Eq.-style fusion `O + O * T` with `T` broadcast over channels.
pub fn fuse_var<T: Element>(g: &mut Graph<T>, features: Var, mt: Var) -> Result<Var> {
    let [_, c, _, _] = g.value(mt).dims4("fuse")?;
    if c != 1 {
        return Err(Error::Dim {
            op: "fuse",
            axis: "C",
            expected: 1,
            got: c,
        });
    }
    let weighted = g.mul(features, mt)?;
    g.add(features, weighted)
}

/// [`fuse_var`] on plain tensors.
pub fn fuse<T: Element>(features: &Tensor<T>, mt: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let o = g.input(features.clone());
    let t = g.input(mt.clone());
    let f = fuse_var(&mut g, o, t)?;
    Ok(g.value(f).clone())
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Raw `N x 3 x H x W` output, not clamped.
    pub enhanced: Var,
    /// `N x 1 x H x W`, in `(0, 1)`.
    pub mt_pred: Var,
}

fn conv<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    prefix: &str,
    stride: usize,
    dilation: usize,
    padding: PaddingMode,
) -> Result<Var> {
    let w = g.param_var(&format!("{prefix}.weight"))?;
    let b = g.param_var(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(b), stride, dilation, padding)
}

fn conv_gn_selu<T: Element>(g: &mut Graph<T>, cfg: &MturConfig, x: Var, prefix: &str, stride: usize) -> Result<Var> {
    let y = conv(g, x, &format!("{prefix}.conv"), stride, 1, PaddingMode::Reflect)?;
    let c = g.value(y).shape()[1];
    let gamma = g.param_var(&format!("{prefix}.gn.gamma"))?;
    let beta = g.param_var(&format!("{prefix}.gn.beta"))?;
    let y = g.group_norm(y, cfg.gn_groups(c), gamma, beta, cfg.gn_eps)?;
    Ok(g.activation(y, Activation::Selu))
}

fn resize_to<T: Element>(g: &mut Graph<T>, x: Var, h: usize, w: usize, mode: ResampleMode) -> Result<Var> {
    let s = g.value(x).shape();
    if s[2] == h && s[3] == w {
        Ok(x)
    } else {
        g.resample(x, h, w, mode)
    }
}

/// Forward pass over parameters already bound into `g` by name (see
/// [`Graph::bind`]).
pub fn forward_bound<T: Element>(cfg: &MturConfig, g: &mut Graph<T>, input: Var) -> Result<ForwardVars> {
    let [_, c, h, w] = g.value(input).dims4("forward")?;
    if c != 3 {
        return Err(Error::Dim {
            op: "forward",
            axis: "C",
            expected: 3,
            got: c,
        });
    }
    let m = cfg.downsampling();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let x = if (ph, pw) == (h, w) {
        input
    } else if cfg.pad_to_multiple {
        g.pad_replicate(input, 0, ph - h, 0, pw - w)?
    } else {
        let (axis, expected, got) = if ph != h { ("H", ph, h) } else { ("W", pw, w) };
        return Err(Error::Dim {
            op: "forward",
            axis,
            expected,
            got,
        });
    };

    let stem = conv_gn_selu(g, cfg, x, "stem", 2)?;

    // MT branch
    let b = cfg.mt_encoder_blocks;
    let mut enc = vec![stem];
    for i in 1..=b {
        let e = conv_gn_selu(g, cfg, enc[i - 1], &format!("mt.enc{i}"), 2)?;
        enc.push(e);
    }
    let mut dec = Vec::with_capacity(b);
    let mut d = enc[b];
    for j in 1..=b {
        let skip = enc[b - j];
        let s = g.value(skip).shape();
        let (sh, sw) = (s[2], s[3]);
        let up = resize_to(g, d, sh, sw, ResampleMode::Nearest)?;
        let y = conv_gn_selu(g, cfg, up, &format!("mt.dec{j}"), 1)?;
        d = g.add(y, skip)?;
        dec.push(d);
    }
    let logits = conv(g, d, "mt.head", 1, 1, PaddingMode::Valid)?;
    let logits = resize_to(g, logits, ph, pw, ResampleMode::Bilinear)?;
    let mt = g.activation(logits, Activation::Sigmoid);

    // enhancement branch
    let mut z = conv(g, stem, "enh.entry", 2, 1, PaddingMode::Reflect)?;
    z = g.activation(z, Activation::Relu);
    let levels = if cfg.laterals_active() { cfg.fusion_levels() } else { Vec::new() };
    for (i, &dil) in cfg.drb_dilations.iter().enumerate() {
        let i = i + 1;
        let r = conv(g, z, &format!("enh.drb{i}.conv1"), 1, dil, PaddingMode::Reflect)?;
        let r = g.activation(r, Activation::Relu);
        let r = conv(g, r, &format!("enh.drb{i}.conv2"), 1, dil, PaddingMode::Reflect)?;
        z = g.add(z, r)?;
        if let Some(&(p, level)) = levels.iter().find(|(p, _)| *p == i) {
            let lat = conv(g, dec[level - 1], &format!("enh.lateral{p}"), 1, 1, PaddingMode::Valid)?;
            let s = g.value(z).shape();
            let (zh, zw) = (s[2], s[3]);
            let lat = resize_to(g, lat, zh, zw, ResampleMode::Bilinear)?;
            z = g.add(z, lat)?;
        }
    }
    let mut o = resize_to(g, z, ph, pw, ResampleMode::Bilinear)?;
    if cfg.use_mt_guidance {
        o = fuse_var(g, o, mt)?;
        if cfg.use_final_concat {
            o = g.concat_channels(o, mt)?;
        }
    }
    let mut out = if cfg.use_conv_after_concat {
        let y = conv(g, o, "enh.head.conv1", 1, 1, PaddingMode::Reflect)?;
        let y = g.activation(y, Activation::Relu);
        conv(g, y, "enh.head.conv2", 1, 1, PaddingMode::Reflect)?
    } else {
        conv(g, o, "enh.head.proj", 1, 1, PaddingMode::Valid)?
    };
    if cfg.global_residual {
        out = g.add(out, x)?;
    }

    let (enhanced, mt_pred) = if (ph, pw) == (h, w) {
        (out, mt)
    } else {
        (g.crop(out, 0, 0, h, w)?, g.crop(mt, 0, 0, h, w)?)
    };
    Ok(ForwardVars { enhanced, mt_pred })
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MturModel<T: Element> {
    config: MturConfig,
    params: ParamStore<T>,
}

/// JSON sidecar stored next to a checkpoint.
#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    config: MturConfig,
}

const SIDECAR_FORMAT: &str = "mtur-checkpoint-v1";

/// Path of the config sidecar for a checkpoint file.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl<T: Element> MturModel<T> {
    /// Initialize from `seed`. Values are drawn in f64 and rounded, so f32 and
    /// f64 builds of the same seed agree to f32 precision.
    pub fn build(config: MturConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in param_specs(&config) {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::ones(spec.shape),
                Init::LeCun { fan_in } => {
                    let bound = (3.0 / fan_in as f64).sqrt();
                    let n: usize = spec.shape.iter().product();
                    let data = (0..n)
                        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                        .collect();
                    Tensor::from_vec(spec.shape, data)?
                }
            };
            params.insert(spec.name, t);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: MturConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MturConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Element>(&self) -> MturModel<U> {
        MturModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Bind the parameters into `g` and run the network on `input`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<ForwardVars> {
        g.bind(&self.params);
        forward_bound(&self.config, g, input)
    }

    /// Gradient-free forward on an `N x 3 x H x W` tensor; returns the raw
    /// enhanced output and the MT prediction.
    pub fn predict(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let x = g.input(input.clone());
        let out = self.forward(&mut g, x)?;
        Ok((g.value(out.enhanced).clone(), g.value(out.mt_pred).clone()))
    }

    /// Write the parameters as an `MTTB` file plus a `<path>.json` config
    /// sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let entries: Vec<(String, AnyTensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), AnyTensor::from_element(t)))
            .collect();
        write_mttb_file(path, &entries)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&Sidecar {
            format: SIDECAR_FORMAT.to_string(),
            config: self.config.clone(),
        })?;
        std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }

    /// Load a checkpoint written by [`MturModel::save`]. Names and shapes must
    /// agree exactly with the sidecar config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("checkpoint config {}: {e}", side.display())))?;
        if sidecar.format != SIDECAR_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", sidecar.format)));
        }
        let mut params = ParamStore::new();
        for (name, t) in read_mttb_file(path)? {
            params.insert(name, t.to_element::<T>());
        }
        Self::from_parts(sidecar.config, params)
    }

    /// [`MturModel::load`], additionally requiring the stored config to equal
    /// `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &MturConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::Config(format!(
                "checkpoint config does not match: stored {}, expected {}",
                serde_json::to_string(&model.config)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok(model)
    }

    pub fn describe(&self, input_hw: (usize, usize)) -> Summary {
        describe(&self.config, input_hw)
    }
}

fn check_params<T: Element>(cfg: &MturConfig, params: &ParamStore<T>) -> Result<()> {
    let specs = param_specs(cfg);
    for spec in &specs {
        match params.get(&spec.name) {
            None => return Err(Error::Config(format!("checkpoint is missing parameter `{}`", spec.name))),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, config needs {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            Some(t) if !t.is_finite() => {
                return Err(Error::Numerical(format!("parameter `{}` holds non-finite values", spec.name)))
            }
            _ => {}
        }
    }
    if let Some(extra) = params.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
        return Err(Error::Config(format!("checkpoint has unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// One row of [`Summary`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_hw: (usize, usize),
    /// Receptive field on the (padded) input, in pixels.
    pub receptive_field: usize,
}

/// Per-layer shapes and receptive fields of the two trunks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub input_hw: (usize, usize),
    pub padded_hw: (usize, usize),
    pub drb_dilations: Vec<usize>,
    pub fusion_points: Vec<usize>,
    pub parameter_count: usize,
    pub mt_trunk: Vec<LayerInfo>,
    pub enhancement_trunk: Vec<LayerInfo>,
}

struct RfTracker {
    rf: usize,
    jump: usize,
    hw: (usize, usize),
}

impl RfTracker {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, k: usize, stride: usize, dilation: usize, cin: usize, cout: usize) -> LayerInfo {
        self.rf += (k - 1) * dilation * self.jump;
        self.jump *= stride;
        let pad = dilation * (k - 1) / 2;
        let size = |n: usize| (n + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
        self.hw = (size(self.hw.0), size(self.hw.1));
        LayerInfo {
            name,
            kernel: k,
            stride,
            dilation,
            in_channels: cin,
            out_channels: cout,
            out_hw: self.hw,
            receptive_field: self.rf,
        }
    }
}

/// Receptive field of the DRB stack alone, in stream pixels, after each
/// block: `1 + 4 * sum(d)`.
pub fn drb_receptive_fields(dilations: &[usize]) -> Vec<usize> {
    dilations
        .iter()
        .scan(1, |rf, &d| {
            *rf += 4 * d;
            Some(*rf)
        })
        .collect()
}

/// Summary of `cfg` for an input of `input_hw`.
pub fn describe(cfg: &MturConfig, input_hw: (usize, usize)) -> Summary {
    let m = cfg.downsampling();
    let padded = if cfg.pad_to_multiple {
        (input_hw.0.div_ceil(m) * m, input_hw.1.div_ceil(m) * m)
    } else {
        input_hw
    };
    let c = cfg.base_channels;
    let mut t = RfTracker {
        rf: 1,
        jump: 1,
        hw: padded,
    };
    let stem = t.conv("stem.conv".into(), 3, 2, 1, 3, c);
    let after_stem = (t.rf, t.jump, t.hw);

    let mut mt = vec![stem.clone()];
    for i in 1..=cfg.mt_encoder_blocks {
        mt.push(t.conv(format!("mt.enc{i}.conv"), 3, 2, 1, cfg.level_channels(i - 1), cfg.level_channels(i)));
    }

    (t.rf, t.jump, t.hw) = after_stem;
    let mut enh = vec![stem];
    enh.push(t.conv("enh.entry".into(), 3, 2, 1, c, c));
    for (i, &d) in cfg.drb_dilations.iter().enumerate() {
        enh.push(t.conv(format!("enh.drb{}.conv1", i + 1), 3, 1, d, c, c));
        enh.push(t.conv(format!("enh.drb{}.conv2", i + 1), 3, 1, d, c, c));
    }
    Summary {
        input_hw,
        padded_hw: padded,
        drb_dilations: cfg.drb_dilations.clone(),
        fusion_points: cfg.fusion_points.clone(),
        parameter_count: parameter_count(cfg),
        mt_trunk: mt,
        enhancement_trunk: enh,
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "input {}x{} (padded {}x{}), {} parameters",
            self.input_hw.0, self.input_hw.1, self.padded_hw.0, self.padded_hw.1, self.parameter_count
        )?;
        writeln!(f, "drb dilations {:?}, fusion after {:?}", self.drb_dilations, self.fusion_points)?;
        for (title, rows) in [("mt trunk", &self.mt_trunk), ("enhancement trunk", &self.enhancement_trunk)] {
            writeln!(f, "{title}:")?;
            writeln!(f, "  {:<18} {:>2} {:>2} {:>3} {:>5} {:>5} {:>9} {:>5}", "layer", "k", "s", "d", "cin", "cout", "out", "rf")?;
            for l in rows.iter() {
                writeln!(
                    f,
                    "  {:<18} {:>2} {:>2} {:>3} {:>5} {:>5} {:>9} {:>5}",
                    l.name,
                    l.kernel,
                    l.stride,
                    l.dilation,
                    l.in_channels,
                    l.out_channels,
                    format!("{}x{}", l.out_hw.0, l.out_hw.1),
                    l.receptive_field
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
    use proptest::prelude::*;

    fn input(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([1, 3, h, w], 0.0, 1.0, &mut rng)
    }

    /// Closed-form count, written out independently of `param_specs`.
    fn formula_count(cfg: &MturConfig) -> usize {
        let c = cfg.base_channels;
        let b = cfg.mt_encoder_blocks;
        let d = cfg.drb_dilations.len();
        let stem = 27 * c + c + 2 * c;
        let enc: usize = (1..=b).map(|i| 9 * c * c * (1 << (2 * i - 1)) + 3 * c * (1 << i)).sum();
        let dec: usize = (1..=b)
            .map(|j| 9 * c * c * (1 << (2 * (b - j) + 1)) + 3 * c * (1 << (b - j)))
            .sum();
        let head_mt = c + 1;
        let entry = 9 * c * c + c;
        let drbs = d * (18 * c * c + 2 * c);
        let guided = cfg.use_mt_guidance;
        let lat: usize = if guided && cfg.use_skip_connection {
            cfg.fusion_levels().iter().map(|&(_, lv)| (c << (b - lv)) * c + c).sum()
        } else {
            0
        };
        let ch = c + usize::from(guided && cfg.use_final_concat);
        let head = if cfg.use_conv_after_concat {
            9 * ch * c + c + 27 * c + 3
        } else {
            3 * ch + 3
        };
        stem + enc + dec + head_mt + entry + drbs + lat + head
    }

    #[test]
    fn tiny_parameter_count_matches_formula() {
        let cfg = MturConfig::tiny();
        let model = MturModel::<f32>::build(cfg.clone(), 0).unwrap();
        assert_eq!(model.parameter_count(), formula_count(&cfg));
        // spelled out for the default tiny preset
        assert_eq!(formula_count(&cfg), 240 + 98_640 + 98_280 + 9 + 584 + 11_680 + 400 + 875);
        assert_eq!(model.parameter_count(), 210_708);
        for v in Variant::ALL {
            let cfg = MturConfig::tiny().with_variant(v);
            assert_eq!(parameter_count(&cfg), formula_count(&cfg), "{v:?}");
        }
        assert_eq!(parameter_count(&MturConfig::default()), formula_count(&MturConfig::default()));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = MturModel::<f32>::build(MturConfig::tiny(), 11).unwrap();
        let b = MturModel::<f32>::build(MturConfig::tiny(), 11).unwrap();
        let c = MturModel::<f32>::build(MturConfig::tiny(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().iter().all(|(_, t)| t.is_finite()));
    }

    #[test]
    fn basic_variant_has_no_guidance_parameters() {
        let m = MturModel::<f32>::build(MturConfig::tiny().with_variant(Variant::Basic), 0).unwrap();
        assert!(!m.params().names().any(|n| n.starts_with("enh.lateral")));
        let full = MturModel::<f32>::build(MturConfig::tiny(), 0).unwrap();
        assert!(full.params().contains("enh.lateral4.weight") && full.params().contains("enh.lateral8.weight"));
        assert_eq!(full.params().get("enh.head.conv1.weight").unwrap().shape(), &[8, 9, 3, 3]);
        assert_eq!(m.params().get("enh.head.conv1.weight").unwrap().shape(), &[8, 8, 3, 3]);
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let cases: Vec<(MturConfig, &str)> = vec![
            (MturConfig { drb_dilations: vec![], ..MturConfig::tiny() }, "nonempty"),
            (MturConfig { drb_dilations: vec![1, 0], fusion_points: vec![], ..MturConfig::tiny() }, "dilation"),
            (MturConfig { fusion_points: vec![11], ..MturConfig::tiny() }, "fusion point 11"),
            (MturConfig { base_channels: 6, groups_gn: 4, ..MturConfig::tiny() }, "divisible"),
        ];
        for (cfg, needle) in cases {
            match MturModel::<f32>::build(cfg, 0) {
                Err(Error::Config(msg)) => assert!(msg.contains(needle), "{msg}"),
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn shape_contract_and_mt_range() {
        let m = MturModel::<f64>::build(MturConfig::tiny(), 3).unwrap();
        for (h, w) in [(64, 64), (40, 72)] {
            let (enh, mt) = m.predict(&input(h, w, 4)).unwrap();
            assert_eq!(enh.shape(), &[1, 3, h, w]);
            assert_eq!(mt.shape(), &[1, 1, h, w]);
            assert!(mt.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn unpadded_non_multiple_is_a_dim_error() {
        let cfg = MturConfig {
            pad_to_multiple: false,
            ..MturConfig::tiny()
        };
        let m = MturModel::<f32>::build(cfg, 0).unwrap();
        let x = input(48, 64, 0).cast::<f32>();
        assert!(matches!(m.predict(&x), Err(Error::Dim { axis: "H", expected: 64, got: 48, .. })));
    }

    #[test]
    fn untrained_model_returns_its_input() {
        let m = MturModel::<f64>::build(MturConfig::tiny(), 3).unwrap();
        let x = input(32, 32, 4);
        assert_eq!(m.predict(&x).unwrap().0, x);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = MturModel::<f32>::build(MturConfig::tiny(), 5).unwrap();
        let x = input(32, 32, 6).cast::<f32>();
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn guidance_path_is_live() {
        let x = input(32, 32, 7);
        let base = MturConfig {
            zero_init_output: false,
            ..MturConfig::tiny()
        };
        let full = MturModel::<f64>::build(base.clone(), 8).unwrap();
        let out = full.predict(&x).unwrap().0;
        for v in [Variant::Basic, Variant::NoSkip, Variant::NoConcat, Variant::NoConvAfterConcat] {
            let m = MturModel::<f64>::build(base.clone().with_variant(v), 8).unwrap();
            let o = m.predict(&x).unwrap().0;
            assert!(o.max_abs_diff(&out) > 0.0, "{v:?}");
        }
    }

    #[test]
    fn fusion_closed_forms() {
        let o = Tensor::<f64>::full([1, 2, 1, 1], 0.5);
        let t = Tensor::full([1, 1, 1, 1], 0.5);
        assert_eq!(fuse(&o, &t).unwrap().data(), &[0.75, 0.75]);
        let bad = Tensor::full([1, 2, 1, 1], 0.5);
        assert!(matches!(fuse(&o, &bad), Err(Error::Dim { axis: "C", .. })));
        let wrong_hw = Tensor::full([1, 1, 2, 1], 0.5);
        assert!(fuse(&o, &wrong_hw).is_err());
    }

    proptest! {
        #[test]
        fn fusion_laws_hold_bit_exactly(n in 1usize..3, c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let o: Tensor<f32> = Tensor::uniform([n, c, h, w], -4.0, 4.0, &mut rng);
            let zero = Tensor::zeros([n, 1, h, w]);
            let one = Tensor::ones([n, 1, h, w]);
            prop_assert_eq!(fuse(&o, &zero).unwrap(), o.clone());
            prop_assert_eq!(fuse(&o, &one).unwrap(), o.map(|v| 2.0 * v));
        }
    }

    #[test]
    fn zero_initialized_drbs_are_identities() {
        let cfg = MturConfig {
            zero_init_residual: true,
            ..MturConfig::tiny()
        };
        let m = MturModel::<f64>::build(cfg.clone(), 9).unwrap();
        let mut g = Graph::inference();
        g.bind(m.params());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z0 = g.input(Tensor::uniform([1, 8, 6, 6], -1.0, 1.0, &mut rng));
        for (i, &d) in cfg.drb_dilations.iter().enumerate() {
            let i = i + 1;
            let r = conv(&mut g, z0, &format!("enh.drb{i}.conv1"), 1, d, PaddingMode::Reflect).unwrap();
            let r = g.activation(r, Activation::Relu);
            let r = conv(&mut g, r, &format!("enh.drb{i}.conv2"), 1, d, PaddingMode::Reflect).unwrap();
            let z = g.add(z0, r).unwrap();
            assert_eq!(g.value(z), g.value(z0));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mttb");
        let m = MturModel::<f32>::build(MturConfig::tiny(), 1).unwrap();
        m.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = MturModel::<f32>::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(MturModel::<f32>::load_expecting(&path, &MturConfig::default()).is_err());

        // a basic-variant sidecar cannot load full-variant parameters
        let side = sidecar_path(&path);
        let text = std::fs::read_to_string(&side).unwrap();
        std::fs::write(&side, text.replace("\"use_mt_guidance\": true", "\"use_mt_guidance\": false")).unwrap();
        match MturModel::<f32>::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("unexpected parameter") || msg.contains("shape"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn describe_lists_config_and_monotone_receptive_field() {
        let cfg = MturConfig::tiny();
        let s = describe(&cfg, (64, 64));
        assert_eq!(s.drb_dilations, cfg.drb_dilations);
        let rf: Vec<usize> = s.enhancement_trunk.iter().map(|l| l.receptive_field).collect();
        assert!(rf.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*rf.last().unwrap(), 7 + 8 * 2 * 27);
        assert_eq!(drb_receptive_fields(&cfg.drb_dilations).last(), Some(&109));
        assert!(s.to_string().contains("enh.drb6.conv2"));
        assert_eq!(s.enhancement_trunk.last().unwrap().out_hw, (16, 16));
    }

    /// Extent of the nonzero input gradient of one output pixel through a
    /// stack of convolutions with positive weights.
    fn footprint(layers: &[(usize, usize)], size: usize) -> usize {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::full([1, 1, size, size], 1.0));
        let mut y = x;
        for &(stride, dil) in layers {
            let w = g.input(Tensor::full([1, 1, 3, 3], 0.1));
            y = g.conv2d(y, w, None, stride, dil, PaddingMode::Zeros).unwrap();
            y = g.activation(y, Activation::Relu);
        }
        let [_, _, h, w] = g.value(y).dims4("probe").unwrap();
        let c = h / 2;
        let mut mask = vec![0.0; h * w];
        mask[c * w + c] = 1.0;
        let m = g.input(Tensor::from_vec([1, 1, h, w], mask).unwrap());
        let picked = g.mul(y, m).unwrap();
        let loss = g.sum(picked);
        let grads = g.backward(loss).unwrap();
        let gx = grads.param("x").unwrap();
        let rows: Vec<usize> = (0..size)
            .filter(|r| (0..size).any(|col| gx.data()[r * size + col] != 0.0))
            .collect();
        rows.last().unwrap() - rows.first().unwrap() + 1
    }

    #[test]
    fn receptive_field_matches_gradient_footprint() {
        let dil = [1, 2, 4];
        let mut layers = Vec::new();
        for &d in &dil {
            layers.push((1, d));
            layers.push((1, d));
        }
        assert_eq!(footprint(&layers, 96), *drb_receptive_fields(&dil).last().unwrap());

        // strided trunk: stem, entry, then the DRB convs
        let cfg = MturConfig {
            drb_dilations: vec![1, 2, 1],
            fusion_points: vec![],
            ..MturConfig::tiny()
        };
        let s = describe(&cfg, (128, 128));
        let mut layers = vec![(2, 1), (2, 1)];
        for &d in &cfg.drb_dilations {
            layers.push((1, d));
            layers.push((1, d));
        }
        assert_eq!(footprint(&layers, 128), s.enhancement_trunk.last().unwrap().receptive_field);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = MturConfig {
            drb_dilations: vec![1, 2],
            fusion_points: vec![2],
            mt_encoder_blocks: 2,
            zero_init_output: false,
            ..MturConfig::tiny()
        };
        let m = MturModel::<f64>::build(cfg.clone(), 2).unwrap();
        let mut store = m.params().clone();
        store.insert("input", input(8, 8, 3));
        let report = check_gradients(
            &store,
            |g| {
                let x = g.param_var("input")?;
                let out = forward_bound(&cfg, g, x)?;
                let a = g.mean(out.enhanced);
                let sq = g.square(out.mt_pred);
                let b = g.mean(sq);
                g.add(a, b)
            },
            GradCheckOptions {
                max_elements: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passes(1e-3), "{:?}", report.worst);
    }
}
