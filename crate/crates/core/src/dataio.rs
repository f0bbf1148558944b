//! Image/mask datasets, the synthetic shape benchmark and flip augmentation.
//!
//! Images are binary PPM (P6) and masks binary PGM (P5), both with maxval
//! 255. A dataset directory holds `images/<id>.ppm` and `masks/<id>.pgm`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::{Real, Tensor};

/// Raw 8-bit image, interleaved channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (PGM) or 3 (PPM).
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// Planar `[C×H×W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![S::zero(); c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                // divide rather than multiply by 1/255 so level L/255 matches
                // the metric thresholds bit for bit
                data[ch * h * w + p] = S::of(f64::from(self.data[p * c + ch]) / 255.0);
            }
        }
        Tensor::new(vec![c, h, w], data).expect("image has positive size")
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped to `[0, 1]` and
    /// rounded to the nearest level.
    pub fn from_tensor<S: Real>(t: &Tensor<S>) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => return Err(Error::invalid("image", format!("expected C×H×W, got {:?}", t.shape()))),
        };
        if c != 1 && c != 3 {
            return Err(Error::invalid("image", format!("{c} channels")));
        }
        let mut data = vec![0u8; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                data[p * c + ch] = to_level(t.data()[ch * h * w + p].as_f64());
            }
        }
        Ok(Self::new(w, h, c, data))
    }
}

/// `round(v × 255)` after clamping to `[0, 1]`.
pub fn to_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let fail = |msg: &str| Error::ImageFormat {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token().as_deref() {
        Some("P6") => 3,
        Some("P5") => 1,
        _ => return Err(fail("not a binary PPM (P6) or PGM (P5) file")),
    };
    let mut number = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| fail(&format!("bad {what} in header")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(fail(&format!("maxval {maxval} unsupported, only 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < data_start + len {
        return Err(fail("raster data is truncated"));
    }
    Ok(Image::new(width, height, channels, bytes[data_start..data_start + len].to_vec()))
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Writes a probability map (`[H×W]` or `[1×H×W]`) as an 8-bit PGM.
pub fn write_saliency_pgm<S: Real>(path: &Path, probabilities: &Tensor<S>) -> Result<()> {
    write_pnm(path, &Image::from_tensor(probabilities)?)
}

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    /// `[3×H×W]` in `[0, 1]`.
    pub image: Tensor<S>,
    /// `[1×H×W]` in `{0, 1}`.
    pub mask: Tensor<S>,
    pub id: String,
}

impl<S: Real> Sample<S> {
    pub fn new(image: Tensor<S>, mask: Tensor<S>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let ok_dims = match (image.shape(), mask.shape()) {
            ([3, h, w], [1, mh, mw]) => h == mh && w == mw,
            _ => false,
        };
        if !ok_dims {
            return Err(Error::ShapeMismatch {
                op: "sample",
                left: image.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        if image.data().iter().any(|&v| v < S::zero() || v > S::one()) {
            return Err(Error::invalid("sample", format!("{id}: image values outside [0, 1]")));
        }
        if mask.data().iter().any(|&v| v != S::zero() && v != S::one()) {
            return Err(Error::invalid("sample", format!("{id}: mask is not binary")));
        }
        Ok(Self { image, mask, id })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Bilinear resize of a `[C×H×W]` tensor; a no-op at the same size.
pub fn resize_chw<S: Real>(t: &Tensor<S>, height: usize, width: usize) -> Result<Tensor<S>> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid("resize", format!("expected C×H×W, got {:?}", t.shape()))),
    };
    if (h, w) == (height, width) {
        return Ok(t.clone());
    }
    resize_bilinear(&t.reshape(vec![1, c, h, w])?, height, width)?.reshape(vec![c, height, width])
}

/// Resizes image and mask to `height × width`; the mask is re-binarized at 0.5.
pub fn resize_sample<S: Real>(s: &Sample<S>, height: usize, width: usize) -> Result<Sample<S>> {
    let image = resize_chw(&s.image, height, width)?.map(|v| v.max(S::zero()).min(S::one()));
    let mask = resize_chw(&s.mask, height, width)?.map(|v| if v >= S::of(0.5) { S::one() } else { S::zero() });
    Sample::new(image, mask, s.id.clone())
}

/// Mirrors every plane of a `[C×H×W]` tensor about the vertical axis.
fn mirror_planes<S: Real>(t: &Tensor<S>) -> Tensor<S> {
    let w = t.shape()[t.ndim() - 1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

pub fn flip_horizontal<S: Real>(s: &Sample<S>) -> Sample<S> {
    Sample {
        image: mirror_planes(&s.image),
        mask: mirror_planes(&s.mask),
        id: s.id.clone(),
    }
}

/// Flips image and mask together when `coin < 0.5`.
pub fn augment_flip<S: Real>(s: &Sample<S>, coin: f64) -> Sample<S> {
    if coin < 0.5 {
        flip_horizontal(s)
    } else {
        s.clone()
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every `*.ppm` in `image_dir` with its same-stem `*.pgm` mask.
///
/// Masks are binarized at 0.5. Samples come back sorted by id.
pub fn load_dataset<S: Real>(image_dir: &Path, mask_dir: &Path) -> Result<Vec<Sample<S>>> {
    let mut samples = Vec::new();
    for image_path in sorted_files(image_dir, "ppm")? {
        let id = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mask_path = mask_dir.join(format!("{id}.pgm"));
        if !mask_path.is_file() {
            return Err(Error::MissingMask(image_path));
        }
        let image = read_pnm(&image_path)?;
        let mask = read_pnm(&mask_path)?;
        if image.channels != 3 || mask.channels != 1 {
            return Err(Error::ImageFormat {
                path: image_path,
                msg: "expected an RGB image and a grayscale mask".into(),
            });
        }
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(Error::ImageFormat {
                path: mask_path,
                msg: format!(
                    "mask is {}×{}, image is {}×{}",
                    mask.width, mask.height, image.width, image.height
                ),
            });
        }
        let mask = mask.to_tensor::<S>().map(|v| if v >= S::of(0.5) { S::one() } else { S::zero() });
        samples.push(Sample::new(image.to_tensor(), mask, id)?);
    }
    Ok(samples)
}

/// Loads `<root>/images` and `<root>/masks`.
pub fn load_dataset_dir<S: Real>(root: &Path) -> Result<Vec<Sample<S>>> {
    load_dataset(&root.join("images"), &root.join("masks"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// `(height, width)`.
    pub size: (usize, usize),
    /// Inclusive range of salient shapes per image.
    pub shapes_per_image: (usize, usize),
    pub kinds: Vec<ShapeKind>,
    /// Amplitude of the background texture around its base colour.
    pub texture_amplitude: f64,
    /// Minimum per-channel distance between a shape colour and the background
    /// base colour.
    pub min_contrast: f64,
    /// Accepted foreground fraction, inclusive.
    pub coverage: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 200,
            size: (64, 64),
            shapes_per_image: (1, 3),
            kinds: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle],
            texture_amplitude: 0.12,
            min_contrast: 0.15,
            coverage: (0.05, 0.60),
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("synthetic spec", msg));
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if self.size.0 < 8 || self.size.1 < 8 {
            return bad("images must be at least 8×8");
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return bad("shapes_per_image must be a nonempty positive range");
        }
        if self.kinds.is_empty() {
            return bad("at least one shape kind is required");
        }
        let (cmin, cmax) = self.coverage;
        if !(0.0..1.0).contains(&cmin) || cmax <= cmin || cmax > 1.0 {
            return bad("coverage band must satisfy 0 ≤ min < max ≤ 1");
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) || !(0.0..=0.5).contains(&self.min_contrast) {
            return bad("texture amplitude and contrast must lie in [0, 0.5]");
        }
        Ok(())
    }
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    tri: [(f64, f64); 3],
    color: [f64; 3],
    shade_dir: (f64, f64),
    shade: f64,
}

impl Shape {
    fn random(kind: ShapeKind, h: usize, w: usize, rng: &mut ChaCha8Rng, base: [f64; 3], min_contrast: f64) -> Self {
        let scale = h.min(w) as f64;
        let cx = rng.gen_range(0.15..0.85) * w as f64;
        let cy = rng.gen_range(0.15..0.85) * h as f64;
        let a = rng.gen_range(0.08..0.3) * scale;
        let b = rng.gen_range(0.08..0.3) * scale;
        let angle = rng.gen_range(0.0..PI);
        let tri = std::array::from_fn(|k| {
            let t = angle + k as f64 * 2.0 * PI / 3.0 + rng.gen_range(-0.4..0.4);
            let r = rng.gen_range(0.12..0.35) * scale;
            (cx + r * t.cos(), cy + r * t.sin())
        });
        let color = std::array::from_fn(|c| {
            let delta = rng.gen_range(min_contrast..0.6);
            let up = base[c] + delta;
            let down = base[c] - delta;
            match (up <= 1.0, down >= 0.0) {
                (true, true) if rng.gen_bool(0.5) => up,
                (true, _) => up,
                _ => down.max(0.0),
            }
        });
        let dir = rng.gen_range(0.0..2.0 * PI);
        Self {
            kind,
            cx,
            cy,
            a,
            b,
            angle,
            tri,
            color,
            shade_dir: (dir.cos(), dir.sin()),
            shade: rng.gen_range(0.0..0.15),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= self.a && v.abs() <= self.b,
            ShapeKind::Triangle => {
                let [p0, p1, p2] = self.tri;
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (edge(p0, p1), edge(p1, p2), edge(p2, p0));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    fn shaded(&self, x: f64, y: f64, channel: usize) -> f64 {
        let extent = self.a.max(self.b);
        let t = ((x - self.cx) * self.shade_dir.0 + (y - self.cy) * self.shade_dir.1) / extent;
        (self.color[channel] * (1.0 + self.shade * t)).clamp(0.0, 1.0)
    }
}

/// Smooth value noise: bilinear interpolation of a coarse random grid.
fn value_noise(h: usize, w: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let gy = y as f64 / h as f64 * cells as f64;
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        for x in 0..w {
            let gx = x as f64 / w as f64 * cells as f64;
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            out[y * w + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Renders sample `index` of `spec` as an (RGB image, binary mask) pair.
///
/// Each sample draws from its own generator stream, so samples are
/// independent of each other and of generation order.
pub fn synthesize(spec: &SyntheticSpec, index: usize) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = spec.size;
    loop {
        let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
        let coarse = value_noise(h, w, 4, &mut rng);
        let fine = value_noise(h, w, 16, &mut rng);
        let grain: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));

        let count = rng.gen_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
        let shapes: Vec<Shape> = (0..count)
            .map(|_| {
                let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
                Shape::random(kind, h, w, &mut rng, base, spec.min_contrast)
            })
            .collect();

        let mut rgb = vec![0u8; h * w * 3];
        let mut mask = vec![0u8; h * w];
        let mut covered = 0usize;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // later shapes are painted over earlier ones
                let top = shapes.iter().rev().find(|s| s.contains(px, py));
                for c in 0..3 {
                    let v = match top {
                        Some(s) => s.shaded(px, py, c) + 0.02 * grain[p],
                        None => {
                            let texture = 0.6 * coarse[p] + 0.3 * fine[p] + 0.1 * grain[p];
                            base[c] + spec.texture_amplitude * tint[c] * texture
                        }
                    };
                    rgb[p * 3 + c] = to_level(v);
                }
                if top.is_some() {
                    mask[p] = 255;
                    covered += 1;
                }
            }
        }
        let coverage = covered as f64 / (h * w) as f64;
        if coverage >= spec.coverage.0 && coverage <= spec.coverage.1 {
            return (Image::new(w, h, 3, rgb), Image::new(w, h, 1, mask));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSummary {
    pub n_samples: usize,
    pub mean_coverage: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Writes `spec.n_samples` pairs under `root/images` and `root/masks`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticSummary> {
    spec.validate()?;
    let (images, masks) = (root.join("images"), root.join("masks"));
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut coverages = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let (rgb, mask) = synthesize(spec, i);
        let id = sample_id(i);
        write_pnm(&images.join(format!("{id}.ppm")), &rgb)?;
        write_pnm(&masks.join(format!("{id}.pgm")), &mask)?;
        coverages.push(mask.data.iter().filter(|&&v| v > 0).count() as f64 / mask.data.len() as f64);
    }
    Ok(SyntheticSummary {
        n_samples: spec.n_samples,
        mean_coverage: coverages.iter().sum::<f64>() / coverages.len() as f64,
        min_coverage: coverages.iter().copied().fold(f64::INFINITY, f64::min),
        max_coverage: coverages.iter().copied().fold(0.0, f64::max),
    })
}
