//! Deterministic low-contrast textured images with localized anomalies and
//! exact masks, plus PGM directory export and import.

use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::Rng;
use crate::vit::{ImageSample, Label};
use std::fmt::Write as _;
use std::path::Path;

pub const MANIFEST: &str = "manifest.txt";
pub const MASK_DIR: &str = "masks";

#[derive(Clone, Debug, PartialEq)]
pub struct TextureParams {
    /// Lattice spacing of the coarsest noise octave, in pixels.
    pub scale: f64,
    pub octaves: usize,
    /// Range the per-image noise amplitude is drawn from.
    pub contrast: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyParams {
    /// Range of each ellipse semi-axis, in pixels.
    pub radius: (f64, f64),
    /// Range of the blob intensity shift magnitude.
    pub delta: (f64, f64),
    pub swap_prob: f64,
    /// Lattice spacing of the swapped-in texture.
    pub swap_scale: f64,
    /// Amplitude of the swapped-in texture.
    pub swap_contrast: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub size: usize,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub texture: TextureParams,
    pub anomaly: AnomalyParams,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            size: 64,
            train: 200,
            test_normal: 50,
            test_anomalous: 50,
            texture: TextureParams {
                scale: 16.0,
                octaves: 3,
                contrast: (0.06, 0.12),
            },
            anomaly: AnomalyParams {
                radius: (4.0, 8.0),
                delta: (0.08, 0.16),
                swap_prob: 0.5,
                swap_scale: 3.0,
                swap_contrast: 0.12,
            },
        }
    }
}

fn check_range(name: &str, r: (f64, f64), lo: f64) -> Result<()> {
    if !(r.0 >= lo && r.1 >= r.0 && r.1.is_finite()) {
        return Err(Error::Config(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!(
                "image size {} is too small",
                self.size
            )));
        }
        if self.train == 0 {
            return Err(Error::Config("train count must be at least 1".into()));
        }
        if self.test_normal == 0 || self.test_anomalous == 0 {
            return Err(Error::Config(
                "test split needs at least one normal and one anomalous image".into(),
            ));
        }
        if self.texture.octaves == 0 || !(self.texture.scale >= 1.0) {
            return Err(Error::Config(
                "texture needs a positive scale and octave count".into(),
            ));
        }
        check_range("contrast", self.texture.contrast, 0.0)?;
        check_range("radius", self.anomaly.radius, 1.0)?;
        check_range("delta", self.anomaly.delta, 0.0)?;
        if 2.0 * self.anomaly.radius.1 + 2.0 > self.size as f64 {
            return Err(Error::Config(format!(
                "blob radius {} does not fit a {} px image",
                self.anomaly.radius.1, self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.anomaly.swap_prob) || !(self.anomaly.swap_scale >= 1.0) {
            return Err(Error::Config("invalid texture-swap parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    Blob,
    TextureSwap,
}

/// Generation parameters of one anomaly, kept alongside its clean image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyRecord {
    pub kind: AnomalyKind,
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
    pub delta: f64,
    /// The image before the anomaly was inserted.
    pub clean: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Aligned with `test`; `None` for normal images or imported data.
    pub records: Vec<Option<AnomalyRecord>>,
}

/// Smoothly interpolated lattice noise in `[-1, 1]`.
fn value_noise(size: usize, cell: f64, rng: &mut Rng) -> Vec<f64> {
    let cells = (size as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.range(-1.0, 1.0)).collect();
    let (ox, oy) = (rng.uniform(), rng.uniform());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / cell + oy;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..size {
            let fx = x as f64 / cell + ox;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |i: usize, j: usize| lattice[j * cells + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn fractal_noise(size: usize, tex: &TextureParams, rng: &mut Rng) -> Vec<f64> {
    let mut acc = vec![0.0; size * size];
    let mut total = 0.0;
    for o in 0..tex.octaves {
        let amp = 0.5f64.powi(o as i32);
        let cell = (tex.scale / 2f64.powi(o as i32)).max(1.0);
        for (a, v) in acc.iter_mut().zip(value_noise(size, cell, rng)) {
            *a += amp * v;
        }
        total += amp;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    acc
}

/// Shared anatomy-like layout: a bright disc fading towards the corners.
fn vignette(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let rmax = c * std::f64::consts::SQRT_2;
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let r = ((x - c).powi(2) + (y - c).powi(2)).sqrt() / rmax;
            0.3 + 0.3 * (1.0 - r * r)
        })
        .collect()
}

/// Rounds to the 8-bit grid so PGM export is lossless.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn normal_image(spec: &DatasetSpec, base: &[f64], rng: &mut Rng) -> Vec<f32> {
    let contrast = rng.range(spec.texture.contrast.0, spec.texture.contrast.1);
    let noise = fractal_noise(spec.size, &spec.texture, rng);
    base.iter()
        .zip(noise)
        .map(|(&b, n)| quantize(b + contrast * n))
        .collect()
}

/// Normalized elliptical radius of pixel `(x, y)`; `<= 1` is inside.
fn ellipse_rho(x: f64, y: f64, center: (f64, f64), axes: (f64, f64), angle: f64) -> f64 {
    let (dx, dy) = (x - center.0, y - center.1);
    let (s, c) = angle.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    ((u / axes.0).powi(2) + (v / axes.1).powi(2)).sqrt()
}

fn insert_anomaly(
    spec: &DatasetSpec,
    base: &[f64],
    clean: &[f32],
    rng: &mut Rng,
) -> (Vec<f32>, Vec<bool>, AnomalyRecord) {
    let a = &spec.anomaly;
    let size = spec.size;
    let axes = (
        rng.range(a.radius.0, a.radius.1),
        rng.range(a.radius.0, a.radius.1),
    );
    let margin = axes.0.max(axes.1) + 1.0;
    let hi = size as f64 - 1.0 - margin;
    let center = (rng.range(margin, hi), rng.range(margin, hi));
    let angle = rng.range(0.0, std::f64::consts::PI);
    let kind = if rng.bernoulli(a.swap_prob) {
        AnomalyKind::TextureSwap
    } else {
        AnomalyKind::Blob
    };
    let magnitude = rng.range(a.delta.0, a.delta.1);
    let swap = value_noise(size, a.swap_scale, rng);
    let mut pixels = clean.to_vec();
    let mut mask = vec![false; size * size];
    let mut signed = magnitude;
    for i in 0..size * size {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let rho = ellipse_rho(x, y, center, axes, angle);
        if rho > 1.0 {
            continue;
        }
        let old = clean[i] as f64;
        let new = match kind {
            AnomalyKind::Blob => {
                // brighten where there is headroom, else darken
                signed = if base[i] < 0.5 { magnitude } else { -magnitude };
                old + signed * (1.0 - 0.5 * rho * rho)
            }
            AnomalyKind::TextureSwap => base[i] + a.swap_contrast * swap[i],
        };
        let mut q = quantize(new);
        if q == clean[i] {
            // keep the mask exact: every masked pixel changes
            q = quantize(if old < 0.5 {
                old + 1.0 / 255.0
            } else {
                old - 1.0 / 255.0
            });
        }
        pixels[i] = q;
        mask[i] = true;
    }
    let record = AnomalyRecord {
        kind,
        center,
        axes,
        angle,
        delta: if kind == AnomalyKind::Blob {
            signed
        } else {
            0.0
        },
        clean: clean.to_vec(),
    };
    (pixels, mask, record)
}

const TRAIN_STREAM: u64 = 1 << 32;
const TEST_STREAM: u64 = 2 << 32;

/// Generates both splits; every image draws from its own derived stream.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let base = vignette(spec.size);
    let s = spec.size;
    let mut train = Vec::with_capacity(spec.train);
    for i in 0..spec.train {
        let mut rng = root.derive(TRAIN_STREAM + i as u64);
        let px = normal_image(spec, &base, &mut rng);
        train.push(ImageSample::new(
            format!("train_{i:04}"),
            s,
            s,
            1,
            px,
            Label::Normal,
            None,
        )?);
    }
    let mut test = Vec::with_capacity(spec.test_normal + spec.test_anomalous);
    let mut records = Vec::with_capacity(test.capacity());
    for i in 0..spec.test_normal + spec.test_anomalous {
        let mut rng = root.derive(TEST_STREAM + i as u64);
        let clean = normal_image(spec, &base, &mut rng);
        if i < spec.test_normal {
            test.push(ImageSample::new(
                format!("test_normal_{i:04}"),
                s,
                s,
                1,
                clean,
                Label::Normal,
                None,
            )?);
            records.push(None);
        } else {
            let (px, mask, record) = insert_anomaly(spec, &base, &clean, &mut rng);
            let j = i - spec.test_normal;
            test.push(ImageSample::new(
                format!("test_anomalous_{j:04}"),
                s,
                s,
                1,
                px,
                Label::Anomalous,
                Some(mask),
            )?);
            records.push(Some(record));
        }
    }
    Ok(Dataset {
        train,
        test,
        records,
    })
}

fn to_bytes(px: &[f32]) -> Vec<u8> {
    px.iter()
        .map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes `<id>.pgm` per image, `masks/<id>_mask.pgm` per mask and the
/// manifest (`id split label mask`, `-` when there is no mask).
pub fn export(dataset: &Dataset, dir: &Path) -> Result<()> {
    let masks = dir.join(MASK_DIR);
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut manifest = String::from("# id split label mask\n");
    let splits = [("train", &dataset.train), ("test", &dataset.test)];
    for (split, samples) in splits {
        for s in samples.iter() {
            if s.channels != 1 {
                return Err(Error::Argument(format!(
                    "{}: only grayscale export is supported",
                    s.id
                )));
            }
            let img = pnm::encode_pgm(s.width, s.height, &to_bytes(&s.pixels))?;
            pnm::write_bytes(&dir.join(format!("{}.pgm", s.id)), &img)?;
            let mask_name = match &s.mask {
                Some(m) => {
                    let name = format!("{}_mask.pgm", s.id);
                    let bytes: Vec<u8> = m.iter().map(|&b| if b { 255 } else { 0 }).collect();
                    let enc = pnm::encode_pgm(s.width, s.height, &bytes)?;
                    pnm::write_bytes(&masks.join(&name), &enc)?;
                    format!("{MASK_DIR}/{name}")
                }
                None => "-".to_string(),
            };
            let _ = writeln!(
                manifest,
                "{} {} {} {}",
                s.id,
                split,
                s.label.as_str(),
                mask_name
            );
        }
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn load_gray(path: &Path, id: &str, label: Label, mask: Option<Vec<bool>>) -> Result<ImageSample> {
    let g = pnm::read_pgm(path)?;
    let px = g.data.iter().map(|&b| (b as f64 / 255.0) as f32).collect();
    ImageSample::new(id, g.height, g.width, 1, px, label, mask)
}

/// Reads a single PGM as an unlabeled (normal) sample named after its stem.
pub fn load_image(path: &Path) -> Result<ImageSample> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    load_gray(path, &id, Label::Normal, None)
}

/// Loads a directory written by [`export`].
pub fn import(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
        records: Vec::new(),
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::Format {
            path: path.clone(),
            detail: format!("line {}: {detail}", lineno + 1),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, split, label, mask] = fields[..] else {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        };
        let label = Label::parse(label).ok_or_else(|| bad(format!("unknown label {label:?}")))?;
        let mask = if mask == "-" {
            None
        } else {
            let m = pnm::read_pgm(&dir.join(mask))?;
            Some(m.data.iter().map(|&b| b >= 128).collect())
        };
        let sample = load_gray(&dir.join(format!("{id}.pgm")), id, label, mask)?;
        match split {
            "train" => {
                if label.is_anomalous() {
                    return Err(bad(format!("{id}: anomalous image in the train split")));
                }
                ds.train.push(sample);
            }
            "test" => {
                ds.test.push(sample);
                ds.records.push(None);
            }
            other => return Err(bad(format!("unknown split {other:?}"))),
        }
    }
    Ok(ds)
}
