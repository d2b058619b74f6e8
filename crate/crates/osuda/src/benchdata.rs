//! Procedural synthetic segmentation benchmark.
//!
//! Scenes are layered geometric shapes (rectangles, ellipses, bars) over a
//! textured background, one class per shape, labels rendered from the same
//! geometry. A domain is a photometric transform (per-channel affine +
//! gamma + noise); source and target sets built from the same geometry
//! stream share label maps bit for bit and differ only in appearance,
//! which is exactly the kind of gap channel-statistic mixing can express.
//!
//! Also houses the confusion-matrix / IoU evaluation used everywhere else.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::segmentor::Segmentor;
use crate::tensor::Tensor;

/// Label sentinel excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Dense class-index map. u8 keeps datasets small; 255 is reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub data: Vec<u8>,
    pub h: usize,
    pub w: usize,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Invalid(format!(
                "label buffer holds {} entries for a {h}x{w} map",
                data.len()
            )));
        }
        Ok(LabelMap { data, h, w })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        LabelMap {
            data: vec![v; h * w],
            h,
            w,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Nearest-neighbor reduction by an integer factor, sampling the
    /// center of each cell ((f/2, f/2) offset) so thin structures keep a
    /// representative pixel. Used to bring labels down to prediction
    /// resolution; never interpolates class ids.
    pub fn downsample(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || self.h % factor != 0 || self.w % factor != 0 {
            return Err(Error::Invalid(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.h, self.w
            )));
        }
        let (oh, ow) = (self.h / factor, self.w / factor);
        let off = factor / 2;
        let mut data = vec![0u8; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                data[y * ow + x] = self.at(y * factor + off, x * factor + off);
            }
        }
        Ok(LabelMap { data, h: oh, w: ow })
    }

    /// Replication upsample, the inverse direction used to compare
    /// predictions against full-resolution labels.
    pub fn upsample(&self, factor: usize) -> LabelMap {
        let (oh, ow) = (self.h * factor, self.w * factor);
        let mut data = vec![0u8; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                data[y * ow + x] = self.at(y / factor, x / factor);
            }
        }
        LabelMap { data, h: oh, w: ow }
    }
}

#[derive(Clone, Debug)]
pub struct SceneSample {
    pub image: Tensor, // (3,H,W) in [0,1]
    pub label: LabelMap,
}

/// Photometric domain: out = clamp(scale * in^gamma + shift + noise, 0, 1)
/// per channel. Geometry and labels are untouched by construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn identity() -> Self {
        DomainSpec {
            scale: [1.0; 3],
            shift: [0.0; 3],
            gamma: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.scale.iter().chain(&self.shift).all(|v| v.is_finite());
        if !finite || !self.gamma.is_finite() || !self.noise_sigma.is_finite() {
            return Err(Error::Config("domain spec contains non-finite values".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!(
                "domain gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "domain noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Background is a dark desaturated blue; foreground classes get evenly
/// spaced hues so their channel statistics are separable.
fn class_color(class: usize, classes: usize) -> [f64; 3] {
    if class == 0 {
        hsv_to_rgb(0.62, 0.25, 0.35)
    } else {
        let hue = 0.9 * (class - 1) as f64 / (classes - 1).max(1) as f64;
        hsv_to_rgb(hue, 0.7, 0.85)
    }
}

const TAU: f64 = std::f64::consts::TAU;

/// One layered scene. Later shapes overwrite earlier ones, labels always
/// match the painted geometry. Background is class 0.
pub fn gen_scene(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> Result<SceneSample> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if classes >= IGNORE as usize {
        return Err(Error::Config(format!(
            "class count {classes} collides with the ignore sentinel"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config("empty scene dimensions".into()));
    }
    let mut img = vec![0.0f64; 3 * h * w];
    let mut lbl = vec![0u8; h * w];

    // Background: base color plus a low-amplitude diagonal sine texture.
    let bg = class_color(0, classes);
    let fx: f64 = rng.gen_range(0.5..2.5);
    let fy: f64 = rng.gen_range(0.5..2.5);
    let phase: [f64; 3] = [
        rng.gen_range(0.0..TAU),
        rng.gen_range(0.0..TAU),
        rng.gen_range(0.0..TAU),
    ];
    for y in 0..h {
        for x in 0..w {
            let t = TAU * (x as f64 * fx / w as f64 + y as f64 * fy / h as f64);
            for c in 0..3 {
                img[(c * h + y) * w + x] = bg[c] + 0.04 * (t + phase[c]).sin();
            }
        }
    }

    let n_shapes = rng.gen_range(3..=5usize);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..classes);
        let kind = rng.gen_range(0..3u32);
        // Bounding box (clamped to the canvas; partial shapes allowed).
        let (x0, x1, y0, y1, ellipse, cx, cy, rx, ry) = match kind {
            0 | 1 => {
                let cx = rng.gen_range(0..w) as i64;
                let cy = rng.gen_range(0..h) as i64;
                let rx = rng.gen_range(w / 8..=w / 4).max(1) as i64;
                let ry = rng.gen_range(h / 8..=h / 4).max(1) as i64;
                (
                    (cx - rx).max(0) as usize,
                    ((cx + rx + 1).min(w as i64)) as usize,
                    (cy - ry).max(0) as usize,
                    ((cy + ry + 1).min(h as i64)) as usize,
                    kind == 1,
                    cx,
                    cy,
                    rx,
                    ry,
                )
            }
            _ => {
                // Bar: long and thin, axis aligned.
                let horizontal = rng.gen_bool(0.5);
                let half_len = rng.gen_range(w / 6..=w / 3).max(1) as i64;
                let half_thick = rng.gen_range(h / 24..=h / 12).max(1) as i64;
                let cx = rng.gen_range(0..w) as i64;
                let cy = rng.gen_range(0..h) as i64;
                let (rx, ry) = if horizontal {
                    (half_len, half_thick)
                } else {
                    (half_thick, half_len)
                };
                (
                    (cx - rx).max(0) as usize,
                    ((cx + rx + 1).min(w as i64)) as usize,
                    (cy - ry).max(0) as usize,
                    ((cy + ry + 1).min(h as i64)) as usize,
                    false,
                    cx,
                    cy,
                    rx,
                    ry,
                )
            }
        };
        let base = class_color(class, classes);
        let jit: [f64; 3] = [
            rng.gen_range(-0.06..0.06),
            rng.gen_range(-0.06..0.06),
            rng.gen_range(-0.06..0.06),
        ];
        let sfreq: f64 = rng.gen_range(2.0..5.0);
        let sphase: f64 = rng.gen_range(0.0..TAU);
        for y in y0..y1 {
            for x in x0..x1 {
                if ellipse {
                    let dx = (x as i64 - cx) as f64 / rx as f64;
                    let dy = (y as i64 - cy) as f64 / ry as f64;
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                lbl[y * w + x] = class as u8;
                let t = 0.05 * (TAU * (x + y) as f64 * sfreq / w as f64 + sphase).sin();
                for c in 0..3 {
                    img[(c * h + y) * w + x] = base[c] + jit[c] + t;
                }
            }
        }
    }

    // Final jitter pass, then clamp enforces the [0,1] invariant.
    for v in &mut img {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    Ok(SceneSample {
        image: Tensor::new(vec![3, h, w], img)?,
        label: LabelMap { data: lbl, h, w },
    })
}

/// Appearance-only transform; when gamma is exactly 1 the power is
/// skipped and an identity spec reproduces the input bit for bit.
/// `noise_sigma == 0` draws nothing from the rng.
pub fn apply_domain(image: &Tensor, spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (_, h, w) = image.chw("apply_domain")?;
    if image.shape[0] != 3 {
        return Err(Error::Invalid(format!(
            "apply_domain expects a 3-channel image, got shape {:?}",
            image.shape
        )));
    }
    spec.validate()?;
    let mut out = vec![0.0; image.data.len()];
    for c in 0..3 {
        for i in 0..h * w {
            let v = image.data[c * h * w + i];
            let v = if spec.gamma == 1.0 { v } else { v.powf(spec.gamma) };
            let mut v = spec.scale[c] * v + spec.shift[c];
            if spec.noise_sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += spec.noise_sigma * z;
            }
            out[c * h * w + i] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape.clone(), out)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Renders `count` scenes from `geo_rng` and pushes each through the
/// domain transform. Two calls with identically seeded geometry rngs give
/// bit-identical labels regardless of the domain spec.
pub fn generate(
    classes: usize,
    h: usize,
    w: usize,
    count: usize,
    geo_rng: &mut ChaCha8Rng,
    spec: &DomainSpec,
    noise_rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let scene = gen_scene(geo_rng, classes, h, w)?;
        let image = apply_domain(&scene.image, spec, noise_rng)?;
        samples.push(SceneSample {
            image,
            label: scene.label,
        });
    }
    Ok(Dataset {
        classes,
        h,
        w,
        samples,
    })
}

/// Scene counts + domains for the full benchmark.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub n_source: usize,
    pub n_target_eval: usize,
    pub n_target_pool: usize,
    pub source_domain: DomainSpec,
    pub target_domain: DomainSpec,
}

impl BenchSpec {
    /// Desk-scale defaults: 5 classes, 64x64, 200 train / 40 eval scenes,
    /// a 5-image pool to draw the single adaptation image from, and a
    /// target domain that darkens red, mutes green and lifts contrast --
    /// a gap expressible in per-channel statistics.
    pub fn default_desk() -> Self {
        BenchSpec {
            classes: 5,
            h: 64,
            w: 64,
            n_source: 200,
            n_target_eval: 40,
            n_target_pool: 5,
            source_domain: DomainSpec::identity(),
            target_domain: DomainSpec {
                scale: [0.55, 0.75, 1.05],
                shift: [0.28, -0.12, 0.02],
                gamma: 1.35,
                noise_sigma: 0.02,
            },
        }
    }
}

#[derive(Debug)]
pub struct Benchmark {
    pub source: Dataset,
    pub target_eval: Dataset,
    pub target_pool: Dataset,
}

/// The three splits draw from disjoint named substreams of one root seed,
/// so any split is reproducible on its own.
pub fn generate_benchmark(spec: &BenchSpec, seed: u64) -> Result<Benchmark> {
    spec.source_domain.validate()?;
    spec.target_domain.validate()?;
    let mk = |scenes: &str, noise: &str, count: usize, domain: &DomainSpec| {
        generate(
            spec.classes,
            spec.h,
            spec.w,
            count,
            &mut substream(seed, scenes),
            domain,
            &mut substream(seed, noise),
        )
    };
    Ok(Benchmark {
        source: mk("scenes/source", "domain/source", spec.n_source, &spec.source_domain)?,
        target_eval: mk(
            "scenes/target-eval",
            "domain/target-eval",
            spec.n_target_eval,
            &spec.target_domain,
        )?,
        target_pool: mk(
            "scenes/target-pool",
            "domain/target-pool",
            spec.n_target_pool,
            &spec.target_domain,
        )?,
    })
}

// ---------------------------------------------------------------------
// Metrics

/// Row = ground truth, column = prediction; ignore pixels never counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<u64>, // classes * classes
    pub classes: usize,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    pub fn record(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.h != pred.h || gt.w != pred.w {
            return Err(Error::ShapeMismatch {
                op: "confusion gt-vs-pred",
                left: vec![gt.h, gt.w],
                right: vec![pred.h, pred.w],
            });
        }
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if g == IGNORE {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.classes || p >= self.classes {
                return Err(Error::Invalid(format!(
                    "label {g}/prediction {p} outside {} classes",
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let c = self.classes;
        let mut per_class_iou = vec![f64::NAN; c];
        let mut present = vec![false; c];
        let mut gt_pixels = vec![0u64; c];
        let mut miou_sum = 0.0;
        let mut miou_n = 0usize;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let row: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
            let col: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
            gt_pixels[k] = row;
            present[k] = row > 0;
            let union = row + col - tp; // TP + FP + FN
            if union > 0 {
                per_class_iou[k] = tp as f64 / union as f64;
            }
            if present[k] {
                miou_sum += per_class_iou[k];
                miou_n += 1;
            }
        }
        if miou_n == 0 {
            return Err(Error::Invalid(
                "metrics over a set with no ground-truth pixels".into(),
            ));
        }
        Ok(MetricsReport {
            confusion: self.clone(),
            per_class_iou,
            present,
            gt_pixels,
            miou: miou_sum / miou_n as f64,
        })
    }
}

/// IoU_c = TP/(TP+FP+FN); mIoU averages only classes with ground-truth
/// support (absent classes keep NaN in the vector and are skipped).
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub per_class_iou: Vec<f64>,
    pub present: Vec<bool>,
    pub gt_pixels: Vec<u64>,
    pub miou: f64,
}

/// Accumulates a confusion matrix from a prediction closure; the closure
/// returns full-resolution label maps.
pub fn evaluate_with<F>(ds: &Dataset, mut predict: F) -> Result<MetricsReport>
where
    F: FnMut(&SceneSample) -> Result<LabelMap>,
{
    if ds.is_empty() {
        return Err(Error::Invalid("evaluate on an empty dataset".into()));
    }
    let mut conf = Confusion::new(ds.classes);
    for s in &ds.samples {
        let pred = predict(s)?;
        conf.record(&s.label, &pred)?;
    }
    conf.report()
}

/// Standard protocol: predict at feature resolution, replicate up to the
/// label grid, accumulate.
pub fn evaluate(model: &Segmentor, ds: &Dataset) -> Result<MetricsReport> {
    let factor = model.arch.stride_product();
    evaluate_with(ds, |s| {
        let (data, h4, w4) = model.predict_small(&s.image)?;
        Ok(LabelMap::new(h4, w4, data)?.upsample(factor))
    })
}

// ---------------------------------------------------------------------
// Disk format

#[derive(Serialize, Deserialize)]
struct IndexFile {
    schema_version: u32,
    classes: usize,
    h: usize,
    w: usize,
    samples: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: u64,
    image: String,
    label: String,
}

const DATASET_SCHEMA: u32 = 1;

/// Writes `index.json` plus `img_<id>.bin` (little-endian f64, 3*H*W) and
/// `lbl_<id>.bin` (u8, H*W) per sample; ids are positions in the set.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let img_name = format!("img_{i}.bin");
        let lbl_name = format!("lbl_{i}.bin");
        let img_path = dir.join(&img_name);
        let mut buf = Vec::with_capacity(s.image.data.len() * 8);
        for v in &s.image.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(&img_path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(Error::io(&img_path))?;
        let lbl_path = dir.join(&lbl_name);
        fs::File::create(&lbl_path)
            .and_then(|mut f| f.write_all(&s.label.data))
            .map_err(Error::io(&lbl_path))?;
        entries.push(IndexEntry {
            id: i as u64,
            image: img_name,
            label: lbl_name,
        });
    }
    let index = IndexFile {
        schema_version: DATASET_SCHEMA,
        classes: ds.classes,
        h: ds.h,
        w: ds.w,
        samples: entries,
    };
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Format {
        what: "dataset index",
        detail: e.to_string(),
    })?;
    fs::write(&path, json).map_err(Error::io(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    let raw = fs::read_to_string(&index_path).map_err(Error::io(&index_path))?;
    let index: IndexFile = serde_json::from_str(&raw).map_err(|e| Error::Format {
        what: "dataset index",
        detail: e.to_string(),
    })?;
    if index.schema_version != DATASET_SCHEMA {
        return Err(Error::Format {
            what: "dataset index",
            detail: format!(
                "schema_version {} unsupported (expected {DATASET_SCHEMA})",
                index.schema_version
            ),
        });
    }
    let (h, w, classes) = (index.h, index.w, index.classes);
    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in &index.samples {
        let img_path = dir.join(&entry.image);
        let mut bytes = Vec::new();
        fs::File::open(&img_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(Error::io(&img_path))?;
        if bytes.len() != 3 * h * w * 8 {
            return Err(Error::Format {
                what: "dataset image",
                detail: format!(
                    "{} holds {} bytes, expected {}",
                    entry.image,
                    bytes.len(),
                    3 * h * w * 8
                ),
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format {
                what: "dataset image",
                detail: format!("{} holds values outside [0,1]", entry.image),
            });
        }
        let lbl_path = dir.join(&entry.label);
        let mut lbl = Vec::new();
        fs::File::open(&lbl_path)
            .and_then(|mut f| f.read_to_end(&mut lbl))
            .map_err(Error::io(&lbl_path))?;
        if lbl.len() != h * w {
            return Err(Error::Format {
                what: "dataset label",
                detail: format!(
                    "{} holds {} bytes, expected {}",
                    entry.label,
                    lbl.len(),
                    h * w
                ),
            });
        }
        if let Some(&bad) = lbl.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            return Err(Error::Format {
                what: "dataset label",
                detail: format!("{} holds class {bad} outside {classes} classes", entry.label),
            });
        }
        samples.push(SceneSample {
            image: Tensor::new(vec![3, h, w], data)?,
            label: LabelMap { data: lbl, h, w },
        });
    }
    Ok(Dataset {
        classes,
        h,
        w,
        samples,
    })
}
