//! Patchwise prototypical matching.
//!
//! The target's stage-4 feature map is tiled into non-overlapping P x P
//! patches; each patch's mean feature vector is a prototype. Every source
//! pixel is scored by its best cosine similarity against the prototypes,
//! and that fused score is damped by the source prediction's normalized
//! entropy to form the per-pixel loss weight.
//!
//! Everything here runs on detached values: the weights are constants to
//! the loss, and no gradient flows back into this pipeline.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norms below this floor are treated as degenerate; a zero feature
/// vector scores 0 against everything instead of producing NaN.
pub const NORM_FLOOR: f64 = 1e-12;

/// Non-overlapping P x P tiles of a (C,H,W) map, row-major over the tile
/// grid; within a patch, layout is channel-major then row-major spatial.
pub struct Patches {
    pub data: Vec<f64>, // n * channels * patch^2
    pub n: usize,
    pub channels: usize,
    pub patch: usize,
    pub grid: (usize, usize),
}

/// One mean vector per patch, same grid order as [`Patches`].
pub struct PrototypeSet {
    pub protos: Vec<f64>, // n * channels
    pub n: usize,
    pub channels: usize,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl PrototypeSet {
    pub fn proto(&self, i: usize) -> &[f64] {
        &self.protos[i * self.channels..(i + 1) * self.channels]
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MapKind {
    PerPrototype,
    Fused,
    Entropy,
    Rectified,
}

/// A spatial weight map at feature resolution.
#[derive(Clone, Debug)]
pub struct ConfidenceMap {
    pub values: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub kind: MapKind,
}

impl ConfidenceMap {
    pub fn ones(h: usize, w: usize) -> Self {
        ConfidenceMap {
            values: vec![1.0; h * w],
            h,
            w,
            kind: MapKind::Rectified,
        }
    }

    /// In-place clamp to [0,1]; the optional study knob for negative
    /// weights (off by default: negative products pass through signed).
    pub fn clamp_unit(&mut self) {
        for v in &mut self.values {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn negative_count(&self) -> usize {
        self.values.iter().filter(|&&v| v < 0.0).count()
    }
}

/// Fails fast if P does not tile the feature map exactly; no silent
/// cropping.
pub fn patchify(f: &Tensor, patch: usize) -> Result<Patches> {
    if f.shape.len() != 3 {
        return Err(Error::Invalid(format!(
            "patchify expects a (C,H,W) tensor, got shape {:?}",
            f.shape
        )));
    }
    let (c, h, w) = (f.shape[0], f.shape[1], f.shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} does not tile a {h}x{w} feature map"
        )));
    }
    let grid = (h / patch, w / patch);
    let n = grid.0 * grid.1;
    let p2 = patch * patch;
    let mut data = vec![0.0; n * c * p2];
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let i = gy * grid.1 + gx;
            for ci in 0..c {
                for py in 0..patch {
                    let src = (ci * h + gy * patch + py) * w + gx * patch;
                    let dst = (i * c + ci) * p2 + py * patch;
                    data[dst..dst + patch].copy_from_slice(&f.data[src..src + patch]);
                }
            }
        }
    }
    Ok(Patches {
        data,
        n,
        channels: c,
        patch,
        grid,
    })
}

/// Inverse of [`patchify`]; exists so the partition property is testable.
pub fn reassemble(p: &Patches) -> Tensor {
    let (c, patch) = (p.channels, p.patch);
    let (h, w) = (p.grid.0 * patch, p.grid.1 * patch);
    let p2 = patch * patch;
    let mut data = vec![0.0; c * h * w];
    for gy in 0..p.grid.0 {
        for gx in 0..p.grid.1 {
            let i = gy * p.grid.1 + gx;
            for ci in 0..c {
                for py in 0..patch {
                    let dst = (ci * h + gy * patch + py) * w + gx * patch;
                    let src = (i * c + ci) * p2 + py * patch;
                    data[dst..dst + patch].copy_from_slice(&p.data[src..src + patch]);
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], data).expect("patch grid dimensions are consistent")
}

/// Prototype i = mean over the P^2 positions of patch i.
pub fn prototypes(p: &Patches) -> Result<PrototypeSet> {
    if p.n == 0 {
        return Err(Error::Invalid("prototypes of an empty patch set".into()));
    }
    let p2 = p.patch * p.patch;
    let mut protos = vec![0.0; p.n * p.channels];
    for i in 0..p.n {
        for ci in 0..p.channels {
            let base = (i * p.channels + ci) * p2;
            let mut s = 0.0;
            for &v in &p.data[base..base + p2] {
                s += v;
            }
            protos[i * p.channels + ci] = s / p2 as f64;
        }
    }
    Ok(PrototypeSet {
        protos,
        n: p.n,
        channels: p.channels,
        patch: p.patch,
        grid: p.grid,
    })
}

fn cosine(a: &[f64], b_vec: &[f64], b_norm: f64) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    for (&x, &y) in a.iter().zip(b_vec) {
        dot += x * y;
        na += x * x;
    }
    dot / (na.sqrt().max(NORM_FLOOR) * b_norm)
}

/// Fused confidence: per pixel, the max cosine similarity over all
/// prototypes.
pub fn confidence(f_s: &Tensor, protos: &PrototypeSet) -> Result<ConfidenceMap> {
    let maps = confidence_per_prototype(f_s, protos)?;
    let (h, w) = (maps[0].h, maps[0].w);
    let mut fused = vec![f64::NEG_INFINITY; h * w];
    for m in &maps {
        for (f, &v) in fused.iter_mut().zip(&m.values) {
            if v > *f {
                *f = v;
            }
        }
    }
    Ok(ConfidenceMap {
        values: fused,
        h,
        w,
        kind: MapKind::Fused,
    })
}

/// One cosine map per prototype, prototype order preserved.
pub fn confidence_per_prototype(f_s: &Tensor, protos: &PrototypeSet) -> Result<Vec<ConfidenceMap>> {
    if f_s.shape.len() != 3 {
        return Err(Error::Invalid(format!(
            "confidence expects a (C,H,W) tensor, got shape {:?}",
            f_s.shape
        )));
    }
    let (c, h, w) = (f_s.shape[0], f_s.shape[1], f_s.shape[2]);
    if c != protos.channels {
        return Err(Error::ShapeMismatch {
            op: "confidence feature-vs-prototype channels",
            left: f_s.shape.clone(),
            right: vec![protos.n, protos.channels],
        });
    }
    let hw = h * w;
    let proto_norms: Vec<f64> = (0..protos.n)
        .map(|i| {
            let p = protos.proto(i);
            p.iter().map(|&v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR)
        })
        .collect();
    let mut maps = Vec::with_capacity(protos.n);
    let mut pixel = vec![0.0; c];
    for i in 0..protos.n {
        let mut values = vec![0.0; hw];
        for (pos, slot) in values.iter_mut().enumerate() {
            for (ci, p) in pixel.iter_mut().enumerate() {
                *p = f_s.data[ci * hw + pos];
            }
            *slot = cosine(&pixel, protos.proto(i), proto_norms[i]);
        }
        maps.push(ConfidenceMap {
            values,
            h,
            w,
            kind: MapKind::PerPrototype,
        });
    }
    Ok(maps)
}

/// Normalized prediction entropy in [0,1]:
/// E = sum_c p * log(1/p) / log(C), with the 0*log0 := 0 convention.
///
/// Each term carries its own ln(1/p)/ln(C) ratio so that a uniform
/// prediction with exactly representable probabilities (power-of-two C)
/// evaluates to exactly 1.
pub fn entropy_map(p: &Tensor) -> Result<ConfidenceMap> {
    if p.shape.len() != 3 {
        return Err(Error::Invalid(format!(
            "entropy_map expects a (C,H,W) tensor, got shape {:?}",
            p.shape
        )));
    }
    let (c, h, w) = (p.shape[0], p.shape[1], p.shape[2]);
    if c < 2 {
        return Err(Error::Invalid(
            "entropy normalizer log(C) requires at least 2 classes".into(),
        ));
    }
    let ln_c = (c as f64).ln();
    let hw = h * w;
    let mut values = vec![0.0; hw];
    for (pos, slot) in values.iter_mut().enumerate() {
        let mut e = 0.0;
        for ci in 0..c {
            let pv = p.data[ci * hw + pos];
            if pv > 0.0 {
                e += pv * ((1.0 / pv).ln() / ln_c);
            }
        }
        *slot = e;
    }
    Ok(ConfidenceMap {
        values,
        h,
        w,
        kind: MapKind::Entropy,
    })
}

/// Rectified weights: fused (.) (1 - entropy).
pub fn rectify(fused: &ConfidenceMap, entropy: &ConfidenceMap) -> Result<ConfidenceMap> {
    if fused.h != entropy.h || fused.w != entropy.w {
        return Err(Error::ShapeMismatch {
            op: "rectify",
            left: vec![fused.h, fused.w],
            right: vec![entropy.h, entropy.w],
        });
    }
    let values = fused
        .values
        .iter()
        .zip(&entropy.values)
        .map(|(&c, &e)| c * (1.0 - e))
        .collect();
    Ok(ConfidenceMap {
        values,
        h: fused.h,
        w: fused.w,
        kind: MapKind::Rectified,
    })
}
