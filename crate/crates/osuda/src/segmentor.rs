//! Toy 4-stage convolutional segmentor.
//!
//! Each stage is conv3x3(stride) -> ReLU -> conv3x3 -> ReLU; a 1x1 head
//! maps stage-4 features to class logits and predictions live at the
//! stage-4 resolution. The two style tap points sit before layer1 (raw
//! image) and between layer3 and layer4 (features), and mixing adds zero
//! learned parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::stylemix::{mix_stylize, MixParams, MixRng, MixSite, MixingRule};
use crate::tensor::{Tape, Tensor, Val};

/// Stage output widths, conv1 strides per stage, and the class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub widths: [usize; 4],
    pub strides: [usize; 4],
    pub classes: usize,
}

impl Arch {
    pub fn default_desk(classes: usize) -> Self {
        Arch {
            widths: [8, 16, 16, 16],
            strides: [2, 1, 2, 1],
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("zero stage width or stride".into()));
        }
        Ok(())
    }

    /// Total spatial reduction from input to f4/p.
    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    /// Spatial dims of f4 and p for an HxW input; strides must divide.
    pub fn f4_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.stride_product();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by total stride {f}"
            )));
        }
        Ok((h / f, w / f))
    }

    /// Conv weight/bias shapes in checkpoint order:
    /// layerN.conv{1,2}.{weight,bias} for N=1..4, then head.{weight,bias}.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = 3;
        for (i, &width) in self.widths.iter().enumerate() {
            let n = i + 1;
            out.push((format!("layer{n}.conv1.weight"), vec![width, in_ch, 3, 3]));
            out.push((format!("layer{n}.conv1.bias"), vec![width]));
            out.push((format!("layer{n}.conv2.weight"), vec![width, width, 3, 3]));
            out.push((format!("layer{n}.conv2.bias"), vec![width]));
            in_ch = width;
        }
        out.push(("head.weight".into(), vec![self.classes, in_ch, 1, 1]));
        out.push(("head.bias".into(), vec![self.classes]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named parameter tensors in the fixed checkpoint order.
#[derive(Clone, Debug)]
pub struct Segmentor {
    pub arch: Arch,
    pub params: Vec<(String, Tensor)>,
}

/// Plain-tensor outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub p: Tensor,  // (C, H4, W4), softmax over channels
    pub f3: Tensor, // stage-3 output as consumed by layer4 (post-mixing)
    pub f4: Tensor,
}

/// The target-side style sources: raw image for the input tap, stage-3
/// feature for the feature tap.
pub struct StyleRef<'a> {
    pub image_style: &'a Tensor,
    pub feature_style: &'a Tensor,
}

/// Everything a train step needs to mix styles: rule + live rng streams.
pub struct StyleArgs<'a, 'b> {
    pub style: &'a StyleRef<'a>,
    pub rule: &'a MixingRule,
    pub rng: &'b mut MixRng,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles from a differentiable forward, for loss assembly and the
/// optimizer step.
pub struct TapedForward {
    pub p: Val,
    pub f3: Val,
    pub f4: Val,
    /// Same names/order as `Segmentor::params`.
    pub params: Vec<(String, Val)>,
    pub input_mix: Option<MixParams>,
    pub feature_mix: Option<MixParams>,
}

impl Segmentor {
    /// Centered-uniform init with scale 1/sqrt(fan_in); biases zero. Draws
    /// come from the "init" substream of the seed, in parameter order.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = substream(seed, "init");
        let mut params = Vec::new();
        for (name, shape) in arch.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Segmentor { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Differentiable forward on the caller's tape. Parameters become
    /// gradient leaves; the input and any style sources are constants, so
    /// input-tap mixing stays gradient-free by construction while the
    /// feature tap differentiates through the source statistics.
    ///
    /// Style draw order is fixed: input tap first, feature tap second.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mut style: Option<StyleArgs>,
    ) -> Result<TapedForward> {
        if x.shape.len() != 3 || x.shape[0] != 3 {
            return Err(Error::ShapeMismatch {
                op: "segmentor input",
                left: x.shape.clone(),
                right: vec![3, 0, 0],
            });
        }
        self.arch.f4_dims(x.shape[1], x.shape[2])?;
        if let Some(s) = &style {
            if s.style.feature_style.shape.first() != Some(&self.arch.widths[2]) {
                return Err(Error::ShapeMismatch {
                    op: "feature style width",
                    left: s.style.feature_style.shape.clone(),
                    right: vec![self.arch.widths[2]],
                });
            }
        }

        let params: Vec<(String, Val)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        let mut h = tape.constant(x.clone());

        let mut input_mix = None;
        if let Some(s) = style.as_mut() {
            if s.rule.sites.contains(&MixSite::Input) {
                let img_style = tape.constant(s.style.image_style.clone());
                let (mixed, mp) = mix_stylize(tape, h, img_style, s.rule, s.rng)?;
                h = mixed;
                input_mix = Some(mp);
            }
        }

        let mut idx = 0;
        let mut stage = |tape: &mut Tape, h: Val, stride: usize| -> Result<Val> {
            let w1 = params[idx].1;
            let b1 = params[idx + 1].1;
            let w2 = params[idx + 2].1;
            let b2 = params[idx + 3].1;
            idx += 4;
            let h = tape.conv2d(h, w1, b1, stride, 1)?;
            let h = tape.relu(h);
            let h = tape.conv2d(h, w2, b2, 1, 1)?;
            Ok(tape.relu(h))
        };

        h = stage(tape, h, self.arch.strides[0])?;
        h = stage(tape, h, self.arch.strides[1])?;
        h = stage(tape, h, self.arch.strides[2])?;

        let mut feature_mix = None;
        if let Some(s) = style.as_mut() {
            if s.rule.sites.contains(&MixSite::Layer3) {
                let feat_style = tape.constant(s.style.feature_style.clone());
                let (mixed, mp) = mix_stylize(tape, h, feat_style, s.rule, s.rng)?;
                h = mixed;
                feature_mix = Some(mp);
            }
        }
        let f3 = h; // the tensor layer4 actually consumes

        let f4 = stage(tape, f3, self.arch.strides[3])?;
        let head_w = params[idx].1;
        let head_b = params[idx + 1].1;
        let logits = tape.conv2d(f4, head_w, head_b, 1, 0)?;
        let p = tape.softmax_channels(logits)?;

        Ok(TapedForward {
            p,
            f3,
            f4,
            params,
            input_mix,
            feature_mix,
        })
    }

    /// Inference-facing forward. Eval mode refuses style (no stochastic
    /// draws in eval); train mode without style equals eval output since
    /// the net has no normalization or dropout layers.
    pub fn forward(
        &self,
        x: &Tensor,
        style: Option<StyleArgs>,
        mode: Mode,
    ) -> Result<FeatureBundle> {
        if mode == Mode::Eval && style.is_some() {
            return Err(Error::Invalid(
                "style mixing is a train-time operation; eval forward must be style-free".into(),
            ));
        }
        let mut tape = Tape::new();
        let out = self.forward_taped(&mut tape, x, style)?;
        Ok(FeatureBundle {
            p: tape.detach(out.p),
            f3: tape.detach(out.f3),
            f4: tape.detach(out.f4),
        })
    }

    /// Class map at f4 resolution, ties toward the lower class id.
    pub fn predict_small(&self, x: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
        let b = self.forward(x, None, Mode::Eval)?;
        let (h4, w4) = (b.p.shape[1], b.p.shape[2]);
        Ok((b.p.argmax_channels()?, h4, w4))
    }

    /// Overwrites parameter data from tape leaves after an optimizer step.
    pub fn load_from_tape(&mut self, tape: &Tape, taped: &TapedForward) -> Result<()> {
        if taped.params.len() != self.params.len() {
            return Err(Error::Invalid("parameter list length changed".into()));
        }
        for ((name, t), (tname, v)) in self.params.iter_mut().zip(&taped.params) {
            if name != tname {
                return Err(Error::Invalid(format!(
                    "parameter order mismatch: {name} vs {tname}"
                )));
            }
            t.data.copy_from_slice(tape.data(*v));
        }
        Ok(())
    }
}
