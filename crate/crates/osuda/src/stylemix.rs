//! Parameter-free style mixing of channel statistics.
//!
//! A feature's per-channel mean/std is replaced by a convex combination of
//! its own statistics and (perturbed) statistics taken from a style
//! reference:
//!
//!   gamma = lambda (.) sigma_s + (1 - lambda) (.) (sigma_t + r_sigma)
//!   beta  = lambda (.) mu_s    + (1 - lambda) (.) (mu_t + r_mu)
//!   out   = gamma (.) (f - mu(f)) / sigma(f) + beta
//!
//! lambda ~ U(0,1) per channel, fresh per call; r ~ N(0, |stat_t -
//! stat_s| / divisor). lambda = 0 with perturbation off is plain AdaIN
//! (full statistic replacement); lambda = 1 is the identity. The whole
//! mechanism introduces zero trainable tensors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor, Val};

/// Epsilon inside the std's square root; keeps sigma strictly positive on
/// constant channels. Meaningful only because everything is f64.
pub const STAT_EPS: f64 = 1e-30;

/// Where mixing is applied inside the segmentor.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSite {
    /// The raw 3-channel image before layer1.
    Input,
    /// The stage-3 feature before layer4.
    Layer3,
}

/// Configuration of the mixing mechanism. Ablation cells (no mixing,
/// single-site, AdaIN) are all configurations of this struct, not
/// separate code paths.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingRule {
    /// Sites where mixing is applied; empty disables mixing entirely.
    pub sites: Vec<MixSite>,
    /// None: lambda ~ U(0,1) per channel. Some(v): lambda fixed at v
    /// (1.0 = identity, 0.0 = AdaIN-style replacement).
    #[serde(default)]
    pub lambda_fixed: Option<f64>,
    /// Gaussian perturbation of the target statistics on/off.
    #[serde(default = "default_true")]
    pub perturb: bool,
    /// Perturbation std is |stat_t - stat_s| / perturb_divisor.
    #[serde(default = "default_divisor")]
    pub perturb_divisor: f64,
}

fn default_true() -> bool {
    true
}

fn default_divisor() -> f64 {
    10.0
}

impl Default for MixingRule {
    fn default() -> Self {
        MixingRule {
            sites: vec![MixSite::Input, MixSite::Layer3],
            lambda_fixed: None,
            perturb: true,
            perturb_divisor: default_divisor(),
        }
    }
}

impl MixingRule {
    pub fn no_mixing() -> Self {
        MixingRule {
            sites: Vec::new(),
            ..Default::default()
        }
    }

    /// The AdaIN baseline: full statistic replacement, no perturbation.
    pub fn adain() -> Self {
        MixingRule {
            sites: vec![MixSite::Input, MixSite::Layer3],
            lambda_fixed: Some(0.0),
            perturb: false,
            perturb_divisor: default_divisor(),
        }
    }

    pub fn site_enabled(&self, site: MixSite) -> bool {
        self.sites.contains(&site)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda_fixed {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!(
                    "lambda_fixed must lie in [0,1], got {l}"
                )));
            }
        }
        if !self.perturb_divisor.is_finite() || self.perturb_divisor <= 0.0 {
            return Err(Error::Config(format!(
                "perturb_divisor must be a positive finite number, got {}",
                self.perturb_divisor
            )));
        }
        for (i, s) in self.sites.iter().enumerate() {
            if self.sites[..i].contains(s) {
                return Err(Error::Config(format!("duplicate mixing site {s:?}")));
            }
        }
        Ok(())
    }
}

/// The generators feeding the stochastic parts of mixing; separate
/// substreams so toggling perturbation never shifts lambda draws.
pub struct MixRng {
    pub lambda: ChaCha8Rng,
    pub perturbation: ChaCha8Rng,
}

impl MixRng {
    pub fn from_root(seed: u64) -> Self {
        MixRng {
            lambda: substream(seed, "lambda"),
            perturbation: substream(seed, "perturbation"),
        }
    }
}

/// Per-channel mean and epsilon-protected std of a (C,H,W) value, as live
/// tape nodes. Gradients flow through both when the input requires grad.
#[derive(Clone, Copy)]
pub struct ChannelStats {
    pub mu: Val,
    pub sigma: Val,
}

pub fn channel_stats(tape: &mut Tape, f: Val) -> Result<ChannelStats> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(Error::Invalid(format!(
            "channel_stats expects a (C,H,W) tensor, got shape {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mu = tape.channel_mean(f)?;
    let mu_b = tape.channel_broadcast(mu, h, w)?;
    let diff = tape.sub(f, mu_b)?;
    let sq = tape.mul(diff, diff)?;
    let var = tape.channel_mean(sq)?;
    let var_eps = tape.add_scalar(var, STAT_EPS);
    let sigma = tape.sqrt(var_eps);
    Ok(ChannelStats { mu, sigma })
}

/// One sampled mixing: the constant draws plus the resulting per-channel
/// scale/shift as tape nodes (differentiable through the source stats).
pub struct MixParams {
    pub lambda: Vec<f64>,
    pub r_mu: Vec<f64>,
    pub r_sigma: Vec<f64>,
    pub gamma: Val,
    pub beta: Val,
}

impl MixParams {
    /// Diagnostic: a large negative r_sigma draw can push gamma below
    /// zero; nothing clamps it, we only count it.
    pub fn negative_gamma_channels(&self, tape: &Tape) -> usize {
        tape.data(self.gamma).iter().filter(|&&g| g < 0.0).count()
    }
}

/// Draws lambda and the perturbations, then forms gamma/beta on the tape.
/// The draws are constants w.r.t. gradients; only the source-stat inputs
/// carry gradient.
pub fn sample_mix_params(
    tape: &mut Tape,
    stats_s: &ChannelStats,
    stats_t: &ChannelStats,
    rule: &MixingRule,
    rng: &mut MixRng,
) -> Result<MixParams> {
    let c = tape.shape(stats_s.mu)[0];
    if tape.shape(stats_t.mu)[0] != c {
        return Err(Error::ShapeMismatch {
            op: "sample_mix_params channel counts",
            left: tape.shape(stats_s.mu).to_vec(),
            right: tape.shape(stats_t.mu).to_vec(),
        });
    }

    let lambda: Vec<f64> = match rule.lambda_fixed {
        Some(l) => vec![l; c],
        None => (0..c).map(|_| rng.lambda.gen::<f64>()).collect(),
    };
    // Fixed draw order per call: all sigma perturbations, then all mu
    // perturbations. With perturbation off nothing is drawn (r = 0).
    let (mut r_sigma, mut r_mu) = (vec![0.0; c], vec![0.0; c]);
    if rule.perturb {
        for ch in 0..c {
            let gap = (tape.data(stats_t.sigma)[ch] - tape.data(stats_s.sigma)[ch]).abs();
            let z: f64 = rng.perturbation.sample(StandardNormal);
            r_sigma[ch] = z * (gap / rule.perturb_divisor);
        }
        for ch in 0..c {
            let gap = (tape.data(stats_t.mu)[ch] - tape.data(stats_s.mu)[ch]).abs();
            let z: f64 = rng.perturbation.sample(StandardNormal);
            r_mu[ch] = z * (gap / rule.perturb_divisor);
        }
    }

    let lam = tape.constant(Tensor::vector(lambda.clone()));
    let lam_inv = tape.constant(Tensor::vector(lambda.iter().map(|&l| 1.0 - l).collect()));
    let rs = tape.constant(Tensor::vector(r_sigma.clone()));
    let rm = tape.constant(Tensor::vector(r_mu.clone()));

    let sig_t = tape.add(stats_t.sigma, rs)?;
    let gs = tape.mul(lam, stats_s.sigma)?;
    let gt = tape.mul(lam_inv, sig_t)?;
    let gamma = tape.add(gs, gt)?;

    let mu_t = tape.add(stats_t.mu, rm)?;
    let bs = tape.mul(lam, stats_s.mu)?;
    let bt = tape.mul(lam_inv, mu_t)?;
    let beta = tape.add(bs, bt)?;

    Ok(MixParams {
        lambda,
        r_mu,
        r_sigma,
        gamma,
        beta,
    })
}

/// out = gamma (.) (f - mu(f)) / sigma(f) + beta, with freshly computed
/// epsilon-protected stats of `f`.
pub fn stylize(tape: &mut Tape, f: Val, gamma: Val, beta: Val) -> Result<Val> {
    let stats = channel_stats(tape, f)?;
    stylize_with_stats(tape, f, &stats, gamma, beta)
}

/// Same as [`stylize`] but reusing already-computed stats of `f`, so the
/// normalization and the gamma/beta mixing share one stats subgraph.
pub fn stylize_with_stats(
    tape: &mut Tape,
    f: Val,
    stats: &ChannelStats,
    gamma: Val,
    beta: Val,
) -> Result<Val> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(Error::Invalid(format!(
            "stylize expects a (C,H,W) tensor, got shape {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.shape(v) != [c] {
            return Err(Error::Invalid(format!(
                "stylize {name} has shape {:?}, feature has {c} channels",
                tape.shape(v)
            )));
        }
    }
    let mu_b = tape.channel_broadcast(stats.mu, h, w)?;
    let sig_b = tape.channel_broadcast(stats.sigma, h, w)?;
    let centered = tape.sub(f, mu_b)?;
    let normed = tape.div(centered, sig_b)?;
    let g_b = tape.channel_broadcast(gamma, h, w)?;
    let b_b = tape.channel_broadcast(beta, h, w)?;
    let scaled = tape.mul(g_b, normed)?;
    tape.add(scaled, b_b)
}

/// Full mixing step between a live feature and a style reference already
/// on the tape: stats of both, one fresh draw, stylization.
pub fn mix_stylize(
    tape: &mut Tape,
    f_s: Val,
    f_style: Val,
    rule: &MixingRule,
    rng: &mut MixRng,
) -> Result<(Val, MixParams)> {
    let stats_s = channel_stats(tape, f_s)?;
    let stats_t = channel_stats(tape, f_style)?;
    let mp = sample_mix_params(tape, &stats_s, &stats_t, rule, rng)?;
    let out = stylize_with_stats(tape, f_s, &stats_s, mp.gamma, mp.beta)?;
    Ok((out, mp))
}
