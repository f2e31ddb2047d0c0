//! Adversary-side evaluation: reconstruct a client's training input from
//! what an eavesdropper sees of its update, score the result with MSSIM
//! and VIFP, and run the security battery.
//!
//! The attacked client takes one SGD step on one image with the dense
//! softmax model, so an unprotected update gives the input back exactly.
//! The eavesdropper knows the global model, the learning rate and the public
//! key and noise level, but not the scramble key or the private key. It
//! reads every wire block as a fixed-point value and discards values no
//! clipped, noised weight could take.

mod inversion;
mod metrics;
pub mod security;

use std::collections::BTreeMap;
use std::io::Write;
use std::thread;

use serde::Serialize;

pub use inversion::{invert_dlg, invert_gradients_analytic, DlgConfig, DlgResult, GRAD_FLOOR};
pub use metrics::{gaussian_window, mssim, vifp, GrayImage};
pub use security::{run_security_battery, SecurityConfig, SecurityRow, SecurityTestReport};

use crate::crypto_he::{FixedPointCodec, DEFAULT_SCALE};
use crate::error::{Error, Result};
use crate::model::{gen_synthetic_with_noise, Architecture, ModelParams};
use crate::obfuscation::NoiseConfig;
use crate::protocol::{client_prepare_update, interleave, ClientKeys, ClientState, SelectionMode, SelectionPolicy};
use crate::rng::{derive_seed, SplitMix64};

const LABEL_TRIAL: u64 = 0xa77a;
const LABEL_GLOBAL: u64 = 0x610b;
const LABEL_PIPELINE: u64 = 0x9199;

/// What the eavesdropper gets to see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Protection {
    /// Raw trained weights.
    Unprotected,
    /// Laplace noise on every weight, blocks not scrambled, nothing encrypted.
    NoiseOnly { epsilon: f64 },
    /// The full pipeline.
    Fas { enc_pct: f64, epsilon: f64 },
}

impl Protection {
    pub fn scheme(&self) -> &'static str {
        match self {
            Protection::Unprotected => "none",
            Protection::NoiseOnly { .. } => "noise",
            Protection::Fas { .. } => "fas",
        }
    }

    pub fn enc_pct(&self) -> f64 {
        match *self {
            Protection::Fas { enc_pct, .. } => enc_pct,
            _ => 0.0,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match *self {
            Protection::Unprotected => f64::INFINITY,
            Protection::NoiseOnly { epsilon } | Protection::Fas { epsilon, .. } => epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackMethod {
    Analytic,
    Dlg { iterations: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub side: usize,
    pub classes: usize,
    pub clip: f64,
    pub scale: u64,
    pub key_bits: usize,
    /// Step size of the victim's single SGD step; known to the attacker.
    pub client_lr: f64,
    pub data_noise: f64,
    /// Global weights are drawn uniformly from `±global_spread`.
    pub global_spread: f64,
    pub trials: usize,
    pub seed: u64,
    pub enc_pcts: Vec<f64>,
    pub epsilon: f64,
    /// Adds noise-only rows at `epsilon`.
    pub include_noise_only: bool,
    pub method: AttackMethod,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            side: 8,
            classes: 4,
            clip: 1.0,
            scale: DEFAULT_SCALE,
            key_bits: 2048,
            client_lr: 0.1,
            data_noise: 0.15,
            global_spread: 0.1,
            trials: 50,
            seed: 1,
            enc_pcts: vec![10.0, 20.0, 50.0, 100.0],
            epsilon: 1.0,
            include_noise_only: false,
            method: AttackMethod::Analytic,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::Parameter(format!("side: MSSIM needs at least 8, got {}", self.side)));
        }
        if self.classes < 2 {
            return Err(Error::Parameter("classes: need at least 2".into()));
        }
        if self.trials == 0 {
            return Err(Error::Parameter("trials: need at least one".into()));
        }
        if let Some(p) = self.enc_pcts.iter().find(|p| !(0.0..=100.0).contains(*p)) {
            return Err(Error::Parameter(format!("enc_pct: {p} is outside [0, 100]")));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Parameter(format!("epsilon: {} must be positive", self.epsilon)));
        }
        if !(self.client_lr > 0.0 && self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Parameter("client_lr and clip must be positive".into()));
        }
        if let AttackMethod::Dlg { iterations: 0 } = self.method {
            return Err(Error::Parameter("dlg_iterations: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::Logistic { inputs: self.side * self.side, classes: self.classes }
    }

    fn noise(&self, epsilon: f64) -> Result<NoiseConfig> {
        if epsilon.is_infinite() {
            Ok(NoiseConfig { clip_bound_c: self.clip, ..NoiseConfig::disabled() })
        } else {
            NoiseConfig::new(epsilon, self.clip)
        }
    }
}

/// Laplace tail mass beyond this many scales is `e^-40`.
const NOISE_TAIL_SCALES: f64 = 40.0;

/// The eavesdropper's reading of wire blocks: each payload as an integer
/// mod `n`, decoded as fixed point. Values beyond `bound` cannot be (noisy)
/// weights and are marked unknown.
pub fn observe_blocks(blocks: &[Vec<u8>], codec: &FixedPointCodec, bound: f64) -> Vec<Option<f64>> {
    blocks
        .iter()
        .map(|b| {
            let v = codec.decode(&num_bigint::BigUint::from_bytes_be(b));
            (v.is_finite() && v.abs() <= bound).then_some(v)
        })
        .collect()
}

/// One victim: the global model, the input and its label, and the weights
/// after one local step.
#[derive(Debug, Clone)]
pub struct Victim {
    pub global: Vec<f64>,
    pub trained: Vec<f64>,
    pub image: Vec<f64>,
    pub label: usize,
}

pub fn make_victim(cfg: &AttackConfig, trial: u64) -> Result<Victim> {
    let arch = cfg.architecture();
    let seed = derive_seed(cfg.seed, &[LABEL_TRIAL, trial]);
    let mut rng = SplitMix64::new(derive_seed(seed, &[LABEL_GLOBAL]));
    let global: Vec<f64> =
        (0..arch.param_count()).map(|_| (2.0 * rng.next_f64() - 1.0) * cfg.global_spread).collect();
    let data = gen_synthetic_with_noise(seed, cfg.classes, cfg.side, cfg.classes, cfg.data_noise)?;
    let pick = (seed % cfg.classes as u64) as usize;
    let (image, label) = (data.images[pick].clone(), data.labels[pick]);
    let (_, grad) = arch.sample_gradient(&global, &image, label);
    let trained: Vec<f64> =
        global.iter().zip(&grad).map(|(w, g)| (w - cfg.client_lr * g).clamp(-cfg.clip, cfg.clip)).collect();
    Ok(Victim { global, trained, image, label })
}

/// What the eavesdropper reads off the wire for this victim.
pub fn observe_victim(keys: &ClientKeys, cfg: &AttackConfig, victim: &Victim, protection: Protection, trial: u64) -> Result<Vec<Option<f64>>> {
    if protection == Protection::Unprotected {
        return Ok(victim.trained.iter().map(|&w| Some(w)).collect());
    }
    let seed = derive_seed(cfg.seed, &[LABEL_PIPELINE, trial]);
    let policy = SelectionPolicy::new(protection.enc_pct(), SelectionMode::SeededUniform, seed)?;
    let mut state = ClientState::new(0, keys.clone(), policy, cfg.noise(protection.epsilon())?, cfg.clip, cfg.scale, seed)?;
    state.scramble = matches!(protection, Protection::Fas { .. });
    let params = ModelParams { values: victim.trained.clone(), shape: cfg.architecture().shape() };
    let update = client_prepare_update(&mut state, 0, &params, 1)?;
    let mask = state.policy.mask(0, params.len());
    let blocks = interleave(&update.enc_part, &update.obf_part, &mask)?;
    let bound = cfg.clip + NOISE_TAIL_SCALES * state.noise.laplace_scale();
    Ok(observe_blocks(&blocks, state.codec(), bound))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub seed: u64,
    pub scheme: &'static str,
    pub enc_pct: f64,
    pub epsilon: f64,
    pub mssim: f64,
    pub vifp: f64,
    /// False when the attack had no signal and fell back to the prior.
    pub applicable: bool,
}

/// The attacker's prior when nothing can be read: mid-gray.
const PRIOR_PIXEL: f64 = 0.5;

pub fn run_trial(keys: &ClientKeys, cfg: &AttackConfig, protection: Protection, trial: u64) -> Result<TrialResult> {
    let arch = cfg.architecture();
    let victim = make_victim(cfg, trial)?;
    let observed = observe_victim(keys, cfg, &victim, protection, trial)?;
    // Implied gradient on each readable coordinate.
    let grad: Vec<Option<f64>> =
        observed.iter().zip(&victim.global).map(|(o, w)| o.map(|v| (w - v) / cfg.client_lr)).collect();
    let n_w = arch.inputs() * arch.classes();
    let (reconstruction, applicable) = match cfg.method {
        AttackMethod::Analytic => {
            let filled: Vec<f64> = grad.iter().map(|g| g.unwrap_or(0.0)).collect();
            match invert_gradients_analytic(&filled[..n_w], &filled[n_w..]) {
                Ok(x) => (x, true),
                Err(Error::AttackInapplicable(_)) => (vec![PRIOR_PIXEL; arch.inputs()], false),
                Err(e) => return Err(e),
            }
        }
        AttackMethod::Dlg { iterations } => {
            let dlg = DlgConfig { iterations, seed: derive_seed(cfg.seed, &[LABEL_TRIAL, trial, 0xd1]), ..Default::default() };
            let r = invert_dlg(&grad, &arch, &victim.global, &dlg)?;
            (r.image, grad.iter().any(Option::is_some))
        }
    };
    let recon = GrayImage::square(cfg.side, reconstruction.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    let truth = GrayImage::square(cfg.side, victim.image.clone())?;
    Ok(TrialResult {
        seed: trial,
        scheme: protection.scheme(),
        enc_pct: protection.enc_pct(),
        epsilon: protection.epsilon(),
        mssim: mssim(&truth, &recon)?,
        vifp: vifp(&truth, &recon)?,
        applicable,
    })
}

/// Mean scores of one setting across trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub scheme: &'static str,
    pub enc_pct: f64,
    pub epsilon: f64,
    pub mssim: f64,
    pub vifp: f64,
    /// `(mssim, vifp)` per trial, in trial order.
    pub per_image_scores: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauSummary {
    pub baseline: f64,
    pub at_20: f64,
    pub at_100: f64,
    pub gap: f64,
    /// The smaller of `baseline − at_20` and `baseline − at_100`.
    pub drop: f64,
    pub pass: bool,
}

pub const PLATEAU_GAP: f64 = 0.05;
pub const PLATEAU_DROP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Campaign {
    pub results: Vec<TrialResult>,
}

impl Campaign {
    /// Settings in first-appearance order.
    pub fn reports(&self) -> Vec<ReconstructionReport> {
        let mut order: Vec<(&'static str, u64, u64)> = Vec::new();
        let mut groups: BTreeMap<(&'static str, u64, u64), Vec<&TrialResult>> = BTreeMap::new();
        for r in &self.results {
            let key = (r.scheme, r.enc_pct.to_bits(), r.epsilon.to_bits());
            if !groups.contains_key(&key) {
                order.push(key);
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rs = &groups[&key];
                let n = rs.len() as f64;
                ReconstructionReport {
                    scheme: key.0,
                    enc_pct: f64::from_bits(key.1),
                    epsilon: f64::from_bits(key.2),
                    mssim: rs.iter().map(|r| r.mssim).sum::<f64>() / n,
                    vifp: rs.iter().map(|r| r.vifp).sum::<f64>() / n,
                    per_image_scores: rs.iter().map(|r| (r.mssim, r.vifp)).collect(),
                }
            })
            .collect()
    }

    pub fn mean_mssim(&self, scheme: &str, enc_pct: f64) -> Option<f64> {
        let v: Vec<f64> =
            self.results.iter().filter(|r| r.scheme == scheme && r.enc_pct == enc_pct).map(|r| r.mssim).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Needs unprotected rows and FAS rows at 20% and 100%.
    pub fn plateau(&self) -> Option<PlateauSummary> {
        let baseline = self.mean_mssim("none", 0.0)?;
        let at_20 = self.mean_mssim("fas", 20.0)?;
        let at_100 = self.mean_mssim("fas", 100.0)?;
        let gap = (at_20 - at_100).abs();
        let drop = (baseline - at_20).min(baseline - at_100);
        Some(PlateauSummary { baseline, at_20, at_100, gap, drop, pass: gap <= PLATEAU_GAP && drop >= PLATEAU_DROP })
    }

    /// Columns: `seed,enc_pct,epsilon,mssim,vifp,scheme`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Protocol(format!("csv: {e}"));
        out.write_record(["seed", "enc_pct", "epsilon", "mssim", "vifp", "scheme"]).map_err(csv_err)?;
        for r in &self.results {
            let eps = if r.epsilon.is_infinite() { "inf".to_string() } else { r.epsilon.to_string() };
            out.write_record([
                r.seed.to_string(),
                r.enc_pct.to_string(),
                eps,
                format!("{:.9}", r.mssim),
                format!("{:.9}", r.vifp),
                r.scheme.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// All settings for every trial: the unprotected baseline, optionally
/// noise only, then FAS at each `enc_pct`.
pub fn campaign_settings(cfg: &AttackConfig) -> Vec<Protection> {
    let mut s = vec![Protection::Unprotected];
    if cfg.include_noise_only {
        s.push(Protection::NoiseOnly { epsilon: cfg.epsilon });
    }
    s.extend(cfg.enc_pcts.iter().map(|&enc_pct| Protection::Fas { enc_pct, epsilon: cfg.epsilon }));
    s
}

/// Runs every setting on trials `0..cfg.trials`. Trials are spread over
/// threads; results come back in (trial, setting) order regardless.
pub fn run_campaign(cfg: &AttackConfig) -> Result<Campaign> {
    cfg.validate()?;
    let keys = ClientKeys::derive(cfg.key_bits, cfg.seed)?;
    run_campaign_with_keys(cfg, &keys)
}

pub fn run_campaign_with_keys(cfg: &AttackConfig, keys: &ClientKeys) -> Result<Campaign> {
    cfg.validate()?;
    let settings = campaign_settings(cfg);
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.trials);
    let per_trial: Vec<Result<Vec<TrialResult>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let settings = &settings;
                s.spawn(move || {
                    (w..cfg.trials)
                        .step_by(workers)
                        .map(|t| settings.iter().map(|&p| run_trial(keys, cfg, p, t as u64)).collect::<Result<Vec<_>>>())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut by_worker: Vec<std::vec::IntoIter<Result<Vec<TrialResult>>>> =
            handles.into_iter().map(|h| h.join().expect("attack worker panicked").into_iter()).collect();
        (0..cfg.trials).map(|t| by_worker[t % workers].next().expect("trial result")).collect()
    });
    let mut results = Vec::new();
    for r in per_trial {
        results.extend(r?);
    }
    Ok(Campaign { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AttackConfig {
        AttackConfig { key_bits: 256, trials: 8, ..Default::default() }
    }

    #[test]
    fn unprotected_update_is_recovered_exactly() {
        let cfg = small();
        let keys = ClientKeys::derive(cfg.key_bits, cfg.seed).unwrap();
        let r = run_trial(&keys, &cfg, Protection::Unprotected, 0).unwrap();
        assert!(r.applicable);
        assert!((r.mssim - 1.0).abs() < 1e-9, "{}", r.mssim);
    }

    #[test]
    fn scrambled_and_encrypted_blocks_are_unreadable() {
        let cfg = small();
        let keys = ClientKeys::derive(cfg.key_bits, cfg.seed).unwrap();
        let v = make_victim(&cfg, 3).unwrap();
        for p in [Protection::Fas { enc_pct: 10.0, epsilon: 1.0 }, Protection::Fas { enc_pct: 100.0, epsilon: f64::INFINITY }] {
            let obs = observe_victim(&keys, &cfg, &v, p, 3).unwrap();
            assert!(obs.iter().all(Option::is_none), "{p:?}");
        }
        // Without scrambling the noisy values are readable.
        let obs = observe_victim(&keys, &cfg, &v, Protection::NoiseOnly { epsilon: 1.0 }, 3).unwrap();
        assert!(obs.iter().filter(|o| o.is_some()).count() > obs.len() / 2);
    }

    #[test]
    fn campaign_is_deterministic_and_ordered() {
        let cfg = AttackConfig { trials: 5, enc_pcts: vec![20.0, 100.0], ..small() };
        let keys = ClientKeys::derive(cfg.key_bits, cfg.seed).unwrap();
        let a = run_campaign_with_keys(&cfg, &keys).unwrap();
        let b = run_campaign_with_keys(&cfg, &keys).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.results.len(), 15);
        assert_eq!(a.results[0].scheme, "none");
        assert_eq!(a.results[3].seed, 1);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("seed,enc_pct,epsilon,mssim,vifp,scheme\n0,0,inf,"));
        let p = a.plateau().unwrap();
        assert!(p.pass, "{p:?}");
    }

    #[test]
    fn protection_lowers_similarity_in_order() {
        // Noise small enough that the noisy update still carries signal.
        let cfg = AttackConfig { epsilon: 50.0, include_noise_only: true, enc_pcts: vec![10.0], trials: 50, ..small() };
        let c = run_campaign(&cfg).unwrap();
        let none = c.mean_mssim("none", 0.0).unwrap();
        let noise = c.mean_mssim("noise", 0.0).unwrap();
        let fas = c.mean_mssim("fas", 10.0).unwrap();
        assert!(none > noise && noise > fas, "{none} {noise} {fas}");
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig { side: 4, ..small() }.validate().is_err());
        assert!(AttackConfig { enc_pcts: vec![120.0], ..small() }.validate().is_err());
        assert!(AttackConfig { method: AttackMethod::Dlg { iterations: 0 }, ..small() }.validate().is_err());
    }
}
