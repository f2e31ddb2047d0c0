//! Flat `key = value` experiment files. `#` starts a comment. `enc_pct` and
//! `epsilon` accept comma-separated lists, which turn `fas run` into a sweep.

use std::path::PathBuf;
use std::str::FromStr;

use fas_core::attack_metrics::{AttackConfig, AttackMethod, SecurityConfig};
use fas_core::protocol::session::{Channel, SessionConfig};

/// Bad configuration or flags; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

type Result<T> = std::result::Result<T, UsageError>;

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Server,
    Client,
    All,
}

impl FromStr for Role {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "server" => Ok(Role::Server),
            "client" => Ok(Role::Client),
            "all" | "all-in-one" => Ok(Role::All),
            other => Err(usage(format!("role: expected server, client or all, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub session: SessionConfig,
    /// `None` when the file did not set it; each command picks its own default.
    pub enc_pcts: Option<Vec<f64>>,
    pub epsilons: Option<Vec<f64>>,
    pub channel: Channel,
    pub role: Role,
    pub bind: String,
    pub connect: String,
    pub out: PathBuf,
    /// Runs per sweep point; encrypt time is reported as their median.
    pub repeats: usize,
    /// Client ids this process plays under `role = client`.
    pub client_ids: Option<Vec<u32>>,
    pub trials: usize,
    pub attack_method: String,
    pub dlg_iterations: usize,
    pub include_noise_only: bool,
    pub global_spread: f64,
    pub client_lr: f64,
    pub samples: usize,
    pub obfuscation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            session: SessionConfig::default(),
            enc_pcts: None,
            epsilons: None,
            channel: Channel::Loopback,
            role: Role::All,
            bind: "127.0.0.1:7878".into(),
            connect: "127.0.0.1:7878".into(),
            out: PathBuf::from("fas-out"),
            repeats: 1,
            client_ids: None,
            trials: 50,
            attack_method: "analytic".into(),
            dlg_iterations: 500,
            include_noise_only: false,
            global_spread: 0.1,
            client_lr: 0.1,
            samples: 1000,
            obfuscation: true,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| usage(format!("{key}: cannot parse {v:?}")))
}

fn parse_real(key: &str, v: &str) -> Result<f64> {
    match v {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => parse_num(key, v),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(usage(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    let items: Vec<f64> =
        v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_real(key, s)).collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(usage(format!("{key}: list is empty")));
    }
    Ok(items)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "enc_pct" => {
                let list = parse_list(key, v)?;
                self.session.enc_pct = list[0];
                self.enc_pcts = Some(list);
            }
            "epsilon" => {
                let list = parse_list(key, v)?;
                self.session.epsilon = list[0];
                self.epsilons = Some(list);
            }
            "channel" => self.channel = v.parse().map_err(|e: fas_core::Error| usage(e.to_string()))?,
            "role" => self.role = v.parse()?,
            "bind" => self.bind = v.to_string(),
            "connect" => self.connect = v.to_string(),
            "out" => self.out = PathBuf::from(v),
            "repeats" => self.repeats = parse_num(key, v)?,
            "client_ids" => {
                self.client_ids = Some(
                    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect::<Result<_>>()?,
                )
            }
            "trials" => self.trials = parse_num(key, v)?,
            "attack_method" => self.attack_method = v.to_string(),
            "dlg_iterations" => self.dlg_iterations = parse_num(key, v)?,
            "include_noise_only" => self.include_noise_only = parse_bool(key, v)?,
            "global_spread" => self.global_spread = parse_real(key, v)?,
            "client_lr" => self.client_lr = parse_real(key, v)?,
            "samples" => self.samples = parse_num(key, v)?,
            "obfuscation" => self.obfuscation = parse_bool(key, v)?,
            _ => {
                let known = self.session.set(key, v).map_err(|e| usage(e.to_string()))?;
                if !known {
                    return Err(usage(format!("{key}: unknown setting")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.enc_pcts.iter().flatten() {
            if !(0.0..=100.0).contains(p) {
                return Err(usage(format!("enc_pct: {p} is outside [0, 100]")));
            }
        }
        for e in self.epsilons.iter().flatten() {
            if e.is_nan() || *e <= 0.0 {
                return Err(usage(format!("epsilon: {e} must be positive")));
            }
        }
        if self.repeats == 0 {
            return Err(usage("repeats: must be at least 1"));
        }
        if !matches!(self.attack_method.as_str(), "analytic" | "dlg") {
            return Err(usage(format!("attack_method: expected analytic or dlg, got {:?}", self.attack_method)));
        }
        self.session.validate().map_err(|e| usage(e.to_string()))?;
        if let Some(ids) = &self.client_ids {
            if let Some(id) = ids.iter().find(|&&id| id as usize >= self.session.clients) {
                return Err(usage(format!("client_ids: {id} is not below clients = {}", self.session.clients)));
            }
        }
        Ok(())
    }

    /// Sweep points for `fas run`, in file order, enc_pct outermost.
    pub fn sweep(&self) -> Vec<(f64, f64)> {
        let encs = self.enc_pcts.clone().unwrap_or_else(|| vec![self.session.enc_pct]);
        let epss = self.epsilons.clone().unwrap_or_else(|| vec![self.session.epsilon]);
        encs.iter().flat_map(|&e| epss.iter().map(move |&p| (e, p))).collect()
    }

    pub fn attack_configs(&self) -> Vec<AttackConfig> {
        let method = if self.attack_method == "dlg" {
            AttackMethod::Dlg { iterations: self.dlg_iterations }
        } else {
            AttackMethod::Analytic
        };
        let base = AttackConfig {
            side: self.session.side,
            classes: self.session.classes,
            clip: self.session.clip,
            scale: self.session.scale,
            key_bits: self.session.key_bits,
            client_lr: self.client_lr,
            data_noise: self.session.data_noise,
            global_spread: self.global_spread,
            trials: self.trials,
            seed: self.session.seed,
            enc_pcts: self.enc_pcts.clone().unwrap_or_else(|| vec![10.0, 20.0, 50.0, 100.0]),
            epsilon: 1.0,
            include_noise_only: self.include_noise_only,
            method,
        };
        self.epsilons
            .clone()
            .unwrap_or_else(|| vec![1.0])
            .into_iter()
            .map(|epsilon| AttackConfig { epsilon, ..base.clone() })
            .collect()
    }

    pub fn security_config(&self) -> SecurityConfig {
        SecurityConfig {
            key_bits: self.session.key_bits,
            enc_pct: self.enc_pcts.as_ref().map_or(10.0, |l| l[0]),
            epsilon: self.epsilons.as_ref().map_or(1.0, |l| l[0]),
            clip: self.session.clip,
            scale: self.session.scale,
            seed: self.session.seed,
            obfuscation: self.obfuscation,
            samples: self.samples,
        }
    }
}
