//! Multi-round sessions. The same server and client state machines run over
//! the in-process loopback (single thread, deterministic order) and over TCP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::net::ToSocketAddrs;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{
    client_apply_aggregate, client_prepare_update, fedavg_plain, ClientKeys, ClientState, SelectionMode,
    SelectionPolicy, ServerKeys, ServerState,
};
use crate::crypto_he::{PublicKey, DEFAULT_KEY_BITS, DEFAULT_SCALE};
use crate::error::{Error, Result};
use crate::model::{evaluate, gen_synthetic_with_noise, train_local, Architecture, ModelParams, SyntheticDataset, TrainConfig};
use crate::obfuscation::{NoiseConfig, ScrambleKey};
use crate::rng::{derive_seed, fnv1a64};
use crate::transport::tcp::{serve, Connection, ServerEvent, ServerHandle};
use crate::transport::{
    encode_frame, to_micro, AggregateMsg, ConfigMsg, FrameDecoder, Message, UpdateMsg, ERR_KEY_MISMATCH,
    ERR_PROTOCOL,
};

const LABEL_DATA: u64 = 0xda7a;
const LABEL_INIT: u64 = 0x1417;
const LABEL_TRAIN: u64 = 0x7a1e;
const LABEL_CLIENT_RNG: u64 = 0xc11e;
const LABEL_SELECTION: u64 = 0x5e1e;

/// Everything `run_session` needs. Parsed from `key=value` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub clients: usize,
    pub rounds: u32,
    pub epochs: usize,
    pub enc_pct: f64,
    /// Per-coordinate privacy budget; infinity disables noise.
    pub epsilon: f64,
    pub clip: f64,
    pub scale: u64,
    pub seed: u64,
    pub mode: SelectionMode,
    pub key_bits: usize,
    pub samples_per_client: usize,
    pub test_samples: usize,
    pub side: usize,
    pub classes: usize,
    /// Hidden units; 0 selects the logistic model.
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub data_noise: f64,
    /// `(round, client)` pairs: that client leaves before sending the round's update.
    pub dropout: Vec<(u32, u32)>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            clients: 4,
            rounds: 3,
            epochs: 1,
            enc_pct: 10.0,
            epsilon: f64::INFINITY,
            clip: 1.0,
            scale: DEFAULT_SCALE,
            seed: 1,
            mode: SelectionMode::SeededUniform,
            key_bits: DEFAULT_KEY_BITS,
            samples_per_client: 50,
            test_samples: 200,
            side: 8,
            classes: 4,
            hidden: 0,
            learning_rate: 0.1,
            batch_size: 8,
            data_noise: 0.15,
            dropout: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Parameter(format!("{key}: cannot parse {value:?}")))
}

fn parse_real(key: &str, value: &str) -> Result<f64> {
    match value.trim() {
        "inf" | "infinity" | "∞" => Ok(f64::INFINITY),
        v => parse(key, v),
    }
}

impl SessionConfig {
    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "clients" => self.clients = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "enc_pct" => self.enc_pct = parse_real(key, value)?,
            "epsilon" => self.epsilon = parse_real(key, value)?,
            "clip" => self.clip = parse_real(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.trim().parse().map_err(|e: Error| Error::Parameter(format!("mode: {e}")))?,
            "key_bits" => self.key_bits = parse(key, value)?,
            "samples_per_client" => self.samples_per_client = parse(key, value)?,
            "test_samples" => self.test_samples = parse(key, value)?,
            "side" => self.side = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse_real(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "data_noise" => self.data_noise = parse_real(key, value)?,
            "dropout" => {
                self.dropout = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|pair| {
                        let (r, c) = pair
                            .split_once(':')
                            .ok_or_else(|| Error::Parameter(format!("dropout: expected round:client, got {pair:?}")))?;
                        Ok((parse("dropout", r)?, parse("dropout", c)?))
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Parameter(format!("{field}: {why}")));
        if self.clients == 0 {
            return bad("clients", "need at least one client".into());
        }
        if !(0.0..=100.0).contains(&self.enc_pct) {
            return bad("enc_pct", format!("{} is outside [0, 100]", self.enc_pct));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon", format!("{} must be positive", self.epsilon));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return bad("clip", format!("{} must be positive and finite", self.clip));
        }
        if self.scale == 0 {
            return bad("scale", "must be positive".into());
        }
        if self.key_bits < 16 || self.key_bits % 2 != 0 {
            return bad("key_bits", format!("{} must be even and at least 16", self.key_bits));
        }
        if self.samples_per_client == 0 || self.test_samples == 0 {
            return bad("samples_per_client", "sample counts must be positive".into());
        }
        if self.side == 0 {
            return bad("side", "must be positive".into());
        }
        if self.classes < 2 {
            return bad("classes", "need at least 2".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.data_noise >= 0.0) {
            return bad("data_noise", "must be non-negative".into());
        }
        if let Some((_, c)) = self.dropout.iter().find(|(_, c)| *c as usize >= self.clients) {
            return bad("dropout", format!("client {c} does not exist"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let real = |x: f64| if x.is_infinite() { "inf".to_string() } else { x.to_string() };
        let mut m = BTreeMap::new();
        m.insert("clients".into(), self.clients.to_string());
        m.insert("rounds".into(), self.rounds.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("enc_pct".into(), real(self.enc_pct));
        m.insert("epsilon".into(), real(self.epsilon));
        m.insert("clip".into(), real(self.clip));
        m.insert("scale".into(), self.scale.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert(
            "mode".into(),
            match self.mode {
                SelectionMode::Prefix => "prefix".into(),
                SelectionMode::SeededUniform => "seeded_uniform".into(),
            },
        );
        m.insert("key_bits".into(), self.key_bits.to_string());
        m.insert("samples_per_client".into(), self.samples_per_client.to_string());
        m.insert("test_samples".into(), self.test_samples.to_string());
        m.insert("side".into(), self.side.to_string());
        m.insert("classes".into(), self.classes.to_string());
        m.insert("hidden".into(), self.hidden.to_string());
        m.insert("learning_rate".into(), real(self.learning_rate));
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("data_noise".into(), real(self.data_noise));
        m.insert(
            "dropout".into(),
            self.dropout.iter().map(|(r, c)| format!("{r}:{c}")).collect::<Vec<_>>().join(","),
        );
        m
    }

    pub fn architecture(&self) -> Architecture {
        let inputs = self.side * self.side;
        if self.hidden == 0 {
            Architecture::Logistic { inputs, classes: self.classes }
        } else {
            Architecture::Mlp { inputs, hidden: self.hidden, classes: self.classes }
        }
    }

    pub fn policy(&self) -> Result<SelectionPolicy> {
        SelectionPolicy::new(self.enc_pct, self.mode, derive_seed(self.seed, &[LABEL_SELECTION]))
    }

    pub fn noise(&self) -> Result<NoiseConfig> {
        noise_config(self.epsilon, self.clip)
    }

    fn train_config(&self, client: u32, round: u32) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            clip_bound_c: self.clip,
            shuffle_seed: derive_seed(self.seed, &[LABEL_TRAIN, u64::from(client), u64::from(round)]),
        }
    }

    fn drops_at(&self, client: u32, round: u32) -> bool {
        self.dropout.iter().any(|&(r, c)| r == round && c == client)
    }
}

fn noise_config(epsilon: f64, clip: f64) -> Result<NoiseConfig> {
    if epsilon.is_infinite() {
        Ok(NoiseConfig { clip_bound_c: clip, ..NoiseConfig::disabled() })
    } else {
        NoiseConfig::new(epsilon, clip)
    }
}

/// Client shards and the shared held-out set.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub shards: Vec<SyntheticDataset>,
    pub test: SyntheticDataset,
}

pub fn session_data(cfg: &SessionConfig) -> Result<SessionData> {
    let train_n = cfg.clients * cfg.samples_per_client;
    let all = gen_synthetic_with_noise(
        derive_seed(cfg.seed, &[LABEL_DATA]),
        train_n + cfg.test_samples,
        cfg.side,
        cfg.classes,
        cfg.data_noise,
    )?;
    Ok(SessionData { shards: all.subset(0, train_n).shard(cfg.clients), test: all.subset(train_n, all.len()) })
}

pub fn initial_params(cfg: &SessionConfig) -> ModelParams {
    cfg.architecture().init(derive_seed(cfg.seed, &[LABEL_INIT]))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseMillis {
    pub train: f64,
    pub encrypt: f64,
    pub obfuscate: f64,
    pub transport: f64,
    pub aggregate: f64,
    pub apply: f64,
}

impl PhaseMillis {
    pub const NAMES: [&'static str; 6] = ["train", "encrypt", "obfuscate", "transport", "aggregate", "apply"];

    pub fn get(&self, phase: &str) -> f64 {
        match phase {
            "train" => self.train,
            "encrypt" => self.encrypt,
            "obfuscate" => self.obfuscate,
            "transport" => self.transport,
            "aggregate" => self.aggregate,
            "apply" => self.apply,
            _ => 0.0,
        }
    }

    fn add(&mut self, other: &PhaseMillis) {
        self.train += other.train;
        self.encrypt += other.encrypt;
        self.obfuscate += other.obfuscate;
        self.transport += other.transport;
        self.aggregate += other.aggregate;
        self.apply += other.apply;
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    /// Summed over all clients (client phases) plus the server.
    pub millis: PhaseMillis,
    /// All UPDATE and AGGREGATE frames of the round.
    pub wire_bytes: u64,
    /// Hex characters of ciphertext inside those frames.
    pub ciphertext_bytes: u64,
    pub accuracy: f64,
    pub participants: Vec<u32>,
    pub dropped: Vec<u32>,
    pub partial: bool,
    /// FNV-1a-64 over the round's UPDATE frames (client-id order) and the AGGREGATE body.
    pub payload_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionReport {
    pub channel: String,
    pub config: BTreeMap<String, String>,
    pub param_count: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub rounds: Vec<RoundReport>,
    /// HELLO, CONFIG and DONE frames.
    pub handshake_bytes: u64,
    pub total_bytes: u64,
    pub final_params: Vec<f64>,
}

impl SessionReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Protocol(format!("report serialization: {e}")))
    }

    /// One row per (round, phase): `round,phase,millis,bytes_sent,accuracy`.
    /// Wire bytes sit on the transport row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Protocol(format!("csv: {e}"));
        out.write_record(["round", "phase", "millis", "bytes_sent", "accuracy"]).map_err(csv_err)?;
        for r in &self.rounds {
            for phase in PhaseMillis::NAMES {
                let bytes = if phase == "transport" { r.wire_bytes } else { 0 };
                out.write_record([
                    r.round.to_string(),
                    phase.to_string(),
                    format!("{:.3}", r.millis.get(phase)),
                    bytes.to_string(),
                    format!("{:.6}", r.accuracy),
                ])
                .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is UTF-8"))
    }

    /// Encrypt-phase time summed over all rounds.
    pub fn encrypt_millis(&self) -> f64 {
        self.rounds.iter().map(|r| r.millis.encrypt).sum()
    }
}

#[derive(Debug, Clone, Default)]
struct ServerRoundLog {
    wire_bytes: u64,
    ciphertext_bytes: u64,
    aggregate: Duration,
    transport: Duration,
    participants: Vec<u32>,
    update_digests: BTreeMap<u32, Vec<u8>>,
    aggregate_frame: Vec<u8>,
}

/// Server state machine. Consumes decoded messages and returns the
/// messages to send, as `(peer, message)` pairs.
pub struct ServerSession {
    state: ServerState,
    config: ConfigMsg,
    rounds: u32,
    expected_clients: usize,
    registered: BTreeMap<u32, u32>,
    active: BTreeSet<u32>,
    queued: BTreeMap<u32, Vec<(Message, usize)>>,
    current: ServerRoundLog,
    logs: Vec<ServerRoundLog>,
    handshake_bytes: u64,
    finished: bool,
}

impl ServerSession {
    pub fn new(keys: ServerKeys, cfg: &SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.architecture().param_count();
        let policy = cfg.policy()?;
        let config = ConfigMsg {
            n_params: n as u32,
            enc_pct_x100: (cfg.enc_pct * 100.0).round() as u32,
            mode: policy.mode,
            selection_seed: policy.selection_seed,
            epsilon_micro: to_micro(cfg.epsilon),
            scale: cfg.scale,
            clip_micro: to_micro(cfg.clip),
            rounds: cfg.rounds,
            public_key_hex: keys.pk.to_hex(),
            scramble_key_hex: keys.scramble.to_hex(),
        };
        // The policy actually used is the one clients will rebuild from CONFIG.
        let state = ServerState::new(keys, config.policy()?, n, cfg.scale)?;
        Ok(ServerSession {
            state,
            config,
            rounds: cfg.rounds,
            expected_clients: cfg.clients,
            registered: BTreeMap::new(),
            active: BTreeSet::new(),
            queued: BTreeMap::new(),
            current: ServerRoundLog::default(),
            logs: Vec::new(),
            handshake_bytes: 0,
            finished: false,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    /// Counts a frame the driver sent on the server's behalf.
    pub fn record_sent(&mut self, msg: &Message, frame_len: usize) {
        match msg {
            Message::Aggregate(_) => {
                if let Some(log) = self.logs.last_mut() {
                    log.wire_bytes += frame_len as u64;
                    log.ciphertext_bytes += msg.ciphertext_hex_len();
                }
            }
            Message::Update(_) => {}
            _ => self.handshake_bytes += frame_len as u64,
        }
    }

    pub fn on_message(&mut self, peer: u32, msg: Message, frame_len: usize) -> Result<Vec<(u32, Message)>> {
        match msg {
            Message::Hello { client_id } => {
                self.handshake_bytes += frame_len as u64;
                if self.registered.contains_key(&peer) {
                    return Err(Error::Protocol(format!("peer {peer} sent HELLO twice")));
                }
                if self.registered.values().any(|&c| c == client_id) {
                    return Err(Error::Protocol(format!("client id {client_id} already connected")));
                }
                if self.registered.len() >= self.expected_clients {
                    return Err(Error::Protocol("session is full".into()));
                }
                self.registered.insert(peer, client_id);
                self.active.insert(peer);
                let mut out = vec![(peer, Message::Config(self.config.clone()))];
                for (m, len) in self.queued.remove(&peer).unwrap_or_default() {
                    out.extend(self.on_message(peer, m, len)?);
                }
                out.extend(self.try_close_round()?);
                Ok(out)
            }
            Message::Update(u) => {
                let Some(&client_id) = self.registered.get(&peer) else {
                    // Not registered yet: hold it until the handshake completes.
                    self.queued.entry(peer).or_default().push((Message::Update(u), frame_len));
                    return Ok(Vec::new());
                };
                if u.client_id != client_id {
                    return Err(Error::Protocol(format!(
                        "peer registered as client {client_id} sent an update as {}",
                        u.client_id
                    )));
                }
                let start = Instant::now();
                let digest = encode_frame(&Message::Update(u.clone()))?;
                self.current.wire_bytes += frame_len as u64;
                self.current.ciphertext_bytes += Message::Update(u.clone()).ciphertext_hex_len();
                let mask = self.state.policy.mask(u.round, self.state.n_params);
                let update = u.into_update(self.state.public_key(), &mask)?;
                self.state.submit(update)?;
                self.current.update_digests.insert(client_id, digest);
                self.current.transport += start.elapsed();
                self.try_close_round()
            }
            Message::Done => {
                self.handshake_bytes += frame_len as u64;
                self.active.remove(&peer);
                self.try_close_round()
            }
            Message::Error { message, .. } => {
                self.active.remove(&peer);
                Err(Error::Peer { peer: format!("#{peer}"), message })
            }
            Message::Config(_) | Message::Aggregate(_) => {
                Err(Error::Protocol(format!("peer {peer} sent a server-only message")))
            }
        }
    }

    /// A connection ended (or a loopback client left).
    pub fn on_closed(&mut self, peer: u32) -> Result<Vec<(u32, Message)>> {
        self.queued.remove(&peer);
        if self.registered.contains_key(&peer) && self.active.remove(&peer) {
            return self.try_close_round();
        }
        Ok(Vec::new())
    }

    fn try_close_round(&mut self) -> Result<Vec<(u32, Message)>> {
        if self.finished || self.registered.len() < self.expected_clients {
            return Ok(Vec::new());
        }
        if self.state.round >= self.rounds {
            self.finished = true;
            return Ok(self.active.iter().map(|&p| (p, Message::Done)).collect());
        }
        let submitted: BTreeSet<u32> = self.state.pending_clients().into_iter().collect();
        let waiting = self.active.iter().any(|p| !submitted.contains(&self.registered[p]));
        if waiting {
            return Ok(Vec::new());
        }
        if submitted.is_empty() {
            if self.active.is_empty() {
                self.finished = true;
                return Err(Error::Protocol(format!("all clients left before round {}", self.state.round)));
            }
            return Ok(Vec::new());
        }
        let round = self.state.round;
        let start = Instant::now();
        let agg = self.state.close_round()?;
        let aggregate = start.elapsed();
        let start = Instant::now();
        let mask = self.state.policy.mask(round, self.state.n_params);
        let msg = Message::Aggregate(AggregateMsg::from_result(&agg, &mask)?);
        let mut log = std::mem::take(&mut self.current);
        log.aggregate = aggregate;
        log.participants = submitted.into_iter().collect();
        log.aggregate_frame = encode_frame(&msg)?;
        log.transport += start.elapsed();
        self.logs.push(log);
        let mut out: Vec<(u32, Message)> = self.active.iter().map(|&p| (p, msg.clone())).collect();
        if self.state.round >= self.rounds {
            self.finished = true;
            out.extend(self.active.iter().map(|&p| (p, Message::Done)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
struct ClientRoundLog {
    round: u32,
    millis: PhaseMillis,
    accuracy: Option<f64>,
}

/// Client state machine: trains, prepares updates and applies aggregates.
pub struct ClientSession {
    pub client_id: u32,
    cfg: SessionConfig,
    keys: ClientKeys,
    arch: Architecture,
    shard: SyntheticDataset,
    test: Option<Arc<SyntheticDataset>>,
    params: ModelParams,
    state: Option<ClientState>,
    rounds: u32,
    logs: Vec<ClientRoundLog>,
    pending_transport: Duration,
    pub completed: bool,
}

impl ClientSession {
    pub fn new(
        client_id: u32,
        cfg: &SessionConfig,
        keys: ClientKeys,
        shard: SyntheticDataset,
        test: Option<Arc<SyntheticDataset>>,
    ) -> Self {
        ClientSession {
            client_id,
            cfg: cfg.clone(),
            keys,
            arch: cfg.architecture(),
            shard,
            test,
            params: initial_params(cfg),
            state: None,
            rounds: 0,
            logs: Vec::new(),
            pending_transport: Duration::ZERO,
            completed: false,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn rounds(&self) -> u32 {
        self.rounds
    }

    pub fn hello(&self) -> Message {
        Message::Hello { client_id: self.client_id }
    }

    pub fn on_config(&mut self, c: &ConfigMsg) -> Result<()> {
        let pk = PublicKey::from_hex(&c.public_key_hex)?;
        if pk != self.keys.pk {
            return Err(Error::KeyMismatch("server announced a different public key".into()));
        }
        if ScrambleKey::from_hex(&c.scramble_key_hex)? != self.keys.scramble {
            return Err(Error::KeyMismatch("server announced a different scramble key".into()));
        }
        if c.n_params as usize != self.params.len() {
            return Err(Error::Protocol(format!(
                "server expects {} weights, local model has {}",
                c.n_params,
                self.params.len()
            )));
        }
        let noise = noise_config(c.epsilon(), c.clip())?;
        self.state = Some(ClientState::new(
            self.client_id,
            self.keys.clone(),
            c.policy()?,
            noise,
            c.clip(),
            c.scale,
            derive_seed(self.cfg.seed, &[LABEL_CLIENT_RNG, u64::from(self.client_id)]),
        )?);
        self.rounds = c.rounds;
        Ok(())
    }

    fn state_mut(&mut self) -> Result<&mut ClientState> {
        self.state.as_mut().ok_or_else(|| Error::Protocol("no CONFIG received".into()))
    }

    /// Local training followed by protection; returns the UPDATE message.
    pub fn make_update(&mut self, round: u32) -> Result<Message> {
        let start = Instant::now();
        let mut trained = train_local(&self.arch, &self.params, &self.shard, &self.cfg.train_config(self.client_id, round))?;
        let clip = self.state_mut()?.clip;
        trained.clip(clip);
        let train = start.elapsed();

        let samples = self.shard.len() as u64;
        let state = self.state_mut()?;
        let update = client_prepare_update(state, round, &trained, samples)?;
        let timings = state.last_timings;
        let start = Instant::now();
        let mask = state.policy.mask(round, trained.len());
        let msg = Message::Update(UpdateMsg::from_update(&update, &mask)?);
        let transport = start.elapsed();
        self.logs.push(ClientRoundLog {
            round,
            millis: PhaseMillis {
                train: ms(train),
                encrypt: ms(timings.encrypt),
                obfuscate: ms(timings.obfuscate),
                transport: ms(transport),
                ..Default::default()
            },
            accuracy: None,
        });
        Ok(msg)
    }

    pub fn on_aggregate(&mut self, a: AggregateMsg) -> Result<()> {
        let start = Instant::now();
        let state = self.state.as_ref().ok_or_else(|| Error::Protocol("no CONFIG received".into()))?;
        let mask = state.policy.mask(a.round, self.params.len());
        let agg = a.into_result(&self.keys.pk, &mask)?;
        let transport = start.elapsed();
        let start = Instant::now();
        self.params = client_apply_aggregate(state, &agg, &self.params.shape)?;
        let apply = start.elapsed();
        let accuracy = match &self.test {
            Some(t) => Some(evaluate(&self.arch, &self.params, t)?),
            None => None,
        };
        let extra = std::mem::take(&mut self.pending_transport);
        let log = self
            .logs
            .iter_mut()
            .find(|l| l.round == agg.round)
            .ok_or_else(|| Error::Protocol(format!("aggregate for round {} without an update", agg.round)))?;
        log.millis.transport += ms(transport + extra);
        log.millis.apply += ms(apply);
        log.accuracy = accuracy;
        Ok(())
    }

    /// Adds time the driver spent framing and moving this client's bytes.
    pub fn add_transport_time(&mut self, d: Duration) {
        match self.logs.last_mut() {
            Some(l) => l.millis.transport += ms(d),
            None => self.pending_transport += d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Loopback,
    Tcp,
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loopback" => Ok(Channel::Loopback),
            "tcp" => Ok(Channel::Tcp),
            other => Err(Error::Parameter(format!("channel: unknown channel {other:?}"))),
        }
    }
}

/// Runs a whole session in this process.
pub fn run_session(cfg: &SessionConfig, channel: Channel) -> Result<SessionReport> {
    cfg.validate()?;
    let keys = ClientKeys::derive(cfg.key_bits, cfg.seed)?;
    run_session_with_keys(cfg, channel, &keys)
}

/// [`run_session`] with pre-derived keys, so repeated runs skip key generation.
pub fn run_session_with_keys(cfg: &SessionConfig, channel: Channel, keys: &ClientKeys) -> Result<SessionReport> {
    cfg.validate()?;
    let data = session_data(cfg)?;
    let test = Arc::new(data.test);
    let clients: Vec<ClientSession> = data
        .shards
        .into_iter()
        .enumerate()
        .map(|(k, shard)| ClientSession::new(k as u32, cfg, keys.clone(), shard, Some(Arc::clone(&test))))
        .collect();
    let server = ServerSession::new(keys.server_view(), cfg)?;
    let (server, clients) = match channel {
        Channel::Loopback => run_loopback(cfg, server, clients)?,
        Channel::Tcp => run_tcp_local(cfg, server, clients)?,
    };
    let initial = evaluate(&cfg.architecture(), &initial_params(cfg), &test)?;
    assemble_report(cfg, channel, Some(&server), &clients, initial)
}

/// Passes a message through a real frame encode/decode.
fn through_wire(msg: &Message) -> Result<(Message, usize, Duration)> {
    let start = Instant::now();
    let frame = encode_frame(msg)?;
    let mut d = FrameDecoder::new();
    d.push(&frame);
    let decoded = d.next_message()?.ok_or_else(|| Error::Protocol("loopback frame incomplete".into()))?;
    Ok((decoded, frame.len(), start.elapsed()))
}

fn run_loopback(
    cfg: &SessionConfig,
    mut server: ServerSession,
    mut clients: Vec<ClientSession>,
) -> Result<(ServerSession, Vec<ClientSession>)> {
    // Peer number k is client k.
    fn deliver(server: &mut ServerSession, clients: &mut [ClientSession], outs: Vec<(u32, Message)>) -> Result<()> {
        for (peer, msg) in outs {
            let (decoded, len, t) = through_wire(&msg)?;
            server.record_sent(&msg, len);
            let c = &mut clients[peer as usize];
            c.add_transport_time(t);
            match decoded {
                Message::Config(conf) => c.on_config(&conf)?,
                Message::Aggregate(a) => c.on_aggregate(a)?,
                Message::Done => c.completed = true,
                Message::Error { message, .. } => {
                    return Err(Error::Peer { peer: "server".into(), message });
                }
                other => return Err(Error::Protocol(format!("unexpected server message {other:?}"))),
            }
        }
        Ok(())
    }

    for k in 0..clients.len() {
        let (msg, len, t) = through_wire(&clients[k].hello())?;
        clients[k].add_transport_time(t);
        let outs = server.on_message(k as u32, msg, len)?;
        deliver(&mut server, &mut clients, outs)?;
    }
    let mut left = vec![false; clients.len()];
    for round in 0..cfg.rounds {
        for k in 0..clients.len() {
            if left[k] {
                continue;
            }
            if cfg.drops_at(k as u32, round) {
                left[k] = true;
                let outs = server.on_closed(k as u32)?;
                deliver(&mut server, &mut clients, outs)?;
                continue;
            }
            let update = clients[k].make_update(round)?;
            let (msg, len, t) = through_wire(&update)?;
            clients[k].add_transport_time(t);
            let outs = server.on_message(k as u32, msg, len)?;
            deliver(&mut server, &mut clients, outs)?;
        }
    }
    Ok((server, clients))
}

/// Drives a server session over an already-listening TCP handle until the
/// last round is answered.
pub fn serve_session(handle: &ServerHandle, mut server: ServerSession) -> Result<ServerSession> {
    let mut pending_error: Option<Error> = None;
    while !server.is_finished() {
        let outs = match handle.next_event()? {
            ServerEvent::Connected { .. } => continue,
            ServerEvent::Message { peer, msg, frame_len } => match server.on_message(peer, msg, frame_len) {
                Ok(outs) => outs,
                Err(e) => {
                    let code = if matches!(e, Error::KeyMismatch(_)) { ERR_KEY_MISMATCH } else { ERR_PROTOCOL };
                    let _ = handle.send(peer, &Message::Error { code, message: e.to_string() });
                    handle.close(peer);
                    if server.is_finished() {
                        pending_error = Some(e);
                    }
                    continue;
                }
            },
            ServerEvent::Closed { peer, .. } => server.on_closed(peer)?,
        };
        for (peer, msg) in outs {
            let start = Instant::now();
            if let Ok(len) = handle.send(peer, &msg) {
                server.record_sent(&msg, len);
            }
            if let Some(log) = server.logs.last_mut() {
                log.transport += start.elapsed();
            }
        }
    }
    match pending_error {
        Some(e) => Err(e),
        None => Ok(server),
    }
}

/// Runs one client against a TCP server. Returns the finished client state;
/// a client scheduled to drop out closes its connection and returns early.
pub fn run_tcp_client<A: ToSocketAddrs>(addr: A, mut client: ClientSession) -> Result<ClientSession> {
    let mut conn = Connection::connect(addr)?;
    let start = Instant::now();
    conn.send(&client.hello())?;
    client.add_transport_time(start.elapsed());
    match conn.recv()?.0 {
        Message::Config(c) => client.on_config(&c)?,
        Message::Error { message, .. } => return Err(Error::Peer { peer: conn.peer().into(), message }),
        other => return Err(Error::Protocol(format!("expected CONFIG, got {other:?}"))),
    }
    for round in 0..client.rounds() {
        if client.cfg.drops_at(client.client_id, round) {
            conn.close();
            return Ok(client);
        }
        let update = client.make_update(round)?;
        let start = Instant::now();
        conn.send(&update)?;
        client.add_transport_time(start.elapsed());
        match conn.recv()?.0 {
            Message::Aggregate(a) => client.on_aggregate(a)?,
            Message::Error { message, .. } => return Err(Error::Peer { peer: conn.peer().into(), message }),
            other => return Err(Error::Protocol(format!("expected AGGREGATE, got {other:?}"))),
        }
    }
    match conn.recv()?.0 {
        Message::Done => client.completed = true,
        other => return Err(Error::Protocol(format!("expected DONE, got {other:?}"))),
    }
    Ok(client)
}

fn run_tcp_local(
    _cfg: &SessionConfig,
    server: ServerSession,
    clients: Vec<ClientSession>,
) -> Result<(ServerSession, Vec<ClientSession>)> {
    let handle = serve("127.0.0.1:0")?;
    let addr = handle.local_addr();
    thread::scope(|s| {
        let srv = s.spawn(move || serve_session(&handle, server));
        let workers: Vec<_> = clients.into_iter().map(|c| s.spawn(move || run_tcp_client(addr, c))).collect();
        let mut done = Vec::new();
        let mut first_err = None;
        for w in workers {
            match w.join().expect("client thread panicked") {
                Ok(c) => done.push(c),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        let server = srv.join().expect("server thread panicked");
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok((server?, done))
    })
}

/// Merges server and client logs into one report. `server` may be absent
/// when only client roles ran in this process.
pub fn assemble_report(
    cfg: &SessionConfig,
    channel: Channel,
    server: Option<&ServerSession>,
    clients: &[ClientSession],
    initial_accuracy: f64,
) -> Result<SessionReport> {
    let mut rounds = Vec::new();
    let n_rounds = match server {
        Some(s) => s.logs.len() as u32,
        None => clients.iter().map(|c| c.logs.iter().filter(|l| l.accuracy.is_some()).count() as u32).max().unwrap_or(0),
    };
    let mut accuracy = initial_accuracy;
    for round in 0..n_rounds {
        let mut millis = PhaseMillis::default();
        let mut acc = None;
        let mut reporters = Vec::new();
        let mut sorted: Vec<&ClientSession> = clients.iter().collect();
        sorted.sort_by_key(|c| c.client_id);
        for c in sorted {
            if let Some(l) = c.logs.iter().find(|l| l.round == round) {
                millis.add(&l.millis);
                reporters.push(c.client_id);
                if acc.is_none() {
                    acc = l.accuracy;
                }
            }
        }
        let (wire_bytes, ciphertext_bytes, participants, digest) = match server {
            Some(s) => {
                let log = &s.logs[round as usize];
                millis.aggregate += ms(log.aggregate);
                millis.transport += ms(log.transport);
                let mut bytes = Vec::new();
                for f in log.update_digests.values() {
                    bytes.extend_from_slice(f);
                }
                bytes.extend_from_slice(&log.aggregate_frame);
                (log.wire_bytes, log.ciphertext_bytes, log.participants.clone(), format!("{:016x}", fnv1a64(&bytes)))
            }
            None => (0, 0, reporters, String::new()),
        };
        if let Some(a) = acc {
            accuracy = a;
        }
        let dropped: Vec<u32> =
            (0..cfg.clients as u32).filter(|c| !participants.contains(c)).collect();
        rounds.push(RoundReport {
            round,
            millis,
            wire_bytes,
            ciphertext_bytes,
            accuracy,
            partial: !dropped.is_empty(),
            participants,
            dropped,
            payload_digest: digest,
        });
    }
    let finisher = clients
        .iter()
        .filter(|c| c.completed)
        .min_by_key(|c| c.client_id)
        .or_else(|| clients.iter().min_by_key(|c| c.client_id));
    let final_params = finisher.map(|c| c.params.values.clone()).unwrap_or_default();
    let round_bytes: u64 = rounds.iter().map(|r| r.wire_bytes).sum();
    let handshake_bytes = server.map_or(0, |s| s.handshake_bytes);
    let final_accuracy = if n_rounds == 0 { initial_accuracy } else { accuracy };
    Ok(SessionReport {
        channel: match channel {
            Channel::Loopback => "loopback".into(),
            Channel::Tcp => "tcp".into(),
        },
        config: cfg.to_pairs(),
        param_count: cfg.architecture().param_count(),
        initial_accuracy,
        final_accuracy,
        rounds,
        handshake_bytes,
        total_bytes: round_bytes + handshake_bytes,
        final_params,
    })
}

/// The same training schedule as [`run_session`] with plaintext FedAvg in
/// place of the protocol. Returns the final parameters and per-round accuracy.
pub fn run_plain_reference(cfg: &SessionConfig) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    let data = session_data(cfg)?;
    let arch = cfg.architecture();
    let mut params = initial_params(cfg);
    let mut active: Vec<bool> = vec![true; cfg.clients];
    let mut accuracies = Vec::new();
    for round in 0..cfg.rounds {
        let mut ws = Vec::new();
        let mut counts = Vec::new();
        for (k, shard) in data.shards.iter().enumerate() {
            if !active[k] || cfg.drops_at(k as u32, round) {
                active[k] = false;
                continue;
            }
            let mut p = train_local(&arch, &params, shard, &cfg.train_config(k as u32, round))?;
            p.clip(cfg.clip);
            ws.push(p.values);
            counts.push(shard.len() as u64);
        }
        if ws.is_empty() {
            return Err(Error::Protocol(format!("all clients left before round {round}")));
        }
        params = ModelParams { values: fedavg_plain(&ws, &counts)?, shape: params.shape };
        accuracies.push(evaluate(&arch, &params, &data.test)?);
    }
    Ok((params, accuracies))
}

/// Short human-readable summary.
pub fn summarize(report: &SessionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} session: {} weights, {} rounds, accuracy {:.4} -> {:.4}, {} bytes on the wire",
        report.channel,
        report.param_count,
        report.rounds.len(),
        report.initial_accuracy,
        report.final_accuracy,
        report.total_bytes
    );
    for r in &report.rounds {
        let _ = writeln!(
            s,
            "  round {}: encrypt {:.1} ms, obfuscate {:.1} ms, aggregate {:.1} ms, apply {:.1} ms, accuracy {:.4}{}",
            r.round,
            r.millis.encrypt,
            r.millis.obfuscate,
            r.millis.aggregate,
            r.millis.apply,
            r.accuracy,
            if r.partial { format!(" (dropped {:?})", r.dropped) } else { String::new() }
        );
    }
    s
}
