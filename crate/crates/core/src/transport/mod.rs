//! Length-prefixed binary frames carrying hex-encoded crypto payloads.
//!
//! Frame: `len: u32 BE` (= 1 + body length), `type: u8`, body. All integers
//! in bodies are big-endian. See `docs/wire.md` for worked examples.

pub mod tcp;

use crate::error::{Error, Result};
use crate::protocol::{
    interleave, split_blocks, AggregateResult, RoundUpdate, SelectionMode, SelectionPolicy,
};
use crate::crypto_he::PublicKey;

pub const MAX_FRAME: usize = 64 * 1024 * 1024;

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_CONFIG: u8 = 0x02;
pub const MSG_UPDATE: u8 = 0x03;
pub const MSG_AGGREGATE: u8 = 0x04;
pub const MSG_DONE: u8 = 0x05;
pub const MSG_ERROR: u8 = 0x7f;

/// Codes carried in ERROR frames.
pub const ERR_FRAME_TOO_LARGE: u8 = 1;
pub const ERR_PROTOCOL: u8 = 2;
pub const ERR_KEY_MISMATCH: u8 = 3;
pub const ERR_INTERNAL: u8 = 4;

/// `epsilon` value on the wire meaning "no noise".
pub const EPSILON_INFINITE: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMsg {
    pub n_params: u32,
    /// `enc_pct * 100`, rounded.
    pub enc_pct_x100: u32,
    pub mode: SelectionMode,
    pub selection_seed: u64,
    /// Epsilon in micro-units, or [`EPSILON_INFINITE`].
    pub epsilon_micro: u64,
    pub scale: u64,
    pub clip_micro: u64,
    pub rounds: u32,
    pub public_key_hex: String,
    pub scramble_key_hex: String,
}

impl ConfigMsg {
    pub fn policy(&self) -> Result<SelectionPolicy> {
        SelectionPolicy::new(f64::from(self.enc_pct_x100) / 100.0, self.mode, self.selection_seed)
    }

    pub fn epsilon(&self) -> f64 {
        if self.epsilon_micro == EPSILON_INFINITE {
            f64::INFINITY
        } else {
            self.epsilon_micro as f64 / 1e6
        }
    }

    pub fn clip(&self) -> f64 {
        self.clip_micro as f64 / 1e6
    }
}

/// Converts a real to micro-units, mapping infinity to [`EPSILON_INFINITE`].
pub fn to_micro(x: f64) -> u64 {
    if x.is_infinite() {
        EPSILON_INFINITE
    } else {
        (x * 1e6).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateMsg {
    pub round: u32,
    pub client_id: u32,
    pub sample_count: u64,
    pub num_enc: u32,
    /// One block per weight, in index order.
    pub blocks: Vec<Vec<u8>>,
}

impl UpdateMsg {
    pub fn from_update(u: &RoundUpdate, mask: &[bool]) -> Result<Self> {
        Ok(UpdateMsg {
            round: u.round,
            client_id: u.client_id,
            sample_count: u.sample_count,
            num_enc: u.num_enc,
            blocks: interleave(&u.enc_part, &u.obf_part, mask)?,
        })
    }

    pub fn into_update(self, pk: &PublicKey, mask: &[bool]) -> Result<RoundUpdate> {
        let (enc_part, obf_part) = split_blocks(pk, self.blocks, mask)?;
        if enc_part.len() != self.num_enc as usize {
            return Err(Error::Protocol(format!(
                "client {} declared {} ciphertexts, selection has {}",
                self.client_id,
                self.num_enc,
                enc_part.len()
            )));
        }
        Ok(RoundUpdate {
            round: self.round,
            client_id: self.client_id,
            sample_count: self.sample_count,
            num_enc: self.num_enc,
            enc_part,
            obf_part,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateMsg {
    pub round: u32,
    pub total_samples: u64,
    pub num_enc: u32,
    pub blocks: Vec<Vec<u8>>,
}

impl AggregateMsg {
    pub fn from_result(a: &AggregateResult, mask: &[bool]) -> Result<Self> {
        Ok(AggregateMsg {
            round: a.round,
            total_samples: a.total_samples,
            num_enc: a.enc_part.len() as u32,
            blocks: interleave(&a.enc_part, &a.obf_part, mask)?,
        })
    }

    pub fn into_result(self, pk: &PublicKey, mask: &[bool]) -> Result<AggregateResult> {
        let (enc_part, obf_part) = split_blocks(pk, self.blocks, mask)?;
        if enc_part.len() != self.num_enc as usize {
            return Err(Error::Protocol("aggregate partition does not match selection".into()));
        }
        Ok(AggregateResult { round: self.round, total_samples: self.total_samples, enc_part, obf_part })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { client_id: u32 },
    Config(ConfigMsg),
    Update(UpdateMsg),
    Aggregate(AggregateMsg),
    Done,
    Error { code: u8, message: String },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello { .. } => MSG_HELLO,
            Message::Config(_) => MSG_CONFIG,
            Message::Update(_) => MSG_UPDATE,
            Message::Aggregate(_) => MSG_AGGREGATE,
            Message::Done => MSG_DONE,
            Message::Error { .. } => MSG_ERROR,
        }
    }

    /// Hex characters of ciphertext payload carried by this message.
    pub fn ciphertext_hex_len(&self) -> u64 {
        let (num_enc, blocks) = match self {
            Message::Update(u) => (u.num_enc, &u.blocks),
            Message::Aggregate(a) => (a.num_enc, &a.blocks),
            _ => return 0,
        };
        let width = blocks.first().map_or(0, Vec::len) as u64;
        2 * width * u64::from(num_enc)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_blocks(out: &mut Vec<u8>, blocks: &[Vec<u8>]) {
    for b in blocks {
        put_str(out, &hex::encode(b));
    }
}

fn encode_body(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Hello { client_id } => out.extend_from_slice(&client_id.to_be_bytes()),
        Message::Config(c) => {
            out.extend_from_slice(&c.n_params.to_be_bytes());
            out.extend_from_slice(&c.enc_pct_x100.to_be_bytes());
            out.push(match c.mode {
                SelectionMode::Prefix => 0,
                SelectionMode::SeededUniform => 1,
            });
            out.extend_from_slice(&c.selection_seed.to_be_bytes());
            out.extend_from_slice(&c.epsilon_micro.to_be_bytes());
            out.extend_from_slice(&c.scale.to_be_bytes());
            out.extend_from_slice(&c.clip_micro.to_be_bytes());
            out.extend_from_slice(&c.rounds.to_be_bytes());
            put_str(&mut out, &c.public_key_hex);
            put_str(&mut out, &c.scramble_key_hex);
        }
        Message::Update(u) => {
            out.extend_from_slice(&u.round.to_be_bytes());
            out.extend_from_slice(&u.client_id.to_be_bytes());
            out.extend_from_slice(&u.sample_count.to_be_bytes());
            out.extend_from_slice(&u.num_enc.to_be_bytes());
            put_blocks(&mut out, &u.blocks);
        }
        Message::Aggregate(a) => {
            out.extend_from_slice(&a.round.to_be_bytes());
            out.extend_from_slice(&a.total_samples.to_be_bytes());
            out.extend_from_slice(&a.num_enc.to_be_bytes());
            put_blocks(&mut out, &a.blocks);
        }
        Message::Done => {}
        Message::Error { code, message } => {
            out.push(*code);
            out.extend_from_slice(message.as_bytes());
        }
    }
    out
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let body = encode_body(msg);
    let len = body.len() + 1;
    if len > MAX_FRAME {
        return Err(Error::FrameTooLarge { len, max: MAX_FRAME });
    }
    let mut out = Vec::with_capacity(4 + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(msg.msg_type());
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Protocol("truncated message body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Protocol("string is not UTF-8".into()))
    }

    fn blocks(&mut self) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        while !self.done() {
            let s = self.string()?;
            if s.len() % 2 != 0 {
                return Err(Error::Protocol("hex payload has odd length".into()));
            }
            out.push(hex::decode(&s).map_err(|e| Error::Protocol(format!("bad hex payload: {e}")))?);
        }
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn finish(&self) -> Result<()> {
        if !self.done() {
            return Err(Error::Protocol(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn decode_body(msg_type: u8, body: &[u8]) -> Result<Message> {
    let mut r = Reader { buf: body, pos: 0 };
    let msg = match msg_type {
        MSG_HELLO => Message::Hello { client_id: r.u32()? },
        MSG_CONFIG => Message::Config(ConfigMsg {
            n_params: r.u32()?,
            enc_pct_x100: r.u32()?,
            mode: match r.u8()? {
                0 => SelectionMode::Prefix,
                1 => SelectionMode::SeededUniform,
                m => return Err(Error::Protocol(format!("unknown selection mode {m}"))),
            },
            selection_seed: r.u64()?,
            epsilon_micro: r.u64()?,
            scale: r.u64()?,
            clip_micro: r.u64()?,
            rounds: r.u32()?,
            public_key_hex: r.string()?,
            scramble_key_hex: r.string()?,
        }),
        MSG_UPDATE => Message::Update(UpdateMsg {
            round: r.u32()?,
            client_id: r.u32()?,
            sample_count: r.u64()?,
            num_enc: r.u32()?,
            blocks: r.blocks()?,
        }),
        MSG_AGGREGATE => Message::Aggregate(AggregateMsg {
            round: r.u32()?,
            total_samples: r.u64()?,
            num_enc: r.u32()?,
            blocks: r.blocks()?,
        }),
        MSG_DONE => Message::Done,
        MSG_ERROR => {
            let code = r.u8()?;
            let message = String::from_utf8_lossy(r.take(body.len() - 1)?).into_owned();
            Message::Error { code, message }
        }
        t => return Err(Error::Protocol(format!("unknown message type 0x{t:02x}"))),
    };
    r.finish()?;
    Ok(msg)
}

/// Decodes one frame from the front of `buf`. `Ok(None)` means more bytes
/// are needed; otherwise returns the message and the bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Message, usize)>> {
    decode_frame_limited(buf, MAX_FRAME)
}

fn decode_frame_limited(buf: &[u8], max: usize) -> Result<Option<(Message, usize)>> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if len > max {
        return Err(Error::FrameTooLarge { len, max });
    }
    if len == 0 {
        return Err(Error::Protocol("frame without a type byte".into()));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let msg = decode_body(buf[4], &buf[5..4 + len])?;
    Ok(Some((msg, 4 + len)))
}

/// Incremental decoder for a byte stream.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    max: usize,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        FrameDecoder::new()
    }
}

impl FrameDecoder {
    pub fn new() -> Self {
        FrameDecoder { buf: Vec::new(), max: MAX_FRAME }
    }

    pub fn with_max(max: usize) -> Self {
        FrameDecoder { buf: Vec::new(), max }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, or `Ok(None)` if the buffer holds only part of one.
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        Ok(self.next_frame()?.map(|(m, _)| m))
    }

    /// Like [`next_message`](Self::next_message), also returning the frame size.
    pub fn next_frame(&mut self) -> Result<Option<(Message, usize)>> {
        match decode_frame_limited(&self.buf, self.max)? {
            Some((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some((msg, used)))
            }
            None => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
