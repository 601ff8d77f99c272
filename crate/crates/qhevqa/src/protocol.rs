//! Client and server roles for delegated training, exchanged as framed
//! messages over an in-process channel or localhost TCP.
//!
//! Frame layout: 4-byte little-endian payload length, version byte, kind
//! byte, then the payload as UTF-8 JSON.

use crate::classical_he::{Ciphertext, EvalKey, HeError, KeyChain, KeySwitchKey};
use crate::pauli_frame::PauliKey;
use crate::qhe_core::{self, CipherState, ClientKeys, QheError, QheEvalKey};
use crate::rsp_gadget::{
    couple, plan_coupling, recover_theta, rsp_server, sample_trapdoor, Gadget, GadgetClassical, GadgetError,
    GadgetSecret, PublicFunction, RspMode,
};
use crate::simulator::{Basis, Gate, PauliString, SimError, StateVector, C64};
use crate::skdecomp::{Decomposer, SkError, DEFAULT_BASE_LENGTH, DEFAULT_DEPTH};
use crate::vqa::{
    self, client_window, server_window, shadow_circuit, FeatureEvaluator, LabeledDataset, Mode, ShadowModel, Theta,
    TrainConfig, VqaError, WindowResult, NUM_ANGLES,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use thiserror::Error;

pub const VERSION: u8 = 1;
pub const MAX_FRAME: usize = 16 << 20;
pub const HEADER_LEN: usize = 6;
pub const DEFAULT_PORT: u16 = 7913;
/// Largest register the server accepts in `EncInput`.
pub const MAX_REMOTE_QUBITS: usize = 12;
/// Largest `n + mu` the server accepts for a preparation round.
pub const MAX_RSP_WIDTH: usize = 12;
pub const MAX_SHOTS: usize = 100_000;

pub const CIRCUIT_SHADOW_EXACT: &str = "shadow-exact";
pub const CIRCUIT_SHADOW_SYNTH: &str = "shadow-synth";
pub const CIRCUIT_T_DEMO: &str = "t-demo";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the limit")]
    Oversize(usize),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("truncated frame")]
    Truncated,
    #[error("connection poisoned by an earlier framing error")]
    Poisoned,
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer error {code}: {text}")]
    Remote { code: String, text: String },
    #[error("unexpected message {0:?}")]
    Unexpected(Kind),
    #[error("illegal phase transition from {0:?} on {1:?}")]
    Phase(Phase, Kind),
    #[error(transparent)]
    Vqa(#[from] VqaError),
    #[error(transparent)]
    Qhe(#[from] QheError),
    #[error(transparent)]
    Gadget(#[from] GadgetError),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sk(#[from] SkError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Kind {
    Hello = 1,
    Announce,
    RspCommit,
    RspBasis,
    RspOutcome,
    CoupleInstr,
    GadgetClassical,
    EncInput,
    RunRequest,
    ShotResults,
    EncKeysUpdate,
    ParamUpdate,
    Done,
    Error,
}

impl Kind {
    pub const ALL: [Kind; 14] = [
        Kind::Hello,
        Kind::Announce,
        Kind::RspCommit,
        Kind::RspBasis,
        Kind::RspOutcome,
        Kind::CoupleInstr,
        Kind::GadgetClassical,
        Kind::EncInput,
        Kind::RunRequest,
        Kind::ShotResults,
        Kind::EncKeysUpdate,
        Kind::ParamUpdate,
        Kind::Done,
        Kind::Error,
    ];

    pub fn from_byte(b: u8) -> Option<Kind> {
        Kind::ALL.get((b as usize).checked_sub(1)?).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub version: u8,
    pub mode: Mode,
    /// Synthesis accuracy for `shadow-synth` runs.
    pub epsilon: f64,
    pub theta: Theta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Announce {
    pub ansatz: String,
    pub n_qsc: usize,
    pub gates: Vec<String>,
    pub observables: Vec<String>,
    pub circuits: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RspCommit {
    pub y: u64,
}

/// The public function travels with the measurement bases so the server can
/// run the whole round after one message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RspBasis {
    pub f: PublicFunction,
    pub alpha: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RspOutcome {
    pub b: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupleInstr {
    pub level: u32,
    /// Pool indices `(s, t)` of pair 0 and pair 1.
    pub pairs: [(usize, usize); 2],
    pub label_a: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GadgetClassicalMsg {
    pub level: u32,
    pub classical: GadgetClassical,
    pub evk: EvalKey,
    pub evk_next: EvalKey,
    pub switch: KeySwitchKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncInput {
    /// `(re, im)` per basis state.
    pub amplitudes: Vec<(f64, f64)>,
    pub keys: Vec<(Ciphertext, Ciphertext)>,
    pub level: u32,
    pub evk: EvalKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub circuit: String,
    pub shots: usize,
    pub window: usize,
    /// Replaces angle `l` with the given value for this run only.
    pub shift: Option<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotResults {
    pub expectations: Vec<f64>,
    /// Raw outcome bits, one list per hypothesis (or a single list).
    pub outcomes: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncKeysUpdate {
    pub keys: Vec<(Ciphertext, Ciphertext)>,
    pub level: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamUpdate {
    pub theta: Theta,
    pub w: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello(Hello),
    Announce(Announce),
    RspCommit(RspCommit),
    RspBasis(RspBasis),
    RspOutcome(RspOutcome),
    CoupleInstr(CoupleInstr),
    GadgetClassical(Box<GadgetClassicalMsg>),
    EncInput(EncInput),
    RunRequest(RunRequest),
    ShotResults(ShotResults),
    EncKeysUpdate(EncKeysUpdate),
    ParamUpdate(ParamUpdate),
    Done,
    Error(ErrorMsg),
}

impl Message {
    pub fn kind(&self) -> Kind {
        match self {
            Message::Hello(_) => Kind::Hello,
            Message::Announce(_) => Kind::Announce,
            Message::RspCommit(_) => Kind::RspCommit,
            Message::RspBasis(_) => Kind::RspBasis,
            Message::RspOutcome(_) => Kind::RspOutcome,
            Message::CoupleInstr(_) => Kind::CoupleInstr,
            Message::GadgetClassical(_) => Kind::GadgetClassical,
            Message::EncInput(_) => Kind::EncInput,
            Message::RunRequest(_) => Kind::RunRequest,
            Message::ShotResults(_) => Kind::ShotResults,
            Message::EncKeysUpdate(_) => Kind::EncKeysUpdate,
            Message::ParamUpdate(_) => Kind::ParamUpdate,
            Message::Done => Kind::Done,
            Message::Error(_) => Kind::Error,
        }
    }

    pub fn error(code: &str, text: impl Into<String>) -> Message {
        Message::Error(ErrorMsg { code: code.into(), text: text.into() })
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

fn from_json<T: DeserializeOwned>(b: &[u8]) -> Result<T> {
    serde_json::from_slice(b).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

fn payload(msg: &Message) -> Result<Vec<u8>> {
    match msg {
        Message::Hello(m) => to_json(m),
        Message::Announce(m) => to_json(m),
        Message::RspCommit(m) => to_json(m),
        Message::RspBasis(m) => to_json(m),
        Message::RspOutcome(m) => to_json(m),
        Message::CoupleInstr(m) => to_json(m),
        Message::GadgetClassical(m) => to_json(m),
        Message::EncInput(m) => to_json(m),
        Message::RunRequest(m) => to_json(m),
        Message::ShotResults(m) => to_json(m),
        Message::EncKeysUpdate(m) => to_json(m),
        Message::ParamUpdate(m) => to_json(m),
        Message::Done => to_json(&serde_json::Value::Null),
        Message::Error(m) => to_json(m),
    }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let body = payload(msg)?;
    if body.len() + HEADER_LEN > MAX_FRAME {
        return Err(ProtocolError::Oversize(body.len() + HEADER_LEN));
    }
    let mut out = Vec::with_capacity(body.len() + HEADER_LEN);
    out.extend((body.len() as u32).to_le_bytes());
    out.push(VERSION);
    out.push(msg.kind() as u8);
    out.extend(body);
    Ok(out)
}

fn decode_payload(kind: Kind, body: &[u8]) -> Result<Message> {
    Ok(match kind {
        Kind::Hello => Message::Hello(from_json(body)?),
        Kind::Announce => Message::Announce(from_json(body)?),
        Kind::RspCommit => Message::RspCommit(from_json(body)?),
        Kind::RspBasis => Message::RspBasis(from_json(body)?),
        Kind::RspOutcome => Message::RspOutcome(from_json(body)?),
        Kind::CoupleInstr => Message::CoupleInstr(from_json(body)?),
        Kind::GadgetClassical => Message::GadgetClassical(Box::new(from_json(body)?)),
        Kind::EncInput => Message::EncInput(from_json(body)?),
        Kind::RunRequest => Message::RunRequest(from_json(body)?),
        Kind::ShotResults => Message::ShotResults(from_json(body)?),
        Kind::EncKeysUpdate => Message::EncKeysUpdate(from_json(body)?),
        Kind::ParamUpdate => Message::ParamUpdate(from_json(body)?),
        Kind::Done => {
            from_json::<()>(body)?;
            Message::Done
        }
        Kind::Error => Message::Error(from_json(body)?),
    })
}

/// Checks a 6-byte header; returns the payload length and kind.
fn parse_header(h: &[u8]) -> Result<(usize, Kind)> {
    let len = u32::from_le_bytes([h[0], h[1], h[2], h[3]]) as usize;
    if len + HEADER_LEN > MAX_FRAME {
        return Err(ProtocolError::Oversize(len + HEADER_LEN));
    }
    if h[4] != VERSION {
        return Err(ProtocolError::Version(h[4]));
    }
    let kind = Kind::from_byte(h[5]).ok_or(ProtocolError::UnknownKind(h[5]))?;
    Ok((len, kind))
}

/// Decodes one frame from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated);
    }
    let (len, kind) = parse_header(&bytes[..HEADER_LEN])?;
    let body = bytes.get(HEADER_LEN..HEADER_LEN + len).ok_or(ProtocolError::Truncated)?;
    Ok((decode_payload(kind, body)?, HEADER_LEN + len))
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Message> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..])? {
            0 if got == 0 => return Err(ProtocolError::Closed),
            0 => return Err(ProtocolError::Truncated),
            k => got += k,
        }
    }
    let (len, kind) = parse_header(&header)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
        _ => ProtocolError::Io(e),
    })?;
    decode_payload(kind, &body)
}

pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
}

/// In-process endpoint; messages (and registers) are handed over directly.
pub struct ChannelTransport {
    tx: Sender<Message>,
    rx: Receiver<Message>,
}

pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, a_rx) = channel();
    let (b_tx, b_rx) = channel();
    (ChannelTransport { tx: a_tx, rx: b_rx }, ChannelTransport { tx: b_tx, rx: a_rx })
}

impl Transport for ChannelTransport {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.tx.send(msg.clone()).map_err(|_| ProtocolError::Closed)
    }

    fn recv(&mut self) -> Result<Message> {
        self.rx.recv().map_err(|_| ProtocolError::Closed)
    }
}

/// Framed TCP endpoint. A framing error poisons the connection.
pub struct TcpTransport {
    stream: TcpStream,
    poisoned: bool,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> TcpTransport {
        let _ = stream.set_nodelay(true);
        TcpTransport { stream, poisoned: false }
    }

    pub fn connect(addr: &str) -> Result<TcpTransport> {
        Ok(TcpTransport::new(TcpStream::connect(addr)?))
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let bytes = encode(msg)?;
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        if self.poisoned {
            return Err(ProtocolError::Poisoned);
        }
        let r = read_frame(&mut self.stream);
        if matches!(
            r,
            Err(ProtocolError::Truncated
                | ProtocolError::Oversize(_)
                | ProtocolError::Version(_)
                | ProtocolError::UnknownKind(_)
                | ProtocolError::Malformed(_))
        ) {
            self.poisoned = true;
        }
        r
    }
}

/// `host:port` from `QHEVQA_HOST` / `QHEVQA_PORT`, defaulting to
/// `127.0.0.1:7913`.
pub fn default_addr() -> String {
    let host = std::env::var("QHEVQA_HOST").unwrap_or_else(|_| "127.0.0.1".into());
    let port = std::env::var("QHEVQA_PORT").ok().and_then(|p| p.parse::<u16>().ok()).unwrap_or(DEFAULT_PORT);
    format!("{host}:{port}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Handshake,
    Keygen,
    Rsp,
    Evaluating,
    Training,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Client,
    Server,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub role: Role,
    pub phase: Phase,
    pub gadget_budget: usize,
    pub key_level: u32,
}

/// Allowed single steps; staying in place is always allowed.
pub const LEGAL_STEPS: [(Phase, Phase); 5] = [
    (Phase::Handshake, Phase::Keygen),
    (Phase::Keygen, Phase::Rsp),
    (Phase::Rsp, Phase::Evaluating),
    (Phase::Evaluating, Phase::Training),
    (Phase::Training, Phase::Evaluating),
];

pub fn is_legal_step(from: Phase, to: Phase) -> bool {
    from == to || to == Phase::Done || LEGAL_STEPS.contains(&(from, to))
}

/// Phases visited when the server receives `kind` in `phase`.
pub fn transition(phase: Phase, kind: Kind) -> std::result::Result<Vec<Phase>, (Phase, Kind)> {
    use Phase::*;
    let path = match (phase, kind) {
        (Done, _) => return Err((phase, kind)),
        (_, Kind::Done | Kind::Error) => vec![Done],
        (Handshake, Kind::Hello) => vec![Keygen],
        (Keygen, Kind::RspBasis | Kind::CoupleInstr | Kind::GadgetClassical) => vec![Rsp],
        (Rsp | Evaluating | Training, Kind::RspBasis | Kind::CoupleInstr | Kind::GadgetClassical) => vec![phase],
        (Keygen, Kind::EncInput) => vec![Rsp, Evaluating],
        (Rsp | Evaluating | Training, Kind::EncInput) => vec![Evaluating],
        (Evaluating, Kind::RunRequest) => vec![Evaluating],
        (Evaluating | Training, Kind::ParamUpdate) => vec![Training],
        _ => return Err((phase, kind)),
    };
    Ok(path)
}

/// Outcome of handling one message.
#[derive(Debug, Default)]
pub struct Reply {
    pub messages: Vec<Message>,
    pub close: bool,
}

impl Reply {
    fn send(messages: Vec<Message>) -> Reply {
        Reply { messages, close: false }
    }

    fn fail(code: &str, text: impl Into<String>) -> Reply {
        Reply { messages: vec![Message::error(code, text)], close: true }
    }
}

/// One server session. Holds only public data, padded registers, encrypted
/// keys and prepared qubits.
pub struct ServerSession {
    pub state: SessionState,
    rng: ChaCha8Rng,
    pool: Vec<StateVector>,
    pending: Option<(u32, usize, Vec<StateVector>)>,
    ek: QheEvalKey,
    cipher: Option<CipherState>,
    mode: Mode,
    decomposer: Option<Decomposer>,
    pub params: Option<ParamUpdate>,
    theta: Theta,
    /// Every message received, when auditing is on.
    pub audit: Option<Vec<Message>>,
}

pub fn announce() -> Announce {
    Announce {
        ansatz: "shadow: RX RY RX per wire, CNOT(v-1,v) CNOT(v,v-1), RY per wire".into(),
        n_qsc: vqa::N_QSC,
        gates: ["H", "P", "X", "Z", "CNOT", "CZ", "T", "Tdg", "RX", "RY"].map(String::from).to_vec(),
        observables: vec!["XX".into()],
        circuits: [CIRCUIT_SHADOW_EXACT, CIRCUIT_SHADOW_SYNTH, CIRCUIT_T_DEMO].map(String::from).to_vec(),
    }
}

impl ServerSession {
    pub fn new(rng: ChaCha8Rng) -> ServerSession {
        ServerSession {
            state: SessionState { role: Role::Server, phase: Phase::Handshake, gadget_budget: 0, key_level: 0 },
            rng,
            pool: Vec::new(),
            pending: None,
            ek: QheEvalKey::default(),
            cipher: None,
            mode: Mode::DelegatedExactGates,
            decomposer: None,
            params: None,
            theta: [[0.0; 4]; 2],
            audit: None,
        }
    }

    pub fn with_audit(mut self) -> ServerSession {
        self.audit = Some(Vec::new());
        self
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn handle(&mut self, msg: Message) -> Reply {
        if let Some(log) = self.audit.as_mut() {
            log.push(msg.clone());
        }
        let kind = msg.kind();
        let path = match transition(self.state.phase, kind) {
            Ok(p) => p,
            Err(_) => {
                let code = if matches!(
                    kind,
                    Kind::Announce | Kind::RspCommit | Kind::RspOutcome | Kind::ShotResults | Kind::EncKeysUpdate
                ) {
                    "unexpected"
                } else {
                    "phase"
                };
                self.state.phase = Phase::Done;
                return Reply::fail(code, format!("{kind:?} not allowed in {:?}", self.state.phase));
            }
        };
        let reply = match msg {
            Message::Hello(h) => self.on_hello(h),
            Message::RspBasis(b) => self.on_rsp(b),
            Message::CoupleInstr(c) => self.on_couple(c),
            Message::GadgetClassical(g) => self.on_gadget(*g),
            Message::EncInput(e) => self.on_input(e),
            Message::RunRequest(r) => self.on_run(r),
            Message::ParamUpdate(p) => self.on_params(p),
            Message::Done => Ok(Reply { messages: vec![Message::Done], close: true }),
            Message::Error(_) => Ok(Reply { messages: Vec::new(), close: true }),
            _ => Err(Reply::fail("unexpected", format!("{kind:?}"))),
        };
        let reply = reply.unwrap_or_else(|r| r);
        if reply.close {
            self.state.phase = Phase::Done;
        } else if let Some(last) = path.last() {
            self.state.phase = *last;
        }
        self.state.gadget_budget = self.ek.remaining(self.state.key_level);
        reply
    }

    fn on_hello(&mut self, h: Hello) -> std::result::Result<Reply, Reply> {
        if h.version != VERSION {
            return Err(Reply::fail("version", format!("version {} unsupported", h.version)));
        }
        if !h.theta.iter().flatten().all(|t| t.is_finite()) {
            return Err(Reply::fail("params", "non-finite angle"));
        }
        if h.mode == Mode::DelegatedFaithful {
            if !(h.epsilon > 0.0 && h.epsilon < 1.0) {
                return Err(Reply::fail("params", "epsilon must lie in (0, 1)"));
            }
            let d = Decomposer::new(DEFAULT_BASE_LENGTH, DEFAULT_DEPTH, h.epsilon)
                .map_err(|e| Reply::fail("params", e.to_string()))?;
            self.decomposer = Some(d);
        }
        self.mode = h.mode;
        self.theta = h.theta;
        Ok(Reply::send(vec![Message::Announce(announce())]))
    }

    fn on_rsp(&mut self, b: RspBasis) -> std::result::Result<Reply, Reply> {
        if b.f.n + b.f.mu > MAX_RSP_WIDTH {
            return Err(Reply::fail("rsp", "function too wide"));
        }
        let (y, bits, qubit) = rsp_server(&b.f, &b.alpha, &mut self.rng).map_err(|e| Reply::fail("rsp", e.to_string()))?;
        self.pool.push(qubit);
        Ok(Reply::send(vec![Message::RspCommit(RspCommit { y }), Message::RspOutcome(RspOutcome { b: bits })]))
    }

    fn on_couple(&mut self, c: CoupleInstr) -> std::result::Result<Reply, Reply> {
        let idx = [c.pairs[0].0, c.pairs[0].1, c.pairs[1].0, c.pairs[1].1];
        let distinct = idx.iter().enumerate().all(|(i, a)| idx[..i].iter().all(|b| a != b));
        if !distinct || idx.iter().any(|i| *i >= self.pool.len()) || c.label_a > 1 || self.pending.is_some() {
            return Err(Reply::fail("couple", "bad pool indices or pending coupling"));
        }
        if c.level as usize != self.ek.gadgets.len() {
            return Err(Reply::fail("couple", format!("level {} but {} gadgets held", c.level, self.ek.gadgets.len())));
        }
        let qs: Vec<StateVector> = idx.iter().map(|i| self.pool[*i].clone()).collect();
        let mut sorted = idx;
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        for i in sorted {
            self.pool.remove(i);
        }
        let pairs = vec![
            couple(&qs[0], &qs[1]).map_err(|e| Reply::fail("couple", e.to_string()))?,
            couple(&qs[2], &qs[3]).map_err(|e| Reply::fail("couple", e.to_string()))?,
        ];
        self.pending = Some((c.level, c.label_a, pairs));
        Ok(Reply::default())
    }

    fn register_evk(&mut self, evk: EvalKey) -> std::result::Result<(), Reply> {
        let level = evk.level as usize;
        match self.ek.evks.len().cmp(&level) {
            std::cmp::Ordering::Equal => {
                self.ek.evks.push(evk);
                Ok(())
            }
            std::cmp::Ordering::Greater if self.ek.evks[level] == evk => Ok(()),
            _ => Err(Reply::fail("keys", format!("evaluation key for level {level} does not fit"))),
        }
    }

    fn on_gadget(&mut self, g: GadgetClassicalMsg) -> std::result::Result<Reply, Reply> {
        let (level, label_a, pairs) = self.pending.take().ok_or_else(|| Reply::fail("gadget", "no pending coupling"))?;
        if g.level != level || g.evk.level != level || g.evk_next.level != level + 1 || g.switch.from_level != level {
            return Err(Reply::fail("gadget", "level mismatch"));
        }
        if self.ek.switch.len() != level as usize {
            return Err(Reply::fail("gadget", "switch key out of order"));
        }
        self.register_evk(g.evk)?;
        self.register_evk(g.evk_next)?;
        self.ek.switch.push(g.switch);
        self.ek.gadgets.push(Gadget::from_parts(level, label_a, pairs, g.classical));
        Ok(Reply::default())
    }

    fn on_input(&mut self, e: EncInput) -> std::result::Result<Reply, Reply> {
        let dim = e.amplitudes.len();
        if dim < 2 || !dim.is_power_of_two() || dim > 1 << MAX_REMOTE_QUBITS {
            return Err(Reply::fail("input", format!("{dim} amplitudes")));
        }
        if e.keys.len() != dim.trailing_zeros() as usize || e.evk.level != e.level {
            return Err(Reply::fail("input", "key count or level mismatch"));
        }
        let amps = e.amplitudes.iter().map(|(re, im)| C64::new(*re, *im)).collect();
        let register = StateVector::from_amplitudes(amps).map_err(|err| Reply::fail("input", err.to_string()))?;
        self.register_evk(e.evk)?;
        self.state.key_level = e.level;
        self.cipher = Some(CipherState { register, keys: e.keys, level: e.level });
        Ok(Reply::default())
    }

    fn on_params(&mut self, p: ParamUpdate) -> std::result::Result<Reply, Reply> {
        if !p.theta.iter().flatten().chain(&p.w).all(|v| v.is_finite()) || !p.bias.is_finite() {
            return Err(Reply::fail("params", "non-finite parameter"));
        }
        self.theta = p.theta;
        self.params = Some(p);
        Ok(Reply::default())
    }

    fn run_theta(&self, shift: Option<(usize, f64)>) -> std::result::Result<Theta, Reply> {
        let mut theta = self.theta;
        if let Some((l, value)) = shift {
            if l >= NUM_ANGLES || !value.is_finite() {
                return Err(Reply::fail("run", "bad shift"));
            }
            let (r, c) = vqa::angle_slot(l);
            theta[r][c] = value;
        }
        Ok(theta)
    }

    fn on_run(&mut self, r: RunRequest) -> std::result::Result<Reply, Reply> {
        let mut cs = self.cipher.take().ok_or_else(|| Reply::fail("phase", "RunRequest without EncInput"))?;
        if r.shots > MAX_SHOTS {
            return Err(Reply::fail("run", "too many shots"));
        }
        let fail = |e: &dyn std::fmt::Display| Reply::fail("run", e.to_string());
        let n = cs.width();
        let (results, keys, level) = match r.circuit.as_str() {
            CIRCUIT_SHADOW_EXACT => {
                let theta = self.run_theta(r.shift)?;
                let res = server_window(&cs, &theta, r.window, &self.ek, r.shots, &mut self.rng).map_err(|e| fail(&e))?;
                let outcomes = res.shots.iter().map(|s| s.iter().map(|o| u64::from(*o)).collect()).collect();
                (ShotResults { expectations: res.expectations, outcomes }, res.keys, res.level)
            }
            CIRCUIT_SHADOW_SYNTH => {
                let theta = self.run_theta(r.shift)?;
                let d = self.decomposer.as_ref().ok_or_else(|| Reply::fail("run", "session not in faithful mode"))?;
                let window = shadow_circuit(&theta, n, r.window).map_err(|e| fail(&e))?;
                let (circuit, _, _) = d.decompose_circuit(&window).map_err(|e| fail(&e))?;
                qhe_core::eval_circuit(&mut cs, &circuit, &self.ek, &mut self.rng).map_err(|e| fail(&e))?;
                let v = r.window;
                let results = if r.shots == 0 {
                    let obs = PauliString::xx(v - 1, v).map_err(|e| fail(&e))?;
                    ShotResults { expectations: vec![cs.cipher_expectation(&obs).map_err(|e| fail(&e))?], outcomes: vec![] }
                } else {
                    let raw = qhe_core::sample_shots(&cs.register, Basis::X, r.shots, &mut self.rng).map_err(|e| fail(&e))?;
                    ShotResults { expectations: vec![], outcomes: vec![raw.iter().map(|s| (s >> (v - 1)) & 3).collect()] }
                };
                (results, cs.keys, cs.level)
            }
            CIRCUIT_T_DEMO => {
                if r.shots == 0 || r.window >= n {
                    return Err(Reply::fail("run", "t-demo needs shots and a wire"));
                }
                let w = r.window;
                let circuit = [Gate::h(w), Gate::t(w), Gate::h(w)];
                qhe_core::eval_circuit(&mut cs, &circuit, &self.ek, &mut self.rng).map_err(|e| fail(&e))?;
                let raw = qhe_core::sample_shots(&cs.register, Basis::Z, r.shots, &mut self.rng).map_err(|e| fail(&e))?;
                (ShotResults { expectations: vec![], outcomes: vec![raw] }, cs.keys, cs.level)
            }
            other => return Err(Reply::fail("run", format!("unknown circuit {other}"))),
        };
        self.state.key_level = level;
        Ok(Reply::send(vec![Message::ShotResults(results), Message::EncKeysUpdate(EncKeysUpdate { keys, level })]))
    }
}

/// What the server keeps after a session.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerReport {
    pub final_params: Option<ParamUpdate>,
    pub gadgets_consumed: u32,
    pub phase: Phase,
}

pub fn run_server<T: Transport>(transport: &mut T, rng: ChaCha8Rng) -> Result<ServerReport> {
    serve_session(transport, ServerSession::new(rng)).map(|(r, _)| r)
}

/// Runs a session to completion and hands the session back for inspection.
pub fn serve_session<T: Transport>(transport: &mut T, mut session: ServerSession) -> Result<(ServerReport, ServerSession)> {
    loop {
        let msg = match transport.recv() {
            Ok(m) => m,
            Err(ProtocolError::Closed) => break,
            Err(e) => {
                let _ = transport.send(&Message::error("frame", e.to_string()));
                session.state.phase = Phase::Done;
                return Err(e);
            }
        };
        let reply = session.handle(msg);
        for m in &reply.messages {
            transport.send(m)?;
        }
        if reply.close {
            break;
        }
    }
    let report = ServerReport {
        final_params: session.params.clone(),
        gadgets_consumed: session.state.key_level,
        phase: session.state.phase,
    };
    Ok((report, session))
}

/// Accepts connections and serves each on its own thread with a session
/// RNG seeded from `seed`. Stops after `max_sessions` when given.
pub fn serve_tcp(listener: TcpListener, seed: u64, max_sessions: Option<usize>) -> Result<()> {
    let mut handles = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        handles.push(std::thread::spawn(move || {
            let mut t = TcpTransport::new(stream);
            run_server(&mut t, ChaCha8Rng::seed_from_u64(seed))
        }));
        if max_sessions.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

/// Client side of a session: holds the secret key chain and the angles of
/// prepared qubits.
pub struct ProtocolClient<T: Transport> {
    pub transport: T,
    pub keys: ClientKeys,
    pub state: SessionState,
    pool_thetas: Vec<u8>,
    rsp: (usize, usize),
    rng: ChaCha8Rng,
    /// Angles the server currently holds.
    server_theta: Theta,
    pub mode: Mode,
    decomposer: Option<Decomposer>,
    shots: usize,
    /// Round trips made, for cost accounting.
    pub runs: usize,
}

impl<T: Transport> ProtocolClient<T> {
    /// Sends Hello and waits for the announcement.
    pub fn connect(mut transport: T, config: &TrainConfig, rng: &mut impl RngCore) -> Result<ProtocolClient<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let chain = KeyChain::generate(config.kappa, 0, false, &mut rng)?;
        transport.send(&Message::Hello(Hello {
            version: VERSION,
            mode: config.mode,
            epsilon: config.epsilon,
            theta: config.theta_init,
        }))?;
        match transport.recv()? {
            Message::Announce(_) => {}
            other => return Err(unexpected(other)),
        }
        let decomposer = match config.mode {
            Mode::DelegatedFaithful => Some(Decomposer::new(DEFAULT_BASE_LENGTH, DEFAULT_DEPTH, config.epsilon)?),
            _ => None,
        };
        let rsp = match config.rsp {
            RspMode::Faithful { n, mu } => (n, mu),
            RspMode::Ideal => match RspMode::FAITHFUL {
                RspMode::Faithful { n, mu } => (n, mu),
                RspMode::Ideal => unreachable!(),
            },
        };
        Ok(ProtocolClient {
            transport,
            keys: ClientKeys { chain, gadget_secrets: Vec::new() },
            state: SessionState { role: Role::Client, phase: Phase::Keygen, gadget_budget: 0, key_level: 0 },
            pool_thetas: Vec::new(),
            rsp,
            rng,
            server_theta: config.theta_init,
            mode: config.mode,
            decomposer,
            shots: config.shots,
            runs: 0,
        })
    }

    fn step(&mut self, kind: Kind) -> Result<()> {
        let path = transition(self.state.phase, kind).map_err(|(p, k)| ProtocolError::Phase(p, k))?;
        self.state.phase = *path.last().expect("non-empty path");
        Ok(())
    }

    fn send(&mut self, msg: Message) -> Result<()> {
        self.step(msg.kind())?;
        self.transport.send(&msg)
    }

    fn recv(&mut self) -> Result<Message> {
        match self.transport.recv()? {
            Message::Error(e) => {
                self.state.phase = Phase::Done;
                Err(ProtocolError::Remote { code: e.code, text: e.text })
            }
            m => Ok(m),
        }
    }

    /// One preparation round; the server keeps the qubit, we keep its angle.
    fn rsp_round(&mut self) -> Result<()> {
        let (n, mu) = self.rsp;
        let tf = sample_trapdoor(n, mu, &mut self.rng)?;
        let alpha: Vec<bool> = (0..n - 1).map(|_| self.rng.gen()).collect();
        self.send(Message::RspBasis(RspBasis { f: tf.public().clone(), alpha: alpha.clone() }))?;
        let y = match self.recv()? {
            Message::RspCommit(c) => c.y,
            other => return Err(unexpected(other)),
        };
        let b = match self.recv()? {
            Message::RspOutcome(o) => o.b,
            other => return Err(unexpected(other)),
        };
        self.pool_thetas.push(recover_theta(&tf, &alpha, y, &b)?);
        Ok(())
    }

    /// Extends the key chain by `extra` levels and builds one gadget per
    /// level on the server.
    pub fn prepare_gadgets(&mut self, extra: u32) -> Result<()> {
        let start = self.keys.chain.top_level();
        self.keys.chain.extend_to(start + extra, &mut self.rng)?;
        for level in start..start + extra {
            let k = self.keys.chain.triples[level as usize].sk.key_bit();
            let coupling = loop {
                if let Some(c) = plan_coupling(&self.pool_thetas, k, &mut self.rng) {
                    break c;
                }
                self.rsp_round()?;
            };
            self.send(Message::CoupleInstr(CoupleInstr { level, pairs: coupling.pairs, label_a: coupling.label_a }))?;
            let [(s0, t0), (s1, t1)] = coupling.pairs;
            let mut idx = [s0, t0, s1, t1];
            idx.sort_unstable_by(|a, b| b.cmp(a));
            for i in idx {
                self.pool_thetas.remove(i);
            }
            let next = &self.keys.chain.triples[level as usize + 1];
            let classical = GadgetClassical::encrypt(&next.pk, &coupling.pads, &mut self.rng);
            let msg = GadgetClassicalMsg {
                level,
                classical,
                evk: self.keys.chain.triples[level as usize].evk.clone(),
                evk_next: next.evk.clone(),
                switch: self.keys.chain.switch[level as usize].clone(),
            };
            self.send(Message::GadgetClassical(Box::new(msg)))?;
            self.keys.gadget_secrets.push(GadgetSecret { k, label_a: coupling.label_a, pads: coupling.pads });
        }
        self.state.gadget_budget += extra as usize;
        Ok(())
    }

    fn ensure_budget(&mut self, need: usize) -> Result<()> {
        if self.state.gadget_budget < need {
            self.prepare_gadgets((need - self.state.gadget_budget) as u32)?;
        }
        Ok(())
    }

    /// Pads `input` under the current key level and sends it.
    fn send_input(&mut self, input: &StateVector) -> Result<Vec<PauliKey>> {
        let level = self.state.key_level;
        let pads: Vec<PauliKey> = (0..input.num_qubits()).map(|_| PauliKey::new(self.rng.gen(), self.rng.gen())).collect();
        let pk = self.keys.pk(level)?.clone();
        let cs = qhe_core::encrypt_with_keys(&pk, input, &pads, &mut self.rng)?;
        let amplitudes = cs.register.amplitudes().iter().map(|a| (a.re, a.im)).collect();
        let evk = self.keys.chain.triples[level as usize].evk.clone();
        self.send(Message::EncInput(EncInput { amplitudes, keys: cs.keys, level, evk }))?;
        Ok(pads)
    }

    fn run(&mut self, req: RunRequest) -> Result<(ShotResults, EncKeysUpdate)> {
        self.send(Message::RunRequest(req))?;
        let results = match self.recv()? {
            Message::ShotResults(r) => r,
            other => return Err(unexpected(other)),
        };
        let keys = match self.recv()? {
            Message::EncKeysUpdate(k) => k,
            other => return Err(unexpected(other)),
        };
        let used = keys.level.saturating_sub(self.state.key_level) as usize;
        self.state.gadget_budget = self.state.gadget_budget.saturating_sub(used);
        self.state.key_level = keys.level;
        self.runs += 1;
        Ok((results, keys))
    }

    fn shift_for(&mut self, theta: &Theta) -> Result<Option<(usize, f64)>> {
        let diffs: Vec<usize> = (0..NUM_ANGLES)
            .filter(|l| {
                let (r, c) = vqa::angle_slot(*l);
                theta[r][c].to_bits() != self.server_theta[r][c].to_bits()
            })
            .collect();
        match diffs.as_slice() {
            [] => Ok(None),
            [l] => {
                let (r, c) = vqa::angle_slot(*l);
                Ok(Some((*l, theta[r][c])))
            }
            _ => {
                self.send_params(theta, &[], 0.0)?;
                Ok(None)
            }
        }
    }

    fn send_params(&mut self, theta: &Theta, w: &[f64], bias: f64) -> Result<()> {
        if self.state.phase != Phase::Evaluating && self.state.phase != Phase::Training {
            // nothing evaluated yet: the server still holds the Hello angles
            return Err(ProtocolError::Phase(self.state.phase, Kind::ParamUpdate));
        }
        self.send(Message::ParamUpdate(ParamUpdate { theta: *theta, w: w.to_vec(), bias }))?;
        self.server_theta = *theta;
        Ok(())
    }

    /// One window feature through the server.
    pub fn window_feature(&mut self, input: &StateVector, theta: &Theta, v: usize) -> Result<f64> {
        let n = input.num_qubits();
        match self.mode {
            Mode::DelegatedFaithful => {
                let d = self.decomposer.as_ref().expect("faithful client has a decomposer");
                let (_, need, _) = d.decompose_circuit(&shadow_circuit(theta, n, v)?)?;
                self.ensure_budget(need)?;
                let _pads = self.send_input(input)?;
                let shift = self.shift_for(theta)?;
                let shots = self.shots;
                let (res, keys) = self.run(RunRequest { circuit: CIRCUIT_SHADOW_SYNTH.into(), shots, window: v, shift })?;
                let plain = qhe_core::decrypt_keys(&self.keys, &keys.keys, keys.level)?;
                let (k0, k1) = (plain[v - 1], plain[v]);
                if shots == 0 {
                    let e = res.expectations.first().ok_or_else(|| ProtocolError::Malformed("no expectation".into()))?;
                    return Ok(qhe_core::xx_sign(k0, k1) * e);
                }
                let outs = res.outcomes.first().filter(|o| !o.is_empty()).ok_or(ProtocolError::Malformed("no shots".into()))?;
                let sum: f64 = outs
                    .iter()
                    .map(|o| {
                        let b0 = qhe_core::correct_outcome(Basis::X, k0, (o & 1) as u8);
                        let b1 = qhe_core::correct_outcome(Basis::X, k1, ((o >> 1) & 1) as u8);
                        if b0 == b1 {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .sum();
                Ok(sum / outs.len() as f64)
            }
            _ => {
                let pads = self.send_input(input)?;
                let shift = self.shift_for(theta)?;
                let shots = self.shots;
                let (res, keys) = self.run(RunRequest { circuit: CIRCUIT_SHADOW_EXACT.into(), shots, window: v, shift })?;
                let result = WindowResult {
                    expectations: res.expectations,
                    shots: res.outcomes.iter().map(|s| s.iter().map(|o| (o & 3) as u8).collect()).collect(),
                    keys: keys.keys,
                    level: keys.level,
                };
                Ok(client_window(&self.keys, &pads, v, &result)?)
            }
        }
    }

    /// Single-T statistics: encrypts `|0>`, runs H T H on the server and
    /// returns the decrypted outcomes of wire 0.
    pub fn t_demo(&mut self, shots: usize) -> Result<Vec<u8>> {
        self.ensure_budget(1)?;
        self.send_input(&StateVector::new(1)?)?;
        let (res, keys) = self.run(RunRequest { circuit: CIRCUIT_T_DEMO.into(), shots, window: 0, shift: None })?;
        let raw = res.outcomes.first().ok_or_else(|| ProtocolError::Malformed("no shots".into()))?;
        let bits: Vec<u8> = raw.iter().map(|o| (o & 1) as u8).collect();
        let plain = qhe_core::decrypt_keys(&self.keys, &keys.keys, keys.level)?;
        Ok(bits.iter().map(|b| qhe_core::correct_outcome(Basis::Z, plain[0], *b)).collect())
    }

    pub fn finish(&mut self) -> Result<()> {
        self.send(Message::Done)?;
        match self.recv()? {
            Message::Done => Ok(()),
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(m: Message) -> ProtocolError {
    ProtocolError::Unexpected(m.kind())
}

impl<T: Transport> FeatureEvaluator for ProtocolClient<T> {
    fn features(&mut self, input: &StateVector, theta: &Theta) -> vqa::Result<Vec<f64>> {
        (1..input.num_qubits())
            .map(|v| self.window_feature(input, theta, v).map_err(|e| VqaError::Evaluator(e.to_string())))
            .collect()
    }

    fn params_updated(&mut self, model: &ShadowModel) -> vqa::Result<()> {
        self.send_params(&model.theta, &model.w, model.bias).map_err(|e| VqaError::Evaluator(e.to_string()))
    }
}

/// Trains through a server reachable over `transport`.
pub fn run_client<T: Transport>(
    transport: T,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut impl RngCore,
) -> Result<(ShadowModel, Vec<vqa::EpochMetrics>)> {
    if config.mode == Mode::Plaintext {
        return Err(VqaError::Config("plaintext mode has no server".into()).into());
    }
    let mut client = ProtocolClient::connect(transport, config, rng)?;
    let out = vqa::train_with(&mut client, dataset, config)?;
    client.finish()?;
    Ok(out)
}

/// In-process session: server on a thread, client on the caller.
pub fn run_inproc(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    server_seed: u64,
) -> Result<(ShadowModel, Vec<vqa::EpochMetrics>, ServerReport)> {
    let (client_end, mut server_end) = channel_pair();
    let server = std::thread::spawn(move || run_server(&mut server_end, ChaCha8Rng::seed_from_u64(server_seed)));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x00c1_1e47);
    let result = run_client(client_end, dataset, config, &mut rng);
    let report = server.join().map_err(|_| ProtocolError::Closed)??;
    let (model, metrics) = result?;
    Ok((model, metrics, report))
}

/// TCP session against a server on `addr`.
pub fn run_tcp_client(addr: &str, dataset: &LabeledDataset, config: &TrainConfig) -> Result<(ShadowModel, Vec<vqa::EpochMetrics>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x00c1_1e47);
    run_client(TcpTransport::connect(addr)?, dataset, config, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical_he::{he_enc, keygen_at};
    use crate::simulator::demo_target_p0;
    use crate::vqa::PAPER_THETA;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(mode: Mode) -> TrainConfig {
        TrainConfig { mode, kappa: 16, epochs: 1, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn hello_round_trips() {
        let m = Message::Hello(Hello { version: 1, mode: Mode::DelegatedExactGates, epsilon: 0.01, theta: PAPER_THETA });
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[4..6], &[1, 1]);
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 6);
        let (back, used) = decode(&bytes).unwrap();
        assert_eq!((back, used), (m, bytes.len()));
        assert_eq!(decode(&encode(&Message::Done).unwrap()).unwrap().0, Message::Done);
    }

    #[test]
    fn decode_rejects_bad_frames() {
        let bytes = encode(&Message::Done).unwrap();
        assert!(matches!(decode(&bytes[..3]), Err(ProtocolError::Truncated)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(ProtocolError::Version(2))));
        let mut k = bytes.clone();
        k[5] = 15;
        assert!(matches!(decode(&k), Err(ProtocolError::UnknownKind(15))));
        let mut big = bytes.clone();
        big[..4].copy_from_slice(&(MAX_FRAME as u32).to_le_bytes());
        assert!(matches!(decode(&big), Err(ProtocolError::Oversize(_))));
        let mut bad = encode(&Message::error("x", "y")).unwrap();
        bad[6] = b'[';
        assert!(matches!(decode(&bad), Err(ProtocolError::Malformed(_))));
    }

    #[test]
    fn truncated_tcp_frame_poisons_the_connection() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let writer = std::thread::spawn(move || {
            let mut s = TcpStream::connect(addr).unwrap();
            let bytes = encode(&Message::Done).unwrap();
            s.write_all(&bytes[..bytes.len() - 2]).unwrap();
        });
        let (stream, _) = listener.accept().unwrap();
        let mut t = TcpTransport::new(stream);
        writer.join().unwrap();
        assert!(matches!(t.recv(), Err(ProtocolError::Truncated)));
        assert!(t.is_poisoned());
        assert!(matches!(t.recv(), Err(ProtocolError::Poisoned)));
    }

    fn random_message(rng: &mut ChaCha8Rng) -> Message {
        let (pk, _sk, evk) = {
            let t = keygen_at(16, 0, false, rng).unwrap();
            (t.pk, t.sk, t.evk)
        };
        let ct = |rng: &mut ChaCha8Rng| he_enc(&pk, rng.gen(), rng);
        let theta: Theta = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-7.0..7.0)));
        match rng.gen_range(0..14) {
            0 => Message::Hello(Hello { version: 1, mode: Mode::DelegatedFaithful, epsilon: rng.gen(), theta }),
            1 => Message::Announce(announce()),
            2 => Message::RspCommit(RspCommit { y: rng.gen() }),
            3 => {
                let tf = sample_trapdoor(4, 4, rng).unwrap();
                Message::RspBasis(RspBasis { f: tf.public().clone(), alpha: (0..3).map(|_| rng.gen()).collect() })
            }
            4 => Message::RspOutcome(RspOutcome { b: (0..3).map(|_| rng.gen()).collect() }),
            5 => Message::CoupleInstr(CoupleInstr { level: rng.gen(), pairs: [(1, 2), (3, 4)], label_a: 1 }),
            6 => {
                let chain = KeyChain::generate(16, 1, false, rng).unwrap();
                let pads = [Default::default(); 2];
                Message::GadgetClassical(Box::new(GadgetClassicalMsg {
                    level: 0,
                    classical: GadgetClassical::encrypt(&chain.triples[1].pk, &pads, rng),
                    evk: chain.triples[0].evk.clone(),
                    evk_next: chain.triples[1].evk.clone(),
                    switch: chain.switch[0].clone(),
                }))
            }
            7 => Message::EncInput(EncInput {
                amplitudes: (0..4).map(|_| (rng.gen(), rng.gen())).collect(),
                keys: (0..2).map(|_| (ct(rng), ct(rng))).collect(),
                level: 0,
                evk,
            }),
            8 => Message::RunRequest(RunRequest {
                circuit: CIRCUIT_SHADOW_EXACT.into(),
                shots: rng.gen_range(0..100),
                window: rng.gen_range(1..6),
                shift: if rng.gen() { Some((rng.gen_range(0..8), rng.gen())) } else { None },
            }),
            9 => Message::ShotResults(ShotResults {
                expectations: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                outcomes: vec![(0..5).map(|_| rng.gen_range(0..4)).collect()],
            }),
            10 => Message::EncKeysUpdate(EncKeysUpdate { keys: vec![(ct(rng), ct(rng))], level: rng.gen_range(0..9) }),
            11 => Message::ParamUpdate(ParamUpdate { theta, w: vec![rng.gen(), -1e-300, 1e300], bias: rng.gen() }),
            12 => Message::Done,
            _ => Message::error("phase", "text with \"quotes\" and é"),
        }
    }

    #[test]
    fn random_valid_messages_round_trip_byte_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let m = random_message(&mut rng);
            let bytes = encode(&m).unwrap();
            let (back, _) = decode(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn phase_machine_has_no_illegal_transition() {
        let phases = [Phase::Handshake, Phase::Keygen, Phase::Rsp, Phase::Evaluating, Phase::Training, Phase::Done];
        let mut reachable = vec![Phase::Handshake];
        let mut frontier = vec![Phase::Handshake];
        while let Some(p) = frontier.pop() {
            for k in Kind::ALL {
                if let Ok(path) = transition(p, k) {
                    let mut from = p;
                    for to in path {
                        assert!(is_legal_step(from, to), "{from:?} -> {to:?} on {k:?}");
                        from = to;
                    }
                    if !reachable.contains(&from) {
                        reachable.push(from);
                        frontier.push(from);
                    }
                }
            }
        }
        assert_eq!(reachable.len(), phases.len());
        assert!(Kind::ALL.iter().all(|k| transition(Phase::Done, *k).is_err()));
    }

    #[test]
    fn run_before_input_is_a_phase_error() {
        let mut s = ServerSession::new(ChaCha8Rng::seed_from_u64(0));
        let hello = Hello { version: 1, mode: Mode::DelegatedExactGates, epsilon: 0.01, theta: PAPER_THETA };
        assert!(matches!(s.handle(Message::Hello(hello)).messages[0], Message::Announce(_)));
        let r = s.handle(Message::RunRequest(RunRequest { circuit: CIRCUIT_SHADOW_EXACT.into(), shots: 0, window: 1, shift: None }));
        assert!(r.close);
        assert!(matches!(&r.messages[0], Message::Error(e) if e.code == "phase"));
        assert_eq!(s.phase(), Phase::Done);
    }

    #[test]
    fn incompatible_version_gets_a_clean_error() {
        let mut s = ServerSession::new(ChaCha8Rng::seed_from_u64(0));
        let r = s.handle(Message::Hello(Hello { version: 9, mode: Mode::DelegatedExactGates, epsilon: 0.01, theta: PAPER_THETA }));
        assert!(matches!(&r.messages[0], Message::Error(e) if e.code == "version"));
        // frame-level version byte
        let (mut c, mut srv) = channel_pair();
        let mut bytes = encode(&Message::Done).unwrap();
        bytes[4] = 7;
        assert!(matches!(decode(&bytes), Err(ProtocolError::Version(7))));
        c.send(&Message::error("version", "client gave up")).unwrap();
        drop(c);
        assert_eq!(run_server(&mut srv, ChaCha8Rng::seed_from_u64(0)).unwrap().phase, Phase::Done);
    }

    #[test]
    fn second_run_needs_a_fresh_input() {
        let (client_end, mut server_end) = channel_pair();
        let h = std::thread::spawn(move || run_server(&mut server_end, ChaCha8Rng::seed_from_u64(3)));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = ProtocolClient::connect(client_end, &cfg(Mode::DelegatedExactGates), &mut rng).unwrap();
        let input = StateVector::amplitude_encode(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 3).unwrap();
        c.window_feature(&input, &PAPER_THETA, 1).unwrap();
        let err = c.run(RunRequest { circuit: CIRCUIT_SHADOW_EXACT.into(), shots: 0, window: 1, shift: None });
        assert!(matches!(err, Err(ProtocolError::Remote { code, .. }) if code == "phase"));
        h.join().unwrap().unwrap();
    }

    #[test]
    fn fuzzed_frames_never_crash_the_server() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rejected = 0;
        for i in 0..10_000 {
            let len = rng.gen_range(0..64);
            let mut bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            if i % 2 == 0 && bytes.len() >= HEADER_LEN {
                // plausible header so the payload parser is exercised
                let body = (bytes.len() - HEADER_LEN) as u32;
                bytes[..4].copy_from_slice(&body.to_le_bytes());
                bytes[4] = VERSION;
                bytes[5] = rng.gen_range(1..=14);
            }
            match decode(&bytes) {
                Err(_) => rejected += 1,
                Ok((m, _)) => {
                    let mut s = ServerSession::new(ChaCha8Rng::seed_from_u64(i));
                    let _ = s.handle(m);
                }
            }
        }
        assert!(rejected > 9_000);
        // well-formed but hostile messages in every phase
        for i in 0..300u64 {
            let mut s = ServerSession::new(ChaCha8Rng::seed_from_u64(i));
            let mut r = ChaCha8Rng::seed_from_u64(i);
            for _ in 0..6 {
                let reply = s.handle(random_message(&mut r));
                if reply.close {
                    assert!(reply.messages.iter().all(|m| matches!(m, Message::Error(_) | Message::Done)));
                    break;
                }
            }
        }
    }

    #[test]
    fn hostile_payloads_are_rejected() {
        let mut s = ServerSession::new(ChaCha8Rng::seed_from_u64(0));
        s.handle(Message::Hello(Hello { version: 1, mode: Mode::DelegatedExactGates, epsilon: 0.01, theta: PAPER_THETA }));
        let r = s.handle(Message::CoupleInstr(CoupleInstr { level: 0, pairs: [(0, 0), (1, 2)], label_a: 0 }));
        assert!(matches!(&r.messages[0], Message::Error(e) if e.code == "couple"));
        let mut s = ServerSession::new(ChaCha8Rng::seed_from_u64(0));
        s.handle(Message::Hello(Hello { version: 1, mode: Mode::DelegatedExactGates, epsilon: 0.01, theta: PAPER_THETA }));
        let wide = PublicFunction { n: 12, mu: 12, a: vec![0; 12], c: 0 };
        let r = s.handle(Message::RspBasis(RspBasis { f: wide, alpha: vec![false; 11] }));
        assert!(matches!(&r.messages[0], Message::Error(e) if e.code == "rsp"));
    }

    #[test]
    fn single_t_session_reproduces_the_demo_statistics() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || serve_tcp(listener, 11, Some(1)));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut c = ProtocolClient::connect(TcpTransport::connect(&addr).unwrap(), &cfg(Mode::DelegatedExactGates), &mut rng)
            .unwrap();
        let bits = c.t_demo(2048).unwrap();
        c.finish().unwrap();
        server.join().unwrap().unwrap();
        let p0 = bits.iter().filter(|b| **b == 0).count() as f64 / 2048.0;
        assert!((p0 - demo_target_p0()).abs() < 0.024, "p0 = {p0}");
    }

    #[test]
    fn budget_exhaustion_triggers_more_gadgets() {
        let (client_end, mut server_end) = channel_pair();
        let h = std::thread::spawn(move || run_server(&mut server_end, ChaCha8Rng::seed_from_u64(1)));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = ProtocolClient::connect(client_end, &cfg(Mode::DelegatedExactGates), &mut rng).unwrap();
        c.prepare_gadgets(1).unwrap();
        for _ in 0..3 {
            c.t_demo(8).unwrap();
            assert_eq!(c.state.gadget_budget, 0);
        }
        assert_eq!(c.state.key_level, 3);
        c.finish().unwrap();
        assert_eq!(h.join().unwrap().unwrap().gadgets_consumed, 3);
    }

    fn small_set() -> LabeledDataset {
        let d = LabeledDataset::bundled();
        LabeledDataset::new(d.samples[..10].to_vec(), d.n).unwrap()
    }

    #[test]
    fn inproc_session_matches_local_training() {
        let c = cfg(Mode::DelegatedExactGates);
        let (m_remote, remote, report) = run_inproc(&small_set(), &c, 0).unwrap();
        let (m_local, local) = vqa::train(&small_set(), &TrainConfig { mode: Mode::Plaintext, ..c }).unwrap();
        for (a, b) in remote.iter().zip(&local) {
            assert!((a.loss - b.loss).abs() < 1e-6);
            assert_eq!((a.train_acc, a.test_acc), (b.train_acc, b.test_acc));
        }
        assert!((m_remote.bias - m_local.bias).abs() < 1e-9);
        let p = report.final_params.unwrap();
        assert_eq!((p.theta, p.w, p.bias), (m_remote.theta, m_remote.w, m_remote.bias));
    }

    #[test]
    fn tcp_and_inproc_sessions_agree_bit_for_bit() {
        let c = cfg(Mode::DelegatedExactGates);
        let (_, inproc, _) = run_inproc(&small_set(), &c, 21).unwrap();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || serve_tcp(listener, 21, Some(1)));
        let (_, tcp) = run_tcp_client(&addr, &small_set(), &c).unwrap();
        server.join().unwrap().unwrap();
        assert_eq!(vqa::metrics_csv(&inproc), vqa::metrics_csv(&tcp));
    }

    #[test]
    fn concurrent_sessions_are_isolated() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || serve_tcp(listener, 5, Some(2)));
        let runs: Vec<_> = [1u64, 2]
            .into_iter()
            .map(|seed| {
                let addr = addr.clone();
                std::thread::spawn(move || {
                    run_tcp_client(&addr, &small_set(), &TrainConfig { seed, ..cfg(Mode::DelegatedExactGates) }).unwrap().1
                })
            })
            .collect();
        let out: Vec<_> = runs.into_iter().map(|h| h.join().unwrap()).collect();
        server.join().unwrap().unwrap();
        for (seed, metrics) in [1u64, 2].into_iter().zip(&out) {
            let (_, alone, _) = run_inproc(&small_set(), &TrainConfig { seed, ..cfg(Mode::DelegatedExactGates) }, 5).unwrap();
            assert_eq!(vqa::metrics_csv(metrics), vqa::metrics_csv(&alone));
        }
    }

    #[test]
    fn faithful_session_runs_through_gadgets() {
        let data = LabeledDataset::new(vec![(vec![1.0, 2.0, 0.5, 1.5], 1), (vec![2.0, 0.1, 0.3, 0.2], 0)], 2).unwrap();
        let c = TrainConfig { epsilon: 0.1, test_fraction: 0.0, ..cfg(Mode::DelegatedFaithful) };
        let (_, metrics, report) = run_inproc(&data, &c, 2).unwrap();
        assert_eq!(metrics.len(), 2);
        assert!(report.gadgets_consumed > 0);
        let (_, plain) = vqa::train(&data, &TrainConfig { mode: Mode::Plaintext, ..c }).unwrap();
        // synthesis error only perturbs the loss slightly
        assert!((metrics[0].loss - plain[0].loss).abs() < 0.05);
    }

    #[test]
    fn server_sees_only_padded_registers_and_public_data() {
        let (client_end, mut server_end) = channel_pair();
        let session = ServerSession::new(ChaCha8Rng::seed_from_u64(8)).with_audit();
        let h = std::thread::spawn(move || serve_session(&mut server_end, session).unwrap().1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = ProtocolClient::connect(client_end, &cfg(Mode::DelegatedExactGates), &mut rng).unwrap();
        let input = StateVector::amplitude_encode(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0], 3).unwrap();
        for _ in 0..3 {
            c.features(&input, &PAPER_THETA).unwrap();
        }
        c.finish().unwrap();
        let log = h.join().unwrap().audit.unwrap();
        let kinds: std::collections::HashSet<Kind> = log.iter().map(Message::kind).collect();
        assert!(kinds.iter().all(|k| matches!(k, Kind::Hello | Kind::EncInput | Kind::RunRequest | Kind::Done)));
        for m in &log {
            if let Message::EncInput(e) = m {
                let amps = e.amplitudes.iter().map(|(r, i)| C64::new(*r, *i)).collect();
                let reg = StateVector::from_amplitudes(amps).unwrap();
                // averaging the recorded register over one wire's pads gives I/2
                for w in 0..3 {
                    let mut avg = nalgebra::DMatrix::<C64>::zeros(2, 2);
                    for (a, b) in [(false, false), (true, false), (false, true), (true, true)] {
                        let mut r = reg.clone();
                        r.apply_pad(w, a, b).unwrap();
                        avg += r.reduced_density_matrix(&[w]).unwrap() * C64::new(0.25, 0.0);
                    }
                    let mixed = crate::simulator::maximally_mixed(1);
                    assert!(crate::simulator::trace_distance_dm(&avg, &mixed) < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_decode_without_panicking(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
            let _ = read_frame(&mut bytes.as_slice());
        }
    }
}
