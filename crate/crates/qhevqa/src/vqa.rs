//! Variational shadow classifier: amplitude-encoded inputs, a sliding
//! two-qubit ansatz read out through `<X X>`, and a sigmoid layer trained on
//! cross-entropy.
//!
//! Features are produced by a [`FeatureEvaluator`]. [`PlainEvaluator`] runs
//! the ansatz directly; [`DelegatedEvaluator`] pads the input and lets a
//! server evaluate every pad hypothesis of the window so that it never needs
//! the keys; [`FaithfulEvaluator`] synthesizes each rotation over
//! {H, T, T†} and runs it through the gadget-based scheme.

use crate::classical_he::Ciphertext;
use crate::pauli_frame::{KeyFrame, PauliKey};
use crate::qhe_core::{self, ClientKeys, QheError, QheEvalKey};
use crate::rsp_gadget::{RspMode, RspPool};
use crate::simulator::{Basis, Gate, GateKind, PauliString, SimError, StateVector};
use crate::skdecomp::{Decomposer, GateSequence, SkError, DEFAULT_BASE_LENGTH, DEFAULT_DEPTH};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Shadow window width.
pub const N_QSC: usize = 2;

/// Initial angles of the reference run; row = wire within the window,
/// columns = (RX, RY, RX, RY) slots.
pub const PAPER_THETA: Theta = [[5.57, 4.34, 3.85, 6.22], [5.76, 1.40, 5.23, 5.05]];

pub type Theta = [[f64; 4]; 2];

pub const NUM_ANGLES: usize = 8;

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum VqaError {
    #[error("window start {v} outside 1..{n}")]
    Window { v: usize, n: usize },
    #[error("register has {found} qubits, model expects {expected}")]
    Width { expected: usize, found: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("loss became non-finite at epoch {0}")]
    Diverged(usize),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Qhe(#[from] QheError),
    #[error(transparent)]
    Sk(#[from] SkError),
    #[error("evaluator: {0}")]
    Evaluator(String),
}

pub type Result<T> = std::result::Result<T, VqaError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowModel {
    pub theta: Theta,
    pub w: Vec<f64>,
    pub bias: f64,
    pub n: usize,
    pub n_qsc: usize,
}

impl ShadowModel {
    pub fn new(n: usize, theta: Theta, w: Vec<f64>, bias: f64) -> Result<ShadowModel> {
        let m = ShadowModel { theta, w, bias, n, n_qsc: N_QSC };
        m.validate()?;
        Ok(m)
    }

    /// Paper-style angles with weights and bias drawn from U(-0.01, 0.01).
    pub fn init<R: Rng + ?Sized>(n: usize, theta: Theta, rng: &mut R) -> Result<ShadowModel> {
        if n < N_QSC {
            return Err(VqaError::Model(format!("need at least {N_QSC} qubits, got {n}")));
        }
        let w = (0..n - N_QSC + 1).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let bias = rng.gen_range(-0.01..0.01);
        ShadowModel::new(n, theta, w, bias)
    }

    pub fn num_features(&self) -> usize {
        self.n - self.n_qsc + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qsc != N_QSC || self.n < N_QSC {
            return Err(VqaError::Model(format!("n = {}, n_qsc = {}", self.n, self.n_qsc)));
        }
        if self.w.len() != self.num_features() {
            return Err(VqaError::Model(format!("w has {} entries, expected {}", self.w.len(), self.num_features())));
        }
        if !self.theta.iter().flatten().chain(&self.w).all(|v| v.is_finite()) || !self.bias.is_finite() {
            return Err(VqaError::Model("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| VqaError::Model(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ShadowModel> {
        let m: ShadowModel =
            serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| VqaError::Model(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// Flat angle index `l` to `(row, column)`.
pub fn angle_slot(l: usize) -> (usize, usize) {
    (l / 4, l % 4)
}

/// Ansatz on wires `(v - 1, v)`: RX, RY, RX on each wire, CNOT(v-1 -> v),
/// CNOT(v -> v-1), then RY on each wire.
pub fn shadow_circuit(theta: &Theta, n: usize, v: usize) -> Result<Vec<Gate>> {
    if v == 0 || v >= n {
        return Err(VqaError::Window { v, n });
    }
    let wires = [v - 1, v];
    let mut c = Vec::with_capacity(10);
    for (j, &q) in wires.iter().enumerate() {
        c.push(Gate::rx(q, theta[j][0]));
        c.push(Gate::ry(q, theta[j][1]));
        c.push(Gate::rx(q, theta[j][2]));
    }
    c.push(Gate::cnot(v - 1, v));
    c.push(Gate::cnot(v, v - 1));
    for (j, &q) in wires.iter().enumerate() {
        c.push(Gate::ry(q, theta[j][3]));
    }
    Ok(c)
}

pub fn build_shadow_circuit(model: &ShadowModel, v: usize) -> Result<Vec<Gate>> {
    shadow_circuit(&model.theta, model.n, v)
}

/// `<X_{v-1} X_v>` after the ansatz, one per window `v = 1..n-1`.
pub fn plain_features(input: &StateVector, theta: &Theta) -> Result<Vec<f64>> {
    let n = input.num_qubits();
    (1..n)
        .map(|v| {
            let mut s = input.clone();
            s.apply_all(&shadow_circuit(theta, n, v)?)?;
            Ok(s.expectation(&PauliString::xx(v - 1, v)?)?)
        })
        .collect()
}

pub fn shadow_features(input: &StateVector, model: &ShadowModel) -> Result<Vec<f64>> {
    if input.num_qubits() != model.n {
        return Err(VqaError::Width { expected: model.n, found: input.num_qubits() });
    }
    plain_features(input, &model.theta)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn predict(o: &[f64], w: &[f64], bias: f64) -> Result<f64> {
    if o.len() != w.len() {
        return Err(VqaError::Length(o.len(), w.len()));
    }
    Ok(sigmoid(o.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + bias))
}

/// Binary cross-entropy of one prediction with clamped logs.
pub fn sample_loss(y_hat: f64, label: u8) -> f64 {
    let p = y_hat.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean cross-entropy over `(prediction, label)` pairs.
pub fn cost(predictions: &[(f64, u8)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(VqaError::EmptyBatch);
    }
    Ok(predictions.iter().map(|(p, y)| sample_loss(*p, *y)).sum::<f64>() / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<(Vec<f64>, u8)>,
    pub n: usize,
}

const BUNDLED_DIGITS: &str = include_str!("../data/digits01.csv");

impl LabeledDataset {
    pub fn new(samples: Vec<(Vec<f64>, u8)>, n: usize) -> Result<LabeledDataset> {
        let dim = 1usize << n;
        for (i, (x, y)) in samples.iter().enumerate() {
            if x.len() > dim {
                return Err(VqaError::Dataset(format!("sample {i} has {} entries > 2^{n}", x.len())));
            }
            if x.iter().any(|v| *v < 0.0 || !v.is_finite()) || x.iter().all(|v| *v == 0.0) {
                return Err(VqaError::Dataset(format!("sample {i} is zero, negative or non-finite")));
            }
            if *y > 1 {
                return Err(VqaError::Dataset(format!("sample {i} has label {y}")));
            }
        }
        Ok(LabeledDataset { samples, n })
    }

    /// Rows of comma-separated intensities followed by a 0/1 label. Rows
    /// with other labels are skipped.
    pub fn from_csv_str(text: &str) -> Result<LabeledDataset> {
        let mut samples = Vec::new();
        let mut width = 0;
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| VqaError::Dataset(format!("line {}: {e}", line_no + 1)))?;
            let (label, x) = vals.split_last().ok_or_else(|| VqaError::Dataset(format!("line {}", line_no + 1)))?;
            if label.fract() != 0.0 || *label < 0.0 {
                return Err(VqaError::Dataset(format!("line {}: bad label {label}", line_no + 1)));
            }
            if *label > 1.0 {
                continue;
            }
            width = width.max(x.len());
            samples.push((x.to_vec(), *label as u8));
        }
        if samples.is_empty() {
            return Err(VqaError::Dataset("no samples".into()));
        }
        let n = (width.max(2) as f64).log2().ceil() as usize;
        LabeledDataset::new(samples, n)
    }

    pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
        LabeledDataset::from_csv_str(&std::fs::read_to_string(path)?)
    }

    /// The bundled 8x8 digits restricted to classes 0 and 1 (n = 6).
    pub fn bundled() -> LabeledDataset {
        LabeledDataset::from_csv_str(BUNDLED_DIGITS).expect("bundled dataset parses")
    }

    /// IDX image/label pair, classes 0 and 1, zero-padded to 2^n amplitudes.
    pub fn from_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<LabeledDataset> {
        let header = |b: &[u8], at: usize| -> Result<u32> {
            b.get(at..at + 4)
                .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
                .ok_or_else(|| VqaError::Dataset("truncated IDX header".into()))
        };
        if header(images, 0)? != 0x0000_0803 || header(labels, 0)? != 0x0000_0801 {
            return Err(VqaError::Dataset("bad IDX magic".into()));
        }
        let count = header(images, 4)? as usize;
        let (rows, cols) = (header(images, 8)? as usize, header(images, 12)? as usize);
        if header(labels, 4)? as usize != count {
            return Err(VqaError::Dataset("image and label counts differ".into()));
        }
        let pixels = rows * cols;
        if images.len() < 16 + count * pixels || labels.len() < 8 + count {
            return Err(VqaError::Dataset("truncated IDX body".into()));
        }
        let mut samples = Vec::new();
        for i in 0..count {
            let y = labels[8 + i];
            if y > 1 {
                continue;
            }
            let x: Vec<f64> = images[16 + i * pixels..16 + (i + 1) * pixels].iter().map(|p| f64::from(*p)).collect();
            if x.iter().all(|v| *v == 0.0) {
                continue;
            }
            samples.push((x, y));
            if limit.is_some_and(|l| samples.len() >= l) {
                break;
            }
        }
        let n = (pixels.max(2) as f64).log2().ceil() as usize;
        LabeledDataset::new(samples, n)
    }

    pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
        LabeledDataset::from_idx(&std::fs::read(images)?, &std::fs::read(labels)?, limit)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Seeded shuffle, then the first `test_fraction` of samples form the
    /// test set.
    pub fn split<R: Rng + ?Sized>(&self, test_fraction: f64, rng: &mut R) -> (LabeledDataset, LabeledDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let pick = |ids: &[usize]| LabeledDataset { samples: ids.iter().map(|i| self.samples[*i].clone()).collect(), n: self.n };
        (pick(&idx[n_test..]), pick(&idx[..n_test]))
    }

    pub fn encode(&self, i: usize) -> Result<StateVector> {
        Ok(StateVector::amplitude_encode(&self.samples[i].0, self.n)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GradientMethod {
    ParameterShift { alpha: f64 },
    CentralDifference { h: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Plaintext,
    DelegatedExactGates,
    DelegatedFaithful,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Plaintext => "plaintext",
            Mode::DelegatedExactGates => "delegated-exact-gates",
            Mode::DelegatedFaithful => "delegated-faithful",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = VqaError;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "plaintext" => Ok(Mode::Plaintext),
            "delegated-exact-gates" => Ok(Mode::DelegatedExactGates),
            "delegated-faithful" => Ok(Mode::DelegatedFaithful),
            other => Err(VqaError::Config(format!("unknown mode {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient: GradientMethod,
    pub mode: Mode,
    pub seed: u64,
    pub test_fraction: f64,
    pub theta_init: Theta,
    /// Synthesis accuracy for faithful mode.
    pub epsilon: f64,
    pub kappa: usize,
    pub rsp: RspMode,
    /// Measurement shots per delegated run; 0 returns exact expectations.
    pub shots: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 1,
            gradient: GradientMethod::ParameterShift { alpha: FRAC_PI_2 },
            mode: Mode::Plaintext,
            seed: 0,
            test_fraction: 0.2,
            theta_init: PAPER_THETA,
            epsilon: crate::skdecomp::DEFAULT_EPSILON,
            kappa: 32,
            rsp: RspMode::Ideal,
            shots: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(VqaError::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(VqaError::Config("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(VqaError::Config("test fraction must lie in [0, 1)".into()));
        }
        match self.gradient {
            GradientMethod::ParameterShift { alpha } if alpha.sin().abs() < 1e-9 => {
                Err(VqaError::Config("shift alpha must not be a multiple of pi".into()))
            }
            GradientMethod::CentralDifference { h } if h.is_nan() || h <= 0.0 => Err(VqaError::Config("step h must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Source of shadow features for one input at given angles.
pub trait FeatureEvaluator {
    fn features(&mut self, input: &StateVector, theta: &Theta) -> Result<Vec<f64>>;

    /// Called after every optimizer step.
    fn params_updated(&mut self, _model: &ShadowModel) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PlainEvaluator;

impl FeatureEvaluator for PlainEvaluator {
    fn features(&mut self, input: &StateVector, theta: &Theta) -> Result<Vec<f64>> {
        plain_features(input, theta)
    }
}

/// Index of a window pad hypothesis: bits (a, b) of wire v-1 then wire v.
pub fn hypothesis_index(first: PauliKey, second: PauliKey) -> usize {
    usize::from(first.a) | usize::from(first.b) << 1 | usize::from(second.a) << 2 | usize::from(second.b) << 3
}

/// Circuit that maps `P psi` to `P' U psi` when the window wires carry the
/// pads of hypothesis `h`: rotations flip sign where the pad anticommutes
/// with their generator, CNOTs are applied as is.
pub fn hypothesis_circuit(circuit: &[Gate], v: usize, h: usize) -> Result<Vec<Gate>> {
    let mut frame = KeyFrame::from_keys(vec![
        PauliKey::new(h & 1 != 0, h & 2 != 0),
        PauliKey::new(h & 4 != 0, h & 8 != 0),
    ]);
    let local = |q: usize| -> Result<usize> {
        match q.checked_sub(v - 1) {
            Some(l) if l < 2 => Ok(l),
            _ => Err(VqaError::Window { v, n: q + 1 }),
        }
    };
    let mut out = Vec::with_capacity(circuit.len());
    for g in circuit {
        match g.kind {
            GateKind::Rx(t) => {
                let k = frame.get(local(g.q0)?).map_err(|e| VqaError::Evaluator(e.to_string()))?;
                out.push(Gate::rx(g.q0, if k.b { -t } else { t }));
            }
            GateKind::Ry(t) => {
                let k = frame.get(local(g.q0)?).map_err(|e| VqaError::Evaluator(e.to_string()))?;
                out.push(Gate::ry(g.q0, if k.a ^ k.b { -t } else { t }));
            }
            GateKind::Rz(t) => {
                let k = frame.get(local(g.q0)?).map_err(|e| VqaError::Evaluator(e.to_string()))?;
                out.push(Gate::rz(g.q0, if k.a { -t } else { t }));
            }
            kind if kind.is_clifford() => {
                let mut local_gate = *g;
                local_gate.q0 = local(g.q0)?;
                if let Some(q1) = g.q1 {
                    local_gate.q1 = Some(local(q1)?);
                }
                frame.update_clifford(&local_gate).map_err(|e| VqaError::Evaluator(e.to_string()))?;
                out.push(*g);
            }
            kind => return Err(VqaError::Evaluator(format!("{kind:?} has no pad hypothesis rule"))),
        }
    }
    Ok(out)
}

/// Server reply for one window run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    /// Padded `<X X>` per hypothesis when run without shots.
    pub expectations: Vec<f64>,
    /// Raw X-basis outcome pairs per hypothesis, bit 0 = wire v-1.
    pub shots: Vec<Vec<u8>>,
    pub keys: Vec<(Ciphertext, Ciphertext)>,
    pub level: u32,
}

/// Server side of a delegated window run. Uses only the padded register,
/// encrypted keys and public angles.
pub fn server_window<R: RngCore>(
    cs: &qhe_core::CipherState,
    theta: &Theta,
    v: usize,
    ek: &QheEvalKey,
    shots: usize,
    rng: &mut R,
) -> Result<WindowResult> {
    let n = cs.width();
    let circuit = shadow_circuit(theta, n, v)?;
    let obs = PauliString::xx(v - 1, v)?;
    let mut expectations = Vec::new();
    let mut samples = Vec::new();
    for h in 0..16 {
        let mut reg = cs.register.clone();
        reg.apply_all(&hypothesis_circuit(&circuit, v, h)?)?;
        if shots == 0 {
            expectations.push(reg.expectation(&obs)?);
        } else {
            let raw = qhe_core::sample_shots(&reg, Basis::X, shots, rng)?;
            samples.push(raw.iter().map(|s| ((s >> (v - 1)) & 3) as u8).collect());
        }
    }
    let mut keyed = cs.clone();
    for g in circuit.iter().filter(|g| g.kind.is_clifford()) {
        keyed.apply(g, ek, rng)?;
    }
    Ok(WindowResult { expectations, shots: samples, keys: keyed.keys, level: keyed.level })
}

/// Client side: picks the hypothesis matching the initial pads and removes
/// the final pads from the outcome.
pub fn client_window(client: &ClientKeys, initial: &[PauliKey], v: usize, result: &WindowResult) -> Result<f64> {
    let h = hypothesis_index(initial[v - 1], initial[v]);
    let keys = qhe_core::decrypt_keys(client, &result.keys, result.level)?;
    let (k0, k1) = (keys[v - 1], keys[v]);
    if result.shots.is_empty() {
        let e = result.expectations.get(h).ok_or(VqaError::Evaluator("missing hypothesis".into()))?;
        return Ok(qhe_core::xx_sign(k0, k1) * e);
    }
    let outcomes = result.shots.get(h).ok_or(VqaError::Evaluator("missing hypothesis".into()))?;
    if outcomes.is_empty() {
        return Err(VqaError::EmptyBatch);
    }
    let parity_sum: f64 = outcomes
        .iter()
        .map(|o| {
            let b0 = qhe_core::correct_outcome(Basis::X, k0, o & 1);
            let b1 = qhe_core::correct_outcome(Basis::X, k1, (o >> 1) & 1);
            if b0 ^ b1 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .sum();
    Ok(parity_sum / outcomes.len() as f64)
}

/// Delegated evaluation with exact rotation gates, run in process. Each
/// window gets a freshly padded copy of the input.
pub struct DelegatedEvaluator {
    client: ClientKeys,
    ek: QheEvalKey,
    rng: ChaCha8Rng,
    shots: usize,
}

impl DelegatedEvaluator {
    pub fn new(kappa: usize, shots: usize, seed: u64) -> Result<DelegatedEvaluator> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (client, ek) = qhe_core::keygen(kappa, 0, RspMode::Ideal, false, &mut rng)?;
        Ok(DelegatedEvaluator { client, ek, rng, shots })
    }
}

impl FeatureEvaluator for DelegatedEvaluator {
    fn features(&mut self, input: &StateVector, theta: &Theta) -> Result<Vec<f64>> {
        let n = input.num_qubits();
        let pk = self.client.pk(0)?.clone();
        (1..n)
            .map(|v| {
                let pads: Vec<PauliKey> = (0..n).map(|_| PauliKey::new(self.rng.gen(), self.rng.gen())).collect();
                let cs = qhe_core::encrypt_with_keys(&pk, input, &pads, &mut self.rng)?;
                let result = server_window(&cs, theta, v, &self.ek, self.shots, &mut self.rng)?;
                client_window(&self.client, &pads, v, &result)
            })
            .collect()
    }
}

/// Rotations synthesized over {H, T, T†} and evaluated with gadgets. Key
/// levels are extended on demand when the gadget budget runs out.
pub struct FaithfulEvaluator {
    decomposer: Decomposer,
    cache: HashMap<(u8, u64), GateSequence>,
    client: ClientKeys,
    ek: QheEvalKey,
    pool: RspPool,
    mode: RspMode,
    level: u32,
    rng: ChaCha8Rng,
    /// Total gadgets consumed so far.
    pub gadgets_used: usize,
}

impl FaithfulEvaluator {
    pub fn new(epsilon: f64, kappa: usize, mode: RspMode, seed: u64) -> Result<FaithfulEvaluator> {
        FaithfulEvaluator::with_decomposer(Decomposer::new(DEFAULT_BASE_LENGTH, DEFAULT_DEPTH, epsilon)?, kappa, mode, seed)
    }

    pub fn with_decomposer(decomposer: Decomposer, kappa: usize, mode: RspMode, seed: u64) -> Result<FaithfulEvaluator> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (client, ek) = qhe_core::keygen(kappa, 0, mode, false, &mut rng)?;
        Ok(FaithfulEvaluator {
            decomposer,
            cache: HashMap::new(),
            client,
            ek,
            pool: RspPool::default(),
            mode,
            level: 0,
            rng,
            gadgets_used: 0,
        })
    }

    fn sequence(&mut self, kind: GateKind) -> Result<GateSequence> {
        let key = match kind {
            GateKind::Rx(t) => (0, t.to_bits()),
            GateKind::Ry(t) => (1, t.to_bits()),
            GateKind::Rz(t) => (2, t.to_bits()),
            other => return Err(VqaError::Evaluator(format!("{other:?} is not a rotation"))),
        };
        if let Some(s) = self.cache.get(&key) {
            return Ok(s.clone());
        }
        let s = self.decomposer.decompose(&crate::skdecomp::kind_matrix(kind)?)?.sequence;
        self.cache.insert(key, s.clone());
        Ok(s)
    }

    /// Clifford+T version of a window circuit.
    pub fn synthesize(&mut self, circuit: &[Gate]) -> Result<Vec<Gate>> {
        let mut out = Vec::new();
        for g in circuit {
            if matches!(g.kind, GateKind::Rx(_) | GateKind::Ry(_) | GateKind::Rz(_)) {
                out.extend(self.sequence(g.kind)?.gates(g.q0));
            } else {
                out.push(*g);
            }
        }
        Ok(out)
    }
}

impl FeatureEvaluator for FaithfulEvaluator {
    fn features(&mut self, input: &StateVector, theta: &Theta) -> Result<Vec<f64>> {
        let n = input.num_qubits();
        let mut out = Vec::with_capacity(n - 1);
        for v in 1..n {
            let circuit = self.synthesize(&shadow_circuit(theta, n, v)?)?;
            let need = qhe_core::t_count(&circuit);
            let have = self.ek.remaining(self.level);
            if have < need {
                qhe_core::extend_keys(
                    &mut self.client,
                    &mut self.ek,
                    (need - have) as u32,
                    self.mode,
                    &mut self.pool,
                    &mut self.rng,
                )?;
            }
            let pk = self.client.pk(self.level)?.clone();
            let mut cs = qhe_core::encrypt(&pk, input, &mut self.rng)?;
            qhe_core::eval_circuit(&mut cs, &circuit, &self.ek, &mut self.rng)?;
            self.level = cs.level;
            self.gadgets_used += need;
            let keys = qhe_core::decrypt_keys(&self.client, &cs.keys, cs.level)?;
            let padded = cs.cipher_expectation(&PauliString::xx(v - 1, v)?)?;
            out.push(qhe_core::xx_sign(keys[v - 1], keys[v]) * padded);
        }
        Ok(out)
    }
}

/// Gradients of the batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub theta: Theta,
    pub w: Vec<f64>,
    pub bias: f64,
}

fn shifted(theta: &Theta, l: usize, delta: f64) -> Theta {
    let mut t = *theta;
    let (r, c) = angle_slot(l);
    t[r][c] += delta;
    t
}

/// Feature Jacobian `d o_i / d theta_l` by the configured rule.
pub fn feature_jacobian(
    eval: &mut dyn FeatureEvaluator,
    input: &StateVector,
    theta: &Theta,
    method: GradientMethod,
) -> Result<Vec<[f64; NUM_ANGLES]>> {
    let (step, scale) = match method {
        GradientMethod::ParameterShift { alpha } => (alpha, 1.0 / (2.0 * alpha.sin())),
        GradientMethod::CentralDifference { h } => (h, 1.0 / (2.0 * h)),
    };
    let mut jac: Vec<[f64; NUM_ANGLES]> = Vec::new();
    for l in 0..NUM_ANGLES {
        let plus = eval.features(input, &shifted(theta, l, step))?;
        let minus = eval.features(input, &shifted(theta, l, -step))?;
        if jac.is_empty() {
            jac = vec![[0.0; NUM_ANGLES]; plus.len()];
        }
        for (i, (p, m)) in plus.iter().zip(&minus).enumerate() {
            jac[i][l] = (p - m) * scale;
        }
    }
    Ok(jac)
}

/// Batch-averaged gradients of the cross-entropy.
pub fn gradients(
    eval: &mut dyn FeatureEvaluator,
    batch: &[(StateVector, u8)],
    model: &ShadowModel,
    method: GradientMethod,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(VqaError::EmptyBatch);
    }
    let mut g = Gradients { theta: [[0.0; 4]; 2], w: vec![0.0; model.w.len()], bias: 0.0 };
    let scale = 1.0 / batch.len() as f64;
    for (input, label) in batch {
        let o = eval.features(input, &model.theta)?;
        let err = predict(&o, &model.w, model.bias)? - f64::from(*label);
        for (gw, oi) in g.w.iter_mut().zip(&o) {
            *gw += scale * err * oi;
        }
        g.bias += scale * err;
        if model.w.iter().all(|w| *w == 0.0) {
            continue;
        }
        let jac = feature_jacobian(eval, input, &model.theta, method)?;
        for l in 0..NUM_ANGLES {
            let (r, c) = angle_slot(l);
            let d: f64 = jac.iter().zip(&model.w).map(|(row, w)| row[l] * w).sum();
            g.theta[r][c] += scale * err * d;
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Loss and accuracy of `model` over encoded samples.
pub fn evaluate(eval: &mut dyn FeatureEvaluator, data: &[(StateVector, u8)], model: &ShadowModel) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut preds = Vec::with_capacity(data.len());
    for (input, label) in data {
        let o = eval.features(input, &model.theta)?;
        preds.push((predict(&o, &model.w, model.bias)?, *label));
    }
    let acc = preds.iter().filter(|(p, y)| u8::from(*p >= 0.5) == *y).count() as f64 / preds.len() as f64;
    Ok((cost(&preds)?, acc))
}

fn encode_all(data: &LabeledDataset) -> Result<Vec<(StateVector, u8)>> {
    (0..data.len()).map(|i| Ok((data.encode(i)?, data.samples[i].1))).collect()
}

pub fn make_evaluator(config: &TrainConfig) -> Result<Box<dyn FeatureEvaluator>> {
    let eval_seed = config.seed ^ 0x9e37_79b9_7f4a_7c15;
    Ok(match config.mode {
        Mode::Plaintext => Box::new(PlainEvaluator),
        Mode::DelegatedExactGates => Box::new(DelegatedEvaluator::new(config.kappa, config.shots, eval_seed)?),
        Mode::DelegatedFaithful => Box::new(FaithfulEvaluator::new(config.epsilon, config.kappa, config.rsp, eval_seed)?),
    })
}

/// Splits, initializes and trains; metrics include an epoch-0 row for the
/// initial model.
pub fn train(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(ShadowModel, Vec<EpochMetrics>)> {
    let mut eval = make_evaluator(config)?;
    train_with(eval.as_mut(), dataset, config)
}

/// Training loop over any evaluator.
pub fn train_with(
    eval: &mut dyn FeatureEvaluator,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ShadowModel, Vec<EpochMetrics>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(VqaError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_set, test_set) = dataset.split(config.test_fraction, &mut rng);
    let (train_enc, test_enc) = (encode_all(&train_set)?, encode_all(&test_set)?);
    let mut model = ShadowModel::init(dataset.n, config.theta_init, &mut rng)?;
    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let record = |eval: &mut dyn FeatureEvaluator, model: &ShadowModel, epoch: usize| -> Result<EpochMetrics> {
        let (loss, train_acc) = evaluate(eval, &train_enc, model)?;
        let (_, test_acc) = evaluate(eval, &test_enc, model)?;
        if !loss.is_finite() {
            return Err(VqaError::Diverged(epoch));
        }
        Ok(EpochMetrics { epoch, loss, train_acc, test_acc })
    };
    metrics.push(record(eval, &model, 0)?);
    let mut order: Vec<usize> = (0..train_enc.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(StateVector, u8)> = chunk.iter().map(|i| train_enc[*i].clone()).collect();
            let g = gradients(eval, &batch, &model, config.gradient)?;
            let chi = config.learning_rate;
            for (r, row) in model.theta.iter_mut().enumerate() {
                for (c, t) in row.iter_mut().enumerate() {
                    *t -= chi * g.theta[r][c];
                }
            }
            for (w, gw) in model.w.iter_mut().zip(&g.w) {
                *w -= chi * gw;
            }
            model.bias -= chi * g.bias;
            eval.params_updated(&model)?;
        }
        metrics.push(record(eval, &model, epoch)?);
    }
    Ok((model, metrics))
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,train_acc,test_acc\n");
    for m in metrics {
        let _ = writeln!(s, "{},{},{},{}", m.epoch, m.loss, m.train_acc, m.test_acc);
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,loss,train_acc,test_acc") {
        return Err(VqaError::Dataset("missing metrics header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || VqaError::Dataset(format!("bad metrics row {l}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                train_acc: f[2].parse().map_err(|_| bad())?,
                test_acc: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Line plot of loss and accuracies against epoch.
pub fn metrics_svg(metrics: &[EpochMetrics]) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let last = metrics.iter().map(|m| m.epoch).max().unwrap_or(1).max(1) as f64;
    let top = metrics.iter().map(|m| m.loss).filter(|l| l.is_finite()).fold(1.0f64, f64::max);
    let x = |e: usize| pad + (w - 2.0 * pad) * e as f64 / last;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v / top).clamp(0.0, 1.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - pad,
        r = w - pad
    );
    type Series = (&'static str, &'static str, fn(&EpochMetrics) -> f64);
    let series: [Series; 3] = [
        ("loss", "#1f4e9c", |m| m.loss),
        ("train_acc", "#c0392b", |m| m.train_acc),
        ("test_acc", "#27ae60", |m| m.test_acc),
    ];
    for (k, (name, color, f)) in series.iter().enumerate() {
        let pts: Vec<String> = metrics
            .iter()
            .filter(|m| f(m).is_finite())
            .map(|m| format!("{:.2},{:.2}", x(m.epoch), y(f(m))))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>",
            w - pad - 80.0,
            pad + 16.0 * k as f64
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">epoch</text>", w / 2.0, h - 12.0);
    s.push_str("</svg>\n");
    s
}
