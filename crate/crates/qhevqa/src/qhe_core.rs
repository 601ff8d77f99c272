//! Quantum homomorphic encryption over Clifford+T circuits.
//!
//! Wires carry one-time pads whose keys exist only as ciphertexts on the
//! server. Clifford gates update the keys through `he_eval`; each T or T†
//! consumes one gadget and moves every key to the next level.

use crate::classical_he::{
    he_dec, he_enc, he_eval_many, key_switch, BoolCircuit, Ciphertext, EvalKey, HeError, KeyChain,
    KeySwitchKey, PublicKey, SecretKey,
};
use crate::pauli_frame::{PauliKey, RuleTable};
use crate::rsp_gadget::{
    consume_gadget, gadget_key_update, gen_gadget, gen_measurement, Gadget, GadgetError, GadgetSecret,
    RspMode, RspPool,
};
use crate::simulator::{Basis, Gate, GateKind, PauliString, SimError, StateVector};
use rand::{Rng, RngCore};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QheError {
    #[error("no gadget left for level {0}")]
    GadgetExhausted(u32),
    #[error("gate {0:?} is outside Clifford+T")]
    UnsupportedGate(GateKind),
    #[error("register has {register} wires but {keys} key pairs")]
    WireMismatch { register: usize, keys: usize },
    #[error("expected {expected} outcome bits, got {found}")]
    OutcomeCount { expected: usize, found: usize },
    #[error("gadget for level {gadget} offered at level {state}")]
    GadgetLevel { gadget: u32, state: u32 },
    #[error("secret keys stop at level {have}, state is at level {need}")]
    MissingLevel { have: u32, need: u32 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Gadget(#[from] GadgetError),
}

pub type Result<T> = std::result::Result<T, QheError>;

/// Client-side secrets: the full key chain and the hidden gadget records.
#[derive(Clone, Debug)]
pub struct ClientKeys {
    pub chain: KeyChain,
    pub gadget_secrets: Vec<GadgetSecret>,
}

impl ClientKeys {
    pub fn sk(&self, level: u32) -> Result<&SecretKey> {
        self.chain
            .triple(level)
            .map(|t| &t.sk)
            .ok_or(QheError::MissingLevel { have: self.chain.top_level(), need: level })
    }

    pub fn pk(&self, level: u32) -> Result<&PublicKey> {
        self.chain
            .triple(level)
            .map(|t| &t.pk)
            .ok_or(QheError::MissingLevel { have: self.chain.top_level(), need: level })
    }
}

/// Everything the server needs to evaluate: evaluation keys per level, the
/// key-switching chain and one gadget per T gate.
#[derive(Debug, Default)]
pub struct QheEvalKey {
    pub evks: Vec<EvalKey>,
    pub switch: Vec<KeySwitchKey>,
    pub gadgets: Vec<Gadget>,
}

impl QheEvalKey {
    /// Gadgets not yet consumed.
    pub fn remaining(&self, level: u32) -> usize {
        self.gadgets.len().saturating_sub(level as usize)
    }
}

/// Generates `L + 1` key levels and `L` gadgets.
pub fn keygen<R: RngCore>(
    kappa: usize,
    t_count: u32,
    mode: RspMode,
    transparent: bool,
    rng: &mut R,
) -> Result<(ClientKeys, QheEvalKey)> {
    let chain = KeyChain::generate(kappa, 0, transparent, rng)?;
    let mut client = ClientKeys { chain, gadget_secrets: Vec::new() };
    let mut ek = QheEvalKey {
        evks: vec![client.chain.triples[0].evk.clone()],
        switch: Vec::new(),
        gadgets: Vec::new(),
    };
    extend_keys(&mut client, &mut ek, t_count, mode, &mut RspPool::default(), rng)?;
    Ok((client, ek))
}

/// Adds `extra` levels with their gadgets on top of the existing chain.
pub fn extend_keys<R: RngCore>(
    client: &mut ClientKeys,
    ek: &mut QheEvalKey,
    extra: u32,
    mode: RspMode,
    pool: &mut RspPool,
    rng: &mut R,
) -> Result<()> {
    let start = client.chain.top_level();
    client.chain.extend_to(start + extra, rng)?;
    for level in start..start + extra {
        let i = level as usize;
        let next = &client.chain.triples[i + 1];
        let k = client.chain.triples[i].sk.key_bit();
        let (gadget, secret) = gen_gadget(k, &next.pk, pool, mode, rng)?;
        ek.evks.push(next.evk.clone());
        ek.switch.push(client.chain.switch[i].clone());
        ek.gadgets.push(gadget);
        client.gadget_secrets.push(secret);
    }
    Ok(())
}

/// Server-side encrypted register.
#[derive(Clone, Debug)]
pub struct CipherState {
    pub register: StateVector,
    /// Encrypted `(a, b)` per wire.
    pub keys: Vec<(Ciphertext, Ciphertext)>,
    pub level: u32,
}

/// Pads every wire of `register` with fresh random keys.
pub fn encrypt<R: RngCore>(pk: &PublicKey, register: &StateVector, rng: &mut R) -> Result<CipherState> {
    let keys: Vec<PauliKey> = (0..register.num_qubits()).map(|_| PauliKey::new(rng.gen(), rng.gen())).collect();
    encrypt_with_keys(pk, register, &keys, rng)
}

/// Encrypts a product of single-wire states; wire `i` is `states[i]`.
pub fn encrypt_product<R: RngCore>(pk: &PublicKey, states: &[StateVector], rng: &mut R) -> Result<CipherState> {
    let mut iter = states.iter();
    let first = iter.next().ok_or(SimError::Width(0))?.clone();
    let register = iter.try_fold(first, |acc, s| acc.tensor(s))?;
    encrypt(pk, &register, rng)
}

pub fn encrypt_with_keys<R: RngCore>(
    pk: &PublicKey,
    register: &StateVector,
    keys: &[PauliKey],
    rng: &mut R,
) -> Result<CipherState> {
    if keys.len() != register.num_qubits() {
        return Err(QheError::WireMismatch { register: register.num_qubits(), keys: keys.len() });
    }
    let mut reg = register.clone();
    for (w, k) in keys.iter().enumerate() {
        reg.apply_pad(w, k.a, k.b)?;
    }
    let keys = keys.iter().map(|k| (he_enc(pk, k.a, rng), he_enc(pk, k.b, rng))).collect();
    Ok(CipherState { register: reg, keys, level: pk.level })
}

fn clifford_circuit(kind: GateKind) -> Result<BoolCircuit> {
    let rule = RuleTable::standard().rule(kind).map_err(|_| QheError::UnsupportedGate(kind))?;
    let width = rule.rows.len();
    let mut c = BoolCircuit::new(width);
    let inputs: Vec<usize> = (0..width).map(|i| c.input(i)).collect();
    for row in &rule.rows {
        let mut acc = None;
        for (i, inp) in inputs.iter().enumerate() {
            if row >> i & 1 == 1 {
                acc = Some(match acc {
                    None => *inp,
                    Some(prev) => c.xor(prev, *inp),
                });
            }
        }
        let out = acc.unwrap_or_else(|| c.constant(false));
        c.output(out);
    }
    Ok(c)
}

impl CipherState {
    pub fn width(&self) -> usize {
        self.keys.len()
    }

    fn check(&self) -> Result<()> {
        if self.register.num_qubits() != self.keys.len() {
            return Err(QheError::WireMismatch { register: self.register.num_qubits(), keys: self.keys.len() });
        }
        Ok(())
    }

    fn apply_clifford<R: RngCore>(&mut self, gate: &Gate, ek: &QheEvalKey, rng: &mut R) -> Result<()> {
        self.register.apply(gate)?;
        if matches!(gate.kind, GateKind::X | GateKind::Y | GateKind::Z) {
            return Ok(());
        }
        let evk = &ek.evks[self.level as usize];
        let circuit = clifford_circuit(gate.kind)?;
        let wires = gate.wires();
        let inputs: Vec<Ciphertext> =
            wires.iter().flat_map(|w| [self.keys[*w].0.clone(), self.keys[*w].1.clone()]).collect();
        let out = he_eval_many(evk, &circuit, &inputs, rng)?;
        for (i, w) in wires.iter().enumerate() {
            self.keys[*w] = (out[2 * i].clone(), out[2 * i + 1].clone());
        }
        Ok(())
    }

    fn apply_t<R: RngCore>(&mut self, gate: &Gate, ek: &QheEvalKey, rng: &mut R) -> Result<()> {
        let level = self.level;
        let gadget = ek.gadgets.get(level as usize).ok_or(QheError::GadgetExhausted(level))?;
        if gadget.level != level {
            return Err(QheError::GadgetLevel { gadget: gadget.level, state: level });
        }
        let w = gate.q0;
        self.register.apply(gate)?;
        let plan = gen_measurement(&self.keys[w].0, gadget)?;
        let outcomes = consume_gadget(&mut self.register, w, gadget, &plan, rng)?;
        let ksk = &ek.switch[level as usize];
        for k in self.keys.iter_mut() {
            *k = (key_switch(&k.0, ksk)?, key_switch(&k.1, ksk)?);
        }
        let evk = &ek.evks[level as usize + 1];
        let (a, b) = &self.keys[w];
        self.keys[w] = gadget_key_update(gate.kind, plan.route, &outcomes, &gadget.classical, a, b, evk, rng)?;
        self.level += 1;
        Ok(())
    }

    /// Applies a gate homomorphically.
    pub fn apply<R: RngCore>(&mut self, gate: &Gate, ek: &QheEvalKey, rng: &mut R) -> Result<()> {
        self.check()?;
        gate.validate(self.width())?;
        match gate.kind {
            GateKind::T | GateKind::Tdg => self.apply_t(gate, ek, rng),
            k if k.is_clifford() => self.apply_clifford(gate, ek, rng),
            k => Err(QheError::UnsupportedGate(k)),
        }
    }

    /// Server-side Pauli expectation on the padded register.
    pub fn cipher_expectation(&self, obs: &PauliString) -> Result<f64> {
        Ok(self.register.expectation(obs)?)
    }
}

/// Number of gadgets a circuit consumes.
pub fn t_count(circuit: &[Gate]) -> usize {
    circuit.iter().filter(|g| matches!(g.kind, GateKind::T | GateKind::Tdg)).count()
}

pub fn eval_circuit<R: RngCore>(cs: &mut CipherState, circuit: &[Gate], ek: &QheEvalKey, rng: &mut R) -> Result<()> {
    let needed = t_count(circuit);
    if needed > ek.remaining(cs.level) {
        return Err(QheError::GadgetExhausted(cs.level + ek.remaining(cs.level) as u32));
    }
    for g in circuit {
        cs.apply(g, ek, rng)?;
    }
    Ok(())
}

/// Decrypts the per-wire keys of a state.
pub fn decrypt_keys(client: &ClientKeys, keys: &[(Ciphertext, Ciphertext)], level: u32) -> Result<Vec<PauliKey>> {
    let sk = client.sk(level)?;
    keys.iter()
        .map(|(a, b)| Ok(PauliKey::new(he_dec(sk, a)?, he_dec(sk, b)?)))
        .collect()
}

pub fn decrypt_state(client: &ClientKeys, cs: &CipherState) -> Result<StateVector> {
    cs.check()?;
    let keys = decrypt_keys(client, &cs.keys, cs.level)?;
    let mut reg = cs.register.clone();
    for (w, k) in keys.iter().enumerate() {
        // Z^b X^a undoes X^a Z^b up to a global phase
        if k.a {
            reg.apply(&Gate::x(w))?;
        }
        if k.b {
            reg.apply(&Gate::z(w))?;
        }
    }
    Ok(reg)
}

/// Flips a raw outcome when the pad anticommutes with the measured basis:
/// the X key for Z measurements, the Z key for X measurements.
pub fn correct_outcome(basis: Basis, key: PauliKey, raw: u8) -> u8 {
    let flip = match basis {
        Basis::Z => key.a,
        Basis::X => key.b,
    };
    raw ^ u8::from(flip)
}

pub fn decrypt_outcome(
    client: &ClientKeys,
    basis: Basis,
    outcomes: &[u8],
    keys: &[(Ciphertext, Ciphertext)],
    level: u32,
) -> Result<Vec<u8>> {
    if outcomes.len() != keys.len() {
        return Err(QheError::OutcomeCount { expected: keys.len(), found: outcomes.len() });
    }
    let plain = decrypt_keys(client, keys, level)?;
    Ok(outcomes.iter().zip(plain).map(|(o, k)| correct_outcome(basis, k, *o)).collect())
}

/// Sign relating a padded `<X_i X_j>` to the plaintext value.
pub fn xx_sign(ki: PauliKey, kj: PauliKey) -> f64 {
    if ki.b ^ kj.b {
        -1.0
    } else {
        1.0
    }
}

/// Samples `shots` joint outcomes, measuring every wire in `basis`; bit `w`
/// of each result is wire `w`. Shots are drawn independently from the final
/// register, which stands in for repeating the whole evaluation.
pub fn sample_shots<R: Rng + ?Sized>(reg: &StateVector, basis: Basis, shots: usize, rng: &mut R) -> Result<Vec<u64>> {
    let mut rotated = reg.clone();
    if basis == Basis::X {
        for w in 0..reg.num_qubits() {
            rotated.apply(&Gate::h(w))?;
        }
    }
    let mut cdf = Vec::with_capacity(rotated.amplitudes().len());
    let mut acc = 0.0;
    for a in rotated.amplitudes() {
        acc += a.norm_sqr();
        cdf.push(acc);
    }
    Ok((0..shots)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            cdf.partition_point(|c| *c <= u).min(cdf.len() - 1) as u64
        })
        .collect())
}
