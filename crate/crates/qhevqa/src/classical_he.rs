//! Modeled classical homomorphic encryption of single bits.
//!
//! This is a deferred-evaluation model, not a secure scheme. `Eval` records
//! the boolean circuit as a DAG of ciphertext nodes and `Dec` replays it on
//! unsealed leaves. Each key level `i` owns one secret bit `k_i`; a leaf for
//! plaintext `x` stores `x ^ k_i ^ s` where `s` is a public stream bit
//! derived from the key id and a random nonce. Every ciphertext at level `i`
//! therefore decrypts to `g0 ^ g1 & k_i` with `(g0, g1)` computable by anyone
//! ([`Ciphertext::affine_form`]). The model hides at most one bit per level
//! and the public key carries the masking material; security is not claimed.
//!
//! A key switch node wraps a level `i` ciphertext together with an
//! encryption of `k_i` under the level `i + 1` key, so decryption needs only
//! the newest secret key.

use rand::{Rng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

pub const MIN_KAPPA: usize = 16;
const NONCE_LEN: usize = 16;
const TAG_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeError {
    #[error("security parameter {0} is below the minimum of 16")]
    KappaTooSmall(usize),
    #[error("key mismatch: expected key {expected:#x}, found {found:#x}")]
    KeyMismatch { expected: u64, found: u64 },
    #[error("level mismatch: expected {expected}, found {found}")]
    LevelMismatch { expected: u32, found: u32 },
    #[error("leaf integrity tag does not verify")]
    BadTag,
    #[error("circuit expects {expected} inputs, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("malformed circuit: {0}")]
    Circuit(String),
    #[error("key switch auxiliaries disagree on key {0:#x}")]
    InconsistentKeySwitch(u64),
    #[error("malformed ciphertext encoding: {0}")]
    Decode(String),
}

fn sha(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn stream_bit(key_id: u64, nonce: &[u8; NONCE_LEN]) -> bool {
    sha(&[b"stream", &key_id.to_le_bytes(), nonce])[0] & 1 == 1
}

fn leaf_tag(key_id: u64, level: u32, nonce: &[u8; NONCE_LEN], masked: bool) -> [u8; TAG_LEN] {
    let d = sha(&[b"tag", &key_id.to_le_bytes(), &level.to_le_bytes(), nonce, &[masked as u8]]);
    d[..TAG_LEN].try_into().expect("tag length")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    pub id: u64,
    pub level: u32,
    pub transparent: bool,
    #[serde(with = "hex_bytes")]
    enc_seed: Vec<u8>,
}

impl PublicKey {
    fn mask_bit(&self) -> bool {
        !self.transparent && sha(&[b"bit", &self.enc_seed])[0] & 1 == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretKey {
    pub id: u64,
    pub level: u32,
    pub transparent: bool,
    #[serde(with = "hex_bytes")]
    seed: Vec<u8>,
}

impl SecretKey {
    fn enc_seed(&self) -> Vec<u8> {
        sha(&[b"enc", &self.seed]).to_vec()
    }

    /// The secret bit this key contributes to every leaf mask.
    pub fn key_bit(&self) -> bool {
        !self.transparent && sha(&[b"bit", &self.enc_seed()])[0] & 1 == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalKey {
    pub id: u64,
    pub level: u32,
    pub pk: PublicKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HEKeyTriple {
    pub pk: PublicKey,
    pub sk: SecretKey,
    pub evk: EvalKey,
    pub level: u32,
}

pub fn he_keygen<R: RngCore>(kappa: usize, rng: &mut R) -> Result<HEKeyTriple, HeError> {
    keygen_at(kappa, 0, false, rng)
}

/// Key generation for a given level. `transparent` keys mask nothing and
/// exist for debugging.
pub fn keygen_at<R: RngCore>(
    kappa: usize,
    level: u32,
    transparent: bool,
    rng: &mut R,
) -> Result<HEKeyTriple, HeError> {
    if kappa < MIN_KAPPA {
        return Err(HeError::KappaTooSmall(kappa));
    }
    let mut seed = vec![0u8; kappa.div_ceil(8)];
    rng.fill_bytes(&mut seed);
    let id = rng.next_u64();
    let sk = SecretKey { id, level, transparent, seed };
    let pk = PublicKey { id, level, transparent, enc_seed: sk.enc_seed() };
    let evk = EvalKey { id, level, pk: pk.clone() };
    Ok(HEKeyTriple { pk, sk, evk, level })
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Leaf {
    transparent: bool,
    nonce: [u8; NONCE_LEN],
    masked: bool,
    tag: [u8; TAG_LEN],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Xor,
    And,
    Not,
    /// Children are `[aux, child]`; `aux` encrypts the bit of key `from`.
    KeySwitch { from: u64 },
}

#[derive(Debug)]
enum NodeKind {
    Leaf(Leaf),
    Gate(Op, Vec<Ciphertext>),
}

#[derive(Debug)]
struct Node {
    level: u32,
    key_id: u64,
    kind: NodeKind,
}

impl Drop for Node {
    fn drop(&mut self) {
        let NodeKind::Gate(_, children) = &mut self.kind else { return };
        let mut stack = std::mem::take(children);
        while let Some(c) = stack.pop() {
            if let Ok(mut n) = Arc::try_unwrap(c.0) {
                if let NodeKind::Gate(_, ch) = &mut n.kind {
                    stack.append(ch);
                }
            }
        }
    }
}

/// An immutable ciphertext; clones share structure.
#[derive(Clone, Debug)]
pub struct Ciphertext(Arc<Node>);

impl PartialEq for Ciphertext {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.to_bytes() == other.to_bytes()
    }
}

impl Eq for Ciphertext {}

pub fn he_enc<R: RngCore>(pk: &PublicKey, bit: bool, rng: &mut R) -> Ciphertext {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let masked = if pk.transparent {
        bit
    } else {
        bit ^ pk.mask_bit() ^ stream_bit(pk.id, &nonce)
    };
    let tag = leaf_tag(pk.id, pk.level, &nonce, masked);
    Ciphertext(Arc::new(Node {
        level: pk.level,
        key_id: pk.id,
        kind: NodeKind::Leaf(Leaf { transparent: pk.transparent, nonce, masked, tag }),
    }))
}

pub fn he_dec(sk: &SecretKey, ct: &Ciphertext) -> Result<bool, HeError> {
    if ct.level() != sk.level {
        return Err(HeError::LevelMismatch { expected: sk.level, found: ct.level() });
    }
    if ct.key_id() != sk.id {
        return Err(HeError::KeyMismatch { expected: sk.id, found: ct.key_id() });
    }
    ct.evaluate(sk.id, sk.key_bit())
}

impl Ciphertext {
    pub fn level(&self) -> u32 {
        self.0.level
    }

    pub fn key_id(&self) -> u64 {
        self.0.key_id
    }

    /// Value under the hypothesis that the top key bit equals `bit`.
    fn evaluate(&self, top: u64, bit: bool) -> Result<bool, HeError> {
        let mut keys: HashMap<u64, bool> = HashMap::from([(top, bit)]);
        let mut memo: HashMap<*const Node, bool> = HashMap::new();
        // (node, index of next child to visit)
        let mut stack: Vec<(&Ciphertext, usize)> = vec![(self, 0)];
        while let Some((ct, next)) = stack.pop() {
            let ptr = Arc::as_ptr(&ct.0);
            if next == 0 && memo.contains_key(&ptr) {
                continue;
            }
            let node = &*ct.0;
            match &node.kind {
                NodeKind::Leaf(leaf) => {
                    let expected = leaf_tag(node.key_id, node.level, &leaf.nonce, leaf.masked);
                    if expected != leaf.tag {
                        return Err(HeError::BadTag);
                    }
                    let v = if leaf.transparent {
                        leaf.masked
                    } else {
                        let k = *keys.get(&node.key_id).ok_or(HeError::KeyMismatch {
                            expected: top,
                            found: node.key_id,
                        })?;
                        leaf.masked ^ k ^ stream_bit(node.key_id, &leaf.nonce)
                    };
                    memo.insert(ptr, v);
                }
                NodeKind::Gate(op, children) => {
                    if next == 1 {
                        if let Op::KeySwitch { from } = op {
                            let k = memo[&Arc::as_ptr(&children[0].0)];
                            if *keys.entry(*from).or_insert(k) != k {
                                return Err(HeError::InconsistentKeySwitch(*from));
                            }
                        }
                    }
                    if next < children.len() {
                        stack.push((ct, next + 1));
                        stack.push((&children[next], 0));
                        continue;
                    }
                    let val = |i: usize| memo[&Arc::as_ptr(&children[i].0)];
                    let v = match op {
                        Op::Xor => val(0) ^ val(1),
                        Op::And => val(0) & val(1),
                        Op::Not => !val(0),
                        Op::KeySwitch { .. } => val(1),
                    };
                    memo.insert(ptr, v);
                }
            }
        }
        Ok(memo[&Arc::as_ptr(&self.0)])
    }

    /// `(g0, g1)` with plaintext `g0 ^ (g1 & k)` for the secret bit `k` of
    /// this ciphertext's key. Needs no secret material.
    pub fn affine_form(&self) -> Result<(bool, bool), HeError> {
        let g0 = self.evaluate(self.key_id(), false)?;
        let g1 = self.evaluate(self.key_id(), true)? ^ g0;
        Ok((g0, g1))
    }

    /// Plaintext of a ciphertext built only from transparent leaves.
    pub fn debug_plaintext(&self) -> Option<bool> {
        let mut all_transparent = true;
        self.visit(|n| {
            if let NodeKind::Leaf(l) = &n.kind {
                all_transparent &= l.transparent;
            }
        });
        if all_transparent {
            self.evaluate(self.key_id(), false).ok()
        } else {
            None
        }
    }

    /// Number of distinct nodes in the DAG.
    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_| n += 1);
        n
    }

    fn visit(&self, mut f: impl FnMut(&Node)) {
        for ct in self.topological() {
            f(&ct.0);
        }
    }

    /// Distinct nodes in children-first order, root last.
    fn topological(&self) -> Vec<&Ciphertext> {
        let mut out = Vec::new();
        let mut seen: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(&Ciphertext, usize)> = vec![(self, 0)];
        while let Some((ct, next)) = stack.pop() {
            let ptr = Arc::as_ptr(&ct.0);
            if next == 0 && seen.contains_key(&ptr) {
                continue;
            }
            let children: &[Ciphertext] = match &ct.0.kind {
                NodeKind::Leaf(_) => &[],
                NodeKind::Gate(_, c) => c,
            };
            if next < children.len() {
                stack.push((ct, next + 1));
                stack.push((&children[next], 0));
            } else if seen.insert(ptr, ()).is_none() {
                out.push(ct);
            }
        }
        out
    }

    fn gate(op: Op, level: u32, key_id: u64, children: Vec<Ciphertext>) -> Ciphertext {
        Ciphertext(Arc::new(Node { level, key_id, kind: NodeKind::Gate(op, children) }))
    }

    fn binary(op: Op, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError> {
        same_key(a, b)?;
        Ok(Self::gate(op, a.level(), a.key_id(), vec![a.clone(), b.clone()]))
    }

    pub fn xor(&self, other: &Ciphertext) -> Result<Ciphertext, HeError> {
        Self::binary(Op::Xor, self, other)
    }

    pub fn and(&self, other: &Ciphertext) -> Result<Ciphertext, HeError> {
        Self::binary(Op::And, self, other)
    }

    pub fn not(&self) -> Ciphertext {
        Self::gate(Op::Not, self.level(), self.key_id(), vec![self.clone()])
    }
}

fn same_key(a: &Ciphertext, b: &Ciphertext) -> Result<(), HeError> {
    if a.level() != b.level() {
        return Err(HeError::LevelMismatch { expected: a.level(), found: b.level() });
    }
    if a.key_id() != b.key_id() {
        return Err(HeError::KeyMismatch { expected: a.key_id(), found: b.key_id() });
    }
    Ok(())
}

/// Encryption of `k_i` under the level `i + 1` public key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySwitchKey {
    pub from_id: u64,
    pub from_level: u32,
    pub ct: Ciphertext,
}

pub fn key_switch_key<R: RngCore>(sk_from: &SecretKey, pk_to: &PublicKey, rng: &mut R) -> KeySwitchKey {
    KeySwitchKey {
        from_id: sk_from.id,
        from_level: sk_from.level,
        ct: he_enc(pk_to, sk_from.key_bit(), rng),
    }
}

pub fn key_switch(ct: &Ciphertext, ksk: &KeySwitchKey) -> Result<Ciphertext, HeError> {
    if ct.level() != ksk.from_level {
        return Err(HeError::LevelMismatch { expected: ksk.from_level, found: ct.level() });
    }
    if ksk.ct.level() != ksk.from_level + 1 {
        return Err(HeError::LevelMismatch { expected: ksk.from_level + 1, found: ksk.ct.level() });
    }
    if ct.key_id() != ksk.from_id {
        return Err(HeError::KeyMismatch { expected: ksk.from_id, found: ct.key_id() });
    }
    Ok(Ciphertext::gate(
        Op::KeySwitch { from: ksk.from_id },
        ksk.ct.level(),
        ksk.ct.key_id(),
        vec![ksk.ct.clone(), ct.clone()],
    ))
}

/// A boolean circuit; each gate refers to earlier gates by index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoolGate {
    Input(usize),
    Const(bool),
    Xor(usize, usize),
    And(usize, usize),
    Not(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolCircuit {
    pub num_inputs: usize,
    pub gates: Vec<BoolGate>,
    pub outputs: Vec<usize>,
}

impl BoolCircuit {
    pub fn new(num_inputs: usize) -> BoolCircuit {
        BoolCircuit { num_inputs, gates: Vec::new(), outputs: Vec::new() }
    }

    pub fn push(&mut self, g: BoolGate) -> usize {
        self.gates.push(g);
        self.gates.len() - 1
    }

    pub fn input(&mut self, i: usize) -> usize {
        self.push(BoolGate::Input(i))
    }

    pub fn constant(&mut self, v: bool) -> usize {
        self.push(BoolGate::Const(v))
    }

    pub fn xor(&mut self, a: usize, b: usize) -> usize {
        self.push(BoolGate::Xor(a, b))
    }

    pub fn and(&mut self, a: usize, b: usize) -> usize {
        self.push(BoolGate::And(a, b))
    }

    pub fn not(&mut self, a: usize) -> usize {
        self.push(BoolGate::Not(a))
    }

    pub fn output(&mut self, g: usize) {
        self.outputs.push(g);
    }

    pub fn validate(&self) -> Result<(), HeError> {
        for (i, g) in self.gates.iter().enumerate() {
            let ok = match *g {
                BoolGate::Input(k) => k < self.num_inputs,
                BoolGate::Const(_) => true,
                BoolGate::Xor(a, b) | BoolGate::And(a, b) => a < i && b < i,
                BoolGate::Not(a) => a < i,
            };
            if !ok {
                return Err(HeError::Circuit(format!("gate {i} has a bad reference")));
            }
        }
        if self.outputs.iter().any(|&o| o >= self.gates.len()) {
            return Err(HeError::Circuit("output out of range".into()));
        }
        Ok(())
    }

    /// Plaintext evaluation.
    pub fn eval_plain(&self, inputs: &[bool]) -> Result<Vec<bool>, HeError> {
        self.validate()?;
        if inputs.len() != self.num_inputs {
            return Err(HeError::Arity { expected: self.num_inputs, found: inputs.len() });
        }
        let mut v: Vec<bool> = Vec::with_capacity(self.gates.len());
        for g in &self.gates {
            v.push(match *g {
                BoolGate::Input(k) => inputs[k],
                BoolGate::Const(c) => c,
                BoolGate::Xor(a, b) => v[a] ^ v[b],
                BoolGate::And(a, b) => v[a] & v[b],
                BoolGate::Not(a) => !v[a],
            });
        }
        Ok(self.outputs.iter().map(|&o| v[o]).collect())
    }
}

#[derive(Clone)]
enum Val {
    Const(bool),
    Ct(Ciphertext),
}

/// Homomorphic evaluation of a single-output circuit.
pub fn he_eval<R: RngCore>(
    evk: &EvalKey,
    circuit: &BoolCircuit,
    inputs: &[Ciphertext],
    rng: &mut R,
) -> Result<Ciphertext, HeError> {
    if circuit.outputs.len() != 1 {
        return Err(HeError::Circuit(format!("expected one output, found {}", circuit.outputs.len())));
    }
    Ok(he_eval_many(evk, circuit, inputs, rng)?.remove(0))
}

/// Homomorphic evaluation; public constants are folded and a constant
/// output is freshly encrypted under the evaluation key's public key.
pub fn he_eval_many<R: RngCore>(
    evk: &EvalKey,
    circuit: &BoolCircuit,
    inputs: &[Ciphertext],
    rng: &mut R,
) -> Result<Vec<Ciphertext>, HeError> {
    circuit.validate()?;
    if inputs.len() != circuit.num_inputs {
        return Err(HeError::Arity { expected: circuit.num_inputs, found: inputs.len() });
    }
    for c in inputs {
        if c.level() != evk.level {
            return Err(HeError::LevelMismatch { expected: evk.level, found: c.level() });
        }
        if c.key_id() != evk.id {
            return Err(HeError::KeyMismatch { expected: evk.id, found: c.key_id() });
        }
    }
    let mut vals: Vec<Val> = Vec::with_capacity(circuit.gates.len());
    for g in &circuit.gates {
        let v = match *g {
            BoolGate::Input(k) => Val::Ct(inputs[k].clone()),
            BoolGate::Const(c) => Val::Const(c),
            BoolGate::Not(a) => match &vals[a] {
                Val::Const(c) => Val::Const(!c),
                Val::Ct(c) => Val::Ct(c.not()),
            },
            BoolGate::Xor(a, b) => match (&vals[a], &vals[b]) {
                (Val::Const(x), Val::Const(y)) => Val::Const(x ^ y),
                (Val::Const(false), Val::Ct(c)) | (Val::Ct(c), Val::Const(false)) => Val::Ct(c.clone()),
                (Val::Const(true), Val::Ct(c)) | (Val::Ct(c), Val::Const(true)) => Val::Ct(c.not()),
                (Val::Ct(x), Val::Ct(y)) => Val::Ct(x.xor(y)?),
            },
            BoolGate::And(a, b) => match (&vals[a], &vals[b]) {
                (Val::Const(x), Val::Const(y)) => Val::Const(x & y),
                (Val::Const(false), _) | (_, Val::Const(false)) => Val::Const(false),
                (Val::Const(true), Val::Ct(c)) | (Val::Ct(c), Val::Const(true)) => Val::Ct(c.clone()),
                (Val::Ct(x), Val::Ct(y)) => Val::Ct(x.and(y)?),
            },
        };
        vals.push(v);
    }
    Ok(circuit
        .outputs
        .iter()
        .map(|&o| match &vals[o] {
            Val::Ct(c) => c.clone(),
            Val::Const(b) => he_enc(&evk.pk, *b, rng),
        })
        .collect())
}

/// Keys for levels `0..=L` plus the switching keys between them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyChain {
    pub kappa: usize,
    pub transparent: bool,
    pub triples: Vec<HEKeyTriple>,
    /// `switch[i]` moves level `i` ciphertexts to level `i + 1`.
    pub switch: Vec<KeySwitchKey>,
}

impl KeyChain {
    pub fn generate<R: RngCore>(
        kappa: usize,
        top_level: u32,
        transparent: bool,
        rng: &mut R,
    ) -> Result<KeyChain, HeError> {
        let mut chain = KeyChain {
            kappa,
            transparent,
            triples: vec![keygen_at(kappa, 0, transparent, rng)?],
            switch: Vec::new(),
        };
        chain.extend_to(top_level, rng)?;
        Ok(chain)
    }

    pub fn top_level(&self) -> u32 {
        self.switch.len() as u32
    }

    /// Adds levels until `top_level` exists.
    pub fn extend_to<R: RngCore>(&mut self, top_level: u32, rng: &mut R) -> Result<(), HeError> {
        while self.top_level() < top_level {
            let next = keygen_at(self.kappa, self.top_level() + 1, self.transparent, rng)?;
            let prev = self.triples.last().expect("level 0 exists");
            self.switch.push(key_switch_key(&prev.sk, &next.pk, rng));
            self.triples.push(next);
        }
        Ok(())
    }

    pub fn triple(&self, level: u32) -> Option<&HEKeyTriple> {
        self.triples.get(level as usize)
    }
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HeError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| HeError::Decode("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8, HeError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, HeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn varint(&mut self) -> Result<u64, HeError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.byte()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(HeError::Decode("varint too long".into()))
    }
}

const TAG_LEAF: u8 = 0;
const TAG_LEAF_TRANSPARENT: u8 = 1;
const TAG_XOR: u8 = 2;
const TAG_AND: u8 = 3;
const TAG_NOT: u8 = 4;
const TAG_SWITCH: u8 = 5;

impl Ciphertext {
    /// Canonical encoding: node count, then per node in children-first
    /// order a tag byte, level varint, key id, and either the leaf fields or
    /// a length-prefixed list of child indices. The last node is the root.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nodes = self.topological();
        let index: HashMap<*const Node, usize> =
            nodes.iter().enumerate().map(|(i, c)| (Arc::as_ptr(&c.0), i)).collect();
        let mut out = Vec::new();
        put_varint(&mut out, nodes.len() as u64);
        for ct in nodes {
            let n = &*ct.0;
            let tag = match &n.kind {
                NodeKind::Leaf(l) if l.transparent => TAG_LEAF_TRANSPARENT,
                NodeKind::Leaf(_) => TAG_LEAF,
                NodeKind::Gate(Op::Xor, _) => TAG_XOR,
                NodeKind::Gate(Op::And, _) => TAG_AND,
                NodeKind::Gate(Op::Not, _) => TAG_NOT,
                NodeKind::Gate(Op::KeySwitch { .. }, _) => TAG_SWITCH,
            };
            out.push(tag);
            put_varint(&mut out, u64::from(n.level));
            out.extend_from_slice(&n.key_id.to_le_bytes());
            match &n.kind {
                NodeKind::Leaf(l) => {
                    out.extend_from_slice(&l.nonce);
                    out.push(l.masked as u8);
                    out.extend_from_slice(&l.tag);
                }
                NodeKind::Gate(op, children) => {
                    if let Op::KeySwitch { from } = op {
                        out.extend_from_slice(&from.to_le_bytes());
                    }
                    put_varint(&mut out, children.len() as u64);
                    for c in children {
                        put_varint(&mut out, index[&Arc::as_ptr(&c.0)] as u64);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Ciphertext, HeError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let count = r.varint()?;
        // every node takes at least 10 bytes
        if count == 0 || count > (bytes.len() / 10) as u64 {
            return Err(HeError::Decode(format!("implausible node count {count}")));
        }
        let mut nodes: Vec<Ciphertext> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag = r.byte()?;
            let level = u32::try_from(r.varint()?).map_err(|_| HeError::Decode("level overflow".into()))?;
            let key_id = r.u64()?;
            let node = match tag {
                TAG_LEAF | TAG_LEAF_TRANSPARENT => {
                    let nonce = r.take(NONCE_LEN)?.try_into().expect("nonce length");
                    let masked = match r.byte()? {
                        0 => false,
                        1 => true,
                        b => return Err(HeError::Decode(format!("masked byte {b}"))),
                    };
                    let tag_bytes = r.take(TAG_LEN)?.try_into().expect("tag length");
                    let leaf = Leaf { transparent: tag == TAG_LEAF_TRANSPARENT, nonce, masked, tag: tag_bytes };
                    Ciphertext(Arc::new(Node { level, key_id, kind: NodeKind::Leaf(leaf) }))
                }
                TAG_XOR | TAG_AND | TAG_NOT | TAG_SWITCH => {
                    let from = if tag == TAG_SWITCH { Some(r.u64()?) } else { None };
                    let n = r.varint()?;
                    let want = if tag == TAG_NOT { 1 } else { 2 };
                    if n != want {
                        return Err(HeError::Decode(format!("tag {tag} needs {want} children, got {n}")));
                    }
                    let mut children = Vec::with_capacity(want as usize);
                    for _ in 0..n {
                        let i = r.varint()? as usize;
                        let c = nodes.get(i).ok_or_else(|| HeError::Decode("forward reference".into()))?;
                        children.push(c.clone());
                    }
                    match (tag, from) {
                        (TAG_XOR, _) | (TAG_AND, _) => {
                            same_key(&children[0], &children[1]).map_err(|e| HeError::Decode(e.to_string()))?;
                        }
                        (TAG_SWITCH, Some(f)) => {
                            let (aux, child) = (&children[0], &children[1]);
                            if child.key_id() != f || aux.level() != child.level() + 1 {
                                return Err(HeError::Decode("inconsistent key switch".into()));
                            }
                        }
                        _ => {}
                    }
                    let expected = if tag == TAG_SWITCH { &children[0] } else { &children[children.len() - 1] };
                    if expected.level() != level || expected.key_id() != key_id {
                        return Err(HeError::Decode("node key or level disagrees with children".into()));
                    }
                    let op = match (tag, from) {
                        (TAG_XOR, _) => Op::Xor,
                        (TAG_AND, _) => Op::And,
                        (TAG_NOT, _) => Op::Not,
                        (_, f) => Op::KeySwitch { from: f.expect("switch has a source") },
                    };
                    Ciphertext::gate(op, level, key_id, children)
                }
                t => return Err(HeError::Decode(format!("unknown node tag {t}"))),
            };
            nodes.push(node);
        }
        if r.pos != bytes.len() {
            return Err(HeError::Decode("trailing bytes".into()));
        }
        Ok(nodes.pop().expect("count > 0"))
    }
}

impl Serialize for Ciphertext {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for Ciphertext {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(s).map_err(serde::de::Error::custom)?;
        Ciphertext::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Encrypts each bit of a slice.
pub fn encrypt_bits<R: RngCore>(pk: &PublicKey, bits: &[bool], rng: &mut R) -> Vec<Ciphertext> {
    bits.iter().map(|b| he_enc(pk, *b, rng)).collect()
}

/// Random bit helper shared by callers that sample key material.
pub fn random_bit<R: RngCore>(rng: &mut R) -> bool {
    rng.gen()
}
