//! Quantum one-time-pad keys and their propagation through gates.
//!
//! A wire holding `X^a Z^b |psi>` carries the key `(a, b)`. Conjugating the
//! pad by a Clifford gate yields another pad, so each Clifford kind induces
//! a GF(2)-linear map on key bits. Rules are stored as bit-row masks over the
//! input vector `(a1, b1, a2, b2)` (bit 0 is `a1`).
//!
//! The X, Z, H, P, Pdg and CNOT rules are written out; Y and CZ are derived
//! by brute force against the matrix oracle in [`derive_rule`].

use crate::simulator::{Gate, GateKind, C64};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("gate {0:?} is not a Clifford gate")]
    NotClifford(GateKind),
    #[error("wire {wire} out of range for a {width}-wire frame")]
    WireOutOfRange { wire: usize, width: usize },
    #[error("no Pauli pad matches the conjugation of {0:?}")]
    NoRule(GateKind),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PauliKey {
    pub a: bool,
    pub b: bool,
}

impl PauliKey {
    pub fn new(a: bool, b: bool) -> PauliKey {
        PauliKey { a, b }
    }
}

/// Output bit `j` is the parity of `rows[j] & input`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearRule {
    pub rows: Vec<u8>,
}

impl LinearRule {
    pub fn apply(&self, input: u8) -> u8 {
        self.rows
            .iter()
            .enumerate()
            .fold(0, |acc, (j, r)| acc | ((((r & input).count_ones() & 1) as u8) << j))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleTable {
    single: [(GateKind, LinearRule); 6],
    cnot: LinearRule,
    cz: LinearRule,
}

fn identity_rule(width: usize) -> LinearRule {
    LinearRule { rows: (0..width).map(|j| 1u8 << j).collect() }
}

impl RuleTable {
    /// The rules used throughout the crate.
    pub fn standard() -> &'static RuleTable {
        static TABLE: OnceLock<RuleTable> = OnceLock::new();
        TABLE.get_or_init(|| RuleTable {
            single: [
                (GateKind::X, identity_rule(2)),
                (GateKind::Y, derive_rule(GateKind::Y).expect("Y rule")),
                (GateKind::Z, identity_rule(2)),
                // H swaps a and b
                (GateKind::H, LinearRule { rows: vec![0b10, 0b01] }),
                // P, Pdg: (a, b) -> (a, a ^ b)
                (GateKind::P, LinearRule { rows: vec![0b01, 0b11] }),
                (GateKind::Pdg, LinearRule { rows: vec![0b01, 0b11] }),
            ],
            // (a1, b1, a2, b2) -> (a1, b1 ^ b2, a1 ^ a2, b2)
            cnot: LinearRule { rows: vec![0b0001, 0b1010, 0b0101, 0b1000] },
            cz: derive_rule(GateKind::Cz).expect("CZ rule"),
        })
    }

    /// Copy of the standard table with the CNOT rule replaced; a negative
    /// control for the verification suite.
    pub fn with_cnot_rule(rule: LinearRule) -> RuleTable {
        RuleTable { cnot: rule, ..RuleTable::standard().clone() }
    }

    pub fn rule(&self, kind: GateKind) -> Result<&LinearRule, FrameError> {
        match kind {
            GateKind::Cnot => Ok(&self.cnot),
            GateKind::Cz => Ok(&self.cz),
            k => self
                .single
                .iter()
                .find(|(g, _)| *g == k)
                .map(|(_, r)| r)
                .ok_or(FrameError::NotClifford(k)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFrame {
    keys: Vec<PauliKey>,
}

impl KeyFrame {
    pub fn new(width: usize) -> KeyFrame {
        KeyFrame { keys: vec![PauliKey::default(); width] }
    }

    pub fn from_keys(keys: Vec<PauliKey>) -> KeyFrame {
        KeyFrame { keys }
    }

    pub fn keys(&self) -> &[PauliKey] {
        &self.keys
    }

    pub fn width(&self) -> usize {
        self.keys.len()
    }

    pub fn get(&self, wire: usize) -> Result<PauliKey, FrameError> {
        self.keys
            .get(wire)
            .copied()
            .ok_or(FrameError::WireOutOfRange { wire, width: self.keys.len() })
    }

    pub fn set(&mut self, wire: usize, key: PauliKey) -> Result<(), FrameError> {
        let width = self.keys.len();
        let slot = self.keys.get_mut(wire).ok_or(FrameError::WireOutOfRange { wire, width })?;
        *slot = key;
        Ok(())
    }

    pub fn update_clifford(&mut self, gate: &Gate) -> Result<(), FrameError> {
        self.update_with(RuleTable::standard(), gate)
    }

    pub fn update_with(&mut self, table: &RuleTable, gate: &Gate) -> Result<(), FrameError> {
        let rule = table.rule(gate.kind)?;
        let wires = gate.wires();
        let mut input = 0u8;
        for (i, w) in wires.iter().enumerate() {
            let k = self.get(*w)?;
            input |= (u8::from(k.a) | (u8::from(k.b) << 1)) << (2 * i);
        }
        let out = rule.apply(input);
        for (i, w) in wires.iter().enumerate() {
            self.keys[*w] = PauliKey::new(out >> (2 * i) & 1 == 1, out >> (2 * i + 1) & 1 == 1);
        }
        Ok(())
    }

    /// Exponent of the P byproduct left by commuting T past the pad on `wire`.
    pub fn t_byproduct(&self, wire: usize) -> Result<bool, FrameError> {
        Ok(self.get(wire)?.a)
    }
}

fn mat1(kind: GateKind) -> DMatrix<C64> {
    let m = kind.matrix().expect("single-qubit kind");
    DMatrix::from_fn(2, 2, |r, c| m[r][c])
}

/// Matrix of a one- or two-qubit gate on local wires 0 (and 1).
/// Two-qubit gates act with `q0` on local wire 0.
pub fn gate_matrix(kind: GateKind) -> DMatrix<C64> {
    let o = C64::new(1.0, 0.0);
    match kind {
        GateKind::Cnot => {
            // control wire 0, target wire 1: |c t> index c + 2t
            let mut m = DMatrix::from_element(4, 4, C64::new(0.0, 0.0));
            for i in 0..4usize {
                let j = if i & 1 == 1 { i ^ 2 } else { i };
                m[(j, i)] = o;
            }
            m
        }
        GateKind::Cz => DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![o, o, o, -o])),
        k => mat1(k),
    }
}

/// Pad matrix for per-wire keys; wire 0 is the low tensor factor.
pub fn pad_matrix(keys: &[PauliKey]) -> DMatrix<C64> {
    let mut m = DMatrix::from_element(1, 1, C64::new(1.0, 0.0));
    for k in keys {
        let mut p = DMatrix::identity(2, 2);
        if k.b {
            p = mat1(GateKind::Z) * p;
        }
        if k.a {
            p = mat1(GateKind::X) * p;
        }
        m = p.kronecker(&m);
    }
    m
}

/// True if `a = e^{i phi} b` for some phase, entrywise within `tol`.
pub fn equal_up_to_phase(a: &DMatrix<C64>, b: &DMatrix<C64>, tol: f64) -> bool {
    if a.shape() != b.shape() {
        return false;
    }
    let (idx, pivot) = a
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.norm_sqr().total_cmp(&y.1.norm_sqr()))
        .map(|(i, v)| (i, *v))
        .unwrap_or((0, C64::new(0.0, 0.0)));
    if pivot.norm() < 1e-9 {
        return b.iter().all(|v| v.norm() <= tol);
    }
    let phase = b.as_slice()[idx] / pivot;
    if (phase.norm() - 1.0).abs() > tol {
        return false;
    }
    a.iter().zip(b.iter()).all(|(x, y)| (x * phase - y).norm() <= tol)
}

fn keys_from_bits(bits: u8, width: usize) -> Vec<PauliKey> {
    (0..width)
        .map(|i| PauliKey::new(bits >> (2 * i) & 1 == 1, bits >> (2 * i + 1) & 1 == 1))
        .collect()
}

/// Finds the pad `pad'` with `U pad = phase * pad' U` by exhaustive search.
fn conjugate_by_search(kind: GateKind, input: u8) -> Option<u8> {
    let width = kind.arity();
    let u = gate_matrix(kind);
    let lhs = &u * pad_matrix(&keys_from_bits(input, width));
    (0..1u8 << (2 * width)).find(|out| {
        let rhs = pad_matrix(&keys_from_bits(*out, width)) * &u;
        equal_up_to_phase(&lhs, &rhs, 1e-12)
    })
}

/// Derives the key-update rule of a Clifford kind from the matrix oracle by
/// probing each unit key vector.
pub fn derive_rule(kind: GateKind) -> Result<LinearRule, FrameError> {
    if !kind.is_clifford() {
        return Err(FrameError::NotClifford(kind));
    }
    let width = 2 * kind.arity();
    let mut rows = vec![0u8; width];
    for i in 0..width {
        let out = conjugate_by_search(kind, 1 << i).ok_or(FrameError::NoRule(kind))?;
        for (j, row) in rows.iter_mut().enumerate() {
            if out >> j & 1 == 1 {
                *row |= 1 << i;
            }
        }
    }
    Ok(LinearRule { rows })
}

/// Checks the conjugation identity for `kind` on the given keys using the
/// standard rules. For T and Tdg the identity is `T pad = P^a pad T` and
/// `Tdg pad = Pdg^a pad Tdg`.
pub fn verify_conjugation(kind: GateKind, keys: &[PauliKey]) -> bool {
    verify_conjugation_with(RuleTable::standard(), kind, keys)
}

pub fn verify_conjugation_with(table: &RuleTable, kind: GateKind, keys: &[PauliKey]) -> bool {
    if keys.len() != kind.arity() || matches!(kind, GateKind::Rx(_) | GateKind::Ry(_) | GateKind::Rz(_)) {
        return false;
    }
    let u = gate_matrix(kind);
    let lhs = &u * pad_matrix(keys);
    let rhs = match kind {
        GateKind::T | GateKind::Tdg => {
            let byproduct = match (kind, keys[0].a) {
                (_, false) => DMatrix::identity(2, 2),
                (GateKind::T, true) => mat1(GateKind::P),
                _ => mat1(GateKind::Pdg),
            };
            byproduct * pad_matrix(keys) * &u
        }
        _ => {
            let mut frame = KeyFrame::from_keys(keys.to_vec());
            let gate = if kind.arity() == 2 { Gate::two(kind, 0, 1) } else { Gate::single(kind, 0) };
            if frame.update_with(table, &gate).is_err() {
                return false;
            }
            pad_matrix(frame.keys()) * &u
        }
    };
    equal_up_to_phase(&lhs, &rhs, 1e-12)
}

/// Every Clifford kind the frame tracks.
pub const CLIFFORD_KINDS: [GateKind; 8] = [
    GateKind::X,
    GateKind::Y,
    GateKind::Z,
    GateKind::H,
    GateKind::P,
    GateKind::Pdg,
    GateKind::Cnot,
    GateKind::Cz,
];

/// Runs the conjugation identity over every Clifford kind, every key
/// assignment and the T byproduct. Returns `(passed, total)`.
pub fn exhaustive_check(table: &RuleTable) -> (usize, usize) {
    let mut passed = 0;
    let mut total = 0;
    let kinds = CLIFFORD_KINDS.iter().chain(&[GateKind::T, GateKind::Tdg]);
    for kind in kinds {
        let width = kind.arity();
        for bits in 0..1u8 << (2 * width) {
            total += 1;
            if verify_conjugation_with(table, *kind, &keys_from_bits(bits, width)) {
                passed += 1;
            }
        }
    }
    (passed, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::trace_distance_dm;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key(a: u8, b: u8) -> PauliKey {
        PauliKey::new(a == 1, b == 1)
    }

    #[test]
    fn worked_key_updates() {
        let mut f = KeyFrame::from_keys(vec![key(1, 1)]);
        f.update_clifford(&Gate::h(0)).unwrap();
        assert_eq!(f.keys(), &[key(1, 1)]);

        let mut f = KeyFrame::from_keys(vec![key(1, 1), key(1, 1)]);
        f.update_clifford(&Gate::cnot(0, 1)).unwrap();
        assert_eq!(f.keys(), &[key(1, 0), key(0, 1)]);

        let mut f = KeyFrame::from_keys(vec![key(1, 0)]);
        f.update_clifford(&Gate::p(0)).unwrap();
        assert_eq!(f.keys(), &[key(1, 1)]);
    }

    #[test]
    fn paulis_leave_keys_unchanged() {
        for kind in [GateKind::X, GateKind::Y, GateKind::Z] {
            for bits in 0..4u8 {
                let k = keys_from_bits(bits, 1);
                let mut f = KeyFrame::from_keys(k.clone());
                f.update_clifford(&Gate::single(kind, 0)).unwrap();
                assert_eq!(f.keys(), k.as_slice());
                assert!(verify_conjugation(kind, &k));
            }
        }
    }

    #[test]
    fn written_rules_agree_with_derived_rules() {
        let table = RuleTable::standard();
        for kind in CLIFFORD_KINDS {
            assert_eq!(table.rule(kind).unwrap(), &derive_rule(kind).unwrap(), "{kind:?}");
        }
    }

    #[test]
    fn derived_cz_rule_has_cross_terms() {
        // (a1, b1, a2, b2) -> (a1, b1 ^ a2, a2, b2 ^ a1)
        let rule = RuleTable::standard().rule(GateKind::Cz).unwrap();
        for input in 0..16u8 {
            let (a1, b1, a2, b2) = (input & 1, input >> 1 & 1, input >> 2 & 1, input >> 3 & 1);
            let want = a1 | (b1 ^ a2) << 1 | a2 << 2 | (b2 ^ a1) << 3;
            assert_eq!(rule.apply(input), want);
        }
    }

    #[test]
    fn exhaustive_conjugation_passes() {
        let (passed, total) = exhaustive_check(RuleTable::standard());
        // 6 one-qubit kinds * 4 + 2 two-qubit kinds * 16 + T, Tdg * 4
        assert_eq!(total, 6 * 4 + 2 * 16 + 2 * 4);
        assert_eq!(passed, total);
    }

    #[test]
    fn t_byproduct_is_the_x_key() {
        for bits in 0..4u8 {
            let k = keys_from_bits(bits, 1);
            let f = KeyFrame::from_keys(k.clone());
            assert_eq!(f.t_byproduct(0).unwrap(), k[0].a);
            assert!(verify_conjugation(GateKind::T, &k));
            assert!(verify_conjugation(GateKind::Tdg, &k));
        }
        assert!(KeyFrame::new(1).t_byproduct(1).is_err());
    }

    #[test]
    fn wrong_byproduct_is_rejected() {
        // T X = P X T, so claiming no byproduct must fail
        let u = gate_matrix(GateKind::T);
        let pad = pad_matrix(&[key(1, 0)]);
        assert!(!equal_up_to_phase(&(&u * &pad), &(&pad * &u), 1e-12));
    }

    #[test]
    fn mutated_cnot_rule_fails_verification() {
        let bad = RuleTable::with_cnot_rule(LinearRule { rows: vec![0b0001, 0b0010, 0b0101, 0b1000] });
        let (passed, total) = exhaustive_check(&bad);
        assert!(passed < total);
    }

    #[test]
    fn non_clifford_update_errors() {
        let mut f = KeyFrame::new(1);
        assert_eq!(f.update_clifford(&Gate::t(0)), Err(FrameError::NotClifford(GateKind::T)));
        assert!(f.update_clifford(&Gate::h(3)).is_err());
    }

    fn random_density(rng: &mut ChaCha8Rng) -> DMatrix<C64> {
        let g = DMatrix::from_fn(2, 2, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let rho = &g * g.adjoint();
        let tr = rho.trace();
        rho / tr
    }

    #[test]
    fn pad_average_is_maximally_mixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let half = DMatrix::identity(2, 2) * C64::new(0.5, 0.0);
        for _ in 0..50 {
            let rho = random_density(&mut rng);
            let mut avg = DMatrix::from_element(2, 2, C64::new(0.0, 0.0));
            for bits in 0..4u8 {
                let p = pad_matrix(&keys_from_bits(bits, 1));
                avg += &p * &rho * p.adjoint() * C64::new(0.25, 0.0);
            }
            assert!(trace_distance_dm(&avg, &half) <= 1e-12);
        }
    }

    fn embed(kind: GateKind, wires: &[usize], n: usize) -> DMatrix<C64> {
        let dim = 1usize << n;
        let local = gate_matrix(kind);
        DMatrix::from_fn(dim, dim, |r, c| {
            let rest = wires.iter().fold(0, |m, w| m | 1 << w);
            if r & !rest != c & !rest {
                return C64::new(0.0, 0.0);
            }
            let li = |x: usize| wires.iter().enumerate().fold(0, |acc, (j, w)| acc | ((x >> w) & 1) << j);
            local[(li(r), li(c))]
        })
    }

    proptest! {
        #[test]
        fn frame_updates_compose(
            steps in prop::collection::vec((0usize..8, 0usize..3, 1usize..3), 1..12),
            bits in 0u8..64,
        ) {
            let n = 3;
            let keys = keys_from_bits(bits, n);
            let mut frame = KeyFrame::from_keys(keys.clone());
            let mut total = DMatrix::identity(1 << n, 1 << n);
            for (k, w, off) in steps {
                let kind = CLIFFORD_KINDS[k];
                let gate = if kind.arity() == 2 {
                    Gate::two(kind, w, (w + off) % n)
                } else {
                    Gate::single(kind, w)
                };
                frame.update_clifford(&gate).unwrap();
                total = embed(kind, &gate.wires(), n) * total;
            }
            let lhs = &total * pad_matrix(&keys);
            let rhs = pad_matrix(frame.keys()) * &total;
            prop_assert!(equal_up_to_phase(&lhs, &rhs, 1e-10));
        }
    }
}
