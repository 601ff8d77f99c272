//! Dense state-vector simulation of small registers.
//!
//! Wires are little-endian: wire 0 is the least significant bit of an
//! amplitude index. States are compared by fidelity, never by raw
//! amplitudes, because most identities in this crate only hold up to a
//! global phase.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, PI};
use thiserror::Error;

pub type C64 = Complex64;

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 24;

const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("register width {0} is outside 1..=24")]
    Width(usize),
    #[error("wire {wire} out of range for a {num_qubits}-qubit register")]
    WireOutOfRange { wire: usize, num_qubits: usize },
    #[error("two-qubit gate or measurement uses wire {0} twice")]
    DuplicateWire(usize),
    #[error("gate {0:?} needs {1} wire(s)")]
    Arity(GateKind, usize),
    #[error("amplitude vector has length {0}, not a power of two")]
    Length(usize),
    #[error("state norm {0} differs from 1")]
    NotNormalized(f64),
    #[error("theta {0} is not one of 0, pi/2, pi, 3pi/2")]
    InvalidTheta(f64),
    #[error("cannot encode a zero vector")]
    ZeroVector,
    #[error("vector of length {len} does not fit in {qubits} qubits")]
    VectorTooLong { len: usize, qubits: usize },
    #[error("requested outcome has zero probability")]
    ZeroProbability,
    #[error("wire {0} is not in a computational basis state")]
    NotSeparable(usize),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateKind {
    X,
    Y,
    Z,
    P,
    Pdg,
    H,
    T,
    Tdg,
    Cnot,
    Cz,
    Rx(f64),
    Ry(f64),
    Rz(f64),
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            GateKind::Cnot | GateKind::Cz => 2,
            _ => 1,
        }
    }

    pub fn is_clifford(self) -> bool {
        !matches!(
            self,
            GateKind::T | GateKind::Tdg | GateKind::Rx(_) | GateKind::Ry(_) | GateKind::Rz(_)
        )
    }

    pub fn inverse(self) -> GateKind {
        match self {
            GateKind::P => GateKind::Pdg,
            GateKind::Pdg => GateKind::P,
            GateKind::T => GateKind::Tdg,
            GateKind::Tdg => GateKind::T,
            GateKind::Rx(t) => GateKind::Rx(-t),
            GateKind::Ry(t) => GateKind::Ry(-t),
            GateKind::Rz(t) => GateKind::Rz(-t),
            k => k,
        }
    }

    /// 2x2 matrix of a single-qubit kind, row-major.
    pub fn matrix(self) -> Option<[[C64; 2]; 2]> {
        let z = C64::new(0.0, 0.0);
        let o = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        let h = C64::new(FRAC_1_SQRT_2, 0.0);
        let m = match self {
            GateKind::X => [[z, o], [o, z]],
            GateKind::Y => [[z, -i], [i, z]],
            GateKind::Z => [[o, z], [z, -o]],
            GateKind::P => [[o, z], [z, i]],
            GateKind::Pdg => [[o, z], [z, -i]],
            GateKind::H => [[h, h], [h, -h]],
            GateKind::T => [[o, z], [z, C64::from_polar(1.0, FRAC_PI_4)]],
            GateKind::Tdg => [[o, z], [z, C64::from_polar(1.0, -FRAC_PI_4)]],
            GateKind::Rx(t) => {
                let (c, s) = ((t / 2.0).cos(), (t / 2.0).sin());
                [[C64::new(c, 0.0), C64::new(0.0, -s)], [C64::new(0.0, -s), C64::new(c, 0.0)]]
            }
            GateKind::Ry(t) => {
                let (c, s) = ((t / 2.0).cos(), (t / 2.0).sin());
                [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]]
            }
            GateKind::Rz(t) => [
                [C64::from_polar(1.0, -t / 2.0), z],
                [z, C64::from_polar(1.0, t / 2.0)],
            ],
            GateKind::Cnot | GateKind::Cz => return None,
        };
        Some(m)
    }
}

/// A gate bound to wires. For CNOT `q0` is the control and `q1` the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub kind: GateKind,
    pub q0: usize,
    pub q1: Option<usize>,
}

impl Gate {
    pub fn single(kind: GateKind, wire: usize) -> Gate {
        Gate { kind, q0: wire, q1: None }
    }
    pub fn two(kind: GateKind, a: usize, b: usize) -> Gate {
        Gate { kind, q0: a, q1: Some(b) }
    }
    pub fn x(w: usize) -> Gate {
        Gate::single(GateKind::X, w)
    }
    pub fn y(w: usize) -> Gate {
        Gate::single(GateKind::Y, w)
    }
    pub fn z(w: usize) -> Gate {
        Gate::single(GateKind::Z, w)
    }
    pub fn p(w: usize) -> Gate {
        Gate::single(GateKind::P, w)
    }
    pub fn pdg(w: usize) -> Gate {
        Gate::single(GateKind::Pdg, w)
    }
    pub fn h(w: usize) -> Gate {
        Gate::single(GateKind::H, w)
    }
    pub fn t(w: usize) -> Gate {
        Gate::single(GateKind::T, w)
    }
    pub fn tdg(w: usize) -> Gate {
        Gate::single(GateKind::Tdg, w)
    }
    pub fn rx(w: usize, theta: f64) -> Gate {
        Gate::single(GateKind::Rx(theta), w)
    }
    pub fn ry(w: usize, theta: f64) -> Gate {
        Gate::single(GateKind::Ry(theta), w)
    }
    pub fn rz(w: usize, theta: f64) -> Gate {
        Gate::single(GateKind::Rz(theta), w)
    }
    pub fn cnot(control: usize, target: usize) -> Gate {
        Gate::two(GateKind::Cnot, control, target)
    }
    pub fn cz(a: usize, b: usize) -> Gate {
        Gate::two(GateKind::Cz, a, b)
    }

    pub fn wires(&self) -> Vec<usize> {
        match self.q1 {
            Some(b) => vec![self.q0, b],
            None => vec![self.q0],
        }
    }

    pub fn inverse(&self) -> Gate {
        Gate { kind: self.kind.inverse(), ..*self }
    }

    /// Checks arity, distinctness and range against a register width.
    pub fn validate(&self, num_qubits: usize) -> Result<()> {
        let arity = self.kind.arity();
        let given = if self.q1.is_some() { 2 } else { 1 };
        if arity != given {
            return Err(SimError::Arity(self.kind, arity));
        }
        for w in self.wires() {
            check_wire(w, num_qubits)?;
        }
        if self.q1 == Some(self.q0) {
            return Err(SimError::DuplicateWire(self.q0));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

/// Tensor product of single-qubit Paulis on distinct wires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliString {
    factors: Vec<(usize, Pauli)>,
}

impl PauliString {
    pub fn new(factors: Vec<(usize, Pauli)>) -> Result<PauliString> {
        for (i, (w, _)) in factors.iter().enumerate() {
            if factors[..i].iter().any(|(v, _)| v == w) {
                return Err(SimError::DuplicateWire(*w));
            }
        }
        Ok(PauliString { factors })
    }

    /// X on both wires, the shadow-feature observable.
    pub fn xx(a: usize, b: usize) -> Result<PauliString> {
        PauliString::new(vec![(a, Pauli::X), (b, Pauli::X)])
    }

    pub fn factors(&self) -> &[(usize, Pauli)] {
        &self.factors
    }
}

fn check_wire(wire: usize, num_qubits: usize) -> Result<()> {
    if wire >= num_qubits {
        Err(SimError::WireOutOfRange { wire, num_qubits })
    } else {
        Ok(())
    }
}

fn check_width(n: usize) -> Result<()> {
    if n == 0 || n > MAX_QUBITS {
        Err(SimError::Width(n))
    } else {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    num_qubits: usize,
    amps: Vec<C64>,
}

impl StateVector {
    /// The all-zero basis state.
    pub fn new(num_qubits: usize) -> Result<StateVector> {
        StateVector::basis(num_qubits, 0)
    }

    pub fn basis(num_qubits: usize, index: usize) -> Result<StateVector> {
        check_width(num_qubits)?;
        let dim = 1usize << num_qubits;
        if index >= dim {
            return Err(SimError::WireOutOfRange { wire: index, num_qubits });
        }
        let mut amps = vec![C64::new(0.0, 0.0); dim];
        amps[index] = C64::new(1.0, 0.0);
        Ok(StateVector { num_qubits, amps })
    }

    /// Wraps an explicit amplitude vector, which must already be normalized.
    pub fn from_amplitudes(amps: Vec<C64>) -> Result<StateVector> {
        let len = amps.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(SimError::Length(len));
        }
        let num_qubits = len.trailing_zeros() as usize;
        check_width(num_qubits)?;
        let sv = StateVector { num_qubits, amps };
        let norm = sv.norm_sqr();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(SimError::NotNormalized(norm));
        }
        Ok(sv)
    }

    /// Single-qubit state `(|0> + e^{i theta}|1>)/sqrt(2)` for theta a multiple of pi/2.
    pub fn plus_theta(theta: f64) -> Result<StateVector> {
        let k = (0..4)
            .find(|k| (theta - *k as f64 * FRAC_PI_2).abs() < 1e-9)
            .ok_or(SimError::InvalidTheta(theta))?;
        let phase = [
            C64::new(1.0, 0.0),
            C64::new(0.0, 1.0),
            C64::new(-1.0, 0.0),
            C64::new(0.0, -1.0),
        ][k];
        let h = FRAC_1_SQRT_2;
        Ok(StateVector { num_qubits: 1, amps: vec![C64::new(h, 0.0), phase * h] })
    }

    /// Zero-pads `vector` to `2^target_qubits` entries and normalizes it.
    pub fn amplitude_encode(vector: &[f64], target_qubits: usize) -> Result<StateVector> {
        check_width(target_qubits)?;
        let dim = 1usize << target_qubits;
        if vector.len() > dim {
            return Err(SimError::VectorTooLong { len: vector.len(), qubits: target_qubits });
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SimError::ZeroVector);
        }
        let mut amps = vec![C64::new(0.0, 0.0); dim];
        for (a, v) in amps.iter_mut().zip(vector) {
            *a = C64::new(v / norm, 0.0);
        }
        Ok(StateVector { num_qubits: target_qubits, amps })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    /// `|<self|other>|^2`; zero if the widths differ.
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        if self.num_qubits != other.num_qubits {
            return 0.0;
        }
        self.inner(other).norm_sqr()
    }

    /// Appends `other` as the high wires: wire `k` of `other` becomes
    /// wire `self.num_qubits() + k`.
    pub fn tensor(&self, other: &StateVector) -> Result<StateVector> {
        let n = self.num_qubits + other.num_qubits;
        check_width(n)?;
        let mut amps = Vec::with_capacity(1 << n);
        for hi in &other.amps {
            for lo in &self.amps {
                amps.push(lo * hi);
            }
        }
        Ok(StateVector { num_qubits: n, amps })
    }

    pub fn apply(&mut self, gate: &Gate) -> Result<()> {
        gate.validate(self.num_qubits)?;
        match gate.kind {
            GateKind::Cnot => self.apply_cnot(gate.q0, gate.q1.unwrap_or(gate.q0)),
            GateKind::Cz => self.apply_cz(gate.q0, gate.q1.unwrap_or(gate.q0)),
            k => {
                let m = k.matrix().ok_or(SimError::Arity(k, 1))?;
                self.apply_matrix(gate.q0, &m)?;
            }
        }
        Ok(())
    }

    pub fn apply_all<'a>(&mut self, gates: impl IntoIterator<Item = &'a Gate>) -> Result<()> {
        for g in gates {
            self.apply(g)?;
        }
        Ok(())
    }

    /// Applies an arbitrary 2x2 matrix to one wire.
    pub fn apply_matrix(&mut self, wire: usize, m: &[[C64; 2]; 2]) -> Result<()> {
        check_wire(wire, self.num_qubits)?;
        let stride = 1usize << wire;
        let dim = self.amps.len();
        let mut base = 0;
        while base < dim {
            for i in base..base + stride {
                let a0 = self.amps[i];
                let a1 = self.amps[i + stride];
                self.amps[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amps[i + stride] = m[1][0] * a0 + m[1][1] * a1;
            }
            base += 2 * stride;
        }
        Ok(())
    }

    fn apply_cnot(&mut self, control: usize, target: usize) {
        let (cm, tm) = (1usize << control, 1usize << target);
        for i in 0..self.amps.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amps.swap(i, i | tm);
            }
        }
    }

    fn apply_cz(&mut self, a: usize, b: usize) {
        let mask = (1usize << a) | (1usize << b);
        for (i, amp) in self.amps.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
    }

    /// Exchanges two wires.
    pub fn swap_wires(&mut self, a: usize, b: usize) -> Result<()> {
        check_wire(a, self.num_qubits)?;
        check_wire(b, self.num_qubits)?;
        if a != b {
            self.apply_cnot(a, b);
            self.apply_cnot(b, a);
            self.apply_cnot(a, b);
        }
        Ok(())
    }

    /// Applies the one-time pad `X^a Z^b` (Z first, X outermost).
    pub fn apply_pad(&mut self, wire: usize, a: bool, b: bool) -> Result<()> {
        if b {
            self.apply(&Gate::z(wire))?;
        }
        if a {
            self.apply(&Gate::x(wire))?;
        }
        Ok(())
    }

    /// Probability that a Z measurement of `wire` yields 1.
    pub fn prob_one(&self, wire: usize) -> Result<f64> {
        check_wire(wire, self.num_qubits)?;
        let m = 1usize << wire;
        Ok(self
            .amps
            .iter()
            .enumerate()
            .filter(|(i, _)| i & m != 0)
            .map(|(_, a)| a.norm_sqr())
            .sum())
    }

    /// Projects `wire` onto `outcome` in the Z basis and renormalizes.
    /// Returns the probability of the outcome before projection.
    pub fn project(&mut self, wire: usize, outcome: u8) -> Result<f64> {
        let p1 = self.prob_one(wire)?;
        let p = if outcome == 1 { p1 } else { 1.0 - p1 };
        if p <= 1e-15 {
            return Err(SimError::ZeroProbability);
        }
        let m = 1usize << wire;
        let scale = 1.0 / p.sqrt();
        for (i, amp) in self.amps.iter_mut().enumerate() {
            if ((i & m != 0) as u8) == outcome {
                *amp *= scale;
            } else {
                *amp = C64::new(0.0, 0.0);
            }
        }
        Ok(p)
    }

    /// Samples a measurement of `wire`, collapsing the state. The wire stays
    /// in the register; an X-basis measurement leaves it in `|+>` or `|->`.
    pub fn measure<R: Rng + ?Sized>(&mut self, wire: usize, basis: Basis, rng: &mut R) -> Result<u8> {
        check_wire(wire, self.num_qubits)?;
        if basis == Basis::X {
            self.apply(&Gate::h(wire))?;
        }
        let p1 = self.prob_one(wire)?;
        let outcome = u8::from(rng.gen::<f64>() < p1);
        self.project(wire, outcome)?;
        if basis == Basis::X {
            self.apply(&Gate::h(wire))?;
        }
        Ok(outcome)
    }

    /// Drops a wire that is in the basis state `|value>`, shrinking the register.
    pub fn remove_wire(&mut self, wire: usize, value: u8) -> Result<()> {
        check_wire(wire, self.num_qubits)?;
        if self.num_qubits == 1 {
            return Err(SimError::Width(0));
        }
        let m = 1usize << wire;
        let stray: f64 = self
            .amps
            .iter()
            .enumerate()
            .filter(|(i, _)| ((i & m != 0) as u8) != value)
            .map(|(_, a)| a.norm_sqr())
            .sum();
        if stray > 1e-12 {
            return Err(SimError::NotSeparable(wire));
        }
        let low = m - 1;
        let amps = (0..self.amps.len() / 2)
            .map(|j| {
                let i = (j & low) | ((j & !low) << 1) | ((value as usize) << wire);
                self.amps[i]
            })
            .collect();
        self.amps = amps;
        self.num_qubits -= 1;
        Ok(())
    }

    /// Measures `wire` in the Z basis and removes it.
    pub fn measure_and_remove<R: Rng + ?Sized>(&mut self, wire: usize, rng: &mut R) -> Result<u8> {
        let bit = self.measure(wire, Basis::Z, rng)?;
        self.remove_wire(wire, bit)?;
        Ok(bit)
    }

    fn bell_rotate(&mut self, a: usize, b: usize) -> Result<()> {
        check_wire(a, self.num_qubits)?;
        check_wire(b, self.num_qubits)?;
        if a == b {
            return Err(SimError::DuplicateWire(a));
        }
        if self.num_qubits < 3 {
            // Removing both wires must leave at least one qubit.
            return Err(SimError::Width(self.num_qubits.saturating_sub(2)));
        }
        self.apply(&Gate::cnot(a, b))?;
        self.apply(&Gate::h(a))
    }

    fn drop_pair(&mut self, a: usize, b: usize, u: u8, v: u8) -> Result<()> {
        let (hi, lo, vhi, vlo) = if a > b { (a, b, u, v) } else { (b, a, v, u) };
        self.remove_wire(hi, vhi)?;
        self.remove_wire(lo, vlo)
    }

    /// Bell measurement of wires `a` and `b`, returning `(u, v)` where `u` is
    /// the phase bit and `v` the flip bit: `(0,0)` is `|Phi+>`, `(1,0)`
    /// `|Phi->`, `(0,1)` `|Psi+>`, `(1,1)` `|Psi->`. Both wires are removed;
    /// wires above them shift down.
    pub fn bell_measure<R: Rng + ?Sized>(&mut self, a: usize, b: usize, rng: &mut R) -> Result<(u8, u8)> {
        self.bell_rotate(a, b)?;
        let u = self.measure(a, Basis::Z, rng)?;
        let v = self.measure(b, Basis::Z, rng)?;
        self.drop_pair(a, b, u, v)?;
        Ok((u, v))
    }

    /// Post-selects a Bell outcome instead of sampling it. Returns its probability.
    pub fn bell_project(&mut self, a: usize, b: usize, outcome: (u8, u8)) -> Result<f64> {
        self.bell_rotate(a, b)?;
        let pu = self.project(a, outcome.0)?;
        let pv = self.project(b, outcome.1)?;
        self.drop_pair(a, b, outcome.0, outcome.1)?;
        Ok(pu * pv)
    }

    /// `<psi| O |psi>` for a Pauli string.
    pub fn expectation(&self, obs: &PauliString) -> Result<f64> {
        let mut image = self.clone();
        for (w, p) in obs.factors() {
            check_wire(*w, self.num_qubits)?;
            let kind = match p {
                Pauli::I => continue,
                Pauli::X => GateKind::X,
                Pauli::Y => GateKind::Y,
                Pauli::Z => GateKind::Z,
            };
            image.apply(&Gate::single(kind, *w))?;
        }
        Ok(self.inner(&image).re)
    }

    pub fn density_matrix(&self) -> DMatrix<C64> {
        let v = nalgebra::DVector::from_column_slice(&self.amps);
        &v * v.adjoint()
    }

    /// Reduced density matrix on `keep`; `keep[0]` is the least significant
    /// wire of the result.
    pub fn reduced_density_matrix(&self, keep: &[usize]) -> Result<DMatrix<C64>> {
        for (i, w) in keep.iter().enumerate() {
            check_wire(*w, self.num_qubits)?;
            if keep[..i].contains(w) {
                return Err(SimError::DuplicateWire(*w));
            }
        }
        let k = keep.len();
        let rest: Vec<usize> = (0..self.num_qubits).filter(|w| !keep.contains(w)).collect();
        let compose = |kept: usize, env: usize| -> usize {
            let mut idx = 0;
            for (j, w) in keep.iter().enumerate() {
                idx |= ((kept >> j) & 1) << w;
            }
            for (j, w) in rest.iter().enumerate() {
                idx |= ((env >> j) & 1) << w;
            }
            idx
        };
        let dk = 1usize << k;
        let mut rho = DMatrix::from_element(dk, dk, C64::new(0.0, 0.0));
        for env in 0..(1usize << rest.len()) {
            for r in 0..dk {
                let ar = self.amps[compose(r, env)];
                if ar.norm_sqr() == 0.0 {
                    continue;
                }
                for c in 0..dk {
                    rho[(r, c)] += ar * self.amps[compose(c, env)].conj();
                }
            }
        }
        Ok(rho)
    }
}

/// Trace distance `0.5 * ||a - b||_1` between Hermitian matrices.
pub fn trace_distance_dm(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    let diff = a - b;
    let eig = nalgebra::SymmetricEigen::new(diff);
    0.5 * eig.eigenvalues.iter().map(|l| l.abs()).sum::<f64>()
}

/// Maximally mixed state on `num_qubits` qubits.
pub fn maximally_mixed(num_qubits: usize) -> DMatrix<C64> {
    let d = 1usize << num_qubits;
    DMatrix::from_diagonal_element(d, d, C64::new(1.0 / d as f64, 0.0))
}

/// `cos^2(pi/8)`, the Z-basis probability of 0 for `T RX(pi/4)|0>`.
pub fn demo_target_p0() -> f64 {
    (PI / 8.0).cos().powi(2)
}
