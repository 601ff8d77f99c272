//! T-gate gadgets built from remotely prepared qubits.
//!
//! Gadget generation runs the client-driven remote state preparation round
//! with a toy GF(2)-affine two-to-one function, couples four prepared qubits
//! into two padded EPR pairs and attaches their encrypted description.
//! Consumption routes the padded input through zero, one or both pairs with
//! Bell measurements and updates the encrypted Pauli keys homomorphically.
//!
//! The trapdoor family is linear and therefore not collision resistant; it
//! stands in for a real claw-free family only functionally.
//!
//! Layout of a gadget: pair `i` has qubits `s = 2i + 1` and `t = 2i + 2`,
//! index 0 is the input. Pair `label_a` carries `P†^k`, the other pair
//! `P†^(1 ^ k)`, where `k` is the secret bit of the key the gadget serves.

use crate::classical_he::{
    he_enc, he_eval_many, BoolCircuit, BoolGate, Ciphertext, EvalKey, HeError, PublicKey,
};
use crate::simulator::{Basis, Gate, GateKind, SimError, StateVector, MAX_QUBITS};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;
use thiserror::Error;

const TRAPDOOR_ATTEMPTS: usize = 64;
/// RSP rounds allowed while filling the pool for one gadget.
const MAX_POOL_ROUNDS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GadgetError {
    #[error("unsupported trapdoor dimensions n={n}, mu={mu}")]
    Dimensions { n: usize, mu: usize },
    #[error("no trapdoor function found after {0} attempts")]
    TrapdoorSampling(usize),
    #[error("{0:#b} is not in the image of f")]
    NotInImage(u64),
    #[error("preimages agree on the kept bit")]
    DegenerateCollapse,
    #[error("alpha has {found} bits, expected {expected}")]
    AlphaLength { expected: usize, found: usize },
    #[error("could not collect enough prepared qubits")]
    InsufficientRsp,
    #[error("gadget already consumed")]
    Consumed,
    #[error("measurement plan does not match the gadget layout")]
    BadPlan,
    #[error("no Pauli correction reproduces the simulated residual")]
    Underivable,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    He(#[from] HeError),
}

pub type Result<T> = std::result::Result<T, GadgetError>;

fn parity(v: u64) -> bool {
    v.count_ones() & 1 == 1
}

fn bit(v: u64, i: usize) -> bool {
    v >> i & 1 == 1
}

/// Rank of a set of GF(2) row vectors.
pub fn gf2_rank(rows: &[u64]) -> usize {
    let mut rows = rows.to_vec();
    let mut rank = 0;
    for col in 0..64 {
        let Some(p) = (rank..rows.len()).find(|&r| bit(rows[r], col)) else { continue };
        rows.swap(rank, p);
        for r in 0..rows.len() {
            if r != rank && bit(rows[r], col) {
                rows[r] ^= rows[rank];
            }
        }
        rank += 1;
    }
    rank
}

/// One solution of `rows * x = rhs` over GF(2), free variables set to 0.
fn gf2_solve(rows: &[u64], rhs: u64, n: usize) -> Option<u64> {
    let mut aug: Vec<(u64, bool)> = rows.iter().enumerate().map(|(r, a)| (*a, bit(rhs, r))).collect();
    let mut pivots = Vec::new();
    let mut rank = 0;
    for col in 0..n {
        let Some(p) = (rank..aug.len()).find(|&r| bit(aug[r].0, col)) else { continue };
        aug.swap(rank, p);
        for r in 0..aug.len() {
            if r != rank && bit(aug[r].0, col) {
                aug[r].0 ^= aug[rank].0;
                aug[r].1 ^= aug[rank].1;
            }
        }
        pivots.push(col);
        rank += 1;
    }
    if aug[rank..].iter().any(|(_, b)| *b) {
        return None;
    }
    Some(pivots.iter().enumerate().fold(0, |x, (r, col)| x | (u64::from(aug[r].1) << col)))
}

/// The public description `f(x) = A x + c` sent to the server.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicFunction {
    pub n: usize,
    pub mu: usize,
    /// Row `r` of `A`; bit `j` is column `j`.
    pub a: Vec<u64>,
    pub c: u64,
}

impl PublicFunction {
    pub fn eval(&self, x: u64) -> u64 {
        self.a
            .iter()
            .enumerate()
            .fold(0, |y, (r, row)| y | (u64::from(parity(row & x) ^ bit(self.c, r)) << r))
    }
}

/// A two-to-one function with its trapdoor `t`: `f(x) = f(x ^ t)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrapdoorFunction {
    public: PublicFunction,
    trapdoor: u64,
}

pub fn sample_trapdoor<R: RngCore>(n: usize, mu: usize, rng: &mut R) -> Result<TrapdoorFunction> {
    if n < 3 || mu + 1 < n || n >= 64 || mu >= 64 || n + mu > MAX_QUBITS {
        return Err(GadgetError::Dimensions { n, mu });
    }
    let mask = |w: usize| (1u64 << w) - 1;
    for _ in 0..TRAPDOOR_ATTEMPTS {
        let t = (rng.next_u64() & mask(n - 1)) | 1 << (n - 1);
        // B x = (x_j ^ t_j x_{n-1})_j has kernel {0, t}; A = R B with R injective.
        let b_rows: Vec<u64> = (0..n - 1).map(|j| 1 << j | u64::from(bit(t, j)) << (n - 1)).collect();
        let r_rows: Vec<u64> = (0..mu).map(|_| rng.next_u64() & mask(n - 1)).collect();
        let r_cols: Vec<u64> = (0..n - 1)
            .map(|j| r_rows.iter().enumerate().fold(0, |c, (i, row)| c | u64::from(bit(*row, j)) << i))
            .collect();
        if gf2_rank(&r_cols) != n - 1 {
            continue;
        }
        let a = r_rows
            .iter()
            .map(|row| (0..n - 1).filter(|j| bit(*row, *j)).fold(0, |acc, j| acc ^ b_rows[j]))
            .collect();
        let c = rng.next_u64() & mask(mu);
        return Ok(TrapdoorFunction { public: PublicFunction { n, mu, a, c }, trapdoor: t });
    }
    Err(GadgetError::TrapdoorSampling(TRAPDOOR_ATTEMPTS))
}

impl TrapdoorFunction {
    pub fn public(&self) -> &PublicFunction {
        &self.public
    }

    pub fn trapdoor(&self) -> u64 {
        self.trapdoor
    }

    pub fn eval(&self, x: u64) -> u64 {
        self.public.eval(x)
    }

    /// Both preimages of `y`, smaller first.
    pub fn invert(&self, y: u64) -> Result<(u64, u64)> {
        let f = &self.public;
        let x = gf2_solve(&f.a, y ^ f.c, f.n).ok_or(GadgetError::NotInImage(y))?;
        let x2 = x ^ self.trapdoor;
        Ok((x.min(x2), x.max(x2)))
    }
}

/// Client and server views of one preparation round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RspTranscript {
    pub alpha: Vec<bool>,
    pub y: u64,
    pub b: Vec<bool>,
    /// Angle in quarter turns, `0..4`.
    pub theta: u8,
}

impl RspTranscript {
    pub fn theta_radians(&self) -> f64 {
        f64::from(self.theta) * FRAC_PI_2
    }
}

/// Server side of a preparation round: superpose, evaluate `f` into an image
/// register, measure the image, then measure all but the last input qubit in
/// the bases `|0> +- e^{i alpha_j pi/2}|1>`. Returns `(y, b, kept qubit)`.
pub fn rsp_server<R: Rng + ?Sized>(
    f: &PublicFunction,
    alpha: &[bool],
    rng: &mut R,
) -> Result<(u64, Vec<bool>, StateVector)> {
    let (n, mu) = (f.n, f.mu);
    if !(3..64).contains(&n) || mu >= 64 || n + mu > MAX_QUBITS || f.a.len() != mu {
        return Err(GadgetError::Dimensions { n, mu });
    }
    if alpha.len() != n - 1 {
        return Err(GadgetError::AlphaLength { expected: n - 1, found: alpha.len() });
    }
    let mut reg = StateVector::new(n + mu)?;
    for j in 0..n {
        reg.apply(&Gate::h(j))?;
    }
    for (r, row) in f.a.iter().enumerate() {
        for j in (0..n).filter(|j| bit(*row, *j)) {
            reg.apply(&Gate::cnot(j, n + r))?;
        }
        if bit(f.c, r) {
            reg.apply(&Gate::x(n + r))?;
        }
    }
    let mut y = 0u64;
    for r in (0..mu).rev() {
        y |= u64::from(reg.measure_and_remove(n + r, rng)?) << r;
    }
    let mut b = Vec::with_capacity(n - 1);
    for &a in alpha {
        if a {
            reg.apply(&Gate::pdg(0))?;
        }
        reg.apply(&Gate::h(0))?;
        b.push(reg.measure_and_remove(0, rng)? == 1);
    }
    Ok((y, b, reg))
}

/// Client recovery of the prepared angle from the trapdoor.
pub fn recover_theta(tf: &TrapdoorFunction, alpha: &[bool], y: u64, b: &[bool]) -> Result<u8> {
    let n = tf.public.n;
    let (x, x2) = tf.invert(y)?;
    if bit(x, n - 1) == bit(x2, n - 1) {
        return Err(GadgetError::DegenerateCollapse);
    }
    let sum: i64 = (0..n - 1)
        .map(|j| (i64::from(bit(x, j)) - i64::from(bit(x2, j))) * (2 * i64::from(b[j]) + i64::from(alpha[j])))
        .sum();
    let signed = if bit(x, n - 1) { -sum } else { sum };
    Ok(signed.rem_euclid(4) as u8)
}

pub fn rsp_round<R: Rng + ?Sized>(
    tf: &TrapdoorFunction,
    alpha: &[bool],
    rng: &mut R,
) -> Result<(RspTranscript, StateVector)> {
    let (y, b, qubit) = rsp_server(&tf.public, alpha, rng)?;
    let theta = recover_theta(tf, alpha, y, &b)?;
    Ok((RspTranscript { alpha: alpha.to_vec(), y, b, theta }, qubit))
}

/// How prepared qubits are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RspMode {
    /// Prepare `|+_theta>` directly.
    Ideal,
    /// Run the full trapdoor round.
    Faithful { n: usize, mu: usize },
}

impl RspMode {
    pub const FAITHFUL: RspMode = RspMode::Faithful { n: 4, mu: 4 };
}

/// One prepared qubit and its angle in quarter turns.
pub fn prepare_qubit<R: RngCore>(mode: RspMode, rng: &mut R) -> Result<(u8, StateVector)> {
    match mode {
        RspMode::Ideal => {
            let theta = rng.gen_range(0..4u8);
            Ok((theta, StateVector::plus_theta(f64::from(theta) * FRAC_PI_2)?))
        }
        RspMode::Faithful { n, mu } => {
            let tf = sample_trapdoor(n, mu, rng)?;
            let alpha: Vec<bool> = (0..n - 1).map(|_| rng.gen()).collect();
            let (tr, q) = rsp_round(&tf, &alpha, rng)?;
            Ok((tr.theta, q))
        }
    }
}

/// Prepared qubits not yet coupled: angles on the client, states on the
/// server, index-aligned.
#[derive(Clone, Debug, Default)]
pub struct RspPool {
    pub thetas: Vec<u8>,
    pub qubits: Vec<StateVector>,
}

impl RspPool {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn push(&mut self, theta: u8, qubit: StateVector) {
        self.thetas.push(theta);
        self.qubits.push(qubit);
    }

    /// Removes the given entries and returns their states in argument order.
    pub fn take(&mut self, idx: &[usize]) -> Vec<StateVector> {
        let out = idx.iter().map(|&i| self.qubits[i].clone()).collect();
        let mut sorted = idx.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        for i in sorted {
            self.thetas.remove(i);
            self.qubits.remove(i);
        }
        out
    }
}

/// Hidden pads of one pair: the pair holds `X^x Z^z P†^p |Phi+>`, operator on `s`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPads {
    pub p: bool,
    pub x: bool,
    pub z: bool,
}

/// Pads produced by coupling qubits with angles `theta_s` (0 or 2) and `theta_t`.
pub fn pair_pads(theta_s: u8, theta_t: u8) -> PairPads {
    let (z, p) = match theta_t % 4 {
        0 => (false, false),
        1 => (true, true),
        2 => (true, false),
        _ => (false, true),
    };
    PairPads { p, x: theta_s % 4 == 2, z }
}

/// The fixed coupling: CZ, then H on `s`. Returns the pair with `s` on wire 0.
pub fn couple(s: &StateVector, t: &StateVector) -> Result<StateVector> {
    let mut pair = s.tensor(t)?;
    pair.apply(&Gate::cz(0, 1))?;
    pair.apply(&Gate::h(0))?;
    Ok(pair)
}

/// Client choice of which pool entries to couple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coupling {
    /// Pool indices `(s, t)` for pair 0 and pair 1.
    pub pairs: [(usize, usize); 2],
    pub label_a: usize,
    pub pads: [PairPads; 2],
}

/// Picks pool entries so that pair `label_a` gets `p = k` and the other
/// `p = 1 ^ k`. `None` if the pool lacks three `{0, pi}` qubits and one
/// `{pi/2, 3pi/2}` qubit.
pub fn plan_coupling<R: RngCore>(thetas: &[u8], k: bool, rng: &mut R) -> Option<Coupling> {
    let mut even: Vec<usize> = (0..thetas.len()).filter(|i| thetas[*i].is_multiple_of(2)).collect();
    let mut odd: Vec<usize> = (0..thetas.len()).filter(|i| thetas[*i] % 2 == 1).collect();
    if even.len() < 3 || odd.is_empty() {
        return None;
    }
    let label_a = usize::from(rng.gen::<bool>());
    let mut pairs = [(0, 0); 2];
    for (slot, want_p) in [(label_a, k), (1 - label_a, !k)] {
        let s = even.remove(0);
        let t = if want_p { odd.remove(0) } else { even.remove(0) };
        pairs[slot] = (s, t);
    }
    let pads = pairs.map(|(s, t)| pair_pads(thetas[s], thetas[t]));
    Some(Coupling { pairs, label_a, pads })
}

/// Encryptions of each pair's `(p, x, z)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GadgetClassical {
    pub p: [Ciphertext; 2],
    pub x: [Ciphertext; 2],
    pub z: [Ciphertext; 2],
}

impl GadgetClassical {
    pub fn encrypt<R: RngCore>(pk: &PublicKey, pads: &[PairPads; 2], rng: &mut R) -> GadgetClassical {
        let mut enc = |f: fn(&PairPads) -> bool| [0, 1].map(|i| he_enc(pk, f(&pads[i]), rng));
        GadgetClassical { p: enc(|q| q.p), x: enc(|q| q.x), z: enc(|q| q.z) }
    }
}

/// Server-held gadget: two coupled pairs and their encrypted description.
#[derive(Debug)]
pub struct Gadget {
    /// The T gate this gadget serves moves keys from `level` to `level + 1`.
    pub level: u32,
    pub label_a: usize,
    pub classical: GadgetClassical,
    pairs: Vec<StateVector>,
    consumed: AtomicBool,
}

/// Client record of a gadget's hidden layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GadgetSecret {
    pub k: bool,
    pub label_a: usize,
    pub pads: [PairPads; 2],
}

impl Gadget {
    pub fn from_parts(level: u32, label_a: usize, pairs: Vec<StateVector>, classical: GadgetClassical) -> Gadget {
        Gadget { level, label_a, classical, pairs, consumed: AtomicBool::new(false) }
    }

    pub fn pair_states(&self) -> &[StateVector] {
        &self.pairs
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.load(Ordering::SeqCst)
    }
}

/// Couples pool entries into a gadget for the key of secret bit `k`,
/// running further preparation rounds while the pool is short.
pub fn gen_gadget<R: RngCore>(
    k: bool,
    pk_next: &PublicKey,
    pool: &mut RspPool,
    mode: RspMode,
    rng: &mut R,
) -> Result<(Gadget, GadgetSecret)> {
    let level = pk_next.level.checked_sub(1).ok_or(GadgetError::He(HeError::LevelMismatch {
        expected: 1,
        found: 0,
    }))?;
    let mut rounds = 0;
    let coupling = loop {
        if let Some(c) = plan_coupling(&pool.thetas, k, rng) {
            break c;
        }
        if rounds == MAX_POOL_ROUNDS {
            return Err(GadgetError::InsufficientRsp);
        }
        let (theta, q) = prepare_qubit(mode, rng)?;
        pool.push(theta, q);
        rounds += 1;
    };
    let [(s0, t0), (s1, t1)] = coupling.pairs;
    let qs = pool.take(&[s0, t0, s1, t1]);
    let pairs = vec![couple(&qs[0], &qs[1])?, couple(&qs[2], &qs[3])?];
    let classical = GadgetClassical::encrypt(pk_next, &coupling.pads, rng);
    let secret = GadgetSecret { k, label_a: coupling.label_a, pads: coupling.pads };
    Ok((Gadget::from_parts(level, coupling.label_a, pairs, classical), secret))
}

/// Which pairs the chain passes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    /// `a = 0`: no correction needed.
    Skip,
    Single(usize),
    /// First pair, then second pair.
    Double(usize, usize),
}

/// Route for a key that decrypts to `g0 ^ g1 k`.
pub fn route_for(g0: bool, g1: bool, label_a: usize) -> Route {
    let label_b = 1 - label_a;
    match (g0, g1) {
        (false, true) => Route::Single(label_a),
        (true, true) => Route::Single(label_b),
        (true, false) => Route::Double(label_a, label_b),
        (false, false) => Route::Skip,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub route: Route,
    /// Bell measurements in order; pairs not on the route are disposed.
    pub pairs: Vec<(usize, usize)>,
    pub output: usize,
}

fn s_of(i: usize) -> usize {
    2 * i + 1
}

fn t_of(i: usize) -> usize {
    2 * i + 2
}

impl MeasurementPlan {
    pub fn for_route(route: Route) -> Result<MeasurementPlan> {
        let (pairs, output) = match route {
            Route::Skip => (vec![(s_of(0), t_of(0)), (s_of(1), t_of(1))], 0),
            Route::Single(i) if i < 2 => (vec![(0, s_of(i)), (s_of(1 - i), t_of(1 - i))], t_of(i)),
            Route::Double(f, g) if f < 2 && g == 1 - f => (vec![(0, s_of(f)), (t_of(f), t_of(g))], s_of(g)),
            _ => return Err(GadgetError::BadPlan),
        };
        Ok(MeasurementPlan { route, pairs, output })
    }

    /// Every gadget qubit appears exactly once across pairs and output.
    pub fn covers_all(&self) -> bool {
        let mut seen = [0u8; 5];
        for (a, b) in &self.pairs {
            for q in [*a, *b] {
                if q > 4 {
                    return false;
                }
                seen[q] += 1;
            }
        }
        if self.output > 4 {
            return false;
        }
        seen[self.output] += 1;
        seen.iter().all(|c| *c == 1)
    }
}

/// Routing from the public ciphertext of the X key and the public labels.
pub fn gen_measurement(a_tilde: &Ciphertext, gadget: &Gadget) -> Result<MeasurementPlan> {
    if gadget.is_consumed() {
        return Err(GadgetError::Consumed);
    }
    let (g0, g1) = a_tilde.affine_form()?;
    MeasurementPlan::for_route(route_for(g0, g1, gadget.label_a))
}

/// Executes a route on `reg`. The output lands on `wire`; `bell` performs
/// each Bell measurement and removes both wires.
fn run_chain<F>(reg: &mut StateVector, wire: usize, route: Route, pairs: &[StateVector], mut bell: F) -> Result<Vec<(u8, u8)>>
where
    F: FnMut(&mut StateVector, usize, usize) -> Result<(u8, u8)>,
{
    let n = reg.num_qubits();
    match route {
        Route::Skip => Ok(Vec::new()),
        Route::Single(i) => {
            // s = n, t = n + 1; t takes the input's place
            *reg = reg.tensor(&pairs[i])?;
            reg.swap_wires(wire, n + 1)?;
            Ok(vec![bell(reg, n + 1, n)?])
        }
        Route::Double(f, g) => {
            // s_f = n, t_f = n + 1, s_g = n + 2, t_g = n + 3; s_g takes the input's place
            *reg = reg.tensor(&pairs[f])?.tensor(&pairs[g])?;
            reg.swap_wires(wire, n + 2)?;
            let first = bell(reg, n + 2, n)?;
            let second = bell(reg, n, n + 1)?;
            Ok(vec![first, second])
        }
    }
}

/// Bell-measures along the plan; the corrected qubit replaces `input_wire`.
/// Returns the outcomes of the chain measurements.
pub fn consume_gadget<R: Rng + ?Sized>(
    reg: &mut StateVector,
    input_wire: usize,
    gadget: &Gadget,
    plan: &MeasurementPlan,
    rng: &mut R,
) -> Result<Vec<(u8, u8)>> {
    if MeasurementPlan::for_route(plan.route)? != *plan {
        return Err(GadgetError::BadPlan);
    }
    if gadget.consumed.swap(true, Ordering::SeqCst) {
        return Err(GadgetError::Consumed);
    }
    if input_wire >= reg.num_qubits() {
        return Err(SimError::WireOutOfRange { wire: input_wire, num_qubits: reg.num_qubits() }.into());
    }
    run_chain(reg, input_wire, plan.route, &gadget.pairs, |r, a, b| Ok(r.bell_measure(a, b, rng)?))
}

/// Correction `(a', b')` as algebraic normal forms over named variables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectionTable {
    pub vars: Vec<&'static str>,
    /// Monomials as variable bitmasks; `0` is the constant term.
    pub a_anf: Vec<u32>,
    pub b_anf: Vec<u32>,
}

fn moebius(mut f: Vec<bool>, nv: usize) -> Vec<u32> {
    for i in 0..nv {
        for m in 0..f.len() {
            if m >> i & 1 == 1 {
                f[m] ^= f[m ^ (1 << i)];
            }
        }
    }
    (0..f.len() as u32).filter(|m| f[*m as usize]).collect()
}

fn eval_anf(anf: &[u32], assignment: u32) -> bool {
    anf.iter().fold(false, |acc, m| acc ^ (m & assignment == *m))
}

impl CorrectionTable {
    pub fn lookup(&self, assignment: u32) -> (bool, bool) {
        (eval_anf(&self.a_anf, assignment), eval_anf(&self.b_anf, assignment))
    }

    /// Circuit computing `(a', b')`; `sources[v]` maps variable `v` to a
    /// circuit input or a public constant.
    pub fn circuit(&self, sources: &[VarSource], num_inputs: usize) -> BoolCircuit {
        let mut c = BoolCircuit::new(num_inputs);
        let leaves: Vec<usize> = sources
            .iter()
            .map(|s| match s {
                VarSource::Input(i) => c.input(*i),
                VarSource::Const(b) => c.constant(*b),
            })
            .collect();
        for anf in [&self.a_anf, &self.b_anf] {
            let mut acc = c.constant(false);
            for m in anf {
                let mut term = c.constant(true);
                for (v, leaf) in leaves.iter().enumerate() {
                    if m >> v & 1 == 1 {
                        term = c.push(BoolGate::And(term, *leaf));
                    }
                }
                acc = c.xor(acc, term);
            }
            c.output(acc);
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarSource {
    Input(usize),
    Const(bool),
}

/// Variables of the single-pair table: input keys, the pair's pads, outcome.
pub const SINGLE_VARS: [&str; 6] = ["a", "b", "x", "z", "u", "v"];
/// Variables of the two-pair table (`a = 1`, second pair has `p = 1 ^ p1`).
pub const DOUBLE_VARS: [&str; 10] = ["b", "x1", "z1", "x2", "z2", "p1", "u1", "v1", "u2", "v2"];

fn pair_state(pads: PairPads) -> Result<StateVector> {
    let mut pair = StateVector::basis(2, 0)?;
    pair.apply(&Gate::h(0))?;
    pair.apply(&Gate::cnot(0, 1))?;
    if pads.p {
        pair.apply(&Gate::pdg(0))?;
    }
    pair.apply_pad(0, pads.x, pads.z)?;
    Ok(pair)
}

fn probe_state() -> StateVector {
    use crate::simulator::C64;
    StateVector::from_amplitudes(vec![C64::new(0.6, 0.0), C64::from_polar(0.8, 0.7)]).expect("normalized probe")
}

/// Finds the Pauli pad with `out = X^a Z^b target` up to phase.
fn identify_pad(out: &StateVector, target: &StateVector) -> Result<(bool, bool)> {
    for (a, b) in [(false, false), (false, true), (true, false), (true, true)] {
        let mut cand = target.clone();
        cand.apply_pad(0, a, b)?;
        if cand.fidelity(out) > 1.0 - 1e-9 {
            return Ok((a, b));
        }
    }
    Err(GadgetError::Underivable)
}

fn derive_table(gate: GateKind, double: bool) -> Result<CorrectionTable> {
    let phi = probe_state();
    let mut target = phi.clone();
    target.apply(&Gate::single(gate, 0))?;
    let nv = if double { DOUBLE_VARS.len() } else { SINGLE_VARS.len() };
    let mut a_tt = vec![false; 1 << nv];
    let mut b_tt = vec![false; 1 << nv];
    for m in 0..1u32 << nv {
        let v = |i: usize| m >> i & 1 == 1;
        let (a, b, route, pairs, outcomes) = if double {
            let pads1 = PairPads { p: v(5), x: v(1), z: v(2) };
            let pads2 = PairPads { p: !v(5), x: v(3), z: v(4) };
            let out = vec![(v(6) as u8, v(7) as u8), (v(8) as u8, v(9) as u8)];
            (true, v(0), Route::Double(0, 1), vec![pair_state(pads1)?, pair_state(pads2)?], out)
        } else {
            let pads = PairPads { p: v(0), x: v(2), z: v(3) };
            let out = vec![(v(4) as u8, v(5) as u8)];
            (v(0), v(1), Route::Single(0), vec![pair_state(pads)?], out)
        };
        let mut reg = phi.clone();
        reg.apply_pad(0, a, b)?;
        reg.apply(&Gate::single(gate, 0))?;
        let mut forced = outcomes.into_iter();
        // one spectator wire keeps every Bell measurement legal
        let mut reg = reg.tensor(&StateVector::new(1)?)?;
        run_chain(&mut reg, 0, route, &pairs, |r, x, y| {
            let o = forced.next().expect("outcome per measurement");
            r.bell_project(x, y, o)?;
            Ok(o)
        })?;
        reg.remove_wire(1, 0)?;
        let (ca, cb) = identify_pad(&reg, &target)?;
        a_tt[m as usize] = ca;
        b_tt[m as usize] = cb;
    }
    let vars = if double { DOUBLE_VARS.to_vec() } else { SINGLE_VARS.to_vec() };
    Ok(CorrectionTable { vars, a_anf: moebius(a_tt, nv), b_anf: moebius(b_tt, nv) })
}

/// Machine-derived correction table for `gate` (T or Tdg) on a single- or
/// two-pair route.
pub fn correction_table(gate: GateKind, double: bool) -> Result<&'static CorrectionTable> {
    static TABLES: OnceLock<[CorrectionTable; 4]> = OnceLock::new();
    let idx = match (gate, double) {
        (GateKind::T, false) => 0,
        (GateKind::T, true) => 1,
        (GateKind::Tdg, false) => 2,
        (GateKind::Tdg, true) => 3,
        _ => return Err(GadgetError::Underivable),
    };
    let tables = TABLES.get_or_init(|| {
        [(GateKind::T, false), (GateKind::T, true), (GateKind::Tdg, false), (GateKind::Tdg, true)]
            .map(|(g, d)| derive_table(g, d).expect("correction table derivation"))
    });
    Ok(&tables[idx])
}

/// Homomorphic key update after a chain. `a_key` and `b_key` are the wire's
/// keys already switched to the gadget's output level.
pub fn gadget_key_update<R: RngCore>(
    gate: GateKind,
    route: Route,
    outcomes: &[(u8, u8)],
    classical: &GadgetClassical,
    a_key: &Ciphertext,
    b_key: &Ciphertext,
    evk: &EvalKey,
    rng: &mut R,
) -> Result<(Ciphertext, Ciphertext)> {
    let (table, inputs, sources) = match route {
        Route::Skip => return Ok((a_key.clone(), b_key.clone())),
        Route::Single(i) => {
            let [(u, v)] = outcomes else { return Err(GadgetError::BadPlan) };
            let inputs = vec![a_key.clone(), b_key.clone(), classical.x[i].clone(), classical.z[i].clone()];
            let sources = vec![
                VarSource::Input(0),
                VarSource::Input(1),
                VarSource::Input(2),
                VarSource::Input(3),
                VarSource::Const(*u == 1),
                VarSource::Const(*v == 1),
            ];
            (correction_table(gate, false)?, inputs, sources)
        }
        Route::Double(f, g) => {
            let [(u1, v1), (u2, v2)] = outcomes else { return Err(GadgetError::BadPlan) };
            let inputs = vec![
                b_key.clone(),
                classical.x[f].clone(),
                classical.z[f].clone(),
                classical.x[g].clone(),
                classical.z[g].clone(),
                classical.p[f].clone(),
            ];
            let mut sources: Vec<VarSource> = (0..6).map(VarSource::Input).collect();
            sources.extend([*u1, *v1, *u2, *v2].map(|o| VarSource::Const(o == 1)));
            (correction_table(gate, true)?, inputs, sources)
        }
    };
    let circuit = table.circuit(&sources, inputs.len());
    let mut out = he_eval_many(evk, &circuit, &inputs, rng)?;
    let b = out.pop().expect("two outputs");
    let a = out.pop().expect("two outputs");
    Ok((a, b))
}

/// Density matrix of a gadget's four qubits averaged over every angle
/// assignment the client could have used for key bit `k`.
pub fn averaged_gadget_state(k: bool) -> Result<nalgebra::DMatrix<crate::simulator::C64>> {
    let classes = |odd: bool| if odd { [1u8, 3] } else { [0u8, 2] };
    let q = |th: u8| StateVector::plus_theta(f64::from(th) * FRAC_PI_2);
    let mut avg = nalgebra::DMatrix::zeros(16, 16);
    for s0 in [0u8, 2] {
        for t0 in classes(k) {
            for s1 in [0u8, 2] {
                for t1 in classes(!k) {
                    let g = couple(&q(s0)?, &q(t0)?)?.tensor(&couple(&q(s1)?, &q(t1)?)?)?;
                    avg += g.density_matrix();
                }
            }
        }
    }
    Ok(avg / crate::simulator::C64::new(16.0, 0.0))
}

/// Chain outcome `(u1, v1, u2, v2)`, the correction applied and its shot count.
pub type CorrectionCount = ((u8, u8, u8, u8), (bool, bool), usize);

/// Result of the single-T-gate demonstration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoReport {
    pub shots: usize,
    pub direct_p0: f64,
    pub gadget_p0: f64,
    pub analytic_p0: f64,
    /// Shots per chain outcome `(u1, v1, u2, v2)` and the correction applied.
    pub corrections: Vec<CorrectionCount>,
}

/// Input `RX(pi/4)|0>` padded with `a = b = 1`, a T gate, then the
/// two-pair chain through `P†|Phi+>` and `|Phi+>`; Z-measured after the
/// client removes the corrected pad. The direct circuit omits the pad and
/// the gadget.
pub fn t_gadget_demo<R: Rng + ?Sized>(shots: usize, rng: &mut R) -> Result<DemoReport> {
    let mut input = StateVector::new(1)?;
    input.apply(&Gate::rx(0, std::f64::consts::FRAC_PI_4))?;
    let mut direct = input.clone();
    direct.apply(&Gate::t(0))?;
    let plus = StateVector::plus_theta(0.0)?;
    let twisted = StateVector::plus_theta(3.0 * FRAC_PI_2)?;
    let pairs = vec![couple(&plus, &twisted)?, couple(&plus, &plus)?];
    let table = correction_table(GateKind::T, true)?;
    let mut counts = std::collections::BTreeMap::new();
    let (mut direct_zero, mut gadget_zero) = (0usize, 0usize);
    for _ in 0..shots {
        let mut d = direct.clone();
        direct_zero += usize::from(d.measure(0, Basis::Z, rng)? == 0);

        let mut reg = input.clone();
        reg.apply_pad(0, true, true)?;
        reg.apply(&Gate::t(0))?;
        let mut reg = reg.tensor(&StateVector::new(1)?)?;
        let out = run_chain(&mut reg, 0, Route::Double(0, 1), &pairs, |r, a, b| Ok(r.bell_measure(a, b, rng)?))?;
        // variables: b, x1, z1, x2, z2, p1, u1, v1, u2, v2
        let assignment = 1 | 1 << 5 | u32::from(out[0].0) << 6 | u32::from(out[0].1) << 7
            | u32::from(out[1].0) << 8
            | u32::from(out[1].1) << 9;
        let (ca, cb) = table.lookup(assignment);
        reg.apply_pad(0, ca, cb)?;
        gadget_zero += usize::from(reg.measure(0, Basis::Z, rng)? == 0);
        *counts.entry(((out[0].0, out[0].1, out[1].0, out[1].1), (ca, cb))).or_insert(0usize) += 1;
    }
    Ok(DemoReport {
        shots,
        direct_p0: direct_zero as f64 / shots as f64,
        gadget_p0: gadget_zero as f64 / shots as f64,
        analytic_p0: crate::simulator::demo_target_p0(),
        corrections: counts.into_iter().map(|((o, c), n)| (o, c, n)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical_he::{he_dec, key_switch, KeyChain};
    use crate::simulator::{maximally_mixed, trace_distance_dm, C64};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn kernel(f: &PublicFunction) -> Vec<u64> {
        (0..1u64 << f.n).filter(|x| f.a.iter().all(|row| !parity(row & x))).collect()
    }

    #[test]
    fn small_trapdoor_has_rank_two_and_kernel_zero_t() {
        let mut r = rng(1);
        for _ in 0..20 {
            let tf = sample_trapdoor(3, 3, &mut r).unwrap();
            assert_eq!(gf2_rank(&tf.public().a), 2);
            assert_eq!(kernel(tf.public()), vec![0, tf.trapdoor()]);
            assert!(bit(tf.trapdoor(), 2));
        }
    }

    #[test]
    fn every_image_has_two_preimages() {
        let mut r = rng(2);
        for n in 3..=10 {
            let tf = sample_trapdoor(n, n, &mut r).unwrap();
            let mut hits = std::collections::HashMap::new();
            for x in 0..1u64 << n {
                *hits.entry(tf.eval(x)).or_insert(0) += 1;
            }
            assert_eq!(hits.len(), 1 << (n - 1));
            assert!(hits.values().all(|c| *c == 2));
        }
    }

    #[test]
    fn inversion_returns_the_kernel_coset() {
        let mut r = rng(3);
        let tf = sample_trapdoor(6, 7, &mut r).unwrap();
        for x in 0..64u64 {
            let (p, q) = tf.invert(tf.eval(x)).unwrap();
            assert!(p == x || q == x);
            assert_eq!(p ^ q, tf.trapdoor());
        }
    }

    #[test]
    fn bad_dimensions_are_rejected() {
        let mut r = rng(4);
        assert!(matches!(sample_trapdoor(2, 4, &mut r), Err(GadgetError::Dimensions { .. })));
        assert!(matches!(sample_trapdoor(5, 3, &mut r), Err(GadgetError::Dimensions { .. })));
    }

    #[test]
    fn zero_alpha_and_zero_outcomes_give_theta_zero() {
        let mut r = rng(5);
        let tf = sample_trapdoor(4, 4, &mut r).unwrap();
        let y = tf.eval(0b0110);
        assert_eq!(recover_theta(&tf, &[false; 3], y, &[false; 3]).unwrap(), 0);
    }

    #[test]
    fn recovered_theta_matches_the_held_state() {
        let mut r = rng(6);
        for (n, mu) in [(3, 3), (4, 4), (5, 6)] {
            for _ in 0..30 {
                let tf = sample_trapdoor(n, mu, &mut r).unwrap();
                let alpha: Vec<bool> = (0..n - 1).map(|_| r.gen()).collect();
                let (tr, q) = rsp_round(&tf, &alpha, &mut r).unwrap();
                let want = StateVector::plus_theta(tr.theta_radians()).unwrap();
                assert!(q.fidelity(&want) >= 1.0 - 1e-9, "theta {}", tr.theta);
            }
        }
    }

    #[test]
    fn theta_covers_all_quarter_turns() {
        let mut r = rng(7);
        let mut seen = [0usize; 4];
        for _ in 0..200 {
            let (theta, _) = prepare_qubit(RspMode::FAITHFUL, &mut r).unwrap();
            seen[theta as usize] += 1;
        }
        assert!(seen.iter().all(|c| *c > 0), "{seen:?}");
    }

    #[test]
    fn coupling_worked_rows() {
        let plus = StateVector::plus_theta(0.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let phi = couple(&plus, &plus).unwrap();
        let want = [C64::new(h, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(h, 0.0)];
        assert!(phi.amplitudes().iter().zip(want).all(|(a, b)| (a - b).norm() < 1e-12));

        let twisted = couple(&plus, &StateVector::plus_theta(3.0 * FRAC_PI_2).unwrap()).unwrap();
        let want = [C64::new(h, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, -h)];
        assert!(twisted.amplitudes().iter().zip(want).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn coupling_table_all_rows() {
        for ts in [0u8, 2] {
            for tt in 0..4u8 {
                let s = StateVector::plus_theta(f64::from(ts) * FRAC_PI_2).unwrap();
                let t = StateVector::plus_theta(f64::from(tt) * FRAC_PI_2).unwrap();
                let pair = couple(&s, &t).unwrap();
                let want = pair_state(pair_pads(ts, tt)).unwrap();
                assert!(pair.fidelity(&want) >= 1.0 - 1e-12, "{ts} {tt}");
            }
        }
    }

    fn gadget_for(k: bool, label_a: usize, x: [bool; 2], z: [bool; 2], pk: &PublicKey, r: &mut ChaCha8Rng) -> (Gadget, GadgetSecret) {
        let mut pads = [PairPads::default(); 2];
        pads[label_a] = PairPads { p: k, x: x[0], z: z[0] };
        pads[1 - label_a] = PairPads { p: !k, x: x[1], z: z[1] };
        let pairs = pads.iter().map(|p| pair_state(*p).unwrap()).collect();
        let classical = GadgetClassical::encrypt(pk, &pads, r);
        (Gadget::from_parts(pk.level - 1, label_a, pairs, classical), GadgetSecret { k, label_a, pads })
    }

    #[test]
    fn worked_two_pair_plan() {
        let plan = MeasurementPlan::for_route(Route::Double(0, 1)).unwrap();
        assert_eq!(plan.pairs, vec![(0, 1), (2, 4)]);
        assert_eq!(plan.output, 3);
        for route in [Route::Skip, Route::Single(0), Route::Single(1), Route::Double(0, 1), Route::Double(1, 0)] {
            assert!(MeasurementPlan::for_route(route).unwrap().covers_all());
        }
        assert!(MeasurementPlan::for_route(Route::Double(0, 0)).is_err());
    }

    #[test]
    fn plans_depend_only_on_public_data() {
        let mut r = rng(8);
        let chain = KeyChain::generate(16, 1, false, &mut r).unwrap();
        let pk1 = &chain.triples[1].pk;
        let a0 = he_enc(&chain.triples[0].pk, false, &mut r);
        let a1 = he_enc(&chain.triples[0].pk, true, &mut r);
        let mut plans = Vec::new();
        for k in [false, true] {
            for x in [[false, true], [true, true]] {
                let (g, _) = gadget_for(k, 1, x, [k, false], pk1, &mut r);
                plans.push((gen_measurement(&a0, &g).unwrap(), gen_measurement(&a1, &g).unwrap()));
            }
        }
        assert!(plans.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(gen_measurement(&a0, &{ gadget_for(false, 1, [false; 2], [false; 2], pk1, &mut r).0 }).unwrap(), plans[0].0);
        // a fresh leaf depends on k; a cancelled XOR does not
        let cancelled = a0.xor(&a1).unwrap();
        let (g, _) = gadget_for(false, 0, [false; 2], [false; 2], pk1, &mut r);
        let p_leaf = gen_measurement(&a0, &g).unwrap();
        let p_xor = gen_measurement(&cancelled, &g).unwrap();
        assert!(matches!(p_leaf.route, Route::Single(_)));
        assert!(matches!(p_xor.route, Route::Double(..)));
        assert!(p_leaf.covers_all() && p_xor.covers_all());
    }

    #[test]
    fn gadgets_are_single_use() {
        let mut r = rng(9);
        let chain = KeyChain::generate(16, 1, false, &mut r).unwrap();
        let (g, _) = gadget_for(true, 0, [false; 2], [false; 2], &chain.triples[1].pk, &mut r);
        let plan = MeasurementPlan::for_route(Route::Single(0)).unwrap();
        let mut reg = StateVector::new(1).unwrap();
        consume_gadget(&mut reg, 0, &g, &plan, &mut r).unwrap();
        assert_eq!(reg.num_qubits(), 1);
        assert_eq!(consume_gadget(&mut reg, 0, &g, &plan, &mut r), Err(GadgetError::Consumed));
        let a = he_enc(&chain.triples[0].pk, true, &mut r);
        assert_eq!(gen_measurement(&a, &g), Err(GadgetError::Consumed));
    }

    fn teleport_through(pads: PairPads, outcome: (u8, u8)) -> StateVector {
        let mut reg = probe_state().tensor(&StateVector::new(1).unwrap()).unwrap();
        let pairs = vec![pair_state(pads).unwrap()];
        run_chain(&mut reg, 0, Route::Single(0), &pairs, |r, a, b| {
            r.bell_project(a, b, outcome)?;
            Ok(outcome)
        })
        .unwrap();
        reg.remove_wire(1, 0).unwrap();
        reg
    }

    #[test]
    fn phi_plus_through_a_twisted_pair_leaves_pdg() {
        let out = teleport_through(PairPads { p: true, x: false, z: false }, (0, 0));
        let mut want = probe_state();
        want.apply(&Gate::pdg(0)).unwrap();
        assert!(out.fidelity(&want) > 1.0 - 1e-12);
    }

    #[test]
    fn flip_outcome_through_a_twisted_pair_needs_xz() {
        // the text's Phi- row is the flip-bit outcome in this labelling
        let out = teleport_through(PairPads { p: true, x: false, z: false }, (0, 1));
        let mut want = probe_state();
        want.apply(&Gate::pdg(0)).unwrap();
        assert_eq!(identify_pad(&out, &want).unwrap(), (true, true));
    }

    #[test]
    fn tables_are_consistent_with_simple_cases() {
        let t = correction_table(GateKind::T, false).unwrap();
        // all-zero outcome, pads and keys: nothing to correct
        assert_eq!(t.lookup(0), (false, false));
        for gate in [GateKind::T, GateKind::Tdg] {
            for double in [false, true] {
                let table = correction_table(gate, double).unwrap();
                assert!(table.a_anf.iter().chain(&table.b_anf).all(|m| *m < 1 << table.vars.len()));
            }
        }
        assert!(correction_table(GateKind::H, false).is_err());
    }

    #[test]
    fn anf_round_trips_truth_tables() {
        let mut r = rng(10);
        for nv in 1..8 {
            let tt: Vec<bool> = (0..1 << nv).map(|_| r.gen()).collect();
            let anf = moebius(tt.clone(), nv);
            for (m, want) in tt.iter().enumerate() {
                assert_eq!(eval_anf(&anf, m as u32), *want);
            }
        }
    }

    /// Full contract: pad, gate, route from the encrypted key, consume,
    /// switch and update keys homomorphically, decrypt and undo the pad.
    fn gadget_round(gate: GateKind, a: bool, b: bool, k_override: Option<bool>, xor_key: bool, r: &mut ChaCha8Rng) -> f64 {
        let chain = loop {
            let c = KeyChain::generate(16, 1, false, r).unwrap();
            if k_override.is_none_or(|k| c.triples[0].sk.key_bit() == k) {
                break c;
            }
        };
        let (k0, k1) = (&chain.triples[0], &chain.triples[1]);
        let phi = StateVector::from_amplitudes({
            let (th, ph): (f64, f64) = (r.gen_range(0.0..std::f64::consts::PI), r.gen_range(0.0..std::f64::consts::TAU));
            vec![C64::new((th / 2.0).cos(), 0.0), C64::from_polar((th / 2.0).sin(), ph)]
        })
        .unwrap();
        let mut reg = phi.clone();
        reg.apply_pad(0, a, b).unwrap();
        reg.apply(&Gate::single(gate, 0)).unwrap();
        // an extra spectator wire stays untouched
        let mut reg = reg.tensor(&spectator()).unwrap();
        let a_ct = if xor_key {
            // a ^ 0 ^ 0 built from two leaves cancels the key dependence
            let z = he_enc(&k0.pk, false, r);
            he_enc(&k0.pk, a, r).xor(&z).unwrap().xor(&z).unwrap()
        } else {
            he_enc(&k0.pk, a, r)
        };
        let b_ct = he_enc(&k0.pk, b, r);
        let (g, _) = {
            let mut pool = RspPool::default();
            gen_gadget(k0.sk.key_bit(), &k1.pk, &mut pool, RspMode::Ideal, r).unwrap()
        };
        let plan = gen_measurement(&a_ct, &g).unwrap();
        let outcomes = consume_gadget(&mut reg, 0, &g, &plan, r).unwrap();
        let a1 = key_switch(&a_ct, &chain.switch[0]).unwrap();
        let b1 = key_switch(&b_ct, &chain.switch[0]).unwrap();
        let (na, nb) = gadget_key_update(gate, plan.route, &outcomes, &g.classical, &a1, &b1, &k1.evk, r).unwrap();
        let (da, db) = (he_dec(&k1.sk, &na).unwrap(), he_dec(&k1.sk, &nb).unwrap());
        reg.apply_pad(0, da, db).unwrap();
        let mut want = phi;
        want.apply(&Gate::single(gate, 0)).unwrap();
        let want = want.tensor(&spectator()).unwrap();
        reg.fidelity(&want)
    }

    fn spectator() -> StateVector {
        let mut s = StateVector::new(1).unwrap();
        s.apply(&Gate::rx(0, 0.3)).unwrap();
        s
    }

    #[test]
    fn end_to_end_gadget_contract() {
        let mut r = rng(11);
        for i in 0..100 {
            let gate = if i % 2 == 0 { GateKind::T } else { GateKind::Tdg };
            let (a, b) = (r.gen(), r.gen());
            let f = gadget_round(gate, a, b, None, i % 3 == 0, &mut r);
            assert!(f >= 1.0 - 1e-9, "round {i}: fidelity {f}");
        }
    }

    #[test]
    fn every_route_and_key_combination_corrects() {
        let mut r = rng(12);
        for gate in [GateKind::T, GateKind::Tdg] {
            for a in [false, true] {
                for b in [false, true] {
                    for k in [false, true] {
                        for xor_key in [false, true] {
                            for _ in 0..4 {
                                let f = gadget_round(gate, a, b, Some(k), xor_key, &mut r);
                                assert!(f >= 1.0 - 1e-9, "{gate:?} a={a} b={b} k={k} xor={xor_key}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn exhaustive_tables_undo_the_simulated_residual() {
        // independent of the derivation: sample outcomes for real and check
        // that the table's correction restores the target for every
        // assignment of keys and pads
        let mut r = rng(13);
        let phi = probe_state();
        for gate in [GateKind::T, GateKind::Tdg] {
            let mut target = phi.clone();
            target.apply(&Gate::single(gate, 0)).unwrap();
            let single = correction_table(gate, false).unwrap();
            for m in 0..16u32 {
                let (a, b, x, z) = (m & 1 == 1, m >> 1 & 1 == 1, m >> 2 & 1 == 1, m >> 3 & 1 == 1);
                for _ in 0..8 {
                    let mut reg = phi.clone();
                    reg.apply_pad(0, a, b).unwrap();
                    reg.apply(&Gate::single(gate, 0)).unwrap();
                    let mut reg = reg.tensor(&StateVector::new(1).unwrap()).unwrap();
                    let pairs = vec![pair_state(PairPads { p: a, x, z }).unwrap()];
                    let out = run_chain(&mut reg, 0, Route::Single(0), &pairs, |s, p, q| Ok(s.bell_measure(p, q, &mut r)?)).unwrap();
                    let assignment = m | u32::from(out[0].0) << 4 | u32::from(out[0].1) << 5;
                    let (ca, cb) = single.lookup(assignment);
                    reg.apply_pad(0, ca, cb).unwrap();
                    reg.remove_wire(1, 0).unwrap();
                    assert!(reg.fidelity(&target) > 1.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn gadget_qubits_look_maximally_mixed() {
        let mixed = maximally_mixed(4);
        for k in [false, true] {
            let mut avg = DMatrix::from_element(16, 16, C64::new(0.0, 0.0));
            let classes = |p: bool| if p { [1u8, 3] } else { [0u8, 2] };
            let mut count = 0.0;
            for s0 in [0u8, 2] {
                for t0 in classes(k) {
                    for s1 in [0u8, 2] {
                        for t1 in classes(!k) {
                            let q = |th: u8| StateVector::plus_theta(f64::from(th) * FRAC_PI_2).unwrap();
                            let g = couple(&q(s0), &q(t0)).unwrap().tensor(&couple(&q(s1), &q(t1)).unwrap()).unwrap();
                            avg += g.density_matrix();
                            count += 1.0;
                        }
                    }
                }
            }
            avg /= C64::new(count, 0.0);
            assert!(trace_distance_dm(&avg, &mixed) <= 1e-12);
            assert!(trace_distance_dm(&averaged_gadget_state(k).unwrap(), &avg) <= 1e-12);
        }
    }

    #[test]
    fn demo_reproduces_the_reference_probability() {
        let mut r = rng(14);
        let report = t_gadget_demo(2048, &mut r).unwrap();
        assert!((report.direct_p0 - 0.85355).abs() <= 0.024, "{}", report.direct_p0);
        assert!((report.gadget_p0 - 0.85355).abs() <= 0.024, "{}", report.gadget_p0);
        assert_eq!(report.corrections.iter().map(|c| c.2).sum::<usize>(), 2048);
    }

    #[test]
    fn pool_resamples_until_coupling_is_possible() {
        let mut r = rng(15);
        let chain = KeyChain::generate(16, 1, false, &mut r).unwrap();
        let mut pool = RspPool::default();
        let (g, secret) = gen_gadget(true, &chain.triples[1].pk, &mut pool, RspMode::FAITHFUL, &mut r).unwrap();
        assert_eq!(g.pair_states().len(), 2);
        assert!(secret.pads[secret.label_a].p);
        assert!(!secret.pads[1 - secret.label_a].p);
        for i in 0..2 {
            let want = pair_state(secret.pads[i]).unwrap();
            assert!(g.pair_states()[i].fidelity(&want) > 1.0 - 1e-9);
            assert_eq!(he_dec(&chain.triples[1].sk, &g.classical.p[i]).unwrap(), secret.pads[i].p);
        }
    }
}
