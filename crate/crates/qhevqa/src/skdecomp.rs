//! Solovay–Kitaev synthesis of single-qubit unitaries over {H, T, T†}.
//!
//! Unitaries are handled modulo global phase as unit quaternions
//! `U = w I - i (x X + y Y + z Z)`; `q` and `-q` are the same gate.

use crate::simulator::{Gate, GateKind, C64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

pub const MAX_BASE_LENGTH: usize = 16;
pub const DEFAULT_BASE_LENGTH: usize = 12;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_EPSILON: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkError {
    #[error("base length {0} exceeds the maximum of 16")]
    BaseLength(usize),
    #[error("matrix is not unitary (deviation {0:e})")]
    NotUnitary(f64),
    #[error("target distance {target:e} not reached by depth {depth} (best {best:e})")]
    Unreachable { target: f64, depth: usize, best: f64 },
    #[error("gate {0:?} is not a single-qubit gate")]
    NotSingleQubit(GateKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    H,
    T,
    Tdg,
}

impl Op {
    fn quat(self) -> Quat {
        let (c, s) = ((PI / 8.0).cos(), (PI / 8.0).sin());
        match self {
            Op::H => Quat([0.0, std::f64::consts::FRAC_1_SQRT_2, 0.0, std::f64::consts::FRAC_1_SQRT_2]),
            Op::T => Quat([c, 0.0, 0.0, s]),
            Op::Tdg => Quat([c, 0.0, 0.0, -s]),
        }
    }

    fn inverse(self) -> Op {
        match self {
            Op::H => Op::H,
            Op::T => Op::Tdg,
            Op::Tdg => Op::T,
        }
    }

    pub fn kind(self) -> GateKind {
        match self {
            Op::H => GateKind::H,
            Op::T => GateKind::T,
            Op::Tdg => GateKind::Tdg,
        }
    }
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Quat([f64; 4]);

impl Quat {
    const ID: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    /// Product `self * other` (other applied first).
    fn mul(self, o: Quat) -> Quat {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = o.0;
        Quat([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + w2 * x1 + y1 * z2 - z1 * y2,
            w1 * y2 + w2 * y1 + z1 * x2 - x1 * z2,
            w1 * z2 + w2 * z1 + x1 * y2 - y1 * x2,
        ])
    }

    fn inv(self) -> Quat {
        let [w, x, y, z] = self.0;
        Quat([w, -x, -y, -z])
    }

    fn dot(self, o: Quat) -> f64 {
        self.0.iter().zip(o.0).map(|(a, b)| a * b).sum()
    }

    fn dist(self, o: Quat) -> f64 {
        (1.0 - self.dot(o).abs().min(1.0)).max(0.0).sqrt()
    }

    fn rotation(axis: [f64; 3], angle: f64) -> Quat {
        let (c, s) = ((angle / 2.0).cos(), (angle / 2.0).sin());
        Quat([c, s * axis[0], s * axis[1], s * axis[2]])
    }

    /// Rotation angle in `[0, pi]` and unit axis.
    fn angle_axis(self) -> (f64, [f64; 3]) {
        let q = if self.0[0] < 0.0 { Quat(self.0.map(|v| -v)) } else { self };
        let [w, x, y, z] = q.0;
        let s = (x * x + y * y + z * z).sqrt();
        let angle = 2.0 * s.atan2(w);
        if s < 1e-15 {
            (angle, [0.0, 0.0, 1.0])
        } else {
            (angle, [x / s, y / s, z / s])
        }
    }

    fn from_matrix(m: &[[C64; 2]; 2]) -> Quat {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let r = det.sqrt();
        let (a, b) = (m[0][0] / r, m[0][1] / r);
        Quat([a.re, -b.im, -b.re, -a.im])
    }

    #[cfg(test)]
    fn matrix(self) -> [[C64; 2]; 2] {
        let [w, x, y, z] = self.0;
        [[C64::new(w, -z), C64::new(-y, -x)], [C64::new(y, -x), C64::new(w, z)]]
    }

    /// Sign-canonical rounded key for hashing.
    fn key(self) -> [i64; 4] {
        let sign = self.0.iter().find(|v| v.abs() > 1e-9).map_or(1.0, |v| v.signum());
        self.0.map(|v| (v * sign * 1e8).round() as i64)
    }
}

fn mat_mul(a: &[[C64; 2]; 2], b: &[[C64; 2]; 2]) -> [[C64; 2]; 2] {
    let mut out = [[C64::new(0.0, 0.0); 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Phase-invariant distance `sqrt(1 - |tr(U† V)| / 2)`.
pub fn trace_distance(u: &[[C64; 2]; 2], v: &[[C64; 2]; 2]) -> f64 {
    let mut tr = C64::new(0.0, 0.0);
    for i in 0..2 {
        for j in 0..2 {
            tr += u[j][i].conj() * v[j][i];
        }
    }
    (1.0 - (tr.norm() / 2.0).min(1.0)).max(0.0).sqrt()
}

fn unitarity_error(m: &[[C64; 2]; 2]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let dot: C64 = (0..2).map(|k| m[k][i].conj() * m[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - C64::new(want, 0.0)).norm());
        }
    }
    worst
}

/// An ordered sequence over {H, T, T†}; the first op is applied first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSequence {
    pub ops: Vec<Op>,
    /// Exact product of the ops' matrices.
    pub unitary: [[C64; 2]; 2],
    pub t_count: usize,
    pub tdg_count: usize,
    pub h_count: usize,
}

impl GateSequence {
    pub fn new(ops: Vec<Op>) -> GateSequence {
        let mut unitary = [[C64::new(1.0, 0.0), C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]];
        for op in &ops {
            unitary = mat_mul(&op.kind().matrix().expect("single-qubit op"), &unitary);
        }
        let count = |o: Op| ops.iter().filter(|x| **x == o).count();
        GateSequence { t_count: count(Op::T), tdg_count: count(Op::Tdg), h_count: count(Op::H), unitary, ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn gates(&self, wire: usize) -> Vec<Gate> {
        self.ops.iter().map(|o| Gate::single(o.kind(), wire)).collect()
    }
}

impl fmt::Display for GateSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.ops {
            f.write_str(match op {
                Op::H => "H",
                Op::T => "T",
                Op::Tdg => "T†",
            })?;
        }
        Ok(())
    }
}

/// Cancels `H H`, merges runs of T and T† modulo `T^8 = I` and writes each
/// run in its shortest form.
pub fn simplify(ops: &[Op]) -> Vec<Op> {
    // None = H, Some(k) = T^k
    let mut tokens: Vec<Option<u8>> = Vec::with_capacity(ops.len());
    for op in ops {
        let tok = match op {
            Op::H => None,
            Op::T => Some(1u8),
            Op::Tdg => Some(7u8),
        };
        match (tokens.last().copied(), tok) {
            (Some(None), None) => {
                tokens.pop();
            }
            (Some(Some(k)), Some(j)) => {
                tokens.pop();
                if (k + j) % 8 != 0 {
                    tokens.push(Some((k + j) % 8));
                }
            }
            (_, t) => tokens.push(t),
        }
    }
    let mut ops = Vec::new();
    for t in tokens {
        match t {
            None => ops.push(Op::H),
            Some(k) if k <= 4 => ops.extend(std::iter::repeat_n(Op::T, k as usize)),
            Some(k) => ops.extend(std::iter::repeat_n(Op::Tdg, 8 - k as usize)),
        }
    }
    ops
}

fn inverse_ops(ops: &[Op]) -> Vec<Op> {
    ops.iter().rev().map(|o| o.inverse()).collect()
}

fn ops_quat(ops: &[Op]) -> Quat {
    ops.iter().fold(Quat::ID, |q, op| op.quat().mul(q))
}

/// Shortest sequences for every distinct unitary (modulo phase) reachable
/// with at most `base_length` ops.
#[derive(Clone, Debug)]
pub struct EpsilonNet {
    pub base_length: usize,
    quats: Vec<Quat>,
    seqs: Vec<Vec<Op>>,
}

pub fn build_net(base_length: usize) -> Result<EpsilonNet, SkError> {
    if base_length > MAX_BASE_LENGTH {
        return Err(SkError::BaseLength(base_length));
    }
    let mut seen: HashMap<[i64; 4], ()> = HashMap::from([(Quat::ID.key(), ())]);
    let mut quats = vec![Quat::ID];
    let mut seqs: Vec<Vec<Op>> = vec![Vec::new()];
    let mut frontier = vec![0usize];
    for _ in 0..base_length {
        let mut next = Vec::new();
        for &i in &frontier {
            for op in [Op::H, Op::T, Op::Tdg] {
                if seqs[i].last() == Some(&op.inverse()) {
                    continue;
                }
                let q = op.quat().mul(quats[i]);
                if seen.insert(q.key(), ()).is_some() {
                    continue;
                }
                let mut s = seqs[i].clone();
                s.push(op);
                quats.push(q);
                seqs.push(s);
                next.push(quats.len() - 1);
            }
        }
        frontier = next;
    }
    Ok(EpsilonNet { base_length, quats, seqs })
}

impl EpsilonNet {
    pub fn len(&self) -> usize {
        self.quats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quats.is_empty()
    }

    pub fn entry(&self, i: usize) -> GateSequence {
        GateSequence::new(self.seqs[i].clone())
    }

    fn nearest(&self, q: Quat) -> usize {
        let mut best = (0usize, -1.0f64);
        for (i, e) in self.quats.iter().enumerate() {
            let d = e.dot(q).abs();
            if d > best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Indices of the `k` entries closest to `q`, nearest first.
    fn nearest_k(&self, q: Quat, k: usize) -> Vec<usize> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, e) in self.quats.iter().enumerate() {
            let d = e.dot(q).abs();
            if best.len() < k || d > best[best.len() - 1].0 {
                let pos = best.partition_point(|(b, _)| *b >= d);
                best.insert(pos, (d, i));
                best.truncate(k);
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

/// Twists of the commutator pair about the axis of delta tried at the lowest
/// recursion level, and net candidates kept per factor.
const TWISTS: usize = 16;
const CANDIDATES: usize = 4;
/// Starting approximations tried at the lowest recursion level.
const STARTS: usize = 16;

/// Balanced group commutator: `V W V† W† = delta` for a near-identity delta.
fn group_commutator(delta: Quat) -> (Quat, Quat) {
    let (theta, axis) = delta.angle_axis();
    let s = ((1.0 - (theta / 2.0).cos()) / 2.0).sqrt();
    let phi = 2.0 * s.sqrt().asin();
    let v = Quat::rotation([1.0, 0.0, 0.0], phi);
    let w = Quat::rotation([0.0, 1.0, 0.0], phi);
    let comm = v.mul(w).mul(v.inv()).mul(w.inv());
    let (_, m) = comm.angle_axis();
    let cross = [m[1] * axis[2] - m[2] * axis[1], m[2] * axis[0] - m[0] * axis[2], m[0] * axis[1] - m[1] * axis[0]];
    let cn = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    let cos = (m[0] * axis[0] + m[1] * axis[1] + m[2] * axis[2]).clamp(-1.0, 1.0);
    let rot_axis = if cn < 1e-12 {
        // parallel or antiparallel: any perpendicular axis works
        let p = if m[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let c = [m[1] * p[2] - m[2] * p[1], m[2] * p[0] - m[0] * p[2], m[0] * p[1] - m[1] * p[0]];
        let n = (c[0].powi(2) + c[1].powi(2) + c[2].powi(2)).sqrt();
        [c[0] / n, c[1] / n, c[2] / n]
    } else {
        [cross[0] / cn, cross[1] / cn, cross[2] / cn]
    };
    let angle = cos.acos();
    let candidates = [Quat::rotation(rot_axis, angle), Quat::rotation(rot_axis, -angle)];
    let s = candidates
        .into_iter()
        .min_by(|a, b| a.mul(comm).mul(a.inv()).dist(delta).total_cmp(&b.mul(comm).mul(b.inv()).dist(delta)))
        .expect("two candidates");
    (s.mul(v).mul(s.inv()), s.mul(w).mul(s.inv()))
}

/// Lowest-level commutator: searches twists about the axis of `delta` and
/// near neighbours of each factor for the best full product.
fn base_pair(target: Quat, prev: Quat, delta: Quat, v: Quat, w: Quat, net: &EpsilonNet) -> (f64, Vec<Op>, Vec<Op>) {
    let (_, axis) = delta.angle_axis();
    let mut best = (f64::INFINITY, 0usize, 0usize);
    for t in 0..TWISTS {
        let r = Quat::rotation(axis, 2.0 * PI * t as f64 / TWISTS as f64);
        let vc = net.nearest_k(r.mul(v).mul(r.inv()), CANDIDATES);
        let wc = net.nearest_k(r.mul(w).mul(r.inv()), CANDIDATES);
        for &i in &vc {
            for &j in &wc {
                let (a, b) = (net.quats[i], net.quats[j]);
                let d = a.mul(b).mul(a.inv()).mul(b.inv()).mul(prev).dist(target);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
    }
    (best.0, net.seqs[best.1].clone(), net.seqs[best.2].clone())
}

fn sk_rec(target: Quat, depth: usize, net: &EpsilonNet) -> Vec<Op> {
    if depth == 0 {
        return net.seqs[net.nearest(target)].clone();
    }
    if depth == 1 {
        return base_level(target, net);
    }
    let prev = sk_rec(target, depth - 1, net);
    let prev_q = ops_quat(&prev);
    if prev_q.dist(target) < 1e-12 {
        return prev;
    }
    let (v, w) = group_commutator(target.mul(prev_q.inv()));
    commutator_product(prev, &sk_rec(v, depth - 1, net), &sk_rec(w, depth - 1, net))
}

/// `prev` followed by the commutator `V W V† W†` (applied right to left).
fn commutator_product(prev: Vec<Op>, vs: &[Op], ws: &[Op]) -> Vec<Op> {
    let mut ops = prev;
    ops.extend(inverse_ops(ws));
    ops.extend(inverse_ops(vs));
    ops.extend_from_slice(ws);
    ops.extend_from_slice(vs);
    simplify(&ops)
}

/// First recursion level: the nearest net entry corrected by the best
/// twisted commutator. When that makes no progress, the next nearest entries
/// are tried as starting points too.
fn base_level(target: Quat, net: &EpsilonNet) -> Vec<Op> {
    let starts = net.nearest_k(target, STARTS);
    let d0 = net.quats[starts[0]].dist(target);
    if d0 < 1e-12 {
        return net.seqs[starts[0]].clone();
    }
    let mut best: Option<(f64, usize, Vec<Op>, Vec<Op>)> = None;
    for (i, &start) in starts.iter().enumerate() {
        if i == 1 && best.as_ref().is_some_and(|b| b.0 < d0 - 1e-12) {
            break;
        }
        let prev_q = net.quats[start];
        let delta = target.mul(prev_q.inv());
        let (v, w) = group_commutator(delta);
        let (d, vs, ws) = base_pair(target, prev_q, delta, v, w, net);
        if best.as_ref().is_none_or(|b| d < b.0) {
            best = Some((d, start, vs, ws));
        }
    }
    let (_, start, vs, ws) = best.expect("net is never empty");
    commutator_product(net.seqs[start].clone(), &vs, &ws)
}

/// Approximates `u` with `depth` levels of recursion over `net`.
pub fn sk_decompose(u: &[[C64; 2]; 2], depth: usize, net: &EpsilonNet) -> Result<GateSequence, SkError> {
    let err = unitarity_error(u);
    if err > 1e-10 {
        return Err(SkError::NotUnitary(err));
    }
    Ok(GateSequence::new(sk_rec(Quat::from_matrix(u), depth, net)))
}

/// Single-qubit matrix of a gate kind.
pub fn kind_matrix(kind: GateKind) -> Result<[[C64; 2]; 2], SkError> {
    kind.matrix().ok_or(SkError::NotSingleQubit(kind))
}

/// Decomposition of one rotation, at the smallest depth meeting `epsilon`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationReport {
    pub depth: usize,
    pub distance: f64,
    pub sequence: GateSequence,
}

/// Synthesized circuit, its T+T† count and one report per rotation.
pub type Synthesis = (Vec<Gate>, usize, Vec<(GateKind, RotationReport)>);

#[derive(Clone, Debug)]
pub struct Decomposer {
    pub net: EpsilonNet,
    pub max_depth: usize,
    pub epsilon: f64,
}

impl Decomposer {
    pub fn new(base_length: usize, max_depth: usize, epsilon: f64) -> Result<Decomposer, SkError> {
        Ok(Decomposer { net: build_net(base_length)?, max_depth, epsilon })
    }

    pub fn with_defaults() -> Decomposer {
        Decomposer::new(DEFAULT_BASE_LENGTH, DEFAULT_DEPTH, DEFAULT_EPSILON).expect("default base length is valid")
    }

    pub fn decompose(&self, u: &[[C64; 2]; 2]) -> Result<RotationReport, SkError> {
        let mut best = f64::INFINITY;
        for depth in 0..=self.max_depth {
            let sequence = sk_decompose(u, depth, &self.net)?;
            let distance = trace_distance(u, &sequence.unitary);
            if distance <= self.epsilon {
                return Ok(RotationReport { depth, distance, sequence });
            }
            best = best.min(distance);
        }
        Err(SkError::Unreachable { target: self.epsilon, depth: self.max_depth, best })
    }

    /// Replaces every rotation with its sequence; Clifford and T gates pass
    /// through. Returns the circuit, its T + T† count and one report per
    /// distinct rotation.
    pub fn decompose_circuit(&self, circuit: &[Gate]) -> Result<Synthesis, SkError> {
        let mut distinct: Vec<GateKind> = Vec::new();
        for g in circuit {
            if matches!(g.kind, GateKind::Rx(_) | GateKind::Ry(_) | GateKind::Rz(_)) && !distinct.contains(&g.kind) {
                distinct.push(g.kind);
            }
        }
        let reports: Vec<(GateKind, RotationReport)> = distinct
            .par_iter()
            .map(|k| Ok((*k, self.decompose(&kind_matrix(*k)?)?)))
            .collect::<Result<_, SkError>>()?;
        let mut out = Vec::new();
        for g in circuit {
            match reports.iter().find(|(k, _)| *k == g.kind) {
                Some((_, r)) => out.extend(r.sequence.gates(g.q0)),
                None => out.push(*g),
            }
        }
        let l = out.iter().filter(|g| matches!(g.kind, GateKind::T | GateKind::Tdg)).count();
        Ok((out, l, reports))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::StateVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn net() -> &'static EpsilonNet {
        static NET: OnceLock<EpsilonNet> = OnceLock::new();
        NET.get_or_init(|| build_net(DEFAULT_BASE_LENGTH).unwrap())
    }

    #[test]
    fn axis_rotations_improve_with_depth() {
        let mut r = ChaCha8Rng::seed_from_u64(31);
        let mut improved = 0;
        for i in 0..60 {
            let a = r.gen_range(0.0..std::f64::consts::TAU);
            let kind = [GateKind::Rx(a), GateKind::Ry(a), GateKind::Rz(a)][i % 3];
            let u = kind_matrix(kind).unwrap();
            let d: Vec<f64> = (0..=DEFAULT_DEPTH)
                .map(|k| trace_distance(&u, &sk_decompose(&u, k, net()).unwrap().unitary))
                .collect();
            improved += usize::from(d.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(improved >= 57, "{improved}/60");
    }

    fn random_su2(r: &mut ChaCha8Rng) -> [[C64; 2]; 2] {
        let mut q: [f64; 4] = std::array::from_fn(|_| r.gen::<f64>() - 0.5);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.iter_mut().for_each(|v| *v /= n);
        Quat(q).matrix()
    }

    fn eye() -> [[C64; 2]; 2] {
        kind_matrix(GateKind::Rz(0.0)).unwrap()
    }

    #[test]
    fn distance_examples() {
        let x = kind_matrix(GateKind::X).unwrap();
        let h = kind_matrix(GateKind::H).unwrap();
        assert_eq!(trace_distance(&h, &h), 0.0);
        let phased = h.map(|row| row.map(|v| v * C64::from_polar(1.0, 0.7)));
        assert!(trace_distance(&h, &phased) < 1e-7);
        assert!((trace_distance(&eye(), &x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quaternion_round_trip_matches_matrices() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, b) = (random_su2(&mut r), random_su2(&mut r));
            let prod = Quat::from_matrix(&a).mul(Quat::from_matrix(&b));
            assert!(trace_distance(&prod.matrix(), &mat_mul(&a, &b)) < 1e-7);
        }
        for op in [Op::H, Op::T, Op::Tdg] {
            assert!(trace_distance(&op.quat().matrix(), &kind_matrix(op.kind()).unwrap()) < 1e-7);
        }
    }

    #[test]
    fn length_one_net() {
        let n = build_net(1).unwrap();
        assert_eq!(n.len(), 4);
        let ops: Vec<Vec<Op>> = (0..4).map(|i| n.entry(i).ops).collect();
        assert!(ops.contains(&vec![]) && ops.contains(&vec![Op::H]));
        assert!(ops.contains(&vec![Op::T]) && ops.contains(&vec![Op::Tdg]));
        assert_eq!(build_net(17).unwrap_err(), SkError::BaseLength(17));
    }

    /// Distinct unitaries among all words of length <= l, compared pairwise.
    fn brute_force_count(l: usize) -> usize {
        let mut reps: Vec<[[C64; 2]; 2]> = Vec::new();
        for len in 0..=l {
            for code in 0..3usize.pow(len as u32) {
                let ops: Vec<Op> = (0..len).map(|i| [Op::H, Op::T, Op::Tdg][code / 3usize.pow(i as u32) % 3]).collect();
                let u = GateSequence::new(ops).unitary;
                if !reps.iter().any(|r| trace_distance(r, &u) < 1e-6) {
                    reps.push(u);
                }
            }
        }
        reps.len()
    }

    #[test]
    fn net_counts_match_enumeration() {
        let mut prev = 1;
        for l in 1..=6 {
            let n = build_net(l).unwrap().len();
            assert_eq!(n, brute_force_count(l), "length {l}");
            assert!(n > prev);
            if l > 1 {
                assert!(n - prev < 3usize.pow(l as u32), "length {l}: {} new", n - prev);
            }
            prev = n;
        }
    }

    #[test]
    fn net_entries_match_their_products() {
        let n = net();
        for i in (0..n.len()).step_by(97) {
            let e = n.entry(i);
            assert!(trace_distance(&e.unitary, &n.quats[i].matrix()) < 1e-7);
            assert!(e.len() <= DEFAULT_BASE_LENGTH);
        }
    }

    #[test]
    fn exact_targets() {
        let t = sk_decompose(&kind_matrix(GateKind::T).unwrap(), 0, net()).unwrap();
        assert_eq!(t.ops, vec![Op::T]);
        assert!(trace_distance(&t.unitary, &kind_matrix(GateKind::T).unwrap()) < 1e-7);
        assert!(sk_decompose(&eye(), 2, net()).unwrap().is_empty());
        let bad = [[C64::new(2.0, 0.0), C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]];
        assert!(matches!(sk_decompose(&bad, 1, net()), Err(SkError::NotUnitary(_))));
    }

    #[test]
    fn simplification_preserves_the_unitary() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let ops: Vec<Op> = (0..r.gen_range(0..40)).map(|_| [Op::H, Op::T, Op::Tdg][r.gen_range(0..3)]).collect();
            let s = simplify(&ops);
            assert!(s.len() <= ops.len());
            let (a, b) = (GateSequence::new(ops).unitary, GateSequence::new(s.clone()).unitary);
            assert!(trace_distance(&a, &b) < 1e-7);
            assert_eq!(simplify(&s), s);
        }
    }

    #[test]
    fn accuracy_improves_with_depth() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut improved = 0;
        for _ in 0..100 {
            let u = random_su2(&mut r);
            let d: Vec<f64> = (0..=DEFAULT_DEPTH)
                .map(|k| trace_distance(&u, &sk_decompose(&u, k, net()).unwrap().unitary))
                .collect();
            assert!(d[DEFAULT_DEPTH] <= DEFAULT_EPSILON, "{d:?}");
            improved += usize::from(d.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(improved >= 95, "{improved}/100");
    }

    #[test]
    fn sequences_replay_on_the_simulator() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let u = random_su2(&mut r);
        let s = sk_decompose(&u, 2, net()).unwrap();
        for basis in 0..2 {
            let mut sv = StateVector::basis(1, basis).unwrap();
            sv.apply_all(&s.gates(0)).unwrap();
            for row in 0..2 {
                assert!((sv.amplitudes()[row] - s.unitary[row][basis]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn decomposition_is_deterministic() {
        let u = kind_matrix(GateKind::Ry(1.234)).unwrap();
        assert_eq!(sk_decompose(&u, 2, net()).unwrap(), sk_decompose(&u, 2, net()).unwrap());
    }

    #[test]
    fn circuits_are_decomposed_rotation_by_rotation() {
        let d = Decomposer { net: net().clone(), max_depth: DEFAULT_DEPTH, epsilon: DEFAULT_EPSILON };
        let clifford = vec![Gate::h(0), Gate::cnot(0, 1), Gate::cz(1, 0), Gate::single(GateKind::P, 1)];
        let (out, l, reports) = d.decompose_circuit(&clifford).unwrap();
        assert_eq!(out, clifford);
        assert_eq!(l, 0);
        assert!(reports.is_empty());

        let ansatz = vec![Gate::rx(0, 0.3), Gate::ry(0, -1.1), Gate::rx(1, 0.3), Gate::cnot(0, 1), Gate::ry(1, 2.0)];
        let (out, l, reports) = d.decompose_circuit(&ansatz).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports.iter().all(|(_, r)| r.distance <= DEFAULT_EPSILON));
        assert_eq!(l, out.iter().filter(|g| matches!(g.kind, GateKind::T | GateKind::Tdg)).count());
        assert!(out.iter().any(|g| g.kind == GateKind::Cnot));
    }

    #[test]
    fn rx_557_lands_in_the_expected_count_range() {
        let d = Decomposer { net: net().clone(), max_depth: DEFAULT_DEPTH, epsilon: DEFAULT_EPSILON };
        let r = d.decompose(&kind_matrix(GateKind::Rx(5.57)).unwrap()).unwrap();
        let l = r.sequence.t_count + r.sequence.tdg_count;
        assert!((40..=200).contains(&l), "T+T† = {l}, depth {}, distance {}", r.depth, r.distance);
        assert!(r.distance <= DEFAULT_EPSILON);
    }
}
