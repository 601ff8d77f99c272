//! The invariant suite behind `qhevqa verify`.

use nalgebra::DMatrix;
use qhevqa::pauli_frame::{exhaustive_check, LinearRule, RuleTable};
use qhevqa::qhe_core::{decrypt_state, encrypt, eval_circuit, keygen, t_count};
use qhevqa::rsp_gadget::{averaged_gadget_state, rsp_round, sample_trapdoor, t_gadget_demo, RspMode};
use qhevqa::simulator::{demo_target_p0, maximally_mixed, trace_distance_dm, Gate, StateVector, C64};
use qhevqa::skdecomp::{kind_matrix, Decomposer};
use qhevqa::vqa::{feature_jacobian, GradientMethod, PlainEvaluator, Theta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

pub struct Check {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub tolerance: String,
    pub elapsed: Duration,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }
}

pub struct Options {
    pub seed: u64,
    pub table: RuleTable,
}

impl Options {
    pub fn new(seed: u64, mutate_cnot: bool) -> Options {
        let table = if mutate_cnot {
            // identity: drops the control-to-target propagation
            RuleTable::with_cnot_rule(LinearRule { rows: vec![0b0001, 0b0010, 0b0100, 0b1000] })
        } else {
            RuleTable::standard().clone()
        };
        Options { seed, table }
    }
}

fn timed(name: &'static str, tolerance: &str, f: impl FnOnce() -> (usize, usize)) -> Check {
    let start = Instant::now();
    let (passed, total) = f();
    Check { name, passed, total, tolerance: tolerance.into(), elapsed: start.elapsed() }
}

fn count<I: IntoIterator<Item = bool>>(it: I) -> (usize, usize) {
    it.into_iter().fold((0, 0), |(p, t), ok| (p + usize::from(ok), t + 1))
}

pub fn random_state(n: usize, rng: &mut impl Rng) -> StateVector {
    let amps = (0..1usize << n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect::<Vec<_>>();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    StateVector::from_amplitudes(amps.into_iter().map(|a| a / norm).collect()).expect("normalized")
}

pub fn random_circuit(n: usize, len: usize, max_t: usize, rng: &mut impl Rng) -> Vec<Gate> {
    let mut ts = 0;
    (0..len)
        .map(|_| {
            let w = rng.gen_range(0..n);
            let o = (w + rng.gen_range(1..n)) % n;
            match rng.gen_range(0..10) {
                0 => Gate::x(w),
                1 => Gate::y(w),
                2 => Gate::z(w),
                3 => Gate::p(w),
                4 => Gate::pdg(w),
                5 => Gate::cnot(w, o),
                6 => Gate::cz(w, o),
                7 if ts < max_t => {
                    ts += 1;
                    Gate::t(w)
                }
                8 if ts < max_t => {
                    ts += 1;
                    Gate::tdg(w)
                }
                _ => Gate::h(w),
            }
        })
        .collect()
}

/// Density matrix of `psi` averaged over every Pauli pad on every wire.
pub fn pad_average(psi: &StateVector) -> DMatrix<C64> {
    let n = psi.num_qubits();
    (0..1usize << (2 * n))
        .map(|bits| {
            let mut r = psi.clone();
            for w in 0..n {
                r.apply_pad(w, bits >> (2 * w) & 1 == 1, bits >> (2 * w + 1) & 1 == 1).expect("wire in range");
            }
            r.density_matrix()
        })
        .reduce(|a, b| a + b)
        .expect("at least one pad")
        / C64::new((1usize << (2 * n)) as f64, 0.0)
}

pub fn run(opts: &Options) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();

    checks.push(timed("conjugation tables", "1e-12", || exhaustive_check(&opts.table)));

    checks.push(timed("pad-averaged qubit is I/2", "1e-12", || {
        let mixed = maximally_mixed(1);
        count((0..200).map(|_| trace_distance_dm(&pad_average(&random_state(1, &mut rng)), &mixed) <= 1e-12))
    }));

    checks.push(timed("Enc(|00>) and Enc(psi) agree", "1e-12", || {
        let zero = pad_average(&StateVector::new(2).expect("two qubits"));
        count((0..50).map(|_| trace_distance_dm(&pad_average(&random_state(2, &mut rng)), &zero) <= 1e-12))
    }));

    checks.push(timed("gadget qubits maximally mixed", "1e-12", || {
        let mixed = maximally_mixed(4);
        count([false, true].map(|k| averaged_gadget_state(k).is_ok_and(|m| trace_distance_dm(&m, &mixed) <= 1e-12)))
    }));

    checks.push(timed("remote preparation fidelity", "1e-9", || {
        count((0..20).map(|_| {
            let Ok(tf) = sample_trapdoor(4, 4, &mut rng) else { return false };
            let alpha: Vec<bool> = (0..3).map(|_| rng.gen()).collect();
            rsp_round(&tf, &alpha, &mut rng).is_ok_and(|(t, q)| {
                StateVector::plus_theta(f64::from(t.theta) * FRAC_PI_2).is_ok_and(|want| q.fidelity(&want) >= 1.0 - 1e-9)
            })
        }))
    }));

    checks.push(timed("homomorphic round trip", "1e-9", || {
        count((0..25).map(|_| {
            let c = random_circuit(4, 40, 10, &mut rng);
            let psi = random_state(4, &mut rng);
            let mut run = || -> Option<f64> {
                let (client, ek) = keygen(16, t_count(&c) as u32, RspMode::Ideal, false, &mut rng).ok()?;
                let mut cs = encrypt(client.pk(0).ok()?, &psi, &mut rng).ok()?;
                eval_circuit(&mut cs, &c, &ek, &mut rng).ok()?;
                let mut want = psi.clone();
                want.apply_all(&c).ok()?;
                Some(decrypt_state(&client, &cs).ok()?.fidelity(&want))
            };
            run().is_some_and(|f| f >= 1.0 - 1e-9)
        }))
    }));

    checks.push(timed("T gadget statistics (2048 shots)", "0.024", || match t_gadget_demo(2048, &mut rng) {
        Ok(r) => count([r.direct_p0, r.gadget_p0].map(|p| (p - demo_target_p0()).abs() <= 0.024)),
        Err(_) => (0, 2),
    }));

    checks.push(timed("parameter shift vs central difference", "rel 1e-4, abs 1e-6", || {
        let mut ok = Vec::new();
        for _ in 0..10 {
            let theta: Theta = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)));
            let input = random_state(3, &mut rng);
            let ps = feature_jacobian(&mut PlainEvaluator, &input, &theta, GradientMethod::ParameterShift { alpha: FRAC_PI_2 });
            let cd = feature_jacobian(&mut PlainEvaluator, &input, &theta, GradientMethod::CentralDifference { h: 1e-4 });
            let (Ok(ps), Ok(cd)) = (ps, cd) else {
                ok.push(false);
                continue;
            };
            ok.push(ps.iter().flatten().zip(cd.iter().flatten()).all(|(a, b)| {
                let d = (a - b).abs();
                d <= 1e-6 || d <= 1e-4 * a.abs().max(b.abs())
            }));
        }
        count(ok)
    }));

    checks.push(timed("rotation synthesis within 1e-2", "1e-2", || {
        let d = Decomposer::with_defaults();
        count((0..10).map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let kind = match rng.gen_range(0..3) {
                0 => qhevqa::simulator::GateKind::Rx(angle),
                1 => qhevqa::simulator::GateKind::Ry(angle),
                _ => qhevqa::simulator::GateKind::Rz(angle),
            };
            kind_matrix(kind).is_ok_and(|u| d.decompose(&u).is_ok_and(|r| r.distance <= d.epsilon))
        }))
    }));

    checks
}

pub fn render(checks: &[Check]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<40} {:>9} {:>20} {:>10}  status", "property", "passed", "tolerance", "ms");
    for c in checks {
        let _ = writeln!(
            out,
            "{:<40} {:>9} {:>20} {:>10.1}  {}",
            c.name,
            format!("{}/{}", c.passed, c.total),
            c.tolerance,
            c.elapsed.as_secs_f64() * 1e3,
            if c.ok() { "PASS" } else { "FAIL" }
        );
    }
    out
}
