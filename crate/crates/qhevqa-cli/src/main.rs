mod config;
mod verify;

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use config::{Axis, Cli, Command, FileConfig, RunManifest, Settings, TransportKind};
use qhevqa::protocol::{self, ServerReport};
use qhevqa::rsp_gadget::t_gadget_demo;
use qhevqa::simulator::{GateKind, C64};
use qhevqa::skdecomp::{kind_matrix, Decomposer, DEFAULT_BASE_LENGTH, DEFAULT_DEPTH};
use qhevqa::vqa::{self, LabeledDataset, Mode, ShadowModel, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::net::TcpListener;
use std::path::Path;
use std::process::ExitCode;

/// Exit code for a missing or unreadable dataset.
const EXIT_DATASET: u8 = 2;

/// Reference tallies (T, T†, H) for RX(5.57).
const REFERENCE_RX_557: (usize, usize, usize) = (35, 24, 28);

#[derive(Debug)]
struct DatasetMissing(String);

impl std::fmt::Display for DatasetMissing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "dataset not found: {}", self.0)
    }
}

impl std::error::Error for DatasetMissing {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<DatasetMissing>().is_some() {
                ExitCode::from(EXIT_DATASET)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let settings = Settings::resolve(&cli.common, file)?;
    match cli.command {
        Command::GadgetDemo => gadget_demo(&settings),
        Command::Decompose { axis, angle } => decompose(&settings, axis, angle),
        Command::Train { epochs, learning_rate, connect } => train(&settings, epochs, learning_rate, connect),
        Command::Verify { mutate } => {
            let checks = verify::run(&verify::Options::new(settings.seed, mutate.is_some()));
            print!("{}", verify::render(&checks));
            Ok(if checks.iter().all(verify::Check::ok) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Serve { sessions } => {
            let addr = format!("{}:{}", host(), settings.port);
            let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("serving on {}", listener.local_addr()?);
            protocol::serve_tcp(listener, settings.seed, sessions)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn host() -> String {
    std::env::var("QHEVQA_HOST").unwrap_or_else(|_| "127.0.0.1".into())
}

fn gadget_demo(s: &Settings) -> Result<ExitCode> {
    let shots = if s.shots == 0 { 2048 } else { s.shots };
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let r = t_gadget_demo(shots, &mut rng)?;
    let p0 = r.analytic_p0;
    println!("shots: {shots}  seed: {}", s.seed);
    println!("{:<10} {:>10} {:>10} {:>10} {:>10}", "circuit", "Pr(0)", "Pr(1)", "analytic0", "analytic1");
    for (name, p) in [("direct", r.direct_p0), ("gadget", r.gadget_p0)] {
        println!("{name:<10} {p:>10.4} {:>10.4} {p0:>10.5} {:>10.5}", 1.0 - p, 1.0 - p0);
    }
    println!("chain outcomes (u1 v1 u2 v2) -> correction (a b): shots");
    for ((u1, v1, u2, v2), (a, b), n) in &r.corrections {
        println!("  {u1}{v1}{u2}{v2} -> {}{}: {n}", u8::from(*a), u8::from(*b));
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_matrix(m: &[[C64; 2]; 2]) -> String {
    let c = |z: C64| format!("{:+.6}{:+.6}i", z.re, z.im);
    format!("[[{}, {}], [{}, {}]]", c(m[0][0]), c(m[0][1]), c(m[1][0]), c(m[1][1]))
}

fn decompose(s: &Settings, axis: Axis, angle: f64) -> Result<ExitCode> {
    let kind = match axis {
        Axis::X => GateKind::Rx(angle),
        Axis::Y => GateKind::Ry(angle),
        Axis::Z => GateKind::Rz(angle),
    };
    let target = kind_matrix(kind)?;
    let d = Decomposer::new(DEFAULT_BASE_LENGTH, DEFAULT_DEPTH, s.epsilon)?;
    let r = d.decompose(&target)?;
    let seq = &r.sequence;
    println!("sequence: {seq}");
    println!("target:   {}", fmt_matrix(&target));
    println!("achieved: {}", fmt_matrix(&seq.unitary));
    println!("distance: {:.3e} (epsilon {}, depth {})", r.distance, s.epsilon, r.depth);
    println!("tallies:  T={} T†={} H={} (T+T†={})", seq.t_count, seq.tdg_count, seq.h_count, seq.t_count + seq.tdg_count);
    if axis == Axis::X && (angle - 5.57).abs() < 1e-12 {
        let (t, tdg, h) = REFERENCE_RX_557;
        println!("reference: T={t} T†={tdg} H={h} (T+T†={})", t + tdg);
    }
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(s: &Settings) -> Result<LabeledDataset> {
    match &s.dataset {
        None => Ok(LabeledDataset::bundled()),
        Some(p) if !p.exists() => Err(anyhow!(DatasetMissing(p.display().to_string()))),
        Some(p) => LabeledDataset::load_csv(p).with_context(|| format!("loading {}", p.display())),
    }
}

fn train(s: &Settings, epochs: Option<usize>, learning_rate: Option<f64>, connect: bool) -> Result<ExitCode> {
    let data = load_dataset(s)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: epochs.or(s.epochs).unwrap_or(defaults.epochs),
        learning_rate: learning_rate.or(s.learning_rate).unwrap_or(defaults.learning_rate),
        batch_size: s.batch_size.unwrap_or(defaults.batch_size),
        test_fraction: s.test_fraction.unwrap_or(defaults.test_fraction),
        mode: s.mode,
        seed: s.seed,
        epsilon: s.epsilon,
        kappa: s.kappa,
        shots: s.shots,
        ..defaults
    };
    config.validate()?;

    let (model, metrics, server) = match (s.mode, s.transport) {
        (Mode::Plaintext, _) => {
            let (m, metrics) = vqa::train(&data, &config)?;
            (m, metrics, None)
        }
        (_, TransportKind::Inproc) => {
            let (m, metrics, report) = protocol::run_inproc(&data, &config, s.seed)?;
            (m, metrics, Some(report))
        }
        (_, TransportKind::Tcp) => train_tcp(s, &data, &config, connect)?,
    };

    std::fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    write(&s.out.join("metrics.csv"), &vqa::metrics_csv(&metrics))?;
    write(&s.out.join("metrics.svg"), &vqa::metrics_svg(&metrics))?;
    model.save(&s.out.join("model.json"))?;
    if let Some(p) = server.and_then(|r| r.final_params) {
        ShadowModel::new(model.n, p.theta, p.w, p.bias)?.save(&s.out.join("server_model.json"))?;
    }
    let manifest = RunManifest {
        subcommand: "train".into(),
        seed: s.seed,
        mode: s.mode,
        epsilon: s.epsilon,
        kappa: s.kappa,
        dataset: s.dataset.clone(),
        out: s.out.clone(),
        shots: s.shots,
        transport: s.transport,
        epochs: config.epochs,
        learning_rate: config.learning_rate,
    };
    write(&s.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;

    for m in &metrics {
        println!("epoch {:>3}  loss {:.6}  train {:.4}  test {:.4}", m.epoch, m.loss, m.train_acc, m.test_acc);
    }
    println!("artifacts in {}", s.out.display());
    Ok(ExitCode::SUCCESS)
}

type TrainOutcome = (ShadowModel, Vec<vqa::EpochMetrics>, Option<ServerReport>);

fn train_tcp(s: &Settings, data: &LabeledDataset, config: &TrainConfig, connect: bool) -> Result<TrainOutcome> {
    if connect {
        let addr = format!("{}:{}", host(), s.port);
        let (m, metrics) = protocol::run_tcp_client(&addr, data, config).with_context(|| format!("server at {addr}"))?;
        return Ok((m, metrics, None));
    }
    let listener = TcpListener::bind((host().as_str(), s.port)).with_context(|| format!("binding port {}", s.port))?;
    let addr = listener.local_addr()?.to_string();
    let seed = s.seed;
    let server = std::thread::spawn(move || {
        let stream = listener.accept()?.0;
        protocol::run_server(&mut protocol::TcpTransport::new(stream), ChaCha8Rng::seed_from_u64(seed))
    });
    let client = protocol::run_tcp_client(&addr, data, config);
    let report = server.join().map_err(|_| anyhow!("server thread panicked"))??;
    let (m, metrics) = client?;
    Ok((m, metrics, Some(report)))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
