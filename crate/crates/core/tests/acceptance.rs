//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Uses the packaged FashionMNIST subset unless `QFL_DATA_DIR` points at
//! another directory holding the four gzipped IDX files.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use qfl_core::circuits::{run_client_model, run_server_model, EncodedInput, ModelParams};
use qfl_core::data::{self, partition_indices, sample_partition_matrix};
use qfl_core::orchestrator::{
    overhead_report, run_federated, write_metrics_csv, DataPaths, Dataset, FedConfig, RunOutput,
};
use qfl_core::protocol::diagnostics;
use qfl_core::training::{cross_entropy_loss, loss_gradient, Batch, LabeledSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn data_dir() -> PathBuf {
    std::env::var_os("QFL_DATA_DIR").map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-subset"),
        PathBuf::from,
    )
}

/// Desk-scale setting: 500 training samples per client, 500 shared test
/// samples, 100 rounds, ideal channel.
fn desk_config(clients: usize, alpha: f64, seed: u64, personalized: bool) -> FedConfig {
    FedConfig {
        clients,
        alpha,
        seed,
        personalized,
        rounds: 100,
        sample_cap: Some(500),
        test_cap: Some(500),
        data: DataPaths::in_dir(data_dir()),
        ..FedConfig::default()
    }
}

fn run(config: &FedConfig) -> RunOutput {
    let ds = Dataset::load(config).expect("dataset");
    run_federated(config, &ds).expect("federated run")
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn protocol_exactness() -> Outcome {
    let t = Instant::now();
    let err = diagnostics::ideal_uplink_error(100, &[2, 4, 8], 48, PI - 0.05, 1).unwrap();
    let el = secs(t.elapsed());
    outcome(
        err < 1e-9 && el < 10.0,
        format!("max |aggregate - weighted mean| {err:.2e} (< 1e-9), {el:.2} s (< 10 s)"),
    )
}

fn shot_noise_law() -> Outcome {
    let t = Instant::now();
    let fit = diagnostics::shot_noise_fit(FRAC_PI_2, &[100, 1000, 10_000], 200, 2).unwrap();
    let el = secs(t.elapsed());
    let vars: Vec<String> = fit
        .points
        .iter()
        .map(|(r, v)| format!("{r}:{v:.2e}"))
        .collect();
    outcome(
        (fit.slope + 1.0).abs() <= 0.2 && el < 60.0,
        format!(
            "slope {:.3} (-1 +/- 0.2), variances {}, {el:.2} s (< 60 s)",
            fit.slope,
            vars.join(" ")
        ),
    )
}

fn privacy() -> Outcome {
    let dev = diagnostics::max_local_deviation(50, &[2, 4, 8], 3).unwrap();
    outcome(
        dev < 1e-10,
        format!("max deviation from I/2 {dev:.2e} (< 1e-10)"),
    )
}

fn random_input(rng: &mut impl Rng) -> EncodedInput {
    let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    EncodedInput::normalized(&v).unwrap()
}

fn random_params(rng: &mut impl Rng, personalized: bool) -> ModelParams {
    ModelParams::new(
        4,
        3,
        (0..48).map(|_| rng.gen_range(0.0..2.0 * PI)).collect(),
        personalized.then(|| (0..8).map(|_| rng.gen_range(0.0..2.0 * PI)).collect()),
    )
    .unwrap()
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let params = random_params(&mut rng, draw % 2 == 0);
        let sample = LabeledSample {
            input: random_input(&mut rng),
            label: rng.gen_range(0..2),
        };
        let batch = Batch::from_slice(std::slice::from_ref(&sample)).unwrap();
        let analytic = loss_gradient(&params, &batch).unwrap().gradient;
        let flat = params.flat();
        let loss_at = |theta: &[f64]| {
            let mut p = params.clone();
            p.set_flat(theta).unwrap();
            let s = qfl_core::circuits::run_model(&sample.input, &p).unwrap();
            cross_entropy_loss(&[s], &[sample.label]).unwrap()
        };
        for i in 0..flat.len() {
            let mut up = flat.clone();
            let mut down = flat.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            // coordinates with a vanishing derivative carry no relative
            // information; below 1e-6 the finite difference is mostly rounding
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-6);
            worst = worst.max(rel);
        }
    }
    outcome(
        worst < 1e-4,
        format!("worst per-coordinate relative error {worst:.2e} (< 1e-4) over 20 draws"),
    )
}

/// Dense real 16x16 matrices: every gate in the model is real.
type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let d = a.len();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ra, rb) = (a.len(), b.len());
    let mut out = vec![vec![0.0; ra * rb]; ra * rb];
    for i in 0..ra {
        for j in 0..ra {
            for k in 0..rb {
                for l in 0..rb {
                    out[i * rb + k][j * rb + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

fn identity(d: usize) -> Mat {
    (0..d)
        .map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect())
        .collect()
}

/// RY on `q` of 4 qubits; qubit 0 is the leftmost tensor factor.
fn ry(q: usize, angle: f64) -> Mat {
    let (s, c) = (angle / 2.0).sin_cos();
    let r = vec![vec![c, -s], vec![s, c]];
    kron(&kron(&identity(1 << q), &r), &identity(1 << (3 - q)))
}

fn cnot(control: usize, target: usize) -> Mat {
    let bit = |q: usize| 1usize << (3 - q);
    let mut m = vec![vec![0.0; 16]; 16];
    for i in 0..16 {
        let j = if i & bit(control) != 0 {
            i ^ bit(target)
        } else {
            i
        };
        m[j][i] = 1.0;
    }
    m
}

/// Unitary of the model, assembled gate by gate: each base slice is a column
/// of paired RYs followed by a CNOT ring with two RYs inside every CNOT pair;
/// the private layer is one more column of paired RYs.
fn model_unitary(params: &ModelParams) -> Mat {
    let mut u = identity(16);
    let mut push = |g: Mat| u = matmul(&g, &u);
    let column = |p: &[f64], push: &mut dyn FnMut(Mat)| {
        for q in 0..4 {
            push(ry(q, p[2 * q]));
            push(ry(q, p[2 * q + 1]));
        }
    };
    for slice in params.base().chunks(16) {
        column(&slice[..8], &mut push);
        for i in 0..4 {
            let j = (i + 1) % 4;
            push(cnot(i, j));
            push(ry(j, slice[8 + 2 * i]));
            push(ry((j + 1) % 4, slice[8 + 2 * i + 1]));
            push(cnot(i, j));
        }
    }
    if let Some(p) = params.personal() {
        column(p, &mut push);
    }
    u
}

fn oracle_scores(params: &ModelParams, input: &EncodedInput) -> [f64; 2] {
    let u = model_unitary(params);
    let psi: Vec<f64> = (0..16)
        .map(|i| (0..16).map(|j| u[i][j] * input.features()[j]).sum())
        .collect();
    let z = |q: usize| {
        (0..16)
            .map(|i| {
                if i & (8 >> q) == 0 {
                    psi[i] * psi[i]
                } else {
                    -psi[i] * psi[i]
                }
            })
            .sum()
    };
    [z(0), z(1)]
}

fn circuit_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let input = random_input(&mut rng);
        let client = random_params(&mut rng, true);
        let server = client.without_personal();
        let got_c = run_client_model(&input, &client).unwrap();
        let got_s = run_server_model(&input, server.base(), 4, 3).unwrap();
        let want_c = oracle_scores(&client, &input);
        let want_s = oracle_scores(&server, &input);
        for j in 0..2 {
            worst = worst
                .max((got_c[j] - want_c[j]).abs())
                .max((got_s[j] - want_s[j]).abs());
        }
    }
    outcome(
        worst < 1e-10,
        format!("max |simulated - assembled unitary| {worst:.2e} (< 1e-10) over 20 draws"),
    )
}

fn desk_accuracy() -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for m in [2, 8] {
        let out = run(&desk_config(m, 100.0, 0, true));
        let first = out.metrics.first().unwrap().global_objective;
        let last = out.metrics.last().unwrap();
        let ok = last.server_acc >= 0.90 && last.global_objective < 0.5 * first;
        pass &= ok;
        parts.push(format!(
            "M={m}: server_acc {:.3} (>= 0.90), loss {:.3} -> {:.3} (ratio {:.2} < 0.5)",
            last.server_acc,
            first,
            last.global_objective,
            last.global_objective / first
        ));
    }
    let el = secs(t.elapsed());
    pass &= el < 15.0 * 60.0;
    parts.push(format!("{el:.0} s (< 900 s)"));
    outcome(pass, parts.join("; "))
}

fn personalization_effect() -> Outcome {
    let mean_client = |personalized: bool| {
        (0..5)
            .map(|seed| {
                run(&desk_config(2, 1.0, seed, personalized))
                    .metrics
                    .last()
                    .unwrap()
                    .mean_client_acc()
            })
            .sum::<f64>()
            / 5.0
    };
    let with = mean_client(true);
    let without = mean_client(false);
    outcome(
        with >= without,
        format!("mean client accuracy with private layer {with:.4} >= without {without:.4}"),
    )
}

fn partition_statistics() -> Outcome {
    let dir = data_dir();
    let raw = data::load_idx(
        dir.join("train-images-idx3-ubyte.gz"),
        dir.join("train-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    let labels = data::filter_binary(&raw, 1, 9).unwrap().labels;
    let label0 = labels.iter().filter(|&&l| l == 0).count() as f64;

    let skew = |alpha: f64| {
        (0..200u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = sample_partition_matrix(alpha, 2, 2, &mut rng).unwrap();
                let parts = partition_indices(&labels, &d, &mut rng).unwrap();
                parts
                    .iter()
                    .map(|p| {
                        let share = p.iter().filter(|&&i| labels[i] == 0).count() as f64 / label0;
                        (share - 0.5).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 200.0
    };
    let (s1, s100) = (skew(1.0), skew(100.0));

    let mut conserved = true;
    for alpha in [1.0, 10.0, 100.0] {
        for m in [2, 4, 8] {
            let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
            let d = sample_partition_matrix(alpha, 2, m, &mut rng).unwrap();
            let parts = partition_indices(&labels, &d, &mut rng).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            conserved &= all == (0..labels.len()).collect::<Vec<_>>();
        }
    }
    outcome(
        s1 > s100 && conserved,
        format!(
            "mean max label-0 skew alpha=1 {s1:.4} > alpha=100 {s100:.4}; conservation over 9 cells: {conserved}"
        ),
    )
}

fn overhead_arithmetic() -> Outcome {
    let r = overhead_report(&FedConfig::default());
    let pass = (r.t_down - 0.10036).abs() < 1e-15
        && (r.t_up - 0.10024).abs() < 1e-15
        && r.server_storage_qubits == 9600
        && r.client_storage_qubits == 4800;
    outcome(
        pass,
        format!(
            "T_down {} s, T_up {} s, storage {} / {} qubits",
            r.t_down, r.t_up, r.server_storage_qubits, r.client_storage_qubits
        ),
    )
}

fn determinism() -> Outcome {
    let config = FedConfig {
        rounds: 10,
        sample_cap: Some(200),
        seed: 7,
        ..desk_config(2, 100.0, 7, true)
    };
    let csv = || {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, config.clients, &run(&config).metrics).unwrap();
        buf
    };
    let (a, b) = (csv(), csv());
    outcome(
        a == b,
        format!(
            "two seeded runs, {} CSV bytes, identical: {}",
            a.len(),
            a == b
        ),
    )
}

fn main() {
    type Check = (&'static str, fn() -> Outcome);
    let criteria: [Check; 10] = [
        ("protocol exactness (ideal)", protocol_exactness),
        ("shot-noise law", shot_noise_law),
        ("privacy: encoded qubits maximally mixed", privacy),
        ("gradient correctness", gradient_correctness),
        ("circuit oracle", circuit_oracle),
        ("desk-scale accuracy", desk_accuracy),
        ("personalization effect", personalization_effect),
        ("partition statistics", partition_statistics),
        ("overhead arithmetic", overhead_arithmetic),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "[{}] {:>2}. {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
