//! Quantum parameter exchange between server and clients.
//!
//! Uplink (secure weighted average): for every base-layer parameter the server
//! prepares an M-qubit GHZ state and hands one qubit to each client. Client
//! `m` writes its weighted value `F_m * theta_{m,i}` as a phase with
//! `RZ`, so the register becomes `(|0..0> + e^{i S}|1..1>)/sqrt(2)` with
//! `S = sum_m F_m theta_{m,i}`. The server undoes the GHZ preparation and
//! measures qubit 0, which reads 0 with probability `(1 + cos S)/2`, and
//! recovers `S = arccos(2 Pr - 1)`. Any single qubit of the encoded register
//! is maximally mixed, so no individual contribution is visible locally.
//!
//! Downlink: each client gets `|+>` rotated by `RZ(theta_i)` and measures in
//! the X basis, with the same estimator.
//!
//! Both directions run either on an ideal channel (probabilities read exactly
//! from the statevector) or a sampled one (`shots` independent measurements).

use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qsim::{Gate, QsimError, Statevector};
use crate::seed::{derive_seed, rng_for, tag};

/// GHZ registers are limited to this many clients.
pub const MAX_CLIENTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("weighted scores need positive sample counts, client {client} has {count}")]
    NonPositiveCount { client: usize, count: u64 },
    #[error("no clients")]
    NoClients,
    #[error("{got} clients outside supported range 1..={MAX_CLIENTS}")]
    ClientCount { got: usize },
    #[error("{payloads} payloads for a {qubits}-qubit register")]
    PayloadCount { payloads: usize, qubits: usize },
    #[error("client {client} uploaded {got} parameters, expected {expected}")]
    UploadLength {
        client: usize,
        expected: usize,
        got: usize,
    },
    #[error("{scores} weighted scores for {clients} clients")]
    ScoreCount { scores: usize, clients: usize },
    #[error("parameter {index}: value {value} is outside the recoverable range [0, pi]")]
    OutOfRange { index: usize, value: f64 },
    #[error("sampled channel needs at least one shot")]
    ZeroShots,
    #[error(transparent)]
    Sim(#[from] QsimError),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Ideal,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub mode: ChannelMode,
    /// Measurements per parameter in sampled mode; ignored on the ideal channel.
    pub shots: u32,
    pub seed: u64,
    /// Reject values outside `[0, pi]` instead of returning the folded estimate.
    #[serde(default)]
    pub strict: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::ideal()
    }
}

impl ChannelConfig {
    pub fn ideal() -> Self {
        Self {
            mode: ChannelMode::Ideal,
            shots: 1000,
            seed: 0,
            strict: false,
        }
    }

    pub fn sampled(shots: u32, seed: u64) -> Self {
        Self {
            mode: ChannelMode::Sampled,
            shots,
            seed,
            strict: false,
        }
    }

    pub fn strict(self) -> Self {
        Self {
            strict: true,
            ..self
        }
    }

    /// Same channel with its seed moved to an independent substream.
    pub fn substream(self, tags: &[u64]) -> Self {
        Self {
            seed: derive_seed(self.seed, tags),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ChannelMode::Sampled && self.shots == 0 {
            return Err(ProtocolError::ZeroShots);
        }
        Ok(())
    }
}

/// Client weights `F_m = l_m / sum l`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedScores {
    pub scores: Vec<f64>,
    pub counts: Vec<u64>,
}

impl WeightedScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn weighted_scores(counts: &[u64]) -> Result<WeightedScores> {
    if counts.is_empty() {
        return Err(ProtocolError::NoClients);
    }
    if let Some((client, &count)) = counts.iter().enumerate().find(|(_, &c)| c == 0) {
        return Err(ProtocolError::NonPositiveCount { client, count });
    }
    let total: u64 = counts.iter().sum();
    Ok(WeightedScores {
        scores: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        counts: counts.to_vec(),
    })
}

fn check_clients(m: usize) -> Result<()> {
    if (1..=MAX_CLIENTS).contains(&m) {
        Ok(())
    } else {
        Err(ProtocolError::ClientCount { got: m })
    }
}

fn ghz_chain(m: usize) -> Vec<Gate> {
    std::iter::once(Gate::H(0))
        .chain((1..m).map(|q| Gate::Cnot {
            control: q - 1,
            target: q,
        }))
        .collect()
}

/// `(|0...0> + |1...1>)/sqrt(2)` on `m` qubits: H on qubit 0, then a CNOT chain.
pub fn ghz_prepare(m: usize) -> Result<Statevector> {
    check_clients(m)?;
    let mut s = Statevector::new(m)?;
    s.apply_all(&ghz_chain(m))?;
    Ok(s)
}

/// Client `m` applies `RZ(payloads[m])` to qubit `m`.
pub fn encode_phases(ghz: &Statevector, payloads: &[f64]) -> Result<Statevector> {
    if payloads.len() != ghz.n_qubits() {
        return Err(ProtocolError::PayloadCount {
            payloads: payloads.len(),
            qubits: ghz.n_qubits(),
        });
    }
    let mut s = ghz.clone();
    for (q, &phase) in payloads.iter().enumerate() {
        s.apply(&Gate::Rz(q, phase))?;
    }
    Ok(s)
}

/// Inverse of [`ghz_prepare`]: the CNOT chain in reverse order, then H on qubit 0.
pub fn decode_ghz(state: &Statevector) -> Result<Statevector> {
    let mut s = state.clone();
    for g in ghz_chain(state.n_qubits()).iter().rev() {
        s.apply(g)?;
    }
    Ok(s)
}

/// `arccos(2 p0 - 1)`, with `p0` clamped into `[0, 1]`.
pub fn estimate_angle(p0: f64) -> f64 {
    (2.0 * p0.clamp(0.0, 1.0) - 1.0).clamp(-1.0, 1.0).acos()
}

/// Same estimator from both outcome probabilities. Algebraically equal to
/// `arccos(p0 - p1)`, but keeps full precision near 0 and pi where arccos
/// loses half the significant digits.
fn estimate_from_probabilities(p0: f64, p1: f64) -> f64 {
    2.0 * p1.max(0.0).sqrt().atan2(p0.max(0.0).sqrt())
}

/// What the measuring party learns about one transmitted parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Readout {
    p0: f64,
    estimate: f64,
}

fn read_qubit0<R: Rng + ?Sized>(
    state: &Statevector,
    channel: &ChannelConfig,
    rng: &mut R,
) -> Readout {
    match channel.mode {
        ChannelMode::Ideal => {
            let (p0, p1) = state.bit_probabilities(0);
            Readout {
                p0,
                estimate: estimate_from_probabilities(p0, p1),
            }
        }
        ChannelMode::Sampled => {
            // every shot measures a freshly prepared copy of the same state
            let p_true = state.bit_probabilities(0).0;
            let zeros = (0..channel.shots)
                .filter(|_| rng.gen::<f64>() < p_true)
                .count();
            let p0 = zeros as f64 / f64::from(channel.shots);
            Readout {
                p0,
                estimate: estimate_angle(p0),
            }
        }
    }
}

fn in_recoverable_range(x: f64) -> bool {
    (0.0..=std::f64::consts::PI).contains(&x)
}

/// One uplink record: everything exchanged for a single base parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterRecord {
    pub index: usize,
    /// `F_m * theta_{m,i}` for every client, in client order.
    pub payloads: Vec<f64>,
    /// Phase carried on `|1...1>` after encoding.
    pub encoded_sum: f64,
    pub in_range: bool,
    /// Shots measured; absent on the ideal channel.
    pub shots: Option<u32>,
    /// Probability (ideal) or frequency (sampled) of reading 0 on qubit 0.
    pub p0: f64,
    pub estimate: f64,
}

/// Audit log of one uplink aggregation. Only base-layer values ever enter it:
/// [`aggregate_uplink`] is handed base vectors and nothing else.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationTranscript {
    pub round: u64,
    pub scores: WeightedScores,
    pub channel: ChannelMode,
    pub records: Vec<ParameterRecord>,
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    round: u64,
    layer: &'static str,
    channel: ChannelMode,
    #[serde(flatten)]
    record: &'a ParameterRecord,
}

impl AggregationTranscript {
    /// One JSON object per line, one line per parameter.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for record in &self.records {
            let line = TranscriptLine {
                round: self.round,
                layer: "base",
                channel: self.channel,
                record,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Secure weighted average of the clients' base parameters, one GHZ register
/// per parameter. Returns the server's estimates and the exchange transcript.
pub fn aggregate_uplink(
    client_bases: &[&[f64]],
    scores: &WeightedScores,
    channel: &ChannelConfig,
    round: u64,
) -> Result<(Vec<f64>, AggregationTranscript)> {
    channel.validate()?;
    let m = client_bases.len();
    if m == 0 {
        return Err(ProtocolError::NoClients);
    }
    check_clients(m)?;
    if scores.len() != m {
        return Err(ProtocolError::ScoreCount {
            scores: scores.len(),
            clients: m,
        });
    }
    let k = client_bases[0].len();
    for (client, b) in client_bases.iter().enumerate() {
        if b.len() != k {
            return Err(ProtocolError::UploadLength {
                client,
                expected: k,
                got: b.len(),
            });
        }
    }
    let ghz = ghz_prepare(m)?;

    let records: Vec<ParameterRecord> = (0..k)
        .into_par_iter()
        .map(|i| {
            let payloads: Vec<f64> = client_bases
                .iter()
                .zip(&scores.scores)
                .map(|(b, f)| f * b[i])
                .collect();
            let encoded_sum: f64 = payloads.iter().sum();
            let in_range = in_recoverable_range(encoded_sum);
            if channel.strict && !in_range {
                return Err(ProtocolError::OutOfRange {
                    index: i,
                    value: encoded_sum,
                });
            }
            let decoded = decode_ghz(&encode_phases(&ghz, &payloads)?)?;
            let mut rng = rng_for(channel.seed, &[tag::UPLINK, round, i as u64]);
            let r = read_qubit0(&decoded, channel, &mut rng);
            Ok(ParameterRecord {
                index: i,
                payloads,
                encoded_sum,
                in_range,
                shots: (channel.mode == ChannelMode::Sampled).then_some(channel.shots),
                p0: r.p0,
                estimate: r.estimate,
            })
        })
        .collect::<Result<_>>()?;

    let aggregated = records.iter().map(|r| r.estimate).collect();
    Ok((
        aggregated,
        AggregationTranscript {
            round,
            scores: scores.clone(),
            channel: channel.mode,
            records,
        },
    ))
}

/// Delivers `theta_b` to `m` clients; element `c` of the result is what
/// client `c` recovered.
pub fn broadcast_downlink(
    theta_b: &[f64],
    m: usize,
    channel: &ChannelConfig,
    round: u64,
) -> Result<Vec<Vec<f64>>> {
    channel.validate()?;
    if m == 0 {
        return Err(ProtocolError::NoClients);
    }
    if channel.strict {
        if let Some((index, &value)) = theta_b
            .iter()
            .enumerate()
            .find(|(_, &v)| !in_recoverable_range(v))
        {
            return Err(ProtocolError::OutOfRange { index, value });
        }
    }
    (0..m)
        .into_par_iter()
        .map(|client| {
            theta_b
                .iter()
                .enumerate()
                .map(|(i, &theta)| {
                    let mut q = Statevector::new(1)?;
                    q.apply(&Gate::H(0))?;
                    q.apply(&Gate::Rz(0, theta))?;
                    // X-basis measurement
                    q.apply(&Gate::H(0))?;
                    let mut rng = rng_for(
                        channel.seed,
                        &[tag::DOWNLINK, round, client as u64, i as u64],
                    );
                    Ok(read_qubit0(&q, channel, &mut rng).estimate)
                })
                .collect()
        })
        .collect()
}

/// Single-qubit reduced density matrix of `state`.
pub fn reduced_density(state: &Statevector, qubit: usize) -> Result<[[Complex64; 2]; 2]> {
    Ok(state.reduced_density_matrix(qubit)?)
}

/// Largest entrywise distance between a 2x2 density matrix and `I/2`.
pub fn deviation_from_maximally_mixed(rho: &[[Complex64; 2]; 2]) -> f64 {
    let half = Complex64::new(0.5, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    [
        (rho[0][0] - half).norm(),
        (rho[1][1] - half).norm(),
        (rho[0][1] - zero).norm(),
        (rho[1][0] - zero).norm(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Measurement-noise diagnostics for the sampled channel.
pub mod diagnostics {
    use super::*;

    /// Empirical variance of the uplink estimate of a single parameter whose
    /// true weighted sum is `true_sum`, over `repetitions` independent runs of
    /// `shots` measurements each. Two clients each contribute half the sum.
    pub fn estimator_variance(
        true_sum: f64,
        shots: u32,
        repetitions: usize,
        seed: u64,
    ) -> Result<f64> {
        let scores = weighted_scores(&[1, 1])?;
        let theta = [true_sum];
        let bases: [&[f64]; 2] = [&theta, &theta];
        let estimates: Vec<f64> = (0..repetitions)
            .into_par_iter()
            .map(|rep| {
                let channel = ChannelConfig::sampled(shots, seed).substream(&[rep as u64]);
                aggregate_uplink(&bases, &scores, &channel, 0).map(|(v, _)| v[0])
            })
            .collect::<Result<_>>()?;
        let n = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / n;
        Ok(estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0))
    }

    /// Least-squares slope of `log10(y)` against `log10(x)`.
    pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
        let pts: Vec<(f64, f64)> = points
            .iter()
            .map(|&(x, y)| (x.log10(), y.log10()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct ShotNoiseFit {
        /// `(shots, variance)` per grid point.
        pub points: Vec<(f64, f64)>,
        pub slope: f64,
    }

    /// Largest gap between the ideal uplink and the direct weighted mean over
    /// `instances` random problems with `params` parameters each. Client
    /// counts cycle through `client_counts`; counts are random in 1..=1000
    /// and angles uniform in `[0, upper]`, so every weighted sum is in range.
    pub fn ideal_uplink_error(
        instances: usize,
        client_counts: &[usize],
        params: usize,
        upper: f64,
        seed: u64,
    ) -> Result<f64> {
        (0..instances)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng_for(seed, &[t as u64]);
                let m = client_counts[t % client_counts.len()];
                let counts: Vec<u64> = (0..m).map(|_| rng.gen_range(1..=1000)).collect();
                let scores = weighted_scores(&counts)?;
                let bases: Vec<Vec<f64>> = (0..m)
                    .map(|_| (0..params).map(|_| rng.gen_range(0.0..=upper)).collect())
                    .collect();
                let refs: Vec<&[f64]> = bases.iter().map(Vec::as_slice).collect();
                let (agg, _) = aggregate_uplink(&refs, &scores, &ChannelConfig::ideal(), 0)?;
                Ok((0..params)
                    .map(|i| {
                        let direct: f64 = (0..m).map(|c| scores.scores[c] * bases[c][i]).sum();
                        (agg[i] - direct).abs()
                    })
                    .fold(0.0, f64::max))
            })
            .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
    }

    /// Largest distance from `I/2` of any single-qubit reduced state of an
    /// encoded GHZ register, over `sets` random payload vectors per client count.
    pub fn max_local_deviation(sets: usize, client_counts: &[usize], seed: u64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for &m in client_counts {
            let ghz = ghz_prepare(m)?;
            for s in 0..sets {
                let mut rng = rng_for(seed, &[m as u64, s as u64]);
                let payloads: Vec<f64> = (0..m)
                    .map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
                    .collect();
                let encoded = encode_phases(&ghz, &payloads)?;
                for q in 0..m {
                    worst = worst.max(deviation_from_maximally_mixed(&reduced_density(
                        &encoded, q,
                    )?));
                }
            }
        }
        Ok(worst)
    }

    pub fn shot_noise_fit(
        true_sum: f64,
        shot_grid: &[u32],
        repetitions: usize,
        seed: u64,
    ) -> Result<ShotNoiseFit> {
        let points = shot_grid
            .iter()
            .map(|&r| {
                estimator_variance(true_sum, r, repetitions, derive_seed(seed, &[u64::from(r)]))
                    .map(|v| (f64::from(r), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ShotNoiseFit {
            slope: log_log_slope(&points),
            points,
        })
    }
}
