//! The federated loop: partitioning, per-round downlink, local training,
//! secure aggregation, evaluation, and the cost model for a run.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{
    base_param_count, personal_param_count, run_model, CircuitError, ModelParams,
};
use crate::data::{self, DataError, RawDataset};
use crate::protocol::{
    aggregate_uplink, broadcast_downlink, weighted_scores, AggregationTranscript, ChannelConfig,
    ProtocolError,
};
use crate::seed::{rng_for, tag};
use crate::training::{
    local_train, AdamState, AngleWindow, LabeledSample, TrainOptions, TrainingError,
};

/// Two-qubit gate and single-qubit rotation time used by the cost model, in seconds.
pub const GATE_TIME: f64 = 2.5e-8;
/// Time to distribute one entangled resource between parties, in seconds.
pub const NETWORK_TIME: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation needs a nonempty test set")]
    EmptyTestSet,
    #[error("global objective needs at least one client loss")]
    NoLosses,
    #[error("no client holds any training data")]
    NoTrainingData,
    #[error("round {round}, parameter {index}: uplink payload does not match the client's base parameter")]
    TranscriptHygiene { round: u64, index: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;

/// Locations of the four IDX files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self::in_dir("data/fashion-subset")
    }
}

impl DataPaths {
    /// The standard gzipped file names inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            train_images: d.join("train-images-idx3-ubyte.gz"),
            train_labels: d.join("train-labels-idx1-ubyte.gz"),
            test_images: d.join("t10k-images-idx3-ubyte.gz"),
            test_labels: d.join("t10k-labels-idx1-ubyte.gz"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
    }
}

/// Starting point of the clients' private layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonalInit {
    /// All angles zero: the client model starts equal to the server model.
    #[default]
    Identity,
    /// Uniform in the base-angle window, on a per-client stream. The two
    /// stacked rotations per qubit then sum to roughly pi, which flips the
    /// readout qubits, so the shared base learns the inverted labelling and
    /// the server model (no private layer) ends up near 0% accuracy.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    /// Number of clients M; all of them take part in every round.
    pub clients: usize,
    /// Dirichlet concentration for the label split.
    pub alpha: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Base-layer repetitions.
    pub k: usize,
    /// Qubits per register.
    pub n: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Clients carry a private layer on top of the shared base.
    pub personalized: bool,
    pub personal_init: PersonalInit,
    pub seed: u64,
    /// Base angles are kept in `[0, pi - margin]`.
    pub margin: f64,
    /// Upper bound on training samples per client after partitioning.
    pub sample_cap: Option<usize>,
    /// Upper bound on the shared test set size.
    pub test_cap: Option<usize>,
    /// FashionMNIST classes mapped to labels 0 and 1.
    pub classes: [u8; 2],
    pub channel: ChannelConfig,
    pub data: DataPaths,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 2,
            alpha: 100.0,
            rounds: 100,
            local_epochs: 1,
            k: 3,
            n: 4,
            lr: 0.01,
            batch_size: 50,
            personalized: true,
            personal_init: PersonalInit::Identity,
            seed: 0,
            margin: 0.05,
            sample_cap: None,
            test_cap: None,
            classes: [1, 9],
            channel: ChannelConfig::ideal(),
            data: DataPaths::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if !(1..=crate::protocol::MAX_CLIENTS).contains(&self.clients) {
            return bad("clients must be between 1 and 10");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if self.local_epochs == 0 || self.k == 0 || self.batch_size == 0 {
            return bad("local_epochs, k and batch_size must be positive");
        }
        if 1usize.checked_shl(self.n as u32) != Some(data::POOLED_SIDE * data::POOLED_SIDE) {
            return bad("n must be 4: pooled images have 16 features");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return bad("margin must lie in [0, pi)");
        }
        if self.classes[0] == self.classes[1] {
            return bad("the two classes must differ");
        }
        if self.sample_cap == Some(0) || self.test_cap == Some(0) {
            return bad("caps must be positive");
        }
        self.channel.validate()?;
        Ok(())
    }

    fn window(&self) -> AngleWindow {
        AngleWindow::with_margin(self.margin)
    }
}

/// Binary-filtered training pool (raw, before partitioning) and the shared,
/// preprocessed test set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: RawDataset,
    pub test: Vec<LabeledSample>,
}

fn to_samples(ds: &RawDataset) -> Result<Vec<LabeledSample>> {
    Ok(data::preprocess_all(ds)?
        .into_iter()
        .zip(&ds.labels)
        .map(|(input, &l)| LabeledSample {
            input,
            label: usize::from(l),
        })
        .collect())
}

impl Dataset {
    /// Loads the IDX files, keeps the configured class pair, and draws the
    /// test subset.
    pub fn load(config: &FedConfig) -> Result<Self> {
        let p = &config.data;
        let [a, b] = config.classes;
        let train = data::filter_binary(&data::load_idx(&p.train_images, &p.train_labels)?, a, b)?;
        let test = data::filter_binary(&data::load_idx(&p.test_images, &p.test_labels)?, a, b)?;
        Self::from_raw(train, test, config)
    }

    /// Builds from already filtered datasets (labels 0 and 1).
    pub fn from_raw(train: RawDataset, test: RawDataset, config: &FedConfig) -> Result<Self> {
        let mut idx: Vec<usize> = (0..test.len()).collect();
        if let Some(cap) = config.test_cap {
            idx.shuffle(&mut rng_for(config.seed, &[tag::TEST_SUBSET]));
            idx.truncate(cap);
            idx.sort_unstable();
        }
        Ok(Self {
            train,
            test: to_samples(&test.subset(&idx))?,
        })
    }
}

/// Per-client training data after the Dirichlet split and the sample cap.
#[derive(Debug, Clone)]
pub struct ClientShards {
    pub matrix: data::PartitionMatrix,
    /// Samples per label for each client, after capping.
    pub label_counts: Vec<[usize; 2]>,
    pub samples: Vec<Vec<LabeledSample>>,
}

pub fn shard_clients(config: &FedConfig, train: &RawDataset) -> Result<ClientShards> {
    let matrix = data::sample_partition_matrix(
        config.alpha,
        2,
        config.clients,
        &mut rng_for(config.seed, &[tag::PARTITION_MATRIX]),
    )?;
    let parts = data::partition_indices(
        &train.labels,
        &matrix,
        &mut rng_for(config.seed, &[tag::PARTITION_SHUFFLE]),
    )?;
    let mut samples = Vec::with_capacity(parts.len());
    let mut label_counts = Vec::with_capacity(parts.len());
    for (m, mut idx) in parts.into_iter().enumerate() {
        if let Some(cap) = config.sample_cap {
            // random subset, so the client's label mix survives the cap
            idx.shuffle(&mut rng_for(
                config.seed,
                &[tag::PARTITION_SHUFFLE, m as u64 + 1],
            ));
            idx.truncate(cap);
        }
        let shard = train.subset(&idx);
        let ones = shard.labels.iter().filter(|&&l| l == 1).count();
        label_counts.push([shard.len() - ones, ones]);
        samples.push(to_samples(&shard)?);
    }
    Ok(ClientShards {
        matrix,
        label_counts,
        samples,
    })
}

/// Fraction of `test` the model classifies correctly. Class 1 is predicted
/// only when its score is strictly larger, so ties go to class 0.
pub fn evaluate(params: &ModelParams, test: &[LabeledSample]) -> Result<f64> {
    if test.is_empty() {
        return Err(RunError::EmptyTestSet);
    }
    let correct = test
        .par_iter()
        .map(|s| {
            let e = run_model(&s.input, params)?;
            let predicted = usize::from(e[1] > e[0]);
            Ok(usize::from(predicted == s.label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean of the client losses.
pub fn global_objective(client_losses: &[f64]) -> Result<f64> {
    if client_losses.is_empty() {
        return Err(RunError::NoLosses);
    }
    Ok(client_losses.iter().sum::<f64>() / client_losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub server_acc: f64,
    pub client_acc: Vec<f64>,
    /// Mean training loss of each client during the round; `None` for a
    /// client without data.
    pub client_loss: Vec<Option<f64>>,
    pub global_objective: f64,
    /// Base angles the trainers had to clamp into the window this round.
    pub projected: usize,
    /// Largest gap between the protocol's aggregate and the direct weighted mean.
    pub aggregation_error: f64,
}

impl RoundMetrics {
    pub fn mean_client_acc(&self) -> f64 {
        self.client_acc.iter().sum::<f64>() / self.client_acc.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub server: ModelParams,
    pub clients: Vec<ModelParams>,
    pub shards: ClientShards,
    pub transcripts: Vec<AggregationTranscript>,
}

struct ClientState {
    params: ModelParams,
    adam: AdamState,
    data: Vec<LabeledSample>,
}

fn uniform_angles(n: usize, upper: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.0..=upper)).collect()
}

/// Initial server base angles.
pub fn initial_server(config: &FedConfig) -> Result<ModelParams> {
    let upper = config.window().upper;
    let base = uniform_angles(
        base_param_count(config.n, config.k),
        upper,
        &mut rng_for(config.seed, &[tag::SERVER_INIT]),
    );
    Ok(ModelParams::new(config.n, config.k, base, None)?)
}

/// Client `m`'s private layer at start.
pub fn initial_personal(config: &FedConfig, m: usize) -> Option<Vec<f64>> {
    let len = personal_param_count(config.n);
    config.personalized.then(|| match config.personal_init {
        PersonalInit::Identity => vec![0.0; len],
        PersonalInit::Uniform => uniform_angles(
            len,
            config.window().upper,
            &mut rng_for(config.seed, &[tag::CLIENT_INIT, m as u64]),
        ),
    })
}

/// Runs the whole federated schedule on `dataset`.
pub fn run_federated(config: &FedConfig, dataset: &Dataset) -> Result<RunOutput> {
    config.validate()?;
    if dataset.test.is_empty() {
        return Err(RunError::EmptyTestSet);
    }
    let shards = shard_clients(config, &dataset.train)?;
    let mut server = initial_server(config)?;
    let mut clients: Vec<ClientState> = shards
        .samples
        .iter()
        .enumerate()
        .map(|(m, data)| {
            let params = ModelParams::new(
                config.n,
                config.k,
                server.base().to_vec(),
                initial_personal(config, m),
            )?;
            Ok(ClientState {
                adam: AdamState::new(params.len(), config.lr),
                params,
                data: data.clone(),
            })
        })
        .collect::<Result<_>>()?;
    if clients.iter().all(|c| c.data.is_empty()) {
        return Err(RunError::NoTrainingData);
    }

    let opts = TrainOptions {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        base_window: Some(config.window()),
    };
    let channel = config.channel.substream(&[config.seed]);
    let mut metrics = Vec::with_capacity(config.rounds);
    let mut transcripts = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        let r = round as u64;
        let received = broadcast_downlink(server.base(), clients.len(), &channel, r)?;

        let reports: Vec<Option<_>> = clients
            .par_iter_mut()
            .zip(received)
            .enumerate()
            .map(|(m, (c, base))| {
                c.params.set_base(base)?;
                if c.data.is_empty() {
                    return Ok(None);
                }
                let mut rng = rng_for(config.seed, &[tag::LOCAL_SHUFFLE, m as u64, r]);
                let report = local_train(&c.data, &mut c.params, &mut c.adam, &opts, &mut rng)?;
                Ok(Some(report))
            })
            .collect::<Result<_>>()?;

        // clients without data have nothing to contribute to the average
        let active: Vec<usize> = (0..clients.len())
            .filter(|&m| reports[m].is_some())
            .collect();
        let counts: Vec<u64> = active
            .iter()
            .map(|&m| clients[m].data.len() as u64)
            .collect();
        let scores = weighted_scores(&counts)?;
        let uploads: Vec<&[f64]> = active.iter().map(|&m| clients[m].params.base()).collect();
        let (aggregate, transcript) = aggregate_uplink(&uploads, &scores, &channel, r)?;

        let mut aggregation_error: f64 = 0.0;
        for rec in &transcript.records {
            let i = rec.index;
            let expected = uploads.iter().zip(&scores.scores).map(|(b, f)| f * b[i]);
            if !rec.payloads.iter().copied().eq(expected) {
                return Err(RunError::TranscriptHygiene { round: r, index: i });
            }
            let direct: f64 = rec.payloads.iter().sum();
            aggregation_error = aggregation_error.max((aggregate[i] - direct).abs());
        }
        server.set_base(aggregate)?;

        let client_acc = clients
            .iter()
            .map(|c| evaluate(&c.params, &dataset.test))
            .collect::<Result<Vec<_>>>()?;
        let client_loss: Vec<Option<f64>> = reports
            .iter()
            .map(|r| r.as_ref().and_then(|r| r.last_loss()))
            .collect();
        let losses: Vec<f64> = client_loss.iter().flatten().copied().collect();
        metrics.push(RoundMetrics {
            round,
            server_acc: evaluate(&server, &dataset.test)?,
            client_acc,
            global_objective: global_objective(&losses)?,
            client_loss,
            projected: reports.iter().flatten().map(|r| r.projected()).sum(),
            aggregation_error,
        });
        transcripts.push(transcript);
    }

    Ok(RunOutput {
        metrics,
        server,
        clients: clients.into_iter().map(|c| c.params).collect(),
        shards,
        transcripts,
    })
}

/// Cost model for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    /// Seconds spent delivering base parameters to the clients.
    pub t_down: f64,
    /// Seconds spent aggregating base parameters at the server.
    pub t_up: f64,
    pub server_storage_qubits: u64,
    pub client_storage_qubits: u64,
    pub server_depth: usize,
    pub client_depth: usize,
    pub circuit_qubits: usize,
    pub gate_time: f64,
    pub network_time: f64,
}

pub fn overhead_report(config: &FedConfig) -> OverheadReport {
    let params = (4 * config.n * config.k) as f64;
    let rounds = config.rounds as f64;
    let m = config.clients as f64;
    let stored = 4 * config.n as u64 * config.k as u64 * config.rounds as u64;
    // images are L x L with L = 2^(n/2), encoded on 2 log2 L = n qubits
    let side = data::POOLED_SIDE;
    OverheadReport {
        t_down: params * rounds * GATE_TIME * (m + 1.0) + rounds * NETWORK_TIME,
        t_up: 2.0 * params * rounds * GATE_TIME + rounds * NETWORK_TIME,
        server_storage_qubits: stored * config.clients as u64,
        client_storage_qubits: stored,
        server_depth: config.k,
        client_depth: config.k + 1,
        circuit_qubits: 2 * side.trailing_zeros() as usize,
        gate_time: GATE_TIME,
        network_time: NETWORK_TIME,
    }
}

/// Column names of [`write_metrics_csv`], in order.
pub fn metrics_header(clients: usize) -> Vec<String> {
    let mut h = vec!["round".to_string(), "server_acc".to_string()];
    h.extend((0..clients).map(|m| format!("client_{m}_acc")));
    h.push("mean_client_acc".into());
    h.push("global_objective".into());
    h
}

/// One row per round: round, server_acc, client_0_acc .. client_{M-1}_acc,
/// mean_client_acc, global_objective.
pub fn write_metrics_csv<W: Write>(
    mut out: W,
    clients: usize,
    metrics: &[RoundMetrics],
) -> std::io::Result<()> {
    writeln!(out, "{}", metrics_header(clients).join(","))?;
    for r in metrics {
        let mut fields = vec![r.round.to_string(), r.server_acc.to_string()];
        fields.extend(r.client_acc.iter().map(f64::to_string));
        fields.push(r.mean_client_acc().to_string());
        fields.push(r.global_objective.to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a> {
    pub config: &'a FedConfig,
    pub rounds_run: usize,
    pub final_server_acc: Option<f64>,
    pub final_client_acc: Option<&'a [f64]>,
    pub final_mean_client_acc: Option<f64>,
    pub final_global_objective: Option<f64>,
    pub client_label_counts: &'a [[usize; 2]],
    pub partition_matrix: &'a [Vec<f64>],
    pub projected_total: usize,
    pub max_aggregation_error: f64,
    pub overhead: OverheadReport,
}

impl<'a> RunSummary<'a> {
    pub fn new(config: &'a FedConfig, out: &'a RunOutput) -> Self {
        let last = out.metrics.last();
        Self {
            config,
            rounds_run: out.metrics.len(),
            final_server_acc: last.map(|r| r.server_acc),
            final_client_acc: last.map(|r| r.client_acc.as_slice()),
            final_mean_client_acc: last.map(RoundMetrics::mean_client_acc),
            final_global_objective: last.map(|r| r.global_objective),
            client_label_counts: &out.shards.label_counts,
            partition_matrix: &out.shards.matrix.d,
            projected_total: out.metrics.iter().map(|r| r.projected).sum(),
            max_aggregation_error: out
                .metrics
                .iter()
                .map(|r| r.aggregation_error)
                .fold(0.0, f64::max),
            overhead: overhead_report(config),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::EncodedInput;
    use crate::training::Batch;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two well separated synthetic classes on 28x28 images.
    fn toy_raw(count: usize, seed: u64) -> RawDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..count {
            let label = (i % 2) as u8;
            let img: Vec<u8> = (0..28 * 28)
                .map(|p| {
                    let top = p / 28 < 14;
                    let bright = if (label == 0) == top { 200 } else { 30 };
                    bright + rng.gen_range(0..40u8)
                })
                .collect();
            images.push(img);
            labels.push(label);
        }
        RawDataset {
            rows: 28,
            cols: 28,
            images,
            labels,
        }
    }

    fn toy_config() -> FedConfig {
        FedConfig {
            rounds: 3,
            k: 1,
            batch_size: 10,
            lr: 0.05,
            seed: 5,
            ..FedConfig::default()
        }
    }

    fn toy_dataset(config: &FedConfig) -> Dataset {
        Dataset::from_raw(toy_raw(80, 1), toy_raw(40, 2), config).unwrap()
    }

    #[test]
    fn overhead_examples() {
        let r = overhead_report(&FedConfig::default());
        assert_abs_diff_eq!(r.t_down, 0.10036, epsilon = 1e-12);
        assert_abs_diff_eq!(r.t_up, 0.10024, epsilon = 1e-12);
        assert_eq!(r.server_storage_qubits, 9600);
        assert_eq!(r.client_storage_qubits, 4800);
        assert_eq!(
            (r.server_depth, r.client_depth, r.circuit_qubits),
            (3, 4, 4)
        );
    }

    #[test]
    fn objective_is_the_mean() {
        assert_abs_diff_eq!(global_objective(&[0.2, 0.4]).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(global_objective(&[0.7]).unwrap(), 0.7);
        assert!(matches!(global_objective(&[]), Err(RunError::NoLosses)));
    }

    #[test]
    fn objective_matches_pooled_loss_on_shared_data() {
        let config = toy_config();
        let ds = toy_dataset(&config);
        let params = ModelParams::new(4, 1, vec![0.3; 16], Some(vec![0.1; 8])).unwrap();
        let pooled = crate::training::loss_gradient(&params, &Batch::from_slice(&ds.test).unwrap())
            .unwrap()
            .loss;
        assert_abs_diff_eq!(
            global_objective(&[pooled; 3]).unwrap(),
            pooled,
            epsilon = 1e-15
        );
    }

    #[test]
    fn evaluation_rules() {
        let zero = ModelParams::zeros(4, 1, false).unwrap();
        let uniform = EncodedInput::normalized(&[1.0; 16]).unwrap();
        let tied = vec![
            LabeledSample {
                input: uniform.clone(),
                label: 0,
            },
            LabeledSample {
                input: uniform.clone(),
                label: 1,
            },
            LabeledSample {
                input: uniform,
                label: 0,
            },
        ];
        // equal scores: everything is called class 0
        assert_abs_diff_eq!(evaluate(&zero, &tied).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(evaluate(&zero, &[]), Err(RunError::EmptyTestSet)));

        // at zero angles the circuit is the identity, so <Z1> > <Z0> exactly
        // when amplitude sits on basis states with qubit 0 set
        let mut one_hot = vec![0.0; 16];
        one_hot[8] = 1.0;
        let perfect = vec![LabeledSample {
            input: EncodedInput::new(one_hot).unwrap(),
            label: 1,
        }];
        assert_eq!(evaluate(&zero, &perfect).unwrap(), 1.0);
    }

    #[test]
    fn random_models_are_near_chance() {
        let config = FedConfig {
            k: 3,
            ..toy_config()
        };
        let ds = toy_dataset(&config);
        let mean = (0..20)
            .map(|s| {
                let c = FedConfig {
                    seed: s,
                    ..config.clone()
                };
                evaluate(&initial_server(&c).unwrap(), &ds.test).unwrap()
            })
            .sum::<f64>()
            / 20.0;
        assert!((0.3..=0.7).contains(&mean), "{mean}");
    }

    #[test]
    fn zero_rounds_leaves_initial_server() {
        let config = FedConfig {
            rounds: 0,
            ..toy_config()
        };
        let out = run_federated(&config, &toy_dataset(&config)).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.server, initial_server(&config).unwrap());
    }

    #[test]
    fn server_adopts_weighted_mean_each_round() {
        let config = FedConfig {
            clients: 3,
            alpha: 1.0,
            ..toy_config()
        };
        let out = run_federated(&config, &toy_dataset(&config)).unwrap();
        assert_eq!(out.metrics.len(), 3);
        for (r, tr) in out.metrics.iter().zip(&out.transcripts) {
            assert!(r.aggregation_error < 1e-9);
            assert_eq!(tr.records.len(), 16);
            for rec in &tr.records {
                assert_eq!(rec.payloads.len(), tr.scores.len());
            }
        }
        let last = out.transcripts.last().unwrap();
        for (i, rec) in last.records.iter().enumerate() {
            assert_abs_diff_eq!(
                out.server.base()[i],
                rec.payloads.iter().sum::<f64>(),
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(
                rec.encoded_sum,
                out.clients
                    .iter()
                    .zip(&last.scores.scores)
                    .map(|(c, f)| f * c.base()[i])
                    .sum::<f64>(),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn personal_layers_diverge() {
        let config = FedConfig {
            alpha: 1.0,
            rounds: 1,
            ..toy_config()
        };
        let out = run_federated(&config, &toy_dataset(&config)).unwrap();
        assert_ne!(out.clients[0].personal(), out.clients[1].personal());
        assert!(out.server.personal().is_none());
    }

    #[test]
    fn run_is_reproducible() {
        let config = toy_config();
        let ds = toy_dataset(&config);
        let csv = |out: &RunOutput| {
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, config.clients, &out.metrics).unwrap();
            buf
        };
        let a = run_federated(&config, &ds).unwrap();
        let b = run_federated(&config, &ds).unwrap();
        assert_eq!(csv(&a), csv(&b));
        assert_eq!(a.server, b.server);
    }

    #[test]
    fn single_client_without_personal_layer_is_local_training() {
        let config = FedConfig {
            clients: 1,
            personalized: false,
            ..toy_config()
        };
        let ds = toy_dataset(&config);
        let out = run_federated(&config, &ds).unwrap();

        let data = &shard_clients(&config, &ds.train).unwrap().samples[0];
        let mut params = initial_server(&config).unwrap();
        let mut adam = AdamState::new(params.len(), config.lr);
        let opts = TrainOptions {
            epochs: config.local_epochs,
            batch_size: config.batch_size,
            base_window: Some(config.window()),
        };
        for round in 1..=config.rounds as u64 {
            let mut rng = rng_for(config.seed, &[tag::LOCAL_SHUFFLE, 0, round]);
            local_train(data, &mut params, &mut adam, &opts, &mut rng).unwrap();
        }
        for (a, b) in out.server.base().iter().zip(params.base()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        for (tr, m) in out.transcripts.iter().zip(&out.metrics) {
            assert_eq!(tr.scores.scores, vec![1.0]);
            assert_eq!(m.client_acc[0], m.server_acc);
        }
    }

    #[test]
    fn sample_cap_and_csv_shape() {
        let config = FedConfig {
            clients: 2,
            sample_cap: Some(15),
            test_cap: Some(10),
            rounds: 2,
            ..toy_config()
        };
        let ds = toy_dataset(&config);
        assert_eq!(ds.test.len(), 10);
        let out = run_federated(&config, &ds).unwrap();
        assert!(out.shards.samples.iter().all(|s| s.len() == 15));
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, 2, &out.metrics).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "round,server_acc,client_0_acc,client_1_acc,mean_client_acc,global_objective"
        );
        assert_eq!(lines.len(), 3);
        let summary = serde_json::to_value(RunSummary::new(&config, &out)).unwrap();
        assert_eq!(summary["rounds_run"], 2);
        assert_eq!(summary["overhead"]["client_depth"], 2);
    }

    #[test]
    fn config_validation() {
        assert!(FedConfig::default().validate().is_ok());
        for bad in [
            FedConfig {
                clients: 0,
                ..FedConfig::default()
            },
            FedConfig {
                clients: 11,
                ..FedConfig::default()
            },
            FedConfig {
                alpha: 0.0,
                ..FedConfig::default()
            },
            FedConfig {
                n: 3,
                ..FedConfig::default()
            },
            FedConfig {
                classes: [2, 2],
                ..FedConfig::default()
            },
            FedConfig {
                batch_size: 0,
                ..FedConfig::default()
            },
        ] {
            assert!(
                matches!(bad.validate(), Err(RunError::Config(_))),
                "{bad:?}"
            );
        }
    }
}
