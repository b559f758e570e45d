//! Variational classifier circuits: amplitude encoder, base layer, personalized
//! layer, and the composed server/client models.
//!
//! Parameter layout of one base-layer slice on `n` qubits (`4n` angles):
//!
//! ```text
//! [0, 2n)   rotation column: qubit i gets RY(p[2i]) then RY(p[2i+1])
//! [2n, 4n)  entangling ring: for i in 0..n, j = (i+1) % n:
//!           CNOT(i,j), RY_j(p[2n+2i]), RY_{(j+1)%n}(p[2n+2i+1]), CNOT(i,j)
//! ```
//!
//! The full base layer is `k` consecutive slices (`4nk` angles). The
//! personalized layer is one more rotation column (`2n` angles) applied last.
//! All angles are full rotation angles (see [`Gate::Ry`]).

use thiserror::Error;

use crate::qsim::{Gate, QsimError, Statevector, MAX_QUBITS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("expected {expected} {what} angles, got {got}")]
    ParamLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("feature vector has length {got}, a {n}-qubit encoder needs {expected}")]
    FeatureLength {
        n: usize,
        expected: usize,
        got: usize,
    },
    #[error("input is not unit-norm (norm {0})")]
    NotNormalized(f64),
    #[error("non-finite angle in {0} parameters")]
    NonFiniteAngle(&'static str),
    #[error("client model requires a personalized layer")]
    MissingPersonalLayer,
    #[error("model needs at least 2 qubits for a binary readout, got {0}")]
    TooFewQubits(usize),
    #[error(transparent)]
    Sim(#[from] QsimError),
}

pub type Result<T, E = CircuitError> = std::result::Result<T, E>;

/// Trainable angles of one model: the shared base layer and an optional
/// client-private personalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    n: usize,
    k: usize,
    base: Vec<f64>,
    personal: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn new(n: usize, k: usize, base: Vec<f64>, personal: Option<Vec<f64>>) -> Result<Self> {
        if n < 2 {
            return Err(CircuitError::TooFewQubits(n));
        }
        check_len("base", base.len(), base_param_count(n, k))?;
        if base.iter().any(|a| !a.is_finite()) {
            return Err(CircuitError::NonFiniteAngle("base"));
        }
        if let Some(p) = &personal {
            check_len("personalized", p.len(), personal_param_count(n))?;
            if p.iter().any(|a| !a.is_finite()) {
                return Err(CircuitError::NonFiniteAngle("personalized"));
            }
        }
        Ok(Self {
            n,
            k,
            base,
            personal,
        })
    }

    pub fn zeros(n: usize, k: usize, personalized: bool) -> Result<Self> {
        Self::new(
            n,
            k,
            vec![0.0; base_param_count(n, k)],
            personalized.then(|| vec![0.0; personal_param_count(n)]),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn personal(&self) -> Option<&[f64]> {
        self.personal.as_deref()
    }

    pub fn is_personalized(&self) -> bool {
        self.personal.is_some()
    }

    pub fn set_base(&mut self, base: Vec<f64>) -> Result<()> {
        check_len("base", base.len(), self.base.len())?;
        self.base = base;
        Ok(())
    }

    /// Total trainable angles: `4nk`, plus `2n` when personalized.
    pub fn len(&self) -> usize {
        self.base.len() + self.personal.as_ref().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Base angles followed by personalized angles; gradients use the same order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.base.clone();
        if let Some(p) = &self.personal {
            v.extend_from_slice(p);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("model", flat.len(), self.len())?;
        let (b, p) = flat.split_at(self.base.len());
        self.base.copy_from_slice(b);
        if let Some(pers) = &mut self.personal {
            pers.copy_from_slice(p);
        }
        Ok(())
    }

    /// The server-side view: same base, no personalized layer.
    pub fn without_personal(&self) -> Self {
        Self {
            personal: None,
            ..self.clone()
        }
    }

    pub fn ansatz(&self) -> Ansatz {
        if self.is_personalized() {
            Ansatz::client(self.n, self.k)
        } else {
            Ansatz::server(self.n, self.k)
        }
    }
}

pub fn base_param_count(n: usize, k: usize) -> usize {
    4 * n * k
}

pub fn personal_param_count(n: usize) -> usize {
    2 * n
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(CircuitError::ParamLength {
            what,
            expected,
            got,
        })
    }
}

/// A preprocessed, unit-norm feature vector ready for amplitude encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput(Vec<f64>);

impl EncodedInput {
    /// Accepts an already-normalized vector (norm 1 within 1e-10).
    pub fn new(features: Vec<f64>) -> Result<Self> {
        let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-10 {
            return Err(CircuitError::NotNormalized(norm));
        }
        Ok(Self(features))
    }

    /// Scales `values` to unit norm.
    pub fn normalized(values: &[f64]) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(CircuitError::Sim(QsimError::ZeroNorm));
        }
        Ok(Self(values.iter().map(|v| v / norm).collect()))
    }

    pub fn features(&self) -> &[f64] {
        &self.0
    }
}

/// Loads the feature vector directly as the register's amplitudes.
pub fn amplitude_encode(input: &EncodedInput, n: usize) -> Result<Statevector> {
    if n == 0 || n > MAX_QUBITS {
        return Err(QsimError::QubitCount(n).into());
    }
    let expected = 1usize << n;
    if input.0.len() != expected {
        return Err(CircuitError::FeatureLength {
            n,
            expected,
            got: input.0.len(),
        });
    }
    Ok(Statevector::from_real(n, &input.0)?)
}

/// One step of a parameterized circuit: a fixed gate, or an RY whose angle is
/// read from slot `param` of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Fixed(Gate),
    Ry { qubit: usize, param: usize },
}

fn rotation_column(n: usize, offset: usize, ops: &mut Vec<Op>) {
    for q in 0..n {
        ops.push(Op::Ry {
            qubit: q,
            param: offset + 2 * q,
        });
        ops.push(Op::Ry {
            qubit: q,
            param: offset + 2 * q + 1,
        });
    }
}

fn base_slice(n: usize, offset: usize, ops: &mut Vec<Op>) {
    rotation_column(n, offset, ops);
    let ring = offset + 2 * n;
    for i in 0..n {
        let j = (i + 1) % n;
        let cnot = Op::Fixed(Gate::Cnot {
            control: i,
            target: j,
        });
        ops.push(cnot);
        ops.push(Op::Ry {
            qubit: j,
            param: ring + 2 * i,
        });
        ops.push(Op::Ry {
            qubit: (j + 1) % n,
            param: ring + 2 * i + 1,
        });
        ops.push(cnot);
    }
}

/// The trainable part of a model, laid out over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Ansatz {
    n: usize,
    k: usize,
    personalized: bool,
    ops: Vec<Op>,
}

impl Ansatz {
    /// `k` base slices.
    pub fn server(n: usize, k: usize) -> Self {
        let mut ops = Vec::with_capacity(6 * n * k);
        for z in 0..k {
            base_slice(n, 4 * n * z, &mut ops);
        }
        Self {
            n,
            k,
            personalized: false,
            ops,
        }
    }

    /// `k` base slices followed by the personalized column.
    pub fn client(n: usize, k: usize) -> Self {
        let mut a = Self::server(n, k);
        rotation_column(n, base_param_count(n, k), &mut a.ops);
        a.personalized = true;
        a
    }

    pub fn n_qubits(&self) -> usize {
        self.n
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn n_params(&self) -> usize {
        base_param_count(self.n, self.k)
            + if self.personalized {
                personal_param_count(self.n)
            } else {
                0
            }
    }

    /// Depth counted in layers: one per base slice, one for the personalized column.
    pub fn depth_in_layers(&self) -> usize {
        self.k + usize::from(self.personalized)
    }

    pub fn bind(&self, params: &[f64]) -> Result<Vec<Gate>> {
        check_len("ansatz", params.len(), self.n_params())?;
        Ok(self.bind_unchecked(params))
    }

    fn bind_unchecked(&self, params: &[f64]) -> Vec<Gate> {
        self.ops
            .iter()
            .map(|op| match *op {
                Op::Fixed(g) => g,
                Op::Ry { qubit, param } => Gate::Ry(qubit, params[param]),
            })
            .collect()
    }

    pub fn final_state(&self, input: &EncodedInput, params: &[f64]) -> Result<Statevector> {
        let gates = self.bind(params)?;
        let mut state = amplitude_encode(input, self.n)?;
        for g in &gates {
            state.apply_unchecked(g);
        }
        Ok(state)
    }

    pub fn scores(&self, input: &EncodedInput, params: &[f64]) -> Result<[f64; 2]> {
        Ok(class_scores(&self.final_state(input, params)?))
    }

    /// Class scores and their derivative with respect to every parameter,
    /// by the parameter-shift rule. Each angle drives exactly one RY, whose
    /// generator has eigenvalues +-1/2, so
    /// `dE/dphi = (E(phi + pi/2) - E(phi - pi/2)) / 2` holds exactly.
    pub fn scores_with_jacobian(
        &self,
        input: &EncodedInput,
        params: &[f64],
    ) -> Result<([f64; 2], Vec<[f64; 2]>)> {
        const SHIFT: f64 = std::f64::consts::FRAC_PI_2;
        let gates = self.bind(params)?;
        let start = amplitude_encode(input, self.n)?;

        // forward pass, keeping the state in front of every parameterized gate
        let mut prefixes = Vec::with_capacity(self.n_params());
        let mut state = start;
        for (g, op) in gates.iter().zip(&self.ops) {
            if let Op::Ry { param, .. } = *op {
                prefixes.push((param, state.clone()));
            }
            state.apply_unchecked(g);
        }
        let scores = class_scores(&state);

        let mut jac = vec![[0.0; 2]; self.n_params()];
        let mut prefix_iter = prefixes.into_iter();
        for (pos, op) in self.ops.iter().enumerate() {
            let Op::Ry { qubit, param } = *op else {
                continue;
            };
            let (p, prefix) = prefix_iter.next().expect("one prefix per parameterized op");
            debug_assert_eq!(p, param);
            let shifted = |delta: f64| {
                let mut s = prefix.clone();
                s.apply_unchecked(&Gate::Ry(qubit, params[param] + delta));
                for g in &gates[pos + 1..] {
                    s.apply_unchecked(g);
                }
                class_scores(&s)
            };
            let plus = shifted(SHIFT);
            let minus = shifted(-SHIFT);
            jac[param] = [(plus[0] - minus[0]) / 2.0, (plus[1] - minus[1]) / 2.0];
        }
        Ok((scores, jac))
    }
}

/// Readout: class `j` scores `<Z_j>` for `j` in `{0, 1}`.
pub fn class_scores(state: &Statevector) -> [f64; 2] {
    let (a0, a1) = state.bit_probabilities(0);
    let (b0, b1) = state.bit_probabilities(1);
    [a0 - a1, b0 - b1]
}

/// Gates for one base-layer slice, `slice.len() == 4n`.
pub fn base_layer_circuit(slice: &[f64], n: usize) -> Result<Vec<Gate>> {
    check_len("base-layer slice", slice.len(), 4 * n)?;
    let mut ops = Vec::new();
    base_slice(n, 0, &mut ops);
    bind_ops(&ops, slice)
}

/// Gates for the personalized layer, `theta_p.len() == 2n`.
pub fn personal_layer_circuit(theta_p: &[f64], n: usize) -> Result<Vec<Gate>> {
    check_len("personalized", theta_p.len(), personal_param_count(n))?;
    let mut ops = Vec::new();
    rotation_column(n, 0, &mut ops);
    bind_ops(&ops, theta_p)
}

fn bind_ops(ops: &[Op], params: &[f64]) -> Result<Vec<Gate>> {
    Ok(ops
        .iter()
        .map(|op| match *op {
            Op::Fixed(g) => g,
            Op::Ry { qubit, param } => Gate::Ry(qubit, params[param]),
        })
        .collect())
}

/// Scores of `U_person U_base U_encoder`. Requires a personalized layer.
pub fn run_client_model(input: &EncodedInput, params: &ModelParams) -> Result<[f64; 2]> {
    if !params.is_personalized() {
        return Err(CircuitError::MissingPersonalLayer);
    }
    run_model(input, params)
}

/// Scores of `U_base U_encoder`.
pub fn run_server_model(
    input: &EncodedInput,
    theta_b: &[f64],
    n: usize,
    k: usize,
) -> Result<[f64; 2]> {
    let params = ModelParams::new(n, k, theta_b.to_vec(), None)?;
    run_model(input, &params)
}

/// Scores of whichever architecture `params` describes.
pub fn run_model(input: &EncodedInput, params: &ModelParams) -> Result<[f64; 2]> {
    params.ansatz().scores(input, &params.flat())
}
