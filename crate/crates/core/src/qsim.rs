//! Dense statevector simulator.
//!
//! Registers are small (the models here use 4 qubits, GHZ carriers up to 10),
//! so amplitudes are stored densely and gates are applied in place.
//!
//! Bit ordering: qubit 0 is the leftmost ket position, `|q0 q1 ... q(n-1)>`,
//! and maps to the most significant bit of the amplitude index. For a
//! 2-qubit register the amplitude order is `|00>, |01>, |10>, |11>`.

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

/// Largest register this simulator will allocate.
pub const MAX_QUBITS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsimError {
    #[error("qubit count {0} outside supported range 1..={MAX_QUBITS}")]
    QubitCount(usize),
    #[error("qubit index {index} out of range for a {n_qubits}-qubit register")]
    QubitIndex { index: usize, n_qubits: usize },
    #[error("two-qubit gate needs distinct qubits, got {0} for both")]
    RepeatedQubit(usize),
    #[error("expected {expected} amplitudes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("amplitude vector has zero norm")]
    ZeroNorm,
    #[error("amplitude vector contains a non-finite value")]
    NonFinite,
}

pub type Result<T, E = QsimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    H,
    X,
    Z,
    Ry,
    Rz,
    Cnot,
}

/// A gate bound to concrete qubits.
///
/// `Ry(q, phi)` is the full rotation angle: its matrix is
/// `[[cos(phi/2), -sin(phi/2)], [sin(phi/2), cos(phi/2)]]`.
/// `Rz(q, lambda)` is the phase gate `diag(1, e^{i lambda})`, so a phase
/// written on one qubit of a GHZ register lands unhalved on `|1...1>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    H(usize),
    X(usize),
    Z(usize),
    Ry(usize, f64),
    Rz(usize, f64),
    Cnot { control: usize, target: usize },
}

impl Gate {
    pub fn kind(&self) -> GateKind {
        match self {
            Gate::H(_) => GateKind::H,
            Gate::X(_) => GateKind::X,
            Gate::Z(_) => GateKind::Z,
            Gate::Ry(..) => GateKind::Ry,
            Gate::Rz(..) => GateKind::Rz,
            Gate::Cnot { .. } => GateKind::Cnot,
        }
    }

    pub fn angle(&self) -> Option<f64> {
        match *self {
            Gate::Ry(_, a) | Gate::Rz(_, a) => Some(a),
            _ => None,
        }
    }

    /// Target qubits; for CNOT this is `[control, target]`.
    pub fn qubits(&self) -> Vec<usize> {
        match *self {
            Gate::H(q) | Gate::X(q) | Gate::Z(q) | Gate::Ry(q, _) | Gate::Rz(q, _) => vec![q],
            Gate::Cnot { control, target } => vec![control, target],
        }
    }

    pub fn inverse(&self) -> Gate {
        match *self {
            Gate::Ry(q, a) => Gate::Ry(q, -a),
            Gate::Rz(q, a) => Gate::Rz(q, -a),
            g => g,
        }
    }

    /// Row-major unitary on the gate's own qubits (2x2, or 4x4 for CNOT with
    /// the control as the high bit).
    pub fn matrix(&self) -> Vec<Complex64> {
        let c = |re: f64| Complex64::new(re, 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        match *self {
            Gate::H(_) => vec![c(s), c(s), c(s), c(-s)],
            Gate::X(_) => vec![c(0.0), c(1.0), c(1.0), c(0.0)],
            Gate::Z(_) => vec![c(1.0), c(0.0), c(0.0), c(-1.0)],
            Gate::Ry(_, a) => {
                let (sin, cos) = (a / 2.0).sin_cos();
                vec![c(cos), c(-sin), c(sin), c(cos)]
            }
            Gate::Rz(_, a) => vec![c(1.0), c(0.0), c(0.0), Complex64::from_polar(1.0, a)],
            Gate::Cnot { .. } => {
                let mut m = vec![c(0.0); 16];
                m[0] = c(1.0);
                m[5] = c(1.0);
                m[11] = c(1.0);
                m[14] = c(1.0);
                m
            }
        }
    }

    fn validate(&self, n_qubits: usize) -> Result<()> {
        for q in self.qubits() {
            if q >= n_qubits {
                return Err(QsimError::QubitIndex { index: q, n_qubits });
            }
        }
        if let Gate::Cnot { control, target } = *self {
            if control == target {
                return Err(QsimError::RepeatedQubit(control));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

fn check_qubit_count(n_qubits: usize) -> Result<()> {
    if (1..=MAX_QUBITS).contains(&n_qubits) {
        Ok(())
    } else {
        Err(QsimError::QubitCount(n_qubits))
    }
}

impl Statevector {
    /// The all-zero basis state `|0...0>`.
    pub fn new(n_qubits: usize) -> Result<Self> {
        check_qubit_count(n_qubits)?;
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    /// Real amplitudes `values / ||values||`.
    pub fn from_real(n_qubits: usize, values: &[f64]) -> Result<Self> {
        check_qubit_count(n_qubits)?;
        let expected = 1 << n_qubits;
        if values.len() != expected {
            return Err(QsimError::Length {
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QsimError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(QsimError::ZeroNorm);
        }
        Ok(Self {
            n_qubits,
            amplitudes: values
                .iter()
                .map(|v| Complex64::new(v / norm, 0.0))
                .collect(),
        })
    }

    /// Takes amplitudes as given; the caller is responsible for normalization.
    pub fn from_amplitudes(n_qubits: usize, amplitudes: Vec<Complex64>) -> Result<Self> {
        check_qubit_count(n_qubits)?;
        let expected = 1 << n_qubits;
        if amplitudes.len() != expected {
            return Err(QsimError::Length {
                expected,
                got: amplitudes.len(),
            });
        }
        if amplitudes
            .iter()
            .any(|a| !a.re.is_finite() || !a.im.is_finite())
        {
            return Err(QsimError::NonFinite);
        }
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    #[inline]
    fn mask(&self, qubit: usize) -> usize {
        1 << (self.n_qubits - 1 - qubit)
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit < self.n_qubits {
            Ok(())
        } else {
            Err(QsimError::QubitIndex {
                index: qubit,
                n_qubits: self.n_qubits,
            })
        }
    }

    /// Applies `gate` in place.
    pub fn apply(&mut self, gate: &Gate) -> Result<()> {
        gate.validate(self.n_qubits)?;
        self.apply_unchecked(gate);
        Ok(())
    }

    pub fn apply_all<'a>(&mut self, gates: impl IntoIterator<Item = &'a Gate>) -> Result<()> {
        for g in gates {
            self.apply(g)?;
        }
        Ok(())
    }

    /// Gate application for callers that have already validated qubit indices.
    pub(crate) fn apply_unchecked(&mut self, gate: &Gate) {
        let amps = &mut self.amplitudes;
        let dim = amps.len();
        match *gate {
            Gate::H(q) => {
                let m = 1 << (self.n_qubits - 1 - q);
                let s = std::f64::consts::FRAC_1_SQRT_2;
                for i in (0..dim).filter(|i| i & m == 0) {
                    let (a, b) = (amps[i], amps[i | m]);
                    amps[i] = (a + b) * s;
                    amps[i | m] = (a - b) * s;
                }
            }
            Gate::X(q) => {
                let m = 1 << (self.n_qubits - 1 - q);
                for i in (0..dim).filter(|i| i & m == 0) {
                    amps.swap(i, i | m);
                }
            }
            Gate::Z(q) => {
                let m = 1 << (self.n_qubits - 1 - q);
                for i in (0..dim).filter(|i| i & m != 0) {
                    amps[i] = -amps[i];
                }
            }
            Gate::Ry(q, angle) => {
                let m = 1 << (self.n_qubits - 1 - q);
                let (sin, cos) = (angle / 2.0).sin_cos();
                for i in (0..dim).filter(|i| i & m == 0) {
                    let (a, b) = (amps[i], amps[i | m]);
                    amps[i] = a * cos - b * sin;
                    amps[i | m] = a * sin + b * cos;
                }
            }
            Gate::Rz(q, angle) => {
                let m = 1 << (self.n_qubits - 1 - q);
                let phase = Complex64::from_polar(1.0, angle);
                for i in (0..dim).filter(|i| i & m != 0) {
                    amps[i] *= phase;
                }
            }
            Gate::Cnot { control, target } => {
                let cm = 1 << (self.n_qubits - 1 - control);
                let tm = 1 << (self.n_qubits - 1 - target);
                for i in (0..dim).filter(|i| i & cm != 0 && i & tm == 0) {
                    amps.swap(i, i | tm);
                }
            }
        }
    }

    /// Probability that measuring `qubit` in the computational basis gives 0.
    pub fn prob_zero(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        Ok(self.bit_probabilities(qubit).0)
    }

    /// `(p0, p1)` for `qubit`, each summed directly from the amplitudes.
    pub(crate) fn bit_probabilities(&self, qubit: usize) -> (f64, f64) {
        let m = self.mask(qubit);
        let mut p = (0.0, 0.0);
        for (i, a) in self.amplitudes.iter().enumerate() {
            if i & m == 0 {
                p.0 += a.norm_sqr();
            } else {
                p.1 += a.norm_sqr();
            }
        }
        p
    }

    /// `<psi| Z_qubit |psi>`.
    pub fn expectation_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        let (p0, p1) = self.bit_probabilities(qubit);
        Ok(p0 - p1)
    }

    /// Draws one computational-basis outcome for `qubit` without collapsing
    /// the stored state.
    pub fn sample_bit<R: Rng + ?Sized>(&self, qubit: usize, rng: &mut R) -> Result<u8> {
        let p0 = self.prob_zero(qubit)?;
        Ok(if rng.gen::<f64>() < p0 { 0 } else { 1 })
    }

    /// Single-qubit reduced density matrix, tracing out every other qubit.
    /// Returned as `[[rho_00, rho_01], [rho_10, rho_11]]`.
    pub fn reduced_density_matrix(&self, qubit: usize) -> Result<[[Complex64; 2]; 2]> {
        self.check_qubit(qubit)?;
        let m = self.mask(qubit);
        let zero = Complex64::new(0.0, 0.0);
        let mut rho = [[zero; 2]; 2];
        for i in (0..self.amplitudes.len()).filter(|i| i & m == 0) {
            let a = self.amplitudes[i];
            let b = self.amplitudes[i | m];
            rho[0][0] += a * a.conj();
            rho[0][1] += a * b.conj();
            rho[1][0] += b * a.conj();
            rho[1][1] += b * b.conj();
        }
        Ok(rho)
    }
}

/// Value-style gate application: consumes the state and returns the evolved one.
pub fn apply_gate(mut state: Statevector, gate: &Gate) -> Result<Statevector> {
    state.apply(gate)?;
    Ok(state)
}

pub fn new_statevector(n_qubits: usize) -> Result<Statevector> {
    Statevector::new(n_qubits)
}

pub fn set_amplitudes(state: &Statevector, values: &[f64]) -> Result<Statevector> {
    Statevector::from_real(state.n_qubits(), values)
}
