//! Barrier optimization of the payload length.
//!
//! The barrier objective is `I(x; e) = (1-p)^(L_data + L_Ack) + e/x` with
//! `L_data = 8(x + 8)`. Its first term is the exchange *success* probability,
//! so minimizing it as written pushes the payload up. The optimizer therefore
//! offers two descent targets:
//!
//! * [`GradientMode::True`] minimizes `FER(x) + e/x`, whose gradient is
//!   `-8 ln(1-p) (1-p)^(L_data + L_Ack) - e/x^2`.
//! * [`GradientMode::Reduced`] descends along [`barrier_gradient`],
//!   `-8 ln(1-p) (1-p)^x - e/x^2`, and line-searches on its antiderivative
//!   `-8 (1-p)^x + e/x`.
//!
//! Each mode sets the barrier weight from a schedule that makes the current
//! iterate stationary for its own gradient ([`fer_epsilon_schedule`],
//! [`epsilon_schedule`]), damped so it strictly decreases:
//! `e_k = mu * min(schedule(x_k), e_(k-1))`. Without the damping the method
//! never moves.

use thiserror::Error;

use crate::analytics::{ack_length_term, fer_analytic, PayloadModelParams, DEFAULT_J_MAX};
use crate::frame::MAX_PAYLOAD;
use crate::scalar::{int, lit, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("domain error: {0}")]
pub struct DomainError(pub &'static str);

/// Iterate of the barrier method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierState<T> {
    pub payload: T,
    pub epsilon: T,
    pub p_ber: T,
    pub iteration: usize,
}

impl<T: Real> BarrierState<T> {
    pub fn new(payload: T, epsilon: T, p_ber: T) -> Self {
        Self {
            payload,
            epsilon,
            p_ber,
            iteration: 0,
        }
    }

    fn check(&self) -> Result<(), DomainError> {
        if !(self.payload > T::zero()) {
            return Err(DomainError("payload must be positive"));
        }
        if !self.epsilon.is_finite() {
            return Err(DomainError("barrier weight must be finite"));
        }
        check_ber(self.p_ber)
    }

    fn exposed_bits(&self) -> T {
        int::<T>(8) * (self.payload + int::<T>(8)) + ack_length_term(&self.p_ber, DEFAULT_J_MAX)
    }
}

fn check_ber<T: Real>(p: T) -> Result<(), DomainError> {
    if p >= T::zero() && p <= T::one() {
        Ok(())
    } else {
        Err(DomainError("p_ber outside [0, 1]"))
    }
}

fn check_log_domain<T: Real>(p: T) -> Result<T, DomainError> {
    check_ber(p)?;
    if p.is_one() {
        return Err(DomainError("p_ber = 1 has no logarithm"));
    }
    Ok((-p).ln_1p())
}

/// `(1-p)^(L_data + L_Ack) + e/x`.
pub fn barrier_objective<T: Real>(state: &BarrierState<T>) -> Result<T, DomainError> {
    state.check()?;
    let success = (state.exposed_bits() * (-state.p_ber).ln_1p()).exp();
    Ok(success + state.epsilon / state.payload)
}

/// Exact derivative of [`barrier_objective`] in the payload:
/// `8 ln(1-p) (1-p)^(L_data + L_Ack) - e/x^2`.
pub fn barrier_objective_gradient<T: Real>(state: &BarrierState<T>) -> Result<T, DomainError> {
    state.check()?;
    let log_q = check_log_domain(state.p_ber)?;
    let x = state.payload;
    Ok(int::<T>(8) * log_q * (state.exposed_bits() * log_q).exp() - state.epsilon / (x * x))
}

/// `-8 ln(1-p) (1-p)^x - e/x^2`, the reduced gradient.
pub fn barrier_gradient<T: Real>(state: &BarrierState<T>) -> Result<T, DomainError> {
    state.check()?;
    let log_q = check_log_domain(state.p_ber)?;
    let x = state.payload;
    Ok(-int::<T>(8) * log_q * (x * log_q).exp() - state.epsilon / (x * x))
}

/// Antiderivative of [`barrier_gradient`]: `-8 (1-p)^x + e/x`.
pub fn reduced_potential<T: Real>(state: &BarrierState<T>) -> Result<T, DomainError> {
    state.check()?;
    let log_q = check_log_domain(state.p_ber)?;
    let x = state.payload;
    Ok(-int::<T>(8) * (x * log_q).exp() + state.epsilon / x)
}

/// [`barrier_gradient`] minus [`barrier_objective_gradient`].
pub fn reduced_gradient_deviation<T: Real>(state: &BarrierState<T>) -> Result<T, DomainError> {
    Ok(barrier_gradient(state)? - barrier_objective_gradient(state)?)
}

/// `FER(x) + e/x`, the sign-consistent barrier objective.
pub fn fer_barrier_objective<T: Real>(state: &BarrierState<T>) -> Result<T, DomainError> {
    state.check()?;
    let fer = -(state.exposed_bits() * (-state.p_ber).ln_1p()).exp_m1();
    Ok(fer + state.epsilon / state.payload)
}

/// Derivative of [`fer_barrier_objective`].
pub fn fer_barrier_gradient<T: Real>(state: &BarrierState<T>) -> Result<T, DomainError> {
    Ok(-barrier_objective_gradient(state)? - int::<T>(2) * state.epsilon
        / (state.payload * state.payload))
}

/// `-8 x^2 ln(1-p) (1-p)^x`.
pub fn epsilon_schedule<T: Real>(payload: T, p_ber: T) -> Result<T, DomainError> {
    if payload < T::zero() {
        return Err(DomainError("payload must be non-negative"));
    }
    let log_q = check_log_domain(p_ber)?;
    if payload.is_zero() || log_q.is_zero() {
        return Ok(T::zero());
    }
    Ok(-int::<T>(8) * payload * payload * log_q * (payload * log_q).exp())
}

/// `x^2 FER'(x)`: the weight that makes `x` stationary for `FER(x) + e/x`.
pub fn fer_epsilon_schedule<T: Real>(payload: T, p_ber: T) -> Result<T, DomainError> {
    if payload < T::zero() {
        return Err(DomainError("payload must be non-negative"));
    }
    check_log_domain(p_ber)?;
    if payload.is_zero() {
        return Ok(T::zero());
    }
    let slope = fer_barrier_gradient(&BarrierState::new(payload, T::zero(), p_ber))?;
    Ok(payload * payload * slope)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Descend `FER(x) + e/x` with its exact gradient; weights from
    /// [`fer_epsilon_schedule`].
    #[default]
    True,
    /// Descend along the reduced gradient [`barrier_gradient`]; weights from
    /// [`epsilon_schedule`].
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions<T> {
    /// Stop once an outer iterate moves less than this.
    pub tolerance: T,
    pub max_iterations: usize,
    pub mode: GradientMode,
    /// Barrier weight damping factor in `(0, 1)`.
    pub mu: T,
    /// Inner descent steps per outer iteration.
    pub max_inner_steps: usize,
    /// Upper end of the search interval; steps past it are projected back.
    pub max_payload: T,
}

impl<T: Real> Default for OptimizeOptions<T> {
    fn default() -> Self {
        Self {
            tolerance: lit(1e-6),
            max_iterations: 10_000,
            mode: GradientMode::True,
            mu: lit(0.5),
            max_inner_steps: 200,
            max_payload: int(MAX_PAYLOAD as u64),
        }
    }
}

/// One outer iteration; `objective` is the function the mode descends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow<T> {
    pub iteration: usize,
    pub payload: T,
    pub epsilon: T,
    pub objective: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport<T> {
    /// Continuous optimum (last iterate).
    pub payload: T,
    pub epsilon: T,
    pub iterations: usize,
    pub converged: bool,
    pub mode: GradientMode,
    pub floor: u32,
    pub floor_fer: T,
    pub ceil: u32,
    pub ceil_fer: T,
    /// Whichever of `floor` and `ceil` has the lower model FER.
    pub best_integer: u32,
    pub best_fer: T,
    pub trace: Vec<TraceRow<T>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError<T: std::fmt::Debug> {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("no convergence after {} iterations; best payload {:?}", .0.iterations, .0.payload)]
    NonConvergence(Box<OptimizeReport<T>>),
}

fn objective<T: Real>(mode: GradientMode, s: &BarrierState<T>) -> Result<T, DomainError> {
    match mode {
        GradientMode::True => fer_barrier_objective(s),
        GradientMode::Reduced => reduced_potential(s),
    }
}

fn gradient<T: Real>(mode: GradientMode, s: &BarrierState<T>) -> Result<T, DomainError> {
    match mode {
        GradientMode::True => fer_barrier_gradient(s),
        GradientMode::Reduced => barrier_gradient(s),
    }
}

/// Backtracking gradient descent on `objective` at fixed barrier weight.
fn inner_descent<T: Real>(
    mode: GradientMode,
    mut s: BarrierState<T>,
    opts: &OptimizeOptions<T>,
) -> Result<BarrierState<T>, DomainError> {
    let armijo: T = lit(1e-4);
    let half: T = lit(0.5);
    let mut f = objective(mode, &s)?;
    for _ in 0..opts.max_inner_steps {
        let g = gradient(mode, &s)?;
        if g.is_zero() || !g.is_finite() {
            break;
        }
        let mut t = s.payload / g.abs();
        let mut moved = false;
        while t * g.abs() > T::epsilon() * s.payload {
            let trial = BarrierState {
                payload: (s.payload - t * g).min(opts.max_payload),
                ..s
            };
            if trial.payload > T::zero() {
                let ft = objective(mode, &trial)?;
                if ft <= f - armijo * t * g * g {
                    let step = (trial.payload - s.payload).abs();
                    s = trial;
                    f = ft;
                    moved = step > opts.tolerance * lit(1e-3);
                    break;
                }
            }
            t = t * half;
        }
        if !moved {
            break;
        }
    }
    Ok(s)
}

fn model_fer<T: Real>(payload: u32, p_ber: T) -> T {
    let params = PayloadModelParams::new(int::<T>(payload as u64), p_ber)
        .expect("validated probability and non-negative payload");
    fer_analytic(&params)
}

/// Barrier method for `min FER(payload)` subject to `payload >= 0`.
pub fn optimize_payload<T: Real>(
    p_ber: T,
    payload0: T,
    opts: &OptimizeOptions<T>,
) -> Result<OptimizeReport<T>, OptimizeError<T>> {
    if !(p_ber > T::zero() && p_ber < T::one()) {
        return Err(DomainError("p_ber must lie in (0, 1)").into());
    }
    if !(payload0 > T::zero()) || !payload0.is_finite() {
        return Err(DomainError("starting payload must be positive").into());
    }
    if !(opts.mu > T::zero() && opts.mu < T::one()) {
        return Err(DomainError("mu must lie in (0, 1)").into());
    }
    if !(opts.max_payload > T::zero()) || !opts.max_payload.is_finite() {
        return Err(DomainError("max_payload must be positive").into());
    }
    let payload0 = payload0.min(opts.max_payload);
    let mode = opts.mode;
    let mut eps_prev = T::infinity();
    let mut state = BarrierState::new(payload0, T::zero(), p_ber);
    let mut trace = Vec::new();
    let mut converged = false;
    while state.iteration < opts.max_iterations {
        let scheduled = match mode {
            GradientMode::True => fer_epsilon_schedule(state.payload, p_ber)?,
            GradientMode::Reduced => epsilon_schedule(state.payload, p_ber)?,
        };
        state.epsilon = opts.mu * scheduled.min(eps_prev);
        eps_prev = state.epsilon;
        let next = inner_descent(mode, state, opts)?;
        let moved = (next.payload - state.payload).abs();
        state = BarrierState {
            iteration: state.iteration + 1,
            ..next
        };
        trace.push(TraceRow {
            iteration: state.iteration,
            payload: state.payload,
            epsilon: state.epsilon,
            objective: objective(mode, &state)?,
        });
        if moved < opts.tolerance {
            converged = true;
            break;
        }
    }

    let floor = state.payload.floor().to_u32().unwrap_or(0);
    let ceil = state.payload.ceil().to_u32().unwrap_or(floor);
    let floor_fer = model_fer(floor, p_ber);
    let ceil_fer = model_fer(ceil, p_ber);
    let (best_integer, best_fer) = if ceil_fer < floor_fer {
        (ceil, ceil_fer)
    } else {
        (floor, floor_fer)
    };
    let report = OptimizeReport {
        payload: state.payload,
        epsilon: state.epsilon,
        iterations: state.iteration,
        converged,
        mode,
        floor,
        floor_fer,
        ceil,
        ceil_fer,
        best_integer,
        best_fer,
        trace,
    };
    if converged {
        Ok(report)
    } else {
        Err(OptimizeError::NonConvergence(Box::new(report)))
    }
}
