//! Closed-form error-rate models.
//!
//! * frame and packet error rates from link counters,
//! * the retry success model (combinatorial form and the geometric
//!   at-least-one-success form it is cross-checked against),
//! * the payload/FER model, where the expected Ack length enters the exponent
//!   alongside the data frame length.
//!
//! The combinatorial retry sum collapses to `(1-p)^2 * (p(2-p))^(m-1)` by the
//! binomial theorem: the probability that the first `m-1` attempts fail and
//! attempt `m` succeeds. It therefore *decreases* with `m`, unlike the
//! cumulative success probability `1 - (p(2-p))^m`. Both are provided and
//! neither is substituted for the other.

use num_rational::Ratio;
use num_traits::pow;
use thiserror::Error;

use crate::scalar::{int, lit, Real, Scalar};

/// Bit length of the Ack frame used by the payload model (9 bytes).
pub const ACK_BITS: u64 = 72;
/// Default truncation of the expected Ack-length sum.
pub const DEFAULT_J_MAX: u32 = 5;
/// Binomial coefficients are exact in `u128` up to this many attempts.
pub const MAX_ATTEMPTS: u32 = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("ratio undefined: zero {what} sent")]
    Division { what: &'static str },
    #[error("received count {received} exceeds sent count {sent}")]
    InvalidCounts { sent: u64, received: u64 },
    #[error("probability {name} outside [0, 1]")]
    Probability { name: &'static str },
    #[error("attempt count {0} outside 1..={MAX_ATTEMPTS}")]
    Attempts(u32),
    #[error("payload must be non-negative")]
    Payload,
}

fn check_counts(sent: u64, received: u64, what: &'static str) -> Result<Ratio<u64>, AnalyticsError> {
    if sent == 0 {
        return Err(AnalyticsError::Division { what });
    }
    if received > sent {
        return Err(AnalyticsError::InvalidCounts { sent, received });
    }
    Ok(Ratio::new(sent - received, sent))
}

/// Frame error rate `(S_frm - R_frm) / S_frm`, exact.
pub fn fer(s_frm: u64, r_frm: u64) -> Result<Ratio<u64>, AnalyticsError> {
    check_counts(s_frm, r_frm, "frames")
}

/// Packet error rate `(S_pkt - R_pkt) / S_pkt`, exact.
pub fn per(s_pkt: u64, r_pkt: u64) -> Result<Ratio<u64>, AnalyticsError> {
    check_counts(s_pkt, r_pkt, "packets")
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn check_probability<T: Scalar>(p: &T, name: &'static str) -> Result<(), AnalyticsError> {
    if *p < T::zero() || *p > T::one() {
        return Err(AnalyticsError::Probability { name });
    }
    Ok(())
}

/// Parameters of the retry success model: `attempts` is `m`
/// (maximum retries `m - 1`), `p_fer` the frame error probability shared by
/// data and Ack frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryModelParams<T> {
    attempts: u32,
    p_fer: T,
}

impl<T: Scalar> RetryModelParams<T> {
    pub fn new(attempts: u32, p_fer: T) -> Result<Self, AnalyticsError> {
        if attempts == 0 || attempts > MAX_ATTEMPTS {
            return Err(AnalyticsError::Attempts(attempts));
        }
        check_probability(&p_fer, "p_fer")?;
        Ok(Self { attempts, p_fer })
    }

    pub fn attempts(&self) -> u32 {
        self.attempts
    }

    pub fn max_retries(&self) -> u32 {
        self.attempts - 1
    }

    pub fn p_fer(&self) -> &T {
        &self.p_fer
    }

    /// `(1 - p)^2`: data frame and its Ack both intact.
    pub fn exchange_success(&self) -> T {
        let q = T::one() - self.p_fer.clone();
        q.clone() * q
    }
}

/// `C(n, k)` in exact integer arithmetic; `None` on overflow.
pub fn binomial(n: u32, k: u32) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) is exact; cancel first to keep the product small.
        let d = i as u128 + 1;
        let g = gcd(acc, d);
        acc = (acc / g).checked_mul((n - i) as u128 / (d / g))?;
    }
    Some(acc)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// The combinatorial success model:
/// `P_suc = (1-p)^2 * sum_{i=0}^{m-1} C(m-1, i) [p(1-p)]^(m-i-1) p^i`.
pub fn retry_success_binomial<T: Scalar>(params: &RetryModelParams<T>) -> T {
    let m = params.attempts;
    let p = params.p_fer.clone();
    let p_q = p.clone() * (T::one() - p.clone());
    let mut sum = T::zero();
    for i in 0..m {
        let coeff = binomial(m - 1, i).expect("attempts bounded by MAX_ATTEMPTS");
        let coeff = T::from_u128(coeff).expect("binomial representable in scalar type");
        sum = sum
            + coeff * pow(p_q.clone(), (m - i - 1) as usize) * pow(p.clone(), i as usize);
    }
    params.exchange_success() * sum
}

/// Probability of at least one clean exchange in `m` independent attempts,
/// `1 - (1 - (1-p)^2)^m`.
pub fn retry_success_geometric<T: Scalar>(params: &RetryModelParams<T>) -> T {
    T::one() - residual_per(params)
}

/// Packet loss after all attempts, `(1 - (1-p)^2)^m`.
pub fn residual_per<T: Scalar>(params: &RetryModelParams<T>) -> T {
    let fail = T::one() - params.exchange_success();
    pow(fail, params.attempts as usize)
}

/// Smallest attempt count in `1..=max_attempts` whose residual packet loss is
/// at most `floor`. The loss curve is flat beyond this point at the
/// resolution `floor` stands for.
pub fn plateau_attempts<T: Scalar>(p_fer: T, floor: T, max_attempts: u32) -> Option<u32> {
    (1..=max_attempts.min(MAX_ATTEMPTS)).find(|&m| {
        RetryModelParams::new(m, p_fer.clone())
            .map(|params| residual_per(&params) <= floor)
            .unwrap_or(false)
    })
}

/// Expected Ack length in bits, `sum_{j=1}^{j_max} 72 j p^(j-1) (1-p)`.
pub fn ack_length_term<T: Scalar>(p_ber: &T, j_max: u32) -> T {
    let q = T::one() - p_ber.clone();
    let ack_bits: T = int(ACK_BITS);
    (1..=j_max).fold(T::zero(), |acc, j| {
        acc + ack_bits.clone()
            * int::<T>(j as u64)
            * pow(p_ber.clone(), (j - 1) as usize)
            * q.clone()
    })
}

/// Data frame length in bits, `8 (payload + 8)`.
pub fn data_length(payload: u32) -> u32 {
    8 * (payload + 8)
}

/// Parameters of the payload/FER model. `payload` may be fractional so the
/// optimizer can treat it as continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadModelParams<T> {
    payload: T,
    p_ber: T,
    j_max: u32,
}

impl<T: Scalar> PayloadModelParams<T> {
    pub fn new(payload: T, p_ber: T) -> Result<Self, AnalyticsError> {
        Self::with_j_max(payload, p_ber, DEFAULT_J_MAX)
    }

    pub fn with_j_max(payload: T, p_ber: T, j_max: u32) -> Result<Self, AnalyticsError> {
        if payload < T::zero() {
            return Err(AnalyticsError::Payload);
        }
        check_probability(&p_ber, "p_ber")?;
        Ok(Self {
            payload,
            p_ber,
            j_max,
        })
    }

    pub fn payload(&self) -> &T {
        &self.payload
    }

    pub fn p_ber(&self) -> &T {
        &self.p_ber
    }

    pub fn j_max(&self) -> u32 {
        self.j_max
    }

    /// `8 (payload + 8)` bits.
    pub fn l_data(&self) -> T {
        int::<T>(8) * (self.payload.clone() + int::<T>(8))
    }

    pub fn l_ack(&self) -> T {
        ack_length_term(&self.p_ber, self.j_max)
    }

    /// Total exponent `L_data + L_Ack`.
    pub fn exposed_bits(&self) -> T {
        self.l_data() + self.l_ack()
    }
}

/// `FER = 1 - (1 - p)^(L_data + L_Ack)`.
pub fn fer_analytic<T: Real>(params: &PayloadModelParams<T>) -> T {
    let p = params.p_ber;
    if p.is_zero() {
        return T::zero();
    }
    if p.is_one() {
        return T::one();
    }
    let log_q = (-p).ln_1p();
    -(params.exposed_bits() * log_q).exp_m1()
}

/// Bit error rate at which [`fer_analytic`] equals `target` for the given
/// payload, found by bisection (the model is increasing in `p_ber`).
pub fn ber_for_fer<T: Real>(target: T, payload: T, j_max: u32) -> Result<T, AnalyticsError> {
    check_probability(&target, "target FER")?;
    if payload < T::zero() {
        return Err(AnalyticsError::Payload);
    }
    if target.is_zero() || target.is_one() {
        return Ok(target);
    }
    let eval = |p: T| {
        fer_analytic(&PayloadModelParams {
            payload,
            p_ber: p,
            j_max,
        })
    };
    let (mut lo, mut hi) = (T::zero(), T::one());
    let two: T = lit(2.0);
    for _ in 0..200 {
        let mid = (lo + hi) / two;
        if mid <= lo || mid >= hi {
            break;
        }
        if eval(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / two)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, ToPrimitive};

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn fer_ratios() {
        assert_eq!(fer(1000, 995).unwrap(), Ratio::new(1, 200));
        assert_eq!(ratio_to_f64(fer(1000, 995).unwrap()), 0.005);
        assert_eq!(fer(7, 7).unwrap(), Ratio::new(0, 1));
        assert_eq!(fer(0, 0), Err(AnalyticsError::Division { what: "frames" }));
        assert!(matches!(fer(3, 4), Err(AnalyticsError::InvalidCounts { .. })));
    }

    #[test]
    fn per_ratios() {
        assert_eq!(per(500, 500).unwrap(), Ratio::new(0, 1));
        assert_eq!(per(500, 0).unwrap(), Ratio::new(1, 1));
        assert!(per(0, 0).is_err());
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(0, 0), Some(1));
        assert_eq!(binomial(5, 2), Some(10));
        assert_eq!(binomial(29, 14), Some(77_558_760));
        assert_eq!(binomial(3, 5), Some(0));
        assert!(binomial(127, 63).is_some());
    }

    #[test]
    fn retry_binomial_single_attempt() {
        let p = RetryModelParams::new(1, 0.1f64).unwrap();
        assert!((retry_success_binomial(&p) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn retry_binomial_two_attempts_exact() {
        // 0.81 * (0.09 + 0.1) = 0.1539
        let p = RetryModelParams::new(2, q(1, 10)).unwrap();
        assert_eq!(retry_success_binomial(&p), q(1539, 10000));
        let pf = RetryModelParams::new(2, 0.1f64).unwrap();
        assert!((retry_success_binomial(&pf) - 0.1539).abs() < 1e-15);
    }

    #[test]
    fn retry_binomial_equals_closed_form_exactly() {
        // sum collapses to (p(2-p))^(m-1) by the binomial theorem
        for m in 1..=30 {
            for (n, d) in [(1, 20), (1, 10), (3, 10), (1, 2), (9, 10)] {
                let p = q(n, d);
                let params = RetryModelParams::new(m, p.clone()).unwrap();
                let one = BigRational::one();
                let closed = pow(one.clone() - p.clone(), 2)
                    * pow(p.clone() * (q(2, 1) - p.clone()), (m - 1) as usize);
                assert_eq!(retry_success_binomial(&params), closed, "m={m} p={n}/{d}");
            }
        }
    }

    #[test]
    fn retry_geometric_values() {
        let p = RetryModelParams::new(2, q(1, 10)).unwrap();
        assert_eq!(retry_success_geometric(&p), q(9639, 10000));
        let p1 = RetryModelParams::new(1, 0.1f64).unwrap();
        assert!((retry_success_geometric(&p1) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn retry_geometric_increases_to_one() {
        let mut prev = 0.0;
        for m in 1..=40 {
            let v = retry_success_geometric(&RetryModelParams::new(m, 0.3f64).unwrap());
            assert!(v > prev);
            prev = v;
        }
        assert!(1.0 - prev < 1e-9);
    }

    #[test]
    fn retry_params_validated() {
        assert_eq!(
            RetryModelParams::new(0, 0.1f64).unwrap_err(),
            AnalyticsError::Attempts(0)
        );
        assert!(RetryModelParams::new(129, 0.1f64).is_err());
        assert!(RetryModelParams::new(2, 1.5f64).is_err());
        assert!(RetryModelParams::new(2, -0.1f64).is_err());
    }

    #[test]
    fn plateau_attempts_threshold() {
        // per-attempt failure 1 - 0.9^2 = 0.19; 0.19^3 = 0.006859
        assert_eq!(plateau_attempts(0.1f64, 0.007, 30), Some(3));
        assert_eq!(plateau_attempts(0.1f64, 0.0068, 30), Some(4));
        assert_eq!(plateau_attempts(1.0f64, 0.5, 30), None);
    }

    #[test]
    fn ack_length_values() {
        assert_eq!(ack_length_term(&0.0f64, 5), 72.0);
        assert_eq!(ack_length_term(&1.0f64, 5), 0.0);
        // 36 + 36 + 27 + 18 + 11.25
        assert_eq!(ack_length_term(&q(1, 2), 5), q(12825, 100));
        assert_eq!(ack_length_term(&0.5f64, 5), 128.25);
        assert_eq!(ack_length_term(&0.5f64, 1), 36.0);
    }

    #[test]
    fn data_length_values() {
        assert_eq!(data_length(10), 144);
        assert_eq!(data_length(0), 64);
        assert_eq!(data_length(30), 304);
        let params = PayloadModelParams::new(q(10, 1), q(0, 1)).unwrap();
        assert_eq!(params.l_data(), q(144, 1));
    }

    #[test]
    fn fer_analytic_edges() {
        let params = PayloadModelParams::new(10.0f64, 0.0).unwrap();
        assert_eq!(fer_analytic(&params), 0.0);
        let params = PayloadModelParams::new(10.0f64, 1.0).unwrap();
        assert_eq!(fer_analytic(&params), 1.0);
        assert!(PayloadModelParams::new(-1.0f64, 0.1).is_err());
        assert!(PayloadModelParams::new(1.0f64, 1.1).is_err());
    }

    #[test]
    fn fer_analytic_reference_point() {
        // L = 144 + 72 (1-p)(1 + 2p + 3p^2 + 4p^3 + 5p^4) at p = 1e-3, evaluated
        // in exact rationals, then 1 - (1-p)^L via the series of ln.
        let p = q(1, 1000);
        let l_ack = ack_length_term(&p, 5);
        let l: f64 = 144.0 + l_ack.to_f64().unwrap();
        let expected = 1.0 - (l * (1.0f64 - 1e-3).ln()).exp();
        let got = fer_analytic(&PayloadModelParams::new(10.0f64, 1e-3).unwrap());
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.194).abs() < 5e-4, "{got}");
    }

    #[test]
    fn fer_analytic_increasing_in_payload() {
        for &p in &[1e-6, 1e-4, 1e-2, 0.3] {
            let mut prev = -1.0;
            for payload in 0..=255 {
                let v = fer_analytic(&PayloadModelParams::new(payload as f64, p).unwrap());
                // saturates at 1.0 in f64 for large p
                assert!(v > prev || v == 1.0, "p={p} payload={payload}");
                prev = v;
            }
        }
    }

    #[test]
    fn ber_inversion_round_trips() {
        for &target in &[0.003, 0.005, 0.015, 0.2] {
            let ber = ber_for_fer(target, 10.0f64, 5).unwrap();
            let back = fer_analytic(&PayloadModelParams::new(10.0, ber).unwrap());
            assert!((back - target).abs() < 1e-12, "{target} -> {ber} -> {back}");
        }
        assert_eq!(ber_for_fer(0.0f64, 10.0, 5).unwrap(), 0.0);
    }

    #[test]
    fn works_in_f32() {
        let params = RetryModelParams::new(3, 0.1f32).unwrap();
        assert!((retry_success_geometric(&params) - (1.0 - 0.19f32.powi(3))).abs() < 1e-6);
        let v = fer_analytic(&PayloadModelParams::new(10.0f32, 1e-3).unwrap());
        assert!((v - 0.1944).abs() < 1e-3);
    }
}
