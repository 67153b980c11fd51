//! Temporal-aggregated smoothing: per-channel absolute-maximum statistics
//! collected across every timestep, batch element, and token position; the
//! migration factor `s_c = a_c^alpha / b_c^(1-alpha)` built from them; and
//! the exact rescaling `x diag(s)^-1` / `diag(s) w` that moves outlier
//! difficulty from activations into weights before quantization.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{self, Tensor};

/// Floor applied to absolute-maximum statistics so factors stay finite on
/// all-zero channels.
pub const ABSMAX_EPS: f64 = 1e-8;

/// Recorded inputs of one linear layer: a `B x T x L x C` tensor (calibration
/// batch, timesteps, tokens, channels) plus cached per-channel statistics.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    layer_id: usize,
    x: Tensor,
    absmax: Vec<f64>,
}

impl ActivationTrace {
    /// Wraps a 4-D activation record and caches its per-channel absmax.
    pub fn new(layer_id: usize, x: Tensor) -> Result<Self> {
        if x.shape().len() != 4 {
            return Err(Error::shape(format!(
                "activation trace must be B x T x L x C, got {:?}",
                x.shape()
            )));
        }
        let absmax = collect_absmax(&x)?;
        Ok(Self { layer_id, x, absmax })
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn batch(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn timesteps(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.x
    }

    /// Cached `a_c = max |x[b, t, l, c]|` over all `b`, `t`, `l`.
    pub fn per_channel_absmax(&self) -> &[f64] {
        &self.absmax
    }

    /// The contiguous `L x C` activation of sample `b` at timestep `t` —
    /// one forward call's input.
    pub fn slice(&self, b: usize, t: usize) -> Tensor {
        let (tokens, channels) = (self.tokens(), self.channels());
        let block = tokens * channels;
        let offset = (b * self.timesteps() + t) * block;
        Tensor::matrix(
            tokens,
            channels,
            self.x.data()[offset..offset + block].to_vec(),
        )
        .expect("trace slices are well-shaped by construction")
    }

    /// Fingerprint over the little-endian payload, matching the on-disk
    /// encoding of the trace tensor.
    pub fn fingerprint(&self) -> u64 {
        crate::hash::fingerprint_f64(self.x.data())
    }
}

/// Per-channel maxima of absolute values of a `B x T x L x C` tensor,
/// aggregated over every batch element, timestep, and token position.
pub fn collect_absmax(x: &Tensor) -> Result<Vec<f64>> {
    if x.shape().len() != 4 {
        return Err(Error::shape(format!(
            "absmax aggregation expects B x T x L x C, got {:?}",
            x.shape()
        )));
    }
    let channels = x.shape()[3];
    let rows = x.len() / channels;
    let data = x.data();
    Ok(par::map_indexed(channels, |c| {
        let mut m = 0.0f64;
        for r in 0..rows {
            m = m.max(data[r * channels + c].abs());
        }
        m
    }))
}

/// Per-input-channel maxima of absolute weight values: `b_c = max_n |w[n, c]|`.
pub fn weight_absmax(w: &Tensor) -> Result<Vec<f64>> {
    if !w.is_matrix() {
        return Err(Error::shape(format!(
            "weight absmax expects an N x C matrix, got {:?}",
            w.shape()
        )));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let data = w.data();
    Ok(par::map_indexed(cols, |c| {
        let mut m = 0.0f64;
        for r in 0..rows {
            m = m.max(data[r * cols + c].abs());
        }
        m
    }))
}

/// Per-channel migration factor together with the exponent that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingFactor {
    values: Vec<f64>,
    alpha: f64,
}

impl SmoothingFactor {
    /// Wraps raw factor values; every entry must be positive and finite.
    pub fn new(values: Vec<f64>, alpha: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("smoothing factor must cover at least one channel"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::arg("smoothing factors must be positive and finite"));
        }
        Ok(Self { values, alpha })
    }

    /// All-ones factor: smoothing disabled. The stored exponent is 0 by
    /// convention; no statistics back this factor.
    pub fn identity(channels: usize) -> Self {
        Self {
            values: vec![1.0; channels],
            alpha: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn is_identity(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }
}

/// `s_c = max(a_c, eps)^alpha / max(b_c, eps)^(1-alpha)`.
pub fn compute_tas_factor(
    act_absmax: &[f64],
    weight_absmax: &[f64],
    alpha: f64,
) -> Result<SmoothingFactor> {
    if act_absmax.len() != weight_absmax.len() {
        return Err(Error::shape(format!(
            "statistic lengths disagree: {} activation channels vs {} weight channels",
            act_absmax.len(),
            weight_absmax.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!(
            "migration exponent must lie in [0, 1], got {alpha}"
        )));
    }
    let values = act_absmax
        .iter()
        .zip(weight_absmax)
        .map(|(&a, &b)| a.max(ABSMAX_EPS).powf(alpha) / b.max(ABSMAX_EPS).powf(1.0 - alpha))
        .collect();
    SmoothingFactor::new(values, alpha)
}

/// Divides activation channels by `s` and multiplies weight columns by `s`.
///
/// In full precision the product `x_smoothed · w_smoothedᵀ` equals the
/// original `x · wᵀ` up to rounding.
pub fn apply_smoothing(
    x: &Tensor,
    w: &Tensor,
    s: &SmoothingFactor,
) -> Result<(Tensor, Tensor)> {
    if x.last_dim() != s.channels() {
        return Err(Error::shape(format!(
            "activation has {} channels, factor covers {}",
            x.last_dim(),
            s.channels()
        )));
    }
    if !w.is_matrix() || w.cols() != s.channels() {
        return Err(Error::shape(format!(
            "weight shape {:?} does not consume {} channels",
            w.shape(),
            s.channels()
        )));
    }
    let x_s = tensor::div_columns(x, s.values())?;
    let w_s = tensor::scale_columns(w, s.values())?;
    Ok((x_s, w_s))
}

/// Where the division by `s` happens at inference time.
#[derive(Debug, Clone, PartialEq)]
pub enum FoldOutcome {
    /// The producing layer's output rows were divided by `s`; the consumer
    /// receives pre-smoothed activations at no runtime cost.
    Folded(Tensor),
    /// No producer available: divide activations on the fly each forward
    /// call.
    OnTheFly,
}

/// Absorbs `diag(s)^-1` into the producer's output rows when one exists.
pub fn fold_smoothing(producer_w: Option<&Tensor>, s: &SmoothingFactor) -> Result<FoldOutcome> {
    match producer_w {
        None => Ok(FoldOutcome::OnTheFly),
        Some(p) => {
            if !p.is_matrix() || p.rows() != s.channels() {
                return Err(Error::shape(format!(
                    "producer shape {:?} does not emit {} channels",
                    p.shape(),
                    s.channels()
                )));
            }
            Ok(FoldOutcome::Folded(tensor::div_rows(p, s.values())?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{frobenius_norm, matmul_nt, sub};
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn random_trace(rng: &mut StdRng, b: usize, t: usize, l: usize, c: usize) -> ActivationTrace {
        let data: Vec<f64> = (0..b * t * l * c)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        ActivationTrace::new(0, Tensor::new(vec![b, t, l, c], data).unwrap()).unwrap()
    }

    #[test]
    fn absmax_aggregates_over_timesteps() {
        // one channel taking values {2, -8, 1} spread across two timesteps
        let x = Tensor::new(vec![1, 2, 3, 1], vec![2.0, -8.0, 1.0, 0.5, -0.5, 0.25]).unwrap();
        let trace = ActivationTrace::new(3, x).unwrap();
        assert_eq!(trace.per_channel_absmax(), &[8.0]);
        assert_eq!(trace.layer_id(), 3);
    }

    #[test]
    fn absmax_zero_channel_reports_zero() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, -2.0]).unwrap();
        assert_eq!(collect_absmax(&x).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn absmax_matches_quadruple_loop_oracle_bit_exactly() {
        let mut rng = StdRng::seed_from_u64(31);
        let (b, t, l, c) = (3, 4, 5, 6);
        let trace = random_trace(&mut rng, b, t, l, c);
        let x = trace.tensor();
        let mut expect = vec![0.0f64; c];
        for bi in 0..b {
            for ti in 0..t {
                for li in 0..l {
                    for ci in 0..c {
                        let idx = ((bi * t + ti) * l + li) * c + ci;
                        let v = x.data()[idx].abs();
                        if v > expect[ci] {
                            expect[ci] = v;
                        }
                    }
                }
            }
        }
        assert_eq!(trace.per_channel_absmax(), expect.as_slice());
    }

    #[test]
    fn stored_absmax_matches_recomputation() {
        let mut rng = StdRng::seed_from_u64(32);
        let trace = random_trace(&mut rng, 2, 3, 4, 5);
        assert_eq!(
            trace.per_channel_absmax(),
            collect_absmax(trace.tensor()).unwrap().as_slice()
        );
    }

    #[test]
    fn weight_absmax_per_column() {
        let w = Tensor::matrix(2, 3, vec![1.0, -4.0, 0.0, -2.0, 3.0, 0.0]).unwrap();
        assert_eq!(weight_absmax(&w).unwrap(), vec![2.0, 4.0, 0.0]);
    }

    #[test]
    fn tas_factor_direct_example() {
        let s = compute_tas_factor(&[4.0], &[1.0], 0.5).unwrap();
        assert_eq!(s.values(), &[2.0]);
        assert_eq!(s.alpha(), 0.5);
    }

    #[test]
    fn tas_factor_exponent_endpoints() {
        let a = [3.5, 0.7];
        let b = [2.0, 4.0];
        let full = compute_tas_factor(&a, &b, 1.0).unwrap();
        assert_eq!(full.values(), &a);
        let none = compute_tas_factor(&a, &b, 0.0).unwrap();
        assert_eq!(none.values(), &[1.0 / 2.0, 1.0 / 4.0]);
    }

    #[test]
    fn tas_factor_rejects_bad_arguments() {
        assert!(matches!(
            compute_tas_factor(&[1.0], &[1.0, 2.0], 0.5),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            compute_tas_factor(&[1.0], &[1.0], 1.5),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            compute_tas_factor(&[1.0], &[1.0], -0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn tas_factor_floors_zero_channels() {
        let s = compute_tas_factor(&[0.0], &[0.0], 0.5).unwrap();
        assert!(s.values()[0].is_finite() && s.values()[0] > 0.0);
    }

    #[test]
    fn apply_identity_factor_is_exact() {
        let mut rng = StdRng::seed_from_u64(33);
        let x = Tensor::from_fn(4, 3, |_, _| rng.sample(StandardNormal));
        let w = Tensor::from_fn(2, 3, |_, _| rng.sample(StandardNormal));
        let s = SmoothingFactor::identity(3);
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        assert_eq!(xs.data(), x.data());
        assert_eq!(ws.data(), w.data());
    }

    #[test]
    fn apply_equalizes_single_outlier_channel() {
        // a = [100, 1, 1], b = all ones, alpha = 0.5: smoothed absmax becomes
        // [10, 1, 1] so the channel spread shrinks from 100x to 10x.
        let mut data = Vec::new();
        for l in 0..4 {
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            data.extend_from_slice(&[sign * 100.0, sign * 1.0, sign * 1.0]);
        }
        let x = Tensor::new(vec![1, 1, 4, 3], data).unwrap();
        let trace = ActivationTrace::new(0, x).unwrap();
        let w = Tensor::matrix(2, 3, vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        let s = compute_tas_factor(trace.per_channel_absmax(), &weight_absmax(&w).unwrap(), 0.5)
            .unwrap();
        let (xs, _) = apply_smoothing(trace.tensor(), &w, &s).unwrap();
        let smoothed = collect_absmax(&xs).unwrap();
        assert!((smoothed[0] - 10.0).abs() < 1e-12);
        assert!((smoothed[1] - 1.0).abs() < 1e-12);
        assert!((smoothed[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn apply_preserves_full_precision_product() {
        let mut rng = StdRng::seed_from_u64(34);
        for _ in 0..20 {
            let x = Tensor::from_fn(5, 6, |_, _| rng.sample(StandardNormal));
            let w = Tensor::from_fn(4, 6, |_, _| rng.sample(StandardNormal));
            let values: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..100.0)).collect();
            let s = SmoothingFactor::new(values, 0.5).unwrap();
            let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
            let smoothed = matmul_nt(&xs, &ws).unwrap();
            let original = matmul_nt(&x, &w).unwrap();
            let err = frobenius_norm(&sub(&smoothed, &original).unwrap());
            assert!(err <= 1e-9 * frobenius_norm(&original));
        }
    }

    #[test]
    fn apply_rejects_channel_mismatch() {
        let x = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let w = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let s = SmoothingFactor::identity(3);
        assert!(matches!(apply_smoothing(&x, &w, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn fold_into_identity_producer() {
        let s = SmoothingFactor::new(vec![2.0, 4.0], 0.5).unwrap();
        let FoldOutcome::Folded(p) = fold_smoothing(Some(&Tensor::identity(2)), &s).unwrap()
        else {
            panic!("expected a folded producer");
        };
        assert_eq!(p.data(), &[0.5, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn fold_without_producer_marks_on_the_fly() {
        let s = SmoothingFactor::identity(4);
        assert_eq!(fold_smoothing(None, &s).unwrap(), FoldOutcome::OnTheFly);
    }

    #[test]
    fn fold_composition_matches_unfolded_chain() {
        let mut rng = StdRng::seed_from_u64(35);
        let producer = Tensor::from_fn(4, 5, |_, _| rng.sample(StandardNormal));
        let consumer = Tensor::from_fn(3, 4, |_, _| rng.sample(StandardNormal));
        let x = Tensor::from_fn(6, 5, |_, _| rng.sample(StandardNormal));
        let values: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..10.0)).collect();
        let s = SmoothingFactor::new(values, 0.5).unwrap();

        // original chain: h = x·Pᵀ, y = h·Wᵀ
        let h = matmul_nt(&x, &producer).unwrap();
        let reference = matmul_nt(&h, &consumer).unwrap();

        // folded chain: producer rows divided by s, consumer columns scaled by s
        let FoldOutcome::Folded(p_folded) = fold_smoothing(Some(&producer), &s).unwrap() else {
            panic!("expected a folded producer");
        };
        let w_s = tensor::scale_columns(&consumer, s.values()).unwrap();
        let h_folded = matmul_nt(&x, &p_folded).unwrap();
        let folded = matmul_nt(&h_folded, &w_s).unwrap();

        let err = frobenius_norm(&sub(&folded, &reference).unwrap());
        assert!(err <= 1e-9 * frobenius_norm(&reference));
    }

    #[test]
    fn fold_rejects_mismatched_producer() {
        let s = SmoothingFactor::identity(3);
        let p = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            fold_smoothing(Some(&p), &s),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn full_trace_absmax_dominates_single_timesteps(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let trace = random_trace(&mut rng, 2, 4, 3, 5);
            let full = trace.per_channel_absmax();
            for t in 0..trace.timesteps() {
                for b in 0..trace.batch() {
                    let slice = trace.slice(b, t);
                    for c in 0..trace.channels() {
                        let mut m = 0.0f64;
                        for l in 0..trace.tokens() {
                            m = m.max(slice.at(l, c).abs());
                        }
                        prop_assert!(full[c] >= m);
                    }
                }
            }
        }

        #[test]
        fn tas_factor_scale_covariant(
            k in 0.01f64..100.0,
            alpha in 0.0f64..1.0,
            seed in 0u64..500,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..10.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..10.0)).collect();
            let base = compute_tas_factor(&a, &b, alpha).unwrap();
            let scaled_a: Vec<f64> = a.iter().map(|&x| k * x).collect();
            let scaled = compute_tas_factor(&scaled_a, &b, alpha).unwrap();
            let expect = k.powf(alpha);
            for (s1, s0) in scaled.values().iter().zip(base.values()) {
                let ratio = s1 / s0;
                prop_assert!((ratio - expect).abs() <= 1e-12 * expect);
            }
        }
    }
}
