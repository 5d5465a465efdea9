//! The compact domain-rectifying adapter.
//!
//! One adapter per hooked encoder stage. It sees only the pooled channel
//! statistics of the incoming (possibly perturbed) feature map, so it is
//! resolution-independent: concat(mu, sigma) -> bottleneck MLP -> two
//! bounded rectification vectors, applied through the same collapsed
//! re-styling form as the perturbation:
//! `F_rect = (1 + beta_rect) * F_p + (alpha_rect - beta_rect) * mu(F_p)`.

use crate::error::{Error, Result};
use crate::stats::channel_stats;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::Distribution;

/// Predicted per-channel corrections, `[B,C]` each. The tanh output keeps
/// `1 + beta_rect` positive.
#[derive(Debug, Clone, Copy)]
pub struct RectificationFactors {
    pub alpha: Var,
    pub beta: Var,
}

/// Bottleneck MLP parameters for one stage: 2C -> C/r -> 2C.
#[derive(Debug, Clone)]
pub struct AdapterMlp<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    /// Output bound: factors are `scale * tanh(.)`.
    pub scale: f64,
}

impl<T: Scalar> AdapterMlp<T> {
    /// The final layer starts at zero so the adapter begins as the
    /// identity mapping.
    pub fn init(channels: usize, reduction: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        let fan_in = 2 * channels;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
        let w1 = Tensor::from_fn(vec![fan_in, hidden], |_| T::from_f64(normal.sample(rng)));
        AdapterMlp {
            w1,
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, fan_in]),
            b2: Tensor::zeros(vec![fan_in]),
            scale,
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[0] / 2
    }

    /// Register this stage's parameters on a tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<AdapterVars> {
        Ok(AdapterVars {
            w1: tape.leaf(self.w1.clone(), trainable)?,
            b1: tape.leaf(self.b1.clone(), trainable)?,
            w2: tape.leaf(self.w2.clone(), trainable)?,
            b2: tape.leaf(self.b2.clone(), trainable)?,
            scale: self.scale,
            channels: self.channels(),
        })
    }
}

/// Tape handles for one stage's adapter parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub scale: f64,
    pub channels: usize,
}

/// stats -> linear -> relu -> linear -> split -> scaled tanh.
pub fn predict_factors<T: Scalar>(
    tape: &mut Tape<T>,
    f_p: Var,
    vars: &AdapterVars,
    eps: f64,
) -> Result<RectificationFactors> {
    let c = vars.channels;
    match tape.shape(f_p) {
        [_, fc, _, _] if *fc == c => {}
        s => {
            return Err(Error::shape(format!(
                "adapter for {c} channels applied to feature {s:?}"
            )))
        }
    }
    let stats = channel_stats(tape, f_p, eps)?;
    let inp = tape.concat_cols(stats.mu, stats.sigma)?;
    let pre = tape.linear(inp, vars.w1, vars.b1)?;
    let hidden = tape.relu(pre)?;
    let out = tape.linear(hidden, vars.w2, vars.b2)?;
    let a_raw = tape.slice_cols(out, 0, c)?;
    let b_raw = tape.slice_cols(out, c, 2 * c)?;
    let s = T::from_f64(vars.scale);
    let a_t = tape.tanh(a_raw)?;
    let b_t = tape.tanh(b_raw)?;
    Ok(RectificationFactors { alpha: tape.scale(a_t, s)?, beta: tape.scale(b_t, s)? })
}

/// Apply rectification factors through the collapsed re-styling form.
pub fn rectify<T: Scalar>(
    tape: &mut Tape<T>,
    f_p: Var,
    factors: RectificationFactors,
) -> Result<Var> {
    let mu_p = tape.mean_hw(f_p)?;
    let one_plus_beta = tape.add_scalar(factors.beta, T::one())?;
    let alpha_minus_beta = tape.sub(factors.alpha, factors.beta)?;
    let scaled = tape.mul(f_p, one_plus_beta)?;
    let shift = tape.mul(mu_p, alpha_minus_beta)?;
    tape.add(scaled, shift)
}

/// One hook point: predict factors from the incoming feature and rectify
/// it, or pass it through unchanged when disabled. At test time every
/// incoming feature is treated as perturbed.
pub fn rectify_stage<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    vars: Option<&AdapterVars>,
    stage: usize,
    enabled: bool,
    eps: f64,
) -> Result<Var> {
    if !enabled {
        return Ok(f);
    }
    let vars = vars.ok_or(Error::MissingStage { stage })?;
    let factors = predict_factors(tape, f, vars, eps)?;
    rectify(tape, f, factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::perturb_local;
    use crate::stats::channel_stats_value;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;

    fn zero_adapter(channels: usize) -> AdapterMlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = AdapterMlp::init(channels, 4, 1.0, &mut rng);
        a.w1 = Tensor::zeros(a.w1.shape().to_vec());
        a
    }

    fn random_map(seed: u64, shape: Vec<usize>) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(0.5..2.5))
    }

    #[test]
    fn zero_weights_predict_zero_factors() {
        let adapter = zero_adapter(4);
        let mut tape = Tape::new();
        let f = tape.constant(random_map(1, vec![2, 4, 5, 5])).unwrap();
        let vars = adapter.bind(&mut tape, false).unwrap();
        let factors = predict_factors(&mut tape, f, &vars, EPS).unwrap();
        assert!(tape.value(factors.alpha).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(factors.beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factors_bounded_by_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut adapter = AdapterMlp::<f64>::init(4, 4, 1.0, &mut rng);
        // Large random final layer to push tanh toward saturation.
        adapter.w2 = Tensor::from_fn(adapter.w2.shape().to_vec(), |_| rng.random_range(-9.0..9.0));
        adapter.b2 = Tensor::from_fn(adapter.b2.shape().to_vec(), |_| rng.random_range(-9.0..9.0));
        let mut tape = Tape::new();
        let f = tape.constant(random_map(4, vec![3, 4, 6, 6])).unwrap();
        let vars = adapter.bind(&mut tape, false).unwrap();
        let factors = predict_factors(&mut tape, f, &vars, EPS).unwrap();
        for &a in tape.value(factors.alpha).data() {
            assert!(a.abs() <= 1.0);
        }
        for &b in tape.value(factors.beta).data() {
            assert!(b.abs() <= 1.0);
        }
    }

    #[test]
    fn zero_factors_rectify_to_identity() {
        let f = random_map(5, vec![1, 3, 4, 4]);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let z = tape.constant(Tensor::zeros(vec![1, 3])).unwrap();
        let out = rectify(&mut tape, fv, RectificationFactors { alpha: z, beta: z }).unwrap();
        assert_eq!(tape.value(out).data(), f.data());
    }

    #[test]
    fn rectify_matches_expanded_adain_form() {
        // (1+b)*sigma_p*(F-mu_p)/sigma_p + (1+a)*mu_p computed by hand.
        let f = random_map(6, vec![2, 3, 5, 5]);
        let stats = channel_stats_value(&f, EPS).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let alpha = Tensor::from_fn(vec![2, 3], |_| r.random_range(-0.5..0.5));
        let beta = Tensor::from_fn(vec![2, 3], |_| r.random_range(-0.5..0.5));

        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let av = tape.constant(alpha.clone()).unwrap();
        let bv = tape.constant(beta.clone()).unwrap();
        let got = rectify(&mut tape, fv, RectificationFactors { alpha: av, beta: bv }).unwrap();

        let (bs, c, h, w) = f.dims4().unwrap();
        for bi in 0..bs {
            for ci in 0..c {
                let mu = stats.mu.data()[bi * c + ci];
                let a = alpha.data()[bi * c + ci];
                let b = beta.data()[bi * c + ci];
                for p in 0..h * w {
                    let x = f.data()[(bi * c + ci) * h * w + p];
                    let want = (1.0 + b) * (x - mu) + (1.0 + a) * mu;
                    let gotv = tape.value(got).data()[(bi * c + ci) * h * w + p];
                    assert!((gotv - want).abs() < 1e-10, "{gotv} vs {want}");
                }
            }
        }
    }

    #[test]
    fn oracle_factors_invert_local_perturbation() {
        // alpha_rect = 1/(1+alpha) - 1, beta_rect = 1/(1+beta) - 1 restores
        // the original stats and, channel-affinely, the original map.
        let f = random_map(8, vec![2, 4, 8, 8]);
        let orig = channel_stats_value(&f, EPS).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let alpha = Tensor::from_fn(vec![4], |_| r.random_range(-0.6..1.5));
        let beta = Tensor::from_fn(vec![4], |_| r.random_range(-0.6..1.5));

        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let fp = perturb_local(&mut tape, fv, &alpha, &beta).unwrap();
        // Oracle inverse, expanded across the batch.
        let inv = |t: &Tensor<f64>| {
            Tensor::from_fn(vec![2, 4], |i| 1.0 / (1.0 + t.data()[i % 4]) - 1.0)
        };
        let av = tape.constant(inv(&alpha)).unwrap();
        let bv = tape.constant(inv(&beta)).unwrap();
        let restored =
            rectify(&mut tape, fp, RectificationFactors { alpha: av, beta: bv }).unwrap();

        let got = channel_stats_value(tape.value(restored), EPS).unwrap();
        for (g, o) in got.mu.data().iter().zip(orig.mu.data()) {
            assert!((g - o).abs() / o.abs().max(1.0) < 1e-6);
        }
        for (g, o) in got.sigma.data().iter().zip(orig.sigma.data()) {
            assert!((g - o).abs() / o.abs().max(1.0) < 1e-6);
        }
        for (g, o) in tape.value(restored).data().iter().zip(f.data()) {
            assert!((g - o).abs() / o.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn disabled_stage_passes_through() {
        let f = random_map(10, vec![1, 4, 4, 4]);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let out = rectify_stage(&mut tape, fv, None, 0, false, EPS).unwrap();
        assert_eq!(out, fv);
    }

    #[test]
    fn enabled_stage_without_params_is_error() {
        let f = random_map(11, vec![1, 4, 4, 4]);
        let mut tape = Tape::new();
        let fv = tape.constant(f).unwrap();
        assert!(matches!(
            rectify_stage::<f64>(&mut tape, fv, None, 2, true, EPS),
            Err(Error::MissingStage { stage: 2 })
        ));
    }

    #[test]
    fn zero_adapter_stage_is_identity() {
        let adapter = zero_adapter(4);
        let f = random_map(12, vec![2, 4, 4, 4]);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let vars = adapter.bind(&mut tape, false).unwrap();
        let out = rectify_stage(&mut tape, fv, Some(&vars), 0, true, EPS).unwrap();
        for (&a, &b) in tape.value(out).data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
