//! Style synthesis by perturbing feature channel statistics.
//!
//! Local perturbation rescales an image's own statistics:
//! `F_p = (1 + beta) * F + (alpha - beta) * mu(F)`. Global perturbation
//! substitutes the dataset-level running mean for `mu(F)`, which tolerates
//! much larger noise because the averaged profile is smoother than any
//! individual sample's. Both are gated per stage by Bernoulli draws; the
//! support and query of an episode reuse the same factors.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

/// Sampled beta is clamped above this so `1 + beta` stays positive; a
/// non-positive scale would invert feature contrast and break the sigma
/// identity.
pub const BETA_FLOOR: f64 = -0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian { std: f64 },
    /// Raw Beta(a, b) samples in (0, 1), used uncentered.
    Beta { a: f64, b: f64 },
    /// Uniform on [lo, hi).
    Uniform { lo: f64, hi: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Gaussian { std } => {
                if std <= 0.0 {
                    return Err(Error::invalid("gaussian noise: std must be > 0"));
                }
            }
            NoiseSpec::Beta { a, b } => {
                if a <= 0.0 || b <= 0.0 {
                    return Err(Error::invalid("beta noise: shape parameters must be > 0"));
                }
            }
            NoiseSpec::Uniform { lo, hi } => {
                if lo >= hi {
                    return Err(Error::invalid("uniform noise: lo must be < hi"));
                }
            }
        }
        Ok(())
    }
}

/// i.i.d. noise vector of length `n`.
pub fn sample_noise<T: Scalar>(
    spec: &NoiseSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let data: Vec<T> = match *spec {
        NoiseSpec::Gaussian { std } => {
            let d = rand_distr::Normal::new(0.0, std)
                .map_err(|e| Error::invalid(format!("gaussian noise: {e}")))?;
            (0..n).map(|_| T::from_f64(d.sample(rng))).collect()
        }
        NoiseSpec::Beta { a, b } => {
            let d = rand_distr::Beta::new(a, b)
                .map_err(|e| Error::invalid(format!("beta noise: {e}")))?;
            (0..n).map(|_| T::from_f64(d.sample(rng))).collect()
        }
        NoiseSpec::Uniform { lo, hi } => {
            (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()
        }
    };
    Tensor::new(vec![n], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub p_local: f64,
    pub p_global: f64,
    pub local_noise: NoiseSpec,
    pub global_noise: NoiseSpec,
    /// Encoder stage indices carrying perturbation/rectification hooks.
    pub stages: Vec<usize>,
    /// Momentum factor of the global stats bank.
    pub bank_momentum: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            p_local: 0.5,
            p_global: 0.5,
            local_noise: NoiseSpec::Gaussian { std: 0.75 },
            global_noise: NoiseSpec::Gaussian { std: 1.0 },
            stages: vec![0, 1, 2],
            bank_momentum: 0.99,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_local) || !(0.0..=1.0).contains(&self.p_global) {
            return Err(Error::invalid("perturb probabilities must be in [0,1]"));
        }
        if (self.p_local > 0.0 || self.p_global > 0.0) && self.stages.is_empty() {
            return Err(Error::invalid("perturbation enabled but no stages configured"));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return Err(Error::invalid("bank momentum must be in [0,1]"));
        }
        self.local_noise.validate()?;
        self.global_noise.validate()
    }

    pub fn enabled(&self) -> bool {
        self.p_local > 0.0 || self.p_global > 0.0
    }
}

/// Momentum-updated dataset-level channel means, one `[C]` vector per
/// hooked stage. Updated only from clean (unperturbed) forward passes.
#[derive(Debug, Clone, Default)]
pub struct GlobalStatsBank<T: Scalar> {
    entries: Vec<Option<Tensor<T>>>,
    pub momentum: f64,
}

impl<T: Scalar> GlobalStatsBank<T> {
    pub fn new(stage_count: usize, momentum: f64) -> Self {
        GlobalStatsBank { entries: vec![None; stage_count], momentum }
    }

    pub fn stage_count(&self) -> usize {
        self.entries.len()
    }

    pub fn is_initialized(&self, stage: usize) -> bool {
        self.entries.get(stage).is_some_and(|e| e.is_some())
    }

    pub fn get(&self, stage: usize) -> Result<&Tensor<T>> {
        self.entries
            .get(stage)
            .and_then(|e| e.as_ref())
            .ok_or(Error::UninitializedBank { stage })
    }

    /// First update initializes to `mu`; later updates apply
    /// `mu_datum <- momentum * mu_datum + (1 - momentum) * mu`.
    pub fn update(&mut self, stage: usize, mu: &Tensor<T>) -> Result<()> {
        if stage >= self.entries.len() {
            self.entries.resize(stage + 1, None);
        }
        match &mut self.entries[stage] {
            Some(current) => {
                if current.shape() != mu.shape() {
                    return Err(Error::shape(format!(
                        "bank stage {stage}: {:?} vs update {:?}",
                        current.shape(),
                        mu.shape()
                    )));
                }
                let lam = T::from_f64(self.momentum);
                let one_minus = T::one() - lam;
                for (cur, &new) in current.data_mut().iter_mut().zip(mu.data()) {
                    *cur = lam * *cur + one_minus * new;
                }
            }
            slot @ None => *slot = Some(mu.clone()),
        }
        Ok(())
    }

    /// Force a stage value, bypassing the first-update initialization path.
    pub fn set(&mut self, stage: usize, mu: Tensor<T>) {
        if stage >= self.entries.len() {
            self.entries.resize(stage + 1, None);
        }
        self.entries[stage] = Some(mu);
    }

    pub fn initialized_stages(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|_| i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbMode {
    None,
    Local,
    Global,
}

/// Per-episode perturbation factors, reused between the support and query
/// sides. `alpha` and `beta` are `[C]`, shared across the batch.
#[derive(Debug, Clone)]
pub struct SharedFactors<T: Scalar> {
    pub mode: PerturbMode,
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Result of one gated perturbation.
pub struct PerturbOutcome<T: Scalar> {
    pub out: Var,
    pub factors: SharedFactors<T>,
}

/// `(1 + beta) * f + (alpha - beta) * mu(f)`, the collapsed re-styling form.
pub fn perturb_local<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Var> {
    let one_plus_beta = tape.constant(beta.map(|b| b + T::one()))?;
    let alpha_minus_beta = alpha_minus_beta_const(tape, alpha, beta)?;
    let mu = tape.mean_hw(f)?;
    let scaled = tape.mul(f, one_plus_beta)?;
    let shift = tape.mul(mu, alpha_minus_beta)?;
    tape.add(scaled, shift)
}

/// Same as [`perturb_local`] with the dataset-level mean substituted for
/// the image's own mean.
pub fn perturb_global<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    bank: &GlobalStatsBank<T>,
    stage: usize,
) -> Result<Var> {
    let mu_datum = bank.get(stage)?;
    if alpha.shape() != mu_datum.shape() || beta.shape() != mu_datum.shape() {
        return Err(Error::shape(format!(
            "perturb_global: factors {:?}/{:?} vs bank {:?}",
            alpha.shape(),
            beta.shape(),
            mu_datum.shape()
        )));
    }
    let one_plus_beta = tape.constant(beta.map(|b| b + T::one()))?;
    // (alpha - beta) * mu_datum involves constants only.
    let mut shift = Tensor::zeros(mu_datum.shape().to_vec());
    for (((s, &a), &b), &m) in shift
        .data_mut()
        .iter_mut()
        .zip(alpha.data())
        .zip(beta.data())
        .zip(mu_datum.data())
    {
        *s = (a - b) * m;
    }
    let shift = tape.constant(shift)?;
    let scaled = tape.mul(f, one_plus_beta)?;
    tape.add(scaled, shift)
}

/// Apply a perturbation with already-fixed factors (the query side of an
/// episode, or a cyclic re-perturbation).
pub fn perturb_with_factors<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    factors: &SharedFactors<T>,
    bank: &GlobalStatsBank<T>,
    stage: usize,
) -> Result<Var> {
    match factors.mode {
        PerturbMode::None => Ok(f),
        PerturbMode::Local => perturb_local(tape, f, &factors.alpha, &factors.beta),
        PerturbMode::Global => {
            perturb_global(tape, f, &factors.alpha, &factors.beta, bank, stage)
        }
    }
}

/// Gated perturbation: local with probability `p_local`, otherwise global
/// with probability `p_global`, otherwise identity. Local is drawn first so
/// the two never compose. Fresh factors are sampled per channel unless
/// `shared` carries the episode's.
pub fn gated_perturb<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    cfg: &PerturbConfig,
    bank: &GlobalStatsBank<T>,
    stage: usize,
    rng: &mut impl Rng,
    shared: Option<&SharedFactors<T>>,
) -> Result<PerturbOutcome<T>> {
    let channels = match tape.shape(f) {
        [_, c, _, _] => *c,
        s => return Err(Error::shape(format!("gated_perturb expects [B,C,H,W], got {s:?}"))),
    };
    let factors = match shared {
        Some(sf) => sf.clone(),
        None => draw_factors(cfg, channels, rng)?,
    };
    let out = perturb_with_factors(tape, f, &factors, bank, stage)?;
    Ok(PerturbOutcome { out, factors })
}

/// Sample the gating decision and, when perturbing, the per-channel factors.
pub fn draw_factors<T: Scalar>(
    cfg: &PerturbConfig,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<SharedFactors<T>> {
    cfg.validate()?;
    let mode = if rng.random_range(0.0..1.0) < cfg.p_local {
        PerturbMode::Local
    } else if rng.random_range(0.0..1.0) < cfg.p_global {
        PerturbMode::Global
    } else {
        PerturbMode::None
    };
    let (alpha, beta) = match mode {
        PerturbMode::None => (Tensor::zeros(vec![channels]), Tensor::zeros(vec![channels])),
        PerturbMode::Local => {
            let a = sample_noise(&cfg.local_noise, channels, rng)?;
            let b = sample_noise(&cfg.local_noise, channels, rng)?;
            (a, clamp_beta(b))
        }
        PerturbMode::Global => {
            let a = sample_noise(&cfg.global_noise, channels, rng)?;
            let b = sample_noise(&cfg.global_noise, channels, rng)?;
            (a, clamp_beta(b))
        }
    };
    Ok(SharedFactors { mode, alpha, beta })
}

fn clamp_beta<T: Scalar>(beta: Tensor<T>) -> Tensor<T> {
    let floor = T::from_f64(BETA_FLOOR);
    beta.map(|b| if b > floor { b } else { floor })
}

fn alpha_minus_beta_const<T: Scalar>(
    tape: &mut Tape<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Var> {
    if alpha.shape() != beta.shape() {
        return Err(Error::shape(format!(
            "perturbation factors {:?} vs {:?}",
            alpha.shape(),
            beta.shape()
        )));
    }
    let mut amb = alpha.clone();
    for (a, &b) in amb.data_mut().iter_mut().zip(beta.data()) {
        *a = *a - b;
    }
    tape.constant(amb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{batch_mean, channel_stats_value};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(seed: u64, shape: Vec<usize>) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..3.0))
    }

    #[test]
    fn degenerate_gaussian_rejected() {
        let mut r = rng(0);
        assert!(sample_noise::<f64>(&NoiseSpec::Gaussian { std: 0.0 }, 4, &mut r).is_err());
    }

    #[test]
    fn uniform_noise_mean_and_range() {
        let mut r = rng(1);
        let s = sample_noise::<f64>(&NoiseSpec::Uniform { lo: -1.0, hi: 1.0 }, 100_000, &mut r)
            .unwrap();
        let mean: f64 = s.data().iter().sum::<f64>() / s.numel() as f64;
        assert!(mean.abs() < 0.02, "uniform mean {mean}");
        assert!(s.data().iter().all(|&v| (-1.0..1.0).contains(&v)));
    }

    #[test]
    fn beta_noise_matches_analytic_mean() {
        let mut r = rng(2);
        let s = sample_noise::<f64>(&NoiseSpec::Beta { a: 3.0, b: 4.0 }, 100_000, &mut r).unwrap();
        let mean: f64 = s.data().iter().sum::<f64>() / s.numel() as f64;
        assert!((mean - 3.0 / 7.0).abs() < 0.02, "beta mean {mean}");
    }

    #[test]
    fn zero_factors_are_identity() {
        let f = random_map(3, vec![2, 3, 4, 4]);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let z = Tensor::zeros(vec![3]);
        let out = perturb_local(&mut tape, fv, &z, &z).unwrap();
        assert_eq!(tape.value(out).data(), f.data());
    }

    #[test]
    fn perturbed_mean_scales_by_one_plus_alpha() {
        let f = random_map(4, vec![2, 3, 8, 8]);
        let orig = channel_stats_value(&f, 1e-5).unwrap();
        let mut r = rng(5);
        let alpha: Tensor<f64> = sample_noise(&NoiseSpec::Gaussian { std: 0.5 }, 3, &mut r).unwrap();
        let beta: Tensor<f64> = sample_noise(&NoiseSpec::Gaussian { std: 0.4 }, 3, &mut r).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f).unwrap();
        let out = perturb_local(&mut tape, fv, &alpha, &beta).unwrap();
        let got = channel_stats_value(tape.value(out), 1e-5).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let want = (1.0 + alpha.data()[c]) * orig.mu.data()[b * 3 + c];
                let gotv = got.mu.data()[b * 3 + c];
                assert!((gotv - want).abs() < 1e-10, "mu {gotv} vs {want}");
            }
        }
    }

    #[test]
    fn global_with_image_mean_collapses_to_local() {
        // One batch item, bank equal to the image's own means.
        let f = random_map(6, vec![1, 4, 6, 6]);
        let mu = channel_stats_value(&f, 1e-5).unwrap().mu;
        let mut bank = GlobalStatsBank::new(1, 0.9);
        bank.set(0, batch_mean(&mu).unwrap());
        let mut r = rng(7);
        let alpha: Tensor<f64> = sample_noise(&NoiseSpec::Gaussian { std: 0.7 }, 4, &mut r).unwrap();
        let beta: Tensor<f64> = sample_noise(&NoiseSpec::Gaussian { std: 0.7 }, 4, &mut r).unwrap();

        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let local = perturb_local(&mut tape, fv, &alpha, &beta).unwrap();
        let global = perturb_global(&mut tape, fv, &alpha, &beta, &bank, 0).unwrap();
        for (&l, &g) in tape.value(local).data().iter().zip(tape.value(global).data()) {
            assert!((l - g).abs() < 1e-12);
        }
    }

    #[test]
    fn global_shift_adds_bank_mean() {
        // alpha=1, beta=0, mu_datum=m -> F + m per channel.
        let f = random_map(8, vec![1, 2, 3, 3]);
        let m = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        let mut bank = GlobalStatsBank::new(1, 0.5);
        bank.set(0, m.clone());
        let alpha = Tensor::full(vec![2], 1.0);
        let beta = Tensor::zeros(vec![2]);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let out = perturb_global(&mut tape, fv, &alpha, &beta, &bank, 0).unwrap();
        for c in 0..2 {
            for i in 0..9 {
                let want = f.data()[c * 9 + i] + m.data()[c];
                let got = tape.value(out).data()[c * 9 + i];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uninitialized_bank_stage_is_error() {
        let f = random_map(9, vec![1, 2, 3, 3]);
        let bank = GlobalStatsBank::<f64>::new(2, 0.9);
        let z = Tensor::zeros(vec![2]);
        let mut tape = Tape::new();
        let fv = tape.constant(f).unwrap();
        assert!(matches!(
            perturb_global(&mut tape, fv, &z, &z, &bank, 1),
            Err(Error::UninitializedBank { stage: 1 })
        ));
    }

    #[test]
    fn bank_momentum_limits() {
        let m = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        // momentum 1: unchanged after any update.
        let mut bank = GlobalStatsBank::new(1, 1.0);
        bank.set(0, Tensor::zeros(vec![2]));
        bank.update(0, &m).unwrap();
        assert_eq!(bank.get(0).unwrap().data(), &[0.0, 0.0]);
        // momentum 0: exactly the latest value.
        let mut bank = GlobalStatsBank::new(1, 0.0);
        bank.set(0, Tensor::zeros(vec![2]));
        bank.update(0, &m).unwrap();
        assert_eq!(bank.get(0).unwrap().data(), m.data());
    }

    #[test]
    fn bank_recurrence_unrolls_as_geometric_series() {
        // momentum 0.9 from forced init 0, constant stream m:
        // after 3 updates mu_datum = m * (1 - 0.9^3).
        let m = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let mut bank = GlobalStatsBank::new(1, 0.9);
        bank.set(0, Tensor::zeros(vec![1]));
        for _ in 0..3 {
            bank.update(0, &m).unwrap();
        }
        let want = 2.0 * (1.0 - 0.9f64.powi(3));
        assert!((bank.get(0).unwrap().item() - want).abs() < 1e-12);
    }

    #[test]
    fn first_update_initializes() {
        let m = Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap();
        let mut bank = GlobalStatsBank::new(1, 0.99);
        assert!(!bank.is_initialized(0));
        bank.update(0, &m).unwrap();
        assert_eq!(bank.get(0).unwrap().data(), m.data());
    }

    #[test]
    fn disabled_gating_is_identity() {
        let cfg = PerturbConfig { p_local: 0.0, p_global: 0.0, ..Default::default() };
        let f = random_map(10, vec![1, 3, 4, 4]);
        let bank = GlobalStatsBank::new(3, 0.99);
        let mut r = rng(11);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let o = gated_perturb(&mut tape, fv, &cfg, &bank, 0, &mut r, None).unwrap();
        assert_eq!(o.factors.mode, PerturbMode::None);
        assert_eq!(o.out, fv);
        assert!(o.factors.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_factors_reproduce_without_rng() {
        let cfg = PerturbConfig::default();
        let f = random_map(12, vec![2, 3, 4, 4]);
        let mut bank = GlobalStatsBank::new(3, 0.99);
        bank.set(0, Tensor::full(vec![3], 0.5));
        let mut r = rng(13);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let first = gated_perturb(&mut tape, fv, &cfg, &bank, 0, &mut r, None).unwrap();
        // A second application with shared factors must not consult the rng.
        let mut dead_rng = rng(99);
        let second =
            gated_perturb(&mut tape, fv, &cfg, &bank, 0, &mut dead_rng, Some(&first.factors))
                .unwrap();
        assert_eq!(
            tape.value(first.out).data(),
            tape.value(second.out).data(),
            "shared factors must reproduce the perturbation"
        );
    }

    #[test]
    fn gating_fraction_matches_probability() {
        let cfg = PerturbConfig::default();
        let mut r = rng(14);
        let n = 10_000;
        let mut local = 0usize;
        for _ in 0..n {
            let f: SharedFactors<f64> = draw_factors(&cfg, 4, &mut r).unwrap();
            if f.mode == PerturbMode::Local {
                local += 1;
            }
        }
        let frac = local as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "local fraction {frac}");
    }

    #[test]
    fn beta_clamp_keeps_scale_positive() {
        let cfg = PerturbConfig {
            p_local: 1.0,
            local_noise: NoiseSpec::Gaussian { std: 5.0 },
            ..Default::default()
        };
        let mut r = rng(15);
        for _ in 0..200 {
            let f: SharedFactors<f64> = draw_factors(&cfg, 8, &mut r).unwrap();
            assert!(f.beta.data().iter().all(|&b| 1.0 + b > 0.0));
        }
    }
}
