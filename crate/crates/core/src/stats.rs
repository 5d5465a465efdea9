//! Channel statistics and adaptive instance re-styling.
//!
//! The per-channel spatial mean and (epsilon-stabilized) standard deviation
//! of a feature map are the style representation everything else builds on.
//! Statistics are differentiated through, not detached: gradients must flow
//! into mu and sigma along the perturbation and rectification paths.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Per-channel mean and stabilized standard deviation, `[B,C]` each.
#[derive(Debug, Clone)]
pub struct ChannelStats<T: Scalar> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
    pub eps: f64,
}

/// Tape-resident counterpart of [`ChannelStats`] used while recording.
#[derive(Debug, Clone, Copy)]
pub struct StatsVars {
    pub mu: Var,
    pub sigma: Var,
}

/// mu = spatial mean per (b,c); sigma = sqrt(biased spatial variance + eps).
pub fn channel_stats<T: Scalar>(tape: &mut Tape<T>, f: Var, eps: f64) -> Result<StatsVars> {
    if eps <= 0.0 {
        return Err(Error::invalid("channel_stats: eps must be > 0"));
    }
    let mu = tape.mean_hw(f)?;
    let centered = tape.sub(f, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_hw(sq)?;
    let stabilized = tape.add_scalar(var, T::from_f64(eps))?;
    let sigma = tape.sqrt(stabilized)?;
    Ok(StatsVars { mu, sigma })
}

/// Value-level statistics of a plain tensor, via a scratch tape.
pub fn channel_stats_value<T: Scalar>(f: &Tensor<T>, eps: f64) -> Result<ChannelStats<T>> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone())?;
    let s = channel_stats(&mut tape, fv, eps)?;
    Ok(ChannelStats {
        mu: tape.value(s.mu).clone(),
        sigma: tape.value(s.sigma).clone(),
        eps,
    })
}

/// Re-style `f` from `src` statistics to `dst`:
/// `dst.sigma * (f - src.mu) / src.sigma + dst.mu`.
pub fn adain<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    src: StatsVars,
    dst: StatsVars,
) -> Result<Var> {
    let centered = tape.sub(f, src.mu)?;
    let normalized = tape.div(centered, src.sigma)?;
    let scaled = tape.mul(normalized, dst.sigma)?;
    tape.add(scaled, dst.mu)
}

/// Batch-average a `[B,C]` statistic down to `[C]`.
pub fn batch_mean<T: Scalar>(stat: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = match stat.shape() {
        [b, c] => (*b, *c),
        s => return Err(Error::shape(format!("batch_mean expects [B,C], got {s:?}"))),
    };
    let inv = T::from_f64(1.0 / b as f64);
    let d = stat.data();
    let mut out = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            out[ci] += d[bi * c + ci];
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Tensor::new(vec![c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_has_zero_variance() {
        // mu = c, sigma = sqrt(eps).
        let f = Tensor::full(vec![2, 3, 4, 4], 1.75f64);
        let s = channel_stats_value(&f, 1e-5).unwrap();
        for &m in s.mu.data() {
            assert!((m - 1.75).abs() < 1e-12);
        }
        for &sd in s.sigma.data() {
            assert!((sd - 1e-5f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_variance_small_eps_limit() {
        // channel values {1,1,3,3}: mu = 2, sigma -> 1 as eps -> 0.
        let f = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 1.0, 3.0, 3.0]).unwrap();
        let s = channel_stats_value(&f, 1e-14).unwrap();
        assert!((s.mu.item() - 2.0).abs() < 1e-12);
        assert!((s.sigma.item() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn non_positive_eps_rejected() {
        let f = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        assert!(channel_stats_value(&f, 0.0).is_err());
        assert!(channel_stats_value(&f, -1.0).is_err());
    }

    #[test]
    fn adain_with_same_stats_is_identity() {
        let f = Tensor::from_fn(vec![1, 2, 3, 3], |i| (i as f64 * 0.37).sin() + 0.2);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let s = channel_stats(&mut tape, fv, 1e-5).unwrap();
        let out = adain(&mut tape, fv, s, s).unwrap();
        for (&a, &b) in tape.value(out).data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_transfers_target_stats() {
        // Restyled map carries the destination stats up to eps distortion.
        let eps = 1e-5;
        let raw = Tensor::from_fn(vec![1, 2, 8, 8], |i| ((i * 31 + 7) % 13) as f64 - 6.0);
        let mut tape = Tape::new();
        let fv = tape.constant(raw).unwrap();
        let src = channel_stats(&mut tape, fv, eps).unwrap();
        let dst_mu = tape.constant(Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap()).unwrap();
        let dst_sig = tape.constant(Tensor::new(vec![1, 2], vec![2.0, 0.5]).unwrap()).unwrap();
        let out = adain(&mut tape, fv, src, StatsVars { mu: dst_mu, sigma: dst_sig }).unwrap();
        let got = channel_stats_value(tape.value(out), eps).unwrap();
        for (got_m, want_m) in got.mu.data().iter().zip([3.0, -1.0]) {
            assert!((got_m - want_m).abs() < 1e-10, "mu {got_m} vs {want_m}");
        }
        for (got_s, want_s) in got.sigma.data().iter().zip([2.0, 0.5]) {
            assert!(
                (got_s - want_s).abs() < eps.sqrt(),
                "sigma {got_s} vs {want_s} beyond eps distortion"
            );
        }
    }

    #[test]
    fn batch_mean_averages_rows() {
        let s = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
        let m = batch_mean(&s).unwrap();
        assert_eq!(m.data(), &[2.0, 3.0, 4.0]);
    }
}
