//! Cyclic domain alignment: the perturb -> rectify -> re-perturb ->
//! re-rectify chain and the training objective
//! `total = bce + cyc + align` with unit weights.
//!
//! The cyclic loss compares the statistics of the twice-rectified feature
//! against the original; the alignment loss does the same for the
//! once-rectified feature. Both are L1 over channels, batch-averaged, and
//! arithmetically averaged across hooked stages.

use crate::adapter::{rectify, RectificationFactors};
use crate::error::{Error, Result};
use crate::perturb::{perturb_with_factors, GlobalStatsBank, SharedFactors};
use crate::stats::StatsVars;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Which objective terms are active. Mirrors the four ablation
/// configurations: bce only, +cyc, +align, +both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub cyc: bool,
    pub align: bool,
}

impl LossFlags {
    pub fn all() -> Self {
        LossFlags { cyc: true, align: true }
    }

    pub fn bce_only() -> Self {
        LossFlags { cyc: false, align: false }
    }
}

/// Scalar loss values extracted after a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_bce: f64,
    pub l_cyc: f64,
    pub l_align: f64,
    pub total: f64,
}

/// Tape handles to the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub bce: Var,
    pub cyc: Var,
    pub align: Var,
    pub total: Var,
}

/// `(1/C) * sum_c (|mu_a - mu_b| + |sigma_a - sigma_b|)`, batch-averaged.
pub fn stats_l1<T: Scalar>(tape: &mut Tape<T>, a: StatsVars, b: StatsVars) -> Result<Var> {
    let dmu = tape.sub(a.mu, b.mu)?;
    let dmu = tape.abs(dmu)?;
    let dmu = tape.mean_all(dmu)?;
    let dsig = tape.sub(a.sigma, b.sigma)?;
    let dsig = tape.abs(dsig)?;
    let dsig = tape.mean_all(dsig)?;
    tape.add(dmu, dsig)
}

/// Statistics snapshots of one hooked stage during adapter training.
#[derive(Debug, Clone, Copy)]
pub struct StageStatsTriplet {
    pub orig: StatsVars,
    pub rect: StatsVars,
    pub cyc: StatsVars,
}

/// Output of the cyclic chain at one stage.
pub struct ChainOutput {
    /// Once-rectified feature; feeds the next encoder stage.
    pub f_rect: Var,
    /// Twice-rectified feature; only constrains the cyclic loss.
    pub f_rect2: Var,
}

/// perturb -> rectify -> perturb (same factors, same mu reference) ->
/// rectify. The rectifier is abstract so verification can substitute an
/// exact-inverse oracle for the adapter.
pub fn cyclic_chain<T: Scalar>(
    tape: &mut Tape<T>,
    f_o: Var,
    factors: &SharedFactors<T>,
    bank: &GlobalStatsBank<T>,
    stage: usize,
    rectifier: &mut dyn FnMut(&mut Tape<T>, Var) -> Result<RectificationFactors>,
) -> Result<ChainOutput> {
    let f_p = perturb_with_factors(tape, f_o, factors, bank, stage)?;
    let r1 = rectifier(tape, f_p)?;
    let f_rect = rectify(tape, f_p, r1)?;
    let f_rect_p = perturb_with_factors(tape, f_rect, factors, bank, stage)?;
    let r2 = rectifier(tape, f_rect_p)?;
    let f_rect2 = rectify(tape, f_rect_p, r2)?;
    Ok(ChainOutput { f_rect, f_rect2 })
}

/// Assemble the total objective from the BCE term and per-stage statistics
/// snapshots. Disabled terms contribute an exact zero.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bce: Var,
    triplets: &[StageStatsTriplet],
    flags: LossFlags,
) -> Result<LossVars> {
    let cyc = if flags.cyc && !triplets.is_empty() {
        let terms = triplets
            .iter()
            .map(|t| stats_l1(tape, t.orig, t.cyc))
            .collect::<Result<Vec<_>>>()?;
        mean_of(tape, &terms)?
    } else {
        tape.constant(Tensor::scalar(T::zero()))?
    };
    let align = if flags.align && !triplets.is_empty() {
        let terms = triplets
            .iter()
            .map(|t| stats_l1(tape, t.orig, t.rect))
            .collect::<Result<Vec<_>>>()?;
        mean_of(tape, &terms)?
    } else {
        tape.constant(Tensor::scalar(T::zero()))?
    };
    let partial = tape.add(bce, cyc)?;
    let total = tape.add(partial, align)?;
    Ok(LossVars { bce, cyc, align, total })
}

/// Read the loss component values out of the tape, rejecting non-finite
/// components.
pub fn read_breakdown<T: Scalar>(tape: &Tape<T>, vars: &LossVars) -> Result<LossBreakdown> {
    let l_bce = tape.value(vars.bce).item().as_f64();
    let l_cyc = tape.value(vars.cyc).item().as_f64();
    let l_align = tape.value(vars.align).item().as_f64();
    let total = tape.value(vars.total).item().as_f64();
    for (name, v) in [("bce", l_bce), ("cyc", l_cyc), ("align", l_align), ("total", total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: format!("loss component {name}") });
        }
    }
    Ok(LossBreakdown { l_bce, l_cyc, l_align, total })
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, T::from_f64(1.0 / terms.len() as f64))
}
