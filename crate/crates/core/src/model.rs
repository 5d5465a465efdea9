//! The episodic segmentation model: a small convolutional encoder with
//! perturbation/rectification hooks at its early stages, masked-average
//! prototype pooling, cosine matching against the query feature, and the
//! mIoU metric.
//!
//! Each encoder stage is conv -> relu -> conv -> relu -> 2x2 avg-pool; the
//! hook point sits after the pool. During adapter training a hooked stage
//! runs the full perturb/rectify cyclic chain and the once-rectified map
//! feeds the next stage; at test time incoming features are treated as
//! perturbed and rectified directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{predict_factors, rectify_stage, AdapterMlp, AdapterVars};
use crate::error::{Error, Result};
use crate::loss::{
    cyclic_chain, read_breakdown, total_loss, LossBreakdown, LossFlags, StageStatsTriplet,
};
use crate::perturb::{draw_factors, GlobalStatsBank, PerturbConfig, SharedFactors};
use crate::rng::Prng;
use crate::stats::{batch_mean, channel_stats};
use crate::tensor::tape::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels per encoder stage.
    pub stage_channels: Vec<usize>,
    pub input_channels: usize,
    /// Cosine matching temperature.
    pub tau: f64,
    /// Variance stabilizer of the channel statistics.
    pub eps: f64,
    /// Guard in the cosine denominator for zero-norm pixels.
    pub cosine_eps: f64,
    pub adapter_reduction: usize,
    pub adapter_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![16, 32, 64],
            input_channels: 3,
            tau: 10.0,
            eps: 1e-5,
            cosine_eps: 1e-8,
            adapter_reduction: 4,
            adapter_scale: 1.0,
        }
    }
}

/// One few-shot task: K support image/mask pairs plus one query pair, all
/// of one class rendered in one domain style.
#[derive(Debug, Clone)]
pub struct Episode<T: Scalar> {
    pub support_images: Tensor<T>,
    pub support_masks: Tensor<T>,
    pub query_image: Tensor<T>,
    pub query_mask: Tensor<T>,
    pub class_id: u32,
    pub style_id: String,
    pub episode_id: String,
}

impl<T: Scalar> Episode<T> {
    pub fn shots(&self) -> usize {
        self.support_images.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.shots();
        if k < 1 {
            return Err(Error::invalid("episode needs at least one support"));
        }
        let binary = |t: &Tensor<T>| t.data().iter().all(|&v| v == T::zero() || v == T::one());
        if !binary(&self.support_masks) || !binary(&self.query_mask) {
            return Err(Error::invalid("episode masks must be binary"));
        }
        let (_, _, h, w) = self.support_masks.dims4()?;
        for s in 0..k {
            let plane = &self.support_masks.data()[s * h * w..(s + 1) * h * w];
            if !plane.iter().any(|&v| v == T::one()) {
                return Err(Error::EmptySupportForeground);
            }
        }
        Ok(())
    }

    /// Restrict to the first `k` supports.
    pub fn with_shots(&self, k: usize) -> Result<Episode<T>> {
        let have = self.shots();
        if k == 0 || k > have {
            return Err(Error::invalid(format!(
                "requested {k} shots, episode has {have} supports"
            )));
        }
        let (_, c, h, w) = self.support_images.dims4()?;
        let img = Tensor::new(
            vec![k, c, h, w],
            self.support_images.data()[..k * c * h * w].to_vec(),
        )?;
        let msk = Tensor::new(vec![k, 1, h, w], self.support_masks.data()[..k * h * w].to_vec())?;
        Ok(Episode {
            support_images: img,
            support_masks: msk,
            query_image: self.query_image.clone(),
            query_mask: self.query_mask.clone(),
            class_id: self.class_id,
            style_id: self.style_id.clone(),
            episode_id: self.episode_id.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConvStage<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> ConvStage<T> {
    fn init(cin: usize, cout: usize, rng: &mut Prng) -> Self {
        ConvStage {
            w1: kaiming_centered(cout, cin, rng),
            b1: Tensor::zeros(vec![cout]),
            w2: kaiming_centered(cout, cout, rng),
            b2: Tensor::zeros(vec![cout]),
        }
    }
}

/// Kaiming-scaled filters with most of the per-filter mean removed. Relu
/// feature columns otherwise share a large positive common mode, which
/// starts every cosine near 1 and lets the saturated background term
/// suppress all channels at once before any become discriminative. A
/// fraction of the mean is kept so flat regions (shape interiors) still
/// produce a color response.
fn kaiming_centered<T: Scalar>(cout: usize, cin: usize, rng: &mut Prng) -> Tensor<T> {
    use rand_distr::Distribution;
    let std = (2.0 / (cin * 9) as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
    let mut w = Tensor::from_fn(vec![cout, cin, 3, 3], |_| T::from_f64(normal.sample(rng)));
    let per_filter = cin * 9;
    let keep = T::from_f64(0.9);
    for f in 0..cout {
        let chunk = &mut w.data_mut()[f * per_filter..(f + 1) * per_filter];
        let mean = chunk.iter().fold(T::zero(), |a, &v| a + v)
            / T::from_f64(per_filter as f64);
        for v in chunk.iter_mut() {
            *v = *v - keep * mean;
        }
    }
    w
}

/// Encoder, per-stage adapters, and the global stats bank.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub stages: Vec<ConvStage<T>>,
    pub adapters: BTreeMap<usize, AdapterMlp<T>>,
    pub bank: GlobalStatsBank<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, bank_momentum: f64, rng: &mut Prng) -> Self {
        let mut stages = Vec::new();
        let mut cin = cfg.input_channels;
        for &cout in &cfg.stage_channels {
            stages.push(ConvStage::init(cin, cout, rng));
            cin = cout;
        }
        let stage_count = cfg.stage_channels.len();
        Model { cfg, stages, adapters: BTreeMap::new(), bank: GlobalStatsBank::new(stage_count, bank_momentum) }
    }

    /// Create one adapter per hooked stage (idempotent per stage).
    pub fn init_adapters(&mut self, stages: &[usize], rng: &mut Prng) -> Result<()> {
        for &s in stages {
            let channels = *self
                .cfg
                .stage_channels
                .get(s)
                .ok_or_else(|| Error::invalid(format!("adapter stage {s} out of range")))?;
            self.adapters.entry(s).or_insert_with(|| {
                AdapterMlp::init(channels, self.cfg.adapter_reduction, self.cfg.adapter_scale, rng)
            });
        }
        Ok(())
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Mutable references to the parameters trained in a phase, in the
    /// same order as [`ModelVars::trained_vars`].
    pub fn trained_params_mut(&mut self, phase: Phase) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        let encoder = match phase {
            Phase::Baseline => true,
            Phase::Adapter { train_backbone } => train_backbone,
        };
        if encoder {
            for st in &mut self.stages {
                out.push(&mut st.w1);
                out.push(&mut st.b1);
                out.push(&mut st.w2);
                out.push(&mut st.b2);
            }
        }
        if matches!(phase, Phase::Adapter { .. }) {
            for ad in self.adapters.values_mut() {
                out.push(&mut ad.w1);
                out.push(&mut ad.b1);
                out.push(&mut ad.w2);
                out.push(&mut ad.b2);
            }
        }
        out
    }

    /// Register all parameters on a tape with phase-appropriate
    /// trainability.
    pub fn bind(&self, tape: &mut Tape<T>, phase: BindPhase) -> Result<ModelVars> {
        let (enc_train, ad_train) = match phase {
            BindPhase::Frozen => (false, false),
            BindPhase::Baseline => (true, false),
            BindPhase::Adapter { train_backbone } => (train_backbone, true),
        };
        let mut stages = Vec::new();
        for st in &self.stages {
            stages.push(StageVars {
                w1: tape.leaf(st.w1.clone(), enc_train)?,
                b1: tape.leaf(st.b1.clone(), enc_train)?,
                w2: tape.leaf(st.w2.clone(), enc_train)?,
                b2: tape.leaf(st.b2.clone(), enc_train)?,
            });
        }
        let mut adapters = BTreeMap::new();
        for (&s, ad) in &self.adapters {
            adapters.insert(s, ad.bind(tape, ad_train)?);
        }
        Ok(ModelVars { stages, adapters, phase })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Baseline,
    Adapter { train_backbone: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindPhase {
    Frozen,
    Baseline,
    Adapter { train_backbone: bool },
}

#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct ModelVars {
    pub stages: Vec<StageVars>,
    pub adapters: BTreeMap<usize, AdapterVars>,
    phase: BindPhase,
}

impl ModelVars {
    /// Vars of the parameters being trained, aligned with
    /// [`Model::trained_params_mut`].
    pub fn trained_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let encoder = match self.phase {
            BindPhase::Frozen => false,
            BindPhase::Baseline => true,
            BindPhase::Adapter { train_backbone } => train_backbone,
        };
        if encoder {
            for st in &self.stages {
                out.extend([st.w1, st.b1, st.w2, st.b2]);
            }
        }
        if matches!(self.phase, BindPhase::Adapter { .. }) {
            for ad in self.adapters.values() {
                out.extend([ad.w1, ad.b1, ad.w2, ad.b2]);
            }
        }
        out
    }
}

/// Hook behavior during [`Model::encode`].
pub enum HookMode<'a, T: Scalar> {
    /// Plain CNN forward; optionally collect the per-stage clean channel
    /// means (for bank updates).
    Plain { stage_mu: Option<&'a mut Vec<Var>> },
    /// Rectify at every adapter-bearing stage; optionally trace pre/post
    /// means (for the stats-distance diagnostics).
    Rectify { trace: Option<&'a mut Vec<MuTrace>> },
    /// Gated perturbation plus the cyclic rectification chain at each
    /// hooked stage. Factors are drawn once per stage and reused by later
    /// encodes of the same episode.
    Train {
        perturb: &'a PerturbConfig,
        factors: &'a mut BTreeMap<usize, SharedFactors<T>>,
        triplets: &'a mut Vec<StageStatsTriplet>,
    },
}

/// Pre- and post-rectification channel means at one hooked stage.
pub struct MuTrace {
    pub stage: usize,
    pub orig_mu: Var,
    pub rect_mu: Var,
}

impl<T: Scalar> Model<T> {
    /// Forward an image batch `[B,3,S,S]` through the encoder, applying
    /// the hook behavior at each stage, and return the final feature map.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        images: &Tensor<T>,
        mut hooks: HookMode<'_, T>,
        rng: &mut Prng,
    ) -> Result<Var> {
        let mut f = tape.constant(images.clone())?;
        for (i, sv) in vars.stages.iter().enumerate() {
            let c = tape.conv2d(f, sv.w1, sv.b1, 1, 1)?;
            let r = tape.relu(c)?;
            let c2 = tape.conv2d(r, sv.w2, sv.b2, 1, 1)?;
            let r2 = tape.relu(c2)?;
            f = tape.avg_pool2(r2)?;

            match &mut hooks {
                HookMode::Plain { stage_mu } => {
                    if let Some(collect) = stage_mu {
                        let mu = tape.mean_hw(f)?;
                        collect.push(mu);
                    }
                }
                HookMode::Rectify { trace } => {
                    if let Some(av) = vars.adapters.get(&i) {
                        let orig_mu =
                            if trace.is_some() { Some(tape.mean_hw(f)?) } else { None };
                        f = rectify_stage(tape, f, Some(av), i, true, self.cfg.eps)?;
                        if let (Some(tr), Some(orig_mu)) = (trace.as_deref_mut(), orig_mu) {
                            let rect_mu = tape.mean_hw(f)?;
                            tr.push(MuTrace { stage: i, orig_mu, rect_mu });
                        }
                    }
                }
                HookMode::Train { perturb, factors, triplets } => {
                    if perturb.stages.contains(&i) {
                        let av = *vars.adapters.get(&i).ok_or(Error::MissingStage { stage: i })?;
                        let channels = self.cfg.stage_channels[i];
                        if !factors.contains_key(&i) {
                            factors.insert(i, draw_factors(perturb, channels, rng)?);
                        }
                        let shared = factors.get(&i).expect("inserted above").clone();
                        let orig = channel_stats(tape, f, self.cfg.eps)?;
                        let eps = self.cfg.eps;
                        let chain =
                            cyclic_chain(tape, f, &shared, &self.bank, i, &mut |tape, fp| {
                                predict_factors(tape, fp, &av, eps)
                            })?;
                        let rect = channel_stats(tape, chain.f_rect, eps)?;
                        let cyc = channel_stats(tape, chain.f_rect2, eps)?;
                        triplets.push(StageStatsTriplet { orig, rect, cyc });
                        f = chain.f_rect;
                    }
                }
            }
        }
        Ok(f)
    }

    /// Plain forward through stages `0..=stage` only.
    pub fn forward_plain_to_stage(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        images: &Tensor<T>,
        stage: usize,
    ) -> Result<Var> {
        if stage >= vars.stages.len() {
            return Err(Error::invalid(format!(
                "stage {stage} out of range (encoder has {})",
                vars.stages.len()
            )));
        }
        let mut f = tape.constant(images.clone())?;
        for sv in &vars.stages[..=stage] {
            let c = tape.conv2d(f, sv.w1, sv.b1, 1, 1)?;
            let r = tape.relu(c)?;
            let c2 = tape.conv2d(r, sv.w2, sv.b2, 1, 1)?;
            let r2 = tape.relu(c2)?;
            f = tape.avg_pool2(r2)?;
        }
        Ok(f)
    }

    /// Masked-average prototype over the support features: the masks are
    /// downsampled (nearest) to feature resolution and all K shots pool
    /// into one weighted mean. A zero-norm prototype is an error.
    pub fn prototype(
        &self,
        tape: &mut Tape<T>,
        support_feat: Var,
        support_masks: &Tensor<T>,
    ) -> Result<Var> {
        let (_, _, fh, fw) = match tape.shape(support_feat) {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(Error::shape(format!("prototype expects [K,C,h,w], got {s:?}"))),
        };
        let small = downsample_mask_nearest(support_masks, fh, fw)?;
        let proto = tape.masked_mean_pool(support_feat, small)?;
        let norm: f64 = tape
            .value(proto)
            .data()
            .iter()
            .map(|&v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            let feat = tape.value(support_feat);
            let fmax = feat.data().iter().fold(0.0f64, |a, &v| a.max(v.as_f64().abs()));
            let fmean = feat.data().iter().map(|&v| v.as_f64().abs()).sum::<f64>()
                / feat.numel() as f64;
            return Err(Error::invalid(format!(
                "zero-vector prototype (support feature |max| {fmax:.3e}, |mean| {fmean:.3e})"
            )));
        }
        Ok(proto)
    }

    /// Cosine matching against the query feature map, scaled by the
    /// temperature and upsampled bilinearly to mask resolution.
    pub fn match_logits(
        &self,
        tape: &mut Tape<T>,
        query_feat: Var,
        proto: Var,
        out_size: (usize, usize),
    ) -> Result<Var> {
        let cos = tape.cosine_map(query_feat, proto, T::from_f64(self.cfg.cosine_eps))?;
        let logits = tape.scale(cos, T::from_f64(self.cfg.tau))?;
        tape.upsample_bilinear(logits, out_size.0, out_size.1)
    }
}

/// Nearest-neighbor downsampling of a `[B,1,H,W]` mask.
pub fn downsample_mask_nearest<T: Scalar>(
    mask: &Tensor<T>,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>> {
    let (b, one, h, w) = mask.dims4()?;
    if one != 1 {
        return Err(Error::shape(format!("mask must be [B,1,H,W], got {:?}", mask.shape())));
    }
    let md = mask.data();
    let mut out = vec![T::zero(); b * oh * ow];
    for bi in 0..b {
        let plane = &md[bi * h * w..(bi + 1) * h * w];
        let o = &mut out[bi * oh * ow..(bi + 1) * oh * ow];
        for y in 0..oh {
            let sy = y * h / oh;
            for x in 0..ow {
                let sx = x * w / ow;
                o[y * ow + x] = plane[sy * w + sx];
            }
        }
    }
    Tensor::new(vec![b, 1, oh, ow], out)
}

/// Foreground IoU of two binary masks; 1 when both are empty.
pub fn binary_iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "iou: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let p = p > T::zero();
        let g = g > T::zero();
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// One evaluated episode's contribution to the metric.
#[derive(Debug, Clone)]
pub struct EpisodeScore {
    pub class_id: u32,
    pub iou: f64,
}

/// Mean IoU: episodes averaged within each class, then classes averaged.
pub fn miou(scores: &[EpisodeScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("miou of empty episode list"));
    }
    let mut per_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for s in scores {
        let e = per_class.entry(s.class_id).or_insert((0.0, 0));
        e.0 += s.iou;
        e.1 += 1;
    }
    let sum: f64 = per_class.values().map(|(tot, n)| tot / *n as f64).sum();
    Ok(sum / per_class.len() as f64)
}

/// How one episode is executed.
pub enum EpisodeMode<'a> {
    BaselineTrain,
    AdapterTrain { perturb: &'a PerturbConfig, flags: LossFlags, train_backbone: bool },
    Eval { rectify: bool, trace_stats: bool },
}

/// Everything a caller may need from one episode.
pub struct EpisodeOutcome<T: Scalar> {
    pub loss: Option<LossBreakdown>,
    /// Gradients aligned with [`Model::trained_params_mut`] for the phase.
    pub grads: Option<Vec<Tensor<T>>>,
    pub iou: Option<f64>,
    /// Clean per-stage batch-averaged channel means (baseline training).
    pub bank_mu: Vec<Tensor<T>>,
    /// (stage, unrectified distance, rectified distance) against the bank,
    /// from the query image's statistics.
    pub stats_dist: Vec<(usize, f64, f64)>,
}

/// Run one episode end to end: encode, pool, match, and per mode either
/// backprop the objective or score the prediction.
pub fn run_episode<T: Scalar>(
    model: &Model<T>,
    episode: &Episode<T>,
    mode: EpisodeMode<'_>,
    rng: &mut Prng,
) -> Result<EpisodeOutcome<T>> {
    episode.validate()?;
    let (_, _, s_h, s_w) = episode.query_mask.dims4()?;
    let mut tape = Tape::new();

    match mode {
        EpisodeMode::BaselineTrain => {
            let vars = model.bind(&mut tape, BindPhase::Baseline)?;
            let mut sup_mu = Vec::new();
            let mut qry_mu = Vec::new();
            let sup_feat = model.encode(
                &mut tape,
                &vars,
                &episode.support_images,
                HookMode::Plain { stage_mu: Some(&mut sup_mu) },
                rng,
            )?;
            let qry_feat = model.encode(
                &mut tape,
                &vars,
                &episode.query_image,
                HookMode::Plain { stage_mu: Some(&mut qry_mu) },
                rng,
            )?;
            let proto = model.prototype(&mut tape, sup_feat, &episode.support_masks)?;
            let logits = model.match_logits(&mut tape, qry_feat, proto, (s_h, s_w))?;
            let bce = tape.bce_with_logits(logits, episode.query_mask.clone())?;
            let lv = total_loss(&mut tape, bce, &[], LossFlags::bce_only())?;
            let loss = read_breakdown(&tape, &lv)?;

            // Episode-level clean means: K support images and 1 query,
            // weighted per image.
            let k = episode.shots() as f64;
            let bank_mu = sup_mu
                .iter()
                .zip(&qry_mu)
                .map(|(&sv, &qv)| {
                    let s = batch_mean(tape.value(sv))?;
                    let q = batch_mean(tape.value(qv))?;
                    let mut out = s;
                    for (o, &qq) in out.data_mut().iter_mut().zip(q.data()) {
                        *o = (*o * T::from_f64(k) + qq) / T::from_f64(k + 1.0);
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?;

            let trained = vars.trained_vars();
            let grads = extract_grads(&model_param_shapes(model, Phase::Baseline), trained, tape, lv.total)?;
            Ok(EpisodeOutcome {
                loss: Some(loss),
                grads: Some(grads),
                iou: None,
                bank_mu,
                stats_dist: Vec::new(),
            })
        }
        EpisodeMode::AdapterTrain { perturb, flags, train_backbone } => {
            let vars = model.bind(&mut tape, BindPhase::Adapter { train_backbone })?;
            let mut factors = BTreeMap::new();
            let mut triplets = Vec::new();
            let sup_feat = model.encode(
                &mut tape,
                &vars,
                &episode.support_images,
                HookMode::Train { perturb, factors: &mut factors, triplets: &mut triplets },
                rng,
            )?;
            let qry_feat = model.encode(
                &mut tape,
                &vars,
                &episode.query_image,
                HookMode::Train { perturb, factors: &mut factors, triplets: &mut triplets },
                rng,
            )?;
            let proto = model.prototype(&mut tape, sup_feat, &episode.support_masks)?;
            let logits = model.match_logits(&mut tape, qry_feat, proto, (s_h, s_w))?;
            let bce = tape.bce_with_logits(logits, episode.query_mask.clone())?;
            let lv = total_loss(&mut tape, bce, &triplets, flags)?;
            let loss = read_breakdown(&tape, &lv)?;
            let trained = vars.trained_vars();
            let phase = Phase::Adapter { train_backbone };
            let grads = extract_grads(&model_param_shapes(model, phase), trained, tape, lv.total)?;
            Ok(EpisodeOutcome {
                loss: Some(loss),
                grads: Some(grads),
                iou: None,
                bank_mu: Vec::new(),
                stats_dist: Vec::new(),
            })
        }
        EpisodeMode::Eval { rectify, trace_stats } => {
            let vars = model.bind(&mut tape, BindPhase::Frozen)?;
            let sup_hooks = if rectify {
                HookMode::Rectify { trace: None }
            } else {
                HookMode::Plain { stage_mu: None }
            };
            let sup_feat =
                model.encode(&mut tape, &vars, &episode.support_images, sup_hooks, rng)?;
            let mut trace = Vec::new();
            let qry_hooks = if rectify {
                HookMode::Rectify { trace: trace_stats.then_some(&mut trace) }
            } else {
                HookMode::Plain { stage_mu: None }
            };
            let qry_feat = model.encode(&mut tape, &vars, &episode.query_image, qry_hooks, rng)?;
            let proto = model.prototype(&mut tape, sup_feat, &episode.support_masks)?;
            let logits = model.match_logits(&mut tape, qry_feat, proto, (s_h, s_w))?;
            let bce = tape.bce_with_logits(logits, episode.query_mask.clone())?;

            let pred = tape.value(logits).map(|z| if z > T::zero() { T::one() } else { T::zero() });
            let iou = binary_iou(&pred, &episode.query_mask)?;
            if std::env::var("STYLEBEND_DEBUG_EVAL").is_ok() {
                let zs = tape.value(logits);
                let n = zs.numel() as f64;
                let pred_frac =
                    pred.data().iter().filter(|&&v| v > T::zero()).count() as f64 / n;
                let gt_frac = episode
                    .query_mask
                    .data()
                    .iter()
                    .filter(|&&v| v > T::zero())
                    .count() as f64
                    / n;
                let zmean = zs.data().iter().map(|&v| v.as_f64()).sum::<f64>() / n;
                let zmax = zs.data().iter().map(|&v| v.as_f64()).fold(f64::MIN, f64::max);
                let pn: f64 = tape
                    .value(proto)
                    .data()
                    .iter()
                    .map(|&v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                let qf = tape.value(qry_feat);
                let qmean =
                    qf.data().iter().map(|&v| v.as_f64().abs()).sum::<f64>() / qf.numel() as f64;
                eprintln!(
                    "DBG {} {}: iou {iou:.3} pred {pred_frac:.3} gt {gt_frac:.3} zmean {zmean:.3} zmax {zmax:.3} |p| {pn:.3} |q| {qmean:.4}",
                    episode.style_id, episode.episode_id
                );
            }
            let l_bce = tape.value(bce).item().as_f64();

            let mut stats_dist = Vec::new();
            for tr in &trace {
                if let Ok(bank_mu) = model.bank.get(tr.stage) {
                    let orig = batch_mean(tape.value(tr.orig_mu))?;
                    let rect = batch_mean(tape.value(tr.rect_mu))?;
                    stats_dist.push((
                        tr.stage,
                        l1_distance(&orig, bank_mu),
                        l1_distance(&rect, bank_mu),
                    ));
                }
            }

            Ok(EpisodeOutcome {
                loss: Some(LossBreakdown { l_bce, l_cyc: 0.0, l_align: 0.0, total: l_bce }),
                grads: None,
                iou: Some(iou),
                bank_mu: Vec::new(),
                stats_dist,
            })
        }
    }
}

fn l1_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum::<f64>()
        / n
}

/// Shapes of the phase's trained parameters, used to emit zero gradients
/// for parameters the loss does not reach.
fn model_param_shapes<T: Scalar>(model: &Model<T>, phase: Phase) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    let encoder = match phase {
        Phase::Baseline => true,
        Phase::Adapter { train_backbone } => train_backbone,
    };
    if encoder {
        for st in &model.stages {
            shapes.push(st.w1.shape().to_vec());
            shapes.push(st.b1.shape().to_vec());
            shapes.push(st.w2.shape().to_vec());
            shapes.push(st.b2.shape().to_vec());
        }
    }
    if matches!(phase, Phase::Adapter { .. }) {
        for ad in model.adapters.values() {
            shapes.push(ad.w1.shape().to_vec());
            shapes.push(ad.b1.shape().to_vec());
            shapes.push(ad.w2.shape().to_vec());
            shapes.push(ad.b2.shape().to_vec());
        }
    }
    shapes
}

fn extract_grads<T: Scalar>(
    shapes: &[Vec<usize>],
    vars: Vec<Var>,
    tape: Tape<T>,
    total: Var,
) -> Result<Vec<Tensor<T>>> {
    let mut grads: Gradients<T> = tape.backward(total)?;
    Ok(vars
        .into_iter()
        .zip(shapes)
        .map(|(v, shape)| grads.take(v).unwrap_or_else(|| Tensor::zeros(shape.clone())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn tiny_model(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            stage_channels: vec![4, 6],
            input_channels: 3,
            ..Default::default()
        };
        Model::init(cfg, 0.99, &mut seeded(seed))
    }

    fn tiny_episode(seed: u64, shots: usize, size: usize) -> Episode<f64> {
        let mut r = seeded(seed);
        let img = |r: &mut Prng, b: usize| {
            Tensor::from_fn(vec![b, 3, size, size], |_| r.random_range(0.0..1.0))
        };
        let mask = |r: &mut Prng, b: usize| {
            let mut m = Tensor::zeros(vec![b, 1, size, size]);
            for bi in 0..b {
                // A solid block guarantees foreground survives downsampling.
                let y0 = r.random_range(0..size / 2);
                let x0 = r.random_range(0..size / 2);
                for y in y0..y0 + size / 2 {
                    for x in x0..x0 + size / 2 {
                        m.data_mut()[bi * size * size + y * size + x] = 1.0;
                    }
                }
            }
            m
        };
        Episode {
            support_images: img(&mut r, shots),
            support_masks: mask(&mut r, shots),
            query_image: img(&mut r, 1),
            query_mask: mask(&mut r, 1),
            class_id: 1,
            style_id: "s".into(),
            episode_id: "ep0".into(),
        }
    }

    #[test]
    fn encode_is_deterministic_for_fixed_seed() {
        let model = tiny_model(3);
        let ep = tiny_episode(4, 1, 16);
        let run = || {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, BindPhase::Frozen).unwrap();
            let f = model
                .encode(&mut tape, &vars, &ep.query_image, HookMode::Plain { stage_mu: None }, &mut seeded(0))
                .unwrap();
            tape.value(f).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hooked_zero_adapter_matches_plain_forward() {
        let mut model = tiny_model(5);
        model.init_adapters(&[0, 1], &mut seeded(6)).unwrap();
        // Zero the first layer too so prediction is exactly zero factors.
        for ad in model.adapters.values_mut() {
            ad.w1 = Tensor::zeros(ad.w1.shape().to_vec());
        }
        let ep = tiny_episode(7, 1, 16);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, BindPhase::Frozen).unwrap();
        let plain = model
            .encode(&mut tape, &vars, &ep.query_image, HookMode::Plain { stage_mu: None }, &mut seeded(0))
            .unwrap();
        let rect = model
            .encode(&mut tape, &vars, &ep.query_image, HookMode::Rectify { trace: None }, &mut seeded(0))
            .unwrap();
        for (&a, &b) in tape.value(plain).data().iter().zip(tape.value(rect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prototype_of_full_mask_is_spatial_mean() {
        let model = tiny_model(8);
        let ep = tiny_episode(9, 1, 16);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, BindPhase::Frozen).unwrap();
        let feat = model
            .encode(&mut tape, &vars, &ep.support_images, HookMode::Plain { stage_mu: None }, &mut seeded(0))
            .unwrap();
        let ones = Tensor::full(vec![1, 1, 16, 16], 1.0f64);
        let proto = model.prototype(&mut tape, feat, &ones).unwrap();
        let mu = tape.mean_hw(feat).unwrap();
        for (p, m) in tape.value(proto).data().iter().zip(tape.value(mu).data()) {
            assert!((p - m).abs() < 1e-12);
        }
    }

    #[test]
    fn five_identical_supports_equal_one() {
        // 1-shot vs 5-shot with the same support replicated: identical
        // prototype, identical prediction.
        let model = tiny_model(10);
        let ep1 = tiny_episode(11, 1, 16);
        let (_, c, h, w) = ep1.support_images.dims4().unwrap();
        let mut img5 = Vec::new();
        let mut msk5 = Vec::new();
        for _ in 0..5 {
            img5.extend_from_slice(ep1.support_images.data());
            msk5.extend_from_slice(ep1.support_masks.data());
        }
        let ep5 = Episode {
            support_images: Tensor::new(vec![5, c, h, w], img5).unwrap(),
            support_masks: Tensor::new(vec![5, 1, h, w], msk5).unwrap(),
            ..ep1.clone()
        };
        let run = |ep: &Episode<f64>| {
            let out = run_episode(
                &model,
                ep,
                EpisodeMode::Eval { rectify: false, trace_stats: false },
                &mut seeded(0),
            )
            .unwrap();
            (out.iou.unwrap(), out.loss.unwrap().l_bce)
        };
        let (iou1, bce1) = run(&ep1);
        let (iou5, bce5) = run(&ep5);
        assert_eq!(iou1, iou5);
        assert!((bce1 - bce5).abs() < 1e-12);
    }

    #[test]
    fn miou_hand_cases() {
        // pred == gt -> 1; disjoint -> 0; double-size cover -> 0.5;
        // half-overlap of equal size -> 1/3.
        let gt = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(binary_iou(&gt, &gt).unwrap(), 1.0);
        let other = Tensor::new(vec![1, 1, 2, 2], vec![0.0f64, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(binary_iou(&other, &gt).unwrap(), 0.0);
        let cover = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(binary_iou(&cover, &gt).unwrap(), 0.5);
        let a = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2, 2], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        assert!((binary_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // Both empty -> 1.
        let empty = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        assert_eq!(binary_iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn miou_groups_by_class_then_averages() {
        let scores = vec![
            EpisodeScore { class_id: 1, iou: 1.0 },
            EpisodeScore { class_id: 1, iou: 0.0 },
            EpisodeScore { class_id: 2, iou: 1.0 },
        ];
        // class 1 mean 0.5, class 2 mean 1.0 -> miou 0.75.
        assert!((miou(&scores).unwrap() - 0.75).abs() < 1e-15);
        assert!(miou(&[]).is_err());
    }

    #[test]
    fn eval_is_side_effect_free() {
        let mut model = tiny_model(12);
        model.init_adapters(&[0, 1], &mut seeded(13)).unwrap();
        model.bank.set(0, Tensor::full(vec![4], 0.3));
        let before_bank = model.bank.get(0).unwrap().clone();
        let before_w = model.stages[0].w1.clone();
        let ep = tiny_episode(14, 2, 16);
        run_episode(
            &model,
            &ep,
            EpisodeMode::Eval { rectify: true, trace_stats: true },
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(model.bank.get(0).unwrap().data(), before_bank.data());
        assert_eq!(model.stages[0].w1.data(), before_w.data());
    }

    #[test]
    fn baseline_step_returns_encoder_grads_and_bank_means() {
        let model = tiny_model(15);
        let ep = tiny_episode(16, 1, 16);
        let out = run_episode(&model, &ep, EpisodeMode::BaselineTrain, &mut seeded(0)).unwrap();
        let grads = out.grads.unwrap();
        assert_eq!(grads.len(), 8); // 2 stages x (w1,b1,w2,b2)
        assert!(grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
        assert_eq!(out.bank_mu.len(), 2);
        assert_eq!(out.bank_mu[0].shape(), &[4]);
        assert!(out.loss.unwrap().l_bce > 0.0);
    }

    #[test]
    fn adapter_step_with_all_losses_runs_and_grads_flow() {
        let mut model = tiny_model(17);
        let perturb = PerturbConfig { stages: vec![0, 1], ..Default::default() };
        model.init_adapters(&[0, 1], &mut seeded(18)).unwrap();
        model.bank.set(0, Tensor::full(vec![4], 0.2));
        model.bank.set(1, Tensor::full(vec![6], 0.1));
        let ep = tiny_episode(19, 1, 16);
        let out = run_episode(
            &model,
            &ep,
            EpisodeMode::AdapterTrain {
                perturb: &perturb,
                flags: LossFlags::all(),
                train_backbone: false,
            },
            &mut seeded(20),
        )
        .unwrap();
        let loss = out.loss.unwrap();
        assert!(loss.total.is_finite());
        assert_eq!(out.grads.as_ref().unwrap().len(), 8); // 2 adapters x 4
    }

    #[test]
    fn adapter_train_without_losses_matches_baseline_structure() {
        let mut model = tiny_model(21);
        let perturb = PerturbConfig { p_local: 0.0, p_global: 0.0, stages: vec![0], ..Default::default() };
        model.init_adapters(&[0], &mut seeded(22)).unwrap();
        let ep = tiny_episode(23, 1, 16);
        let out = run_episode(
            &model,
            &ep,
            EpisodeMode::AdapterTrain {
                perturb: &perturb,
                flags: LossFlags::bce_only(),
                train_backbone: false,
            },
            &mut seeded(24),
        )
        .unwrap();
        let loss = out.loss.unwrap();
        assert_eq!(loss.l_cyc, 0.0);
        assert_eq!(loss.l_align, 0.0);
        assert_eq!(loss.total, loss.l_bce);
    }

    #[test]
    fn shot_subset_and_excess_request() {
        let ep = tiny_episode(25, 5, 16);
        assert_eq!(ep.with_shots(2).unwrap().shots(), 2);
        assert!(ep.with_shots(6).is_err());
        assert!(ep.with_shots(0).is_err());
    }

    #[test]
    fn nearest_downsample_picks_block_corners() {
        let mut m = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        // Mark the (2,2) pixel: it is the corner sampled for output (1,1).
        m.data_mut()[2 * 4 + 2] = 1.0;
        let d = downsample_mask_nearest(&m, 2, 2).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
