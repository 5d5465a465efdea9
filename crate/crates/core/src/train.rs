//! Two-phase training.
//!
//! Phase one trains the encoder and matching head on source-style episodes
//! with BCE only, while the global stats bank tracks clean channel means.
//! Phase two freezes the backbone (by default), enables the perturbation
//! hooks and trains the per-stage adapters under bce + cyc + align.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::data::{DatasetManifest, TrainPool};
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossFlags};
use crate::model::{run_episode, EpisodeMode, Model, ModelConfig, Phase};
use crate::optim::Sgd;
use crate::perturb::PerturbConfig;
use crate::rng::{derive, seeded};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Baseline,
    Adapter,
}

impl TrainPhase {
    pub fn name(self) -> &'static str {
        match self {
            TrainPhase::Baseline => "baseline",
            TrainPhase::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    /// L2 penalty added to gradients before the SGD update; counters the
    /// norm ratchet of scale-invariant cosine matching.
    pub weight_decay: f64,
    /// Global-norm gradient clip per step; 0 disables.
    pub grad_clip: f64,
    pub baseline_epochs: usize,
    pub adapter_epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub train_shots: usize,
    pub perturb: PerturbConfig,
    pub use_cyc: bool,
    pub use_align: bool,
    pub freeze_backbone: bool,
    pub precision: Precision,
    pub model: ModelConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            baseline_epochs: 20,
            adapter_epochs: 5,
            episodes_per_epoch: 64,
            batch_size: 8,
            train_shots: 1,
            perturb: PerturbConfig::default(),
            use_cyc: true,
            use_align: true,
            freeze_backbone: true,
            precision: Precision::F32,
            model: ModelConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0,1)"));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::invalid("weight_decay and grad_clip must be >= 0"));
        }
        if self.batch_size == 0 || self.episodes_per_epoch == 0 || self.train_shots == 0 {
            return Err(Error::invalid("batch size, episodes per epoch and shots must be >= 1"));
        }
        self.perturb.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io_at(path, e))
    }

    pub fn flags(&self) -> LossFlags {
        LossFlags { cyc: self.use_cyc, align: self.use_align }
    }
}

/// Per-step loss log, one row per optimizer step.
pub struct LossLog {
    rows: Vec<(usize, &'static str, LossBreakdown)>,
}

impl LossLog {
    fn new() -> Self {
        LossLog { rows: Vec::new() }
    }

    fn push(&mut self, step: usize, phase: &'static str, loss: LossBreakdown) {
        self.rows.push((step, phase, loss));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,phase,l_bce,l_cyc,l_align,total\n");
        for (step, phase, l) in &self.rows {
            s.push_str(&format!(
                "{step},{phase},{:.6},{:.6},{:.6},{:.6}\n",
                l.l_bce, l.l_cyc, l.l_align, l.total
            ));
        }
        s
    }

    pub fn last(&self) -> Option<LossBreakdown> {
        self.rows.last().map(|r| r.2)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

const TAG_INIT: u64 = 11;
const TAG_BASELINE: u64 = 12;
const TAG_ADAPTER: u64 = 13;
const TAG_ADAPTER_INIT: u64 = 14;

/// Train the encoder + head on clean source episodes (BCE only) and feed
/// the global stats bank from every clean pass.
pub fn train_baseline<T: Scalar>(
    cfg: &TrainConfig,
    pool: &TrainPool,
    manifest: &DatasetManifest,
    model: &mut Model<T>,
) -> Result<LossLog> {
    cfg.validate()?;
    let mut rng = seeded(derive(cfg.seed, &[TAG_BASELINE]));
    let mut sgd: Sgd<T> =
        Sgd::new(cfg.lr, cfg.momentum, model.trained_params_mut(Phase::Baseline).len())?;
    let mut log = LossLog::new();
    let mut step = 0usize;
    let style = manifest.source_style.style_id.clone();

    for _epoch in 0..cfg.baseline_epochs {
        let mut done = 0;
        while done < cfg.episodes_per_epoch {
            let batch = cfg.batch_size.min(cfg.episodes_per_epoch - done);
            let mut acc: Option<Vec<Tensor<T>>> = None;
            let mut loss_sum = LossBreakdown { l_bce: 0.0, l_cyc: 0.0, l_align: 0.0, total: 0.0 };
            for _ in 0..batch {
                let episode = pool.sample_episode::<T>(cfg.train_shots, &style, &mut rng)?;
                let out = run_episode(model, &episode, EpisodeMode::BaselineTrain, &mut rng)
                    .map_err(|e| {
                        Error::invalid(format!("step {step} class {}: {e}", episode.class_id))
                    })?;
                for (stage, mu) in out.bank_mu.iter().enumerate() {
                    if cfg.perturb.stages.contains(&stage) {
                        model.bank.update(stage, mu)?;
                    }
                }
                accumulate(&mut acc, out.grads.expect("training episode yields grads"));
                add_loss(&mut loss_sum, &out.loss.expect("training episode yields loss"));
            }
            let loss = scale_loss(&loss_sum, batch);
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut grads = finish(acc.expect("non-empty batch"), batch);
            apply_weight_decay(&mut grads, &model.trained_params_mut(Phase::Baseline), cfg.weight_decay);
            clip_grads(&mut grads, cfg.grad_clip);
            sgd.step(&mut model.trained_params_mut(Phase::Baseline), &grads)?;
            log.push(step, "baseline", loss);
            step += 1;
            done += batch;
        }
    }
    Ok(log)
}

/// Train the per-stage adapters (backbone frozen unless configured
/// otherwise) under the perturbation hooks and the configured loss flags.
pub fn train_adapter<T: Scalar>(
    cfg: &TrainConfig,
    pool: &TrainPool,
    model: &mut Model<T>,
) -> Result<LossLog> {
    cfg.validate()?;
    if !cfg.perturb.enabled() && (cfg.use_cyc || cfg.use_align) && cfg.perturb.stages.is_empty() {
        return Err(Error::invalid("adapter phase without hooked stages"));
    }
    model.init_adapters(&cfg.perturb.stages, &mut seeded(derive(cfg.seed, &[TAG_ADAPTER_INIT])))?;
    if cfg.perturb.p_global > 0.0 {
        for &s in &cfg.perturb.stages {
            model.bank.get(s)?;
        }
    }

    let phase = Phase::Adapter { train_backbone: !cfg.freeze_backbone };
    let mut rng = seeded(derive(cfg.seed, &[TAG_ADAPTER]));
    let mut sgd: Sgd<T> = Sgd::new(cfg.lr, cfg.momentum, model.trained_params_mut(phase).len())?;
    let mut log = LossLog::new();
    let mut step = 0usize;
    let flags = cfg.flags();

    for _epoch in 0..cfg.adapter_epochs {
        let mut done = 0;
        while done < cfg.episodes_per_epoch {
            let batch = cfg.batch_size.min(cfg.episodes_per_epoch - done);
            let mut acc: Option<Vec<Tensor<T>>> = None;
            let mut loss_sum = LossBreakdown { l_bce: 0.0, l_cyc: 0.0, l_align: 0.0, total: 0.0 };
            for _ in 0..batch {
                let episode = pool.sample_episode::<T>(cfg.train_shots, "source", &mut rng)?;
                let out = run_episode(
                    model,
                    &episode,
                    EpisodeMode::AdapterTrain {
                        perturb: &cfg.perturb,
                        flags,
                        train_backbone: !cfg.freeze_backbone,
                    },
                    &mut rng,
                )?;
                accumulate(&mut acc, out.grads.expect("training episode yields grads"));
                add_loss(&mut loss_sum, &out.loss.expect("training episode yields loss"));
            }
            let loss = scale_loss(&loss_sum, batch);
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut grads = finish(acc.expect("non-empty batch"), batch);
            apply_weight_decay(&mut grads, &model.trained_params_mut(phase), cfg.weight_decay);
            clip_grads(&mut grads, cfg.grad_clip);
            sgd.step(&mut model.trained_params_mut(phase), &grads)?;
            log.push(step, "adapter", loss);
            step += 1;
            done += batch;
        }
    }
    Ok(log)
}

fn apply_weight_decay<T: Scalar>(
    grads: &mut [Tensor<T>],
    params: &[&mut Tensor<T>],
    decay: f64,
) {
    if decay == 0.0 {
        return;
    }
    let wd = T::from_f64(decay);
    for (g, p) in grads.iter_mut().zip(params) {
        for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
            *gv += wd * pv;
        }
    }
}

fn clip_grads<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) {
    if max_norm == 0.0 {
        return;
    }
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

fn accumulate<T: Scalar>(acc: &mut Option<Vec<Tensor<T>>>, grads: Vec<Tensor<T>>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (slot, g) in a.iter_mut().zip(grads) {
                for (s, &v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *s += v;
                }
            }
        }
    }
}

fn finish<T: Scalar>(mut acc: Vec<Tensor<T>>, batch: usize) -> Vec<Tensor<T>> {
    let inv = T::from_f64(1.0 / batch as f64);
    for g in &mut acc {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    acc
}

fn add_loss(sum: &mut LossBreakdown, l: &LossBreakdown) {
    sum.l_bce += l.l_bce;
    sum.l_cyc += l.l_cyc;
    sum.l_align += l.l_align;
    sum.total += l.total;
}

fn scale_loss(sum: &LossBreakdown, n: usize) -> LossBreakdown {
    let inv = 1.0 / n as f64;
    LossBreakdown {
        l_bce: sum.l_bce * inv,
        l_cyc: sum.l_cyc * inv,
        l_align: sum.l_align * inv,
        total: sum.total * inv,
    }
}

/// Outputs of one `train` invocation.
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub steps: usize,
    pub final_loss: Option<LossBreakdown>,
}

/// Full train command: load data, run the phase, write checkpoint + loss
/// CSV under the configured output directory.
pub fn run_train(cfg: &TrainConfig, phase: TrainPhase, init: Option<&Path>) -> Result<TrainOutput> {
    match cfg.precision {
        Precision::F32 => run_train_typed::<f32>(cfg, phase, init),
        Precision::F64 => run_train_typed::<f64>(cfg, phase, init),
    }
}

fn run_train_typed<T: Scalar>(
    cfg: &TrainConfig,
    phase: TrainPhase,
    init: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(cfg.data_dir.join("manifest.json"))?;
    let pool = TrainPool::load(&cfg.data_dir, &manifest)?;

    let mut model: Model<T> = match (phase, init) {
        (_, Some(path)) => ckpt::load_model(path)?,
        (TrainPhase::Baseline, None) => Model::init(
            cfg.model.clone(),
            cfg.perturb.bank_momentum,
            &mut seeded(derive(cfg.seed, &[TAG_INIT])),
        ),
        (TrainPhase::Adapter, None) => {
            return Err(Error::invalid(
                "adapter phase requires a baseline checkpoint (--init)",
            ))
        }
    };

    let log = match phase {
        TrainPhase::Baseline => train_baseline(cfg, &pool, &manifest, &mut model)?,
        TrainPhase::Adapter => train_adapter(cfg, &pool, &mut model)?,
    };

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io_at(&cfg.out_dir, e))?;
    let checkpoint = cfg.out_dir.join(format!("{}.ckpt", phase.name()));
    ckpt::save_model(&checkpoint, &model)?;
    let loss_csv = cfg.out_dir.join(format!("losses_{}.csv", phase.name()));
    std::fs::write(&loss_csv, log.to_csv()).map_err(|e| Error::io_at(&loss_csv, e))?;
    Ok(TrainOutput { checkpoint, loss_csv, steps: log.len(), final_loss: log.last() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_benchmark;

    fn tiny_setup(dir: &Path) -> (TrainConfig, DatasetManifest) {
        let mut m = DatasetManifest::default_benchmark(3);
        m.train_classes.truncate(2);
        m.test_classes.truncate(1);
        m.train_samples_per_class = 6;
        m.test_episodes_per_style = 2;
        m.support_count = 1;
        m.target_styles.truncate(1);
        build_benchmark(&m, dir, false).unwrap();
        let cfg = TrainConfig {
            baseline_epochs: 1,
            adapter_epochs: 1,
            episodes_per_epoch: 4,
            batch_size: 2,
            model: ModelConfig { stage_channels: vec![4, 6], ..Default::default() },
            perturb: PerturbConfig { stages: vec![0, 1], ..Default::default() },
            data_dir: dir.to_path_buf(),
            out_dir: dir.join("out"),
            ..Default::default()
        };
        (cfg, m)
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn two_phase_training_runs_and_losses_are_finite() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, _m) = tiny_setup(dir.path());
        let out = run_train(&cfg, TrainPhase::Baseline, None).unwrap();
        assert_eq!(out.steps, 2);
        assert!(out.final_loss.unwrap().total.is_finite());
        assert!(out.checkpoint.exists());

        let out2 = run_train(&cfg, TrainPhase::Adapter, Some(&out.checkpoint)).unwrap();
        assert!(out2.final_loss.unwrap().total.is_finite());
        let model: Model<f32> = ckpt::load_model(&out2.checkpoint).unwrap();
        assert_eq!(model.adapters.len(), 2);
        assert!(model.bank.is_initialized(0));
    }

    #[test]
    fn adapter_phase_without_baseline_checkpoint_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, _m) = tiny_setup(dir.path());
        assert!(run_train(&cfg, TrainPhase::Adapter, None).is_err());
    }

    #[test]
    fn zero_epoch_resume_reproduces_checkpoint_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, _m) = tiny_setup(dir.path());
        let out = run_train(&cfg, TrainPhase::Baseline, None).unwrap();
        let original = std::fs::read(&out.checkpoint).unwrap();

        cfg.baseline_epochs = 0;
        cfg.out_dir = dir.path().join("resume");
        let resumed = run_train(&cfg, TrainPhase::Baseline, Some(&out.checkpoint)).unwrap();
        assert_eq!(resumed.steps, 0);
        let copy = std::fs::read(&resumed.checkpoint).unwrap();
        assert_eq!(original, copy);
    }

    #[test]
    fn same_seed_gives_identical_loss_csv() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, _m) = tiny_setup(dir.path());
        let a = run_train(&cfg, TrainPhase::Baseline, None).unwrap();
        let csv_a = std::fs::read(&a.loss_csv).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = dir.path().join("out2");
        let b = run_train(&cfg2, TrainPhase::Baseline, None).unwrap();
        let csv_b = std::fs::read(&b.loss_csv).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn loss_ablation_flag_combinations_all_train() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, _m) = tiny_setup(dir.path());
        let base = run_train(&cfg, TrainPhase::Baseline, None).unwrap();
        for (cyc, align) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = cfg.clone();
            c.use_cyc = cyc;
            c.use_align = align;
            c.out_dir = dir.path().join(format!("out_{cyc}_{align}"));
            let out = run_train(&c, TrainPhase::Adapter, Some(&base.checkpoint)).unwrap();
            let l = out.final_loss.unwrap();
            assert!(l.total.is_finite());
            if !cyc {
                assert_eq!(l.l_cyc, 0.0);
            }
            if !align {
                assert_eq!(l.l_align, 0.0);
            }
        }
    }
}
