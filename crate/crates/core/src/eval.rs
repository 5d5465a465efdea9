//! Episodic evaluation over the on-disk test sets, and the channel
//! statistics dump.
//!
//! One run evaluates one rectify setting over every requested style.
//! Per-episode rows, per-style summaries and (when rectifying) the
//! bank-distance diagnostics are written as CSV with fixed schemas:
//!
//! ```text
//! episodes.csv        episode_id,class_id,style_id,shots,iou,l_bce
//! summary.csv         style_id,shots,rectify,miou,episodes
//! stats_distance.csv  episode_id,style_id,stage,d_unrect,d_rect
//! ```
//!
//! Episodes are independent and the model is read-only, so evaluation can
//! fan out over a thread pool; rows are assembled in episode order, making
//! the output bytes identical for any job count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::ckpt;
use crate::data::{list_test_episodes, load_test_episode, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{miou, run_episode, EpisodeMode, EpisodeScore, Model};
use crate::rng::{derive, seeded};
use crate::stats::channel_stats_value;
use crate::tensor::tape::Tape;
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    /// When set, CSV files are written under this directory.
    pub out_dir: Option<PathBuf>,
    pub shots: usize,
    pub rectify: bool,
    pub jobs: usize,
    /// Restrict to these style ids; `None` evaluates every test style.
    pub styles: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct EpisodeRow {
    pub episode_id: String,
    pub class_id: u32,
    pub style_id: String,
    pub shots: usize,
    pub iou: f64,
    pub l_bce: f64,
    /// (stage, unrectified, rectified) distances to the stats bank.
    pub dists: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct StyleSummary {
    pub style_id: String,
    pub shots: usize,
    pub rectify: bool,
    pub miou: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EpisodeRow>,
    pub summaries: Vec<StyleSummary>,
    pub episodes_csv: String,
    pub summary_csv: String,
    pub stats_csv: Option<String>,
}

impl EvalReport {
    pub fn style_miou(&self, style_id: &str) -> Option<f64> {
        self.summaries.iter().find(|s| s.style_id == style_id).map(|s| s.miou)
    }

    /// Human-readable summary table.
    pub fn render_table(&self) -> String {
        let mut s = String::from("style        shots  rectify  miou    episodes\n");
        for r in &self.summaries {
            s.push_str(&format!(
                "{:<12} {:<6} {:<8} {:<7.4} {}\n",
                r.style_id, r.shots, r.rectify, r.miou, r.episodes
            ));
        }
        s
    }
}

/// Evaluate a checkpoint; element type is taken from the checkpoint.
pub fn run_eval(cfg: &EvalConfig) -> Result<EvalReport> {
    let entries = ckpt::load(&cfg.checkpoint)?;
    match model_dtype(&entries)? {
        0 => run_eval_typed::<f32>(cfg, &entries),
        1 => run_eval_typed::<f64>(cfg, &entries),
        other => Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
    }
}

fn run_eval_typed<T: Scalar>(cfg: &EvalConfig, entries: &ckpt::Entries) -> Result<EvalReport> {
    if cfg.shots == 0 {
        return Err(Error::invalid("shots must be >= 1"));
    }
    let model: Model<T> = ckpt::model_from_entries(entries)?;
    let manifest = DatasetManifest::load(cfg.data_dir.join("manifest.json"))?;
    let style_ids: Vec<String> = match &cfg.styles {
        Some(list) => list.clone(),
        None => manifest.test_styles().iter().map(|s| s.style_id.clone()).collect(),
    };

    let mut rows: Vec<EpisodeRow> = Vec::new();
    let mut summaries = Vec::new();
    for style_id in &style_ids {
        let refs = list_test_episodes(&cfg.data_dir, style_id)?;
        if refs.is_empty() {
            return Err(Error::Dataset(format!("style {style_id}: no test episodes")));
        }
        let eval_one = |(idx, ep_ref): (usize, &crate::data::TestEpisodeRef)| -> Result<EpisodeRow> {
            let episode = load_test_episode::<T>(ep_ref, style_id, cfg.shots)?;
            let mut rng = seeded(derive(0, &[idx as u64]));
            let result = run_episode(
                &model,
                &episode,
                EpisodeMode::Eval { rectify: cfg.rectify, trace_stats: cfg.rectify },
                &mut rng,
            );
            let out = match result {
                Err(e) if std::env::var("STYLEBEND_EVAL_LENIENT").is_ok() => {
                    eprintln!("LENIENT: {} {} failed: {e}", style_id, ep_ref.episode_id);
                    return Ok(EpisodeRow {
                        episode_id: ep_ref.episode_id.clone(),
                        class_id: ep_ref.class_id,
                        style_id: style_id.clone(),
                        shots: cfg.shots,
                        iou: 0.0,
                        l_bce: f64::NAN,
                        dists: Vec::new(),
                    });
                }
                other => other?,
            };
            Ok(EpisodeRow {
                episode_id: ep_ref.episode_id.clone(),
                class_id: ep_ref.class_id,
                style_id: style_id.clone(),
                shots: cfg.shots,
                iou: out.iou.expect("eval episode yields iou"),
                l_bce: out.loss.expect("eval episode yields bce").l_bce,
                dists: out.stats_dist,
            })
        };
        let mut style_rows: Vec<EpisodeRow> = if cfg.jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.jobs)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(|| {
                refs.par_iter().enumerate().map(eval_one).collect::<Result<Vec<_>>>()
            })?
        } else {
            refs.iter().enumerate().map(eval_one).collect::<Result<Vec<_>>>()?
        };

        let scores: Vec<EpisodeScore> = style_rows
            .iter()
            .map(|r| EpisodeScore { class_id: r.class_id, iou: r.iou })
            .collect();
        summaries.push(StyleSummary {
            style_id: style_id.clone(),
            shots: cfg.shots,
            rectify: cfg.rectify,
            miou: miou(&scores)?,
            episodes: style_rows.len(),
        });
        rows.append(&mut style_rows);
    }

    let episodes_csv = render_episodes_csv(&rows);
    let summary_csv = render_summary_csv(&summaries);
    let stats_csv = cfg.rectify.then(|| render_stats_csv(&rows));

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        std::fs::write(dir.join("episodes.csv"), &episodes_csv)?;
        std::fs::write(dir.join("summary.csv"), &summary_csv)?;
        if let Some(sc) = &stats_csv {
            std::fs::write(dir.join("stats_distance.csv"), sc)?;
        }
    }
    Ok(EvalReport { rows, summaries, episodes_csv, summary_csv, stats_csv })
}

/// Element type of the stored model, read off the first encoder tensor.
fn model_dtype(entries: &ckpt::Entries) -> Result<u8> {
    entries
        .get("encoder.stage0.conv1.weight")
        .map(|e| e.dtype)
        .ok_or_else(|| Error::Checkpoint("checkpoint has no encoder entries".into()))
}

fn render_episodes_csv(rows: &[EpisodeRow]) -> String {
    let mut s = String::from("episode_id,class_id,style_id,shots,iou,l_bce\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.episode_id, r.class_id, r.style_id, r.shots, r.iou, r.l_bce
        ));
    }
    s
}

fn render_summary_csv(summaries: &[StyleSummary]) -> String {
    let mut s = String::from("style_id,shots,rectify,miou,episodes\n");
    for r in summaries {
        s.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.style_id, r.shots, r.rectify, r.miou, r.episodes
        ));
    }
    s
}

fn render_stats_csv(rows: &[EpisodeRow]) -> String {
    let mut s = String::from("episode_id,style_id,stage,d_unrect,d_rect\n");
    for r in rows {
        for &(stage, du, dr) in &r.dists {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.episode_id, r.style_id, stage, du, dr
            ));
        }
    }
    s
}

// ── channel statistics dump ─────────────────────────────────────────

/// Per-sample channel statistics of the training pool at one encoder
/// stage, plus the dataset-average rows. Columns: sample_id, stat, then
/// one column per channel.
pub fn stats_dump(checkpoint: &Path, data_dir: &Path, stage: usize) -> Result<String> {
    let entries = ckpt::load(checkpoint)?;
    match model_dtype(&entries)? {
        0 => stats_dump_typed::<f32>(&entries, data_dir, stage),
        1 => stats_dump_typed::<f64>(&entries, data_dir, stage),
        other => Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
    }
}

fn stats_dump_typed<T: Scalar>(
    entries: &ckpt::Entries,
    data_dir: &Path,
    stage: usize,
) -> Result<String> {
    let model: Model<T> = ckpt::model_from_entries(entries)?;
    if stage >= model.stage_count() {
        return Err(Error::invalid(format!(
            "stage {stage} out of range (encoder has {})",
            model.stage_count()
        )));
    }
    let manifest = DatasetManifest::load(data_dir.join("manifest.json"))?;
    let pool = crate::data::TrainPool::load(data_dir, &manifest)?;
    if pool.total_samples() == 0 {
        return Err(Error::Dataset("empty dataset".into()));
    }

    let c = model.cfg.stage_channels[stage];
    let mut csv = String::from("sample_id,stat");
    for i in 0..c {
        csv.push_str(&format!(",c{i}"));
    }
    csv.push('\n');

    let mut mu_acc = vec![0.0f64; c];
    let mut sig_acc = vec![0.0f64; c];
    let mut count = 0usize;
    for (sample_id, image) in pool.iter_images::<T>() {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, crate::model::BindPhase::Frozen)?;
        let feat = model.forward_plain_to_stage(&mut tape, &vars, &image, stage)?;
        let stats = channel_stats_value(tape.value(feat), model.cfg.eps)?;
        let mu: Vec<f64> = stats.mu.data().iter().map(|v| v.as_f64()).collect();
        let sig: Vec<f64> = stats.sigma.data().iter().map(|v| v.as_f64()).collect();
        push_stat_row(&mut csv, &sample_id, "mu", &mu);
        push_stat_row(&mut csv, &sample_id, "sigma", &sig);
        for i in 0..c {
            mu_acc[i] += mu[i];
            sig_acc[i] += sig[i];
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    let mu_avg: Vec<f64> = mu_acc.iter().map(|v| v * inv).collect();
    let sig_avg: Vec<f64> = sig_acc.iter().map(|v| v * inv).collect();
    push_stat_row(&mut csv, "average", "mu", &mu_avg);
    push_stat_row(&mut csv, "average", "sigma", &sig_avg);
    Ok(csv)
}

fn push_stat_row(csv: &mut String, sample_id: &str, stat: &str, values: &[f64]) {
    csv.push_str(sample_id);
    csv.push(',');
    csv.push_str(stat);
    for v in values {
        csv.push_str(&format!(",{v:.8}"));
    }
    csv.push('\n');
}
