//! End-to-end orchestration behind the command-line tool: data loading,
//! training with logs and checkpoints, evaluation reports and rankings.
//!
//! A run directory holds `config.echo`, `train.log`, `ckpt_<step>.bin`,
//! `metrics.txt` and `distances.txt`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::config::{EvalSplit, RunConfig};
use crate::data::{generate, load_dataset, Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{
    assemble_inference_feature, compute_map_cmc, distance_distributions, distance_matrix, ranked_gallery,
    DistanceHistograms, InferenceMode, ReidSet, RetrievalMetrics,
};
use crate::model::{extract_features, Coen, ExtractedFeatures};
use crate::params::ParamStore;
use crate::train::{StepReport, Trainer};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "COEN_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    run_root().join(&cfg.name)
}

/// Loads `data.root` when set, otherwise generates `data.synth` in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.root {
        Some(root) => load_dataset(root, cfg.model.image_h, cfg.model.image_w),
        None => generate(&cfg.data.synth),
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

/// Most recent `ckpt_*.bin` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut best: Option<PathBuf> = None;
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("ckpt_") && name.ends_with(".bin") && best.as_ref().is_none_or(|b| p > *b) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub last: Option<StepReport>,
}

/// Trains `cfg` into `dir`, optionally resuming from a checkpoint. The log
/// is appended to, so a resumed run continues the same `train.log`.
pub fn train_run(
    cfg: &RunConfig,
    data: &Dataset,
    dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, &data.train)?;
    if let Some(path) = resume {
        trainer.restore(&Checkpoint::load(path)?)?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.echo"), &cfg.echo()?)?;
    let log_path = dir.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let total = trainer.total_steps();
    let every = cfg.train.checkpoint_every as u64;
    let mut last = None;
    while trainer.step < total {
        let report = trainer.step()?;
        writeln!(log, "{}", report.log_line()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && report.step % every == 0 && report.step < total {
            trainer.checkpoint().save(&checkpoint_path(dir, report.step))?;
        }
        on_step(&report);
        last = Some(report);
    }
    let checkpoint = checkpoint_path(dir, trainer.step);
    trainer.checkpoint().save(&checkpoint)?;
    Ok(TrainOutcome {
        steps: trainer.step,
        checkpoint,
        last,
    })
}

/// Retrieval features of both sides of the configured evaluation problem.
pub struct EvalFeatures<'d> {
    pub query: (&'d [Sample], Vec<ExtractedFeatures>),
    /// `None` when the gallery is the query set itself.
    pub gallery: Option<(&'d [Sample], Vec<ExtractedFeatures>)>,
}

impl<'d> EvalFeatures<'d> {
    pub fn extract(cfg: &RunConfig, model: &Coen, store: &ParamStore, data: &'d Dataset) -> Result<Self> {
        match cfg.eval.split {
            EvalSplit::Train => {
                let q = &data.train.samples[..];
                Ok(Self {
                    query: (q, extract_features(model, store, q)?),
                    gallery: None,
                })
            }
            EvalSplit::Heldout => {
                let (q, g) = (&data.query.samples[..], &data.gallery.samples[..]);
                if q.is_empty() || g.is_empty() {
                    return Err(Error::Data("held-out evaluation needs query and gallery splits".into()));
                }
                Ok(Self {
                    query: (q, extract_features(model, store, q)?),
                    gallery: Some((g, extract_features(model, store, g)?)),
                })
            }
        }
    }

    fn gallery(&self) -> (&'d [Sample], &[ExtractedFeatures]) {
        match &self.gallery {
            Some((s, f)) => (s, f),
            None => (self.query.0, &self.query.1),
        }
    }
}

fn feature_matrix(feats: &[ExtractedFeatures], mode: InferenceMode) -> Result<Tensor> {
    let rows = feats
        .iter()
        .map(|f| assemble_inference_feature(&f.as_slices(), mode))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::stack_rows(&refs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub modes: Vec<(InferenceMode, RetrievalMetrics)>,
    /// Mode used for the histograms.
    pub histogram_mode: InferenceMode,
    pub histograms: DistanceHistograms,
    /// Fraction of evaluated samples whose first-ranked spectrum is RGB,
    /// NIR, TIR; `None` without a proxy.
    pub primary_share: Option<[f64; 3]>,
}

impl EvalReport {
    pub fn metrics(&self, mode: InferenceMode) -> Option<&RetrievalMetrics> {
        self.modes.iter().find(|(m, _)| *m == mode).map(|(_, r)| r)
    }

    pub fn metrics_text(&self, cfg: &RunConfig) -> String {
        let mut s = String::new();
        let split = match self.split {
            EvalSplit::Heldout => "heldout",
            EvalSplit::Train => "train",
        };
        let _ = writeln!(s, "# split={split} metric={}", cfg.eval.metric);
        let ranks: Vec<String> = cfg.eval.ranks.iter().map(|k| format!("R-{k}")).collect();
        let _ = writeln!(s, "mode mAP {} evaluated skipped", ranks.join(" "));
        for (mode, m) in &self.modes {
            let cmc: Vec<String> = m.cmc.iter().map(|(_, v)| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{mode} {:.6} {} {} {}", m.map, cmc.join(" "), m.evaluated, m.skipped);
        }
        if let Some([r, n, t]) = self.primary_share {
            let _ = writeln!(s, "# first_ranked RGB={r:.6} NIR={n:.6} TIR={t:.6}");
        }
        s
    }

    pub fn distances_text(&self) -> String {
        format!(
            "# mode={} intra_pairs={} inter_pairs={}\n{}",
            self.histogram_mode,
            self.histograms.intra_total(),
            self.histograms.inter_total(),
            self.histograms.to_text()
        )
    }
}

/// Runs every configured inference mode on already extracted features.
pub fn evaluate_features(cfg: &RunConfig, feats: &EvalFeatures<'_>) -> Result<EvalReport> {
    let (q_samples, q_feats) = (feats.query.0, &feats.query.1);
    let (g_samples, g_feats) = feats.gallery();
    let q_labels: Vec<usize> = q_samples.iter().map(|s| s.label).collect();
    let g_labels: Vec<usize> = g_samples.iter().map(|s| s.label).collect();
    let q_cams: Vec<usize> = q_samples.iter().map(|s| s.cam as usize).collect();
    let g_cams: Vec<usize> = g_samples.iter().map(|s| s.cam as usize).collect();
    let q_uids: Vec<u64> = q_samples.iter().map(|s| s.uid).collect();
    let g_uids: Vec<u64> = g_samples.iter().map(|s| s.uid).collect();
    let (query, gallery) = match cfg.eval.split {
        EvalSplit::Heldout => (
            ReidSet::new(&q_labels).with_cams(&q_cams),
            ReidSet::new(&g_labels).with_cams(&g_cams),
        ),
        EvalSplit::Train => (
            ReidSet::new(&q_labels).with_uids(&q_uids),
            ReidSet::new(&g_labels).with_uids(&g_uids),
        ),
    };
    let mut modes = Vec::with_capacity(cfg.eval.modes.len());
    for &mode in &cfg.eval.modes {
        let qm = feature_matrix(q_feats, mode)?;
        let gm = feature_matrix(g_feats, mode)?;
        let dist = distance_matrix(&qm, &gm, cfg.eval.metric)?;
        modes.push((mode, compute_map_cmc(&dist, query, gallery, &cfg.eval.ranks)?));
    }
    let histogram_mode = *cfg.eval.modes.last().expect("validated non-empty");
    let histograms = distance_distributions(
        &feature_matrix(g_feats, histogram_mode)?,
        &g_labels,
        cfg.eval.metric,
        cfg.eval.histogram_bins,
    )?;
    let mut counts = [0usize; 3];
    let mut ranked = 0;
    let all = q_feats.iter().chain(feats.gallery.as_ref().map_or(&[][..], |(_, f)| f));
    for r in all.filter_map(|f| f.ranking.as_ref()) {
        counts[r.primary().index()] += 1;
        ranked += 1;
    }
    let primary_share = (ranked > 0).then(|| counts.map(|c| c as f64 / ranked as f64));
    Ok(EvalReport {
        split: cfg.eval.split,
        modes,
        histogram_mode,
        histograms,
        primary_share,
    })
}

pub fn evaluate(cfg: &RunConfig, model: &Coen, store: &ParamStore, data: &Dataset) -> Result<EvalReport> {
    evaluate_features(cfg, &EvalFeatures::extract(cfg, model, store, data)?)
}

/// Writes `metrics.txt` and `distances.txt` into `dir`.
pub fn write_eval(cfg: &RunConfig, report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("metrics.txt"), &report.metrics_text(cfg))?;
    write_file(&dir.join("distances.txt"), &report.distances_text())
}

/// Top-`k` gallery matches per query under `mode`, one line per query:
/// `query_file: gallery_file(distance, hit) ...`.
pub fn rank_text(cfg: &RunConfig, feats: &EvalFeatures<'_>, mode: InferenceMode, k: usize) -> Result<String> {
    let (q_samples, q_feats) = (feats.query.0, &feats.query.1);
    let (g_samples, g_feats) = feats.gallery();
    let dist = distance_matrix(&feature_matrix(q_feats, mode)?, &feature_matrix(g_feats, mode)?, cfg.eval.metric)?;
    let mut out = String::new();
    for (i, q) in q_samples.iter().enumerate() {
        let _ = write!(out, "{}:", q.file_stem());
        let mut shown = 0;
        for j in ranked_gallery(dist.row(i)) {
            if shown == k {
                break;
            }
            let g = &g_samples[j];
            if g.uid == q.uid && feats.gallery.is_none() {
                continue;
            }
            let hit = if g.label == q.label { "+" } else { "-" };
            let _ = write!(out, " {}({:.4},{hit})", g.file_stem(), dist.get(i, j));
            shown += 1;
        }
        out.push('\n');
    }
    Ok(out)
}
