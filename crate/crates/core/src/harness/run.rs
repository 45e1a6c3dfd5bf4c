//! Experiment orchestration: surrogate pretraining, the session loop, and
//! evaluation of the slow, fast and aggregated tracks.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::data::{make_cil_stream, make_dil_stream, BlobGenerator, SessionSource, SessionStream, StreamMode};
use super::metrics::{compute_metrics, MetricsRecord, SessionEval};
use crate::aggregate::{self, argmax};
use crate::backbone::{pretrain_surrogate, Backbone, Surrogate};
use crate::error::{contract, Error, Result};
use crate::head::{select_beta, ProjectionHead};
use crate::learners::{train_fast, train_slow, Learner};
use crate::numeric::{Rng, Tensor};

// Independent RNG streams derived from the experiment seed.
const STREAM_CENTERS: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_PRETRAIN: u64 = 3;
const STREAM_SLOW: u64 = 4;
const STREAM_FAST: u64 = 5;
const STREAM_SLOW_HEAD: u64 = 6;
const STREAM_FAST_HEAD: u64 = 7;

/// Data stream plus pretrained surrogate for one seed. Configs that differ
/// only in learner, head, aggregation or ablation settings can share it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub key: String,
    pub surrogate: Surrogate,
    pub stream: SessionStream,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let s = &cfg.stream;
    let total = s.pretext_classes + s.classes;
    let generator = BlobGenerator::new(total, cfg.backbone.input_width, s.spread, s.center_scale, &mut root.fork(STREAM_CENTERS))?;
    let mut rng = root.fork(STREAM_SAMPLES);
    let pretext = generator.sample(0..s.pretext_classes, s.samples_per_class, &mut rng);
    let p = s.pretext_classes;
    let stream = match s.mode {
        StreamMode::Cil => {
            let train = generator.sample(p..total, s.samples_per_class, &mut rng).select(|_| true, |y| y - p);
            let test = generator.sample(p..total, s.test_per_class, &mut rng).select(|_| true, |y| y - p);
            make_cil_stream(&train, &test, s.sessions, s.base_classes)?
        }
        StreamMode::Dil => {
            let streamed = BlobGenerator { centers: generator.centers[p..].to_vec(), spread: generator.spread };
            make_dil_stream(&streamed, s.sessions, s.samples_per_class, s.test_per_class, s.shift, &mut rng)?
        }
    };
    let surrogate = pretrain_surrogate(cfg.backbone, &pretext.inputs, &pretext.labels, &cfg.pretrain, &mut root.fork(STREAM_PRETRAIN))?;
    Ok(Prepared { key: cfg.preparation_key(), surrogate, stream })
}

/// One per-sample prediction, for the optional dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub session: usize,
    pub track: &'static str,
    pub sample: usize,
    pub origin: usize,
    pub label: usize,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionLog {
    pub session: usize,
    pub classes: usize,
    pub slow_beta: Option<f64>,
    pub fast_beta: Option<f64>,
    pub slow_loss: Option<f64>,
    pub fast_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsRecord,
    pub sessions: Vec<SessionLog>,
    pub predictions: Vec<PredictionRow>,
    pub pretext_accuracy: f64,
    pub slow: Learner,
    pub fast: Option<Learner>,
    pub slow_head: Option<ProjectionHead>,
    pub fast_head: Option<ProjectionHead>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

pub fn run_prepared(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<RunOutput> {
    contract!(prepared.key == cfg.preparation_key(), "prepared experiment does not match this config's seed, backbone, pretraining or stream");
    let mut stream = prepared.stream.clone();
    let mut out = run_sessions(cfg, &prepared.surrogate.backbone, &mut stream)?;
    out.pretext_accuracy = prepared.surrogate.train_accuracy;
    Ok(out)
}

fn fresh_head(cfg: &ExperimentConfig, width: usize, stream: u64) -> Result<ProjectionHead> {
    let seed = Rng::new(cfg.seed).fork(stream).next_u64() >> 1;
    ProjectionHead::new(&cfg.head, width, seed)
}

fn absorb(head: &mut ProjectionHead, feats: &Tensor, labels: &[usize], classes: usize, grid: &[f64]) -> Result<f64> {
    head.accumulate_session(feats, labels, classes)?;
    let beta = select_beta(head, feats, labels, grid)?;
    head.set_beta(beta)?;
    Ok(beta)
}

fn logits(learner: &Learner, head: Option<&ProjectionHead>, feats: &Tensor, tau: f64) -> Result<Tensor> {
    match head {
        Some(h) => h.logits(feats),
        None => learner.cosine_logits(feats, tau),
    }
}

/// Runs every session of `source` against a frozen `backbone`.
pub fn run_sessions(cfg: &ExperimentConfig, backbone: &Backbone, source: &mut dyn SessionSource) -> Result<RunOutput> {
    cfg.validate()?;
    contract!(backbone.config.input_width == cfg.backbone.input_width, "backbone input width differs from config");
    let root = Rng::new(cfg.seed);
    let mut slow_rng = root.fork(STREAM_SLOW);
    let mut fast_rng = root.fork(STREAM_FAST);
    let on = cfg.ablation.switches();
    let use_fast = !cfg.ablation.disable_fast;
    let use_heads = !cfg.ablation.disable_heads;
    let grid = &cfg.head.beta_grid;
    let tau = cfg.learner.tau;
    let d = backbone.width();

    let mut slow: Option<Learner> = None;
    let mut fast: Option<Learner> = None;
    let mut slow_head: Option<ProjectionHead> = None;
    let mut fast_head: Option<ProjectionHead> = None;
    let (mut slow_evals, mut fast_evals, mut agg_evals) = (Vec::new(), Vec::new(), Vec::new());
    let mut logs = Vec::new();
    let mut predictions = Vec::new();

    for t in 1..=source.sessions() {
        let train = source.train(t)?;
        contract!(!train.is_empty(), "session {t} has no training data");
        let classes = source.classes_through(t);
        let mut log = SessionLog { session: t, classes, slow_beta: None, fast_beta: None, slow_loss: None, fast_loss: None };

        if t == 1 {
            let (learner, report) = train_slow(&train.inputs, &train.labels, backbone, &cfg.pet, &cfg.learner, on, &mut slow_rng)?;
            log.slow_loss = Some(report.final_loss);
            if use_heads {
                let feats = learner.features(backbone, &train.inputs)?;
                let mut h = fresh_head(cfg, d, STREAM_SLOW_HEAD)?;
                log.slow_beta = Some(absorb(&mut h, &feats, &train.labels, classes, grid)?);
                slow_head = Some(h);
                if use_fast {
                    // The fast learner starts as a copy of the slow one, so its
                    // features for this session's data are the slow features.
                    let mut h = fresh_head(cfg, d, STREAM_FAST_HEAD)?;
                    log.fast_beta = Some(absorb(&mut h, &feats, &train.labels, classes, grid)?);
                    fast_head = Some(h);
                }
            }
            slow = Some(learner);
        } else {
            let slow_l = slow.as_mut().expect("slow learner exists after session 1");
            let slow_feats = slow_l.features(backbone, &train.inputs)?;
            slow_l.expand(&slow_feats, &train.labels)?;
            if use_fast {
                match fast.as_mut() {
                    None => fast = Some(Learner::fast_from(slow_l)),
                    Some(f) => {
                        let ff = f.features(backbone, &train.inputs)?;
                        f.expand(&ff, &train.labels)?;
                    }
                }
                let f = fast.as_mut().expect("fast learner initialized");
                let prev = source.classes_through(t - 1);
                let report = train_fast(t, &train.inputs, &train.labels, backbone, slow_l, f, prev, &cfg.learner, on, &mut fast_rng)?;
                log.fast_loss = Some(report.final_loss);
            }
            if let Some(h) = slow_head.as_mut() {
                log.slow_beta = Some(absorb(h, &slow_feats, &train.labels, classes, grid)?);
            }
            if let (Some(h), Some(f)) = (fast_head.as_mut(), fast.as_ref()) {
                let ff = f.features(backbone, &train.inputs)?;
                log.fast_beta = Some(absorb(h, &ff, &train.labels, classes, grid)?);
            }
        }

        let test = source.test_through(t)?;
        let slow_l = slow.as_ref().expect("slow learner exists");
        let zs = logits(slow_l, slow_head.as_ref(), &slow_l.features(backbone, &test.data.inputs)?, tau)?;
        contract!(zs.cols() == classes, "slow logits cover {} classes, expected {classes}", zs.cols());
        let zf = match fast.as_ref() {
            Some(f) if t >= 2 => Some(logits(f, fast_head.as_ref(), &f.features(backbone, &test.data.inputs)?, tau)?),
            _ => None,
        };
        let n = test.data.len();
        let slow_pred: Vec<usize> = (0..n).map(|i| argmax(zs.row(i))).collect();
        let fast_pred: Option<Vec<usize>> = zf.as_ref().map(|z| (0..n).map(|i| argmax(z.row(i))).collect());
        let agg_pred: Vec<usize> = (0..n).map(|i| aggregate::predict(zs.row(i), zf.as_ref().map(|z| z.row(i)), &cfg.aggregation, t)).collect::<Result<_>>()?;

        let eval = |p: Vec<usize>| SessionEval { predictions: p, truths: test.data.labels.clone(), origins: test.origins.clone() };
        let mut tracks = vec![("slow", slow_pred.clone())];
        if let Some(fp) = &fast_pred {
            tracks.push(("fast", fp.clone()));
        }
        tracks.push(("aggregate", agg_pred.clone()));
        for (track, preds) in tracks {
            for (i, &p) in preds.iter().enumerate() {
                predictions.push(PredictionRow { session: t, track, sample: i, origin: test.origins[i], label: test.data.labels[i], prediction: p });
            }
        }
        slow_evals.push(eval(slow_pred));
        if let Some(fp) = fast_pred {
            fast_evals.push(eval(fp));
        }
        agg_evals.push(eval(agg_pred));
        logs.push(log);
    }

    let metrics = MetricsRecord {
        sessions: source.sessions(),
        slow: compute_metrics(&slow_evals, 1)?,
        fast: if fast_evals.is_empty() { None } else { Some(compute_metrics(&fast_evals, 2)?) },
        aggregate: compute_metrics(&agg_evals, 1)?,
    };
    Ok(RunOutput {
        metrics,
        sessions: logs,
        predictions,
        pretext_accuracy: f64::NAN,
        slow: slow.ok_or_else(|| Error::Contract("stream has no sessions".into()))?,
        fast,
        slow_head,
        fast_head,
    })
}

#[derive(Debug, Serialize)]
struct TrackSummary {
    final_accuracy: f64,
    average_accuracy: f64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    metrics_file: &'static str,
    pretext_accuracy: f64,
    summary: std::collections::BTreeMap<&'static str, TrackSummary>,
    sessions: &'a [SessionLog],
    config: &'a ExperimentConfig,
    timestamp_unix: u64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// JSON run manifest: config echo, versions, seed, per-session log.
pub fn manifest_json(cfg: &ExperimentConfig, out: &RunOutput) -> String {
    let summary = out.metrics.tracks().into_iter().map(|(n, t)| (n, TrackSummary { final_accuracy: t.final_accuracy, average_accuracy: t.average_accuracy })).collect();
    let timestamp_unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        metrics_file: METRICS_FILE,
        pretext_accuracy: out.pretext_accuracy,
        summary,
        sessions: &out.sessions,
        config: cfg,
        timestamp_unix,
    };
    serde_json::to_string_pretty(&m).expect("manifest serializes")
}

pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut s = String::from("session,track,sample,origin,label,prediction\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.session, r.track, r.sample, r.origin, r.label, r.prediction);
    }
    s
}

/// Writes the metrics CSV and manifest (and optionally the prediction dump)
/// into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput, dump_predictions: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(METRICS_FILE), out.metrics.to_csv())?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json(cfg, out))?;
    if dump_predictions {
        std::fs::write(dir.join(PREDICTIONS_FILE), predictions_csv(&out.predictions))?;
    }
    Ok(())
}

/// Saves the backbone, learners and heads as tensor archives.
pub fn write_snapshots(dir: &Path, backbone: &Backbone, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    backbone.save(&dir.join("backbone.bin"))?;
    out.slow.save(&dir.join("slow.bin"))?;
    if let Some(f) = &out.fast {
        f.save(&dir.join("fast.bin"))?;
    }
    if let Some(h) = &out.slow_head {
        h.save(&dir.join("slow_head.bin"))?;
    }
    if let Some(h) = &out.fast_head {
        h.save(&dir.join("fast_head.bin"))?;
    }
    Ok(())
}

/// Failed threshold checks for `run --assert`; empty when all hold.
pub fn check_expectations(cfg: &ExperimentConfig, m: &MetricsRecord) -> Vec<String> {
    let mut failures = Vec::new();
    let e = &cfg.expect;
    if m.aggregate.final_accuracy < e.min_final_accuracy {
        failures.push(format!("final aggregated accuracy {:.4} is below {:.4}", m.aggregate.final_accuracy, e.min_final_accuracy));
    }
    if let Some(f) = &m.fast {
        for (k, &t) in f.sessions.iter().enumerate() {
            let floor = m.slow.accuracy[t - 1].min(f.accuracy[k]) - e.aggregate_margin;
            let agg = m.aggregate.accuracy[t - 1];
            if agg < floor {
                failures.push(format!("session {t}: aggregated accuracy {agg:.4} trails min(slow, fast) by more than {}", e.aggregate_margin));
            }
        }
    }
    failures
}
