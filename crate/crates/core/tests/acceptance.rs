//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test --test acceptance`. Exits nonzero if any criterion
//! fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use safe_cl::harness::run::{prepare, run_prepared, RunOutput};
use safe_cl::harness::ExperimentConfig;
use safe_cl::suite::{aggregation_suite, gradcheck_suite, head_suite, CheckLine};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn suite_outcome(lines: safe_cl::Result<Vec<CheckLine>>) -> Outcome {
    match lines {
        Ok(lines) => {
            let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(ToString::to_string).collect();
            let last = lines.last().map(|l| l.detail.clone()).unwrap_or_default();
            if failed.is_empty() {
                Outcome { pass: true, detail: format!("{} checks passed; {last}", lines.len()) }
            } else {
                Outcome { pass: false, detail: format!("{} of {} checks failed: {}", failed.len(), lines.len(), failed.join("; ")) }
            }
        }
        Err(e) => Outcome { pass: false, detail: format!("error: {e}") },
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs of the three forgetting cells, the full system and the stripped
/// system, per seed.
struct Cells {
    full: Vec<RunOutput>,
    cross: Vec<RunOutput>,
    direct: Vec<RunOutput>,
    stripped: Vec<RunOutput>,
    ordering_secs: f64,
}

fn with_seed(seed: u64, edit: impl Fn(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    edit(&mut cfg);
    cfg
}

fn run_cells() -> safe_cl::Result<Cells> {
    let mut cells = Cells { full: vec![], cross: vec![], direct: vec![], stripped: vec![], ordering_secs: 0.0 };
    for seed in SEEDS {
        let t = Instant::now();
        let base = with_seed(seed, |_| {});
        let prepared = prepare(&base)?;
        cells.full.push(run_prepared(&base, &prepared)?);
        cells.cross.push(run_prepared(&with_seed(seed, |c| c.ablation.disable_cos = true), &prepared)?);
        cells.direct.push(run_prepared(
            &with_seed(seed, |c| {
                c.ablation.disable_cos = true;
                c.ablation.disable_cross = true;
            }),
            &prepared,
        )?);
        cells.ordering_secs += t.elapsed().as_secs_f64();
        let stripped = with_seed(seed, |c| {
            c.ablation.disable_slow_transfer = true;
            c.ablation.disable_cos = true;
            c.ablation.disable_cross = true;
            c.ablation.disable_heads = true;
        });
        cells.stripped.push(run_prepared(&stripped, &prepared)?);
    }
    Ok(cells)
}

fn fast_final(runs: &[RunOutput]) -> Vec<f64> {
    runs.iter().map(|r| r.metrics.fast.as_ref().map_or(f64::NAN, |f| f.final_accuracy)).collect()
}

fn fmt_all(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn forgetting_ordering(c: &Cells) -> Outcome {
    let (d, x, f) = (fast_final(&c.direct), fast_final(&c.cross), fast_final(&c.full));
    let (md, mx, mf) = (mean(&d), mean(&x), mean(&f));
    let pass = md < mx && mx < mf && mf - md >= 0.20 && c.ordering_secs < 600.0;
    Outcome {
        pass,
        detail: format!(
            "fast-only final: finetune-directly {md:.4} [{}], +cross {mx:.4} [{}], full {mf:.4} [{}]; gap {:.1} points (need ≥ 20); {:.0} s (limit 600 s)",
            fmt_all(&d),
            fmt_all(&x),
            fmt_all(&f),
            100.0 * (mf - md),
            c.ordering_secs
        ),
    }
}

fn complementarity(c: &Cells) -> Outcome {
    let agg: Vec<f64> = c.full.iter().map(|r| r.metrics.aggregate.final_accuracy).collect();
    let slow: Vec<f64> = c.full.iter().map(|r| r.metrics.slow.final_accuracy).collect();
    let fast = fast_final(&c.full);
    let floor = mean(&slow).max(mean(&fast)) - 0.01;
    let mut wins = 0;
    let mut newest = Vec::new();
    for r in &c.full {
        let t = r.metrics.sessions;
        let s = r.metrics.slow.final_origin_accuracy(t);
        let f = r.metrics.fast.as_ref().and_then(|f| f.final_origin_accuracy(t));
        if let (Some(s), Some(f)) = (s, f) {
            wins += usize::from(f > s);
            newest.push(format!("{f:.3}/{s:.3}"));
        }
    }
    Outcome {
        pass: mean(&agg) >= floor && wins >= 4,
        detail: format!(
            "aggregate {:.4} vs max(slow {:.4}, fast {:.4}) − 0.01; newest-session fast/slow [{}], fast ahead on {wins}/5 seeds (need ≥ 4)",
            mean(&agg),
            mean(&slow),
            mean(&fast),
            newest.join(" ")
        ),
    }
}

fn end_to_end(c: &Cells) -> Outcome {
    let agg: Vec<f64> = c.full.iter().map(|r| r.metrics.aggregate.final_accuracy).collect();
    let stripped = fast_final(&c.stripped);
    let stripped_agg: Vec<f64> = c.stripped.iter().map(|r| r.metrics.aggregate.final_accuracy).collect();
    Outcome {
        pass: mean(&agg) >= 0.90 && mean(&stripped) < 0.50,
        detail: format!(
            "full aggregated {:.4} [{}] (need ≥ 0.90); stripped fast-only {:.4} [{}] (need < 0.50; stripped aggregated {:.4})",
            mean(&agg),
            fmt_all(&agg),
            mean(&stripped),
            fmt_all(&stripped),
            mean(&stripped_agg)
        ),
    }
}

fn aggregate_floor(c: &Cells) -> Outcome {
    let mut worst = f64::INFINITY;
    for r in &c.full {
        let m = &r.metrics;
        if let Some(f) = &m.fast {
            for (k, &t) in f.sessions.iter().enumerate() {
                worst = worst.min(m.aggregate.accuracy[t - 1] - m.slow.accuracy[t - 1].min(f.accuracy[k]));
            }
        }
    }
    Outcome { pass: worst >= -0.02, detail: format!("smallest aggregate − min(slow, fast) over sessions and seeds: {worst:+.4} (floor −0.02)") }
}

fn determinism() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome { pass: false, detail: format!("tempdir: {e}") },
    };
    let config = dir.path().join("run.toml");
    if let Err(e) = std::fs::write(&config, "seed = 3\n") {
        return Outcome { pass: false, detail: format!("write config: {e}") };
    }
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_safe-cl")).arg("run").arg("--config").arg(&config).arg("--out").arg(&out).output();
        match status {
            Ok(s) if s.status.success() => {}
            Ok(s) => return Outcome { pass: false, detail: format!("run {k} exited with {}: {}", s.status, String::from_utf8_lossy(&s.stderr)) },
            Err(e) => return Outcome { pass: false, detail: format!("run {k}: {e}") },
        }
        let metrics = std::fs::read(out.join("metrics.csv")).unwrap_or_default();
        let manifest: serde_json::Value = std::fs::read_to_string(out.join("manifest.json")).ok().and_then(|t| serde_json::from_str(&t).ok()).unwrap_or_default();
        let mut manifest = manifest;
        if let Some(m) = manifest.as_object_mut() {
            m.remove("timestamp_unix");
        }
        outputs.push((metrics, manifest));
    }
    let same_csv = !outputs[0].0.is_empty() && outputs[0].0 == outputs[1].0;
    let same_manifest = !outputs[0].1.is_null() && outputs[0].1 == outputs[1].1;
    Outcome { pass: same_csv && same_manifest, detail: format!("metrics.csv identical: {same_csv}; manifest identical without timestamp: {same_manifest}") }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut emit = |name: &'static str, o: Outcome| {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    emit("1 gradient suite", suite_outcome(gradcheck_suite(20)));
    emit("2 head oracles", suite_outcome(head_suite()));
    match run_cells() {
        Ok(c) => {
            emit("3 forgetting ordering", forgetting_ordering(&c));
            emit("4 slow/fast complementarity", complementarity(&c));
            emit("5 end-to-end sanity", end_to_end(&c));
            emit("aggregate floor invariant", aggregate_floor(&c));
        }
        Err(e) => {
            for name in ["3 forgetting ordering", "4 slow/fast complementarity", "5 end-to-end sanity"] {
                emit(name, Outcome { pass: false, detail: format!("experiment failed: {e}") });
            }
        }
    }
    emit("6 aggregation math", suite_outcome(aggregation_suite()));
    emit("7 determinism", determinism());
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} criteria, {failed} failed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
