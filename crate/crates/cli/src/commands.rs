//! The four subcommands, written against readers and writers so they can
//! be driven from tests as well as from `main`.

use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use prpo_core::{
    detect_collapse, eval_accuracy, eval_tasks, fused_components, segment, EpochMetrics,
    EvalMode, FusedAdvantage, FusionConfig, Method, ProcessScores, ScoredRollout, SegmentSet,
    TrainConfig, Trainer,
};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, RecordError, Result};
use crate::records::{group_indices, read_records, read_valid_records, Numbered, TrajectoryRecord};

/// Shortest decimal string that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "method",
    "accuracy",
    "mean_gen_length",
    "mean_entropy",
    "collapse_rate",
    "loss",
];

pub const FUSE_HEADER: [&str; 5] = ["prompt_id", "position", "z", "beta", "AF"];

pub const COLLAPSE_HEADER: [&str; 7] = [
    "prompt_id",
    "group_id",
    "t_star",
    "a",
    "b",
    "condition_holds",
    "delta_p_sign",
];

fn csv_err(e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io("output", io),
        other => CliError::Validation(format!("csv: {other:?}")),
    }
}

fn write_err(e: std::io::Error) -> CliError {
    CliError::io("output", e)
}

/// Entropy segmentation of the record's generated span.
pub fn derive_segments(r: &TrajectoryRecord, cfg: &FusionConfig) -> prpo_core::Result<SegmentSet> {
    segment(&r.entropies, r.gen_start, r.len(), cfg.k_spikes, cfg.min_gap)
}

/// Adds a `segments` field to every valid record. Invalid records are
/// skipped and reported together once the valid ones are written.
pub fn cmd_segment<R: BufRead, W: Write>(input: R, path: &str, mut out: W, cfg: &FusionConfig) -> Result<()> {
    let (records, mut bad) = read_records(input, path)?;
    for Numbered { line, mut record } in records {
        let segs = match derive_segments(&record, cfg) {
            Ok(s) => s,
            Err(e) => {
                bad.push(RecordError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Some(scores) = &record.segment_scores {
            if scores.len() != segs.len() {
                bad.push(RecordError {
                    line,
                    message: format!("{} segment scores for {} segments", scores.len(), segs.len()),
                });
                continue;
            }
        }
        record.segments = Some(segs.ranges().to_vec());
        serde_json::to_writer(&mut out, &record).map_err(|e| CliError::Validation(e.to_string()))?;
        writeln!(out).map_err(write_err)?;
    }
    out.flush().map_err(write_err)?;
    if bad.is_empty() {
        Ok(())
    } else {
        bad.sort_by_key(|e| e.line);
        Err(CliError::Records(bad))
    }
}

fn check_fuse_method(method: Method) -> Result<()> {
    match method {
        Method::Prpo | Method::PrmAvgPrpo | Method::ProcessOnly => Ok(()),
        other => Err(CliError::Config(format!(
            "fuse needs a process/outcome method (prpo, prm-avg-prpo, process-only), got `{other}`"
        ))),
    }
}

fn fuse_group(records: &[Numbered], members: &[usize], group_id: &str, method: Method, cfg: &FusionConfig) -> std::result::Result<Vec<FusedAdvantage>, RecordError> {
    let first_line = records[members[0]].line;
    if members.len() < 2 {
        return Err(RecordError {
            line: first_line,
            message: format!("IncompleteGroup: group `{group_id}` has a single record"),
        });
    }
    let mut group = Vec::with_capacity(members.len());
    for &i in members {
        let Numbered { line, record } = &records[i];
        let fail = |message: String| RecordError { line: *line, message };
        let scores = record
            .segment_scores
            .clone()
            .ok_or_else(|| fail("record has no `segment_scores`".into()))?;
        let segments = match &record.segments {
            Some(r) => SegmentSet::new(r.clone()).map_err(|e| fail(e.to_string()))?,
            None => derive_segments(record, cfg).map_err(|e| fail(e.to_string()))?,
        };
        if scores.len() != segments.len() {
            return Err(fail(format!(
                "ScoreCountMismatch: {} scores for {} segments",
                scores.len(),
                segments.len()
            )));
        }
        group.push(ScoredRollout {
            outcome: record.outcome_reward,
            segments,
            scores: Some(ProcessScores(scores)),
        });
    }
    fused_components(&group, method, cfg).map_err(|e| {
        let line = match e {
            prpo_core::Error::ScoreCountMismatch { index, .. }
            | prpo_core::Error::MissingProcessScores { index } => records[members[index]].line,
            _ => first_line,
        };
        RecordError {
            line,
            message: format!("group `{group_id}`: {e}"),
        }
    })
}

/// Per-token `z`, `beta` and `AF` for grouped, scored records, written in
/// input order.
pub fn cmd_fuse<R: BufRead, W: Write>(input: R, path: &str, out: W, method: Method, cfg: &FusionConfig) -> Result<()> {
    check_fuse_method(method)?;
    let records = read_valid_records(input, path)?;
    let groups = group_indices(&records);
    let fused: Vec<std::result::Result<Vec<FusedAdvantage>, RecordError>> = groups
        .par_iter()
        .map(|(id, members)| fuse_group(&records, members, id, method, cfg))
        .collect();

    let mut per_record: Vec<Option<FusedAdvantage>> = vec![None; records.len()];
    let mut bad = Vec::new();
    for ((_, members), result) in groups.iter().zip(fused) {
        match result {
            Ok(parts) => {
                for (&i, part) in members.iter().zip(parts) {
                    per_record[i] = Some(part);
                }
            }
            Err(e) => bad.push(e),
        }
    }
    if !bad.is_empty() {
        bad.sort_by_key(|e| e.line);
        return Err(CliError::Records(bad));
    }

    let mut w = csv::Writer::from_writer(out);
    w.write_record(FUSE_HEADER).map_err(csv_err)?;
    for (n, part) in records.iter().zip(&per_record) {
        let part = part.as_ref().expect("every record belongs to a fused group");
        let beta = num(part.beta);
        for (k, (z, af)) in part.z.values().iter().zip(part.af.values()).enumerate() {
            let pos = (n.record.gen_start + k).to_string();
            w.write_record([n.record.prompt_id.as_str(), &pos, &num(*z), &beta, &num(*af)])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(write_err)?;
    Ok(())
}

/// Collapse diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseSummary {
    pub trajectories: usize,
    pub collapsed: usize,
}

impl CollapseSummary {
    pub fn rate(&self) -> f64 {
        if self.trajectories == 0 {
            0.0
        } else {
            self.collapsed as f64 / self.trajectories as f64
        }
    }
}

/// Advantages for each record: the `advantages` field when present,
/// otherwise fused advantages of its scored group.
fn record_advantages(records: &[Numbered], method: Method, cfg: &FusionConfig) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = records.iter().map(|r| r.record.advantages.clone()).collect();
    let mut bad = Vec::new();
    for (id, members) in group_indices(records) {
        let missing: Vec<usize> = members.iter().copied().filter(|&i| out[i].is_none()).collect();
        if missing.is_empty() {
            continue;
        }
        if missing.len() != members.len() {
            bad.push(RecordError {
                line: records[missing[0]].line,
                message: format!("group `{id}` mixes records with and without `advantages`"),
            });
            continue;
        }
        check_fuse_method(method)?;
        match fuse_group(records, &members, &id, method, cfg) {
            Ok(parts) => {
                for (&i, p) in members.iter().zip(parts) {
                    out[i] = Some(p.af.into_inner());
                }
            }
            Err(e) => bad.push(e),
        }
    }
    if !bad.is_empty() {
        bad.sort_by_key(|e| e.line);
        return Err(CliError::Records(bad));
    }
    Ok(out.into_iter().map(|a| a.expect("filled above")).collect())
}

/// One row per collapse candidate, then a `# collapse_rate=` trailer.
pub fn analyze_records<R: BufRead, W: Write>(input: R, path: &str, out: W, method: Method, cfg: &FusionConfig) -> Result<CollapseSummary> {
    let records = read_valid_records(input, path)?;
    let advantages = record_advantages(&records, method, cfg)?;
    let mut summary = CollapseSummary {
        trajectories: records.len(),
        collapsed: 0,
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLLAPSE_HEADER).map_err(csv_err)?;
    for (n, adv) in records.iter().zip(&advantages) {
        let reports = detect_collapse(adv);
        summary.collapsed += usize::from(reports.iter().any(|r| r.condition_holds));
        for r in reports {
            w.write_record([
                n.record.prompt_id.as_str(),
                &n.record.group_id,
                &r.t_star.to_string(),
                &num(r.a),
                &num(r.b),
                &r.condition_holds.to_string(),
                r.delta_p_sign.name(),
            ])
            .map_err(csv_err)?;
        }
    }
    let mut out = w.into_inner().map_err(|e| write_err(e.into_error()))?;
    writeln!(
        out,
        "# collapse_rate={} trajectories={} collapsed={}",
        num(summary.rate()),
        summary.trajectories,
        summary.collapsed
    )
    .map_err(write_err)?;
    out.flush().map_err(write_err)?;
    Ok(summary)
}

/// Per-epoch collapse rates from a metrics CSV; the trailer reports the
/// last epoch.
pub fn analyze_metrics<R: std::io::Read, W: Write>(input: R, out: W) -> Result<Option<f64>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| CliError::Validation(format!("line 1: {e}")))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(CliError::Validation(format!(
            "line 1: expected columns {}",
            METRICS_HEADER.join(",")
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "method", "collapse_rate"]).map_err(csv_err)?;
    let mut last = None;
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CliError::Validation(format!("line {line}: {e}")))?;
        let rate: f64 = row[5]
            .parse()
            .map_err(|_| CliError::Validation(format!("line {line}: bad collapse_rate `{}`", &row[5])))?;
        w.write_record([&row[0], &row[1], &num(rate)]).map_err(csv_err)?;
        last = Some(rate);
    }
    let mut out = w.into_inner().map_err(|e| write_err(e.into_error()))?;
    match last {
        Some(rate) => writeln!(out, "# collapse_rate={}", num(rate)),
        None => writeln!(out, "# collapse_rate=0"),
    }
    .map_err(write_err)?;
    Ok(last)
}

pub fn metrics_row(m: &EpochMetrics, method: Method) -> [String; 7] {
    [
        m.epoch.to_string(),
        method.name().to_string(),
        num(m.train_accuracy),
        num(m.mean_gen_length),
        num(m.mean_entropy),
        num(m.collapse_rate),
        num(m.loss),
    ]
}

/// Result of one training arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmReport {
    pub name: String,
    pub metrics_path: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub final_greedy_accuracy: f64,
}

/// Trains one configuration, appending a metrics row and writing a
/// checkpoint after every epoch.
pub fn train_arm(cfg: &TrainConfig, run: &RunConfig, name: &str, metrics_path: &Path, ckpt_dir: &Path) -> Result<ArmReport> {
    fs::create_dir_all(ckpt_dir).map_err(|e| CliError::io(ckpt_dir.display().to_string(), e))?;
    let file = File::create(metrics_path).map_err(|e| CliError::io(metrics_path.display().to_string(), e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    w.flush().map_err(write_err)?;

    let mut trainer = Trainer::new(cfg.clone())?;
    let method = cfg.method;
    trainer.train_with(|m, params| {
        let io = |e: std::io::Error| prpo_core::Error::Checkpoint(e.to_string());
        w.write_record(metrics_row(m, method))
            .map_err(|e| prpo_core::Error::Checkpoint(e.to_string()))?;
        w.flush().map_err(io)?;
        let path = ckpt_dir.join(format!("epoch-{:03}.ckpt", m.epoch));
        let f = File::create(&path).map_err(io)?;
        params.write_checkpoint(BufWriter::new(f)).map_err(io)
    })?;
    w.flush().map_err(write_err)?;

    let tasks = eval_tasks(&cfg.task, run.eval.tasks, run.eval.seed);
    let eval = eval_accuracy(&trainer.params, &tasks, cfg.max_len, EvalMode::Greedy)?;
    Ok(ArmReport {
        name: name.to_string(),
        metrics_path: metrics_path.to_path_buf(),
        history: trainer.history,
        final_greedy_accuracy: eval.accuracy,
    })
}

/// Runs the configured training, or every arm of `[suite]`, under `out_dir`.
pub fn cmd_train(run: &RunConfig, out_dir: &Path) -> Result<Vec<ArmReport>> {
    run.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display().to_string(), e))?;
    let base = run.train_config();
    match &run.suite {
        None => Ok(vec![train_arm(
            &base,
            run,
            base.method.name(),
            &out_dir.join("metrics.csv"),
            &out_dir.join("checkpoints"),
        )?]),
        Some(suite) => suite
            .splits
            .iter()
            .map(|&split| {
                let cfg = TrainConfig { split, ..base.clone() };
                train_arm(
                    &cfg,
                    run,
                    split.name(),
                    &out_dir.join(format!("metrics-{}.csv", split.name())),
                    &out_dir.join("checkpoints").join(split.name()),
                )
            })
            .collect(),
    }
}
