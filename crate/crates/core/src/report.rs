//! Run records, paired comparisons and the text table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::device_store::TransferLedger;
use crate::error::{Error, Result};
use crate::pipeline::{Mode, PipelineConfig, RunOutput, SkipStats, StageCounts, StageTimings, StageValues};
use crate::synth::{associate, ate_rmse, Sequence};

/// Identifies the input of a run so paired runs can be checked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceId {
    pub seed: u64,
    pub keyframes: usize,
    pub keypoints: usize,
}

impl SequenceId {
    pub fn of(seq: &Sequence) -> Self {
        Self {
            seed: seq.config.seed,
            keyframes: seq.frames.len(),
            keypoints: seq.frames.iter().map(|f| f.keypoints.len()).sum(),
        }
    }
}

/// Everything kept from one execution of a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub timings: Vec<StageTimings>,
    pub skips: SkipStats,
    pub ledger: TransferLedger,
    pub counts: StageCounts,
    pub ate_rmse: Option<f64>,
    pub errors: Vec<String>,
}

impl RepeatRecord {
    pub fn from_output(out: &RunOutput, seq: &Sequence, align_scale: bool) -> Self {
        let (est, gt) = associate(&out.trajectory, &seq.ground_truth_trajectory());
        Self {
            timings: out.timings.clone(),
            skips: out.skips.clone(),
            ledger: out.ledger.clone(),
            counts: out.counts.clone(),
            ate_rmse: ate_rmse(&est, &gt, align_scale).ok(),
            errors: out.errors.iter().map(|(k, e)| format!("{k}: {e}")).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation; zero samples give all zeros.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            n: xs.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Per stage, over keyframes where the stage ran; `total` over all.
    pub stages: Vec<(String, MeanStd)>,
    pub total: MeanStd,
    /// Least-squares slope of total time against keyframe index (ms per keyframe).
    pub total_slope: f64,
    pub ate_rmse: Option<MeanStd>,
    pub lba_skips: f64,
    pub culling_skips: f64,
    pub drops: f64,
    pub persistent_bytes_up: u64,
    pub naive_bytes_up: u64,
    pub transfer_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub workers: usize,
    pub stress: bool,
    pub sequence: SequenceId,
    pub repeats: Vec<RepeatRecord>,
    pub summary: RunSummary,
}

/// Least-squares slope of `ys` against their index.
pub fn slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

fn stage_ran(t: &StageTimings, stage: usize) -> bool {
    match stage {
        4 => !t.lba_skipped,
        5 => !t.culling_skipped,
        _ => true,
    }
}

pub fn summarize(repeats: &[RepeatRecord]) -> RunSummary {
    let stages = StageValues::NAMES
        .iter()
        .enumerate()
        .map(|(s, name)| {
            let xs: Vec<f64> = repeats
                .iter()
                .flat_map(|r| r.timings.iter())
                .filter(|t| stage_ran(t, s))
                .map(|t| t.stages_ms.values()[s])
                .collect();
            (name.to_string(), MeanStd::of(&xs))
        })
        .collect();
    let totals: Vec<f64> = repeats
        .iter()
        .flat_map(|r| r.timings.iter().map(|t| t.total_ms))
        .collect();
    let slopes: Vec<f64> = repeats
        .iter()
        .map(|r| slope(&r.timings.iter().map(|t| t.total_ms).collect::<Vec<_>>()))
        .collect();
    let ates: Vec<f64> = repeats.iter().filter_map(|r| r.ate_rmse).collect();
    let n = repeats.len().max(1) as f64;
    let avg = |f: fn(&RepeatRecord) -> usize| repeats.iter().map(f).sum::<usize>() as f64 / n;
    let last = repeats.last().map(|r| r.ledger.clone()).unwrap_or_default();
    RunSummary {
        stages,
        total: MeanStd::of(&totals),
        total_slope: slopes.iter().sum::<f64>() / n,
        ate_rmse: (!ates.is_empty()).then(|| MeanStd::of(&ates)),
        lba_skips: avg(|r| r.skips.lba_skips),
        culling_skips: avg(|r| r.skips.culling_skips),
        drops: avg(|r| r.skips.drops),
        persistent_bytes_up: last.persistent_bytes_up,
        naive_bytes_up: last.naive_bytes_up,
        transfer_ratio: last.savings_ratio(),
    }
}

impl RunReport {
    pub fn new(cfg: &PipelineConfig, seq: &Sequence, repeats: Vec<RepeatRecord>) -> Self {
        Self {
            mode: cfg.mode,
            workers: cfg.effective_workers(),
            stress: cfg.stress,
            sequence: SequenceId::of(seq),
            summary: summarize(&repeats),
            repeats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageComparison {
    pub stage: String,
    pub baseline: MeanStd,
    pub optimized: MeanStd,
    /// Baseline mean over optimized mean; absent when the optimized mean is zero.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sequence: SequenceId,
    pub stages: Vec<StageComparison>,
    pub total: StageComparison,
    pub baseline: RunSummary,
    pub optimized: RunSummary,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b > 0.0).then(|| a / b)
}

fn compare_stage(stage: &str, baseline: MeanStd, optimized: MeanStd) -> StageComparison {
    StageComparison {
        stage: stage.to_string(),
        baseline,
        optimized,
        speedup: ratio(baseline.mean, optimized.mean),
    }
}

/// Pairs a baseline and an optimized run of the same sequence.
pub fn compare(baseline: &RunReport, optimized: &RunReport) -> Result<Comparison> {
    if baseline.sequence != optimized.sequence {
        return Err(Error::InvalidArgument(format!(
            "runs are on different sequences: {:?} vs {:?}",
            baseline.sequence, optimized.sequence
        )));
    }
    if baseline.stress != optimized.stress {
        return Err(Error::InvalidArgument(
            "one run is a stress run and the other is not".into(),
        ));
    }
    if baseline.mode != Mode::Baseline || optimized.mode != Mode::Optimized {
        return Err(Error::InvalidArgument(format!(
            "expected a baseline and an optimized run, got {:?} and {:?}",
            baseline.mode, optimized.mode
        )));
    }
    let (b, o) = (&baseline.summary, &optimized.summary);
    let stages = b
        .stages
        .iter()
        .zip(&o.stages)
        .map(|((name, bs), (_, os))| compare_stage(name, *bs, *os))
        .collect();
    Ok(Comparison {
        sequence: baseline.sequence.clone(),
        stages,
        total: compare_stage("total", b.total, o.total),
        baseline: b.clone(),
        optimized: o.clone(),
    })
}

fn cell(m: &MeanStd) -> String {
    format!("{:.2}±{:.2}", m.mean, m.std)
}

fn ate_cell(a: &Option<MeanStd>) -> String {
    a.map_or("-".into(), |a| format!("{:.4}", a.mean))
}

/// Single-run table: stage, mean±std (ms).
pub fn run_table(r: &RunReport) -> String {
    let s = &r.summary;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>16}",
        "stage",
        format!("{:?} (ms)", r.mode).to_lowercase()
    );
    for (name, m) in &s.stages {
        let _ = writeln!(out, "{:<16} {:>16}", name, cell(m));
    }
    let _ = writeln!(out, "{:<16} {:>16}", "total", cell(&s.total));
    let _ = writeln!(out, "{:<16} {:>16}", "ATE RMSE (m)", ate_cell(&s.ate_rmse));
    let _ = writeln!(out, "{:<16} {:>16}", "skipped LBA", format!("{:.1}", s.lba_skips));
    let _ = writeln!(
        out,
        "{:<16} {:>16}",
        "skipped culling",
        format!("{:.1}", s.culling_skips)
    );
    let _ = writeln!(out, "{:<16} {:>16}", "dropped", format!("{:.1}", s.drops));
    out
}

/// Paired table: stage, baseline mean±std, optimized mean±std, speedup.
pub fn comparison_table(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>16} {:>16} {:>9}",
        "stage", "baseline (ms)", "optimized (ms)", "speed-up"
    );
    for s in c.stages.iter().chain(std::iter::once(&c.total)) {
        let _ = writeln!(
            out,
            "{:<16} {:>16} {:>16} {:>9}",
            s.stage,
            cell(&s.baseline),
            cell(&s.optimized),
            s.speedup.map_or("-".into(), |x| format!("{x:.2}x"))
        );
    }
    let _ = writeln!(
        out,
        "{:<16} {:>16} {:>16}",
        "ATE RMSE (m)",
        ate_cell(&c.baseline.ate_rmse),
        ate_cell(&c.optimized.ate_rmse)
    );
    let _ = writeln!(
        out,
        "{:<16} {:>16} {:>16}",
        "skipped LBA",
        format!("{:.1}", c.baseline.lba_skips),
        format!("{:.1}", c.optimized.lba_skips)
    );
    let _ = writeln!(
        out,
        "{:<16} {:>16} {:>16}",
        "dropped",
        format!("{:.1}", c.baseline.drops),
        format!("{:.1}", c.optimized.drops)
    );
    out
}
