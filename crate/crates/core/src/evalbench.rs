//! Absolute pose error over fixed-length windows, and side-by-side reports
//! of two methods.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{angular_distance, compose, inverse, PoseSet, Rotation3};

/// Poses with optional timestamps (seconds).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub poses: PoseSet,
    pub timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(poses: PoseSet) -> Self {
        Trajectory { poses, timestamps: None }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    fn slice(&self, start: usize, len: usize) -> Trajectory {
        Trajectory {
            poses: PoseSet::new(self.poses.poses[start..start + len].to_vec()),
            timestamps: self.timestamps.as_ref().map(|t| t[start..start + len].to_vec()),
        }
    }
}

impl From<PoseSet> for Trajectory {
    fn from(poses: PoseSet) -> Self {
        Trajectory::new(poses)
    }
}

/// Left-composes every pose with `pose[0]⁻¹`.
pub fn anchor_to_first(traj: &Trajectory) -> Result<Trajectory> {
    if traj.is_empty() {
        return Err(Error::DegenerateInput("cannot anchor an empty trajectory".into()));
    }
    Ok(Trajectory {
        poses: traj.poses.anchored(),
        timestamps: traj.timestamps.clone(),
    })
}

/// Per-frame errors `E_k = truth_k⁻¹ ∘ pred_k`: returns
/// `(√mean ‖t(E_k)‖², √mean angle(R(E_k))²)`.
pub fn ape_rmse(pred: &Trajectory, truth: &Trajectory) -> Result<(f64, f64)> {
    let (t2, r2, n) = ape_sums(pred, truth)?;
    Ok(((t2 / n).sqrt(), (r2 / n).sqrt()))
}

fn ape_sums(pred: &Trajectory, truth: &Trajectory) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateInput("empty trajectories".into()));
    }
    let mut t2 = 0.0;
    let mut r2 = 0.0;
    for (p, t) in pred.poses.poses.iter().zip(&truth.poses.poses) {
        let e = compose(&inverse(t), p);
        t2 += e.translation.norm_squared();
        r2 += angular_distance(&e.rotation, &Rotation3::identity()).powi(2);
    }
    Ok((t2, r2, pred.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-window RMSE values.
    #[default]
    WindowMean,
    /// One RMSE over the squared errors of all windows.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub window: usize,
    /// Defaults to `window` (disjoint windows).
    pub stride: Option<usize>,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            window: 10,
            stride: None,
            aggregation: Aggregation::WindowMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowError {
    /// Index of the window's first frame.
    pub start: usize,
    pub rmse_trans: f64,
    pub rmse_rot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeReport {
    pub sequence: String,
    pub windows: Vec<WindowError>,
    pub mean_trans: f64,
    pub mean_rot: f64,
    pub aggregation: Aggregation,
}

impl ApeReport {
    pub fn window_count(&self) -> usize {
        self.windows.len()
    }
}

/// Splits both trajectories into windows, anchors each at its first frame
/// and computes the APE per window. Trailing frames that do not fill a
/// window are dropped.
pub fn windowed_eval(pred: &Trajectory, truth: &Trajectory, sequence: &str, cfg: &EvalConfig) -> Result<ApeReport> {
    if cfg.window < 2 {
        return Err(Error::InvalidConfig(format!("evaluation window must be at least 2, got {}", cfg.window)));
    }
    let stride = cfg.stride.unwrap_or(cfg.window);
    if stride == 0 {
        return Err(Error::InvalidConfig("evaluation stride must be positive".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < cfg.window {
        return Err(Error::TooShort {
            len: pred.len(),
            window: cfg.window,
        });
    }
    let mut windows = Vec::new();
    let (mut t2, mut r2, mut n) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start + cfg.window <= pred.len() {
        let p = anchor_to_first(&pred.slice(start, cfg.window))?;
        let t = anchor_to_first(&truth.slice(start, cfg.window))?;
        let (st, sr, sn) = ape_sums(&p, &t)?;
        t2 += st;
        r2 += sr;
        n += sn;
        windows.push(WindowError {
            start,
            rmse_trans: (st / sn).sqrt(),
            rmse_rot: (sr / sn).sqrt(),
        });
        start += stride;
    }
    let (mean_trans, mean_rot) = match cfg.aggregation {
        Aggregation::WindowMean => {
            let k = windows.len() as f64;
            (
                windows.iter().map(|w| w.rmse_trans).sum::<f64>() / k,
                windows.iter().map(|w| w.rmse_rot).sum::<f64>() / k,
            )
        }
        Aggregation::Pooled => ((t2 / n).sqrt(), (r2 / n).sqrt()),
    };
    Ok(ApeReport {
        sequence: sequence.to_string(),
        windows,
        mean_trans,
        mean_rot,
        aggregation: cfg.aggregation,
    })
}

/// Scientific notation with 17 significant digits, which reads back to the
/// same `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::MalformedLine {
        line,
        reason: format!("`{s}` is not a number"),
    })
}

/// Label of the aggregate row in report files.
pub const MEAN_ROW: &str = "mean";

pub const REPORT_HEADER: [&str; 5] = ["sequence", "window", "start", "rmse_trans_m", "rmse_rot_rad"];

/// Writes one row per window and a final `mean` row.
pub fn write_report_csv(report: &ApeReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER).map_err(csv_error)?;
    for (k, win) in report.windows.iter().enumerate() {
        w.write_record([
            report.sequence.clone(),
            k.to_string(),
            win.start.to_string(),
            format_f64(win.rmse_trans),
            format_f64(win.rmse_rot),
        ])
        .map_err(csv_error)?;
    }
    let agg = match report.aggregation {
        Aggregation::WindowMean => String::new(),
        Aggregation::Pooled => "pooled".to_string(),
    };
    w.write_record([
        report.sequence.clone(),
        MEAN_ROW.to_string(),
        agg,
        format_f64(report.mean_trans),
        format_f64(report.mean_rot),
    ])
    .map_err(csv_error)?;
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(input: impl Read) -> Result<ApeReport> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::MalformedLine {
            line: 1,
            reason: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut windows = Vec::new();
    let mut sequence = String::new();
    let mut mean = None;
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(csv_error)?;
        if rec.len() != REPORT_HEADER.len() {
            return Err(Error::MalformedLine {
                line,
                reason: format!("expected {} fields, got {}", REPORT_HEADER.len(), rec.len()),
            });
        }
        sequence = rec[0].to_string();
        let t = parse_f64(&rec[3], line)?;
        let rot = parse_f64(&rec[4], line)?;
        if &rec[1] == MEAN_ROW {
            let agg = if &rec[2] == "pooled" {
                Aggregation::Pooled
            } else {
                Aggregation::WindowMean
            };
            mean = Some((t, rot, agg));
        } else {
            let start = rec[2].parse().map_err(|_| Error::MalformedLine {
                line,
                reason: format!("`{}` is not a frame index", &rec[2]),
            })?;
            windows.push(WindowError {
                start,
                rmse_trans: t,
                rmse_rot: rot,
            });
        }
    }
    let (mean_trans, mean_rot, aggregation) = mean.ok_or_else(|| Error::MalformedLine {
        line: windows.len() + 2,
        reason: "missing mean row".into(),
    })?;
    Ok(ApeReport {
        sequence,
        windows,
        mean_trans,
        mean_rot,
        aggregation,
    })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedLine {
            line,
            reason: format!("{other:?}"),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Model,
    Baseline,
    Tie,
}

impl Winner {
    fn of(model: f64, baseline: f64) -> Self {
        if model < baseline {
            Winner::Model
        } else if baseline < model {
            Winner::Baseline
        } else {
            Winner::Tie
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Winner::Model => "model",
            Winner::Baseline => "baseline",
            Winner::Tie => "tie",
        }
    }

    fn parse(s: &str, line: usize) -> Result<Self> {
        match s {
            "model" => Ok(Winner::Model),
            "baseline" => Ok(Winner::Baseline),
            "tie" => Ok(Winner::Tie),
            _ => Err(Error::MalformedLine {
                line,
                reason: format!("unknown winner `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub sequence: String,
    /// Window index, or [`MEAN_ROW`] for the aggregate.
    pub window: String,
    pub model_trans: f64,
    pub model_rot: f64,
    pub baseline_trans: f64,
    pub baseline_rot: f64,
    pub trans_winner: Winner,
    pub rot_winner: Winner,
}

impl ComparisonRow {
    fn new(sequence: &str, window: String, m: (f64, f64), b: (f64, f64)) -> Self {
        ComparisonRow {
            sequence: sequence.to_string(),
            window,
            model_trans: m.0,
            model_rot: m.1,
            baseline_trans: b.0,
            baseline_rot: b.1,
            trans_winner: Winner::of(m.0, b.0),
            rot_winner: Winner::of(m.1, b.1),
        }
    }
}

pub const COMPARISON_HEADER: [&str; 8] = [
    "sequence",
    "window",
    "model_trans_m",
    "model_rot_rad",
    "baseline_trans_m",
    "baseline_rot_rad",
    "trans_winner",
    "rot_winner",
];

/// Window-by-window comparison of two reports over the same partition,
/// closed by their aggregate row. Lower is better; equal values tie.
///
/// The mean row has the shape of a published per-sequence result, e.g. for
/// KITTI sequence 7 with the full-scale model:
///
/// ```text
/// sequence,window,model_trans_m,model_rot_rad,baseline_trans_m,baseline_rot_rad,...
/// 07,mean,0.013,0.018,0.105,0.098,...
/// ```
pub fn compare_report(model: &ApeReport, baseline: &ApeReport) -> Result<Vec<ComparisonRow>> {
    if model.sequence != baseline.sequence {
        return Err(Error::PartitionMismatch(format!(
            "sequences `{}` and `{}`",
            model.sequence, baseline.sequence
        )));
    }
    let starts = |r: &ApeReport| r.windows.iter().map(|w| w.start).collect::<Vec<_>>();
    if starts(model) != starts(baseline) {
        return Err(Error::PartitionMismatch(format!(
            "window starts {:?} vs {:?}",
            starts(model),
            starts(baseline)
        )));
    }
    let mut rows: Vec<ComparisonRow> = model
        .windows
        .iter()
        .zip(&baseline.windows)
        .enumerate()
        .map(|(k, (m, b))| ComparisonRow::new(&model.sequence, k.to_string(), (m.rmse_trans, m.rmse_rot), (b.rmse_trans, b.rmse_rot)))
        .collect();
    rows.push(ComparisonRow::new(
        &model.sequence,
        MEAN_ROW.to_string(),
        (model.mean_trans, model.mean_rot),
        (baseline.mean_trans, baseline.mean_rot),
    ));
    Ok(rows)
}

pub fn write_comparison_csv(rows: &[ComparisonRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARISON_HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.sequence.as_str(),
            r.window.as_str(),
            &format_f64(r.model_trans),
            &format_f64(r.model_rot),
            &format_f64(r.baseline_trans),
            &format_f64(r.baseline_rot),
            r.trans_winner.as_str(),
            r.rot_winner.as_str(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_comparison_csv(input: impl Read) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    if header.iter().ne(COMPARISON_HEADER) {
        return Err(Error::MalformedLine {
            line: 1,
            reason: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(csv_error)?;
        if rec.len() != COMPARISON_HEADER.len() {
            return Err(Error::MalformedLine {
                line,
                reason: format!("expected {} fields, got {}", COMPARISON_HEADER.len(), rec.len()),
            });
        }
        rows.push(ComparisonRow {
            sequence: rec[0].to_string(),
            window: rec[1].to_string(),
            model_trans: parse_f64(&rec[2], line)?,
            model_rot: parse_f64(&rec[3], line)?,
            baseline_trans: parse_f64(&rec[4], line)?,
            baseline_rot: parse_f64(&rec[5], line)?,
            trans_winner: Winner::parse(&rec[6], line)?,
            rot_winner: Winner::parse(&rec[7], line)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::RigidTransform;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn pose(w: [f64; 3], t: [f64; 3]) -> RigidTransform {
        RigidTransform::new(Rotation3::exp(&Vector3::from(w)), Vector3::from(t))
    }

    fn walk(seed: u64, n: usize) -> Trajectory {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![pose([rng.random(), rng.random(), rng.random()], [rng.random(), 2.0, -1.0])];
        for _ in 1..n {
            let step = pose(
                [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
            );
            p.push(compose(p.last().unwrap(), &step));
        }
        Trajectory::new(PoseSet::new(p))
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let t = walk(1, 12);
        let (a, b) = ape_rmse(&t, &t).unwrap();
        assert!(a < 1e-9 && b < 1e-9);
    }

    #[test]
    fn translation_offset_example() {
        let truth = Trajectory::new(PoseSet::identity(10));
        let mut pred = truth.clone();
        for p in pred.poses.poses.iter_mut().skip(1) {
            p.translation.x = 1.0;
        }
        let (t, r) = ape_rmse(&pred, &truth).unwrap();
        assert!((t - 0.9f64.sqrt()).abs() < 1e-12);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn rotation_offset_example() {
        let truth = Trajectory::new(PoseSet::identity(10));
        let mut pred = truth.clone();
        for p in pred.poses.poses.iter_mut().skip(1) {
            p.rotation = Rotation3::exp(&Vector3::new(0.0, 0.0, 0.1));
        }
        let (t, r) = ape_rmse(&pred, &truth).unwrap();
        assert_eq!(t, 0.0);
        assert!((r - 0.9f64.sqrt() * 0.1).abs() < 1e-12);
    }

    #[test]
    fn anchoring_preserves_relative_poses() {
        let t = walk(2, 8);
        let a = anchor_to_first(&t).unwrap();
        assert_eq!(a.poses[0], RigidTransform::identity());
        for k in 1..8 {
            let r0 = crate::geom3d::relative(&t.poses[k - 1], &t.poses[k]);
            let r1 = crate::geom3d::relative(&a.poses[k - 1], &a.poses[k]);
            assert!((r0.rotation.matrix() - r1.rotation.matrix()).norm() < 1e-12);
            assert!((r0.translation - r1.translation).norm() < 1e-12);
        }
        let again = anchor_to_first(&a).unwrap();
        for k in 0..8 {
            assert!((again.poses[k].translation - a.poses[k].translation).norm() < 1e-12);
        }
    }

    #[test]
    fn anchoring_removes_constant_offset() {
        let t = walk(3, 6);
        let g = pose([0.3, 1.0, -2.0], [5.0, 6.0, 7.0]);
        let shifted = Trajectory::new(PoseSet::new(t.poses.poses.iter().map(|p| compose(&g, p)).collect()));
        let (a, b) = (anchor_to_first(&t).unwrap(), anchor_to_first(&shifted).unwrap());
        for k in 0..6 {
            assert!((a.poses[k].translation - b.poses[k].translation).norm() < 1e-9);
        }
    }

    #[test]
    fn windowing_drops_remainder() {
        let t = walk(4, 25);
        let r = windowed_eval(&t, &t, "00", &EvalConfig::default()).unwrap();
        assert_eq!(r.window_count(), 2);
        assert_eq!(r.windows[1].start, 10);
        assert!(matches!(
            windowed_eval(&walk(4, 9), &walk(4, 9), "00", &EvalConfig::default()),
            Err(Error::TooShort { len: 9, window: 10 })
        ));
    }

    #[test]
    fn hundred_zero_windows() {
        let t = walk(5, 1000);
        let r = windowed_eval(&t, &t, "07", &EvalConfig::default()).unwrap();
        assert_eq!(r.window_count(), 100);
        assert!(r.windows.iter().all(|w| w.rmse_trans < 1e-9 && w.rmse_rot < 1e-9));
    }

    #[test]
    fn pooled_differs_from_window_mean() {
        let truth = walk(6, 20);
        let mut pred = truth.clone();
        pred.poses.poses[15].translation.x += 2.0;
        let mean = windowed_eval(&pred, &truth, "s", &EvalConfig::default()).unwrap();
        let pooled = windowed_eval(
            &pred,
            &truth,
            "s",
            &EvalConfig {
                aggregation: Aggregation::Pooled,
                ..EvalConfig::default()
            },
        )
        .unwrap();
        assert_eq!(mean.mean_trans, (mean.windows[0].rmse_trans + mean.windows[1].rmse_trans) / 2.0);
        assert!((pooled.mean_trans - (4.0f64 / 20.0).sqrt()).abs() < 1e-9);
        assert!(pooled.mean_trans != mean.mean_trans);
    }

    fn report(seq: &str, vals: &[(f64, f64)]) -> ApeReport {
        let windows: Vec<WindowError> = vals
            .iter()
            .enumerate()
            .map(|(k, &(t, r))| WindowError {
                start: 10 * k,
                rmse_trans: t,
                rmse_rot: r,
            })
            .collect();
        let n = vals.len() as f64;
        ApeReport {
            sequence: seq.into(),
            mean_trans: vals.iter().map(|v| v.0).sum::<f64>() / n,
            mean_rot: vals.iter().map(|v| v.1).sum::<f64>() / n,
            windows,
            aggregation: Aggregation::WindowMean,
        }
    }

    #[test]
    fn identical_reports_tie() {
        let a = report("07", &[(0.1, 0.2), (0.3, 0.4)]);
        let rows = compare_report(&a, &a).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.trans_winner == Winner::Tie && r.rot_winner == Winner::Tie));
    }

    #[test]
    fn lower_rotation_wins() {
        let m = report("07", &[(0.2, 0.01), (0.3, 0.02)]);
        let b = report("07", &[(0.1, 0.05), (0.3, 0.03)]);
        let rows = compare_report(&m, &b).unwrap();
        assert!(rows.iter().all(|r| r.rot_winner == Winner::Model));
        assert_eq!(rows[0].trans_winner, Winner::Baseline);
        assert_eq!(rows[1].trans_winner, Winner::Tie);
    }

    #[test]
    fn mismatched_partitions_are_rejected() {
        let m = report("07", &[(0.2, 0.01)]);
        let b = report("07", &[(0.1, 0.05), (0.3, 0.03)]);
        assert!(matches!(compare_report(&m, &b), Err(Error::PartitionMismatch(_))));
        assert!(matches!(compare_report(&m, &report("08", &[(0.2, 0.01)])), Err(Error::PartitionMismatch(_))));
    }

    #[test]
    fn comparison_header_layout() {
        let m = report("07", &[(0.013, 0.018)]);
        let b = report("07", &[(0.105, 0.098)]);
        let mut buf = Vec::new();
        write_comparison_csv(&compare_report(&m, &b).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sequence,window,model_trans_m,model_rot_rad,baseline_trans_m,baseline_rot_rad,"));
    }

    proptest! {
        #[test]
        fn comparison_csv_round_trips_bit_exactly(vals in proptest::collection::vec((0.0f64..1e3, 0.0f64..3.2, 0.0f64..1e3, 0.0f64..3.2), 1..6)) {
            let m = report("s", &vals.iter().map(|v| (v.0, v.1)).collect::<Vec<_>>());
            let b = report("s", &vals.iter().map(|v| (v.2, v.3)).collect::<Vec<_>>());
            let rows = compare_report(&m, &b).unwrap();
            let mut buf = Vec::new();
            write_comparison_csv(&rows, &mut buf).unwrap();
            let back = read_comparison_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, rows);
        }

        #[test]
        fn report_csv_round_trips_bit_exactly(vals in proptest::collection::vec((0.0f64..1e3, 0.0f64..3.2), 1..6)) {
            let r = report("s", &vals);
            let mut buf = Vec::new();
            write_report_csv(&r, &mut buf).unwrap();
            prop_assert_eq!(read_report_csv(buf.as_slice()).unwrap(), r);
        }

        #[test]
        fn ape_is_gauge_invariant(seed in 0u64..1000, w in proptest::array::uniform3(-3.0f64..3.0), t in proptest::array::uniform3(-10.0f64..10.0)) {
            let truth = walk(seed, 10);
            let pred = walk(seed + 1, 10);
            let g = pose(w, t);
            let shift = |x: &Trajectory| Trajectory::new(PoseSet::new(x.poses.poses.iter().map(|p| compose(&g, p)).collect()));
            let a = windowed_eval(&pred, &truth, "s", &EvalConfig::default()).unwrap();
            let b = windowed_eval(&shift(&pred), &shift(&truth), "s", &EvalConfig::default()).unwrap();
            prop_assert!((a.mean_trans - b.mean_trans).abs() < 1e-9);
            prop_assert!((a.mean_rot - b.mean_rot).abs() < 1e-9);
            prop_assert!(a.mean_rot <= std::f64::consts::PI);
        }
    }
}
