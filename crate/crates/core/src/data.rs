//! Dataset ingestion, chronological splitting, windowing, and normalization.
//!
//! Raw series are parsed from delimiter-separated numeric text (comma or
//! whitespace), rows being time steps and columns variables. Windows pair a
//! P-step input with either the next Q values (multi-step) or the single
//! value `horizon` steps past the window end (single-step). Splits are
//! chronological on rows; a sample belongs to the split that contains all of
//! its target rows, and samples whose targets straddle a boundary are
//! dropped. Inputs may reach back into earlier rows — only targets decide
//! membership, and normalization statistics come from training rows alone.
//!
//! Inputs are normalized per node on the fly during batch assembly; targets
//! stay in raw units. Training de-normalizes predictions on the tape before
//! the loss, so losses, logs, and metrics are all in raw data units.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RawSeries {
    /// Row-major `rows x cols`.
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize) -> Result<RawSeries> {
        if values.len() != rows * cols {
            return Err(Error::Dimension("series data does not match its shape".into()));
        }
        if rows < 2 {
            return Err(Error::Config(format!("a series needs at least 2 rows, got {rows}")));
        }
        Ok(RawSeries { values, rows, cols })
    }

    #[inline]
    pub fn get(&self, t: usize, node: usize) -> f64 {
        self.values[t * self.cols + node]
    }
}

/// Parse a numeric table. Lines split on commas when any are present,
/// otherwise on whitespace. NaN/inf cells are rejected unless `forward_fill`
/// copies the previous row's value.
pub fn load_csv(path: &Path, forward_fill: bool) -> Result<RawSeries> {
    let text = std::fs::read_to_string(path)?;
    parse_series(&text, forward_fill)
}

pub fn parse_series(text: &str, forward_fill: bool) -> Result<RawSeries> {
    let mut values: Vec<f64> = Vec::new();
    let mut cols = 0usize;
    let mut rows = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        if rows == 0 {
            cols = cells.len();
        } else if cells.len() != cols {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("ragged row: expected {cols} cells, found {}", cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            let parsed: std::result::Result<f64, _> = cell.parse();
            let v = match parsed {
                Ok(v) if v.is_finite() => v,
                Ok(_) if forward_fill && rows > 0 => values[(rows - 1) * cols + j],
                Ok(v) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("non-finite value `{v}` in column {}", j + 1),
                    })
                }
                Err(_) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("non-numeric cell `{cell}` in column {}", j + 1),
                    })
                }
            };
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { line: 1, message: "empty file".into() });
    }
    RawSeries::new(values, rows, cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorizonMode {
    /// Targets are the next Q rows after the window.
    MultiStep,
    /// The target is the single row `horizon` steps after the window end.
    SingleStep { horizon: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Per-node z-score fitted on training rows.
    ZScore,
    /// Per-node division by the training-range max absolute value.
    MaxAbs,
}

impl Normalization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Normalization::ZScore),
            "max_abs" => Ok(Normalization::MaxAbs),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Normalization::ZScore => "zscore",
            Normalization::MaxAbs => "max_abs",
        }
    }
}

/// Per-node affine normalization: `normalized = (x - mean) / scale`.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn normalize(&self, node: usize, v: f64) -> f64 {
        (v - self.mean[node]) / self.scale[node]
    }

    pub fn denormalize(&self, node: usize, v: f64) -> f64 {
        v * self.scale[node] + self.mean[node]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub raw: RawSeries,
    pub input_len: usize,
    /// Number of target steps per sample (Q, or 1 in single-step mode).
    pub target_len: usize,
    pub horizon_mode: HorizonMode,
    pub in_dim: usize,
    pub stats: NormStats,
    pub train_ids: Vec<usize>,
    pub valid_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    /// Row counts of the train and valid ranges.
    pub train_rows: usize,
    pub valid_rows: usize,
    pub time_of_day: bool,
    pub steps_per_day: usize,
}

impl WindowedDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        raw: RawSeries,
        input_len: usize,
        target_len: usize,
        horizon_mode: HorizonMode,
        train_frac: f64,
        valid_frac: f64,
        normalization: Normalization,
        time_of_day: bool,
        steps_per_day: usize,
    ) -> Result<WindowedDataset> {
        if input_len == 0 {
            return Err(Error::Config("input_len must be >= 1".into()));
        }
        let target_len = match horizon_mode {
            HorizonMode::MultiStep => target_len,
            HorizonMode::SingleStep { horizon } => {
                if horizon == 0 {
                    return Err(Error::Config("horizon must be >= 1".into()));
                }
                1
            }
        };
        if target_len == 0 {
            return Err(Error::Config("output_len must be >= 1".into()));
        }
        let t = raw.rows;
        let needed = input_len + Self::max_target_offset(horizon_mode, target_len);
        if t < needed + 1 {
            return Err(Error::Length { required: needed + 1, got: t });
        }
        let train_rows = (train_frac * t as f64).floor() as usize;
        let valid_rows = (valid_frac * t as f64).floor() as usize;
        if train_rows < 1 || train_rows + valid_rows > t {
            return Err(Error::Config(format!(
                "split fractions leave no data: train_rows={train_rows}, valid_rows={valid_rows}, T={t}"
            )));
        }

        // Normalization statistics from training rows only.
        let n = raw.cols;
        let mut mean = vec![0.0; n];
        let mut scale = vec![1.0; n];
        match normalization {
            Normalization::ZScore => {
                for v in 0..n {
                    let mut m = 0.0;
                    for r in 0..train_rows {
                        m += raw.get(r, v);
                    }
                    m /= train_rows as f64;
                    let mut var = 0.0;
                    for r in 0..train_rows {
                        let d = raw.get(r, v) - m;
                        var += d * d;
                    }
                    var /= train_rows as f64;
                    mean[v] = m;
                    let sd = var.sqrt();
                    scale[v] = if sd < 1e-8 { 1.0 } else { sd };
                }
            }
            Normalization::MaxAbs => {
                for v in 0..n {
                    let mut mx: f64 = 0.0;
                    for r in 0..train_rows {
                        mx = mx.max(raw.get(r, v).abs());
                    }
                    scale[v] = if mx < 1e-12 { 1.0 } else { mx };
                }
            }
        }
        let stats = NormStats { mean, scale };

        // Enumerate windows; membership by the split containing all targets.
        let mut train_ids = Vec::new();
        let mut valid_ids = Vec::new();
        let mut test_ids = Vec::new();
        let max_start = t - input_len - Self::max_target_offset(horizon_mode, target_len);
        let bound = |row: usize| -> usize {
            if row < train_rows {
                0
            } else if row < train_rows + valid_rows {
                1
            } else {
                2
            }
        };
        for i in 0..=max_start {
            let (first, last) = Self::target_rows(i, input_len, horizon_mode, target_len);
            if bound(first) != bound(last) {
                continue; // targets straddle a split boundary
            }
            match bound(first) {
                0 => train_ids.push(i),
                1 => valid_ids.push(i),
                _ => test_ids.push(i),
            }
        }

        Ok(WindowedDataset {
            raw,
            input_len,
            target_len,
            horizon_mode,
            in_dim: if time_of_day { 2 } else { 1 },
            stats,
            train_ids,
            valid_ids,
            test_ids,
            train_rows,
            valid_rows,
            time_of_day,
            steps_per_day,
        })
    }

    fn max_target_offset(mode: HorizonMode, target_len: usize) -> usize {
        match mode {
            HorizonMode::MultiStep => target_len,
            HorizonMode::SingleStep { horizon } => horizon,
        }
    }

    /// First and last target row of the window starting at `i`.
    pub fn target_rows(
        i: usize,
        input_len: usize,
        mode: HorizonMode,
        target_len: usize,
    ) -> (usize, usize) {
        match mode {
            HorizonMode::MultiStep => (i + input_len, i + input_len + target_len - 1),
            HorizonMode::SingleStep { horizon } => {
                let r = i + input_len - 1 + horizon;
                (r, r)
            }
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.raw.cols
    }

    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_ids,
            Split::Valid => &self.valid_ids,
            Split::Test => &self.test_ids,
        }
    }

    /// Materialize a batch. X is normalized, `[b, in_dim, n, P]` flat;
    /// Y is raw-unit targets, `[b, target_len, n]` flat.
    pub fn assemble(&self, ids: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let threads = worker_threads().min(ids.len().max(1));
        let b = ids.len();
        let n = self.num_nodes();
        let p = self.input_len;
        let q = self.target_len;
        let d = self.in_dim;
        let mut x = vec![0.0; b * d * n * p];
        let mut y = vec![0.0; b * q * n];
        let x_item = d * n * p;
        let y_item = q * n;
        let fill = |bi: usize, xs: &mut [f64], ys: &mut [f64]| {
            let start = ids[bi];
            for v in 0..n {
                for t in 0..p {
                    xs[(v * p) + t] = self.stats.normalize(v, self.raw.get(start + t, v));
                }
            }
            if d == 2 {
                for v in 0..n {
                    for t in 0..p {
                        let row = start + t;
                        xs[n * p + v * p + t] =
                            (row % self.steps_per_day) as f64 / self.steps_per_day as f64;
                    }
                }
            }
            match self.horizon_mode {
                HorizonMode::MultiStep => {
                    for step in 0..q {
                        for v in 0..n {
                            ys[step * n + v] = self.raw.get(start + p + step, v);
                        }
                    }
                }
                HorizonMode::SingleStep { horizon } => {
                    for v in 0..n {
                        ys[v] = self.raw.get(start + p - 1 + horizon, v);
                    }
                }
            }
        };
        if threads <= 1 {
            for (bi, (xs, ys)) in x.chunks_mut(x_item).zip(y.chunks_mut(y_item)).enumerate() {
                fill(bi, xs, ys);
            }
        } else {
            let x_chunks: Vec<&mut [f64]> = x.chunks_mut(x_item).collect();
            let y_chunks: Vec<&mut [f64]> = y.chunks_mut(y_item).collect();
            let jobs: Vec<(usize, (&mut [f64], &mut [f64]))> =
                x_chunks.into_iter().zip(y_chunks).enumerate().collect();
            let per = jobs.len().div_ceil(threads);
            let mut slices: Vec<Vec<(usize, (&mut [f64], &mut [f64]))>> = Vec::new();
            let mut jobs = jobs;
            while !jobs.is_empty() {
                let rest = jobs.split_off(jobs.len().min(per));
                slices.push(std::mem::replace(&mut jobs, rest));
            }
            std::thread::scope(|scope| {
                for chunk in slices {
                    scope.spawn(move || {
                        for (bi, (xs, ys)) in chunk {
                            fill(bi, xs, ys);
                        }
                    });
                }
            });
        }
        (x, y)
    }

    /// De-normalize a prediction tensor laid out `[b, steps, n]` in place.
    pub fn denormalize_predictions(&self, pred: &mut [f64], steps: usize) {
        let n = self.num_nodes();
        for chunk in pred.chunks_mut(steps * n) {
            for s in 0..steps {
                for v in 0..n {
                    chunk[s * n + v] = self.stats.denormalize(v, chunk[s * n + v]);
                }
            }
        }
    }
}

/// Worker thread cap for batch assembly, from `MTGNN_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("MTGNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(t: usize, n: usize) -> RawSeries {
        let values = (0..t * n).map(|i| i as f64).collect();
        RawSeries::new(values, t, n).unwrap()
    }

    #[test]
    fn parse_small_table() {
        let s = parse_series("1,2\n3,4\n5,6\n", false).unwrap();
        assert_eq!((s.rows, s.cols), (3, 2));
        assert_eq!(s.get(2, 1), 6.0);
        // Whitespace flavor.
        let w = parse_series("1 2\n3 4\n", false).unwrap();
        assert_eq!((w.rows, w.cols), (2, 2));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "1,2\n3,4\n5,6\n7,8\n9,10\n11,12\n13,oops\n";
        match parse_series(text, false) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 7);
                assert!(message.contains("oops"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_series("1,2\n3\n", false),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_series("", false), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn forward_fill_replaces_nan() {
        let s = parse_series("1,2\nnan,4\n", true).unwrap();
        assert_eq!(s.get(1, 0), 1.0);
        assert!(matches!(parse_series("1,2\nnan,4\n", false), Err(Error::Parse { line: 2, .. })));
    }

    /// Exhaustive enumeration oracle for window counts and split membership.
    fn enumerate_windows(
        t: usize,
        p: usize,
        mode: HorizonMode,
        q: usize,
        train_rows: usize,
        valid_rows: usize,
    ) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..t {
            let (first, last) = WindowedDataset::target_rows(i, p, mode, q);
            if last >= t {
                continue;
            }
            let split_of = |r: usize| {
                if r < train_rows {
                    0
                } else if r < train_rows + valid_rows {
                    1
                } else {
                    2
                }
            };
            if split_of(first) != split_of(last) {
                continue;
            }
            match split_of(first) {
                0 => out.0.push(i),
                1 => out.1.push(i),
                _ => out.2.push(i),
            }
        }
        out
    }

    #[test]
    fn window_counts_match_enumeration_oracle() {
        // T=10, P=3, single-step horizon 1, splits 60/20/20.
        let ds = WindowedDataset::build(
            toy(10, 2),
            3,
            1,
            HorizonMode::SingleStep { horizon: 1 },
            0.6,
            0.2,
            Normalization::ZScore,
            false,
            288,
        )
        .unwrap();
        let (tr, va, te) = enumerate_windows(10, 3, HorizonMode::SingleStep { horizon: 1 }, 1, 6, 2);
        assert_eq!(ds.train_ids, tr);
        assert_eq!(ds.valid_ids, va);
        assert_eq!(ds.test_ids, te);

        // Multi-step variant.
        let ds2 = WindowedDataset::build(
            toy(30, 2),
            4,
            3,
            HorizonMode::MultiStep,
            0.6,
            0.2,
            Normalization::ZScore,
            false,
            288,
        )
        .unwrap();
        let (tr2, va2, te2) = enumerate_windows(30, 4, HorizonMode::MultiStep, 3, 18, 6);
        assert_eq!(ds2.train_ids, tr2);
        assert_eq!(ds2.valid_ids, va2);
        assert_eq!(ds2.test_ids, te2);
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let raw = RawSeries::new(vec![5.0; 20], 10, 2).unwrap();
        let ds = WindowedDataset::build(
            raw,
            3,
            1,
            HorizonMode::MultiStep,
            0.6,
            0.2,
            Normalization::ZScore,
            false,
            288,
        )
        .unwrap();
        let (x, y) = ds.assemble(&ds.train_ids);
        assert!(x.iter().all(|&v| v == 0.0), "std guard keeps inputs finite and zero");
        assert!(y.iter().all(|&v| v == 5.0), "targets stay raw");
    }

    #[test]
    fn metr_la_shaped_batch() {
        let t = 60;
        let n = 207;
        let raw = toy(t, n);
        let ds = WindowedDataset::build(
            raw,
            12,
            12,
            HorizonMode::MultiStep,
            0.7,
            0.2,
            Normalization::ZScore,
            true,
            288,
        )
        .unwrap();
        assert_eq!(ds.in_dim, 2);
        let ids = &ds.train_ids[..3];
        let (x, y) = ds.assemble(ids);
        assert_eq!(x.len(), 3 * 2 * 207 * 12);
        assert_eq!(y.len(), 3 * 12 * 207);
        // Time-of-day channel lives in [0, 1).
        let tod = &x[2 * 207 * 12 - 207 * 12..2 * 207 * 12];
        assert!(tod.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn no_leakage_from_test_rows() {
        let mut vals: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let ds1 = WindowedDataset::build(
            RawSeries::new(vals.clone(), 20, 2).unwrap(),
            3,
            2,
            HorizonMode::MultiStep,
            0.6,
            0.2,
            Normalization::ZScore,
            false,
            288,
        )
        .unwrap();
        // Perturb a test-range row (row 18) and rebuild.
        vals[18 * 2] += 1e6;
        let ds2 = WindowedDataset::build(
            RawSeries::new(vals, 20, 2).unwrap(),
            3,
            2,
            HorizonMode::MultiStep,
            0.6,
            0.2,
            Normalization::ZScore,
            false,
            288,
        )
        .unwrap();
        assert_eq!(ds1.stats.mean, ds2.stats.mean);
        assert_eq!(ds1.stats.scale, ds2.stats.scale);
    }

    #[test]
    fn multi_step_targets_follow_window() {
        let ds = WindowedDataset::build(
            toy(20, 2),
            3,
            2,
            HorizonMode::MultiStep,
            0.6,
            0.2,
            Normalization::ZScore,
            false,
            288,
        )
        .unwrap();
        for &i in ds.ids(Split::Train) {
            let (x, y) = ds.assemble(&[i]);
            // Y's first step is the row immediately after X's last step.
            let last_x_raw = ds.raw.get(i + 2, 0);
            let first_y = y[0];
            assert_eq!(first_y, ds.raw.get(i + 3, 0));
            // And the normalized input round-trips to the raw value.
            let de = ds.stats.denormalize(0, x[2]);
            assert!((de - last_x_raw).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_round_trip() {
        let raw = toy(30, 3);
        for norm in [Normalization::ZScore, Normalization::MaxAbs] {
            let ds = WindowedDataset::build(
                raw.clone(),
                4,
                2,
                HorizonMode::MultiStep,
                0.6,
                0.2,
                norm,
                false,
                288,
            )
            .unwrap();
            for v in 0..3 {
                for t in 0..30 {
                    let x = raw.get(t, v);
                    let back = ds.stats.denormalize(v, ds.stats.normalize(v, x));
                    assert!((back - x).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn too_short_series_reports_requirement() {
        assert!(matches!(
            WindowedDataset::build(
                toy(5, 1),
                4,
                3,
                HorizonMode::MultiStep,
                0.6,
                0.2,
                Normalization::ZScore,
                false,
                288,
            ),
            Err(Error::Length { .. })
        ));
    }
}
