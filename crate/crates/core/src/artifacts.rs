//! Run artifacts: CSV tables and the line plots rendered from them.
//!
//! Three tables per run directory — `metrics.csv` (per-epoch eval metrics),
//! `weights.csv` (threshold-weight trajectories), `summary.csv` (one row per
//! variant) — plus an SVG line plot per trajectory table. Plots are rendered
//! by parsing the CSVs back in, so a plot can only ever show series that the
//! tables actually contain; each curve carries a `data-series="group/column"`
//! attribute for machine consumption.

use std::fmt::Write as _;
use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::VariantRun;

/// Column layout of `metrics.csv`.
pub const METRICS_HEADER: &str = "epoch,split,variant,macro_f1,micro_f1,bce,positive_ratio";
/// Column layout of `weights.csv`.
pub const WEIGHTS_HEADER: &str = "epoch,variant,alpha_mean,alpha_std,beta_mean,beta_std,lambda";
/// Column layout of `summary.csv`.
pub const SUMMARY_HEADER: &str =
    "variant,best_epoch,epochs_run,macro_f1,micro_f1,bce,positive_ratio";

/// Write the full artifact set for one or more completed runs into
/// `out_dir` (created if missing). Returns the paths written.
pub fn emit_artifacts(runs: &[VariantRun], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    if runs.is_empty() {
        return Err(Error::Empty {
            what: "run records",
        });
    }
    if runs.iter().any(|r| r.history.is_empty()) {
        return Err(Error::Empty {
            what: "training history",
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let metrics_path = out_dir.join("metrics.csv");
    let weights_path = out_dir.join("weights.csv");
    let summary_path = out_dir.join("summary.csv");
    write_metrics_csv(runs, &metrics_path)?;
    write_weights_csv(runs, &weights_path)?;
    write_summary_csv(runs, &summary_path)?;

    // Plots are rendered from the emitted files, not the in-memory records.
    let metrics_svg = out_dir.join("metrics.svg");
    render_line_plot(
        &read_csv(&metrics_path)?,
        "epoch",
        "variant",
        &["macro_f1", "micro_f1", "bce", "positive_ratio"],
        "evaluation metrics by epoch",
        &metrics_svg,
    )?;
    let weights_svg = out_dir.join("weights.svg");
    render_line_plot(
        &read_csv(&weights_path)?,
        "epoch",
        "variant",
        &["alpha_mean", "alpha_std", "beta_mean", "beta_std", "lambda"],
        "threshold weights by epoch",
        &weights_svg,
    )?;

    Ok(vec![
        metrics_path,
        weights_path,
        summary_path,
        metrics_svg,
        weights_svg,
    ])
}

fn open(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_metrics_csv(runs: &[VariantRun], path: &Path) -> Result<()> {
    let mut w = open(path)?;
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{METRICS_HEADER}").map_err(io_err)?;
    for run in runs {
        for r in &run.history {
            writeln!(
                w,
                "{},eval,{},{},{},{},{}",
                r.epoch, run.variant, r.eval_macro_f1, r.eval_micro_f1, r.eval_bce,
                r.eval_positive_ratio
            )
            .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn write_weights_csv(runs: &[VariantRun], path: &Path) -> Result<()> {
    let mut w = open(path)?;
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{WEIGHTS_HEADER}").map_err(io_err)?;
    for run in runs {
        for r in &run.history {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch, run.variant, r.alpha_mean, r.alpha_std, r.beta_mean, r.beta_std, r.lambda
            )
            .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn write_summary_csv(runs: &[VariantRun], path: &Path) -> Result<()> {
    let mut w = open(path)?;
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{SUMMARY_HEADER}").map_err(io_err)?;
    for run in runs {
        let last_epoch = run.history.last().map(|r| r.epoch).unwrap_or(0);
        let f = &run.final_record;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            run.variant,
            run.best_epoch,
            last_epoch,
            f.eval_macro_f1,
            f.eval_micro_f1,
            f.eval_bce,
            f.eval_positive_ratio
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// A parsed CSV file: header names plus string cells, no quoting dialect
/// (none of the emitted tables need one).
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column named {name:?}")))
    }
}

/// Read one of the emitted CSV files back in.
pub fn read_csv(path: impl AsRef<Path>) -> Result<CsvTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.split(',').map(str::to_owned).collect::<Vec<_>>(),
        None => return Err(Error::Empty { what: "csv file" }),
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_owned).collect();
        if row.len() != header.len() {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected {} fields, found {}", header.len(), row.len()),
            ));
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

const PLOT_WIDTH: f64 = 1000.0;
const PLOT_HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 250.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#ad494a",
];

struct Series {
    key: String,
    points: Vec<(f64, f64)>,
}

/// Render one line plot from a parsed CSV. One curve per (group, column)
/// pair, keyed `group/column` in its `data-series` attribute; all curves
/// share the axes.
pub fn render_line_plot(
    table: &CsvTable,
    x_col: &str,
    group_col: &str,
    y_cols: &[&str],
    title: &str,
    path: &Path,
) -> Result<()> {
    let xi = table.column_index(x_col)?;
    let gi = table.column_index(group_col)?;
    let yis = y_cols
        .iter()
        .map(|c| table.column_index(c))
        .collect::<Result<Vec<_>>>()?;
    if table.rows.is_empty() {
        return Err(Error::Empty { what: "csv rows" });
    }

    let mut groups: Vec<String> = Vec::new();
    for row in &table.rows {
        if !groups.contains(&row[gi]) {
            groups.push(row[gi].clone());
        }
    }

    let mut series: Vec<Series> = Vec::new();
    for group in &groups {
        for (col, &yi) in y_cols.iter().zip(&yis) {
            let mut points = Vec::new();
            for row in table.rows.iter().filter(|r| &r[gi] == group) {
                let x: f64 = parse_cell(path, &row[xi], x_col)?;
                let y: f64 = parse_cell(path, &row[yi], col)?;
                points.push((x, y));
            }
            series.push(Series {
                key: format!("{group}/{col}"),
                points,
            });
        }
    }

    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let inner_w = PLOT_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let inner_h = PLOT_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - x_min) / x_span * inner_w;
    let py = |y: f64| PLOT_HEIGHT - MARGIN_BOTTOM - (y - y_min) / y_span * inner_h;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {PLOT_WIDTH} {PLOT_HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = write!(
        svg,
        "  <text x=\"{MARGIN_LEFT}\" y=\"24\" font-size=\"16\">{title}</text>\n"
    );
    // Axes with min/max tick labels.
    let (x0, y0) = (MARGIN_LEFT, PLOT_HEIGHT - MARGIN_BOTTOM);
    let _ = write!(
        svg,
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"#333\"/>\n",
        MARGIN_LEFT + inner_w
    );
    let _ = write!(
        svg,
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{MARGIN_TOP}\" stroke=\"#333\"/>\n"
    );
    let _ = write!(
        svg,
        "  <text x=\"{x0}\" y=\"{}\">{x_min}</text>\n",
        y0 + 16.0
    );
    let _ = write!(
        svg,
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x_max}</text>\n",
        MARGIN_LEFT + inner_w,
        y0 + 16.0
    );
    let _ = write!(
        svg,
        "  <text x=\"{}\" y=\"{y0}\" text-anchor=\"end\">{y_min:.4}</text>\n",
        x0 - 6.0
    );
    let _ = write!(
        svg,
        "  <text x=\"{}\" y=\"{MARGIN_TOP}\" text-anchor=\"end\">{y_max:.4}</text>\n",
        x0 - 6.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for &(x, y) in &s.points {
            let _ = write!(points, "{:.2},{:.2} ", px(x), py(y));
        }
        let _ = write!(
            svg,
            "  <polyline data-series=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.5\" points=\"{}\"/>\n",
            s.key,
            points.trim_end()
        );
        let legend_y = MARGIN_TOP + 14.0 * i as f64;
        let _ = write!(
            svg,
            "  <text x=\"{}\" y=\"{legend_y}\" fill=\"{color}\">{}</text>\n",
            PLOT_WIDTH - MARGIN_RIGHT + 20.0,
            s.key
        );
    }
    svg.push_str("</svg>\n");

    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn parse_cell(path: &Path, cell: &str, col: &str) -> Result<f64> {
    cell.parse::<f64>().map_err(|_| {
        Error::InvalidArgument(format!(
            "{}: column {col:?} holds non-numeric value {cell:?}",
            path.display()
        ))
    })
}

/// The `data-series` keys present in an SVG produced by
/// [`render_line_plot`], in document order.
pub fn plot_series_keys(svg_path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = svg_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keys = Vec::new();
    for chunk in text.split("data-series=\"").skip(1) {
        match chunk.split('"').next() {
            Some(key) => keys.push(key.to_owned()),
            None => {
                return Err(Error::parse(path, 0, "unterminated data-series attribute"));
            }
        }
    }
    Ok(keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossConfig;
    use crate::model::{init_mlp, Checkpoint, CHECKPOINT_VERSION};
    use crate::threshold::{init_params, Variant};
    use crate::trainer::EpochRecord;

    fn record(epoch: usize) -> EpochRecord {
        let e = epoch as f64;
        EpochRecord {
            epoch,
            train_total: 1.0 / e,
            train_bce: 0.9 / e,
            train_margin: 0.1 / e,
            train_macro_f1: 0.3 + 0.01 * e,
            eval_macro_f1: 0.5 + 0.01 * e,
            eval_micro_f1: 0.6 + 0.01 * e,
            eval_bce: 1.0 / (e + 1.0),
            eval_positive_ratio: 0.02 * e,
            alpha_mean: 1.0 - 0.001 * e,
            alpha_std: 0.001 * e,
            beta_mean: 1.0 + 0.002 * e,
            beta_std: 0.002 * e,
            lambda: 0.5 + 0.003 * e,
        }
    }

    fn run(variant: Variant, n_epochs: usize, best_epoch: usize) -> VariantRun {
        let history: Vec<EpochRecord> = (1..=n_epochs).map(record).collect();
        let final_record = history[best_epoch - 1].clone();
        VariantRun {
            variant,
            config_hash: "cafe".into(),
            history,
            best_epoch,
            final_record,
            checkpoint: Checkpoint {
                version: CHECKPOINT_VERSION,
                variant,
                config_hash: "cafe".into(),
                epsilon: 1e-12,
                knn_k: 10,
                loss: LossConfig::default(),
                mlp: init_mlp(2, 2, 2, 0),
                thresholds: init_params(2, 0),
                idf: vec![0.0, 0.0],
                reference: None,
            },
            stopped_early: false,
            eval_zero_norm_rows: 0,
        }
    }

    #[test]
    fn artifact_set_is_complete_and_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![run(Variant::Adaptive, 3, 3), run(Variant::Static, 3, 2)];
        let paths = emit_artifacts(&runs, dir.path()).unwrap();
        assert_eq!(paths.len(), 5);
        for path in &paths {
            assert!(path.exists(), "missing artifact {path:?}");
        }

        let metrics = read_csv(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.header.join(","), METRICS_HEADER);
        assert_eq!(metrics.rows.len(), 6); // two variants x three epochs
        let split = metrics.column_index("split").unwrap();
        assert!(metrics.rows.iter().all(|r| r[split] == "eval"));
        let variant = metrics.column_index("variant").unwrap();
        assert_eq!(metrics.rows[0][variant], "adaptive");
        assert_eq!(metrics.rows[3][variant], "static");
        for row in &metrics.rows {
            for col in ["macro_f1", "micro_f1", "bce", "positive_ratio"] {
                let idx = metrics.column_index(col).unwrap();
                assert!(row[idx].parse::<f64>().is_ok(), "bad cell {:?}", row[idx]);
            }
        }

        let weights = read_csv(dir.path().join("weights.csv")).unwrap();
        assert_eq!(weights.header.join(","), WEIGHTS_HEADER);
        assert_eq!(weights.rows.len(), 6);

        let summary = read_csv(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.header.join(","), SUMMARY_HEADER);
        assert_eq!(summary.rows.len(), 2);
    }

    #[test]
    fn a_ten_epoch_run_yields_ten_metric_rows() {
        let dir = tempfile::tempdir().unwrap();
        emit_artifacts(&[run(Variant::Adaptive, 10, 10)], dir.path()).unwrap();
        let metrics = read_csv(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.rows.len(), 10);
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.lines().count(), 11); // header + one row per epoch
    }

    #[test]
    fn csv_floats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut custom = run(Variant::Adaptive, 1, 1);
        custom.history[0].eval_macro_f1 = 1.0 / 3.0;
        custom.history[0].eval_bce = 0.123_456_789_012_345_6;
        custom.final_record = custom.history[0].clone();
        emit_artifacts(&[custom], dir.path()).unwrap();

        let metrics = read_csv(dir.path().join("metrics.csv")).unwrap();
        let macro_idx = metrics.column_index("macro_f1").unwrap();
        let bce_idx = metrics.column_index("bce").unwrap();
        let macro_val: f64 = metrics.rows[0][macro_idx].parse().unwrap();
        let bce_val: f64 = metrics.rows[0][bce_idx].parse().unwrap();
        assert_eq!(macro_val, 1.0 / 3.0);
        assert_eq!(bce_val, 0.123_456_789_012_345_6);
    }

    #[test]
    fn summary_reports_the_best_epoch_not_the_last() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![run(Variant::KnnOnly, 3, 2)];
        emit_artifacts(&runs, dir.path()).unwrap();
        let summary = read_csv(dir.path().join("summary.csv")).unwrap();
        let row = &summary.rows[0];
        assert_eq!(row[summary.column_index("variant").unwrap()], "knn_only");
        assert_eq!(row[summary.column_index("best_epoch").unwrap()], "2");
        assert_eq!(row[summary.column_index("epochs_run").unwrap()], "3");
        let macro_idx = summary.column_index("macro_f1").unwrap();
        let expected = record(2).eval_macro_f1;
        assert_eq!(row[macro_idx].parse::<f64>().unwrap(), expected);
    }

    #[test]
    fn plots_cover_every_variant_metric_pair() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![run(Variant::Adaptive, 2, 2), run(Variant::Static, 2, 1)];
        emit_artifacts(&runs, dir.path()).unwrap();

        let keys = plot_series_keys(dir.path().join("metrics.svg")).unwrap();
        let expected: Vec<String> = ["adaptive", "static"]
            .iter()
            .flat_map(|v| {
                ["macro_f1", "micro_f1", "bce", "positive_ratio"]
                    .iter()
                    .map(move |c| format!("{v}/{c}"))
            })
            .collect();
        assert_eq!(keys, expected);

        let keys = plot_series_keys(dir.path().join("weights.svg")).unwrap();
        assert_eq!(keys.len(), 2 * 5);
        assert!(keys.contains(&"adaptive/lambda".to_string()));
        assert!(keys.contains(&"static/beta_std".to_string()));
    }

    #[test]
    fn emitting_twice_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![run(Variant::Adaptive, 4, 4)];
        emit_artifacts(&runs, dir.path()).unwrap();
        let first: Vec<Vec<u8>> = ["metrics.csv", "weights.csv", "summary.csv", "metrics.svg"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        emit_artifacts(&runs, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = ["metrics.csv", "weights.csv", "summary.csv", "metrics.svg"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        assert_eq!(first, second);
    }

    #[test]
    fn empty_run_sets_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_artifacts(&[], dir.path()),
            Err(Error::Empty { .. })
        ));
        let mut hollow = run(Variant::Adaptive, 1, 1);
        hollow.history.clear();
        assert!(matches!(
            emit_artifacts(&[hollow], dir.path()),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn ragged_csv_rows_are_rejected_with_a_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "a,b,c\n1,2,3\n4,5\n").unwrap();
        match read_csv(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("expected 3"));
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_plot_columns_are_rejected() {
        let table = CsvTable {
            header: vec!["epoch".into(), "variant".into(), "f1".into()],
            rows: vec![vec!["1".into(), "adaptive".into(), "0.5".into()]],
        };
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plot.svg");
        assert!(render_line_plot(&table, "epoch", "variant", &["missing"], "t", &out).is_err());
        assert!(render_line_plot(&table, "epoch", "variant", &["f1"], "t", &out).is_ok());

        let text_cells = CsvTable {
            header: table.header.clone(),
            rows: vec![vec!["1".into(), "adaptive".into(), "not-a-number".into()]],
        };
        assert!(matches!(
            render_line_plot(&text_cells, "epoch", "variant", &["f1"], "t", &out),
            Err(Error::InvalidArgument(_))
        ));

        let no_rows = CsvTable {
            header: table.header.clone(),
            rows: vec![],
        };
        assert!(matches!(
            render_line_plot(&no_rows, "epoch", "variant", &["f1"], "t", &out),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn empty_csv_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Empty { .. })));
    }
}
