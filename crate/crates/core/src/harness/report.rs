//! CSV logs, comparison table and SVG figures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::ensemble::Strategy;
use crate::error::{Error, Result};
use crate::plant::SUPPLY_UPPER;

use super::{Controller, SimulationLog};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub controller: Controller,
    pub cost: f64,
    pub violations: f64,
    /// Mean and standard deviation of the MPC solve time, s; `None` for RB.
    pub solve_time: Option<(f64, f64)>,
    pub faults: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn from_logs(logs: &[SimulationLog]) -> Self {
        let rows = logs
            .iter()
            .map(|log| {
                let times = log.solve_times();
                let solve_time = (!times.is_empty()).then(|| {
                    let m = times.len() as f64;
                    let mean = times.iter().sum::<f64>() / m;
                    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / m;
                    (mean, var.sqrt())
                });
                ComparisonRow {
                    controller: log.controller,
                    cost: log.economic_cost(),
                    violations: log.violations(),
                    solve_time,
                    faults: log.faults(),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, controller: Controller) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.controller == controller)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record(["strategy", "J", "V", "t_mean", "t_std"])
            .map_err(|e| Error::format(path, e))?;
        for r in &self.rows {
            let (m, s) = r
                .solve_time
                .map_or(("-".to_string(), "-".to_string()), |(m, s)| (m.to_string(), s.to_string()));
            w.write_record([r.controller.tag().to_string(), r.cost.to_string(), r.violations.to_string(), m, s])
                .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fixed-width text rendering: one column per strategy, rows J, V, t.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "");
        for r in &self.rows {
            let _ = write!(out, "{:>18}", r.controller.label());
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "J [EUR]");
        for r in &self.rows {
            let _ = write!(out, "{:>18.2}", r.cost);
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "V");
        for r in &self.rows {
            let _ = write!(out, "{:>18.3}", r.violations);
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "t [s]");
        for r in &self.rows {
            match r.solve_time {
                Some((m, s)) => {
                    let _ = write!(out, "{:>18}", format!("{m:.3} ± {s:.3}"));
                }
                None => {
                    let _ = write!(out, "{:>18}", "-");
                }
            }
        }
        out.push('\n');
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Writes the per-step log with a fixed column order. Wall-clock times are
/// kept out of it (see [`write_timing_csv`]) so equal runs give equal files.
pub fn write_log_csv(log: &SimulationLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = log.n_experts;
    let first = log.records.first();
    let nx_plant = first.map_or(0, |r| r.state.len());
    let hidden: Vec<usize> = first.map_or(vec![0; n], |r| r.estimates.iter().map(Vec::len).collect());
    let nc = first.map_or(2, |r| r.control.len());
    let n_mhe = first.map_or(0, |r| r.mhe.len());

    let mut header: Vec<String> = vec!["step".into()];
    header.extend((0..nx_plant).map(|i| format!("state_{i}")));
    header.extend(log.output_names.iter().cloned());
    header.extend(log.input_names.iter().cloned());
    header.extend(["price", "supply_lower", "return_lower"].map(String::from));
    header.extend((0..n).map(|i| format!("lambda_{i}")));
    for i in 0..n {
        header.extend((0..hidden[i]).map(|j| format!("x{i}_{j}")));
    }
    for i in 0..n {
        header.extend(log.output_names.iter().map(|c| format!("yhat{i}_{c}")));
    }
    header.extend((0..n).map(|i| format!("e_{i}")));
    header.extend((0..n).map(|i| format!("e_open_loop_{i}")));
    header.extend(log.output_names.iter().map(|c| format!("predicted_{c}")));
    header.extend(["mpc_objective", "mpc_iterations", "mpc_converged"].map(String::from));
    for i in 0..n_mhe {
        header.extend([
            format!("mhe{i}_residual"),
            format!("mhe{i}_noise"),
            format!("mhe{i}_iterations"),
        ]);
    }
    header.push("fault".into());
    debug_assert_eq!(nc + log.records.first().map_or(0, |r| r.disturbance.len()), log.input_names.len().max(nc));

    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    let ny = log.output_names.len();
    for r in &log.records {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(r.step.to_string());
        row.extend(r.state.iter().map(f64::to_string));
        row.extend(r.output.iter().map(f64::to_string));
        row.extend(r.control.iter().map(f64::to_string));
        row.extend(r.disturbance.iter().map(f64::to_string));
        row.extend([r.price, r.supply_lower, r.return_lower].map(|v| v.to_string()));
        match &r.weights {
            Some(l) => row.extend(l.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), n)),
        }
        for x in &r.estimates {
            row.extend(x.iter().map(f64::to_string));
        }
        for y in &r.predictions {
            row.extend(y.iter().map(f64::to_string));
        }
        row.extend(r.errors.iter().map(f64::to_string));
        row.extend(r.open_loop_errors.iter().map(f64::to_string));
        match &r.predicted_output {
            Some(y) => row.extend(y.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), ny)),
        }
        row.push(opt(r.mpc.as_ref().map(|m| m.objective)));
        row.push(r.mpc.as_ref().map_or(String::new(), |m| m.iterations.to_string()));
        row.push(r.mpc.as_ref().map_or(String::new(), |m| m.converged.to_string()));
        for m in &r.mhe {
            row.extend([m.residual_norm.to_string(), m.noise_norm.to_string(), m.iterations.to_string()]);
        }
        row.push(r.fault.to_string());
        w.write_record(&row).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-step wall-clock solve times.
pub fn write_timing_csv(log: &SimulationLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n_mhe = log.records.first().map_or(0, |r| r.mhe.len());
    let mut header = vec!["step".to_string(), "mpc_time".to_string()];
    header.extend((0..n_mhe).map(|i| format!("mhe{i}_time")));
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for r in &log.records {
        let mut row = vec![r.step.to_string(), opt(r.mpc.as_ref().map(|m| m.solve_time))];
        row.extend(r.mhe.iter().map(|m| m.solve_time.to_string()));
        w.write_record(&row).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `log_<tag>.csv`, `timing_<tag>.csv` and `fig_temps_<tag>.svg` for
/// every log, plus `table.csv`, `table.txt`, `fig_scenario.svg` and
/// `fig_err_<i>.svg`. Nothing is written for an empty log list.
pub fn export_artifacts(logs: &[SimulationLog], table: &ComparisonTable, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if logs.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for log in logs {
        let tag = log.controller.tag();
        let p = dir.join(format!("log_{tag}.csv"));
        write_log_csv(log, &p)?;
        written.push(p);
        let p = dir.join(format!("timing_{tag}.csv"));
        write_timing_csv(log, &p)?;
        written.push(p);
        let p = dir.join(format!("fig_temps_{tag}.svg"));
        plot_temperatures(log, &p)?;
        written.push(p);
    }
    written.extend(export_comparison(table, dir)?);
    let p = dir.join("fig_scenario.svg");
    plot_scenario(&logs[0], &p)?;
    written.push(p);
    // error figure from the MD-2 run when there is one
    let reference = logs
        .iter()
        .find(|l| l.controller == Controller::Mpc(Strategy::Md2))
        .unwrap_or(&logs[logs.len() - 1]);
    for i in 0..reference.n_experts {
        let p = dir.join(format!("fig_err_{i}.svg"));
        plot_errors(reference, i, &p)?;
        written.push(p);
    }
    Ok(written)
}

/// `table.csv` and `table.txt`.
pub fn export_comparison(table: &ComparisonTable, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if table.rows.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("table.csv");
    table.write_csv(&csv_path)?;
    let txt_path = dir.join("table.txt");
    fs::write(&txt_path, table.to_text()).map_err(|e| Error::io(&txt_path, e))?;
    Ok(vec![csv_path, txt_path])
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

impl Series {
    fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }
}

type PlotResult = std::result::Result<(), Box<dyn std::error::Error>>;

fn draw_panel(area: &DrawingArea<SVGBackend<'_>, Shift>, title: &str, y_label: &str, series: &[Series]) -> PlotResult {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|v| v.is_finite());
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(8)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
    chart.configure_mesh().x_desc("time [h]").y_desc(y_label).draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    Ok(())
}

fn hours(log: &SimulationLog) -> Vec<f64> {
    log.records
        .iter()
        .map(|r| r.step as f64 * log.sample_time / 3600.0)
        .collect()
}

fn series(t: &[f64], values: impl Iterator<Item = f64>) -> Vec<(f64, f64)> {
    t.iter().copied().zip(values).collect()
}

fn render(path: &Path, size: (u32, u32), draw: impl FnOnce(&DrawingArea<SVGBackend<'_>, Shift>) -> PlotResult) -> Result<()> {
    let result = {
        let root = SVGBackend::new(path, size).into_drawing_area();
        root.fill(&WHITE)
            .map_err(|e| Box::new(e) as Box<dyn std::error::Error>)
            .and_then(|_| draw(&root))
            .and_then(|_| root.present().map_err(|e| Box::new(e) as Box<dyn std::error::Error>))
    };
    result.map_err(|e| Error::format(path, e))
}

/// Loads, price and temperature bounds.
fn plot_scenario(log: &SimulationLog, path: &Path) -> Result<()> {
    let t = hours(log);
    render(path, (900, 900), |root| {
        let panels = root.split_evenly((3, 1));
        let n_loads = log.records.first().map_or(0, |r| r.disturbance.len());
        let loads: Vec<Series> = (0..n_loads)
            .map(|j| {
                Series::new(
                    format!("P{}_c", j + 1),
                    series(&t, log.records.iter().map(|r| r.disturbance[j] / 1e3)),
                )
            })
            .collect();
        draw_panel(&panels[0], "Consumer demand", "kW", &loads)?;
        draw_panel(
            &panels[1],
            "Electricity price",
            "EUR/kWh",
            &[Series::new("price", series(&t, log.records.iter().map(|r| r.price)))],
        )?;
        draw_panel(
            &panels[2],
            "Temperature bounds",
            "°C",
            &[
                Series::new("supply lower", series(&t, log.records.iter().map(|r| r.supply_lower))),
                Series::new("return lower", series(&t, log.records.iter().map(|r| r.return_lower))),
            ],
        )
    })
}

/// Substation supply temperatures with their bounds, and the station supply.
fn plot_temperatures(log: &SimulationLog, path: &Path) -> Result<()> {
    let t = hours(log);
    let mut lines: Vec<Series> = log
        .layout
        .supply_temperatures
        .iter()
        .map(|&j| Series::new(log.output_names[j].clone(), series(&t, log.records.iter().map(|r| r.output[j]))))
        .collect();
    lines.push(Series::new("T0_s", series(&t, log.records.iter().map(|r| r.control[0]))));
    lines.push(Series::new("lower bound", series(&t, log.records.iter().map(|r| r.supply_lower))));
    lines.push(Series::new("upper bound", series(&t, log.records.iter().map(|_| SUPPLY_UPPER))));
    let title = format!("Supply temperatures ({})", log.controller.label());
    render(path, (900, 500), |root| draw_panel(root, &title, "°C", &lines))
}

/// One-step output error of expert `i`: estimator vs open-loop propagation.
fn plot_errors(log: &SimulationLog, i: usize, path: &Path) -> Result<()> {
    let t = hours(log);
    let est = log.one_step_errors(i)?;
    let ol = log.open_loop_errors(i)?;
    let est_label = match log.estimator {
        super::EstimatorMode::Mhe => "MHE",
        super::EstimatorMode::OpenLoop => "controller states",
    };
    let lines = [
        Series::new("open loop", series(&t, ol.into_iter())),
        Series::new(est_label, series(&t, est.into_iter())),
    ];
    let title = format!("One-step output error, expert {i}");
    render(path, (900, 500), |root| draw_panel(root, &title, "scaled squared error", &lines))
}
