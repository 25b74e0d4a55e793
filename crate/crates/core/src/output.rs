//! CSV tables and SVG line plots for simulation results.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so equal
//! inputs give byte-identical files.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::equilibrium::{solve_split, EquilibriumSplit, SolverSettings};
use crate::error::Result;
use crate::euler::{MassRecord, Snapshot};
use crate::lagrange::GroupRecord;
use crate::model::{ClassDensities, GridState, NetworkSpec};
use crate::simulation::ComparisonReport;

fn cell_splits(spec: &NetworkSpec, state: &GridState, settings: &SolverSettings) -> Result<Vec<EquilibriumSplit>> {
    let cells: Vec<ClassDensities> = state
        .cells()
        .map(|c| ClassDensities::new(c.iter().map(|r| r.max(0.0)).collect()))
        .collect::<Result<_>>()?;
    cells.par_iter().map(|rho| solve_split(spec, rho, settings)).collect()
}

/// `t,x,rho_<class>…,v_<class>…,rho_lane_<lane>…,v_lane_<lane>…`, one row per
/// cell per snapshot. Speeds come from the equilibrium split of each cell.
pub fn write_snapshots<W: Write>(
    writer: W,
    spec: &NetworkSpec,
    snapshots: &[Snapshot],
    settings: &SolverSettings,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string(), "x".to_string()];
    header.extend(spec.classes().iter().map(|c| format!("rho_{}", c.name)));
    header.extend(spec.classes().iter().map(|c| format!("v_{}", c.name)));
    header.extend(spec.lanes().iter().map(|l| format!("rho_lane_{}", l.name)));
    header.extend(spec.lanes().iter().map(|l| format!("v_lane_{}", l.name)));
    csv.write_record(&header)?;
    for snap in snapshots {
        let splits = cell_splits(spec, &snap.state, settings)?;
        for (l, split) in splits.iter().enumerate() {
            let mut row = vec![snap.time.to_string(), snap.state.x_center(l).to_string()];
            row.extend(snap.state.cell(l).iter().map(f64::to_string));
            row.extend(split.class_speed.iter().map(f64::to_string));
            row.extend(split.lane_density.iter().map(f64::to_string));
            row.extend(split.lane_speed.iter().map(f64::to_string));
            csv.write_record(&row)?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// `t,class,total_mass`.
pub fn write_mass<W: Write>(writer: W, spec: &NetworkSpec, mass: &[MassRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["t", "class", "total_mass"])?;
    for r in mass {
        csv.write_record([
            r.time.to_string(),
            spec.classes()[r.class].name.clone(),
            r.mass.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// `t,group_id,class,x,phi_<lane>…,v`.
pub fn write_groups<W: Write>(writer: W, spec: &NetworkSpec, records: &[GroupRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string(), "group_id".into(), "class".into(), "x".into()];
    header.extend(spec.lanes().iter().map(|l| format!("phi_{}", l.name)));
    header.push("v".into());
    csv.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.time.to_string(),
            r.id.to_string(),
            spec.classes()[r.class].name.clone(),
            r.position.to_string(),
        ];
        row.extend(r.phi.iter().map(f64::to_string));
        row.push(r.speed.to_string());
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// `scheme,reference,class,t,relative_l1`.
pub fn write_comparison_csv<W: Write>(writer: W, report: &ComparisonReport) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["scheme", "reference", "class", "t", "relative_l1"])?;
    for d in &report.distances {
        csv.write_record([
            d.scheme.clone(),
            d.reference.clone(),
            d.class.clone(),
            d.time.to_string(),
            d.relative_l1.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const WIDTH: f64 = 720.0;
const PANEL: f64 = 260.0;
const MARGIN: f64 = 56.0;

/// Upper axis bound: a round number at or above `max`.
fn nice_ceiling(max: f64) -> f64 {
    if !(max > 0.0) {
        return 1.0;
    }
    let step = 10f64.powf(max.log10().floor());
    let m = max / step;
    let k = [1.0, 2.0, 2.5, 5.0, 10.0].into_iter().find(|&k| m <= k + 1e-12).unwrap_or(10.0);
    k * step
}

struct Panel<'a> {
    title: &'a str,
    unit: &'a str,
    series: Vec<(&'a str, Vec<f64>)>,
}

fn draw_panel(svg: &mut String, top: f64, xs: &[f64], ring: f64, panel: &Panel) {
    let ymax = nice_ceiling(panel.series.iter().flat_map(|(_, s)| s.iter().copied()).fold(0.0, f64::max));
    let (x0, x1) = (MARGIN, WIDTH - 20.0);
    let (y0, y1) = (top + PANEL - 30.0, top + 24.0);
    let sx = |x: f64| x0 + (x1 - x0) * x / ring;
    let sy = |y: f64| y0 + (y1 - y0) * y / ymax;
    let _ = writeln!(svg, r#"<text x="{x0}" y="{}" font-size="13">{} ({})</text>"#, top + 16.0, panel.title, panel.unit);
    let _ = writeln!(svg, r##"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="#444"/>"##, x1 - x0, y0 - y1);
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(svg, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" font-size="10" text-anchor="end">{v}</text>"#, x0 - 4.0, y + 3.0);
        let xv = ring * k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{}" font-size="10" text-anchor="middle">{xv}</text>"#, sx(xv), y0 + 13.0);
    }
    for (k, (name, values)) in panel.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = xs.iter().zip(values).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let ly = y1 + 14.0 + 14.0 * k as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{name}</text>"#, x1 - 60.0);
    }
}

/// Densities and speeds of every class against position, two stacked panels.
pub fn snapshot_svg(spec: &NetworkSpec, snapshot: &Snapshot, settings: &SolverSettings) -> Result<String> {
    let state = &snapshot.state;
    let splits = cell_splits(spec, state, settings)?;
    let xs: Vec<f64> = (0..state.n_cells()).map(|l| state.x_center(l)).collect();
    let names: Vec<&str> = spec.classes().iter().map(|c| c.name.as_str()).collect();
    let density = Panel {
        title: "density",
        unit: "veh/km",
        series: names.iter().enumerate().map(|(d, &n)| (n, state.class_profile(d))).collect(),
    };
    let speed = Panel {
        title: "speed",
        unit: "km/h",
        series: names
            .iter()
            .enumerate()
            .map(|(d, &n)| (n, splits.iter().map(|s| s.class_speed[d]).collect()))
            .collect(),
    };
    let height = 2.0 * PANEL + 40.0;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">t = {} min, x in km</text>"#, WIDTH / 2.0, height - 8.0, snapshot.time * 60.0);
    draw_panel(&mut svg, 0.0, &xs, state.ring_length(), &density);
    draw_panel(&mut svg, PANEL, &xs, state.ring_length(), &speed);
    svg.push_str("</svg>\n");
    Ok(svg)
}
