//! Per-class IoU outputs: a long-format CSV and a grouped bar chart as standalone SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use terrafuse_core::finetune::{EvalReport, EVAL_REPORT_FILE};

use crate::commands::cell_name;

pub const REPORT_SVG: &str = "report.svg";
pub const IOU_CSV_HEADER: &str = "pretrain,encoder,class_code,class_name,iou,iou_zero_filled,class_weight";

const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
    "#1f77b4", "#8c564b",
];

fn report_in(dir: &Path) -> Option<PathBuf> {
    [dir.join(EVAL_REPORT_FILE), dir.join("finetune").join(EVAL_REPORT_FILE)]
        .into_iter()
        .find(|p| p.is_file())
}

/// Eval reports found in `dirs`. Each directory may hold `eval_report.json`,
/// `finetune/eval_report.json`, or run directories one level down.
pub fn find_reports(dirs: &[PathBuf]) -> Result<Vec<(PathBuf, EvalReport)>> {
    let mut paths = Vec::new();
    for dir in dirs {
        if let Some(p) = report_in(dir) {
            paths.push(p);
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        let found: Vec<PathBuf> = children.iter().filter_map(|c| report_in(c)).collect();
        if found.is_empty() {
            bail!("no {EVAL_REPORT_FILE} in {} or its subdirectories", dir.display());
        }
        paths.extend(found);
    }
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let report = EvalReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok((p, report))
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per (cell, class); absent classes have an empty `iou`.
pub fn iou_csv(reports: &[EvalReport]) -> String {
    let mut csv = String::from(IOU_CSV_HEADER);
    csv.push('\n');
    for r in reports {
        for (&code, iou) in &r.iou {
            let name = r.class_names.get(&code).map(String::as_str).unwrap_or("");
            let _ = writeln!(
                csv,
                "{},{},{code},{},{},{},{}",
                csv_field(&r.cell.pretrain),
                csv_field(&r.cell.encoder),
                csv_field(name),
                iou.map(|v| v.to_string()).unwrap_or_default(),
                r.iou_zero_filled.get(&code).copied().unwrap_or(0.0),
                r.class_weights.get(&code).copied().unwrap_or(0.0),
            );
        }
    }
    csv
}

pub fn write_iou_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, iou_csv(reports)).with_context(|| format!("writing {}", path.display()))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bar chart: one group per class, one bar per cell.
///
/// Every bar is a `<rect class="bar">` carrying `data-cell`, `data-class` and
/// `data-iou`; `data-iou` is the report value verbatim or `null` when the
/// class is absent, in which case the bar has zero height.
pub fn render_svg(reports: &[EvalReport]) -> String {
    let mut classes: BTreeMap<u8, String> = BTreeMap::new();
    for r in reports {
        for &code in r.iou.keys() {
            let name = r.class_names.get(&code).cloned().unwrap_or_else(|| format!("class {code}"));
            classes.entry(code).or_insert(name);
        }
    }
    let (left, top, plot_h, bar_w, gap) = (60.0, 30.0, 300.0, 14.0, 24.0);
    let group_w = bar_w * reports.len().max(1) as f64 + gap;
    let plot_w = group_w * classes.len().max(1) as f64;
    let legend_top = top + plot_h + 60.0;
    let width = left + plot_w + 20.0;
    let height = legend_top + 18.0 * reports.len() as f64 + 20.0;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">Test IoU per class</text>"#,
        left + plot_w / 2.0
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    for (g, (&code, name)) in classes.iter().enumerate() {
        let x0 = left + g as f64 * group_w + gap / 2.0;
        for (i, r) in reports.iter().enumerate() {
            let iou = r.iou.get(&code).copied().flatten();
            let h = plot_h * iou.unwrap_or(0.0).clamp(0.0, 1.0);
            let cell = cell_name(&r.cell.pretrain, &r.cell.encoder);
            let value = iou.map(|v| v.to_string()).unwrap_or_else(|| "null".into());
            let _ = writeln!(
                svg,
                r#"<rect class="bar" x="{}" y="{}" width="{bar_w}" height="{h}" fill="{}" data-cell="{}" data-class="{code}" data-iou="{value}"><title>{}: {} = {value}</title></rect>"#,
                x0 + i as f64 * bar_w,
                top + plot_h - h,
                PALETTE[i % PALETTE.len()],
                xml_escape(&cell),
                xml_escape(&cell),
                xml_escape(name),
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + (group_w - gap) / 2.0,
            top + plot_h + 16.0,
            xml_escape(name)
        );
    }
    let _ = writeln!(
        svg,
        r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="#333"/>"##,
        top + plot_h
    );
    for (i, r) in reports.iter().enumerate() {
        let y = legend_top + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect class="legend" x="{left}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            left + 16.0,
            y,
            xml_escape(&cell_name(&r.cell.pretrain, &r.cell.encoder))
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `report.svg` and `iou_by_class.csv` for the reports in `dirs` into `out`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<(PathBuf, PathBuf)> {
    let reports: Vec<EvalReport> = find_reports(dirs)?.into_iter().map(|(_, r)| r).collect();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let svg = out.join(REPORT_SVG);
    fs::write(&svg, render_svg(&reports)).with_context(|| format!("writing {}", svg.display()))?;
    let csv = out.join(crate::grid::IOU_BY_CLASS_FILE);
    write_iou_csv(&csv, &reports)?;
    Ok((svg, csv))
}
