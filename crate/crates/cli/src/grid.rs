//! The objective × encoder grid: one pretrain plus fine-tune run per cell,
//! resumable through per-cell completion markers.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use terrafuse_core::data::{BandStats, Manifest};
use terrafuse_core::encoders::{DeconvHeader, Encoder, EncoderVariant};
use terrafuse_core::finetune::{finetune_run, EvalReport, EVAL_REPORT_FILE};
use terrafuse_core::nn::Module;
use terrafuse_core::pretrain::Objective;

use crate::commands::{cell_name, ensure_dataset, run_pretrain, Workspace};
use crate::config::{ExperimentConfig, GridConfig};
use crate::report::{render_svg, write_iou_csv, REPORT_SVG};

/// Written last into a cell directory; holds the cell's resolved config.
pub const COMPLETE_MARKER: &str = "COMPLETE";
pub const TABLE_FILE: &str = "table7.csv";
pub const IOU_BY_CLASS_FILE: &str = "iou_by_class.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridCell {
    pub objective: Objective,
    pub encoder: EncoderVariant,
}

impl GridCell {
    pub fn name(&self) -> String {
        cell_name(self.objective.name(), self.encoder.name())
    }
}

#[derive(Clone, Debug, Default)]
pub struct GridSummary {
    /// Cells trained by this invocation.
    pub executed: Vec<String>,
    /// Cells already complete from an earlier invocation.
    pub skipped: Vec<String>,
    /// Cells left for a later invocation by `max_cells`.
    pub pending: Vec<String>,
}

impl GridSummary {
    pub fn is_complete(&self) -> bool {
        self.pending.is_empty()
    }
}

pub fn grid_dir(ws: &Workspace) -> PathBuf {
    ws.out.join("grid")
}

/// Cells in row-major table order.
pub fn grid_cells(grid: &GridConfig) -> Vec<GridCell> {
    grid.objectives
        .iter()
        .flat_map(|&objective| grid.encoders.iter().map(move |&encoder| GridCell { objective, encoder }))
        .collect()
}

/// The configuration a single cell runs under, as echoed into its directory.
pub fn cell_config(cfg: &ExperimentConfig, cell: GridCell) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.pretrain.objective = cell.objective;
    c.pretrain.encoder = cell.encoder;
    c.grid = GridConfig {
        objectives: vec![cell.objective],
        encoders: vec![cell.encoder],
        workers: 1,
    };
    c
}

fn run_cell(ws: &Workspace, cell: GridCell, manifest: &Manifest, stats: &BandStats, dir: &Path) -> Result<()> {
    if dir.exists() {
        // Left behind by an interrupted run.
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let cfg = cell_config(&ws.config, cell);
    info!("grid cell {} starting", cell.name());
    let pretrained = run_pretrain(&cfg.pretrain, manifest, stats)?;
    pretrained.save(&dir.join("pretrain"))?;
    let tuned = finetune_run(&pretrained.checkpoint, manifest, stats, &cfg.finetune)?;
    tuned.save(&dir.join("finetune"))?;
    cfg.echo(dir)?;
    fs::write(dir.join(COMPLETE_MARKER), cfg.to_toml()?)
        .with_context(|| format!("writing marker in {}", dir.display()))?;
    info!("grid cell {} done: weighted mIoU {:?}", cell.name(), tuned.report.weighted_miou);
    Ok(())
}

/// Runs every incomplete cell (at most `max_cells` of them), then writes the
/// result tables and chart over all complete cells.
pub fn cmd_grid(ws: &Workspace, max_cells: Option<usize>) -> Result<GridSummary> {
    let root = grid_dir(ws);
    let cells = grid_cells(&ws.config.grid);
    let mut summary = GridSummary::default();
    let mut todo = Vec::new();
    for &cell in &cells {
        let dir = root.join(cell.name());
        match fs::read_to_string(dir.join(COMPLETE_MARKER)) {
            Ok(marker) => {
                if marker != cell_config(&ws.config, cell).to_toml()? {
                    bail!(
                        "cell {} in {} was completed under a different config; use a fresh --out",
                        cell.name(),
                        root.display()
                    );
                }
                summary.skipped.push(cell.name());
            }
            Err(_) => todo.push(cell),
        }
    }
    let budget = max_cells.unwrap_or(usize::MAX).min(todo.len());
    summary.pending = todo[budget..].iter().map(GridCell::name).collect();
    let todo = &todo[..budget];

    if !todo.is_empty() {
        let (manifest, stats) = ensure_dataset(ws)?;
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let errors = Mutex::new(Vec::new());
        let workers = ws.config.grid.workers.min(todo.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if failed.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&cell) = todo.get(i) else { break };
                    if let Err(e) = run_cell(ws, cell, &manifest, &stats, &root.join(cell.name())) {
                        failed.store(true, Ordering::SeqCst);
                        errors.lock().unwrap().push(e.context(format!("grid cell {}", cell.name())));
                    }
                });
            }
        });
        if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
            return Err(e);
        }
        summary.executed = todo.iter().map(GridCell::name).collect();
    }

    let reports = completed_reports(ws)?;
    write_table(&root.join(TABLE_FILE), &ws.config.grid, ws.config.finetune.header_classes, &reports)?;
    let found: Vec<EvalReport> = reports.into_iter().map(|(_, r)| r).collect();
    write_iou_csv(&root.join(IOU_BY_CLASS_FILE), &found)?;
    fs::write(root.join(REPORT_SVG), render_svg(&found)).with_context(|| format!("writing {REPORT_SVG}"))?;
    Ok(summary)
}

/// Eval reports of the complete cells, in table order.
pub fn completed_reports(ws: &Workspace) -> Result<Vec<(GridCell, EvalReport)>> {
    let root = grid_dir(ws);
    let mut out = Vec::new();
    for cell in grid_cells(&ws.config.grid) {
        let dir = root.join(cell.name());
        if !dir.join(COMPLETE_MARKER).exists() {
            continue;
        }
        let path = dir.join("finetune").join(EVAL_REPORT_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        out.push((cell, EvalReport::from_json(&text)?));
    }
    Ok(out)
}

/// Trainable parameters of an encoder plus a `header_classes` header.
pub fn model_parameters(encoder: EncoderVariant, header_classes: usize) -> Result<usize> {
    Ok(Encoder::new(encoder, 0).num_params() + DeconvHeader::new(header_classes, 0)?.num_params())
}

/// Objectives as rows, encoders as columns, test weighted mIoU in each cell
/// (empty when missing or undefined), and a final `parameters` row.
pub fn write_table(
    path: &Path,
    grid: &GridConfig,
    header_classes: usize,
    reports: &[(GridCell, EvalReport)],
) -> Result<()> {
    let mut csv = String::from("pretrain");
    for e in &grid.encoders {
        csv.push(',');
        csv.push_str(e.name());
    }
    csv.push('\n');
    for &o in &grid.objectives {
        csv.push_str(o.name());
        for &e in &grid.encoders {
            csv.push(',');
            let found = reports.iter().find(|(c, _)| c.objective == o && c.encoder == e);
            if let Some(v) = found.and_then(|(_, r)| r.weighted_miou) {
                csv.push_str(&v.to_string());
            }
        }
        csv.push('\n');
    }
    csv.push_str("parameters");
    for &e in &grid.encoders {
        csv.push_str(&format!(",{}", model_parameters(e, header_classes)?));
    }
    csv.push('\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

/// Parses a table written by [`write_table`] into `(row, column) -> text`.
pub fn read_table(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    if rows.is_empty() {
        return Err(anyhow!("{} is empty", path.display()));
    }
    Ok(rows)
}
