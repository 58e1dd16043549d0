use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::Scheme;
use crate::harness::experiment::{ExperimentResults, SchemeSummary};
use crate::harness::metrics::ConfusionMatrix;
use crate::trainer::TrainLog;

pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_FILE: &str = "report.md";
pub const ACCURACY_PLOT: &str = "accuracy_curves.svg";
pub const LOSS_PLOT: &str = "step2_losses.svg";

/// Writes results.json, report.md and the two SVG plots into `dir`. The
/// output depends only on `results`, so re-emitting is byte-identical.
pub fn emit_report(results: &ExperimentResults, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(results)?;
    json.push('\n');
    fs::write(dir.join(RESULTS_FILE), json)?;
    fs::write(dir.join(REPORT_FILE), render_markdown(results))?;
    fs::write(dir.join(ACCURACY_PLOT), accuracy_plot(results))?;
    fs::write(dir.join(LOSS_PLOT), loss_plot(results))?;
    Ok(())
}

pub fn load_results(path: impl AsRef<Path>) -> Result<ExperimentResults> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn summary_cell(s: &SchemeSummary) -> String {
    format!(
        "{} ± {} (sample sd {})",
        pct(s.aggregate.mean),
        pct(s.aggregate.population_sd),
        pct(s.aggregate.sample_sd)
    )
}

fn matrix_table(out: &mut String, names: &[String], m: &ConfusionMatrix) {
    let _ = write!(out, "| GT \\ Predicted |");
    for n in names {
        let _ = write!(out, " {n} |");
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in names {
        out.push_str("---:|");
    }
    out.push('\n');
    for (n, row) in names.iter().zip(&m.counts) {
        let _ = write!(out, "| {n} |");
        for v in row {
            let _ = write!(out, " {v} |");
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "\naccuracy {}/{} = {:.4}\n",
        m.trace(),
        m.total(),
        m.accuracy()
    );
}

pub fn render_markdown(r: &ExperimentResults) -> String {
    let cfg = &r.config;
    let mut out = String::new();
    let _ = writeln!(out, "# Experiment report\n");
    let _ = writeln!(
        out,
        "seed {} · scheme {} · {}-fold · classes {} · counts {:?} · image {}×{}\n",
        cfg.seed,
        match cfg.scheme {
            Scheme::Baseline => "baseline",
            Scheme::Proposed => "proposed",
        },
        cfg.k,
        r.class_names.join("/"),
        r.class_counts,
        cfg.image_size,
        cfg.image_size
    );

    let _ = writeln!(out, "## Accuracy (%)\n");
    let proposed = r.proposed.as_ref();
    out.push_str("| Fold | Baseline |");
    if proposed.is_some() {
        out.push_str(" Proposed |");
    }
    out.push_str("\n|---|---:|");
    if proposed.is_some() {
        out.push_str("---:|");
    }
    out.push('\n');
    for (i, acc) in r.baseline.fold_accuracies.iter().enumerate() {
        let _ = write!(out, "| {} | {} |", i + 1, pct(*acc));
        if let Some(p) = proposed {
            let _ = write!(out, " {} |", pct(p.fold_accuracies[i]));
        }
        out.push('\n');
    }
    let _ = write!(out, "| Avg. | {} |", summary_cell(&r.baseline));
    if let Some(p) = proposed {
        let _ = write!(out, " {} |", summary_cell(p));
    }
    out.push_str("\n\n± is the population standard deviation over folds.\n\n");

    if r.folds.iter().any(|f| f.step2.is_some()) {
        let _ = writeln!(out, "## Disentanglement\n");
        out.push_str("| Fold | val L_rec before | val L_rec best | probe r | probe c | chance |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|\n");
        for f in &r.folds {
            let (a, b) = f
                .step2
                .as_ref()
                .map_or(("-".into(), "-".into()), |s| {
                    (format!("{:.4}", s.initial_val_rec), format!("{:.4}", s.best_val_rec))
                });
            let (pr, pc, ch) = f.probe.as_ref().map_or(("-".into(), "-".into(), "-".into()), |p| {
                (
                    format!("{:.4}", p.r.accuracy),
                    format!("{:.4}", p.c.accuracy),
                    format!("{:.4}", p.r.chance),
                )
            });
            let _ = writeln!(out, "| {} | {a} | {b} | {pr} | {pc} | {ch} |", f.fold + 1);
        }
        out.push('\n');
    }

    let _ = writeln!(out, "## Confusion matrices\n");
    let mut schemes: Vec<(&str, &SchemeSummary)> = vec![("Baseline", &r.baseline)];
    if let Some(p) = proposed {
        schemes.push(("Proposed", p));
    }
    for (name, summary) in schemes {
        for f in &r.folds {
            let eval = if name == "Baseline" {
                Some(&f.baseline.evaluation)
            } else {
                f.proposed.as_ref().map(|p| &p.evaluation)
            };
            if let Some(e) = eval {
                let _ = writeln!(out, "### {name}, fold {}\n", f.fold + 1);
                matrix_table(&mut out, &r.class_names, &e.confusion);
            }
        }
        let _ = writeln!(out, "### {name}, pooled\n");
        matrix_table(&mut out, &r.class_names, &summary.pooled);
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    dashed: bool,
}

fn line_plot(title: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" font-size="14" text-anchor="middle">{title}</text>"#,
        left + pw / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let yv = y0 + t * (y1 - y0);
        let xv = x0 + t * (x1 - x0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            left - 4.0,
            sy(yv) + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.0}</text>"#,
            sx(xv),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if ser.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let path: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 12.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            w - right + 10.0,
            w - right + 30.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            w - right + 34.0,
            ly + 4.0,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}

fn curve(log: &TrainLog, f: impl Fn(&crate::trainer::EpochRecord) -> Option<f64>) -> Vec<(f64, f64)> {
    log.records
        .iter()
        .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
        .collect()
}

pub fn accuracy_plot(r: &ExperimentResults) -> String {
    let mut series = Vec::new();
    for f in &r.folds {
        series.push(Series {
            label: format!("baseline f{}", f.fold + 1),
            points: curve(&f.baseline.log, |e| e.val_accuracy),
            dashed: true,
        });
        if let Some(p) = &f.proposed {
            series.push(Series {
                label: format!("proposed f{}", f.fold + 1),
                points: curve(&p.log, |e| e.val_accuracy),
                dashed: false,
            });
        }
    }
    line_plot("Validation accuracy", "accuracy", &series)
}

pub fn loss_plot(r: &ExperimentResults) -> String {
    let mut series = Vec::new();
    for f in &r.folds {
        if let Some(s2) = &f.step2 {
            series.push(Series {
                label: format!("val L_rec f{}", f.fold + 1),
                points: curve(&s2.log, |e| e.val_rec),
                dashed: false,
            });
            series.push(Series {
                label: format!("L_adv f{}", f.fold + 1),
                points: curve(&s2.log, |e| e.adv),
                dashed: true,
            });
        }
    }
    line_plot("Step 2 losses", "loss", &series)
}
