//! Markdown report over a sweep: per-size loss ranges, per-run values, the
//! scaling fit and the entropy estimates.

use std::collections::BTreeMap;
use std::fmt::Write;

use cellscale_core::entropy::EntropyReport;
use cellscale_core::fit::FitResult;

use crate::sweep::SweepIndex;

/// `"1.10–1.20"` for several values, a single number when they coincide.
pub fn format_range(values: &[f64], decimals: usize) -> String {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (format!("{min:.decimals$}"), format!("{max:.decimals$}"));
    if lo == hi {
        lo
    } else {
        format!("{lo}–{hi}")
    }
}

/// One row per preset, ordered by parameter count: `(preset, P, losses)`.
pub fn group_by_size(index: &SweepIndex) -> Vec<(String, u64, Vec<f64>)> {
    let mut groups: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    for r in &index.runs {
        groups
            .entry((r.param_count, r.preset.clone()))
            .or_default()
            .push(r.best_val_mse);
    }
    groups
        .into_iter()
        .map(|((p, name), losses)| (name, p, losses))
        .collect()
}

pub struct ReportInputs<'a> {
    pub index: &'a SweepIndex,
    pub fit: Option<&'a FitResult>,
    /// Why no fit is shown, when `fit` is `None`.
    pub fit_note: Option<String>,
    pub entropy: Option<&'a EntropyReport>,
    pub plot: Option<&'a str>,
    pub decimals: usize,
}

pub fn render(inputs: &ReportInputs<'_>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Scaling report\n");
    let _ = writeln!(s, "Corpus: {}\n", inputs.index.corpus);

    let _ = writeln!(s, "## Best validation MSE per model size\n");
    let _ = writeln!(s, "Ranges are the minimum and maximum across seeds.\n");
    let _ = writeln!(s, "| Size | Parameters | Runs | Best val MSE |");
    let _ = writeln!(s, "|---|---:|---:|---|");
    for (name, p, losses) in group_by_size(inputs.index) {
        let _ = writeln!(
            s,
            "| {name} | {p} | {} | {} |",
            losses.len(),
            format_range(&losses, inputs.decimals)
        );
    }

    let _ = writeln!(s, "\n## Runs\n");
    let _ = writeln!(s, "| Run | Parameters | Best val MSE | Best step |");
    let _ = writeln!(s, "|---|---:|---:|---:|");
    for r in &inputs.index.runs {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.run_dir, r.param_count, r.best_val_mse, r.best_step
        );
    }

    let _ = writeln!(s, "\n## Scaling fit\n");
    match inputs.fit {
        Some(f) => {
            let _ = writeln!(s, "`L = a * P^(-alpha) + c`, floor chosen by maximum R².\n");
            let _ = writeln!(s, "| n | alpha | a | c | R² |");
            let _ = writeln!(s, "|---:|---:|---:|---:|---:|");
            let _ = writeln!(
                s,
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} |",
                f.n, f.alpha, f.a, f.c, f.r2
            );
            if f.looks_non_scaling() {
                let _ = writeln!(
                    s,
                    "\nWarning: the fit shows no meaningful scaling with size."
                );
            }
        }
        None => {
            let note = inputs.fit_note.as_deref().unwrap_or("not enough runs");
            let _ = writeln!(s, "No fit: {note}.");
        }
    }
    if let Some(plot) = inputs.plot {
        let _ = writeln!(
            s,
            "\n![Best validation MSE against parameter count]({plot})"
        );
    }

    if let Some(e) = inputs.entropy {
        let _ = writeln!(s, "\n## Entropy floor\n");
        let _ = writeln!(s, "| Source | Floor | Bits per masked position |");
        let _ = writeln!(s, "|---|---:|---:|");
        let _ = writeln!(
            s,
            "| MSE floor | {:.4} | {:.3} |",
            e.mse_floor.floor_value, e.mse_floor.bits_per_position
        );
        if let Some(n) = e.nll_floor {
            let _ = writeln!(
                s,
                "| Gaussian NLL refit (nats) | {:.4} | {:.3} |",
                n.floor_value, n.bits_per_position
            );
        }
        if let (Some(gap), Some(label)) = (e.gap_bits, e.nll_provenance.as_deref()) {
            let _ = writeln!(
                s,
                "\nNLL values are {label}; the two floors differ by {gap:+.3} bits."
            );
        }
    }
    s
}
