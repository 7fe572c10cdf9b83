//! Aligned plain-text tables laid out like the published ones.

use std::fmt::Write;

use crate::pipelines::{FittsReport, MetricTable, ProteusReport, PsychometricReport};
use crate::ranktest::TestReport;

fn p_text(p: f64) -> String {
    if p < 0.001 {
        "< .001".to_string()
    } else {
        format!("{p:.4}").trim_start_matches('0').to_string()
    }
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}

pub fn psychometric_table(r: &PsychometricReport) -> String {
    let s = &r.summary;
    let mut rows = vec![vec!["".into(), "Mean".into(), "SD".into(), "95% CI".into()]];
    for m in &s.metrics {
        let label = match m.metric.as_str() {
            "faster" => "Faster",
            "pse" => "PSE",
            _ => "Slower",
        };
        rows.push(vec![
            label.into(),
            format!("{:.3}", m.mean),
            format!("{:.3}", m.sd),
            format!("({:.3}, {:.3})", m.ci_low, m.ci_high),
        ]);
    }
    let mut out = render(&rows);
    let _ = writeln!(
        out,
        "participants {}, excluded {} ({:.2}%), analysed {}",
        s.n_total, s.n_excluded, s.exclusion_pct, s.n_used
    );
    out
}

fn between_row(label: &str, base: &Option<TestReport>, exp: &Option<TestReport>, f: fn(&TestReport) -> String) -> Vec<String> {
    vec![
        label.into(),
        base.as_ref().map(f).unwrap_or_default(),
        exp.as_ref().map(f).unwrap_or_default(),
    ]
}

pub fn metric_table(t: &MetricTable) -> String {
    let prec = if t.metric == "d95" { 2 } else { 1 };
    let mut rows = vec![vec![
        "Group".into(),
        "base".into(),
        "exp".into(),
        "p".into(),
        "Cohen's r".into(),
        "n".into(),
    ]];
    for g in &t.groups {
        rows.push(vec![
            g.group.clone(),
            format!("{:.prec$} ± {:.3}", g.base_mean, g.base_sd),
            format!("{:.prec$} ± {:.3}", g.exp_mean, g.exp_sd),
            g.test.as_ref().map(|t| p_text(t.p)).unwrap_or_else(|| "n/a".into()),
            g.test.as_ref().map(|t| format!("{:.3}", t.cohen_r)).unwrap_or_else(|| "n/a".into()),
            g.n.to_string(),
        ]);
    }
    rows.push(between_row("p", &t.between_base, &t.between_exp, |r| p_text(r.p)));
    rows.push(between_row("Cohen's r", &t.between_base, &t.between_exp, |r| format!("{:.4}", r.cohen_r)));
    format!("{}\n{}", t.metric, render(&rows))
}

pub fn proteus_tables(r: &ProteusReport) -> String {
    format!(
        "joined {}, dropped {}, analysed {}\n\n{}\n{}",
        r.n_joined,
        r.n_dropped,
        r.participants.len(),
        metric_table(&r.d95),
        metric_table(&r.displacement)
    )
}

pub fn fitts_table(r: &FittsReport) -> String {
    let mut rows = vec![vec![
        "Model".into(),
        "Parameter".into(),
        "Estimate".into(),
        "SE".into(),
        "sr".into(),
        "p".into(),
        "R²".into(),
        "SE (ms)".into(),
        "Adj. R²".into(),
    ]];
    for m in &r.models {
        for (i, c) in m.report.coefficients.iter().enumerate() {
            let first = i == 0;
            rows.push(vec![
                if first { m.model.label().into() } else { String::new() },
                c.name.clone(),
                format!("{:.3}", c.estimate),
                format!("{:.3}", c.se),
                c.sr.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                if first { "-".into() } else { p_text(c.p) },
                if first { format!("{:.3}", m.report.r2) } else { "-".into() },
                if first { format!("{:.3}", m.report.residual_se) } else { "-".into() },
                if first { format!("{:.3}", m.report.adj_r2) } else { "-".into() },
            ]);
        }
    }
    let mut out = render(&rows);
    let _ = writeln!(
        out,
        "trials {}, outliers removed {} (fence {:.1} ms)",
        r.n_trials, r.n_outliers, r.fence.upper
    );
    out
}
