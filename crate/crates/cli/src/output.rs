use std::path::PathBuf;

use serde::Serialize;
use vrlab_core::api::{BoardEntry, ExperimentView, SessionView};
use vrlab_core::questionnaire::QuestionnaireSpec;
use vrlab_sim::RunSummary;

pub struct Output {
    pub json: bool,
}

pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    for row in rows {
        out.push('\n');
        out.push_str(&line(row.clone()));
    }
    out
}

impl Output {
    pub fn value(&self, v: &impl Serialize) {
        println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
    }

    fn either(&self, v: &impl Serialize, text: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string(v).expect("serializable"));
        } else {
            println!("{}", text());
        }
    }

    pub fn id(&self, key: &str, value: &str) {
        self.either(&serde_json::json!({ key: value }), || value.to_string());
    }

    pub fn board(&self, board: &[BoardEntry]) {
        self.either(&board, || {
            let rows: Vec<Vec<String>> = board
                .iter()
                .map(|e| {
                    vec![
                        e.experiment_id.clone(),
                        e.title.clone(),
                        if e.vr_only { "vr".into() } else { "any".into() },
                        e.participants.to_string(),
                        e.max_participants.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
                    ]
                })
                .collect();
            table(&["ID", "TITLE", "DEVICE", "PARTICIPANTS", "MAX"], &rows)
        });
    }

    pub fn experiment(&self, e: &ExperimentView) {
        self.either(e, || {
            format!("{} {}", e.experiment_id, if e.published { "published" } else { "unpublished" })
        });
    }

    pub fn experiments(&self, list: &[ExperimentView]) {
        self.either(&list, || {
            let rows: Vec<Vec<String>> = list
                .iter()
                .map(|e| {
                    vec![
                        e.experiment_id.clone(),
                        if e.published { "yes".into() } else { "no".into() },
                        e.config.meta.title.clone(),
                    ]
                })
                .collect();
            table(&["ID", "PUBLISHED", "TITLE"], &rows)
        });
    }

    pub fn sessions(&self, list: &[SessionView]) {
        self.either(&list, || {
            let rows: Vec<Vec<String>> = list
                .iter()
                .map(|s| {
                    vec![
                        s.session_id.clone(),
                        s.status.as_str().to_string(),
                        s.group.clone().unwrap_or_else(|| "-".into()),
                        s.state.clone(),
                        format!("{}/{}", s.trials_completed, s.trials_total),
                    ]
                })
                .collect();
            table(&["SESSION", "STATUS", "GROUP", "STATE", "TRIALS"], &rows)
        });
    }

    pub fn questionnaires(&self, list: &[QuestionnaireSpec]) {
        self.either(&list, || {
            let rows: Vec<Vec<String>> = list
                .iter()
                .map(|q| vec![q.id.clone(), q.title.clone(), q.items.len().to_string()])
                .collect();
            table(&["ID", "TITLE", "ITEMS"], &rows)
        });
    }

    pub fn written(&self, files: &[PathBuf]) {
        self.either(&files, || {
            files
                .iter()
                .map(|f| format!("wrote {}", f.display()))
                .collect::<Vec<_>>()
                .join("\n")
        });
    }

    pub fn summary(&self, s: &RunSummary) {
        self.either(s, || {
            let mut text = format!(
                "{}: {} sessions ({} completed, {} dropped) in {:.1} s\nexports in {}",
                s.experiment_id,
                s.sessions,
                s.completed,
                s.dropped,
                s.seconds,
                s.export_dir.display()
            );
            for f in &s.failures {
                text.push_str(&format!("\nfailed: {f}"));
            }
            text
        });
    }
}
