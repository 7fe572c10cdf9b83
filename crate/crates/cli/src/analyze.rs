use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use vrlab_analysis::fitts::IdForm;
use vrlab_analysis::pca::D95Mode;
use vrlab_analysis::pipelines::{fitts_report, proteus_report, psychometric_report, Corpus};
use vrlab_analysis::{report, AnalysisError, Exec};

use crate::output::Output;
use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Pipeline {
    /// Detection thresholds from binary judgments.
    Psychometric,
    /// d95 and total displacement, baseline vs avatar.
    Proteus,
    /// Movement-time regressions.
    Fitts,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IdFormArg {
    Shannon,
    Original,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum D95Arg {
    Integer,
    Interpolated,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pipeline: Pipeline,
    /// Export directory holding `<kind>.csv` or `<kind>.ndjson` files.
    #[arg(long)]
    input: PathBuf,
    /// JSON report path; the text tables go next to it with `.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "shannon")]
    id_form: IdFormArg,
    #[arg(long, value_enum, default_value = "integer")]
    d95: D95Arg,
    /// Single-threaded analysis.
    #[arg(long)]
    sequential: bool,
}

fn failed(e: AnalysisError) -> Failure {
    Failure::invalid(format!("analysis failed: {e}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn emit(report: &impl Serialize, text: String, out_path: &Path, out: &Output) -> CmdResult {
    let json = serde_json::to_vec_pretty(report).expect("serializable");
    write(out_path, &json)?;
    let txt = out_path.with_extension("txt");
    write(&txt, text.as_bytes())?;
    if out.json {
        println!("{}", String::from_utf8_lossy(&json));
    } else {
        println!("{text}");
        println!("report written to {} and {}", out_path.display(), txt.display());
    }
    Ok(())
}

pub fn run(args: &AnalyzeArgs, out_dir: &Path, out: &Output) -> CmdResult {
    let corpus = Corpus::load(&args.input).map_err(failed)?;
    let exec = if args.sequential { Exec::Sequential } else { Exec::default() };
    let name = match args.pipeline {
        Pipeline::Psychometric => "psychometric",
        Pipeline::Proteus => "proteus",
        Pipeline::Fitts => "fitts",
    };
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("{name}_report.json")));
    match args.pipeline {
        Pipeline::Psychometric => {
            let r = psychometric_report(&corpus, exec).map_err(failed)?;
            emit(&r, report::psychometric_table(&r), &out_path, out)
        }
        Pipeline::Proteus => {
            let mode = match args.d95 {
                D95Arg::Integer => D95Mode::Integer,
                D95Arg::Interpolated => D95Mode::Interpolated,
            };
            let r = proteus_report(&corpus, mode, exec).map_err(failed)?;
            emit(&r, report::proteus_tables(&r), &out_path, out)
        }
        Pipeline::Fitts => {
            let form = match args.id_form {
                IdFormArg::Shannon => IdForm::Shannon,
                IdFormArg::Original => IdForm::Original,
            };
            let r = fitts_report(&corpus, form, exec).map_err(failed)?;
            emit(&r, report::fitts_table(&r), &out_path, out)
        }
    }
}
