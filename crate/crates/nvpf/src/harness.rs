//! The run driver behind the command-line binary: one function per
//! mode, plus the dispatcher.
//!
//! Every run that has an output directory writes `run-manifest.json`
//! there — the fully resolved configuration with overrides applied —
//! so rerunning `nvpf <mode> --config run-manifest.json --out DIR`
//! reproduces every artifact bit-exactly. Reports persist with their
//! timing zeroed for the same reason; wall-clock numbers go to stdout
//! only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{Mode, RunConfig};
use crate::data::{read_dataset, split_by_video, write_dataset, SceneRecord};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::gradsuite::{run_gradient_suite, SUITE_TOLERANCE};
use crate::inspect::{render_trace, trace_flow, trace_temporal};
use crate::metrics::EvalReport;
use crate::serialize::{
    checkpoint_kind, load_flow, load_temporal, save_flow, save_temporal, KIND_FLOW, KIND_TEMPORAL,
};
use crate::synth::gen_dataset;
use crate::temporal::{FrameSequence, TemporalModel};
use crate::train::{
    eval_flow, eval_temporal, groups_from_records, sequences_from_records, train_flow,
    train_temporal, write_curve,
};

/// Artifact names, shared with the test suites.
pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const CURVE_FILE: &str = "loss-curve.txt";
pub const FINAL_DIR: &str = "final";
pub const BEST_DIR: &str = "best";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRAIN_SPLIT_FILE: &str = "train.jsonl";
pub const TEST_SPLIT_FILE: &str = "test.jsonl";
pub const INSPECT_FILE: &str = "inspect.json";
pub const GRAD_REPORT_FILE: &str = "grad-report.txt";

/// Run one fully resolved configuration to completion.
pub fn execute(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    match cfg.mode {
        Mode::TrainNvpf => run_train_nvpf(cfg),
        Mode::TrainTnvpf => run_train_tnvpf(cfg),
        Mode::Eval => run_eval(cfg),
        Mode::GenData => run_gen_data(cfg),
        Mode::GradCheck => run_grad_check(cfg),
        Mode::Inspect => run_inspect(cfg),
    }
}

fn prepared_out_dir(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg
        .out_dir
        .as_deref()
        .ok_or_else(|| Error::Config(format!("mode {} requires \"out_dir\"", cfg.mode)))?;
    fs::create_dir_all(out)?;
    Ok(out)
}

fn write_run_manifest(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let mut json = serde_json::to_string_pretty(&cfg.manifest_form())?;
    json.push('\n');
    fs::write(dir.join(RUN_MANIFEST), json)?;
    Ok(())
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| Error::Config(format!("mode {} requires \"dataset\"", cfg.mode)))
}

fn load_records(cfg: &RunConfig) -> Result<Vec<SceneRecord>> {
    let path = dataset_path(cfg)?;
    let records = read_dataset(path)?;
    if records.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} holds no records",
            path.display()
        )));
    }
    Ok(records)
}

fn report_training(curve: &[(usize, f64)], out: &Path) {
    match curve.last() {
        Some((step, loss)) => println!("trained {} steps; last step loss {loss}", step + 1),
        None => println!("no steps run (0 epochs); checkpoints equal the initialization"),
    }
    println!("artifacts under {}", out.display());
}

fn run_train_nvpf(cfg: &RunConfig) -> Result<()> {
    let out = prepared_out_dir(cfg)?;
    let records = load_records(cfg)?;
    let data = groups_from_records(&records, cfg.n_max)?;
    println!(
        "loaded {} groups from {}",
        data.len(),
        dataset_path(cfg)?.display()
    );
    let trained = train_flow(cfg, &data)?;
    write_curve(&out.join(CURVE_FILE), &trained.curve)?;
    save_flow(&out.join(FINAL_DIR), &trained.model)?;
    save_flow(&out.join(BEST_DIR), &trained.best)?;
    write_run_manifest(out, cfg)?;
    report_training(&trained.curve, out);
    Ok(())
}

fn run_train_tnvpf(cfg: &RunConfig) -> Result<()> {
    let out = prepared_out_dir(cfg)?;
    let records = load_records(cfg)?;
    let seqs: Vec<FrameSequence> = sequences_from_records(&records, cfg.n_max)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    println!(
        "loaded {} videos from {}",
        seqs.len(),
        dataset_path(cfg)?.display()
    );
    let trained = train_temporal(cfg, &seqs)?;
    write_curve(&out.join(CURVE_FILE), &trained.curve)?;
    save_temporal(&out.join(FINAL_DIR), &trained.model)?;
    save_temporal(&out.join(BEST_DIR), &trained.best)?;
    write_run_manifest(out, cfg)?;
    report_training(&trained.curve, out);
    Ok(())
}

fn check_flow_geometry(cfg: &RunConfig, model: &FlowModel) -> Result<()> {
    if model.rows != cfg.feature_dim || model.cols != cfg.n_max {
        return Err(Error::Config(format!(
            "checkpoint grid is {}x{} but the config says feature_dim {} / n_max {}",
            model.rows, model.cols, cfg.feature_dim, cfg.n_max
        )));
    }
    Ok(())
}

fn check_temporal_geometry(cfg: &RunConfig, model: &TemporalModel) -> Result<()> {
    if model.rows() != cfg.feature_dim
        || model.group_flow.cols != cfg.n_max
        || model.frame_cols() != cfg.frame_cols
    {
        return Err(Error::Config(format!(
            "checkpoint geometry (rows {}, group cols {}, frame cols {}) disagrees with the \
             config (feature_dim {}, n_max {}, frame_cols {})",
            model.rows(),
            model.group_flow.cols,
            model.frame_cols(),
            cfg.feature_dim,
            cfg.n_max,
            cfg.frame_cols
        )));
    }
    Ok(())
}

fn model_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.model
        .as_deref()
        .ok_or_else(|| Error::Config(format!("mode {} requires \"model\"", cfg.mode)))
}

fn run_eval(cfg: &RunConfig) -> Result<()> {
    let out = prepared_out_dir(cfg)?;
    let model_path = model_dir(cfg)?;
    let records = load_records(cfg)?;
    let kind = checkpoint_kind(model_path)?;
    let report: EvalReport = match kind.as_str() {
        KIND_FLOW => {
            let model = load_flow(model_path)?;
            check_flow_geometry(cfg, &model)?;
            let data = groups_from_records(&records, cfg.n_max)?;
            eval_flow(&model, &data, cfg.with_head)?
        }
        KIND_TEMPORAL => {
            let model = load_temporal(model_path)?;
            check_temporal_geometry(cfg, &model)?;
            let seqs: Vec<FrameSequence> = sequences_from_records(&records, cfg.n_max)?
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            eval_temporal(&model, &seqs, cfg.t, cfg.aggregation)?
        }
        other => {
            return Err(Error::Config(format!(
                "checkpoint kind \"{other}\" cannot be evaluated"
            )))
        }
    };
    // Persisted copies zero the wall-clock so reruns byte-compare equal.
    let mut persisted = report.clone();
    persisted.runtime_stats.seconds = 0.0;
    fs::write(out.join(REPORT_TEXT), persisted.render())?;
    let mut json = serde_json::to_string_pretty(&persisted)?;
    json.push('\n');
    fs::write(out.join(REPORT_JSON), json)?;
    write_run_manifest(out, cfg)?;
    print!("{}", report.render());
    println!(
        "scored {} samples in {:.3}s; report under {}",
        report.runtime_stats.samples,
        report.runtime_stats.seconds,
        out.display()
    );
    Ok(())
}

fn run_gen_data(cfg: &RunConfig) -> Result<()> {
    let out = prepared_out_dir(cfg)?;
    let gen = cfg
        .gen
        .as_ref()
        .ok_or_else(|| Error::Config("mode gen-data requires \"gen\"".into()))?;
    let records = gen_dataset(gen)?;
    write_dataset(&out.join(DATASET_FILE), &records)?;
    let (train, test) = split_by_video(&records, cfg.train_fraction, cfg.seed)?;
    write_dataset(&out.join(TRAIN_SPLIT_FILE), &train)?;
    write_dataset(&out.join(TEST_SPLIT_FILE), &test)?;
    write_run_manifest(out, cfg)?;
    println!(
        "generated {} records ({} train / {} test) under {}",
        records.len(),
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn run_grad_check(cfg: &RunConfig) -> Result<()> {
    let entries = run_gradient_suite(cfg.seed)?;
    let mut text = String::new();
    let mut failures = 0usize;
    for e in &entries {
        let verdict = if e.max_rel_err <= SUITE_TOLERANCE {
            "pass"
        } else {
            failures += 1;
            "FAIL"
        };
        writeln!(text, "{:<26} {:>10.3e}  {verdict}", e.name, e.max_rel_err).unwrap();
    }
    writeln!(
        text,
        "{} checks, {failures} failures, tolerance {SUITE_TOLERANCE:e}",
        entries.len()
    )
    .unwrap();
    print!("{text}");
    if cfg.out_dir.is_some() {
        let out = prepared_out_dir(cfg)?;
        fs::write(out.join(GRAD_REPORT_FILE), &text)?;
        write_run_manifest(out, cfg)?;
    }
    if failures > 0 {
        return Err(Error::Divergence {
            context: "gradient check",
            msg: format!(
                "{failures} of {} checks exceeded tolerance {SUITE_TOLERANCE:e}",
                entries.len()
            ),
        });
    }
    Ok(())
}

fn run_inspect(cfg: &RunConfig) -> Result<()> {
    let out = prepared_out_dir(cfg)?;
    let model_path = model_dir(cfg)?;
    let records = load_records(cfg)?;
    let kind = checkpoint_kind(model_path)?;
    let rendered = match kind.as_str() {
        KIND_FLOW => {
            let model = load_flow(model_path)?;
            check_flow_geometry(cfg, &model)?;
            let groups: Vec<_> = groups_from_records(&records, cfg.n_max)?
                .into_iter()
                .map(|(g, _)| g)
                .collect();
            render_trace(&trace_flow(&model, &groups)?)?
        }
        KIND_TEMPORAL => {
            let model = load_temporal(model_path)?;
            check_temporal_geometry(cfg, &model)?;
            let seqs = sequences_from_records(&records, cfg.n_max)?;
            render_trace(&trace_temporal(&model, &seqs, cfg.t, cfg.aggregation)?)?
        }
        other => {
            return Err(Error::Config(format!(
                "checkpoint kind \"{other}\" cannot be inspected"
            )))
        }
    };
    fs::write(out.join(INSPECT_FILE), &rendered)?;
    write_run_manifest(out, cfg)?;
    print!("{rendered}");
    Ok(())
}
