//! Implementations behind the CLI subcommands. Each command reads its
//! inputs, delegates to the library, and writes everything it produced
//! under the requested output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Axis;
use sliceseg::checkpoint::{load_checkpoint, restore_network, write_checkpoint};
use sliceseg::data::cohort::{preprocess_cohort, PreprocessConfig};
use sliceseg::data::io::{read_split, save_gray_png, write_cohort_manifest, write_raw_study, CohortManifest};
use sliceseg::data::samples::{build_samples, load_studies, study_samples};
use sliceseg::data::stack::ProcessedStudy;
use sliceseg::data::{SplitSpec, TargetKind};
use sliceseg::network::{build_network, Mode};
use sliceseg::phantom::phantom_cohort;
use sliceseg::render::{overlay, save_rgb_png};
use sliceseg::trainer::{
    evaluate, finetune_igtv, pretrain_gtv, run_ablation, AblationSpec, TrainOutcome,
};
use sliceseg::{Result, SegError};

use crate::config::{write_snapshot, RunConfig};

fn io_err(path: &Path, e: impl std::fmt::Display) -> SegError {
    SegError::data(format!("{}: {e}", path.display()))
}

pub fn cmd_phantom_gen(out: &Path, cfg: &RunConfig, patients: usize, seed: u64) -> Result<()> {
    let studies = phantom_cohort(patients, &cfg.phantom.distribution, seed)?;
    let ids: Vec<String> = studies.iter().map(|s| s.patient_id.clone()).collect();
    write_cohort_manifest(out, &CohortManifest { seed, patients: ids })?;
    for study in &studies {
        write_raw_study(&out.join(&study.patient_id), &study.to_raw_study())?;
    }
    println!("wrote {} phantom patients to {}", studies.len(), out.display());
    Ok(())
}

pub fn cmd_preprocess(raw: &Path, out: &Path, cfg: &PreprocessConfig) -> Result<()> {
    let report = preprocess_cohort(raw, out, cfg)?;
    let report_path = out.join("preprocess_report.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| SegError::data(format!("report: {e}")))?;
    fs::write(&report_path, text).map_err(|e| io_err(&report_path, e))?;
    println!(
        "preprocessed {} patients: {} accepted, {} rejected",
        report.n_raw,
        report.accepted.len(),
        report.rejected.len()
    );
    for (id, rejections) in &report.rejected {
        for r in rejections {
            println!("  rejected {id} [{:?}]: {}", r.kind, r.reason);
        }
    }
    println!(
        "split: {} train / {} val / {} test",
        report.split.train.len(),
        report.split.val.len(),
        report.split.test.len()
    );
    Ok(())
}

fn persist_training_run(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    write_snapshot(out, cfg)?;
    let log_path = out.join("epochs.jsonl");
    let mut lines = String::new();
    for record in &outcome.report.epochs {
        lines.push_str(
            &serde_json::to_string(record).map_err(|e| SegError::data(format!("log: {e}")))?,
        );
        lines.push('\n');
    }
    fs::write(&log_path, lines).map_err(|e| io_err(&log_path, e))?;
    write_checkpoint(&out.join("checkpoint.ckpt"), &outcome.checkpoint)?;
    let mut report = format!(
        "stage: {}\nepochs_run: {}\nstopped_early: {}\n",
        outcome.report.stage,
        outcome.report.epochs.len(),
        outcome.report.stopped_early
    );
    if let Some(best) = outcome.checkpoint.meta.best_val_iou {
        report.push_str(&format!("best_val_iou: {best:.6}\n"));
    }
    if let Some(last) = outcome.report.epochs.last() {
        report.push_str(&format!("final_train_loss: {:.6}\n", last.train_loss));
    }
    let report_path = out.join("report.txt");
    fs::write(&report_path, report).map_err(|e| io_err(&report_path, e))?;
    Ok(())
}

pub fn cmd_pretrain(data: &Path, out: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    let split = read_split(data)?;
    let mut net_cfg = cfg.network.clone();
    net_cfg.mode = Mode::TwoD;
    net_cfg.stack_depth = 1;
    net_cfg.validate()?;
    let train = sliceseg::data::samples::load_samples(data, &split.train, TargetKind::Gtv, 1)?;
    let val = sliceseg::data::samples::load_samples(data, &split.val, TargetKind::Gtv, 1)?;
    println!("pretrain: {} train / {} val samples", train.len(), val.len());
    let mut net = build_network(&net_cfg, seed)?;
    println!("network parameters: {}", net.num_params());
    let outcome = pretrain_gtv(&mut net, &train, &val, &cfg.pretrain, cfg.augment.as_ref(), seed)?;
    persist_training_run(out, cfg, &outcome)?;
    println!(
        "pretrain finished after {} epochs; checkpoint at {}",
        outcome.report.epochs.len(),
        out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

pub fn cmd_finetune(
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
) -> Result<()> {
    let ckpt2d = load_checkpoint(checkpoint)?;
    let split = read_split(data)?;
    let depth = cfg.network.stack_depth;
    let train = sliceseg::data::samples::load_samples(data, &split.train, TargetKind::Igtv, depth)?;
    let val = sliceseg::data::samples::load_samples(data, &split.val, TargetKind::Igtv, depth)?;
    println!("finetune: {} train / {} val samples", train.len(), val.len());
    let outcome = finetune_igtv(
        &ckpt2d,
        &cfg.network,
        &train,
        &val,
        &cfg.finetune,
        &cfg.early_stop,
        cfg.augment.as_ref(),
        seed,
    )?;
    persist_training_run(out, cfg, &outcome)?;
    match outcome.checkpoint.meta.best_val_iou {
        Some(best) => println!(
            "finetune kept epoch {} (val IoU {best:.4}); checkpoint at {}",
            outcome.checkpoint.meta.epoch,
            out.join("checkpoint.ckpt").display()
        ),
        None => println!("finetune finished; checkpoint at {}", out.join("checkpoint.ckpt").display()),
    }
    Ok(())
}

fn partition<'a>(split: &'a SplitSpec, name: &str) -> Result<&'a [String]> {
    match name {
        "train" => Ok(&split.train),
        "val" => Ok(&split.val),
        "test" => Ok(&split.test),
        other => Err(SegError::config(format!(
            "unknown split partition {other:?} (expected train, val, or test)"
        ))),
    }
}

fn parse_target(s: &str) -> Result<TargetKind> {
    match s {
        "gtv" => Ok(TargetKind::Gtv),
        "igtv" => Ok(TargetKind::Igtv),
        other => Err(SegError::config(format!("unknown target {other:?} (expected gtv or igtv)"))),
    }
}

/// Default label for a network: GTV for the 2D pre-training stage, IGTV
/// for 2.5D models.
fn default_target(mode: Mode) -> TargetKind {
    match mode {
        Mode::TwoD => TargetKind::Gtv,
        Mode::TwoPointFiveD => TargetKind::Igtv,
    }
}

fn spacing_map(studies: &[ProcessedStudy]) -> BTreeMap<String, [f64; 2]> {
    studies.iter().map(|s| (s.patient_id.clone(), s.slice_spacing())).collect()
}

pub fn cmd_evaluate(
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    cfg: &RunConfig,
    target: Option<&str>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut net = restore_network(&ckpt)?;
    println!("network parameters: {}", net.num_params());
    let split = read_split(data)?;
    let ids = partition(&split, &cfg.evaluate.split)?;
    if ids.is_empty() {
        return Err(SegError::data(format!(
            "split partition {:?} is empty",
            cfg.evaluate.split
        )));
    }
    let kind = match target {
        Some(s) => parse_target(s)?,
        None => default_target(net.config.mode),
    };
    let studies = load_studies(data, ids)?;
    let samples = build_samples(&studies, kind, net.config.stack_depth)?;
    let report = evaluate(
        &net,
        &samples,
        &spacing_map(&studies),
        cfg.evaluate.threshold,
        cfg.finetune.batch_size,
    )?;
    write_snapshot(out, cfg)?;
    let records_path = out.join("records.json");
    let text = serde_json::to_string_pretty(&report.records)
        .map_err(|e| SegError::data(format!("records: {e}")))?;
    fs::write(&records_path, text).map_err(|e| io_err(&records_path, e))?;
    let table = sliceseg::metrics::format_report(&[
        ("per-slice".to_string(), report.per_slice.clone()),
        ("per-patient".to_string(), report.per_patient.clone()),
    ]);
    let table_path = out.join("report.txt");
    fs::write(&table_path, &table).map_err(|e| io_err(&table_path, e))?;
    print!("{table}");
    Ok(())
}

pub fn cmd_predict(
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    cfg: &RunConfig,
    patient: Option<&str>,
    target: Option<&str>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut net = restore_network(&ckpt)?;
    println!("network parameters: {}", net.num_params());
    let ids: Vec<String> = match patient {
        Some(p) => vec![p.to_string()],
        None => read_split(data)?.test.clone(),
    };
    if ids.is_empty() {
        return Err(SegError::data("no patients to predict (empty test partition)"));
    }
    let kind = match target {
        Some(s) => parse_target(s)?,
        None => default_target(net.config.mode),
    };
    let depth = net.config.stack_depth;
    for id in &ids {
        let study = sliceseg::data::io::import_study(&data.join(id))?;
        let samples = study_samples(&study, kind, depth)?;
        let preds = sliceseg::trainer::predict_samples(
            &net,
            &samples,
            cfg.finetune.batch_size,
            cfg.evaluate.threshold,
        )?;
        let dir = out.join(id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for (sample, pred) in samples.iter().zip(&preds) {
            let z = sample.slice_index;
            let mask_img = pred.mapv(|b| if b { 255.0 } else { 0.0 });
            save_gray_png(&dir.join(format!("slice_{z:03}_mask.png")), &mask_img)?;
            let base = study.ct.index_axis(Axis(0), z).to_owned();
            let gt = sample.target.mapv(|v| v > 0.5);
            let fig = overlay(&base, Some(&gt), Some(pred))?;
            save_rgb_png(&dir.join(format!("slice_{z:03}_overlay.png")), &fig)?;
        }
        println!("predicted {} slices for {id}", samples.len());
    }
    Ok(())
}

pub fn cmd_ablation(data: &Path, out: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    let split = read_split(data)?;
    let ids: Vec<String> = split.all_ids().iter().map(|s| s.to_string()).collect();
    let studies = load_studies(data, &ids)?;
    let spec = AblationSpec {
        network: cfg.network.clone(),
        pretrain: cfg.pretrain.clone(),
        finetune: cfg.finetune.clone(),
        stop: cfg.early_stop,
        threshold: cfg.evaluate.threshold,
        seed,
    };
    let report = run_ablation(&studies, &split, &spec)?;
    write_snapshot(out, cfg)?;
    let table_path = out.join("ablation.txt");
    fs::write(&table_path, &report.table).map_err(|e| io_err(&table_path, e))?;
    let json_path = out.join("ablation.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| SegError::data(format!("report: {e}")))?;
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;
    print!("{}", report.table);
    Ok(())
}
