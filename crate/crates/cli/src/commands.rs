use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use prn::checkpoint::Checkpoint;
use prn::dataset::{generate_synthetic_dataset, index_dataset, SyntheticSpec};
use prn::imaging::{load_image, save_heatmap, save_image, save_mask};
use prn::model::PrnModel;
use prn::pipeline::{evaluate_model, write_report, write_scores_csv};
use prn::rng::{self, Stream};
use prn::synth::SampleKind;
use prn::train::{synthesize, train};
use prn::{PrnError, Result};
use serde::Serialize;
use toml::Value;

use crate::args::{EvalArgs, KindArg, ScoreArgs, SynthAnomaliesArgs, SynthDatasetArgs, TrainArgs};
use crate::overrides::resolve;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PrnError::io(dir, e))
}

pub fn synth_dataset(a: &SynthDatasetArgs) -> Result<()> {
    let spec = SyntheticSpec {
        category: a.category.clone(),
        n_normal: a.n_normal,
        n_test_normal: a.n_test_normal,
        n_test_anomalous: a.n_test_anomalous,
        resolution: a.resolution,
        seed: a.seed,
    };
    let dir = generate_synthetic_dataset(&a.out, &spec)?;
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct AnomalyRow {
    file: String,
    kind: &'static str,
    beta: f32,
    normal_index: usize,
    seen_index: Option<usize>,
    attempts: usize,
    mask_pixels: usize,
}

pub fn synth_anomalies(a: &SynthAnomaliesArgs) -> Result<()> {
    let cfg = resolve(&a.config, &[])?;
    let index = index_dataset(&a.data, &a.category, cfg.train.n_seen_anomalies, cfg.seed)?;
    let data = index.training_data(&cfg)?;
    let kinds: Vec<SampleKind> = match a.kind {
        KindArg::Ea => vec![SampleKind::Ea],
        KindArg::Hea => vec![SampleKind::Hea],
        KindArg::Hoa => vec![SampleKind::Hoa],
        KindArg::Mixed => [(cfg.train.ea, SampleKind::Ea), (cfg.train.hea, SampleKind::Hea), (cfg.train.hoa, SampleKind::Hoa)]
            .into_iter()
            .filter(|(on, k)| *on && (*k != SampleKind::Ea || !data.seen.is_empty()))
            .map(|(_, k)| k)
            .collect(),
    };
    if kinds.is_empty() {
        return Err(PrnError::config("no anomaly kind is enabled"));
    }
    create_dir(&a.out)?;
    let manifest_path = a.out.join("manifest.csv");
    let fail = |e: csv::Error| PrnError::Format { path: manifest_path.clone(), reason: e.to_string() };
    let mut manifest = csv::Writer::from_path(&manifest_path).map_err(fail)?;
    for i in 0..a.count {
        let kind = kinds[i % kinds.len()];
        let mut rng = rng::substream(cfg.seed, Stream::Augmentation, i as u64);
        let (sample, normal_index, seen_index, attempts) = synthesize(kind, &data, &cfg, &mut rng)?;
        let stem = format!("{i:04}_{}", kind.as_str());
        save_image(&sample.image, &a.out.join(format!("{stem}.png")))?;
        save_mask(&sample.mask, &a.out.join(format!("{stem}_mask.png")))?;
        manifest
            .serialize(AnomalyRow {
                file: format!("{stem}.png"),
                kind: kind.as_str(),
                beta: sample.beta.unwrap_or(1.0),
                normal_index,
                seen_index,
                attempts,
                mask_pixels: sample.mask.count(),
            })
            .map_err(fail)?;
    }
    manifest.flush().map_err(|e| PrnError::io(&manifest_path, e))?;
    println!("{} samples written to {}", a.count, a.out.display());
    Ok(())
}

fn step_checkpoint_path(out: &Path, step: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "prnckpt".into());
    out.with_file_name(format!("{stem}.step{step:05}.{ext}"))
}

fn model_checkpoint(model: &PrnModel, index_manifest: &str) -> Checkpoint {
    let mut ckpt = model.to_checkpoint();
    ckpt.metadata.insert("dataset_index".into(), serde_json::Value::String(index_manifest.to_string()));
    ckpt
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let extra = [
        ("train.steps", a.steps.map(|v| Value::Integer(v as i64))),
        ("train.batch_size", a.batch_size.map(|v| Value::Integer(v as i64))),
        ("train.lr", a.lr.map(Value::Float)),
        ("train.n_seen_anomalies", a.n_seen.map(|v| Value::Integer(v as i64))),
    ];
    let mut cfg = resolve(&a.config, &extra)?;
    let index = index_dataset(&a.data, &a.category, cfg.train.n_seen_anomalies, cfg.seed)?;
    if cfg.train.ea && index.seen.is_empty() {
        eprintln!("note: no seen anomalies, extended anomalies disabled");
        cfg.train.ea = false;
    }
    let data = index.training_data(&cfg)?;
    let manifest = index.manifest();
    let mut log_file = match &a.log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p).map_err(|e| PrnError::io(p, e))?),
        None => None,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let every = cfg.train.checkpoint_every;
    let outcome = train(&cfg, &data, |entry, model| {
        if !a.quiet {
            println!("{entry}");
        }
        if let (Some(f), Some(p)) = (log_file.as_mut(), a.log.as_ref()) {
            writeln!(f, "{entry}").map_err(|e| PrnError::io(p, e))?;
        }
        if every > 0 && entry.step % every == 0 && entry.step < cfg.train.steps {
            model_checkpoint(model, &manifest).write(&step_checkpoint_path(&a.out, entry.step))?;
        }
        Ok(())
    })?;
    model_checkpoint(&outcome.model, &manifest).write(&a.out)?;
    println!("checkpoint {}", a.out.display());
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let model = PrnModel::from_checkpoint(&Checkpoint::read(&a.checkpoint)?)?;
    let cfg = &model.config;
    let index = index_dataset(&a.data, &a.category, cfg.train.n_seen_anomalies, cfg.seed)?;
    let test = index.test_set(cfg.encoder.input_size)?;
    let (report, scored) = evaluate_model(&model, &test, &cfg.eval)?;
    create_dir(&a.out)?;
    write_report(&report, &a.out.join("report.txt"))?;
    write_scores_csv(&scored, &a.out.join("scores.csv"))?;
    if a.heatmaps {
        for s in &scored {
            let path = a.out.join("heatmaps").join(format!("{}.png", s.id));
            create_dir(path.parent().unwrap())?;
            save_heatmap(&s.map, &path)?;
        }
    }
    print!("{}", report.to_text());
    Ok(())
}

pub fn score_cmd(a: &ScoreArgs) -> Result<()> {
    let model = PrnModel::from_checkpoint(&Checkpoint::read(&a.checkpoint)?)?;
    let image = load_image(&a.image, model.input_size())?;
    let id = a.image.display().to_string();
    let score = model.forward(&image, &id)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_heatmap(&score.map, &a.out)?;
    println!("{:.6}", score.image_score);
    Ok(())
}
