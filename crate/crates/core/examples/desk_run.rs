//! Synthesizes the desk dataset, trains with default settings and prints
//! the evaluation report. An optional argument names a TOML config file.

use std::time::Instant;

use prn::dataset::{generate_synthetic_dataset, index_dataset, SyntheticSpec};
use prn::pipeline::{evaluate_constant, evaluate_model};
use prn::train::train;
use prn::PrnConfig;

fn main() -> prn::Result<()> {
    let start = Instant::now();
    let dir = std::env::temp_dir().join("prn-desk-run");
    let _ = std::fs::remove_dir_all(&dir);
    let spec = SyntheticSpec::desk(0);
    generate_synthetic_dataset(&dir, &spec)?;
    let cfg = match std::env::args().nth(1) {
        Some(path) => PrnConfig::load(path.as_ref())?,
        None => PrnConfig::default(),
    };
    let index = index_dataset(&dir, &spec.category, cfg.train.n_seen_anomalies, cfg.seed)?;
    let data = index.training_data(&cfg)?;
    let out = train(&cfg, &data, |s, _| {
        if s.step % 20 == 0 {
            println!("{s}");
        }
        Ok(())
    })?;
    let test = index.test_set(cfg.encoder.input_size)?;
    let (report, _) = evaluate_model(&out.model, &test, &cfg.eval)?;
    print!("{}", report.to_text());
    println!("base_rate = {:.4}", report.anomalous_pixel_rate());
    println!("constant image_auroc = {}", evaluate_constant(&test, 0.5, &cfg.eval)?.image_auroc);
    println!("elapsed_s = {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}
