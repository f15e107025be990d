//! Stage implementations. Every stage verifies that its inputs carry the
//! current configuration digest, so stale intermediates fail loudly instead
//! of mixing into fresh outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cvl_core::io;
use cvl_core::metrics::SimilarityMatrix;
use cvl_core::pipeline::{self, Measure, RunConfig};
use cvl_core::qcml;

fn panel_dir(out: &Path) -> PathBuf {
    out.join("panel")
}

fn processed_dir(out: &Path) -> PathBuf {
    out.join("processed")
}

fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

fn model_path(out: &Path, k: usize) -> PathBuf {
    models_dir(out).join(format!("model_{k:03}.json"))
}

fn similarity_dir(out: &Path) -> PathBuf {
    out.join("similarity")
}

fn gamma_path(out: &Path) -> PathBuf {
    similarity_dir(out).join("gamma.json")
}

fn signals_path(out: &Path, measure: Measure) -> PathBuf {
    out.join("signals").join(format!("{}.csv", measure.label()))
}

fn report_dir(out: &Path, measure: Measure) -> PathBuf {
    out.join("report").join(measure.label())
}

fn sim_date_path(base: &Path, measure: Measure, seed: Option<usize>, date: impl std::fmt::Display) -> PathBuf {
    let mut dir = base.join(measure.label());
    if let Some(k) = seed {
        dir = dir.join(format!("seed_{k:03}"));
    }
    dir.join(format!("{date}.csv"))
}

pub fn generate(config: &RunConfig, out: &Path) -> Result<()> {
    let digest = config.digest();
    let raw = pipeline::generate(config)?;
    io::write_panel_dir(&panel_dir(out), &raw, &digest)?;
    println!(
        "generate: {} firms x {} dates -> {}",
        raw.n_firms(),
        raw.n_dates(),
        panel_dir(out).display()
    );
    Ok(())
}

pub fn preprocess(config: &RunConfig, out: &Path) -> Result<()> {
    let digest = config.digest();
    let raw = io::read_panel_dir(&panel_dir(out), Some(&digest))?;
    let processed = pipeline::prepare(config, &raw)?;
    io::write_panel_dir(&processed_dir(out), &processed, &digest)?;
    println!("preprocess: wrote {}", processed_dir(out).display());
    Ok(())
}

pub fn train(config: &RunConfig, out: &Path) -> Result<()> {
    if !config.measures.contains(&Measure::Qcml) {
        println!("train: no trained measure configured, nothing to do");
        return Ok(());
    }
    let digest = config.digest();
    let processed = io::read_panel_dir(&processed_dir(out), Some(&digest))?;
    let models = pipeline::train_models(config, &processed)?;
    let training = config.effective_training();
    for (k, model) in models.iter().enumerate() {
        let checkpoint = qcml::checkpoint(model, &training);
        io::write_model(&model_path(out, k), &checkpoint, &digest)?;
    }
    println!("train: {} checkpoints -> {}", models.len(), models_dir(out).display());
    Ok(())
}

fn load_models(config: &RunConfig, out: &Path, digest: &str) -> Result<Vec<qcml::QcmlModel>> {
    let mut models = Vec::with_capacity(config.training.ensemble_size);
    for k in 0..config.training.ensemble_size {
        let checkpoint = io::read_model(&model_path(out, k), Some(digest))?;
        models.push(checkpoint.model()?);
    }
    Ok(models)
}

pub fn similarity(config: &RunConfig, out: &Path) -> Result<()> {
    let digest = config.digest();
    let processed = io::read_panel_dir(&processed_dir(out), Some(&digest))?;
    let w = pipeline::windows(config, processed.n_dates())?;
    let eval_dates: Vec<usize> = (w.eval_start..processed.n_dates()).collect();
    let base = similarity_dir(out);

    let needs_models = config.measures.contains(&Measure::Qcml);
    let models = if needs_models {
        load_models(config, out, &digest)?
    } else {
        Vec::new()
    };
    let (gamma_qcml, calibrated) = if needs_models {
        match config.gamma_qcml {
            Some(g) => (g, false),
            None => (pipeline::calibrate_gamma_qcml(config, &processed, &models)?, true),
        }
    } else {
        (config.gamma_qcml.unwrap_or(f64::NAN), false)
    };

    io::write_gamma(
        &gamma_path(out),
        &io::GammaFile {
            config_digest: digest.clone(),
            tool_version: io::TOOL_VERSION.to_string(),
            gamma_euclidean: config.gamma_euclidean,
            gamma_qcml,
            calibrated,
        },
    )?;

    for &measure in &config.measures {
        match measure {
            Measure::Euclidean => {
                let sims = pipeline::euclidean_similarities(config, &processed, &eval_dates)?;
                for sim in &sims[0] {
                    io::write_similarity(&sim_date_path(&base, measure, None, sim.date), sim, &digest)?;
                }
                println!("similarity: euclidean over {} dates", sims[0].len());
            }
            Measure::Qcml => {
                let sims = pipeline::qcml_similarities(&processed, &eval_dates, &models, gamma_qcml)?;
                for (k, seed_sims) in sims.iter().enumerate() {
                    for sim in seed_sims {
                        io::write_similarity(
                            &sim_date_path(&base, measure, Some(k), sim.date),
                            sim,
                            &digest,
                        )?;
                    }
                }
                println!(
                    "similarity: qcml over {} dates x {} seeds (gamma {:.6})",
                    eval_dates.len(),
                    sims.len(),
                    gamma_qcml
                );
            }
        }
    }
    Ok(())
}

pub fn signal(config: &RunConfig, out: &Path) -> Result<()> {
    let digest = config.digest();
    let processed = io::read_panel_dir(&processed_dir(out), Some(&digest))?;
    let w = pipeline::windows(config, processed.n_dates())?;
    let eval_dates: Vec<usize> = (w.eval_start..processed.n_dates()).collect();
    let base = similarity_dir(out);

    for &measure in &config.measures {
        let seeds = match measure {
            Measure::Euclidean => 1,
            Measure::Qcml => config.training.ensemble_size,
        };
        let mut sims_per_seed: Vec<Vec<SimilarityMatrix>> = Vec::with_capacity(seeds);
        for k in 0..seeds {
            let seed_tag = match measure {
                Measure::Euclidean => None,
                Measure::Qcml => Some(k),
            };
            let mut sims = Vec::with_capacity(eval_dates.len());
            for &t in &eval_dates {
                let path = sim_date_path(&base, measure, seed_tag, processed.dates()[t]);
                sims.push(io::read_similarity(&path, Some(&digest))?);
            }
            sims_per_seed.push(sims);
        }
        let series = pipeline::signals_for_measure(config, &processed, &eval_dates, &sims_per_seed)?;
        io::write_signals(&signals_path(out, measure), &series, processed.firms(), &digest)?;
        println!(
            "signal: {} series -> {}",
            series.len(),
            signals_path(out, measure).display()
        );
    }
    Ok(())
}

pub fn backtest(config: &RunConfig, out: &Path) -> Result<()> {
    let digest = config.digest();
    let processed = io::read_panel_dir(&processed_dir(out), Some(&digest))?;
    for &measure in &config.measures {
        let series = io::read_signals(&signals_path(out, measure), &processed, Some(&digest))?;
        let report = cvl_core::backtest::run_backtest(&processed, &series, &config.backtest, &digest)?;
        io::write_report(&report_dir(out, measure), &report)?;
        let full = &report.sharpe[0];
        let line: Vec<String> = report
            .horizon_labels
            .iter()
            .zip(full)
            .map(|(l, c)| format!("{l}: {:.2}", c.sharpe))
            .collect();
        println!("backtest[{}]: full-sample Sharpe {}", measure.label(), line.join(", "));
    }
    Ok(())
}

pub fn report(config: &RunConfig, out: &Path) -> Result<()> {
    for &measure in &config.measures {
        let dir = report_dir(out, measure);
        for name in ["sharpe.csv", "half_life.csv"] {
            let path = dir.join(name);
            if !path.exists() {
                bail!("missing report file {}; run the backtest stage first", path.display());
            }
            println!("== {} ({})", name.trim_end_matches(".csv"), measure.label());
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            for line in text.lines().filter(|l| !l.starts_with('#')) {
                let cells: Vec<&str> = line.split(',').collect();
                println!("{}", cells.join("\t"));
            }
            println!();
        }
    }
    Ok(())
}
