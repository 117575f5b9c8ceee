//! Subcommand implementations.

use crate::config::{prepare_out_dir, write_config_echo, ConfigEcho, RunConfig};
use crate::svg::adjacency_heatmap;
use msgm_core::data::{generate_synthetic, load_manifest, write_dataset, Dataset};
use msgm_core::error::{MsgmError, Result};
use msgm_core::model::{load_checkpoint, MsgmConfig};
use msgm_core::signal::{Recording, BAND_NAMES, NUM_BANDS};
use msgm_core::tensor::{scan_forward, Tape, Tensor};
use msgm_core::train::{
    evaluate_model, featurize, train_all_folds, FeaturizedSegment, TrainOutcome,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as FmtWrite;
use std::path::Path;
use std::time::Instant;

/// Generate a synthetic dataset on disk (EEGB files + manifest.json).
pub fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let run = RunConfig::load(config)?;
    let seed = seed.unwrap_or(run.train.seed);
    prepare_out_dir(out, force)?;
    let recordings = generate_synthetic(&run.synthetic, seed)?;
    let names = run.synthetic.channel_names()?;
    let manifest = write_dataset(out, &recordings, &names)?;
    let model = run.model_config_for_synthetic()?;
    write_config_echo(
        out,
        &ConfigEcho {
            model: &model,
            train: &run.train,
            split: &run.split,
            synthetic: Some(&run.synthetic),
            seed,
        },
    )?;
    println!(
        "wrote {} recordings ({} subjects x {} trials) and {}",
        recordings.len(),
        run.synthetic.subjects,
        run.synthetic.trials_per_subject,
        manifest.display()
    );
    Ok(())
}

/// Extract per-scale rPSD features to CSV files plus a shape report.
pub fn cmd_features(manifest: &Path, config: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let run = RunConfig::load(config)?;
    let dataset = load_manifest(manifest, usize::MAX)?;
    if dataset.recordings.is_empty() {
        return Err(MsgmError::Data("manifest lists no recordings".into()));
    }
    let cfg = run.model_config_for_channels(dataset.recordings[0].channels)?;
    prepare_out_dir(out, force)?;

    let segments = featurize(&dataset.recordings, &cfg)?;
    let spec = cfg.effective_scale_spec();
    for k in 0..spec.num_scales() {
        let mut csv = String::from("batch,segment,channel,");
        csv.push_str(&BAND_NAMES.join(","));
        csv.push('\n');
        for (b, seg) in segments.iter().enumerate() {
            let t = &seg.per_scale[k];
            let (n_k, c) = (t.shape()[0], t.shape()[1]);
            for s in 0..n_k {
                for ch in 0..c {
                    write!(csv, "{b},{s},{ch}").unwrap();
                    for band in 0..NUM_BANDS {
                        write!(csv, ",{}", t.at(&[s, ch, band])).unwrap();
                    }
                    csv.push('\n');
                }
            }
        }
        std::fs::write(out.join(format!("features_scale{k}.csv")), csv)?;
        let n_k = spec.segments_per_window(k);
        println!(
            "scale {k}: shape {}x{}x{}x{} -> features_scale{k}.csv",
            segments.len(),
            n_k,
            cfg.channels(),
            NUM_BANDS
        );
    }
    write_config_echo(
        out,
        &ConfigEcho {
            model: &cfg,
            train: &run.train,
            split: &run.split,
            synthetic: None,
            seed: run.train.seed,
        },
    )?;
    Ok(())
}

fn fold_summary_csv(outcome: &TrainOutcome) -> String {
    let mut csv =
        String::from("fold,test_subjects,accuracy,f1,epochs_ran,best_epoch,failed\n");
    for f in &outcome.folds {
        let subjects =
            f.test_subjects.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("|");
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            f.fold, subjects, f.accuracy, f.f1, f.epochs_ran, f.best_epoch, f.failed
        )
        .unwrap();
    }
    csv
}

#[derive(serde::Serialize)]
struct ResultsDoc<'a> {
    seed: u64,
    model: &'a MsgmConfig,
    train: &'a msgm_core::train::TrainConfig,
    split: &'a msgm_core::train::SplitPlan,
    outcome: &'a TrainOutcome,
}

/// Train over all folds from a manifest or a synthetic dataset.
pub fn cmd_train(
    manifest: Option<&Path>,
    synthetic: bool,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    force: bool,
) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(e) = epochs {
        run.train.epochs = e;
    }

    let (recordings, cfg): (Vec<Recording>, MsgmConfig) = if synthetic {
        let recs = generate_synthetic(&run.synthetic, run.train.seed)?;
        let cfg = run.model_config_for_synthetic()?;
        (recs, cfg)
    } else {
        let manifest = manifest.ok_or_else(|| {
            MsgmError::Config("pass --manifest PATH or --synthetic".into())
        })?;
        let dataset = load_manifest(manifest, usize::MAX)?;
        if dataset.recordings.is_empty() {
            return Err(MsgmError::Data("manifest lists no recordings".into()));
        }
        let cfg = run.model_config_for_channels(dataset.recordings[0].channels)?;
        let bad: Vec<String> = dataset
            .recordings
            .iter()
            .filter(|r| r.label >= cfg.d_out)
            .map(|r| format!("subject {} trial {} label {}", r.subject_id, r.trial_id, r.label))
            .collect();
        if !bad.is_empty() {
            return Err(MsgmError::Data(format!(
                "labels out of range for {} classes: {}",
                cfg.d_out,
                bad.join("; ")
            )));
        }
        (dataset.recordings, cfg)
    };

    prepare_out_dir(out, force)?;
    write_config_echo(
        out,
        &ConfigEcho {
            model: &cfg,
            train: &run.train,
            split: &run.split,
            synthetic: synthetic.then_some(&run.synthetic),
            seed: run.train.seed,
        },
    )?;

    let outcome = train_all_folds(&recordings, &cfg, &run.train, &run.split, Some(out))?;
    let results = ResultsDoc {
        seed: run.train.seed,
        model: &cfg,
        train: &run.train,
        split: &run.split,
        outcome: &outcome,
    };
    std::fs::write(out.join("results.json"), serde_json::to_string_pretty(&results)?)?;
    std::fs::write(out.join("summary.csv"), fold_summary_csv(&outcome))?;

    for f in &outcome.folds {
        println!(
            "fold {}: test subjects {:?} acc {:.4} f1 {:.4}{}",
            f.fold,
            f.test_subjects,
            f.accuracy,
            f.f1,
            if f.failed { " (FAILED)" } else { "" }
        );
    }
    println!(
        "mean accuracy {:.4} ± {:.4}, mean macro-F1 {:.4} ± {:.4}",
        outcome.mean_accuracy, outcome.std_accuracy, outcome.mean_f1, outcome.std_f1
    );
    if outcome.all_failed() {
        return Err(MsgmError::Data("training diverged in every fold".into()));
    }
    Ok(())
}

/// Evaluate a checkpoint against a manifest; prints accuracy and macro-F1.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path) -> Result<()> {
    let (cfg, params) = load_checkpoint(checkpoint)?;
    let dataset: Dataset = load_manifest(manifest, cfg.d_out)?;
    if dataset.recordings.is_empty() {
        return Err(MsgmError::Data("manifest lists no recordings".into()));
    }
    let segments = featurize(&dataset.recordings, &cfg)?;
    let refs: Vec<&FeaturizedSegment> = segments.iter().collect();
    let metrics = evaluate_model(&params, &cfg, &refs, 32)?;
    println!("ACC {:.4} F1 {:.4}", metrics.accuracy, metrics.f1);
    Ok(())
}

fn median_ms(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Latency benchmarks for the scan, the graph encoder and feature
/// extraction, as CSV keyed by (component, sequence length).
pub fn cmd_bench(seq_lengths: &[usize], repeats: usize, out: Option<&Path>) -> Result<()> {
    if repeats == 0 {
        return Err(MsgmError::Config("repeats must be >= 1".into()));
    }
    if repeats == 1 {
        eprintln!("warning: a single repeat gives a high-variance median");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows: Vec<(String, usize, f64)> = Vec::new();

    // selective scan: (b=4, d_inner=64, d_state=16), n = sequence length
    let (b, di, ds) = (4usize, 64usize, 16usize);
    for &n in seq_lengths {
        let u: Vec<f64> = (0..b * n * di).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..b * n * di).map(|_| rng.gen_range(0.01..1.0)).collect();
        let a: Vec<f64> = (0..di * ds).map(|_| -rng.gen_range(0.1..2.0f64).exp()).collect();
        let bs: Vec<f64> = (0..b * n * ds).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cs: Vec<f64> = (0..b * n * ds).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..di).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let (y, _) = scan_forward(&u, &delta, &a, &bs, &cs, &d, b, n, di, ds, false);
            std::hint::black_box(y);
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(("scan".into(), n, median_ms(&mut samples)));
    }

    // Chebyshev encoder over n tokens (c=62, f=7 -> h=32, order 3)
    let (c, f, h) = (62usize, 7usize, 32usize);
    for &n in seq_lengths {
        let mut enc_rng = ChaCha8Rng::seed_from_u64(1);
        let enc = msgm_core::encoder::ChebEncoder::init(3, 1, f, h, &mut enc_rng);
        let mut adj = Tensor::zeros(vec![c, c]);
        for i in 0..c {
            for j in i + 1..c {
                if enc_rng.gen_bool(0.2) {
                    let w = enc_rng.gen_range(0.0..1.0);
                    adj.set(&[i, j], w);
                    adj.set(&[j, i], w);
                }
            }
        }
        let feats = Tensor::new(
            vec![n, c, f],
            (0..n * c * f).map(|_| enc_rng.gen_range(0.0..1.0)).collect(),
        );
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let mut tape = Tape::new();
            let fv = tape.leaf(feats.clone());
            let av = tape.leaf(adj.clone());
            let lap = msgm_core::encoder::scaled_laplacian_t(&mut tape, av)?;
            let bound = enc.bind(&mut tape);
            let out = msgm_core::encoder::cheb_forward_t(&mut tape, fv, &bound, lap)?;
            std::hint::black_box(tape.value(out).data());
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(("gcn".into(), n, median_ms(&mut samples)));
    }

    // rPSD extraction over an n-sample window (8 channels at 200 Hz)
    for &n in seq_lengths {
        let data: Vec<f64> = (0..8 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seg = msgm_core::signal::Segment {
            data,
            channels: 8,
            samples: n,
            fs: 200.0,
            subject_id: 0,
            trial_id: 0,
            label: 0,
        };
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            std::hint::black_box(msgm_core::signal::rpsd(&seg)?);
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(("features".into(), n, median_ms(&mut samples)));
    }

    let mut csv = String::from("component,seq_len,repeats,median_ms,ratio_vs_half\n");
    for (component, n, ms) in &rows {
        let ratio = rows
            .iter()
            .find(|(c2, n2, _)| c2 == component && *n2 * 2 == *n)
            .map(|(_, _, half)| format!("{:.4}", ms / half))
            .unwrap_or_default();
        writeln!(csv, "{component},{n},{repeats},{ms:.4},{ratio}").unwrap();
    }
    match out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    if let (Some(t1), Some(t2)) = (
        rows.iter().find(|(c, n, _)| c == "scan" && *n == 1024).map(|r| r.2),
        rows.iter().find(|(c, n, _)| c == "scan" && *n == 2048).map(|r| r.2),
    ) {
        eprintln!("scan linearity ratio t(2048)/t(1024) = {:.3}", t2 / t1);
    }
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let c = m.shape()[0];
    let mut csv = String::new();
    for i in 0..c {
        for j in 0..c {
            if j > 0 {
                csv.push(',');
            }
            write!(csv, "{}", m.at(&[i, j])).unwrap();
        }
        csv.push('\n');
    }
    std::fs::write(path, csv)?;
    Ok(())
}

/// Export initial and current adjacency matrices (CSV + SVG heatmaps) plus a
/// JSON sidecar with the initialization statistics.
pub fn cmd_graph_export(checkpoint: &Path, scale: usize, out: &Path, force: bool) -> Result<()> {
    let (cfg, params) = load_checkpoint(checkpoint)?;
    if scale >= params.priors.len() {
        return Err(MsgmError::Config(format!(
            "scale {scale} out of range; checkpoint has {} scales",
            params.priors.len()
        )));
    }
    prepare_out_dir(out, force)?;
    let labels = cfg.region_map.channel_names();
    let prior = &params.priors[scale];
    let c = cfg.channels();

    let write_pair = |stem: &str, m: &Tensor| -> Result<()> {
        write_matrix_csv(&out.join(format!("{stem}.csv")), m)?;
        let svg = adjacency_heatmap(m, &labels, stem);
        std::fs::write(out.join(format!("{stem}.svg")), svg)?;
        Ok(())
    };

    write_pair("global_initial", &prior.initial_global)?;
    write_pair("local_initial", &prior.initial_local)?;
    for copy in 0..2 {
        let slice = |t: &Tensor| {
            Tensor::new(vec![c, c], t.data()[copy * c * c..(copy + 1) * c * c].to_vec())
        };
        write_pair(&format!("global_trained_{copy}"), &slice(&prior.global))?;
        write_pair(&format!("local_trained_{copy}"), &slice(&prior.local))?;
    }

    #[derive(serde::Serialize)]
    struct Sidecar<'a> {
        scale: usize,
        sigma: f64,
        kappa_theta: f64,
        d_theta: f64,
        channel_names: &'a [String],
        region_map: &'a str,
    }
    let sidecar = Sidecar {
        scale,
        sigma: prior.stats.sigma,
        kappa_theta: prior.stats.kappa_theta,
        d_theta: prior.stats.d_theta,
        channel_names: &labels,
        region_map: &cfg.region_map.name,
    };
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&sidecar)?)?;
    println!("exported scale {scale} adjacency matrices to {}", out.display());
    Ok(())
}

/// Parse "1024,2048"-style length lists.
pub fn parse_seq_lengths(s: &str) -> std::result::Result<Vec<usize>, String> {
    let lengths: std::result::Result<Vec<usize>, _> =
        s.split(',').map(|part| part.trim().parse::<usize>()).collect();
    match lengths {
        Ok(v) if !v.is_empty() && v.iter().all(|&n| n >= 8) => Ok(v),
        Ok(_) => Err("sequence lengths must be >= 8".into()),
        Err(e) => Err(e.to_string()),
    }
}
