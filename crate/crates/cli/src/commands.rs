//! Command implementations. Every command validates its configuration before
//! touching outputs, locks its output directory, writes artifacts atomically,
//! and finishes with a manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use mmjail_core::artifact::{self, DirLock};
use mmjail_core::checkpoint;
use mmjail_core::corpus::{self, BehaviorRecord, Corpus};
use mmjail_core::eval::{self, EvalConfig, EvalReport, Metric, TransferMatrix};
use mmjail_core::model::{Model, ModelConfig, Role};
use mmjail_core::orchestrator::{run_multimodal, Precision};
use mmjail_core::tensor::Element;
use mmjail_core::tokenizer::Tokenizer;
use mmjail_core::train::{self, TrainerConfig};

use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;
use crate::{Arch, CliError, Command, PrecisionArg, RoleArg, Stage};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { out_dir, size, seed } => gen_data(&out_dir, size, seed),
        Command::TrainToy {
            corpus,
            out_dir,
            stage,
            base,
            seed,
            init_seed,
            arch,
            role,
            junk_fraction,
            max_junk_len,
        } => train_toy(
            &corpus, &out_dir, stage, base.as_deref(), seed, init_seed, arch, role,
            junk_fraction, max_junk_len,
        ),
        Command::Attack { model, corpus, out_dir, preset, config, set, seed } => {
            attack(&model, &corpus, &out_dir, &preset, config.as_deref(), &set, seed)
        }
        Command::Eval {
            model,
            corpus,
            bundle,
            out_dir,
            config,
            set,
            seed,
            in_context,
            refusal_phrases,
            precision,
        } => eval_cmd(
            &model, &corpus, &bundle, &out_dir, config.as_deref(), &set, seed, in_context,
            refusal_phrases.as_deref(), precision,
        ),
        Command::Transfer {
            bundles,
            models,
            corpus,
            out_dir,
            config,
            set,
            seed,
            precision,
        } => transfer(&bundles, &models, &corpus, &out_dir, config.as_deref(), &set, seed, precision),
        Command::Report { inputs, out_dir } => report(&inputs, &out_dir),
    }
}

fn draw_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(rand::random)
}

fn core(e: mmjail_core::Error) -> CliError {
    CliError::from_core(e)
}

fn load_run_config(
    preset: &str,
    file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<(RunConfig, u64), CliError> {
    let mut cfg = RunConfig::from_preset(preset)?;
    if let Some(f) = file {
        cfg.apply_file(f)?;
    }
    for pair in sets {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(CliError::Usage(format!("--set expects key=value, got {pair:?}")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    let seed = match (seed, cfg.seed_explicit) {
        (Some(s), _) => s,
        (None, true) => cfg.attack.seed,
        (None, false) => rand::random(),
    };
    cfg.attack.seed = seed;
    Ok((cfg, seed))
}

fn gen_data(out_dir: &Path, size: usize, seed: Option<u64>) -> Result<(), CliError> {
    let seed = draw_seed(seed);
    let _lock = DirLock::acquire(out_dir).map_err(core)?;
    let mut manifest = ManifestBuilder::new("gen-data", seed);
    manifest.config_digest(artifact::sha256_hex(format!("gen-data size={size}").as_bytes()));

    let started = Instant::now();
    let corpus = corpus::gen_synthetic(size, &Tokenizer::toy(), seed).map_err(core)?;
    let path = out_dir.join("behaviors.csv");
    corpus::save_behaviors(&corpus, &path).map_err(core)?;
    manifest.artifact("behaviors.csv");
    manifest.timing("generate", started.elapsed().as_secs_f64());
    manifest.write(out_dir, &format!("success: {} records", corpus.len()))?;
    log::info!("wrote {} records to {}", corpus.len(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_toy(
    corpus_path: &Path,
    out_dir: &Path,
    stage: Stage,
    base: Option<&Path>,
    seed: Option<u64>,
    init_seed: Option<u64>,
    arch: Arch,
    role: RoleArg,
    junk_fraction: Option<f64>,
    max_junk_len: Option<usize>,
) -> Result<(), CliError> {
    if stage == Stage::Align && base.is_none() {
        return Err(CliError::Usage(
            "--stage align requires --base <FILE>".to_string(),
        ));
    }
    let seed = draw_seed(seed);
    let model_cfg = match arch {
        Arch::Desk => ModelConfig::desk(),
        Arch::Tiny => ModelConfig::tiny(64),
    };
    let role = match role {
        RoleArg::Surrogate => Role::Surrogate,
        RoleArg::Target => Role::Target,
    };
    let mut tcfg = match stage {
        Stage::Align => TrainerConfig::alignment(seed),
        _ => TrainerConfig { seed, ..TrainerConfig::default() },
    };
    tcfg.init_seed = init_seed;
    if let Some(f) = junk_fraction {
        tcfg.junk_fraction = f;
    }
    if let Some(l) = max_junk_len {
        tcfg.max_junk_len = l;
    }

    let _lock = DirLock::acquire(out_dir).map_err(core)?;
    let mut manifest = ManifestBuilder::new("train-toy", seed);
    manifest.input("corpus", corpus_path)?;
    if let Some(b) = base {
        manifest.input("base", b)?;
    }
    manifest.config_digest(artifact::sha256_hex(
        format!("{stage:?} {arch:?} {role:?} {tcfg:?}").as_bytes(),
    ));

    let corpus = corpus::load_behaviors(corpus_path).map_err(core)?;
    let started = Instant::now();
    let (model, stats): (Model<f64>, _) = match stage {
        Stage::Base => train::pretrain_base(&corpus, model_cfg, &tcfg).map_err(core)?,
        Stage::Full => train::train_aligned(&corpus, model_cfg, role, &tcfg).map_err(core)?,
        Stage::Align => {
            let base_model: Model<f64> =
                checkpoint::load(base.expect("checked above")).map_err(core)?;
            train::align_from_base(&base_model, &corpus, role, &tcfg).map_err(core)?
        }
    };
    let path = out_dir.join("model.ckpt");
    checkpoint::save(&model, &path).map_err(core)?;
    manifest.artifact("model.ckpt");
    manifest.timing("train", started.elapsed().as_secs_f64());
    let outcome = format!(
        "success: {} steps, refusal {:.1}%, benign {:.1}%",
        stats.steps,
        stats.refusal_rate * 100.0,
        stats.benign_rate * 100.0
    );
    manifest.write(out_dir, &outcome)?;
    log::info!("{outcome}; checkpoint at {}", path.display());
    Ok(())
}

/// Identifies the training split a bundle was optimized on.
#[derive(Debug, Serialize, Deserialize)]
struct SplitRecord {
    n_train: usize,
    split_seed: u64,
    train_ids: Vec<usize>,
}

fn attack(
    model_path: &Path,
    corpus_path: &Path,
    out_dir: &Path,
    preset: &str,
    config: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<(), CliError> {
    let (cfg, seed) = load_run_config(preset, config, sets, seed)?;
    cfg.attack.validate().map_err(CliError::usage_from)?;

    let _lock = DirLock::acquire(out_dir).map_err(core)?;
    let mut manifest = ManifestBuilder::new("attack", seed);
    manifest.input("model", model_path)?;
    manifest.input("corpus", corpus_path)?;
    manifest.config_digest(artifact::sha256_hex(cfg.render().as_bytes()));

    let corpus = corpus::load_behaviors(corpus_path).map_err(core)?;
    let flagged = corpus.flagged_subset();
    let split_seed = cfg.split_seed.unwrap_or(seed);
    let split = corpus::split(&flagged, cfg.n_train, 0, split_seed).map_err(core)?;
    let train: Vec<BehaviorRecord> = flagged
        .iter()
        .filter(|r| split.train.contains(&r.id))
        .cloned()
        .collect();

    let started = Instant::now();
    let outcome_text = match cfg.attack.precision {
        Precision::F64 => attack_typed::<f64>(model_path, &train, &cfg, out_dir)?,
        Precision::F32 => attack_typed::<f32>(model_path, &train, &cfg, out_dir)?,
    };
    let record = SplitRecord {
        n_train: cfg.n_train,
        split_seed,
        train_ids: split.train.clone(),
    };
    artifact::atomic_write(
        &out_dir.join("bundle").join("split.json"),
        &serde_json::to_vec_pretty(&record).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(core)?;

    for name in [
        "bundle/image.png",
        "bundle/suffix.json",
        "bundle/provenance.json",
        "bundle/trace_image.csv",
        "bundle/trace_suffix.csv",
        "bundle/split.json",
    ] {
        manifest.artifact(name);
    }
    manifest.timing("attack", started.elapsed().as_secs_f64());
    manifest.write(out_dir, &outcome_text)?;
    log::info!("{outcome_text}");
    Ok(())
}

fn attack_typed<E: Element>(
    model_path: &Path,
    train: &[BehaviorRecord],
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<String, CliError> {
    let model: Model<E> = checkpoint::load(model_path).map_err(core)?;
    let outcome = run_multimodal(&model, train, &cfg.attack).map_err(core)?;
    let suffix_text = model.tokenizer.detokenize(outcome.pair.suffix.tokens());
    artifact::save_bundle(&out_dir.join("bundle"), &outcome, &suffix_text).map_err(core)?;
    Ok(format!(
        "success: loss {:.4} -> {:.4}, suffix {:?}, {} degenerate events",
        outcome.pair.provenance.initial_loss,
        outcome.pair.provenance.final_loss,
        suffix_text,
        outcome.pair.provenance.degenerate_events.len()
    ))
}

fn eval_sets_for(
    corpus: &Corpus,
    bundle_dir: &Path,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<Vec<BehaviorRecord>>, CliError> {
    let flagged = corpus.flagged_subset();
    let exclude: Vec<usize> = read_split(bundle_dir)
        .map(|s| s.train_ids)
        .unwrap_or_default();
    let id_sets =
        corpus::resample_tests(&flagged, &exclude, cfg.n_test, seed, cfg.resamples).map_err(core)?;
    Ok(id_sets
        .iter()
        .map(|ids| {
            flagged
                .iter()
                .filter(|r| ids.contains(&r.id))
                .cloned()
                .collect()
        })
        .collect())
}

/// Accept either an attack output directory or its `bundle/` subdirectory.
fn resolve_bundle_dir(path: &Path) -> PathBuf {
    if path.join(artifact::IMAGE_FILE).exists() {
        path.to_path_buf()
    } else {
        path.join("bundle")
    }
}

fn read_split(bundle_dir: &Path) -> Option<SplitRecord> {
    let bytes = std::fs::read(bundle_dir.join("split.json")).ok()?;
    serde_json::from_slice(&bytes).ok()
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    model_path: &Path,
    corpus_path: &Path,
    bundle: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    in_context: usize,
    refusal_phrases: Option<&Path>,
    precision: PrecisionArg,
) -> Result<(), CliError> {
    let (cfg, seed) = load_run_config("ours", config, sets, seed)?;
    let _lock = DirLock::acquire(out_dir).map_err(core)?;
    let mut manifest = ManifestBuilder::new("eval", seed);
    manifest.input("model", model_path)?;
    manifest.input("corpus", corpus_path)?;
    manifest.input("bundle-image", &resolve_bundle_dir(bundle).join(artifact::IMAGE_FILE))?;
    manifest.config_digest(artifact::sha256_hex(cfg.render().as_bytes()));

    let mut ecfg = EvalConfig::default();
    if let Some(p) = refusal_phrases {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
        let phrases: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if phrases.is_empty() {
            return Err(CliError::Usage("refusal phrase list is empty".to_string()));
        }
        ecfg.refusal_phrases = phrases;
    }

    let corpus = corpus::load_behaviors(corpus_path).map_err(core)?;
    let bundle = resolve_bundle_dir(bundle);
    let behavior_sets = eval_sets_for(&corpus, &bundle, &cfg, seed)?;
    let pair = artifact::load_bundle(&bundle).map_err(core)?;

    let started = Instant::now();
    let report = match precision {
        PrecisionArg::F64 => eval_typed::<f64>(
            model_path, &corpus, &bundle, &pair, &behavior_sets, in_context, &ecfg,
        )?,
        PrecisionArg::F32 => eval_typed::<f32>(
            model_path, &corpus, &bundle, &pair, &behavior_sets, in_context, &ecfg,
        )?,
    };

    artifact::atomic_write(
        &out_dir.join("report.json"),
        &serde_json::to_vec_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(core)?;
    artifact::atomic_write(&out_dir.join("report.txt"), render_report(&report).as_bytes())
        .map_err(core)?;
    manifest.artifact("report.json");
    manifest.artifact("report.txt");
    manifest.timing("eval", started.elapsed().as_secs_f64());
    let outcome = format!(
        "success: ASR {:.1}%, ASR-G {}, prefix {:.1}%",
        report.asr,
        report
            .asr_g
            .map_or("absent".to_string(), |v| format!("{v:.1}%")),
        report.prefix_rate
    );
    manifest.write(out_dir, &outcome)?;
    log::info!("{outcome}");
    Ok(())
}

fn eval_typed<E: Element>(
    model_path: &Path,
    corpus: &Corpus,
    bundle_dir: &Path,
    pair: &artifact::LoadedPair,
    behavior_sets: &[Vec<BehaviorRecord>],
    in_context: usize,
    ecfg: &EvalConfig,
) -> Result<EvalReport, CliError> {
    let model: Model<E> = checkpoint::load(model_path).map_err(core)?;
    let desc = format!(
        "pair seed {} on {:?} model",
        pair.provenance.seed, model.role
    );
    if in_context == 0 {
        return eval::evaluate(
            &model,
            &pair.image,
            &pair.suffix_tokens,
            behavior_sets,
            ecfg,
            &desc,
        )
        .map_err(core);
    }
    // demonstrations come from the bundle's training split
    let train_ids = read_split(bundle_dir)
        .map(|s| s.train_ids)
        .unwrap_or_default();
    let demos: Vec<(String, String)> = corpus
        .records
        .iter()
        .filter(|r| train_ids.contains(&r.id))
        .map(|r| (r.prompt.clone(), r.target.clone()))
        .collect();
    if demos.len() < in_context {
        return Err(CliError::Usage(format!(
            "--in-context {in_context} but only {} training demonstrations available",
            demos.len()
        )));
    }
    eval::evaluate_with_demos(
        &model,
        &pair.image,
        &pair.suffix_tokens,
        behavior_sets,
        &demos,
        in_context,
        ecfg,
        &format!("{desc}, {in_context} in-context rounds"),
    )
    .map_err(core)
}

#[allow(clippy::too_many_arguments)]
fn transfer(
    bundles: &[PathBuf],
    models: &[PathBuf],
    corpus_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    precision: PrecisionArg,
) -> Result<(), CliError> {
    let (cfg, seed) = load_run_config("ours", config, sets, seed)?;
    let _lock = DirLock::acquire(out_dir).map_err(core)?;
    let mut manifest = ManifestBuilder::new("transfer", seed);
    manifest.input("corpus", corpus_path)?;
    manifest.config_digest(artifact::sha256_hex(cfg.render().as_bytes()));

    let corpus = corpus::load_behaviors(corpus_path).map_err(core)?;
    // exclude every bundle's training ids from the evaluation pool
    let flagged = corpus.flagged_subset();
    let mut exclude = Vec::new();
    for b in bundles {
        if let Some(s) = read_split(&resolve_bundle_dir(b)) {
            exclude.extend(s.train_ids);
        }
    }
    let id_sets =
        corpus::resample_tests(&flagged, &exclude, cfg.n_test, seed, cfg.resamples).map_err(core)?;
    let behavior_sets: Vec<Vec<BehaviorRecord>> = id_sets
        .iter()
        .map(|ids| {
            flagged
                .iter()
                .filter(|r| ids.contains(&r.id))
                .cloned()
                .collect()
        })
        .collect();

    let started = Instant::now();
    let matrix = match precision {
        PrecisionArg::F64 => transfer_typed::<f64>(bundles, models, &behavior_sets)?,
        PrecisionArg::F32 => transfer_typed::<f32>(bundles, models, &behavior_sets)?,
    };

    artifact::atomic_write(
        &out_dir.join("matrix.json"),
        &serde_json::to_vec_pretty(&matrix).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(core)?;
    artifact::atomic_write(
        &out_dir.join("matrix_asr.csv"),
        matrix.to_csv(Metric::Asr).as_bytes(),
    )
    .map_err(core)?;
    artifact::atomic_write(
        &out_dir.join("matrix_asrg.csv"),
        matrix.to_csv(Metric::AsrG).as_bytes(),
    )
    .map_err(core)?;
    for a in ["matrix.json", "matrix_asr.csv", "matrix_asrg.csv"] {
        manifest.artifact(a);
    }
    manifest.timing("transfer", started.elapsed().as_secs_f64());
    let failed: usize = matrix
        .cells
        .iter()
        .flatten()
        .filter(|c| c.report.is_none())
        .count();
    manifest.write(
        out_dir,
        &format!(
            "success: {}x{} cells, {failed} failed",
            matrix.pair_labels.len(),
            matrix.target_labels.len()
        ),
    )?;
    Ok(())
}

fn transfer_typed<E: Element>(
    bundles: &[PathBuf],
    models: &[PathBuf],
    behavior_sets: &[Vec<BehaviorRecord>],
) -> Result<TransferMatrix, CliError> {
    let mut pairs = Vec::new();
    for b in bundles {
        let loaded = artifact::load_bundle(&resolve_bundle_dir(b)).map_err(core)?;
        let label = b
            .file_name()
            .map_or_else(|| b.display().to_string(), |n| n.to_string_lossy().to_string());
        pairs.push((label, loaded.image, loaded.suffix_tokens));
    }
    let mut targets = Vec::new();
    for m in models {
        let model: Model<E> = checkpoint::load(m).map_err(core)?;
        let stem = m
            .file_stem()
            .map_or_else(|| m.display().to_string(), |n| n.to_string_lossy().to_string());
        let label = match m.parent().and_then(|p| p.file_name()) {
            Some(parent) => format!("{}/{stem}", parent.to_string_lossy()),
            None => stem,
        };
        targets.push((label, model));
    }
    eval::transfer_matrix(&pairs, &targets, behavior_sets, &EvalConfig::default()).map_err(core)
}

fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "evaluation: {}", report.split_desc);
    let _ = writeln!(out, "model digest: {}", &report.model_digest[..16]);
    let _ = writeln!(out, "resamplings: {}", report.resample_count);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>10}", "set", "ASR%", "ASR-G%", "prefix%");
    for (i, s) in report.resamples.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<12} {:>8.1} {:>8} {:>10.1}",
            format!("resample {i}"),
            s.asr,
            s.asr_g.map_or("absent".to_string(), |v| format!("{v:.1}")),
            s.prefix_rate
        );
    }
    let _ = writeln!(
        out,
        "{:<12} {:>8.1} {:>8} {:>10.1}",
        "mean",
        report.asr,
        report
            .asr_g
            .map_or("absent".to_string(), |v| format!("{v:.1}")),
        report.prefix_rate
    );
    out
}

fn report(inputs: &[PathBuf], out_dir: &Path) -> Result<(), CliError> {
    let _lock = DirLock::acquire(out_dir).map_err(core)?;
    let mut manifest = ManifestBuilder::new("report", 0);
    let mut out = String::new();
    for path in inputs {
        manifest.input(&path.display().to_string(), path)?;
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let _ = writeln!(out, "== {} ==", path.display());
        if let Ok(r) = serde_json::from_slice::<EvalReport>(&bytes) {
            out.push_str(&render_report(&r));
        } else if let Ok(m) = serde_json::from_slice::<TransferMatrix>(&bytes) {
            let _ = writeln!(out, "transfer ASR matrix:");
            out.push_str(&m.to_csv(Metric::Asr).replace(',', "\t"));
            let _ = writeln!(out, "transfer ASR-G matrix:");
            out.push_str(&m.to_csv(Metric::AsrG).replace(',', "\t"));
        } else {
            return Err(CliError::Input(format!(
                "{} is neither an evaluation report nor a transfer matrix",
                path.display()
            )));
        }
        out.push('\n');
    }
    artifact::atomic_write(&out_dir.join("summary.txt"), out.as_bytes()).map_err(core)?;
    manifest.artifact("summary.txt");
    manifest.write(out_dir, "success")?;
    println!("{out}");
    Ok(())
}
