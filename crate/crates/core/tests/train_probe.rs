use std::time::Instant;

use mmjail_core::corpus::{gen_synthetic, split};
use mmjail_core::eval::{evaluate_set, EvalConfig};
use mmjail_core::model::{ModelConfig, Role};
use mmjail_core::orchestrator::{run_multimodal, AttackConfig};
use mmjail_core::tokenizer::Tokenizer;
use mmjail_core::train::{align_from_base, pretrain_base, train_aligned, TrainerConfig};

#[test]
#[ignore = "manual probe"]
fn probe_training_convergence() {
    let corpus = gen_synthetic(520, &Tokenizer::toy(), 0).unwrap();
    let tcfg = TrainerConfig {
        check_every: 200,
        ..TrainerConfig::default()
    };
    let start = Instant::now();
    match train_aligned::<f64>(&corpus, ModelConfig::desk(), Role::Surrogate, &tcfg) {
        Ok((model, stats)) => {
            println!(
                "converged in {} steps ({:.1?}): refusal {:.3}, benign {:.3}, loss {:.4}, params {}",
                stats.steps,
                start.elapsed(),
                stats.refusal_rate,
                stats.benign_rate,
                stats.mean_loss,
                model.params.count(),
            );
        }
        Err(e) => panic!("training failed after {:.1?}: {e}", start.elapsed()),
    }
}

#[test]
#[ignore = "manual probe"]
fn probe_attack_desk_scale() {
    let corpus = gen_synthetic(520, &Tokenizer::toy(), 0).unwrap();
    let t0 = Instant::now();
    let base_cfg = TrainerConfig { seed: 7, ..TrainerConfig::default() };
    let (base, _) = pretrain_base::<f64>(&corpus, ModelConfig::desk(), &base_cfg).unwrap();
    let align_cfg = TrainerConfig {
        seed: 0,
        min_steps: 400,
        check_every: 200,
        ..TrainerConfig::default()
    };
    let (model, _) = align_from_base(&base, &corpus, Role::Surrogate, &align_cfg).unwrap();

    let flagged = corpus.flagged_subset();
    let spec = split(&flagged, 25, 100, 0).unwrap();
    let train: Vec<_> = flagged
        .iter()
        .filter(|r| spec.train.contains(&r.id))
        .cloned()
        .collect();
    let test: Vec<_> = flagged
        .iter()
        .filter(|r| spec.test.contains(&r.id))
        .cloned()
        .collect();

    let ecfg = EvalConfig::default();
    let clean = mmjail_core::imagestate::ImageState::clean(8, 8, 1);
    let floor = evaluate_set(&model, &clean, &[], &train, &ecfg).unwrap();

    let cfg = AttackConfig {
        outer_iters: 20,
        image_iters: 10,
        suffix_iters: 5,
        seed: 0,
        ..AttackConfig::ours()
    };
    let t1 = Instant::now();
    let outcome = run_multimodal(&model, &train, &cfg).unwrap();
    let p = &outcome.pair.provenance;
    let post = evaluate_set(
        &model,
        &outcome.pair.image,
        outcome.pair.suffix.tokens(),
        &train,
        &ecfg,
    )
    .unwrap();
    let held = evaluate_set(
        &model,
        &outcome.pair.image,
        outcome.pair.suffix.tokens(),
        &test,
        &ecfg,
    )
    .unwrap();
    println!(
        "floor {:.1}%, attack {:.0?}: loss {:.4} -> {:.4} ({:.1}%), train prefix {:.1}, held prefix {:.1}, total {:.0?}",
        floor.asr,
        t1.elapsed(),
        p.initial_loss,
        p.final_loss,
        100.0 * (1.0 - p.final_loss / p.initial_loss),
        post.prefix_rate,
        held.prefix_rate,
        t0.elapsed()
    );
}

#[test]
#[ignore = "manual probe"]
fn probe_transfer_orderings() {
    let corpus = gen_synthetic(520, &Tokenizer::toy(), 0).unwrap();
    let t0 = Instant::now();
    let arch = ModelConfig::desk();
    let base_cfg = TrainerConfig { seed: 7, ..TrainerConfig::default() };
    let (base, _) = pretrain_base::<f64>(&corpus, arch.clone(), &base_cfg).unwrap();
    let (surrogate, sstats) =
        align_from_base(&base, &corpus, Role::Surrogate, &TrainerConfig::alignment(0)).unwrap();
    let target_cfg = TrainerConfig {
        junk_fraction: 0.5,
        max_junk_len: 6,
        ..TrainerConfig::alignment(1000)
    };
    let (target, tstats) = align_from_base(&base, &corpus, Role::Target, &target_cfg).unwrap();
    println!(
        "both models trained in {:.0?} (surrogate refusal {:.2} benign {:.2}; target refusal {:.2} benign {:.2})",
        t0.elapsed(),
        sstats.refusal_rate,
        sstats.benign_rate,
        tstats.refusal_rate,
        tstats.benign_rate
    );

    let flagged = corpus.flagged_subset();
    let spec = split(&flagged, 25, 100, 0).unwrap();
    let train: Vec<_> = flagged
        .iter()
        .filter(|r| spec.train.contains(&r.id))
        .cloned()
        .collect();
    let test: Vec<_> = flagged
        .iter()
        .filter(|r| spec.test.contains(&r.id))
        .cloned()
        .take(50)
        .collect();
    let ecfg = EvalConfig::default();

    let scaled = |preset: &str, seed: u64| -> AttackConfig {
        AttackConfig {
            outer_iters: 6,
            image_iters: 4,
            suffix_iters: 6,
            behavior_batch: 8,
            candidate_batch: 64,
            seed,
            ..AttackConfig::preset(preset).unwrap()
        }
    };

    for preset in ["ours", "ours@suffix_t", "ours@image_t", "ours@suffix", "ours@image"] {
        let t1 = Instant::now();
        let mut white = Vec::new();
        let mut transfer = Vec::new();
        for seed in 0..5u64 {
            let outcome = run_multimodal(&surrogate, &train, &scaled(preset, seed)).unwrap();
            let w = evaluate_set(
                &surrogate,
                &outcome.pair.image,
                outcome.pair.suffix.tokens(),
                &test,
                &ecfg,
            )
            .unwrap();
            let x = evaluate_set(
                &target,
                &outcome.pair.image,
                outcome.pair.suffix.tokens(),
                &test,
                &ecfg,
            )
            .unwrap();
            white.push(w.asr);
            transfer.push(x.asr);
        }
        let med = |mut v: Vec<f64>| -> f64 {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        println!(
            "{preset}: white ASRs {white:?} (median {:.0}), transfer ASRs {transfer:?} (median {:.0}), {:.0?}",
            med(white.clone()),
            med(transfer.clone()),
            t1.elapsed()
        );
    }
    println!("total {:.0?}", t0.elapsed());
}
