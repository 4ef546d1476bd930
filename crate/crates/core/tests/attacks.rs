//! Attack-level properties on small victims: coordinate-step optimality
//! against brute force, trace monotonicity, ablation bit-identity under the
//! split-stream discipline, and toggle neutrality.

use mmjail_core::corpus::BehaviorRecord;
use mmjail_core::imagestate::ImageState;
use mmjail_core::loss::{assemble_all, batch_loss, ConversationTemplate};
use mmjail_core::model::{Model, ModelConfig, Role};
use mmjail_core::orchestrator::{run_multimodal, AttackConfig};
use mmjail_core::suffix_attack::{best_replacement, Proposal, SuffixState};
use mmjail_core::tokenizer::Tokenizer;

fn behaviors(n: usize) -> Vec<BehaviorRecord> {
    let adjs = ["red", "blue", "green", "small", "large"];
    let nouns = ["widget", "kite", "drum", "rope", "lamp"];
    (0..n)
        .map(|i| BehaviorRecord {
            id: i,
            prompt: format!("make a <flag> {} {}", adjs[i % 5], nouns[(i / 5) % 5]),
            target: format!("sure here is the plan for the {} {}", adjs[i % 5], nouns[(i / 5) % 5]),
            flagged: true,
        })
        .collect()
}

#[test]
fn best_replacement_equals_brute_force_v8_l2() {
    // vocabulary 8, suffix length 2: exhaustive candidate coverage, compared
    // against enumeration of all 16 single-token substitutions
    let tok = Tokenizer::toy_truncated(8);
    let template = ConversationTemplate::default();
    let behavior = BehaviorRecord {
        id: 0,
        prompt: "make make".to_string(),
        target: "make".to_string(),
        flagged: false,
    };
    let image = ImageState::clean(8, 8, 1);

    for trial in 0..100u64 {
        let model: Model<f64> =
            Model::init(ModelConfig::tiny(8), tok.clone(), Role::Surrogate, trial).unwrap();
        let start = vec![(trial as usize) % 8, (trial as usize / 8) % 8];
        let incumbent = SuffixState::from_tokens(start, 8).unwrap();
        let assembled = assemble_all(
            &[behavior.clone()],
            incumbent.tokens(),
            &template,
            &model,
        )
        .unwrap();

        // exhaustive batch: every (position, token) substitution
        let batch: Vec<Proposal> = (0..2)
            .flat_map(|position| (0..8).map(move |token| Proposal { position, token }))
            .collect();
        let (chosen, chosen_loss) =
            best_replacement(&model, &image, &assembled, &incumbent, &batch).unwrap();

        // brute force over the same 16 substitutions
        let mut best = f64::INFINITY;
        for p in &batch {
            let s = incumbent.substitute(p.position, p.token);
            let with: Vec<_> = assembled
                .iter()
                .map(|a| a.with_suffix(s.tokens().to_vec()))
                .collect();
            let loss = batch_loss(&model, &image, &with).unwrap();
            if loss < best {
                best = loss;
            }
        }
        let incumbent_loss = batch_loss(&model, &image, &assembled).unwrap();
        best = best.min(incumbent_loss);

        assert_eq!(
            chosen_loss.to_bits(),
            best.to_bits(),
            "trial {trial}: best_replacement loss {chosen_loss} vs brute force {best}"
        );
        assert!(chosen_loss <= incumbent_loss);
        let verify: Vec<_> = assembled
            .iter()
            .map(|a| a.with_suffix(chosen.tokens().to_vec()))
            .collect();
        assert_eq!(batch_loss(&model, &image, &verify).unwrap().to_bits(), best.to_bits());
    }
}

fn small_cfg(seed: u64) -> AttackConfig {
    AttackConfig {
        outer_iters: 2,
        image_iters: 3,
        suffix_iters: 3,
        behavior_batch: 3,
        candidate_batch: 16,
        top_k: 12,
        seed,
        ..AttackConfig::ours()
    }
}

fn small_model(seed: u64) -> Model<f64> {
    Model::init(ModelConfig::tiny(64), Tokenizer::toy(), Role::Surrogate, seed).unwrap()
}

#[test]
fn suffix_trace_is_monotone_nonincreasing() {
    let model = small_model(3);
    let outcome = run_multimodal(&model, &behaviors(4), &small_cfg(1)).unwrap();
    // within each outer iteration the recorded incumbent loss never increases
    for outer in 0..2 {
        let inner: Vec<f64> = outcome
            .suffix_trace
            .iter()
            .filter(|(o, _, _)| *o == outer)
            .map(|(_, _, l)| *l)
            .collect();
        assert!(!inner.is_empty());
        for w in inner.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trace increased: {w:?}");
        }
    }
}

#[test]
fn run_is_deterministic_per_seed() {
    let model = small_model(4);
    let a = run_multimodal(&model, &behaviors(4), &small_cfg(9)).unwrap();
    let b = run_multimodal(&model, &behaviors(4), &small_cfg(9)).unwrap();
    assert_eq!(a.pair.image, b.pair.image);
    assert_eq!(a.pair.suffix.tokens(), b.pair.suffix.tokens());
    assert_eq!(a.pair.provenance, b.pair.provenance);
    let c = run_multimodal(&model, &behaviors(4), &small_cfg(10)).unwrap();
    assert!(c.pair.image != a.pair.image || c.pair.suffix.tokens() != a.pair.suffix.tokens());
}

#[test]
fn disabled_image_left_bit_identical() {
    let model = small_model(5);
    let mut cfg = small_cfg(2);
    cfg.image_enabled = false;
    let outcome = run_multimodal(&model, &behaviors(4), &cfg).unwrap();
    assert_eq!(outcome.pair.image, ImageState::clean(8, 8, 1));
    assert!(outcome.image_trace.is_empty());

    let mut cfg = small_cfg(2);
    cfg.suffix_enabled = false;
    let outcome = run_multimodal(&model, &behaviors(4), &cfg).unwrap();
    assert_eq!(
        outcome.pair.suffix.tokens(),
        SuffixState::filler(cfg.suffix_len, &model.tokenizer).tokens()
    );
}

#[test]
fn zero_radius_matches_image_variance_ablation_bit_exactly() {
    let model = small_model(6);
    let mut with_zero_radius = small_cfg(3);
    with_zero_radius.image_radius = 0.0;
    let mut ablated = small_cfg(3);
    ablated.image_variance_enabled = false;

    let a = run_multimodal(&model, &behaviors(4), &with_zero_radius).unwrap();
    let b = run_multimodal(&model, &behaviors(4), &ablated).unwrap();
    assert_eq!(a.pair.image, b.pair.image);
    assert_eq!(a.pair.suffix.tokens(), b.pair.suffix.tokens());
    assert_eq!(a.image_trace, b.image_trace);
    assert_eq!(a.suffix_trace, b.suffix_trace);
}

#[test]
fn zero_draws_matches_suffix_variance_ablation_bit_exactly() {
    let model = small_model(7);
    let mut zero_draws = small_cfg(4);
    zero_draws.suffix_neighbors = 0;
    let mut ablated = small_cfg(4);
    ablated.suffix_variance_enabled = false;

    let a = run_multimodal(&model, &behaviors(4), &zero_draws).unwrap();
    let b = run_multimodal(&model, &behaviors(4), &ablated).unwrap();
    assert_eq!(a.pair.image, b.pair.image);
    assert_eq!(a.pair.suffix.tokens(), b.pair.suffix.tokens());
    assert_eq!(a.suffix_trace, b.suffix_trace);
}

#[test]
fn zero_outer_iterations_returns_initial_pair() {
    let model = small_model(8);
    let mut cfg = small_cfg(5);
    cfg.outer_iters = 0;
    let outcome = run_multimodal(&model, &behaviors(4), &cfg).unwrap();
    assert_eq!(outcome.pair.image, ImageState::clean(8, 8, 1));
    assert_eq!(
        outcome.pair.suffix.tokens(),
        SuffixState::filler(cfg.suffix_len, &model.tokenizer).tokens()
    );
}
