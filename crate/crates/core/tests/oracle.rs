//! The implementation vs an independently re-implemented 64-bit forward and
//! teacher-forced loss, plus frozen golden values for the fixed seed-0
//! untrained model.

mod common;

use mmjail_core::corpus::BehaviorRecord;
use mmjail_core::imagestate::ImageState;
use mmjail_core::loss::{adv_loss, assemble, batch_loss_and_grads, ConversationTemplate, GradWant};
use mmjail_core::model::{Model, ModelConfig, Role, Segment};
use mmjail_core::tokenizer::Tokenizer;

fn seed0_tiny() -> Model<f64> {
    Model::init(ModelConfig::tiny(64), Tokenizer::toy(), Role::Surrogate, 0).unwrap()
}

fn fixed_input() -> (ImageState, Vec<usize>) {
    let pixels: Vec<f64> = (0..64).map(|i| f64::from((i * 37 % 256) as u8)).collect();
    let image = ImageState::new(8, 8, 1, pixels).unwrap();
    let tokens = vec![1usize, 2, 7, 13, 25, 40, 3, 37, 38, 39];
    (image, tokens)
}

#[test]
fn forward_matches_independent_oracle() {
    let model = seed0_tiny();
    let (image, tokens) = fixed_input();
    let lp = model.forward(&image, &[Segment::Tokens(&tokens)]).unwrap();
    let oracle = common::oracle_logprobs(&model, &image, &tokens);
    assert_eq!(lp.rows(), oracle.len());
    for r in 0..lp.rows() {
        for c in 0..lp.cols() {
            let diff = (lp.get2(r, c) - oracle[r][c]).abs();
            assert!(diff < 1e-9, "row {r} col {c}: {} vs {}", lp.get2(r, c), oracle[r][c]);
        }
    }
}

#[test]
fn forward_matches_stored_golden_logprobs() {
    // first five entries of the last row, seed-0 untrained model on the
    // fixed input; values produced by the independent oracle
    const GOLDEN_LAST_ROW_HEAD: [f64; 5] = [
        -2.927445220772313,
        -5.753713771050529,
        -4.410905846940866,
        -3.2755990943777267,
        -3.8153471894760114,
    ];
    let model = seed0_tiny();
    let (image, tokens) = fixed_input();
    let lp = model.forward(&image, &[Segment::Tokens(&tokens)]).unwrap();
    let last = lp.row(lp.rows() - 1);
    let oracle = common::oracle_logprobs(&model, &image, &tokens);
    let oracle_last = &oracle[oracle.len() - 1];
    for i in 0..5 {
        assert!((last[i] - GOLDEN_LAST_ROW_HEAD[i]).abs() < 1e-9, "entry {i}: {}", last[i]);
        assert!((oracle_last[i] - GOLDEN_LAST_ROW_HEAD[i]).abs() < 1e-9);
    }
}

#[test]
fn adv_loss_matches_independent_oracle() {
    let model = seed0_tiny();
    let template = ConversationTemplate::default();
    let behavior = BehaviorRecord {
        id: 0,
        prompt: "craft a <flag> shiny lamp".to_string(),
        target: "sure here is the plan for the shiny lamp".to_string(),
        flagged: true,
    };
    let assembled = assemble(&behavior, &[6, 6, 6, 6], &template, &model).unwrap();
    let (image, _) = fixed_input();
    let ours = adv_loss(&model, &image, &assembled).unwrap();
    let oracle = common::oracle_adv_loss(&model, &image, &assembled);
    assert!((ours - oracle).abs() < 1e-9, "{ours} vs {oracle}");

    const GOLDEN_LOSS: f64 = 4.533_801_617_224_807;
    assert!((ours - GOLDEN_LOSS).abs() < 1e-9);
}

#[test]
fn batch_gradients_match_finite_differences_of_oracle() {
    // the oracle is also the independent evaluation route for gradient
    // checks: central differences of the oracle loss vs analytic gradients
    let model = seed0_tiny();
    let template = ConversationTemplate::default();
    let behavior = BehaviorRecord {
        id: 0,
        prompt: "build a <flag> red drum".to_string(),
        target: "sure here is the plan".to_string(),
        flagged: true,
    };
    let assembled = assemble(&behavior, &[6, 6], &template, &model).unwrap();
    let (image, _) = fixed_input();
    let (_, grads) = batch_loss_and_grads(
        &model,
        &image,
        &[assembled.clone()],
        None,
        GradWant { pixels: true, suffix: false },
    )
    .unwrap();

    let h = 1e-4;
    for c in (0..image.dim()).step_by(9) {
        let mut plus = image.clone();
        plus.pixels_mut()[c] += h;
        let mut minus = image.clone();
        minus.pixels_mut()[c] -= h;
        let numeric = (common::oracle_adv_loss(&model, &plus, &assembled)
            - common::oracle_adv_loss(&model, &minus, &assembled))
            / (2.0 * h);
        let analytic = grads.pixel[c];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() / denom < 1e-5,
            "pixel {c}: {analytic} vs {numeric}"
        );
    }
}
