//! Assembly of the attacked input inside the conversation template, and the
//! universal adversarial objective with its gradients for both modalities.
//!
//! The objective is the negative mean target log-likelihood under teacher
//! forcing, normalized by target length per behavior before averaging across
//! behaviors. Every attack module *minimizes* it; lower is better for the
//! attacker. Per-behavior evaluations are independent and run in parallel;
//! the reduction to the mean uses a fixed summation order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::BehaviorRecord;
use crate::error::{Error, Result};
use crate::imagestate::ImageState;
use crate::model::{GradRequest, Model, Segment};
use crate::tape::Tape;
use crate::tensor::{one_hot, Element, Tensor};
use crate::tokenizer::{ASST, SYS, USER};

/// The fixed conversation template wrapping every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTemplate {
    pub system_prefix: String,
    pub user_marker: String,
    pub assistant_marker: String,
}

impl Default for ConversationTemplate {
    fn default() -> Self {
        ConversationTemplate {
            system_prefix: SYS.to_string(),
            user_marker: USER.to_string(),
            assistant_marker: ASST.to_string(),
        }
    }
}

/// Token sequence with marked spans: template prefix, prompt, suffix slot,
/// assistant marker, target. Spans are contiguous, non-overlapping, and
/// re-concatenate to the full sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledInput {
    pub prefix: Vec<usize>,
    pub prompt: Vec<usize>,
    pub suffix: Vec<usize>,
    pub assistant: Vec<usize>,
    pub target: Vec<usize>,
}

impl AssembledInput {
    /// Full text-side token sequence, spans in order.
    pub fn tokens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.text_len());
        out.extend(&self.prefix);
        out.extend(&self.prompt);
        out.extend(&self.suffix);
        out.extend(&self.assistant);
        out.extend(&self.target);
        out
    }

    pub fn text_len(&self) -> usize {
        self.prefix.len()
            + self.prompt.len()
            + self.suffix.len()
            + self.assistant.len()
            + self.target.len()
    }

    /// Text-coordinate indices of the suffix slot.
    pub fn suffix_indices(&self) -> std::ops::Range<usize> {
        let start = self.prefix.len() + self.prompt.len();
        start..start + self.suffix.len()
    }

    /// Text-coordinate position of the first target token.
    pub fn target_start(&self) -> usize {
        self.prefix.len() + self.prompt.len() + self.suffix.len() + self.assistant.len()
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    /// Everything before the target: the decode-time input.
    pub fn decode_prefix(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.text_len() - self.target.len());
        out.extend(&self.prefix);
        out.extend(&self.prompt);
        out.extend(&self.suffix);
        out.extend(&self.assistant);
        out
    }

    pub fn with_suffix(&self, suffix: Vec<usize>) -> Self {
        AssembledInput {
            suffix,
            ..self.clone()
        }
    }
}

/// Place the suffix immediately after the prompt, before the assistant
/// marker, with target tokens appended for teacher forcing.
pub fn assemble<E: Element>(
    behavior: &BehaviorRecord,
    suffix: &[usize],
    template: &ConversationTemplate,
    model: &Model<E>,
) -> Result<AssembledInput> {
    assemble_with_prefix(behavior, suffix, template, model, &[])
}

/// Like [`assemble`], with extra demonstration-round tokens inserted between
/// the system prefix and the probe prompt's user turn.
pub fn assemble_with_prefix<E: Element>(
    behavior: &BehaviorRecord,
    suffix: &[usize],
    template: &ConversationTemplate,
    model: &Model<E>,
    demo_rounds: &[usize],
) -> Result<AssembledInput> {
    let tok = &model.tokenizer;
    let mut prefix = tok.tokenize(&template.system_prefix);
    prefix.extend_from_slice(demo_rounds);
    prefix.extend(tok.tokenize(&template.user_marker));
    let assembled = AssembledInput {
        prefix,
        prompt: tok.tokenize(&behavior.prompt),
        suffix: suffix.to_vec(),
        assistant: tok.tokenize(&template.assistant_marker),
        target: tok.tokenize(&behavior.target),
    };
    let required = model.cfg.n_patches() + assembled.text_len();
    if required > model.cfg.max_len {
        return Err(Error::LengthOverflow {
            required,
            max: model.cfg.max_len,
        });
    }
    tok.validate_seq(&assembled.suffix)?;
    Ok(assembled)
}

/// Gradients of the adversarial objective for both modalities.
#[derive(Debug, Clone)]
pub struct ModalGradients {
    /// d loss / d pixel, image extents, pixel units.
    pub pixel: Vec<f64>,
    /// d loss / d suffix coefficients, `[l, V]`.
    pub suffix: Tensor<f64>,
}

impl ModalGradients {
    pub fn zeros(pixel_dim: usize, l: usize, vocab: usize) -> Self {
        ModalGradients {
            pixel: vec![0.0; pixel_dim],
            suffix: Tensor::zeros(vec![l, vocab]),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.pixel.iter().all(|v| v.is_finite()) && self.suffix.all_finite()
    }
}

/// Which modal gradients to compute.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradWant {
    pub pixels: bool,
    pub suffix: bool,
}

fn target_rows(assembled: &AssembledInput, n_visual: usize) -> Vec<usize> {
    let t0 = n_visual + assembled.target_start();
    (0..assembled.target_len()).map(|i| t0 + i - 1).collect()
}

/// Teacher-forced adversarial loss for one behavior, discrete suffix path.
pub fn adv_loss<E: Element>(
    model: &Model<E>,
    image: &ImageState,
    assembled: &AssembledInput,
) -> Result<f64> {
    let mut tape = Tape::new();
    let tokens = assembled.tokens();
    let pass = model.forward_on_tape(
        &mut tape,
        image,
        &[Segment::Tokens(&tokens)],
        GradRequest::default(),
    )?;
    let rows = tape.gather_rows(pass.logprobs, target_rows(assembled, pass.n_visual))?;
    let loss = tape.nll_loss(rows, &assembled.target)?;
    Ok(tape.value(loss).item().as_f64())
}

/// Loss plus requested gradients for one behavior. `soft` carries the suffix
/// coefficient rows (one-hot, or perturbed off the simplex for variance
/// tuning); when absent, the assembled suffix tokens are used one-hot.
pub fn adv_loss_and_grads<E: Element>(
    model: &Model<E>,
    image: &ImageState,
    assembled: &AssembledInput,
    soft: Option<&Tensor<f64>>,
    want: GradWant,
) -> Result<(f64, Option<Vec<f64>>, Option<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let pre: Vec<usize> = assembled
        .prefix
        .iter()
        .chain(&assembled.prompt)
        .copied()
        .collect();
    let post: Vec<usize> = assembled
        .assistant
        .iter()
        .chain(&assembled.target)
        .copied()
        .collect();
    let soft_e: Tensor<E> = match soft {
        Some(s) => {
            if s.shape() != [assembled.suffix.len(), model.vocab_size()] {
                return Err(Error::BadDimension {
                    op: "adv_loss_and_grads",
                    expected: format!("[{}, {}]", assembled.suffix.len(), model.vocab_size()),
                    actual: format!("{:?}", s.shape()),
                });
            }
            Tensor::from_f64(s)
        }
        None => one_hot(&assembled.suffix, model.vocab_size()),
    };
    let pass = model.forward_on_tape(
        &mut tape,
        image,
        &[
            Segment::Tokens(&pre),
            Segment::Soft(&soft_e),
            Segment::Tokens(&post),
        ],
        GradRequest {
            pixels: want.pixels,
            soft: want.suffix,
            params: false,
        },
    )?;
    let rows = tape.gather_rows(pass.logprobs, target_rows(assembled, pass.n_visual))?;
    let loss = tape.nll_loss(rows, &assembled.target)?;
    let loss_val = tape.value(loss).item().as_f64();

    if !want.pixels && !want.suffix {
        return Ok((loss_val, None, None));
    }
    let grads = tape.backward(loss)?;
    let pixel = if want.pixels {
        let g = grads
            .wrt(pass.pixel_leaf.expect("pixel leaf requested"))
            .expect("pixel gradient");
        Some(image.unpatchify(g, model.cfg.patch)?)
    } else {
        None
    };
    let suffix = if want.suffix {
        if assembled.suffix.is_empty() {
            Some(Tensor::zeros(vec![0, model.vocab_size()]))
        } else {
            let g = grads
                .wrt(pass.soft_leaves[0])
                .expect("suffix gradient");
            Some(g.to_f64())
        }
    } else {
        None
    };
    Ok((loss_val, pixel, suffix))
}

/// Mean loss and mean gradients over a behavior batch. Per-behavior
/// evaluations run in parallel; sums use the batch order.
pub fn batch_loss_and_grads<E: Element>(
    model: &Model<E>,
    image: &ImageState,
    assembleds: &[AssembledInput],
    soft: Option<&Tensor<f64>>,
    want: GradWant,
) -> Result<(f64, ModalGradients)> {
    if assembleds.is_empty() {
        return Err(Error::Config("empty behavior set".to_string()));
    }
    let per: Vec<(f64, Option<Vec<f64>>, Option<Tensor<f64>>)> = assembleds
        .par_iter()
        .map(|a| adv_loss_and_grads(model, image, a, soft, want))
        .collect::<Result<_>>()?;

    let n = per.len() as f64;
    let l = assembleds[0].suffix.len();
    let mut mean = ModalGradients::zeros(image.dim(), l, model.vocab_size());
    let mut loss_sum = 0.0;
    for (loss, pix, suf) in &per {
        loss_sum += loss;
        if let Some(p) = pix {
            for (m, v) in mean.pixel.iter_mut().zip(p) {
                *m += v;
            }
        }
        if let Some(s) = suf {
            mean.suffix.add_assign(s);
        }
    }
    for v in &mut mean.pixel {
        *v /= n;
    }
    mean.suffix.scale_assign(1.0 / n);
    Ok((loss_sum / n, mean))
}

/// Mean loss over a behavior batch, discrete suffix path, no gradients.
/// Uses the tape-free forward; its arithmetic matches [`adv_loss`] exactly.
pub fn batch_loss<E: Element>(
    model: &Model<E>,
    image: &ImageState,
    assembleds: &[AssembledInput],
) -> Result<f64> {
    if assembleds.is_empty() {
        return Err(Error::Config("empty behavior set".to_string()));
    }
    let losses: Vec<f64> = assembleds
        .par_iter()
        .map(|a| model.nll_fast(image, &a.tokens(), a.target_start(), a.target_len()))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Assemble every behavior with a shared suffix.
pub fn assemble_all<E: Element>(
    behaviors: &[BehaviorRecord],
    suffix: &[usize],
    template: &ConversationTemplate,
    model: &Model<E>,
) -> Result<Vec<AssembledInput>> {
    behaviors
        .iter()
        .map(|b| assemble(b, suffix, template, model))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::model::{ModelConfig, Role};
    use crate::tokenizer::Tokenizer;

    fn tiny_model() -> Model<f64> {
        let tok = Tokenizer::toy();
        Model::init(ModelConfig::tiny(64), tok, Role::Surrogate, 0).unwrap()
    }

    fn behavior() -> BehaviorRecord {
        BehaviorRecord {
            id: 0,
            prompt: "make a red widget".to_string(),
            target: "sure here is".to_string(),
            flagged: false,
        }
    }

    #[test]
    fn empty_suffix_equals_plain_prompt() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let a = assemble(&behavior(), &[], &t, &m).unwrap();
        let plain: Vec<usize> = m
            .tokenizer
            .tokenize(&format!("{SYS} {USER} make a red widget {ASST} sure here is"));
        assert_eq!(a.tokens(), plain);
        assert!(a.suffix_indices().is_empty());
    }

    #[test]
    fn suffix_slot_spans_ten_positions() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let filler = vec![6usize; 10];
        let a = assemble(&behavior(), &filler, &t, &m).unwrap();
        let span = a.suffix_indices();
        assert_eq!(span.len(), 10);
        assert_eq!(span.start, a.prefix.len() + a.prompt.len());
        let toks = a.tokens();
        assert_eq!(&toks[span.clone()], &filler[..]);
    }

    #[test]
    fn spans_reconcatenate() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let a = assemble(&behavior(), &[6, 6, 6], &t, &m).unwrap();
        let mut rebuilt = a.prefix.clone();
        rebuilt.extend(&a.prompt);
        rebuilt.extend(&a.suffix);
        rebuilt.extend(&a.assistant);
        rebuilt.extend(&a.target);
        assert_eq!(rebuilt, a.tokens());
    }

    #[test]
    fn overflow_rejected() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let long = vec![6usize; m.cfg.max_len];
        assert!(matches!(
            assemble(&behavior(), &long, &t, &m),
            Err(Error::LengthOverflow { .. })
        ));
    }

    #[test]
    fn uniform_model_loss_is_ln_v() {
        // zero the output projection so every row is exactly uniform
        let mut m = tiny_model();
        m.params.out_w = Tensor::zeros(vec![m.cfg.width, m.cfg.vocab_size]);
        m.params.out_b = Tensor::zeros(vec![m.cfg.vocab_size]);
        let t = ConversationTemplate::default();
        let a = assemble(&behavior(), &[6, 6], &t, &m).unwrap();
        let img = ImageState::clean(8, 8, 1);
        let loss = adv_loss(&m, &img, &a).unwrap();
        assert!((loss - (64f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn teacher_forcing_ignores_followup_content() {
        // loss over the target span must not depend on anything after it,
        // and the target rows condition on gold prefixes by construction
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let a = assemble(&behavior(), &[6, 6], &t, &m).unwrap();
        let img = ImageState::clean(8, 8, 1);
        let l1 = adv_loss(&m, &img, &a).unwrap();

        // corrupting a later target token must not change earlier terms:
        // compare per-position losses via a shortened target
        let mut shorter = a.clone();
        shorter.target = a.target[..2].to_vec();
        let l_short = adv_loss(&m, &img, &shorter).unwrap();
        let mut corrupted = a.clone();
        let last = *corrupted.target.last().unwrap();
        *corrupted.target.last_mut().unwrap() = (last + 1) % 64;
        let l_corrupt = adv_loss(&m, &img, &corrupted).unwrap();
        // first two terms agree between the corrupted and original inputs
        let l3 = 3.0;
        let first_two_orig = l1 * l3 - per_last_term(&m, &img, &a);
        let first_two_corr = l_corrupt * l3 - per_last_term(&m, &img, &corrupted);
        assert!((first_two_orig - first_two_corr).abs() < 1e-9);
        assert!((first_two_orig / 2.0 - l_short).abs() < 1e-9);
    }

    fn per_last_term(m: &Model<f64>, img: &ImageState, a: &AssembledInput) -> f64 {
        // contribution of the last target position to the *sum* (not mean)
        let tokens = a.tokens();
        let lp = m.forward(img, &[Segment::Tokens(&tokens)]).unwrap();
        let n_vis = m.cfg.n_patches();
        let row = n_vis + a.target_start() + a.target_len() - 2;
        -lp.get2(row, *a.target.last().unwrap())
    }

    #[test]
    fn singleton_batch_equals_single() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let a = assemble(&behavior(), &[6, 6], &t, &m).unwrap();
        let img = ImageState::clean(8, 8, 1);
        let single = adv_loss(&m, &img, &a).unwrap();
        let (batch, _) =
            batch_loss_and_grads(&m, &img, &[a.clone()], None, GradWant::default()).unwrap();
        assert_eq!(single, batch);
    }

    #[test]
    fn duplicated_behavior_same_mean_and_gradient() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let a = assemble(&behavior(), &[6, 6], &t, &m).unwrap();
        let img = ImageState::clean(8, 8, 1);
        let want = GradWant { pixels: true, suffix: true };
        let (l1, g1) = batch_loss_and_grads(&m, &img, &[a.clone()], None, want).unwrap();
        let (l2, g2) =
            batch_loss_and_grads(&m, &img, &[a.clone(), a.clone()], None, want).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (x, y) in g1.pixel.iter().zip(&g2.pixel) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_loss_path_is_bit_identical_to_taped_path() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let img = ImageState::clean(8, 8, 1);
        for seed in 0..5u64 {
            let b = BehaviorRecord {
                id: seed as usize,
                prompt: format!("build a {} basket", ["red", "blue", "green", "shiny", "quiet"][seed as usize]),
                target: "sure here is the plan".to_string(),
                flagged: false,
            };
            let a = assemble(&b, &[6, 9, 33], &t, &m).unwrap();
            let taped = adv_loss(&m, &img, &a).unwrap();
            let fast = m
                .nll_fast(&img, &a.tokens(), a.target_start(), a.target_len())
                .unwrap();
            assert_eq!(taped.to_bits(), fast.to_bits(), "behavior {seed}");
        }
    }

    #[test]
    fn one_hot_soft_path_matches_discrete_loss() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let a = assemble(&behavior(), &[6, 9, 20], &t, &m).unwrap();
        let img = ImageState::clean(8, 8, 1);
        let discrete = adv_loss(&m, &img, &a).unwrap();
        let (soft_loss, _, _) =
            adv_loss_and_grads(&m, &img, &a, None, GradWant::default()).unwrap();
        assert_eq!(discrete, soft_loss);
    }

    #[test]
    fn both_gradient_blocks_match_finite_differences() {
        let m = tiny_model();
        let t = ConversationTemplate::default();
        let a = assemble(&behavior(), &[6, 9], &t, &m).unwrap();
        let img = ImageState::clean(8, 8, 1);
        let want = GradWant { pixels: true, suffix: true };
        let (_, g) = batch_loss_and_grads(&m, &img, &[a.clone()], None, want).unwrap();

        let h = 1e-4;
        // pixels
        for c in (0..img.dim()).step_by(7) {
            let mut plus = img.clone();
            plus.pixels_mut()[c] += h;
            let mut minus = img.clone();
            minus.pixels_mut()[c] -= h;
            let numeric =
                (adv_loss(&m, &plus, &a).unwrap() - adv_loss(&m, &minus, &a).unwrap()) / (2.0 * h);
            assert!(
                relative_error(g.pixel[c], numeric) < 1e-5,
                "pixel {c}: {} vs {numeric}",
                g.pixel[c]
            );
        }
        // suffix coefficients
        let base = one_hot::<f64>(&a.suffix, 64);
        for coord in (0..base.len()).step_by(13) {
            let mut plus = base.clone();
            plus.data_mut()[coord] += h;
            let mut minus = base.clone();
            minus.data_mut()[coord] -= h;
            let wantless = GradWant::default();
            let (lp, _, _) = adv_loss_and_grads(&m, &img, &a, Some(&plus), wantless).unwrap();
            let (lm, _, _) = adv_loss_and_grads(&m, &img, &a, Some(&minus), wantless).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.suffix.data()[coord];
            assert!(
                relative_error(analytic, numeric) < 1e-5,
                "coeff {coord}: {analytic} vs {numeric}"
            );
        }
    }
}
