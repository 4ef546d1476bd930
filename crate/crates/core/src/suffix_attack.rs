//! Universal adversarial suffix: greedy coordinate gradient search guided by
//! variance-tuned one-hot gradients, conditioned on the current adversarial
//! image.
//!
//! The momentum/variance recursion feeds candidate *ranking* only; the
//! accept/reject decision always uses the exact untuned loss, with the
//! incumbent suffix included so the recorded loss never increases.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image_attack::{momentum_update, variance_combine};
use crate::imagestate::ImageState;
use crate::loss::{batch_loss, batch_loss_and_grads, AssembledInput, GradWant};
use crate::model::Model;
use crate::tensor::{one_hot, Element, Tensor};
use crate::tokenizer::{Tokenizer, FILLER};

/// Discrete suffix tokens plus their one-hot coefficient view. Rows of the
/// coefficient matrix stay consistent with the token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuffixState {
    tokens: Vec<usize>,
    vocab: usize,
}

impl SuffixState {
    /// `l` copies of the fixed filler token (the exclamation-mark analogue).
    pub fn filler(len: usize, tokenizer: &Tokenizer) -> Self {
        SuffixState {
            tokens: vec![tokenizer.special(FILLER); len],
            vocab: tokenizer.vocab_size(),
        }
    }

    pub fn from_tokens(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        Ok(SuffixState { tokens, vocab })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// One-hot coefficient rows `[l, V]`.
    pub fn coefficients(&self) -> Tensor<f64> {
        one_hot(&self.tokens, self.vocab)
    }

    pub fn substitute(&self, position: usize, token: usize) -> Self {
        debug_assert!(position < self.tokens.len() && token < self.vocab);
        let mut tokens = self.tokens.clone();
        tokens[position] = token;
        SuffixState {
            tokens,
            vocab: self.vocab,
        }
    }
}

/// One single-token substitution proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Proposal {
    pub position: usize,
    pub token: usize,
}

#[derive(Debug, Clone)]
pub struct SuffixAttackParams {
    pub iters: usize,
    pub momentum: f64,
    pub neighbors: usize,
    pub candidate_batch: usize,
    pub top_k: usize,
    pub variance_enabled: bool,
}

/// Mean one-hot gradient of the adversarial loss over the behavior batch,
/// evaluated at the given coefficient rows (the current one-hot suffix, or a
/// perturbed point for variance tuning).
pub fn suffix_gradient<E: Element>(
    model: &Model<E>,
    image: &ImageState,
    assembleds: &[AssembledInput],
    coefficients: &Tensor<f64>,
) -> Result<(f64, Tensor<f64>)> {
    let (loss, grads) = batch_loss_and_grads(
        model,
        image,
        assembleds,
        Some(coefficients),
        GradWant { pixels: false, suffix: true },
    )?;
    Ok((loss, grads.suffix))
}

/// Gradient-variance term over `m` uniform `[-1, 1]` coefficient
/// perturbations. Exactly zero (with no generator consumption) when `m` is
/// zero, which makes the zero-draw run bit-identical to the variance-tuning
/// ablation.
pub fn variance_tune_suffix<E: Element>(
    model: &Model<E>,
    image: &ImageState,
    assembleds: &[AssembledInput],
    coefficients: &Tensor<f64>,
    center_grad: &Tensor<f64>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f64>> {
    if m == 0 {
        return Ok(Tensor::zeros(center_grad.shape().to_vec()));
    }
    let mut neighbor_grads = Vec::with_capacity(m);
    for _ in 0..m {
        let mut perturbed = coefficients.clone();
        for v in perturbed.data_mut() {
            *v += rng.gen_range(-1.0..=1.0);
        }
        let (_, g) = suffix_gradient(model, image, assembleds, &perturbed)?;
        neighbor_grads.push(g.into_data());
    }
    let v = variance_combine(&neighbor_grads, center_grad.data());
    Tensor::new(center_grad.shape().to_vec(), v)
}

/// Per-position candidate sets: the `k` tokens with the most negative tuned
/// gradient components (largest first-order predicted loss decrease), ties
/// broken by lower token id.
pub fn topk_candidates(tuned_gradient: &Tensor<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let vocab = tuned_gradient.cols();
    if k > vocab {
        return Err(Error::Config(format!("top-k {k} exceeds vocabulary {vocab}")));
    }
    let mut out = Vec::with_capacity(tuned_gradient.rows());
    for r in 0..tuned_gradient.rows() {
        let row = tuned_gradient.row(r);
        let mut ids: Vec<usize> = (0..vocab).collect();
        ids.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
        ids.truncate(k);
        out.push(ids);
    }
    Ok(out)
}

/// Draw `batch` proposals: a uniform suffix position, then a uniform token
/// from that position's candidate set. Tokens equal to the incumbent at that
/// position are excluded so every proposal differs in exactly one position.
pub fn propose_batch(
    candidates: &[Vec<usize>],
    incumbent: &SuffixState,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Proposal> {
    debug_assert_eq!(candidates.len(), incumbent.len());
    let filtered: Vec<Vec<usize>> = candidates
        .iter()
        .enumerate()
        .map(|(pos, set)| {
            set.iter()
                .copied()
                .filter(|&t| t != incumbent.tokens()[pos])
                .collect()
        })
        .collect();
    if filtered.iter().all(Vec::is_empty) {
        return Vec::new();
    }
    let mut proposals = Vec::with_capacity(batch);
    for _ in 0..batch {
        loop {
            let position = rng.gen_range(0..filtered.len());
            if filtered[position].is_empty() {
                continue;
            }
            let token = filtered[position][rng.gen_range(0..filtered[position].len())];
            proposals.push(Proposal { position, token });
            break;
        }
    }
    proposals
}

/// Evaluate the exact loss of every proposal plus the incumbent and return
/// the argmin. Ties keep the incumbent, then the lowest batch index.
pub fn best_replacement<E: Element>(
    model: &Model<E>,
    image: &ImageState,
    assembleds: &[AssembledInput],
    incumbent: &SuffixState,
    batch: &[Proposal],
) -> Result<(SuffixState, f64)> {
    let incumbent_loss = batch_loss(model, image, assembleds)?;
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|p| {
            let s = incumbent.substitute(p.position, p.token);
            let with: Vec<AssembledInput> = assembleds
                .iter()
                .map(|a| a.with_suffix(s.tokens().to_vec()))
                .collect();
            batch_loss(model, image, &with)
        })
        .collect::<Result<_>>()?;

    let mut best = incumbent.clone();
    let mut best_loss = incumbent_loss;
    for (p, &l) in batch.iter().zip(&losses) {
        if l < best_loss {
            best_loss = l;
            best = incumbent.substitute(p.position, p.token);
        }
    }
    Ok((best, best_loss))
}

/// Run the suffix attack for `params.iters` iterations over a fixed behavior
/// batch, conditioned on the given image. Returns the final suffix, the
/// recorded incumbent-loss trace (initial loss plus one entry per iteration,
/// non-increasing), and degenerate-gradient events.
pub fn attack_suffix<E: Element>(
    model: &Model<E>,
    base_assembleds: &[AssembledInput],
    image: &ImageState,
    s0: &SuffixState,
    params: &SuffixAttackParams,
    variance_rng: &mut ChaCha8Rng,
    proposal_rng: &mut ChaCha8Rng,
) -> Result<(SuffixState, Vec<f64>, Vec<String>)> {
    if base_assembleds.is_empty() {
        return Err(Error::Config("empty behavior set".to_string()));
    }
    let mut current = s0.clone();
    let mut g = Tensor::<f64>::zeros(vec![current.len(), current.vocab()]);
    let mut v = Tensor::<f64>::zeros(vec![current.len(), current.vocab()]);
    let mut trace = Vec::with_capacity(params.iters + 1);
    let mut events = Vec::new();

    let assembled_with = |s: &SuffixState| -> Vec<AssembledInput> {
        base_assembleds
            .iter()
            .map(|a| a.with_suffix(s.tokens().to_vec()))
            .collect()
    };

    let initial = batch_loss(model, image, &assembled_with(&current))?;
    trace.push(initial);
    if current.is_empty() {
        return Ok((current, trace, events));
    }

    for t in 0..params.iters {
        let assembleds = assembled_with(&current);
        let coeffs = current.coefficients();
        let (_, grad) = suffix_gradient(model, image, &assembleds, &coeffs)?;

        let tuned = match momentum_update(g.data(), grad.data(), v.data(), params.momentum) {
            Ok(data) => Tensor::new(vec![current.len(), current.vocab()], data)?,
            Err(e) => {
                events.push(format!("suffix iteration {t}: {e}; iteration skipped"));
                trace.push(*trace.last().unwrap());
                continue;
            }
        };
        g = tuned;

        v = if params.variance_enabled {
            variance_tune_suffix(
                model,
                image,
                &assembleds,
                &coeffs,
                &grad,
                params.neighbors,
                variance_rng,
            )?
        } else {
            Tensor::zeros(vec![current.len(), current.vocab()])
        };

        let candidates = topk_candidates(&g, params.top_k.min(current.vocab()))?;
        let batch = propose_batch(&candidates, &current, params.candidate_batch, proposal_rng);
        if batch.is_empty() {
            events.push(format!("suffix iteration {t}: no admissible proposals"));
            trace.push(*trace.last().unwrap());
            continue;
        }
        let (next, loss) = best_replacement(model, image, &assembleds, &current, &batch)?;
        current = next;
        trace.push(loss);
    }
    Ok((current, trace, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn filler_suffix_is_one_hot_consistent() {
        let tok = Tokenizer::toy();
        let s = SuffixState::filler(10, &tok);
        assert_eq!(s.len(), 10);
        let c = s.coefficients();
        for (r, &t) in s.tokens().iter().enumerate() {
            for col in 0..s.vocab() {
                let expected = if col == t { 1.0 } else { 0.0 };
                assert_eq!(c.get2(r, col), expected);
            }
        }
    }

    #[test]
    fn topk_picks_most_negative_with_tie_rule() {
        let g = Tensor::new(vec![1, 4], vec![0.3, -0.5, 0.1, -0.2]).unwrap();
        assert_eq!(topk_candidates(&g, 2).unwrap()[0], vec![1, 3]);

        let tie = Tensor::new(vec![1, 4], vec![-1.0, -1.0, 0.0, 0.0]).unwrap();
        assert_eq!(topk_candidates(&tie, 1).unwrap()[0], vec![0]);

        let g = Tensor::new(vec![1, 4], vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(topk_candidates(&g, 4).unwrap()[0], vec![3, 2, 1, 0]);
    }

    #[test]
    fn topk_rejects_k_over_vocab() {
        let g = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(topk_candidates(&g, 5).is_err());
    }

    #[test]
    fn proposals_differ_in_exactly_one_position() {
        let tok = Tokenizer::toy();
        let s = SuffixState::filler(5, &tok);
        let candidates = vec![vec![1usize, 2, 3, s.tokens()[0]]; 5];
        let mut rng = stream_rng(0, Stream::SuffixProposal);
        let batch = propose_batch(&candidates, &s, 64, &mut rng);
        assert_eq!(batch.len(), 64);
        for p in &batch {
            assert!(p.position < 5);
            assert_ne!(p.token, s.tokens()[p.position]);
        }
    }

    #[test]
    fn proposal_positions_are_uniform() {
        let tok = Tokenizer::toy();
        let s = SuffixState::filler(4, &tok);
        let candidates = vec![vec![1usize, 2, 3]; 4];
        let mut rng = stream_rng(1, Stream::SuffixProposal);
        let n = 10_000usize;
        let batch = propose_batch(&candidates, &s, n, &mut rng);
        let mut counts = [0usize; 4];
        for p in &batch {
            counts[p.position] += 1;
        }
        // binomial(n, 1/4): sigma = sqrt(n * p (1-p))
        let expected = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() < 3.0 * sigma,
                "position {i} drawn {c} times, expected {expected}"
            );
        }
    }

    #[test]
    fn single_proposal_batch() {
        let tok = Tokenizer::toy();
        let s = SuffixState::filler(2, &tok);
        let candidates = vec![vec![9usize], vec![9usize]];
        let mut rng = stream_rng(2, Stream::SuffixProposal);
        let batch = propose_batch(&candidates, &s, 1, &mut rng);
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].token, 9);
    }

    #[test]
    fn empty_when_only_incumbent_available() {
        let tok = Tokenizer::toy();
        let s = SuffixState::filler(2, &tok);
        let inc = s.tokens()[0];
        let candidates = vec![vec![inc], vec![inc]];
        let mut rng = stream_rng(3, Stream::SuffixProposal);
        assert!(propose_batch(&candidates, &s, 8, &mut rng).is_empty());
    }
}
