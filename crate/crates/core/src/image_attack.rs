//! Universal adversarial image: sign-step gradient iteration with momentum
//! and neighborhood gradient-variance tuning, constrained to the valid pixel
//! range.
//!
//! Per iteration: the batch gradient of the adversarial loss is combined with
//! the previous iteration's variance term, normalized by its l1 norm and
//! folded into the momentum accumulator; the variance term for the *next*
//! iteration is then re-estimated at the current iterate; finally each pixel
//! moves by exactly `step` against the loss and is clipped to `[0, 255]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagestate::ImageState;
use crate::loss::{batch_loss_and_grads, AssembledInput, GradWant};
use crate::model::Model;
use crate::tensor::Element;

/// Momentum accumulator `g` and variance-tuning term `v`, both with image
/// extents and zero-initialized.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub g: Vec<f64>,
    pub v: Vec<f64>,
}

impl MomentumState {
    pub fn zeros(dim: usize) -> Self {
        MomentumState {
            g: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageAttackParams {
    pub iters: usize,
    /// Pixel units moved per iteration (the 1/255-of-normalized-range step).
    pub step: f64,
    pub momentum: f64,
    /// Neighborhood radius in pixel units.
    pub radius: f64,
    pub neighbors: usize,
    pub variance_enabled: bool,
}

/// Draw `k` images in the l-infinity neighborhood of `x`, component offsets
/// uniform in `[-r, r]`, clipped back into range. `r = 0` returns exact
/// copies without consuming the generator.
pub fn sample_image_neighborhood(
    x: &ImageState,
    radius: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ImageState> {
    if radius == 0.0 {
        return vec![x.clone(); k];
    }
    (0..k)
        .map(|_| {
            let offsets: Vec<f64> = (0..x.dim())
                .map(|_| rng.gen_range(-radius..=radius))
                .collect();
            x.offset_clipped(&offsets)
        })
        .collect()
}

/// The variance-tuning combination: mean of the neighborhood gradients minus
/// the gradient at the center.
pub fn variance_combine(neighbor_grads: &[Vec<f64>], center_grad: &[f64]) -> Vec<f64> {
    let inv = 1.0 / neighbor_grads.len().max(1) as f64;
    let mut acc = vec![0.0; center_grad.len()];
    for g in neighbor_grads {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    for (a, c) in acc.iter_mut().zip(center_grad) {
        *a = *a * inv - c;
    }
    acc
}

/// Gradient-variance term: mean neighborhood gradient minus the gradient at
/// the center. Exactly zero (with no generator consumption) when the radius
/// or sample count is zero, which makes the zero-radius run bit-identical to
/// the variance-tuning ablation.
pub fn variance_tune_image<E: Element>(
    model: &Model<E>,
    image: &ImageState,
    assembleds: &[AssembledInput],
    center_grad: &[f64],
    radius: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if radius == 0.0 || k == 0 {
        return Ok(vec![0.0; image.dim()]);
    }
    let samples = sample_image_neighborhood(image, radius, k, rng);
    let neighbor_grads: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            batch_loss_and_grads(
                model,
                s,
                assembleds,
                None,
                GradWant { pixels: true, suffix: false },
            )
            .map(|(_, g)| g.pixel)
        })
        .collect::<Result<_>>()?;
    Ok(variance_combine(&neighbor_grads, center_grad))
}

/// Variance-tuning based momentum:
/// `g_next = momentum * g + (grad + v) / l1(grad + v)`.
pub fn momentum_update(g: &[f64], grad: &[f64], v: &[f64], momentum: f64) -> Result<Vec<f64>> {
    let combined: Vec<f64> = grad.iter().zip(v).map(|(a, b)| a + b).collect();
    let norm: f64 = combined.iter().map(|x| x.abs()).sum();
    if norm == 0.0 {
        return Err(Error::DegenerateGradient(
            "zero-l1-norm combined gradient".to_string(),
        ));
    }
    Ok(g.iter()
        .zip(&combined)
        .map(|(gv, cv)| momentum * gv + cv / norm)
        .collect())
}

/// Move every pixel by exactly `step` in the sign of the given descent
/// direction (`sign(0) = 0`), then clip to `[0, 255]`.
pub fn pgd_step(x: &ImageState, direction: &[f64], step: f64) -> ImageState {
    let offsets: Vec<f64> = direction
        .iter()
        .map(|&d| {
            if d > 0.0 {
                step
            } else if d < 0.0 {
                -step
            } else {
                0.0
            }
        })
        .collect();
    x.offset_clipped(&offsets)
}

/// Run the image attack for `params.iters` iterations over a fixed behavior
/// batch (assembled with the current suffix). Returns the final image, the
/// per-iteration loss trace, and any degenerate-gradient events.
pub fn attack_image<E: Element>(
    model: &Model<E>,
    assembleds: &[AssembledInput],
    x0: &ImageState,
    params: &ImageAttackParams,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageState, Vec<f64>, Vec<String>)> {
    if assembleds.is_empty() {
        return Err(Error::Config("empty behavior set".to_string()));
    }
    let mut x = x0.clone();
    let mut state = MomentumState::zeros(x.dim());
    let mut trace = Vec::with_capacity(params.iters);
    let mut events = Vec::new();

    for t in 0..params.iters {
        let (loss, grads) = batch_loss_and_grads(
            model,
            &x,
            assembleds,
            None,
            GradWant { pixels: true, suffix: false },
        )?;
        trace.push(loss);

        let g_next = match momentum_update(&state.g, &grads.pixel, &state.v, params.momentum) {
            Ok(g) => g,
            Err(e) => {
                events.push(format!("image iteration {t}: {e}; step skipped"));
                continue;
            }
        };
        state.g = g_next;

        state.v = if params.variance_enabled {
            variance_tune_image(
                model,
                &x,
                assembleds,
                &grads.pixel,
                params.radius,
                params.neighbors,
                rng,
            )?
        } else {
            vec![0.0; x.dim()]
        };

        // descend the loss: step against the accumulated gradient
        let descent: Vec<f64> = state.g.iter().map(|v| -v).collect();
        x = pgd_step(&x, &descent, params.step);
    }
    Ok((x, trace, events))
}
