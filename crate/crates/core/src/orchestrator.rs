//! The alternating multimodal attack loop: per outer iteration, sample a
//! behavior batch, run the image attack conditioned on the current suffix,
//! then the suffix attack conditioned on the current image. Ablation toggles
//! and baseline presets are expressed as configurations of the same loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::BehaviorRecord;
use crate::error::{Error, Result};
use crate::image_attack::{attack_image, ImageAttackParams};
use crate::imagestate::ImageState;
use crate::loss::{assemble_all, batch_loss, ConversationTemplate};
use crate::model::Model;
use crate::rng::{stream_rng, Stream};
use crate::suffix_attack::{attack_suffix, SuffixAttackParams, SuffixState};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

/// Every scalar hyperparameter of the attack loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Outer alternating iterations (N).
    pub outer_iters: usize,
    /// Image attack iterations per outer pass (T).
    pub image_iters: usize,
    /// Suffix attack iterations per outer pass (H).
    pub suffix_iters: usize,
    /// Behaviors sampled per outer iteration (b).
    pub behavior_batch: usize,
    /// Neighborhood sample count for image variance tuning (K).
    pub image_neighbors: usize,
    /// Neighborhood sample count for suffix variance tuning (M).
    pub suffix_neighbors: usize,
    /// Image neighborhood radius, pixel units (r).
    pub image_radius: f64,
    /// Image step size, pixel units (alpha; 1 pixel unit = 1/255 of range).
    pub image_step: f64,
    /// Momentum decay factor (mu).
    pub momentum: f64,
    /// Suffix length (l).
    pub suffix_len: usize,
    /// Candidate batch size in the coordinate search (B).
    pub candidate_batch: usize,
    /// Top-k candidate tokens per suffix position.
    pub top_k: usize,
    pub seed: u64,
    pub suffix_enabled: bool,
    pub image_enabled: bool,
    pub suffix_variance_enabled: bool,
    pub image_variance_enabled: bool,
    pub precision: Precision,
}

pub const PRESET_NAMES: [&str; 7] = [
    "ours",
    "ours@suffix",
    "ours@image",
    "ours@suffix_t",
    "ours@image_t",
    "gcg",
    "visual-jailbreak",
];

impl AttackConfig {
    /// The full method's defaults.
    pub fn ours() -> Self {
        AttackConfig {
            outer_iters: 50,
            image_iters: 50,
            suffix_iters: 20,
            behavior_batch: 16,
            image_neighbors: 5,
            suffix_neighbors: 5,
            image_radius: 16.0,
            image_step: 1.0,
            momentum: 1.0,
            suffix_len: 10,
            candidate_batch: 128,
            top_k: 50,
            seed: 0,
            suffix_enabled: true,
            image_enabled: true,
            suffix_variance_enabled: true,
            image_variance_enabled: true,
            precision: Precision::F64,
        }
    }

    /// Named presets: the full method, its ablation variants (an `@` variant
    /// toggles one component or transfer strategy off), and the single-modal
    /// baselines expressed as degenerate configurations.
    pub fn preset(name: &str) -> Result<Self> {
        let ours = Self::ours();
        match name {
            "ours" => Ok(ours),
            "ours@suffix" => Ok(AttackConfig { suffix_enabled: false, ..ours }),
            "ours@image" => Ok(AttackConfig { image_enabled: false, ..ours }),
            "ours@suffix_t" => Ok(AttackConfig { suffix_variance_enabled: false, ..ours }),
            "ours@image_t" => Ok(AttackConfig { image_variance_enabled: false, ..ours }),
            "gcg" => Ok(AttackConfig {
                outer_iters: 1,
                image_iters: 0,
                suffix_iters: 500,
                suffix_len: 20,
                candidate_batch: 512,
                top_k: 256,
                momentum: 0.0,
                image_enabled: false,
                suffix_variance_enabled: false,
                image_variance_enabled: false,
                ..ours
            }),
            "visual-jailbreak" => Ok(AttackConfig {
                outer_iters: 1,
                image_iters: 5000,
                suffix_iters: 0,
                momentum: 0.0,
                suffix_enabled: false,
                suffix_variance_enabled: false,
                image_variance_enabled: false,
                ..ours
            }),
            other => Err(Error::UnknownPreset {
                name: other.to_string(),
                valid: PRESET_NAMES.join(", "),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.suffix_enabled && !self.image_enabled {
            return Err(Error::Config(
                "at least one modality must be enabled".to_string(),
            ));
        }
        if self.image_step <= 0.0 {
            return Err(Error::Config("image step must be positive".to_string()));
        }
        if self.image_radius < 0.0 {
            return Err(Error::Config("image radius must be >= 0".to_string()));
        }
        if self.behavior_batch == 0 {
            return Err(Error::Config("behavior batch must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Stable digest over the serialized configuration.
    pub fn digest(&self) -> String {
        crate::artifact::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Where an adversarial pair came from: enough to reproduce it bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub surrogate_digest: String,
    pub config_digest: String,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub degenerate_events: Vec<String>,
}

/// The attack's output: a universal image and suffix with provenance.
#[derive(Debug, Clone)]
pub struct AdversarialPair {
    pub image: ImageState,
    pub suffix: SuffixState,
    pub provenance: Provenance,
}

/// Pair plus full per-iteration loss traces, `(outer, inner, loss)`.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub pair: AdversarialPair,
    pub image_trace: Vec<(usize, usize, f64)>,
    pub suffix_trace: Vec<(usize, usize, f64)>,
}

/// Run the alternating multimodal attack and return the universal pair.
pub fn run_multimodal<E: Element>(
    model: &Model<E>,
    train: &[BehaviorRecord],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training behavior set".to_string()));
    }
    if cfg.behavior_batch > train.len() {
        return Err(Error::Config(format!(
            "behavior batch {} exceeds training set size {}",
            cfg.behavior_batch,
            train.len()
        )));
    }
    if cfg.top_k > model.vocab_size() {
        return Err(Error::Config(format!(
            "top-k {} exceeds vocabulary {}",
            cfg.top_k,
            model.vocab_size()
        )));
    }
    let template = ConversationTemplate::default();
    let mut behavior_rng = stream_rng(cfg.seed, Stream::BehaviorSampling);
    let mut image_rng = stream_rng(cfg.seed, Stream::ImageNoise);
    let mut suffix_var_rng = stream_rng(cfg.seed, Stream::SuffixVariance);
    let mut suffix_prop_rng = stream_rng(cfg.seed, Stream::SuffixProposal);

    let mut image = ImageState::clean(
        model.cfg.image_height,
        model.cfg.image_width,
        model.cfg.image_channels,
    );
    let mut suffix = SuffixState::filler(cfg.suffix_len, &model.tokenizer);

    let image_params = ImageAttackParams {
        iters: cfg.image_iters,
        step: cfg.image_step,
        momentum: cfg.momentum,
        radius: cfg.image_radius,
        neighbors: cfg.image_neighbors,
        variance_enabled: cfg.image_variance_enabled,
    };
    let suffix_params = SuffixAttackParams {
        iters: cfg.suffix_iters,
        momentum: cfg.momentum,
        neighbors: cfg.suffix_neighbors,
        candidate_batch: cfg.candidate_batch,
        top_k: cfg.top_k.min(model.vocab_size()),
        variance_enabled: cfg.suffix_variance_enabled,
    };

    let full_loss = |img: &ImageState, suf: &SuffixState| -> Result<f64> {
        let assembled = assemble_all(train, suf.tokens(), &template, model)?;
        batch_loss(model, img, &assembled)
    };
    let initial_loss = full_loss(&image, &suffix)?;

    let mut image_trace = Vec::new();
    let mut suffix_trace = Vec::new();
    let mut events = Vec::new();

    for outer in 0..cfg.outer_iters {
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut behavior_rng);
        indices.truncate(cfg.behavior_batch);
        let sampled: Vec<BehaviorRecord> =
            indices.iter().map(|&i| train[i].clone()).collect();

        if cfg.image_enabled && cfg.image_iters > 0 {
            let assembled = assemble_all(&sampled, suffix.tokens(), &template, model)?;
            let (next, trace, evts) =
                attack_image(model, &assembled, &image, &image_params, &mut image_rng)?;
            image = next;
            image_trace.extend(trace.iter().enumerate().map(|(i, &l)| (outer, i, l)));
            events.extend(evts.into_iter().map(|e| format!("outer {outer}: {e}")));
        }

        if cfg.suffix_enabled && cfg.suffix_iters > 0 {
            let assembled = assemble_all(&sampled, suffix.tokens(), &template, model)?;
            let (next, trace, evts) = attack_suffix(
                model,
                &assembled,
                &image,
                &suffix,
                &suffix_params,
                &mut suffix_var_rng,
                &mut suffix_prop_rng,
            )?;
            suffix = next;
            suffix_trace.extend(trace.iter().enumerate().map(|(i, &l)| (outer, i, l)));
            events.extend(evts.into_iter().map(|e| format!("outer {outer}: {e}")));
        }
    }

    let final_loss = full_loss(&image, &suffix)?;
    let provenance = Provenance {
        surrogate_digest: crate::checkpoint::digest(model)?,
        config_digest: cfg.digest(),
        seed: cfg.seed,
        initial_loss,
        final_loss,
        degenerate_events: events,
    };
    Ok(AttackOutcome {
        pair: AdversarialPair {
            image,
            suffix,
            provenance,
        },
        image_trace,
        suffix_trace,
    })
}
