//! The bundled victim: a small multimodal language model.
//!
//! Image patches are flattened, scaled by 1/255 and projected into the token
//! embedding space; the projected rows are prepended to the text embedding
//! rows and the combined sequence runs through causal attention blocks.
//! Token embedding is expressed as (coefficient rows x embedding matrix), so
//! gradients with respect to relaxed one-hot coefficients exist natively;
//! discrete tokens take an equivalent row-gather path.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagestate::ImageState;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Element, Tensor};
use crate::tokenizer::{self, Tokenizer};

/// Architecture descriptor. The defaults are small enough that every gradient
/// path stays finite-difference-testable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub patch: usize,
}

impl ModelConfig {
    /// Desk-scale victim: 8x8 grayscale image in 4x4 patches, vocab 64,
    /// width 32, two causal attention blocks.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 64,
            width: 32,
            mlp_hidden: 64,
            blocks: 2,
            max_len: 128,
            image_height: 8,
            image_width: 8,
            image_channels: 1,
            patch: 4,
        }
    }

    /// Sub-10k-parameter model for gradient-fidelity checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            width: 16,
            mlp_hidden: 32,
            blocks: 1,
            max_len: 48,
            image_height: 8,
            image_width: 8,
            image_channels: 1,
            patch: 4,
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.image_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            return Err(Error::Config(format!(
                "patch size {} must divide image {}x{}",
                self.patch, self.image_height, self.image_width
            )));
        }
        if self.vocab_size == 0 || self.width == 0 || self.max_len == 0 {
            return Err(Error::Config("zero-sized architecture field".to_string()));
        }
        Ok(())
    }
}

/// Whether a model was optimized against (surrogate) or attacked by transfer
/// (target). Informational only: both roles expose identical interfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Surrogate,
    Target,
}

#[derive(Debug, Clone)]
pub struct BlockParams<E: Element> {
    pub ln1_gamma: Tensor<E>,
    pub ln1_beta: Tensor<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln2_gamma: Tensor<E>,
    pub ln2_beta: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct Params<E: Element> {
    pub embed: Tensor<E>,
    pub pos: Tensor<E>,
    pub patch_w: Tensor<E>,
    pub patch_b: Tensor<E>,
    pub blocks: Vec<BlockParams<E>>,
    pub final_gamma: Tensor<E>,
    pub final_beta: Tensor<E>,
    pub out_w: Tensor<E>,
    pub out_b: Tensor<E>,
}

const LN_EPS: f64 = 1e-5;

/// Canonical parameter order: names and shapes derived from the config.
/// Checkpoints, initialization and the trainer all iterate this order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, w, h) = (cfg.vocab_size, cfg.width, cfg.mlp_hidden);
    let mut specs = vec![
        ("embed".to_string(), vec![v, w]),
        ("pos".to_string(), vec![cfg.max_len, w]),
        ("patch_w".to_string(), vec![cfg.patch_dim(), w]),
        ("patch_b".to_string(), vec![w]),
    ];
    for b in 0..cfg.blocks {
        for (name, shape) in [
            ("ln1_gamma", vec![w]),
            ("ln1_beta", vec![w]),
            ("wq", vec![w, w]),
            ("bq", vec![w]),
            ("wk", vec![w, w]),
            ("bk", vec![w]),
            ("wv", vec![w, w]),
            ("bv", vec![w]),
            ("wo", vec![w, w]),
            ("bo", vec![w]),
            ("ln2_gamma", vec![w]),
            ("ln2_beta", vec![w]),
            ("w1", vec![w, h]),
            ("b1", vec![h]),
            ("w2", vec![h, w]),
            ("b2", vec![w]),
        ] {
            specs.push((format!("block{b}.{name}"), shape));
        }
    }
    specs.push(("final_gamma".to_string(), vec![w]));
    specs.push(("final_beta".to_string(), vec![w]));
    specs.push(("out_w".to_string(), vec![w, v]));
    specs.push(("out_b".to_string(), vec![v]));
    specs
}

impl<E: Element> Params<E> {
    pub fn from_ordered(cfg: &ModelConfig, mut tensors: Vec<Tensor<E>>) -> Result<Self> {
        let specs = param_specs(cfg);
        if tensors.len() != specs.len() {
            return Err(Error::CheckpointFormat(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointFormat(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut take = || tensors.remove(0);
        let embed = take();
        let pos = take();
        let patch_w = take();
        let patch_b = take();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(BlockParams {
                ln1_gamma: take(),
                ln1_beta: take(),
                wq: take(),
                bq: take(),
                wk: take(),
                bk: take(),
                wv: take(),
                bv: take(),
                wo: take(),
                bo: take(),
                ln2_gamma: take(),
                ln2_beta: take(),
                w1: take(),
                b1: take(),
                w2: take(),
                b2: take(),
            });
        }
        Ok(Params {
            embed,
            pos,
            patch_w,
            patch_b,
            blocks,
            final_gamma: take(),
            final_beta: take(),
            out_w: take(),
            out_b: take(),
        })
    }

    pub fn ordered(&self) -> Vec<&Tensor<E>> {
        let mut out = vec![&self.embed, &self.pos, &self.patch_w, &self.patch_b];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gamma, &b.ln1_beta, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                &b.bo, &b.ln2_gamma, &b.ln2_beta, &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.final_gamma, &self.final_beta, &self.out_w, &self.out_b]);
        out
    }

    pub fn ordered_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out: Vec<&mut Tensor<E>> = vec![
            &mut self.embed,
            &mut self.pos,
            &mut self.patch_w,
            &mut self.patch_b,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        out
    }

    pub fn count(&self) -> usize {
        self.ordered().iter().map(|t| t.len()).sum()
    }
}

/// A trained or initialized model instance. Immutable after construction;
/// concurrent forward passes over the same handle are fine.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: Params<E>,
    pub role: Role,
    pub seed: u64,
}

/// A text segment of the model input.
pub enum Segment<'a, E: Element> {
    /// Discrete token ids (embedded by row gather; no input gradient).
    Tokens(&'a [usize]),
    /// Relaxed one-hot coefficient rows `[len, V]` (embedded by matmul).
    Soft(&'a Tensor<E>),
}

/// Which inputs the caller wants adjoints for.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub pixels: bool,
    pub soft: bool,
    pub params: bool,
}

/// Taped handles produced by one forward pass.
pub struct ForwardPass {
    /// Log-probability rows for the full combined sequence `[S, V]`.
    pub logprobs: ValueId,
    /// Raw pixel patch leaf (present when pixel gradients were requested).
    pub pixel_leaf: Option<ValueId>,
    /// Soft coefficient leaves, one per `Segment::Soft`, in order.
    pub soft_leaves: Vec<ValueId>,
    /// Parameter leaves in canonical order (when parameter gradients were
    /// requested).
    pub param_leaves: Vec<ValueId>,
    /// Number of visual rows prepended before the text rows.
    pub n_visual: usize,
}

impl<E: Element> Model<E> {
    /// Deterministic random initialization. Parameters are rounded through
    /// 32-bit storage so checkpoints round-trip bit-exactly.
    pub fn init(cfg: ModelConfig, tokenizer: Tokenizer, role: Role, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if tokenizer.vocab_size() != cfg.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer vocab {} != model vocab {}",
                tokenizer.vocab_size(),
                cfg.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (name, shape) in param_specs(&cfg) {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let is_bias = leaf.ends_with("beta") || leaf.ends_with("_b") || leaf.starts_with('b');
            let data: Vec<E> = if leaf.ends_with("gamma") {
                vec![E::one(); n]
            } else if is_bias {
                vec![E::zero(); n]
            } else {
                let sigma = if name == "embed" || name == "pos" {
                    0.1
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                (0..n)
                    .map(|_| {
                        let v: f64 = normal_sample(&mut rng) * sigma;
                        E::from_f32_exact(v as f32)
                    })
                    .collect()
            };
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Model {
            params: Params::from_ordered(&cfg, tensors)?,
            cfg,
            tokenizer,
            role,
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Round every parameter through 32-bit storage (identity in f32 mode).
    pub fn quantize_params(&mut self) {
        for t in self.params.ordered_mut() {
            for v in t.data_mut() {
                *v = E::from_f32_exact(v.to_f32_lossy());
            }
        }
    }

    pub fn all_params_finite(&self) -> bool {
        self.params.ordered().iter().all(|t| t.all_finite())
    }

    /// Run the model on a tape: visual rows from the image, then the text
    /// segments, causally scored. Returns log-probability rows `[S, V]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<E>,
        image: &ImageState,
        segments: &[Segment<'_, E>],
        want: GradRequest,
    ) -> Result<ForwardPass> {
        if image.height() != self.cfg.image_height
            || image.width() != self.cfg.image_width
            || image.channels() != self.cfg.image_channels
        {
            return Err(Error::BadDimension {
                op: "forward",
                expected: format!(
                    "{}x{}x{} image",
                    self.cfg.image_height, self.cfg.image_width, self.cfg.image_channels
                ),
                actual: format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            });
        }
        let text_len: usize = segments
            .iter()
            .map(|s| match s {
                Segment::Tokens(t) => t.len(),
                Segment::Soft(m) => m.rows(),
            })
            .sum();
        let n_visual = self.cfg.n_patches();
        let total = n_visual + text_len;
        if total > self.cfg.max_len {
            return Err(Error::LengthOverflow {
                required: total,
                max: self.cfg.max_len,
            });
        }

        // Parameters: leaves when training, constants otherwise.
        let mut param_leaves = Vec::new();
        let rec = |tape: &mut Tape<E>, t: &Tensor<E>, leaves: &mut Vec<ValueId>| -> ValueId {
            if want.params {
                let id = tape.leaf(t.clone());
                leaves.push(id);
                id
            } else {
                tape.constant(t.clone())
            }
        };
        let ordered = self.params.ordered();
        let ids: Vec<ValueId> = ordered
            .iter()
            .map(|t| rec(tape, t, &mut param_leaves))
            .collect();
        let specs = param_specs(&self.cfg);
        let find = |name: &str| -> ValueId {
            ids[specs
                .iter()
                .position(|(n, _)| n == name)
                .expect("parameter name")]
        };

        // Visual rows: flatten patches, scale to [0,1], affine into width.
        let patches = image.patches::<E>(self.cfg.patch)?;
        let pixel_leaf = if want.pixels {
            Some(tape.leaf(patches))
        } else {
            Some(tape.constant(patches))
        };
        let scaled = tape.scale(pixel_leaf.unwrap(), 1.0 / 255.0);
        let visual = tape.affine(scaled, find("patch_w"), find("patch_b"))?;

        // Text rows.
        let embed = find("embed");
        let mut soft_leaves = Vec::new();
        let mut seq = visual;
        for seg in segments {
            let rows = match seg {
                Segment::Tokens(toks) => {
                    if toks.is_empty() {
                        continue;
                    }
                    self.tokenizer.validate_seq(toks)?;
                    tape.gather_rows(embed, toks.to_vec())?
                }
                Segment::Soft(m) => {
                    if m.cols() != self.cfg.vocab_size {
                        return Err(Error::BadDimension {
                            op: "forward",
                            expected: format!("soft rows with {} columns", self.cfg.vocab_size),
                            actual: format!("{:?}", m.shape()),
                        });
                    }
                    if m.rows() == 0 {
                        continue;
                    }
                    let leaf = if want.soft {
                        let id = tape.leaf((*m).clone());
                        soft_leaves.push(id);
                        id
                    } else {
                        tape.constant((*m).clone())
                    };
                    tape.matmul(leaf, embed)?
                }
            };
            seq = tape.concat_rows(seq, rows)?;
        }

        // Learned positions for the combined sequence.
        let pos_rows = tape.gather_rows(find("pos"), (0..total).collect())?;
        let mut h = tape.add(seq, pos_rows)?;

        for b in 0..self.cfg.blocks {
            let p = |n: &str| find(&format!("block{b}.{n}"));
            let normed = tape.layer_norm_rows(h, p("ln1_gamma"), p("ln1_beta"), LN_EPS)?;
            let q = tape.affine(normed, p("wq"), p("bq"))?;
            let k = tape.affine(normed, p("wk"), p("bk"))?;
            let v = tape.affine(normed, p("wv"), p("bv"))?;
            let attn = tape.causal_attention(q, k, v)?;
            let proj = tape.affine(attn, p("wo"), p("bo"))?;
            h = tape.add(h, proj)?;
            let normed2 = tape.layer_norm_rows(h, p("ln2_gamma"), p("ln2_beta"), LN_EPS)?;
            let m1 = tape.affine(normed2, p("w1"), p("b1"))?;
            let act = tape.tanh(m1);
            let m2 = tape.affine(act, p("w2"), p("b2"))?;
            h = tape.add(h, m2)?;
        }

        let hf = tape.layer_norm_rows(h, find("final_gamma"), find("final_beta"), LN_EPS)?;
        let logits = tape.affine(hf, find("out_w"), find("out_b"))?;
        let logprobs = tape.log_softmax_rows(logits)?;

        Ok(ForwardPass {
            logprobs,
            pixel_leaf: if want.pixels { pixel_leaf } else { None },
            soft_leaves,
            param_leaves,
            n_visual,
        })
    }

    /// Forward pass returning the full-sequence log-probability tensor.
    pub fn forward(&self, image: &ImageState, segments: &[Segment<'_, E>]) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, image, segments, GradRequest::default())?;
        Ok(tape.value(pass.logprobs).clone())
    }

    /// Visual embedding rows for an image: one row per patch.
    pub fn encode_image(&self, image: &ImageState) -> Result<Tensor<E>> {
        if image.height() != self.cfg.image_height
            || image.width() != self.cfg.image_width
            || image.channels() != self.cfg.image_channels
        {
            return Err(Error::BadDimension {
                op: "encode_image",
                expected: format!(
                    "{}x{}x{} image",
                    self.cfg.image_height, self.cfg.image_width, self.cfg.image_channels
                ),
                actual: format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            });
        }
        let mut tape = Tape::new();
        let patches = tape.constant(image.patches::<E>(self.cfg.patch)?);
        let scaled = tape.scale(patches, 1.0 / 255.0);
        let w = tape.constant(self.params.patch_w.clone());
        let b = tape.constant(self.params.patch_b.clone());
        let rows = tape.affine(scaled, w, b)?;
        Ok(tape.value(rows).clone())
    }

    /// Greedy decode after the given text prefix. Stops at `<eos>` or after
    /// `max_new` tokens. Ties in the argmax resolve to the lower token id.
    pub fn greedy_decode(
        &self,
        image: &ImageState,
        prefix: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let eos = self.tokenizer.special(tokenizer::EOS);
        let mut tokens = prefix.to_vec();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            if self.cfg.n_patches() + tokens.len() + 1 > self.cfg.max_len {
                break;
            }
            let best = self.next_token_fast(image, &tokens)?;
            if best == eos {
                break;
            }
            generated.push(best);
            tokens.push(best);
        }
        Ok(generated)
    }
}

impl<E: Element> Model<E> {
    // The no-tape forward: identical arithmetic to the taped ops (same
    // helpers, same accumulation order), without recording. Returns the
    // hidden rows after the final layer norm.
    fn fast_hidden_rows(&self, image: &ImageState, tokens: &[usize]) -> Result<Tensor<E>> {
        if image.height() != self.cfg.image_height
            || image.width() != self.cfg.image_width
            || image.channels() != self.cfg.image_channels
        {
            return Err(Error::BadDimension {
                op: "forward",
                expected: format!(
                    "{}x{}x{} image",
                    self.cfg.image_height, self.cfg.image_width, self.cfg.image_channels
                ),
                actual: format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            });
        }
        let n_visual = self.cfg.n_patches();
        let total = n_visual + tokens.len();
        if total > self.cfg.max_len {
            return Err(Error::LengthOverflow {
                required: total,
                max: self.cfg.max_len,
            });
        }
        self.tokenizer.validate_seq(tokens)?;
        let w = self.cfg.width;

        // visual rows: scale then affine, matching Tape::scale + Tape::affine
        let patches = image.patches::<E>(self.cfg.patch)?;
        let inv = E::from_f64_lossy(1.0 / 255.0);
        let scaled = patches.map(|v| v * inv);
        let mut h = Tensor::zeros(vec![total, w]);
        {
            let mut visual = Tensor::zeros(vec![n_visual, w]);
            crate::tape::matmul_into(&scaled, &self.params.patch_w, &mut visual);
            for r in 0..n_visual {
                let row = h.row_mut(r);
                for ((o, &v), &b) in row
                    .iter_mut()
                    .zip(visual.row(r))
                    .zip(self.params.patch_b.data())
                {
                    *o = v + b;
                }
            }
        }
        for (r, &tok) in tokens.iter().enumerate() {
            h.row_mut(n_visual + r).copy_from_slice(self.params.embed.row(tok));
        }
        for r in 0..total {
            let row = h.row_mut(r);
            for (o, &p) in row.iter_mut().zip(self.params.pos.row(r)) {
                *o = *o + p;
            }
        }

        let mut normed = Tensor::zeros(vec![total, w]);
        let mut q = Tensor::zeros(vec![total, w]);
        let mut k = Tensor::zeros(vec![total, w]);
        let mut v = Tensor::zeros(vec![total, w]);
        let mut attn = Tensor::zeros(vec![total, w]);
        let mut mlp = Tensor::zeros(vec![total, self.cfg.mlp_hidden]);

        for b in &self.params.blocks {
            layer_norm_rows_into(&h, &b.ln1_gamma, &b.ln1_beta, &mut normed);
            affine_into(&normed, &b.wq, &b.bq, &mut q);
            affine_into(&normed, &b.wk, &b.bk, &mut k);
            affine_into(&normed, &b.wv, &b.bv, &mut v);
            causal_attention_into(&q, &k, &v, &mut attn);
            // proj + residual
            let mut proj = Tensor::zeros(vec![total, w]);
            affine_into(&attn, &b.wo, &b.bo, &mut proj);
            for (o, &p) in h.data_mut().iter_mut().zip(proj.data()) {
                *o = *o + p;
            }
            layer_norm_rows_into(&h, &b.ln2_gamma, &b.ln2_beta, &mut normed);
            affine_into(&normed, &b.w1, &b.b1, &mut mlp);
            for x in mlp.data_mut() {
                *x = x.tanh();
            }
            let mut m2 = Tensor::zeros(vec![total, w]);
            affine_into(&mlp, &b.w2, &b.b2, &mut m2);
            for (o, &p) in h.data_mut().iter_mut().zip(m2.data()) {
                *o = *o + p;
            }
        }

        let mut out = Tensor::zeros(vec![total, w]);
        layer_norm_rows_into(
            &h,
            &self.params.final_gamma,
            &self.params.final_beta,
            &mut out,
        );
        Ok(out)
    }

    /// Teacher-forced NLL over the target span of a token sequence, without
    /// building a tape. Bit-identical to the taped loss path.
    pub fn nll_fast(
        &self,
        image: &ImageState,
        tokens: &[usize],
        target_start_text: usize,
        target_len: usize,
    ) -> Result<f64> {
        if target_len == 0 || target_start_text == 0 || target_start_text + target_len > tokens.len()
        {
            return Err(Error::BadDimension {
                op: "nll_fast",
                expected: "non-empty target span inside the sequence".to_string(),
                actual: format!("start {target_start_text}, len {target_len}"),
            });
        }
        let hidden = self.fast_hidden_rows(image, tokens)?;
        let n_visual = self.cfg.n_patches();
        let inv_n = E::from_f64_lossy(1.0 / target_len as f64);
        let vocab = self.cfg.vocab_size;
        let mut logits = vec![E::zero(); vocab];
        let mut total = E::zero();
        for i in 0..target_len {
            let row = hidden.row(n_visual + target_start_text + i - 1);
            for (c, l) in logits.iter_mut().enumerate() {
                let mut acc = E::zero();
                for (p, &hv) in row.iter().enumerate() {
                    acc = acc + hv * self.params.out_w.get2(p, c);
                }
                *l = acc + self.params.out_b.data()[c];
            }
            crate::tape::log_softmax_in_place(&mut logits);
            total = total + logits[tokens[target_start_text + i]];
        }
        Ok((-total * inv_n).as_f64())
    }

    /// Argmax next token after the given text prefix, without a tape.
    pub fn next_token_fast(&self, image: &ImageState, tokens: &[usize]) -> Result<usize> {
        let hidden = self.fast_hidden_rows(image, tokens)?;
        let row = hidden.row(hidden.rows() - 1);
        let vocab = self.cfg.vocab_size;
        let mut best = 0usize;
        let mut best_v = E::neg_infinity();
        for c in 0..vocab {
            let mut acc = E::zero();
            for (p, &hv) in row.iter().enumerate() {
                acc = acc + hv * self.params.out_w.get2(p, c);
            }
            let v = acc + self.params.out_b.data()[c];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        Ok(best)
    }
}

fn affine_into<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>, out: &mut Tensor<E>) {
    for v in out.data_mut() {
        *v = E::zero();
    }
    crate::tape::matmul_into(x, w, out);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (o, &bias) in row.iter_mut().zip(b.data()) {
            *o = *o + bias;
        }
    }
}

// Mirrors Tape::layer_norm_rows exactly.
fn layer_norm_rows_into<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    out: &mut Tensor<E>,
) {
    let n = x.cols();
    let epsv = E::from_f64_lossy(LN_EPS);
    let inv_n = E::from_f64_lossy(1.0 / n as f64);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean: E = row.iter().copied().sum::<E>() * inv_n;
        let var: E = row
            .iter()
            .map(|&v| {
                let d = v - mean;
                d * d
            })
            .sum::<E>()
            * inv_n;
        let inv_std = (var + epsv).sqrt().recip();
        let orow = out.row_mut(r);
        for c in 0..n {
            orow[c] = gamma.data()[c] * (row[c] - mean) * inv_std + beta.data()[c];
        }
    }
}

// Mirrors Tape::causal_attention exactly.
fn causal_attention_into<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    out: &mut Tensor<E>,
) {
    let (s, d) = (q.rows(), q.cols());
    let scale = E::from_f64_lossy(1.0 / (d as f64).sqrt());
    for x in out.data_mut() {
        *x = E::zero();
    }
    let mut scores = vec![E::zero(); s];
    for i in 0..s {
        let qi = q.row(i);
        for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
            *sc = crate::tape::dot(qi, k.row(j)) * scale;
        }
        crate::tape::softmax_in_place(&mut scores[..i + 1]);
        let orow = out.row_mut(i);
        for j in 0..=i {
            let wv = scores[j];
            for (o, &vv) in orow.iter_mut().zip(v.row(j)) {
                *o = *o + wv * vv;
            }
        }
    }
}

// Box-Muller over the stream; deterministic and element-type independent.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::one_hot;

    fn tiny_model() -> Model<f64> {
        let tok = Tokenizer::toy_truncated(32);
        Model::init(ModelConfig::tiny(32), tok, Role::Surrogate, 0).unwrap()
    }

    #[test]
    fn tiny_model_is_under_10k_params() {
        let m = tiny_model();
        assert!(m.params.count() <= 10_000, "params: {}", m.params.count());
    }

    #[test]
    fn rows_are_normalized() {
        let m = tiny_model();
        let img = ImageState::clean(8, 8, 1);
        let lp = m.forward(&img, &[Segment::Tokens(&[1, 2, 3, 4])]).unwrap();
        for r in 0..lp.rows() {
            let sum: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn one_hot_soft_equals_discrete() {
        let m = tiny_model();
        let img = ImageState::clean(8, 8, 1);
        let toks = [3usize, 9, 1, 17];
        let discrete = m.forward(&img, &[Segment::Tokens(&toks)]).unwrap();
        let soft = one_hot::<f64>(&toks, 32);
        let relaxed = m.forward(&img, &[Segment::Soft(&soft)]).unwrap();
        assert_eq!(discrete, relaxed);
    }

    #[test]
    fn causality_future_token_permutation() {
        let m = tiny_model();
        let img = ImageState::clean(8, 8, 1);
        let a = m.forward(&img, &[Segment::Tokens(&[5, 6, 7, 8, 9])]).unwrap();
        let b = m.forward(&img, &[Segment::Tokens(&[5, 6, 7, 30, 9])]).unwrap();
        // positions up to the changed token (visual rows + first three text
        // rows + the changed row itself excluded) are identical
        let n = m.cfg.n_patches() + 3;
        for r in 0..n {
            assert_eq!(a.row(r), b.row(r), "row {r} changed by a future token");
        }
        assert_ne!(a.row(n + 1), b.row(n + 1));
    }

    #[test]
    fn overlength_rejected_with_lengths() {
        let m = tiny_model();
        let img = ImageState::clean(8, 8, 1);
        let long = vec![1usize; m.cfg.max_len];
        match m.forward(&img, &[Segment::Tokens(&long)]) {
            Err(Error::LengthOverflow { required, max }) => {
                assert_eq!(max, m.cfg.max_len);
                assert_eq!(required, m.cfg.n_patches() + long.len());
            }
            other => panic!("expected LengthOverflow, got {other:?}"),
        }
    }

    #[test]
    fn encode_image_shape_and_zero_case() {
        let mut m = tiny_model();
        let img = ImageState::clean(8, 8, 1);
        let rows = m.encode_image(&img).unwrap();
        assert_eq!(rows.shape(), &[4, 16]);

        // all-zero image with zero bias gives all-zero embeddings
        let zero_img = ImageState::new(8, 8, 1, vec![0.0; 64]).unwrap();
        m.params.patch_b = Tensor::zeros(vec![16]);
        let rows = m.encode_image(&zero_img).unwrap();
        assert!(rows.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_image_dimension_mismatch_rejected() {
        let m = tiny_model();
        let img = ImageState::clean(4, 4, 1);
        assert!(m.encode_image(&img).is_err());
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        use crate::gradcheck::relative_error;
        let m = tiny_model();
        let img = ImageState::clean(8, 8, 1);
        let toks = [2usize, 11, 4, 19, 3];
        let targets = [7usize, 1];
        let rows = vec![6usize, 7];

        let loss_at = |img: &ImageState| -> f64 {
            let mut tape = Tape::new();
            let pass = m
                .forward_on_tape(&mut tape, img, &[Segment::Tokens(&toks)], GradRequest::default())
                .unwrap();
            let picked = tape.gather_rows(pass.logprobs, rows.clone()).unwrap();
            let loss = tape.nll_loss(picked, &targets).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let pass = m
            .forward_on_tape(
                &mut tape,
                &img,
                &[Segment::Tokens(&toks)],
                GradRequest { pixels: true, ..Default::default() },
            )
            .unwrap();
        let picked = tape.gather_rows(pass.logprobs, rows.clone()).unwrap();
        let loss = tape.nll_loss(picked, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gpatch = grads.wrt(pass.pixel_leaf.unwrap()).unwrap();
        let gpix = img.unpatchify(gpatch, 4).unwrap();

        let h = 1e-4;
        for c in (0..64).step_by(4) {
            let mut plus = img.clone();
            plus.pixels_mut()[c] += h;
            let mut minus = img.clone();
            minus.pixels_mut()[c] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = relative_error(gpix[c], numeric);
            assert!(rel < 1e-5, "pixel {c}: analytic {} numeric {numeric}", gpix[c]);
        }
    }

    #[test]
    fn greedy_decode_deterministic() {
        let m = tiny_model();
        let img = ImageState::clean(8, 8, 1);
        let a = m.greedy_decode(&img, &[1, 2, 3], 6).unwrap();
        let b = m.greedy_decode(&img, &[1, 2, 3], 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
    }
}
