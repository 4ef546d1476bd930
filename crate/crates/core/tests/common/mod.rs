//! Independent straight-line re-implementation of the victim's forward pass
//! and teacher-forced loss, used as an oracle against the kernel-backed
//! implementation. Deliberately built on nested `Vec<f64>` with its own
//! attention, layer-norm and softmax code: it shares no numerical plumbing
//! with the tape.

use mmjail_core::imagestate::ImageState;
use mmjail_core::loss::AssembledInput;
use mmjail_core::model::Model;

type Mat = Vec<Vec<f64>>;

fn matvec_rows(x: &Mat, w: &[Vec<f64>], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|c| {
                    let mut acc = 0.0;
                    for (p, &v) in row.iter().enumerate() {
                        acc += v * w[p][c];
                    }
                    acc + bias[c]
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    let eps = 1e-5;
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| gamma[c] * (v - mean) * inv + beta[c])
                .collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn causal_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    let scale = 1.0 / d.sqrt();
    (0..q.len())
        .map(|i| {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    q[i].iter()
                        .zip(&k[j])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let weights = softmax(&scores);
            let mut out = vec![0.0; q[0].len()];
            for (j, &w) in weights.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(&v[j]) {
                    *o += w * vv;
                }
            }
            out
        })
        .collect()
}

fn to_mat(t: &mmjail_core::Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn to_vec(t: &mmjail_core::Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

/// Full-sequence log-probability rows computed independently of the tape.
pub fn oracle_logprobs(model: &Model<f64>, image: &ImageState, tokens: &[usize]) -> Mat {
    let cfg = &model.cfg;
    let p = &model.params;
    let patch_w = to_mat(&p.patch_w);
    let patch_b = to_vec(&p.patch_b);

    // visual rows
    let patches = image.patches::<f64>(cfg.patch).unwrap();
    let scaled: Mat = (0..patches.rows())
        .map(|r| patches.row(r).iter().map(|v| v / 255.0).collect())
        .collect();
    let mut rows = matvec_rows(&scaled, &patch_w, &patch_b);

    // token embedding rows
    for &t in tokens {
        rows.push(p.embed.row(t).to_vec());
    }
    for (i, row) in rows.iter_mut().enumerate() {
        for (x, &pe) in row.iter_mut().zip(p.pos.row(i)) {
            *x += pe;
        }
    }

    for b in &p.blocks {
        let normed = layer_norm(&rows, b.ln1_gamma.data(), b.ln1_beta.data());
        let q = matvec_rows(&normed, &to_mat(&b.wq), b.bq.data());
        let k = matvec_rows(&normed, &to_mat(&b.wk), b.bk.data());
        let v = matvec_rows(&normed, &to_mat(&b.wv), b.bv.data());
        let attn = causal_attention(&q, &k, &v);
        let proj = matvec_rows(&attn, &to_mat(&b.wo), b.bo.data());
        for (row, prow) in rows.iter_mut().zip(&proj) {
            for (x, &pv) in row.iter_mut().zip(prow) {
                *x += pv;
            }
        }
        let normed2 = layer_norm(&rows, b.ln2_gamma.data(), b.ln2_beta.data());
        let hidden = matvec_rows(&normed2, &to_mat(&b.w1), b.b1.data());
        let act: Mat = hidden
            .iter()
            .map(|r| r.iter().map(|v| v.tanh()).collect())
            .collect();
        let out = matvec_rows(&act, &to_mat(&b.w2), b.b2.data());
        for (row, orow) in rows.iter_mut().zip(&out) {
            for (x, &ov) in row.iter_mut().zip(orow) {
                *x += ov;
            }
        }
    }

    let final_rows = layer_norm(&rows, p.final_gamma.data(), p.final_beta.data());
    let logits = matvec_rows(&final_rows, &to_mat(&p.out_w), p.out_b.data());
    logits
        .iter()
        .map(|row| {
            let probs = softmax(row);
            probs.iter().map(|v| v.ln()).collect()
        })
        .collect()
}

/// Teacher-forced negative mean target log-likelihood, independent route.
pub fn oracle_adv_loss(model: &Model<f64>, image: &ImageState, a: &AssembledInput) -> f64 {
    let tokens = a.tokens();
    let lp = oracle_logprobs(model, image, &tokens);
    let n_vis = model.cfg.n_patches();
    let t0 = a.target_start();
    let mut total = 0.0;
    for (i, &tok) in a.target.iter().enumerate() {
        total += lp[n_vis + t0 + i - 1][tok];
    }
    -total / a.target.len() as f64
}
