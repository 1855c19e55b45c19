//! Symmetric InfoNCE on cosine similarities of the means. Reference loss for
//! the deterministic CLAP baseline; variances play no part.

use crate::error::{Error, Result};

use super::{cosine_grad, LabelMatrix};

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn positive_of_row(labels: &LabelMatrix, a: usize) -> Result<usize> {
    (0..labels.size())
        .find(|&t| labels.is_match(a, t))
        .ok_or_else(|| Error::invalid(format!("row {a} has no matched pair")))
}

fn positive_of_col(labels: &LabelMatrix, t: usize) -> Result<usize> {
    (0..labels.size())
        .find(|&a| labels.is_match(a, t))
        .ok_or_else(|| Error::invalid(format!("column {t} has no matched pair")))
}

/// `½ Σ_a CE(row a) + ½ Σ_t CE(column t)` with logits `scale * cos(a, t)`.
pub fn infonce_loss(
    audio: &[&[f64]],
    text: &[&[f64]],
    labels: &LabelMatrix,
    scale: f64,
) -> Result<f64> {
    infonce_loss_grad(audio, text, labels, scale).map(|(v, ..)| v)
}

/// Returns `(value, d_audio_means, d_text_means, d_scale)`.
#[allow(clippy::type_complexity)]
pub fn infonce_loss_grad(
    audio: &[&[f64]],
    text: &[&[f64]],
    labels: &LabelMatrix,
    scale: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    let b = audio.len();
    if b == 0 || text.len() != b || labels.size() != b {
        return Err(Error::invalid("InfoNCE needs equal, non-empty batches"));
    }
    // cos[a][t] and its gradients.
    let mut cos = vec![vec![0.0; b]; b];
    let mut d_cos_a = vec![vec![Vec::new(); b]; b];
    let mut d_cos_t = vec![vec![Vec::new(); b]; b];
    for a in 0..b {
        for t in 0..b {
            let (c, ga, gt) = cosine_grad(audio[a], text[t]);
            cos[a][t] = c;
            d_cos_a[a][t] = ga;
            d_cos_t[a][t] = gt;
        }
    }

    // dL/dcos accumulated over both directions.
    let mut g = vec![vec![0.0; b]; b];
    let mut value = 0.0;
    for a in 0..b {
        let pos = positive_of_row(labels, a)?;
        let logits: Vec<f64> = cos[a].iter().map(|c| scale * c).collect();
        let lse = log_sum_exp(&logits);
        value += 0.5 * (lse - logits[pos]);
        for t in 0..b {
            let softmax = (logits[t] - lse).exp();
            g[a][t] += 0.5 * (softmax - if t == pos { 1.0 } else { 0.0 });
        }
    }
    for t in 0..b {
        let pos = positive_of_col(labels, t)?;
        let logits: Vec<f64> = (0..b).map(|a| scale * cos[a][t]).collect();
        let lse = log_sum_exp(&logits);
        value += 0.5 * (lse - logits[pos]);
        for a in 0..b {
            let softmax = (logits[a] - lse).exp();
            g[a][t] += 0.5 * (softmax - if a == pos { 1.0 } else { 0.0 });
        }
    }

    let d = audio[0].len();
    let mut da = vec![vec![0.0; d]; b];
    let mut dt = vec![vec![0.0; d]; b];
    let mut d_scale = 0.0;
    for a in 0..b {
        for t in 0..b {
            let coef = g[a][t] * scale;
            d_scale += g[a][t] * cos[a][t];
            for k in 0..d {
                da[a][k] += coef * d_cos_a[a][t][k];
                dt[t][k] += coef * d_cos_t[a][t][k];
            }
        }
    }
    Ok((value, da, dt, d_scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_b() {
        // Identical directions: every logit equal, loss per direction = ln B.
        let v = [1.0, 0.0];
        let audio = [&v[..], &v[..], &v[..]];
        let l = infonce_loss(&audio, &audio, &LabelMatrix::diagonal(3), 5.0).unwrap();
        assert!((l - 3.0 * 3f64.ln()).abs() < 1e-12);
    }
}
