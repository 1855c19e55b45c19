//! Two-headed feed-forward encoder emitting a [`DiagGaussian`].
//!
//! Architecture: `d_in -> [hidden, tanh] x n_layers -> (mean head, log-variance head)`.
//! Both heads are affine maps of the last hidden activation (or of the input
//! itself when `n_layers == 0`). A learnable mask token of length `d_in`
//! replaces masked input coordinates.
//!
//! All parameters live in one flat `Vec<f64>` so the optimizer and the
//! checkpoint writer treat them uniformly. Layout, in order: for every hidden
//! layer `W` (row-major, `out x in`) then `b`; mean head `W, b`; log-variance
//! head `W, b`; mask token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{DiagGaussian, GaussianGrad};
use crate::masking::apply_mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_in: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub d_out: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_in: 32,
            hidden: 64,
            n_layers: 1,
            d_out: 16,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    hidden: Vec<Affine>,
    mean: Affine,
    log_var: Affine,
    mask_token: usize,
    total: usize,
}

impl Architecture {
    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if self.n_layers > 0 && self.hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut affine = |rows: usize, cols: usize| {
            let a = Affine {
                w: offset,
                b: offset + rows * cols,
                rows,
                cols,
            };
            offset += rows * cols + rows;
            a
        };
        let mut hidden = Vec::with_capacity(self.n_layers);
        let mut width = self.d_in;
        for _ in 0..self.n_layers {
            hidden.push(affine(self.hidden, width));
            width = self.hidden;
        }
        let mean = affine(self.d_out, width);
        let log_var = affine(self.d_out, width);
        let mask_token = offset;
        Layout {
            hidden,
            mean,
            log_var,
            mask_token,
            total: mask_token + self.d_in,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Encoder weights. `version` increments on every mutation so tapes from an
/// earlier forward pass can be detected as stale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EncoderRecord", into = "EncoderRecord")]
pub struct EncoderParams {
    arch: Architecture,
    params: Vec<f64>,
    version: u64,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct EncoderRecord {
    arch: Architecture,
    params: Vec<f64>,
}

impl TryFrom<EncoderRecord> for EncoderParams {
    type Error = Error;

    fn try_from(r: EncoderRecord) -> Result<Self> {
        Self::from_flat(r.arch, r.params)
    }
}

impl From<EncoderParams> for EncoderRecord {
    fn from(p: EncoderParams) -> Self {
        Self {
            arch: p.arch,
            params: p.params,
        }
    }
}

impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    visible: Option<Vec<bool>>,
    /// `layers[0]` is the (masked) input, `layers[k]` the k-th tanh output.
    layers: Vec<Vec<f64>>,
}

impl EncoderParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        Ok(Self {
            arch,
            params: vec![0.0; layout.total],
            version: 0,
            layout,
        })
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights; zero biases (so `σ² = 1` at the log-variance head) and a zero
    /// mask token.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = p.layout().clone();
        for a in layout.hidden.iter().chain([&layout.mean, &layout.log_var]) {
            let bound = 1.0 / (a.cols as f64).sqrt();
            for w in &mut p.params[a.w..a.w + a.rows * a.cols] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn from_flat(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        check_dim(layout.total, params.len())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameter".into()));
        }
        Ok(Self {
            arch,
            params,
            version: 0,
            layout,
        })
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn flat(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the flat parameters; invalidates outstanding tapes.
    pub fn flat_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn mask_token(&self) -> &[f64] {
        let off = self.layout().mask_token;
        &self.params[off..off + self.arch.d_in]
    }

    /// Range of the mask token inside the flat vector.
    pub fn mask_token_range(&self) -> std::ops::Range<usize> {
        let off = self.layout().mask_token;
        off..off + self.arch.d_in
    }

    /// Range of the mean head (weights and bias).
    pub fn mean_head_range(&self) -> std::ops::Range<usize> {
        let a = self.layout().mean;
        a.w..a.b + a.rows
    }

    /// Range of the log-variance head (weights and bias).
    pub fn log_var_head_range(&self) -> std::ops::Range<usize> {
        let a = self.layout().log_var;
        a.w..a.b + a.rows
    }

    fn affine_forward(&self, a: &Affine, x: &[f64]) -> Vec<f64> {
        let w = &self.params[a.w..a.w + a.rows * a.cols];
        let b = &self.params[a.b..a.b + a.rows];
        (0..a.rows)
            .map(|r| {
                let row = &w[r * a.cols..(r + 1) * a.cols];
                b[r] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
            })
            .collect()
    }
}

/// Encodes `x`. With `visible = Some(v)`, coordinates where `v[i]` is false
/// are replaced by the mask token before the first layer.
pub fn forward(
    params: &EncoderParams,
    x: &[f64],
    visible: Option<&[bool]>,
) -> Result<(DiagGaussian, Tape)> {
    check_dim(params.arch.d_in, x.len())?;
    let input = match visible {
        Some(v) => apply_mask(x, v, params.mask_token())?,
        None => x.to_vec(),
    };
    let layout = params.layout();
    let mut layers = Vec::with_capacity(layout.hidden.len() + 1);
    layers.push(input);
    for a in &layout.hidden {
        let pre = params.affine_forward(a, layers.last().expect("input pushed"));
        layers.push(pre.into_iter().map(f64::tanh).collect());
    }
    let last = layers.last().expect("input pushed");
    let mu = params.affine_forward(&layout.mean, last);
    let log_var = params.affine_forward(&layout.log_var, last);
    let z = DiagGaussian::new(mu, log_var)?;
    Ok((
        z,
        Tape {
            version: params.version,
            visible: visible.map(<[bool]>::to_vec),
            layers,
        },
    ))
}

/// Reverse pass. Adds parameter gradients into `grads` (flat layout) and
/// returns the gradient with respect to the unmasked input `x` (zero at
/// masked coordinates, whose gradient goes to the mask token instead).
pub fn backward_into(
    params: &EncoderParams,
    tape: &Tape,
    upstream: &GaussianGrad,
    grads: &mut [f64],
) -> Result<Vec<f64>> {
    if tape.version != params.version {
        return Err(Error::StaleTape {
            tape: tape.version,
            params: params.version,
        });
    }
    check_dim(params.params.len(), grads.len())?;
    check_dim(params.arch.d_out, upstream.dim())?;
    let layout = params.layout();
    let p = &params.params;

    let last = tape.layers.last().expect("tape has the input");
    let mut d_act = vec![0.0; last.len()];
    for (a, up) in [
        (&layout.mean, &upstream.d_mu),
        (&layout.log_var, &upstream.d_log_var),
    ] {
        for r in 0..a.rows {
            let g = up[r];
            if g == 0.0 {
                continue;
            }
            grads[a.b + r] += g;
            let row = a.w + r * a.cols;
            for c in 0..a.cols {
                grads[row + c] += g * last[c];
                d_act[c] += g * p[row + c];
            }
        }
    }

    for (k, a) in layout.hidden.iter().enumerate().rev() {
        let out = &tape.layers[k + 1];
        let inp = &tape.layers[k];
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(out)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        let mut d_in = vec![0.0; a.cols];
        for (r, &g) in d_pre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads[a.b + r] += g;
            let row = a.w + r * a.cols;
            for c in 0..a.cols {
                grads[row + c] += g * inp[c];
                d_in[c] += g * p[row + c];
            }
        }
        d_act = d_in;
    }

    if let Some(visible) = &tape.visible {
        let tok = layout.mask_token;
        for (i, v) in visible.iter().enumerate() {
            if !v {
                grads[tok + i] += d_act[i];
                d_act[i] = 0.0;
            }
        }
    }
    Ok(d_act)
}

/// Parameter gradients and input gradient for one upstream gradient.
pub fn backward(
    params: &EncoderParams,
    tape: &Tape,
    upstream: &GaussianGrad,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut grads = vec![0.0; params.params.len()];
    let d_x = backward_into(params, tape, upstream, &mut grads)?;
    Ok((grads, d_x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture {
            d_in: 4,
            hidden: 5,
            n_layers: 2,
            d_out: 3,
        }
    }

    #[test]
    fn zero_weights_give_unit_variance_at_origin() {
        let p = EncoderParams::zeros(small()).unwrap();
        let (z, _) = forward(&p, &[1.0, -2.0, 0.5, 3.0], None).unwrap();
        assert!(z.mu().iter().all(|m| *m == 0.0));
        assert!(z.variance().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn identity_mean_head_passes_input_through() {
        let arch = Architecture {
            d_in: 3,
            hidden: 0,
            n_layers: 0,
            d_out: 3,
        };
        let mut p = EncoderParams::zeros(arch).unwrap();
        let w = p.layout().mean.w;
        for i in 0..3 {
            p.flat_mut()[w + i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.7, 2.5];
        let (z, _) = forward(&p, &x, None).unwrap();
        assert_eq!(z.mu(), &x);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = EncoderParams::init(small(), 7).unwrap();
        let (_, tape) =
            forward(&p, &[0.1, 0.2, 0.3, 0.4], Some(&[true, false, true, false])).unwrap();
        let (g, dx) = backward(&p, &tape, &GaussianGrad::zeros(3)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_layer_gradient_is_outer_product() {
        let arch = Architecture {
            d_in: 3,
            hidden: 0,
            n_layers: 0,
            d_out: 2,
        };
        let p = EncoderParams::init(arch, 3).unwrap();
        let x = [0.5, -1.0, 2.0];
        let (_, tape) = forward(&p, &x, None).unwrap();
        let up = GaussianGrad {
            d_mu: vec![1.5, -0.5],
            d_log_var: vec![0.25, 2.0],
        };
        let (g, _) = backward(&p, &tape, &up).unwrap();
        let l = p.layout().clone();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g[l.mean.w + r * 3 + c], up.d_mu[r] * x[c]);
                assert_eq!(g[l.log_var.w + r * 3 + c], up.d_log_var[r] * x[c]);
            }
            assert_eq!(g[l.mean.b + r], up.d_mu[r]);
            assert_eq!(g[l.log_var.b + r], up.d_log_var[r]);
        }
    }

    #[test]
    fn mask_token_only_sees_masked_coordinates() {
        let p = EncoderParams::init(small(), 1).unwrap();
        let visible = [true, false, true, true];
        let (_, tape) = forward(&p, &[0.1, 0.2, 0.3, 0.4], Some(&visible)).unwrap();
        let up = GaussianGrad {
            d_mu: vec![1.0, 1.0, 1.0],
            d_log_var: vec![1.0, 1.0, 1.0],
        };
        let (g, dx) = backward(&p, &tape, &up).unwrap();
        let tok = &g[p.mask_token_range()];
        assert_eq!(tok[0], 0.0);
        assert_ne!(tok[1], 0.0);
        assert_eq!(tok[2], 0.0);
        assert_eq!(dx[1], 0.0);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut p = EncoderParams::init(small(), 1).unwrap();
        let (_, tape) = forward(&p, &[0.0; 4], None).unwrap();
        p.flat_mut()[0] += 1.0;
        assert!(matches!(
            backward(&p, &tape, &GaussianGrad::zeros(3)),
            Err(Error::StaleTape { .. })
        ));
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = EncoderParams::init(small(), 1).unwrap();
        assert!(forward(&p, &[0.0; 3], None).is_err());
        assert!(EncoderParams::from_flat(small(), vec![0.0; 3]).is_err());
    }
}
