//! The encoder, projection head, site adversary, and linear pathology head,
//! plus the three training objectives.
//!
//! Parameters are plain [`Tensor`]s owned by the structs here. A forward pass
//! first *binds* the parameters onto a [`Graph`] (as differentiable leaves for
//! training or constants for inference) and then records the computation; the
//! bound node ids are how callers fetch per-parameter gradients afterwards.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Architecture sizes; every dimension is config-exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub conv_channels: (usize, usize),
    pub feature_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub adversary_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            conv_channels: (8, 16),
            feature_dim: 64,
            proj_hidden: 64,
            proj_dim: 32,
            adversary_hidden: 32,
        }
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Node ids of one parameter set bound onto a graph, in `named()` order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

fn bind_params(g: &mut Graph, params: &[(&str, &Tensor)], trainable: bool) -> Bound {
    let ids = params
        .iter()
        .map(|(_, t)| {
            if trainable {
                g.leaf((*t).clone().with_grad())
            } else {
                g.constant((*t).clone())
            }
        })
        .collect();
    Bound { ids }
}

/// `x @ w + b` with the bias row broadcast over the batch through an explicit
/// ones-column matmul, keeping all shape alignment visible on the tape.
pub fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    let rows = g.shape(x)[0];
    let ones = g.constant(Tensor::filled(vec![rows, 1], 1.0));
    let bias = g.matmul(ones, b)?;
    g.add(xw, bias)
}

// ── encoder ─────────────────────────────────────────────────────────────

/// Two conv blocks (3×3 stride 1, then 3×3 stride 2, relu after each),
/// global mean pooling, and an affine map to the feature dimension.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    image_size: usize,
}

impl EncoderParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init/encoder");
        let (c1, c2) = cfg.conv_channels;
        EncoderParams {
            conv1_w: kaiming_uniform(&mut rng, vec![c1, 1, 3, 3], 9),
            conv1_b: Tensor::zeros(vec![c1]),
            conv2_w: kaiming_uniform(&mut rng, vec![c2, c1, 3, 3], c1 * 9),
            conv2_b: Tensor::zeros(vec![c2]),
            fc_w: kaiming_uniform(&mut rng, vec![c2, cfg.feature_dim], c2),
            fc_b: Tensor::zeros(vec![1, cfg.feature_dim]),
            image_size: cfg.image_size,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("encoder.conv1.weight", &self.conv1_w),
            ("encoder.conv1.bias", &self.conv1_b),
            ("encoder.conv2.weight", &self.conv2_w),
            ("encoder.conv2.bias", &self.conv2_b),
            ("encoder.fc.weight", &self.fc_w),
            ("encoder.fc.bias", &self.fc_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("encoder.conv1.weight", &mut self.conv1_w),
            ("encoder.conv1.bias", &mut self.conv1_b),
            ("encoder.conv2.weight", &mut self.conv2_w),
            ("encoder.conv2.bias", &mut self.conv2_b),
            ("encoder.fc.weight", &mut self.fc_w),
            ("encoder.fc.bias", &mut self.fc_b),
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        bind_params(g, &self.named(), trainable)
    }

    /// `x [B,1,S,S] -> h [B, feature_dim]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::InvalidArgument(format!(
                "encoder expects single-channel input [B,1,S,S], got {s:?}"
            )));
        }
        if s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::InvalidArgument(format!(
                "encoder configured for {0}x{0} images, got {1}x{2}",
                self.image_size, s[2], s[3]
            )));
        }
        let [c1w, c1b, c2w, c2b, fcw, fcb] = bound.ids[..] else {
            return Err(Error::InvalidArgument("encoder binding has wrong arity".into()));
        };
        let y = g.conv2d(x, c1w, c1b, 1, 1)?;
        let y = g.relu(y);
        let y = g.conv2d(y, c2w, c2b, 2, 1)?;
        let y = g.relu(y);
        let pooled = g.global_mean_pool(y)?;
        affine(g, pooled, fcw, fcb)
    }
}

// ── projection head ─────────────────────────────────────────────────────

/// Two-layer MLP ending in row-wise l2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ProjectionParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init/projection");
        ProjectionParams {
            w1: kaiming_uniform(&mut rng, vec![cfg.feature_dim, cfg.proj_hidden], cfg.feature_dim),
            b1: Tensor::zeros(vec![1, cfg.proj_hidden]),
            w2: kaiming_uniform(&mut rng, vec![cfg.proj_hidden, cfg.proj_dim], cfg.proj_hidden),
            b2: Tensor::zeros(vec![1, cfg.proj_dim]),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("projection.fc1.weight", &self.w1),
            ("projection.fc1.bias", &self.b1),
            ("projection.fc2.weight", &self.w2),
            ("projection.fc2.bias", &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("projection.fc1.weight", &mut self.w1),
            ("projection.fc1.bias", &mut self.b1),
            ("projection.fc2.weight", &mut self.w2),
            ("projection.fc2.bias", &mut self.b2),
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        bind_params(g, &self.named(), trainable)
    }

    /// `h [B,D_f] -> z [B,D_z]` with unit rows.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, h: NodeId) -> Result<NodeId> {
        let [w1, b1, w2, b2] = bound.ids[..] else {
            return Err(Error::InvalidArgument("projection binding has wrong arity".into()));
        };
        let y = affine(g, h, w1, b1)?;
        let y = g.relu(y);
        let y = affine(g, y, w2, b2)?;
        g.l2_normalize_rows(y)
    }
}

// ── site adversary ──────────────────────────────────────────────────────

/// Small MLP predicting the site from a gradient-reversed copy of `h`.
#[derive(Debug, Clone)]
pub struct SiteAdversaryParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub num_sites: usize,
}

impl SiteAdversaryParams {
    pub fn init(cfg: &ModelConfig, num_sites: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init/adversary");
        SiteAdversaryParams {
            w1: kaiming_uniform(&mut rng, vec![cfg.feature_dim, cfg.adversary_hidden], cfg.feature_dim),
            b1: Tensor::zeros(vec![1, cfg.adversary_hidden]),
            w2: kaiming_uniform(&mut rng, vec![cfg.adversary_hidden, num_sites], cfg.adversary_hidden),
            b2: Tensor::zeros(vec![1, num_sites]),
            num_sites,
        }
    }

    /// All-zero weights; produces uniform site logits.
    pub fn zeros(cfg: &ModelConfig, num_sites: usize) -> Self {
        SiteAdversaryParams {
            w1: Tensor::zeros(vec![cfg.feature_dim, cfg.adversary_hidden]),
            b1: Tensor::zeros(vec![1, cfg.adversary_hidden]),
            w2: Tensor::zeros(vec![cfg.adversary_hidden, num_sites]),
            b2: Tensor::zeros(vec![1, num_sites]),
            num_sites,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("adversary.fc1.weight", &self.w1),
            ("adversary.fc1.bias", &self.b1),
            ("adversary.fc2.weight", &self.w2),
            ("adversary.fc2.bias", &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("adversary.fc1.weight", &mut self.w1),
            ("adversary.fc1.bias", &mut self.b1),
            ("adversary.fc2.weight", &mut self.w2),
            ("adversary.fc2.bias", &mut self.b2),
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        bind_params(g, &self.named(), trainable)
    }

    /// Site logits from a gradient-reversed copy of `h`. The reversal is part
    /// of this forward pass: the adversary never sees `h` un-reversed.
    pub fn forward_reversed(
        &self,
        g: &mut Graph,
        bound: &Bound,
        h: NodeId,
        lambda: f64,
    ) -> Result<NodeId> {
        let reversed = g.grad_reverse(h, lambda)?;
        self.forward_logits(g, bound, reversed)
    }

    fn forward_logits(&self, g: &mut Graph, bound: &Bound, input: NodeId) -> Result<NodeId> {
        let [w1, b1, w2, b2] = bound.ids[..] else {
            return Err(Error::InvalidArgument("adversary binding has wrong arity".into()));
        };
        let y = affine(g, input, w1, b1)?;
        let y = g.relu(y);
        affine(g, y, w2, b2)
    }
}

// ── linear pathology head ───────────────────────────────────────────────

/// Single-logit affine head on the backbone features.
#[derive(Debug, Clone)]
pub struct LinearHeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHeadParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init/head");
        LinearHeadParams {
            w: kaiming_uniform(&mut rng, vec![cfg.feature_dim, 1], cfg.feature_dim),
            b: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        LinearHeadParams {
            w: Tensor::zeros(vec![cfg.feature_dim, 1]),
            b: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("head.weight", &self.w), ("head.bias", &self.b)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("head.weight", &mut self.w), ("head.bias", &mut self.b)]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        bind_params(g, &self.named(), trainable)
    }

    /// `h [B,D_f] -> logits [B,1]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, h: NodeId) -> Result<NodeId> {
        let [w, b] = bound.ids[..] else {
            return Err(Error::InvalidArgument("head binding has wrong arity".into()));
        };
        affine(g, h, w, b)
    }

    /// Logits without a graph, for pure inference on extracted features.
    pub fn logits(&self, features: &[f64], n: usize, d: usize) -> Vec<f64> {
        assert_eq!(features.len(), n * d);
        let w = self.w.data();
        let b = self.b.data()[0];
        (0..n)
            .map(|i| {
                let row = &features[i * d..(i + 1) * d];
                row.iter().zip(w).map(|(x, wv)| x * wv).sum::<f64>() + b
            })
            .collect()
    }
}

// ── bundle ──────────────────────────────────────────────────────────────

/// Everything one training run owns: θ, ψ, optional φ, optional head.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub projection: ProjectionParams,
    pub adversary: Option<SiteAdversaryParams>,
    pub head: Option<LinearHeadParams>,
}

impl ModelBundle {
    /// Fresh random-initialized encoder and projection for `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        ModelBundle {
            config: cfg.clone(),
            encoder: EncoderParams::init(cfg, seed),
            projection: ProjectionParams::init(cfg, seed),
            adversary: None,
            head: None,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut all = self.encoder.named();
        all.extend(self.projection.named());
        if let Some(adv) = &self.adversary {
            all.extend(adv.named());
        }
        if let Some(head) = &self.head {
            all.extend(head.named());
        }
        all
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter, in `named()`
    /// order. Bit-identical parameters give identical checksums.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Checksum over the frozen parts only (encoder + projection).
    pub fn backbone_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.encoder.named().into_iter().chain(self.projection.named()) {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ── losses ──────────────────────────────────────────────────────────────

/// Normalized-temperature cross-entropy over the `2B` stacked views.
///
/// Anchor `i`'s positive is its paired view; the denominator runs over the
/// `2B-1` non-self entries of the cosine-similarity matrix. Inputs must be
/// row-normalized (`project` output already is). Returns the mean per-anchor
/// loss as a scalar node.
pub fn infonce_loss(g: &mut Graph, z1: NodeId, z2: NodeId, tau: f64) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::ShapeMismatch {
            op: "infonce",
            detail: format!("view batches {s1:?} vs {s2:?}"),
        });
    }
    let b = s1[0];
    let n = 2 * b;

    let z = g.concat(&[z1, z2])?;
    let zt = g.transpose(z)?;
    let sims = g.matmul(z, zt)?;
    let scaled = g.scalar_mul(sims, 1.0 / tau);

    // Push the diagonal far below any real similarity so exp() underflows to
    // exactly zero, excluding self-pairs from the denominator.
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = -1e9;
    }
    let diag = g.constant(Tensor::new(vec![n, n], diag)?);
    let masked = g.add(scaled, diag)?;

    // Row-wise log-sum-exp in shifted form: entries are at most 1/tau.
    let shift = 1.0 / tau;
    let shifted = g.add_scalar(masked, -shift);
    let exps = g.exp(shifted);
    let ones = g.constant(Tensor::filled(vec![n, 1], 1.0));
    let row_sums = g.matmul(exps, ones)?;
    let log_sums = g.log(row_sums);
    let lse_sum = g.sum(log_sums);
    let lse_total = g.add_scalar(lse_sum, shift * n as f64);

    // Positive-pair similarities: anchor i pairs with (i + B) mod 2B.
    let mut pos = vec![0.0; n * n];
    for i in 0..n {
        pos[i * n + (i + b) % n] = 1.0;
    }
    let pos = g.constant(Tensor::new(vec![n, n], pos)?);
    let pos_terms = g.mul(scaled, pos)?;
    let pos_sum = g.sum(pos_terms);

    let neg_pos = g.scalar_mul(pos_sum, -1.0);
    let diff = g.add(lse_total, neg_pos)?;
    Ok(g.scalar_mul(diff, 1.0 / n as f64))
}

/// Cross-entropy of the site adversary on a gradient-reversed copy of `h`,
/// scaled by `w_site`. The encoder receives the reversed gradient; the
/// adversary parameters descend the plain cross-entropy.
///
/// `w_site = 0` is allowed as the degenerate no-adversary case (the sweep grid
/// includes it); negative weights are rejected.
pub fn site_ce_loss(
    g: &mut Graph,
    adversary: &SiteAdversaryParams,
    adv_bound: &Bound,
    h: NodeId,
    sites: &[usize],
    w_site: f64,
    lambda: f64,
) -> Result<NodeId> {
    if w_site < 0.0 {
        return Err(Error::InvalidArgument(format!("w_site must be non-negative, got {w_site}")));
    }
    if let Some(&bad) = sites.iter().find(|&&s| s >= adversary.num_sites) {
        return Err(Error::InvalidArgument(format!(
            "site label {bad} out of range for {} sites",
            adversary.num_sites
        )));
    }
    let logits = adversary.forward_reversed(g, adv_bound, h, lambda)?;
    let ce = g.softmax_cross_entropy(logits, sites)?;
    Ok(g.scalar_mul(ce, w_site))
}

/// Mean weighted binary cross-entropy on logits, in overflow-free form.
pub fn weighted_bce_loss(
    g: &mut Graph,
    logits: NodeId,
    targets: &[f64],
    pos_weight: f64,
) -> Result<NodeId> {
    g.bce_with_logits(logits, targets, pos_weight)
}
