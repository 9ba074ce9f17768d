//! Forward pass through the Vision Transformer, with an optional
//! activation cache consumed by the backward pass.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis, Ix1, Ix2};

use super::state::ModelState;
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// LayerNorm activations needed for its backward pass: the normalized
/// values (before scale/shift) and the reciprocal standard deviations.
pub(crate) struct LnCache {
    pub normalized: Array3<f64>,
    pub inv_std: Array2<f64>,
}

pub(crate) struct BlockCache {
    pub x_in: Array3<f64>,
    pub ln1: LnCache,
    pub q: Array4<f64>,
    pub k: Array4<f64>,
    pub v: Array4<f64>,
    pub attn: Array4<f64>,
    pub ctx: Array3<f64>,
    pub x_mid: Array3<f64>,
    pub ln2: LnCache,
    pub h1: Array3<f64>,
    pub act: Array3<f64>,
}

pub(crate) struct ForwardCache {
    pub patches: Array3<f64>,
    pub blocks: Vec<BlockCache>,
    pub x_final: Array3<f64>,
    pub ln_f: LnCache,
    pub pooled: Array2<f64>,
}

fn param2<'a>(model: &'a ModelState, name: &str) -> ArrayView2<'a, f64> {
    model
        .param(name)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-d parameter")
}

fn param1<'a>(model: &'a ModelState, name: &str) -> ndarray::ArrayView1<'a, f64> {
    model
        .param(name)
        .view()
        .into_dimensionality::<Ix1>()
        .expect("1-d parameter")
}

/// Token-wise linear layer: (B, N, D_in) x (D_in, D_out) + bias.
fn linear(x: &Array3<f64>, w: ArrayView2<f64>, b: ndarray::ArrayView1<f64>) -> Array3<f64> {
    let (batch, tokens, d_in) = x.dim();
    let d_out = w.ncols();
    let flat = x
        .view()
        .into_shape_with_order((batch * tokens, d_in))
        .expect("contiguous activations");
    let mut out = flat.dot(&w);
    out += &b;
    out.into_shape_with_order((batch, tokens, d_out))
        .expect("shape product preserved")
}

/// LayerNorm over the channel axis with learned scale and shift.
fn layer_norm(
    x: &Array3<f64>,
    gamma: ndarray::ArrayView1<f64>,
    beta: ndarray::ArrayView1<f64>,
) -> (Array3<f64>, LnCache) {
    let (batch, tokens, d) = x.dim();
    let mut normalized = Array3::zeros((batch, tokens, d));
    let mut inv_std = Array2::zeros((batch, tokens));
    let mut out = Array3::zeros((batch, tokens, d));
    for b in 0..batch {
        for t in 0..tokens {
            let row = x.slice(s![b, t, ..]);
            let mean = row.mean().expect("nonempty row");
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[[b, t]] = istd;
            for c in 0..d {
                let n = (row[c] - mean) * istd;
                normalized[[b, t, c]] = n;
                out[[b, t, c]] = n * gamma[c] + beta[c];
            }
        }
    }
    (out, LnCache { normalized, inv_std })
}

/// Unfold (B, C, H, W) images into (B, N, C*P*P) flattened patches,
/// channel-major within each patch.
pub(crate) fn extract_patches(images: ArrayView4<f64>, patch: usize) -> Array3<f64> {
    let (batch, channels, height, width) = images.dim();
    let per_side = height / patch;
    let n = per_side * (width / patch);
    let pdim = channels * patch * patch;
    let mut out = Array3::zeros((batch, n, pdim));
    for b in 0..batch {
        for pr in 0..per_side {
            for pc in 0..(width / patch) {
                let token = pr * (width / patch) + pc;
                let mut idx = 0;
                for c in 0..channels {
                    for py in 0..patch {
                        for px in 0..patch {
                            out[[b, token, idx]] =
                                images[[b, c, pr * patch + py, pc * patch + px]];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter patch-space gradients back to image space; inverse of
/// `extract_patches` for gradient flow.
pub(crate) fn fold_patches(
    grads: &Array3<f64>,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Array4<f64> {
    let per_side_w = width / patch;
    let mut out = Array4::zeros((batch, channels, height, width));
    for b in 0..batch {
        for pr in 0..(height / patch) {
            for pc in 0..per_side_w {
                let token = pr * per_side_w + pc;
                let mut idx = 0;
                for c in 0..channels {
                    for py in 0..patch {
                        for px in 0..patch {
                            out[[b, c, pr * patch + py, pc * patch + px]] =
                                grads[[b, token, idx]];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_input(model: &ModelState, images: &ArrayView4<f64>) -> Result<()> {
    let cfg = &model.config;
    let (batch, channels, height, width) = images.dim();
    if batch == 0 {
        return Err(Error::input("empty image batch"));
    }
    if channels != cfg.channels || height != cfg.image_size || width != cfg.image_size {
        return Err(Error::input(format!(
            "image batch shape ({channels}, {height}, {width}) does not match config ({}, {}, {})",
            cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    Ok(())
}

/// Full forward pass. Pure function of (params, images); returns logits
/// of shape (batch, num_outputs).
pub fn forward(model: &ModelState, images: ArrayView4<f64>) -> Result<Array2<f64>> {
    let (logits, _) = run_forward(model, images, false)?;
    Ok(logits)
}

pub(crate) fn run_forward(
    model: &ModelState,
    images: ArrayView4<f64>,
    with_cache: bool,
) -> Result<(Array2<f64>, Option<ForwardCache>)> {
    check_input(model, &images)?;
    let cfg = &model.config;
    let (batch, _, _, _) = images.dim();
    let tokens = cfg.num_patches();
    let heads = cfg.heads;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    let patches = extract_patches(images, cfg.patch_size);
    let mut x = linear(
        &patches,
        param2(model, "patch_embed.weight"),
        param1(model, "patch_embed.bias"),
    );
    let pos = param2(model, "pos_embed");
    for b in 0..batch {
        let mut slab = x.slice_mut(s![b, .., ..]);
        slab += &pos;
    }

    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = |suffix: &str| format!("blocks.{i}.{suffix}");
        let x_in = x.clone();
        let (ln1_out, ln1) = layer_norm(
            &x,
            param1(model, &p("norm1.gamma")),
            param1(model, &p("norm1.beta")),
        );

        let q3 = linear(&ln1_out, param2(model, &p("attn.wq")), param1(model, &p("attn.bq")));
        let k3 = linear(&ln1_out, param2(model, &p("attn.wk")), param1(model, &p("attn.bk")));
        let v3 = linear(&ln1_out, param2(model, &p("attn.wv")), param1(model, &p("attn.bv")));

        let split = |m: &Array3<f64>| -> Array4<f64> {
            let mut out = Array4::zeros((batch, heads, tokens, head_dim));
            for b in 0..batch {
                for t in 0..tokens {
                    for h in 0..heads {
                        for c in 0..head_dim {
                            out[[b, h, t, c]] = m[[b, t, h * head_dim + c]];
                        }
                    }
                }
            }
            out
        };
        let (q, k, v) = (split(&q3), split(&k3), split(&v3));

        let mut attn = Array4::zeros((batch, heads, tokens, tokens));
        let mut ctx = Array3::zeros((batch, tokens, cfg.embed_dim));
        for b in 0..batch {
            for h in 0..heads {
                let qh = q.slice(s![b, h, .., ..]);
                let kh = k.slice(s![b, h, .., ..]);
                let vh = v.slice(s![b, h, .., ..]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                for mut row in scores.rows_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|s| (s - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|s| s / sum);
                }
                let ctx_h = scores.dot(&vh);
                attn.slice_mut(s![b, h, .., ..]).assign(&scores);
                for t in 0..tokens {
                    for c in 0..head_dim {
                        ctx[[b, t, h * head_dim + c]] = ctx_h[[t, c]];
                    }
                }
            }
        }

        let attn_out = linear(&ctx, param2(model, &p("attn.wo")), param1(model, &p("attn.bo")));
        let x_mid = &x_in + &attn_out;

        let (ln2_out, ln2) = layer_norm(
            &x_mid,
            param1(model, &p("norm2.gamma")),
            param1(model, &p("norm2.beta")),
        );
        let h1 = linear(&ln2_out, param2(model, &p("mlp.w1")), param1(model, &p("mlp.b1")));
        let act = h1.mapv(gelu);
        let mlp_out = linear(&act, param2(model, &p("mlp.w2")), param1(model, &p("mlp.b2")));
        x = &x_mid + &mlp_out;

        if with_cache {
            blocks.push(BlockCache {
                x_in,
                ln1,
                q,
                k,
                v,
                attn,
                ctx,
                x_mid,
                ln2,
                h1,
                act,
            });
        }
    }

    let x_final = x;
    let (ln_f_out, ln_f) = layer_norm(
        &x_final,
        param1(model, "norm.gamma"),
        param1(model, "norm.beta"),
    );
    let pooled = ln_f_out.mean_axis(Axis(1)).expect("tokens > 0");
    let mut logits = pooled.dot(&param2(model, "head.weight"));
    logits += &param1(model, "head.bias");

    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            tensor: "logits".into(),
            detail: format!("non-finite output {bad}"),
        });
    }

    let cache = with_cache.then_some(ForwardCache {
        patches,
        blocks,
        x_final,
        ln_f,
        pooled,
    });
    Ok((logits, cache))
}
