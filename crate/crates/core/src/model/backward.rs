//! Analytic gradients of batch objectives with respect to parameters
//! (and optionally inputs).
//!
//! An objective is a weighted sum of per-batch mean losses; negative
//! weights turn a descent term into an ascent term. Each term runs its
//! own cached forward pass, seeds the backward pass with the gradient
//! of its mean loss at the logits, and accumulates into one gradient.

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2};

use super::config::Label;
use super::forward::{fold_patches, run_forward, BlockCache, ForwardCache, LnCache};
use super::loss::{kd_loss_and_grad, task_loss_and_grad};
use super::state::{ModelState, NamedTensors};
use crate::error::{Error, Result};

/// Per-parameter gradient tensors, in the model's enumeration order.
pub type Gradient = NamedTensors;

/// What a single objective term measures on its batch.
pub enum TermLoss {
    /// Cross-entropy (or multilabel BCE) against the batch labels.
    Task,
    /// KL divergence from a teacher's outputs on the same images.
    Distill { teacher_logits: Array2<f64> },
}

/// One weighted term of a training objective.
pub struct ObjectiveTerm<'a> {
    pub weight: f64,
    pub images: ArrayView4<'a, f64>,
    pub labels: &'a [Label],
    pub loss: TermLoss,
}

/// Gradient of the full objective plus each term's unweighted mean loss.
pub struct GradientOutput {
    pub grads: Gradient,
    pub term_values: Vec<f64>,
}

/// Gradient of `sum_i weight_i * mean_loss_i` over all trainable
/// parameters; frozen parameters get zero tensors.
pub fn compute_gradient(model: &ModelState, terms: &[ObjectiveTerm]) -> Result<GradientOutput> {
    if terms.is_empty() {
        return Err(Error::input("objective has no terms"));
    }
    let mut grads: Gradient = model
        .params
        .iter()
        .map(|(n, t)| (n.clone(), ndarray::ArrayD::zeros(t.raw_dim())))
        .collect();
    let mut term_values = Vec::with_capacity(terms.len());

    for term in terms {
        if term.images.dim().0 == 0 {
            return Err(Error::input("empty batch in objective term"));
        }
        if !term.weight.is_finite() {
            return Err(Error::input("non-finite term weight"));
        }
        let (logits, cache) = run_forward(model, term.images, true)?;
        let cache = cache.expect("cache requested");
        let (mean_loss, mut dlogits) = match &term.loss {
            TermLoss::Task => {
                let (losses, grad) =
                    task_loss_and_grad(logits.view(), term.labels, model.config.task_kind)?;
                (losses.mean().unwrap_or(0.0), grad)
            }
            TermLoss::Distill { teacher_logits } => {
                let (kd, grad) =
                    kd_loss_and_grad(logits.view(), teacher_logits.view(), model.config.task_kind)?;
                (kd.mean().unwrap_or(0.0), grad)
            }
        };
        dlogits.mapv_inplace(|g| g * term.weight);
        backprop(model, &cache, &dlogits, Some(&mut grads), None);
        term_values.push(mean_loss);
    }

    for (name, grad) in grads.iter_mut() {
        if !model.trainable[name] {
            grad.fill(0.0);
        }
    }
    Ok(GradientOutput { grads, term_values })
}

/// Gradient of the mean task loss with respect to the input images,
/// with parameters held fixed. Returns the gradient and the loss value.
pub fn compute_input_gradient(
    model: &ModelState,
    images: ArrayView4<f64>,
    labels: &[Label],
) -> Result<(Array4<f64>, f64)> {
    let (logits, cache) = run_forward(model, images, true)?;
    let cache = cache.expect("cache requested");
    let (losses, dlogits) = task_loss_and_grad(logits.view(), labels, model.config.task_kind)?;
    let (batch, channels, height, width) = images.dim();
    let mut dimages = Array4::zeros((batch, channels, height, width));
    backprop(model, &cache, &dlogits, None, Some(&mut dimages));
    Ok((dimages, losses.mean().unwrap_or(0.0)))
}

fn p2<'a>(model: &'a ModelState, name: &str) -> ArrayView2<'a, f64> {
    model
        .param(name)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-d parameter")
}

fn p1<'a>(model: &'a ModelState, name: &str) -> ArrayView1<'a, f64> {
    model
        .param(name)
        .view()
        .into_dimensionality::<Ix1>()
        .expect("1-d parameter")
}

fn flat2<'a>(x: &'a Array3<f64>) -> ArrayView2<'a, f64> {
    let (b, n, d) = x.dim();
    x.view()
        .into_shape_with_order((b * n, d))
        .expect("contiguous")
}

/// d/dX of Y = X W (+ b): accumulates dW and db, returns dX.
fn linear_backward(
    x: &Array3<f64>,
    w: ArrayView2<f64>,
    dy: &Array3<f64>,
    dw: Option<&mut ndarray::ArrayD<f64>>,
    db: Option<&mut ndarray::ArrayD<f64>>,
) -> Array3<f64> {
    let (b, n, _) = x.dim();
    let d_in = w.nrows();
    let dy2 = flat2(dy);
    if let Some(dw) = dw {
        let delta = flat2(x).t().dot(&dy2);
        let mut dwv = dw.view_mut().into_dimensionality::<Ix2>().expect("2-d grad");
        dwv += &delta;
    }
    if let Some(db) = db {
        let delta = dy2.sum_axis(ndarray::Axis(0));
        let mut dbv = db.view_mut().into_dimensionality::<Ix1>().expect("1-d grad");
        dbv += &delta;
    }
    dy2.dot(&w.t())
        .into_shape_with_order((b, n, d_in))
        .expect("shape preserved")
}

/// Rebuild the scaled LayerNorm output from its cache.
fn ln_output(cache: &LnCache, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> Array3<f64> {
    let mut out = cache.normalized.clone();
    for mut row in out.rows_mut() {
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.iter().zip(beta.iter())) {
            *v = *v * g + b;
        }
    }
    out
}

fn layer_norm_backward(
    dy: &Array3<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
    dgamma: &mut ndarray::ArrayD<f64>,
    dbeta: &mut ndarray::ArrayD<f64>,
) -> Array3<f64> {
    let (batch, tokens, d) = dy.dim();
    let mut dx = Array3::zeros((batch, tokens, d));
    let mut dg = dgamma
        .view_mut()
        .into_dimensionality::<Ix1>()
        .expect("1-d grad");
    let mut db = dbeta
        .view_mut()
        .into_dimensionality::<Ix1>()
        .expect("1-d grad");
    for b in 0..batch {
        for t in 0..tokens {
            let istd = cache.inv_std[[b, t]];
            let mut sum1 = 0.0;
            let mut sum2 = 0.0;
            for c in 0..d {
                let xhat = cache.normalized[[b, t, c]];
                let dyc = dy[[b, t, c]];
                dg[c] += dyc * xhat;
                db[c] += dyc;
                let dxhat = dyc * gamma[c];
                sum1 += dxhat;
                sum2 += dxhat * xhat;
            }
            let inv_d = 1.0 / d as f64;
            for c in 0..d {
                let xhat = cache.normalized[[b, t, c]];
                let dxhat = dy[[b, t, c]] * gamma[c];
                dx[[b, t, c]] = istd * (dxhat - inv_d * (sum1 + xhat * sum2));
            }
        }
    }
    dx
}

fn split_heads(m: &Array3<f64>, heads: usize, head_dim: usize) -> Array4<f64> {
    let (batch, tokens, _) = m.dim();
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
}

fn merge_heads(m: &Array4<f64>) -> Array3<f64> {
    let (batch, heads, tokens, head_dim) = m.dim();
    let mut out = Array3::zeros((batch, tokens, heads * head_dim));
    for b in 0..batch {
        for t in 0..tokens {
            for h in 0..heads {
                for c in 0..head_dim {
                    out[[b, t, h * head_dim + c]] = m[[b, h, t, c]];
                }
            }
        }
    }
    out
}

/// Reverse pass from d(objective)/d(logits). Accumulates parameter
/// gradients into `grads` when given, and writes image-space gradients
/// into `dimages` when given.
fn backprop(
    model: &ModelState,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    mut grads: Option<&mut Gradient>,
    dimages: Option<&mut Array4<f64>>,
) {
    let cfg = &model.config;
    let (batch, tokens, _) = cache.x_final.dim();
    let heads = cfg.heads;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    // Head.
    if let Some(g) = grads.as_deref_mut() {
        let dwh = cache.pooled.t().dot(dlogits);
        let mut dw = g["head.weight"]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        dw += &dwh;
        let mut db = g["head.bias"]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d");
        db += &dlogits.sum_axis(ndarray::Axis(0));
    }
    let dpooled = dlogits.dot(&p2(model, "head.weight").t());

    // Mean pooling spreads the gradient evenly over tokens.
    let inv_tokens = 1.0 / tokens as f64;
    let mut d_lnf_out = Array3::zeros((batch, tokens, cfg.embed_dim));
    for b in 0..batch {
        for t in 0..tokens {
            for c in 0..cfg.embed_dim {
                d_lnf_out[[b, t, c]] = dpooled[[b, c]] * inv_tokens;
            }
        }
    }

    // Final LayerNorm.
    let mut dg_f = ndarray::ArrayD::zeros(model.param("norm.gamma").raw_dim());
    let mut db_f = ndarray::ArrayD::zeros(model.param("norm.beta").raw_dim());
    let mut dx = layer_norm_backward(
        &d_lnf_out,
        &cache.ln_f,
        p1(model, "norm.gamma"),
        &mut dg_f,
        &mut db_f,
    );
    if let Some(g) = grads.as_deref_mut() {
        *g.get_mut("norm.gamma").unwrap() += &dg_f;
        *g.get_mut("norm.beta").unwrap() += &db_f;
    }

    // Blocks in reverse.
    for (i, blk) in cache.blocks.iter().enumerate().rev() {
        let p = |suffix: &str| format!("blocks.{i}.{suffix}");

        // MLP branch: x = x_mid + mlp(ln2(x_mid)).
        let d_mlp_out = dx.clone();
        let mut dx_mid = dx;

        let (dw2, db2, dw1, db1, dg2, dbeta2);
        {
            let ln2_out = ln_output(&blk.ln2, p1(model, &p("norm2.gamma")), p1(model, &p("norm2.beta")));
            let mut dw2_ = ndarray::ArrayD::zeros(model.param(&p("mlp.w2")).raw_dim());
            let mut db2_ = ndarray::ArrayD::zeros(model.param(&p("mlp.b2")).raw_dim());
            let dact = linear_backward(
                &blk.act,
                p2(model, &p("mlp.w2")),
                &d_mlp_out,
                Some(&mut dw2_),
                Some(&mut db2_),
            );
            let mut dh1 = dact;
            ndarray::Zip::from(&mut dh1)
                .and(&blk.h1)
                .for_each(|d, &h| *d *= super::forward::gelu_prime(h));
            let mut dw1_ = ndarray::ArrayD::zeros(model.param(&p("mlp.w1")).raw_dim());
            let mut db1_ = ndarray::ArrayD::zeros(model.param(&p("mlp.b1")).raw_dim());
            let d_ln2_out = linear_backward(
                &ln2_out,
                p2(model, &p("mlp.w1")),
                &dh1,
                Some(&mut dw1_),
                Some(&mut db1_),
            );
            let mut dg2_ = ndarray::ArrayD::zeros(model.param(&p("norm2.gamma")).raw_dim());
            let mut dbeta2_ = ndarray::ArrayD::zeros(model.param(&p("norm2.beta")).raw_dim());
            let dx_from_ln2 = layer_norm_backward(
                &d_ln2_out,
                &blk.ln2,
                p1(model, &p("norm2.gamma")),
                &mut dg2_,
                &mut dbeta2_,
            );
            dx_mid += &dx_from_ln2;
            (dw2, db2, dw1, db1, dg2, dbeta2) = (dw2_, db2_, dw1_, db1_, dg2_, dbeta2_);
        }
        if let Some(g) = grads.as_deref_mut() {
            *g.get_mut(&p("mlp.w2")).unwrap() += &dw2;
            *g.get_mut(&p("mlp.b2")).unwrap() += &db2;
            *g.get_mut(&p("mlp.w1")).unwrap() += &dw1;
            *g.get_mut(&p("mlp.b1")).unwrap() += &db1;
            *g.get_mut(&p("norm2.gamma")).unwrap() += &dg2;
            *g.get_mut(&p("norm2.beta")).unwrap() += &dbeta2;
        }

        // Attention branch: x_mid = x_in + attn(ln1(x_in)).
        let d_attn_out = dx_mid.clone();
        let mut dx_in = dx_mid;

        let mut dwo = ndarray::ArrayD::zeros(model.param(&p("attn.wo")).raw_dim());
        let mut dbo = ndarray::ArrayD::zeros(model.param(&p("attn.bo")).raw_dim());
        let dctx = linear_backward(
            &blk.ctx,
            p2(model, &p("attn.wo")),
            &d_attn_out,
            Some(&mut dwo),
            Some(&mut dbo),
        );
        let dctx_h = split_heads(&dctx, heads, head_dim);

        let mut dq = Array4::zeros((batch, heads, tokens, head_dim));
        let mut dk = Array4::zeros((batch, heads, tokens, head_dim));
        let mut dv = Array4::zeros((batch, heads, tokens, head_dim));
        for b in 0..batch {
            for h in 0..heads {
                let a = blk.attn.slice(s![b, h, .., ..]);
                let dctx_bh = dctx_h.slice(s![b, h, .., ..]);
                let vh = blk.v.slice(s![b, h, .., ..]);
                let qh = blk.q.slice(s![b, h, .., ..]);
                let kh = blk.k.slice(s![b, h, .., ..]);

                let da = dctx_bh.dot(&vh.t());
                dv.slice_mut(s![b, h, .., ..]).assign(&a.t().dot(&dctx_bh));

                // Softmax backward per row.
                let mut ds = Array2::zeros((tokens, tokens));
                for t in 0..tokens {
                    let dot: f64 = (0..tokens).map(|j| da[[t, j]] * a[[t, j]]).sum();
                    for j in 0..tokens {
                        ds[[t, j]] = a[[t, j]] * (da[[t, j]] - dot);
                    }
                }
                ds.mapv_inplace(|v| v * scale);
                dq.slice_mut(s![b, h, .., ..]).assign(&ds.dot(&kh));
                dk.slice_mut(s![b, h, .., ..]).assign(&ds.t().dot(&qh));
            }
        }

        let dq3 = merge_heads(&dq);
        let dk3 = merge_heads(&dk);
        let dv3 = merge_heads(&dv);

        let ln1_out = ln_output(&blk.ln1, p1(model, &p("norm1.gamma")), p1(model, &p("norm1.beta")));
        let mut d_ln1_out = Array3::zeros(ln1_out.raw_dim());
        for (proj, dproj) in [("q", &dq3), ("k", &dk3), ("v", &dv3)] {
            let mut dw = ndarray::ArrayD::zeros(model.param(&p(&format!("attn.w{proj}"))).raw_dim());
            let mut db = ndarray::ArrayD::zeros(model.param(&p(&format!("attn.b{proj}"))).raw_dim());
            let dx_proj = linear_backward(
                &ln1_out,
                p2(model, &p(&format!("attn.w{proj}"))),
                dproj,
                Some(&mut dw),
                Some(&mut db),
            );
            d_ln1_out += &dx_proj;
            if let Some(g) = grads.as_deref_mut() {
                *g.get_mut(&p(&format!("attn.w{proj}"))).unwrap() += &dw;
                *g.get_mut(&p(&format!("attn.b{proj}"))).unwrap() += &db;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            *g.get_mut(&p("attn.wo")).unwrap() += &dwo;
            *g.get_mut(&p("attn.bo")).unwrap() += &dbo;
        }

        let mut dg1 = ndarray::ArrayD::zeros(model.param(&p("norm1.gamma")).raw_dim());
        let mut dbeta1 = ndarray::ArrayD::zeros(model.param(&p("norm1.beta")).raw_dim());
        let dx_from_ln1 = layer_norm_backward(
            &d_ln1_out,
            &blk.ln1,
            p1(model, &p("norm1.gamma")),
            &mut dg1,
            &mut dbeta1,
        );
        dx_in += &dx_from_ln1;
        if let Some(g) = grads.as_deref_mut() {
            *g.get_mut(&p("norm1.gamma")).unwrap() += &dg1;
            *g.get_mut(&p("norm1.beta")).unwrap() += &dbeta1;
        }

        dx = dx_in;
    }

    // Patch embedding and position embeddings.
    if let Some(g) = grads.as_deref_mut() {
        {
            let mut dpos = g["pos_embed"]
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2-d");
            for b in 0..batch {
                dpos += &dx.slice(s![b, .., ..]);
            }
        }
        let dx2 = flat2(&dx);
        let delta_w = flat2(&cache.patches).t().dot(&dx2);
        let mut dw = g["patch_embed.weight"]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        dw += &delta_w;
        let mut db = g["patch_embed.bias"]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d");
        db += &dx2.sum_axis(ndarray::Axis(0));
    }
    if let Some(dimages) = dimages {
        let dpatches = flat2(&dx)
            .dot(&p2(model, "patch_embed.weight").t())
            .into_shape_with_order((batch, tokens, cfg.patch_dim()))
            .expect("shape preserved");
        let folded = fold_patches(
            &dpatches,
            batch,
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
            cfg.patch_size,
        );
        dimages.assign(&folded);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{TaskKind, ViTConfig};
    use crate::model::state::{build_model, set_trainable_last_k};
    use rand::Rng;

    fn cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            depth: 2,
            heads: 2,
            embed_dim: 8,
            mlp_ratio: 2.0,
            num_outputs: 3,
            task_kind: TaskKind::Multiclass,
        }
    }

    fn batch(n: usize, cfg: &ViTConfig, seed: u64) -> (Array4<f64>, Vec<Label>) {
        let mut rng = crate::rng::rng_for(seed, "grad-test");
        let mut images = Array4::zeros((n, cfg.channels, cfg.image_size, cfg.image_size));
        images.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let labels = (0..n)
            .map(|i| Label::Class(i % cfg.num_outputs))
            .collect();
        (images, labels)
    }

    #[test]
    fn negated_weight_negates_gradient() {
        let cfg = cfg();
        let model = build_model(&cfg, 0).unwrap();
        let (images, labels) = batch(4, &cfg, 1);
        let pos = compute_gradient(
            &model,
            &[ObjectiveTerm {
                weight: 1.0,
                images: images.view(),
                labels: &labels,
                loss: TermLoss::Task,
            }],
        )
        .unwrap();
        let neg = compute_gradient(
            &model,
            &[ObjectiveTerm {
                weight: -1.0,
                images: images.view(),
                labels: &labels,
                loss: TermLoss::Task,
            }],
        )
        .unwrap();
        for (name, g) in &pos.grads {
            let gn = &neg.grads[name];
            for (a, b) in g.iter().zip(gn.iter()) {
                assert_eq!((-a).to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn frozen_tensors_get_zero_gradients() {
        let cfg = cfg();
        let mut model = build_model(&cfg, 0).unwrap();
        set_trainable_last_k(&mut model, 1).unwrap();
        let (images, labels) = batch(4, &cfg, 2);
        let out = compute_gradient(
            &model,
            &[ObjectiveTerm {
                weight: 1.0,
                images: images.view(),
                labels: &labels,
                loss: TermLoss::Task,
            }],
        )
        .unwrap();
        assert!(out.grads["blocks.0.attn.wq"].iter().all(|&g| g == 0.0));
        assert!(out.grads["patch_embed.weight"].iter().all(|&g| g == 0.0));
        assert!(out.grads["blocks.1.attn.wq"].iter().any(|&g| g != 0.0));
        assert!(out.grads["head.weight"].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn empty_batch_is_input_error() {
        let cfg = cfg();
        let model = build_model(&cfg, 0).unwrap();
        let images = Array4::<f64>::zeros((0, 1, 8, 8));
        let labels: Vec<Label> = Vec::new();
        let err = compute_gradient(
            &model,
            &[ObjectiveTerm {
                weight: 1.0,
                images: images.view(),
                labels: &labels,
                loss: TermLoss::Task,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = cfg();
        let model = build_model(&cfg, 7).unwrap();
        let (mut images, labels) = batch(2, &cfg, 3);
        let (dimages, _) = compute_input_gradient(&model, images.view(), &labels).unwrap();
        let h = 1e-4;
        let probes = [(0usize, 0usize, 0usize, 0usize), (1, 0, 5, 3), (0, 0, 7, 7)];
        for (b, c, y, x) in probes {
            let orig = images[[b, c, y, x]];
            images[[b, c, y, x]] = orig + h;
            let lp = mean_loss(&model, &images, &labels);
            images[[b, c, y, x]] = orig - h;
            let lm = mean_loss(&model, &images, &labels);
            images[[b, c, y, x]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = dimages[[b, c, y, x]];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0),
                "fd {fd} vs analytic {an}"
            );
        }
    }

    fn mean_loss(model: &ModelState, images: &Array4<f64>, labels: &[Label]) -> f64 {
        let logits = super::super::forward::forward(model, images.view()).unwrap();
        super::super::loss::per_sample_loss(logits.view(), labels, model.config.task_kind)
            .unwrap()
            .mean()
            .unwrap()
    }
}
