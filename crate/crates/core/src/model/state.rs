//! Model parameters: construction, trainability, reinitialization.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Named parameter tensors in fixed enumeration order.
pub type NamedTensors = IndexMap<String, ArrayD<f64>>;

/// Per-parameter boolean masks with the same names and shapes as the params.
pub type ParamMask = IndexMap<String, ArrayD<bool>>;

/// Weights draw from a truncated normal, biases start at zero, and
/// normalization scales start at one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InitKind {
    TruncNormal,
    Zero,
    One,
}

/// Std of the truncated normal used for weight initialization; samples
/// beyond two standard deviations are redrawn.
const INIT_STD: f64 = 0.02;

/// Model parameters plus per-tensor trainability and the seed record
/// the parameters were drawn from.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ViTConfig,
    pub params: NamedTensors,
    pub trainable: IndexMap<String, bool>,
    pub init_seed: u64,
}

/// The full (name, shape, init) table for a config, in enumeration order.
pub(crate) fn param_spec(config: &ViTConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = config.embed_dim;
    let m = config.mlp_dim();
    let mut spec = vec![
        (
            "patch_embed.weight".into(),
            vec![config.patch_dim(), d],
            InitKind::TruncNormal,
        ),
        ("patch_embed.bias".into(), vec![d], InitKind::Zero),
        (
            "pos_embed".into(),
            vec![config.num_patches(), d],
            InitKind::TruncNormal,
        ),
    ];
    for i in 0..config.depth {
        let p = |suffix: &str| format!("blocks.{i}.{suffix}");
        spec.push((p("norm1.gamma"), vec![d], InitKind::One));
        spec.push((p("norm1.beta"), vec![d], InitKind::Zero));
        for proj in ["wq", "wk", "wv", "wo"] {
            spec.push((p(&format!("attn.{proj}")), vec![d, d], InitKind::TruncNormal));
            let bias = format!("attn.b{}", &proj[1..]);
            spec.push((p(&bias), vec![d], InitKind::Zero));
        }
        spec.push((p("norm2.gamma"), vec![d], InitKind::One));
        spec.push((p("norm2.beta"), vec![d], InitKind::Zero));
        spec.push((p("mlp.w1"), vec![d, m], InitKind::TruncNormal));
        spec.push((p("mlp.b1"), vec![m], InitKind::Zero));
        spec.push((p("mlp.w2"), vec![m, d], InitKind::TruncNormal));
        spec.push((p("mlp.b2"), vec![d], InitKind::Zero));
    }
    spec.push(("norm.gamma".into(), vec![d], InitKind::One));
    spec.push(("norm.beta".into(), vec![d], InitKind::Zero));
    spec.push((
        "head.weight".into(),
        vec![d, config.num_outputs],
        InitKind::TruncNormal,
    ));
    spec.push(("head.bias".into(), vec![config.num_outputs], InitKind::Zero));
    spec
}

/// Draw one tensor from its initialization distribution. Each tensor
/// gets its own stream keyed by (seed, name), so a tensor's values do
/// not depend on how many tensors precede it.
pub(crate) fn init_tensor(name: &str, shape: &[usize], kind: InitKind, seed: u64) -> ArrayD<f64> {
    match kind {
        InitKind::Zero => ArrayD::zeros(IxDyn(shape)),
        InitKind::One => ArrayD::from_elem(IxDyn(shape), 1.0),
        InitKind::TruncNormal => {
            let mut rng = rng_for(seed, &format!("init/{name}"));
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let mut x = normal.sample(&mut rng);
                while x.abs() > 2.0 * INIT_STD {
                    x = normal.sample(&mut rng);
                }
                values.push(x);
            }
            ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape matches length")
        }
    }
}

/// Build a freshly initialized model. Deterministic given (config, seed);
/// every tensor starts trainable.
pub fn build_model(config: &ViTConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let spec = param_spec(config);
    let mut params = NamedTensors::with_capacity(spec.len());
    let mut trainable = IndexMap::with_capacity(spec.len());
    for (name, shape, kind) in spec {
        let tensor = init_tensor(&name, &shape, kind, seed);
        trainable.insert(name.clone(), true);
        params.insert(name, tensor);
    }
    Ok(ModelState {
        config: config.clone(),
        params,
        trainable,
        init_seed: seed,
    })
}

impl ModelState {
    /// Fetch a parameter tensor by name; panics on unknown names, which
    /// only arise from programming errors since the name set is fixed.
    pub fn param(&self, name: &str) -> &ArrayD<f64> {
        &self.params[name]
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable[name]
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Names of tensors currently marked trainable, in enumeration order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable
            .iter()
            .filter(|(_, &t)| t)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Mark only the last `k` transformer blocks (and everything downstream
/// of them) trainable.
///
/// The head is always trainable. For `k < depth` the patch projection,
/// position embeddings, and the first `depth - k` blocks are frozen; the
/// final normalization follows the last block (trainable when any block
/// is). `k = depth` unfreezes the whole model, matching full fine-tuning.
pub fn set_trainable_last_k(model: &mut ModelState, k: usize) -> Result<()> {
    let depth = model.config.depth;
    if k > depth {
        return Err(Error::input(format!(
            "k ({k}) out of range for depth {depth}"
        )));
    }
    let first_trainable_block = depth - k;
    for (name, flag) in model.trainable.iter_mut() {
        *flag = if name.starts_with("head.") {
            true
        } else if k == depth {
            true
        } else if let Some(rest) = name.strip_prefix("blocks.") {
            let idx: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .expect("block names carry an index");
            idx >= first_trainable_block
        } else if name.starts_with("norm.") {
            k >= 1
        } else {
            // patch_embed.* and pos_embed sit before every block.
            false
        };
    }
    Ok(())
}

/// Redraw the masked entries of each parameter tensor from the same
/// initialization distribution `build_model` uses, leaving unmasked
/// entries untouched. An all-true mask therefore reproduces
/// `build_model(config, seed)` exactly.
pub fn reinitialize_masked(model: &mut ModelState, mask: &ParamMask, seed: u64) -> Result<()> {
    for (name, m) in mask {
        let tensor = model.params.get(name).ok_or_else(|| {
            Error::input(format!("mask names unknown parameter tensor `{name}`"))
        })?;
        if m.shape() != tensor.shape() {
            return Err(Error::input(format!(
                "mask shape {:?} does not match `{name}` shape {:?}",
                m.shape(),
                tensor.shape()
            )));
        }
    }
    let spec = param_spec(&model.config);
    for (name, shape, kind) in spec {
        let Some(m) = mask.get(&name) else { continue };
        if !m.iter().any(|&b| b) {
            continue;
        }
        let fresh = init_tensor(&name, &shape, kind, seed);
        let tensor = model.params.get_mut(&name).expect("checked above");
        ndarray::Zip::from(tensor)
            .and(&fresh)
            .and(m)
            .for_each(|t, &f, &masked| {
                if masked {
                    *t = f;
                }
            });
    }
    Ok(())
}
