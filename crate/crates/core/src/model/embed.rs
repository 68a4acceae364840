//! Patch, positional, temporal and target embeddings.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::image::{BBox, Image};
use crate::nn::{join, normal, Linear, ParamSet, Tensor};
use crate::scalar::Scalar;
use crate::ssm::FrameSequence;

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<T> {
    /// Patch projection, `C·p·p → D_model`.
    pub patch: Linear<T>,
    /// `E_t`, `[L_t, D_model]`.
    pub pos_template: Tensor<T>,
    /// `E_s`, `[L_s, D_model]`.
    pub pos_search: Tensor<T>,
    /// `E_a`, `[max_templates, D_model]`.
    pub temporal: Tensor<T>,
    /// Target-region vector of `E_b`.
    pub target_in: Tensor<T>,
    /// Background vector of `E_b`.
    pub target_out: Tensor<T>,
}

impl<T: Scalar> EmbeddingParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let dm = cfg.d_model;
        EmbeddingParams {
            patch: Linear::zeros(cfg.patch_dim(), dm, true),
            pos_template: Tensor::zeros(&[cfg.template_tokens(), dm]),
            pos_search: Tensor::zeros(&[cfg.search_tokens(), dm]),
            temporal: Tensor::zeros(&[cfg.max_templates, dm]),
            target_in: Tensor::zeros(&[dm]),
            target_out: Tensor::zeros(&[dm]),
        }
    }

    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut e = Self::zeros(cfg);
        e.patch = Linear::init(cfg.patch_dim(), cfg.d_model, true, 1.0, rng);
        for t in [
            &mut e.pos_template,
            &mut e.pos_search,
            &mut e.temporal,
            &mut e.target_in,
            &mut e.target_out,
        ] {
            t.data = normal(rng, t.len(), 0.02);
        }
        e
    }
}

impl<T: Scalar> ParamSet<T> for EmbeddingParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.patch.visit(&join(prefix, "patch"), f);
        self.pos_template.visit(&join(prefix, "pos_template"), f);
        self.pos_search.visit(&join(prefix, "pos_search"), f);
        self.temporal.visit(&join(prefix, "temporal"), f);
        self.target_in.visit(&join(prefix, "target_in"), f);
        self.target_out.visit(&join(prefix, "target_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.patch.visit_mut(&join(prefix, "patch"), f);
        self.pos_template.visit_mut(&join(prefix, "pos_template"), f);
        self.pos_search.visit_mut(&join(prefix, "pos_search"), f);
        self.temporal.visit_mut(&join(prefix, "temporal"), f);
        self.target_in.visit_mut(&join(prefix, "target_in"), f);
        self.target_out.visit_mut(&join(prefix, "target_out"), f);
    }
}

/// Flattens non-overlapping `p × p` patches in row-major grid order; each
/// patch vector is ordered `(channel, dy, dx)`.
pub fn patchify<T: Scalar>(image: &Image, p: usize) -> Result<Vec<T>> {
    ensure!(p > 0, "patch size must be positive");
    ensure!(
        image.height.is_multiple_of(p) && image.width.is_multiple_of(p),
        "image {}x{} is not divisible into {p}x{p} patches",
        image.height,
        image.width
    );
    let (gh, gw) = (image.height / p, image.width / p);
    let dim = image.channels * p * p;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..image.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(T::c(image.get(c, gy * p + dy, gx * p + dx) as f64));
                    }
                }
            }
        }
    }
    debug_assert_eq!(out.len(), gh * gw * dim);
    Ok(out)
}

/// `proj(patchify(image))`, `[HW/p², D_model]`.
pub fn patch_embed<T: Scalar>(image: &Image, p: usize, proj: &Linear<T>) -> Result<Vec<T>> {
    let patches = patchify(image, p)?;
    ensure!(
        proj.in_dim == image.channels * p * p,
        "patch projection expects {} inputs, patches have {}",
        proj.in_dim,
        image.channels * p * p
    );
    Ok(proj.forward(&patches))
}

/// Which template tokens lie inside the target box.
///
/// A token is inside when its patch center is inside `bbox` (template-crop
/// pixels). Boxes smaller than a patch are widened to one patch, and if no
/// center falls inside, the patch containing the box center is marked.
pub fn target_mask(bbox: &BBox, grid: (usize, usize), p: usize) -> Vec<bool> {
    let (gh, gw) = grid;
    let pf = p as f64;
    let b = BBox::new(bbox.x, bbox.y, bbox.w.max(pf), bbox.h.max(pf));
    let [x0, y0, x1, y1] = b.corners();
    let mut mask = vec![false; gh * gw];
    for r in 0..gh {
        for c in 0..gw {
            let (cx, cy) = ((c as f64 + 0.5) * pf, (r as f64 + 0.5) * pf);
            mask[r * gw + c] = cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1;
        }
    }
    if !mask.iter().any(|&m| m) {
        let c = ((b.x / pf).floor().max(0.0) as usize).min(gw - 1);
        let r = ((b.y / pf).floor().max(0.0) as usize).min(gh - 1);
        mask[r * gw + c] = true;
    }
    mask
}

/// `E_b` for one template, `[L_t, D_model]`.
pub fn target_embedding<T: Scalar>(bbox: &BBox, grid: (usize, usize), p: usize, emb: &EmbeddingParams<T>) -> Vec<T> {
    target_mask(bbox, grid, p)
        .into_iter()
        .flat_map(|inside| {
            if inside {
                emb.target_in.data.clone()
            } else {
                emb.target_out.data.clone()
            }
        })
        .collect()
}

/// Intermediate values kept for the embedding backward pass.
#[derive(Clone, Debug)]
pub struct ComposeCache<T> {
    pub template_patches: Vec<Vec<T>>,
    pub template_masks: Vec<Vec<bool>>,
    pub template_slots: Vec<usize>,
    pub search_patches: Vec<T>,
}

/// Template tokens `F_t + E_t + E_a[slot] + E_b`; `slot` indexes the
/// temporal table modulo its length.
pub fn embed_template<T: Scalar>(
    image: &Image,
    bbox: &BBox,
    slot: usize,
    cfg: &ModelConfig,
    emb: &EmbeddingParams<T>,
) -> Result<(Vec<T>, Vec<T>, Vec<bool>)> {
    ensure!(
        (image.height, image.width) == cfg.template_size,
        "template is {}x{}, expected {:?}",
        image.height,
        image.width,
        cfg.template_size
    );
    let dm = cfg.d_model;
    let patches = patchify::<T>(image, cfg.patch)?;
    let mut tokens = emb.patch.forward(&patches);
    let mask = target_mask(bbox, cfg.template_grid(), cfg.patch);
    let slot = slot % cfg.max_templates;
    let temporal = &emb.temporal.data[slot * dm..(slot + 1) * dm];
    for (t, tok) in tokens.chunks_exact_mut(dm).enumerate() {
        let pos = &emb.pos_template.data[t * dm..(t + 1) * dm];
        let tgt = if mask[t] {
            &emb.target_in.data
        } else {
            &emb.target_out.data
        };
        for i in 0..dm {
            tok[i] += pos[i] + temporal[i] + tgt[i];
        }
    }
    Ok((tokens, patches, mask))
}

/// Search tokens `F_s + E_s`.
pub fn embed_search<T: Scalar>(image: &Image, cfg: &ModelConfig, emb: &EmbeddingParams<T>) -> Result<(Vec<T>, Vec<T>)> {
    ensure!(
        (image.height, image.width) == cfg.search_size,
        "search region is {}x{}, expected {:?}",
        image.height,
        image.width,
        cfg.search_size
    );
    let patches = patchify::<T>(image, cfg.patch)?;
    let mut tokens = emb.patch.forward(&patches);
    for (t, p) in tokens.iter_mut().zip(&emb.pos_search.data) {
        *t += *p;
    }
    Ok((tokens, patches))
}

/// Frames `[t_1, …, t_k, search]` with lengths `[L_t, …, L_t, L_s]`.
pub fn compose_inputs<T: Scalar>(
    templates: &[Image],
    template_boxes: &[BBox],
    search: &Image,
    cfg: &ModelConfig,
    emb: &EmbeddingParams<T>,
) -> Result<(FrameSequence<T>, ComposeCache<T>)> {
    ensure!(!templates.is_empty(), "at least one template is required");
    ensure!(
        templates.len() == template_boxes.len(),
        "{} templates but {} boxes",
        templates.len(),
        template_boxes.len()
    );
    ensure!(
        templates.len() <= cfg.max_templates,
        "{} templates exceed the temporal table size {}",
        templates.len(),
        cfg.max_templates
    );
    let mut tokens = Vec::new();
    let mut lengths = Vec::new();
    let mut cache = ComposeCache {
        template_patches: Vec::new(),
        template_masks: Vec::new(),
        template_slots: Vec::new(),
        search_patches: Vec::new(),
    };
    for (j, (img, b)) in templates.iter().zip(template_boxes).enumerate() {
        let (t, patches, mask) = embed_template(img, b, j, cfg, emb)?;
        tokens.extend_from_slice(&t);
        lengths.push(cfg.template_tokens());
        cache.template_patches.push(patches);
        cache.template_masks.push(mask);
        cache.template_slots.push(j);
    }
    let (s, patches) = embed_search(search, cfg, emb)?;
    tokens.extend_from_slice(&s);
    lengths.push(cfg.search_tokens());
    cache.search_patches = patches;
    Ok((FrameSequence::new(cfg.d_model, tokens, lengths)?, cache))
}

/// Accumulates embedding gradients from `d_tokens` (`[L, D_model]` over the
/// composed sequence).
pub fn compose_backward<T: Scalar>(
    cache: &ComposeCache<T>,
    cfg: &ModelConfig,
    emb: &EmbeddingParams<T>,
    d_tokens: &[T],
    grads: &mut EmbeddingParams<T>,
) {
    let dm = cfg.d_model;
    let lt = cfg.template_tokens();
    for (j, (patches, mask)) in cache.template_patches.iter().zip(&cache.template_masks).enumerate() {
        let slot = cache.template_slots[j] % cfg.max_templates;
        let d = &d_tokens[j * lt * dm..(j + 1) * lt * dm];
        for (t, dt) in d.chunks_exact(dm).enumerate() {
            let tgt = if mask[t] {
                &mut grads.target_in.data
            } else {
                &mut grads.target_out.data
            };
            for i in 0..dm {
                grads.pos_template.data[t * dm + i] += dt[i];
                grads.temporal.data[slot * dm + i] += dt[i];
                tgt[i] += dt[i];
            }
        }
        emb.patch.backward_weights(patches, d, &mut grads.patch);
    }
    let d = &d_tokens[cache.template_patches.len() * lt * dm..];
    for (g, &v) in grads.pos_search.data.iter_mut().zip(d) {
        *g += v;
    }
    emb.patch.backward_weights(&cache.search_patches, d, &mut grads.patch);
}
