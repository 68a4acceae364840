//! The full tracker network: embeddings, block stack, box head and loss.

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod head;
pub mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{block_backward, block_forward, block_forward_taped, BlockParams, BlockState, BlockTape};
use crate::error::{ensure, Result};
use crate::image::{BBox, Image};
use crate::nn::{flatten, join, load_flat, zeros_like, ParamSet};
use crate::scalar::Scalar;
use crate::ssm::FrameSequence;

pub use config::ModelConfig;
pub use embed::EmbeddingParams;
pub use head::{decode_box, HeadMaps, HeadParams};
pub use loss::LossBreakdown;

/// Every learnable array of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub embed: EmbeddingParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head: HeadParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockParams::zeros(cfg.block_config()))
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            cfg: cfg.clone(),
            embed: EmbeddingParams::zeros(cfg),
            blocks,
            head: HeadParams::zeros(cfg),
        })
    }

    /// Deterministic random initialization from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = EmbeddingParams::init(cfg, &mut rng);
        let out_scale = 1.0 / (2.0 * cfg.n_blocks as f64).sqrt();
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockParams::init(cfg.block_config(), out_scale, &mut rng))
            .collect::<Result<_>>()?;
        let head = HeadParams::init(cfg, &mut rng);
        Ok(ModelParams {
            cfg: cfg.clone(),
            embed,
            blocks,
            head,
        })
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.cfg).expect("config already validated");
        let flat: Vec<U> = flatten(self).into_iter().map(|v| U::c(v.as_f64())).collect();
        load_flat(&mut out, &flat);
        out
    }

    pub fn initial_states(&self) -> Vec<BlockState<T>> {
        self.blocks.iter().map(|b| b.initial_state()).collect()
    }
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// One training example: templates with their boxes (template-crop pixels)
/// and a search region with its box (search-crop pixels).
#[derive(Clone, Debug)]
pub struct Sample {
    pub templates: Vec<Image>,
    pub template_boxes: Vec<BBox>,
    pub search: Image,
    pub search_box: BBox,
}

/// Runs the block stack. Without `states_in` each block starts from its
/// learnable initial states; otherwise block `k` is seeded with
/// `states_in[k]`. Returns the last frame's final features and every block's
/// final states.
pub fn backbone_forward<T: Scalar>(
    params: &ModelParams<T>,
    seq: &FrameSequence<T>,
    states_in: Option<&[BlockState<T>]>,
) -> Result<(Vec<T>, Vec<BlockState<T>>)> {
    let (x, states) = backbone_features(params, seq, states_in)?;
    let last = x.frame_count() - 1;
    Ok((x.frame(last).tokens, states))
}

/// As [`backbone_forward`], keeping the features of every frame.
pub fn backbone_features<T: Scalar>(
    params: &ModelParams<T>,
    seq: &FrameSequence<T>,
    states_in: Option<&[BlockState<T>]>,
) -> Result<(FrameSequence<T>, Vec<BlockState<T>>)> {
    if let Some(s) = states_in {
        ensure!(
            s.len() == params.blocks.len(),
            "{} seed states for {} blocks",
            s.len(),
            params.blocks.len()
        );
    }
    let mut x = seq.clone();
    let mut states = Vec::with_capacity(params.blocks.len());
    for (k, b) in params.blocks.iter().enumerate() {
        let init;
        let seed = match states_in {
            Some(s) => &s[k],
            None => {
                init = b.initial_state();
                &init
            }
        };
        let (y, st) = block_forward(&x, seed, b)?;
        x = y;
        states.push(st);
    }
    Ok((x, states))
}

/// Training-mode forward pass on one sample.
pub fn forward_sample<T: Scalar>(params: &ModelParams<T>, sample: &Sample) -> Result<HeadMaps<T>> {
    let cfg = &params.cfg;
    let (seq, _) = embed::compose_inputs(
        &sample.templates,
        &sample.template_boxes,
        &sample.search,
        cfg,
        &params.embed,
    )?;
    let (features, _) = backbone_forward(params, &seq, None)?;
    head::head_forward(&features, cfg, &params.head)
}

/// Loss on one sample and its gradient w.r.t. every parameter, accumulated
/// into `grads`.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    sample: &Sample,
    grads: &mut ModelParams<T>,
) -> Result<(LossBreakdown, HeadMaps<T>)> {
    let cfg = &params.cfg;
    let (seq, cache) = embed::compose_inputs(
        &sample.templates,
        &sample.template_boxes,
        &sample.search,
        cfg,
        &params.embed,
    )?;

    let mut tapes: Vec<BlockTape<T>> = Vec::with_capacity(params.blocks.len());
    let mut x = seq;
    for b in &params.blocks {
        let (y, _, tape) = block_forward_taped(&x, &b.initial_state(), b)?;
        tapes.push(tape);
        x = y;
    }
    let search_len = *x.frame_lengths.last().expect("non-empty sequence");
    let offset = (x.len() - search_len) * cfg.d_model;
    let (maps, head_tape) = head::head_forward_taped(&x.tokens[offset..], cfg, &params.head)?;
    let (breakdown, d_maps) = loss::training_loss(&maps, &sample.search_box, cfg)?;

    let d_feat = head::head_backward(&head_tape, cfg, &params.head, &d_maps, &mut grads.head);
    let mut d = vec![T::zero(); x.tokens.len()];
    d[offset..].copy_from_slice(&d_feat);
    let no_state = vec![T::zero(); cfg.d_inner * cfg.states];
    for k in (0..params.blocks.len()).rev() {
        let g = block_backward(
            &tapes[k],
            &params.blocks[k],
            &d,
            (&no_state, &no_state),
            &mut grads.blocks[k],
        )?;
        for (a, &v) in grads.blocks[k].h_init_f.data.iter_mut().zip(&g.d_state_forward) {
            *a += v;
        }
        for (a, &v) in grads.blocks[k].h_init_b.data.iter_mut().zip(&g.d_state_backward) {
            *a += v;
        }
        d = g.d_input;
    }
    embed::compose_backward(&cache, cfg, &params.embed, &d, &mut grads.embed);
    Ok((breakdown, maps))
}

/// A zeroed gradient accumulator shaped like `params`.
pub fn zero_grads<T: Scalar>(params: &ModelParams<T>) -> ModelParams<T> {
    zeros_like(params)
}
