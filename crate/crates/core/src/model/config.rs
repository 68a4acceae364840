use crate::block::BlockConfig;
use crate::error::{Error, Result};
use crate::ssm::DeltaMode;

/// Network geometry and widths.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `(H_t, W_t)` in pixels.
    pub template_size: (usize, usize),
    /// `(H_s, W_s)` in pixels.
    pub search_size: (usize, usize),
    pub patch: usize,
    pub n_blocks: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub states: usize,
    /// Templates per training sample.
    pub n_templates: usize,
    /// Rows of the temporal embedding table.
    pub max_templates: usize,
    pub channels: usize,
    pub conv_kernel: usize,
    /// Width of the first head convolution; later layers halve it.
    pub head_width: usize,
    pub delta_mode: DeltaMode,
    pub interaction: bool,
    pub per_frame_conv: bool,
    /// Template crop area as a multiple of the box area.
    pub template_factor: f64,
    /// Search crop area as a multiple of the box area.
    pub search_factor: f64,
    /// Decode width with `W_s` and height with `H_s` instead of the reverse.
    pub swap_size_extent: bool,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl ModelConfig {
    fn base(template: usize, search: usize, patch: usize, n_blocks: usize, d_model: usize) -> Self {
        ModelConfig {
            template_size: (template, template),
            search_size: (search, search),
            patch,
            n_blocks,
            d_model,
            d_inner: d_model,
            states: 16,
            n_templates: 4,
            max_templates: 4,
            channels: 3,
            conv_kernel: 4,
            head_width: 256,
            delta_mode: DeltaMode::Joint,
            interaction: true,
            per_frame_conv: true,
            template_factor: 4.0,
            search_factor: 16.0,
            swap_size_extent: false,
            lambda_l1: 2.0,
            lambda_giou: 5.0,
        }
    }

    /// 256/256 crops, 24 blocks, width 384; both crops at 4² the box area.
    pub fn s256() -> Self {
        let mut c = Self::base(256, 256, 16, 24, 384);
        c.template_factor = 16.0;
        c
    }

    /// 128/256 crops, 32 blocks, width 576.
    pub fn m256() -> Self {
        Self::base(128, 256, 16, 32, 576)
    }

    /// 192/384 crops, 32 blocks, width 576.
    pub fn m384() -> Self {
        Self::base(192, 384, 16, 32, 576)
    }

    /// CPU-sized configuration exercising every code path.
    pub fn desk() -> Self {
        let mut c = Self::base(32, 64, 8, 4, 64);
        c.head_width = 32;
        c
    }

    /// The smallest configuration the learning gate trains in minutes.
    pub fn small() -> Self {
        let mut c = Self::base(32, 64, 8, 2, 32);
        c.head_width = 32;
        c
    }

    /// Gradient-check configuration: 16 channels, 2 blocks, 8×8 search grid.
    pub fn tiny() -> Self {
        let mut c = Self::base(16, 32, 4, 2, 16);
        c.states = 8;
        c.head_width = 16;
        c.n_templates = 2;
        c.max_templates = 4;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "s256" => Some(Self::s256()),
            "m256" => Some(Self::m256()),
            "m384" => Some(Self::m384()),
            "desk" => Some(Self::desk()),
            "small" => Some(Self::small()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let p = self.patch;
        if p == 0 {
            return bad("patch size must be positive".into());
        }
        for (what, (h, w)) in [("template", self.template_size), ("search", self.search_size)] {
            if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
                return bad(format!("{what} size {h}x{w} is not a positive multiple of patch {p}"));
            }
        }
        if self.states == 0 || !self.states.is_multiple_of(4) {
            return bad(format!("state count {} must be a positive multiple of 4", self.states));
        }
        if self.n_blocks == 0 || self.d_model == 0 || self.d_inner == 0 || self.channels == 0 {
            return bad("block count, widths and channels must be positive".into());
        }
        if self.head_width < 8 || !self.head_width.is_multiple_of(8) {
            return bad(format!("head width {} must be a multiple of 8", self.head_width));
        }
        if self.conv_kernel == 0 {
            return bad("conv kernel must be at least 1".into());
        }
        if self.n_templates == 0 || self.max_templates < self.n_templates {
            return bad(format!(
                "need 1 <= n_templates ({}) <= max_templates ({})",
                self.n_templates, self.max_templates
            ));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return bad("crop factors must be positive".into());
        }
        Ok(())
    }

    /// Search grid `(rows, cols)`.
    pub fn search_grid(&self) -> (usize, usize) {
        (self.search_size.0 / self.patch, self.search_size.1 / self.patch)
    }

    pub fn template_grid(&self) -> (usize, usize) {
        (self.template_size.0 / self.patch, self.template_size.1 / self.patch)
    }

    /// `L_t`.
    pub fn template_tokens(&self) -> usize {
        let (r, c) = self.template_grid();
        r * c
    }

    /// `L_s`.
    pub fn search_tokens(&self) -> usize {
        let (r, c) = self.search_grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            d_inner: self.d_inner,
            states: self.states,
            conv_kernel: self.conv_kernel,
            delta_mode: self.delta_mode,
            interaction: self.interaction,
            per_frame_conv: self.per_frame_conv,
        }
    }

    /// Head channel widths, input first.
    pub fn head_channels(&self) -> [usize; 5] {
        let w = self.head_width;
        [self.d_model, w, w / 2, w / 4, w / 8]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_presets() {
        let s = ModelConfig::s256();
        assert_eq!((s.n_blocks, s.d_model, s.states), (24, 384, 16));
        assert_eq!(s.search_grid(), (16, 16));
        assert_eq!(s.template_factor, 16.0);
        let m = ModelConfig::m256();
        assert_eq!((m.template_size, m.n_blocks, m.d_model), ((128, 128), 32, 576));
        assert_eq!(m.template_factor, 4.0);
        let l = ModelConfig::m384();
        assert_eq!((l.template_size, l.search_size), ((192, 192), (384, 384)));
        for c in [s, m, l, ModelConfig::desk(), ModelConfig::small(), ModelConfig::tiny()] {
            c.validate().unwrap();
            assert_eq!((c.lambda_l1, c.lambda_giou), (2.0, 5.0));
        }
    }

    #[test]
    fn geometry_must_divide_patch() {
        let mut c = ModelConfig::desk();
        c.search_size = (60, 64);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.states = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_counts() {
        let c = ModelConfig::desk();
        assert_eq!((c.template_tokens(), c.search_tokens()), (16, 64));
        assert_eq!(ModelConfig::tiny().search_grid(), (8, 8));
    }
}
