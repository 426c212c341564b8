//! Four-stage hierarchical windowed-attention RGB encoder producing fine-grid
//! features at 1/4, 1/8, 1/16 and 1/32 of the input resolution.

use crate::autodiff::{Graph, Mode, ParamStore, Var};
use crate::error::{BcafError, Result};
use crate::nn::{Conv2d, LayerNorm, Scope};
use crate::swin::{PatchMerging, WindowBlock};

pub use crate::swin::BackboneConfig;

/// Fine-grid feature map at one backbone stage (H = H_f / 2^(stage+1)).
#[derive(Debug, Clone, Copy)]
pub struct FineFeature {
    pub var: Var,
    pub stage: usize,
}

pub struct RgbBackbone {
    pub cfg: BackboneConfig,
    patch_embed: Conv2d,
    embed_norm: LayerNorm,
    stages: Vec<Vec<WindowBlock>>,
    merges: Vec<PatchMerging>,
}

impl RgbBackbone {
    pub fn new(scope: &mut Scope, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = scope.sub(name);
        let patch_embed = Conv2d::new(&mut s, "patch_embed", 3, cfg.dims[0], 4, 4, 0);
        let embed_norm = LayerNorm::new(&mut s, "embed_norm", cfg.dims[0]);
        let mut stages = Vec::new();
        let mut flat = 0usize;
        for st in 0..4 {
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[st] {
                blocks.push(WindowBlock::new(
                    &mut s.sub(&format!("stage{st}")),
                    &format!("block{b}"),
                    cfg.dims[st],
                    cfg.heads[st],
                    cfg.window,
                    cfg.shift,
                    b % 2 == 1,
                    cfg.droppath_rate(flat),
                    cfg.mlp_ratio,
                ));
                flat += 1;
            }
            stages.push(blocks);
        }
        let merges = (0..3)
            .map(|st| PatchMerging::new(&mut s.sub(&format!("stage{st}")), "merge", cfg.dims[st]))
            .collect();
        Ok(RgbBackbone {
            cfg: cfg.clone(),
            patch_embed,
            embed_norm,
            stages,
            merges,
        })
    }

    /// Patch-embed an [H, W, 3] image into stage-1 tokens.
    pub fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<Var> {
        let shape = g.shape(img).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(BcafError::Shape(format!("expected HxWx3 image, got {shape:?}")));
        }
        let (h, w) = (shape[0], shape[1]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(BcafError::Shape(format!(
                "input {h}x{w} not divisible by 32; pad to {}x{}",
                h.div_ceil(32) * 32,
                w.div_ceil(32) * 32
            )));
        }
        let x = self.patch_embed.forward(g, store, img);
        Ok(self.embed_norm.forward(g, store, x))
    }

    /// Run one stage's blocks (0-based stage index).
    pub fn run_stage(&self, g: &mut Graph, store: &ParamStore, stage: usize, x: Var, mode: Mode) -> Var {
        let mut x = x;
        for block in &self.stages[stage] {
            x = block.forward(g, store, x, mode);
        }
        x
    }

    /// Downsample between stage `stage` and `stage + 1` (0-based).
    pub fn merge(&self, g: &mut Graph, store: &ParamStore, stage: usize, x: Var) -> Result<Var> {
        self.merges[stage].forward(g, store, x)
    }

    /// Encode an [H, W, 3] image into four fine-grid stage features.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        img: Var,
        mode: Mode,
    ) -> Result<[FineFeature; 4]> {
        let mut x = self.embed_tokens(g, store, img)?;
        let mut feats = Vec::with_capacity(4);
        for st in 0..4 {
            x = self.run_stage(g, store, st, x, mode);
            feats.push(FineFeature { var: x, stage: st + 1 });
            if st < 3 {
                x = self.merge(g, store, st, x)?;
            }
        }
        Ok(feats.try_into().map_err(|_| BcafError::Shape("stage count".into())).unwrap())
    }
}
