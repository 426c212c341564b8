//! Model assembly: unimodal RGB and HSI segmentation models, the
//! cross-attention fusion model, and the logit-fusion late baseline, all
//! sharing the same decoder design and parameter-group tagging.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, ParamId, ParamStore, ParamTag, Var};
use crate::data::SamplePair;
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{BcafError, Result};
use crate::fusion::{FusionPlan, FusionStage, SePool};
use crate::grouping::{compute_grouping, SharingMode, SpectralGrouping};
use crate::hsi_backbone::{HsiBackbone, SpectralMixerKind};
use crate::nn::{Init, LayerNorm, Linear, Scope};
use crate::rgb_backbone::{BackboneConfig, RgbBackbone};

/// Which pipeline a run trains or evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Hsi,
    Fusion,
    LogitFusion,
}

/// Pre-decoder spectral reduction in the HSI-only path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    /// Input-adaptive spectral SE pooling.
    SpectralSe,
    /// A global, input-independent vector of K weights shared across
    /// channels.
    LearnableWeighted,
}

/// Everything needed to build a model.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub modality: Modality,
    pub rgb_backbone: BackboneConfig,
    pub hsi_backbone: BackboneConfig,
    pub bands: usize,
    pub k_slices: usize,
    pub ratio: usize,
    pub embed_mode: SharingMode,
    pub spectral_mixer: SpectralMixerKind,
    pub reducer: ReducerKind,
    pub plan: FusionPlan,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and synthetic experiments:
    /// small dims, window 4, single-block stages.
    pub fn desk(modality: Modality, num_classes: usize, bands: usize, k: usize, ratio: usize) -> Self {
        ModelConfig {
            modality,
            rgb_backbone: BackboneConfig::desk(8, [1, 1, 1, 1]),
            hsi_backbone: BackboneConfig::desk(8, [1, 1, 1, 1]),
            bands,
            k_slices: k,
            ratio,
            embed_mode: SharingMode::Shared,
            spectral_mixer: SpectralMixerKind::Attention,
            reducer: ReducerKind::SpectralSe,
            plan: FusionPlan::all_bidirectional(),
            decoder: DecoderConfig {
                widths: [16, 12, 8],
                dropout: if matches!(modality, Modality::Rgb) { 0.0 } else { 0.1 },
                num_classes,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rgb_backbone.validate()?;
        self.hsi_backbone.validate()?;
        self.decoder.validate()?;
        if self.rgb_backbone.dims != self.hsi_backbone.dims {
            return Err(BcafError::Config(
                "RGB and HSI backbones must share per-stage dims".into(),
            ));
        }
        if self.k_slices == 1 {
            if let SpectralMixerKind::Conv1d { .. } = self.spectral_mixer {
                return Err(BcafError::Config(
                    "K=1 collapses the spectral axis; spectral mixing options are not applicable".into(),
                ));
            }
        }
        if matches!(self.modality, Modality::Fusion) {
            self.plan.validate()?;
        }
        Ok(())
    }

    pub fn grouping(&self) -> Result<SpectralGrouping> {
        compute_grouping(self.bands, self.k_slices)
    }
}

/// Graph inputs for one sample.
pub struct ModelInputs {
    pub rgb: Option<Var>,
    pub hsi: Option<Var>,
}

/// Leaf a sample's arrays into the graph as f64 tensors.
pub fn inputs_from_sample(g: &mut Graph, s: &SamplePair) -> ModelInputs {
    let (hf, wf, _) = s.rgb.dim();
    let rgb: Vec<f64> = s.rgb.iter().map(|&v| v as f64).collect();
    let rgb = g.constant(ArrayD::from_shape_vec(IxDyn(&[hf, wf, 3]), rgb).unwrap());
    let (hc, wc, bands) = s.hsi.dim();
    let hsi: Vec<f64> = s.hsi.iter().map(|&v| v as f64).collect();
    let hsi = g.constant(ArrayD::from_shape_vec(IxDyn(&[hc, wc, bands]), hsi).unwrap());
    ModelInputs {
        rgb: Some(rgb),
        hsi: Some(hsi),
    }
}

/// Forward output: logits at the native 1/4 grid plus per-stage 2D activity
/// taps for visualization.
pub struct ForwardOut {
    pub logits: Var,
    pub stage_maps: Vec<Var>,
}

/// Pre-decoder spectral reduction for one stage of the HSI-only path.
pub enum SliceReducer {
    Se(SePool),
    Weighted(ParamId),
}

impl SliceReducer {
    fn new(scope: &mut Scope, name: &str, kind: ReducerKind, dim: usize, k: usize) -> Self {
        match kind {
            ReducerKind::SpectralSe => SliceReducer::Se(SePool::new(scope, name, dim)),
            ReducerKind::LearnableWeighted => {
                let mut s = scope.sub(name);
                let w = s.param("weights", &[k], Init::Const(1.0 / k as f64), false);
                SliceReducer::Weighted(w)
            }
        }
    }

    /// [H, W, K, C] -> [H, W, C].
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        match self {
            SliceReducer::Se(se) => se.forward(g, store, x),
            SliceReducer::Weighted(w) => {
                let k = g.shape(x)[2];
                let wv = g.param(store, *w);
                let wv = g.reshape(wv, &[k, 1]);
                let gated = g.mul(x, wv); // broadcast over H, W, C
                g.sum_axes(gated, &[2], false)
            }
        }
    }
}

pub struct RgbModel {
    pub backbone: RgbBackbone,
    pub decoder: Decoder,
}

impl RgbModel {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &ModelInputs, mode: Mode) -> Result<ForwardOut> {
        let img = input.rgb.ok_or_else(|| BcafError::Config("RGB input required".into()))?;
        let feats = self.backbone.forward(g, store, img, mode)?;
        let maps: Vec<Var> = feats.iter().map(|f| f.var).collect();
        let logits = self.decoder.forward(g, store, &maps, mode)?;
        Ok(ForwardOut {
            logits,
            stage_maps: maps,
        })
    }
}

pub struct HsiModel {
    pub backbone: HsiBackbone,
    pub reducers: Vec<SliceReducer>,
    pub decoder: Decoder,
}

impl HsiModel {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &ModelInputs, mode: Mode) -> Result<ForwardOut> {
        let cube = input.hsi.ok_or_else(|| BcafError::Config("HSI input required".into()))?;
        let feats = self.backbone.forward(g, store, cube, mode)?;
        let maps: Vec<Var> = feats
            .iter()
            .zip(&self.reducers)
            .map(|(f, red)| red.forward(g, store, f.var))
            .collect();
        let logits = self.decoder.forward(g, store, &maps, mode)?;
        Ok(ForwardOut {
            logits,
            stage_maps: maps,
        })
    }
}

/// Per-stage fusion wiring: active stages carry the full fusion block,
/// inactive stages hand the decoder a normalized RGB skip.
pub enum StageFusion {
    Active(Box<FusionStage>),
    RgbSkip(LayerNorm),
}

pub struct BcafModel {
    pub rgb: RgbBackbone,
    pub hsi: HsiBackbone,
    pub stages: Vec<StageFusion>,
    pub decoder: Decoder,
    pub ratio: usize,
}

impl BcafModel {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &ModelInputs, mode: Mode) -> Result<ForwardOut> {
        let img = input.rgb.ok_or_else(|| BcafError::Config("RGB input required".into()))?;
        let cube = input.hsi.ok_or_else(|| BcafError::Config("HSI input required".into()))?;
        let mut xr = self.rgb.embed_tokens(g, store, img)?;
        let mut xh = self.hsi.embed_tokens(g, store, cube)?;
        let mut fused = Vec::with_capacity(4);
        for st in 0..4 {
            xr = self.rgb.run_stage(g, store, st, xr, mode);
            xh = self.hsi.run_stage(g, store, st, xh, mode)?;
            match &self.stages[st] {
                StageFusion::Active(fs) => {
                    let (f, xr2, xh2) = fs.forward(g, store, xr, xh, self.ratio)?;
                    fused.push(f);
                    xr = xr2;
                    xh = xh2;
                }
                StageFusion::RgbSkip(norm) => {
                    fused.push(norm.forward(g, store, xr));
                }
            }
            if st < 3 {
                xr = self.rgb.merge(g, store, st, xr)?;
                xh = self.hsi.merge(g, store, st, xh)?;
            }
        }
        let logits = self.decoder.forward(g, store, &fused, mode)?;
        Ok(ForwardOut {
            logits,
            stage_maps: fused,
        })
    }
}

pub struct LogitFusionModel {
    pub rgb: RgbModel,
    pub hsi: HsiModel,
    pub fuse: Linear,
}

impl LogitFusionModel {
    /// Initialize the 1x1 mixing layer to select the RGB logits exactly
    /// (identity on the RGB block, zero on the HSI block).
    pub fn init_select_rgb(&self, store: &mut ParamStore) {
        let n1 = self.fuse.out_dim;
        let mut w = ArrayD::zeros(IxDyn(&[2 * n1, n1]));
        for i in 0..n1 {
            w[[i, i]] = 1.0;
        }
        store.set(self.fuse.w, w);
        if let Some(b) = self.fuse.b {
            let z = ArrayD::zeros(IxDyn(&[n1]));
            store.set(b, z);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &ModelInputs, mode: Mode) -> Result<ForwardOut> {
        let rgb_out = self.rgb.forward(g, store, input, mode)?;
        let hsi_out = self.hsi.forward(g, store, input, mode)?;
        let (hf, wf) = (g.shape(rgb_out.logits)[0], g.shape(rgb_out.logits)[1]);
        let hsi_logits = crate::decoder::resize_logits(g, hsi_out.logits, hf, wf);
        let cat = g.concat(2, &[rgb_out.logits, hsi_logits]);
        let logits = self.fuse.forward(g, store, cat);
        let mut stage_maps = rgb_out.stage_maps;
        stage_maps.extend(hsi_out.stage_maps);
        Ok(ForwardOut { logits, stage_maps })
    }
}

pub enum Model {
    Rgb(RgbModel),
    Hsi(HsiModel),
    Bcaf(BcafModel),
    LogitFusion(LogitFusionModel),
}

impl Model {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &ModelInputs, mode: Mode) -> Result<ForwardOut> {
        match self {
            Model::Rgb(m) => m.forward(g, store, input, mode),
            Model::Hsi(m) => m.forward(g, store, input, mode),
            Model::Bcaf(m) => m.forward(g, store, input, mode),
            Model::LogitFusion(m) => m.forward(g, store, input, mode),
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            Model::Rgb(_) => Modality::Rgb,
            Model::Hsi(_) => Modality::Hsi,
            Model::Bcaf(_) => Modality::Fusion,
            Model::LogitFusion(_) => Modality::LogitFusion,
        }
    }
}

fn build_rgb_parts(scope: &mut Scope, cfg: &ModelConfig) -> Result<RgbModel> {
    let backbone = RgbBackbone::new(&mut scope.with_tag(ParamTag::BackboneRandom), "rgb", &cfg.rgb_backbone)?;
    let decoder = Decoder::new(
        &mut scope.with_tag(ParamTag::Head),
        "decoder",
        cfg.rgb_backbone.dims,
        &cfg.decoder,
    )?;
    Ok(RgbModel { backbone, decoder })
}

fn build_hsi_parts(scope: &mut Scope, cfg: &ModelConfig) -> Result<HsiModel> {
    let grouping = cfg.grouping()?;
    let backbone = HsiBackbone::new(
        &mut scope.with_tag(ParamTag::BackboneRandom),
        "hsi",
        &cfg.hsi_backbone,
        grouping,
        cfg.embed_mode,
        cfg.spectral_mixer,
    )?;
    let mut reducers = Vec::new();
    {
        let mut rs = scope.with_tag(ParamTag::BackboneRandom);
        let mut rs = rs.sub("reduce");
        for st in 0..4 {
            reducers.push(SliceReducer::new(
                &mut rs,
                &format!("stage{}", st + 1),
                cfg.reducer,
                cfg.hsi_backbone.dims[st],
                grouping.k,
            ));
        }
    }
    let decoder = Decoder::new(
        &mut scope.with_tag(ParamTag::Head),
        "decoder",
        cfg.hsi_backbone.dims,
        &cfg.decoder,
    )?;
    Ok(HsiModel {
        backbone,
        reducers,
        decoder,
    })
}

/// Build a model into the store; parameters are tagged head / backbone_random
/// at creation (adapters count as random, matching their provenance in the
/// two-phase protocol), and loaders retag backbones as pretrained.
pub fn build_model(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut scope = Scope::new(store, rng, "", ParamTag::BackboneRandom);
    let model = match cfg.modality {
        Modality::Rgb => Model::Rgb(build_rgb_parts(&mut scope, cfg)?),
        Modality::Hsi => Model::Hsi(build_hsi_parts(&mut scope, cfg)?),
        Modality::Fusion => {
            let rgb = RgbBackbone::new(&mut scope.with_tag(ParamTag::BackboneRandom), "rgb", &cfg.rgb_backbone)?;
            let grouping = cfg.grouping()?;
            let hsi = HsiBackbone::new(
                &mut scope.with_tag(ParamTag::BackboneRandom),
                "hsi",
                &cfg.hsi_backbone,
                grouping,
                cfg.embed_mode,
                cfg.spectral_mixer,
            )?;
            let mut stages = Vec::new();
            {
                let mut fs = scope.with_tag(ParamTag::BackboneRandom);
                let mut fs = fs.sub("fusion");
                for st in 1..=4 {
                    if cfg.plan.is_active(st) {
                        stages.push(StageFusion::Active(Box::new(FusionStage::new(
                            &mut fs,
                            &format!("stage{st}"),
                            cfg.rgb_backbone.dims[st - 1],
                            cfg.rgb_backbone.heads[st - 1],
                            cfg.plan.direction,
                            cfg.rgb_backbone.mlp_ratio,
                        ))));
                    } else {
                        stages.push(StageFusion::RgbSkip(LayerNorm::new(
                            &mut fs.sub(&format!("stage{st}")),
                            "skip_norm",
                            cfg.rgb_backbone.dims[st - 1],
                        )));
                    }
                }
            }
            let decoder = Decoder::new(
                &mut scope.with_tag(ParamTag::Head),
                "decoder",
                cfg.rgb_backbone.dims,
                &cfg.decoder,
            )?;
            Model::Bcaf(BcafModel {
                rgb,
                hsi,
                stages,
                decoder,
                ratio: cfg.ratio,
            })
        }
        Modality::LogitFusion => {
            let rgb = build_rgb_parts(&mut scope.sub("rgb_model"), cfg)?;
            let hsi = build_hsi_parts(&mut scope.sub("hsi_model"), cfg)?;
            let fuse = Linear::new(
                &mut scope.with_tag(ParamTag::BackboneRandom).sub("fuse"),
                "mix",
                2 * (cfg.decoder.num_classes + 1),
                cfg.decoder.num_classes + 1,
                true,
            );
            Model::LogitFusion(LogitFusionModel { rgb, hsi, fuse })
        }
    };
    // Adapters are freshly initialized in every protocol phase: tag them as
    // random-init so they join the corresponding learning-rate group.
    for e in store.entries.iter_mut() {
        if e.name.contains("decoder.adapt") {
            e.tag = Some(ParamTag::BackboneRandom);
        }
    }
    Ok(model)
}
