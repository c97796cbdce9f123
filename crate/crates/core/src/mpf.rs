//! Multiplane feature encoder-renderer and the baselines it is compared to.
//!
//! Data flow of the feature pipeline, for `V` input views, `D` planes and
//! `R` render views:
//!
//! ```text
//! images V x (3 [+1 sigma]) x H x W
//!   -> pre-conv (3x3, linear)            V x C1 x H x W
//!   -> plane sweep at scale s            D x (V*C1) x sH x sW
//!   -> encoder Unet, depths as batch     D x C2 x sH x sW      (MPF)
//!   -> backward warp into render views   R x (D*C2) x H x W
//!   -> collapse conv (1x1)               R x C3 x H x W
//!   -> [concat noisy view]               R x (C3 [+3]) x H x W
//!   -> renderer Unet                     R x 3 x H x W
//! ```
//!
//! `C1 = C` and `C2 = V * C`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthPlaneSet};
use crate::tensor::{Activation, Conv2d, Init, ParamStore, Real, Tape, Tensor, Unet, UnetSpec, Var};
use crate::warp::{build_psv, project_multiplane, PsvTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Synthesis,
    Denoise,
}

/// Width and depth of one Unet; channel counts follow from the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub base_channels: usize,
    pub levels: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape {
            base_channels: 64,
            levels: 3,
        }
    }
}

impl NetShape {
    pub fn spec(&self, in_channels: usize, out_channels: usize, activation: Activation) -> UnetSpec {
        UnetSpec {
            activation,
            ..UnetSpec::new(in_channels, out_channels, self.base_channels, self.levels)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// `D`.
    pub depth_planes: usize,
    /// `C`; `C1 = C`, `C2 = V * C`.
    pub channels: usize,
    /// `s`.
    pub scale: f64,
    /// `C3`.
    #[serde(default = "PipelineConfig::default_collapse")]
    pub collapse_channels: usize,
    pub mode: Mode,
    #[serde(default)]
    pub skip_connection: bool,
    /// Nearest plane, meters.
    #[serde(default = "PipelineConfig::default_near")]
    pub near: f64,
    /// Farthest plane, meters.
    #[serde(default = "PipelineConfig::default_far")]
    pub far: f64,
    #[serde(default)]
    pub encoder: NetShape,
    #[serde(default)]
    pub renderer: NetShape,
    #[serde(default)]
    pub activation: Activation,
}

pub const PRESETS: [&str; 4] = ["mpfer-16", "mpfer-32", "mpfer-64", "desk"];

impl PipelineConfig {
    fn default_collapse() -> usize {
        64
    }

    fn default_near() -> f64 {
        0.5
    }

    fn default_far() -> f64 {
        100.0
    }

    /// Named configurations. The `mpfer-*` presets use base-64, 3-level
    /// Unets; `desk` is the small denoising model used for CPU training.
    pub fn preset(name: &str) -> Result<Self> {
        let full = |d, c, s| PipelineConfig {
            depth_planes: d,
            channels: c,
            scale: s,
            collapse_channels: 64,
            mode: Mode::Denoise,
            skip_connection: true,
            near: 0.5,
            far: 100.0,
            encoder: NetShape::default(),
            renderer: NetShape::default(),
            activation: Activation::default(),
        };
        match name {
            "mpfer-16" => Ok(full(16, 8, 1.0)),
            "mpfer-32" => Ok(full(32, 16, 1.25)),
            "mpfer-64" => Ok(full(64, 8, 1.25)),
            "desk" => {
                let small = NetShape {
                    base_channels: 8,
                    levels: 2,
                };
                Ok(PipelineConfig {
                    collapse_channels: 16,
                    encoder: small,
                    renderer: small,
                    near: 1.0,
                    far: 20.0,
                    ..full(8, 4, 1.0)
                })
            }
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_planes == 0 || self.channels == 0 || self.collapse_channels == 0 {
            return Err(Error::Config("depth_planes, channels and collapse_channels must be positive".into()));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.skip_connection && self.mode != Mode::Denoise {
            return Err(Error::Config("skip_connection requires mode = denoise".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config(format!("need 0 < near < far, got {}..{}", self.near, self.far)));
        }
        for shape in [self.encoder, self.renderer] {
            if shape.base_channels == 0 || shape.levels == 0 {
                return Err(Error::Config("unet base_channels and levels must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn planes(&self) -> Result<DepthPlaneSet> {
        DepthPlaneSet::sample(self.near, self.far, self.depth_planes)
    }

    /// Noise-level map concatenated to each input image.
    pub fn sigma_conditioning(&self) -> bool {
        self.mode == Mode::Denoise
    }
}

/// Unet passes per output frame for `D` encoder and `R` renderer passes
/// shared by `V` frames.
pub fn passes_per_frame(depth: usize, render: usize, views: usize) -> f64 {
    (depth + render) as f64 / views as f64
}

/// Multiplane features: `D x C2 x sH x sW`, unbounded.
#[derive(Clone, Debug)]
pub struct MpfTensor {
    pub data: Var,
    pub depth_planes: DepthPlaneSet,
    pub reference: Camera,
    pub scale: f64,
    pub input_views: usize,
}

/// Runs `encoder` on every depth slice of the plane sweep volume with
/// shared weights.
pub fn encode_mpf<T: Real>(tape: &mut Tape<T>, params: &[Var], psv: &PsvTensor, encoder: &Unet) -> Result<MpfTensor> {
    let want = psv.view_count() * psv.channels;
    if encoder.spec.in_channels != want {
        return Err(Error::ShapeMismatch {
            op: "encode_mpf encoder input channels",
            expected: vec![want],
            got: vec![encoder.spec.in_channels],
        });
    }
    Ok(MpfTensor {
        data: encoder.forward(tape, params, psv.data)?,
        depth_planes: psv.depth_planes.clone(),
        reference: psv.reference,
        scale: psv.scale,
        input_views: psv.view_count(),
    })
}

/// Projects the MPF into each render view, collapses depth and channels and
/// decodes every view independently. `skip` (`R x 3 x H x W`) is
/// concatenated before the renderer and requires `R = V`.
#[allow(clippy::too_many_arguments)]
pub fn render_views<T: Real>(
    tape: &mut Tape<T>,
    params: &[Var],
    mpf: &MpfTensor,
    render: &[Camera],
    collapse: &Conv2d,
    renderer: &Unet,
    skip: Option<Var>,
) -> Result<Var> {
    let z = project_multiplane(tape, mpf.data, render, &mpf.reference, &mpf.depth_planes, mpf.scale)?;
    let c = z.depth * z.channels;
    if collapse.in_channels != c {
        return Err(Error::ShapeMismatch {
            op: "collapse conv input channels",
            expected: vec![c],
            got: vec![collapse.in_channels],
        });
    }
    let mut feats = collapse.forward(tape, params, z.data)?;
    if let Some(skip) = skip {
        if render.len() != mpf.input_views {
            return Err(Error::invalid(format!(
                "skip connection needs one render view per input view ({} vs {})",
                render.len(),
                mpf.input_views
            )));
        }
        feats = tape.concat(&[feats, skip], 1)?;
    }
    renderer.forward(tape, params, feats)
}

/// Option 1: one network pass over all depths and views. Returns the
/// `D x 4 x sH x sW` MPI.
pub fn mpinet_predict<T: Real>(tape: &mut Tape<T>, params: &[Var], psv: &PsvTensor, net: &Unet) -> Result<Var> {
    let s = tape.shape(psv.data).to_vec();
    let (d, h, w) = (s[0], s[2], s[3]);
    if net.spec.in_channels != d * s[1] || net.spec.out_channels != d * 4 {
        return Err(Error::ShapeMismatch {
            op: "mpinet channels",
            expected: vec![d * s[1], d * 4],
            got: vec![net.spec.in_channels, net.spec.out_channels],
        });
    }
    let x = tape.reshape(psv.data, &[1, d * s[1], h, w])?;
    let y = net.forward(tape, params, x)?;
    let y = tape.reshape(y, &[d, 4, h, w])?;
    Ok(tape.sigmoid(y))
}

/// Option 2: the same network applied to each depth separately.
pub fn mpinet_dw_predict<T: Real>(tape: &mut Tape<T>, params: &[Var], psv: &PsvTensor, net: &Unet) -> Result<Var> {
    let c = tape.shape(psv.data)[1];
    if net.spec.in_channels != c || net.spec.out_channels != 4 {
        return Err(Error::ShapeMismatch {
            op: "mpinet-dw channels",
            expected: vec![c, 4],
            got: vec![net.spec.in_channels, net.spec.out_channels],
        });
    }
    let y = net.forward(tape, params, psv.data)?;
    Ok(tape.sigmoid(y))
}

/// Backward-warps an MPI into the render views and overcomposites it.
pub fn composite_views<T: Real>(
    tape: &mut Tape<T>,
    mpi: Var,
    render: &[Camera],
    reference: &Camera,
    planes: &DepthPlaneSet,
    scale: f64,
) -> Result<Var> {
    let z = project_multiplane(tape, mpi, render, reference, planes, scale)?;
    tape.overcomposite(z.data, z.depth)
}

/// Everything a model needs for one forward pass. Image tensors are full
/// input frames; render cameras may be windows of larger images.
#[derive(Clone, Copy, Debug)]
pub struct PipelineInput<'a, T: Real> {
    /// `V x 3 x H x W`.
    pub images: &'a Tensor<T>,
    /// `V x 1 x H x W` noise-level maps.
    pub sigma: Option<&'a Tensor<T>>,
    pub views: &'a [Camera],
    pub reference: &'a Camera,
    pub render: &'a [Camera],
    /// `R x 3 x h x w` noisy frames seen through the render windows.
    pub skip: Option<&'a Tensor<T>>,
    /// `R x 1 x h x w`.
    pub render_sigma: Option<&'a Tensor<T>>,
}

fn need<'a, T: Real>(t: Option<&'a Tensor<T>>, what: &str) -> Result<&'a Tensor<T>> {
    t.ok_or_else(|| Error::invalid(format!("pipeline input is missing {what}")))
}

/// Multiplane feature encoder-renderer.
#[derive(Clone, Debug)]
pub struct MpferNet {
    pub config: PipelineConfig,
    pub views: usize,
    pub pre_conv: Conv2d,
    pub encoder: Unet,
    pub collapse: Conv2d,
    pub renderer: Unet,
}

impl MpferNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &PipelineConfig, views: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if views == 0 {
            return Err(Error::Config("model needs at least one input view".into()));
        }
        let c = config.channels;
        let pre_in = 3 + config.sigma_conditioning() as usize;
        let pre_conv = Conv2d::new(store, "pre_conv", pre_in, c, 3, 1, Init::HeUniform, 1.0, rng)?;
        let c2 = views * c;
        let encoder = Unet::new(store, "encoder", &config.encoder.spec(views * c, c2, config.activation), rng)?;
        let c3 = config.collapse_channels;
        let collapse = Conv2d::new(store, "collapse", config.depth_planes * c2, c3, 1, 1, Init::HeUniform, 1.0, rng)?;
        let r_in = c3 + 3 * config.skip_connection as usize;
        let renderer = Unet::new(store, "renderer", &config.renderer.spec(r_in, 3, config.activation), rng)?;
        Ok(MpferNet {
            config: config.clone(),
            views,
            pre_conv,
            encoder,
            collapse,
            renderer,
        })
    }

    /// Plane sweep volume of the (noise-conditioned) pre-conv features.
    pub fn psv<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: &PipelineInput<T>) -> Result<PsvTensor> {
        let images = if self.config.sigma_conditioning() {
            Tensor::concat(&[input.images, need(input.sigma, "sigma maps")?], 1)?
        } else {
            input.images.clone()
        };
        let x = tape.leaf(images);
        let planes = self.config.planes()?;
        build_psv(
            tape,
            x,
            input.views,
            input.reference,
            &planes,
            self.config.scale,
            Some((&self.pre_conv, params)),
        )
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: &PipelineInput<T>) -> Result<MpfTensor> {
        if input.views.len() != self.views {
            return Err(Error::invalid(format!(
                "model expects {} input views, got {}",
                self.views,
                input.views.len()
            )));
        }
        let psv = self.psv(tape, params, input)?;
        encode_mpf(tape, params, &psv, &self.encoder)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: &PipelineInput<T>) -> Result<Var> {
        let mpf = self.encode(tape, params, input)?;
        let skip = if self.config.skip_connection {
            Some(tape.leaf(need(input.skip, "skip frames")?.clone()))
        } else {
            None
        };
        render_views(tape, params, &mpf, input.render, &self.collapse, &self.renderer, skip)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpiVariant {
    /// All depths in one pass.
    Joint,
    /// One pass per depth with shared weights.
    Depthwise,
}

/// MPI prediction followed by fixed overcompositing.
#[derive(Clone, Debug)]
pub struct MpiNet {
    pub config: PipelineConfig,
    pub views: usize,
    pub variant: MpiVariant,
    pub net: Unet,
}

impl MpiNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &PipelineConfig,
        views: usize,
        variant: MpiVariant,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.depth_planes;
        let (cin, cout) = match variant {
            MpiVariant::Joint => (d * views * 3, d * 4),
            MpiVariant::Depthwise => (views * 3, 4),
        };
        let net = Unet::new(store, "mpinet", &config.encoder.spec(cin, cout, config.activation), rng)?;
        Ok(MpiNet {
            config: config.clone(),
            views,
            variant,
            net,
        })
    }

    /// The predicted `D x 4 x sH x sW` MPI.
    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: &PipelineInput<T>) -> Result<(Var, PsvTensor)> {
        let x = tape.leaf(input.images.clone());
        let planes = self.config.planes()?;
        let psv = build_psv(tape, x, input.views, input.reference, &planes, self.config.scale, None)?;
        let mpi = match self.variant {
            MpiVariant::Joint => mpinet_predict(tape, params, &psv, &self.net)?,
            MpiVariant::Depthwise => mpinet_dw_predict(tape, params, &psv, &self.net)?,
        };
        Ok((mpi, psv))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: &PipelineInput<T>) -> Result<Var> {
        let (mpi, psv) = self.predict(tape, params, input)?;
        composite_views(tape, mpi, input.render, &psv.reference, &psv.depth_planes, psv.scale)
    }
}

/// Per-frame denoiser: two chained Unets, the second also seeing the noisy
/// frame, i.e. two passes per frame.
#[derive(Clone, Debug)]
pub struct SingleFrameNet {
    pub features: usize,
    pub first: Unet,
    pub second: Unet,
}

impl SingleFrameNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, shape: NetShape, features: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(SingleFrameNet {
            features,
            first: Unet::new(store, "frame_a", &shape.spec(4, features, activation), rng)?,
            second: Unet::new(store, "frame_b", &shape.spec(features + 3, 3, activation), rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: &PipelineInput<T>) -> Result<Var> {
        let noisy = tape.leaf(need(input.skip, "noisy frames")?.clone());
        let sigma = tape.leaf(need(input.render_sigma, "noise-level maps")?.clone());
        let x = tape.concat(&[noisy, sigma], 1)?;
        let f = self.first.forward(tape, params, x)?;
        let y = tape.concat(&[f, noisy], 1)?;
        self.second.forward(tape, params, y)
    }
}
