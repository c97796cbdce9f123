//! Model construction, patch sampling, the training loop and evaluation.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{matched_reference_size, reference_camera, Camera, ViewRole};
use crate::metrics::{psnr, ssim};
use crate::mpf::{Mode, MpferNet, MpiNet, MpiVariant, PipelineConfig, PipelineInput, SingleFrameNet};
use crate::noise::{add_noise, gain_to_params, sigma_map, NoiseParams};
use crate::scene::LoadedScene;
use crate::tensor::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, LrSchedule, ParamStore, Real, Tape, Tensor, Var,
};
use crate::warp::plane_coverage;

pub const MODEL_FILE: &str = "model.toml";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";
/// Denoising gains cycled during training and reported by evaluation.
pub const DEFAULT_GAINS: [u32; 4] = [4, 8, 16, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Multiplane feature encoder-renderer.
    Mpfer,
    /// MPI predicted in one pass over all depths.
    Mpinet,
    /// MPI predicted one depth at a time.
    MpinetDw,
    /// Two chained per-frame Unets.
    SingleFrame,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mpfer" => Ok(ModelKind::Mpfer),
            "mpinet" => Ok(ModelKind::Mpinet),
            "mpinet-dw" => Ok(ModelKind::MpinetDw),
            "single-frame" => Ok(ModelKind::SingleFrame),
            _ => Err(format!("unknown model {s:?} (mpfer, mpinet, mpinet-dw, single-frame)")),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input views `V`.
    pub views: usize,
    pub pipeline: PipelineConfig,
    /// Channels between the two single-frame Unets.
    #[serde(default = "ModelSpec::default_frame_features")]
    pub frame_features: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    fn default_frame_features() -> usize {
        16
    }

    pub fn new(kind: ModelKind, views: usize, pipeline: PipelineConfig) -> Self {
        ModelSpec {
            kind,
            views,
            pipeline,
            frame_features: Self::default_frame_features(),
            init_seed: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        match self.kind {
            ModelKind::SingleFrame => Mode::Denoise,
            _ => self.pipeline.mode,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Mpfer(MpferNet),
    Mpi(MpiNet),
    SingleFrame(SingleFrameNet),
}

impl Model {
    /// Adds freshly initialized parameters to `store`.
    pub fn build<T: Real>(spec: &ModelSpec, store: &mut ParamStore<T>) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let p = &spec.pipeline;
        Ok(match spec.kind {
            ModelKind::Mpfer => Model::Mpfer(MpferNet::new(store, p, spec.views, &mut rng)?),
            ModelKind::Mpinet => Model::Mpi(MpiNet::new(store, p, spec.views, MpiVariant::Joint, &mut rng)?),
            ModelKind::MpinetDw => Model::Mpi(MpiNet::new(store, p, spec.views, MpiVariant::Depthwise, &mut rng)?),
            ModelKind::SingleFrame => {
                p.validate()?;
                Model::SingleFrame(SingleFrameNet::new(store, p.encoder, spec.frame_features, p.activation, &mut rng)?)
            }
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: &PipelineInput<T>) -> Result<Var> {
        match self {
            Model::Mpfer(m) => m.forward(tape, params, input),
            Model::Mpi(m) => m.forward(tape, params, input),
            Model::SingleFrame(m) => m.forward(tape, params, input),
        }
    }
}

/// Writes `model.toml` and the parameter checkpoint into `dir`.
pub fn save_model<T: Real>(dir: &Path, spec: &ModelSpec, store: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MODEL_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    save_checkpoint(dir, store)?;
    Ok(())
}

pub fn load_model<T: Real>(dir: &Path) -> Result<(ModelSpec, Model, ParamStore<T>)> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let spec: ModelSpec = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let mut store = ParamStore::new();
    let model = Model::build(&spec, &mut store)?;
    store.load_from(&load_checkpoint(dir)?)?;
    Ok((spec, model, store))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    #[default]
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the square loss patch in render pixels.
    pub patch_size: usize,
    /// Extra reference pixels on each side of the patch.
    #[serde(default = "TrainConfig::default_margin")]
    pub margin: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub loss: Loss,
    /// Gains drawn uniformly per example in denoise mode.
    #[serde(default = "TrainConfig::default_gains")]
    pub gains: Vec<u32>,
    /// A pixel enters the loss when strictly more than this fraction of the
    /// planes cover it after backward warping.
    #[serde(default = "TrainConfig::default_coverage")]
    pub coverage: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn default_margin() -> usize {
        8
    }

    fn default_gains() -> Vec<u32> {
        DEFAULT_GAINS.to_vec()
    }

    fn default_coverage() -> f64 {
        0.8
    }

    /// Desk-scale schedule: `steps` updates at 1.5e-3, dropping tenfold
    /// after 80% of them.
    pub fn desk(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size: 2,
            patch_size: 64,
            margin: Self::default_margin(),
            lr: LrSchedule {
                initial: 1.5e-3,
                drop_factor: 0.1,
                drop_step: steps * 4 / 5,
            },
            adam: AdamConfig::default(),
            loss: Loss::L1,
            gains: Self::default_gains(),
            coverage: Self::default_coverage(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("steps, batch_size and patch_size must be positive".into()));
        }
        if self.lr.drop_step >= self.steps {
            return Err(Error::Config(format!(
                "lr drop step {} must be below steps {}",
                self.lr.drop_step, self.steps
            )));
        }
        if !(self.lr.initial > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.coverage) {
            return Err(Error::Config("coverage must lie in [0, 1)".into()));
        }
        for &g in &self.gains {
            gain_to_params(g)?;
        }
        Ok(())
    }
}

/// Clean multi-view images of one scene.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub cameras: Vec<Camera>,
    /// `3 x H x W` per view.
    pub images: Vec<Tensor<f32>>,
    pub roles: Vec<ViewRole>,
}

impl SceneData {
    pub fn from_loaded(scene: &LoadedScene) -> Self {
        SceneData {
            cameras: scene.cameras(),
            images: scene.views.iter().map(|v| v.image.clone()).collect(),
            roles: scene.roles.clone(),
        }
    }

    pub fn indices(&self, role: ViewRole) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }

    fn size(&self) -> (usize, usize) {
        (self.cameras[0].height, self.cameras[0].width)
    }
}

/// One forward/loss evaluation's worth of tensors.
#[derive(Clone, Debug)]
pub struct Example {
    /// `V x 3 x H x W`, noisy in denoise mode.
    pub images: Tensor<f32>,
    pub sigma: Option<Tensor<f32>>,
    pub views: Vec<Camera>,
    pub reference: Camera,
    pub render: Vec<Camera>,
    pub skip: Option<Tensor<f32>>,
    pub render_sigma: Option<Tensor<f32>>,
    /// `R x 3 x h x w`.
    pub target: Tensor<f32>,
    /// `R x 1 x h x w`.
    pub mask: Tensor<f32>,
    pub gain: Option<u32>,
}

impl Example {
    pub fn input(&self) -> PipelineInput<'_, f32> {
        PipelineInput {
            images: &self.images,
            sigma: self.sigma.as_ref(),
            views: &self.views,
            reference: &self.reference,
            render: &self.render,
            skip: self.skip.as_ref(),
            render_sigma: self.render_sigma.as_ref(),
        }
    }
}

/// Reference camera for a set of input cameras at the input focal length.
pub fn scene_reference(inputs: &[Camera], far: f64) -> Result<Camera> {
    let (h, w) = matched_reference_size(inputs, far)?;
    reference_camera(inputs, h, w, far)
}

fn stack(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    let t = Tensor::concat(&refs, 0)?;
    let s = t.shape().to_vec();
    t.reshape(&[parts.len(), s[0] / parts.len(), s[1], s[2]])
}

fn crop(t: &Tensor<f32>, cam: &Camera, x0: usize, y0: usize) -> Result<Tensor<f32>> {
    t.narrow(1, y0, cam.height)?.narrow(2, x0, cam.width)
}

/// Per-pixel loss mask of a render window: 1 where strictly more than
/// `coverage * D` planes land inside the reference grid.
pub fn coverage_mask(render: &Camera, reference: &Camera, config: &PipelineConfig, coverage: f64) -> Result<Tensor<f32>> {
    let planes = config.planes()?;
    let counts = plane_coverage(render, reference, &planes, config.scale)?;
    let need = coverage * planes.len() as f64;
    let data = counts.iter().map(|&c| (c as f64 > need) as u8 as f32).collect();
    Tensor::from_vec(&[1, render.height, render.width], data)
}

/// Reference window of `size` pixels centered on the reference pixel seen
/// by the center of `patch` through the mid-disparity plane.
fn reference_window(reference: &Camera, patch: &Camera, config: &PipelineConfig, size: usize) -> Result<Camera> {
    let mid = 2.0 / (1.0 / config.near + 1.0 / config.far);
    let rel = patch.relative_to(reference);
    let hom = crate::geometry::plane_homography(&rel, &reference.intrinsics, mid, &nalgebra::Vector3::z())?;
    let (cx, cy) = ((patch.width as f64 - 1.0) / 2.0, (patch.height as f64 - 1.0) / 2.0);
    let (u, v) = hom
        .inverse()?
        .apply(cx, cy)
        .ok_or_else(|| Error::Config("patch center does not project into the reference".into()))?;
    // the window stays inside the full reference grid
    let place = |center: f64, extent: usize| {
        let len = size.min(extent);
        let start = (center - (len as f64 - 1.0) / 2.0).round();
        (start.clamp(0.0, (extent - len) as f64) as usize, len)
    };
    let (x0, w) = place(u, reference.width);
    let (y0, h) = place(v, reference.height);
    Ok(reference.window(x0, y0, w, h))
}

/// Noise applied to denoising inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSetting {
    Clean,
    Gain(u32),
}

/// Builds the inputs of one example. `patch` selects a window `(x0, y0,
/// size)` of the render views; `None` renders full frames.
#[allow(clippy::too_many_arguments)]
pub fn make_example(
    scene: &SceneData,
    mode: Mode,
    config: &PipelineConfig,
    noise: NoiseSetting,
    noise_seed: u64,
    targets: &[usize],
    patch: Option<(usize, usize, usize)>,
    margin: usize,
) -> Result<Example> {
    let inputs = scene.indices(ViewRole::Input);
    if inputs.is_empty() || targets.is_empty() {
        return Err(Error::Config("scene has no input or no target views".into()));
    }
    let views: Vec<Camera> = inputs.iter().map(|&i| scene.cameras[i]).collect();
    let full_ref = scene_reference(&views, config.far)?;
    let clean: Vec<Tensor<f32>> = inputs.iter().map(|&i| scene.images[i].clone()).collect();
    let (images, sigmas, params) = match (mode, noise) {
        (Mode::Denoise, _) => {
            let params = match noise {
                NoiseSetting::Clean => NoiseParams::new(0.0, 0.0)?,
                NoiseSetting::Gain(g) => gain_to_params(g)?,
            };
            let noisy: Vec<Tensor<f32>> = clean
                .iter()
                .enumerate()
                .map(|(v, img)| add_noise(img, &params, noise_seed.wrapping_add(v as u64 * 0x9E37_79B9)))
                .collect();
            let sig = noisy.iter().map(|n| sigma_map(n, &params)).collect::<Result<Vec<_>>>()?;
            (noisy, Some(sig), Some(params))
        }
        (Mode::Synthesis, _) => (clean, None, None),
    };
    let (x0, y0, render, reference) = match patch {
        Some((x0, y0, size)) => {
            let render: Vec<Camera> = targets.iter().map(|&t| scene.cameras[t].window(x0, y0, size, size)).collect();
            let reference = reference_window(&full_ref, &render[0], config, size + 2 * margin)?;
            (x0, y0, render, reference)
        }
        None => (0, 0, targets.iter().map(|&t| scene.cameras[t]).collect(), full_ref),
    };
    let pos = |t: usize| inputs.iter().position(|&i| i == t);
    let target = stack(
        &targets
            .iter()
            .zip(&render)
            .map(|(&t, cam)| crop(&scene.images[t], cam, x0, y0))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let (skip, render_sigma) = match &sigmas {
        Some(sig) => {
            let mut sk = Vec::with_capacity(targets.len());
            let mut rs = Vec::with_capacity(targets.len());
            for (&t, cam) in targets.iter().zip(&render) {
                let v = pos(t).ok_or_else(|| Error::Config("denoise targets must be input views".into()))?;
                sk.push(crop(&images[v], cam, x0, y0)?);
                rs.push(crop(&sig[v], cam, x0, y0)?);
            }
            (Some(stack(&sk)?), Some(stack(&rs)?))
        }
        None => (None, None),
    };
    let (h, w) = (render[0].height, render[0].width);
    let mask = Tensor::ones(&[render.len(), 1, h, w]);
    Ok(Example {
        images: stack(&images)?,
        sigma: sigmas.map(|s| stack(&s)).transpose()?,
        views,
        reference,
        render,
        skip,
        render_sigma,
        target,
        mask,
        gain: params.and_then(|p| p.gain),
    })
}

/// Full-frame inputs built from observed frames, which may already carry
/// noise. Denoise mode restores every input view and needs `noise` for the
/// noise-level maps; synthesis mode renders `render`. The target is
/// zero-filled.
pub fn observe(
    mode: Mode,
    config: &PipelineConfig,
    views: &[Camera],
    images: &[Tensor<f32>],
    noise: Option<&NoiseParams>,
    render: &[Camera],
) -> Result<Example> {
    if views.is_empty() || views.len() != images.len() {
        return Err(Error::Config("need one image per input view".into()));
    }
    let reference = scene_reference(views, config.far)?;
    let (sigma, render, skip, render_sigma) = match mode {
        Mode::Denoise => {
            let params = noise.ok_or_else(|| Error::Config("denoising needs noise parameters".into()))?;
            let sig = stack(&images.iter().map(|n| sigma_map(n, params)).collect::<Result<Vec<_>>>()?)?;
            (Some(sig.clone()), views.to_vec(), Some(stack(images)?), Some(sig))
        }
        Mode::Synthesis => {
            if render.is_empty() {
                return Err(Error::Config("no views to render".into()));
            }
            (None, render.to_vec(), None, None)
        }
    };
    let (h, w) = (render[0].height, render[0].width);
    if render.iter().any(|c| (c.height, c.width) != (h, w)) {
        return Err(Error::Config("render views must share one resolution".into()));
    }
    Ok(Example {
        images: stack(images)?,
        sigma,
        views: views.to_vec(),
        reference,
        target: Tensor::zeros(&[render.len(), 3, h, w]),
        mask: Tensor::ones(&[render.len(), 1, h, w]),
        render,
        skip,
        render_sigma,
        gain: noise.and_then(|p| p.gain),
    })
}

/// The `D x C2 x sH x sW` multiplane features an MPFER model builds for
/// `example`.
pub fn multiplane_features(model: &Model, store: &ParamStore<f32>, example: &Example) -> Result<Tensor<f32>> {
    let Model::Mpfer(net) = model else {
        return Err(Error::Config("only mpfer models build multiplane features".into()));
    };
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let mpf = net.encode(&mut tape, &params, &example.input())?;
    Ok(tape.value(mpf.data).clone())
}

/// Consecutive rejected patches before sampling gives up.
pub const MAX_REJECTIONS: usize = 100;

/// Draws a random training example: scene, target views, patch location,
/// gain and noise seed. Patches whose coverage mask is empty are redrawn.
pub fn sample_patch(
    data: &[SceneData],
    mode: Mode,
    pipeline: &PipelineConfig,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    for _ in 0..MAX_REJECTIONS {
        let scene = &data[rng.gen_range(0..data.len())];
        let (h, w) = scene.size();
        let p = config.patch_size;
        if p > h || p > w {
            return Err(Error::Config(format!("patch size {p} exceeds image size {w}x{h}")));
        }
        let targets = match mode {
            Mode::Denoise => scene.indices(ViewRole::Input),
            Mode::Synthesis => {
                let t = scene.indices(ViewRole::Target);
                vec![*t.choose(rng).ok_or_else(|| Error::Config("scene has no target views".into()))?]
            }
        };
        let (x0, y0) = (rng.gen_range(0..=w - p), rng.gen_range(0..=h - p));
        let noise = match mode {
            Mode::Denoise => NoiseSetting::Gain(*config.gains.choose(rng).ok_or_else(|| Error::Config("no gains configured".into()))?),
            Mode::Synthesis => NoiseSetting::Clean,
        };
        let seed = rng.gen::<u64>();
        let mut ex = make_example(scene, mode, pipeline, noise, seed, &targets, Some((x0, y0, p)), config.margin)?;
        let masks = ex
            .render
            .iter()
            .map(|cam| coverage_mask(cam, &ex.reference, pipeline, config.coverage))
            .collect::<Result<Vec<_>>>()?;
        let mask = stack(&masks)?;
        if mask.sum() > 0.0 {
            ex.mask = mask;
            return Ok(ex);
        }
    }
    Err(Error::Config(format!(
        "{MAX_REJECTIONS} consecutive patches had no pixel covered by the depth planes; do the input frusta overlap?"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub losses: Vec<LossRecord>,
}

fn batch_loss(model: &Model, tape: &mut Tape<f32>, params: &[Var], batch: &[Example]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ex in batch {
        let pred = model.forward(tape, params, &ex.input())?;
        let target = tape.leaf(ex.target.clone());
        let l = tape.masked_l1(pred, target, &ex.mask)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f32))
}

fn write_loss_log(dir: &Path, losses: &[LossRecord]) -> Result<()> {
    let path = dir.join(LOSS_LOG_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in losses {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Trains a freshly initialized model. With `out`, the model, checkpoint
/// and loss log are written there at the end, or, when the loss becomes
/// non-finite, the last parameters that produced a finite loss.
pub fn train(spec: &ModelSpec, config: &TrainConfig, data: &[SceneData], out: Option<&Path>) -> Result<TrainOutcome> {
    train_with(spec, config, data, out, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    spec: &ModelSpec,
    config: &TrainConfig,
    data: &[SceneData],
    out: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(spec, &mut store)?;
    let mut adam = AdamState::new(&store, config.adam, config.lr.initial);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mode = spec.mode();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = (0..config.batch_size)
            .map(|_| sample_patch(data, mode, &spec.pipeline, config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let loss = batch_loss(&model, &mut tape, &params, &batch)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            if let Some(dir) = out {
                save_model(dir, spec, &store)?;
                write_loss_log(dir, &losses)?;
            }
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor<f32>>> = (0..store.len()).map(|i| grads.take(params[i])).collect();
        adam.lr = config.lr.lr_at(step);
        adam.step(&mut store, &g)?;
        let rec = LossRecord {
            step,
            lr: adam.lr,
            loss: value,
        };
        on_step(&rec);
        losses.push(rec);
    }
    if let Some(dir) = out {
        save_model(dir, spec, &store)?;
        write_loss_log(dir, &losses)?;
    }
    Ok(TrainOutcome { model, store, losses })
}

/// Runs a model on full frames and returns `R x 3 x H x W` predictions.
pub fn predict(model: &Model, store: &ParamStore<f32>, example: &Example) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let out = model.forward(&mut tape, &params, &example.input())?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<u32>,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub views: usize,
}

/// Mean over scenes for one noise setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<u32>,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<EvalSummary>,
    pub crop: usize,
}

impl EvalReport {
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r).expect("row serializes"));
            s.push('\n');
        }
        for r in &self.summary {
            let mut v = serde_json::to_value(r).expect("summary serializes");
            v["summary"] = serde_json::Value::Bool(true);
            v["crop"] = self.crop.into();
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }

    pub fn mean_psnr(&self) -> f64 {
        self.summary.iter().map(|s| s.psnr).sum::<f64>() / self.summary.len() as f64
    }
}

/// Evaluation noise seed for scene `i` at `gain`; fixed so every model sees
/// the same noisy frames.
pub fn eval_noise_seed(scene: usize, gain: u32) -> u64 {
    0xE7A1_0000 ^ ((scene as u64) << 16) ^ gain as u64
}

/// Scores a model on full frames. Denoise mode reports one summary per
/// entry of `noise`; synthesis mode renders every target view and ignores
/// `noise`. `crop` border pixels are excluded from all metrics.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    spec: &ModelSpec,
    data: &[SceneData],
    noise: &[NoiseSetting],
    crop: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation needs at least one scene".into()));
    }
    let mode = spec.mode();
    let settings: Vec<NoiseSetting> = match mode {
        Mode::Denoise => noise.to_vec(),
        Mode::Synthesis => vec![NoiseSetting::Clean],
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &setting in &settings {
        let gain = match setting {
            NoiseSetting::Gain(g) => Some(g),
            NoiseSetting::Clean => None,
        };
        let mut acc = (0.0, 0.0, 0.0);
        for (si, scene) in data.iter().enumerate() {
            let targets = match mode {
                Mode::Denoise => scene.indices(ViewRole::Input),
                Mode::Synthesis => scene.indices(ViewRole::Target),
            };
            let seed = eval_noise_seed(si, gain.unwrap_or(0));
            let ex = make_example(scene, mode, &spec.pipeline, setting, seed, &targets, None, 0)?;
            let pred = predict(model, store, &ex)?;
            let (mut p, mut s, mut l) = (0.0, 0.0, 0.0);
            for r in 0..targets.len() {
                let a = crate::metrics::crop_border(&pred.narrow(0, r, 1)?.reshape(&pred.shape()[1..])?, crop)?;
                let b = crate::metrics::crop_border(&ex.target.narrow(0, r, 1)?.reshape(&ex.target.shape()[1..])?, crop)?;
                p += psnr(&a, &b, 1.0, 0)?;
                s += ssim(&a, &b)?;
                l += a.zip_map(&b, |x, y| (x - y).abs())?.mean() as f64;
            }
            let n = targets.len() as f64;
            let row = EvalRow {
                scene: si,
                gain,
                psnr: p / n,
                ssim: s / n,
                l1: l / n,
                views: targets.len(),
            };
            acc = (acc.0 + row.psnr, acc.1 + row.ssim, acc.2 + row.l1);
            rows.push(row);
        }
        let n = data.len() as f64;
        summary.push(EvalSummary {
            gain,
            psnr: acc.0 / n,
            ssim: acc.1 / n,
            l1: acc.2 / n,
            scenes: data.len(),
        });
    }
    Ok(EvalReport { rows, summary, crop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpf::NetShape;
    use crate::tensor::ParamId;
    use crate::scene::{grid_rig, make_scene, render_ground_truth, SceneSpec, TextureKind};

    fn tiny_pipeline(mode: Mode) -> PipelineConfig {
        let small = NetShape {
            base_channels: 8,
            levels: 1,
        };
        PipelineConfig {
            depth_planes: 4,
            channels: 4,
            scale: 1.0,
            collapse_channels: 8,
            mode,
            skip_connection: mode == Mode::Denoise,
            near: 1.0,
            far: 20.0,
            encoder: small,
            renderer: small,
            activation: Default::default(),
        }
    }

    fn tiny_scene(seed: u64, roles: &[ViewRole]) -> SceneData {
        let scene = make_scene(&SceneSpec::new(2, 2.0, 15.0, TextureKind::Ramp, seed)).unwrap();
        let cams = grid_rig(roles.len(), 1, 0.05, 24, 24, 0.5).unwrap();
        SceneData {
            images: cams.iter().map(|c| render_ground_truth(&scene, c).unwrap()).collect(),
            cameras: cams,
            roles: roles.to_vec(),
        }
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            patch_size: 16,
            margin: 4,
            ..TrainConfig::desk(steps, 3)
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk(100, 0);
        assert_eq!(c.lr.drop_step, 80);
        c.validate().unwrap();
        c.lr.drop_step = 100;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(100, 0);
        c.gains = vec![3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn lr_schedule_boundary_in_log() {
        let data = [tiny_scene(1, &[ViewRole::Input; 2])];
        let spec = ModelSpec::new(ModelKind::Mpfer, 2, tiny_pipeline(Mode::Denoise));
        let out = train(&spec, &tiny_train(10), &data, None).unwrap();
        assert_eq!(out.losses[7].lr, 1.5e-3);
        assert!((out.losses[8].lr - 1.5e-4).abs() < 1e-12);
    }

    #[test]
    fn reference_target_has_full_coverage() {
        let cams = grid_rig(1, 1, 0.0, 16, 16, 0.5).unwrap();
        let cfg = tiny_pipeline(Mode::Synthesis);
        let r = scene_reference(&cams, cfg.far).unwrap();
        let m = coverage_mask(&cams[0], &r, &cfg, 0.8).unwrap();
        assert_eq!(m.sum(), 256.0);
        // a window far outside the reference is fully masked
        let away = cams[0].window(0, 0, 16, 16);
        let away = Camera {
            intrinsics: away.intrinsics.cropped(500.0, 0.0),
            ..away
        };
        assert_eq!(coverage_mask(&away, &r, &cfg, 0.8).unwrap().sum(), 0.0);
    }

    #[test]
    fn coverage_threshold_is_strict() {
        // 16 planes; a pixel needs 13 covering planes (more than 80%)
        let cfg = PipelineConfig {
            depth_planes: 16,
            ..tiny_pipeline(Mode::Synthesis)
        };
        let k = crate::geometry::CameraIntrinsics::new(20.0, 20.0, 9.5, 0.0).unwrap();
        let reference = Camera::new(k, crate::geometry::CameraPose::identity(), 20, 1).unwrap();
        // a render camera shifted along x sees each plane shifted by t*f/a
        let render = Camera::new(k, crate::geometry::CameraPose::from_translation([0.3, 0.0, 0.0]), 20, 1).unwrap();
        let planes = cfg.planes().unwrap();
        let counts = plane_coverage(&render, &reference, &planes, 1.0).unwrap();
        let mask = coverage_mask(&render, &reference, &cfg, 0.8).unwrap();
        for (c, m) in counts.iter().zip(mask.data()) {
            assert_eq!(*m == 1.0, *c >= 13, "count {c}");
        }
        assert!(counts.contains(&12) || counts.contains(&13), "{counts:?}");
    }

    #[test]
    fn non_overlapping_frusta_are_rejected() {
        let mut scene = tiny_scene(2, &[ViewRole::Input, ViewRole::Target]);
        // target looks somewhere else entirely
        scene.cameras[1].intrinsics = scene.cameras[1].intrinsics.cropped(5000.0, 0.0);
        let cfg = tiny_pipeline(Mode::Synthesis);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_patch(&[scene], Mode::Synthesis, &cfg, &tiny_train(1), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn masked_pixels_get_no_gradient() {
        let data = [tiny_scene(3, &[ViewRole::Input; 2])];
        let cfg = tiny_pipeline(Mode::Denoise);
        let spec = ModelSpec::new(ModelKind::Mpfer, 2, cfg.clone());
        let mut store = ParamStore::<f32>::new();
        let model = Model::build(&spec, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ex = sample_patch(&data, Mode::Denoise, &cfg, &tiny_train(1), &mut rng).unwrap();
        ex.mask.data_mut().iter_mut().enumerate().for_each(|(i, m)| *m = (i % 3 == 0) as u8 as f32);
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let pred = model.forward(&mut tape, &params, &ex.input()).unwrap();
        let pred_leaf = tape.param(tape.value(pred).clone());
        let target = tape.leaf(ex.target.clone());
        let loss = tape.masked_l1(pred_leaf, target, &ex.mask).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(pred_leaf).unwrap();
        let hw = 16 * 16;
        for (i, v) in g.data().iter().enumerate() {
            let (n, p) = (i / (3 * hw), i % hw);
            if ex.mask.data()[n * hw + p] == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let data = [tiny_scene(4, &[ViewRole::Input, ViewRole::Target, ViewRole::Input])];
        let spec = ModelSpec::new(ModelKind::MpinetDw, 2, tiny_pipeline(Mode::Synthesis));
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = train(&spec, &tiny_train(3), &data, Some(a.path())).unwrap();
        let rb = train(&spec, &tiny_train(3), &data, Some(b.path())).unwrap();
        assert_eq!(ra.losses, rb.losses);
        for f in [crate::tensor::PARAMS_FILE, crate::tensor::CHECKPOINT_MANIFEST, MODEL_FILE, LOSS_LOG_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let (spec2, _, store) = load_model::<f32>(a.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(store.get(ParamId(0)), ra.store.get(ParamId(0)));
    }

    #[test]
    fn overfit_smoke() {
        // the target duplicates the first input and the patch is the whole
        // frame, so every step sees the same example
        let mut data = tiny_scene(5, &[ViewRole::Input, ViewRole::Input]);
        data.roles.push(ViewRole::Target);
        data.cameras.push(data.cameras[0]);
        data.images.push(data.images[0].clone());
        let spec = ModelSpec::new(
            ModelKind::Mpfer,
            2,
            PipelineConfig {
                channels: 8,
                ..tiny_pipeline(Mode::Synthesis)
            },
        );
        let mut cfg = TrainConfig {
            batch_size: 1,
            patch_size: 24,
            margin: 0,
            ..tiny_train(200)
        };
        cfg.lr.initial = 1e-2;
        let out = train(&spec, &cfg, &[data], None).unwrap();
        let tail: f64 = out.losses[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(tail < 0.02, "final loss {tail}");
    }

    #[test]
    fn identity_pipeline_on_clean_inputs_hits_cap() {
        let data = [tiny_scene(6, &[ViewRole::Input])];
        let mut cfg = tiny_pipeline(Mode::Denoise);
        cfg.skip_connection = true;
        let spec = ModelSpec::new(ModelKind::Mpfer, 1, cfg.clone());
        let mut store = ParamStore::<f32>::new();
        let model = Model::build(&spec, &mut store).unwrap();
        for i in 0..store.len() {
            store.get_mut(ParamId(i)).data_mut().fill(0.0);
        }
        let Model::Mpfer(net) = &model else { unreachable!() };
        let c3 = cfg.collapse_channels;
        net.renderer.set_passthrough(&mut store, &[c3, c3 + 1, c3 + 2]).unwrap();
        let report = evaluate(&model, &store, &spec, &data, &[NoiseSetting::Clean], 0).unwrap();
        assert_eq!(report.summary[0].psnr, crate::metrics::PSNR_CAP);
        let report = evaluate(&model, &store, &spec, &data, &DEFAULT_GAINS.map(NoiseSetting::Gain), 0).unwrap();
        assert_eq!(report.summary.len(), 4);
        assert_eq!(report.to_json_lines().lines().count(), 8);
    }
}
