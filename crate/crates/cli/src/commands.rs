//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mpfer_core::geometry::{Camera, CameraView, PoseFile, ViewRole};
use mpfer_core::mpf::Mode;
use mpfer_core::noise::{add_noise, gain_to_params, NoiseParams};
use mpfer_core::scene::{
    grid_rig, load_scene, make_scene, render_ground_truth, save_views, view_file_name, Encoding, LoadedScene,
    NoiseRecord, SceneManifest, MANIFEST_FILE as SCENE_MANIFEST, POSES_FILE,
};
use mpfer_core::tensor::{ParamStore, CHECKPOINT_MANIFEST, PARAMS_FILE};
use mpfer_core::training::{
    evaluate, load_model, multiplane_features, observe, predict, train_with, Model, ModelSpec,
    NoiseSetting, SceneData, LOSS_LOG_FILE, MODEL_FILE,
};
use mpfer_core::Tensor;

use crate::config::Config;
use crate::output::{write_display_png, write_manifest};
use crate::{Cli, Command, InputError, ModelArg, Overrides};

pub const REPORT_FILE: &str = "report.jsonl";

/// Per-view noise seed offset, shared with the training example builder.
const VIEW_SEED_STRIDE: u64 = 0x9E37_79B9;

fn resolve(cli: &Cli, overrides: &Overrides) -> Result<Config> {
    Config::resolve(&cli.preset, cli.config.as_deref(), cli.seed, &overrides.overrides)
}

fn input_err(msg: impl Into<String>) -> anyhow::Error {
    InputError::new(msg).into()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeScene { out, overrides } => make_scene_cmd(cli, out, &resolve(cli, overrides)?),
        Command::AddNoise {
            input,
            out,
            gain,
            sigma_r,
            sigma_s,
            overrides,
        } => {
            let params = match (gain, sigma_r, sigma_s) {
                (Some(g), _, _) => gain_to_params(*g)?,
                (None, Some(r), Some(s)) => NoiseParams::new(*r, *s)?,
                _ => return Err(input_err("give --gain or both --sigma-r and --sigma-s")),
            };
            add_noise_cmd(cli, input, out, params, &resolve(cli, overrides)?)
        }
        Command::Train { data, out, overrides } => train_cmd(cli, data, out, &resolve(cli, overrides)?),
        Command::Denoise {
            model,
            input,
            out,
            gain,
            overrides,
        } => denoise_cmd(cli, model, input, out, *gain, &resolve(cli, overrides)?),
        Command::Synthesize {
            model,
            input,
            poses,
            out,
            overrides,
        } => synthesize_cmd(cli, model, input, poses.as_deref(), out, &resolve(cli, overrides)?),
        Command::Eval {
            model,
            data,
            out,
            overrides,
        } => eval_cmd(cli, model, data, out, &resolve(cli, overrides)?),
        Command::DumpMpf {
            model,
            input,
            out,
            planes,
            gain,
            overrides,
        } => dump_mpf_cmd(cli, model, input, out, planes, *gain, &resolve(cli, overrides)?),
    }
}

fn scene_files(views: usize) -> Vec<String> {
    let mut files: Vec<String> = (0..views).map(view_file_name).collect();
    files.push(POSES_FILE.into());
    files.push(SCENE_MANIFEST.into());
    files
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn make_scene_cmd(cli: &Cli, out: &Path, cfg: &Config) -> Result<()> {
    let rig = &cfg.rig;
    let cams = grid_rig(rig.cols, rig.rows, rig.spacing, rig.width, rig.height, rig.half_fov_tan)?;
    if let Some(&t) = rig.targets.iter().find(|&&t| t >= cams.len()) {
        return Err(input_err(format!("rig.targets has view {t} but the rig has {} cameras", cams.len())));
    }
    let scene = make_scene(&cfg.scene)?;
    let views = cams
        .iter()
        .map(|c| CameraView::new(*c, render_ground_truth(&scene, c)?))
        .collect::<mpfer_core::Result<Vec<_>>>()?;
    let roles: Vec<ViewRole> = (0..cams.len())
        .map(|i| if rig.targets.contains(&i) { ViewRole::Target } else { ViewRole::Input })
        .collect();
    let manifest = SceneManifest {
        encoding: Encoding::CLEAN,
        generator: Some(cfg.scene.clone()),
        noise: None,
    };
    save_views(out, &views, &roles, &manifest)?;
    write_manifest(out, "make-scene", &cli.preset, cfg, &[], &scene_files(views.len()))?;
    print_json(serde_json::json!({ "command": "make-scene", "views": views.len(), "targets": rig.targets.len() }));
    Ok(())
}

fn add_noise_cmd(cli: &Cli, input: &Path, out: &Path, params: NoiseParams, cfg: &Config) -> Result<()> {
    let scene = load_scene(input)?;
    if scene.manifest.noise.is_some() {
        return Err(input_err(format!("{}: scene already carries noise", input.display())));
    }
    let views = scene
        .views
        .iter()
        .enumerate()
        .map(|(v, view)| {
            let noisy = add_noise(&view.image, &params, cfg.seed.wrapping_add(v as u64 * VIEW_SEED_STRIDE));
            CameraView::new(view.camera, noisy)
        })
        .collect::<mpfer_core::Result<Vec<_>>>()?;
    let manifest = SceneManifest {
        encoding: Encoding::NOISY,
        generator: scene.manifest.generator.clone(),
        noise: Some(NoiseRecord {
            sigma_r: params.sigma_r,
            sigma_s: params.sigma_s,
            gain: params.gain,
            seed: cfg.seed,
            clean: Some(input.display().to_string()),
        }),
    };
    save_views(out, &views, &scene.roles, &manifest)?;
    write_manifest(out, "add-noise", &cli.preset, cfg, &[input], &scene_files(views.len()))?;
    print_json(serde_json::json!({
        "command": "add-noise",
        "views": views.len(),
        "sigma_r": params.sigma_r,
        "sigma_s": params.sigma_s,
    }));
    Ok(())
}

fn load_clean(dirs: &[PathBuf]) -> Result<Vec<SceneData>> {
    dirs.iter()
        .map(|d| {
            let scene = load_scene(d)?;
            if scene.manifest.noise.is_some() {
                return Err(input_err(format!("{}: expected a clean scene", d.display())));
            }
            Ok(SceneData::from_loaded(&scene))
        })
        .collect()
}

fn input_views(dirs: &[PathBuf], data: &[SceneData]) -> Result<usize> {
    let v = data[0].indices(ViewRole::Input).len();
    if let Some(i) = data.iter().position(|d| d.indices(ViewRole::Input).len() != v) {
        return Err(input_err(format!(
            "{}: {} input views, expected {v}",
            dirs[i].display(),
            data[i].indices(ViewRole::Input).len()
        )));
    }
    Ok(v)
}

fn model_spec(cfg: &Config, views: usize) -> ModelSpec {
    let mut spec = ModelSpec::new(cfg.model.kind, views, cfg.pipeline.clone());
    spec.frame_features = cfg.model.frame_features;
    spec.init_seed = cfg.seed;
    spec
}

fn train_cmd(cli: &Cli, dirs: &[PathBuf], out: &Path, cfg: &Config) -> Result<()> {
    let data = load_clean(dirs)?;
    let spec = model_spec(cfg, input_views(dirs, &data)?);
    let every = (cfg.train.steps / 20).max(1);
    let steps = cfg.train.steps;
    let outcome = train_with(&spec, &cfg.train, &data, Some(out), |r| {
        if (r.step + 1) % every == 0 || r.step + 1 == steps {
            eprintln!("step {}/{steps} lr {:.3e} loss {:.5}", r.step + 1, r.lr, r.loss);
        }
    })?;
    let files = [MODEL_FILE, PARAMS_FILE, CHECKPOINT_MANIFEST, LOSS_LOG_FILE].map(String::from);
    let inputs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    write_manifest(out, "train", &cli.preset, cfg, &inputs, &files)?;
    let last = outcome.losses.last().map(|r| r.loss);
    print_json(serde_json::json!({ "command": "train", "steps": steps, "final_loss": last }));
    Ok(())
}

/// Trained model from `--model`, or a freshly initialized one described by
/// the configuration.
fn obtain_model(arg: &ModelArg, cfg: &Config, views: usize) -> Result<(ModelSpec, Model, ParamStore<f32>)> {
    let (spec, model, store) = match &arg.model {
        Some(dir) => load_model(dir)?,
        None => {
            let spec = model_spec(cfg, views);
            let mut store = ParamStore::new();
            let model = Model::build(&spec, &mut store)?;
            (spec, model, store)
        }
    };
    if spec.views != views {
        return Err(input_err(format!("model expects {} input views, the scene has {views}", spec.views)));
    }
    Ok((spec, model, store))
}

fn inputs_of(scene: &LoadedScene) -> (Vec<Camera>, Vec<Tensor<f32>>) {
    scene
        .indices(ViewRole::Input)
        .into_iter()
        .map(|i| (scene.views[i].camera, scene.views[i].image.clone()))
        .unzip()
}

/// Noise of the scene's frames: `--gain` wins over the scene metadata.
fn scene_noise(scene: &LoadedScene, gain: Option<u32>, dir: &Path) -> Result<NoiseParams> {
    match (gain, &scene.manifest.noise) {
        (Some(g), _) => Ok(gain_to_params(g)?),
        (None, Some(rec)) => Ok(rec.params()),
        (None, None) => Err(input_err(format!("{}: no noise metadata; pass --gain", dir.display()))),
    }
}

fn save_rendered(out: &Path, cams: &[Camera], pred: &Tensor<f32>) -> Result<usize> {
    let s = pred.shape();
    let views = (0..cams.len())
        .map(|r| CameraView::new(cams[r], pred.narrow(0, r, 1)?.reshape(&s[1..])?))
        .collect::<mpfer_core::Result<Vec<_>>>()?;
    save_views(out, &views, &vec![ViewRole::Input; views.len()], &SceneManifest::default())?;
    Ok(views.len())
}

fn denoise_cmd(cli: &Cli, arg: &ModelArg, input: &Path, out: &Path, gain: Option<u32>, cfg: &Config) -> Result<()> {
    let scene = load_scene(input)?;
    let (cams, images) = inputs_of(&scene);
    let (spec, model, store) = obtain_model(arg, cfg, cams.len())?;
    if spec.mode() != Mode::Denoise {
        return Err(input_err("model was not built for denoising"));
    }
    let noise = scene_noise(&scene, gain, input)?;
    let ex = observe(Mode::Denoise, &spec.pipeline, &cams, &images, Some(&noise), &cams)?;
    let pred = predict(&model, &store, &ex)?;
    let n = save_rendered(out, &cams, &pred)?;
    let mut inputs = vec![input];
    inputs.extend(arg.model.as_deref());
    write_manifest(out, "denoise", &cli.preset, cfg, &inputs, &scene_files(n))?;
    print_json(serde_json::json!({ "command": "denoise", "views": n }));
    Ok(())
}

fn synthesize_cmd(cli: &Cli, arg: &ModelArg, input: &Path, poses: Option<&Path>, out: &Path, cfg: &Config) -> Result<()> {
    let scene = load_scene(input)?;
    let (cams, images) = inputs_of(&scene);
    let (spec, model, store) = obtain_model(arg, cfg, cams.len())?;
    if spec.mode() != Mode::Synthesis {
        return Err(input_err("model was not built for view synthesis"));
    }
    let render: Vec<Camera> = match poses {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read poses", path.display()))?;
            let file = PoseFile::parse(&text).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
            let (w, h) = (cams[0].width, cams[0].height);
            file.views
                .iter()
                .map(|r| r.camera(w, h).map_err(|e| input_err(format!("{}: {}: {e}", path.display(), r.image))))
                .collect::<Result<Vec<_>>>()?
        }
        None => scene.indices(ViewRole::Target).into_iter().map(|i| scene.views[i].camera).collect(),
    };
    if render.is_empty() {
        return Err(input_err(format!("{}: no target views; pass --poses", input.display())));
    }
    let ex = observe(Mode::Synthesis, &spec.pipeline, &cams, &images, None, &render)?;
    let pred = predict(&model, &store, &ex)?;
    let n = save_rendered(out, &render, &pred)?;
    let mut inputs = vec![input];
    inputs.extend(poses);
    inputs.extend(arg.model.as_deref());
    write_manifest(out, "synthesize", &cli.preset, cfg, &inputs, &scene_files(n))?;
    print_json(serde_json::json!({ "command": "synthesize", "views": n }));
    Ok(())
}

fn eval_cmd(cli: &Cli, arg: &ModelArg, dirs: &[PathBuf], out: &Path, cfg: &Config) -> Result<()> {
    let data = load_clean(dirs)?;
    let (spec, model, store) = obtain_model(arg, cfg, input_views(dirs, &data)?)?;
    let noise: Vec<NoiseSetting> = cfg.eval.gains.iter().map(|&g| NoiseSetting::Gain(g)).collect();
    let crop = cfg.eval.crop.unwrap_or(match spec.mode() {
        Mode::Synthesis => 16,
        Mode::Denoise => 0,
    });
    let report = evaluate(&model, &store, &spec, &data, &noise, crop)?;
    std::fs::create_dir_all(out).with_context(|| format!("{}: cannot create output", out.display()))?;
    let path = out.join(REPORT_FILE);
    let lines = report.to_json_lines();
    std::fs::write(&path, &lines).with_context(|| format!("{}: cannot write report", path.display()))?;
    let mut inputs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    inputs.extend(arg.model.as_deref());
    write_manifest(out, "eval", &cli.preset, cfg, &inputs, &[REPORT_FILE.into()])?;
    for line in lines.lines().filter(|l| l.contains("\"summary\"")) {
        println!("{line}");
    }
    Ok(())
}

fn dump_mpf_cmd(
    cli: &Cli,
    arg: &ModelArg,
    input: &Path,
    out: &Path,
    planes: &[usize],
    gain: Option<u32>,
    cfg: &Config,
) -> Result<()> {
    let scene = load_scene(input)?;
    let (cams, images) = inputs_of(&scene);
    let (spec, model, store) = obtain_model(arg, cfg, cams.len())?;
    let mode = spec.mode();
    let noise = match mode {
        Mode::Denoise => Some(scene_noise(&scene, gain, input)?),
        Mode::Synthesis => None,
    };
    let ex = observe(mode, &spec.pipeline, &cams, &images, noise.as_ref(), &cams)?;
    let mpf = multiplane_features(&model, &store, &ex).map_err(|e| input_err(e.to_string()))?;
    let s = mpf.shape().to_vec();
    let (d, c2, h, w) = (s[0], s[1], s[2], s[3]);
    let chosen: Vec<usize> = if planes.is_empty() { (1..=d).collect() } else { planes.to_vec() };
    if let Some(&bad) = chosen.iter().find(|&&p| p == 0 || p > d) {
        return Err(input_err(format!("plane {bad} outside 1..={d}")));
    }
    std::fs::create_dir_all(out).with_context(|| format!("{}: cannot create output", out.display()))?;
    let hw = h * w;
    let mut files = Vec::with_capacity(chosen.len());
    for &p in &chosen {
        let plane = &mpf.data()[(p - 1) * c2 * hw..p * c2 * hw];
        // first three channels; fewer are repeated
        let triple: Vec<f32> = (0..3).flat_map(|c| plane[c.min(c2 - 1) * hw..(c.min(c2 - 1) + 1) * hw].iter().copied()).collect();
        let (lo, hi) = triple.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = hi - lo;
        let shown: Vec<f32> = triple.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
        let name = format!("plane_{p:02}.png");
        let text = [
            ("Normalization", "per-plane min-max of channels 0-2 to [0,1]".to_string()),
            ("Min", format!("{lo:e}")),
            ("Max", format!("{hi:e}")),
            ("Depth", format!("{}", spec.pipeline.planes()?.distances()[p - 1])),
        ];
        write_display_png(&out.join(&name), &shown, h, w, &text)?;
        files.push(name);
    }
    let mut inputs = vec![input];
    inputs.extend(arg.model.as_deref());
    write_manifest(out, "dump-mpf", &cli.preset, cfg, &inputs, &files)?;
    print_json(serde_json::json!({ "command": "dump-mpf", "planes": chosen, "channels": c2 }));
    Ok(())
}
