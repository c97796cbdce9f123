//! Run manifests and display images.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, Config};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct OutputFile {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    preset: &'a str,
    config_hash: String,
    inputs: Vec<String>,
    outputs: Vec<OutputFile>,
    config: serde_json::Value,
}

/// Writes `manifest.json` into `dir`, listing the produced `files` with
/// their digests.
pub fn write_manifest(dir: &Path, command: &str, preset: &str, config: &Config, inputs: &[&Path], files: &[String]) -> Result<()> {
    let mut names = files.to_vec();
    names.sort();
    names.dedup();
    let outputs = names
        .into_iter()
        .map(|file| {
            let path = dir.join(&file);
            let bytes = fs::read(&path).with_context(|| format!("{}: cannot read output", path.display()))?;
            Ok(OutputFile {
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
                file,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        preset,
        config_hash: config.hash(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs,
        config: config.to_json(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).with_context(|| format!("{}: cannot write manifest", path.display()))
}

/// 8-bit RGB PNG from planar `3 x h x w` values in `[0, 1]`, with text
/// chunks.
pub fn write_display_png(path: &Path, planar: &[f32], h: usize, w: usize, text: &[(&str, String)]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("{}: cannot create image", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.clone())?;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            data.push((planar[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut writer = enc.write_header()?;
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}
