use std::path::Path;

use serde::Serialize;

use super::config::HarnessConfig;
use crate::error::Result;
use crate::io::{LayerEntry, ManifestWriter};
use crate::pyramid::{PyramidConfig, PyramidParams, Variant};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const TAG_DEMO_INPUT: u64 = 0xDE40;

#[derive(Clone, Debug, Serialize)]
pub struct DemoLevel {
    pub name: String,
    pub shape: Vec<usize>,
    pub kernel_channels: usize,
    pub orientations: usize,
    /// Channel count divisible by the orientation count.
    pub layout_ok: bool,
    pub frobenius_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DemoReport {
    pub variant: Variant,
    pub files: Vec<String>,
    pub levels: Vec<DemoLevel>,
}

impl DemoReport {
    pub fn layout_ok(&self) -> bool {
        self.levels.iter().all(|l| l.layout_ok)
    }
}

/// Runs the configured pyramid on a seeded random image and writes the
/// input, every pyramid level and the parameters as RAFT files with
/// manifests: outputs in `out`, parameters in `out/params`.
pub fn demo(cfg: &HarnessConfig, out: &Path) -> Result<DemoReport> {
    cfg.validate()?;
    let pcfg = PyramidConfig {
        seed: cfg.seed,
        ..cfg.pyramid.clone()
    };
    let params = PyramidParams::init(&pcfg)?;
    let s = cfg.input.size;
    let image = Tensor::uniform(
        &[cfg.input.batch, pcfg.in_channels, s, s],
        -1.0,
        1.0,
        &mut Rng::new(derive_seed(cfg.seed, TAG_DEMO_INPUT)),
    );
    let result = params.forward(&image)?;
    let n = pcfg.orientations;

    let mut writer = ManifestWriter::new(out)?;
    writer.manifest.config = Some(serde_json::to_value(&pcfg)?);
    let entry = |name: String, kind: &str, k_in, k_out, channels| LayerEntry {
        name,
        kind: kind.to_owned(),
        orientations: n,
        k_in,
        k_out,
        kernel_size: 1,
        reduction: None,
        channels: Some(channels),
        tensors: Vec::new(),
    };
    writer.push_layer(
        entry("input".into(), "image", pcfg.in_channels, pcfg.in_channels, pcfg.in_channels),
        &[("data", &image)],
    )?;
    let mut levels = Vec::new();
    for (l, p) in result.pyramid.iter().enumerate() {
        let name = format!("P{l}");
        p.tensor().ensure_finite(&name)?;
        writer.push_layer(
            entry(name.clone(), "pyramid_level", p.kernel_channels(), p.kernel_channels(), p.channels()),
            &[("data", p.tensor())],
        )?;
        levels.push(DemoLevel {
            name,
            shape: p.shape().to_vec(),
            kernel_channels: p.kernel_channels(),
            orientations: p.orientations(),
            layout_ok: p.channels() % p.orientations() == 0,
            frobenius_norm: p.tensor().frobenius_norm(),
        });
    }
    let manifest = writer.finish()?;
    params.save(&out.join("params"))?;

    let mut files: Vec<String> = manifest
        .layers
        .iter()
        .flat_map(|l| l.tensors.iter().map(|t| t.file.clone()))
        .collect();
    files.push("manifest.json".into());
    files.push("params/manifest.json".into());
    Ok(DemoReport {
        variant: pcfg.variant,
        files,
        levels,
    })
}
