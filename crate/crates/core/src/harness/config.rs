use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Stencil;
use crate::error::{Error, Result};
use crate::pyramid::PyramidConfig;

fn d_batch() -> usize {
    1
}
fn d_size() -> usize {
    32
}
fn d_trials() -> usize {
    20
}
fn d_reseeds() -> usize {
    3
}
fn d_pass() -> f64 {
    1e-10
}
fn d_broken() -> f64 {
    1e-2
}
fn d_oracle() -> f64 {
    1e-12
}
fn d_grad() -> f64 {
    1e-6
}
fn d_grad_equiv() -> f64 {
    1e-8
}
fn d_oracle_trials() -> usize {
    100
}
fn d_max_dim() -> usize {
    6
}
fn d_h() -> f64 {
    1e-5
}
fn d_coords() -> usize {
    50
}
fn d_kink() -> f64 {
    1e-6
}
fn d_floor() -> f64 {
    1e-2
}
fn d_gc_batch() -> usize {
    2
}
fn d_gc_k() -> usize {
    2
}
fn d_gc_size() -> usize {
    4
}
fn d_gc_reduction() -> usize {
    2
}
fn d_gc_levels() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    #[serde(default = "d_batch")]
    pub batch: usize,
    /// Height and width of the square input image.
    #[serde(default = "d_size")]
    pub size: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            batch: d_batch(),
            size: d_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Largest residual an equivariant variant may show.
    #[serde(default = "d_pass")]
    pub equivariant: f64,
    /// Smallest worst-case residual that counts as demonstrated breakage.
    #[serde(default = "d_broken")]
    pub broken: f64,
    #[serde(default = "d_oracle")]
    pub oracle: f64,
    #[serde(default = "d_grad")]
    pub gradcheck: f64,
    #[serde(default = "d_grad_equiv")]
    pub gradient_equivariance: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            equivariant: d_pass(),
            broken: d_broken(),
            oracle: d_oracle(),
            gradcheck: d_grad(),
            gradient_equivariance: d_grad_equiv(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "d_oracle_trials")]
    pub trials: usize,
    /// Upper bound on every randomly drawn extent.
    #[serde(default = "d_max_dim")]
    pub max_dim: usize,
    #[serde(default)]
    pub zero_weights: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            trials: d_oracle_trials(),
            max_dim: d_max_dim(),
            zero_weights: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "d_h")]
    pub h: f64,
    #[serde(default)]
    pub stencil: Stencil,
    #[serde(default = "d_coords")]
    pub coords_per_input: usize,
    #[serde(default = "d_kink")]
    pub kink_margin: f64,
    #[serde(default = "d_floor")]
    pub scale_floor: f64,
    #[serde(default = "d_gc_batch")]
    pub batch: usize,
    #[serde(default = "d_gc_k")]
    pub kernel_channels: usize,
    #[serde(default = "d_gc_size")]
    pub size: usize,
    #[serde(default = "d_gc_reduction")]
    pub reduction: usize,
    #[serde(default = "d_gc_levels")]
    pub pyramid_levels: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: d_h(),
            stencil: Stencil::default(),
            coords_per_input: d_coords(),
            kink_margin: d_kink(),
            scale_floor: d_floor(),
            batch: d_gc_batch(),
            kernel_channels: d_gc_k(),
            size: d_gc_size(),
            reduction: d_gc_reduction(),
            pyramid_levels: d_gc_levels(),
        }
    }
}

/// Everything a harness command reads. Only `pyramid.kernel_channels` and
/// `pyramid.orientations` are required; the rest has defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub pyramid: PyramidConfig,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub seed: u64,
    /// Independent weight/input draws of the equivariance matrix.
    #[serde(default = "d_trials")]
    pub trials: usize,
    /// Fresh draws allowed per trial before a missing breakage is declared
    /// inconclusive.
    #[serde(default = "d_reseeds")]
    pub max_reseeds: usize,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    /// Wall-clock timings make reports differ between runs, so they are off
    /// unless asked for.
    #[serde(default)]
    pub record_timings: bool,
}

impl HarnessConfig {
    pub fn new(pyramid: PyramidConfig) -> Self {
        Self {
            pyramid,
            input: InputConfig::default(),
            seed: 0,
            trials: d_trials(),
            max_reseeds: d_reseeds(),
            thresholds: Thresholds::default(),
            oracle: OracleConfig::default(),
            gradcheck: GradcheckConfig::default(),
            record_timings: false,
        }
    }

    /// Parses JSON that may contain `//` and `/* */` comments.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut clean = String::with_capacity(text.len());
        json_comments::StripComments::new(text.as_bytes())
            .read_to_string(&mut clean)
            .map_err(|e| Error::Config(format!("reading config: {e}")))?;
        let cfg: Self = serde_json::from_str(&clean).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input.batch == 0 {
            return bad("input.batch must be positive".into());
        }
        if self.input.size == 0 || !self.input.size.is_multiple_of(self.pyramid.spatial_multiple()) {
            return bad(format!(
                "spatial size {} not divisible by {} (2^(levels-1) for {} levels)",
                self.input.size,
                self.pyramid.spatial_multiple(),
                self.pyramid.levels
            ));
        }
        if self.input.batch * self.pyramid.orientations < 2 {
            return bad("batch statistics need batch x orientations >= 2; use batch >= 2 when orientations = 1".into());
        }
        let t = &self.thresholds;
        for (name, v) in [
            ("equivariant", t.equivariant),
            ("broken", t.broken),
            ("oracle", t.oracle),
            ("gradcheck", t.gradcheck),
            ("gradient_equivariance", t.gradient_equivariance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("thresholds.{name} must be a non-negative number"));
            }
        }
        if t.broken <= t.equivariant {
            return bad("thresholds.broken must exceed thresholds.equivariant".into());
        }
        if self.oracle.max_dim < 2 {
            return bad("oracle.max_dim must be at least 2".into());
        }
        let g = &self.gradcheck;
        if !(1e-7..=1e-3).contains(&g.h) {
            return bad(format!("gradcheck.h = {} outside [1e-7, 1e-3]", g.h));
        }
        if g.batch == 0 || g.kernel_channels == 0 || g.reduction == 0 || g.coords_per_input == 0 {
            return bad("gradcheck extents must be positive".into());
        }
        if g.batch * self.pyramid.orientations < 2 {
            return bad("gradcheck.batch must be >= 2 when orientations = 1".into());
        }
        if g.pyramid_levels < 2 || !g.size.is_multiple_of(1 << (g.pyramid_levels - 1)) || g.size < 2 {
            return bad(format!(
                "gradcheck.size {} not divisible by 2^(pyramid_levels-1)",
                g.size
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_with_comments() {
        let cfg = HarnessConfig::from_json_str(
            r#"{
                // only the required fields
                "pyramid": { "kernel_channels": 8, "orientations": 4, "levels": 3 } /* trailing */
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.input.size, 32);
        assert_eq!(cfg.trials, 20);
        assert_eq!(cfg.thresholds.broken, 1e-2);
    }

    #[test]
    fn urls_inside_strings_survive() {
        // `//` inside a string literal is not a comment.
        let err = HarnessConfig::from_json_str(r#"{"pyramid": {"kernel_channels": 8, "orientations": 4, "variant": "http://x"}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("http://x"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        let base = r#""pyramid": {"kernel_channels": 8, "orientations": 4, "levels": 3}"#;
        for extra in [
            r#""input": {"size": 30}"#,
            r#""input": {"batch": 0}"#,
            r#""thresholds": {"broken": 1e-12}"#,
            r#""unknown": 1"#,
            r#""gradcheck": {"h": 0.1}"#,
        ] {
            let text = format!("{{{base}, {extra}}}");
            assert!(HarnessConfig::from_json_str(&text).is_err(), "{extra}");
        }
        let n1 = r#"{"pyramid": {"kernel_channels": 4, "orientations": 1, "levels": 2}, "input": {"size": 8}}"#;
        assert!(HarnessConfig::from_json_str(n1).is_err());
    }

    #[test]
    fn odd_size_reports_divisibility() {
        let err = HarnessConfig::from_json_str(
            r#"{"pyramid": {"kernel_channels": 8, "orientations": 4, "levels": 3}, "input": {"size": 33}}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("spatial size 33 not divisible"), "{err}");
    }
}
