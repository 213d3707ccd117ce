//! Run configuration: a flat `key = value` text format with a fixed,
//! documented key set. Unknown keys are rejected so typos fail loudly.

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::geometry::WorkspaceSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub voxel_size: f64,
    /// Prediction horizon H: tracks and geometry cover steps 0..=H and the
    /// action chunk covers H steps.
    pub horizon: usize,
    pub keypoints: usize,
    /// Trunk token width C; divisible by 6 and by `heads`.
    pub embed_dim: usize,
    /// Fine voxel feature width C'.
    pub voxel_channels: usize,
    pub decoder_mid_channels: usize,
    /// Initial primitives per fine voxel.
    pub n_gaussians: usize,
    /// Refined primitives per marked voxel; must exceed `n_gaussians`.
    pub n_refine: usize,
    pub lambda_action: f64,
    pub lambda_track: f64,
    pub lambda_depth: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub denoise_steps: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub cameras: usize,
    pub layers: usize,
    pub heads: usize,
    pub history_window: usize,
    pub episode_steps: usize,
    pub n_tasks: usize,
    pub log_every: usize,
    pub precision: Precision,
}

impl RunConfig {
    /// Desk-scale defaults sized so the whole pipeline trains in minutes on
    /// one CPU core.
    pub fn toy() -> Self {
        RunConfig {
            workspace_min: [0.0, 0.0, 0.0],
            workspace_max: [0.8, 0.8, 0.4],
            voxel_size: 0.1,
            horizon: 8,
            keypoints: 4,
            embed_dim: 48,
            voxel_channels: 16,
            decoder_mid_channels: 24,
            n_gaussians: 2,
            n_refine: 8,
            lambda_action: 1.0,
            lambda_track: 1.0,
            lambda_depth: 1.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch_size: 2,
            iterations: 300,
            seed: 0,
            denoise_steps: 10,
            image_size: 32,
            patch_size: 8,
            cameras: 2,
            layers: 3,
            heads: 4,
            history_window: 8,
            episode_steps: 48,
            n_tasks: 4,
            log_every: 10,
            precision: Precision::F32,
        }
    }

    /// Full-scale reference values. The depth axis is padded to 1.12 m so
    /// the voxel extents divide by 4, and the token width is 2052 (the
    /// nearest multiple of 6, as the factored spatial encoding needs three
    /// even channel blocks). Recorded for completeness; tests run toy sizes.
    pub fn paper_scale() -> Self {
        RunConfig {
            workspace_min: [0.0, 0.0, 0.0],
            workspace_max: [1.6, 1.6, 1.12],
            voxel_size: 0.04,
            horizon: 50,
            keypoints: 8,
            embed_dim: 2052,
            voxel_channels: 256,
            decoder_mid_channels: 256,
            n_gaussians: 4,
            n_refine: 64,
            lambda_action: 1.0,
            lambda_track: 1.0,
            lambda_depth: 1.0,
            lr: 2.5e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch_size: 32,
            iterations: 40_000,
            seed: 0,
            denoise_steps: 10,
            image_size: 224,
            patch_size: 16,
            cameras: 2,
            layers: 18,
            heads: 12,
            history_window: 16,
            episode_steps: 120,
            n_tasks: 4,
            log_every: 100,
            precision: Precision::F32,
        }
    }

    /// Tiny everything: used by the end-to-end gradient check. The box is
    /// centered on the origin so freshly initialized track predictions land
    /// inside it and exercise the refinement pathway.
    pub fn tiny() -> Self {
        RunConfig {
            workspace_min: [-0.4, -0.4, -0.4],
            workspace_max: [0.4, 0.4, 0.4],
            voxel_size: 0.1, // fine 8x8x8, coarse 2x2x2
            horizon: 4,
            keypoints: 4,
            embed_dim: 36,
            voxel_channels: 8,
            decoder_mid_channels: 8,
            n_gaussians: 1,
            n_refine: 2,
            layers: 2,
            heads: 2,
            image_size: 16,
            patch_size: 8,
            batch_size: 1,
            iterations: 50,
            episode_steps: 16,
            history_window: 4,
            precision: Precision::F64,
            ..Self::toy()
        }
    }

    pub fn workspace(&self) -> Result<WorkspaceSpec> {
        WorkspaceSpec::new(self.workspace_min, self.workspace_max, self.voxel_size)
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        let mut env = EnvSpec::toy(
            self.workspace()?,
            self.image_size,
            self.episode_steps,
            self.horizon,
            self.cameras,
        )?;
        env.n_tasks = self.n_tasks;
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.workspace()?;
        if self.embed_dim % 6 != 0 {
            return fail(format!("embed_dim {} must be divisible by 6", self.embed_dim));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.n_refine <= self.n_gaussians {
            return fail(format!(
                "n_refine {} must exceed n_gaussians {}",
                self.n_refine, self.n_gaussians
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.denoise_steps == 0 || self.batch_size == 0 || self.keypoints == 0 {
            return fail("denoise_steps, batch_size and keypoints must be positive".into());
        }
        if self.episode_steps < self.horizon + 2 {
            return fail(format!(
                "episode_steps {} too short for horizon {}",
                self.episode_steps, self.horizon
            ));
        }
        if self.history_window == 0 {
            return fail("history_window must be positive".into());
        }
        if !(self.lambda_action >= 0.0 && self.lambda_track >= 0.0 && self.lambda_depth >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim(), lineno + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        fn f<T: std::str::FromStr>(key: &str, value: &str, lineno: usize) -> Result<T> {
            value.parse::<T>().map_err(|_| {
                Error::Config(format!("line {}: bad value '{}' for {}", lineno, value, key))
            })
        }
        match key {
            "workspace_min_x" => self.workspace_min[0] = f(key, value, lineno)?,
            "workspace_min_y" => self.workspace_min[1] = f(key, value, lineno)?,
            "workspace_min_z" => self.workspace_min[2] = f(key, value, lineno)?,
            "workspace_max_x" => self.workspace_max[0] = f(key, value, lineno)?,
            "workspace_max_y" => self.workspace_max[1] = f(key, value, lineno)?,
            "workspace_max_z" => self.workspace_max[2] = f(key, value, lineno)?,
            "voxel_size" => self.voxel_size = f(key, value, lineno)?,
            "horizon" => self.horizon = f(key, value, lineno)?,
            "keypoints" => self.keypoints = f(key, value, lineno)?,
            "embed_dim" => self.embed_dim = f(key, value, lineno)?,
            "voxel_channels" => self.voxel_channels = f(key, value, lineno)?,
            "decoder_mid_channels" => self.decoder_mid_channels = f(key, value, lineno)?,
            "n_gaussians" => self.n_gaussians = f(key, value, lineno)?,
            "n_refine" => self.n_refine = f(key, value, lineno)?,
            "lambda_action" => self.lambda_action = f(key, value, lineno)?,
            "lambda_track" => self.lambda_track = f(key, value, lineno)?,
            "lambda_depth" => self.lambda_depth = f(key, value, lineno)?,
            "lr" => self.lr = f(key, value, lineno)?,
            "beta1" => self.beta1 = f(key, value, lineno)?,
            "beta2" => self.beta2 = f(key, value, lineno)?,
            "weight_decay" => self.weight_decay = f(key, value, lineno)?,
            "batch_size" => self.batch_size = f(key, value, lineno)?,
            "iterations" => self.iterations = f(key, value, lineno)?,
            "seed" => self.seed = f(key, value, lineno)?,
            "denoise_steps" => self.denoise_steps = f(key, value, lineno)?,
            "image_size" => self.image_size = f(key, value, lineno)?,
            "patch_size" => self.patch_size = f(key, value, lineno)?,
            "cameras" => self.cameras = f(key, value, lineno)?,
            "layers" => self.layers = f(key, value, lineno)?,
            "heads" => self.heads = f(key, value, lineno)?,
            "history_window" => self.history_window = f(key, value, lineno)?,
            "episode_steps" => self.episode_steps = f(key, value, lineno)?,
            "n_tasks" => self.n_tasks = f(key, value, lineno)?,
            "log_every" => self.log_every = f(key, value, lineno)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => {
                        return Err(Error::Config(format!(
                            "line {}: precision must be f32 or f64, got {}",
                            lineno, other
                        )))
                    }
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{}'",
                    lineno, other
                )))
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("workspace_min_x", format!("{}", self.workspace_min[0]));
        kv("workspace_min_y", format!("{}", self.workspace_min[1]));
        kv("workspace_min_z", format!("{}", self.workspace_min[2]));
        kv("workspace_max_x", format!("{}", self.workspace_max[0]));
        kv("workspace_max_y", format!("{}", self.workspace_max[1]));
        kv("workspace_max_z", format!("{}", self.workspace_max[2]));
        kv("voxel_size", format!("{}", self.voxel_size));
        kv("horizon", format!("{}", self.horizon));
        kv("keypoints", format!("{}", self.keypoints));
        kv("embed_dim", format!("{}", self.embed_dim));
        kv("voxel_channels", format!("{}", self.voxel_channels));
        kv("decoder_mid_channels", format!("{}", self.decoder_mid_channels));
        kv("n_gaussians", format!("{}", self.n_gaussians));
        kv("n_refine", format!("{}", self.n_refine));
        kv("lambda_action", format!("{}", self.lambda_action));
        kv("lambda_track", format!("{}", self.lambda_track));
        kv("lambda_depth", format!("{}", self.lambda_depth));
        kv("lr", format!("{}", self.lr));
        kv("beta1", format!("{}", self.beta1));
        kv("beta2", format!("{}", self.beta2));
        kv("weight_decay", format!("{}", self.weight_decay));
        kv("batch_size", format!("{}", self.batch_size));
        kv("iterations", format!("{}", self.iterations));
        kv("seed", format!("{}", self.seed));
        kv("denoise_steps", format!("{}", self.denoise_steps));
        kv("image_size", format!("{}", self.image_size));
        kv("patch_size", format!("{}", self.patch_size));
        kv("cameras", format!("{}", self.cameras));
        kv("layers", format!("{}", self.layers));
        kv("heads", format!("{}", self.heads));
        kv("history_window", format!("{}", self.history_window));
        kv("episode_steps", format!("{}", self.episode_steps));
        kv("n_tasks", format!("{}", self.n_tasks));
        kv("log_every", format!("{}", self.log_every));
        kv("precision", format!("{}", self.precision));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::toy().validate().unwrap();
        RunConfig::tiny().validate().unwrap();
        RunConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::toy();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.embed_dim, cfg.embed_dim);
        assert_eq!(back.lr, cfg.lr);
        assert_eq!(back.precision, cfg.precision);
        assert_eq!(back.workspace_max, cfg.workspace_max);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("embd_dim = 48").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ok() {
        let cfg = RunConfig::parse("# comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn invariants_enforced() {
        assert!(RunConfig::parse("embed_dim = 40").is_err()); // not divisible by 6
        assert!(RunConfig::parse("embed_dim = 54\nheads = 4").is_err()); // not by heads
        assert!(RunConfig::parse("n_refine = 1").is_err()); // <= n_gaussians
        assert!(RunConfig::parse("patch_size = 5").is_err());
        assert!(RunConfig::parse("voxel_size = 0.3").is_err()); // non-integral grid
        assert!(RunConfig::parse("workspace_max_z = 0.5").is_err()); // 10 voxels, not /4
    }

    #[test]
    fn paper_scale_records_reference_values() {
        let cfg = RunConfig::paper_scale();
        assert_eq!(cfg.horizon, 50);
        assert_eq!(cfg.keypoints, 8);
        assert_eq!(cfg.n_gaussians, 4);
        assert_eq!(cfg.n_refine, 64);
        assert_eq!(cfg.voxel_size, 0.04);
        assert_eq!(cfg.lr, 2.5e-5);
        assert_eq!(
            (cfg.lambda_action, cfg.lambda_track, cfg.lambda_depth),
            (1.0, 1.0, 1.0)
        );
        // 1.12 m depth = 28 voxels; all extents divide by 4.
        let ws = cfg.workspace().unwrap();
        assert_eq!(ws.fine_extents(), (40, 40, 28));
    }
}
