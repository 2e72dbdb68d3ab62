//! Run configuration: a flat sectioned `key = value` text format covering
//! the network, training loop, data generator, and file paths. Unknown keys
//! are rejected so typos fail loudly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CpError, Result};
use crate::network::CpUnetConfig;
use crate::synth::{ShapeFamily, SynthSpec};
use crate::train::TrainConfig;

pub const OUT_DIR_ENV: &str = "CPUNET_OUT_DIR";

#[derive(Debug, Clone)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: PathBuf::from("out/model.ckpt"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub network: CpUnetConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub paths: Paths,
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

macro_rules! set_num {
    ($field:expr, $v:expr, $key:expr) => {
        $field = $v
            .parse()
            .map_err(|_| CpError::Config(format!("invalid value for {}: {}", $key, $v)))?
    };
}

impl RunConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let v = value.trim();
        let bad_bool = || CpError::Config(format!("invalid boolean for {full}: {v}"));
        match (section, key) {
            ("network", "stages") => set_num!(self.network.stages, v, full),
            ("network", "base_channels") => set_num!(self.network.base_channels, v, full),
            ("network", "input_h") => set_num!(self.network.input_h, v, full),
            ("network", "input_w") => set_num!(self.network.input_w, v, full),
            ("network", "k_components") => set_num!(self.network.k_components, v, full),
            ("network", "feature_dim") => set_num!(self.network.feature_dim, v, full),
            ("network", "extractor_hidden") => set_num!(self.network.extractor_hidden, v, full),
            ("network", "groups") => set_num!(self.network.groups, v, full),
            ("network", "shift_step") => set_num!(self.network.shift_step, v, full),
            ("network", "band") => set_num!(self.network.band, v, full),
            ("network", "seed") => set_num!(self.network.seed, v, full),
            ("network", "cyclic_shift") => {
                self.network.cyclic_shift = parse_bool(v).ok_or_else(bad_bool)?
            }
            ("network", "shared_z") => self.network.shared_z = parse_bool(v).ok_or_else(bad_bool)?,
            ("network", "per_stage_redraw") => {
                self.network.per_stage_redraw = parse_bool(v).ok_or_else(bad_bool)?
            }
            ("network", "kl_grad_target") => {
                self.network.kl_grad_target = parse_bool(v).ok_or_else(bad_bool)?
            }
            ("network", "enable_mgcsd") => {
                self.network.enable_mgcsd = parse_bool(v).ok_or_else(bad_bool)?
            }
            ("network", "enable_cpm") => {
                self.network.enable_cpm = parse_bool(v).ok_or_else(bad_bool)?
            }
            ("network", "enable_gf") => self.network.enable_gf = parse_bool(v).ok_or_else(bad_bool)?,

            ("train", "lr0") => set_num!(self.train.lr0, v, full),
            ("train", "momentum") => set_num!(self.train.momentum, v, full),
            ("train", "weight_decay") => set_num!(self.train.weight_decay, v, full),
            ("train", "batch_size") => set_num!(self.train.batch_size, v, full),
            ("train", "epochs") => set_num!(self.train.epochs, v, full),
            ("train", "seed") => set_num!(self.train.seed, v, full),
            ("train", "eval_every") => set_num!(self.train.eval_every, v, full),
            ("train", "max_steps") => set_num!(self.train.max_steps, v, full),
            ("train", "val_fraction") => set_num!(self.train.val_fraction, v, full),
            ("train", "step_offset") => set_num!(self.train.step_offset, v, full),

            ("synth", "count") => set_num!(self.synth.count, v, full),
            ("synth", "h") => set_num!(self.synth.h, v, full),
            ("synth", "w") => set_num!(self.synth.w, v, full),
            ("synth", "blur_sigma_lo") => set_num!(self.synth.blur_sigma.0, v, full),
            ("synth", "blur_sigma_hi") => set_num!(self.synth.blur_sigma.1, v, full),
            ("synth", "speckle_strength") => set_num!(self.synth.speckle_strength, v, full),
            ("synth", "shape_family") => self.synth.shape_family = ShapeFamily::parse(v)?,
            ("synth", "overlap_artifacts") => {
                self.synth.overlap_artifacts = parse_bool(v).ok_or_else(bad_bool)?
            }
            ("synth", "margin") => set_num!(self.synth.margin, v, full),

            ("paths", "data_dir") => self.paths.data_dir = PathBuf::from(v),
            ("paths", "out_dir") => self.paths.out_dir = PathBuf::from(v),
            ("paths", "checkpoint") => self.paths.checkpoint = PathBuf::from(v),

            _ => return Err(CpError::Config(format!("unknown config key: {full}"))),
        }
        Ok(())
    }

    /// Parses the sectioned text format: `[section]` headers, `key = value`
    /// lines, `#` comments and blank lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CpError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            if section.is_empty() {
                return Err(CpError::Config(format!(
                    "line {}: key outside any [section]",
                    lineno + 1
                )));
            }
            cfg.set(&section, key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CpError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `section.key=value` command-line override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| {
            CpError::Config(format!("override must be section.key=value: {assignment}"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            CpError::Config(format!("override key must be section.key: {path}"))
        })?;
        self.set(section, key.trim(), value)
    }

    /// Applies the out_dir environment override if present.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                self.paths.out_dir = PathBuf::from(dir);
            }
        }
    }

    /// Serializes back to the text format (used inside checkpoints). The
    /// result parses to an equivalent config.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let _ = write!(
            out,
            "[network]\nstages = {}\nbase_channels = {}\ninput_h = {}\ninput_w = {}\n\
             k_components = {}\nfeature_dim = {}\nextractor_hidden = {}\ngroups = {}\n\
             shift_step = {}\nband = {}\nseed = {}\ncyclic_shift = {}\nshared_z = {}\n\
             per_stage_redraw = {}\nkl_grad_target = {}\nenable_mgcsd = {}\nenable_cpm = {}\n\
             enable_gf = {}\n\n",
            n.stages,
            n.base_channels,
            n.input_h,
            n.input_w,
            n.k_components,
            n.feature_dim,
            n.extractor_hidden,
            n.groups,
            n.shift_step,
            n.band,
            n.seed,
            n.cyclic_shift,
            n.shared_z,
            n.per_stage_redraw,
            n.kl_grad_target,
            n.enable_mgcsd,
            n.enable_cpm,
            n.enable_gf,
        );
        let _ = write!(
            out,
            "[train]\nlr0 = {}\nmomentum = {}\nweight_decay = {}\nbatch_size = {}\n\
             epochs = {}\nseed = {}\neval_every = {}\nmax_steps = {}\nval_fraction = {}\n\
             step_offset = {}\n\n",
            t.lr0,
            t.momentum,
            t.weight_decay,
            t.batch_size,
            t.epochs,
            t.seed,
            t.eval_every,
            t.max_steps,
            t.val_fraction,
            t.step_offset,
        );
        let _ = write!(
            out,
            "[synth]\ncount = {}\nh = {}\nw = {}\nblur_sigma_lo = {}\nblur_sigma_hi = {}\n\
             speckle_strength = {}\nshape_family = {}\noverlap_artifacts = {}\nmargin = {}\n\n",
            s.count,
            s.h,
            s.w,
            s.blur_sigma.0,
            s.blur_sigma.1,
            s.speckle_strength,
            s.shape_family.name(),
            s.overlap_artifacts,
            s.margin,
        );
        let _ = write!(
            out,
            "[paths]\ndata_dir = {}\nout_dir = {}\ncheckpoint = {}\n",
            self.paths.data_dir.display(),
            self.paths.out_dir.display(),
            self.paths.checkpoint.display(),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_comments_and_overrides() {
        let text = "# run\n[network]\nstages = 2\ninput_h = 16\ninput_w = 16\n\n\
                    [train]\nepochs = 3\n[paths]\nout_dir = /tmp/x\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.network.stages, 2);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("/tmp/x"));
        // defaults untouched
        assert_eq!(cfg.train.batch_size, 8);

        cfg.apply_override("train.batch_size=4").unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        cfg.apply_override("network.enable_gf=false").unwrap();
        assert!(!cfg.network.enable_gf);
    }

    #[test]
    fn unknown_keys_and_malformed_lines_rejected() {
        assert!(RunConfig::parse("[network]\nstagez = 2\n")
            .unwrap_err()
            .to_string()
            .contains("unknown config key: network.stagez"));
        assert!(RunConfig::parse("[nope]\nstages = 2\n").is_err());
        assert!(RunConfig::parse("stages = 2\n").is_err());
        assert!(RunConfig::parse("[network]\nstages\n").is_err());
        assert!(RunConfig::parse("[network]\nstages = zebra\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("no_dot=1").is_err());
        assert!(cfg.apply_override("train.batch_size").is_err());
    }

    #[test]
    fn text_round_trip_preserves_everything() {
        let mut cfg = RunConfig::default();
        cfg.network.stages = 3;
        cfg.network.enable_cpm = false;
        cfg.train.lr0 = 0.005;
        cfg.train.val_fraction = 0.25;
        cfg.synth.shape_family = ShapeFamily::Crescent;
        cfg.synth.blur_sigma = (0.25, 2.0);
        cfg.paths.checkpoint = PathBuf::from("a/b.ckpt");

        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.network.stages, 3);
        assert!(!back.network.enable_cpm);
        assert_eq!(back.synth.shape_family, ShapeFamily::Crescent);
    }
}
