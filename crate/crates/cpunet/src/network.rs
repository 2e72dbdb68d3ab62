//! CP-UNet assembly: stem convolution, MgCSD encoder stages, the contour
//! probabilistic branch, a decoder of gated fusion stages, and a sigmoid
//! segmentation head. Each of the three modules can be toggled off to
//! reproduce the ablation grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpm::{draw_z, mask_process, ContourExtractor};
use crate::error::{CpError, Result};
use crate::gf::{fuse_inputs, GfLayer};
use crate::mgcsd::{MgCsdConfig, MgCsdStage};
use crate::tensor::{ParamId, ParamStore, Tape, Tid};

#[derive(Debug, Clone)]
pub struct CpUnetConfig {
    /// Number of encoder (and decoder) stages L.
    pub stages: usize,
    pub base_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Mixture size K.
    pub k_components: usize,
    /// Per-component feature dimensionality d.
    pub feature_dim: usize,
    /// Width of the contour extractor conv blocks.
    pub extractor_hidden: usize,
    pub groups: usize,
    pub shift_step: usize,
    /// Wrap-around group shift instead of zero-filled translation.
    pub cyclic_shift: bool,
    /// Share one z draw across mixture components.
    pub shared_z: bool,
    /// Redraw z for every decoder stage instead of once per forward.
    pub per_stage_redraw: bool,
    /// Let the KL term also train the target bank (default: stop-gradient).
    pub kl_grad_target: bool,
    pub enable_mgcsd: bool,
    pub enable_cpm: bool,
    pub enable_gf: bool,
    /// Boundary band half-width for the mask-processed target.
    pub band: usize,
    pub seed: u64,
}

impl Default for CpUnetConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            base_channels: 16,
            input_h: 64,
            input_w: 64,
            k_components: 4,
            feature_dim: 8,
            extractor_hidden: 32,
            groups: 4,
            shift_step: 1,
            cyclic_shift: false,
            shared_z: false,
            per_stage_redraw: false,
            kl_grad_target: false,
            enable_mgcsd: true,
            enable_cpm: true,
            enable_gf: true,
            band: 3,
            seed: 42,
        }
    }
}

impl CpUnetConfig {
    /// Channel widths: index 0 is the stem output, index i the output of
    /// encoder stage i (base, base, 2*base, 4*base, ...).
    pub fn enc_channels(&self) -> Vec<usize> {
        let mut ch = vec![self.base_channels];
        for i in 1..=self.stages {
            ch.push(self.base_channels << (i - 1));
        }
        ch
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.base_channels == 0 {
            return Err(CpError::Config("stages and base_channels must be >= 1".into()));
        }
        if self.k_components == 0 || self.feature_dim == 0 {
            return Err(CpError::Config("k_components and feature_dim must be >= 1".into()));
        }
        let div = 1usize << self.stages;
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(CpError::Config(format!(
                "input {}x{} not divisible by 2^{}",
                self.input_h, self.input_w, self.stages
            )));
        }
        // smallest map any encoder stage sees
        let min_spatial = self.input_h.min(self.input_w) >> (self.stages - 1);
        if self.enable_mgcsd {
            if min_spatial < 6 {
                return Err(CpError::Config(format!(
                    "deepest encoder input {min_spatial} is below 2*kernel_size"
                )));
            }
            if self.groups > 1 && self.shift_step * (self.groups - 1) >= min_spatial {
                return Err(CpError::Config(format!(
                    "shift {} exceeds the deepest {min_spatial}-pixel map",
                    self.shift_step * (self.groups - 1)
                )));
            }
            for (i, &c) in self.enc_channels().iter().enumerate().take(self.stages) {
                if c % self.groups != 0 {
                    return Err(CpError::Config(format!(
                        "stage {} input of {c} channels not divisible into {} groups",
                        i + 1,
                        self.groups
                    )));
                }
            }
        }
        if self.enable_cpm && self.input_h.min(self.input_w) >> self.stages < 2 {
            return Err(CpError::Config(
                "deepest encoder output too small for the contour extractor".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    MgCsd(MgCsdStage),
    Plain {
        conv1: (ParamId, ParamId),
        conv2: (ParamId, ParamId),
    },
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: (ParamId, ParamId),
    gf: Option<GfLayer>,
    omega: Option<ParamId>,
    channels: usize,
    h: usize,
    w: usize,
}

#[derive(Debug, Clone)]
struct CpmBranch {
    theta: ContourExtractor,
    theta_prime: ContourExtractor,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: CpUnetConfig,
    stem: (ParamId, ParamId),
    encoders: Vec<Encoder>,
    cpm: Option<CpmBranch>,
    decoders: Vec<DecoderStage>,
    head: (ParamId, ParamId),
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput {
    /// Sigmoid probabilities, [1,h,w].
    pub probs: Tid,
    /// Predictive bank (mu_A, sigma_A), present when CPM is enabled.
    pub bank_a: Option<(Tid, Tid)>,
    /// Target bank (mu_B, sigma_B), present only in training mode.
    pub bank_b: Option<(Tid, Tid)>,
    /// KL alignment scalar, present only in training mode with CPM on.
    pub kl: Option<Tid>,
    /// Per-decoder-stage contour vectors G, deepest first.
    pub per_stage_g: Vec<Tid>,
    /// True when the training mask had no contour (degenerate sample).
    pub degenerate_target: bool,
}

impl Network {
    pub fn new(cfg: CpUnetConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ch = cfg.enc_channels();
        let l = cfg.stages;
        let (h, w) = (cfg.input_h, cfg.input_w);

        // first layer stays a simple convolution into feature space
        let stem = (
            store.add_kaiming("stem.weight", vec![ch[0], 1, 3, 3], 9, &mut rng)?,
            store.add_const("stem.bias", vec![ch[0], 1, 1], 0.0)?,
        );

        let mut encoders = Vec::with_capacity(l);
        for i in 1..=l {
            let prefix = format!("enc.stage{i}");
            let (ci, co) = (ch[i - 1], ch[i]);
            if cfg.enable_mgcsd {
                encoders.push(Encoder::MgCsd(MgCsdStage::new(
                    &prefix,
                    MgCsdConfig {
                        in_channels: ci,
                        out_channels: co,
                        groups: cfg.groups,
                        shift_step: cfg.shift_step,
                        kernel_size: 3,
                        cyclic: cfg.cyclic_shift,
                    },
                    store,
                    &mut rng,
                )?));
            } else {
                encoders.push(Encoder::Plain {
                    conv1: (
                        store.add_kaiming(
                            &format!("{prefix}.conv1.weight"),
                            vec![co, ci, 3, 3],
                            ci * 9,
                            &mut rng,
                        )?,
                        store.add_const(&format!("{prefix}.conv1.bias"), vec![co, 1, 1], 0.0)?,
                    ),
                    conv2: (
                        store.add_kaiming(
                            &format!("{prefix}.conv2.weight"),
                            vec![co, co, 3, 3],
                            co * 9,
                            &mut rng,
                        )?,
                        store.add_const(&format!("{prefix}.conv2.bias"), vec![co, 1, 1], 0.0)?,
                    ),
                });
            }
        }

        let cpm = if cfg.enable_cpm {
            let deep = (h >> l, w >> l);
            let theta = ContourExtractor::new(
                "cpm.theta",
                ch[l],
                deep,
                cfg.extractor_hidden,
                cfg.k_components,
                cfg.feature_dim,
                store,
                &mut rng,
            )?;
            let theta_prime = ContourExtractor::new(
                "cpm.theta_prime",
                1,
                (h, w),
                cfg.extractor_hidden,
                cfg.k_components,
                cfg.feature_dim,
                store,
                &mut rng,
            )?;
            Some(CpmBranch { theta, theta_prime })
        } else {
            None
        };

        let mut decoders = Vec::with_capacity(l);
        for s in (0..l).rev() {
            let (hs, ws) = (h >> s, w >> s);
            let up = (
                store.add_kaiming(
                    &format!("dec.stage{s}.up.weight"),
                    vec![ch[s], ch[s + 1], 3, 3],
                    ch[s + 1] * 9,
                    &mut rng,
                )?,
                store.add_const(&format!("dec.stage{s}.up.bias"), vec![ch[s], 1, 1], 0.0)?,
            );
            let omega = if cfg.enable_cpm {
                Some(store.add_const(
                    &format!("cpm.omega.stage{s}"),
                    vec![ch[s], cfg.k_components],
                    1.0 / cfg.k_components as f64,
                )?)
            } else {
                None
            };
            let gf = if cfg.enable_gf {
                Some(GfLayer::new(
                    &format!("gf.stage{s}"),
                    ch[s],
                    hs,
                    ws,
                    store,
                    &mut rng,
                )?)
            } else {
                None
            };
            decoders.push(DecoderStage {
                up,
                gf,
                omega,
                channels: ch[s],
                h: hs,
                w: ws,
            });
        }

        let head = (
            store.add_kaiming("head.weight", vec![1, ch[0], 1, 1], ch[0], &mut rng)?,
            store.add_const("head.bias", vec![1, 1, 1], 0.0)?,
        );

        Ok(Self {
            cfg,
            stem,
            encoders,
            cpm,
            decoders,
            head,
        })
    }

    fn conv_block(
        tape: &mut Tape,
        store: &ParamStore,
        x: Tid,
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        padding: usize,
    ) -> Result<Tid> {
        let wk = tape.param(store, weight);
        let bk = tape.param(store, bias);
        let conv = tape.conv2d(x, wk, stride, padding)?;
        tape.broadcast_add(conv, bk)
    }

    /// Full forward pass. `target` (image, mask) switches on the training
    /// branch: the boundary-band target is extracted by theta prime and
    /// KL-aligned against the predictive bank. Inference mode never
    /// touches theta prime.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &[f64],
        target: Option<(&[f64], &[f64])>,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (h, w) = (cfg.input_h, cfg.input_w);
        if image.len() != h * w {
            return Err(CpError::Config(format!(
                "forward: image has {} pixels, config expects {h}x{w}",
                image.len()
            )));
        }

        let x = tape.leaf(vec![1, h, w], image.to_vec())?;
        let stem = Self::conv_block(tape, store, x, self.stem.0, self.stem.1, 1, 1)?;
        let stem = tape.gelu(stem);

        let mut skips = vec![stem];
        let mut cur = stem;
        for enc in &self.encoders {
            cur = match enc {
                Encoder::MgCsd(stage) => stage.forward(tape, store, cur)?,
                Encoder::Plain { conv1, conv2 } => {
                    let a = Self::conv_block(tape, store, cur, conv1.0, conv1.1, 1, 1)?;
                    let a = tape.relu(a);
                    let b = Self::conv_block(tape, store, a, conv2.0, conv2.1, 2, 1)?;
                    tape.relu(b)
                }
            };
            skips.push(cur);
        }

        let bank_a = match &self.cpm {
            Some(branch) => Some(branch.theta.forward(tape, store, cur)?),
            None => None,
        };

        let (k, d) = (cfg.k_components, cfg.feature_dim);
        let mut z = match bank_a {
            Some(_) => Some(tape.leaf(vec![k, d], draw_z(k, d, cfg.shared_z, rng))?),
            None => None,
        };

        let mut per_stage_g = Vec::new();
        let mut cur = *skips.last().unwrap();
        for (j, dec) in self.decoders.iter().enumerate() {
            let upsampled = tape.upsample2x(cur)?;
            let up = Self::conv_block(tape, store, upsampled, dec.up.0, dec.up.1, 1, 1)?;
            let up = tape.gelu(up);
            let skip = skips[cfg.stages - 1 - j];

            let contour = match (bank_a, dec.omega) {
                (Some((mu, sigma)), Some(omega_id)) => {
                    if cfg.per_stage_redraw {
                        z = Some(tape.leaf(vec![k, d], draw_z(k, d, cfg.shared_z, rng))?);
                    }
                    let omega = tape.param(store, omega_id);
                    let g = crate::cpm::reparam_sample(tape, mu, sigma, omega, z.unwrap())?;
                    per_stage_g.push(g);
                    let g_chan = tape.reshape(g, vec![dec.channels, 1, 1])?;
                    let zero_map = tape.zeros(vec![dec.channels, dec.h, dec.w]);
                    tape.broadcast_add(zero_map, g_chan)?
                }
                _ => tape.zeros(vec![dec.channels, dec.h, dec.w]),
            };

            let fused = fuse_inputs(tape, up, skip, contour)?;
            cur = match &dec.gf {
                Some(layer) => layer.gate(tape, store, fused)?,
                None => fused,
            };
        }

        let logits = Self::conv_block(tape, store, cur, self.head.0, self.head.1, 1, 0)?;
        let probs = tape.sigmoid(logits);

        let mut bank_b = None;
        let mut kl = None;
        let mut degenerate_target = false;
        if let (Some((target_image, mask)), Some(branch), Some((mu_a, sigma_a))) =
            (target, &self.cpm, bank_a)
        {
            let (y, warn) = mask_process(target_image, mask, h, w, cfg.band)?;
            degenerate_target = warn;
            let y_map = tape.leaf(vec![1, h, w], y)?;
            let (mu_b, sigma_b) = branch.theta_prime.forward(tape, store, y_map)?;
            bank_b = Some((mu_b, sigma_b));
            kl = Some(tape.kl_align(mu_a, sigma_a, mu_b, sigma_b, cfg.kl_grad_target)?);
        }

        Ok(ForwardOutput {
            probs,
            bank_a,
            bank_b,
            kl,
            per_stage_g,
            degenerate_target,
        })
    }
}
