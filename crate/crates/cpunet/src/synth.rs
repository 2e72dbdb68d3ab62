//! Synthetic blurred-contour dataset: dark lesion-like blobs on a textured
//! background with Gaussian-blurred boundaries, multiplicative speckle and
//! optional bright streak artifacts, paired with crisp binary masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CpError, Result};

/// One training example: grayscale image in [0,1] and a {0,1} mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub h: usize,
    pub w: usize,
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    PerturbedEllipse,
    Crescent,
}

impl ShapeFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(Self::Ellipse),
            "perturbed-ellipse" => Ok(Self::PerturbedEllipse),
            "crescent" => Ok(Self::Crescent),
            other => Err(CpError::Config(format!("unknown shape family: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ellipse => "ellipse",
            Self::PerturbedEllipse => "perturbed-ellipse",
            Self::Crescent => "crescent",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub blur_sigma: (f64, f64),
    pub speckle_strength: f64,
    pub shape_family: ShapeFamily,
    pub overlap_artifacts: bool,
    /// Lesions keep at least this margin (plus one pixel) from the border,
    /// so the boundary band of a `band`-wide target always fits.
    pub margin: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 16,
            h: 64,
            w: 64,
            blur_sigma: (0.5, 1.5),
            speckle_strength: 0.08,
            shape_family: ShapeFamily::PerturbedEllipse,
            overlap_artifacts: false,
            margin: 3,
        }
    }
}

/// Declared mask-area fraction bounds for generated samples.
pub const AREA_FRACTION_BOUNDS: (f64, f64) = (0.01, 0.35);

const LESION_VALUE: f64 = 0.22;
const BACKGROUND_VALUE: f64 = 0.62;
const TEXTURE_AMPLITUDE: f64 = 0.05;
// radial perturbation harmonics stay below this, so the lesion never
// reaches past (1 + this) * max radius
const MAX_PERTURB: f64 = 0.18;

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut norm = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    kernel.iter_mut().for_each(|v| *v /= norm);

    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let cc = (c as isize + ki as isize - radius).clamp(0, w as isize - 1);
                acc += kv * img[r * w + cc as usize];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let rr = (r as isize + ki as isize - radius).clamp(0, h as isize - 1);
                acc += kv * tmp[rr as usize * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn lesion_mask(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let (h, w) = (spec.h, spec.w);
    let min_dim = h.min(w) as f64;
    let margin = (spec.margin + 1) as f64;

    for _attempt in 0..100 {
        let r1 = rng.gen_range(min_dim / 8.0..min_dim / 5.5);
        let r2 = rng.gen_range(min_dim / 8.0..min_dim / 5.5);
        let rot = rng.gen_range(0.0..std::f64::consts::PI);
        let rmax = r1.max(r2) * (1.0 + MAX_PERTURB);
        if margin + rmax + 1.0 >= w as f64 - margin - rmax - 1.0
            || margin + rmax + 1.0 >= h as f64 - margin - rmax - 1.0
        {
            return Err(CpError::Config(format!(
                "synth: image {h}x{w} too small for lesion radius {rmax:.1} with margin {margin}"
            )));
        }
        let cx = rng.gen_range(margin + rmax + 1.0..w as f64 - margin - rmax - 1.0);
        let cy = rng.gen_range(margin + rmax + 1.0..h as f64 - margin - rmax - 1.0);

        // radial modulation for irregular contours
        let harmonics: Vec<(f64, f64)> = (2..=4)
            .map(|j| {
                let amp = rng.gen_range(0.0..MAX_PERTURB / j as f64);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (amp, phase)
            })
            .collect();
        // crescent bite: a second ellipse carved out of the first
        let bite_dx = rng.gen_range(0.5..0.9) * r1;
        let bite_dy = rng.gen_range(-0.3..0.3) * r2;
        let bite_scale = rng.gen_range(0.6..0.85);

        let (sin_r, cos_r) = rot.sin_cos();
        let inside = |px: f64, py: f64| -> bool {
            let dx = px - cx;
            let dy = py - cy;
            let u = cos_r * dx + sin_r * dy;
            let v = -sin_r * dx + cos_r * dy;
            let rho = ((u / r1).powi(2) + (v / r2).powi(2)).sqrt();
            let limit = match spec.shape_family {
                ShapeFamily::Ellipse => 1.0,
                ShapeFamily::PerturbedEllipse | ShapeFamily::Crescent => {
                    let theta = v.atan2(u);
                    let mut f = 1.0;
                    for (j, &(amp, phase)) in harmonics.iter().enumerate() {
                        f += amp * ((j as f64 + 2.0) * theta + phase).cos();
                    }
                    f
                }
            };
            if rho > limit {
                return false;
            }
            if spec.shape_family == ShapeFamily::Crescent {
                let bu = u - bite_dx;
                let bv = v - bite_dy;
                let brho = ((bu / (r1 * bite_scale)).powi(2) + (bv / (r2 * bite_scale)).powi(2))
                    .sqrt();
                if brho <= 1.0 {
                    return false;
                }
            }
            true
        };

        let mask: Vec<f64> = (0..h * w)
            .map(|i| {
                let (py, px) = ((i / w) as f64, (i % w) as f64);
                if inside(px, py) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let area: f64 = mask.iter().sum();
        let frac = area / (h * w) as f64;
        if frac >= AREA_FRACTION_BOUNDS.0 && frac <= AREA_FRACTION_BOUNDS.1 {
            return Ok(mask);
        }
    }
    Err(CpError::Data(
        "synth: no feasible lesion geometry after 100 retries".into(),
    ))
}

fn render(spec: &SynthSpec, mask: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.h, spec.w);
    let mut img: Vec<f64> = mask
        .iter()
        .map(|&m| {
            let base = if m != 0.0 { LESION_VALUE } else { BACKGROUND_VALUE };
            base + TEXTURE_AMPLITUDE * rng.gen_range(-1.0..1.0)
        })
        .collect();

    let sigma = if spec.blur_sigma.1 > spec.blur_sigma.0 {
        rng.gen_range(spec.blur_sigma.0..spec.blur_sigma.1)
    } else {
        spec.blur_sigma.0
    };
    img = gaussian_blur(&img, h, w, sigma);

    if spec.speckle_strength > 0.0 {
        for v in &mut img {
            let n: f64 = rng.sample(StandardNormal);
            *v *= 1.0 + spec.speckle_strength * n;
        }
    }

    if spec.overlap_artifacts {
        for _ in 0..rng.gen_range(0..3u32) {
            // bright near-horizontal streak
            let row = rng.gen_range(0..h);
            let slope = rng.gen_range(-0.2..0.2);
            let boost = rng.gen_range(0.15..0.3);
            for c in 0..w {
                let r = row as f64 + slope * c as f64;
                for dr in -1..=1i64 {
                    let rr = r as i64 + dr;
                    if rr >= 0 && (rr as usize) < h {
                        img[rr as usize * w + c] += boost;
                    }
                }
            }
        }
    }

    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Generates `spec.count` samples, deterministically from the seed.
pub fn generate_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<Sample>> {
    if spec.count == 0 {
        return Err(CpError::Config("synth: count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let mask = lesion_mask(spec, &mut rng)?;
        let image = render(spec, &mask, &mut rng);
        out.push(Sample {
            h: spec.h,
            w: spec.w,
            image,
            mask,
        });
    }
    Ok(out)
}
