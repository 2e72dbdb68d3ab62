//! Contour probabilistic modeling.
//!
//! A small convolutional extractor maps features to K diagonal Gaussians
//! (mu, sigma) over a d-dimensional feature space. Contour vectors are
//! drawn with the reparameterization trick and mixed by per-stage
//! learnable weights Omega; the predictive bank is pulled toward a bank
//! extracted from the boundary band of the mask by a closed-form KL term.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CpError, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tid};

pub const SIGMA_FLOOR: f64 = 1e-6;

/// K diagonal Gaussian components over a d-dimensional feature space,
/// as plain values (the on-tape counterpart is a pair of [K,d] tensors).
#[derive(Debug, Clone)]
pub struct GaussianBank {
    pub k: usize,
    pub d: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianBank {
    pub fn new(k: usize, d: usize, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 || mu.len() != k * d || sigma.len() != k * d {
            return Err(CpError::Dim(format!(
                "gaussian bank: K={k} d={d} with {} mu and {} sigma entries",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(CpError::Numeric("gaussian bank: non-positive sigma".into()));
        }
        Ok(Self { k, d, mu, sigma })
    }
}

/// Closed-form KL between coordinate pairs of two banks, averaged:
/// mean over K*d of log(sB/sA) + (sA^2 + (mA-mB)^2) / (2 sB^2) - 1/2.
pub fn kl_align(a: &GaussianBank, b: &GaussianBank) -> Result<f64> {
    if a.k != b.k || a.d != b.d {
        return Err(CpError::Dim(format!(
            "kl_align: banks K={}/d={} vs K={}/d={}",
            a.k, a.d, b.k, b.d
        )));
    }
    let n = a.mu.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ma, sa, mb, sb) = (a.mu[i], a.sigma[i], b.mu[i], b.sigma[i]);
        if sa <= 0.0 || sb <= 0.0 {
            return Err(CpError::Numeric("kl_align: non-positive sigma".into()));
        }
        let d = ma - mb;
        acc += (sb / sa).ln() + (sa * sa + d * d) / (2.0 * sb * sb) - 0.5;
    }
    Ok(acc / n as f64)
}

/// Convolutional feature extractor producing a Gaussian bank.
///
/// Stride-2 conv + GELU blocks (up to four, as many as the input's spatial
/// extent allows), then GAP and two linear heads for the K*d means and
/// pre-softplus sigmas. The predictive branch (theta) and the target branch
/// (theta prime) instantiate this same structure with separate parameters.
#[derive(Debug, Clone)]
pub struct ContourExtractor {
    pub in_channels: usize,
    pub in_size: (usize, usize),
    pub hidden: usize,
    pub k: usize,
    pub d: usize,
    blocks: Vec<(ParamId, ParamId)>,
    mu_head: (ParamId, ParamId),
    sigma_head: (ParamId, ParamId),
}

pub const EXTRACTOR_MAX_BLOCKS: usize = 4;

impl ContourExtractor {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        in_size: (usize, usize),
        hidden: usize,
        k: usize,
        d: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (h, w) = in_size;
        if h.min(w) < 2 {
            return Err(CpError::Config(format!(
                "contour extractor: input {h}x{w} below the 2x2 minimum"
            )));
        }
        let mut blocks = Vec::new();
        let mut ch = in_channels;
        let (mut hh, mut ww) = (h, w);
        while blocks.len() < EXTRACTOR_MAX_BLOCKS && hh.min(ww) >= 2 {
            let i = blocks.len();
            let weight = store.add_kaiming(
                &format!("{prefix}.block{i}.weight"),
                vec![hidden, ch, 3, 3],
                ch * 9,
                rng,
            )?;
            let bias = store.add_const(&format!("{prefix}.block{i}.bias"), vec![hidden, 1, 1], 0.0)?;
            blocks.push((weight, bias));
            ch = hidden;
            hh = (hh + 2 - 3) / 2 + 1;
            ww = (ww + 2 - 3) / 2 + 1;
        }
        let mu_head = (
            store.add_kaiming(&format!("{prefix}.mu_head.weight"), vec![hidden, k * d], hidden, rng)?,
            store.add_const(&format!("{prefix}.mu_head.bias"), vec![1, k * d], 0.0)?,
        );
        let sigma_head = (
            store.add_kaiming(
                &format!("{prefix}.sigma_head.weight"),
                vec![hidden, k * d],
                hidden,
                rng,
            )?,
            store.add_const(&format!("{prefix}.sigma_head.bias"), vec![1, k * d], 0.0)?,
        );
        Ok(Self {
            in_channels,
            in_size,
            hidden,
            k,
            d,
            blocks,
            mu_head,
            sigma_head,
        })
    }

    /// Maps a [c,h,w] feature map to a bank: (mu [K,d], sigma [K,d]) with
    /// sigma = softplus(pre) + 1e-6.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tid) -> Result<(Tid, Tid)> {
        let shape = tape.shape(x).to_vec();
        if shape != [self.in_channels, self.in_size.0, self.in_size.1] {
            return Err(CpError::Dim(format!(
                "contour extractor: expected {:?}, got {shape:?}",
                [self.in_channels, self.in_size.0, self.in_size.1]
            )));
        }
        let mut cur = x;
        for &(weight, bias) in &self.blocks {
            let wk = tape.param(store, weight);
            let bk = tape.param(store, bias);
            let conv = tape.conv2d(cur, wk, 2, 1)?;
            let biased = tape.broadcast_add(conv, bk)?;
            cur = tape.gelu(biased);
        }
        let pooled = tape.gap(cur)?;
        let flat = tape.reshape(pooled, vec![1, self.hidden])?;

        let mu_w = tape.param(store, self.mu_head.0);
        let mu_b = tape.param(store, self.mu_head.1);
        let mu_lin = tape.matmul(flat, mu_w)?;
        let mu_row = tape.add(mu_lin, mu_b)?;
        let mu = tape.reshape(mu_row, vec![self.k, self.d])?;

        let sg_w = tape.param(store, self.sigma_head.0);
        let sg_b = tape.param(store, self.sigma_head.1);
        let sg_lin = tape.matmul(flat, sg_w)?;
        let sg_row = tape.add(sg_lin, sg_b)?;
        let sg_pre = tape.reshape(sg_row, vec![self.k, self.d])?;
        let sp = tape.softplus(sg_pre);
        let sigma = tape.add_const(sp, SIGMA_FLOOR);
        Ok((mu, sigma))
    }
}

/// Draws the standard-normal noise for one reparameterized sample.
/// `shared` reuses a single d-vector across all K components.
pub fn draw_z(k: usize, d: usize, shared: bool, rng: &mut impl Rng) -> Vec<f64> {
    if shared {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..k * d).map(|i| z[i % d]).collect()
    } else {
        (0..k * d).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// G = Omega * s where s_k is the mean over d of z_k * sigma_k + mu_k.
/// Gradients flow to mu, sigma and Omega; z is a constant draw.
pub fn reparam_sample(
    tape: &mut Tape,
    mu: Tid,
    sigma: Tid,
    omega: Tid,
    z: Tid,
) -> Result<Tid> {
    let bank_shape = tape.shape(mu).to_vec();
    if bank_shape.len() != 2 || tape.shape(sigma) != bank_shape || tape.shape(z) != bank_shape {
        return Err(CpError::Dim("reparam_sample: mu/sigma/z shapes differ".into()));
    }
    let (k, d) = (bank_shape[0], bank_shape[1]);
    let om_shape = tape.shape(omega).to_vec();
    if om_shape.len() != 2 || om_shape[1] != k {
        return Err(CpError::Dim(format!(
            "reparam_sample: omega {om_shape:?} does not match K={k}"
        )));
    }
    let scaled = tape.mul(z, sigma)?;
    let samples = tape.add(scaled, mu)?;
    let lifted = tape.reshape(samples, vec![k, 1, d])?;
    let pooled = tape.gap(lifted)?;
    let s = tape.reshape(pooled, vec![k, 1])?;
    tape.matmul(omega, s)
}

/// Multiplies the image by a binary band of pixels within Chebyshev
/// distance `band` of the mask contour (mask pixels with a non-mask
/// 4-neighbor). Returns the band-masked image and a degeneracy flag set
/// when the mask has no contour at all.
pub fn mask_process(
    image: &[f64],
    mask: &[f64],
    h: usize,
    w: usize,
    band: usize,
) -> Result<(Vec<f64>, bool)> {
    if image.len() != h * w || mask.len() != h * w {
        return Err(CpError::Dim(format!(
            "mask_process: {}x{} grid vs {} image / {} mask pixels",
            h,
            w,
            image.len(),
            mask.len()
        )));
    }
    let at = |r: usize, c: usize| mask[r * w + c] != 0.0;
    let mut contour = vec![false; h * w];
    let mut any = false;
    for r in 0..h {
        for c in 0..w {
            if !at(r, c) {
                continue;
            }
            let exposed = (r > 0 && !at(r - 1, c))
                || (r + 1 < h && !at(r + 1, c))
                || (c > 0 && !at(r, c - 1))
                || (c + 1 < w && !at(r, c + 1));
            if exposed {
                contour[r * w + c] = true;
                any = true;
            }
        }
    }
    let mut in_band = vec![false; h * w];
    let b = band as isize;
    for r in 0..h {
        for c in 0..w {
            if !contour[r * w + c] {
                continue;
            }
            for dr in -b..=b {
                let rr = r as isize + dr;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dc in -b..=b {
                    let cc = c as isize + dc;
                    if cc >= 0 && cc < w as isize {
                        in_band[rr as usize * w + cc as usize] = true;
                    }
                }
            }
        }
    }
    let y = image
        .iter()
        .zip(&in_band)
        .map(|(&v, &inside)| if inside { v } else { 0.0 })
        .collect();
    Ok((y, !any))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_extractor_gives_softplus_zero_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ex = ContourExtractor::new("theta", 2, (8, 8), 8, 3, 4, &mut store, &mut rng).unwrap();
        for (_, p) in store.iter_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let x = t.zeros(vec![2, 8, 8]);
        let (mu, sigma) = ex.forward(&mut t, &store, x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for &m in t.value(mu) {
            assert_eq!(m, 0.0);
        }
        for &s in t.value(sigma) {
            assert!((s - (ln2 + SIGMA_FLOOR)).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_strictly_positive_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ex = ContourExtractor::new("theta", 1, (16, 16), 8, 4, 4, &mut store, &mut rng).unwrap();
        for _ in 0..10 {
            let mut t = Tape::new();
            let xv: Vec<f64> = (0..256).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let x = t.leaf(vec![1, 16, 16], xv).unwrap();
            let (_, sigma) = ex.forward(&mut t, &store, x).unwrap();
            assert!(t.value(sigma).iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn extractor_rejects_tiny_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        assert!(matches!(
            ContourExtractor::new("theta", 1, (1, 4), 8, 2, 2, &mut store, &mut rng),
            Err(CpError::Config(_))
        ));
    }

    #[test]
    fn extractor_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ex = ContourExtractor::new("theta", 2, (8, 8), 4, 2, 3, &mut store, &mut rng).unwrap();
        let xv: Vec<f64> = (0..2 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |s: &ParamStore, t: &mut Tape| -> Result<Tid> {
            let x = t.leaf(vec![2, 8, 8], xv.clone())?;
            let (mu, sigma) = ex.forward(t, s, x)?;
            let m2 = t.mul(mu, mu)?;
            let s2 = t.mul(sigma, sigma)?;
            let both = t.add(m2, s2)?;
            Ok(t.sum(both))
        };
        let mut t = Tape::new();
        let loss = run(&store, &mut t).unwrap();
        t.backward(loss).unwrap();
        t.write_param_grads(&mut store);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let err = gradient_check(
            &mut store,
            &ids,
            |s| {
                let mut t = Tape::new();
                let loss = run(s, &mut t)?;
                Ok(t.scalar(loss))
            },
            1e-5,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn reparam_degenerate_variance_is_deterministic() {
        let (k, d, t_ch) = (3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let omega: Vec<f64> = (0..t_ch * k).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut expect = vec![0.0; t_ch];
        for t_i in 0..t_ch {
            for ki in 0..k {
                let m: f64 = mu[ki * d..(ki + 1) * d].iter().sum::<f64>() / d as f64;
                expect[t_i] += omega[t_i * k + ki] * m;
            }
        }

        let mut t = Tape::new();
        let mu_t = t.leaf(vec![k, d], mu).unwrap();
        let sg_t = t.leaf(vec![k, d], vec![1e-6; k * d]).unwrap();
        let om_t = t.leaf(vec![t_ch, k], omega).unwrap();
        let zv = draw_z(k, d, false, &mut rng);
        let z = t.leaf(vec![k, d], zv).unwrap();
        let g = reparam_sample(&mut t, mu_t, sg_t, om_t, z).unwrap();
        for (got, want) in t.value(g).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn reparam_zero_omega_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let mu = t.leaf(vec![2, 3], vec![1.0; 6]).unwrap();
        let sg = t.leaf(vec![2, 3], vec![0.5; 6]).unwrap();
        let om = t.zeros(vec![4, 2]);
        let zv = draw_z(2, 3, false, &mut rng);
        let z = t.leaf(vec![2, 3], zv).unwrap();
        let g = reparam_sample(&mut t, mu, sg, om, z).unwrap();
        assert_eq!(t.value(g), &[0.0; 4]);
    }

    #[test]
    fn reparam_gradients_check_out() {
        let (k, d, t_ch) = (2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mu_id = store
            .add("mu", vec![k, d], (0..k * d).map(|i| i as f64 * 0.1).collect())
            .unwrap();
        let pre_id = store
            .add("sigma_pre", vec![k, d], (0..k * d).map(|i| 0.2 - i as f64 * 0.05).collect())
            .unwrap();
        let om_id = store.add_const("omega", vec![t_ch, k], 0.5).unwrap();
        let zv = draw_z(k, d, false, &mut rng);

        let run = |s: &ParamStore, t: &mut Tape| -> Result<Tid> {
            let mu = t.param(s, mu_id);
            let pre = t.param(s, pre_id);
            let sp = t.softplus(pre);
            let sigma = t.add_const(sp, SIGMA_FLOOR);
            let om = t.param(s, om_id);
            let z = t.leaf(vec![k, d], zv.clone())?;
            let g = reparam_sample(t, mu, sigma, om, z)?;
            Ok(t.mean(g))
        };
        let mut t = Tape::new();
        let loss = run(&store, &mut t).unwrap();
        t.backward(loss).unwrap();
        t.write_param_grads(&mut store);
        let err = gradient_check(
            &mut store,
            &[mu_id, pre_id, om_id],
            |s| {
                let mut t = Tape::new();
                let loss = run(s, &mut t)?;
                Ok(t.scalar(loss))
            },
            1e-5,
            16,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn kl_spot_values() {
        let a = GaussianBank::new(1, 1, vec![0.0], vec![1.0]).unwrap();
        let b = GaussianBank::new(1, 1, vec![1.0], vec![1.0]).unwrap();
        assert!((kl_align(&a, &b).unwrap() - 0.5).abs() < 1e-12);

        let a = GaussianBank::new(1, 1, vec![0.0], vec![2.0]).unwrap();
        let b = GaussianBank::new(1, 1, vec![0.0], vec![1.0]).unwrap();
        let expect = (0.5f64).ln() + 2.0 - 0.5;
        assert!((kl_align(&a, &b).unwrap() - expect).abs() < 1e-12);

        let same = GaussianBank::new(2, 2, vec![0.3; 4], vec![0.7; 4]).unwrap();
        assert_eq!(kl_align(&same, &same).unwrap(), 0.0);
    }

    #[test]
    fn kl_nonnegative_and_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let (k, d) = (2, 3);
            let mk = |rng: &mut ChaCha8Rng| {
                GaussianBank::new(
                    k,
                    d,
                    (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    (0..k * d).map(|_| rng.gen_range(0.1..3.0)).collect(),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert!(kl_align(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn mask_process_all_ones_mask_is_degenerate() {
        let (h, w) = (4, 4);
        let image = vec![0.5; h * w];
        let mask = vec![1.0; h * w];
        let (y, warn) = mask_process(&image, &mask, h, w, 1).unwrap();
        assert!(warn);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_process_single_pixel_keeps_3x3() {
        let (h, w) = (5, 5);
        let image = vec![1.0; h * w];
        let mut mask = vec![0.0; h * w];
        mask[2 * w + 2] = 1.0;
        let (y, warn) = mask_process(&image, &mask, h, w, 1).unwrap();
        assert!(!warn);
        for r in 0..h {
            for c in 0..w {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(y[r * w + c], if inside { 1.0 } else { 0.0 }, "({r},{c})");
            }
        }
    }

    #[test]
    fn mask_process_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (h, w) = (9, 7);
            let image: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mask: Vec<f64> = (0..h * w)
                .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
                .collect();
            let band = 2usize;
            let (y, _) = mask_process(&image, &mask, h, w, band).unwrap();

            // oracle: contour set, then Chebyshev distance per pixel
            let at = |r: usize, c: usize| mask[r * w + c] != 0.0;
            let mut contour = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if at(r, c)
                        && ((r > 0 && !at(r - 1, c))
                            || (r + 1 < h && !at(r + 1, c))
                            || (c > 0 && !at(r, c - 1))
                            || (c + 1 < w && !at(r, c + 1)))
                    {
                        contour.push((r as isize, c as isize));
                    }
                }
            }
            for r in 0..h {
                for c in 0..w {
                    let dist = contour
                        .iter()
                        .map(|&(cr, cc)| {
                            (cr - r as isize).abs().max((cc - c as isize).abs()) as usize
                        })
                        .min();
                    let inside = dist.map(|d| d <= band).unwrap_or(false);
                    let want = if inside { image[r * w + c] } else { 0.0 };
                    assert_eq!(y[r * w + c], want, "({r},{c})");
                }
            }
        }
    }
}
