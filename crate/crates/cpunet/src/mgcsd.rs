//! Multi-group channel shifted downsampling.
//!
//! Replaces a plain strided convolution in the encoder. Channels are split
//! into groups and spatially shifted to link edge regions with central
//! features; a stride-1 "supply" convolution restores detail lost to the
//! shift; the GAP-weighted sum forms the global branch F_L, a stride-2
//! convolution forms the local branch F_R, and a sigmoid mixer map fuses
//! the two: F = O_mixer * F_L + O_mixer * F_R.

use rand::Rng;

use crate::error::{CpError, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tid};

#[derive(Debug, Clone)]
pub struct MgCsdConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub shift_step: usize,
    pub kernel_size: usize,
    /// Wrap-around shift instead of zero-filled translation.
    pub cyclic: bool,
}

impl MgCsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_channels % self.groups != 0 {
            return Err(CpError::Config(format!(
                "mgcsd: {} channels not divisible into {} groups",
                self.in_channels, self.groups
            )));
        }
        if self.shift_step == 0 {
            return Err(CpError::Config("mgcsd: shift_step must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(CpError::Config("mgcsd: kernel_size must be odd".into()));
        }
        Ok(())
    }
}

/// One downsampling stage; halves the spatial resolution.
#[derive(Debug, Clone)]
pub struct MgCsdStage {
    pub config: MgCsdConfig,
    pub supply_kernel: ParamId,
    pub left_down_kernel: ParamId,
    pub right_kernel: ParamId,
    pub mixer_kernel: ParamId,
}

impl MgCsdStage {
    pub fn new(
        prefix: &str,
        config: MgCsdConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (ci, co, k) = (config.in_channels, config.out_channels, config.kernel_size);
        let supply_kernel = store.add_kaiming(
            &format!("{prefix}.supply.weight"),
            vec![ci, ci, k, k],
            ci * k * k,
            rng,
        )?;
        let left_down_kernel = store.add_kaiming(
            &format!("{prefix}.left_down.weight"),
            vec![co, ci, k, k],
            ci * k * k,
            rng,
        )?;
        let right_kernel = store.add_kaiming(
            &format!("{prefix}.right.weight"),
            vec![co, ci, k, k],
            ci * k * k,
            rng,
        )?;
        let mixer_kernel =
            store.add_kaiming(&format!("{prefix}.mixer.weight"), vec![1, co, 1, 1], co, rng)?;
        Ok(Self {
            config,
            supply_kernel,
            left_down_kernel,
            right_kernel,
            mixer_kernel,
        })
    }

    /// F_shift: group 0 fixed, group i translated by i*shift_step with
    /// zero fill (or wrapped when configured cyclic).
    pub fn group_shift(&self, tape: &mut Tape, x: Tid) -> Result<Tid> {
        tape.group_shift(x, self.config.groups, self.config.shift_step, self.config.cyclic)
    }

    /// Global branch: F_L = downsample(GAP(F_shift + F_supply) * (F_shift + F_supply)).
    pub fn left_branch(&self, tape: &mut Tape, store: &ParamStore, x: Tid) -> Result<Tid> {
        let pad = self.config.kernel_size / 2;
        let f_shift = self.group_shift(tape, x)?;
        let supply_k = tape.param(store, self.supply_kernel);
        let f_supply = tape.conv2d(x, supply_k, 1, pad)?;
        let s = tape.add(f_shift, f_supply)?;
        let weights = tape.gap(s)?;
        let f_l_full = tape.broadcast_mul(s, weights)?;
        let down_k = tape.param(store, self.left_down_kernel);
        tape.conv2d(f_l_full, down_k, 2, pad)
    }

    /// Local branch: plain stride-2 convolution of the input.
    pub fn right_branch(&self, tape: &mut Tape, store: &ParamStore, x: Tid) -> Result<Tid> {
        let pad = self.config.kernel_size / 2;
        let right_k = tape.param(store, self.right_kernel);
        tape.conv2d(x, right_k, 2, pad)
    }

    /// F = O_mixer * F_L + O_mixer * F_R with
    /// O_mixer = sigmoid(1x1 conv(F_L + F_R)) broadcast over channels.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, f_l: Tid, f_r: Tid) -> Result<Tid> {
        if tape.shape(f_l) != tape.shape(f_r) {
            return Err(CpError::Dim(format!(
                "mgcsd fuse: F_L {:?} vs F_R {:?}",
                tape.shape(f_l),
                tape.shape(f_r)
            )));
        }
        let s = tape.add(f_l, f_r)?;
        let mixer_k = tape.param(store, self.mixer_kernel);
        let pre = tape.conv2d(s, mixer_k, 1, 0)?;
        let mixer = tape.sigmoid(pre);
        let left = tape.broadcast_mul_spatial(f_l, mixer)?;
        let right = tape.broadcast_mul_spatial(f_r, mixer)?;
        tape.add(left, right)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Tid) -> Result<Tid> {
        let shape = tape.shape(x).to_vec();
        let (h, w) = (shape[1], shape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CpError::Dim(format!("mgcsd: spatial dims {h}x{w} must be even")));
        }
        let f_l = self.left_branch(tape, store, x)?;
        let f_r = self.right_branch(tape, store, x)?;
        self.fuse(tape, store, f_l, f_r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect()
    }

    fn stage(store: &mut ParamStore, ci: usize, co: usize, g: usize) -> MgCsdStage {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        MgCsdStage::new(
            "enc.stage1",
            MgCsdConfig {
                in_channels: ci,
                out_channels: co,
                groups: g,
                shift_step: 1,
                kernel_size: 3,
                cyclic: false,
            },
            store,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn forward_halves_resolution() {
        let mut store = ParamStore::new();
        let st = stage(&mut store, 8, 16, 4);
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t
            .leaf(vec![8, 32, 32], rand_vec(&mut rng, 8 * 32 * 32))
            .unwrap();
        let y = st.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.shape(y), &[16, 16, 16]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::new();
        let st = stage(&mut store, 4, 8, 2);
        let mut t = Tape::new();
        let x = t.zeros(vec![4, 8, 8]);
        let f_l = st.left_branch(&mut t, &store, x).unwrap();
        assert!(t.value(f_l).iter().all(|&v| v == 0.0));
        let y = st.forward(&mut t, &store, x).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn left_branch_matches_per_channel_mean_oracle() {
        let mut store = ParamStore::new();
        let st = stage(&mut store, 4, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_vec(&mut rng, 4 * 8 * 8);

        let mut t = Tape::new();
        let x = t.leaf(vec![4, 8, 8], xv).unwrap();
        // recompute S = shift + supply, then check the Eq. 1 weighting
        let f_shift = st.group_shift(&mut t, x).unwrap();
        let supply_k = t.param(&store, st.supply_kernel);
        let f_supply = t.conv2d(x, supply_k, 1, 1).unwrap();
        let s = t.add(f_shift, f_supply).unwrap();
        let weights = t.gap(s).unwrap();
        let full = t.broadcast_mul(s, weights).unwrap();

        let sv = t.value(s).to_vec();
        let fv = t.value(full).to_vec();
        for ch in 0..4 {
            let chan = &sv[ch * 64..(ch + 1) * 64];
            let mean: f64 = chan.iter().sum::<f64>() / 64.0;
            for p in 0..64 {
                let expect = mean * chan[p];
                assert!((fv[ch * 64 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_opposite_inputs_cancel() {
        let mut store = ParamStore::new();
        let st = stage(&mut store, 4, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fv = rand_vec(&mut rng, 8 * 4 * 4);
        let neg: Vec<f64> = fv.iter().map(|v| -v).collect();
        let mut t = Tape::new();
        let f_l = t.leaf(vec![8, 4, 4], fv).unwrap();
        let f_r = t.leaf(vec![8, 4, 4], neg).unwrap();
        let y = st.fuse(&mut t, &store, f_l, f_r).unwrap();
        assert!(t.value(y).iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn fuse_equals_mixer_times_sum() {
        let mut store = ParamStore::new();
        let st = stage(&mut store, 4, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = rand_vec(&mut rng, 8 * 4 * 4);
            let b = rand_vec(&mut rng, 8 * 4 * 4);
            let mut t = Tape::new();
            let f_l = t.leaf(vec![8, 4, 4], a).unwrap();
            let f_r = t.leaf(vec![8, 4, 4], b).unwrap();
            let fused = st.fuse(&mut t, &store, f_l, f_r).unwrap();

            let s = t.add(f_l, f_r).unwrap();
            let mixer_k = t.param(&store, st.mixer_kernel);
            let pre = t.conv2d(s, mixer_k, 1, 0).unwrap();
            let m = t.sigmoid(pre);
            let alt = t.broadcast_mul_spatial(s, m).unwrap();

            for (x, y) in t.value(fused).iter().zip(t.value(alt)) {
                let denom = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / denom < 1e-13);
            }
        }
    }

    #[test]
    fn open_mixer_gate_passes_sum_through() {
        let mut store = ParamStore::new();
        let _st = stage(&mut store, 4, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = rand_vec(&mut rng, 8 * 4 * 4);
        let b = rand_vec(&mut rng, 8 * 4 * 4);
        // direct substitution of an all-ones gate
        let mut t = Tape::new();
        let f_l = t.leaf(vec![8, 4, 4], a.clone()).unwrap();
        let f_r = t.leaf(vec![8, 4, 4], b.clone()).unwrap();
        let ones = t.leaf(vec![1, 4, 4], vec![1.0; 16]).unwrap();
        let left = t.broadcast_mul_spatial(f_l, ones).unwrap();
        let right = t.broadcast_mul_spatial(f_r, ones).unwrap();
        let fused = t.add(left, right).unwrap();
        for (i, v) in t.value(fused).iter().enumerate() {
            assert!((v - (a[i] + b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn full_stage_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let st = stage(&mut store, 4, 8, 2);
        let xv = rand_vec(&mut rng, 4 * 8 * 8);

        let run = |s: &ParamStore, t: &mut Tape| -> Result<Tid> {
            let x = t.leaf(vec![4, 8, 8], xv.clone())?;
            let y = st.forward(t, s, x)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean(sq))
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
        assert!(err < 1e-5, "max rel error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn group_shift_is_linear(
            xs in proptest::collection::vec(-10.0f64..10.0, 32),
            ys in proptest::collection::vec(-10.0f64..10.0, 32),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut t = Tape::new();
            let x = t.leaf(vec![2, 4, 4], xs.clone()).unwrap();
            let y = t.leaf(vec![2, 4, 4], ys.clone()).unwrap();
            let combo: Vec<f64> = xs.iter().zip(&ys).map(|(xi, yi)| a * xi + b * yi).collect();
            let c = t.leaf(vec![2, 4, 4], combo).unwrap();
            let sx = t.group_shift(x, 2, 1, false).unwrap();
            let sy = t.group_shift(y, 2, 1, false).unwrap();
            let sc = t.group_shift(c, 2, 1, false).unwrap();
            for i in 0..32 {
                let lhs = t.value(sc)[i];
                let rhs = a * t.value(sx)[i] + b * t.value(sy)[i];
                prop_assert!((lhs - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn group_shift_zero_count(xs in proptest::collection::vec(0.5f64..10.0, 4 * 6 * 6)) {
            // strictly positive inputs so zeros can only come from the fill
            let (g, step, h, w) = (4usize, 1usize, 6usize, 6usize);
            let mut t = Tape::new();
            let x = t.leaf(vec![4, h, w], xs).unwrap();
            let y = t.group_shift(x, g, step, false).unwrap();
            let v = t.value(y);
            for grp in 0..g {
                let s = grp * step;
                let zeros = v[grp * h * w..(grp + 1) * h * w]
                    .iter()
                    .filter(|&&e| e == 0.0)
                    .count();
                prop_assert_eq!(zeros, h * w - (h - s) * (w - s));
            }
        }
    }
}
