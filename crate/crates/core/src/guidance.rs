//! Energy guiders, their latent gradient, noise rescaling and the final
//! noise combination of one guided sampling step.
//!
//! `rescale_factor` clamps the norm ratio into `[r_lower, r_upper]`.

use ndarray::{Array3, ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, Denoiser, DenoiserInternals};
use crate::error::{Error, Result};
use crate::latent::LatentState;

/// Star (reconstruction) and current internals of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuiderSnapshot {
    pub attn_star: Vec<ArrayD<f64>>,
    pub attn_cur: Vec<ArrayD<f64>>,
    pub feat_star: ArrayD<f64>,
    pub feat_cur: ArrayD<f64>,
}

impl GuiderSnapshot {
    pub fn new(star: DenoiserInternals, cur: DenoiserInternals) -> Result<Self> {
        check_lists(&star.self_attn, &cur.self_attn)?;
        check_pair(&star.features, &cur.features)?;
        Ok(Self {
            attn_star: star.self_attn,
            attn_cur: cur.self_attn,
            feat_star: star.features,
            feat_cur: cur.features,
        })
    }

    pub fn self_energy(&self) -> f64 {
        self.attn_star.iter().zip(&self.attn_cur).map(|(a, b)| mean_sq_diff(a, b)).sum()
    }

    pub fn feature_energy(&self) -> f64 {
        mean_sq_diff(&self.feat_star, &self.feat_cur)
    }

    /// Cotangent of `v_self * g_self + v_feat * g_feat` w.r.t. the current
    /// internals.
    pub fn cotangent(&self, v_self: f64, v_feat: f64) -> DenoiserInternals {
        let d = |star: &ArrayD<f64>, cur: &ArrayD<f64>, v: f64| {
            let k = 2.0 * v / cur.len().max(1) as f64;
            Zip::from(cur).and(star).map_collect(|c, s| k * (c - s))
        };
        DenoiserInternals {
            self_attn: self.attn_star.iter().zip(&self.attn_cur).map(|(s, c)| d(s, c, v_self)).collect(),
            features: d(&self.feat_star, &self.feat_cur, v_feat),
        }
    }
}

fn check_pair(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("guider inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_lists(a: &[ArrayD<f64>], b: &[ArrayD<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} star maps vs {} current maps", a.len(), b.len())));
    }
    a.iter().zip(b).try_for_each(|(x, y)| check_pair(x, y))
}

fn mean_sq_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x - y) * (x - y));
    sum / a.len() as f64
}

/// `sum_i mean |A*_i - A_i|^2`
pub fn self_attention_energy(attn_star: &[ArrayD<f64>], attn_cur: &[ArrayD<f64>]) -> Result<f64> {
    check_lists(attn_star, attn_cur)?;
    Ok(attn_star.iter().zip(attn_cur).map(|(a, b)| mean_sq_diff(a, b)).sum())
}

/// `mean |Phi* - Phi|^2`
pub fn feature_energy(feat_star: &ArrayD<f64>, feat_cur: &ArrayD<f64>) -> Result<f64> {
    check_pair(feat_star, feat_cur)?;
    Ok(mean_sq_diff(feat_star, feat_cur))
}

/// Gradient of the weighted guidance energy plus the energies it came from.
#[derive(Debug, Clone)]
pub struct GuidanceGradient {
    pub grad: Array3<f64>,
    pub g_self: f64,
    pub g_feat: f64,
}

/// `d/dz (v_self * g_self + v_feat * g_feat)` at `z`. Star internals come
/// from `z_star` and are held constant. Costs two noise predictions and one
/// backend VJP.
pub fn guidance_gradient(
    z: &LatentState,
    z_star: &LatentState,
    y_src: &str,
    backend: &dyn Denoiser,
    timestep: usize,
    v_self: f64,
    v_feat: f64,
) -> Result<GuidanceGradient> {
    if z.t != z_star.t {
        return Err(Error::Invalid(format!("latents not time-aligned: t = {} vs t* = {}", z.t, z_star.t)));
    }
    let cond = Conditioning::text(y_src);
    let internals = |z: &LatentState| -> Result<DenoiserInternals> {
        backend
            .predict_noise(z, timestep, &cond, true)?
            .internals
            .ok_or_else(|| Error::Backend(format!("backend {} does not record internals", backend.manifest().name)))
    };
    let star = internals(z_star)?;
    let cur = internals(z)?;
    let snap = GuiderSnapshot::new(star, cur)?;
    let grad = backend.internals_vjp(z, timestep, &cond, &snap.cotangent(v_self, v_feat))?;
    Ok(GuidanceGradient {
        grad,
        g_self: snap.self_energy(),
        g_feat: snap.feature_energy(),
    })
}

/// Noise rescaling of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescaleState {
    /// `|delta_cfg|^2 / |grad|^2`, infinite when the gradient vanishes.
    pub r_cur: f64,
    pub gamma: f64,
    /// False when the gradient is identically zero.
    pub active: bool,
}

pub fn rescale_factor(r_cur: f64, r_lower: f64, r_upper: f64) -> f64 {
    if r_cur.is_nan() {
        return r_upper;
    }
    r_cur.clamp(r_lower, r_upper)
}

pub fn noise_rescale(delta_cfg: &Array3<f64>, grad: &Array3<f64>, r_lower: f64, r_upper: f64) -> RescaleState {
    let gn: f64 = grad.iter().map(|v| v * v).sum();
    if gn == 0.0 {
        return RescaleState {
            r_cur: f64::INFINITY,
            gamma: r_upper,
            active: false,
        };
    }
    let dn: f64 = delta_cfg.iter().map(|v| v * v).sum();
    let r_cur = dn / gn;
    RescaleState {
        r_cur,
        gamma: rescale_factor(r_cur, r_lower, r_upper),
        active: true,
    }
}

/// `eps_u + w (eps_c - eps_u)`
pub fn cfg(eps_cond: &Array3<f64>, eps_uncond: &Array3<f64>, w: f64) -> Result<Array3<f64>> {
    if eps_cond.dim() != eps_uncond.dim() {
        return Err(Error::Shape("conditional and unconditional predictions differ in shape".into()));
    }
    Ok(Zip::from(eps_cond).and(eps_uncond).map_collect(|c, u| u + w * (c - u)))
}

/// CFG plus `gamma * grad` while `steps_elapsed < tau_g`; `steps_elapsed`
/// is `T - t`.
pub fn combine_noise(
    eps_cond: &Array3<f64>,
    eps_uncond: &Array3<f64>,
    grad: &Array3<f64>,
    w: f64,
    gamma: f64,
    steps_elapsed: usize,
    tau_g: usize,
) -> Result<Array3<f64>> {
    if grad.dim() != eps_cond.dim() {
        return Err(Error::Shape("guidance gradient differs from prediction shape".into()));
    }
    let mut eps = cfg(eps_cond, eps_uncond, w)?;
    if steps_elapsed < tau_g {
        eps.scaled_add(gamma, grad);
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ToyBackend;
    use ndarray::{arr1, Array2, IxDyn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dyn1(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn self_energy_examples() {
        assert_eq!(self_attention_energy(&[dyn1(&[1.0])], &[dyn1(&[3.0])]).unwrap(), 4.0);
        let a = vec![dyn1(&[0.0, 0.0]), dyn1(&[1.0, 1.0])];
        let b = vec![dyn1(&[1.0, 1.0]), dyn1(&[2.0, 0.0])];
        // both layers have mean squared difference 1
        assert_eq!(self_attention_energy(&a, &b).unwrap(), 2.0);
        assert_eq!(self_attention_energy(&a, &a).unwrap(), 0.0);
        assert!(self_attention_energy(&a, &b[..1]).is_err());
    }

    #[test]
    fn feature_energy_examples() {
        assert_eq!(feature_energy(&dyn1(&[0.0, 0.0]), &dyn1(&[2.0, 0.0])).unwrap(), 2.0);
        let p = dyn1(&[0.3, -1.2, 4.0]);
        assert_eq!(feature_energy(&p, &p).unwrap(), 0.0);
        let q = dyn1(&[1.0, 0.5, -2.0]);
        let base = feature_energy(&p, &q).unwrap();
        let scaled = feature_energy(&(&p * 3.0), &(&q * 3.0)).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12);
        assert!(feature_energy(&p, &dyn1(&[1.0])).is_err());
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_factor(1.0, 0.33, 3.0), 1.0);
        assert_eq!(rescale_factor(10.0, 0.33, 3.0), 3.0);
        assert_eq!(rescale_factor(0.1, 0.33, 3.0), 0.33);
        let zero = Array3::zeros((1, 1, 2));
        let s = noise_rescale(&Array3::ones((1, 1, 2)), &zero, 0.33, 3.0);
        assert!(!s.active);
        assert_eq!(s.gamma, 3.0);
        let s = noise_rescale(&Array3::from_elem((1, 1, 2), 2.0), &Array3::ones((1, 1, 2)), 0.33, 3.0);
        assert_eq!((s.r_cur, s.gamma), (4.0, 3.0));
    }

    fn rand3(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cfg_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = rand3(&mut rng, (4, 3, 3));
        let u = rand3(&mut rng, (4, 3, 3));
        let g = rand3(&mut rng, (4, 3, 3));
        let close = |a: &Array3<f64>, b: &Array3<f64>| (a - b).iter().all(|v| v.abs() < 1e-12);
        assert!(close(&combine_noise(&c, &u, &g, 1.0, 1.0, 5, 5).unwrap(), &c));
        assert_eq!(combine_noise(&c, &u, &g, 0.0, 1.0, 5, 5).unwrap(), u);
        assert_eq!(combine_noise(&c, &c, &g, 7.5, 1.0, 9, 5).unwrap(), c);
        let open = combine_noise(&c, &c, &g, 7.5, 2.0, 4, 5).unwrap();
        assert!(close(&open, &(&c + &(&g * 2.0))));
        // outside the window the gradient is ignored
        let other = rand3(&mut rng, (4, 3, 3));
        assert_eq!(
            combine_noise(&c, &u, &g, 7.5, 2.0, 5, 5).unwrap(),
            combine_noise(&c, &u, &other, 7.5, 2.0, 5, 5).unwrap()
        );
    }

    fn energy_at(b: &ToyBackend, z: &LatentState, star: &DenoiserInternals, v_self: f64, v_feat: f64) -> f64 {
        let cur = b.predict_noise(z, 501, &Conditioning::text("a chair"), true).unwrap().internals.unwrap();
        let snap = GuiderSnapshot::new(star.clone(), cur).unwrap();
        v_self * snap.self_energy() + v_feat * snap.feature_energy()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let b = ToyBackend::new(21, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (v_self, v_feat) = (700_000.0, 1500.0);
        let h = 1e-3;
        for _ in 0..12 {
            let z = LatentState::new(rand3(&mut rng, (4, 4, 4)), 20);
            let z_star = LatentState::new(rand3(&mut rng, (4, 4, 4)), 20);
            let star = b.predict_noise(&z_star, 501, &Conditioning::text("a chair"), true).unwrap().internals.unwrap();
            let g = guidance_gradient(&z, &z_star, "a chair", &b, 501, v_self, v_feat).unwrap().grad;
            let mut fd = Array3::zeros(z.data.dim());
            for idx in ndarray::indices(z.data.dim()) {
                let mut zp = z.clone();
                zp.data[idx] += h;
                let mut zm = z.clone();
                zm.data[idx] -= h;
                fd[idx] = (energy_at(&b, &zp, &star, v_self, v_feat) - energy_at(&b, &zm, &star, v_self, v_feat)) / (2.0 * h);
            }
            let num = (&g - &fd).mapv(|v| v * v).sum().sqrt();
            let den = fd.mapv(|v| v * v).sum().sqrt();
            assert!(den > 0.0);
            assert!(num / den < 1e-3, "rel err {}", num / den);
        }
    }

    #[test]
    fn gradient_vanishes_at_star_and_without_scales() {
        let b = ToyBackend::new(2, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = LatentState::new(rand3(&mut rng, (4, 4, 4)), 3);
        let at_star = guidance_gradient(&z, &z, "a lamp", &b, 41, 700_000.0, 1500.0).unwrap();
        assert!(at_star.grad.iter().all(|v| v.abs() < 1e-8));
        assert_eq!((at_star.g_self, at_star.g_feat), (0.0, 0.0));
        let other = LatentState::new(rand3(&mut rng, (4, 4, 4)), 3);
        let off = guidance_gradient(&z, &other, "a lamp", &b, 41, 0.0, 0.0).unwrap();
        assert!(off.grad.iter().all(|v| *v == 0.0));
        assert!(off.g_self > 0.0 && off.g_feat > 0.0);
        assert!(guidance_gradient(&z, &LatentState::new(other.data, 4), "a lamp", &b, 41, 1.0, 1.0).is_err());
    }

    #[test]
    fn backend_without_internals_is_an_error() {
        struct NoInternals(ToyBackend);
        impl Denoiser for NoInternals {
            fn manifest(&self) -> &crate::denoiser::BackendManifest {
                self.0.manifest()
            }
            fn encode(&self, x: &crate::image::ImageRGB) -> Result<LatentState> {
                self.0.encode(x)
            }
            fn decode(&self, z: &LatentState) -> Result<crate::image::ImageRGB> {
                self.0.decode(z)
            }
            fn embed_material(&self, x: &crate::image::ImageRGB) -> Result<crate::denoiser::MaterialEmbedding> {
                self.0.embed_material(x)
            }
            fn predict_noise(&self, z: &LatentState, t: usize, c: &Conditioning, _: bool) -> Result<crate::denoiser::NoisePrediction> {
                self.0.predict_noise(z, t, c, false)
            }
            fn internals_vjp(&self, z: &LatentState, t: usize, c: &Conditioning, cot: &DenoiserInternals) -> Result<Array3<f64>> {
                self.0.internals_vjp(z, t, c, cot)
            }
        }
        let b = NoInternals(ToyBackend::new(2, 16, 16).unwrap());
        let z = LatentState::new(Array3::zeros((4, 2, 2)), 1);
        let err = guidance_gradient(&z, &z, "x", &b, 1, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Backend(_)));
    }

    proptest! {
        #[test]
        fn energies_are_symmetric_nonnegative_and_vanish_only_on_equality(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let x = Array2::from_shape_vec((2, 3), a.clone()).unwrap().into_dyn();
            let y = Array2::from_shape_vec((2, 3), b.clone()).unwrap().into_dyn();
            let e = feature_energy(&x, &y).unwrap();
            prop_assert!(e >= 0.0);
            prop_assert_eq!(e, feature_energy(&y, &x).unwrap());
            prop_assert_eq!(e == 0.0, a == b);
            let s = self_attention_energy(&[x.clone(), y.clone()], &[y.clone(), x.clone()]).unwrap();
            prop_assert_eq!(s, 2.0 * e);
        }

        #[test]
        fn gamma_stays_within_bounds(r in prop_oneof![0.0f64..1e6, Just(f64::INFINITY), Just(f64::NAN)]) {
            let g = rescale_factor(r, 0.33, 3.0);
            prop_assert!((0.33..=3.0).contains(&g));
        }

        #[test]
        fn gamma_from_arrays_within_bounds(
            d in prop::collection::vec(-1e3f64..1e3, 4),
            g in prop::collection::vec(-1e3f64..1e3, 4),
        ) {
            let d = Array3::from_shape_vec((1, 2, 2), d).unwrap();
            let g = Array3::from_shape_vec((1, 2, 2), g).unwrap();
            let s = noise_rescale(&d, &g, 0.33, 3.0);
            prop_assert!(s.gamma >= 0.33 && s.gamma <= 3.0);
        }
    }

    #[test]
    fn snapshot_rejects_mismatched_shapes() {
        let a = DenoiserInternals {
            self_attn: vec![ArrayD::zeros(IxDyn(&[2, 2]))],
            features: ArrayD::zeros(IxDyn(&[3])),
        };
        let mut b = a.clone();
        b.features = ArrayD::zeros(IxDyn(&[4]));
        assert!(GuiderSnapshot::new(a, b).is_err());
    }
}
