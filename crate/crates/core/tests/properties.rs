use fkp_core::degrade::{blur_downsample, blur_downsample_grad, Image};
use fkp_core::flow::{FlowConfig, FlowModel};
use fkp_core::kernel::{render_kernel, sample_params, Kernel};
use fkp_core::rng::stream;
use proptest::prelude::*;

fn image(h: usize, w: usize, seed: u64) -> Image {
    use rand::Rng;
    let mut r = stream(seed, "prop/image");
    Image::new(h, w, 1, (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn degradation_is_linear_in_the_image(h in 7usize..20, w in 7usize..20, s in 1usize..4, seed in any::<u64>(), a in -2.0f64..2.0) {
        let k = render_kernel(&sample_params(2, &mut stream(seed, "prop/k")).unwrap(), 7).unwrap();
        let (x1, x2) = (image(h, w, seed), image(h, w, seed ^ 1));
        let mix = Image::new(h, w, 1, x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let y = blur_downsample(&mix, k.weights(), 7, s).unwrap();
        let y1 = blur_downsample(&x1, k.weights(), 7, s).unwrap();
        let y2 = blur_downsample(&x2, k.weights(), 7, s).unwrap();
        for ((v, p), q) in y.data().iter().zip(y1.data()).zip(y2.data()) {
            prop_assert!((v - (a * p + q)).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity(h in 7usize..18, w in 7usize..18, s in 1usize..4, seed in any::<u64>()) {
        // ⟨A x, u⟩ = ⟨x, Aᵀ u⟩ for the image, and the kernel analogue.
        let k = Kernel::new(5, image(5, 5, seed ^ 7).into_data()).unwrap();
        let x = image(h, w, seed);
        let y = blur_downsample(&x, k.weights(), 5, s).unwrap();
        let u = image(y.height(), y.width(), seed ^ 3);
        let (gx, gk) = blur_downsample_grad(&x, k.weights(), 5, s, &u, true).unwrap();
        let lhs = dot(y.data(), u.data());
        prop_assert!((lhs - dot(x.data(), gx.unwrap().data())).abs() < 1e-9 * lhs.abs().max(1.0));
        prop_assert!((lhs - dot(k.weights(), &gk)).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn fresh_flow_is_bijective(seed in any::<u64>()) {
        let mut model = FlowModel::new(&FlowConfig::for_scale(2, seed)).unwrap();
        model.freeze();
        let k = render_kernel(&sample_params(2, &mut stream(seed, "prop/k")).unwrap(), 11).unwrap();
        let (z, _) = model.flow_forward(&k).unwrap();
        let back = model.flow_inverse(&z).unwrap();
        for (a, b) in back.weights().iter().zip(k.weights()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
