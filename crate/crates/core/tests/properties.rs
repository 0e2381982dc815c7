use proptest::prelude::*;

use mapfuse::encoder::pad_to_multiple;
use mapfuse::metrics::Metric;
use mapfuse::nn::ops;
use mapfuse::network::init_params;
use mapfuse::tensor::Tensor;
use mapfuse::train::Checkpoint;
use mapfuse::{ArchConfig, FusionNet, FusionRule, Image, TrainConfig};

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |d| Image::new(h, w, d).unwrap())
}

fn triple(side: usize) -> impl Strategy<Value = (Image, Image, Image)> {
    (image(side, side), image(side, side), image(side, side))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pooling_undoes_upsampling(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let n = c * h * w;
        let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
        let t = Tensor::from_vec(&[c, h, w], data).unwrap();
        let back = ops::avg_pool2(&ops::upsample2(&t).unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let data: Vec<f64> = (0..rows * cols).map(|i| scale * ((i * 31 % 17) as f64 - 8.0)).collect();
        let p = ops::softmax_rows(&Tensor::from_vec(&[rows, cols], data).unwrap()).unwrap();
        for row in p.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn symmetric_metrics_ignore_source_order((x, y, f) in triple(16)) {
        for m in [Metric::Ce, Metric::Mi, Metric::Scd, Metric::MsSsim, Metric::Vif, Metric::Qabf] {
            let (a, b) = (m.evaluate(&x, &y, &f).0, m.evaluate(&y, &x, &f).0);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} {} vs {}", m, a, b);
        }
    }

    #[test]
    fn metrics_are_finite_and_ranged((x, y, f) in triple(12)) {
        for m in Metric::ALL {
            let v = m.evaluate(&x, &y, &f).0;
            prop_assert!(v.is_finite(), "{} = {}", m, v);
        }
        let ms = Metric::MsSsim.evaluate(&x, &y, &f).0;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ms));
        prop_assert!(Metric::Qabf.evaluate(&x, &y, &f).0 <= 1.0);
        prop_assert!(Metric::Vif.evaluate(&x, &y, &f).0 >= 0.0);
    }

    #[test]
    fn padding_keeps_the_original_block(img in (1usize..13, 1usize..13).prop_flat_map(|(h, w)| image(h, w)), m in 1usize..6) {
        let (padded, (h, w)) = pad_to_multiple(&img, m);
        prop_assert_eq!((h, w), img.dims());
        prop_assert_eq!(padded.height() % m, 0);
        prop_assert_eq!(padded.width() % m, 0);
        for r in 0..h {
            for c in 0..w {
                prop_assert_eq!(padded.get(r, c), img.get(r, c));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), rule in prop::sample::select(FusionRule::ALL.to_vec())) {
        let cfg = TrainConfig { fusion_rule: rule, base_channels: 2, seed, ..TrainConfig::default() };
        let params = init_params::<f32>(&cfg.arch().unwrap(), seed).unwrap();
        let bytes = Checkpoint::new(cfg, params).to_bytes();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn fused_output_is_open_unit_interval((x, y) in (image(13, 9), image(13, 9)), seed in 0u64..1000) {
        let net = FusionNet::<f32>::init(ArchConfig::new(3, 2, FusionRule::Mapping).unwrap(), seed).unwrap();
        let f = net.fuse(&x, &y).unwrap();
        prop_assert_eq!(f.dims(), (13, 9));
        prop_assert!(f.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
