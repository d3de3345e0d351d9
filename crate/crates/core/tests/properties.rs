use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segrenorm::data::io::{dequantize, quantize};
use segrenorm::nets::norm::{modulate, plane_mean_std};
use segrenorm::nets::{channel_standardize, film_modulate, Film};
use segrenorm::params::{Init, ParamStore};
use segrenorm::{parse_config, Checkpoint, TrainConfig};

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn planes() -> impl Strategy<Value = (Vec<f64>, f64, f64)> {
    (proptest::collection::vec(-1.0f64..1.0, 2 * 3 * 5 * 4), -50.0f64..50.0, 0.01f64..20.0)
}

proptest! {
    #[test]
    fn standardized_planes_have_zero_mean_unit_std((v, shift, scale) in planes()) {
        let x = tensor(v.iter().map(|p| p * scale + shift).collect(), &[2, 3, 5, 4]);
        let (mean, std) = plane_mean_std(&channel_standardize(&x).unwrap()).unwrap();
        // Planes that are almost constant are dominated by the epsilon.
        let (_, in_std) = plane_mean_std(&x).unwrap();
        for ((m, s), s_in) in flat(&mean).iter().zip(flat(&std)).zip(flat(&in_std)) {
            prop_assert!(m.abs() < 1e-5);
            if s_in > 0.2 {
                prop_assert!((s - 1.0).abs() < 1e-4, "std {s} for input std {s_in}");
            }
        }
    }

    #[test]
    fn film_is_affine_per_channel(v in proptest::collection::vec(-2.0f64..2.0, 2 * 3 * 4 * 4), e in proptest::collection::vec(-1.0f64..1.0, 2 * 5), seed in 0u64..100) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let film = Film::new(&mut Init::new(&mut store, &mut rng, ""), "film", 5, 3).unwrap();
        for (k, (_, var)) in store.iter().enumerate() {
            let n = var.elem_count();
            let vals: Vec<f64> = (0..n).map(|i| ((i * 7 + k * 13 + seed as usize) % 11) as f64 / 5.0 - 1.0).collect();
            var.set(&tensor(vals, var.dims())).unwrap();
        }
        let h = tensor(v.clone(), &[2, 3, 4, 4]);
        let emb = tensor(e.clone(), &[2, 5]);
        let out = flat(&film_modulate(&h, &emb, &film).unwrap());

        let w_g = flat(film.fc_gamma.weight.as_tensor());
        let b_g = flat(film.fc_gamma.bias.as_tensor());
        let w_b = flat(film.fc_beta.weight.as_tensor());
        let b_b = flat(film.fc_beta.bias.as_tensor());
        for n in 0..2 {
            for c in 0..3 {
                let mut g = b_g[c];
                let mut b = b_b[c];
                for j in 0..5 {
                    g += w_g[c * 5 + j] * e[n * 5 + j];
                    b += w_b[c * 5 + j] * e[n * 5 + j];
                }
                for p in 0..16 {
                    let i = (n * 3 + c) * 16 + p;
                    prop_assert!((out[i] - (g * v[i] + b)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn modulate_broadcasts(v in proptest::collection::vec(-2.0f64..2.0, 2 * 2 * 3 * 3), g in proptest::collection::vec(-2.0f64..2.0, 4), b in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let out = flat(&modulate(&tensor(v.clone(), &[2, 2, 3, 3]), &tensor(g.clone(), &[2, 2]), &tensor(b.clone(), &[2, 2])).unwrap());
        for (i, o) in out.iter().enumerate() {
            let nc = i / 9;
            prop_assert!((o - (g[nc] * v[i] + b[nc])).abs() < 1e-12);
        }
    }

    #[test]
    fn quantization_round_trips(q in any::<u16>()) {
        prop_assert_eq!(quantize(dequantize(q)), q);
    }

    #[test]
    fn quantization_error_is_half_a_step(x in -1.0f32..=1.0) {
        prop_assert!((dequantize(quantize(x)) - x).abs() <= 1.0 / 65535.0 + 1e-6);
    }

    #[test]
    fn config_text_round_trips(
        lr in 1e-6f64..1.0,
        batch in 1usize..16,
        crop in 1usize..64,
        iters in proptest::option::of(0u64..100_000),
        seed in any::<u64>(),
        renorm in any::<bool>(),
        segloss in any::<bool>(),
        w0 in 0.01f64..1.0,
    ) {
        let mut cfg = TrainConfig {
            lr_gen: lr,
            batch_size: batch,
            crop_size: crop * 4,
            iterations: iters,
            seed,
            ablation_renorm: renorm,
            ablation_segloss: segloss,
            ..TrainConfig::default()
        };
        cfg.loss_weights.class_weights = vec![w0, 1.0 - w0];
        prop_assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_round_trips(v in proptest::collection::vec(any::<f32>(), 0..50), step in any::<u64>(), tag in "[a-z]{0,8}") {
        let mut ckpt = Checkpoint::new("test", step, serde_json::json!({ "tag": tag }));
        ckpt.push("a", &Tensor::from_vec(v.clone(), v.len(), &Device::Cpu).unwrap()).unwrap();
        ckpt.push("b", &Tensor::from_vec(vec![1.5f64, -2.0], (1, 2), &Device::Cpu).unwrap()).unwrap();
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = Checkpoint::decode(&bytes);
    }

    #[test]
    fn config_parser_never_panics(text in "[ -~\n]{0,200}") {
        let _ = parse_config(&text);
    }
}
