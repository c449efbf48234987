use mumoe::activation::{entmax15, softmax};
use mumoe::checkpoint::{Array, Checkpoint};
use mumoe::layer::{init_layer, param_count, InitConfig, LayerConfig, LayerKind};
use mumoe::norm::Mode;
use mumoe::verify::naive_forward;
use mumoe::{Dtype, Tensor};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn simplex_maps_land_on_the_simplex(z in logits()) {
        for p in [entmax15(&z).unwrap(), softmax(&z).unwrap()] {
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn simplex_maps_ignore_shifts(z in logits(), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let (a, b) = (entmax15(&z).unwrap(), entmax15(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn entmax_preserves_order(z in logits()) {
        let p = entmax15(&z).unwrap();
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] > z[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn factorized_layers_match_their_materialization(
        seed in 0u64..1000,
        kind in prop::sample::select(vec![LayerKind::Cp, LayerKind::Tr]),
        experts in 2usize..6,
        input in 1usize..5,
        output in 1usize..5,
        bias in any::<bool>(),
    ) {
        let cfg = match kind {
            LayerKind::Cp => LayerConfig::cp(input, output, &[experts], 3),
            _ => LayerConfig::tr(input, output, &[experts], &[2, 3, 2]),
        }
        .with_bias(bias);
        let layer = init_layer::<f64>(&cfg, &InitConfig::new(seed)).unwrap();
        let x = Tensor::from_fn(&[4, input], |i| ((i[0] * 7 + i[1] * 3 + seed as usize) % 11) as f64 / 5.0 - 1.0);
        let out = layer.forward(&x, Mode::Eval).unwrap();
        let w = layer.weights.materialize().unwrap().to_f64();
        let oracle = naive_forward(&w, &layer.coefficients(&x, Mode::Eval).unwrap(), &x, bias);
        prop_assert!(out.output.rel_l2_error(&oracle) < 1e-10);
        prop_assert_eq!(layer.stored_param_count(), param_count(&cfg));
    }

    #[test]
    fn checkpoint_encoding_round_trips(
        data in prop::collection::vec(-1e6f64..1e6, 0..40),
        f32_storage in any::<bool>(),
    ) {
        let dtype = if f32_storage { Dtype::F32 } else { Dtype::F64 };
        let mut ck = Checkpoint::new(dtype);
        let stored: Vec<f64> = if f32_storage { data.iter().map(|&v| v as f32 as f64).collect() } else { data.clone() };
        ck.arrays.push(Array::new("values", &[stored.len()], stored));
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }
}
