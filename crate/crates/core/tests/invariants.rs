use aila::autodiff::{Tape, Var};
use aila::data::{BatchInput, InputSpec};
use aila::model::{read_checkpoint, write_checkpoint, KnockoutMask, Model, ModelConfig, Variant};
use aila::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    Tensor::uniform(shape.to_vec(), scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

fn small_model(variant: Variant, n: usize, heads: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        num_layers: n,
        hidden: 4,
        heads,
        ..ModelConfig::new(variant)
    };
    Model::new(cfg, InputSpec::Dense { dim: 2 }, seed).unwrap()
}

fn predict(m: &Model, x: &Tensor) -> Tensor {
    m.predict(&BatchInput::Dense(x.clone()), &KnockoutMask::none()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..50.0, shift in -100.0f64..100.0) {
        let tape = Tape::new();
        let x = tensor(&[rows, cols], seed, scale);
        let y = tape.constant(x.clone()).softmax(1).unwrap().value();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let shifted = tape.constant(x.map(|v| v + shift)).softmax(1).unwrap().value();
        prop_assert!(shifted.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn concat_then_slice_round_trips(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, rows in 1usize..4) {
        let tape = Tape::new();
        let p = tape.constant(tensor(&[rows, a], seed, 1.0));
        let q = tape.constant(tensor(&[rows, b], seed ^ 1, 1.0));
        let cat = Var::concat(&[&p, &q], 1).unwrap();
        prop_assert_eq!(cat.slice(1, 0..a).unwrap().value(), p.value());
        prop_assert_eq!(cat.slice(1, a..a + b).unwrap().value(), q.value());
    }

    /// A value used twice receives the sum of both paths' gradients.
    #[test]
    fn fan_out_accumulates(seed in any::<u64>()) {
        let tape = Tape::new();
        let x = tape.param(tensor(&[3], seed, 2.0));
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum().unwrap();
        let g = tape.backward(&y).unwrap();
        let expected = x.value().map(|v| 2.0 * v + 1.0);
        prop_assert!(g.get(&x).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn attention_weights_are_distributions(seed in any::<u64>(), heads in prop::sample::select(vec![1usize, 2, 4]), v in prop::sample::select(vec![Variant::Aila1, Variant::Aila2])) {
        let m = small_model(v, 3, heads, seed);
        let x = tensor(&[2, 3, 2], seed ^ 7, 3.0);
        let tape = Tape::new();
        let bound = m.params().bind(&tape, false);
        let out = m.forward(&tape, &bound, &BatchInput::Dense(x), &KnockoutMask::none()).unwrap();
        for layer in &out.attention {
            for head in layer {
                let w = head.value();
                for r in w.data().chunks(w.shape()[1]) {
                    prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    /// Reordering examples reorders predictions and changes nothing else.
    #[test]
    fn batch_permutation_equivariance(seed in any::<u64>(), v in variant()) {
        let m = small_model(v, 2, 2, seed);
        let x = tensor(&[3, 4, 2], seed ^ 3, 1.0);
        let per = 4 * 2;
        let order = [2usize, 0, 1];
        let mut data = Vec::new();
        for &i in &order {
            data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
        }
        let xp = Tensor::new(vec![3, 4, 2], data).unwrap();
        let (y, yp) = (predict(&m, &x), predict(&m, &xp));
        for (k, &i) in order.iter().enumerate() {
            prop_assert!((yp.data()[k] - y.data()[i]).abs() < 1e-12);
        }
    }

    /// Integration is position-wise over a causal base: changing the input
    /// at step `t` leaves every layer's outputs at earlier steps untouched.
    #[test]
    fn earlier_positions_ignore_later_inputs(seed in any::<u64>(), v in variant(), t in 1usize..4) {
        let m = small_model(v, 3, 2, seed);
        let x = tensor(&[2, 4, 2], seed ^ 5, 1.0);
        let mut x2 = x.clone();
        for b in 0..2 {
            for c in 0..2 {
                x2.data_mut()[(b * 4 + t) * 2 + c] += 0.5;
            }
        }
        let states = |x: &Tensor| {
            let tape = Tape::new();
            let bound = m.params().bind(&tape, false);
            let out = m.forward(&tape, &bound, &BatchInput::Dense(x.clone()), &KnockoutMask::none()).unwrap();
            out.state.outputs().iter().map(|h| h.value()).collect::<Vec<_>>()
        };
        let (s1, s2) = (states(&x), states(&x2));
        for (h1, h2) in s1.iter().zip(&s2) {
            for b in 0..2 {
                for step in 0..t {
                    let at = |h: &Tensor| h.data()[(b * 4 + step) * 4..(b * 4 + step + 1) * 4].to_vec();
                    prop_assert_eq!(at(h1), at(h2));
                }
            }
        }
    }

    /// A batch gives the same predictions as its examples one at a time.
    #[test]
    fn batching_does_not_change_predictions(seed in any::<u64>(), v in variant()) {
        let m = small_model(v, 2, 1, seed);
        let x = tensor(&[3, 3, 2], seed ^ 9, 1.0);
        let y = predict(&m, &x);
        for i in 0..3 {
            let xi = Tensor::new(vec![1, 3, 2], x.data()[i * 6..(i + 1) * 6].to_vec()).unwrap();
            prop_assert!((predict(&m, &xi).data()[0] - y.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn construction_and_forward_are_deterministic(seed in any::<u64>(), v in variant()) {
        let (a, b) = (small_model(v, 2, 2, seed), small_model(v, 2, 2, seed));
        prop_assert_eq!(a.params(), b.params());
        let x = tensor(&[2, 3, 2], seed, 1.0);
        prop_assert_eq!(predict(&a, &x), predict(&b, &x));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), v in variant()) {
        let m = small_model(v, 2, 2, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &m, seed, serde_json::json!({})).unwrap();
        let back = read_checkpoint(&path).unwrap().into_model().unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.params().checksum(), m.params().checksum());
    }

    /// Knocking out the last layer zeroes the readout, leaving only the bias.
    #[test]
    fn last_layer_knockout_leaves_head_bias(seed in any::<u64>(), v in variant()) {
        let m = small_model(v, 2, 1, seed);
        let y = m.predict(&BatchInput::Dense(tensor(&[2, 3, 2], seed, 1.0)), &KnockoutMask::layers([1])).unwrap();
        let bias = m.params().get("head.bias").unwrap().data()[0];
        prop_assert!(y.data().iter().all(|&p| p == bias));
    }
}
