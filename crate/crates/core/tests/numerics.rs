use alignflow_core::gradsuite::{module_cases, op_cases, run_op};
use alignflow_core::numerics::{check_grad, check_grad_inputs, Rng, Tape, Tensor, DEFAULT_STEP};
use alignflow_core::Error;

const TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::standard_normal(shape, rng)
}

// Direct sliding-window cross-correlation, written without reference to the
// tape implementation.
fn conv_oracle(x: &[Vec<f64>], w: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let len = x[0].len();
    let k = w[0][0].len();
    let left = (k - 1) as isize / 2;
    w.iter()
        .map(|wo| {
            (0..len as isize)
                .map(|t| {
                    let mut acc = 0.0;
                    for (c, wc) in wo.iter().enumerate() {
                        for (j, wv) in wc.iter().enumerate() {
                            let src = t - left + j as isize;
                            if src >= 0 && (src as usize) < len {
                                acc += wv * x[c][src as usize];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul_is_noop() {
    let mut rng = Rng::new(5);
    let x = rand_t(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn conv1d_matches_sliding_window() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 5], &[1., 2., 3., 4., 5.]));
    let w = tape.constant(t(&[1, 1, 3], &[1., 0., 0.]));
    let y = tape.conv1d(x, w, None).unwrap();
    let expected = conv_oracle(&[vec![1., 2., 3., 4., 5.]], &[vec![vec![1., 0., 0.]]]);
    assert_eq!(expected[0], vec![0., 1., 2., 3., 4.]);
    assert_eq!(tape.value(y).data(), expected[0].as_slice());

    let mut rng = Rng::new(11);
    for k in [1usize, 2, 3, 4, 5] {
        let xs = rand_t(&[3, 7], &mut rng);
        let ws = rand_t(&[2, 3, k], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(xs.clone());
        let wv = tape.constant(ws.clone());
        let y = tape.conv1d(xv, wv, None).unwrap();
        let xr: Vec<Vec<f64>> = xs.data().chunks(7).map(<[f64]>::to_vec).collect();
        let wr: Vec<Vec<Vec<f64>>> = ws
            .data()
            .chunks(3 * k)
            .map(|o| o.chunks(k).map(<[f64]>::to_vec).collect())
            .collect();
        let flat: Vec<f64> = conv_oracle(&xr, &wr).concat();
        for (a, b) in tape.value(y).data().iter().zip(&flat) {
            assert!((a - b).abs() < 1e-12, "kernel {k}");
        }
    }
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1., -2., 3., 0.5]).with_requires_grad(true));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1., 1.]);
}

#[test]
fn singleton_mse_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![2.]).with_requires_grad(true));
    let z = tape.constant(Tensor::zeros(&[1]));
    let l = tape.mse(x, z).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1., 2.]).with_requires_grad(true));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., 2.]);
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1., 2.]).with_requires_grad(true));
    let y = tape.tanh(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![0.0, 1.0]));
    assert_eq!(tape.log(a).unwrap_err(), Error::NonFinite { op: "log" });
    let b = tape.constant(Tensor::from_vec(vec![1000.0]));
    assert!(tape.exp(b).is_err());
}

#[test]
fn result_tracks_grad_only_when_an_input_does() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2]));
    let b = tape.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
    let c = tape.add(a, a).unwrap();
    let d = tape.add(a, b).unwrap();
    assert!(!tape.requires_grad(c));
    assert!(tape.requires_grad(d));
}

#[test]
fn check_grad_of_sum_is_exact() {
    let mut rng = Rng::new(2);
    let x = rand_t(&[5], &mut rng);
    let err = check_grad(|tape, x| tape.sum(x), &x, DEFAULT_STEP).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn check_grad_of_sum_of_squares() {
    let x = Tensor::from_vec(vec![1., 2.]);
    // central differences for x^2 are exact up to rounding: (x+h)^2-(x-h)^2 = 4xh
    let err = check_grad(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum(sq)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn check_grad_softmax_matmul_chain() {
    let mut rng = Rng::new(9);
    let a = rand_t(&[3, 4], &mut rng);
    let b = rand_t(&[4, 5], &mut rng);
    let c = rand_t(&[3, 5], &mut rng);
    let err = check_grad_inputs(
        |tape, v| {
            let m = tape.matmul(v[0], v[1])?;
            let s = tape.softmax(m, 1)?;
            let w = tape.mul(s, v[2])?;
            tape.sum(w)
        },
        &[a, b, c],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn three_layer_tanh_network_gradients() {
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let inputs = vec![
            rand_t(&[4, 3], &mut rng),
            rand_t(&[5, 4], &mut rng),
            rand_t(&[5, 5], &mut rng),
            rand_t(&[1, 5], &mut rng),
            rand_t(&[3, 2], &mut rng),
        ];
        let err = check_grad_inputs(
            |tape, v| {
                let h1 = tape.matmul(v[0], v[4])?;
                let h1 = tape.tanh(h1)?;
                let h2 = tape.matmul(v[1], h1)?;
                let h2 = tape.tanh(h2)?;
                let h3 = tape.matmul(v[2], h2)?;
                let h3 = tape.tanh(h3)?;
                let o = tape.matmul(v[3], h3)?;
                tape.sum(o)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn every_op_matches_finite_differences_on_20_seeds() {
    for case in op_cases() {
        for seed in 0..20u64 {
            let err = run_op(&case, seed).unwrap();
            assert!(err <= TOL, "{} seed {seed}: {err}", case.0);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_and_layer_norm_centres() {
    let mut rng = Rng::new(77);
    for _ in 0..20 {
        let (r, c) = (1 + rng.below(6), 1 + rng.below(6));
        let x = Tensor::standard_normal(&[r, c], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.scale_for_test(5.0));
        let s = tape.softmax(xv, 1).unwrap();
        for row in tape.value(s).data().chunks(c) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let n = tape.layer_norm(xv, 1, 1e-5).unwrap();
        for row in tape.value(n).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            assert!(mean.abs() <= 1e-9);
        }
    }
}

trait ScaleForTest {
    fn scale_for_test(&self, k: f64) -> Tensor;
}

impl ScaleForTest for Tensor {
    fn scale_for_test(&self, k: f64) -> Tensor {
        Tensor::new(self.shape(), self.data().iter().map(|v| v * k).collect()).unwrap()
    }
}

#[test]
fn identical_seeds_give_bit_identical_buffers() {
    let run = |seed| {
        let mut rng = Rng::new(seed);
        let a = Tensor::standard_normal(&[4, 6], &mut rng);
        let w = Tensor::uniform(&[3, 4, 3], 0.5, &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(&a.with_requires_grad(true));
        let wv = tape.leaf(&w.with_requires_grad(true));
        let y = tape.conv1d(av, wv, None).unwrap();
        let y = tape.softmax(y, 0).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        let bits: Vec<u64> = tape
            .value(y)
            .data()
            .iter()
            .chain(tape.grad(wv).unwrap())
            .map(|v| v.to_bits())
            .collect();
        bits
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn composed_modules_match_finite_differences_on_20_seeds() {
    for (name, check) in module_cases() {
        for seed in 0..20u64 {
            let err = check(seed).unwrap();
            assert!(err <= TOL, "{name} seed {seed}: {err}");
        }
    }
}
