mod common;

use common::*;
use dropprune::tensor::{kernels, ConvGeometry};
use dropprune::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let err = gradient_check(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn two_layer_fc_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [
        random_tensor(&[5, 3], &mut rng),
        random_tensor(&[3, 4], &mut rng),
        random_tensor(&[4], &mut rng),
        random_tensor(&[4, 2], &mut rng),
        random_tensor(&[2], &mut rng),
    ];
    let err = gradient_check(&inputs, |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_bias(h, v[2]).unwrap();
        let h = t.tanh(h).unwrap();
        let y = t.matmul(h, v[3]).unwrap();
        let y = t.add_bias(y, v[4]).unwrap();
        t.softmax_cross_entropy(y, &[0, 1, 1, 0, 1]).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn shared_subexpression_gradients_add_up() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.3, -1.2]));
    let s = tape.sigmoid(x).unwrap();
    let y = tape.mul(s, x).unwrap();
    let z = tape.add(y, s).unwrap();
    let loss = tape.sum(z).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    for (i, &xv) in [0.3f64, -1.2].iter().enumerate() {
        let sv = 1.0 / (1.0 + (-xv).exp());
        let ds = sv * (1.0 - sv);
        assert!((g[i] - (ds * xv + sv + ds)).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn matmul_shapes(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.constant(random_tensor(&[m, k], &mut rng));
        let b = tape.constant(random_tensor(&[k, n], &mut rng));
        let c = tape.matmul(a, b).unwrap();
        prop_assert_eq!(tape.shape(c), &[m, n]);
        let bad = tape.constant(random_tensor(&[k + 1, n], &mut rng));
        prop_assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn im2col_patch_count(h in 1usize..10, w in 1usize..10, c in 1usize..4, kh in 1usize..6, kw in 1usize..6, stride in 1usize..4, batch in 1usize..3) {
        prop_assume!(kh <= h && kw <= w);
        let g = ConvGeometry { in_h: h, in_w: w, in_c: c, kernel_h: kh, kernel_w: kw, stride };
        let input: Vec<f64> = (0..batch * g.input_len()).map(|i| i as f64).collect();
        let cols = kernels::im2col(&input, batch, &g);
        let patches = ((h - kh) / stride + 1) * ((w - kw) / stride + 1);
        prop_assert_eq!(g.patches(), patches);
        prop_assert_eq!(cols.len(), batch * patches * kh * kw * c);
        // first patch starts at the image origin
        prop_assert_eq!(cols[0], 0.0);
    }

    #[test]
    fn elementwise_ops_keep_shape(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[rows, cols], &mut rng));
        for y in [tape.sigmoid(x).unwrap(), tape.tanh(x).unwrap(), tape.relu(x).unwrap(), tape.affine(x, 2.0, 1.0).unwrap()] {
            prop_assert_eq!(tape.shape(y), &[rows, cols]);
        }
        let s = tape.sum(x).unwrap();
        prop_assert_eq!(tape.shape(s), &[1]);
    }
}
