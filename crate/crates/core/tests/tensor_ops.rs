use consensus_diffusion::tensor::{conv2d, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn attend(q: Tensor<f64>, k: Tensor<f64>, v: Tensor<f64>, heads: usize) -> Tensor<f64> {
    let mut tape = Tape::no_grad();
    let (q, k, v) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let o = tape.attention_core(q, k, v, heads).unwrap();
    tape.value(o).clone()
}

#[test]
fn identical_keys_average_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = Tensor::randn(vec![1, 2, 2, 3], 1.0, &mut rng);
    let k = Tensor::full(vec![1, 2, 2, 3], 0.7);
    let v = Tensor::randn(vec![1, 2, 2, 3], 1.0, &mut rng);
    let out = attend(q, k, v.clone(), 1);
    for ch in 0..2 {
        let vals = &v.data()[ch * 6..(ch + 1) * 6];
        let mean = vals.iter().sum::<f64>() / 6.0;
        for &o in &out.data()[ch * 6..(ch + 1) * 6] {
            assert!((o - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn single_position_returns_the_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::randn(vec![2, 4, 1, 1], 1.0, &mut rng);
    let k = Tensor::randn(vec![2, 4, 1, 1], 1.0, &mut rng);
    let v = Tensor::randn(vec![2, 4, 1, 1], 1.0, &mut rng);
    assert_eq!(attend(q, k, v.clone(), 2), v);
}

#[test]
fn explicit_softmax_oracle_two_heads() {
    let (c, s, heads) = (4usize, 3usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = Tensor::randn(vec![1, c, 1, s], 1.0, &mut rng);
    let k = Tensor::randn(vec![1, c, 1, s], 1.0, &mut rng);
    let v = Tensor::randn(vec![1, c, 1, s], 1.0, &mut rng);
    let out = attend(q.clone(), k.clone(), v.clone(), heads);
    let dh = c / heads;
    let at = |t: &Tensor<f64>, ch: usize, p: usize| t.data()[ch * s + p];
    for h in 0..heads {
        for i in 0..s {
            let logits: Vec<f64> = (0..s)
                .map(|j| (0..dh).map(|d| at(&q, h * dh + d, i) * at(&k, h * dh + d, j)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                let ch = h * dh + d;
                let want: f64 = (0..s).map(|j| e[j] / z * at(&v, ch, j)).sum();
                assert!((at(&out, ch, i) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn heads_must_divide_channels() {
    let mut tape = Tape::<f64>::no_grad();
    let q = tape.constant(Tensor::zeros(vec![1, 3, 2, 2]));
    assert!(tape.attention_core(q, q, q, 2).is_err());
}

#[test]
fn strided_conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(vec![1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
    let y = conv2d(&x, &w, None, 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for i in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                s += w.data()[((o * 2 + i) * 3 + ky) * 3 + kx] * x.data()[(i * 5 + iy as usize) * 5 + ix as usize];
                            }
                        }
                    }
                }
                assert!((y.data()[(o * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
            }
        }
    }
}
