use pa_nn::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Direct same-padded convolution over the `[C, N, H, W]` layout.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let [ci, n, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let (co, k) = (w.dim(0), w.dim(2));
    let r = (k / 2) as isize;
    let at = |c: usize, s: usize, y: isize, z: isize| -> f64 {
        if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
            0.0
        } else {
            x.data()[((c * n + s) * h + y as usize) * wd + z as usize]
        }
    };
    let mut out = vec![0.0; co * n * h * wd];
    for o in 0..co {
        for s in 0..n {
            for y in 0..h {
                for z in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for dy in 0..k {
                            for dz in 0..k {
                                let wv = w.data()[((o * ci + c) * k + dy) * k + dz];
                                acc += wv * at(c, s, y as isize + dy as isize - r, z as isize + dz as isize - r);
                            }
                        }
                    }
                    out[((o * n + s) * h + y) * wd + z] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv2d_matches_direct_convolution(
        ci in 1usize..4, co in 1usize..4, n in 1usize..3, h in 1usize..6, w in 1usize..6,
        k in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[ci, n, h, w], &mut rng);
        let wt = random(&[co, ci, k, k], &mut rng);
        let b = random(&[co], &mut rng);
        let want = conv_oracle(&x, &wt, &b);
        let mut g = Graph::new(false);
        let (xv, wv, bv) = (g.input(x), g.input(wt), g.input(b));
        let y = g.conv2d(xv, wv, bv);
        prop_assert_eq!(g.shape(y), &[co, n, h, w][..]);
        for (a, e) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn shuffle_inverts_unshuffle(c in 1usize..4, n in 1usize..3, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[c, n, 2 * h, 2 * w], &mut rng);
        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let down = g.pixel_unshuffle(xv);
        prop_assert_eq!(g.shape(down), &[4 * c, n, h, w][..]);
        let up = g.pixel_shuffle(down);
        prop_assert_eq!(g.value(up).data(), x.data());
    }

    #[test]
    fn attention_preserves_spatially_constant_values(c in 1usize..4, n in 1usize..3, hw in 1usize..5, seed in any::<u64>()) {
        // Softmax rows sum to one, so constant values pass through unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&[c, n, hw, hw], &mut rng);
        let k = random(&[c, n, hw, hw], &mut rng);
        let consts: Vec<f64> = (0..c * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let plane = hw * hw;
        let v = Tensor::from_vec(&[c, n, hw, hw], (0..c * n * plane).map(|i| consts[i / plane]).collect());
        let mut g = Graph::new(false);
        let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v.clone()));
        let y = g.attention(qv, kv, vv);
        for (a, e) in g.value(y).data().iter().zip(v.data()) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_mse_gradient_matches_closed_form() {
    // loss = mean((W x + b - t)^2), so dW = 2/P · r xᵀ and db = 2/P · Σ r.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ci, co, p) = (3, 2, 5);
    let x = random(&[ci, p], &mut rng);
    let t = random(&[co, p], &mut rng);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", random(&[co, ci], &mut rng));
    let b = store.add("b", random(&[co], &mut rng));
    let mut g = Graph::new(true);
    let (xv, tv) = (g.input(x.clone()), g.input(t.clone()));
    let (wv, bv) = (g.param(&store, w), g.param(&store, b));
    let y = g.linear(xv, wv, bv);
    let loss = g.mse(y, tv);
    let r: Vec<f64> = g.value(y).data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
    g.backward(loss, &mut store);
    let scale = 2.0 / (co * p) as f64;
    for o in 0..co {
        let db: f64 = (0..p).map(|j| r[o * p + j]).sum::<f64>() * scale;
        assert!((store.grad(b).data()[o] - db).abs() < 1e-12);
        for i in 0..ci {
            let dw: f64 = (0..p).map(|j| r[o * p + j] * x.data()[i * p + j]).sum::<f64>() * scale;
            assert!((store.grad(w).data()[o * ci + i] - dw).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_first_step_moves_each_weight_by_lr() {
    // After one bias-corrected step, m̂ = g and v̂ = g², so Δw = -lr·g/(|g| + eps).
    let mut store = ParamStore::<f64>::new();
    let before = [0.5, -0.25, 1.0, 0.0];
    let grads = [0.3, -2.0, 1e-3, 0.0];
    let id = store.add("w", Tensor::from_vec(&[4], before.to_vec()));
    // d/dw mean((w - t)^2) = (w - t)/2 for four elements, so t = w - 2g.
    let target: Vec<f64> = before.iter().zip(grads).map(|(w, g)| w - 2.0 * g).collect();
    let mut g = Graph::new(true);
    let (wv, tv) = (g.param(&store, id), g.input(Tensor::from_vec(&[4], target)));
    let loss = g.mse(wv, tv);
    g.backward(loss, &mut store);
    for (a, e) in store.grad(id).data().iter().zip(grads) {
        assert!((a - e).abs() < 1e-15);
    }
    let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
    let mut opt = Adam::new(&store, cfg);
    opt.step(&mut store);
    assert_eq!(opt.steps(), 1);
    for ((w, w0), g) in store.value(id).data().iter().zip(before).zip(grads) {
        let want = w0 - cfg.lr * g / (f64::abs(g) + cfg.eps);
        assert!((w - want).abs() < 1e-12, "{w} vs {want}");
    }
}
