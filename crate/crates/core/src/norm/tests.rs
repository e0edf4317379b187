use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{check, random_projection};
use crate::tensor::{Binder, ParamStore, Shape, Tensor};

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn vec_tensor(values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(Shape::vector(values.len()), values.to_vec()).unwrap()
}

/// Plain per-channel batch norm, written out longhand.
fn reference_bn(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
    let s = x.shape();
    let mut out = vec![0.0; s.numel()];
    for c in 0..s.c {
        let mut vals = Vec::new();
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    vals.push(x.at(n, c, h, w));
                }
            }
        }
        let (mean, var) = match stats {
            Some((m, v)) => (m[c], v[c]),
            None => {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                (mean, var)
            }
        };
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    out[x.index(n, c, h, w)] = gamma[c] * (x.at(n, c, h, w) - mean) / (var + eps).sqrt() + beta[c];
                }
            }
        }
    }
    out
}

fn reference_in(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let s = x.shape();
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let plane: Vec<f64> = (0..s.h).flat_map(|h| (0..s.w).map(move |w| (h, w))).map(|(h, w)| x.at(n, c, h, w)).collect();
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane.len() as f64;
            for h in 0..s.h {
                for w in 0..s.w {
                    out[x.index(n, c, h, w)] = gamma[c] * (x.at(n, c, h, w) - mean) / (var + eps).sqrt() + beta[c];
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn channel(t: &[f64], s: Shape, c: usize) -> Vec<f64> {
    let hw = s.plane();
    (0..s.n).flat_map(|n| t[(n * s.c + c) * hw..(n * s.c + c + 1) * hw].to_vec()).collect()
}

#[test]
fn instance_norm_constant_plane_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 7.25));
    let y = instance_norm(&mut g, x, None, DEFAULT_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn instance_norm_affine_on_unit_plane() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-1.0, 1.0]).unwrap());
    let gamma = g.constant(vec_tensor(&[2.0]));
    let beta = g.constant(vec_tensor(&[3.0]));
    let y = instance_norm(&mut g, x, Some((gamma, beta)), 1e-12).unwrap();
    assert_close(g.value(y).data(), &[1.0, 5.0], 1e-9);
}

#[test]
fn instance_norm_statistics_oracle() {
    let s = Shape::new(2, 4, 5, 5);
    let x = random(s, 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = instance_norm(&mut g, xv, None, DEFAULT_EPS).unwrap();
    let out = g.value(y).data();
    for plane in out.chunks(25) {
        let mean = plane.iter().sum::<f64>() / 25.0;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
    assert_close(out, &reference_in(&x, &[1.0; 4], &[0.0; 4], DEFAULT_EPS), 1e-12);
}

#[test]
fn instance_norm_rejects_empty_plane() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 1, 0, 3)));
    assert!(instance_norm(&mut g, x, None, DEFAULT_EPS).is_err());
}

#[test]
fn single_domain_matches_reference_bn_in_train_and_eval() {
    let s = Shape::new(4, 3, 3, 3);
    let gamma = [1.5, -0.5, 0.75];
    let beta = [0.1, 0.2, -0.3];
    let mut state = DomainBNState::<f64>::new(1, 3, DEFAULT_MOMENTUM, DEFAULT_EPS).unwrap();
    let mut ref_mean = vec![0.0; 3];
    let mut ref_var = vec![1.0; 3];
    for step in 0..3 {
        let x = random(s, 10 + step);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let a = (g.constant(vec_tensor(&gamma)), g.constant(vec_tensor(&beta)));
        let y = batch_norm_domain(&mut g, xv, 0, a, &mut state, Mode::Train).unwrap();
        assert_close(g.value(y).data(), &reference_bn(&x, &gamma, &beta, None, DEFAULT_EPS), 1e-6);
        for c in 0..3 {
            let vals = channel(x.data(), s, c);
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            ref_mean[c] = 0.9 * ref_mean[c] + 0.1 * m;
            ref_var[c] = 0.9 * ref_var[c] + 0.1 * v;
        }
    }
    assert_close(&state.domain(0).unwrap().running_mean, &ref_mean, 1e-12);
    assert_close(&state.domain(0).unwrap().running_var, &ref_var, 1e-12);
    assert_eq!(state.domain(0).unwrap().batch_count, 3);

    let x = random(s, 99);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a = (g.constant(vec_tensor(&gamma)), g.constant(vec_tensor(&beta)));
    let y = batch_norm_domain(&mut g, xv, 0, a, &mut state, Mode::Eval).unwrap();
    let want = reference_bn(&x, &gamma, &beta, Some((&ref_mean, &ref_var)), DEFAULT_EPS);
    assert_close(g.value(y).data(), &want, 1e-6);
    assert_eq!(state.domain(0).unwrap().batch_count, 3);
}

#[test]
fn eval_before_training_uses_zero_mean_unit_variance() {
    let x = random(Shape::new(2, 2, 2, 2), 3);
    let state = DomainBNState::<f64>::new(2, 2, DEFAULT_MOMENTUM, DEFAULT_EPS).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a = (g.constant(vec_tensor(&[1.0, 1.0])), g.constant(vec_tensor(&[0.0, 0.0])));
    let y = batch_norm_eval(&mut g, xv, a, state.domain(1).unwrap(), DEFAULT_EPS).unwrap();
    let scale = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
    let want: Vec<f64> = x.data().iter().map(|v| v * scale).collect();
    assert_close(g.value(y).data(), &want, 1e-12);
}

#[test]
fn train_output_is_standardized_per_channel() {
    let s = Shape::new(3, 4, 4, 4);
    let x = random(s, 5);
    let mut state = DomainBNState::<f64>::new(2, 4, DEFAULT_MOMENTUM, DEFAULT_EPS).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let a = (g.constant(vec_tensor(&[1.0; 4])), g.constant(vec_tensor(&[0.0; 4])));
    let y = batch_norm_domain(&mut g, xv, 1, a, &mut state, Mode::Train).unwrap();
    for c in 0..4 {
        let vals = channel(g.value(y).data(), s, c);
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_errors() {
    let mut state = DomainBNState::<f64>::new(2, 1, DEFAULT_MOMENTUM, DEFAULT_EPS).unwrap();
    let mut g = Graph::new();
    let a = (g.constant(vec_tensor(&[1.0])), g.constant(vec_tensor(&[0.0])));
    let x = g.constant(random(Shape::new(2, 1, 2, 2), 1));
    let err = batch_norm_domain(&mut g, x, 2, a, &mut state, Mode::Train).unwrap_err();
    assert!(matches!(err, Error::DomainOutOfRange { domain: 2, num_domains: 2 }));
    let tiny = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
    assert!(batch_norm_domain(&mut g, tiny, 0, a, &mut state, Mode::Train).is_err());
    assert!(DomainBNState::<f64>::new(0, 1, 0.1, 1e-5).is_err());
    assert!(DomainBNState::<f64>::new(1, 1, 0.0, 1e-5).is_err());
}

#[test]
fn cumulative_update_is_plain_average() {
    let mut st = DomainStats::<f64>::new(1);
    for v in [1.0, 2.0, 6.0] {
        st.update(&[v], &[v], StatUpdate::Cumulative);
    }
    assert!((st.running_mean[0] - 3.0).abs() < 1e-12);
    assert!((st.running_var[0] - 3.0).abs() < 1e-12);
}

fn dsan_layer(d: usize, c: usize, opts: NormOptions) -> (ParamStore<f64>, NormLayer<f64>) {
    let mut store = ParamStore::new();
    let layer = NormLayer::new(NormKind::Dsan, &mut store, "l", c, d, &opts).unwrap();
    (store, layer)
}

fn run_layer(layer: &mut NormLayer<f64>, store: &ParamStore<f64>, x: &Tensor<f64>, domain: usize, mode: Mode) -> Vec<f64> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(store.len());
    let xv = g.constant(x.clone());
    let y = match mode {
        Mode::Train => layer.forward(&mut g, store, &mut b, xv, domain, mode),
        Mode::Eval => layer.forward_eval(&mut g, store, &mut b, xv, domain),
    }
    .unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn dsan_composes_the_two_trivial_halves() {
    let (store, mut layer) = dsan_layer(1, 2, NormOptions::default());
    // channel 0 constant, channel 1 in {-1, +1}
    let x = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![4.0, 4.0, -1.0, 1.0]).unwrap();
    let y = run_layer(&mut layer, &store, &x, 0, Mode::Train);
    assert_close(&y, &[0.0, 0.0, -1.0, 1.0], 1e-4);
}

#[test]
fn dsan_rejects_odd_channels() {
    let mut store = ParamStore::<f32>::new();
    assert!(NormLayer::new(NormKind::Dsan, &mut store, "l", 3, 2, &NormOptions::default()).is_err());
    assert!(NormLayer::new(NormKind::Ibn, &mut store, "l", 5, 1, &NormOptions::default()).is_err());
    assert!(NormLayer::new(NormKind::Dsbn, &mut store, "l", 3, 2, &NormOptions::default()).is_ok());
}

#[test]
fn in_affine_count_follows_flags() {
    for (share, enable, want) in [(true, true, 1), (false, true, 3), (true, false, 0), (false, false, 0)] {
        let opts = NormOptions {
            share_in_affine: share,
            enable_in_affine: enable,
            ..NormOptions::default()
        };
        let (_, layer) = dsan_layer(3, 4, opts);
        let NormLayer::Split(l) = layer else { panic!("not a split layer") };
        assert_eq!(l.in_branch.affines().len(), want);
        assert_eq!(l.bn_branch.affines().len(), 3);
    }
}

#[test]
fn single_domain_dsan_equals_ibn() {
    let x = random(Shape::new(3, 4, 3, 3), 7);
    let mut store_a = ParamStore::new();
    let mut dsan = NormLayer::new(NormKind::Dsan, &mut store_a, "l", 4, 1, &NormOptions::default()).unwrap();
    let mut store_b = ParamStore::new();
    let mut ibn = NormLayer::new(NormKind::Ibn, &mut store_b, "l", 4, 1, &NormOptions::default()).unwrap();
    // give both layers the same non-trivial affines
    for (i, id) in store_a.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let t = random(store_a.get(id).shape(), 100 + i as u64);
        *store_a.get_mut(id) = t.clone();
        *store_b.get_mut(id) = t;
    }
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(
            run_layer(&mut dsan, &store_a, &x, 0, mode),
            run_layer(&mut ibn, &store_b, &x, 0, mode)
        );
    }
}

#[test]
fn dsan_halves_match_independent_recomputation() {
    let s = Shape::new(4, 6, 3, 3);
    let x = random(s, 11);
    let (mut store, mut layer) = dsan_layer(2, 6, NormOptions::default());
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.iter().enumerate() {
        *store.get_mut(*id) = random(store.get(*id).shape(), 200 + i as u64);
    }
    let y = run_layer(&mut layer, &store, &x, 1, Mode::Train);
    let NormLayer::Split(l) = &layer else { unreachable!() };
    let ina = l.in_branch.affines()[0];
    let bna = l.bn_branch.affines()[1];

    let lo = Tensor::from_fn(Shape::new(4, 3, 3, 3), |i| {
        let (n, rest) = (i / 27, i % 27);
        x.data()[n * 54 + rest]
    });
    let hi = Tensor::from_fn(Shape::new(4, 3, 3, 3), |i| {
        let (n, rest) = (i / 27, i % 27);
        x.data()[n * 54 + 27 + rest]
    });
    let want_lo = reference_in(&lo, store.get(ina.gamma).data(), store.get(ina.beta).data(), DEFAULT_EPS);
    let want_hi = reference_bn(&hi, store.get(bna.gamma).data(), store.get(bna.beta).data(), None, DEFAULT_EPS);
    for n in 0..4 {
        assert_close(&y[n * 54..n * 54 + 27], &want_lo[n * 27..(n + 1) * 27], 1e-6);
        assert_close(&y[n * 54 + 27..(n + 1) * 54], &want_hi[n * 27..(n + 1) * 27], 1e-6);
    }
    // only domain 1 saw the batch
    assert_eq!(l.bn_branch.state.domain(0).unwrap().batch_count, 0);
    assert_eq!(l.bn_branch.state.domain(1).unwrap().batch_count, 1);
}

fn dson_run(x: &Tensor<f64>, w: f64, stats: &mut DomainStats<f64>, mode: Mode, gamma: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(Tensor::scalar(w));
    let a = (g.constant(vec_tensor(gamma)), g.constant(vec_tensor(beta)));
    let y = dson(&mut g, xv, wv, a, stats, mode, StatUpdate::Momentum(0.1), DEFAULT_EPS)?;
    Ok(g.value(y).data().to_vec())
}

#[test]
fn dson_endpoints() {
    let s = Shape::new(3, 2, 4, 4);
    let x = random(s, 21);
    let (gamma, beta) = ([1.3, 0.7], [0.2, -0.4]);
    let y1 = dson_run(&x, 1.0, &mut DomainStats::new(2), Mode::Train, &gamma, &beta).unwrap();
    assert_close(&y1, &reference_bn(&x, &gamma, &beta, None, DEFAULT_EPS), 1e-6);
    let y0 = dson_run(&x, 0.0, &mut DomainStats::new(2), Mode::Train, &gamma, &beta).unwrap();
    assert_close(&y0, &reference_in(&x, &gamma, &beta, DEFAULT_EPS), 1e-6);

    let mut stats = DomainStats::new(2);
    stats.running_mean = vec![0.3, -0.2];
    stats.running_var = vec![1.7, 0.4];
    let e1 = dson_run(&x, 1.0, &mut stats.clone(), Mode::Eval, &gamma, &beta).unwrap();
    let want = reference_bn(&x, &gamma, &beta, Some((&stats.running_mean, &stats.running_var)), DEFAULT_EPS);
    assert_close(&e1, &want, 1e-6);
}

#[test]
fn dson_half_blend_matches_recomputation() {
    let s = Shape::new(2, 3, 3, 3);
    let x = random(s, 22);
    let (gamma, beta) = ([1.0, 2.0, 0.5], [0.0, 1.0, -1.0]);
    let y = dson_run(&x, 0.5, &mut DomainStats::new(3), Mode::Train, &gamma, &beta).unwrap();
    for c in 0..3 {
        let all = channel(x.data(), s, c);
        let bm = all.iter().sum::<f64>() / all.len() as f64;
        let bv = all.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / all.len() as f64;
        for n in 0..2 {
            let plane = &all[n * 9..(n + 1) * 9];
            let im = plane.iter().sum::<f64>() / 9.0;
            let iv = plane.iter().map(|v| (v - im).powi(2)).sum::<f64>() / 9.0;
            let (m, v) = (0.5 * bm + 0.5 * im, 0.5 * bv + 0.5 * iv);
            for (k, xv) in plane.iter().enumerate() {
                let want = gamma[c] * (xv - m) / (v + DEFAULT_EPS).sqrt() + beta[c];
                assert!((y[(n * 3 + c) * 9 + k] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn dson_rejects_weight_outside_unit_interval() {
    let x = random(Shape::new(2, 1, 2, 2), 1);
    assert!(dson_run(&x, 1.5, &mut DomainStats::new(1), Mode::Train, &[1.0], &[0.0]).is_err());
    assert!(dson_run(&x, -0.1, &mut DomainStats::new(1), Mode::Train, &[1.0], &[0.0]).is_err());
    let mut store = ParamStore::<f64>::new();
    let opts = NormOptions {
        dson_weight: Some(2.0),
        ..NormOptions::default()
    };
    assert!(NormLayer::new(NormKind::Dson, &mut store, "l", 2, 1, &opts).is_err());
}

#[test]
fn learnable_dson_starts_at_half() {
    let x = random(Shape::new(2, 2, 3, 3), 4);
    let mut store = ParamStore::new();
    let mut layer = NormLayer::new(NormKind::Dson, &mut store, "l", 2, 2, &NormOptions::default()).unwrap();
    let y = run_layer(&mut layer, &store, &x, 1, Mode::Train);
    let want = dson_run(&x, 0.5, &mut DomainStats::new(2), Mode::Train, &[1.0; 2], &[0.0; 2]).unwrap();
    assert_close(&y, &want, 1e-12);
}

const GRAD_TOL: f64 = 1e-3;
const STEP: f64 = 1e-4;

fn affine_inputs(c: usize, seed: u64) -> [Tensor<f64>; 2] {
    let mut gamma = random(Shape::vector(c), seed);
    gamma.data_mut().iter_mut().for_each(|v| *v += 2.5);
    [gamma, random(Shape::vector(c), seed + 1)]
}

#[test]
fn instance_norm_gradients() {
    for (i, s) in [Shape::new(2, 3, 3, 3), Shape::new(1, 2, 4, 2), Shape::new(3, 1, 2, 5)].into_iter().enumerate() {
        let [gm, bt] = affine_inputs(s.c, 30 + i as u64);
        let inputs = [random(s, i as u64), gm, bt];
        let r = check(&inputs, &[0, 1, 2], STEP, 1.0, 0, |g, v| {
            let y = instance_norm(g, v[0], Some((v[1], v[2])), DEFAULT_EPS)?;
            random_projection(g, y, 7)
        })
        .unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "{s}: {r:?}");
        let r = check(&inputs[..1], &[0], STEP, 1.0, 0, |g, v| {
            let y = instance_norm(g, v[0], None, DEFAULT_EPS)?;
            random_projection(g, y, 8)
        })
        .unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "{s}: {r:?}");
    }
}

#[test]
fn batch_norm_gradients() {
    for (i, s) in [Shape::new(3, 2, 3, 3), Shape::new(4, 3, 2, 2), Shape::new(2, 1, 3, 4)].into_iter().enumerate() {
        let [gm, bt] = affine_inputs(s.c, 40 + i as u64);
        let inputs = [random(s, 50 + i as u64), gm, bt];
        let r = check(&inputs, &[0, 1, 2], STEP, 1.0, 0, |g, v| {
            let mut st = DomainStats::new(s.c);
            let y = batch_norm_train(g, v[0], (v[1], v[2]), &mut st, StatUpdate::Momentum(0.1), DEFAULT_EPS)?;
            random_projection(g, y, 9)
        })
        .unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "train {s}: {r:?}");
        let mut frozen = DomainStats::new(s.c);
        frozen.running_mean = vec![0.25; s.c];
        frozen.running_var = vec![1.5; s.c];
        let r = check(&inputs, &[0, 1, 2], STEP, 1.0, 0, |g, v| {
            let y = batch_norm_eval(g, v[0], (v[1], v[2]), &frozen, DEFAULT_EPS)?;
            random_projection(g, y, 10)
        })
        .unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "eval {s}: {r:?}");
    }
}

#[test]
fn dson_gradients_including_mix_weight() {
    for (i, s) in [Shape::new(3, 2, 3, 3), Shape::new(2, 3, 2, 3), Shape::new(4, 1, 2, 2)].into_iter().enumerate() {
        let [gm, bt] = affine_inputs(s.c, 60 + i as u64);
        for mode in [Mode::Train, Mode::Eval] {
            let inputs = [random(s, 70 + i as u64), Tensor::scalar(0.35), gm.clone(), bt.clone()];
            let r = check(&inputs, &[0, 1, 2, 3], STEP, 1.0, 0, |g, v| {
                let mut st = DomainStats::new(s.c);
                st.running_mean = vec![0.1; s.c];
                st.running_var = vec![0.8; s.c];
                let y = dson(g, v[0], v[1], (v[2], v[3]), &mut st, mode, StatUpdate::Momentum(0.1), DEFAULT_EPS)?;
                random_projection(g, y, 11)
            })
            .unwrap();
            assert!(r.max_rel_err < GRAD_TOL, "{mode:?} {s}: {r:?}");
        }
    }
}

#[test]
fn dsan_layer_gradients() {
    let s = Shape::new(3, 4, 3, 3);
    let mut store = ParamStore::<f64>::new();
    let layer = NormLayer::new(NormKind::Dsan, &mut store, "l", 4, 2, &NormOptions::default()).unwrap();
    let NormLayer::Split(l) = &layer else { unreachable!() };
    let ina = l.in_branch.affines()[0];
    let bna = l.bn_branch.affines()[1];
    let [g1, b1] = affine_inputs(2, 80);
    let [g2, b2] = affine_inputs(2, 82);
    let inputs = [random(s, 81), g1, b1, g2, b2];
    let r = check(&inputs, &[0, 1, 2, 3, 4], STEP, 1.0, 0, |g, v| {
        let mut state = DomainBNState::new(2, 2, 0.1, DEFAULT_EPS)?;
        let lo = g.slice_channels(v[0], 0, 2)?;
        let hi = g.slice_channels(v[0], 2, 4)?;
        let a = instance_norm(g, lo, Some((v[1], v[2])), DEFAULT_EPS)?;
        let b = batch_norm_domain(g, hi, 1, (v[3], v[4]), &mut state, Mode::Train)?;
        let y = g.concat_channels(a, b)?;
        random_projection(g, y, 12)
    })
    .unwrap();
    assert!(r.max_rel_err < GRAD_TOL, "{r:?}");

    // the layer itself routes the same parameters
    let mut store2 = store.clone();
    *store2.get_mut(ina.gamma) = inputs[1].clone();
    *store2.get_mut(ina.beta) = inputs[2].clone();
    *store2.get_mut(bna.gamma) = inputs[3].clone();
    *store2.get_mut(bna.beta) = inputs[4].clone();
    let mut layer = layer;
    let mut g = Graph::new();
    let mut binder = Binder::trainable(store2.len());
    let xv = g.param(inputs[0].clone());
    let y = layer.forward(&mut g, &store2, &mut binder, xv, 1, Mode::Train).unwrap();
    let mut g2 = Graph::new();
    let mut st = DomainBNState::new(2, 2, 0.1, DEFAULT_EPS).unwrap();
    let vs: Vec<Var> = inputs.iter().map(|t| g2.constant(t.clone())).collect();
    let lo = g2.slice_channels(vs[0], 0, 2).unwrap();
    let hi = g2.slice_channels(vs[0], 2, 4).unwrap();
    let a = instance_norm(&mut g2, lo, Some((vs[1], vs[2])), DEFAULT_EPS).unwrap();
    let b = batch_norm_domain(&mut g2, hi, 1, (vs[3], vs[4]), &mut st, Mode::Train).unwrap();
    let y2 = g2.concat_channels(a, b).unwrap();
    assert_eq!(g.value(y).data(), g2.value(y2).data());
}

#[test]
fn learnable_dson_weight_receives_gradient() {
    let x = random(Shape::new(3, 2, 3, 3), 90);
    let mut store = ParamStore::new();
    let mut layer = NormLayer::new(NormKind::Dson, &mut store, "l", 2, 1, &NormOptions::default()).unwrap();
    let NormLayer::Dson(l) = &layer else { unreachable!() };
    let DsonWeight::Learnable(id) = l.weight else { panic!("expected learnable weight") };
    let mut g = Graph::new();
    let mut b = Binder::trainable(store.len());
    let xv = g.constant(x);
    let y = layer.forward(&mut g, &store, &mut b, xv, 0, Mode::Train).unwrap();
    let loss = random_projection(&mut g, y, 3).unwrap();
    g.backward(loss).unwrap();
    let grads = b.gradients(&g);
    assert!(grads[id.index()].as_ref().unwrap()[0].abs() > 0.0);
}

fn feed(state: &mut DomainBNState<f64>, batches: &[(usize, u64)]) {
    for &(d, seed) in batches {
        let mut g = Graph::new();
        let x = g.constant(random(Shape::new(2, 2, 2, 2), seed));
        let a = (g.constant(vec_tensor(&[1.0, 1.0])), g.constant(vec_tensor(&[0.0, 0.0])));
        batch_norm_domain(&mut g, x, d, a, state, Mode::Train).unwrap();
    }
}

#[test]
fn domain_zero_batches_leave_domain_one_untouched() {
    let mut state = DomainBNState::<f64>::new(2, 2, DEFAULT_MOMENTUM, DEFAULT_EPS).unwrap();
    feed(&mut state, &[(1, 5)]);
    let before = state.domain(1).unwrap().clone();
    feed(&mut state, &[(0, 6), (0, 7), (0, 8)]);
    assert_eq!(state.domain(1).unwrap(), &before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn running_stats_depend_only_on_own_domain(order in proptest::collection::vec(0usize..3, 1..12)) {
        let batches: Vec<(usize, u64)> = order.iter().enumerate().map(|(i, &d)| (d, 1000 + i as u64)).collect();
        let mut mixed = DomainBNState::<f64>::new(3, 2, DEFAULT_MOMENTUM, DEFAULT_EPS).unwrap();
        feed(&mut mixed, &batches);
        for d in 0..3 {
            let own: Vec<(usize, u64)> = batches.iter().copied().filter(|b| b.0 == d).collect();
            let mut alone = DomainBNState::<f64>::new(3, 2, DEFAULT_MOMENTUM, DEFAULT_EPS).unwrap();
            feed(&mut alone, &own);
            prop_assert_eq!(mixed.domain(d).unwrap(), alone.domain(d).unwrap());
        }
    }

    #[test]
    fn instance_norm_absorbs_plane_affine(a in prop_oneof![-4.0f64..-0.5, 0.5f64..4.0], b in -5.0f64..5.0, seed in 0u64..1000) {
        let x = random(Shape::new(2, 3, 4, 4), seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = instance_norm(&mut g, xv, None, DEFAULT_EPS).unwrap();
        let shifted = g.constant(Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b));
        let y2 = instance_norm(&mut g, shifted, None, DEFAULT_EPS).unwrap();
        for (p, q) in g.value(y).data().iter().zip(g.value(y2).data()) {
            prop_assert!((a.signum() * p - q).abs() < 1e-4);
        }
    }

    #[test]
    fn dsan_halves_do_not_leak(seed in 0u64..1000, bump in 0.5f64..3.0, upper in any::<bool>()) {
        let s = Shape::new(3, 4, 2, 2);
        let x = random(s, seed);
        let (store, mut layer) = dsan_layer(2, 4, NormOptions::default());
        let base = run_layer(&mut layer.clone(), &store, &x, 0, Mode::Train);
        let (lo, hi) = if upper { (2, 4) } else { (0, 2) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let perturbed = Tensor::from_fn(s, |i| {
            let c = (i / 4) % 4;
            x.data()[i] + if c >= lo && c < hi { bump * rng.gen_range(-1.0..1.0) } else { 0.0 }
        });
        let out = run_layer(&mut layer, &store, &perturbed, 0, Mode::Train);
        let (keep_lo, keep_hi) = if upper { (0, 2) } else { (2, 4) };
        for c in keep_lo..keep_hi {
            prop_assert_eq!(channel(&base, s, c), channel(&out, s, c));
        }
    }

    #[test]
    fn eval_output_is_permutation_equivariant(seed in 0u64..1000, kind in prop::sample::select(vec![NormKind::Bn, NormKind::In, NormKind::Ibn, NormKind::Dsbn, NormKind::Dsan, NormKind::Dson])) {
        let s = Shape::new(5, 4, 2, 2);
        let mut store = ParamStore::new();
        let mut layer = NormLayer::new(kind, &mut store, "l", 4, 2, &NormOptions::default()).unwrap();
        for k in 0..3 {
            run_layer(&mut layer, &store, &random(s, seed + 10 + k), (k % 2) as usize, Mode::Train);
        }
        let x = random(s, seed);
        let perm = [3usize, 0, 4, 1, 2];
        let out = run_layer(&mut layer, &store, &x, 1, Mode::Eval);
        let out_p = run_layer(&mut layer, &store, &x.select_rows(&perm).unwrap(), 1, Mode::Eval);
        let row = s.row_len();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(&out_p[i * row..(i + 1) * row], &out[p * row..(p + 1) * row]);
        }
    }
}
