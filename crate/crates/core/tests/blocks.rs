use hnf_core::gradcheck::GradCheck;
use hnf_core::nn::{em_m_step, Builder, ConvBlock, Ctx, EmaConfig, EmaModule, EmaTrace, FusePath, InterSde, IntraSde, Mode, Pmf};
use hnf_core::tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random::<f64>() * 2.0 - 1.0))
}

fn setup<T: Scalar>(seed: u64) -> (ParamStore<T>, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

fn set_zero<T: Scalar>(store: &mut ParamStore<T>, pred: impl Fn(&str) -> bool) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| pred(&p.name)).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.tensor(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
}

/// Moves every parameter off its structured initial value so that no unit
/// sits exactly on a ReLU kink during finite differencing.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let old = store.tensor(id);
        let data = old.data().iter().map(|v| v + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let t = Tensor::new(old.shape().to_vec(), data).unwrap();
        store.set(id, t).unwrap();
    }
}

fn eval<T: Scalar, F>(store: &ParamStore<T>, inputs: &[Tensor<T>], f: F) -> Vec<Tensor<T>>
where
    F: Fn(&mut Ctx<'_, T>, &[Var]) -> hnf_core::Result<Vec<Var>>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let outs = {
        let mut cx = Ctx::new(&mut tape, store, Mode::Infer);
        f(&mut cx, &vars).unwrap()
    };
    outs.iter().map(|&v| tape.value(v).clone()).collect()
}

fn assert_grad_ok(rep: hnf_core::gradcheck::GradCheckReport) {
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

// ---------------------------------------------------------------- ConvBlock

#[test]
fn conv_block_shape_contract() {
    let (mut store, mut rng) = setup::<f32>(0);
    let blk = ConvBlock::new(&mut Builder { store: &mut store, rng: &mut rng }, "blk", 4, 8).unwrap();
    let x = rand_tensor::<f32>(&mut rng, &[1, 4, 8, 8, 8]);
    let y = eval(&store, &[x], |cx, v| Ok(vec![blk.forward(cx, v[0])?]));
    assert_eq!(y[0].shape(), &[1, 8, 8, 8, 8]);
    let bad = rand_tensor::<f32>(&mut rng, &[1, 3, 8, 8, 8]);
    let mut tape = Tape::inference();
    let bv = tape.constant(bad);
    let mut cx = Ctx::new(&mut tape, &store, Mode::Infer);
    assert!(matches!(blk.forward(&mut cx, bv), Err(hnf_core::Error::Config(_))));
}

#[test]
fn conv_block_with_zero_weights_outputs_zero() {
    let (mut store, mut rng) = setup::<f64>(1);
    let blk = ConvBlock::new(&mut Builder { store: &mut store, rng: &mut rng }, "blk", 2, 3).unwrap();
    set_zero(&mut store, |n| n.ends_with("weight") || n.ends_with("shift"));
    let x = rand_tensor::<f64>(&mut rng, &[1, 2, 4, 4, 4]);
    let y = eval(&store, &[x], |cx, v| Ok(vec![blk.forward(cx, v[0])?]));
    assert!(y[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_block_gradients() {
    for (i, shape) in [[1, 2, 3, 4, 4], [2, 1, 4, 3, 2], [1, 3, 2, 2, 5]].iter().enumerate() {
        let (mut store, mut rng) = setup::<f64>(10 + i as u64);
        let blk = ConvBlock::new(&mut Builder { store: &mut store, rng: &mut rng }, "blk", shape[1], 2).unwrap();
        let x = rand_tensor::<f64>(&mut rng, shape);
        let rep = GradCheck::default()
            .run(&store, &[x], |t, s, v| blk.forward(&mut Ctx::new(t, s, Mode::Infer), v[0]))
            .unwrap();
        assert_grad_ok(rep);
    }
}

// ---------------------------------------------------------------- PMF

fn pmf_inputs<T: Scalar>(rng: &mut ChaCha8Rng, widths: &[usize], finest: usize) -> Vec<Tensor<T>> {
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let e = finest >> i;
            rand_tensor(rng, &[1, w, e, e, e])
        })
        .collect()
}

#[test]
fn pmf_preserves_branch_shapes() {
    let (mut store, mut rng) = setup::<f32>(2);
    let pmf = Pmf::new(&mut Builder { store: &mut store, rng: &mut rng }, "pmf", &[4, 8], None).unwrap();
    let xs = pmf_inputs::<f32>(&mut rng, &[4, 8], 8);
    let ys = eval(&store, &xs, |cx, v| pmf.forward(cx, v));
    for (x, y) in xs.iter().zip(&ys) {
        assert_eq!(x.shape(), y.shape());
    }
    // wrong branch count and broken ladder
    let mut tape = Tape::inference();
    let a = tape.constant(xs[0].clone());
    let b = tape.constant(Tensor::zeros(vec![1, 8, 3, 3, 3]));
    let mut cx = Ctx::new(&mut tape, &store, Mode::Infer);
    assert!(pmf.forward(&mut cx, &[a]).is_err());
    assert!(pmf.forward(&mut cx, &[a, b]).is_err());
}

#[test]
fn pmf_with_only_identity_paths_reduces_to_branch_blocks() {
    let (mut store, mut rng) = setup::<f64>(3);
    let pmf = Pmf::new(&mut Builder { store: &mut store, rng: &mut rng }, "pmf", &[2, 3, 4], Some(4)).unwrap();
    set_zero(&mut store, |n| n.contains(".fuse."));
    let xs = pmf_inputs::<f64>(&mut rng, &[2, 3, 4], 8);
    let fused = eval(&store, &xs, |cx, v| pmf.forward(cx, v));
    let plain = eval(&store, &xs, |cx, v| pmf.branch_features(cx, v));
    assert_eq!(fused, plain);
}

#[test]
fn pmf_every_output_depends_on_the_coarsest_input() {
    let (mut store, mut rng) = setup::<f64>(4);
    let widths = [2, 3, 4];
    let pmf = Pmf::new(&mut Builder { store: &mut store, rng: &mut rng }, "pmf", &widths, None).unwrap();
    assert!(matches!(pmf.fuse[0][2], FusePath::Up(_)));
    assert!(matches!(&pmf.fuse[2][0], FusePath::Down(c) if c.len() == 2));
    let xs = pmf_inputs::<f64>(&mut rng, &widths, 8);
    let base = eval(&store, &xs, |cx, v| pmf.forward(cx, v));
    for src in 0..widths.len() {
        let mut pert = xs.clone();
        pert[src] = pert[src].map(|v| v + 0.25);
        let moved = eval(&store, &pert, |cx, v| pmf.forward(cx, v));
        for (j, (a, b)) in base.iter().zip(&moved).enumerate() {
            let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 1e-9, "output {j} insensitive to input {src}");
        }
    }
}

#[test]
fn pmf_gradients() {
    for seed in 0..3u64 {
        let (mut store, mut rng) = setup::<f64>(20 + seed);
        let widths: Vec<usize> = (0..2 + seed as usize % 2).map(|i| 1 + i).collect();
        let pmf = Pmf::new(&mut Builder { store: &mut store, rng: &mut rng }, "pmf", &widths, Some(4)).unwrap();
        jitter(&mut store, &mut rng);
        let xs = pmf_inputs::<f64>(&mut rng, &widths, 4);
        let rep = GradCheck { max_coords: 8, ..GradCheck::default() }
            .run(&store, &xs, |t, s, v| {
                let mut cx = Ctx::new(t, s, Mode::Infer);
                let ys = pmf.forward(&mut cx, v)?;
                let flat: Vec<Var> = ys
                    .iter()
                    .map(|&y| {
                        let n = cx.tape.value(y).numel();
                        cx.tape.reshape(y, &[1, n, 1, 1, 1])
                    })
                    .collect::<hnf_core::Result<_>>()?;
                cx.tape.concat_channels(&flat)
            })
            .unwrap();
        assert_grad_ok(rep);
    }
}

// ---------------------------------------------------------------- EMA

fn ema_with(seed: u64, c: usize, cfg: EmaConfig) -> (EmaModule, ParamStore<f64>, ChaCha8Rng) {
    let (mut store, mut rng) = setup::<f64>(seed);
    let ema = EmaModule::new(&mut Builder { store: &mut store, rng: &mut rng }, "ema", c, cfg).unwrap();
    (ema, store, rng)
}

fn traced(ema: &EmaModule, store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode) -> (Tensor<f64>, EmaTrace<f64>, usize) {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mut trace = EmaTrace::default();
    let mut cx = Ctx::new(&mut tape, store, mode);
    let y = ema.forward_traced(&mut cx, xv, Some(&mut trace)).unwrap();
    let nupd = cx.updates.len();
    (tape.value(y).clone(), trace, nupd)
}

#[test]
fn ema_zero_base_count_is_rejected() {
    let (mut store, mut rng) = setup::<f64>(0);
    let cfg = EmaConfig { bases: 0, ..EmaConfig::default() };
    assert!(EmaModule::new(&mut Builder { store: &mut store, rng: &mut rng }, "ema", 4, cfg).is_err());
}

#[test]
fn ema_invariants_hold_every_iteration() {
    let cfg = EmaConfig { bases: 3, iterations: 3, ..EmaConfig::default() };
    let (ema, store, mut rng) = ema_with(5, 4, cfg);
    let x = rand_tensor::<f64>(&mut rng, &[2, 4, 3, 2, 2]);
    let (_, trace, _) = traced(&ema, &store, &x, Mode::Infer);
    assert_eq!(trace.responsibilities.len(), 3);
    for (z, mu) in trace.responsibilities.iter().zip(&trace.bases) {
        for row in z.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for row in mu.data().chunks(4) {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn ema_with_zero_output_projection_is_identity() {
    let (ema, mut store, mut rng) = ema_with(6, 3, EmaConfig { bases: 4, ..EmaConfig::default() });
    set_zero(&mut store, |n| n.starts_with("ema.out_proj"));
    let x = rand_tensor::<f64>(&mut rng, &[1, 3, 2, 3, 2]);
    let (y, _, _) = traced(&ema, &store, &x, Mode::Infer);
    assert_eq!(y, x);
}

fn set_identity_projections(store: &mut ParamStore<f64>, c: usize) {
    for name in ["ema.in_proj", "ema.out_proj"] {
        let w = store.id(&format!("{name}.weight")).unwrap();
        let eye = Tensor::from_fn(vec![c, c, 1, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        store.set(w, eye).unwrap();
        let b = store.id(&format!("{name}.bias")).unwrap();
        store.set(b, Tensor::zeros(vec![c])).unwrap();
    }
}

#[test]
fn ema_single_base_closed_form() {
    let (ema, mut store, mut rng) = ema_with(7, 3, EmaConfig { bases: 1, iterations: 2, ..EmaConfig::default() });
    set_identity_projections(&mut store, 3);
    let x = rand_tensor::<f64>(&mut rng, &[1, 3, 2, 2, 2]);
    let (y, trace, _) = traced(&ema, &store, &x, Mode::Infer);
    assert!(trace.responsibilities.iter().all(|z| z.data().iter().all(|&v| v == 1.0)));
    // single base = normalized mean feature; every position reconstructs to it
    let xs = x.data();
    let mean: Vec<f64> = (0..3).map(|c| xs[c * 8..(c + 1) * 8].iter().sum::<f64>() / 8.0).collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    for c in 0..3 {
        for p in 0..8 {
            let want = xs[c * 8 + p] + mean[c] / norm;
            assert!((y.data()[c * 8 + p] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn ema_zero_temperature_gives_uniform_responsibilities() {
    let (ema, store, mut rng) = ema_with(8, 3, EmaConfig { bases: 5, iterations: 1, temperature: 0.0, momentum: 0.9 });
    let x = rand_tensor::<f64>(&mut rng, &[1, 3, 2, 2, 1]);
    let (_, trace, _) = traced(&ema, &store, &x, Mode::Infer);
    assert!(trace.responsibilities[0].data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn ema_matches_step_by_step_oracle() {
    let (ema, mut store, _) = ema_with(9, 2, EmaConfig { bases: 2, iterations: 1, temperature: 1.0, momentum: 0.9 });
    set_identity_projections(&mut store, 2);
    let bases = [0.6, 0.8, -0.8, 0.6];
    store.set(store.id("ema.bases").unwrap(), Tensor::new(vec![2, 2], bases.to_vec()).unwrap()).unwrap();
    let xd = [0.5, -1.0, 0.25, 2.0, -0.5, 1.5, 0.0, -2.0, 1.0, 0.3, -0.7, 0.2, 0.9, -1.1, 0.4, 0.6];
    let x = Tensor::new(vec![1, 2, 2, 2, 2], xd.to_vec()).unwrap();
    let (y, _, _) = traced(&ema, &store, &x, Mode::Infer);

    // oracle: positions p = 0..8, channels c = 0..2, feature x_p = (xd[p], xd[8 + p])
    let feat = |p: usize| [xd[p], xd[8 + p]];
    let mut z = [[0.0f64; 2]; 8];
    for (p, zp) in z.iter_mut().enumerate() {
        let f = feat(p);
        let l: Vec<f64> = (0..2).map(|k| f[0] * bases[2 * k] + f[1] * bases[2 * k + 1]).collect();
        let m = l[0].max(l[1]);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        zp[0] = e[0] / (e[0] + e[1]);
        zp[1] = e[1] / (e[0] + e[1]);
    }
    let mut mu = [[0.0f64; 2]; 2];
    for k in 0..2 {
        let mass: f64 = (0..8).map(|p| z[p][k]).sum();
        let mut v = [0.0; 2];
        for p in 0..8 {
            v[0] += z[p][k] * feat(p)[0] / mass;
            v[1] += z[p][k] * feat(p)[1] / mass;
        }
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        mu[k] = [v[0] / n, v[1] / n];
    }
    for p in 0..8 {
        for c in 0..2 {
            let rec = z[p][0] * mu[0][c] + z[p][1] * mu[1][c];
            let want = xd[c * 8 + p] + rec;
            assert!((y.data()[c * 8 + p] - want).abs() < 1e-6, "p {p} c {c}");
        }
    }
}

#[test]
fn m_step_keeps_previous_base_without_responsibility() {
    let mut tape = Tape::<f64>::new();
    // base 1 receives no responsibility at all
    let z = tape.input(Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap());
    let x = tape.input(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5]).unwrap());
    let prev = tape.input(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let mu = em_m_step(&mut tape, z, x, prev).unwrap();
    let v = tape.value(mu).data().to_vec();
    assert_eq!(&v[2..], &[0.0, 1.0]);
    let s = (3.0f64 * 3.0 + 6.5 * 6.5).sqrt();
    assert!((v[0] - 3.0 / s).abs() < 1e-12 && (v[1] - 6.5 / s).abs() < 1e-12);
    let l = tape.sum(mu);
    let g = tape.backward(l).unwrap();
    assert_eq!(&g.wrt(prev).unwrap()[2..], &[1.0, 1.0]);
}

#[test]
fn ema_train_mode_updates_running_bases_with_momentum() {
    let cfg = EmaConfig { bases: 2, iterations: 2, temperature: 1.0, momentum: 0.9 };
    let (ema, store, mut rng) = ema_with(12, 3, cfg);
    let x = rand_tensor::<f64>(&mut rng, &[2, 3, 2, 2, 2]);
    let (_, trace, n) = traced(&ema, &store, &x, Mode::Infer);
    assert_eq!(n, 0);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mut cx = Ctx::new(&mut tape, &store, Mode::Train);
    ema.forward(&mut cx, xv).unwrap();
    let (id, upd) = cx.updates.pop().unwrap();
    assert_eq!(id, ema.bases);
    let last = trace.bases.last().unwrap().data();
    let run = store.tensor(ema.bases).data();
    for i in 0..6 {
        let want = 0.9 * run[i] + 0.1 * (last[i] + last[6 + i]) / 2.0;
        assert!((upd.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn ema_gradients() {
    for (seed, k, t) in [(30u64, 1usize, 1usize), (31, 2, 3), (32, 4, 2)] {
        let cfg = EmaConfig { bases: k, iterations: t, ..EmaConfig::default() };
        let (ema, store, mut rng) = ema_with(seed, 3, cfg);
        let x = rand_tensor::<f64>(&mut rng, &[1 + seed as usize % 2, 3, 2, 2, 3]);
        let rep = GradCheck::default()
            .run(&store, &[x], |t, s, v| ema.forward(&mut Ctx::new(t, s, Mode::Infer), v[0]))
            .unwrap();
        assert_grad_ok(rep);
    }
}

// ---------------------------------------------------------------- SDE blocks

#[test]
fn intra_sde_zero_excitation_halves_input() {
    let (mut store, mut rng) = setup::<f64>(40);
    let sde = IntraSde::new(&mut Builder { store: &mut store, rng: &mut rng }, "sde", 8, 4).unwrap();
    set_zero(&mut store, |n| n.starts_with("sde.excite"));
    let x = rand_tensor::<f64>(&mut rng, &[2, 8, 2, 3, 2]);
    let y = eval(&store, &[x.clone()], |cx, v| Ok(vec![sde.forward(cx, v[0])?]));
    assert_eq!(y[0], x.map(|v| v * 0.5));
}

#[test]
fn intra_sde_gates_zero_input_to_zero_and_stays_in_unit_interval() {
    let (store, rng) = &mut setup::<f64>(41);
    let sde = IntraSde::new(&mut Builder { store, rng }, "sde", 4, 4).unwrap();
    let z = Tensor::zeros(vec![1, 4, 2, 2, 2]);
    let y = eval(store, &[z.clone()], |cx, v| Ok(vec![sde.forward(cx, v[0])?]));
    assert_eq!(y[0], z);
    let x = rand_tensor::<f64>(rng, &[3, 4, 2, 2, 2]).map(|v| v * 5.0);
    let out = eval(store, &[x.clone()], |cx, v| Ok(vec![sde.gate(cx, v[0])?, sde.forward(cx, v[0])?]));
    assert!(out[0].data().iter().all(|&s| s > 0.0 && s < 1.0));
    assert!(out[1].data().iter().zip(x.data()).all(|(y, x)| y.abs() <= x.abs()));
}

#[test]
fn intra_sde_gradients() {
    for (seed, c) in [(42u64, 2usize), (43, 5), (44, 8)] {
        let (mut store, mut rng) = setup::<f64>(seed);
        let sde = IntraSde::new(&mut Builder { store: &mut store, rng: &mut rng }, "sde", c, 4).unwrap();
        let x = rand_tensor::<f64>(&mut rng, &[2, c, 2, 3, 2]);
        let rep = GradCheck::default()
            .run(&store, &[x], |t, s, v| sde.forward(&mut Ctx::new(t, s, Mode::Infer), v[0]))
            .unwrap();
        assert_grad_ok(rep);
    }
}

#[test]
fn inter_sde_needs_two_branches() {
    let (mut store, mut rng) = setup::<f64>(50);
    assert!(InterSde::new(&mut Builder { store: &mut store, rng: &mut rng }, "inter", &[4]).is_err());
}

#[test]
fn inter_sde_context_channel_is_constant_scaled_mean() {
    let (mut store, mut rng) = setup::<f64>(51);
    let sde = InterSde::new(&mut Builder { store: &mut store, rng: &mut rng }, "inter", &[2, 3]).unwrap();
    // reduce conv of branch 0: weight w on every source channel, zero bias
    let w = 0.75;
    store.set(sde.reduce[0].weight, Tensor::full(vec![1, 3, 1, 1, 1], w)).unwrap();
    store.set(sde.reduce[0].bias.unwrap(), Tensor::zeros(vec![1])).unwrap();
    let c = 1.5;
    let coarse = Tensor::full(vec![1, 3, 2, 2, 2], c);
    let out = eval(&store, &[coarse], |cx, v| {
        let pooled = cx.tape.global_avg_pool(v[0])?;
        Ok(vec![sde.context(cx, pooled, 0, [4, 4, 4])?])
    });
    assert_eq!(out[0].shape(), &[1, 1, 4, 4, 4]);
    assert!(out[0].data().iter().all(|&v| (v - 3.0 * w * c).abs() < 1e-12));
}

#[test]
fn inter_sde_without_context_weight_is_plain_pointwise_conv() {
    let (mut store, mut rng) = setup::<f64>(52);
    let sde = InterSde::new(&mut Builder { store: &mut store, rng: &mut rng }, "inter", &[2, 3]).unwrap();
    let xs = pmf_inputs::<f64>(&mut rng, &[2, 3], 4);
    for j in 0..2 {
        let id = sde.restore[j].weight;
        let shape = store.tensor(id).shape().to_vec();
        let (cout, cin) = (shape[0], shape[1]);
        let mut w = store.tensor(id).data().to_vec();
        for o in 0..cout {
            w[o * cin + cin - 1] = 0.0;
        }
        store.set(id, Tensor::new(shape, w).unwrap()).unwrap();
    }
    let ys = eval(&store, &xs, |cx, v| sde.forward(cx, v));
    for j in 0..2 {
        let want = eval(&store, &xs[j..j + 1], |cx, v| {
            let w = cx.p(sde.restore[j].weight);
            let wshape = cx.tape.shape(w).to_vec();
            let cin = wshape[1] - 1;
            // drop the context column from the weight
            let data: Vec<f64> = cx.tape.value(w).data().chunks(wshape[1]).flat_map(|r| r[..cin].to_vec()).collect();
            let w2 = cx.tape.constant(Tensor::new(vec![wshape[0], cin, 1, 1, 1], data)?);
            let b = cx.p(sde.restore[j].bias.unwrap());
            Ok(vec![cx.tape.conv3d(v[0], w2, Some(b), hnf_core::tensor::Conv3dSpec::same(1))?])
        });
        for (a, b) in ys[j].data().iter().zip(want[0].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn inter_sde_injects_coarse_context_everywhere() {
    let (mut store, mut rng) = setup::<f64>(53);
    let widths = [2, 3, 4];
    let sde = InterSde::new(&mut Builder { store: &mut store, rng: &mut rng }, "inter", &widths).unwrap();
    let xs = pmf_inputs::<f64>(&mut rng, &widths, 8);
    let base = eval(&store, &xs, |cx, v| sde.forward(cx, v));
    let mut pert = xs.clone();
    pert[2] = pert[2].map(|v| v + 0.5);
    let moved = eval(&store, &pert, |cx, v| sde.forward(cx, v));
    for (j, (a, b)) in base.iter().zip(&moved).enumerate() {
        assert_eq!(a.shape(), xs[j].shape());
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "branch {j} did not change");
    }
}

#[test]
fn inter_sde_gradients() {
    for seed in 0..3u64 {
        let (mut store, mut rng) = setup::<f64>(60 + seed);
        let widths: Vec<usize> = (0..2 + seed as usize).map(|i| 2 + i).collect();
        let sde = InterSde::new(&mut Builder { store: &mut store, rng: &mut rng }, "inter", &widths).unwrap();
        jitter(&mut store, &mut rng);
        let xs = pmf_inputs::<f64>(&mut rng, &widths, 8);
        let rep = GradCheck { max_coords: 12, ..GradCheck::default() }
            .run(&store, &xs, |t, s, v| {
                let mut cx = Ctx::new(t, s, Mode::Infer);
                let ys = sde.forward(&mut cx, v)?;
                let flat: Vec<Var> = ys
                    .iter()
                    .map(|&y| {
                        let n = cx.tape.value(y).numel();
                        cx.tape.reshape(y, &[1, n, 1, 1, 1])
                    })
                    .collect::<hnf_core::Result<_>>()?;
                cx.tape.concat_channels(&flat)
            })
            .unwrap();
        assert_grad_ok(rep);
    }
}
