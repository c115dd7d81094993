//! Quick oracle and invariant checks runnable from the command line.
//!
//! Each check compares an optimized code path with a slow reference
//! computed inline, on small random inputs. The whole suite finishes in a
//! few seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{percentile, preprocess, read_nifti, write_nifti, LabelVolume, NiftiData, PreprocessParams, Study, Volume};
use crate::engine::{lr_at, make_patch_grid, postprocess, region_loss, TrainConfig, GDL_EPS};
use crate::gradcheck::GradCheck;
use crate::metrics::{dice, hd95};
use crate::network::{Network, NetworkConfig};
use crate::nn::{Builder, Ctx, EmaConfig, EmaModule, EmaTrace, Mode};
use crate::tensor::{Conv3dSpec, ParamStore, Tape, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    /// Detail on success, failure reason otherwise.
    pub outcome: std::result::Result<String, String>,
}

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn conv_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for shape in [[1, 2, 3, 4, 3], [2, 1, 3, 3, 2], [1, 3, 2, 3, 4]] {
        let x = random(&mut rng, &shape);
        let w = random(&mut rng, &[2, shape[1], 3, 3, 3]);
        let rep = GradCheck::default()
            .run(&ParamStore::new(), &[x, w], |t, _, v| {
                let y = t.conv3d(v[0], v[1], None, Conv3dSpec::same(3))?;
                Ok(t.sigmoid(y))
            })
            .map_err(err)?;
        worst = worst.max(rep.max_rel_error);
    }
    ensure(worst < 1e-4, || format!("relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn ema_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, t) in [(1, 1), (2, 3), (8, 3)] {
        let mut store = ParamStore::<f64>::new();
        let cfg = EmaConfig { bases: k, iterations: t, ..EmaConfig::default() };
        let ema = EmaModule::new(&mut Builder { store: &mut store, rng: &mut rng }, "ema", 4, cfg).map_err(err)?;
        let x = random(&mut rng, &[2, 4, 3, 2, 3]);
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let mut trace = EmaTrace::default();
        ema.forward_traced(&mut Ctx::new(&mut tape, &store, Mode::Infer), xv, Some(&mut trace)).map_err(err)?;
        for (z, mu) in trace.responsibilities.iter().zip(&trace.bases) {
            for row in z.data().chunks(k) {
                let s: f64 = row.iter().sum();
                ensure((s - 1.0).abs() < 1e-6, || format!("K={k}: responsibility row sums to {s}"))?;
            }
            for row in mu.data().chunks(4) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                ensure((n - 1.0).abs() < 1e-5, || format!("K={k}: base norm {n}"))?;
            }
        }
    }
    Ok("rows sum to one, bases unit norm".into())
}

fn parameter_accounting() -> Outcome {
    let count = |intra: bool, inter: bool| -> std::result::Result<usize, String> {
        let cfg = NetworkConfig { intra_sde: intra, inter_sde: inter, ..NetworkConfig::tiny() };
        let (net, store) = Network::build::<f32>(&cfg).map_err(err)?;
        let rep = net.count_parameters(&store);
        ensure(rep.total == store.count_trainable() && rep.total == net.structural_param_count(), || {
            format!("count mismatch {} vs {}", rep.total, store.count_trainable())
        })?;
        Ok(rep.total)
    };
    let (a, b, c) = (count(false, false)?, count(true, false)?, count(true, true)?);
    ensure(a < b && b < c, || format!("ordering violated: {a} {b} {c}"))?;
    Ok(format!("{a} < {b} < {c}"))
}

fn pipeline_rules() -> Outcome {
    let g = make_patch_grid([176, 224, 155], [128; 3], [32, 32, 27]).map_err(err)?;
    ensure(g.starts == [vec![0, 32, 48], vec![0, 32, 64, 96], vec![0, 27]], || format!("grid starts {:?}", g.starts))?;
    for (count, relabel) in [(199, true), (200, false)] {
        let mut v = vec![0u8; 1000];
        v[..count].iter_mut().for_each(|l| *l = 4);
        let lv = LabelVolume::new(Volume::new([10, 10, 10], v).map_err(err)?).map_err(err)?;
        let out = postprocess(&lv, 200);
        let want = if relabel { 1 } else { 4 };
        ensure(out.data()[0] == want, || format!("{count} ET voxels gave label {}", out.data()[0]))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [8, 9, 10];
    let vols: Vec<Volume<f32>> = (0..4)
        .map(|_| Volume::new(dims, (0..720).map(|i| if i % 7 == 0 { 0.0 } else { 1.0 + rng.random::<f32>() * 900.0 }).collect()))
        .collect::<crate::Result<_>>()
        .map_err(err)?;
    let vols: [Volume<f32>; 4] = vols.try_into().map_err(|_| "four modalities".to_string())?;
    let s = Study::new("s", vols, [1.0; 3], None).map_err(err)?;
    let p = preprocess(&s, &PreprocessParams::default()).map_err(err)?;
    for v in &p.modalities {
        let xs: Vec<f64> = v.data.iter().enumerate().filter(|(i, _)| i % 7 != 0).map(|(_, &x)| x as f64).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        ensure(mean.abs() < 1e-5 && (sd - 1.0).abs() < 1e-5, || format!("brain moments {mean} {sd}"))?;
    }
    Ok("24-patch grid, ET boundary at 200, unit brain moments".into())
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..30 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=8));
        let n: usize = dims.iter().product();
        let a: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
        let coords = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        let inter = (0..n).filter(|&i| a[i] && b[i]).count();
        let total = a.iter().filter(|&&v| v).count() + b.iter().filter(|&&v| v).count();
        let want_dice = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
        let got = dice(&a, &b).map_err(err)?;
        ensure(got == want_dice, || format!("case {case}: dice {got} vs {want_dice}"))?;
        let border = |m: &[bool]| -> Vec<[usize; 3]> {
            (0..n)
                .filter(|&i| m[i])
                .map(coords)
                .filter(|p| {
                    (0..3).any(|ax| {
                        p[ax] == 0 || p[ax] + 1 == dims[ax] || {
                            let mut lo = *p;
                            lo[ax] -= 1;
                            let mut hi = *p;
                            hi[ax] += 1;
                            let at = |q: [usize; 3]| m[(q[0] * dims[1] + q[1]) * dims[2] + q[2]];
                            !at(lo) || !at(hi)
                        }
                    })
                })
                .collect()
        };
        let (sa, sb) = (border(&a), border(&b));
        let want = match (sa.is_empty(), sb.is_empty()) {
            (true, true) => 0.0,
            (true, false) | (false, true) => crate::metrics::HD95_ONE_EMPTY,
            _ => {
                let directed = |x: &[[usize; 3]], y: &[[usize; 3]]| -> crate::Result<f64> {
                    let d: Vec<f64> = x
                        .iter()
                        .map(|p| {
                            y.iter()
                                .map(|q| (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>().sqrt())
                                .fold(f64::INFINITY, f64::min)
                        })
                        .collect();
                    percentile(&d, 95.0)
                };
                directed(&sa, &sb).map_err(err)?.max(directed(&sb, &sa).map_err(err)?)
            }
        };
        let got = hd95(&a, &b, dims, [1.0; 3]).map_err(err)?;
        ensure((got - want).abs() < 1e-9, || format!("case {case}: hd95 {got} vs {want}"))?;
    }
    Ok("30 random pairs match exhaustive search".into())
}

fn loss_and_schedule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x: Vec<f64> = (0..24).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let t: Vec<f64> = (0..24).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.4))).collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let counts: Vec<f64> = (0..3).map(|c| t[c * 8..c * 8 + 8].iter().sum()).collect();
        let raw: Vec<f64> = counts.iter().map(|&n| if n > 0.0 { 1.0 / (n * n) } else { 0.0 }).collect();
        let top = raw.iter().cloned().fold(0.0, f64::max);
        let w: Vec<f64> = raw.iter().map(|&r| if r > 0.0 { r } else if top > 0.0 { top } else { 1.0 }).collect();
        let ws: f64 = w.iter().sum();
        let (mut num, mut den, mut bce) = (0.0, 0.0, 0.0);
        for i in 0..24 {
            let (p, tv) = (sig(x[i]), t[i]);
            num += w[i / 8] / ws * p * tv;
            den += w[i / 8] / ws * (p + tv);
            bce -= tv * p.ln() + (1.0 - tv) * (1.0 - p).ln();
        }
        let want = 1.0 - (2.0 * num + GDL_EPS) / (den + GDL_EPS) + bce / 24.0;
        let mut tape = Tape::<f64>::inference();
        let xv = tape.constant(Tensor::new(vec![1, 3, 2, 2, 2], x).map_err(err)?);
        let tv = tape.constant(Tensor::new(vec![1, 3, 2, 2, 2], t).map_err(err)?);
        let l = region_loss(&mut tape, xv, tv).map_err(err)?;
        let got = tape.value(l).data()[0];
        ensure((got - want).abs() < 1e-6, || format!("loss {got} vs {want}"))?;
    }
    let cfg = TrainConfig::default();
    for e in 0..cfg.epochs {
        let want = if e < cfg.warmup_epochs {
            cfg.initial_lr * (e + 1) as f64 / cfg.warmup_epochs as f64
        } else {
            cfg.initial_lr * (1.0 - e as f64 / cfg.epochs as f64).powf(cfg.poly_power)
        };
        let got = lr_at(e, &cfg).map_err(err)?;
        ensure(got == want, || format!("lr({e}) = {got}, expected {want}"))?;
    }
    Ok("loss within 1e-6, schedule exact".into())
}

fn nifti_round_trip() -> Outcome {
    let dir = std::env::temp_dir().join(format!("hnf-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(err)?;
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vol = Volume::new([4, 5, 3], (0..60).map(|_| rng.random::<f32>() * 100.0 - 50.0).collect()).map_err(err)?;
        let path = dir.join("v.nii.gz");
        write_nifti(&path, NiftiData::F32(&vol), [1.0, 2.0, 3.0]).map_err(err)?;
        let back = read_nifti(&path).map_err(err)?.to_f32();
        ensure(back.data.iter().zip(&vol.data).all(|(a, b)| a.to_bits() == b.to_bits()), || "payload changed".into())?;
        let plain = dir.join("v.nii");
        write_nifti(&plain, NiftiData::F32(&vol), [1.0; 3]).map_err(err)?;
        let mut bytes = std::fs::read(&plain).map_err(err)?;
        bytes[344..348].copy_from_slice(b"xx1\0");
        std::fs::write(&plain, &bytes).map_err(err)?;
        ensure(matches!(read_nifti(&plain), Err(crate::Error::NiftiBadMagic { .. })), || "bad magic not detected".into())?;
        Ok("bitwise round trip, bad magic rejected".into())
    };
    let out = run();
    let _ = std::fs::remove_dir_all(&dir);
    out
}

/// Runs every check and returns their outcomes in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Outcome); 7] = [
        ("conv gradients", conv_gradients),
        ("EM attention invariants", ema_invariants),
        ("parameter accounting", parameter_accounting),
        ("pipeline rules", pipeline_rules),
        ("metric oracles", metric_oracles),
        ("loss and schedule", loss_and_schedule),
        ("NIfTI round trip", nifti_round_trip),
    ];
    checks.into_iter().map(|(name, f)| CheckResult { name, outcome: f() }).collect()
}
