//! Acceptance run: twelve criteria at their stated tolerances, one
//! PASS/FAIL line each. Criteria 9-11 share one desk-scale smoke run
//! (64 identities x 4 impressions at 8x64x64, five epochs per stage).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use p2v::expansion::{expansion_loss, expansion_loss_grad, ExpansionConfig, ExpansionNet};
use p2v::masterprint::fit_tps;
use p2v::metrics::{
    eer, frechet_distance, frechet_from_features, ssim2d, ssim3d, ssim_values, ssim_values_grad, tar_at_far, GaussianStats,
    ScoreSet, SsimParams,
};
use p2v::pipeline::{Pipeline, PipelineConfig, Stage};
use p2v::refiner::{patch_grid, refiner_objective_grad, PatchDiscriminator, Refiner, RefinerConfig};
use p2v::style::{adain, csl_loss, csl_loss_grad, StyleCode};
use p2v::tensor_io::{read_image, read_volume, z_mean_projection, DatasetManifest, Image2D, Volume3D};
use p2v_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn rel_err(num: f64, ana: f64, floor: f64) -> f64 {
    (num - ana).abs() / num.abs().max(ana.abs()).max(floor)
}

fn tps_exactness() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut pts = |k: usize| (0..k).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect::<Vec<[f64; 2]>>();
    let mut worst_ctrl = 0.0f64;
    let mut rd = ChaCha8Rng::seed_from_u64(2);
    for k in [4, 6, 9, 16, 25] {
        let p = pts(k);
        let d: Vec<[f64; 2]> = (0..k).map(|_| [rd.random_range(-0.1..0.1), rd.random_range(-0.1..0.1)]).collect();
        let w = fit_tps(&p, &d).map_err(|e| e.to_string())?;
        for (c, t) in p.iter().zip(&d) {
            let q = w.apply(*c);
            worst_ctrl = worst_ctrl.max((q[0] - c[0] - t[0]).abs()).max((q[1] - c[1] - t[1]).abs());
        }
    }
    let a = [[0.02, 1.1, -0.2], [-0.03, 0.15, 0.9]];
    let map = |p: [f64; 2]| [a[0][0] + a[0][1] * p[0] + a[0][2] * p[1], a[1][0] + a[1][1] * p[0] + a[1][2] * p[1]];
    let ctrl = pts(12);
    let disp: Vec<[f64; 2]> = ctrl.iter().map(|&p| [map(p)[0] - p[0], map(p)[1] - p[1]]).collect();
    let w = fit_tps(&ctrl, &disp).map_err(|e| e.to_string())?;
    let mut worst_affine = 0.0f64;
    for p in pts(1000) {
        let (q, e) = (w.apply(p), map(p));
        worst_affine = worst_affine.max((q[0] - e[0]).abs()).max((q[1] - e[1]).abs());
    }
    let z = fit_tps(&ctrl, &vec![[0.0; 2]; 12]).map_err(|e| e.to_string())?;
    let identity = z.affine == [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] && z.weights.iter().all(|v| *v == [0.0, 0.0]);
    check(
        worst_ctrl < 1e-8 && worst_affine < 1e-8 && identity,
        format!("control max err {worst_ctrl:.2e}, affine max err {worst_affine:.2e} over 1000 points, zero->identity {identity}"),
    )
}

fn channel_stats(data: &[f32], c: usize) -> Vec<(f64, f64)> {
    let plane = data.len() / c;
    (0..c)
        .map(|k| {
            let xs = &data[k * plane..(k + 1) * plane];
            let m = xs.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / plane as f64;
            (m, var.sqrt())
        })
        .collect()
}

fn adain_statistics() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (mut wm, mut ws, mut wi) = (0.0f64, 0.0f64, 0.0f32);
    for _ in 0..100 {
        let (c, h, w) = (r.random_range(1..6), r.random_range(3..12), r.random_range(3..12));
        let x = Tensor::from_fn(&[c, h, w], |_| r.random_range(-3.0..3.0));
        let mean: Vec<f32> = (0..c).map(|_| r.random_range(-5.0..5.0)).collect();
        let std: Vec<f32> = (0..c).map(|_| r.random_range(0.1..3.0)).collect();
        let y = adain(&x, &mean, &std, 1e-5).map_err(|e| e.to_string())?;
        for (k, (m, s)) in channel_stats(y.data(), c).into_iter().enumerate() {
            wm = wm.max((m - mean[k] as f64).abs());
            ws = ws.max((s - std[k] as f64).abs());
        }
        // Identity: the input's own statistics (std including eps).
        let own = channel_stats(x.data(), c);
        let m: Vec<f32> = own.iter().map(|s| s.0 as f32).collect();
        let s: Vec<f32> = own.iter().map(|s| (s.1 * s.1 + 1e-5).sqrt() as f32).collect();
        let same = adain(&x, &m, &s, 1e-5).map_err(|e| e.to_string())?;
        wi = x.data().iter().zip(same.data()).fold(wi, |acc, (a, b)| acc.max((a - b).abs()));
    }
    check(
        wm < 1e-5 && ws < 1e-4 && wi < 1e-5,
        format!("100 tensors: mean err {wm:.2e}, std err {ws:.2e}, identity err {wi:.2e}"),
    )
}

fn csl_closed_forms() -> Outcome {
    let basis = |dim: usize, i: usize| {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        StyleCode(v)
    };
    let mut worst_closed = 0.0f64;
    for m in [1usize, 5, 15] {
        let negs: Vec<StyleCode> = (0..m).map(|j| basis(m + 2, j + 2)).collect();
        let l = csl_loss(&basis(m + 2, 0), &basis(m + 2, 1), &negs, 0.07).map_err(|e| e.to_string())?;
        worst_closed = worst_closed.max((l - ((m + 1) as f64).ln()).abs());
    }
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut code = || (0..8).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (a, p) = (code(), code());
    let negs: Vec<Vec<f64>> = (0..5).map(|_| code()).collect();
    let t = 0.5;
    let (_, g) = csl_loss_grad(&a, &p, &negs, t).map_err(|e| e.to_string())?;
    let f = |a: &[f64], p: &[f64], n: &[Vec<f64>]| csl_loss_grad(a, p, n, t).unwrap().0;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..8 {
        let (mut x, mut y) = (a.clone(), a.clone());
        x[i] += h;
        y[i] -= h;
        worst = worst.max(rel_err((f(&x, &p, &negs) - f(&y, &p, &negs)) / (2.0 * h), g.anchor[i], 1e-3));
        let (mut x, mut y) = (p.clone(), p.clone());
        x[i] += h;
        y[i] -= h;
        worst = worst.max(rel_err((f(&a, &x, &negs) - f(&a, &y, &negs)) / (2.0 * h), g.positive[i], 1e-3));
        for j in 0..negs.len() {
            let (mut x, mut y) = (negs.clone(), negs.clone());
            x[j][i] += h;
            y[j][i] -= h;
            worst = worst.max(rel_err((f(&a, &p, &x) - f(&a, &p, &y)) / (2.0 * h), g.negatives[j][i], 1e-3));
        }
    }
    check(
        worst_closed < 1e-6 && worst < 1e-6,
        format!("ln(m+1) max err {worst_closed:.2e} for m in {{1,5,15}}, gradient rel err {worst:.2e}"),
    )
}

fn ssim_checks() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let img = Image2D::new(24, 20, (0..480).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let vol = Volume3D::new(8, 12, 12, (0..1152).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let self_err = (ssim2d(&img, &img).unwrap() - 1.0).abs().max((ssim3d(&vol, &vol).unwrap() - 1.0).abs());

    let (a, b) = (Image2D::constant(16, 16, 0.2).unwrap(), Image2D::constant(16, 16, 0.8).unwrap());
    let c1 = SsimParams::C1;
    let hand = (2.0 * 0.2 * 0.8 + c1) / (0.2 * 0.2 + 0.8 * 0.8 + c1);
    let const_err = (ssim2d(&a, &b).unwrap() - hand).abs();

    let dims = [4, 4, 4];
    let p = SsimParams::volumetric();
    let x: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
    let (_, g) = ssim_values_grad(&x, &y, dims, &p).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..64 {
        let (mut u, mut d) = (x.clone(), x.clone());
        u[i] += h;
        d[i] -= h;
        let num = (ssim_values(&u, &y, dims, &p).unwrap() - ssim_values(&d, &y, dims, &p).unwrap()) / (2.0 * h);
        worst = worst.max(rel_err(num, g[i], 1e-6));
    }
    check(
        self_err < 1e-9 && const_err < 1e-6 && worst < 1e-4,
        format!("ssim(a,a) err {self_err:.2e}, constant case err {const_err:.2e}, 4x4x4 gradient rel err {worst:.2e}"),
    )
}

fn frechet_checks() -> Outcome {
    let stats = |m: Vec<f64>, d: Vec<f64>| GaussianStats { mean: DVector::from_vec(m), cov: DMatrix::from_diagonal(&DVector::from_vec(d)) };
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let feats = |r: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
        (0..40).map(|_| (0..6).map(|j| shift + r.random_range(-1.0..1.0) * (1.0 + 0.2 * j as f64)).collect()).collect()
    };
    let (fa, fb) = (feats(&mut r, 0.0), feats(&mut r, 0.5));
    let same = frechet_from_features(&fa, &fa).map_err(|e| e.to_string())?;
    let one_d = frechet_distance(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![1.0])).map_err(|e| e.to_string())?;
    let two_d = frechet_distance(&stats(vec![0.0, 0.0], vec![1.0, 4.0]), &stats(vec![0.0, 0.0], vec![4.0, 1.0]))
        .map_err(|e| e.to_string())?;
    let asym = (frechet_from_features(&fa, &fb).unwrap() - frechet_from_features(&fb, &fa).unwrap()).abs();
    check(
        same.abs() < 1e-8 && (one_d - 1.0).abs() < 1e-10 && (two_d - 2.0).abs() < 1e-8 && asym < 1e-8,
        format!("identical {same:.2e}, 1D {one_d:.12}, diagonal 2D {two_d:.10}, asymmetry {asym:.2e}"),
    )
}

/// Every distinct score (plus +-inf) as a threshold, counted directly.
fn brute_roc(s: &ScoreSet) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    ts.extend([f64::NEG_INFINITY, f64::INFINITY]);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.iter()
        .map(|&t| {
            let far = s.impostor.iter().filter(|&&v| v >= t).count() as f64 / s.impostor.len() as f64;
            let frr = s.genuine.iter().filter(|&&v| v < t).count() as f64 / s.genuine.len() as f64;
            (far, frr)
        })
        .collect()
}

fn brute_eer(s: &ScoreSet) -> f64 {
    let pts = brute_roc(s);
    for i in 0..pts.len() {
        let d = pts[i].0 - pts[i].1;
        if d == 0.0 {
            return pts[i].0;
        }
        if d < 0.0 {
            let dp = pts[i - 1].0 - pts[i - 1].1;
            return pts[i - 1].0 + dp / (dp - d) * (pts[i].0 - pts[i - 1].0);
        }
    }
    unreachable!()
}

fn brute_tar(s: &ScoreSet, far: f64) -> f64 {
    let pts = brute_roc(s);
    let i = pts.iter().position(|p| p.0 <= far).unwrap();
    if pts[i].0 == far || i == 0 {
        return 1.0 - pts[i].1;
    }
    let t = (far - pts[i].0) / (pts[i - 1].0 - pts[i].0);
    1.0 - (pts[i].1 + t * (pts[i - 1].1 - pts[i].1))
}

fn eer_tar_checks() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (ng, ni) = (r.random_range(2..100), r.random_range(2..100));
        let sep = r.random_range(-0.3..0.6);
        let coarse = r.random_bool(0.5);
        let mut draw = |off: f64| {
            let v: f64 = r.random_range(0.0..1.0) + off;
            if coarse { (v * 20.0).round() / 20.0 } else { v }
        };
        let s = ScoreSet { genuine: (0..ng).map(|_| draw(sep)).collect(), impostor: (0..ni).map(|_| draw(0.0)).collect() };
        worst = worst.max((eer(&s).unwrap() - brute_eer(&s)).abs());
        for far in [0.01, 0.1, 0.25] {
            worst = worst.max((tar_at_far(&s, far).unwrap() - brute_tar(&s, far)).abs());
        }
    }
    let separated = eer(&ScoreSet { genuine: vec![0.9, 0.8, 0.95], impostor: vec![0.1, 0.2, 0.3] }).unwrap();
    let identical = eer(&ScoreSet { genuine: vec![0.5; 20], impostor: vec![0.5; 20] }).unwrap();
    check(
        worst < 1e-9 && separated == 0.0 && (identical - 0.5).abs() < 1e-12,
        format!("50 score sets vs brute-force sweep: max err {worst:.2e}; separated EER {separated}, identical EER {identical}"),
    )
}

fn shape_contracts() -> Outcome {
    let small = ExpansionNet::new(ExpansionConfig { base_channels: 2, ..ExpansionConfig::default() }).map_err(|e| e.to_string())?;
    let desk = small.forward(&Image2D::constant(64, 64, 0.5).unwrap()).map_err(|e| e.to_string())?.dims();
    let full = ExpansionNet::new(ExpansionConfig { base_channels: 1, ..ExpansionConfig::full_scale() }).map_err(|e| e.to_string())?;
    let img = Image2D::from_fn(256, 256, |y, x| ((x * 3 + y) % 11) as f32 / 10.0).unwrap();
    let full_dims = full.forward(&img).map_err(|e| e.to_string())?.dims();

    let rcfg = RefinerConfig { base_channels: 2, disc_channels: 2, ..RefinerConfig::default() };
    let refiner = Refiner::new(rcfg, [8, 64, 64]).map_err(|e| e.to_string())?;
    let v = Volume3D::new(8, 64, 64, (0..8 * 64 * 64).map(|i| (i % 13) as f32 / 12.0).collect()).unwrap();
    let refined = refiner.refine(&v, 0).map_err(|e| e.to_string())?;
    let in_range = refined.values().iter().all(|x| (0.0..=1.0).contains(x));

    // floor((n + 2p - k) / s) + 1 over four k4 s2 p1 layers; unit axes stay 1.
    let oracle = |dims: [usize; 3]| {
        dims.map(|mut n| {
            for _ in 0..4 {
                n = if n + 2 >= 4 { (n + 2 - 4) / 2 + 1 } else { 1 };
            }
            n
        })
    };
    let mut grids = Vec::new();
    for dims in [[8, 64, 64], [32, 256, 256]] {
        let closed = patch_grid(dims).map_err(|e| e.to_string())?;
        let mut g = p2v_nn::Graph::new(false);
        let x = g.input(Tensor::zeros(&[1, 1, dims[0], dims[1], dims[2]]));
        let y = PatchDiscriminator::new(1, 1, 0).forward(&mut g, x).map_err(|e| e.to_string())?;
        let actual = g.shape(y)[2..].to_vec();
        grids.push((dims, closed, oracle(dims), actual));
    }
    let grids_ok = grids.iter().all(|(_, c, o, a)| c == o && a.as_slice() == c.as_slice());
    check(
        desk == (8, 64, 64) && full_dims == (32, 256, 256) && refined.dims() == v.dims() && in_range && grids_ok,
        format!(
            "expansion 64x64 -> {desk:?}, 256x256 -> {full_dims:?}; refiner {:?} -> {:?}; patch grids {:?}",
            v.dims(),
            refined.dims(),
            grids.iter().map(|(d, c, _, _)| (d[1], *c)).collect::<Vec<_>>()
        ),
    )
}

fn loss_plumbing() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut worst_parts = 0.0f64;
    for _ in 0..5 {
        let pred = Volume3D::new(4, 8, 8, (0..256).map(|_| r.random_range(0.01..0.99)).collect()).unwrap();
        let real = Volume3D::new(4, 8, 8, (0..256).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let bce = pred
            .values()
            .iter()
            .zip(real.values())
            .map(|(&p, &y)| {
                let (p, y) = (p as f64, y as f64);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 256.0;
        let oracle = bce + 1.0 - ssim3d(&pred, &real).unwrap();
        worst_parts = worst_parts.max((expansion_loss(&pred, &real).map_err(|e| e.to_string())? - oracle).abs());
    }

    let (obj, _, _) = refiner_objective_grad(&[0.0; 16], &[0.0; 32], &[0.1; 32], 10.0);
    let obj_err = (obj - (std::f64::consts::LN_2 + 1.0)).abs();

    let h = 1e-6;
    let dims = [2, 4, 4];
    let pred: Vec<f64> = (0..32).map(|_| r.random_range(0.05..0.95)).collect();
    let real: Vec<f64> = (0..32).map(|_| r.random_range(0.0..1.0)).collect();
    let (_, g) = expansion_loss_grad(&pred, &real, dims).map_err(|e| e.to_string())?;
    let f = |p: &[f64]| expansion_loss_grad(p, &real, dims).unwrap().0.total;
    let mut worst_grad = 0.0f64;
    for i in 0..32 {
        let (mut a, mut b) = (pred.clone(), pred.clone());
        a[i] += h;
        b[i] -= h;
        worst_grad = worst_grad.max(rel_err((f(&a) - f(&b)) / (2.0 * h), g[i], 1e-10));
    }
    let logits: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
    let (_, dl, dp) = refiner_objective_grad(&logits, &real, &pred, 10.0);
    let fo = |l: &[f64], p: &[f64]| refiner_objective_grad(l, &real, p, 10.0).0;
    for i in 0..4 {
        let (mut a, mut b) = (logits.clone(), logits.clone());
        a[i] += h;
        b[i] -= h;
        worst_grad = worst_grad.max(rel_err((fo(&a, &pred) - fo(&b, &pred)) / (2.0 * h), dl[i], 1e-10));
    }
    for i in 0..32 {
        let (mut a, mut b) = (pred.clone(), pred.clone());
        a[i] += h;
        b[i] -= h;
        worst_grad = worst_grad.max(rel_err((fo(&logits, &a) - fo(&logits, &b)) / (2.0 * h), dp[i], 1e-10));
    }
    check(
        worst_parts < 1e-8 && obj_err < 1e-8 && worst_grad < 1e-4,
        format!("components err {worst_parts:.2e}, ln2+1 err {obj_err:.2e}, gradient rel err {worst_grad:.2e}"),
    )
}

struct Smoke {
    pipeline: Pipeline,
    elapsed: Duration,
    report: p2v::pipeline::EvaluationReport,
}

fn run_smoke(out: &Path) -> Result<Smoke, String> {
    let start = Instant::now();
    let p = Pipeline::new(PipelineConfig::default(), out, 1).map_err(|e| e.to_string())?;
    let step = |name: &str, t: Instant| println!("    {name} done at {:.0} s", t.elapsed().as_secs_f64());
    p.make_phantoms().map_err(|e| e.to_string())?;
    step("make-phantoms", start);
    for s in [Stage::Style, Stage::Expansion, Stage::Refiner] {
        p.train(s).map_err(|e| e.to_string())?;
        step(&format!("train {}", s.name()), start);
    }
    let syn = &p.config.synthesis;
    p.synthesize(syn.identities, syn.impressions).map_err(|e| e.to_string())?;
    step("synthesize", start);
    let report = p.evaluate(p.phantoms_dir(), p.synth_dir()).map_err(|e| e.to_string())?;
    p.write_report(&report).map_err(|e| e.to_string())?;
    step("evaluate", start);
    Ok(Smoke { elapsed: start.elapsed(), pipeline: p, report })
}

fn loss_totals(path: PathBuf) -> Result<Vec<f64>, String> {
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    text.lines().skip(1).map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or(format!("bad row {l}"))).collect()
}

fn smoke_training(s: &Smoke) -> Outcome {
    let p = &s.pipeline;
    let mut parts = Vec::new();
    let mut ok = s.elapsed < Duration::from_secs(15 * 60);
    for stage in [Stage::Style, Stage::Expansion, Stage::Refiner] {
        let t = loss_totals(p.loss_path(stage))?;
        let (first, last) = (t[0], t[t.len() - 1]);
        ok &= t.len() == 5 && last < first;
        parts.push(format!("{} {first:.4}->{last:.4}", stage.name()));
    }
    let synth = DatasetManifest::load(p.synth_dir()).map_err(|e| e.to_string())?;
    let dims = p.config.resolution();
    let mut volumes_ok = !synth.entries.is_empty();
    for e in &synth.entries {
        let v = read_volume(synth.path(e, "refined").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        volumes_ok &= v.dims() == (dims[0], dims[1], dims[2]) && v.values().iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x));
    }
    check(
        ok && volumes_ok,
        format!(
            "{:.0} s total; losses {}; {} refined volumes valid: {volumes_ok}",
            s.elapsed.as_secs_f64(),
            parts.join(", "),
            synth.entries.len()
        ),
    )
}

fn smoke_fvd(s: &Smoke) -> Outcome {
    let r = &s.report;
    let p = &s.pipeline;
    let same = p.evaluate(p.phantoms_dir(), p.phantoms_dir()).map_err(|e| e.to_string())?;
    let worst_same = [same.fvd_structural, same.fvd_refined, same.fid_structural, same.fid_refined]
        .into_iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    check(
        r.fvd_refined <= r.fvd_structural && worst_same < 1e-6,
        format!(
            "fvd structural {:.6} refined {:.6} (fid {:.6} / {:.6}); identical-set max {worst_same:.2e}",
            r.fvd_structural, r.fvd_refined, r.fid_structural, r.fid_refined
        ),
    )
}

fn smoke_zmean_ssim(s: &Smoke) -> Outcome {
    let p = &s.pipeline;
    let m = DatasetManifest::load(p.phantoms_dir()).map_err(|e| e.to_string())?;
    let (_, held_out) = p.split(&m);
    let net = ExpansionNet::load(p.checkpoint_path(Stage::Expansion)).map_err(|e| e.to_string())?;
    let mut scores = Vec::new();
    for e in &held_out {
        let template = read_image(m.path(e, "zmean").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let v = net.forward(&template).map_err(|e| e.to_string())?;
        scores.push(ssim2d(&z_mean_projection(&v), &template).map_err(|e| e.to_string())?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    check(!scores.is_empty() && mean > 0.6, format!("{} held-out phantoms: mean SSIM {mean:.4}, min {min:.4}", scores.len()))
}

fn all_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// The full command chain twice, on a reduced configuration so the
/// acceptance run stays within budget, with different worker counts.
fn determinism() -> Outcome {
    let mut c = PipelineConfig::default();
    c.seed = 5;
    c.dataset.identities = 8;
    c.dataset.impressions = 2;
    c.training.train_pairs = 12;
    c.training.pool_per_category = 2;
    c.style.base_channels = 4;
    c.style.negatives = 3;
    c.expansion.base_channels = 4;
    c.refiner.base_channels = 4;
    for e in [&mut c.style.epochs, &mut c.expansion.epochs, &mut c.refiner.epochs] {
        *e = 2;
    }
    c.evaluation.recognition_epochs = 2;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, workers) in dirs.iter().zip([1, 3]) {
        let p = Pipeline::new(c.clone(), dir.path(), workers).map_err(|e| e.to_string())?;
        p.make_phantoms().map_err(|e| e.to_string())?;
        for s in [Stage::Style, Stage::Expansion, Stage::Refiner] {
            p.train(s).map_err(|e| e.to_string())?;
        }
        p.synthesize(3, 2).map_err(|e| e.to_string())?;
        let report = p.evaluate(p.phantoms_dir(), p.synth_dir()).map_err(|e| e.to_string())?;
        p.write_report(&report).map_err(|e| e.to_string())?;
    }
    let (a, b) = (all_files(dirs[0].path()), all_files(dirs[1].path()));
    let differing: Vec<_> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let bytes: usize = a.values().map(Vec::len).sum();
    check(
        a.len() == b.len() && differing.is_empty(),
        format!("{} files ({bytes} bytes) compared across two runs, differing: {differing:?}", a.len()),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // Under `cargo test -- --list` and similar, report no tests.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        match &o {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => println!("criterion {n:>2} FAIL  {name}: {d}"),
        }
        results.push((n, name, o));
    };
    record(1, "TPS exactness", tps_exactness());
    record(2, "AdaIN statistics", adain_statistics());
    record(3, "CSL closed forms", csl_closed_forms());
    record(4, "SSIM", ssim_checks());
    record(5, "Frechet distance", frechet_checks());
    record(6, "EER/TAR", eer_tar_checks());
    record(7, "shape contracts", shape_contracts());
    record(8, "loss plumbing", loss_plumbing());

    let dir = tempfile::tempdir().unwrap();
    println!("    smoke run (64 identities x 4 impressions, 5 epochs per stage)");
    match run_smoke(dir.path()) {
        Ok(s) => {
            record(9, "end-to-end smoke", smoke_training(&s));
            record(10, "refined FVD not above structural", smoke_fvd(&s));
            record(11, "z-mean SSIM of expansion", smoke_zmean_ssim(&s));
        }
        Err(e) => {
            for (n, name) in [(9, "end-to-end smoke"), (10, "refined FVD not above structural"), (11, "z-mean SSIM of expansion")] {
                record(n, name, Err(format!("smoke run failed: {e}")));
            }
        }
    }
    record(12, "determinism", determinism());

    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("\nacceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        std::process::exit(1);
    }
}
