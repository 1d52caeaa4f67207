use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use lownoise::config::ProbeConfig;
use lownoise::manifest::Manifest;
use lownoise::pipeline::{execute, load_probe, Command, ProbeSummary};
use lownoise::{ExperimentConfig, Stage};
use lownoise_core::metrics::{euclidean, norm};
use lownoise_core::mixtures::{corrupt, make_catalog, CatalogName, GaussianMixture};
use lownoise_core::models::{Activation, Conditioning, NetworkParams};
use lownoise_core::objectives::{
    ncsn_loss_grad, recon_loss_grad, ssm_loss_grad, NcsnWeighting, ObjectiveKind, DEFAULT_LADDER,
};
use lownoise_core::probes::{close_fraction, ProbeReport, Selector, StepSelector};
use lownoise_core::rng::{derive_seed, rng_from_seed, standard_normal_vec};
use lownoise_core::sampler::{run_trajectory, AnalyticField, NoiseSchedule, RunOptions};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Bump when training code changes so cached checkpoints are not reused.
const TRAINING_REVISION: u32 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> Outcome;

fn cache_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(format!("r{TRAINING_REVISION}"))
        .join(name)
}

fn run_config(name: &str, json: &str) -> (ExperimentConfig, PathBuf) {
    let cfg = ExperimentConfig::from_json(json).expect("valid config");
    let root = cache_dir(name);
    let t = Instant::now();
    execute(Command::Run, &cfg, &root).unwrap_or_else(|e| panic!("{name}: {e}"));
    eprintln!(
        "  [{name}] pipeline finished in {:.1}s",
        t.elapsed().as_secs_f64()
    );
    (cfg, root)
}

fn probe(
    cfg: &ExperimentConfig,
    root: &Path,
    objective: ObjectiveKind,
    size: usize,
    index: usize,
) -> ProbeSummary {
    let p: &ProbeConfig = &cfg.probes[index];
    load_probe(cfg, root, objective, size, p, Stage::Report).expect("probe outputs")
}

fn stat(
    report: &ProbeReport,
    metric: &str,
    sigma: Option<f64>,
    group: Option<&str>,
    steps: StepSelector,
) -> (f64, f64) {
    let s = report.summary(&Selector::new(metric, sigma, group, steps));
    (s.mean, s.median)
}

// ---------------------------------------------------------------- 1

fn c1_analytic_score() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut where_ = String::new();
    for name in CatalogName::ALL {
        let g = make_catalog(name, 0).unwrap();
        for sigma in DEFAULT_LADDER {
            let sm = g.smoothed(sigma).unwrap();
            let pts = g
                .smoothed_mixture(sigma)
                .unwrap()
                .sample(100, derive_seed(1, name.as_str(), sigma.to_bits()))
                .unwrap();
            let h = 1e-5 * (sigma * sigma + 0.01).sqrt();
            for x in &pts {
                let s = sm.score(x).unwrap();
                let fd: Vec<f64> = (0..x.len())
                    .map(|k| {
                        let (mut p, mut m) = (x.clone(), x.clone());
                        p[k] += h;
                        m[k] -= h;
                        (sm.log_density(&p).unwrap() - sm.log_density(&m).unwrap()) / (2.0 * h)
                    })
                    .collect();
                let rel = euclidean(&fd, &s) / norm(&s);
                if rel > worst {
                    worst = rel;
                    where_ = format!("{name} sigma {sigma}");
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} ({where_}), {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn c2_convolution() -> Outcome {
    let sigma = 0.1;
    let draws = 100_000;
    let mut worst = 0.0f64;
    let mut failures = 0;
    for name in [
        CatalogName::Uniform,
        CatalogName::SharpCov,
        CatalogName::Spiral,
    ] {
        let g = make_catalog(name, 0).unwrap();
        let clean = g.smoothed(0.0).unwrap();
        let pts = g
            .smoothed_mixture(sigma)
            .unwrap()
            .sample(20, derive_seed(2, name.as_str(), 0))
            .unwrap();
        for (i, x) in pts.iter().enumerate() {
            let exact = g.smoothed_log_density(x, sigma).unwrap().exp();
            let mut rng = rng_from_seed(derive_seed(2, name.as_str(), i as u64 + 1));
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..draws {
                let e = standard_normal_vec(&mut rng, x.len());
                let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a - sigma * b).collect();
                let p = clean.log_density(&y).unwrap().exp();
                sum += p;
                sq += p * p;
            }
            let n = draws as f64;
            let mean = sum / n;
            let se = ((sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
            let z = (exact - mean).abs() / se;
            worst = worst.max(z);
            if z > 3.0 {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0,
        format!("{failures}/60 points beyond 3 SE, max |z| {worst:.2}"),
    )
}

// ---------------------------------------------------------------- 3

fn random_net(seed: u64) -> NetworkParams {
    NetworkParams::init(&[3, 64, 64, 2], Activation::Silu, seed)
        .unwrap()
        .with_conditioning(Conditioning::from_ladder(&DEFAULT_LADDER).unwrap())
}

fn bump(
    net: &NetworkParams,
    layer: usize,
    row: usize,
    col: Option<usize>,
    h: f64,
) -> NetworkParams {
    let mut p = net.clone();
    let l = &mut p.layers_mut()[layer];
    match col {
        Some(c) => l.weight[[row, c]] += h,
        None => l.bias[row] += h,
    }
    p
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = rng_from_seed(3);
    let batch: Vec<Vec<f64>> = (0..8).map(|_| standard_normal_vec(&mut rng, 2)).collect();
    let sigmas: Vec<f64> = (0..8)
        .map(|_| DEFAULT_LADDER[rng.random_range(0..DEFAULT_LADDER.len())])
        .collect();
    let mut worst = [0.0f64; 4];
    let h = 1e-5;
    for (k, tol) in [1e-4, 1e-4, 1e-3].into_iter().enumerate() {
        let net = random_net(30 + k as u64);
        let loss = |n: &NetworkParams| match k {
            0 => recon_loss_grad(n, &batch, &sigmas, 9).unwrap(),
            1 => ncsn_loss_grad(n, &batch, &sigmas, NcsnWeighting::SigmaSquared, 9).unwrap(),
            _ => ssm_loss_grad(n, &batch, &sigmas, 2, 9).unwrap(),
        };
        let g = loss(&net);
        for _ in 0..20 {
            let layer = rng.random_range(0..net.layers().len());
            let (rows, cols) = net.layers()[layer].weight.dim();
            let row = rng.random_range(0..rows);
            let col = rng.random_bool(0.8).then(|| rng.random_range(0..cols));
            let fd = (loss(&bump(&net, layer, row, col, h)).loss
                - loss(&bump(&net, layer, row, col, -h)).loss)
                / (2.0 * h);
            let an = match col {
                Some(c) => g.weights[layer][[row, c]],
                None => g.biases[layer][row],
            };
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst[k] = worst[k].max(err / tol);
        }
    }
    let net = random_net(40);
    for _ in 0..20 {
        let x = standard_normal_vec(&mut rng, 2);
        let v = standard_normal_vec(&mut rng, 2);
        let sigma = DEFAULT_LADDER[rng.random_range(0..DEFAULT_LADDER.len())];
        let jv = net.jvp_input(&x, sigma, &v).unwrap();
        let shift = |s: f64| -> Vec<f64> {
            let p: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            net.forward(&p, sigma).unwrap()
        };
        let (fp, fm) = (shift(h), shift(-h));
        let fd: Vec<f64> = fp
            .iter()
            .zip(&fm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let err = euclidean(&fd, &jv) / norm(&fd).max(norm(&jv)).max(1e-6);
        worst[3] = worst[3].max(err / 1e-4);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst.iter().all(|w| *w <= 1.0) && secs < 60.0,
        format!(
            "error/tolerance: recon {:.2e}, ncsn {:.2e}, ssm {:.2e}, jvp {:.2e}; {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c4_corruption_norm() -> Outcome {
    let x0 = vec![0.0; 6400];
    let total: f64 = (0..200)
        .map(|i| norm(&corrupt(&x0, 0.1, derive_seed(4, "draw", i)).unwrap()))
        .sum();
    let mean = total / 200.0;
    outcome(
        (7.9..=8.1).contains(&mean),
        format!("mean noise norm {mean:.4}"),
    )
}

// ---------------------------------------------------------------- 5, 7, 8

const UNIFORM_NCSN: &str = r#"{
    "catalog": "Uniform",
    "objectives": [{"kind": "NCSN"}],
    "sizes": [100, 50000, 100000],
    "sigma_list": [0.001, 0.1, 1.0],
    "probes": [
        {"kind": "consistency"},
        {"kind": "score_accuracy", "params": {"n_eval": 2000}}
    ]
}"#;

fn uniform_ncsn() -> (ExperimentConfig, PathBuf) {
    run_config("uniform_ncsn", UNIFORM_NCSN)
}

fn c5_training_sanity() -> Outcome {
    let t = Instant::now();
    let (cfg, root) = uniform_ncsn();
    let r = probe(&cfg, &root, ObjectiveKind::Ncsn, 100_000, 1).report;
    let (_, err) = stat(
        &r,
        "score_error",
        Some(0.1),
        Some("Close"),
        StepSelector::Scalar,
    );
    let (_, truth) = stat(
        &r,
        "true_score_norm",
        Some(0.1),
        Some("Close"),
        StepSelector::Scalar,
    );
    let rel = err / truth;
    outcome(
        rel <= 0.3,
        format!(
            "Close-bin relative score error {rel:.4} at sigma 0.1 (pipeline run {:.0}s)",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn c7_noise_trend() -> Outcome {
    let (cfg, root) = uniform_ncsn();
    let r = probe(&cfg, &root, ObjectiveKind::Ncsn, 50_000, 0).report;
    let (cos_hi, _) = stat(
        &r,
        "cosine_similarity",
        Some(1.0),
        None,
        StepSelector::Final,
    );
    let (cos_lo, _) = stat(
        &r,
        "cosine_similarity",
        Some(0.001),
        None,
        StepSelector::Final,
    );
    let (l2_hi, _) = stat(
        &r,
        "final_l2_normalized",
        Some(1.0),
        None,
        StepSelector::Scalar,
    );
    let (l2_lo, _) = stat(
        &r,
        "final_l2_normalized",
        Some(0.001),
        None,
        StepSelector::Scalar,
    );
    outcome(
        cos_hi > cos_lo && l2_lo > l2_hi,
        format!(
            "cosine {cos_hi:.4} (sigma 1) vs {cos_lo:.4} (sigma 0.001); normalized L2 {l2_lo:.3e} (sigma 0.001) vs {l2_hi:.3e} (sigma 1)"
        ),
    )
}

fn c8_size_trend() -> Outcome {
    let (cfg, root) = uniform_ncsn();
    let at = |size| {
        let r = probe(&cfg, &root, ObjectiveKind::Ncsn, size, 0).report;
        stat(
            &r,
            "mean_l2_divergence",
            Some(0.001),
            None,
            StepSelector::Scalar,
        )
        .0
    };
    let (small, large) = (at(100), at(100_000));
    outcome(
        large < small,
        format!("low-noise mean divergence {small:.4e} at 100, {large:.4e} at 100000"),
    )
}

// ---------------------------------------------------------------- 6

fn c6_far_bin() -> Outcome {
    let (cfg, root) = run_config(
        "sharpcov",
        r#"{
            "catalog": "SharpCov",
            "objectives": [{"kind": "Reconstruction"}, {"kind": "NCSN"}, {"kind": "SSM"}],
            "sizes": [10000],
            "sigma_list": [0.1],
            "probes": [{"kind": "score_accuracy", "params": {"n_eval": 20000}}]
        }"#,
    );
    let far = |k| {
        let r = probe(&cfg, &root, k, 10_000, 0).report;
        let s = r.summary(&Selector::new(
            "score_error",
            Some(0.1),
            Some("Far"),
            StepSelector::Scalar,
        ));
        (s.median, s.count)
    };
    let (recon, n) = far(ObjectiveKind::Reconstruction);
    let (ncsn, _) = far(ObjectiveKind::Ncsn);
    let (ssm, _) = far(ObjectiveKind::Ssm);
    outcome(
        n > 0 && ncsn < recon && ssm < recon,
        format!(
            "Far-bin median error ({n} points): Recon {recon:.3}, NCSN {ncsn:.3}, SSM {ssm:.3}"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_attractor() -> Outcome {
    let (cfg, root) = run_config(
        "uniform_recon",
        r#"{
            "catalog": "Uniform",
            "objectives": [{"kind": "Reconstruction"}],
            "sizes": [10, 50000],
            "sigma_list": [0.1],
            "probes": [{"kind": "attractor", "params": {"samples": 200, "sigma": 0.1}}]
        }"#,
    );
    let ratio = |size| {
        let r = probe(&cfg, &root, ObjectiveKind::Reconstruction, size, 0).report;
        let (_, oo) = stat(&r, "d_o1_o2", Some(0.1), None, StepSelector::Scalar);
        let (_, xo) = stat(&r, "d_x_o1", Some(0.1), None, StepSelector::Scalar);
        oo / xo
    };
    let (small, large) = (ratio(10), ratio(50_000));
    outcome(
        small < 0.25 && large > small,
        format!("median d(o1,o2)/d(x,o1): {small:.4} at 10, {large:.4} at 50000"),
    )
}

// ---------------------------------------------------------------- 10

fn endpoint_error(eta: f64, horizon: f64) -> f64 {
    let g = Arc::new(
        GaussianMixture::new(
            vec![1.0],
            vec![DVector::zeros(2)],
            vec![DMatrix::identity(2, 2)],
        )
        .unwrap(),
    );
    let field = AnalyticField::new(g);
    let steps = (horizon / eta).round() as usize;
    let schedule = NoiseSchedule::constant(1.0, eta, 0.0).unwrap();
    let x0 = vec![1.5, -0.7];
    let traj = run_trajectory(&field, &x0, &schedule, &RunOptions::new(steps, 0.0), None).unwrap();
    assert_eq!(traj.steps(), steps);
    // Smoothed score at σ = 1 is −x/2, so the flow is ẋ = −x/2.
    let decay = (-0.5 * steps as f64 * eta).exp();
    let exact: Vec<f64> = x0.iter().map(|v| v * decay).collect();
    euclidean(traj.final_state(), &exact)
}

fn c10_integrator_order() -> Outcome {
    let errs: Vec<f64> = [0.2, 0.1, 0.05]
        .iter()
        .map(|e| endpoint_error(*e, 2.0))
        .collect();
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    outcome(
        ratios.iter().all(|r| (1.7..=2.3).contains(r)),
        format!("error ratios {:.3}, {:.3}", ratios[0], ratios[1]),
    )
}

// ---------------------------------------------------------------- 11

fn c11_determinism() -> Outcome {
    let cfg = ExperimentConfig::from_json(
        r#"{
            "catalog": "SharpCov",
            "objectives": [{"kind": "Reconstruction"}, {"kind": "NCSN"}, {"kind": "SSM"}],
            "train": {"epochs": 3, "batch_size": 32},
            "sampler": {"steps": 30, "max_steps": 40},
            "sizes": [10, 100],
            "sigma_list": [0.001, 0.1, 1.0],
            "probes": [
                {"kind": "consistency", "params": {"samples": 10}},
                {"kind": "denoising_performance", "params": {"samples": 10}},
                {"kind": "attractor", "params": {"samples": 10}},
                {"kind": "score_accuracy", "params": {"n_eval": 100}},
                {"kind": "trajectory_comparison", "params": {"samples": 5}}
            ]
        }"#,
    )
    .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    execute(Command::Run, &cfg, a.path()).unwrap();
    execute(Command::Run, &cfg, b.path()).unwrap();
    let (ma, mb) = (
        Manifest::load(a.path()).unwrap(),
        Manifest::load(b.path()).unwrap(),
    );
    let a_bytes = std::fs::read(a.path().join("manifest.json")).unwrap();
    let b_bytes = std::fs::read(b.path().join("manifest.json")).unwrap();
    outcome(
        ma == mb && a_bytes == b_bytes,
        format!(
            "{} files, manifests identical: {}",
            ma.files.len(),
            a_bytes == b_bytes
        ),
    )
}

// ---------------------------------------------------------------- 12

fn c12_spiral_shortcut() -> Outcome {
    let (cfg, root) = run_config(
        "spiral",
        r#"{
            "catalog": "Spiral",
            "objectives": [{"kind": "Reconstruction"}, {"kind": "NCSN"}, {"kind": "SSM"}],
            "sizes": [100000],
            "sigma_list": [0.1],
            "probes": [{"kind": "trajectory_comparison",
                        "params": {"samples": 100, "sigma_start": 1.0, "sigma_end": 0.1}}]
        }"#,
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for k in ObjectiveKind::ALL {
        let r = probe(&cfg, &root, k, 100_000, 0).report;
        let close = close_fraction(&r);
        let (mid, _) = stat(&r, "mid_divergence", None, None, StepSelector::Scalar);
        let (end, _) = stat(&r, "end_divergence", None, None, StepSelector::Scalar);
        pass &= close >= 0.8 && mid > end;
        parts.push(format!(
            "{k}: close {:.0}%, mean mid {mid:.4e} vs end {end:.4e}",
            100.0 * close
        ));
    }
    outcome(pass, parts.join("; "))
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(usize, &str, Check); 12] = [
        (
            1,
            "analytic score matches finite differences",
            c1_analytic_score,
        ),
        (
            2,
            "smoothed density matches Monte-Carlo convolution",
            c2_convolution,
        ),
        (
            3,
            "objective and JVP gradients match finite differences",
            c3_gradients,
        ),
        (
            4,
            "forward-corruption norm in dimension 6400",
            c4_corruption_norm,
        ),
        (5, "NCSN Uniform 100k training sanity", c5_training_sanity),
        (
            6,
            "SharpCov Far-bin score error below Reconstruction",
            c6_far_bin,
        ),
        (
            7,
            "consistency across noise levels on disjoint halves",
            c7_noise_trend,
        ),
        (
            8,
            "low-noise divergence shrinks with training size",
            c8_size_trend,
        ),
        (
            9,
            "discrete vs continuous attractor signature",
            c9_attractor,
        ),
        (
            10,
            "first-order integrator convergence",
            c10_integrator_order,
        ),
        (11, "bit-identical manifests across runs", c11_determinism),
        (12, "Spiral shortcut signature", c12_spiral_shortcut),
    ];
    let mut failed = Vec::new();
    for (n, title, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict}: {title}: {}", o.detail);
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
