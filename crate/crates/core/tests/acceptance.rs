//! Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any
//! criterion fails. Runs without the libtest harness so the lines always
//! show up in `cargo test` output.

use covbal::balance::{matches_from_bytes, matches_to_bytes};
use covbal::covae::{elbo_with_noise, model_from_bytes, model_to_bytes, Batch, CoVae};
use covbal::expfam::{kl_gaussian, GaussianParams};
use covbal::numkit::{log_softmax, log_sum_exp, softmax, Activation, Matrix, Mlp, Rng};
use covbal::pipeline::{
    self, identifiability_run, sweep_a, sweep_beta, sweep_testenv, verify_finer_fixture,
    verify_minimax_fixture, verify_semi_fixture, IdentConfig, Prepared, RunConfig, SamplerMode,
    SweepRow, IDENT_THRESHOLD,
};
use covbal::scmgen::{dataset_from_bytes, dataset_to_bytes, ColoredSpec};
use covbal::trainer::{classifier_from_bytes, classifier_to_bytes};
use std::sync::OnceLock;
use std::time::Instant;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("criterion {id}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn main() {
    let mut r = Report { failed: 0 };
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let want = |id: usize| only.is_none_or(|o| o == id);

    if want(1) || want(2) {
        spurious_and_balancing(&mut r, want(1), want(2));
    }
    if want(3) {
        let start = Instant::now();
        let v = verify_semi_fixture(&[2, 4, 10], 0).unwrap();
        r.line(3, v.holds, format!("worst TV margin {:.4} ({:.1}s)", v.margin, start.elapsed().as_secs_f64()));
    }
    if want(4) {
        let start = Instant::now();
        let v = verify_minimax_fixture(3, 2).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let n = v.witnesses["names"].as_array().map_or(0, |a| a.len());
        r.line(4, v.holds && n == 25 && secs <= 10.0, format!("{n} envs, margin {:.3e}, {secs:.2}s", v.margin));
    }
    if want(5) {
        let v = verify_finer_fixture(1000, 0).unwrap();
        let d = v.witnesses["disagreements"].as_array().map_or(usize::MAX, |a| a.len());
        r.line(5, v.holds && d == 0, format!("{d} disagreements in 1000 instances"));
    }
    if want(6) {
        let start = Instant::now();
        let fit = identifiability_run(&IdentConfig::default()).unwrap();
        let secs = start.elapsed().as_secs_f64();
        r.line(
            6,
            fit.mean_abs_corr >= IDENT_THRESHOLD && secs <= 300.0,
            format!("mean |corr| {:.3}, R² {:?}, {secs:.0}s", fit.mean_abs_corr, round(&fit.r2_per_dim)),
        );
    }
    if want(7) {
        numerical_hygiene(&mut r);
    }
    if want(8) {
        ablation_shapes(&mut r);
    }
    if want(9) {
        determinism_and_formats(&mut r);
    }
    if r.failed > 0 {
        println!("{} criterion checks failed", r.failed);
        std::process::exit(1);
    }
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

fn acceptance_config() -> RunConfig {
    RunConfig::colored_binary(20_000, 0)
}

/// Generated data without and with the learned match index, built once.
fn plain() -> &'static Prepared {
    static CELL: OnceLock<Prepared> = OnceLock::new();
    CELL.get_or_init(|| Prepared::new(&acceptance_config(), false).unwrap())
}

fn learned() -> &'static (Prepared, f64) {
    static CELL: OnceLock<(Prepared, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let prep = Prepared::new(&acceptance_config(), true).unwrap();
        (prep, start.elapsed().as_secs_f64())
    })
}

fn spurious_and_balancing(r: &mut Report, c1: bool, c2: bool) {
    let cfg = acceptance_config();
    let start = Instant::now();
    let plain = plain();
    let random = plain.accuracy(&cfg, SamplerMode::Random).unwrap();
    let secs = start.elapsed().as_secs_f64();
    if c1 {
        r.line(1, random <= 0.35 && secs <= 600.0, format!("random-sampler test accuracy {random:.3} ({secs:.1}s)"));
    }
    if c2 {
        let oracle = plain.accuracy(&cfg, SamplerMode::Oracle).unwrap();
        let (prep, vae_secs) = learned();
        let balanced = prep.accuracy(&cfg, SamplerMode::Balanced).unwrap();
        let ok = oracle >= 0.65 && balanced >= 0.50 && balanced >= random + 0.15;
        r.line(
            2,
            ok,
            format!(
                "oracle {oracle:.3}, learned-balanced {balanced:.3}, random {random:.3} (VAE and matching {vae_secs:.0}s)"
            ),
        );
    }
}

fn max_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn mlp_grad_error(sizes: &[usize], act: Activation, rng: &mut Rng) -> f64 {
    let mut net = Mlp::new(sizes, act, rng).unwrap();
    for b in net.biases_mut() {
        b.iter_mut().for_each(|x| *x = rng.uniform_range(-0.5, 0.5));
    }
    let (batch, out) = (3, *sizes.last().unwrap());
    let x = Matrix::from_vec(batch, sizes[0], (0..batch * sizes[0]).map(|_| rng.normal()).collect()).unwrap();
    let c = Matrix::from_vec(batch, out, (0..batch * out).map(|_| rng.normal()).collect()).unwrap();
    let loss = |n: &Mlp| -> f64 { n.predict(&x).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum() };
    let trace = net.forward(&x).unwrap();
    let analytic = net.backward(&trace, &c).unwrap().blocks().concat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for (blk, len) in net.block_sizes().into_iter().enumerate() {
        for i in 0..len {
            let orig = net.param_blocks()[blk][i];
            net.param_blocks_mut()[blk][i] = orig + h;
            let lp = loss(&net);
            net.param_blocks_mut()[blk][i] = orig - h;
            let lm = loss(&net);
            net.param_blocks_mut()[blk][i] = orig;
            worst = worst.max(max_rel(analytic[flat], (lp - lm) / (2.0 * h)));
            flat += 1;
        }
    }
    worst
}

fn elbo_grad_error(k: usize, rng: &mut Rng) -> f64 {
    let mut model = CoVae::new(3, 2, 2, 1, k, &[4], Activation::Tanh, 1.0, rng).unwrap();
    // Move the prior away from its initialization so every λ entry matters.
    let sizes = model.block_sizes();
    let prior_blocks = if k == 2 { 2 } else { 1 };
    for (blk, p) in model.param_blocks_mut().into_iter().enumerate() {
        if blk >= sizes.len() - prior_blocks {
            p.iter_mut().for_each(|v| *v += 0.5 * rng.normal());
        }
    }
    let b = 5;
    let batch = Batch {
        x: Matrix::from_vec(b, 3, (0..b * 3).map(|_| rng.normal()).collect()).unwrap(),
        y: (0..b).map(|_| rng.below(2)).collect(),
        env: (0..b).map(|_| rng.below(2)).collect(),
    };
    let noise = Matrix::from_vec(b, 1, (0..b).map(|_| rng.normal()).collect()).unwrap();
    let analytic = elbo_with_noise(&model, &batch, None, &noise).unwrap().grads.blocks(k).concat();
    let loss = |m: &CoVae| -elbo_with_noise(m, &batch, None, &noise).unwrap().elbo;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for (blk, len) in sizes.into_iter().enumerate() {
        for i in 0..len {
            let orig = model.param_blocks_mut()[blk][i];
            model.param_blocks_mut()[blk][i] = orig + h;
            let lp = loss(&model);
            model.param_blocks_mut()[blk][i] = orig - h;
            let lm = loss(&model);
            model.param_blocks_mut()[blk][i] = orig;
            worst = worst.max(max_rel(analytic[flat], (lp - lm) / (2.0 * h)));
            flat += 1;
        }
    }
    worst
}

fn numerical_hygiene(r: &mut Report) {
    let mut rng = Rng::new(70);
    let mut mlp_worst: f64 = 0.0;
    for i in 0..20 {
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let sizes = [2 + rng.below(4), 2 + rng.below(7), 1 + rng.below(4)];
        mlp_worst = mlp_worst.max(mlp_grad_error(&sizes, act, &mut rng));
    }
    mlp_worst = mlp_worst.max(mlp_grad_error(&[4, 8, 3], Activation::Tanh, &mut rng));
    let mut elbo_worst: f64 = 0.0;
    for i in 0..10 {
        elbo_worst = elbo_worst.max(elbo_grad_error(1 + i % 2, &mut rng));
    }

    let q = GaussianParams::new(vec![0.3, -1.2], vec![0.4, -0.5]).unwrap();
    let p = GaussianParams::new(vec![-0.5, 0.2], vec![-0.3, 0.6]).unwrap();
    let exact = kl_gaussian(&q, &p).unwrap();
    let n = 1_000_000;
    let mut acc = 0.0;
    let mut z = [0.0; 2];
    for _ in 0..n {
        for i in 0..2 {
            z[i] = q.mu[i] + (q.log_var[i] / 2.0).exp() * rng.normal();
        }
        acc += q.log_density(&z).unwrap() - p.log_density(&z).unwrap();
    }
    let kl_rel = (acc / n as f64 - exact).abs() / exact;

    let stable = log_sum_exp(&[0.0]).unwrap() == 0.0
        && (log_sum_exp(&[-2.5, -2.5]).unwrap() - (-2.5 + 2f64.ln())).abs() < 1e-15
        && log_sum_exp(&[1000.0, 1000.0]).unwrap() == 1000.0 + 2f64.ln()
        && log_sum_exp(&[]).is_err()
        && softmax(&[0.0, f64::NAN]).is_err()
        && {
            let s = softmax(&[1000.0, 0.0, -1000.0]).unwrap();
            s.iter().all(|v| v.is_finite()) && (s.iter().sum::<f64>() - 1.0).abs() < 1e-9
        }
        && {
            let a = softmax(&[0.1, 2.0, -3.0]).unwrap();
            let b = softmax(&[500.1, 502.0, 497.0]).unwrap();
            a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12)
        }
        && log_softmax(&[-1000.0, 0.0]).unwrap()[0] == -1000.0;

    let ok = mlp_worst <= 1e-4 && elbo_worst <= 1e-4 && kl_rel < 0.01 && stable;
    r.line(
        7,
        ok,
        format!(
            "MLP grad rel err {mlp_worst:.1e}, ELBO grad rel err {elbo_worst:.1e}, KL vs MC {:.2}%, stability cases {}",
            100.0 * kl_rel,
            if stable { "ok" } else { "broken" }
        ),
    );
}

fn accuracies(rows: &[SweepRow], mode: SamplerMode) -> Vec<f64> {
    rows.iter().filter(|r| r.sampler == mode).map(|r| r.accuracy).collect()
}

fn fmt(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", cells.join(" "))
}

fn ablation_shapes(r: &mut Report) {
    let start = Instant::now();
    let cfg = acceptance_config();

    let beta = accuracies(
        &sweep_beta(&cfg, plain(), SamplerMode::Oracle, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap(),
        SamplerMode::Oracle,
    );
    let beta_ok = beta.windows(2).all(|w| w[1] >= w[0] - 0.02);

    let mut ten = cfg.clone();
    ten.data = ColoredSpec::ten_class(20_000);
    let ten_prep = Prepared::new(&ten, false).unwrap();
    let a_vals: Vec<usize> = (1..10).collect();
    let a = accuracies(&sweep_a(&ten, &ten_prep, SamplerMode::Oracle, &a_vals).unwrap(), SamplerMode::Oracle);
    // Rises: the best value clearly exceeds a = 1. Plateau: the last three
    // points stay within a few points of the best.
    let best = a.iter().cloned().fold(f64::MIN, f64::max);
    let a_ok = best >= a[0] + 0.10 && a[a.len() - 3..].iter().all(|&v| v >= best - 0.03);

    let prep = &learned().0;
    let flips = pipeline::TESTENV_FLIPS;
    let rows = sweep_testenv(&cfg, prep, &[SamplerMode::Random, SamplerMode::Balanced], &flips).unwrap();
    let rand = accuracies(&rows, SamplerMode::Random);
    let bal = accuracies(&rows, SamplerMode::Balanced);
    let range = bal.iter().cloned().fold(f64::MIN, f64::max) - bal.iter().cloned().fold(f64::MAX, f64::min);
    let test_ok = range <= 0.10 && rand.windows(2).all(|w| w[1] < w[0]);

    r.line(
        8,
        beta_ok && a_ok && test_ok,
        format!(
            "beta {} {}; a {} {}; testenv balanced range {range:.3}, random {} {} ({:.0}s)",
            fmt(&beta),
            ok_word(beta_ok),
            fmt(&a),
            ok_word(a_ok),
            fmt(&rand),
            ok_word(test_ok),
            start.elapsed().as_secs_f64()
        ),
    );
}

fn ok_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "VIOLATED"
    }
}

fn determinism_and_formats(r: &mut Report) {
    let mut cfg = RunConfig::colored_binary(1000, 9);
    cfg.test_size = 1000;
    cfg.vae.epochs = 3;
    cfg.classifier.steps = 200;
    let stage = || {
        let g = pipeline::generate(&cfg).unwrap();
        let (train, val) = pipeline::split(&cfg, &g.train).unwrap();
        let (vae, _) = pipeline::fit_vae(&cfg, &train).unwrap();
        let index = pipeline::build_matches(&cfg, &vae, &train).unwrap();
        let (clf, log) = pipeline::train(&cfg, SamplerMode::Balanced, &train, &val, Some(&index)).unwrap();
        (
            dataset_to_bytes(&g.train).unwrap(),
            model_to_bytes(&vae),
            matches_to_bytes(&index),
            classifier_to_bytes(&clf),
            log.to_csv(),
        )
    };
    let a = stage();
    let b = stage();
    let reproducible = a == b;
    let round_trip = dataset_to_bytes(&dataset_from_bytes(&a.0).unwrap()).unwrap() == a.0
        && model_to_bytes(&model_from_bytes(&a.1).unwrap()) == a.1
        && matches_to_bytes(&matches_from_bytes(&a.2).unwrap()) == a.2
        && classifier_to_bytes(&classifier_from_bytes(&a.3).unwrap()) == a.3;
    r.line(
        9,
        reproducible && round_trip,
        format!(
            "stages reproducible: {reproducible}; dataset/model/match/classifier round trip: {round_trip} ({} + {} + {} + {} bytes)",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            a.3.len()
        ),
    );
}
