use covbal::covae::{train_vae, VaeTrainConfig};
use covbal::numkit::{Activation, Matrix};
use covbal::scmgen::{gen_colored_dataset, gen_gaussian_dataset, ColoredSpec, GaussianScmSpec, COLOR_COLUMN};

fn small_config(epochs: usize) -> VaeTrainConfig {
    VaeTrainConfig {
        hidden: vec![32],
        activation: Activation::Relu,
        epochs,
        batch_size: 64,
        eval_size: 256,
        ..Default::default()
    }
}

/// Mean silhouette of `points` grouped by `labels`.
fn silhouette(points: &Matrix, labels: &[usize]) -> f64 {
    let n = points.rows();
    let dist = |a: usize, b: usize| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let groups = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        for j in 0..n {
            if i != j {
                sum[labels[j]] += dist(i, j);
                count[labels[j]] += 1;
            }
        }
        let a = sum[labels[i]] / count[labels[i]].max(1) as f64;
        let b = (0..groups)
            .filter(|&g| g != labels[i] && count[g] > 0)
            .map(|g| sum[g] / count[g] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[test]
fn training_improves_the_elbo_on_gaussian_data() {
    let spec = GaussianScmSpec::random(2, 6, 3, 2, 0.3, 1.0, 3).unwrap();
    let data = gen_gaussian_dataset(&spec, 400, 7).unwrap();
    let cfg = VaeTrainConfig { k: 2, latent_dim: Some(2), ..small_config(50) };
    let (model, log) = train_vae(&data, &cfg).unwrap();
    let first = log.first().unwrap().eval_elbo;
    let last = log.last().unwrap().eval_elbo;
    assert!(last > first, "ELBO {first} -> {last}");

    // The learned prior means differ across environments.
    let mut max_delta: f64 = 0.0;
    for y in 0..data.m {
        let a = model.prior.params(0, y).unwrap();
        let b = model.prior.params(1, y).unwrap();
        for (u, v) in a.mu.iter().zip(&b.mu) {
            max_delta = max_delta.max((u - v).abs());
        }
    }
    assert!(max_delta > 0.1, "max |Δμ| = {max_delta}");
}

#[test]
fn posterior_means_cluster_by_color() {
    let spec = ColoredSpec::binary(2000);
    let data = gen_colored_dataset(&spec, 1).unwrap();
    let (model, _) = train_vae(&data, &small_config(10)).unwrap();
    let env = data.env(0).unwrap();
    let idx: Vec<usize> = (0..400).collect();
    let sub = env.subset(&idx);
    let means = model.posterior_means(&sub.x, &sub.y, 0).unwrap();
    let lat = sub.latents.as_ref().unwrap();
    let colors: Vec<usize> = (0..sub.len()).map(|i| lat.get(i, COLOR_COLUMN) as usize).collect();
    let s = silhouette(&means, &colors);
    assert!(s > 0.0, "silhouette {s}");
}
