use nalgebra::{DMatrix, DVector};
use rand::Rng;
use simslab::points::Points;
use simslab::rng::{rng_from_seed, LabRng};
use simslab::schedule::VpSchedule;
use simslab::score::train::{dsm_loss_and_grad_with, dsm_loss_of, NoiseDraws};
use simslab::score::{
    fine_tune, fit_gaussian, train_dsm, Activation, AnalyticScore, Budget, GaussianScoreModel, MlpScoreNet,
    ScoreFunction, TimeEmbedding, TrainConfig, Weighting,
};

fn paper_data(n: usize, seed: u64) -> Points {
    GaussianScoreModel::paper_reference().sample(n, &mut rng_from_seed(seed))
}

/// Central differences of the loss against the analytic gradient for `count`
/// randomly chosen parameters. Returns the worst relative error.
fn worst_fd_error(net: &MlpScoreNet, weighting: Weighting, count: usize, seed: u64) -> f64 {
    let sched = VpSchedule::default();
    let mut rng = rng_from_seed(seed);
    let batch = paper_data(16, seed + 1);
    let draws = NoiseDraws::draw(batch.len(), batch.dim(), &sched, 1e-3, &mut rng);
    let loss = |n: &MlpScoreNet| dsm_loss_and_grad_with(n, &sched, &batch, &draws, weighting, 0).unwrap().0;
    let (_, grads) = dsm_loss_and_grad_with(net, &sched, &batch, &draws, weighting, 0).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let l = rng.random_range(0..net.layers().len());
        let layer = &net.layers()[l];
        let n_w = layer.weights.len();
        let p = rng.random_range(0..n_w + layer.bias.len());
        let g = grads.layers[l].as_ref().unwrap();
        let analytic = if p < n_w { g.weights[p] } else { g.bias[p - n_w] };
        let bump = |delta: f64| {
            let mut n = net.clone();
            let layer = &mut n.layers_mut()[l];
            if p < n_w {
                layer.weights[p] += delta;
            } else {
                layer.bias[p - n_w] += delta;
            }
            loss(&n)
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

#[test]
fn gradients_match_finite_differences_across_architectures() {
    let archs: [(&[usize], Activation, TimeEmbedding); 4] = [
        (&[8], Activation::Tanh, TimeEmbedding::AppendScalar),
        (&[16, 16], Activation::Silu, TimeEmbedding::Sinusoidal { frequencies: 3 }),
        (&[32, 16, 8], Activation::Silu, TimeEmbedding::AppendScalar),
        (&[12], Activation::Identity, TimeEmbedding::Sinusoidal { frequencies: 1 }),
    ];
    for (i, (hidden, act, embed)) in archs.iter().enumerate() {
        let net = MlpScoreNet::new(2, hidden, *act, *embed, &mut rng_from_seed(40 + i as u64)).unwrap();
        for w in [Weighting::SigmaSquared, Weighting::Uniform] {
            let err = worst_fd_error(&net, w, 40, 90 + i as u64);
            assert!(err < 1e-4, "architecture {i} {w:?}: relative error {err}");
        }
    }
}

#[test]
fn analytic_score_beats_zero_net_on_shared_draws() {
    let sched = VpSchedule::default();
    let data = paper_data(2000, 5);
    let fit = fit_gaussian(&data, 1e-6).unwrap();
    let draws = NoiseDraws::draw(data.len(), 2, &sched, 1e-3, &mut rng_from_seed(6));
    let oracle = AnalyticScore::new(fit, sched);
    let zero = MlpScoreNet::zeros(2, &[4], Activation::Silu, TimeEmbedding::AppendScalar).unwrap();
    let l_oracle = dsm_loss_of(&oracle, &sched, &data, &draws, Weighting::SigmaSquared).unwrap();
    let l_zero = dsm_loss_of(&zero, &sched, &data, &draws, Weighting::SigmaSquared).unwrap();
    // The zero net's loss is mean |eps|^2, about the dimension.
    assert!((l_zero - 2.0).abs() < 0.15, "{l_zero}");
    assert!(l_oracle < l_zero, "{l_oracle} vs {l_zero}");
}

fn trained_net(seed: u64) -> (MlpScoreNet, Points) {
    let sched = VpSchedule::default();
    let data = paper_data(1000, seed);
    let mut rng = rng_from_seed(seed + 100);
    let net = MlpScoreNet::new(2, &[64, 64], Activation::Silu, TimeEmbedding::default(), &mut rng).unwrap();
    let (net, report) = train_dsm(&net, &data, &sched, &TrainConfig::default(), &mut rng).unwrap();
    assert_eq!(report.samples_seen, 100 * 1000);
    (net, data)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// 20 x 20 grid spanning two marginal standard deviations of the noised data.
fn grid(model: &GaussianScoreModel, sched: &VpSchedule, t: f64) -> Vec<[f64; 2]> {
    let (a, s) = sched.alpha_sigma(t).unwrap();
    let m = model.mu() * a;
    let cov = model.sigma() * (a * a) + DMatrix::identity(2, 2) * (s * s);
    let (sx, sy) = (cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt());
    let mut out = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            let u = -2.0 + 4.0 * i as f64 / 19.0;
            let v = -2.0 + 4.0 * j as f64 / 19.0;
            out.push([m[0] + u * sx, m[1] + v * sy]);
        }
    }
    out
}

#[test]
fn trained_network_tracks_the_analytic_score() {
    let sched = VpSchedule::default();
    let (net, data) = trained_net(21);
    let fit = fit_gaussian(&data, 1e-6).unwrap();
    for frac in [0.1, 0.5, 0.9] {
        let t = frac * sched.t_max();
        let pts = grid(&fit, &sched, t);
        let mean_cos = pts
            .iter()
            .map(|x| cosine(&net.forward(x, t).unwrap(), &fit.analytic_score(&sched, x, t).unwrap()))
            .sum::<f64>()
            / pts.len() as f64;
        assert!(mean_cos > 0.95, "t={t}: mean cosine {mean_cos}");
    }
    // Near the mean at t = 0.5, the relative error of the field is small.
    let t = 0.5;
    let (a, s) = sched.alpha_sigma(t).unwrap();
    let sd = (2.0 * a * a + s * s).sqrt();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..9 {
        for j in 0..9 {
            let x = [(i as f64 - 4.0) / 4.0 * sd, (j as f64 - 4.0) / 4.0 * sd];
            let got = net.forward(&x, t).unwrap();
            let want = fit.analytic_score(&sched, &x, t).unwrap();
            num += (got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2);
            den += want[0].powi(2) + want[1].powi(2);
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel < 0.15, "relative error at t=0.5: {rel}");
}

/// Mode of the t ~ 0 score field by gradient ascent from the origin.
fn implied_mode(net: &MlpScoreNet) -> [f64; 2] {
    let t = 0.01;
    let mut x = [0.0, 0.0];
    for _ in 0..300 {
        let s = net.forward(&x, t).unwrap();
        x[0] += 0.2 * s[0];
        x[1] += 0.2 * s[1];
    }
    x
}

#[test]
fn fine_tuning_moves_the_mode_toward_shifted_data() {
    let sched = VpSchedule::default();
    let (net, _) = trained_net(33);
    let before = implied_mode(&net);
    let shift = DVector::from_vec(vec![2.0, -1.0]);
    let shifted = GaussianScoreModel::new(shift.clone(), GaussianScoreModel::paper_reference().sigma().clone())
        .unwrap()
        .sample(1000, &mut rng_from_seed(34));
    let cfg = TrainConfig {
        budget: Budget::Epochs(30.0),
        ..TrainConfig::default()
    };
    let (tuned, _) = fine_tune(&net, &shifted, &sched, &cfg, &mut rng_from_seed(35)).unwrap();
    let after = implied_mode(&tuned);
    let dist = |m: [f64; 2]| ((m[0] - shift[0]).powi(2) + (m[1] - shift[1]).powi(2)).sqrt();
    assert!(dist(after) < 0.8 * dist(before), "before {before:?}, after {after:?}");
    let (again, _) = fine_tune(&net, &shifted, &sched, &cfg, &mut rng_from_seed(35)).unwrap();
    assert_eq!(tuned, again);
}

#[test]
fn frozen_prefix_is_bit_identical() {
    let sched = VpSchedule::default();
    let data = paper_data(200, 3);
    let mut rng = rng_from_seed(4);
    let net = MlpScoreNet::new(2, &[16, 16], Activation::Silu, TimeEmbedding::AppendScalar, &mut rng).unwrap();
    let cfg = TrainConfig {
        budget: Budget::Samples(2000),
        freeze_prefix: 2,
        ..TrainConfig::default()
    };
    let (tuned, _) = fine_tune(&net, &data, &sched, &cfg, &mut rng).unwrap();
    for l in 0..2 {
        assert_eq!(tuned.layers()[l], net.layers()[l]);
    }
    assert_ne!(tuned.layers()[2], net.layers()[2]);
}

fn shuffled(points: &Points, rng: &mut LabRng) -> Points {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    points.select(&idx)
}

#[test]
fn gaussian_fit_is_permutation_invariant() {
    let mut rng = rng_from_seed(8);
    for n in [3, 10, 257] {
        let pts = paper_data(n, n as u64);
        let a = fit_gaussian(&pts, 1e-6).unwrap();
        let b = fit_gaussian(&shuffled(&pts, &mut rng), 1e-6).unwrap();
        assert!((a.mu() - b.mu()).amax() < 1e-12);
        assert!((a.sigma() - b.sigma()).amax() < 1e-12);
    }
}

#[test]
fn analytic_score_is_consistent_with_batched_evaluation() {
    let sched = VpSchedule::default();
    let oracle = AnalyticScore::new(GaussianScoreModel::paper_reference(), sched);
    let pts = paper_data(50, 2);
    let mut out = vec![0.0; pts.as_flat().len()];
    oracle.score_batch(pts.as_flat(), 0.3, &mut out).unwrap();
    for (i, row) in pts.rows().enumerate() {
        let single = oracle.score(row, 0.3).unwrap();
        assert_eq!(&out[2 * i..2 * i + 2], single.as_slice());
    }
}
