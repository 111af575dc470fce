//! Analytic gradients against central finite differences.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::oracles::{central_difference, relative_error};
use common::{random_doc, random_params, random_vocab};
use topicalign::corpus::{BowDocument, EmbeddingTable, Vocabulary};
use topicalign::math::top_n;
use topicalign::ntm::{elbo_loss, grad_elbo, sample_noise, topic_distribution, NtmParams};
use topicalign::ot::{DivergenceKind, SinkhornConfig};
use topicalign::trainer::{refinement_loss, RefineSettings, RefineTarget};

const STEP: f64 = 1e-5;

fn tight_settings(divergence: DivergenceKind) -> RefineSettings {
    RefineSettings {
        divergence,
        sinkhorn: SinkhornConfig {
            epsilon: 0.05,
            max_iter: 20_000,
            tol: 1e-13,
        },
        ..RefineSettings::default()
    }
}

/// Largest relative error between `grad_elbo` and finite differences of
/// the loss over every parameter entry.
fn elbo_sweep(x: &BowDocument, params: &NtmParams, noise: &[f64]) -> f64 {
    let grad = grad_elbo(x, params, noise).unwrap();
    let mut worst: f64 = 0.0;
    for (field, g) in grad.fields().iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let numeric = central_difference(
                |v| {
                    let mut p = params.clone();
                    p.fields_mut()[field][i] = v;
                    elbo_loss(x, &p, noise).unwrap().total
                },
                params.fields()[field][i],
                STEP,
            );
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(20, 3, 8, 0.3, &mut rng);
        let x = random_doc(20, &mut rng);
        let noise = sample_noise(3, &mut rng);
        let worst = elbo_sweep(&x, &params, &noise);
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

struct RefineFixture {
    params: NtmParams,
    vocab: Vocabulary,
    emb: EmbeddingTable,
    targets: Vec<RefineTarget>,
}

fn refine_fixture(seed: u64, v: usize, k: usize, n: usize, m: usize) -> RefineFixture {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, emb) = random_vocab(v, 5, &mut rng);
    let params = random_params(v, k, 4, 0.8, &mut rng);
    let targets = (0..k)
        .map(|topic| {
            let dist = topic_distribution(&params, topic).unwrap().dist;
            let mut pool = vocab.words().to_vec();
            pool.shuffle(&mut rng);
            RefineTarget {
                topic_index: topic,
                top_indices: top_n(&dist, n),
                refined_words: pool[..m].to_vec(),
                confidence: 0.5 + 0.2 * topic as f64,
            }
        })
        .collect();
    RefineFixture {
        params,
        vocab,
        emb,
        targets,
    }
}

fn refinement_sweep(fx: &RefineFixture, settings: &RefineSettings) -> f64 {
    let out = refinement_loss(&fx.params, &fx.targets, &fx.vocab, &fx.emb, settings).unwrap();
    let mut worst: f64 = 0.0;
    for ((row, col), &analytic) in out.grad_phi.indexed_iter() {
        let numeric = central_difference(
            |v| {
                let mut p = fx.params.clone();
                p.dec_phi[[row, col]] = v;
                refinement_loss(&p, &fx.targets, &fx.vocab, &fx.emb, settings)
                    .unwrap()
                    .loss
            },
            fx.params.dec_phi[[row, col]],
            STEP,
        );
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}

#[test]
fn ot_refinement_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let fx = refine_fixture(seed, 15, 2, 3, 3);
        let worst = refinement_sweep(&fx, &tight_settings(DivergenceKind::Ot));
        assert!(worst < 1e-3, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn closed_form_refinement_gradients_match_finite_differences() {
    for kind in [DivergenceKind::Kl, DivergenceKind::Jsd, DivergenceKind::Hd, DivergenceKind::Tvd] {
        let fx = refine_fixture(11, 15, 2, 3, 3);
        let worst = refinement_sweep(&fx, &tight_settings(kind));
        assert!(worst < 1e-3, "{kind}: worst relative error {worst:e}");
    }
}

#[test]
fn rows_outside_the_frozen_selection_get_no_gradient() {
    let fx = refine_fixture(5, 15, 2, 3, 3);
    let out = refinement_loss(&fx.params, &fx.targets, &fx.vocab, &fx.emb, &tight_settings(DivergenceKind::Ot)).unwrap();
    for t in &fx.targets {
        for row in 0..15 {
            if !t.top_indices.contains(&row) {
                assert_eq!(out.grad_phi[[row, t.topic_index]], 0.0);
            }
        }
    }
}

#[test]
fn combined_objective_gradient_matches_finite_differences() {
    let gamma = 3.0;
    let fx = refine_fixture(21, 15, 2, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random_doc(15, &mut rng);
    let noise = sample_noise(2, &mut rng);
    let settings = tight_settings(DivergenceKind::Ot);

    let combined = |p: &NtmParams| {
        elbo_loss(&x, p, &noise).unwrap().total
            + gamma * refinement_loss(p, &fx.targets, &fx.vocab, &fx.emb, &settings).unwrap().loss
    };
    let mut grad = grad_elbo(&x, &fx.params, &noise).unwrap();
    let refine = refinement_loss(&fx.params, &fx.targets, &fx.vocab, &fx.emb, &settings).unwrap();
    grad.dec_phi.scaled_add(gamma, &refine.grad_phi);

    let mut worst: f64 = 0.0;
    for (field, g) in grad.fields().iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let numeric = central_difference(
                |v| {
                    let mut p = fx.params.clone();
                    p.fields_mut()[field][i] = v;
                    combined(&p)
                },
                fx.params.fields()[field][i],
                STEP,
            );
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn refinement_loss_and_gradient_scale_linearly_with_confidence() {
    let mut fx = refine_fixture(8, 15, 1, 3, 3);
    let settings = tight_settings(DivergenceKind::Ot);
    fx.targets[0].confidence = 1.0;
    let base = refinement_loss(&fx.params, &fx.targets, &fx.vocab, &fx.emb, &settings).unwrap();
    let mut previous = 0.0;
    for c in [0.0, 0.25, 0.5, 0.9] {
        fx.targets[0].confidence = c;
        let out = refinement_loss(&fx.params, &fx.targets, &fx.vocab, &fx.emb, &settings).unwrap();
        assert!((out.loss - c * base.loss).abs() < 1e-12);
        let g = out.grad_phi.iter().map(|x| x.abs()).sum::<f64>();
        assert!(g >= previous);
        previous = g;
        for (a, b) in out.grad_phi.iter().zip(base.grad_phi.iter()) {
            assert!((a - c * b).abs() < 1e-12);
        }
    }
}
