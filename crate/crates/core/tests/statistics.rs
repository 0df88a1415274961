use nalgebra::{DMatrix, DVector};
use noise_align::align::{alignment_error, random_orthogonal, TranslationMatrix};
use noise_align::em::{em_fit, sample_generative, AlignmentModel, EmConfig, Label};
use noise_align::eval::{rank_semantic_shift, refine_lexicon};
use noise_align::io::{build_identity_lexicon, EmbeddingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(d: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, n, |_, _| rng.sample(StandardNormal))
}

#[test]
fn random_orthogonal_has_zero_mean_entries() {
    // Haar measure is invariant under sign flips, so every entry averages to zero.
    for d in [2, 3, 10] {
        let mean = (0..10_000u64).map(|s| random_orthogonal(d, s).matrix()[(0, 0)]).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.05, "d={d}: mean {mean}");
    }
}

#[test]
fn random_orthogonal_entry_variance() {
    // Each entry of a Haar orthogonal matrix has variance 1/d.
    let d = 4;
    let var = (0..10_000u64)
        .map(|s| random_orthogonal(d, s).matrix()[(1, 2)].powi(2))
        .sum::<f64>()
        / 10_000.0;
    assert!((var - 0.25).abs() < 0.02, "{var}");
}

fn model(d: usize, alpha: f64, seed: u64) -> AlignmentModel {
    AlignmentModel {
        q: random_orthogonal(d, seed),
        sigma2: 0.01,
        mu_y: DVector::zeros(d),
        sigma_y2: 1.0,
        alpha,
    }
}

#[test]
fn generative_labels_follow_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let x = gaussian(3, n, &mut rng);
    for alpha in [0.1, 0.5, 0.8] {
        let (_, z) = sample_generative(&model(3, alpha, 1), &x, 17).unwrap();
        let k = z.iter().filter(|&&a| a).count() as f64;
        let sd = (n as f64 * alpha * (1.0 - alpha)).sqrt();
        assert!((k - n as f64 * alpha).abs() < 4.0 * sd, "alpha {alpha}: {k}");
    }
}

#[test]
fn generative_residuals_have_model_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = model(4, 0.7, 2);
    let x = gaussian(4, 5000, &mut rng);
    let (y, z) = sample_generative(&m, &x, 5).unwrap();
    let err = alignment_error(&m.q, &x, &y, Some(&z)).unwrap();
    let k = z.iter().filter(|&&a| a).count();
    let var = err / (4 * k) as f64;
    assert!((var - 0.01).abs() < 0.001, "{var}");
}

#[test]
fn em_recovers_generative_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth = AlignmentModel {
        sigma2: 1e-4,
        ..model(10, 0.6, 4)
    };
    let x = gaussian(10, 2000, &mut rng);
    let (y, z) = sample_generative(&truth, &x, 6).unwrap();
    for cfg in [EmConfig::hard(), EmConfig::soft()] {
        let fit = em_fit(&x, &y, &cfg).unwrap();
        let agree = fit.responsibilities.h.iter().zip(&z).filter(|(a, b)| a == b).count();
        assert!(agree >= 1990, "{agree}");
        assert!((fit.model.alpha - 0.6).abs() < 0.03);
        assert!((fit.model.sigma2 / 1e-4 - 1.0).abs() < 0.1, "{}", fit.model.sigma2);
        assert!((fit.model.q.matrix() - truth.q.matrix()).norm() < 0.01);
    }
}

#[test]
fn planted_shifts_rank_first_and_are_labeled_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, n) = (20, 400);
    let q = random_orthogonal(d, 7);
    let x = gaussian(d, n, &mut rng);
    let mut y = q.matrix() * &x + gaussian(d, n, &mut rng) * 0.01;
    let shifted = [3usize, 50, 77, 199, 312];
    for &t in &shifted {
        y.set_column(t, &gaussian(d, 1, &mut rng).column(0));
    }
    let tokens: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    let src = EmbeddingSet::new(tokens.clone(), x).unwrap();
    let tgt = EmbeddingSet::new(tokens, y.clone()).unwrap();
    let lex = build_identity_lexicon(&src, &tgt, None).unwrap();
    let (xs, ys) = noise_align::io::gather_pairs(&lex, &src, &tgt).unwrap();
    let fit = em_fit(&xs, &ys, &EmConfig::hard()).unwrap();
    let ranking = rank_semantic_shift(&fit.model.q, &lex, &src, &tgt, None, Some(&fit.responsibilities)).unwrap();
    let top: Vec<&str> = ranking.entries[..5].iter().map(|e| e.token.as_str()).collect();
    for t in shifted {
        assert!(top.contains(&format!("w{t}").as_str()), "{top:?}");
    }
    assert!(ranking.entries[..5].iter().all(|e| e.label == Some(Label::Noise)));
    assert!(ranking.entries[5..].iter().all(|e| e.label == Some(Label::Aligned)));
    assert_eq!(ranking.noise_count(), 5);
}

#[test]
fn refinement_recovers_identity_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = random_orthogonal(8, 1);
    let x = gaussian(8, 60, &mut rng);
    let y = q.matrix() * &x;
    let names = |p: &str| (0..60).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let src = EmbeddingSet::new(names("a"), x).unwrap();
    let tgt = EmbeddingSet::new(names("b"), y).unwrap();
    let lex = refine_lexicon(&q, &src, &tgt, 40).unwrap();
    assert_eq!(lex.len(), 40);
    assert!(lex.pairs().iter().all(|&(s, t)| s == t));
    let ident = TranslationMatrix::identity(8);
    assert_eq!(refine_lexicon(&ident, &src, &tgt, 100).unwrap().len(), 60);
}
