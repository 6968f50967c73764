//! Property tests for the numeric invariants: KL identities, metric
//! orderings, interpolation arithmetic, reparameterization statistics, and
//! embedding-corpus injectivity.

use proptest::prelude::*;

use fet_core::eval::{acc_metrics, cb_focal_loss, gmean, CBFocalConfig};
use fet_core::head_model::FaceParams;
use fet_core::i2fet::{kl_term, reparameterize};
use fet_core::mat::Mat;
use fet_core::rng;
use fet_core::text_embed::{
    render_instruction, EmbeddingProvider, ExpressionVocabulary, HashingEmbedder, TEMPLATE_COUNT,
};
use fet_core::trajectory::{interpolate, ExpressionFrame, FrameRole};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_is_affine(
        e_l in finite_vec(8),
        e_n in finite_vec(8),
        th_l in finite_vec(6),
        th_n in finite_vec(6),
        delta in 0.0f64..=1.0,
    ) {
        let mk = |e: &[f64], th: &[f64]| ExpressionFrame {
            params: FaceParams::new(vec![0.1, -0.2], e.to_vec(), th.to_vec(), vec![0.0; 3]).unwrap(),
            role: FrameRole::Anchor,
        };
        let l = mk(&e_l, &th_l);
        let n = mk(&e_n, &th_n);
        let out = interpolate(&l, &n, delta).unwrap();
        for (k, v) in out.params.expression.iter().enumerate() {
            let expect = delta * e_l[k] + (1.0 - delta) * e_n[k];
            prop_assert!((v - expect).abs() < 1e-12);
        }
        for (k, v) in out.params.pose.iter().enumerate() {
            let expect = delta * th_l[k] + (1.0 - delta) * th_n[k];
            prop_assert!((v - expect).abs() < 1e-12);
        }
        prop_assert_eq!(&out.params.shape, &l.params.shape);
        prop_assert_eq!(&out.params.camera, &l.params.camera);
    }

    #[test]
    fn acc2_never_exceeds_acc1(
        pairs in proptest::collection::vec(((0usize..5), (0usize..5), (0usize..5), (0usize..5)), 1..60),
    ) {
        let preds: Vec<(usize, usize)> = pairs.iter().map(|p| (p.0, p.1)).collect();
        let truths: Vec<(usize, usize)> = pairs.iter().map(|p| (p.2, p.3)).collect();
        let (acc1, acc2) = acc_metrics(&preds, &truths).unwrap();
        prop_assert!(acc2 <= acc1 + 1e-15);
        prop_assert!((0.0..=1.0).contains(&acc1));
        prop_assert!((0.0..=1.0).contains(&acc2));
    }

    #[test]
    fn kl_matches_rearranged_form_and_is_nonnegative(
        mu in finite_vec(12),
        sig in proptest::collection::vec(0.05f64..4.0, 12),
    ) {
        let mu_m = Mat::row_vec(mu.clone());
        let sig_m = Mat::row_vec(sig.clone());
        let kl = kl_term(&mu_m, &sig_m).unwrap();
        // Algebraically identical rearrangement.
        let alt: f64 = mu
            .iter()
            .zip(&sig)
            .map(|(&m, &s)| 0.5 * (s * s + m * m - 1.0 - (s * s).ln()))
            .sum();
        prop_assert!((kl - alt).abs() < 1e-10, "kl {} vs alt {}", kl, alt);
        prop_assert!(kl >= -1e-12);
    }

    #[test]
    fn gmean_is_bounded_by_max_recall(
        recalls in proptest::collection::vec(0.0f64..=1.0, 1..10),
    ) {
        let g = gmean(&recalls).unwrap();
        let max = recalls.iter().cloned().fold(0.0f64, f64::max);
        prop_assert!(g <= max + 1e-12);
        let has_zero = recalls.iter().any(|&r| r == 0.0);
        prop_assert_eq!(g == 0.0, has_zero);
    }

    #[test]
    fn cb_focal_is_nonnegative(
        seed in 0u64..1000,
        gamma in 0.0f64..4.0,
        beta in 0.0f64..0.9999,
    ) {
        let logits = rng::normal_mat(&mut rng::stream(seed), 5, 3);
        let labels = [0usize, 1, 2, 1, 0];
        let cfg = CBFocalConfig { beta, gamma, class_counts: vec![7, 19, 3] };
        let loss = cb_focal_loss(&logits, &labels, &cfg).unwrap();
        prop_assert!(loss >= 0.0);
    }
}

#[test]
fn reparameterization_moments_match_monte_carlo() {
    let n = 100_000;
    let mu = Mat::filled(1, 1, 0.3);
    let sigma = Mat::filled(1, 1, 2.0);
    let mut stream = rng::stream(7);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n {
        let z = Mat::filled(1, 1, rng::normal(&mut stream));
        let zt = reparameterize(&mu, &sigma, &z).unwrap();
        let v = zt.data()[0];
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let std = (sumsq / n as f64 - mean * mean).sqrt();
    assert!((mean - 0.3).abs() < 0.02, "mean {mean}");
    assert!((std - 2.0).abs() < 0.02, "std {std}");
}

/// Every rendered instruction over the full template x ordered-pair corpus
/// embeds to a distinct matrix (and a distinct pooled vector).
#[test]
fn hashing_embeddings_are_injective_over_the_corpus() {
    let vocab = ExpressionVocabulary::ck_plus();
    let provider = HashingEmbedder::new(16, 64, 42).unwrap();
    let mut embeddings: Vec<(String, Mat, Mat)> = Vec::new();
    for template in 1..=TEMPLATE_COUNT {
        for (from, to) in vocab.ordered_pairs() {
            let ins = render_instruction(template, &from, &to, &vocab).unwrap();
            let e = provider.embed(&ins.text).unwrap();
            embeddings.push((ins.text, e.matrix.clone(), e.pooled()));
        }
    }
    assert_eq!(embeddings.len(), 5 * 42);
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            assert_ne!(
                embeddings[i].1, embeddings[j].1,
                "embedding collision between {:?} and {:?}",
                embeddings[i].0, embeddings[j].0
            );
            let d = embeddings[i].2.sub(&embeddings[j].2).max_abs();
            assert!(
                d > 1e-9,
                "pooled collision between {:?} and {:?}",
                embeddings[i].0,
                embeddings[j].0
            );
        }
    }
}

/// Nearest-center classification of ground-truth anchors is essentially
/// perfect thanks to the center-separation invariant.
#[test]
fn synthetic_ground_truth_is_oracle_separable() {
    use fet_core::dataset::{generate_synthetic, SyntheticGenConfig};
    use fet_core::eval::{AnchorClassifier, NearestCenterOracle};

    let cfg = SyntheticGenConfig::with_random_centers(ExpressionVocabulary::ck_plus(), 20, 50, 3);
    let manifest = generate_synthetic(&cfg).unwrap();
    let oracle = NearestCenterOracle::from_manifest(&manifest).unwrap();
    let vocab = manifest.vocab();
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in manifest.samples() {
        let from = vocab.index_of(&s.label_from).unwrap();
        let to = vocab.index_of(&s.label_to).unwrap();
        correct += (oracle.classify(&s.anchors.e0, &s.anchors.theta0[3..]) == from) as usize;
        correct += (oracle.classify(&s.anchors.e1, &s.anchors.theta1[3..]) == to) as usize;
        total += 2;
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.999, "oracle accuracy {acc}");
}
