use proptest::prelude::*;

use gravis::augment::{build_enlarged_batch, shuffle_batch, AugmentationSpec};
use gravis::baselines::{nce_loss, triplet_loss, NceConfig, TripletConfig};
use gravis::eval::knn_view_retrieval;
use gravis::image::Image;
use gravis::rng::{self, Domain};
use gravis::vgl::{similarity_matrix, vgl_batch, vgl_batch_with_grad, AnchorSims, SimilarityMatrix};
use gravis::{EmbeddingBatch, GroupId, VglConfig};

/// `groups x views` vectors of dimension `dim`, away from the origin.
fn batch_strategy(groups: usize, views: usize, dim: usize) -> impl Strategy<Value = EmbeddingBatch> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), groups * views).prop_map(move |mut vs| {
        for v in &mut vs {
            v[0] += if v[0] >= 0.0 { 0.5 } else { -0.5 };
        }
        let ids = (0..groups * views).map(|k| GroupId((k / views) as u32)).collect();
        EmbeddingBatch::new(vs, ids).unwrap()
    })
}

fn cfg_strategy() -> impl Strategy<Value = VglConfig> {
    (0.1f64..1.0, any::<bool>()).prop_map(|(tau, att)| VglConfig::new(tau, att).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_anchor_loss_in_unit_interval(batch in batch_strategy(3, 3, 6), cfg in cfg_strategy()) {
        let out = vgl_batch(&batch, &cfg).unwrap();
        for l in out.per_anchor {
            prop_assert!((0.0..1.0).contains(&l), "{l}");
        }
    }

    #[test]
    fn permutation_invariance(batch in batch_strategy(3, 3, 5), cfg in cfg_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..batch.len()).collect();
        perm.shuffle(&mut rng::stream(seed, Domain::Test, 0, 0));
        let a = vgl_batch(&batch, &cfg).unwrap().total;
        let b = vgl_batch(&batch.permuted(&perm), &cfg).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn positive_rescaling_invariance(batch in batch_strategy(3, 3, 5), cfg in cfg_strategy(),
                                     scales in prop::collection::vec(0.01f64..100.0, 9)) {
        let scaled: Vec<Vec<f64>> = batch.vectors().iter().zip(&scales)
            .map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
        let b2 = EmbeddingBatch::new(scaled, batch.groups().to_vec()).unwrap();
        let a = vgl_batch(&batch, &cfg).unwrap().total;
        let b = vgl_batch(&b2, &cfg).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-6);
    }

    #[test]
    fn raising_a_negative_raises_the_loss(pos in prop::collection::vec(-1.0f64..1.0, 1..5),
                                          neg in prop::collection::vec(-1.0f64..1.0, 1..5),
                                          which in any::<prop::sample::Index>(),
                                          bump in 0.01f64..0.5, cfg in cfg_strategy()) {
        let row = AnchorSims::new(pos, neg);
        let j = which.index(row.negatives.len());
        let mut up = row.clone();
        up.negatives[j] += bump;
        prop_assert!(up.loss(&cfg) > row.loss(&cfg));
    }

    #[test]
    fn embedding_gradients_are_orthogonal(batch in batch_strategy(4, 3, 8), cfg in cfg_strategy()) {
        let out = vgl_batch_with_grad(&batch, &cfg).unwrap();
        for (g, v) in out.grad_embeddings.unwrap().iter().zip(batch.vectors()) {
            let dot: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() <= 1e-8, "{dot}");
        }
    }

    #[test]
    fn nce_shift_invariance(row in prop::collection::vec(-0.9f64..0.9, 4), shift in -0.09f64..0.09) {
        // Anchor 0 with positive 1 and negatives 2, 3; only row 0 is read.
        let build = |r: &[f64]| {
            let mut m = vec![vec![0.0; 4]; 4];
            for i in 0..4 {
                m[i][i] = 1.0;
            }
            for k in 1..4 {
                m[0][k] = r[k];
                m[k][0] = r[k];
            }
            SimilarityMatrix::from_rows(&m).unwrap()
        };
        let groups = [GroupId(0), GroupId(0), GroupId(1), GroupId(2)];
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let a = nce_loss(0, &build(&row), &groups, &NceConfig::default()).unwrap();
        let b = nce_loss(0, &build(&shifted), &groups, &NceConfig::default()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn triplet_is_non_negative(q in prop::collection::vec(-1.0f64..1.0, 4),
                               p in prop::collection::vec(-1.0f64..1.0, 4),
                               n in prop::collection::vec(-1.0f64..1.0, 4)) {
        prop_assume!(q.iter().any(|x| x.abs() > 0.01) && p.iter().any(|x| x.abs() > 0.01) && n.iter().any(|x| x.abs() > 0.01));
        let cfg = TripletConfig::default();
        prop_assert!(triplet_loss(&q, &p, &n, &cfg).unwrap() >= 0.0);
        prop_assert!((triplet_loss(&q, &p, &p, &cfg).unwrap() - cfg.margin).abs() <= 1e-12);
    }

    #[test]
    fn retrieval_ignores_vector_scale(batch in batch_strategy(3, 3, 4),
                                      scales in prop::collection::vec(0.1f64..10.0, 9), k in 1usize..8) {
        let scaled: Vec<Vec<f64>> = batch.vectors().iter().zip(&scales)
            .map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
        let b2 = EmbeddingBatch::new(scaled, batch.groups().to_vec()).unwrap();
        let a = knn_view_retrieval(&batch, k).unwrap();
        let b = knn_view_retrieval(&b2, k).unwrap();
        prop_assert!((a.precision_at_k - b.precision_at_k).abs() < 1e-12);
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_unit_diagonal(batch in batch_strategy(2, 3, 5)) {
        let m = similarity_matrix(&batch);
        for i in 0..m.len() {
            prop_assert!((m.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..m.len() {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shuffling_keeps_group_sizes(seed in any::<u64>(), n in prop::sample::select(vec![0usize, 2, 3, 5])) {
        let sources: Vec<Image> = (0..3u8)
            .map(|i| Image::checkerboard(16, 16, 3, [i * 50, 20, 200], [10, i * 70, 90]))
            .collect();
        let spec = AugmentationSpec { output_size: 12, ..AugmentationSpec::default() };
        let batch = build_enlarged_batch(&sources, n, &spec, seed).unwrap();
        let shuffled = shuffle_batch(&batch, &mut rng::stream(seed, Domain::Shuffle, 0, 0));
        let per = if n == 0 { 2 } else { n };
        prop_assert_eq!(shuffled.group_counts(), batch.group_counts());
        prop_assert!(shuffled.group_counts().iter().all(|(_, c)| *c == per));
        // Every view still carries its own source's provenance.
        for (g, rec) in shuffled.groups.iter().zip(&shuffled.provenance) {
            prop_assert_eq!(g.0 as usize, rec.source_index);
        }
    }
}
