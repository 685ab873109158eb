use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use smart::decoding::{
    beam_search, beam_search_with, greedy_decode, greedy_with, sequence_log_probs,
};
use smart::tensor::Tensor;
use smart::transformer::{Model, ModelConfig, RegionBatch, EOS};

mod common;
use common::*;

#[test]
fn beam_matches_exhaustive_enumeration_on_hand_set_models() {
    let models = hand_set_models();
    for (m, t) in models.iter().enumerate() {
        for max_len in 1..=t.len() {
            let truth = enumerate(t, max_len);
            for k in [2, 3] {
                let beams = beam_search_with(&mut StepTable(t.clone()), 1, k, max_len).unwrap();
                let beams = &beams[0];
                assert_eq!(beams.len(), k.min(truth.len()));
                for (b, (seq, score)) in beams.iter().zip(&truth) {
                    assert_eq!(
                        b.generated(),
                        seq.as_slice(),
                        "model {m} len {max_len} k {k}"
                    );
                    assert_eq!(b.logprob_sum, *score, "model {m} len {max_len} k {k}");
                }
            }
        }
    }
}

#[test]
fn beam_output_is_consistent_with_enumeration_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..300 {
        let max_len = rng.random_range(1..=4);
        let t: Vec<Vec<f64>> = (0..max_len)
            .map(|_| {
                let x: Vec<f64> = (0..3)
                    .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                log_softmax(&x)
            })
            .collect();
        let truth = enumerate(&t, max_len);
        for k in [2, 3] {
            let beams = beam_search_with(&mut StepTable(t.clone()), 1, k, max_len).unwrap();
            let beams = &beams[0];
            assert!(beams[0].logprob_sum <= truth[0].1);
            for w in beams.windows(2) {
                assert!(w[0].logprob_sum >= w[1].logprob_sum);
                assert_ne!(w[0].tokens, w[1].tokens);
            }
            for b in beams {
                let exact = truth
                    .iter()
                    .find(|(s, _)| s.as_slice() == b.generated())
                    .unwrap();
                assert_eq!(exact.1, b.logprob_sum);
            }
        }
    }
}

#[test]
fn width_one_beam_is_greedy() {
    for seed in 0..100 {
        let vocab = 3 + (seed as usize % 5);
        let mut a = PrefixHash { vocab, seed };
        let mut b = PrefixHash { vocab, seed };
        let beam = beam_search_with(&mut a, 3, 1, 6).unwrap();
        let greedy = greedy_with(&mut b, 3, 6).unwrap();
        for (bs, g) in beam.iter().zip(&greedy) {
            assert_eq!(bs.len(), 1);
            assert_eq!(bs[0].tokens, g.tokens);
            assert_eq!(bs[0].logprob_sum, g.logprob_sum);
        }
    }
}

fn model_and_regions() -> (Model<f64>, Vec<Tensor<f64>>) {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_memory: 2,
        vocab_size: 12,
        max_seq_len: 10,
        region_feature_dim: 5,
        max_regions: 6,
        dropout_keep: 1.0,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sets = [3usize, 6, 1, 4]
        .iter()
        .map(|&n| {
            let data = (0..n * 5)
                .map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            Tensor::new(vec![n, 5], data).unwrap()
        })
        .collect();
    (model, sets)
}

#[test]
fn model_beam_width_one_equals_greedy() {
    let (model, sets) = model_and_regions();
    let rb = RegionBatch::from_sets(&sets.iter().collect::<Vec<_>>()).unwrap();
    let greedy = greedy_decode(&model, &rb, 10).unwrap();
    let beam = beam_search(&model, &rb, 1, 10).unwrap();
    for (g, b) in greedy.iter().zip(&beam) {
        assert_eq!(g.tokens, b[0].tokens);
    }
}

#[test]
fn batched_decoding_equals_one_at_a_time() {
    let (model, sets) = model_and_regions();
    let rb = RegionBatch::from_sets(&sets.iter().collect::<Vec<_>>()).unwrap();
    let batched = beam_search(&model, &rb, 3, 10).unwrap();
    for (i, s) in sets.iter().enumerate() {
        let alone = beam_search(&model, &RegionBatch::from_sets(&[s]).unwrap(), 3, 10).unwrap();
        assert_eq!(alone[0].len(), batched[i].len());
        for (a, b) in alone[0].iter().zip(&batched[i]) {
            assert_eq!(a.tokens, b.tokens);
            assert!((a.logprob_sum - b.logprob_sum).abs() < 1e-9);
        }
    }
}

#[test]
fn beam_scores_match_teacher_forced_log_probs() {
    let (model, sets) = model_and_regions();
    for s in &sets {
        let rb = RegionBatch::from_sets(&[s]).unwrap();
        for hyp in &beam_search(&model, &rb, 3, 10).unwrap()[0] {
            let tf = sequence_log_probs(&model, &rb, &[&hyp.tokens]).unwrap()[0];
            assert!(
                (tf - hyp.logprob_sum).abs() < 1e-5,
                "{tf} vs {}",
                hyp.logprob_sum
            );
            let sum: f64 = hyp.per_step_logprobs.iter().sum();
            assert!((sum - hyp.logprob_sum).abs() < 1e-9);
        }
    }
}

#[test]
fn nothing_follows_eos() {
    let (model, sets) = model_and_regions();
    let rb = RegionBatch::from_sets(&sets.iter().collect::<Vec<_>>()).unwrap();
    let all = beam_search(&model, &rb, 4, 10).unwrap();
    for hyp in all.iter().flatten() {
        let gen = hyp.generated();
        assert!(hyp.finished);
        assert!(gen.len() <= 10);
        if let Some(p) = gen.iter().position(|&t| t == EOS) {
            assert_eq!(p, gen.len() - 1);
        } else {
            assert_eq!(gen.len(), 10);
        }
        assert!(!hyp.words().contains(&EOS));
    }
}
