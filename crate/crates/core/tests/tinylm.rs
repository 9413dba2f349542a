use granary::dataset::TokenizedExample;
use granary::tinylm::gradcheck::{check_coordinates, sample_coordinates};
use granary::tinylm::{
    forward, freeze_reference, greedy_decode, load_checkpoint, save_checkpoint, value_and_grad, ByteTokenizer,
    LossGrad, ModelConfig, ModelError, Parameters, TokenId, BOS, EOS, PAD, VOCAB_SIZE,
};
use granary::trainer::{mean_kl, objective_with_grad, train, TrainConfig, TrainMode};
use proptest::prelude::*;

fn small(seed: u64, init_std: f64) -> Parameters {
    Parameters::init(&ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_window: 16,
        init_std,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Mean negative log-likelihood of the next token at every position, with
/// its gradient with respect to the log-probabilities.
fn nll(ids: &[TokenId]) -> impl FnOnce(&[granary::tinylm::ForwardOutput]) -> LossGrad + '_ {
    move |outs| {
        let out = &outs[0];
        let v = out.vocab();
        let n = (ids.len() - 1) as f64;
        let mut g = vec![0.0; out.len() * v];
        let mut value = 0.0;
        for j in 1..ids.len() {
            value -= out.logprobs_at(j - 1)[ids[j] as usize] / n;
            g[(j - 1) * v + ids[j] as usize] -= 1.0 / n;
        }
        LossGrad {
            value,
            d_logprobs: vec![g],
        }
    }
}

proptest! {
    #[test]
    fn byte_tokenizer_round_trips(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let tok = ByteTokenizer;
        let ids = tok.encode(&bytes);
        prop_assert!(ids.iter().all(|&i| (i as usize) < 256));
        prop_assert_eq!(tok.decode(&ids), bytes);
    }

    #[test]
    fn forward_is_normalized_and_causal(
        ids in prop::collection::vec(0u32..259, 2..16),
        j in 0usize..16,
        replacement in 0u32..259,
        seed in 0u64..50,
    ) {
        let p = small(seed, 0.3);
        let ids: Vec<TokenId> = ids.into_iter().map(|i| i as TokenId).collect();
        let out = forward(&p, &ids).unwrap();
        for i in 0..out.len() {
            let s: f64 = out.logprobs_at(i).iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        let j = j % ids.len();
        let mut changed = ids.clone();
        changed[j] = replacement as TokenId;
        let out2 = forward(&p, &changed).unwrap();
        for i in 0..j {
            prop_assert_eq!(out.logprobs_at(i), out2.logprobs_at(i));
        }
    }
}

#[test]
fn zero_weights_give_the_uniform_distribution() {
    let p = small(0, 0.0);
    let out = forward(&p, &[BOS, 10, 20, 30]).unwrap();
    let expected = -(VOCAB_SIZE as f64).ln();
    for i in 0..out.len() {
        assert!(out.logprobs_at(i).iter().all(|&lp| (lp - expected).abs() <= 1e-12));
    }
}

#[test]
fn context_overflow_is_an_error() {
    let p = small(0, 0.02);
    assert!(matches!(forward(&p, &[1; 17]), Err(ModelError::ContextOverflow { .. })));
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..3 {
        let p = small(seed, 0.3);
        let ids: Vec<TokenId> = (0..16).map(|i| ((i * 37 + seed as usize * 11) % 259) as TokenId).collect();
        let (_, grad) = value_and_grad(&p, &[&ids], nll(&ids)).unwrap();
        let coords = sample_coordinates(p.len(), 200, seed);
        let report = check_coordinates(&p, &grad, &coords, 1e-4, 1e-4, |q| {
            let out = forward(q, &ids)?;
            Ok((1..ids.len())
                .map(|j| -out.logprobs_at(j - 1)[ids[j] as usize])
                .sum::<f64>()
                / (ids.len() - 1) as f64)
        })
        .unwrap();
        assert!(report.passed, "seed {seed}: {:?}", report.worst);
        assert_eq!(report.checked, 200);
    }
}

#[test]
fn unused_pad_embedding_gets_zero_gradient() {
    let p = small(1, 0.3);
    let ids: Vec<TokenId> = vec![BOS, 1, 2, 3, EOS];
    let (_, grad) = value_and_grad(&p, &[&ids], nll(&ids)).unwrap();
    let d = p.config().d_model;
    let row = p.layout().tok_emb + PAD as usize * d;
    assert!(grad[row..row + d].iter().all(|&g| g == 0.0));
    let used = p.layout().tok_emb + 2 * d;
    assert!(grad[used..used + d].iter().any(|&g| g != 0.0));
}

#[test]
fn kl_gradient_vanishes_at_the_reference() {
    let p = small(4, 0.3);
    let ex = TokenizedExample {
        input_ids: vec![BOS, 5, 6, 7, 8, 9, EOS],
        loss_mask: vec![false, false, true, true, true, true, true],
    };
    let (_, g_ce) = objective_with_grad(&p, std::slice::from_ref(&ex), None).unwrap();
    let (b, g_nsc) = objective_with_grad(&p, std::slice::from_ref(&ex), Some((&p, 0.1))).unwrap();
    assert_eq!(b.kl, 0.0);
    let max_diff = g_ce.iter().zip(&g_nsc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max_diff <= 1e-12, "{max_diff}");

    // finite differences of the KL term alone confirm a stationary point
    let h = 1e-4;
    for i in sample_coordinates(p.len(), 50, 9) {
        let mut q = p.clone();
        q.values_mut()[i] += h;
        let plus = mean_kl(&q, &p, std::slice::from_ref(&ex)).unwrap();
        q.values_mut()[i] -= 2.0 * h;
        let minus = mean_kl(&q, &p, std::slice::from_ref(&ex)).unwrap();
        assert!(((plus - minus) / (2.0 * h)).abs() <= 1e-8);
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let p = small(3, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &p).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), p.config());
    assert!(back.values().iter().zip(p.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn reference_stays_frozen_through_training() {
    let p = small(2, 0.1);
    let frozen = freeze_reference(&p);
    assert_eq!(frozen.params(), &p);
    let before = frozen.fingerprint();
    let ex = TokenizedExample {
        input_ids: vec![BOS, 40, 41, 42, 43, EOS],
        loss_mask: vec![false, false, true, true, true, true],
    };
    let cfg = TrainConfig {
        mode: TrainMode::NscSft,
        total_steps: 20,
        lr_max: 1e-1,
        ..Default::default()
    };
    let out = train(&cfg, &[ex], p.clone(), Some(&frozen)).unwrap();
    assert_ne!(out.params, p);
    assert_eq!(frozen.fingerprint(), before);
    assert_eq!(frozen.params(), &p);
}

#[test]
fn greedy_decode_is_deterministic() {
    let p = small(5, 0.5);
    let a = greedy_decode(&p, &[BOS, 65, 66], 10).unwrap();
    let b = greedy_decode(&p, &[BOS, 65, 66], 10).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 10 && !a.contains(&EOS));
}
