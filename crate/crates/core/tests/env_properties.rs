use decs_lab::env::{answer_of, nrp_oracle, EnvConfig, Prompt, Rollout, SynthEnv};
use decs_lab::nrp::{chunk_nrp_end, extract_nrp, segment, Judgment, OracleJudge};
use decs_lab::par::stream_rng;
use decs_lab::vocab::{TokenId, Vocab};
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::new(3, 2, 2).unwrap()
}

/// Thinking-class tokens (answers, separators, fillers).
fn thinking_token() -> impl Strategy<Value = TokenId> {
    let v = vocab();
    let pool: Vec<TokenId> = v
        .answer_tokens()
        .iter()
        .chain(v.high_entropy_tokens())
        .chain(v.filler_tokens())
        .copied()
        .collect();
    prop::sample::select(pool)
}

fn thinking(max: usize) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(thinking_token(), 0..=max)
}

fn prompt(v: &Vocab, target: usize) -> Prompt {
    Prompt {
        prompt_class: 0,
        target: v.answer(target),
        difficulty: 0.0,
    }
}

/// Definition by brute force: try every prefix length in order.
fn brute_force_nrp(thinking: &[TokenId], target: TokenId, v: &Vocab) -> Option<usize> {
    (1..=thinking.len()).find(|&k| answer_of(&thinking[..k], v) == Some(target))
}

proptest! {
    #[test]
    fn oracle_matches_brute_force(t in thinking(64), target in 0usize..3) {
        let v = vocab();
        let y = v.answer(target);
        prop_assert_eq!(nrp_oracle(&t, y, &v), brute_force_nrp(&t, y, &v));
    }

    #[test]
    fn prefix_is_minimal(t in thinking(40), target in 0usize..3) {
        let v = vocab();
        let y = v.answer(target);
        if let Some(k) = nrp_oracle(&t, y, &v) {
            prop_assert_eq!(answer_of(&t[..k], &v), Some(y));
            for shorter in 1..k {
                prop_assert_ne!(answer_of(&t[..shorter], &v), Some(y));
            }
        } else {
            prop_assert!(!t.contains(&y));
        }
    }

    #[test]
    fn segments_partition_thinking(t in thinking(40)) {
        let v = vocab();
        let chunks = segment(&t, &v);
        let joined: Vec<TokenId> = chunks.iter().flat_map(|c| c.tokens.clone()).collect();
        prop_assert_eq!(&joined, &t);
        let mut pos = 0;
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.index, i + 1);
            prop_assert_eq!(c.start, pos);
            prop_assert_eq!(c.end, pos + c.tokens.len());
            prop_assert!(!c.tokens.is_empty());
            for (j, &tok) in c.tokens.iter().enumerate() {
                // Separators only ever open a chunk.
                if j > 0 {
                    prop_assert!(!v.is_high_entropy(tok));
                }
            }
            pos = c.end;
        }
    }

    #[test]
    fn chunk_prefix_covers_token_prefix(t in thinking(40), target in 0usize..3) {
        let v = vocab();
        let p = prompt(&v, target);
        let mut tokens = t.clone();
        tokens.extend([v.think_end(), p.target, v.eos()]);
        let probs = vec![1.0; tokens.len()];
        let r = Rollout::from_tokens(tokens, probs, &p, &v);
        let chunk_end = chunk_nrp_end(&r, &p, &v, &OracleJudge).unwrap();
        match (r.nrp_end, chunk_end) {
            (None, None) => {}
            (Some(k), Some(kc)) => {
                prop_assert!(kc >= k);
                let chunks = segment(r.thinking(), &v);
                let holder = chunks.iter().find(|c| c.start < k && k <= c.end).unwrap();
                prop_assert_eq!(holder.end, kc);
            }
            other => prop_assert!(false, "token and chunk prefixes disagree: {:?}", other),
        }
    }

    #[test]
    fn first_yes_wins(judgments in prop::collection::vec(any::<bool>(), 1..10)) {
        let v = vocab();
        let t: Vec<TokenId> = (0..judgments.len()).map(|_| v.high(0)).collect();
        let chunks = segment(&t, &v);
        let js: Vec<Judgment> = judgments
            .iter()
            .map(|&b| if b { Judgment::Yes } else { Judgment::No })
            .collect();
        let expected = judgments.iter().position(|&b| b).map(|i| (i + 1, i + 1));
        prop_assert_eq!(extract_nrp(&js, &chunks).unwrap(), expected);
    }

    #[test]
    fn redundant_positions_complement_prefix(t in thinking(40), target in 0usize..3) {
        let v = vocab();
        let y = v.answer(target);
        if let Some(k) = nrp_oracle(&t, y, &v) {
            let redundant: Vec<usize> = (1..=t.len()).filter(|&j| j > k).collect();
            prop_assert_eq!(redundant.len() + k, t.len());
        }
    }
}

#[test]
fn sampled_rollouts_keep_their_invariants() {
    let env = SynthEnv::new(EnvConfig::default()).unwrap();
    let policy = env.initial_policy(1.0).unwrap();
    let v = env.vocab();
    let mut rng = stream_rng(11, &[]);
    for _ in 0..2000 {
        let p = env.sample_prompt(&mut rng);
        let r = env.generate(&policy, &p, &mut rng).unwrap();
        assert!(r.len() <= env.max_len());
        assert_eq!(r.tokens.len(), r.probs.len());
        assert!(r.probs.iter().all(|&q| q > 0.0 && q <= 1.0));
        match r.think_end_pos {
            Some(pos) => {
                assert_eq!(r.len(), pos + 3);
                assert!(v.is_answer(r.tokens[pos + 1]));
                assert_eq!(r.tokens[pos + 2], v.eos());
                assert_eq!(r.correct, r.tokens[pos + 1] == p.target);
            }
            None => {
                assert_eq!(r.len(), env.max_len() - 2);
                assert!(!r.correct);
            }
        }
        assert!(r.thinking().iter().all(|&t| t != v.eos() && t != v.think_end()));
        assert_eq!(r.nrp_end, brute_force_nrp(r.thinking(), p.target, v));
    }
}

#[test]
fn ambiguous_classes_draw_both_targets() {
    let env = SynthEnv::new(EnvConfig::default()).unwrap();
    let ambiguity = env.config().ambiguity.clone();
    let mut rng = stream_rng(5, &[]);
    for (class, &a) in ambiguity.iter().enumerate() {
        let base = env.prompt(class).target;
        let n = 4000;
        let moved = (0..n)
            .filter(|_| env.prompt_instance(class, &mut rng).target != base)
            .count();
        let sigma = (n as f64 * a * (1.0 - a)).sqrt().max(1.0);
        assert!((moved as f64 - a * n as f64).abs() <= 4.0 * sigma, "class {class}: {moved}");
    }
}

#[test]
fn hand_examples() {
    let v = vocab();
    let t = v.parse_sequence("F0 A2 H0 A1 F1 A1").unwrap();
    assert_eq!(nrp_oracle(&t, v.answer(1), &v), Some(4));
    assert_eq!(nrp_oracle(&t, v.answer(2), &v), Some(2));
    assert_eq!(nrp_oracle(&t, v.answer(0), &v), None);
    let chunks = segment(&t, &v);
    assert_eq!(chunks.len(), 2);
    assert_eq!((chunks[0].start, chunks[0].end), (0, 2));
    assert_eq!((chunks[1].start, chunks[1].end), (2, 6));
}
