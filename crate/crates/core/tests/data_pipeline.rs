use dhicm_core::data::{
    batchify, gen_splits, gen_task, Batch, Pair, ParallelCorpus, Split, TaskKind, TaskSpec, Vocab, BOS, EOS, PAD,
    RESERVED,
};
use proptest::prelude::*;
use std::collections::HashSet;

fn spec(kind: TaskKind, symbols: usize, seed: u64) -> TaskSpec {
    TaskSpec { kind, symbols, min_len: 1, max_len: 9, size: 50, seed }
}

fn kind() -> impl Strategy<Value = TaskKind> {
    prop::sample::select(vec![TaskKind::Copy, TaskKind::Reverse, TaskKind::Lexicon])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vocab_round_trips(ids in prop::collection::vec(0usize..20, 0..30)) {
        let v = Vocab::synthetic(16);
        prop_assume!(ids.iter().all(|&i| i < v.len()));
        let tokens = v.decode(&ids).unwrap();
        prop_assert_eq!(v.encode(&tokens), ids.clone());
        let shown = v.detokenize(&ids);
        let kept: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD && i != BOS && i != EOS).collect();
        prop_assert_eq!(v.encode(&shown.split_whitespace().collect::<Vec<_>>()), kept);
    }

    #[test]
    fn tasks_follow_their_definitions(k in kind(), symbols in 2usize..12, seed in any::<u64>()) {
        let s = spec(k, symbols, seed);
        let c = gen_task(&TaskSpec { size: 20, ..s.clone() }, Split::Train, &HashSet::new()).unwrap();
        let lex = s.lexicon();
        let mut sorted = lex.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..symbols).collect::<Vec<_>>());
        for (src, tgt) in &c.pairs {
            prop_assert!((1..=9).contains(&src.len()));
            prop_assert!(src.iter().all(|&t| t >= RESERVED.len() && t < RESERVED.len() + symbols));
            let want: Vec<usize> = match k {
                TaskKind::Copy => src.clone(),
                TaskKind::Reverse => src.iter().rev().copied().collect(),
                TaskKind::Lexicon => {
                    let mapped: Vec<usize> = src.iter().map(|&t| RESERVED.len() + lex[t - RESERVED.len()]).collect();
                    let mut out = Vec::new();
                    for pair in mapped.chunks(2) {
                        out.extend(pair.iter().rev());
                    }
                    out
                }
            };
            prop_assert_eq!(tgt, &want);
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic(k in kind(), seed in any::<u64>()) {
        let s = spec(k, 10, seed);
        let a = gen_splits(&s, 60, 20, 20).unwrap();
        let b = gen_splits(&s, 60, 20, 20).unwrap();
        prop_assert_eq!(&a.train.pairs, &b.train.pairs);
        let set = |c: &ParallelCorpus| c.pairs.iter().cloned().collect::<HashSet<Pair>>();
        let (tr, va, te) = (set(&a.train), set(&a.valid), set(&a.test));
        prop_assert_eq!(tr.len(), 60);
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(a.train.prefix(25).pairs, a.train.pairs[..25].to_vec());
    }

    #[test]
    fn batching_conserves_every_token(k in kind(), seed in any::<u64>(), budget in 24usize..200) {
        let c = gen_task(&spec(k, 10, seed), Split::Train, &HashSet::new()).unwrap();
        let batches = batchify(&c, budget).unwrap();
        let mut seen = vec![0usize; c.len()];
        for b in &batches {
            let width = b.src_len.max(b.tgt_len);
            prop_assert!(b.batch * (width + 1) <= budget);
            for (row, &i) in b.indices.iter().enumerate() {
                seen[i] += 1;
                let (src, tgt) = &c.pairs[i];
                let s = &b.src[row * b.src_len..(row + 1) * b.src_len];
                let ti = &b.tgt_in[row * b.tgt_len..(row + 1) * b.tgt_len];
                let to = &b.tgt_out[row * b.tgt_len..(row + 1) * b.tgt_len];
                prop_assert_eq!(&s[..src.len()], &src[..]);
                prop_assert_eq!(s[src.len()], EOS);
                prop_assert!(s[src.len() + 1..].iter().all(|&t| t == PAD));
                prop_assert_eq!(ti[0], BOS);
                prop_assert_eq!(&ti[1..=tgt.len()], &tgt[..]);
                prop_assert_eq!(&to[..tgt.len()], &tgt[..]);
                prop_assert_eq!(to[tgt.len()], EOS);
                prop_assert!(to[tgt.len() + 1..].iter().all(|&t| t == PAD));
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        let target_tokens: usize = batches.iter().map(Batch::target_tokens).sum();
        prop_assert_eq!(target_tokens, c.pairs.iter().map(|(_, t)| t.len() + 1).sum::<usize>());
    }
}

#[test]
fn corpus_files_round_trip() {
    let s = spec(TaskKind::Lexicon, 7, 3);
    let c = gen_task(&s, Split::Valid, &HashSet::new()).unwrap();
    let v = s.vocab();
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path(), "valid", &v).unwrap();
    v.save(&dir.path().join("vocab.txt")).unwrap();
    let v2 = Vocab::load(&dir.path().join("vocab.txt")).unwrap();
    assert_eq!(v2, v);
    let back = ParallelCorpus::load(dir.path(), "valid", Split::Valid, &v2).unwrap();
    assert_eq!(back.pairs, c.pairs);
}

#[test]
fn oversized_pairs_and_bad_vocabularies_are_rejected() {
    let c = gen_task(&spec(TaskKind::Copy, 5, 1), Split::Train, &HashSet::new()).unwrap();
    assert!(batchify(&c, 8).is_err());
    assert!(Vocab::new(["a", "a"]).is_err());
    assert!(Vocab::new(["a b"]).is_err());
    assert!(Vocab::new(["<s>"]).is_err());
    let tiny = TaskSpec { symbols: 2, min_len: 1, max_len: 1, size: 5, ..spec(TaskKind::Copy, 2, 1) };
    assert!(gen_task(&tiny, Split::Train, &HashSet::new()).is_err());
}
