use std::collections::HashMap;

use grumt::corpus::{
    make_batches, Side, TokenSequence, DEFAULT_BATCH_SIZE, DEFAULT_MAX_LEN,
};
use proptest::prelude::*;

fn pair(f: usize, e: usize, tag: u32) -> (TokenSequence, TokenSequence) {
    (
        TokenSequence::new(vec![tag; f], Side::Source),
        TokenSequence::new(vec![tag; e], Side::Target),
    )
}

fn lengths() -> impl Strategy<Value = Vec<(usize, usize)>> {
    // Few distinct shapes so that groups fill up, plus some over the cap.
    prop::collection::vec((prop_oneof![1..4usize, 48..56usize], 1..4usize), 0..300)
}

proptest! {
    #[test]
    fn batches_obey_the_contract(lens in lengths(), batch_size in 1..9usize) {
        let pairs: Vec<_> = lens.iter().enumerate().map(|(i, &(f, e))| pair(f, e, i as u32)).collect();
        let out = make_batches(pairs, batch_size, DEFAULT_MAX_LEN).unwrap();

        let mut groups: HashMap<(usize, usize), usize> = HashMap::new();
        let mut over = 0;
        for &(f, e) in &lens {
            if f > DEFAULT_MAX_LEN || e > DEFAULT_MAX_LEN {
                over += 1;
            } else {
                *groups.entry((f, e)).or_default() += 1;
            }
        }
        prop_assert_eq!(out.over_length, over);

        let mut batched: HashMap<(usize, usize), usize> = HashMap::new();
        for b in &out.batches {
            prop_assert_eq!(b.len(), batch_size);
            for (s, t) in b.pairs() {
                prop_assert_eq!((s.len(), t.len()), (b.source_len(), b.target_len()));
                prop_assert!(s.len() <= DEFAULT_MAX_LEN && t.len() <= DEFAULT_MAX_LEN);
            }
            *batched.entry((b.source_len(), b.target_len())).or_default() += b.len();
        }
        // Every group yields exactly its full batches; the remainder is dropped.
        for (shape, n) in &groups {
            prop_assert_eq!(batched.get(shape).copied().unwrap_or(0), n / batch_size * batch_size);
        }
        prop_assert_eq!(out.batches.len() * batch_size + out.over_length + out.leftover, lens.len());
    }

    #[test]
    fn no_pair_is_duplicated(lens in lengths(), batch_size in 1..5usize) {
        let pairs: Vec<_> = lens.iter().enumerate().map(|(i, &(f, e))| pair(f, e, i as u32)).collect();
        let out = make_batches(pairs, batch_size, DEFAULT_MAX_LEN).unwrap();
        let mut seen: Vec<u32> = out.batches.iter().flat_map(|b| b.pairs().iter().map(|(s, _)| s.ids[0])).collect();
        let n = seen.len();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), n);
    }
}

#[test]
fn reference_sizes() {
    assert_eq!(DEFAULT_BATCH_SIZE, 128);
    assert_eq!(DEFAULT_MAX_LEN, 50);
    // 50 tokens fit, 51 do not
    let out = make_batches(vec![pair(50, 50, 0), pair(51, 3, 1), pair(3, 51, 2)], 1, 50).unwrap();
    assert_eq!(out.batches.len(), 1);
    assert_eq!(out.over_length, 2);
}
