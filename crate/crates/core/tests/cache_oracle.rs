// SPDX-License-Identifier: Apache-2.0

mod common;

use kgsim::inference::{block_hashes, build_corpus, synthesize_tokens, CorpusSpec, PrefixCacheIndex};

#[test]
fn prefix_match_equals_brute_force_lcp() {
    let queries = common::cache_oracle(200, 3).unwrap();
    assert!(queries > 10_000);
}

#[test]
fn corpus_and_fleet_capacity_arithmetic() {
    let corpus = build_corpus(&CorpusSpec::Synthetic {
        prompts: 32,
        mean_tokens: 8500,
        spread_tokens: 500,
        seed: 1,
    })
    .unwrap();
    let distinct: u64 = corpus.iter().map(|p| u64::from(p.token_count)).sum();
    assert_eq!(distinct, 272_000);
    let per_replica = kgsim::inference::DEFAULT_CAPACITY_TOKENS;
    assert_eq!(8 * per_replica, 1_146_880);
    assert!(distinct > per_replica && distinct < 8 * per_replica);
}

#[test]
fn lru_eviction_keeps_the_recent_prompt() {
    let block = 16;
    let a = synthesize_tokens("a", 160);
    let b = synthesize_tokens("b", 160);
    let mut cache = PrefixCacheIndex::new(block, 16 * 15);
    cache.insert_prompt(&a, 0);
    let out = cache.insert_prompt(&b, 1);
    assert_eq!(out.evicted.len(), 5);
    assert_eq!(cache.prefix_match(&b), 160);
    assert_eq!(cache.prefix_match(&a), 80);
    // evicted blocks are a's tail
    let chain = block_hashes(&a, block);
    assert_eq!(out.evicted, chain[5..].iter().rev().copied().collect::<Vec<_>>());
    cache.check_invariants().unwrap();
}
