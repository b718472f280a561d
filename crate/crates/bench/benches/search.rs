//! Retrieval cost: plain beam widening versus reward-guided candidate
//! scaling at a fixed decoder budget.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use sidrec_core::model::{ModelConfig, ModelParams, PathExample, Session};
use sidrec_core::search::{beam_search_prm, beam_search_standard, BeamConfig, ModelSearch};
use sidrec_core::seed::SeedTree;
use sidrec_core::tokenizer::{PrefixTrie, SemanticPath};

struct Fixture {
    params: ModelParams,
    trie: PrefixTrie,
    example: PathExample,
}

fn fixture() -> Fixture {
    let config = ModelConfig {
        d_h: 64,
        blocks: 2,
        prm_blocks: 1,
        heads: 4,
        prm_heads: 1,
        depth: 3,
        codebook_size: 32,
        t_max: 32,
        n_neg: 32,
        ffn_mult: 4,
    };
    let seeds = SeedTree::new(11);
    let mut rng = seeds.rng("catalog");
    let catalog: Vec<SemanticPath> = (0..512)
        .map(|_| {
            SemanticPath::new(vec![
                rng.gen_range(0..32u16),
                rng.gen_range(0..32u16),
                rng.gen_range(0..32u16),
            ])
        })
        .collect();
    let trie = PrefixTrie::build(&catalog, 3).unwrap();
    let mut init = seeds.rng("params");
    let params = ModelParams::init(&config, trie.total_valid_paths(), &mut init).unwrap();
    let history: Vec<SemanticPath> = (0..16).map(|i| catalog[i * 3].clone()).collect();
    Fixture {
        params,
        trie,
        example: PathExample {
            user_id: 0,
            history,
            target: catalog[0].clone(),
        },
    }
}

fn bench_search(c: &mut Criterion) {
    let fx = fixture();
    let mut group = c.benchmark_group("retrieval");
    group.sample_size(20);

    for &k in &[16usize, 64] {
        group.bench_with_input(BenchmarkId::new("standard_beam", k), &k, |b, &k| {
            b.iter(|| {
                let mut session = Session::new(&fx.params);
                let enc = session.encode_history(&fx.example.history).unwrap();
                let mut model = ModelSearch {
                    session: &mut session,
                    enc,
                    trie: &fx.trie,
                };
                beam_search_standard(&mut model, k, &fx.trie, true).unwrap()
            })
        });
    }

    for &k_plus in &[32usize, 64, 128] {
        group.bench_with_input(
            BenchmarkId::new("guided_k16", k_plus),
            &k_plus,
            |b, &k_plus| {
                let config = BeamConfig::all_on(16, k_plus, 16, 3);
                b.iter(|| {
                    let mut session = Session::new(&fx.params);
                    let enc = session.encode_history(&fx.example.history).unwrap();
                    let mut model = ModelSearch {
                        session: &mut session,
                        enc,
                        trie: &fx.trie,
                    };
                    beam_search_prm(&mut model, &config, &fx.trie).unwrap()
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_search);
criterion_main!(benches);
