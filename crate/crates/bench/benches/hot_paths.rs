use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turntree_core::trainer::flatten_tree;
use turntree_core::{
    assign_credit, loss, ClipConfig, CreditConfig, Environment, EpisodeLimits, PolicyParams, RolloutTree,
    TokenId, TokenPolicy, TreeConfig, Vocab, World,
};

fn setup() -> (Environment, PolicyParams) {
    let env = Environment::new(World::new(1, Vocab::new(16, 4).unwrap()), EpisodeLimits::default()).unwrap();
    let mut p = PolicyParams::new(1024, env.vocab().size(), 4, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for w in p.weights_mut() {
        *w = rng.gen_range(-0.5..0.5);
    }
    (env, p)
}

fn tree(env: &Environment, p: &PolicyParams, seed: u64) -> (RolloutTree, Vec<f64>) {
    let task = env.generate_task(2, seed).unwrap();
    let t = RolloutTree::build(
        task.question_tokens.clone(),
        TreeConfig::default(),
        env,
        p,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    let rewards = t
        .leaf_ids()
        .into_iter()
        .map(|l| env.score_outcome(&task, &turntree_core::trainer::leaf_response(&t, l)))
        .collect();
    (t, rewards)
}

fn benches(c: &mut Criterion) {
    let (env, p) = setup();
    let context: Vec<TokenId> = (0..24).map(|i| TokenId(i % env.vocab().size() as u32)).collect();
    c.bench_function("policy_logprobs", |b| b.iter(|| p.logprobs(black_box(&context))));

    let mut seed = 0;
    c.bench_function("tree_build_default", |b| {
        b.iter(|| {
            seed += 1;
            tree(&env, &p, seed)
        })
    });

    let trees: Vec<_> = (0..8).map(|s| tree(&env, &p, 100 + s)).collect();
    let credit = CreditConfig::default();
    c.bench_function("credit_assignment", |b| {
        b.iter(|| {
            for (t, r) in &trees {
                black_box(assign_credit(t, r, &credit).unwrap());
            }
        })
    });

    for objective in turntree_core::Objective::ALL {
        let mut trajs = Vec::new();
        for (t, r) in &trees {
            let credited = assign_credit(t, r, &credit).unwrap();
            trajs.extend(flatten_tree(&credited, objective, trajs.len()));
        }
        let clip = ClipConfig { objective, ..Default::default() };
        c.bench_function(&format!("loss_{}", objective.name()), |b| {
            b.iter(|| loss(black_box(&trajs), &p, &clip).unwrap())
        });
    }
}

criterion_group!(hot_paths, benches);
criterion_main!(hot_paths);
