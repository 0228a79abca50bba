mod common;

use common::{max_rel, naive_generate, random_token};
use flash_lcsm::data_dependent::{
    flops_comparison, generate_data_dependent, lazy_oracle_data_dependent, rule_family,
    ConstantRule, TanhMeanRule,
};
use flash_lcsm::{BlockStack, FilterBank, Model, ModelConfig, Sampler, SamplerSpec};

fn noisy() -> Sampler {
    Sampler::new(SamplerSpec::EchoNoise { sigma: 0.05 }, 7)
}

#[test]
fn rule_family_matches_lazy_oracle() {
    for seed in 0..6u64 {
        for (m, d, l, b) in [(1, 1, 16, 1), (2, 3, 128, 2), (2, 2, 512, 1)] {
            let cfg = ModelConfig::new(m, d, l, b, seed).alternating();
            let blocks = BlockStack::seeded(&cfg.block_kinds, d, seed);
            let rule = rule_family(seed);
            let first = random_token(b * d, seed);
            let run = generate_data_dependent(&cfg, rule.as_ref(), &blocks, &mut noisy(), &first)
                .unwrap();
            let oracle =
                lazy_oracle_data_dependent(&cfg, rule.as_ref(), &blocks, &mut noisy(), &first)
                    .unwrap();
            let e = run.max_relative_error(&oracle);
            assert!(e < 1e-7, "rule {} seed {seed} L={l}: {e}", rule.name());
            assert!(max_rel(&run.filters, &oracle.filters) < 1e-7);
        }
    }
}

#[test]
fn tanh_mean_rule_matches_lazy_oracle() {
    let cfg = ModelConfig::new(3, 2, 256, 1, 1);
    let blocks = BlockStack::seeded(&cfg.block_kinds, 2, 1);
    let run =
        generate_data_dependent(&cfg, &TanhMeanRule, &blocks, &mut noisy(), &[0.3, -0.6]).unwrap();
    let oracle =
        lazy_oracle_data_dependent(&cfg, &TanhMeanRule, &blocks, &mut noisy(), &[0.3, -0.6])
            .unwrap();
    assert!(run.max_relative_error(&oracle) < 1e-7);
}

#[test]
fn constant_rule_reproduces_the_fixed_filter_model() {
    let (m, d, l, b) = (2, 4, 64, 2);
    let cfg = ModelConfig::new(m, d, l, b, 12).alternating();
    let bank = FilterBank::seeded(m, l, d, 12, 0.25);
    let blocks = BlockStack::seeded(&cfg.block_kinds, d, 12);
    let model = Model::new(cfg.clone(), bank.clone(), blocks.clone()).unwrap();
    let first = random_token(b * d, 4);
    let want = naive_generate(&model, &mut noisy(), &first);
    let run = generate_data_dependent(&cfg, &ConstantRule { bank }, &blocks, &mut noisy(), &first)
        .unwrap();
    let e = max_rel(&run.activations, &want);
    assert!(e < 1e-7, "{e}");
}

#[test]
fn flops_ratio_is_reported() {
    let c = flops_comparison(4096).unwrap();
    assert!(c.data_dependent > c.data_independent);
    assert!(c.ratio.is_finite());
    assert!(flops_comparison(100).is_err());
}
