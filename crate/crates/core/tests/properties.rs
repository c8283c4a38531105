//! Randomized invariants of the whole pipeline.

use fused_moe::harness::Workload;
use fused_moe::pgas::PayloadBytes;
use fused_moe::runtime::audit::audit;
use fused_moe::runtime::{RuntimeOptions, ScheduleMode};
use fused_moe::MoeConfig;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = (MoeConfig, usize, bool)> {
    (
        prop::sample::select(vec![1usize, 2, 3]),
        1usize..=3,
        4usize..=40,
        2usize..=12,
        2usize..=12,
        1usize..=2,
        prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 3.0]),
        (1usize..=8, 1usize..=8),
        any::<u64>(),
        (1usize..=3, any::<bool>()),
    )
        .prop_map(|(p, local, s, h, d, k, cf, (bm, bn), seed, (procs, seq))| {
            let experts = (p * local).max(2);
            let p = if experts % p == 0 { p } else { 1 };
            let cfg = MoeConfig::new(s, h, d, experts, p, k.min(experts))
                .with_capacity_factor(cf)
                .with_tiles(bm, bn)
                .with_seed(seed);
            (cfg, procs, seq)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_matches_oracle_and_audits((cfg, procs, seq) in config()) {
        let work = Workload::generate(&cfg);
        let mode = if seq { ScheduleMode::Sequential } else { ScheduleMode::Overlapped };
        let out = work.forward(&cfg, &RuntimeOptions::default().with_mode(mode).with_processors(procs)).unwrap();
        prop_assert!(work.oracle_error(&cfg, &out).unwrap() <= 1e-5);
        let report = audit(&out, &cfg, procs);
        prop_assert!(report.passed(), "{:?}", report.problems);
    }

    #[test]
    fn padded_baseline_dominates((cfg, _, _) in config()) {
        let work = Workload::generate(&cfg);
        let out = work.forward(&cfg, &RuntimeOptions::default().with_processors(1)).unwrap();
        let padded = PayloadBytes::padded_baseline(&cfg);
        for (e, p) in out.bytes.dispatch.iter().chain(&out.bytes.combine).zip(padded.dispatch.iter().chain(&padded.combine)) {
            prop_assert!(e <= p);
        }
        let all_full = out.gates.iter().all(|g| {
            (0..cfg.experts).all(|x| g.routing.occupancy(x) == cfg.padded_capacity())
        });
        prop_assert_eq!(out.bytes.total() == padded.total(), all_full);
    }
}
