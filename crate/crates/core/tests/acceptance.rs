//! Acceptance suite. Every test prints one PASS/FAIL line for its criterion
//! (run with `--nocapture` to see them) and then asserts the verdict.

use std::time::Instant;

use ncarq::aggregation::{AggregatedState, AggregationScheme};
use ncarq::baselines::{Baseline, BaselineId};
use ncarq::channel::{discounted_value, evaluate, Controller, PolicyController};
use ncarq::codec::{peel, xor_combine, Packet};
use ncarq::learning::{algorithm_a, LearningSchedule};
use ncarq::oracle::{self, ExactOracle};
use ncarq::policy::{diff_policies, Criterion, Policy};
use ncarq::{ChannelConfig, DetailedState, StorageMode, UserSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, passed: bool, detail: &str, started: Instant) {
    println!(
        "{} criterion {n}: {detail} [{:.1}s]",
        if passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

fn uncoded<'c>() -> Box<dyn Controller + 'c> {
    Box::new(Baseline::new(BaselineId::Uncoded))
}

#[test]
fn criterion_1_uncoded_baseline() {
    let t = Instant::now();
    let channel = ChannelConfig::uniform(5, 0.25, None, 0.99, 101);
    let space = AggregationScheme::no_tte(5).unwrap().space();
    let tp = evaluate(uncoded, &channel, &space, 200_000, 5).unwrap();
    let empty = DetailedState::empty(5, StorageMode::Binary).unwrap();
    let (v, se) = discounted_value(uncoded, &channel, &space, &empty, 1500, 2000).unwrap();
    let passed = (tp.mean - 0.75).abs() <= 0.01 && (v - 75.0).abs() <= 1.5;
    verdict(
        1,
        passed,
        &format!("uncoded throughput {:.4} (target 0.75 +- 0.01), discounted value {v:.2} +- {se:.2} (target 75 +- 1.5)", tp.mean),
        t,
    );
    assert!(passed);
}

#[test]
fn criterion_2_induced_model_value_equality() {
    let t = Instant::now();
    let mut exact_ok = true;
    let mut findings = Vec::new();
    for p in [0.1, 0.25, 0.4] {
        let o = ExactOracle::uniform(3, p).unwrap();
        let g = o.ground_model(&AggregationScheme::no_tte(3).unwrap().space()).unwrap();
        let mut worst = (0.0f64, Vec::new());
        for policy in oracle::all_policies(&g.space) {
            let zero = g.verify_prop1(&policy, 0.0).unwrap();
            let r = g.verify_prop1(&policy, 0.9).unwrap();
            exact_ok &= zero.max_gap <= 1e-6 && r.weighted_gap <= 1e-6;
            if r.lumpable {
                exact_ok &= r.max_gap <= 1e-6;
            }
            println!(
                "  p={p} policy {:?}: max gap {:.3e}, stationary-weighted gap {:.1e}, lumpable {}",
                r.policy, r.max_gap, r.weighted_gap, r.lumpable
            );
            if r.max_gap > worst.0 {
                worst = (r.max_gap, r.policy);
            }
        }
        findings.push(format!("p={p} worst per-state gap {:.3e} at {:?}", worst.0, worst.1));
    }
    verdict(
        2,
        exact_ok,
        &format!(
            "gap <= 1e-6 at gamma=0 and stationary-weighted at gamma=0.9; finding: per-start-state gaps persist at gamma=0.9 ({})",
            findings.join("; ")
        ),
        t,
    );
    assert!(exact_ok);
}

#[test]
fn criterion_3_learned_policy_is_semi_greedy() {
    let space = AggregationScheme::no_tte(5).unwrap().space();
    let sg = Policy::semi_greedy(&space).unwrap();
    let schedule = LearningSchedule {
        slots_per_phase: 2_000_000,
        resets_per_phase: 2000,
        eps_stop: 0.02,
        min_phases: 8,
        max_phases: 12,
        policy_patience: 0,
        ..LearningSchedule::default()
    };
    let mut all = true;
    for p in [0.1, 0.25, 0.4] {
        let t = Instant::now();
        let channel = ChannelConfig::uniform(5, p, None, 0.9999, 7);
        let out = algorithm_a(&channel, &space, &schedule).unwrap();
        let d = diff_policies(&space, &out.policy, &sg).unwrap();
        let states: Vec<String> = d.iter().map(|x| x.state.to_string()).collect();
        verdict(
            3,
            d.is_empty(),
            &format!("p={p} gamma=0.9999: {} disagreements with semi-greedy {states:?} ({:?})", d.len(), out.stop),
            t,
        );
        all &= d.is_empty();
    }
    assert!(all);
}

#[test]
fn criterion_4_threshold_structure() {
    let t = Instant::now();
    let mut all = true;
    let mut lines = Vec::new();
    for k in [3, 4] {
        for p in [0.1, 0.25, 0.4] {
            let o = ExactOracle::uniform(k, p).unwrap();
            let g = o.ground_model(&AggregationScheme::one_d(k).unwrap().space()).unwrap();
            let (gain, optimal) = g.exhaustive_average(1e-9).unwrap();
            let labels: Vec<Vec<u8>> = optimal
                .iter()
                .map(|q| q.actions().iter().map(|a| a.label()).collect())
                .collect();
            let threshold = optimal.iter().any(|q| oracle::is_threshold_in_l(&g.space, q));
            let pi = g.exact_optimal(Criterion::AverageCost, None).unwrap();
            println!(
                "  K={k} p={p}: gain {gain:.6}, optimal {labels:?}, induced policy iteration {:?} (converged {})",
                pi.policy.actions().iter().map(|a| a.label()).collect::<Vec<_>>(),
                pi.converged
            );
            all &= threshold;
            lines.push(format!("K={k} p={p} {}", if threshold { "threshold" } else { "NOT threshold" }));
        }
    }
    verdict(4, all, &format!("exact average-cost OneD optimum: {}", lines.join(", ")), t);
    assert!(all);
}

#[test]
fn criterion_5_binomial_law() {
    let t = Instant::now();
    let p = 0.25;
    let o = ExactOracle::uniform(3, p).unwrap();
    let full = o.decode(o.n_states() - 1);
    let clique = UserSet::all(3);
    let law = oracle::binomial_law(3, p);
    let exact = oracle::clique_outcome_distribution(&o, &full, clique).unwrap();
    let exact_err = exact.iter().zip(&law).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let channel = ChannelConfig::uniform(3, p, None, 0.99, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut counts = [0u64; 4];
    for _ in 0..n {
        let next = channel.transmit(&full, clique, &mut rng).unwrap().next_state;
        counts[oracle::occupied_clique_size(&next)] += 1;
    }
    let tv = 0.5 * counts.iter().zip(&law).map(|(&c, q)| (c as f64 / n as f64 - q).abs()).sum::<f64>();
    let passed = tv <= 0.02 && exact_err < 1e-12 && (law[0] - 0.421875).abs() < 1e-15;
    verdict(
        5,
        passed,
        &format!("empirical TV {tv:.4} (<= 0.02), exact max error {exact_err:.1e}"),
        t,
    );
    assert!(passed);
}

#[test]
fn criterion_6_tte_policy_ordering() {
    let scheme = AggregationScheme::agg2(5, 5).unwrap();
    let space = scheme.space();
    let msg = Policy::modified_semi_greedy(&space).unwrap();
    let schedule = LearningSchedule {
        slots_per_phase: 500_000,
        resets_per_phase: 2000,
        eps_stop: 0.05,
        min_phases: 6,
        max_phases: 12,
        ..LearningSchedule::default()
    };
    let (slots, seeds) = (200_000, 10);
    let mut all = true;
    for p in [0.1, 0.25, 0.4] {
        let t = Instant::now();
        let channel = ChannelConfig::uniform(5, p, Some(5), 0.99, 11);
        let learned = algorithm_a(&channel, &space, &schedule).unwrap().policy;
        let run = |policy: &Policy| {
            evaluate(|| Box::new(PolicyController { space: &space, policy }), &channel, &space, slots, seeds)
                .unwrap()
                .mean
        };
        let base = |id| {
            evaluate(|| Box::new(Baseline::new(id)), &channel, &space, slots, seeds)
                .unwrap()
                .mean
        };
        let (agg2, msg_tp) = (run(&learned), run(&msg));
        let (sg, unc) = (base(BaselineId::SemiGreedy), base(BaselineId::Uncoded));
        let ok = agg2 >= msg_tp - 0.005 && (p < 0.25 || msg_tp > unc + 0.01) && (sg - unc).abs() <= 0.03;
        verdict(
            6,
            ok,
            &format!("p={p}: AggII-learned {agg2:.4}, MSG {msg_tp:.4}, SG {sg:.4}, uncoded {unc:.4}"),
            t,
        );
        all &= ok;
    }
    assert!(all);
}

#[test]
fn criterion_7_value_shape() {
    let t = Instant::now();
    let space = AggregationScheme::agg1(5, 9).unwrap().space();
    let schedule = LearningSchedule {
        slots_per_phase: 1_000_000,
        resets_per_phase: 4000,
        min_phases: 6,
        max_phases: 15,
        ..LearningSchedule::default()
    };
    let slack = schedule.eps_stop;
    let channel = ChannelConfig::uniform(5, 0.25, Some(9), 0.99, 13);
    let out = algorithm_a(&channel, &space, &schedule).unwrap();
    let v = |f: u8, c: usize, e: usize| {
        space
            .index_of(&AggregatedState::Agg1 { f, c, e })
            .ok()
            .map(|i| out.values.values[i])
    };
    let series = |pts: Vec<Option<f64>>| pts.into_iter().flatten().collect::<Vec<_>>();
    let along_c0 = series((1..=5).map(|c| v(2, c, 0)).collect());
    let along_c1 = series((1..=5).map(|c| v(2, c, 1)).collect());
    let along_e = series((0..=5).map(|e| v(2, 2, e)).collect());
    let up = |xs: &[f64]| xs.windows(2).all(|w| w[1] >= w[0] - slack);
    let down = |xs: &[f64]| xs.windows(2).all(|w| w[1] <= w[0] + slack);
    let learned_ok = along_c0.len() >= 2 && up(&along_c0) && up(&along_c1) && down(&along_e);

    let o = ExactOracle::uniform(4, 0.25).unwrap();
    let g = o.ground_model(&AggregationScheme::one_d(4).unwrap().space()).unwrap();
    let exact = g.exact_optimal(Criterion::Discounted(0.99), None).unwrap();
    let shape = oracle::verify_value_shape(&g.space, &exact.values.values, 0.0);
    let passed = learned_ok && shape.monotone;
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    verdict(
        7,
        passed,
        &format!(
            "V(2,C,0) [{}], V(2,C,1) [{}], V(2,2,E) [{}] with slack {slack} ({:?}); exact OneD K=4 violations {}",
            fmt(&along_c0),
            fmt(&along_c1),
            fmt(&along_e),
            out.stop,
            shape.violations.len()
        ),
        t,
    );
    assert!(passed);
}

#[test]
fn criterion_8_transience_above_smallest_coded_clique() {
    let t = Instant::now();
    let mut all = true;
    let mut checked = 0;
    for p in [0.1, 0.25, 0.4] {
        let o = ExactOracle::uniform(4, p).unwrap();
        let g = o.ground_model(&AggregationScheme::one_d(4).unwrap().space()).unwrap();
        for policy in oracle::all_policies(&g.space) {
            let m = oracle::minimal_clique_action_size(&g.space, &policy).unwrap_or(4);
            let recurrent = g.recurrent_aggregates(&policy).unwrap();
            for i in recurrent {
                let l = g.space.state(i).clique_size().unwrap();
                if l > m {
                    all = false;
                    println!(
                        "  p={p} policy {:?}: L={l} recurrent with m={m}",
                        policy.actions().iter().map(|a| a.label()).collect::<Vec<_>>()
                    );
                }
            }
            checked += 1;
        }
    }
    verdict(8, all, &format!("{checked} policy/loss pairs at K=4, all states with L > m transient"), t);
    assert!(all);
}

fn payload_sets() -> impl Strategy<Value = Vec<Vec<u8>>> {
    prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 2..8)
}

#[test]
fn criterion_9_codec_round_trip() {
    let t = Instant::now();
    let cases = 1024;
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(cases));
    let result = runner.run(&payload_sets(), |payloads| {
        let packets: Vec<Packet> = payloads
            .iter()
            .enumerate()
            .map(|(i, p)| Packet::new(i, i as u64, p.clone()))
            .collect();
        let coded = xor_combine(&packets, &vec![true; packets.len()]).unwrap();
        for (i, target) in payloads.iter().enumerate() {
            let others: Vec<&[u8]> = payloads
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| p.as_slice())
                .collect();
            let mut got = peel(&coded, &others);
            got.truncate(target.len());
            prop_assert_eq!(&got, target);
        }
        Ok(())
    });
    verdict(9, result.is_ok(), &format!("{cases} random payload sets round-trip ({result:?})"), t);
    assert!(result.is_ok());
}
