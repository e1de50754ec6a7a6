use banditroute::data::{generate_synthetic, generate_synthetic_with_truth, normalize_cost};
use banditroute::harness::metrics::{metrics_csv, MetricsTable};
use banditroute::harness::CHECKPOINT_FILE;
use banditroute::net::load_checkpoint;
use banditroute::{
    run_protocol, utility_reward, Dataset, PolicyKind, ProtocolConfig, RewardParams, RunSpec,
    Simulation, SyntheticSpec,
};

fn dataset(seed: u64, n: usize, k: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        seed,
        num_samples: n,
        num_actions: k,
        num_domains: 3,
        embed_dim: 6,
    })
    .unwrap()
}

fn spec(policy: PolicyKind, slices: usize) -> RunSpec {
    RunSpec::new(
        policy,
        ProtocolConfig {
            num_slices: slices,
            replay_epochs: 2,
            seed: 3,
            ..Default::default()
        },
    )
}

#[test]
fn max_quality_slices_report_the_oracle_quality() {
    let data = dataset(4, 300, 4);
    let out = run_protocol(&data, spec(PolicyKind::MaxQuality, 3)).unwrap();
    for (m, chunk) in out.metrics.iter().zip(data.samples().chunks(100)) {
        let best: f64 = chunk
            .iter()
            .map(|s| s.quality.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / chunk.len() as f64;
        assert!((m.avg_quality - best).abs() < 1e-12);
    }
}

#[test]
fn seeded_runs_are_byte_identical() {
    let data = dataset(5, 240, 3);
    for policy in PolicyKind::ALL {
        let a = run_protocol(&data, spec(policy, 3)).unwrap();
        let b = run_protocol(&data, spec(policy, 3)).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics), "{policy}");
        assert_eq!(a.actions(), b.actions());
    }
}

#[test]
fn neural_run_never_reads_counterfactual_feedback() {
    let data = dataset(6, 200, 4);
    let out = run_protocol(&data, spec(PolicyKind::NeuralUcb, 4)).unwrap();
    assert_eq!(out.counts.full_reads, 0);
    assert_eq!(out.counts.revealed, 200);
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_next_slice() {
    let data = dataset(7, 160, 3);
    let full = run_protocol(&data, spec(PolicyKind::NeuralUcb, 2)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Simulation::new(&data, spec(PolicyKind::NeuralUcb, 2)).unwrap();
    first.run_slice().unwrap();
    let part = first.into_output();
    part.write_to(dir.path()).unwrap();
    let (params, opt) = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();

    let mut resumed = Simulation::resume(
        &data,
        spec(PolicyKind::NeuralUcb, 2),
        params,
        opt,
        part.records.clone(),
        part.metrics.clone(),
    )
    .unwrap();
    resumed.run_slice().unwrap();
    assert!(resumed.is_finished());
    let out = resumed.into_output();
    assert_eq!(out.actions(), full.actions());
    assert_eq!(metrics_csv(&out.metrics), metrics_csv(&full.metrics));
}

#[test]
fn resume_rejects_a_buffer_that_does_not_match_the_slices() {
    let data = dataset(7, 160, 3);
    let mut first = Simulation::new(&data, spec(PolicyKind::NeuralUcb, 2)).unwrap();
    first.run_slice().unwrap();
    let part = first.into_output();
    let (params, opt) = part.network.clone().unwrap();
    let short = part.records[..10].to_vec();
    assert!(Simulation::resume(
        &data,
        spec(PolicyKind::NeuralUcb, 2),
        params,
        opt,
        short,
        part.metrics
    )
    .is_err());
}

#[test]
fn planted_best_action_usually_matches_the_realized_best() {
    let truth = generate_synthetic_with_truth(&SyntheticSpec {
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let data = &truth.dataset;
    let params = RewardParams::default();
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    let mut hits = 0;
    for (s, planted) in data.samples().iter().zip(&truth.planted_quality) {
        let util = |q: &[f64]| -> Vec<f64> {
            q.iter()
                .zip(&s.cost)
                .map(|(&q, &c)| utility_reward(q, normalize_cost(c, data.cmax()), &params))
                .collect()
        };
        if argmax(&util(planted)) == argmax(&util(&s.quality)) {
            hits += 1;
        }
    }
    let rate = hits as f64 / data.len() as f64;
    assert!(rate >= 0.6, "match rate {rate}");
}

#[test]
fn single_action_datasets_always_route_to_it() {
    let data = dataset(8, 120, 1);
    for policy in PolicyKind::ALL {
        let out = run_protocol(&data, spec(policy, 2)).unwrap();
        assert!(out.actions().iter().all(|&a| a == 0), "{policy}");
        assert!(out.metrics.iter().all(|m| m.action_rate == vec![1.0]));
    }
}

#[test]
fn oracles_bound_every_policy() {
    let data = dataset(9, 300, 4);
    let runs: Vec<_> = PolicyKind::ALL
        .iter()
        .map(|&p| (p, run_protocol(&data, spec(p, 3)).unwrap()))
        .collect();
    let get = |p: PolicyKind| &runs.iter().find(|(q, _)| *q == p).unwrap().1;
    for t in 0..3 {
        let maxq = get(PolicyKind::MaxQuality).metrics[t].avg_quality;
        let minc = get(PolicyKind::MinCost).metrics[t].avg_cost;
        for (p, run) in &runs {
            assert!(run.metrics[t].avg_quality <= maxq + 1e-12, "{p} slice {t}");
            assert!(run.metrics[t].avg_cost >= minc - 1e-12, "{p} slice {t}");
        }
    }
}

#[test]
fn metrics_agree_with_an_independent_recomputation() {
    let data = dataset(10, 100, 3);
    let params = RewardParams::default();
    for policy in [PolicyKind::Random, PolicyKind::NeuralUcb] {
        let out = run_protocol(&data, spec(policy, 1)).unwrap();
        assert_eq!(out.metrics.len(), 1);
        let table = MetricsTable::parse(&metrics_csv(&out.metrics)).unwrap();
        let (mut r, mut q, mut c) = (0.0, 0.0, 0.0);
        let mut rates = [0.0; 3];
        for (s, &a) in data.samples().iter().zip(&out.actions()) {
            r += utility_reward(
                s.quality[a],
                normalize_cost(s.cost[a], data.cmax()),
                &params,
            );
            q += s.quality[a];
            c += s.cost[a];
            rates[a] += 0.01;
        }
        let close = |col: &str, want: f64| {
            let got = table.column(col).unwrap()[0];
            assert!(
                (got - want).abs() < 1e-12,
                "{policy} {col}: {got} vs {want}"
            );
        };
        close("avg_reward", r / 100.0);
        close("cum_reward", r);
        close("avg_quality", q / 100.0);
        close("avg_cost", c / 100.0);
        for (a, rate) in rates.iter().enumerate() {
            close(&format!("action_rate_{a}"), *rate);
        }
    }
}
