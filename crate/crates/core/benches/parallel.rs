use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use longhaz::expand::{expand_discrete, TimeType};
use longhaz::inference::{fit_pql, FitOptions};
use longhaz::model::{conditional_loglik, ModelParams, ModelSpec};
use longhaz::par;
use longhaz::simulate::{simulate_pedigree, simulate_survival, SimulationSpec};

fn data() -> (longhaz::pedigree::Pedigree, longhaz::expand::PseudoTable, ModelSpec) {
    let truth = SimulationSpec {
        time_type: TimeType::Discrete,
        baseline: vec![vec![0.06, 0.07, 0.08, 0.09, 0.10]],
        cuts: vec![],
        beta: vec![],
        sire_covariance: vec![vec![0.06]],
        herd_covariance: vec![vec![0.22]],
        n_herds: 200,
        censoring: 0.0,
        stratum_length: None,
    };
    let ped = simulate_pedigree(200, 30).unwrap();
    let (records, _) = simulate_survival(&ped, &truth, 1).unwrap();
    let table = expand_discrete(&records, &[1]).unwrap().select_cause(1, 0);
    let spec = ModelSpec::from_json(
        r#"{"traits": [{"cause": 1, "time_type": "discrete", "family": "poisson_approx"}],
            "random": [{"name": "sire", "structure": "pedigree", "column": "sire"},
                       {"name": "herd", "structure": "iid", "column": "herd"}]}"#,
    )
    .unwrap();
    (ped, table, spec)
}

fn pools() -> Vec<usize> {
    let full = par::current_num_threads().max(1);
    if full > 1 {
        vec![1, full]
    } else {
        vec![1]
    }
}

fn bench(c: &mut Criterion) {
    let (ped, table, spec) = data();
    let keys: Vec<(u32, u32)> = (1..=5).map(|k| (0, k)).collect();
    let mut params = ModelParams::zeros(&spec, &[keys]);
    for (c, name) in ["sire", "herd"].iter().enumerate() {
        let col = table.cluster_index(name).unwrap();
        for level in &table.cluster_levels[col] {
            params.effects[c][0].insert(level.clone(), 0.0);
        }
    }
    for v in params.log_baseline[0].values_mut() {
        *v = -2.5;
    }

    let mut group = c.benchmark_group("loglik");
    for threads in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || conditional_loglik(&table, &spec, &params).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    let opts = FitOptions::default();
    for threads in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || fit_pql(&table, &spec, Some(&ped), &opts).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
