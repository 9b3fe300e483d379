//! Temporary probe (deleted before finalizing).

use derts::gradest::EstimateMode;
use derts::harness::{median_accuracy, run_experiment, BatchOrder, ExperimentConfig, Sampler};
use std::time::Instant;

fn probe(tag: &str, cfg: &ExperimentConfig) {
    let marks = cfg.budget_marks();
    let mut lines = Vec::new();
    for sampler in [Sampler::Derts, Sampler::Random, Sampler::DertsNoWeights] {
        let started = Instant::now();
        let mut c = cfg.clone();
        c.sampler = sampler;
        let rows = run_experiment(&c).unwrap();
        let m: Vec<f64> = marks
            .iter()
            .map(|&it| median_accuracy(&rows, sampler.label(), it).unwrap())
            .collect();
        lines.push(format!(
            "  {:16} 10%={:.4} 30%={:.4} final={:.4} ({:.0}s)",
            sampler.label(),
            m[0],
            m[1],
            m[2],
            started.elapsed().as_secs_f64()
        ));
    }
    println!("{tag} marks {marks:?}\n{}", lines.join("\n"));
}

#[test]
fn probe_budget_trend_labelaware() {
    for seeds in [vec![1u64, 2, 3, 4, 5], vec![11, 12, 13, 14, 15]] {
        let n = ExperimentConfig {
            seeds: seeds.clone(),
            warmup_iters: 10,
            estimator: EstimateMode::AfterAdapt,
            estimate_steps: Some(20),
            batch_order: BatchOrder::Strided,
            iterations: 410,
            eval_tasks: 150,
            ..ExperimentConfig::default()
        };
        probe(&format!("N warm10 ({seeds:?})"), &n);

        let o = ExperimentConfig { meta_batch: 4, ..n.clone() };
        probe(&format!("O batch4 ({seeds:?})"), &o);
    }
}
