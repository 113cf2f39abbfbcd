use vmdnet_core::bilevel::{outer_k_search, SearchConfig, SearchSpace, VmdCriteriaScorer, CandidateScorer};
use vmdnet_core::synthetic::ar1_noise;
use vmdnet_core::vmd::VmdConfig;
use vmdnet_core::Signal;

fn run(name: &str, x: Vec<f64>, a_min: f64, a_max: f64, tau: f64, n_len: usize) {
    let signal = Signal::new(x).unwrap();
    let template = VmdConfig { dual_step: tau, tolerance: 1e-6, max_iterations: 300, ..VmdConfig::default() };
    let cfg = SearchConfig { inner_grid_points: 6, inner_refine_iters: 3, rng_seed: 9, ..SearchConfig::default() };
    let space = SearchSpace { k_min: 2, k_max: 5, alpha_min: a_min, alpha_max: a_max };
    let mut wins = std::collections::BTreeMap::new();
    let mut scorer = VmdCriteriaScorer::new(&signal, template, &cfg);
    for r in 0..20 {
        scorer.on_restart_begin(r);
        let out = outer_k_search(&mut scorer, &space, &cfg, r).unwrap();
        *wins.entry(out.rows[out.best.unwrap()].k).or_insert(0usize) += 1;
    }
    println!("{name} len={n_len}: {wins:?}");
}

fn main() {
    for seed in [3u64, 5, 11] {
        for n in [1024usize, 2048] {
            run(&format!("white s={seed} a[500,1500] t0  "), ar1_noise(n, 0.0, 1.0, seed), 500.0, 1500.0, 0.0, n);
            run(&format!("white s={seed} a[200,1000] t0  "), ar1_noise(n, 0.0, 1.0, seed), 200.0, 1000.0, 0.0, n);
        }
    }
}
