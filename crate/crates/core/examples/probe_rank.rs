// Scratch probe: where does the two-stage search land per fitted rank under
// the resampled region-integration mode, and how does n_w shape the curve?
use cage_core::cage::CageKind;
use cage_core::inference::GibbsConfig;
use cage_core::regionalize::{candidates, select_optimal_with, RegionIntegration, SearchConfig};
use cage_core::synth::{fit_synth, simulate, ExperimentConfig, SynthSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).cloned().unwrap_or_else(|| "var".into());
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(42);
    let spec = SynthSpec { seed, samples_per_cell: 100, ..Default::default() };
    let data = simulate(&spec).unwrap();
    let cfg = ExperimentConfig {
        mcmc: GibbsConfig::new(2000, 500, 30, 7 + seed),
        ..Default::default()
    };
    println!("mode = {mode}, seed = {seed}");
    for &r in &[9usize, 100, 256] {
        let (oc, draws) = fit_synth(&data, r, &cfg).unwrap();
        let mut scfg = SearchConfig::new(cfg.g_l, cfg.g_u, cfg.search_seed + seed);
        scfg.criterion = CageKind::Dcage;
        let cands = candidates(&draws, &data.fine, &scfg).unwrap();
        let t = std::time::Instant::now();
        let integration = match mode.as_str() {
            "var" => RegionIntegration::VarianceForm,
            "mean" => RegionIntegration::MemberMean,
            other => RegionIntegration::Resample { n_w: other.parse().unwrap() },
        };
        let result = select_optimal_with(
            cands,
            &draws,
            &oc,
            &data.fine,
            CageKind::Dcage,
            integration,
            scfg.seed,
        )
        .unwrap();
        let sel_t = t.elapsed().as_secs_f64();
        println!(
            "r = {r:3}: n_C_op = {:3} (avg {:.6e})  [select {sel_t:.1}s]",
            result.optimal.k, result.optimal_avg
        );
        let mut per_k: std::collections::BTreeMap<usize, f64> = Default::default();
        for s in &result.all {
            let e = per_k.entry(s.k).or_insert(f64::INFINITY);
            if s.avg_criterion < *e {
                *e = s.avg_criterion;
            }
        }
        for k in [2usize, 3, 5, 6, 8, 10, 13, 15, 20, 30, 50, 70, 90, 99] {
            if let Some(v) = per_k.get(&k) {
                println!("   k={k:3}  min avg = {v:.6e}");
            }
        }
    }
}
