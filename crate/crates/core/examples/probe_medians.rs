
// multi-replicate medians probe
use cage_core::synth::{rank_experiment, ExperimentConfig, SynthSpec};
use cage_core::inference::GibbsConfig;

fn main() {
    let master: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1234);
    let spec = SynthSpec { seed: master, samples_per_cell: 100, ..Default::default() };
    let thin: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let cfg = ExperimentConfig { mcmc: GibbsConfig::new(2000, 500, thin, 77 + master), ..Default::default() };
    let t0 = std::time::Instant::now();
    let rows = rank_experiment(&spec, &[9, 100, 256], 10, &cfg).unwrap();
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    for r in [9usize, 100, 256] {
        let mut vals: Vec<usize> = rows.iter().filter(|x| x.r == r).map(|x| x.n_c_op).collect();
        vals.sort_unstable();
        let med = (vals[4] + vals[5]) as f64 / 2.0;
        println!("r = {r:3}: {vals:?}  median = {med}");
    }
}
