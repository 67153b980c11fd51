// scratch: measure reference-spec ablation margins across candidate seeds
use dtas_core::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse().unwrap()).collect()
    } else {
        vec![REFERENCE_SEED]
    };
    for seed in seeds {
        let mut spec = ToyModelSpec::reference();
        spec.seed = seed;
        let t0 = std::time::Instant::now();
        let cfg = PipelineConfig::default();
        let out = run_pipeline(&spec, &cfg).unwrap();
        let e2e: Vec<f64> = out.report.variants.iter().map(|v| v.scores.end_to_end_mse).collect();
        let alphas: Vec<f64> = out.calibration.per_layer.iter().map(|c| c.alpha).collect();
        let mut rels = Vec::new();
        for w in e2e.windows(2) {
            rels.push(1.0 - w[1] / w[0]);
        }
        let cfg8 = PipelineConfig { weight_bits: 8, ..PipelineConfig::default() };
        let out8 = run_pipeline(&spec, &cfg8).unwrap();
        let e2e8: Vec<f64> = out8.report.variants.iter().map(|v| v.scores.end_to_end_mse).collect();
        let mono = e2e8.iter().zip(&e2e).all(|(w8, w4)| w8 <= w4);
        println!(
            "seed {seed}: improvements {:?}\n  e2e {:?} alphas {:?} pass={} w8<=w4={}  [{:.1}s]",
            rels.iter().map(|r| format!("{:.1}%", r * 100.0)).collect::<Vec<_>>(),
            e2e, alphas, out.report.ablation_pass, mono, t0.elapsed().as_secs_f64()
        );
    }
}
