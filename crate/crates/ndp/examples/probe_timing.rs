use std::time::Instant;

use ndp::checkpoint::load_checkpoint;
use ndp::gp::{sample_inputs, InputMode};
use ndp::rng::Rng;
use ndp::sample::{sample_conditional_many, targets_at, Context};
use ndp::tensor::Tensor;

fn main() {
    let (params, cfg) = load_checkpoint::<f32>(std::path::Path::new("/tmp/ndp_smoke/probe.ndpc")).unwrap();
    let mcfg = cfg.model_config();
    let sched = cfg.noise_schedule().unwrap();
    let scfg = cfg.sampler_config();
    let mut rng = Rng::new(1);
    let ctx_x = sample_inputs(5, 1, InputMode::UniformRandom, &mut rng).unwrap();
    let ctx_y: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
    let ctx = Context::new(ctx_x, ctx_y).unwrap();
    let eval_x = sample_inputs(64, 1, InputMode::Grid, &mut Rng::new(0)).unwrap();
    let targets = targets_at(&eval_x);
    let t0 = Instant::now();
    let draws = sample_conditional_many(&ctx, &targets, &params, &mcfg, &sched, &scfg, 7, 256).unwrap();
    println!("256 chains (T={}, U={}, P=69): {:.1?}", sched.timesteps(), scfg.resample_count, t0.elapsed());
    println!("first y: {:.3}", draws[0].y[0]);
    let _ = Tensor::<f64>::zeros(&[1]);
}
