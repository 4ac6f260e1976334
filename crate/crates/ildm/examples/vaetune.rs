use ildm::codec::*;
use ildm::scenegen;

fn main() {
    let data: Vec<_> = scenegen::generate_dataset(16, 7, 32).unwrap()
        .into_iter().map(|r| r.sample.intrinsics.into_tensor()).collect();
    let cfg = VaeConfig::intrinsic(32);
    for (steps, batch, lr) in [(1400usize, 16usize, 4e-3f64), (2600, 8, 3e-3)] {
        let t0 = std::time::Instant::now();
        let tc = VaeTrainConfig { steps, batch, lr, zero_mask_prob: 0.0, seed: 3, log_every: 100, ..Default::default() };
        let (vae, store, _) = train_vae(&data, &cfg, &tc).unwrap();
        let (mean, worst) = eval_vae_per_channel_mse(&vae, &store, &data).unwrap();
        println!("steps {steps} b {batch} lr {lr}: mean {mean:.5} worst {worst:.5} ({:.0}s)", t0.elapsed().as_secs_f64());
    }
}
