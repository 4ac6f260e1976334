use ildm::denoiser::*;
use ildm::rng::Rng;
use ildm::tensor::Tensor;
use ildm::train::*;

fn main() {
    let mut rng = Rng::new(3);
    let n = 16;
    let xs: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[4, 8, 8], &mut rng)).collect();
    let caps: Vec<Vec<u8>> = (0..n)
        .map(|k| ildm::scenegen::tokenize(if k % 2 == 0 { "one red sphere on a plane" } else { "two blue boxes on a plane" }).unwrap())
        .collect();
    let cfg = DenoiserConfig { latent_hw: 8, ..Default::default() };
    let tc = BaseTrainConfig { steps: 1200, batch: 16, lr: 1.5e-3, seed: 11, log_every: 200, ..Default::default() };
    let t0 = std::time::Instant::now();
    let (model, store, log) = pretrain_base(&xs, &caps, &cfg, &tc).unwrap();
    println!("base: {:.3} -> {:.4} ({:.0}s)", log.first().unwrap().total, log.last().unwrap().total, t0.elapsed().as_secs_f64());
    let dir = std::env::temp_dir().join("ildm-jointdiag");
    std::fs::create_dir_all(&dir).unwrap();
    let base = dir.join("base.ildc");
    save_denoiser(&base, &model, &store, &tc.diffusion_meta()).unwrap();

    // intrinsic latents: same 16 latents, shifted pairing
    let is: Vec<Tensor> = (0..n).map(|k| xs[(k + 5) % n].clone()).collect();
    for (rank, scale, lr, steps) in [(8usize, 1.0f32, 2e-3f64, 1200usize)] {
        let jc = JointTrainConfig { steps, batch: 8, lr, log_every: 10, seed: 5, ..Default::default() };
        let mut tr = JointTrainer::from_base_checkpoint(&base, rank, scale, false, false, xs.clone(), is.clone(), caps.clone(), jc).unwrap();
        let t0 = std::time::Instant::now();
        let mut first = None;
        let mut rows = Vec::new();
        for s in 0..steps {
            let r = tr.train_step().unwrap();
            if first.is_none() { first = Some(r.clone()); }
            if s % 100 == 0 || s + 1 == steps {
                println!("  step {s}: lx {:.4} li {:.4} total {:.4}", r.loss_x, r.loss_i, r.total);
            }
            rows.push(r);
        }
        let f = first.unwrap();
        let tail: f32 = rows.iter().rev().take(20).map(|r| r.total).sum::<f32>() / 20.0;
        println!("rank {rank} scale {scale} lr {lr}: total {:.4} -> {:.4} (ratio {:.3}) ({:.0}s)",
            f.total, tail, tail / f.total, t0.elapsed().as_secs_f64());
    }
}
