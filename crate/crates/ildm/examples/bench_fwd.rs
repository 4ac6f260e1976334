use ildm::denoiser::*;
use ildm::graph::*;
use ildm::rng::Rng;
use ildm::tensor::Tensor;
use ildm::xattn::AttnWeightSchedule;

fn main() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1);
    let cfg = DenoiserConfig::default(); // latent 16x16
    let model = Denoiser::build(&mut store, &cfg, &mut rng, true);
    let b = 8;
    let x = Tensor::randn(&[b, 4, 16, 16], &mut rng);
    let i = Tensor::randn(&[b, 4, 16, 16], &mut rng);
    let ts: Vec<usize> = (0..b).map(|k| k * 100).collect();
    let tp: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let cond = null_cond_ids(b, cfg.max_tokens);
    model.freeze_base(&mut store);

    // dual forward + backward
    let t0 = std::time::Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let iv = tape.leaf(i.clone());
        let out = model.forward_dual(&mut tape, &store, xv, iv, &ts, &tp, &cond, &AttnWeightSchedule::Full).unwrap();
        let loss_x = tape.mse(out.pred_x, Tensor::zeros(&[b,4,16,16]), None);
        let loss_i = tape.mse(out.pred_i.unwrap(), Tensor::zeros(&[b,4,16,16]), None);
        let li = tape.scale(loss_i, 4.0);
        let total = tape.add(loss_x, li);
        tape.backward(total, &mut store);
    }
    println!("dual fwd+bwd (b=8): {:.1} ms/step", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // single forward only (sampling cost unit)
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let _ = model.forward_image_only(&mut tape, &store, xv, &ts, &cond).unwrap();
    }
    println!("single fwd (b=8): {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let iv = tape.leaf(i.clone());
        let _ = model.forward_dual(&mut tape, &store, xv, iv, &ts, &tp, &cond, &AttnWeightSchedule::Full).unwrap();
    }
    println!("dual fwd (b=8): {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);
}
