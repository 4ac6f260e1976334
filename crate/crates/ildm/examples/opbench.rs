use ildm::graph::*;
use ildm::rng::Rng;
use ildm::tensor::Tensor;

fn time_op(name: &str, flops: f64, mut f: impl FnMut()) {
    let t0 = std::time::Instant::now();
    let reps = 30;
    for _ in 0..reps { f(); }
    let el = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{name}: {:.2} ms ({:.1} GFLOP/s)", el * 1e3, flops / el / 1e9);
}

fn main() {
    let mut rng = Rng::new(1);
    let q = Tensor::randn(&[8, 256, 32], &mut rng);
    let k = Tensor::randn(&[8, 512, 32], &mut rng);
    let v = Tensor::randn(&[8, 512, 32], &mut rng);
    time_op("attn 8x256x512 d32 h4", 2.0*8.0*4.0*2.0*256.0*512.0*8.0, || {
        let mut tape = Tape::new();
        let qv = tape.leaf(q.clone()); let kv = tape.leaf(k.clone()); let vv = tape.leaf(v.clone());
        let _ = tape.attention(qv, kv, vv, 4, 256, 0.5);
    });
    let x = Tensor::randn(&[8, 32, 16, 16], &mut rng);
    let w = Tensor::randn(&[32, 32, 3, 3], &mut rng);
    let b = Tensor::randn(&[32], &mut rng);
    time_op("conv 8x32x16x16 -> 32", 2.0*8.0*32.0*256.0*288.0, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()); let wv = tape.leaf(w.clone()); let bv = tape.leaf(b.clone());
        let _ = tape.conv2d(xv, wv, Some(bv), 1, 1);
    });
    let xt = Tensor::randn(&[8, 256, 32], &mut rng);
    let wl = Tensor::randn(&[32, 32], &mut rng);
    time_op("linear 2048x32x32", 2.0*2048.0*32.0*32.0, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(xt.clone()); let wv = tape.leaf(wl.clone());
        let _ = tape.linear(xv, wv, None);
    });
    let g = Tensor::randn(&[32], &mut rng);
    time_op("groupnorm 8x32x16x16", 8.0*32.0*256.0*6.0, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()); let gv = tape.leaf(g.clone()); let bv = tape.leaf(g.clone());
        let _ = tape.group_norm(xv, gv, bv, 8);
    });
    time_op("layernorm 8x256x32", 8.0*256.0*32.0*6.0, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(xt.clone()); let gv = tape.leaf(g.clone()); let bv = tape.leaf(g.clone());
        let _ = tape.layer_norm(xv, gv, bv);
    });
    time_op("silu 8x32x16x16", 8.0*32.0*256.0*4.0, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let _ = tape.silu(xv);
    });
    time_op("leaf clone cost", 1.0, || {
        let mut tape = Tape::new();
        let _ = tape.leaf(x.clone());
    });
}
