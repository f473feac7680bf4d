use mossti_core::diffcore::{LifParams, Tape, Tensor};
use std::time::Instant;

fn bench(name: &str, reps: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    let per = t0.elapsed().as_secs_f64() * 1e6 / reps as f64;
    eprintln!("{name}: {per:.1} us/rep");
}

#[test]
#[ignore]
fn micro_probe() {
    // conv2 shape: x [32,14] w [128,32,2]; conv3: x [128,6] w [256,128,2]; fc [20,512]
    let x2: Vec<f64> = (0..32 * 14).map(|i| ((i * 7) % 3) as f64 * 0.5).collect();
    let w2: Vec<f64> = (0..128 * 32 * 2).map(|i| (i as f64 * 0.001).sin() * 0.1).collect();
    let x3: Vec<f64> = (0..128 * 6).map(|i| ((i * 5) % 2) as f64).collect();
    let w3: Vec<f64> = (0..256 * 128 * 2).map(|i| (i as f64 * 0.002).cos() * 0.05).collect();
    let xf: Vec<f64> = (0..512).map(|i| ((i * 3) % 2) as f64).collect();
    let wf: Vec<f64> = (0..20 * 512).map(|i| (i as f64 * 0.01).sin() * 0.1).collect();

    bench("conv2 fwd (op)", 2000, || {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(vec![32, 14], x2.clone(), false);
        let w = tape.leaf_owned(vec![128, 32, 2], w2.clone(), false);
        let b = tape.zeros(vec![128]);
        let _ = tape.conv1d(x, w, b).unwrap();
    });
    bench("conv3 fwd (op)", 2000, || {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(vec![128, 6], x3.clone(), false);
        let w = tape.leaf_owned(vec![256, 128, 2], w3.clone(), false);
        let b = tape.zeros(vec![256]);
        let _ = tape.conv1d(x, w, b).unwrap();
    });
    bench("fc fwd (op)", 2000, || {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(vec![512], xf.clone(), false);
        let w = tape.leaf_owned(vec![20, 512], wf.clone(), false);
        let b = tape.zeros(vec![20]);
        let _ = tape.linear(x, w, b).unwrap();
    });
    bench("lif 768 (op)", 2000, || {
        let mut tape = Tape::new();
        let p = LifParams::new(0.9, 0.4, 15.0).unwrap();
        let i = tape.leaf_owned(vec![128, 6], x3.clone(), false);
        let u = tape.zeros(vec![128, 6]);
        let s = tape.zeros(vec![128, 6]);
        let _ = tape.lif_step(i, u, s, &p).unwrap();
    });

    // Full model forward for reference.
    use mossti_core::csnpc::{build, unroll, ModelConfig, UnrollOptions};
    let cfg = ModelConfig::new(20, 20, 30, [0.9; 4], [0.4; 4], 15.0).unwrap();
    let params = build(&cfg, 7).unwrap();
    let xin = Tensor::new(vec![1, 30], (0..30).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
    bench("full fwd unroll", 200, || {
        let _ = unroll(&params, &cfg, &xin, UnrollOptions::default()).unwrap();
    });
    bench("full fwd+bwd", 200, || {
        let opts = UnrollOptions { params_grad: true, loss: Some((1, [1.0, 1.0])), ..UnrollOptions::default() };
        let (mut tape, graph) = unroll(&params, &cfg, &xin, opts).unwrap();
        tape.backward(graph.loss.unwrap()).unwrap();
    });
}

#[test]
#[ignore]
fn unroll_scaling_probe() {
    use mossti_core::csnpc::{build, unroll, ModelConfig, UnrollOptions};
    use mossti_core::diffcore::Tensor as T2;
    for t in [1usize, 2, 5, 10, 20] {
        let cfg = ModelConfig::new(20, t, 30, [0.9; 4], [0.4; 4], 15.0).unwrap();
        let params = build(&cfg, 7).unwrap();
        let xin = T2::new(vec![1, 30], (0..30).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let t0 = Instant::now();
        let reps = 100;
        for _ in 0..reps {
            let _ = unroll(&params, &cfg, &xin, UnrollOptions::default()).unwrap();
        }
        eprintln!("T={t}: {:.1} us/unroll", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);
    }
}

#[test]
#[ignore]
fn backward_split_probe() {
    use mossti_core::csnpc::{build, unroll, ModelConfig, UnrollOptions};
    use mossti_core::diffcore::Tensor as T3;
    let cfg = ModelConfig::new(20, 20, 30, [0.9; 4], [0.4; 4], 15.0).unwrap();
    let params = build(&cfg, 7).unwrap();
    let xin = T3::new(vec![1, 30], (0..30).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
    let opts = UnrollOptions { params_grad: true, loss: Some((1, [1.0, 1.0])), ..UnrollOptions::default() };
    let reps = 100;
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for _ in 0..reps {
        let t0 = Instant::now();
        let (mut tape, graph) = unroll(&params, &cfg, &xin, opts).unwrap();
        fwd += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        tape.backward(graph.loss.unwrap()).unwrap();
        bwd += t1.elapsed().as_secs_f64();
    }
    eprintln!("fwd {:.1} us, bwd {:.1} us", fwd * 1e6 / reps as f64, bwd * 1e6 / reps as f64);
}

#[test]
#[ignore]
fn params_grad_flag_probe() {
    use mossti_core::csnpc::{build, unroll, ModelConfig, UnrollOptions};
    use mossti_core::diffcore::Tensor as T4;
    let cfg = ModelConfig::new(20, 20, 30, [0.9; 4], [0.4; 4], 15.0).unwrap();
    let params = build(&cfg, 7).unwrap();
    let xin = T4::new(vec![1, 30], (0..30).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
    for (name, pg, loss) in [
        ("plain", false, None),
        ("grad-only", true, None),
        ("loss-only", false, Some((1usize, [1.0, 1.0]))),
        ("grad+loss", true, Some((1usize, [1.0, 1.0]))),
    ] {
        let reps = 100;
        let t0 = Instant::now();
        for _ in 0..reps {
            let opts = UnrollOptions { params_grad: pg, loss, ..UnrollOptions::default() };
            let _ = unroll(&params, &cfg, &xin, opts).unwrap();
        }
        eprintln!("{name}: {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);
    }
}
