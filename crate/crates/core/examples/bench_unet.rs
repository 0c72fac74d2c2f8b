//! Forward and training-step throughput of the U-Net on 32x32 inputs.
//!
//! usage: cargo run --release -p pa-diffusion --example bench_unet -- [width] [batch] [unshuffle 0|1]

use pa_diffusion::denoiser::{UNet, UNetConfig};
use pa_nn::{Graph, Tensor};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let width: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(32);
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(64);
    let unshuffle = args.get(3).map(|s| s == "1").unwrap_or(true);
    let cfg = UNetConfig { cond_channels: 3, base_width: width, pixel_unshuffle: unshuffle, ..Default::default() };
    let net = UNet::<f32>::new(cfg, 0).unwrap();
    println!("params {}", net.params().numel());
    let x = Tensor::full(&[4, n, 32, 32], 0.1f32);
    let t: Vec<usize> = (0..n).map(|i| i * 7 % 1000 + 1).collect();
    let start = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let mut g = Graph::new(false);
        let xi = g.input(x.clone());
        let _ = net.forward(&mut g, xi, &t);
    }
    let per = start.elapsed().as_secs_f64() / reps as f64;
    println!("eval batch {n}: {:.1} ms ({:.2} ms/img)", per * 1e3, per * 1e3 / n as f64);
    let mut net = net;
    let start = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new(true);
        let xi = g.input(x.clone());
        let y = net.forward(&mut g, xi, &t);
        let tgt = g.input(Tensor::full(&[1, n, 32, 32], 0.5));
        let l = g.mse(y, tgt);
        net.params_mut().zero_grads();
        g.backward(l, net.params_mut());
    }
    let per = start.elapsed().as_secs_f64() / reps as f64;
    println!("train batch {n}: {:.1} ms ({:.2} ms/img)", per * 1e3, per * 1e3 / n as f64);
}
