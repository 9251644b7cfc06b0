//! Fits a small ReLU network to a 1D function with the hand-written
//! backward pass and Adam.
//!
//! cargo run --release --example fit_mlp

use ndvg::optim::{decayed_lr, Adam};
use ndvg::{Activation, Mlp, MlpSpec, PosEnc};

fn main() -> ndvg::Result<()> {
    let enc = PosEnc::new(4);
    let spec = MlpSpec {
        input_dim: enc.out_dim(1),
        hidden_width: 32,
        hidden_layers: 2,
        heads: vec![Activation::Linear],
    };
    let mut net = Mlp::<f64>::init(spec, 0)?;
    let mut adam = Adam::new(net.num_params());
    let xs: Vec<f64> = (0..64).map(|i| -1.0 + 2.0 * i as f64 / 63.0).collect();
    let target = |x: f64| (3.0 * x).sin() * 0.5 + 0.2 * x;
    let input: Vec<f64> = xs.iter().flat_map(|&x| enc.encode_vec(&[x])).collect();

    let iters = 2000;
    for it in 0..=iters {
        let cache = net.forward(input.clone(), xs.len())?;
        let err: Vec<f64> = cache.output().iter().zip(&xs).map(|(y, &x)| y - target(x)).collect();
        let mse = err.iter().map(|e| e * e).sum::<f64>() / xs.len() as f64;
        if it % 400 == 0 {
            println!("iter {it:4}: mse {mse:.3e}");
        }
        if it == iters {
            break;
        }
        let up: Vec<f64> = err.iter().map(|e| 2.0 * e / xs.len() as f64).collect();
        net.backward(&cache, &up);
        let lr = decayed_lr(1e-2, 0.1, it, iters);
        adam.step("net", &mut net.params, &mut net.grads, lr)?;
    }
    Ok(())
}
