//! Minimal tape-and-optimizer loop: fits a two-layer net to a sine curve.
//!
//! Shows the raw training pattern the separation trainer is built on:
//! stage parameters onto a fresh tape, build the loss, run backward,
//! accumulate into the store, step the optimizer. Run with
//! `cargo run --release -p querysep --example fit_curve`.

use querysep::autodiff::{Adam, ParamStore, Tape, Tensor};
use querysep::rng::{normal, rng_for};

fn main() {
    let n = 64;
    let xs: Vec<f32> = (0..n).map(|i| i as f32 / n as f32 * 6.0 - 3.0).collect();
    let ys: Vec<f32> = xs.iter().map(|&x| x.sin()).collect();

    let hidden = 32;
    let mut rng = rng_for(3, "fit_curve/init");
    let mut init = |rows: usize, cols: usize, scale: f32| {
        let data = (0..rows * cols).map(|_| normal(&mut rng) as f32 * scale).collect();
        Tensor::from_vec(&[rows, cols], data)
    };

    let mut store: ParamStore<f32> = ParamStore::new();
    let w1 = store.add("w1", init(1, hidden, 1.0), true);
    let b1 = store.add("b1", Tensor::zeros(&[1, hidden]), true);
    let w2 = store.add("w2", init(hidden, 1, 0.3), true);
    let b2 = store.add("b2", Tensor::zeros(&[1, 1]), true);

    let x_t = Tensor::from_vec(&[n, 1], xs.clone());
    let y_t = Tensor::from_vec(&[n, 1], ys.clone());

    let mut opt = Adam::new(3e-3);
    for step in 0..=2000 {
        let mut tape: Tape<f32> = Tape::new();
        let staged = store.stage(&mut tape);
        let x = tape.leaf(x_t.clone());
        let y = tape.leaf(y_t.clone());

        let h = tape.matmul(x, staged.var(w1));
        let h = tape.add(h, staged.var(b1));
        let h = tape.relu(h);
        let out = tape.matmul(h, staged.var(w2));
        let out = tape.add(out, staged.var(b2));

        let diff = tape.sub(out, y);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean_all(sq);

        if step % 400 == 0 {
            println!("step {step:>4}  mse {:.6}", tape.val(loss).data[0]);
        }

        let mut grads = tape.backward(loss);
        store.accumulate(&staged, &mut grads, 1.0);
        opt.step(&mut store, |_| true);
        store.zero_grads();
    }

    let probe = [-2.0f32, -1.0, 0.0, 1.0, 2.0];
    let mut tape: Tape<f32> = Tape::new();
    let staged = store.stage(&mut tape);
    let x = tape.leaf(Tensor::from_vec(&[probe.len(), 1], probe.to_vec()));
    let h = tape.matmul(x, staged.var(w1));
    let h = tape.add(h, staged.var(b1));
    let h = tape.relu(h);
    let out = tape.matmul(h, staged.var(w2));
    let out = tape.add(out, staged.var(b2));
    let got = &tape.val(out).data;

    println!("\n{:>6} {:>9} {:>9}", "x", "sin(x)", "net(x)");
    for (i, &x) in probe.iter().enumerate() {
        println!("{x:>6.2} {:>9.4} {:>9.4}", x.sin(), got[i]);
    }
}
