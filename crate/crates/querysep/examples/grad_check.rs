//! Verifies tape gradients against finite differences.
//!
//! Builds three probe functions of increasing depth on the f64 tape and
//! compares every analytic input gradient with a central-difference
//! estimate. Run with `cargo run --release -p querysep --example grad_check`.

use querysep::autodiff::{check_gradients, Tape, Var};

fn attention_probe(tape: &mut Tape<f64>, vars: &[Var]) -> Var {
    let (q, k, v) = (vars[0], vars[1], vars[2]);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, 1.0 / (6.0f64).sqrt());
    let weights = tape.softmax(scaled);
    let mixed = tape.matmul(weights, v);
    let squashed = tape.sigmoid(mixed);
    tape.sum_all(squashed)
}

fn conv_probe(tape: &mut Tape<f64>, vars: &[Var]) -> Var {
    let (x, w, b) = (vars[0], vars[1], vars[2]);
    let y = tape.conv2d(x, w, b, 2, 1);
    let a = tape.leaky_relu(y, 0.2);
    tape.sum_all(a)
}

fn norm_probe(tape: &mut Tape<f64>, vars: &[Var]) -> Var {
    let (x, gain, bias) = (vars[0], vars[1], vars[2]);
    let n = tape.layer_norm(x, gain, bias);
    let e = tape.exp(n);
    let lp = tape.log1p(e);
    tape.mean_all(lp)
}

fn main() {
    let probes: [(&str, fn(&mut Tape<f64>, &[Var]) -> Var, Vec<Vec<usize>>); 3] = [
        (
            "attention",
            attention_probe,
            vec![vec![4, 6], vec![5, 6], vec![5, 6]],
        ),
        (
            "strided conv",
            conv_probe,
            vec![vec![2, 3, 8, 8], vec![4, 3, 3, 3], vec![4]],
        ),
        ("layer norm", norm_probe, vec![vec![3, 10], vec![10], vec![10]]),
    ];

    for (name, f, shapes) in probes {
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let report = check_gradients(&shape_refs, 11, f);
        println!(
            "{name:<12} max rel err {:.3e}  max abs diff {:.3e}",
            report.max_rel_err, report.max_abs_diff
        );
        report.assert_within(1e-4);
    }
    println!("all probes within 1e-4 of the finite-difference oracle");
}
