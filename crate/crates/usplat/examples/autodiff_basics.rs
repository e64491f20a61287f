//! The reverse-mode tape in isolation: build a graph, take gradients,
//! verify them against central differences, and run a few AdamW steps.
//!
//! Run with: cargo run --release --example autodiff_basics

use usplat::diff::gradcheck::grad_check;
use usplat::diff::optim::{AdamW, AdamWConfig};
use usplat::diff::{Graph, Tensor};

fn main() {
    // d/dw of sum((x w - y)^2) by hand vs by tape
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]));
    let w = g.param(Tensor::new(vec![2, 1], vec![0.5, -0.5]));
    let pred = g.matmul(x, w);
    let err = g.sub(pred, y);
    let sq = g.mul(err, err);
    let loss = g.sum_all(sq);
    println!("loss = {}", g.value(loss).data[0]);
    let grads = g.backward(loss).expect("scalar loss");
    println!("dL/dw = {:?}", grads.get(w).unwrap().data);

    // the same gradients via the finite-difference checker
    let f = |g: &mut Graph, vs: &[usplat::diff::Var]| {
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]));
        let pred = g.matmul(x, vs[0]);
        let err = g.sub(pred, y);
        let sq = g.mul(err, err);
        g.sum_all(sq)
    };
    let report = grad_check(&f, &[Tensor::new(vec![2, 1], vec![0.5, -0.5])], 1e-3);
    println!("finite-difference max relative error: {:.2e}", report.max_rel_err);

    // a few optimizer steps drive the loss toward zero
    let mut wt = Tensor::new(vec![2, 1], vec![0.5, -0.5]);
    let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..AdamWConfig::default() });
    for it in 0..200 {
        let mut g = Graph::new();
        let wv = g.param(wt.clone());
        let loss = f(&mut g, &[wv]);
        let grads = g.backward(loss).expect("scalar loss");
        let gw = grads.get(wv).unwrap().clone();
        opt.step([("w", &mut wt, Some(&gw))].into_iter()).expect("finite grads");
        if it % 50 == 49 {
            let mut g = Graph::new();
            let wv = g.constant(wt.clone());
            let l = f(&mut g, &[wv]);
            println!("step {:3}: loss = {:.6}", it + 1, g.value(l).data[0]);
        }
    }
}
