//! Measures local-training throughput of LeNet-5 on MNIST.
//!
//! `ESMFL_DATA_DIR=data/mnist cargo run --release -p esmfl-core --example lenet_throughput`

use std::path::PathBuf;
use std::time::Instant;

use esmfl_core::model::data::{load_mnist, Split};
use esmfl_core::model::{Model, ModelArch, Momentum};

fn main() {
    let dir = PathBuf::from(std::env::var("ESMFL_DATA_DIR").unwrap_or_else(|_| "data/mnist".into()));
    let train = load_mnist(&dir, Split::Train).expect("MNIST training split");
    let test = load_mnist(&dir, Split::Test).expect("MNIST test split");
    let model = Model::new(ModelArch::lenet5()).unwrap();
    let mut params = model.init_params(1);
    let mut opt = Momentum::new(0.9);
    let examples = 600;
    let start = Instant::now();
    for step in 0..examples / 10 {
        let idx: Vec<usize> = (step * 10..step * 10 + 10).collect();
        let batch = train.batch(&idx).unwrap();
        let (_, grad) = model.loss_and_gradient(&params, &batch).unwrap();
        opt.step(&mut params, &grad, 0.01).unwrap();
    }
    let train_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let acc = model.evaluate_subset(&params, &test, 2000).unwrap();
    println!(
        "trained {examples} examples in {train_s:.2}s ({:.0} ex/s); eval 2000 in {:.2}s, acc {acc:.4}",
        examples as f64 / train_s,
        start.elapsed().as_secs_f64()
    );
}
