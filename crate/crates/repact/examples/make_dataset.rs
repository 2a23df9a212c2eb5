//! Generate a synthetic 10-class dataset in MNIST IDX layout.
//!
//! Usage: cargo run --release -p repact --example make_dataset -- <dir> [n_train] [n_test] [seed]

use repact::data::synth;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dir = args.get(1).map(String::as_str).unwrap_or("data/synth");
    let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let n_test: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2_000);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    synth::write_mnist_format(std::path::Path::new(dir), n_train, n_test, seed)
        .expect("failed to write dataset");
    println!("wrote {n_train} train / {n_test} test images to {dir}");
}
