//! Train the 784-64-32-10 network centrally on MNIST for a few epochs.
//! Reads the IDX files from `DMLFLOW_MNIST_DIR` or `data/mnist`.

use std::path::PathBuf;

use dmlflow::mlkit::{count_forward_flops, count_params, evaluate, load_idx, mlp_init, train_epochs, Arch, Hyperparams};

fn main() {
    let dir = std::env::var_os("DMLFLOW_MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| "data/mnist".into());
    let arch = Arch::mnist();
    println!("{arch}: {} parameters, {} forward FLOPs per image", count_params(&arch), count_forward_flops(&arch));
    let (train, test) = match (
        load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")),
        load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")),
    ) {
        (Ok(a), Ok(b)) => (a.take(10_000), b),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("MNIST not available in {}: {e}", dir.display());
            return;
        }
    };
    let mut params = mlp_init(&arch, 1);
    let hp = Hyperparams::default();
    for epoch in 0..3 {
        let out = train_epochs(&params, &train, &hp, 1, epoch).unwrap();
        params = out.params;
        println!("epoch {epoch}: loss {:.4}, test accuracy {:.4}", out.epoch_loss[0], evaluate(&params, &test).unwrap());
    }
}
