//! Regenerates the golden eval fixture under tests/fixtures/golden/: a small
//! trained checkpoint, a 100-sample test-set slice in IDX format, and the
//! frozen accuracy the CLI must reproduce. Run from anywhere:
//!
//! ```text
//! cargo run -p maxprune-cli --example gen_golden
//! ```

use std::fs;
use std::path::Path;

use maxprune::dataio::load_idx;
use maxprune::network::{LayerSpec, Network, NetworkSpec, Variant};
use maxprune::persist::save_checkpoint;
use maxprune::tensor::Rng;
use maxprune::trainer::{evaluate, train, TrainConfig};

fn main() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let data_dir = manifest.join("../../data/mnist");
    let out_dir = manifest.join("tests/fixtures/golden");
    fs::create_dir_all(&out_dir).unwrap();

    // 100-sample slice of the test set, headers patched to the new count.
    let raw_images = fs::read(data_dir.join("t10k-images-idx3-ubyte")).unwrap();
    let raw_labels = fs::read(data_dir.join("t10k-labels-idx1-ubyte")).unwrap();
    let mut images = raw_images[..16 + 100 * 28 * 28].to_vec();
    images[4..8].copy_from_slice(&100u32.to_be_bytes());
    let mut labels = raw_labels[..8 + 100].to_vec();
    labels[4..8].copy_from_slice(&100u32.to_be_bytes());
    fs::write(out_dir.join("t10k-images-idx3-ubyte"), &images).unwrap();
    fs::write(out_dir.join("t10k-labels-idx1-ubyte"), &labels).unwrap();

    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::Dense { units: 32 },
            LayerSpec::Maxout { k: 4 },
            LayerSpec::Softmax { classes: 10 },
        ],
        variant: Variant::Mfc,
        fc_size: 128,
    };
    let mut rng = Rng::from_seed(41);
    let mut net = Network::init(&spec, &mut rng).unwrap();
    let train_data = load_idx(
        data_dir.join("train-images-idx3-ubyte"),
        data_dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap()
    .head(10_000)
    .unwrap();
    let cfg = TrainConfig {
        iterations: 600,
        batch_size: 32,
        seed: 41,
        ..TrainConfig::default()
    };
    train(&mut net, &train_data, &cfg).unwrap();

    let fixture = load_idx(
        out_dir.join("t10k-images-idx3-ubyte"),
        out_dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    let accuracy = evaluate(&net, &fixture).unwrap();
    save_checkpoint(&net, out_dir.join("tiny.mxpn")).unwrap();
    fs::write(
        out_dir.join("expected.json"),
        format!("{{\"accuracy\": {accuracy}, \"n\": 100}}\n"),
    )
    .unwrap();
    println!("fixture accuracy = {accuracy}");
}
