use maxprune::dataio::load_idx;
use maxprune::network::{Network, NetworkSpec};
use maxprune::tensor::Rng;
use maxprune::trainer::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let dir = std::path::PathBuf::from("data/mnist");
    let data = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    for (name, spec) in [
        ("mfc-512", NetworkSpec::mfc(512).unwrap()),
        ("mc-512", NetworkSpec::mc(512).unwrap()),
    ] {
        let mut rng = Rng::from_seed(1);
        let mut net = Network::init(&spec, &mut rng).unwrap();
        let cfg = TrainConfig {
            iterations: 100,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let h = train(&mut net, &data, &cfg).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "{name}: {:.1} ms/iter -> {:.1} min per 10k iters (loss {:.3})",
            dt * 10.0,
            dt * 100.0 / 60.0,
            h.mean_recent_loss(20)
        );
    }
}
