//! Prints, per parameter layer of a checkpoint, each row's largest weight
//! magnitude next to the global masking cutoff for a given fraction: the
//! rows whose maximum falls below the cutoff are the ones a mask-only prune
//! would kill. Useful for judging how close a net sits to losing whole
//! conv filters.
//!
//! ```text
//! cargo run -p maxprune --example inspect_rows -- CHECKPOINT [FRACTION]
//! ```

use maxprune::persist::load_checkpoint;
use maxprune::pruning::threshold_for_fraction;

fn main() {
    let path = std::env::args()
        .nth(1)
        .expect("usage: inspect_rows CHECKPOINT [FRACTION]");
    let fraction: f64 = std::env::args()
        .nth(2)
        .map(|s| s.parse().unwrap())
        .unwrap_or(0.9);
    let net = load_checkpoint(&path).unwrap();
    let tau = threshold_for_fraction(&net, fraction).unwrap();
    println!("fraction {fraction} tau {tau:e}");
    for li in 0..net.num_layers() {
        let Some((w, _)) = net.layer_params(li) else { continue };
        let dims = w.shape().dims().to_vec();
        let rows = dims[0];
        let row_len: usize = dims[1..].iter().product();
        let data = w.data();
        let mut maxes: Vec<(f32, usize)> = (0..rows)
            .map(|r| {
                let m = data[r * row_len..(r + 1) * row_len]
                    .iter()
                    .fold(0.0f32, |a, &v| a.max(v.abs()));
                (m, r)
            })
            .collect();
        maxes.sort_by(|a, b| a.0.total_cmp(&b.0));
        let dead = maxes.iter().filter(|(m, _)| *m <= tau).count();
        let head: Vec<String> = maxes
            .iter()
            .take(6)
            .map(|(m, r)| format!("row{r}:{m:.4}"))
            .collect();
        println!(
            "layer {li}: rows {rows} row_len {row_len} dead@tau {dead} weakest [{}]",
            head.join(" ")
        );
    }
}
