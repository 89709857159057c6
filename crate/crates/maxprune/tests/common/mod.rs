//! Machinery shared by the gradcheck, oracles, and acceptance targets. Each
//! target compiles its own copy, so everything here stays allocation-light.
#![allow(dead_code)]

use std::path::PathBuf;

pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("MAXPRUNE_DATA") {
        Some(dir) => PathBuf::from(dir),
        None => std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Finite-difference gradient checking against an independent f64
/// re-implementation of every layer.
pub mod fd {
    use maxprune::network::{
        maxout_backward, softmax_xent, LayerSpec, Network, NetworkSpec, Variant,
    };
    use maxprune::tensor::{Rng, Shape, Tensor};

    pub const H: f64 = 1e-3;
    pub const REL_TOL: f64 = 1e-3;
    /// Smallest accepted top-2 gap (maxout, pool) or |preactivation| (relu).
    /// A single +-H weight nudge moves any activation in these nets by well
    /// under half this, so the winning branch cannot flip mid-check.
    pub const MARGIN: f64 = 0.02;
    pub const CONFIGS: usize = 50;

    /// Minimum separation from every kink in the piecewise-linear layers.
    pub struct Margins {
        pub relu: f64,
        pub pool: f64,
        pub maxout: f64,
    }

    impl Margins {
        pub fn tie_free(&self) -> bool {
            self.relu >= MARGIN && self.pool >= MARGIN && self.maxout >= MARGIN
        }
    }

    enum Feat {
        Spatial(usize, usize, usize),
        Flat(usize),
    }

    impl Feat {
        fn width(&self) -> usize {
            match *self {
                Feat::Spatial(c, h, w) => c * h * w,
                Feat::Flat(w) => w,
            }
        }
    }

    pub type ParamSnapshot = Vec<Option<(Vec<f64>, Vec<f64>)>>;

    pub fn snapshot(net: &Network) -> ParamSnapshot {
        (0..net.num_layers())
            .map(|i| {
                net.layer_params(i).map(|(w, b)| {
                    (
                        w.data().iter().map(|&v| v as f64).collect(),
                        b.data().iter().map(|&v| v as f64).collect(),
                    )
                })
            })
            .collect()
    }

    /// Loss of the reference network in f64, plus the distances to the
    /// nearest non-differentiable point encountered along the way.
    pub fn ref_loss(
        net: &Network,
        params: &ParamSnapshot,
        input: &[f64],
        batch: usize,
        labels: &[u8],
    ) -> (f64, Margins) {
        let (ic, ih, iw) = net.input_dims();
        let mut feat = Feat::Spatial(ic, ih, iw);
        let mut act = input.to_vec();
        let mut margins = Margins {
            relu: f64::INFINITY,
            pool: f64::INFINITY,
            maxout: f64::INFINITY,
        };
        assert_eq!(act.len(), batch * feat.width());
        for i in 0..net.num_layers() {
            match *net.layer_spec(i) {
                LayerSpec::Conv2d { filters, kernel } => {
                    let Feat::Spatial(c, h, w) = feat else {
                        panic!("conv on flat input")
                    };
                    let (wts, bias) = params[i].as_ref().unwrap();
                    let (oh, ow) = (h - kernel + 1, w - kernel + 1);
                    let mut y = vec![0.0f64; batch * filters * oh * ow];
                    for b in 0..batch {
                        for f in 0..filters {
                            for r in 0..oh {
                                for s in 0..ow {
                                    let mut acc = bias[f];
                                    for cc in 0..c {
                                        for kr in 0..kernel {
                                            for ks in 0..kernel {
                                                let x =
                                                    act[((b * c + cc) * h + r + kr) * w + s + ks];
                                                let wv = wts
                                                    [((f * c + cc) * kernel + kr) * kernel + ks];
                                                acc += x * wv;
                                            }
                                        }
                                    }
                                    y[((b * filters + f) * oh + r) * ow + s] = acc;
                                }
                            }
                        }
                    }
                    act = y;
                    feat = Feat::Spatial(filters, oh, ow);
                }
                LayerSpec::Maxpool2 => {
                    let Feat::Spatial(c, h, w) = feat else {
                        panic!("pool on flat input")
                    };
                    let (oh, ow) = (h / 2, w / 2);
                    let mut y = vec![0.0f64; batch * c * oh * ow];
                    for bc in 0..batch * c {
                        for r in 0..oh {
                            for s in 0..ow {
                                let base = (bc * h + 2 * r) * w + 2 * s;
                                let mut vals =
                                    [act[base], act[base + 1], act[base + w], act[base + w + 1]];
                                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                margins.pool = margins.pool.min(vals[0] - vals[1]);
                                y[(bc * oh + r) * ow + s] = vals[0];
                            }
                        }
                    }
                    act = y;
                    feat = Feat::Spatial(c, oh, ow);
                }
                LayerSpec::Dense { units } | LayerSpec::Softmax { classes: units } => {
                    let inw = feat.width();
                    let (wts, bias) = params[i].as_ref().unwrap();
                    let mut y = vec![0.0f64; batch * units];
                    for b in 0..batch {
                        for o in 0..units {
                            let mut acc = bias[o];
                            for j in 0..inw {
                                acc += act[b * inw + j] * wts[o * inw + j];
                            }
                            y[b * units + o] = acc;
                        }
                    }
                    act = y;
                    feat = Feat::Flat(units);
                }
                LayerSpec::Relu => {
                    for v in &mut act {
                        margins.relu = margins.relu.min(v.abs());
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                LayerSpec::Maxout { .. } => {
                    let state = net.maxout_state().unwrap();
                    let (units, k) = (state.unit_count, state.k_current);
                    let (positions, next) = match feat {
                        Feat::Spatial(c, h, w) => {
                            assert_eq!(c, units * k);
                            (h * w, Feat::Spatial(units, h, w))
                        }
                        Feat::Flat(width) => {
                            assert_eq!(width, units * k);
                            (1, Feat::Flat(units))
                        }
                    };
                    let mut y = vec![0.0f64; batch * units * positions];
                    for b in 0..batch {
                        for j in 0..units {
                            for p in 0..positions {
                                let mut best = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for s in 0..k {
                                    let v = act[((b * units + j) * k + s) * positions + p];
                                    if v > best {
                                        second = best;
                                        best = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                                margins.maxout = margins.maxout.min(best - second);
                                y[(b * units + j) * positions + p] = best;
                            }
                        }
                    }
                    act = y;
                    feat = next;
                }
            }
        }
        let Feat::Flat(classes) = feat else {
            panic!("network must end flat")
        };
        let mut loss = 0.0f64;
        for (b, &label) in labels.iter().enumerate() {
            let row = &act[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            loss -= row[label as usize] - m - z.ln();
        }
        (loss / batch as f64, margins)
    }

    /// One sampled problem: network parameters, inputs, labels.
    pub struct Instance {
        pub net: Network,
        pub input: Vec<f64>,
        pub batch: Tensor,
        pub labels: Vec<u8>,
    }

    pub fn sample(spec: &NetworkSpec, input_dims: (usize, usize, usize), seed: u64) -> Instance {
        let mut rng = Rng::from_seed(seed);
        let net = Network::init_with_input(spec, input_dims, &mut rng).unwrap();
        let batch_n = 2;
        let (c, h, w) = input_dims;
        let n = batch_n * c * h * w;
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let input: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        let batch = Tensor::from_vec(Shape::new([batch_n, c, h, w]), data).unwrap();
        let classes = match *spec.layers.last().unwrap() {
            LayerSpec::Softmax { classes } => classes,
            _ => unreachable!(),
        };
        let labels: Vec<u8> = (0..batch_n).map(|_| rng.index(classes) as u8).collect();
        Instance {
            net,
            input,
            batch,
            labels,
        }
    }

    /// Check every weight and bias of every parameterized layer against a
    /// central finite difference of the f64 reference loss.
    pub fn check_instance(inst: &mut Instance) {
        let params = snapshot(&inst.net);
        let (logits, cache) = inst.net.forward(&inst.batch, false).unwrap();
        let (_, grad_logits) = softmax_xent(&logits, &inst.labels).unwrap();
        let grads = inst.net.backward(&cache, &grad_logits).unwrap();
        for i in 0..inst.net.num_layers() {
            let Some((w64, b64)) = params[i].as_ref() else {
                continue;
            };
            let (dw, db) = grads.layers[i].as_ref().unwrap();
            for (which, len) in [(0usize, w64.len()), (1, b64.len())] {
                for j in 0..len {
                    let bump = |delta: f64| {
                        let mut p = params.clone();
                        let slot = p[i].as_mut().unwrap();
                        let v = if which == 0 {
                            &mut slot.0[j]
                        } else {
                            &mut slot.1[j]
                        };
                        *v += delta;
                        ref_loss(&inst.net, &p, &inst.input, 2, &inst.labels).0
                    };
                    let fd = (bump(H) - bump(-H)) / (2.0 * H);
                    let g = if which == 0 {
                        dw.data()[j]
                    } else {
                        db.data()[j]
                    } as f64;
                    let scale = fd.abs().max(g.abs()).max(REL_TOL);
                    assert!(
                        (fd - g).abs() <= REL_TOL * scale,
                        "layer {i} {} [{j}]: fd {fd} vs analytic {g}",
                        if which == 0 { "weight" } else { "bias" },
                    );
                }
            }
        }
    }

    /// Draw seeds until `CONFIGS` tie-free instances passed the check.
    pub fn run_layer(spec: NetworkSpec, input_dims: (usize, usize, usize)) {
        spec.validate().unwrap();
        let mut accepted = 0usize;
        let mut seed = 0u64;
        while accepted < CONFIGS {
            seed += 1;
            assert!(seed < 5_000, "could not find {CONFIGS} tie-free draws");
            let mut inst = sample(&spec, input_dims, seed);
            let (_, margins) =
                ref_loss(&inst.net, &snapshot(&inst.net), &inst.input, 2, &inst.labels);
            if !margins.tie_free() {
                continue;
            }
            check_instance(&mut inst);
            accepted += 1;
        }
    }

    pub fn baseline(layers: Vec<LayerSpec>) -> NetworkSpec {
        NetworkSpec {
            layers,
            variant: Variant::Baseline,
            fc_size: 128,
        }
    }

    pub fn mfc_toy() -> NetworkSpec {
        use LayerSpec::*;
        NetworkSpec {
            layers: vec![Dense { units: 8 }, Maxout { k: 4 }, Softmax { classes: 3 }],
            variant: Variant::Mfc,
            fc_size: 128,
        }
    }

    pub fn mc_toy() -> NetworkSpec {
        use LayerSpec::*;
        NetworkSpec {
            layers: vec![
                Conv2d {
                    filters: 4,
                    kernel: 2,
                },
                Maxout { k: 2 },
                Softmax { classes: 3 },
            ],
            variant: Variant::Mc,
            fc_size: 128,
        }
    }

    /// The routed gradient hits exactly one input slot per unit and position.
    pub fn assert_single_route(spec: NetworkSpec, input_dims: (usize, usize, usize)) {
        for seed in 1..=CONFIGS as u64 {
            let mut inst = sample(&spec, input_dims, seed);
            let (_, cache) = inst.net.forward(&inst.batch, false).unwrap();
            let winners = cache.winners();
            assert_eq!(winners.len(), 1);
            let win = winners[0];
            let state = inst.net.maxout_state().unwrap();
            let grad_shape = match win.in_shape.dims() {
                [b, _, h, w] => Shape::new([*b, win.units, *h, *w]),
                [b, _] => Shape::new([*b, win.units]),
                other => panic!("unexpected maxout input shape {other:?}"),
            };
            let ones = Tensor::from_vec(grad_shape.clone(), vec![1.0; grad_shape.len()]).unwrap();
            let gx = maxout_backward(&ones, win, state).unwrap();
            let (units, k, positions) = (win.units, win.k, win.positions);
            for b in 0..win.batch {
                for j in 0..units {
                    for p in 0..positions {
                        let nonzero = (0..k)
                            .filter(|&s| {
                                gx.data()[((b * units + j) * k + s) * positions + p] != 0.0
                            })
                            .count();
                        assert_eq!(nonzero, 1, "sample {b} unit {j} position {p}");
                    }
                }
            }
        }
    }

    /// Every per-layer suite plus the maxout routing property, in one call.
    pub fn run_all() {
        use LayerSpec::*;
        run_layer(
            baseline(vec![Dense { units: 6 }, Relu, Softmax { classes: 4 }]),
            (1, 3, 3),
        );
        run_layer(
            baseline(vec![
                Conv2d {
                    filters: 3,
                    kernel: 2,
                },
                Relu,
                Softmax { classes: 4 },
            ]),
            (2, 4, 4),
        );
        run_layer(
            baseline(vec![
                Conv2d {
                    filters: 2,
                    kernel: 3,
                },
                Maxpool2,
                Dense { units: 4 },
                Softmax { classes: 3 },
            ]),
            (1, 6, 6),
        );
        run_layer(
            baseline(vec![Dense { units: 8 }, Relu, Softmax { classes: 3 }]),
            (1, 3, 3),
        );
        run_layer(baseline(vec![Softmax { classes: 5 }]), (1, 2, 2));
        run_layer(mfc_toy(), (1, 3, 3));
        run_layer(mc_toy(), (1, 3, 3));
        assert_single_route(mfc_toy(), (1, 3, 3));
        assert_single_route(mc_toy(), (1, 3, 3));
    }
}

/// Cross-checks of the metric, threshold, counting, and persistence code
/// against independently written references.
pub mod oracle {
    use std::path::Path;

    use maxprune::dataio::DatasetHandle;
    use maxprune::metrics::{eer, VerificationScores};
    use maxprune::network::{Network, NetworkSpec, Variant};
    use maxprune::persist::{load_checkpoint, save_checkpoint};
    use maxprune::pruning::{
        count_winners, count_winners_threaded, prune_least_active, prune_weights_fraction,
        threshold_for_fraction,
    };
    use maxprune::tensor::Rng;

    /// Candidate-sweep EER written from the definition: rates by direct
    /// counting at every candidate, crossing located by linear scan.
    fn brute_eer(matched: &[f64], nonmatched: &[f64]) -> (f64, f64) {
        let mut all: Vec<f64> = matched.iter().chain(nonmatched).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.dedup();
        let mut cands = vec![all[0] - 1.0];
        for w in all.windows(2) {
            cands.push(w[0]);
            cands.push((w[0] + w[1]) / 2.0);
        }
        cands.push(*all.last().unwrap());
        cands.push(all.last().unwrap() + 1.0);
        let rates: Vec<(f64, f64)> = cands
            .iter()
            .map(|&tau| {
                let far = nonmatched.iter().filter(|&&d| d < tau).count() as f64
                    / nonmatched.len() as f64;
                let frr =
                    matched.iter().filter(|&&d| d >= tau).count() as f64 / matched.len() as f64;
                (far, frr)
            })
            .collect();
        for (i, &(far, frr)) in rates.iter().enumerate() {
            if far == frr {
                return (cands[i], far);
            }
            if far > frr {
                let (far1, frr1) = rates[i - 1];
                let s = (frr1 - far1) / ((far - far1) - (frr - frr1));
                return (
                    cands[i - 1] + s * (cands[i] - cands[i - 1]),
                    far1 + s * (far - far1),
                );
            }
        }
        unreachable!("no crossing found");
    }

    pub fn eer_matches_brute_force(sets: usize) {
        let mut rng = Rng::from_seed(2024);
        for case in 0..sets {
            let nm = 1 + rng.index(40);
            let nn = 1 + rng.index(40);
            // Distances quantized to sixteenths so exact ties occur often.
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.index(33) as f64 / 16.0).collect()
            };
            let matched = draw(nm);
            let nonmatched = draw(nn);
            let scores = VerificationScores::new(matched.clone(), nonmatched.clone()).unwrap();
            let got = eer(&scores).unwrap();
            let (bt, be) = brute_eer(&matched, &nonmatched);
            assert!(
                (got.eer - be).abs() <= 1e-12 && (got.threshold - bt).abs() <= 1e-12,
                "case {case}: ({}, {}) vs brute ({bt}, {be})",
                got.threshold,
                got.eer
            );
        }
    }

    /// All |w| of the parameterized layers, sorted by raw IEEE bits. For
    /// non-negative floats, bit order equals numeric order.
    fn sorted_magnitude_bits(net: &Network) -> Vec<u32> {
        let mut bits: Vec<u32> = (0..net.num_layers())
            .filter_map(|i| net.layer_params(i))
            .flat_map(|(w, _)| w.data().iter().map(|v| v.abs().to_bits()))
            .collect();
        bits.sort_unstable();
        bits
    }

    pub fn threshold_matches_full_sort() {
        let nets: Vec<Network> = {
            let mut out = Vec::new();
            for (i, spec) in [
                NetworkSpec::reference(Variant::Mfc, 128).unwrap(),
                NetworkSpec::reference(Variant::Mc, 128).unwrap(),
                NetworkSpec::reference(Variant::Baseline, 128).unwrap(),
            ]
            .iter()
            .enumerate()
            {
                let mut rng = Rng::from_seed(90 + i as u64);
                out.push(Network::init(spec, &mut rng).unwrap());
            }
            out
        };
        for net in &nets {
            let bits = sorted_magnitude_bits(net);
            let n = bits.len();
            for p in [0.0, 1e-6, 0.1, 0.25, 1.0 / 3.0, 0.5, 0.75, 0.9, 0.99] {
                let tau = threshold_for_fraction(net, p).unwrap();
                let m = (p * n as f64).floor() as usize;
                let expected = if m == 0 {
                    f32::from_bits(bits[0]) * 0.5
                } else {
                    f32::from_bits(bits[m - 1])
                };
                assert_eq!(
                    tau.to_bits(),
                    expected.to_bits(),
                    "p = {p}: {tau} vs full-sort {expected}"
                );
                let (_, account, _) = prune_weights_fraction(net, p).unwrap();
                assert_eq!(account.masked_total, m, "p = {p}: masked count");
            }
        }
    }

    pub fn sharded_counts_match_single(data: &DatasetHandle) {
        for (variant, seed) in [(Variant::Mfc, 5u64), (Variant::Mc, 6u64)] {
            let spec = NetworkSpec::reference(variant, 128).unwrap();
            let mut rng = Rng::from_seed(seed);
            let net = Network::init(&spec, &mut rng).unwrap();
            let single = count_winners(&mut net.clone(), data).unwrap();
            for threads in [2usize, 3, 7] {
                let sharded = count_winners_threaded(&mut net.clone(), data, threads).unwrap();
                assert_eq!(sharded.units, single.units, "{threads} threads");
                assert_eq!(sharded.total_positions, single.total_positions);
            }
        }
    }

    fn assert_networks_bit_identical(a: &Network, b: &Network) {
        assert_eq!(a.spec(), b.spec());
        assert_eq!(a.input_dims(), b.input_dims());
        assert_eq!(a.maxout_state(), b.maxout_state());
        for i in 0..a.num_layers() {
            let (pa, pb) = (a.layer_params(i), b.layer_params(i));
            match (pa, pb) {
                (None, None) => {}
                (Some((wa, ba)), Some((wb, bb))) => {
                    let bits = |t: &maxprune::tensor::Tensor| -> Vec<u32> {
                        t.data().iter().map(|v| v.to_bits()).collect()
                    };
                    assert_eq!(bits(wa), bits(wb), "layer {i} weights");
                    assert_eq!(bits(ba), bits(bb), "layer {i} biases");
                    assert_eq!(a.layer_mask(i), b.layer_mask(i), "layer {i} mask");
                }
                _ => panic!("layer {i} parameterization differs"),
            }
        }
    }

    /// Save -> load -> save must yield the same bytes, dense and sparse.
    pub fn roundtrips_are_bit_identical(dir: &Path, data: &DatasetHandle) {
        let spec = NetworkSpec::reference(Variant::Mfc, 128).unwrap();
        let mut rng = Rng::from_seed(77);
        let fresh = Network::init(&spec, &mut rng).unwrap();
        // >= 90% masked weights switch every big tensor to sparse rows.
        let (sparse, _, _) = prune_weights_fraction(&fresh, 0.9).unwrap();
        let counts = count_winners(&mut fresh.clone(), data).unwrap();
        let pruned = prune_least_active(&fresh, &counts).unwrap();
        for (name, net) in [("dense", &fresh), ("sparse", &sparse), ("pruned", &pruned)] {
            let first = dir.join(format!("{name}-1.mxpn"));
            let second = dir.join(format!("{name}-2.mxpn"));
            save_checkpoint(net, &first).unwrap();
            let loaded = load_checkpoint(&first).unwrap();
            assert_networks_bit_identical(net, &loaded);
            save_checkpoint(&loaded, &second).unwrap();
            assert_eq!(
                std::fs::read(&first).unwrap(),
                std::fs::read(&second).unwrap(),
                "{name}: second save differs"
            );
        }
    }
}
