//! Winner counting, least-active neuron removal, the iterative prune-retrain
//! driver, global magnitude weight pruning, parameter accounting, and
//! dead-neuron analysis.
//!
//! Structural transformations are copy-on-write: the input network is never
//! mutated, a smaller network is returned. Counting mutates only the maxout
//! win counters.

use std::time::Instant;

use crate::dataio::DatasetHandle;
use crate::error::{Error, Result};
use crate::network::{LayerState, MaxoutState, Network, NetworkSpec};
use crate::persist::ExperimentRecord;
use crate::tensor::{Shape, Tensor};
use crate::trainer::{evaluate_threaded, train, TrainConfig};

/// Snapshot of one full counting pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WinnerCounts {
    /// Per unit, in slot order: (original input index, wins).
    pub units: Vec<Vec<(u32, u64)>>,
    /// Positions counted per unit: samples for a flat maxout, samples times
    /// spatial positions for a channel maxout.
    pub total_positions: u64,
}

impl WinnerCounts {
    fn snapshot(state: &MaxoutState) -> Result<WinnerCounts> {
        let units: Vec<Vec<(u32, u64)>> = state
            .survivor_indices
            .iter()
            .zip(&state.win_counts)
            .map(|(surv, counts)| surv.iter().copied().zip(counts.iter().copied()).collect())
            .collect();
        let sums = state.counted_positions();
        let total = sums.first().copied().unwrap_or(0);
        if sums.iter().any(|&s| s != total) {
            return Err(Error::Structure(
                "win counts are unbalanced across units (partial counting pass?)".into(),
            ));
        }
        Ok(WinnerCounts {
            units,
            total_positions: total,
        })
    }
}

const COUNT_BATCH: usize = 250;

fn count_range(net: &mut Network, data: &DatasetHandle, range: std::ops::Range<usize>) -> Result<()> {
    let mut at = range.start;
    while at < range.end {
        let end = (at + COUNT_BATCH).min(range.end);
        let indices: Vec<u32> = (at as u32..end as u32).collect();
        let (images, _) = data.gather(&indices);
        net.count_batch(&images)?;
        at = end;
    }
    Ok(())
}

/// Reset the win counters, forward the whole dataset with counting enabled,
/// and return the tallies. Parameters are untouched.
pub fn count_winners(net: &mut Network, data: &DatasetHandle) -> Result<WinnerCounts> {
    count_winners_threaded(net, data, 1)
}

/// [`count_winners`] over `threads` contiguous shards with private counters.
/// Shard tallies merge by addition (exact, order-independent), so any thread
/// count produces identical counts.
pub fn count_winners_threaded(
    net: &mut Network,
    data: &DatasetHandle,
    threads: usize,
) -> Result<WinnerCounts> {
    match net.maxout_state() {
        None => {
            return Err(Error::Structure(
                "network has no maxout layer to count winners for".into(),
            ))
        }
        Some(st) if st.k_current < 2 => {
            return Err(Error::Structure(
                "maxout is down to a single survivor per unit (k_current = 1)".into(),
            ))
        }
        Some(_) => {}
    }
    if data.is_empty() {
        return Err(Error::Data("counting dataset is empty".into()));
    }
    net.maxout_state_mut().unwrap().reset_counts();
    let threads = threads.max(1).min(data.len());
    if threads == 1 {
        count_range(net, data, 0..data.len())?;
    } else {
        let n = data.len();
        let per = n.div_ceil(threads);
        let shard_states = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let mut shard_net = net.clone();
                    let range = t * per..((t + 1) * per).min(n);
                    scope.spawn(move || -> Result<MaxoutState> {
                        count_range(&mut shard_net, data, range)?;
                        Ok(shard_net.maxout_state().unwrap().clone())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("counting shard panicked"))
                .collect::<Result<Vec<MaxoutState>>>()
        })?;
        let state = net.maxout_state_mut().unwrap();
        for shard in shard_states {
            for (unit, shard_unit) in state.win_counts.iter_mut().zip(&shard.win_counts) {
                for (c, &s) in unit.iter_mut().zip(shard_unit) {
                    *c += s;
                }
            }
        }
    }
    WinnerCounts::snapshot(net.maxout_state().unwrap())
}

/// Remove each unit's least-frequent winner (ties to the lowest original
/// index): its incoming dense row or conv filter bank and bias entry are
/// deleted and `k_current` drops by one. Downstream shapes are unchanged.
pub fn prune_least_active(net: &Network, counts: &WinnerCounts) -> Result<Network> {
    let Some(state) = net.maxout_state() else {
        return Err(Error::Structure("network has no maxout layer".into()));
    };
    if state.k_current < 2 {
        return Err(Error::Structure(
            "cannot prune further: every unit has a single survivor".into(),
        ));
    }
    if counts.units.len() != state.unit_count {
        return Err(Error::Structure(format!(
            "counts cover {} units, network has {}",
            counts.units.len(),
            state.unit_count
        )));
    }
    for (j, (unit, surv)) in counts.units.iter().zip(&state.survivor_indices).enumerate() {
        let idx_match = unit.len() == surv.len() && unit.iter().map(|&(i, _)| i).eq(surv.iter().copied());
        if !idx_match {
            return Err(Error::Structure(format!(
                "counts for unit {j} do not match the current survivors (stale snapshot?)"
            )));
        }
    }

    let k = state.k_current;
    // Slot with the minimal count per unit; the scan order makes ties fall to
    // the lowest original index because survivors are stored ascending.
    let loser_slots: Vec<usize> = counts
        .units
        .iter()
        .map(|unit| {
            let mut best = 0usize;
            for (s, &(_, c)) in unit.iter().enumerate().skip(1) {
                if c < unit[best].1 {
                    best = s;
                }
            }
            best
        })
        .collect();
    let dead_rows: Vec<usize> = loser_slots
        .iter()
        .enumerate()
        .map(|(j, &s)| j * k + s)
        .collect();

    let mut out = net.clone();
    let maxout_at = out
        .layers
        .iter()
        .position(|l| matches!(l.state, LayerState::Maxout(_)))
        .unwrap();
    if maxout_at == 0 {
        return Err(Error::Structure("maxout has no producing layer".into()));
    }
    {
        let producer = &mut out.layers[maxout_at - 1];
        let params = match &mut producer.state {
            LayerState::Dense(p) | LayerState::Conv(p) => p,
            _ => {
                return Err(Error::Structure(
                    "maxout must directly follow a dense or conv layer to prune".into(),
                ))
            }
        };
        let dims = params.weight.shape().dims().to_vec();
        let rows = dims[0];
        let row_len: usize = dims[1..].iter().product();
        debug_assert_eq!(rows, state.current_width());
        let keep = |r: &usize| !dead_rows.contains(r);
        let mut new_weight = Vec::with_capacity((rows - dead_rows.len()) * row_len);
        let mut new_bias = Vec::with_capacity(rows - dead_rows.len());
        let mut new_mask = params.mask.as_ref().map(|_| Vec::new());
        for r in (0..rows).filter(keep) {
            new_weight.extend_from_slice(&params.weight.data()[r * row_len..(r + 1) * row_len]);
            new_bias.push(params.bias.data()[r]);
            if let (Some(nm), Some(m)) = (&mut new_mask, &params.mask) {
                nm.extend_from_slice(&m[r * row_len..(r + 1) * row_len]);
            }
        }
        let mut new_dims = dims;
        new_dims[0] = rows - dead_rows.len();
        params.weight = Tensor::from_vec(Shape::new(new_dims), new_weight)?;
        params.bias = Tensor::from_vec(Shape::new([rows - dead_rows.len()]), new_bias)?;
        params.mask = new_mask;
    }
    {
        let LayerState::Maxout(st) = &mut out.layers[maxout_at].state else {
            unreachable!()
        };
        for (j, &slot) in loser_slots.iter().enumerate() {
            st.survivor_indices[j].remove(slot);
            st.win_counts[j].remove(slot);
        }
        st.k_current -= 1;
    }
    out.check_wiring()?;
    Ok(out)
}

/// Repeat {count winners, prune least active, retrain, evaluate} for `steps`
/// rounds, emitting one record per round.
pub fn iterative_neuron_prune(
    net: &Network,
    train_data: &DatasetHandle,
    eval_data: &DatasetHandle,
    retrain_cfg: &TrainConfig,
    steps: usize,
    threads: usize,
) -> Result<(Network, Vec<ExperimentRecord>)> {
    let Some(state) = net.maxout_state() else {
        return Err(Error::Structure("network has no maxout layer".into()));
    };
    if steps + 1 > state.k_current {
        return Err(Error::Argument(format!(
            "{steps} prune steps requested but k_current {} allows at most {}",
            state.k_current,
            state.k_current - 1
        )));
    }
    let mut current = net.clone();
    let mut records = Vec::with_capacity(steps);
    let mut iterations_done = 0u64;
    for step in 1..=steps {
        let t0 = Instant::now();
        let counts = count_winners_threaded(&mut current, train_data, threads)?;
        current = prune_least_active(&current, &counts)?;
        train(&mut current, train_data, retrain_cfg)?;
        iterations_done += retrain_cfg.iterations;
        let accuracy = evaluate_threaded(&current, eval_data, threads)?;
        records.push(stage_record(
            format!("neuron-prune-{step}"),
            &current,
            accuracy,
            iterations_done,
            t0.elapsed().as_secs_f64(),
        )?);
    }
    Ok((current, records))
}

/// Weight accounting for one parameterized layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerAccount {
    pub name: String,
    /// Multiplicative weights the maxout-free architecture would hold here.
    pub original: usize,
    /// Multiplicative weights structurally present.
    pub remaining: usize,
    /// Of the remaining, how many are masked to zero.
    pub masked: usize,
}

/// Multiplicative-weight bookkeeping for a whole network. Biases are never
/// counted: they are exempt from pruning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAccount {
    pub layers: Vec<LayerAccount>,
    pub original_total: usize,
    pub remaining_total: usize,
    pub masked_total: usize,
}

impl ParamAccount {
    /// Structural pruned-weight percentage: 100 * (1 - remaining/original).
    pub fn pw_percent(&self) -> f64 {
        100.0 * (1.0 - self.remaining_total as f64 / self.original_total as f64)
    }

    /// Pruned plus masked-zero percentage:
    /// 100 * (1 - (remaining - masked)/original).
    pub fn combined_percent(&self) -> f64 {
        100.0 * (1.0 - (self.remaining_total - self.masked_total) as f64 / self.original_total as f64)
    }
}

/// Per-parameter-layer weight counts of `spec` with every maxout replaced by
/// identity: the width a maxout would have reduced flows through unchanged.
/// This is the "no maxout" architecture the percentages are measured against.
fn no_maxout_weight_counts(
    spec: &NetworkSpec,
    input: (usize, usize, usize),
) -> Result<Vec<(usize, String, usize)>> {
    use crate::network::LayerSpec;
    let (mut c, mut h, mut w) = input;
    let mut flat: Option<usize> = None;
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv2d { filters, kernel } => {
                let count = filters * c * kernel * kernel;
                out.push((i, format!("{}#{i}", layer.name()), count));
                c = filters;
                h -= kernel - 1;
                w -= kernel - 1;
            }
            LayerSpec::Maxpool2 => {
                h /= 2;
                w /= 2;
            }
            LayerSpec::Dense { units } | LayerSpec::Softmax { classes: units } => {
                let width = flat.unwrap_or(c * h * w);
                out.push((i, format!("{}#{i}", layer.name()), units * width));
                flat = Some(units);
            }
            LayerSpec::Relu | LayerSpec::Maxout { .. } => {}
        }
    }
    Ok(out)
}

/// Count multiplicative weights per layer against the maxout-free original
/// architecture. Structurally removed weights are excluded from `remaining`;
/// masked zeros stay in `remaining` and show up in `masked` (they reduce only
/// the combined figure).
pub fn param_account(original: &NetworkSpec, current: &Network) -> Result<ParamAccount> {
    if current.spec() != original {
        return Err(Error::Structure(
            "network was not derived from the given spec".into(),
        ));
    }
    let originals = no_maxout_weight_counts(original, current.input_dims())?;
    let mut layers = Vec::with_capacity(originals.len());
    let mut ait = originals.into_iter();
    for (i, layer) in current.layers.iter().enumerate() {
        let Some(p) = layer.state.params() else {
            continue;
        };
        let (oi, name, original_count) = ait
            .next()
            .ok_or_else(|| {
                Error::Structure("more parameter layers than the architecture declares".into())
            })?;
        if oi != i {
            return Err(Error::Structure(format!(
                "parameter layer order mismatch: spec layer {oi} vs network layer {i}"
            )));
        }
        let remaining = p.weight.len();
        if remaining > original_count {
            return Err(Error::Structure(format!(
                "layer {i} holds {remaining} weights, more than the original {original_count}"
            )));
        }
        let masked = p
            .mask
            .as_ref()
            .map(|m| m.iter().filter(|&&x| x).count())
            .unwrap_or(0);
        layers.push(LayerAccount {
            name,
            original: original_count,
            remaining,
            masked,
        });
    }
    if ait.next().is_some() {
        return Err(Error::Structure(
            "architecture declares more parameter layers than the network holds".into(),
        ));
    }
    let account = ParamAccount {
        original_total: layers.iter().map(|l| l.original).sum(),
        remaining_total: layers.iter().map(|l| l.remaining).sum(),
        masked_total: layers.iter().map(|l| l.masked).sum(),
        layers,
    };
    Ok(account)
}

/// Global threshold: the `floor(p*N)`-th smallest weight magnitude over all
/// multiplicative weights. Pruning `|w| <= tau` with flat-index tie-breaking
/// removes exactly `floor(p*N)` weights.
pub fn threshold_for_fraction(net: &Network, p: f64) -> Result<f32> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!(
            "pruning fraction must lie in [0, 1), got {p}"
        )));
    }
    let mut mags: Vec<f32> = Vec::new();
    for layer in &net.layers {
        if let Some(params) = layer.state.params() {
            mags.extend(params.weight.data().iter().map(|w| w.abs()));
        }
    }
    if mags.is_empty() {
        return Err(Error::Structure("network has no multiplicative weights".into()));
    }
    let m = (p * mags.len() as f64).floor() as usize;
    if m == 0 {
        let min = mags.iter().copied().fold(f32::INFINITY, f32::min);
        return Ok(min * 0.5);
    }
    mags.sort_unstable_by(f32::total_cmp);
    Ok(mags[m - 1])
}

fn apply_mask_updates(net: &mut Network, mark: impl Fn(usize, usize, f32) -> bool) {
    for (li, layer) in net.layers.iter_mut().enumerate() {
        if let Some(params) = layer.state.params_mut() {
            let mut mask = params
                .mask
                .take()
                .unwrap_or_else(|| vec![false; params.weight.len()]);
            for (i, (w, m)) in params.weight.data_mut().iter_mut().zip(mask.iter_mut()).enumerate() {
                if *m || mark(li, i, *w) {
                    *m = true;
                    *w = 0.0;
                }
            }
            // A mask exists iff something is masked; a no-op prune leaves
            // the network exactly as it was.
            params.mask = mask.iter().any(|&m| m).then_some(mask);
        }
    }
}

/// Mask every multiplicative weight with `|w| <= tau` (biases exempt),
/// zeroing the masked entries. Existing masks are preserved. The input
/// network is unchanged; the masked copy and its accounting are returned.
pub fn prune_weights(net: &Network, tau: f32) -> Result<(Network, ParamAccount)> {
    if !(tau >= 0.0) {
        return Err(Error::Argument(format!("threshold must be >= 0, got {tau}")));
    }
    let mut out = net.clone();
    apply_mask_updates(&mut out, |_, _, w| w.abs() <= tau);
    let account = param_account(&out.spec().clone(), &out)?;
    Ok((out, account))
}

/// Mask exactly `floor(p*N)` weights: the smallest magnitudes globally, ties
/// resolved by (layer, flat index). Returns the masked copy, its accounting,
/// and the threshold actually used.
pub fn prune_weights_fraction(net: &Network, p: f64) -> Result<(Network, ParamAccount, f32)> {
    let tau = threshold_for_fraction(net, p)?;
    let mut entries: Vec<(f32, u32, u32)> = Vec::new();
    for (li, layer) in net.layers.iter().enumerate() {
        if let Some(params) = layer.state.params() {
            for (i, w) in params.weight.data().iter().enumerate() {
                entries.push((w.abs(), li as u32, i as u32));
            }
        }
    }
    let m = (p * entries.len() as f64).floor() as usize;
    entries.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut marks: Vec<Vec<bool>> = net
        .layers
        .iter()
        .map(|l| vec![false; l.state.params().map_or(0, |p| p.weight.len())])
        .collect();
    for &(_, li, i) in &entries[..m] {
        marks[li as usize][i as usize] = true;
    }
    let mut out = net.clone();
    apply_mask_updates(&mut out, |li, i, _| marks[li][i]);
    let account = param_account(&out.spec().clone(), &out)?;
    Ok((out, account, tau))
}

/// Fraction of neurons (dense/classifier rows, conv filters) whose incoming
/// weights are all exactly zero.
pub fn dead_neuron_fraction(net: &Network) -> f64 {
    let mut dead = 0usize;
    let mut total = 0usize;
    for layer in &net.layers {
        if let Some(params) = layer.state.params() {
            let dims = params.weight.shape().dims();
            let rows = dims[0];
            let row_len: usize = dims[1..].iter().product();
            for r in 0..rows {
                total += 1;
                if params.weight.data()[r * row_len..(r + 1) * row_len]
                    .iter()
                    .all(|&w| w == 0.0)
                {
                    dead += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        dead as f64 / total as f64
    }
}

/// Build a report row for the network's current state.
pub fn stage_record(
    stage: impl Into<String>,
    net: &Network,
    accuracy: f64,
    iteration: u64,
    seconds: f64,
) -> Result<ExperimentRecord> {
    let account = param_account(&net.spec().clone(), net)?;
    Ok(ExperimentRecord {
        stage: stage.into(),
        k: net.maxout_state().map_or(1, |s| s.k_current) as u32,
        iteration,
        accuracy,
        orig_weights: account.original_total as u64,
        remaining_weights: account.remaining_total as u64,
        masked_weights: account.masked_total as u64,
        pw_percent: account.pw_percent(),
        combined_percent: account.combined_percent(),
        dead_fraction: dead_neuron_fraction(net),
        seconds,
    })
}

/// For each requested fraction: mask that share of the weights, retrain with
/// the mask frozen, evaluate, and record. Every point starts from a fresh
/// copy of the input network; fraction 0 records the plain evaluation.
pub fn sweep_weight_pruning(
    net: &Network,
    fractions: &[f64],
    train_data: &DatasetHandle,
    eval_data: &DatasetHandle,
    retrain_cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<ExperimentRecord>> {
    if fractions.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Argument(
            "fractions must be strictly ascending".into(),
        ));
    }
    if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(Error::Argument("fractions must lie in [0, 1)".into()));
    }
    let mut records = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let t0 = Instant::now();
        let stage = format!("weight-prune-{f:.4}");
        let record = if f == 0.0 {
            let accuracy = evaluate_threaded(net, eval_data, threads)?;
            stage_record(stage, net, accuracy, 0, t0.elapsed().as_secs_f64())?
        } else {
            let (mut work, _, _) = prune_weights_fraction(net, f)?;
            train(&mut work, train_data, retrain_cfg)?;
            let accuracy = evaluate_threaded(&work, eval_data, threads)?;
            stage_record(
                stage,
                &work,
                accuracy,
                retrain_cfg.iterations,
                t0.elapsed().as_secs_f64(),
            )?
        };
        records.push(record);
    }
    Ok(records)
}
