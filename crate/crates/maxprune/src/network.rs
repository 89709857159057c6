//! Layer graph: architecture specs, parameter storage, hand-written forward
//! and backward passes, and the maxout winner bookkeeping.
//!
//! A [`Network`] is a flat list of layers. Convolutions and the two affine
//! layers (dense, softmax classifier) own weights; maxout owns a
//! [`MaxoutState`] tracking which of its original inputs survive and how
//! often each wins. Wherever a maximum is taken, ties break toward the
//! lowest original index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{col2im_add, conv_out_size, im2col, sgemm, Rng, Shape, Tensor};

/// Reference-architecture family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// ReLU everywhere, no maxout.
    Baseline,
    /// Maxout immediately after the fully connected layer.
    Mfc,
    /// Maxout immediately after the last convolutional layer (cross-channel).
    Mc,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Baseline => "baseline",
            Variant::Mfc => "mfc",
            Variant::Mc => "mc",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "mfc" => Ok(Variant::Mfc),
            "mc" => Ok(Variant::Mc),
            other => Err(Error::Argument(format!(
                "unknown variant {other:?} (expected baseline, mfc, or mc)"
            ))),
        }
    }
}

/// One layer of the architecture description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize },
    Maxpool2,
    Dense { units: usize },
    Relu,
    Maxout { k: usize },
    /// Affine classifier head; the softmax itself is fused into
    /// [`softmax_xent`], so the forward pass emits logits.
    Softmax { classes: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Maxpool2 => "maxpool2",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxout { .. } => "maxout",
            LayerSpec::Softmax { .. } => "softmax",
        }
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub variant: Variant,
    pub fc_size: usize,
}

pub const FC_SIZES: [usize; 3] = [128, 256, 512];

impl NetworkSpec {
    /// The reference LeNet-style architecture for a variant.
    ///
    /// conv 20@5x5, pool, conv 50@5x5 (64 for MC so channels group by k=4),
    /// pool, dense `fc_size`, classifier over 10 digits. The maxout (k=4)
    /// replaces the activation at its variant's position.
    pub fn reference(variant: Variant, fc_size: usize) -> Result<NetworkSpec> {
        use LayerSpec::*;
        let layers = match variant {
            Variant::Baseline => vec![
                Conv2d { filters: 20, kernel: 5 },
                Relu,
                Maxpool2,
                Conv2d { filters: 50, kernel: 5 },
                Relu,
                Maxpool2,
                Dense { units: fc_size },
                Relu,
                Softmax { classes: 10 },
            ],
            Variant::Mfc => vec![
                Conv2d { filters: 20, kernel: 5 },
                Relu,
                Maxpool2,
                Conv2d { filters: 50, kernel: 5 },
                Relu,
                Maxpool2,
                Dense { units: fc_size },
                Maxout { k: 4 },
                Softmax { classes: 10 },
            ],
            Variant::Mc => vec![
                Conv2d { filters: 20, kernel: 5 },
                Relu,
                Maxpool2,
                Conv2d { filters: 64, kernel: 5 },
                Maxout { k: 4 },
                Maxpool2,
                Dense { units: fc_size },
                Relu,
                Softmax { classes: 10 },
            ],
        };
        let spec = NetworkSpec {
            layers,
            variant,
            fc_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn baseline(fc_size: usize) -> Result<NetworkSpec> {
        Self::reference(Variant::Baseline, fc_size)
    }

    pub fn mfc(fc_size: usize) -> Result<NetworkSpec> {
        Self::reference(Variant::Mfc, fc_size)
    }

    pub fn mc(fc_size: usize) -> Result<NetworkSpec> {
        Self::reference(Variant::Mc, fc_size)
    }

    /// Structural checks: legal fc width, classifier last, maxout placed
    /// where the variant says it belongs.
    pub fn validate(&self) -> Result<()> {
        if !FC_SIZES.contains(&self.fc_size) {
            return Err(Error::Structure(format!(
                "fc_size must be one of {FC_SIZES:?}, got {}",
                self.fc_size
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Structure("network has no layers".into()));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax { .. })) {
            return Err(Error::Structure(
                "last layer must be the softmax classifier".into(),
            ));
        }
        for l in &self.layers {
            let bad = match *l {
                LayerSpec::Conv2d { filters, kernel } => filters == 0 || kernel == 0,
                LayerSpec::Dense { units } => units == 0,
                LayerSpec::Maxout { k } => k == 0 || k > 255,
                LayerSpec::Softmax { classes } => classes == 0,
                _ => false,
            };
            if bad {
                return Err(Error::Structure(format!("degenerate layer {l:?}")));
            }
        }
        let maxouts: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Maxout { .. }))
            .map(|(i, _)| i)
            .collect();
        match self.variant {
            Variant::Baseline => {
                if !maxouts.is_empty() {
                    return Err(Error::Structure(
                        "baseline variant must not contain a maxout layer".into(),
                    ));
                }
            }
            Variant::Mfc => {
                let ok = maxouts.len() == 1
                    && maxouts[0] > 0
                    && matches!(self.layers[maxouts[0] - 1], LayerSpec::Dense { .. });
                if !ok {
                    return Err(Error::Structure(
                        "mfc variant needs exactly one maxout, directly after the dense layer"
                            .into(),
                    ));
                }
            }
            Variant::Mc => {
                let last_conv = self
                    .layers
                    .iter()
                    .rposition(|l| matches!(l, LayerSpec::Conv2d { .. }));
                let ok = maxouts.len() == 1 && last_conv.map(|c| c + 1) == Some(maxouts[0]);
                if !ok {
                    return Err(Error::Structure(
                        "mc variant needs exactly one maxout, directly after the last conv layer"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Survivor bookkeeping for one maxout layer.
///
/// Unit `j` originally owns inputs `j*k_original .. (j+1)*k_original`. After
/// structural pruning the survivors of unit `j` occupy slots
/// `j*k_current .. (j+1)*k_current` of the (shrunken) input, still ordered by
/// original index; `survivor_indices` maps each slot back to its original
/// index and `win_counts` tallies how often each slot was its unit's maximum.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxoutState {
    pub k_original: usize,
    pub k_current: usize,
    pub unit_count: usize,
    pub survivor_indices: Vec<Vec<u32>>,
    pub win_counts: Vec<Vec<u64>>,
}

impl MaxoutState {
    pub fn new(original_width: usize, k: usize) -> Result<MaxoutState> {
        if k == 0 || k > 255 {
            return Err(Error::Structure(format!("maxout group size {k} out of range")));
        }
        if original_width == 0 || original_width % k != 0 {
            return Err(Error::Structure(format!(
                "maxout input width {original_width} not divisible by group size {k}"
            )));
        }
        let unit_count = original_width / k;
        let survivor_indices = (0..unit_count)
            .map(|j| (0..k).map(|s| (j * k + s) as u32).collect())
            .collect();
        let win_counts = vec![vec![0u64; k]; unit_count];
        Ok(MaxoutState {
            k_original: k,
            k_current: k,
            unit_count,
            survivor_indices,
            win_counts,
        })
    }

    /// Width of the layer input after structural pruning.
    pub fn current_width(&self) -> usize {
        self.unit_count * self.k_current
    }

    pub fn reset_counts(&mut self) {
        for unit in &mut self.win_counts {
            unit.fill(0);
        }
    }

    /// Total wins recorded per unit (equal across units after full passes).
    pub fn counted_positions(&self) -> Vec<u64> {
        self.win_counts.iter().map(|u| u.iter().sum()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Structure(msg));
        if self.k_current == 0 || self.k_current > self.k_original {
            return err(format!(
                "k_current {} outside 1..={}",
                self.k_current, self.k_original
            ));
        }
        if self.survivor_indices.len() != self.unit_count
            || self.win_counts.len() != self.unit_count
        {
            return err("survivor/count tables disagree with unit count".into());
        }
        let original_width = self.unit_count * self.k_original;
        for (j, (surv, counts)) in self
            .survivor_indices
            .iter()
            .zip(&self.win_counts)
            .enumerate()
        {
            if surv.len() != self.k_current || counts.len() != self.k_current {
                return err(format!("unit {j} does not have exactly k_current survivors"));
            }
            for pair in surv.windows(2) {
                if pair[0] >= pair[1] {
                    return err(format!("unit {j} survivors not strictly ascending"));
                }
            }
            for &s in surv {
                let s = s as usize;
                if s >= original_width || s / self.k_original != j {
                    return err(format!("unit {j} survivor {s} outside its unit's range"));
                }
            }
        }
        Ok(())
    }

    fn absorb(&mut self, winners: &Winners) {
        debug_assert_eq!(winners.units, self.unit_count);
        debug_assert_eq!(winners.k, self.k_current);
        for (i, &slot) in winners.slots.iter().enumerate() {
            let unit = (i / winners.positions) % winners.units;
            self.win_counts[unit][slot as usize] += 1;
        }
    }
}

/// Winning slot per (sample, unit, spatial position) from one maxout forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Winners {
    pub batch: usize,
    pub units: usize,
    /// Spatial positions per sample: 1 after a dense layer, H*W after a conv.
    pub positions: usize,
    /// Group size at evaluation time; guards against stale replays.
    pub k: usize,
    pub in_shape: Shape,
    /// Row-major `[batch][unit][position]`.
    pub slots: Vec<u8>,
}

struct MaxoutLayout {
    batch: usize,
    positions: usize,
    spatial: Option<(usize, usize)>,
}

fn maxout_layout(x: &Tensor, state: &MaxoutState) -> Result<MaxoutLayout> {
    let (width, layout) = match x.shape().dims() {
        [b, w] => (
            *w,
            MaxoutLayout {
                batch: *b,
                positions: 1,
                spatial: None,
            },
        ),
        [b, c, h, w] => (
            *c,
            MaxoutLayout {
                batch: *b,
                positions: h * w,
                spatial: Some((*h, *w)),
            },
        ),
        _ => {
            return Err(Error::Structure(format!(
                "maxout expects a 2-d or 4-d input, got {}",
                x.shape()
            )))
        }
    };
    if width != state.current_width() {
        return Err(Error::Structure(format!(
            "maxout input width {width} does not match state width {} ({} units x k={})",
            state.current_width(),
            state.unit_count,
            state.k_current
        )));
    }
    Ok(layout)
}

fn maxout_eval(x: &Tensor, state: &MaxoutState) -> Result<(Tensor, Winners)> {
    let layout = maxout_layout(x, state)?;
    let (units, k) = (state.unit_count, state.k_current);
    let (batch, positions) = (layout.batch, layout.positions);
    let out_shape = match layout.spatial {
        Some((h, w)) => Shape::new([batch, units, h, w]),
        None => Shape::new([batch, units]),
    };
    let mut y = Tensor::zeros(out_shape);
    let mut slots = vec![0u8; batch * units * positions];
    let xin = x.data();
    let yout = y.data_mut();
    for b in 0..batch {
        let xb = &xin[b * units * k * positions..(b + 1) * units * k * positions];
        for j in 0..units {
            let best = &mut yout[(b * units + j) * positions..(b * units + j + 1) * positions];
            let slot = &mut slots[(b * units + j) * positions..(b * units + j + 1) * positions];
            best.copy_from_slice(&xb[j * k * positions..(j * k + 1) * positions]);
            for s in 1..k {
                let plane = &xb[(j * k + s) * positions..(j * k + s + 1) * positions];
                for p in 0..positions {
                    if plane[p] > best[p] {
                        best[p] = plane[p];
                        slot[p] = s as u8;
                    }
                }
            }
        }
    }
    let winners = Winners {
        batch,
        units,
        positions,
        k,
        in_shape: x.shape().clone(),
        slots,
    };
    Ok((y, winners))
}

/// Max-reduce each unit's surviving inputs; ties go to the lowest original
/// index. With `count` set, every winner bumps its `win_counts` entry.
pub fn maxout_forward(
    x: &Tensor,
    state: &mut MaxoutState,
    count: bool,
) -> Result<(Tensor, Winners)> {
    let (y, winners) = maxout_eval(x, state)?;
    if count {
        state.absorb(&winners);
    }
    Ok((y, winners))
}

/// Route each unit's upstream gradient to the slot that won the forward pass.
pub fn maxout_backward(grad_y: &Tensor, winners: &Winners, state: &MaxoutState) -> Result<Tensor> {
    if winners.units != state.unit_count || winners.k != state.k_current {
        return Err(Error::Structure(
            "winners map is stale: maxout state changed since the forward pass".into(),
        ));
    }
    let expected = winners.batch * winners.units * winners.positions;
    if grad_y.len() != expected || winners.slots.len() != expected {
        return Err(Error::Structure(format!(
            "gradient shape {} does not match winners map ({} elements)",
            grad_y.shape(),
            expected
        )));
    }
    let (units, k, positions) = (winners.units, winners.k, winners.positions);
    let mut grad_x = Tensor::zeros(winners.in_shape.clone());
    let gx = grad_x.data_mut();
    let gy = grad_y.data();
    for b in 0..winners.batch {
        for j in 0..units {
            let at = (b * units + j) * positions;
            let xbase = (b * units * k + j * k) * positions;
            for p in 0..positions {
                let slot = winners.slots[at + p] as usize;
                gx[xbase + slot * positions + p] = gy[at + p];
            }
        }
    }
    Ok(grad_x)
}

/// Mean cross-entropy of softmax(logits) against integer labels, stabilized
/// by max-subtraction. Returns the loss and d(loss)/d(logits).
pub fn softmax_xent(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor)> {
    let (batch, classes) = logits.shape().dims2()?;
    if labels.len() != batch {
        return Err(Error::Data(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut grad = Tensor::zeros(logits.shape().clone());
    let mut loss = 0.0f64;
    let inv_b = 1.0 / batch as f32;
    for (b, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for &v in row {
            z += ((v - m) as f64).exp();
        }
        loss -= (row[label] - m) as f64 - z.ln();
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (((row[c] - m) as f64).exp() / z) as f32;
            *gv = (p - if c == label { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok(((loss / batch as f64) as f32, grad))
}

/// Weights, bias, and optional prune mask of a parameterized layer.
///
/// `mask[i]` true means `weight[i]` is pruned: forced to exactly 0 and frozen
/// there by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
    pub mask: Option<Vec<bool>>,
}

impl Params {
    fn new(weight: Tensor, bias: Tensor) -> Params {
        Params {
            weight,
            bias,
            mask: None,
        }
    }

    pub(crate) fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, &m) in self.weight.data_mut().iter_mut().zip(mask) {
                if m {
                    *w = 0.0;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum LayerState {
    Conv(Params),
    Pool,
    Dense(Params),
    Relu,
    Maxout(MaxoutState),
    /// Affine classifier; softmax itself lives in [`softmax_xent`].
    Softmax(Params),
}

impl LayerState {
    pub(crate) fn params(&self) -> Option<&Params> {
        match self {
            LayerState::Conv(p) | LayerState::Dense(p) | LayerState::Softmax(p) => Some(p),
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<&mut Params> {
        match self {
            LayerState::Conv(p) | LayerState::Dense(p) | LayerState::Softmax(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub state: LayerState,
}

/// Feature-map shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Feat {
    Spatial { c: usize, h: usize, w: usize },
    Flat { width: usize },
}

impl Feat {
    fn width(self) -> usize {
        match self {
            Feat::Spatial { c, h, w } => c * h * w,
            Feat::Flat { width } => width,
        }
    }
}

/// An instantiated architecture: specs plus parameters and maxout state.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    input: (usize, usize, usize),
    pub(crate) layers: Vec<Layer>,
}

/// Per-layer activation record retained by the forward pass for backprop.
enum LayerCache {
    Conv {
        cols: Vec<f32>,
        c: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    },
    Pool {
        argmax: Vec<u32>,
        in_shape: Shape,
    },
    Affine {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    Maxout {
        winners: Winners,
    },
}

/// Opaque record of one forward pass, consumed by [`Network::backward`].
pub struct ForwardCache {
    batch: usize,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// Winner maps of every maxout layer, in layer order.
    pub fn winners(&self) -> Vec<&Winners> {
        self.layers
            .iter()
            .filter_map(|c| match c {
                LayerCache::Maxout { winners } => Some(winners),
                _ => None,
            })
            .collect()
    }
}

/// Per-parameter gradients, aligned with the network's layer list.
pub struct Gradients {
    /// `Some((d_weight, d_bias))` for parameterized layers, `None` otherwise.
    pub layers: Vec<Option<(Tensor, Tensor)>>,
}

impl Network {
    /// Instantiate `spec` on 1x28x28 inputs with Glorot-uniform weights.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Network> {
        Self::init_with_input(spec, (1, 28, 28), rng)
    }

    /// Instantiate on an arbitrary input geometry (small nets for tests).
    pub fn init_with_input(
        spec: &NetworkSpec,
        input: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Result<Network> {
        spec.validate()?;
        let (ic, ih, iw) = input;
        if ic == 0 || ih == 0 || iw == 0 {
            return Err(Error::Shape("input dims must be positive".into()));
        }
        let mut feat = Feat::Spatial {
            c: ic,
            h: ih,
            w: iw,
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for lspec in &spec.layers {
            let state = match *lspec {
                LayerSpec::Conv2d { filters, kernel } => {
                    let Feat::Spatial { c, h, w } = feat else {
                        return Err(Error::Structure(
                            "conv2d needs a spatial input (placed after a dense layer?)".into(),
                        ));
                    };
                    if kernel > h || kernel > w {
                        return Err(Error::Shape(format!(
                            "conv kernel {kernel} larger than input {h}x{w}"
                        )));
                    }
                    let fan_in = c * kernel * kernel;
                    let fan_out = filters * kernel * kernel;
                    let weight = crate::tensor::glorot_init(
                        Shape::new([filters, c, kernel, kernel]),
                        fan_in,
                        fan_out,
                        rng,
                    )?;
                    let (oh, ow) = conv_out_size(h, w, kernel, kernel, 1);
                    feat = Feat::Spatial {
                        c: filters,
                        h: oh,
                        w: ow,
                    };
                    LayerState::Conv(Params::new(weight, Tensor::zeros(Shape::new([filters]))))
                }
                LayerSpec::Maxpool2 => {
                    let Feat::Spatial { c, h, w } = feat else {
                        return Err(Error::Structure("maxpool2 needs a spatial input".into()));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Shape(format!(
                            "maxpool2 needs even spatial dims, got {h}x{w}"
                        )));
                    }
                    feat = Feat::Spatial {
                        c,
                        h: h / 2,
                        w: w / 2,
                    };
                    LayerState::Pool
                }
                LayerSpec::Dense { units } | LayerSpec::Softmax { classes: units } => {
                    let fan_in = feat.width();
                    let weight = crate::tensor::glorot_init(
                        Shape::new([units, fan_in]),
                        fan_in,
                        units,
                        rng,
                    )?;
                    feat = Feat::Flat { width: units };
                    let p = Params::new(weight, Tensor::zeros(Shape::new([units])));
                    if matches!(lspec, LayerSpec::Dense { .. }) {
                        LayerState::Dense(p)
                    } else {
                        LayerState::Softmax(p)
                    }
                }
                LayerSpec::Relu => LayerState::Relu,
                LayerSpec::Maxout { k } => {
                    let state = match feat {
                        Feat::Spatial { c, h, w } => {
                            let st = MaxoutState::new(c, k)?;
                            feat = Feat::Spatial {
                                c: st.unit_count,
                                h,
                                w,
                            };
                            st
                        }
                        Feat::Flat { width } => {
                            let st = MaxoutState::new(width, k)?;
                            feat = Feat::Flat {
                                width: st.unit_count,
                            };
                            st
                        }
                    };
                    LayerState::Maxout(state)
                }
            };
            layers.push(Layer {
                spec: *lspec,
                state,
            });
        }
        let net = Network {
            spec: spec.clone(),
            input,
            layers,
        };
        net.check_wiring()?;
        Ok(net)
    }

    /// Rebuild from previously saved parts (checkpoint loading).
    pub(crate) fn from_parts(
        spec: NetworkSpec,
        input: (usize, usize, usize),
        layers: Vec<Layer>,
    ) -> Result<Network> {
        let net = Network {
            spec,
            input,
            layers,
        };
        net.check_wiring()?;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_spec(&self, index: usize) -> &LayerSpec {
        &self.layers[index].spec
    }

    /// Weight and bias tensors of a parameterized layer.
    pub fn layer_params(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        self.layers[index]
            .state
            .params()
            .map(|p| (&p.weight, &p.bias))
    }

    /// Mutable weight/bias access (finite-difference probes, custom updates).
    /// Callers that touch masked entries must re-apply masks afterwards.
    pub fn layer_params_mut(&mut self, index: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        self.layers[index]
            .state
            .params_mut()
            .map(|p| (&mut p.weight, &mut p.bias))
    }

    pub fn layer_mask(&self, index: usize) -> Option<&[bool]> {
        self.layers[index]
            .state
            .params()
            .and_then(|p| p.mask.as_deref())
    }

    /// The first maxout layer's state, if the net has one.
    pub fn maxout_state(&self) -> Option<&MaxoutState> {
        self.layers.iter().find_map(|l| match &l.state {
            LayerState::Maxout(st) => Some(st),
            _ => None,
        })
    }

    pub(crate) fn maxout_state_mut(&mut self) -> Option<&mut MaxoutState> {
        self.layers.iter_mut().find_map(|l| match &mut l.state {
            LayerState::Maxout(st) => Some(st),
            _ => None,
        })
    }

    /// Force masked weights to exactly 0.
    pub fn apply_masks(&mut self) {
        for layer in &mut self.layers {
            if let Some(p) = layer.state.params_mut() {
                p.apply_mask();
            }
        }
    }

    /// Verify layer-to-layer shape compatibility against the actual parameter
    /// tensors (which may be structurally smaller than the declared layer
    /// sizes after pruning).
    pub fn check_wiring(&self) -> Result<()> {
        let (c, h, w) = self.input;
        let mut feat = Feat::Spatial { c, h, w };
        if self.spec.layers.len() != self.layers.len() {
            return Err(Error::Structure("spec/layer list length mismatch".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            feat = match (&layer.state, &layer.spec) {
                (LayerState::Conv(p), LayerSpec::Conv2d { .. }) => {
                    let Feat::Spatial { c, h, w } = feat else {
                        return Err(Error::Structure(format!("layer {i}: conv on flat input")));
                    };
                    let (f, fc, kh, kw) = p.weight.shape().dims4()?;
                    if fc != c || kh > h || kw > w {
                        return Err(Error::Structure(format!(
                            "layer {i}: conv weights {} incompatible with input {c}x{h}x{w}",
                            p.weight.shape()
                        )));
                    }
                    if p.bias.len() != f {
                        return Err(Error::Structure(format!("layer {i}: bias/filter mismatch")));
                    }
                    let (oh, ow) = conv_out_size(h, w, kh, kw, 1);
                    Feat::Spatial { c: f, h: oh, w: ow }
                }
                (LayerState::Pool, LayerSpec::Maxpool2) => {
                    let Feat::Spatial { c, h, w } = feat else {
                        return Err(Error::Structure(format!("layer {i}: pool on flat input")));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Structure(format!(
                            "layer {i}: pool needs even dims, got {h}x{w}"
                        )));
                    }
                    Feat::Spatial {
                        c,
                        h: h / 2,
                        w: w / 2,
                    }
                }
                (LayerState::Dense(p), LayerSpec::Dense { .. })
                | (LayerState::Softmax(p), LayerSpec::Softmax { .. }) => {
                    let (out, inw) = p.weight.shape().dims2()?;
                    if inw != feat.width() {
                        return Err(Error::Structure(format!(
                            "layer {i}: affine expects width {inw}, input provides {}",
                            feat.width()
                        )));
                    }
                    if p.bias.len() != out {
                        return Err(Error::Structure(format!("layer {i}: bias/row mismatch")));
                    }
                    Feat::Flat { width: out }
                }
                (LayerState::Relu, LayerSpec::Relu) => feat,
                (LayerState::Maxout(st), LayerSpec::Maxout { .. }) => {
                    st.validate()?;
                    match feat {
                        Feat::Spatial { c, h, w } => {
                            if c != st.current_width() {
                                return Err(Error::Structure(format!(
                                    "layer {i}: maxout state width {} vs {c} channels",
                                    st.current_width()
                                )));
                            }
                            Feat::Spatial {
                                c: st.unit_count,
                                h,
                                w,
                            }
                        }
                        Feat::Flat { width } => {
                            if width != st.current_width() {
                                return Err(Error::Structure(format!(
                                    "layer {i}: maxout state width {} vs input {width}",
                                    st.current_width()
                                )));
                            }
                            Feat::Flat {
                                width: st.unit_count,
                            }
                        }
                    }
                }
                (state, spec) => {
                    return Err(Error::Structure(format!(
                        "layer {i}: state/spec kind mismatch ({spec:?} vs {})",
                        match state {
                            LayerState::Conv(_) => "conv",
                            LayerState::Pool => "pool",
                            LayerState::Dense(_) => "dense",
                            LayerState::Relu => "relu",
                            LayerState::Maxout(_) => "maxout",
                            LayerState::Softmax(_) => "softmax",
                        }
                    )))
                }
            };
            // Masked entries must be exactly zero at all times.
            if let Some(p) = layer.state.params() {
                if let Some(mask) = &p.mask {
                    if mask.len() != p.weight.len() {
                        return Err(Error::Structure(format!(
                            "layer {i}: mask length {} vs {} weights",
                            mask.len(),
                            p.weight.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let (b, c, h, w) = batch.shape().dims4()?;
        if (c, h, w) != self.input || b == 0 {
            return Err(Error::Shape(format!(
                "batch shape {} does not match network input {}x{}x{}",
                batch.shape(),
                self.input.0,
                self.input.1,
                self.input.2
            )));
        }
        Ok(b)
    }

    fn forward_core(
        &self,
        batch: &Tensor,
        mut cache: Option<&mut Vec<LayerCache>>,
    ) -> Result<(Tensor, Vec<Winners>)> {
        let b = self.check_batch(batch)?;
        let mut winners_all = Vec::new();
        let mut act = batch.clone();
        for layer in &self.layers {
            act = match &layer.state {
                LayerState::Conv(p) => {
                    let (_, c, h, w) = act.shape().dims4()?;
                    let (f, _, kh, kw) = p.weight.shape().dims4()?;
                    let (oh, ow) = conv_out_size(h, w, kh, kw, 1);
                    let positions = oh * ow;
                    let patch = c * kh * kw;
                    let mut cols = vec![0.0f32; b * positions * patch];
                    let mut y = Tensor::zeros(Shape::new([b, f, oh, ow]));
                    for s in 0..b {
                        let sample = &act.data()[s * c * h * w..(s + 1) * c * h * w];
                        let cs = &mut cols[s * positions * patch..(s + 1) * positions * patch];
                        im2col(sample, c, h, w, kh, kw, 1, cs);
                        let ys = &mut y.data_mut()[s * f * positions..(s + 1) * f * positions];
                        sgemm(
                            f,
                            patch,
                            positions,
                            1.0,
                            p.weight.data(),
                            patch as isize,
                            1,
                            cs,
                            1,
                            patch as isize,
                            0.0,
                            ys,
                        );
                        for (fi, &bv) in p.bias.data().iter().enumerate() {
                            for v in &mut ys[fi * positions..(fi + 1) * positions] {
                                *v += bv;
                            }
                        }
                    }
                    if let Some(store) = cache.as_deref_mut() {
                        store.push(LayerCache::Conv {
                            cols,
                            c,
                            h,
                            w,
                            out_h: oh,
                            out_w: ow,
                        });
                    }
                    y
                }
                LayerState::Pool => {
                    let in_shape = act.shape().clone();
                    let (y, argmax) = crate::tensor::maxpool2d(&act)?;
                    if let Some(store) = cache.as_deref_mut() {
                        store.push(LayerCache::Pool { argmax, in_shape });
                    }
                    y
                }
                LayerState::Dense(p) | LayerState::Softmax(p) => {
                    let (out, inw) = p.weight.shape().dims2()?;
                    if act.len() != b * inw {
                        return Err(Error::Shape(format!(
                            "affine layer expects width {inw}, got {} x{b}",
                            act.len() / b
                        )));
                    }
                    let mut y = Tensor::zeros(Shape::new([b, out]));
                    // y[B x out] = x[B x in] @ W^T[in x out]
                    sgemm(
                        b,
                        inw,
                        out,
                        1.0,
                        act.data(),
                        inw as isize,
                        1,
                        p.weight.data(),
                        1,
                        inw as isize,
                        0.0,
                        y.data_mut(),
                    );
                    for row in 0..b {
                        let yr = &mut y.data_mut()[row * out..(row + 1) * out];
                        for (v, &bv) in yr.iter_mut().zip(p.bias.data()) {
                            *v += bv;
                        }
                    }
                    if let Some(store) = cache.as_deref_mut() {
                        store.push(LayerCache::Affine { input: act });
                    }
                    y
                }
                LayerState::Relu => {
                    let mut y = act.clone();
                    for v in y.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    if let Some(store) = cache.as_deref_mut() {
                        store.push(LayerCache::Relu { input: act });
                    }
                    y
                }
                LayerState::Maxout(st) => {
                    let (y, winners) = maxout_eval(&act, st)?;
                    if let Some(store) = cache.as_deref_mut() {
                        store.push(LayerCache::Maxout {
                            winners: winners.clone(),
                        });
                    }
                    winners_all.push(winners);
                    y
                }
            };
        }
        Ok((act, winners_all))
    }

    /// Full forward pass returning logits (shape `B x classes`) and the
    /// activation cache for [`Network::backward`]. With `count` set, maxout
    /// win counters accumulate this batch's winners.
    pub fn forward(&mut self, batch: &Tensor, count: bool) -> Result<(Tensor, ForwardCache)> {
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let (logits, winners) = self.forward_core(batch, Some(&mut layer_caches))?;
        if count {
            self.absorb_winners(&winners);
        }
        Ok((
            logits,
            ForwardCache {
                batch: batch.shape().dims()[0],
                layers: layer_caches,
            },
        ))
    }

    /// Inference-only logits; no cache, no counting. Usable from several
    /// threads at once on a shared network.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_core(batch, None)?.0)
    }

    /// Forward a batch purely to accumulate maxout win counts.
    pub fn count_batch(&mut self, batch: &Tensor) -> Result<()> {
        let (_, winners) = self.forward_core(batch, None)?;
        self.absorb_winners(&winners);
        Ok(())
    }

    fn absorb_winners(&mut self, winners: &[Winners]) {
        let mut it = winners.iter();
        for layer in &mut self.layers {
            if let LayerState::Maxout(st) = &mut layer.state {
                if let Some(w) = it.next() {
                    st.absorb(w);
                }
            }
        }
    }

    /// Backpropagate `grad_logits` through the cached forward pass, returning
    /// gradients for every weight and bias. Gradients of masked weight
    /// entries are zeroed so masked weights never move.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Structure(
                "forward cache does not match this network's layer list".into(),
            ));
        }
        let b = cache.batch;
        let mut grads: Vec<Option<(Tensor, Tensor)>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_logits.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let entry = match (&layer.state, lc) {
                (LayerState::Dense(p), LayerCache::Affine { input })
                | (LayerState::Softmax(p), LayerCache::Affine { input }) => {
                    let (out, inw) = p.weight.shape().dims2()?;
                    let mut dw = Tensor::zeros(p.weight.shape().clone());
                    // dW[out x in] = g^T[out x B] @ x[B x in]
                    sgemm(
                        out,
                        b,
                        inw,
                        1.0,
                        g.data(),
                        1,
                        out as isize,
                        input.data(),
                        inw as isize,
                        1,
                        0.0,
                        dw.data_mut(),
                    );
                    let mut db = Tensor::zeros(Shape::new([out]));
                    for row in 0..b {
                        let gr = &g.data()[row * out..(row + 1) * out];
                        for (d, &gv) in db.data_mut().iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                    let mut dx = Tensor::zeros(Shape::new([b, inw]));
                    // dx[B x in] = g[B x out] @ W[out x in]
                    sgemm(
                        b,
                        out,
                        inw,
                        1.0,
                        g.data(),
                        out as isize,
                        1,
                        p.weight.data(),
                        inw as isize,
                        1,
                        0.0,
                        dx.data_mut(),
                    );
                    g = Tensor::from_vec(input.shape().clone(), dx.data().to_vec())?;
                    Some((dw, db, p))
                }
                (LayerState::Conv(p), LayerCache::Conv { cols, c, h, w, out_h, out_w }) => {
                    let (f, _, kh, kw) = p.weight.shape().dims4()?;
                    let positions = out_h * out_w;
                    let patch = c * kh * kw;
                    let mut dw = Tensor::zeros(p.weight.shape().clone());
                    let mut db = Tensor::zeros(Shape::new([f]));
                    let mut dx = Tensor::zeros(Shape::new([b, *c, *h, *w]));
                    let mut dcols = vec![0.0f32; positions * patch];
                    for s in 0..b {
                        let gs = &g.data()[s * f * positions..(s + 1) * f * positions];
                        let cs = &cols[s * positions * patch..(s + 1) * positions * patch];
                        // dW[F x patch] += g_s[F x P] @ cols_s[P x patch]
                        sgemm(
                            f,
                            positions,
                            patch,
                            1.0,
                            gs,
                            positions as isize,
                            1,
                            cs,
                            patch as isize,
                            1,
                            1.0,
                            dw.data_mut(),
                        );
                        for (fi, d) in db.data_mut().iter_mut().enumerate() {
                            for &gv in &gs[fi * positions..(fi + 1) * positions] {
                                *d += gv;
                            }
                        }
                        // dcols[P x patch] = g_s^T[P x F] @ W[F x patch]
                        sgemm(
                            positions,
                            f,
                            patch,
                            1.0,
                            gs,
                            1,
                            positions as isize,
                            p.weight.data(),
                            patch as isize,
                            1,
                            0.0,
                            &mut dcols,
                        );
                        let ds = &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w];
                        col2im_add(&dcols, *c, *h, *w, kh, kw, 1, ds);
                    }
                    g = dx;
                    Some((dw, db, p))
                }
                (LayerState::Pool, LayerCache::Pool { argmax, in_shape }) => {
                    let mut dx = Tensor::zeros(in_shape.clone());
                    for (o, &ix) in argmax.iter().enumerate() {
                        dx.data_mut()[ix as usize] += g.data()[o];
                    }
                    g = dx;
                    None
                }
                (LayerState::Relu, LayerCache::Relu { input }) => {
                    let mut dx = g.clone();
                    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    g = dx;
                    None
                }
                (LayerState::Maxout(st), LayerCache::Maxout { winners }) => {
                    g = maxout_backward(&g, winners, st)?;
                    None
                }
                _ => {
                    return Err(Error::Structure(
                        "forward cache entry does not match its layer".into(),
                    ))
                }
            };
            match entry {
                Some((mut dw, db, p)) => {
                    if let Some(mask) = &p.mask {
                        for (d, &m) in dw.data_mut().iter_mut().zip(mask) {
                            if m {
                                *d = 0.0;
                            }
                        }
                    }
                    grads.push(Some((dw, db)));
                }
                None => grads.push(None),
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}
