//! Network building blocks: causal convolutions (fixed-dilation and
//! prunable), linear heads, pooling, activations; seed construction and
//! extraction of the compact dilated network after search.

use crate::error::{PitError, Result};
use crate::loss::LossKind;
use crate::mask::{
    self, active_tap_count, build_constant_matrices, build_mask_graph, extract_dilation, GammaSet,
    MaskSpec,
};
use crate::rng::{derive_seed, tags, SplitMix64};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DELTA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Multilabel,
}

/// One layer descriptor in a network config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    /// Prunable causal conv: starts with `rf_max` taps and dilation 1.
    PitConv {
        c_in: usize,
        c_out: usize,
        rf_max: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Standard causal conv with a fixed kernel and dilation.
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        #[serde(default)]
        activation: Activation,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Global average pooling over time.
    Pool,
    Activation {
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub task: TaskKind,
    pub loss: LossKind,
    pub layers: Vec<LayerConfig>,
}

impl NetworkConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn has_pit_layers(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerConfig::PitConv { .. }))
    }

    /// Structural validation: positive sizes and agreeing channel counts
    /// through the layer chain. Errors name the offending layer index.
    pub fn validate(&self) -> Result<()> {
        let err = |layer: usize, msg: String| Err(PitError::Config { layer, msg });
        if self.layers.is_empty() {
            return err(0, "network has no layers".into());
        }
        // `channels` is the feature count flowing between layers; `pooled`
        // tracks whether the time axis has been reduced away.
        let mut channels: Option<usize> = None;
        let mut pooled = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerConfig::PitConv { c_in, c_out, rf_max, .. } => {
                    if pooled {
                        return err(i, "conv after pooling".into());
                    }
                    if c_in == 0 || c_out == 0 {
                        return err(i, "channel counts must be positive".into());
                    }
                    if rf_max < 2 {
                        return err(i, format!("rf_max must be >= 2, got {rf_max}"));
                    }
                    if let Some(c) = channels {
                        if c != c_in {
                            return err(i, format!("expects {c_in} channels, previous layer provides {c}"));
                        }
                    }
                    channels = Some(c_out);
                }
                LayerConfig::Conv { c_in, c_out, kernel, dilation, .. } => {
                    if pooled {
                        return err(i, "conv after pooling".into());
                    }
                    if c_in == 0 || c_out == 0 {
                        return err(i, "channel counts must be positive".into());
                    }
                    if kernel == 0 {
                        return err(i, "kernel must have at least one tap".into());
                    }
                    if dilation == 0 {
                        return err(i, "dilation must be >= 1".into());
                    }
                    if let Some(c) = channels {
                        if c != c_in {
                            return err(i, format!("expects {c_in} channels, previous layer provides {c}"));
                        }
                    }
                    channels = Some(c_out);
                }
                LayerConfig::Linear { in_features, out_features } => {
                    if !pooled {
                        return err(i, "linear layers require pooled (time-free) input".into());
                    }
                    if in_features == 0 || out_features == 0 {
                        return err(i, "feature counts must be positive".into());
                    }
                    if let Some(c) = channels {
                        if c != in_features {
                            return err(i, format!("expects {in_features} features, previous layer provides {c}"));
                        }
                    }
                    channels = Some(out_features);
                }
                LayerConfig::Pool => {
                    if pooled {
                        return err(i, "repeated pooling".into());
                    }
                    pooled = true;
                }
                LayerConfig::Activation { .. } => {}
            }
        }
        match self.task {
            TaskKind::Multilabel if !pooled => {
                err(self.layers.len() - 1, "multilabel task requires a pooled head".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PitConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    /// `[c_out, c_in, rf_max]`; the seed keeps every tap.
    pub w: Tensor,
    pub bias: Tensor,
    pub gamma: GammaSet,
    pub activation: Activation,
}

impl PitConvLayer {
    pub fn rf_max(&self) -> usize {
        self.gamma.spec().rf_max()
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub w: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`.
    pub w: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub enum Layer {
    PitConv(PitConvLayer),
    Conv(ConvLayer),
    Linear(LinearLayer),
    Pool,
    Activation(Activation),
}

#[derive(Debug, Clone)]
pub struct Network {
    pub task: TaskKind,
    pub loss_kind: LossKind,
    pub layers: Vec<Layer>,
}

/// Which parameters become differentiable leaves in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainability {
    /// Inference: everything constant.
    None,
    /// Warmup / fine-tuning: weights and biases train, selectors are fixed.
    WeightsOnly,
    /// Pruning: weights, biases and unfrozen dilation selectors all train.
    WeightsAndGamma,
}

/// Tape handles for one layer's parameters within a single forward pass.
#[derive(Debug, Clone)]
pub enum LayerVars {
    PitConv {
        w: Var,
        bias: Var,
        /// Float selector leaf; present only when selectors are trainable.
        gamma: Option<Var>,
        /// Weights with the dilation mask applied, `[c_out, c_in, rf_max]`.
        masked_w: Var,
    },
    Conv {
        w: Var,
        bias: Var,
    },
    Linear {
        w: Var,
        bias: Var,
    },
    Fixed,
}

#[derive(Debug, Clone)]
pub struct NetVars(pub Vec<LayerVars>);

/// Build a fresh network from a config: dilation selectors at 1.0 and
/// weights from a fan-in-scaled uniform distribution,
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, drawn row-major from the stream
/// `derive_seed(seed, tags::layer_weights(layer_index))`. Biases start at
/// zero. The same seed and config always produce identical bytes.
pub fn build_network(cfg: &NetworkConfig, rng_seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (i, lc) in cfg.layers.iter().enumerate() {
        let mut rng = SplitMix64::new(derive_seed(rng_seed, tags::layer_weights(i)));
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.uniform(-bound, bound)).collect()
        };
        let layer = match *lc {
            LayerConfig::PitConv { c_in, c_out, rf_max, activation } => {
                let spec = MaskSpec::new(rf_max).map_err(|e| PitError::Config {
                    layer: i,
                    msg: e.to_string(),
                })?;
                let w = Tensor::new(
                    vec![c_out, c_in, rf_max],
                    draw(c_out * c_in * rf_max, c_in * rf_max),
                )?;
                Layer::PitConv(PitConvLayer {
                    c_in,
                    c_out,
                    w,
                    bias: Tensor::zeros(vec![c_out]),
                    gamma: GammaSet::all_ones(spec, DEFAULT_DELTA)?,
                    activation,
                })
            }
            LayerConfig::Conv { c_in, c_out, kernel, dilation, activation } => {
                let w = Tensor::new(
                    vec![c_out, c_in, kernel],
                    draw(c_out * c_in * kernel, c_in * kernel),
                )?;
                Layer::Conv(ConvLayer {
                    c_in,
                    c_out,
                    kernel,
                    dilation,
                    w,
                    bias: Tensor::zeros(vec![c_out]),
                    activation,
                })
            }
            LayerConfig::Linear { in_features, out_features } => {
                let w = Tensor::new(
                    vec![out_features, in_features],
                    draw(out_features * in_features, in_features),
                )?;
                Layer::Linear(LinearLayer {
                    in_features,
                    out_features,
                    w,
                    bias: Tensor::zeros(vec![out_features]),
                })
            }
            LayerConfig::Pool => Layer::Pool,
            LayerConfig::Activation { activation } => Layer::Activation(activation),
        };
        layers.push(layer);
    }
    Ok(Network { task: cfg.task, loss_kind: cfg.loss, layers })
}

impl Network {
    pub fn pit_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::PitConv(_))).count()
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        for layer in &mut self.layers {
            if let Layer::PitConv(l) = layer {
                l.gamma.set_delta(delta)?;
            }
        }
        Ok(())
    }

    /// Current dilation per prunable layer.
    pub fn dilations(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::PitConv(p) => Some(p.gamma.dilation()),
                _ => None,
            })
            .collect()
    }

    pub fn all_gammas_frozen(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::PitConv(p) => p.gamma.frozen(),
            _ => true,
        })
    }

    pub fn freeze_gammas(&mut self) {
        for layer in &mut self.layers {
            if let Layer::PitConv(l) = layer {
                l.gamma.freeze();
            }
        }
    }

    /// Create parameter leaves (and per-layer mask graphs) for one forward
    /// pass. Call once per tape, then run samples with
    /// [`Network::forward_sample`].
    pub fn begin_forward(&self, tape: &mut Tape, mode: Trainability) -> Result<NetVars> {
        self.begin_forward_inner(tape, mode, None)
    }

    /// Like [`Network::begin_forward`] but using externally created leaves
    /// for the trainable parameters, in network order (`w`, `bias` and, for
    /// prunable layers in selector-training mode, `gamma`). Used by the
    /// gradient checker to perturb parameters from outside.
    pub fn begin_forward_with_leaves(
        &self,
        tape: &mut Tape,
        mode: Trainability,
        leaves: &[Var],
    ) -> Result<NetVars> {
        self.begin_forward_inner(tape, mode, Some(leaves))
    }

    fn begin_forward_inner(
        &self,
        tape: &mut Tape,
        mode: Trainability,
        leaves: Option<&[Var]>,
    ) -> Result<NetVars> {
        let weights_train = mode != Trainability::None;
        let mut supplied = leaves.unwrap_or(&[]).iter().copied();
        let mut next_leaf = |tape: &mut Tape, t: &Tensor, req: bool| -> Result<Var> {
            if leaves.is_some() {
                supplied
                    .next()
                    .ok_or_else(|| PitError::invalid("not enough parameter leaves supplied"))
            } else {
                Ok(tape.leaf(t.clone(), req))
            }
        };
        let mut vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let lv = match layer {
                Layer::PitConv(l) => {
                    let w = next_leaf(tape, &l.w, weights_train)?;
                    let bias = next_leaf(tape, &l.bias, weights_train)?;
                    let gamma_trains = mode == Trainability::WeightsAndGamma && !l.gamma.frozen();
                    let (gamma, mask_var) = if gamma_trains {
                        let g = next_leaf(
                            tape,
                            &Tensor::vector(l.gamma.g_hat().to_vec()),
                            true,
                        )?;
                        let bin = tape.heaviside_ste(g, l.gamma.delta())?;
                        let mats = build_constant_matrices(l.gamma.spec());
                        (Some(g), build_mask_graph(tape, bin, &mats)?)
                    } else {
                        let bits = l.gamma.binarized();
                        let m = Tensor::vector(
                            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                        );
                        (None, tape.constant(m))
                    };
                    let rf = l.rf_max();
                    let rows = l.c_out * l.c_in;
                    let w2d = tape.reshape(w, vec![rows, rf])?;
                    let tiled = tape.broadcast_rows(mask_var, rows)?;
                    let masked2d = tape.mul(w2d, tiled)?;
                    let masked_w = tape.reshape(masked2d, vec![l.c_out, l.c_in, rf])?;
                    LayerVars::PitConv { w, bias, gamma, masked_w }
                }
                Layer::Conv(l) => {
                    let w = next_leaf(tape, &l.w, weights_train)?;
                    let bias = next_leaf(tape, &l.bias, weights_train)?;
                    LayerVars::Conv { w, bias }
                }
                Layer::Linear(l) => {
                    let w = next_leaf(tape, &l.w, weights_train)?;
                    let bias = next_leaf(tape, &l.bias, weights_train)?;
                    LayerVars::Linear { w, bias }
                }
                Layer::Pool | Layer::Activation(_) => LayerVars::Fixed,
            };
            vars.push(lv);
        }
        Ok(NetVars(vars))
    }

    /// Forward one input `[c_in, t]` through the network on the tape.
    pub fn forward_sample(&self, tape: &mut Tape, vars: &NetVars, x: Var) -> Result<Var> {
        let mut cur = x;
        for (layer, lv) in self.layers.iter().zip(vars.0.iter()) {
            cur = match (layer, lv) {
                (Layer::PitConv(l), LayerVars::PitConv { bias, masked_w, .. }) => {
                    let y = tape.conv1d_causal(cur, *masked_w, *bias, 1)?;
                    apply_activation(tape, y, l.activation)?
                }
                (Layer::Conv(l), LayerVars::Conv { w, bias }) => {
                    let y = tape.conv1d_causal(cur, *w, *bias, l.dilation)?;
                    apply_activation(tape, y, l.activation)?
                }
                (Layer::Linear(_), LayerVars::Linear { w, bias }) => {
                    let y = tape.matvec(*w, cur)?;
                    tape.add(y, *bias)?
                }
                (Layer::Pool, LayerVars::Fixed) => tape.avg_pool_time(cur)?,
                (Layer::Activation(act), LayerVars::Fixed) => {
                    apply_activation(tape, cur, *act)?
                }
                _ => return Err(PitError::invalid("layer vars out of sync with layers")),
            };
        }
        Ok(cur)
    }

    /// Inference convenience: forward a single tensor on a private tape.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.begin_forward(&mut tape, Trainability::None)?;
        let xv = tape.constant(x.clone());
        let y = self.forward_sample(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }
}

fn apply_activation(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::None => Ok(x),
    }
}

/// Replace every frozen prunable layer by a standard dilated conv holding
/// only the surviving taps, in time order. The extracted network computes
/// the same sums in the same order, so its outputs are bitwise equal to the
/// masked network's.
pub fn export_extracted(net: &Network) -> Result<(NetworkConfig, Network)> {
    if !net.all_gammas_frozen() {
        return Err(PitError::invalid(
            "export requires frozen dilation selectors; finish training first",
        ));
    }
    let mut layer_cfgs = Vec::with_capacity(net.layers.len());
    let mut layers = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        match layer {
            Layer::PitConv(l) => {
                let rf = l.rf_max();
                let bits = l.gamma.binarized();
                let d = extract_dilation(&bits);
                let taps = active_tap_count(rf, d);
                let mut w = Vec::with_capacity(l.c_out * l.c_in * taps);
                let src = l.w.data();
                for m in 0..l.c_out {
                    for c in 0..l.c_in {
                        for j in 0..taps {
                            w.push(src[m * l.c_in * rf + c * rf + j * d]);
                        }
                    }
                }
                layer_cfgs.push(LayerConfig::Conv {
                    c_in: l.c_in,
                    c_out: l.c_out,
                    kernel: taps,
                    dilation: d,
                    activation: l.activation,
                });
                layers.push(Layer::Conv(ConvLayer {
                    c_in: l.c_in,
                    c_out: l.c_out,
                    kernel: taps,
                    dilation: d,
                    w: Tensor::new(vec![l.c_out, l.c_in, taps], w)?,
                    bias: l.bias.clone(),
                    activation: l.activation,
                }));
            }
            Layer::Conv(l) => {
                layer_cfgs.push(LayerConfig::Conv {
                    c_in: l.c_in,
                    c_out: l.c_out,
                    kernel: l.kernel,
                    dilation: l.dilation,
                    activation: l.activation,
                });
                layers.push(Layer::Conv(l.clone()));
            }
            Layer::Linear(l) => {
                layer_cfgs.push(LayerConfig::Linear {
                    in_features: l.in_features,
                    out_features: l.out_features,
                });
                layers.push(Layer::Linear(l.clone()));
            }
            Layer::Pool => {
                layer_cfgs.push(LayerConfig::Pool);
                layers.push(Layer::Pool);
            }
            Layer::Activation(a) => {
                layer_cfgs.push(LayerConfig::Activation { activation: *a });
                layers.push(Layer::Activation(*a));
            }
        }
    }
    let cfg = NetworkConfig { task: net.task, loss: net.loss_kind, layers: layer_cfgs };
    Ok((cfg, Network { task: net.task, loss_kind: net.loss_kind, layers }))
}

/// Parameter count of a live network. Prunable layers count only the taps
/// their current mask keeps alive; biases are included.
pub fn count_params(net: &Network) -> usize {
    net.layers
        .iter()
        .map(|layer| match layer {
            Layer::PitConv(l) => {
                let alive = mask::mask_oracle(&l.gamma.binarized(), l.rf_max())
                    .iter()
                    .filter(|&&b| b)
                    .count();
                l.c_in * l.c_out * alive + l.c_out
            }
            Layer::Conv(l) => l.c_in * l.c_out * l.kernel + l.c_out,
            Layer::Linear(l) => l.in_features * l.out_features + l.out_features,
            Layer::Pool | Layer::Activation(_) => 0,
        })
        .sum()
}

/// Parameter count implied by a config (prunable layers at full width).
pub fn count_params_config(cfg: &NetworkConfig) -> usize {
    cfg.layers
        .iter()
        .map(|layer| match *layer {
            LayerConfig::PitConv { c_in, c_out, rf_max, .. } => c_in * c_out * rf_max + c_out,
            LayerConfig::Conv { c_in, c_out, kernel, .. } => c_in * c_out * kernel + c_out,
            LayerConfig::Linear { in_features, out_features } => {
                in_features * out_features + out_features
            }
            LayerConfig::Pool | LayerConfig::Activation { .. } => 0,
        })
        .sum()
}

/// Conv weight entries only (no biases, no linear heads); used for
/// size-ratio checks between seed and pruned variants.
pub fn conv_weight_count(cfg: &NetworkConfig) -> usize {
    cfg.layers
        .iter()
        .map(|layer| match *layer {
            LayerConfig::PitConv { c_in, c_out, rf_max, .. } => c_in * c_out * rf_max,
            LayerConfig::Conv { c_in, c_out, kernel, .. } => c_in * c_out * kernel,
            _ => 0,
        })
        .sum()
}

/// Selector pattern encoding a given power-of-two dilation.
pub fn gamma_pattern_for_dilation(spec: &MaskSpec, d: usize) -> Result<Vec<bool>> {
    if !d.is_power_of_two() || d > spec.max_dilation() {
        return Err(PitError::invalid(format!(
            "dilation {d} is not a reachable power of two for rf_max {}",
            spec.rf_max()
        )));
    }
    let l = spec.levels();
    let m = l - 1 - d.ilog2() as usize;
    let mut bits = vec![true];
    for i in 1..l {
        bits.push(i <= m);
    }
    Ok(bits)
}

/// Force fixed dilations onto a freshly built prunable network and freeze
/// it. Used to build reference networks with known dilations.
pub fn force_dilations(net: &mut Network, dilations: &[usize]) -> Result<()> {
    let mut di = dilations.iter();
    for layer in &mut net.layers {
        if let Layer::PitConv(l) = layer {
            let d = *di
                .next()
                .ok_or_else(|| PitError::invalid("fewer dilations than prunable layers"))?;
            let bits = gamma_pattern_for_dilation(l.gamma.spec(), d)?;
            l.gamma.set_pattern(&bits)?;
        }
    }
    if di.next().is_some() {
        return Err(PitError::invalid("more dilations than prunable layers"));
    }
    net.freeze_gammas();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;
    use crate::rng::SplitMix64;

    fn single_pit_cfg(c_in: usize, c_out: usize, rf_max: usize) -> NetworkConfig {
        NetworkConfig {
            task: TaskKind::Regression,
            loss: LossKind::Mse,
            layers: vec![LayerConfig::PitConv {
                c_in,
                c_out,
                rf_max,
                activation: Activation::None,
            }],
        }
    }

    fn rand_input(rng: &mut SplitMix64, c: usize, t: usize) -> Tensor {
        Tensor::new(vec![c, t], (0..c * t).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn build_single_pit_layer() {
        let net = build_network(&single_pit_cfg(1, 1, 9), 7).unwrap();
        assert_eq!(count_params(&net), 10); // 9 weights + 1 bias
        match &net.layers[0] {
            Layer::PitConv(l) => {
                assert_eq!(l.gamma.g_hat(), &[1.0, 1.0, 1.0, 1.0]);
                assert_eq!(l.w.shape(), &[1, 1, 9]);
            }
            _ => panic!("expected prunable conv"),
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = NetworkConfig {
            task: TaskKind::Regression,
            loss: LossKind::Mse,
            layers: vec![
                LayerConfig::PitConv { c_in: 2, c_out: 3, rf_max: 9, activation: Activation::Relu },
                LayerConfig::Conv { c_in: 3, c_out: 1, kernel: 3, dilation: 2, activation: Activation::None },
            ],
        };
        let a = build_network(&cfg, 123).unwrap();
        let b = build_network(&cfg, 123).unwrap();
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            match (la, lb) {
                (Layer::PitConv(x), Layer::PitConv(y)) => {
                    assert!(x.w.bits_eq(&y.w) && x.bias.bits_eq(&y.bias));
                }
                (Layer::Conv(x), Layer::Conv(y)) => {
                    assert!(x.w.bits_eq(&y.w) && x.bias.bits_eq(&y.bias));
                }
                _ => panic!("layer kinds diverged"),
            }
        }
        let c = build_network(&cfg, 124).unwrap();
        match (&a.layers[0], &c.layers[0]) {
            (Layer::PitConv(x), Layer::PitConv(y)) => assert!(!x.w.bits_eq(&y.w)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn mismatched_channels_name_the_layer() {
        let cfg = NetworkConfig {
            task: TaskKind::Regression,
            loss: LossKind::Mse,
            layers: vec![
                LayerConfig::PitConv { c_in: 1, c_out: 4, rf_max: 5, activation: Activation::None },
                LayerConfig::PitConv { c_in: 3, c_out: 2, rf_max: 5, activation: Activation::None },
            ],
        };
        match build_network(&cfg, 0) {
            Err(PitError::Config { layer: 1, .. }) => {}
            other => panic!("expected config error at layer 1, got {other:?}"),
        }
    }

    #[test]
    fn all_ones_mask_matches_plain_conv_bitwise() {
        let net = build_network(&single_pit_cfg(2, 3, 9), 42).unwrap();
        let mut rng = SplitMix64::new(5);
        let x = rand_input(&mut rng, 2, 16);
        let masked = net.forward_tensor(&x).unwrap();

        let (w, bias) = match &net.layers[0] {
            Layer::PitConv(l) => (l.w.clone(), l.bias.clone()),
            _ => unreachable!(),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let bv = tape.constant(bias);
        let y = tape.conv1d_causal(xv, wv, bv, 1).unwrap();
        assert!(masked.bits_eq(tape.value(y)));
    }

    #[test]
    fn zero_input_yields_bias() {
        let net = build_network(&single_pit_cfg(1, 3, 5), 9).unwrap();
        let x = Tensor::zeros(vec![1, 7]);
        let y = net.forward_tensor(&x).unwrap();
        let bias = match &net.layers[0] {
            Layer::PitConv(l) => l.bias.clone(),
            _ => unreachable!(),
        };
        for m in 0..3 {
            for t in 0..7 {
                assert_eq!(y.data()[m * 7 + t], bias.data()[m]);
            }
        }
    }

    #[test]
    fn masked_equals_compact_dilated_conv() {
        // Selector pattern for dilation 2 keeps taps {0,2,4,6,8}.
        let mut net = build_network(&single_pit_cfg(1, 1, 9), 11).unwrap();
        force_dilations(&mut net, &[2]).unwrap();
        let mut rng = SplitMix64::new(6);
        let x = rand_input(&mut rng, 1, 20);
        let masked = net.forward_tensor(&x).unwrap();

        let (compact_w, bias) = match &net.layers[0] {
            Layer::PitConv(l) => {
                let src = l.w.data();
                let w: Vec<f64> = (0..5).map(|j| src[2 * j]).collect();
                (Tensor::new(vec![1, 1, 5], w).unwrap(), l.bias.clone())
            }
            _ => unreachable!(),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(compact_w);
        let bv = tape.constant(bias);
        let y = tape.conv1d_causal(xv, wv, bv, 2).unwrap();
        assert!(masked.bits_eq(tape.value(y)));
    }

    #[test]
    fn extraction_equivalence_and_receptive_span() {
        let cfg = NetworkConfig {
            task: TaskKind::Regression,
            loss: LossKind::Mse,
            layers: vec![
                LayerConfig::PitConv { c_in: 1, c_out: 3, rf_max: 9, activation: Activation::Relu },
                LayerConfig::PitConv { c_in: 3, c_out: 2, rf_max: 5, activation: Activation::None },
            ],
        };
        let mut net = build_network(&cfg, 77).unwrap();
        force_dilations(&mut net, &[2, 4]).unwrap();
        let (ecfg, extracted) = export_extracted(&net).unwrap();
        match &ecfg.layers[0] {
            LayerConfig::Conv { kernel, dilation, .. } => {
                assert_eq!((*kernel, *dilation), (5, 2));
            }
            _ => panic!("expected conv"),
        }
        match &ecfg.layers[1] {
            LayerConfig::Conv { kernel, dilation, .. } => {
                assert_eq!((*kernel, *dilation), (2, 4));
                // Extracted span stays within the seed window.
                assert!((kernel - 1) * dilation <= 4);
            }
            _ => panic!("expected conv"),
        }
        let mut rng = SplitMix64::new(3);
        for _ in 0..5 {
            let x = rand_input(&mut rng, 1, 24);
            let a = net.forward_tensor(&x).unwrap();
            let b = extracted.forward_tensor(&x).unwrap();
            assert!(a.bits_eq(&b));
        }
        assert!(count_params(&extracted) <= count_params(&net) + 0);
        assert_eq!(count_params(&extracted), count_params(&net));
    }

    #[test]
    fn export_all_ones_is_seed_layer() {
        let mut net = build_network(&single_pit_cfg(2, 2, 9), 13).unwrap();
        net.freeze_gammas();
        let (ecfg, extracted) = export_extracted(&net).unwrap();
        match &ecfg.layers[0] {
            LayerConfig::Conv { kernel, dilation, .. } => assert_eq!((*kernel, *dilation), (9, 1)),
            _ => panic!("expected conv"),
        }
        match (&net.layers[0], &extracted.layers[0]) {
            (Layer::PitConv(a), Layer::Conv(b)) => assert!(a.w.bits_eq(&b.w)),
            _ => unreachable!(),
        }
        assert_eq!(count_params(&extracted), count_params(&net));
    }

    #[test]
    fn export_requires_frozen() {
        let net = build_network(&single_pit_cfg(1, 1, 9), 1).unwrap();
        assert!(export_extracted(&net).is_err());
    }

    #[test]
    fn param_count_cases() {
        let mut net = build_network(&single_pit_cfg(8, 8, 9), 0).unwrap();
        assert_eq!(count_params(&net), 584);
        force_dilations(&mut net, &[4]).unwrap();
        assert_eq!(count_params(&net), 200);
        let empty = Network {
            task: TaskKind::Regression,
            loss_kind: LossKind::Mse,
            layers: vec![],
        };
        assert_eq!(count_params(&empty), 0);
    }

    #[test]
    fn pruned_taps_get_zero_weight_grad() {
        let mut net = build_network(&single_pit_cfg(1, 1, 9), 21).unwrap();
        match &mut net.layers[0] {
            Layer::PitConv(l) => l.gamma.set_g_hat(&[1.0, 1.0, 1.0, 0.2]).unwrap(),
            _ => unreachable!(),
        }
        let mut rng = SplitMix64::new(8);
        let x = rand_input(&mut rng, 1, 12);
        let mut tape = Tape::new();
        let vars = net.begin_forward(&mut tape, Trainability::WeightsAndGamma).unwrap();
        let xv = tape.constant(x);
        let y = net.forward_sample(&mut tape, &vars, xv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();
        let (wvar, gvar) = match &vars.0[0] {
            LayerVars::PitConv { w, gamma, .. } => (*w, gamma.unwrap()),
            _ => unreachable!(),
        };
        let wg = tape.grad(wvar).unwrap();
        // delta 0.5 turns the last selector off: odd taps are masked.
        for (i, g) in wg.data().iter().enumerate() {
            if i % 2 == 1 {
                assert_eq!(*g, 0.0, "masked tap {i} must get zero gradient");
            } else {
                assert_ne!(*g, 0.0, "alive tap {i} should receive gradient");
            }
        }
        // Selector gradient flows.
        let gg = tape.grad(gvar).unwrap();
        assert!(gg.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = NetworkConfig {
            task: TaskKind::Multilabel,
            loss: LossKind::Bce,
            layers: vec![
                LayerConfig::PitConv { c_in: 1, c_out: 4, rf_max: 17, activation: Activation::Relu },
                LayerConfig::Pool,
                LayerConfig::Linear { in_features: 4, out_features: 2 },
            ],
        };
        let json = cfg.to_json();
        let back = NetworkConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        assert!(json.contains("\"pit_conv\""));
    }

    #[test]
    fn forward_channel_mismatch() {
        let net = build_network(&single_pit_cfg(2, 1, 5), 0).unwrap();
        let x = Tensor::zeros(vec![3, 4]);
        assert!(matches!(
            net.forward_tensor(&x),
            Err(PitError::ChannelMismatch { input: 3, expected: 2 })
        ));
    }

    #[test]
    fn dilation_patterns_round_trip() {
        let spec = MaskSpec::new(33).unwrap();
        for d in [1, 2, 4, 8, 16, 32] {
            let bits = gamma_pattern_for_dilation(&spec, d).unwrap();
            assert_eq!(extract_dilation(&bits), d);
        }
        assert!(gamma_pattern_for_dilation(&spec, 3).is_err());
        assert!(gamma_pattern_for_dilation(&spec, 64).is_err());
    }
}
