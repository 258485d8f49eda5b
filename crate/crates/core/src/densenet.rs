//! Adaptive DenseNet backbone.
//!
//! Layout: stem (7×7/2 conv + 3×3/2 max pool) → four dense blocks separated
//! by three transitions. In the adaptive variant the third transition keeps
//! only its 1×1 conv (no pooling) and every conv of the fourth block is
//! dilated, giving an output stride of 16 instead of 32.
//!
//! Every convolution is followed by batch norm and ReLU (conv-bn-relu).

use std::fmt::Write as _;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormSpec, Conv2dSpec, RunningStats};
use crate::params::{BnUpdate, Forward, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetConfig {
    pub in_channels: usize,
    pub growth_rate: usize,
    pub block_sizes: Vec<usize>,
    pub init_channels: usize,
    /// Channel compression θ of the transitions, in (0, 1].
    pub compression: f64,
    pub use_bottleneck: bool,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_width: usize,
    /// Dilation of every conv in the fourth block.
    pub dilation_last_block: usize,
    /// Drop the pooling of the third transition.
    pub modified_transition: bool,
    pub drop_rate: f64,
}

impl DenseNetConfig {
    /// DenseNet-169 geometry adapted for stride 16; 1664 output channels.
    pub fn full() -> Self {
        DenseNetConfig {
            in_channels: 3,
            growth_rate: 32,
            block_sizes: vec![6, 12, 32, 32],
            init_channels: 64,
            compression: 0.5,
            use_bottleneck: true,
            bottleneck_width: 4,
            dilation_last_block: 2,
            modified_transition: true,
            drop_rate: 0.1,
        }
    }

    /// Small preset for desk-scale runs.
    pub fn toy() -> Self {
        DenseNetConfig {
            in_channels: 3,
            growth_rate: 4,
            block_sizes: vec![2, 2, 2, 2],
            init_channels: 8,
            compression: 1.0,
            use_bottleneck: false,
            bottleneck_width: 4,
            dilation_last_block: 2,
            modified_transition: true,
            drop_rate: 0.1,
        }
    }

    /// The same network with the third pool kept and no dilation (stride 32).
    pub fn unmodified(&self) -> Self {
        DenseNetConfig {
            dilation_last_block: 1,
            modified_transition: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.len() != 4 {
            return Err(Error::Config(format!(
                "backbone needs exactly 4 dense blocks, got {}",
                self.block_sizes.len()
            )));
        }
        if self.growth_rate == 0 || self.init_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression {} outside (0, 1]",
                self.compression
            )));
        }
        if self.dilation_last_block == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop rate {} outside [0, 1)", self.drop_rate)));
        }
        Ok(())
    }

    pub fn output_stride(&self) -> usize {
        if self.modified_transition {
            16
        } else {
            32
        }
    }

    /// Channel count entering and leaving each block, then the final count.
    pub fn channel_plan(&self) -> Vec<(usize, usize)> {
        let mut plan = Vec::with_capacity(4);
        let mut c = self.init_channels;
        for (i, &layers) in self.block_sizes.iter().enumerate() {
            let out = c + self.growth_rate * layers;
            plan.push((c, out));
            c = if i + 1 < self.block_sizes.len() {
                self.transition_channels(out)
            } else {
                out
            };
        }
        plan
    }

    fn transition_channels(&self, c: usize) -> usize {
        ((c as f64 * self.compression).floor() as usize).max(1)
    }

    pub fn out_channels(&self) -> usize {
        self.channel_plan().last().map_or(self.init_channels, |p| p.1)
    }
}

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    spec: BatchNormSpec,
}

impl BnLayer {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        BnLayer {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::Trainable, Tensor::ones(&[channels])),
            beta: store.add(format!("{prefix}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            var: store.add(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::ones(&[channels])),
            spec: BatchNormSpec::new(channels),
        }
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let store = f.store();
        let running = RunningStats {
            mean: store.get(self.mean).data().to_vec(),
            var: store.get(self.var).data().to_vec(),
        };
        let mode = f.mode();
        let (y, stats) = nn::batch_norm(&mut f.tape, x, gamma, beta, &self.spec, &running, mode)?;
        if let Some(stats) = stats {
            f.record_bn(BnUpdate {
                mean: self.mean,
                var: self.var,
                momentum: self.spec.momentum,
                stats,
            });
        }
        Ok(y)
    }
}

/// Convolution (no bias) → batch norm → ReLU.
#[derive(Clone, Debug)]
struct ConvBnRelu {
    weight: ParamId,
    spec: Conv2dSpec,
    bn: BnLayer,
}

impl ConvBnRelu {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: Conv2dSpec, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size;
        let w = Tensor::randn(&spec.weight_shape(), (2.0 / fan_in as f64).sqrt(), rng);
        ConvBnRelu {
            weight: store.add(format!("{prefix}.conv.weight"), ParamKind::Trainable, w),
            spec,
            bn: BnLayer::new(store, &format!("{prefix}.bn"), spec.out_channels),
        }
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = nn::conv2d(&mut f.tape, x, w, None, &self.spec)?;
        let y = self.bn.forward(f, y)?;
        Ok(f.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    bottleneck: Option<ConvBnRelu>,
    conv: ConvBnRelu,
}

#[derive(Clone, Debug)]
struct Transition {
    conv: ConvBnRelu,
    pool: bool,
}

/// Built backbone: layer specs plus the ids of their parameters in a store.
#[derive(Clone, Debug)]
pub struct DenseNet {
    cfg: DenseNetConfig,
    stem: ConvBnRelu,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
}

/// Registers the backbone's parameters under `prefix` with He-normal conv
/// weights and identity batch norms.
pub fn build_backbone<R: Rng + ?Sized>(
    cfg: &DenseNetConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) -> Result<DenseNet> {
    cfg.validate()?;
    let g = cfg.growth_rate;
    let stem = ConvBnRelu::new(
        store,
        &format!("{prefix}.stem"),
        Conv2dSpec {
            in_channels: cfg.in_channels,
            out_channels: cfg.init_channels,
            kernel_size: 7,
            stride: 2,
            padding: 3,
            dilation: 1,
        },
        rng,
    );
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    let plan = cfg.channel_plan();
    for (b, &(c_in, c_out)) in plan.iter().enumerate() {
        let dilation = if b == 3 { cfg.dilation_last_block } else { 1 };
        let mut layers = Vec::new();
        for l in 0..cfg.block_sizes[b] {
            let p = format!("{prefix}.block{}.layer{l}", b + 1);
            let c = c_in + l * g;
            let (bottleneck, c3) = if cfg.use_bottleneck {
                let width = cfg.bottleneck_width * g;
                let bn = ConvBnRelu::new(store, &format!("{p}.bottleneck"), Conv2dSpec::same(c, width, 1, 1), rng);
                (Some(bn), width)
            } else {
                (None, c)
            };
            let conv = ConvBnRelu::new(store, &p, Conv2dSpec::same(c3, g, 3, dilation), rng);
            layers.push(DenseLayer { bottleneck, conv });
        }
        blocks.push(layers);
        if b < 3 {
            let next = plan[b + 1].0;
            let conv = ConvBnRelu::new(
                store,
                &format!("{prefix}.transition{}", b + 1),
                Conv2dSpec::same(c_out, next, 1, 1),
                rng,
            );
            let pool = !(b == 2 && cfg.modified_transition);
            transitions.push(Transition { conv, pool });
        }
    }
    Ok(DenseNet {
        cfg: cfg.clone(),
        stem,
        blocks,
        transitions,
    })
}

impl DenseNet {
    pub fn config(&self) -> &DenseNetConfig {
        &self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels()
    }

    /// Feature maps `[N, C_out, H/stride, W/stride]`. Input sides must be
    /// multiples of 32 so both variants are well formed.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (_, c, h, w) = f.tape.value(x).dims4("densenet")?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "densenet",
                format!("input has {c} channels, expected {}", self.cfg.in_channels),
            ));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "densenet",
                format!("input {h}x{w} is not a multiple of 32"),
            ));
        }
        let mut y = self.stem.forward(f, x)?;
        y = nn::max_pool2d_padded(&mut f.tape, y, 3, 2, 1)?;
        for (b, layers) in self.blocks.iter().enumerate() {
            let mut features = vec![y];
            for layer in layers {
                let input = nn::concat_channels(&mut f.tape, &features)?;
                let mut z = input;
                if let Some(bn) = &layer.bottleneck {
                    z = bn.forward(f, z)?;
                }
                z = layer.conv.forward(f, z)?;
                if self.cfg.drop_rate > 0.0 {
                    let mode = f.mode();
                    z = nn::dropout(&mut f.tape, z, self.cfg.drop_rate, mode, &mut f.rng)?;
                }
                features.push(z);
            }
            y = nn::concat_channels(&mut f.tape, &features)?;
            if let Some(t) = self.transitions.get(b) {
                y = t.conv.forward(f, y)?;
                if t.pool {
                    y = nn::avg_pool2d(&mut f.tape, y, 2, 2)?;
                }
            }
        }
        Ok(y)
    }

    /// One line per layer, for logs.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stem: conv7x7/2 {}→{} + maxpool3x3/2", self.cfg.in_channels, self.cfg.init_channels);
        for (b, layers) in self.blocks.iter().enumerate() {
            let d = layers.first().map_or(1, |l| l.conv.spec.dilation);
            let _ = writeln!(s, "block{}: {} layers, growth {}, dilation {d}", b + 1, layers.len(), self.cfg.growth_rate);
            if let Some(t) = self.transitions.get(b) {
                let _ = writeln!(
                    s,
                    "transition{}: conv1x1 {}→{}{}",
                    b + 1,
                    t.conv.spec.in_channels,
                    t.conv.spec.out_channels,
                    if t.pool { " + avgpool2x2/2" } else { " (no pool)" }
                );
            }
        }
        s
    }
}

/// Output stride and receptive field after one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfEntry {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub output_stride: usize,
    pub receptive_field: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveFieldReport {
    pub layers: Vec<RfEntry>,
}

impl ReceptiveFieldReport {
    pub fn final_rf(&self) -> usize {
        self.layers.last().map_or(1, |l| l.receptive_field)
    }

    pub fn final_stride(&self) -> usize {
        self.layers.last().map_or(1, |l| l.output_stride)
    }

    pub fn get(&self, name: &str) -> Option<&RfEntry> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Analytic stride and receptive field of the deepest path, layer by layer:
/// `rf' = rf + d·(k-1)·stride_in`, `stride' = stride_in·s`.
pub fn receptive_field_report(cfg: &DenseNetConfig) -> Result<ReceptiveFieldReport> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut rf = 1;
    let mut jump = 1;
    let mut push = |name: String, k: usize, s: usize, d: usize, rf: &mut usize, jump: &mut usize| {
        *rf += d * (k - 1) * *jump;
        *jump *= s;
        layers.push(RfEntry {
            name,
            kernel: k,
            stride: s,
            dilation: d,
            output_stride: *jump,
            receptive_field: *rf,
        });
    };
    push("stem.conv".into(), 7, 2, 1, &mut rf, &mut jump);
    push("stem.pool".into(), 3, 2, 1, &mut rf, &mut jump);
    for (b, &n) in cfg.block_sizes.iter().enumerate() {
        let d = if b == 3 { cfg.dilation_last_block } else { 1 };
        for l in 0..n {
            if cfg.use_bottleneck {
                push(format!("block{}.layer{l}.bottleneck", b + 1), 1, 1, 1, &mut rf, &mut jump);
            }
            push(format!("block{}.layer{l}", b + 1), 3, 1, d, &mut rf, &mut jump);
        }
        if b < 3 {
            push(format!("transition{}.conv", b + 1), 1, 1, 1, &mut rf, &mut jump);
            if !(b == 2 && cfg.modified_transition) {
                push(format!("transition{}.pool", b + 1), 2, 2, 1, &mut rf, &mut jump);
            }
        }
    }
    Ok(ReceptiveFieldReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn channel_plan_matches_dense_growth() {
        let plan = DenseNetConfig::full().channel_plan();
        assert_eq!(plan, vec![(64, 256), (128, 512), (256, 1280), (640, 1664)]);
        assert_eq!(DenseNetConfig::full().out_channels(), 1664);
    }

    #[test]
    fn rejects_wrong_block_count() {
        let cfg = DenseNetConfig {
            block_sizes: vec![2, 2, 2],
            ..DenseNetConfig::toy()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_backbone(&cfg, &mut store, "b", &mut rng).is_err());
        assert!(receptive_field_report(&cfg).is_err());
    }

    #[test]
    fn stem_receptive_field() {
        let r = receptive_field_report(&DenseNetConfig::full()).unwrap();
        let stem = r.get("stem.conv").unwrap();
        assert_eq!((stem.receptive_field, stem.output_stride), (7, 2));
    }

    #[test]
    fn toy_forward_shapes_and_determinism() {
        let cfg = DenseNetConfig::toy();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = build_backbone(&cfg, &mut store, "backbone", &mut rng).unwrap();
        let x = Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        let both = Tensor::stack(&[x.clone().reshape(&[3, 64, 64]).unwrap(), x.reshape(&[3, 64, 64]).unwrap()]).unwrap();
        let mut f = Forward::new(&store, Mode::Eval, false, 0);
        let xv = f.input(both);
        let y = net.forward(&mut f, xv).unwrap();
        let out = f.tape.value(y);
        assert_eq!(out.shape(), &[2, cfg.out_channels(), 4, 4]);
        let half = out.numel() / 2;
        assert_eq!(out.data()[..half], out.data()[half..]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = DenseNetConfig::toy();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = build_backbone(&cfg, &mut store, "b", &mut rng).unwrap();
        let mut f = Forward::new(&store, Mode::Eval, false, 0);
        let xv = f.input(Tensor::zeros(&[1, 3, 48, 48]));
        assert!(net.forward(&mut f, xv).is_err());
    }
}
