//! Architecture descriptors, the name grammar used to refer to them, layer
//! graph construction and parameter counting.
//!
//! Name grammar: `family[.conv][.avg][.bin][.valW].blocks[.trunk[.filters]]`,
//! where `family` is `a0` or `mobile`. For `a0`, `.conv` selects the
//! post-activation residual block with the fully convolutional policy head.
//! For `mobile`, `.conv` selects the fully convolutional head. `small` may
//! stand in for the numeric part of the four reference configurations.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::encoder::PLANES;
use crate::goban::{MAX_SIZE, MIN_SIZE};

pub const VALUE_HIDDEN: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockFamily {
    /// conv-BN-ReLU-conv-BN, add, ReLU.
    AzResidual,
    /// conv-ReLU-conv-ReLU, add, BN.
    GoloisResidual,
    /// 1x1 expand, 3x3 depthwise, 1x1 squeeze, add.
    MobileBottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyHead {
    AzDense,
    FullyConvolutional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueHead {
    Gap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueLoss {
    Mse,
    Bce,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("cannot parse network name {0:?}: {1}")]
    Name(String, &'static str),
    #[error("invalid network: {0}")]
    Invalid(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub family: BlockFamily,
    pub blocks: usize,
    pub trunk: usize,
    /// Width inside mobile blocks; unused by residual families.
    pub expand: usize,
    pub policy_head: PolicyHead,
    pub value_head: ValueHead,
    pub input_planes: usize,
    pub board: usize,
    /// Label fields carried by the name; they select training options, not layers.
    pub avg: bool,
    pub value_loss: ValueLoss,
    pub value_weight: u32,
}

impl NetworkSpec {
    pub fn new(family: BlockFamily, blocks: usize, trunk: usize, expand: usize, policy_head: PolicyHead) -> NetworkSpec {
        NetworkSpec {
            family,
            blocks,
            trunk,
            expand,
            policy_head,
            value_head: ValueHead::Gap,
            input_planes: PLANES,
            board: 19,
            avg: true,
            value_loss: ValueLoss::Mse,
            value_weight: 1,
        }
    }

    pub fn with_board(mut self, board: usize) -> NetworkSpec {
        self.board = board;
        self
    }

    pub fn points(&self) -> usize {
        self.board * self.board
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.blocks == 0 {
            return Err(SpecError::Invalid("at least one block required"));
        }
        if self.trunk == 0 {
            return Err(SpecError::Invalid("trunk width must be positive"));
        }
        if self.family == BlockFamily::MobileBottleneck && self.expand == 0 {
            return Err(SpecError::Invalid("expand width must be positive"));
        }
        if self.input_planes == 0 {
            return Err(SpecError::Invalid("input planes must be positive"));
        }
        if !(MIN_SIZE..=MAX_SIZE).contains(&self.board) {
            return Err(SpecError::Invalid("board size out of range"));
        }
        if self.value_weight == 0 {
            return Err(SpecError::Invalid("value weight must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count. Batch norm counts four values per channel.
    pub fn count_params(&self) -> usize {
        let t = self.trunk;
        let e = self.expand;
        let s = self.points();
        let bn = |c: usize| 4 * c;
        let conv = |k: usize, cin: usize, cout: usize, bias: bool| k * k * cin * cout + if bias { cout } else { 0 };
        let stem = conv(1, self.input_planes, t, true) + bn(t);
        let block = match self.family {
            BlockFamily::AzResidual => 2 * conv(3, t, t, true) + 2 * bn(t),
            BlockFamily::GoloisResidual => 2 * conv(3, t, t, true) + bn(t),
            BlockFamily::MobileBottleneck => conv(1, t, e, false) + bn(e) + 9 * e + bn(e) + conv(1, e, t, false) + bn(t),
        };
        let policy = match self.policy_head {
            PolicyHead::AzDense => conv(1, t, 2, true) + bn(2) + 2 * s * s + s,
            PolicyHead::FullyConvolutional => conv(1, t, 1, false),
        };
        let value = t * VALUE_HIDDEN + VALUE_HIDDEN + VALUE_HIDDEN + 1;
        stem + self.blocks * block + policy + value
    }

    /// Canonical name; widths always spelled out as blocks.trunk[.filters].
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Parses a network name; the board defaults to 19.
    pub fn parse(name: &str) -> Result<NetworkSpec, SpecError> {
        name.parse()
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match self.family {
            BlockFamily::MobileBottleneck => "mobile",
            _ => "a0",
        };
        write!(f, "{}", family)?;
        if self.policy_head == PolicyHead::FullyConvolutional {
            write!(f, ".conv")?;
        }
        if self.avg {
            write!(f, ".avg")?;
        }
        if self.value_loss == ValueLoss::Bce {
            write!(f, ".bin")?;
        }
        if self.value_weight != 1 {
            write!(f, ".val{}", self.value_weight)?;
        }
        write!(f, ".{}.{}", self.blocks, self.trunk)?;
        if self.family == BlockFamily::MobileBottleneck {
            write!(f, ".{}", self.expand)?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = SpecError;

    fn from_str(name: &str) -> Result<NetworkSpec, SpecError> {
        let bad = |why| SpecError::Name(name.to_string(), why);
        let mut parts = name.split('.');
        let mobile = match parts.next() {
            Some("a0") => false,
            Some("mobile") => true,
            _ => return Err(bad("family must be a0 or mobile")),
        };
        let (mut conv, mut avg, mut bin, mut weight) = (false, false, false, 1u32);
        let mut numbers = Vec::new();
        let mut small = false;
        for part in parts {
            if !numbers.is_empty() {
                numbers.push(part.parse::<usize>().map_err(|_| bad("expected a width"))?);
                continue;
            }
            match part {
                "conv" if !conv && ((!avg && !bin && weight == 1) || small) => conv = true,
                "avg" if !avg && !bin && weight == 1 => avg = true,
                "bin" if !bin && weight == 1 => bin = true,
                "small" if !small => small = true,
                p if p.starts_with("val") && weight == 1 => {
                    weight = p[3..].parse().map_err(|_| bad("bad value weight"))?;
                    if weight == 0 {
                        return Err(bad("value weight must be positive"));
                    }
                }
                p => numbers.push(p.parse::<usize>().map_err(|_| bad("unexpected label"))?),
            }
        }
        let family = match (mobile, conv) {
            (true, _) => BlockFamily::MobileBottleneck,
            (false, true) => BlockFamily::GoloisResidual,
            (false, false) => BlockFamily::AzResidual,
        };
        let head = if conv { PolicyHead::FullyConvolutional } else { PolicyHead::AzDense };
        let (blocks, trunk, expand) = if small {
            if !numbers.is_empty() {
                return Err(bad("small takes no widths"));
            }
            match (mobile, conv) {
                (false, false) => (10, 63, 0),
                (false, true) => (13, 64, 0),
                (true, false) => (25, 64, 200),
                (true, true) => (33, 64, 200),
            }
        } else if mobile {
            match numbers[..] {
                [b] => (b, 128, 512),
                [b, t] => (b, t, 4 * t),
                // The narrower width is the trunk whichever order it is written in.
                [b, x, y] => (b, x.min(y), x.max(y)),
                _ => return Err(bad("mobile takes blocks[.trunk[.filters]]")),
            }
        } else {
            match numbers[..] {
                [b] => (b, 256, 0),
                [b, t] => (b, t, 0),
                _ => return Err(bad("a0 takes blocks[.width]")),
            }
        };
        let spec = NetworkSpec {
            avg,
            value_loss: if bin { ValueLoss::Bce } else { ValueLoss::Mse },
            value_weight: weight,
            ..NetworkSpec::new(family, blocks, trunk, expand, head)
        };
        spec.validate().map_err(|_| bad("widths and depth must be positive"))?;
        Ok(spec)
    }
}

/// Activation shape: `channels` rows, each either a full board plane or a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub spatial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Input,
    Conv {
        kernel: usize,
        cin: usize,
        cout: usize,
        bias: bool,
    },
    Depthwise {
        kernel: usize,
        channels: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Add,
    GlobalAvgPool,
    /// Plane-major flatten: feature index = channel * points + point.
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Softmax,
    Sigmoid,
}

impl Op {
    /// Stored values including batch-norm running statistics.
    pub fn param_count(&self) -> usize {
        match *self {
            Op::Conv { kernel, cin, cout, bias } => kernel * kernel * cin * cout + if bias { cout } else { 0 },
            Op::Depthwise { kernel, channels } => kernel * kernel * channels,
            Op::BatchNorm { channels } => 4 * channels,
            Op::Dense { inputs, outputs, bias } => inputs * outputs + if bias { outputs } else { 0 },
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub shape: Shape,
}

/// Topologically ordered layers; every input index precedes its consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGraph {
    pub layers: Vec<Layer>,
    pub policy: usize,
    pub value: usize,
    pub points: usize,
}

impl LayerGraph {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.op.param_count()).sum()
    }

    pub fn count(&self, pred: impl Fn(&Op) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(&l.op)).count()
    }

    /// Checks shapes at every junction and layer; returns the first fault.
    pub fn check(&self) -> Result<(), String> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs.iter().any(|&j| j >= i) {
                return Err(format!("layer {} reads a later layer", i));
            }
            let ins: Vec<Shape> = l.inputs.iter().map(|&j| self.layers[j].shape).collect();
            let ok = match l.op {
                Op::Input => ins.is_empty() && l.shape.spatial,
                Op::Conv { cin, cout, .. } => ins == [Shape { channels: cin, spatial: true }] && l.shape == Shape { channels: cout, spatial: true },
                Op::Depthwise { channels, .. } | Op::BatchNorm { channels } => ins.len() == 1 && ins[0].channels == channels && l.shape == ins[0],
                Op::Relu | Op::Softmax | Op::Sigmoid => ins.len() == 1 && l.shape == ins[0],
                Op::Add => ins.len() == 2 && ins[0] == ins[1] && l.shape == ins[0],
                Op::GlobalAvgPool => {
                    ins.len() == 1
                        && ins[0].spatial
                        && l.shape
                            == Shape {
                                channels: ins[0].channels,
                                spatial: false,
                            }
                }
                Op::Flatten => {
                    ins.len() == 1
                        && ins[0].spatial
                        && l.shape
                            == Shape {
                                channels: ins[0].channels * self.points,
                                spatial: false,
                            }
                }
                Op::Dense { inputs, outputs, .. } => {
                    ins == [Shape {
                        channels: inputs,
                        spatial: false,
                    }] && l.shape
                        == Shape {
                            channels: outputs,
                            spatial: false,
                        }
                }
            };
            if !ok {
                return Err(format!("shape mismatch at layer {} ({:?})", i, l.op));
            }
        }
        if self.layers[self.policy].shape
            != (Shape {
                channels: self.points,
                spatial: false,
            })
        {
            return Err("policy output width".into());
        }
        if self.layers[self.value].shape != (Shape { channels: 1, spatial: false }) {
            return Err("value output width".into());
        }
        Ok(())
    }
}

struct Builder {
    layers: Vec<Layer>,
    points: usize,
}

impl Builder {
    fn push(&mut self, op: Op, input: usize) -> usize {
        let prev = self.layers[input].shape;
        let shape = match op {
            Op::Conv { cout, .. } => Shape { channels: cout, spatial: true },
            Op::GlobalAvgPool => Shape {
                channels: prev.channels,
                spatial: false,
            },
            Op::Flatten => Shape {
                channels: prev.channels * self.points,
                spatial: false,
            },
            Op::Dense { outputs, .. } => Shape {
                channels: outputs,
                spatial: false,
            },
            _ => prev,
        };
        self.layers.push(Layer {
            op,
            inputs: vec![input],
            shape,
        });
        self.layers.len() - 1
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let shape = self.layers[a].shape;
        self.layers.push(Layer {
            op: Op::Add,
            inputs: vec![a, b],
            shape,
        });
        self.layers.len() - 1
    }

    fn conv(&mut self, x: usize, kernel: usize, cout: usize, bias: bool) -> usize {
        let cin = self.layers[x].shape.channels;
        self.push(Op::Conv { kernel, cin, cout, bias }, x)
    }

    fn bn(&mut self, x: usize) -> usize {
        let channels = self.layers[x].shape.channels;
        self.push(Op::BatchNorm { channels }, x)
    }

    fn dense(&mut self, x: usize, outputs: usize) -> usize {
        let inputs = self.layers[x].shape.channels;
        self.push(Op::Dense { inputs, outputs, bias: true }, x)
    }
}

pub fn build_graph(spec: &NetworkSpec) -> Result<LayerGraph, SpecError> {
    spec.validate()?;
    let t = spec.trunk;
    let points = spec.points();
    let mut g = Builder {
        layers: vec![Layer {
            op: Op::Input,
            inputs: vec![],
            shape: Shape {
                channels: spec.input_planes,
                spatial: true,
            },
        }],
        points,
    };
    let mut x = g.conv(0, 1, t, true);
    x = g.bn(x);
    x = g.push(Op::Relu, x);
    for _ in 0..spec.blocks {
        let input = x;
        x = match spec.family {
            BlockFamily::AzResidual => {
                let mut y = g.conv(input, 3, t, true);
                y = g.bn(y);
                y = g.push(Op::Relu, y);
                y = g.conv(y, 3, t, true);
                y = g.bn(y);
                let y = g.add(y, input);
                g.push(Op::Relu, y)
            }
            BlockFamily::GoloisResidual => {
                let mut y = g.conv(input, 3, t, true);
                y = g.push(Op::Relu, y);
                y = g.conv(y, 3, t, true);
                y = g.push(Op::Relu, y);
                let y = g.add(y, input);
                g.bn(y)
            }
            BlockFamily::MobileBottleneck => {
                let mut y = g.conv(input, 1, spec.expand, false);
                y = g.bn(y);
                y = g.push(Op::Relu, y);
                y = g.push(
                    Op::Depthwise {
                        kernel: 3,
                        channels: spec.expand,
                    },
                    y,
                );
                y = g.bn(y);
                y = g.push(Op::Relu, y);
                y = g.conv(y, 1, t, false);
                y = g.bn(y);
                g.add(y, input)
            }
        };
    }
    let trunk = x;
    let policy = match spec.policy_head {
        PolicyHead::AzDense => {
            let mut p = g.conv(trunk, 1, 2, true);
            p = g.bn(p);
            p = g.push(Op::Relu, p);
            p = g.push(Op::Flatten, p);
            p = g.dense(p, points);
            g.push(Op::Softmax, p)
        }
        PolicyHead::FullyConvolutional => {
            let mut p = g.conv(trunk, 1, 1, false);
            p = g.push(Op::Relu, p);
            p = g.push(Op::Flatten, p);
            g.push(Op::Softmax, p)
        }
    };
    let ValueHead::Gap = spec.value_head;
    let mut v = g.push(Op::GlobalAvgPool, trunk);
    v = g.dense(v, VALUE_HIDDEN);
    v = g.push(Op::Relu, v);
    v = g.dense(v, 1);
    let value = g.push(Op::Sigmoid, v);
    Ok(LayerGraph {
        layers: g.layers,
        policy,
        value,
        points,
    })
}

pub fn count_params(spec: &NetworkSpec) -> usize {
    spec.count_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_counts() {
        for (name, count) in [
            ("mobile.small.conv", 970_477),
            ("a0.small", 986_748),
            ("a0.small.conv", 968_485),
            ("mobile.small", 997_506),
        ] {
            let spec = NetworkSpec::parse(name).unwrap();
            assert_eq!(spec.count_params(), count, "{}", name);
            assert_eq!(build_graph(&spec).unwrap().param_count(), count, "{}", name);
        }
    }

    #[test]
    fn aliases_resolve() {
        let s = NetworkSpec::parse("a0.small.conv").unwrap();
        assert_eq!(
            (s.family, s.blocks, s.trunk, s.policy_head),
            (BlockFamily::GoloisResidual, 13, 64, PolicyHead::FullyConvolutional)
        );
        let s = NetworkSpec::parse("mobile.small").unwrap();
        assert_eq!(
            (s.family, s.blocks, s.trunk, s.expand, s.policy_head),
            (BlockFamily::MobileBottleneck, 25, 64, 200, PolicyHead::AzDense)
        );
        let s = NetworkSpec::parse("mobile.conv.avg.bin.33.200.64").unwrap();
        assert_eq!((s.blocks, s.trunk, s.expand), (33, 64, 200));
        assert_eq!(s.count_params(), 970_477);
        assert_eq!(s.name(), "mobile.conv.avg.bin.33.64.200");
        assert_eq!(NetworkSpec::parse("mobile.val4.40.512.128").unwrap().name(), "mobile.val4.40.128.512");
        assert_eq!(NetworkSpec::parse("a0.7").unwrap().trunk, 256);
    }

    #[test]
    fn table_names_round_trip() {
        for name in [
            "a0.20.256",
            "a0.8.66",
            "a0.conv.avg.bin.val4.13.64",
            "mobile.conv.avg.bin.40.128.512",
            "mobile.conv.avg.bin.val4.33.64.200",
            "mobile.avg.16.128.384",
        ] {
            assert_eq!(NetworkSpec::parse(name).unwrap().name(), name);
        }
    }

    #[test]
    fn bad_names() {
        for name in [
            "",
            "resnet.10",
            "a0",
            "a0.conv",
            "a0.10.64.128",
            "mobile.1.2.3.4",
            "a0.val0.5",
            "a0.0.64",
            "mobile.avg.conv.5",
            "a0.small.3",
        ] {
            assert!(NetworkSpec::parse(name).is_err(), "{}", name);
        }
    }

    #[test]
    fn junction_counts() {
        let g = build_graph(&NetworkSpec::parse("mobile.small.conv").unwrap()).unwrap();
        assert_eq!(g.count(|o| *o == Op::Add), 33);
        assert_eq!(g.count(|o| *o == Op::Softmax), 1);
        assert_eq!(g.layers[g.policy].shape.channels, 361);
        assert!(g.check().is_ok());
        let g = build_graph(&NetworkSpec::parse("a0.small").unwrap()).unwrap();
        assert_eq!(g.count(|o| *o == Op::Add), 10);
        let g = build_graph(&NetworkSpec::parse("a0.conv.6.32").unwrap().with_board(9)).unwrap();
        assert_eq!(g.layers[g.policy].shape.channels, 81);
        assert!(g.check().is_ok());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = NetworkSpec::new(BlockFamily::MobileBottleneck, 3, 16, 0, PolicyHead::AzDense);
        assert!(build_graph(&s).is_err());
        s.expand = 48;
        s.board = 25;
        assert!(build_graph(&s).is_err());
    }

    fn arb_spec() -> impl Strategy<Value = NetworkSpec> {
        (0..3usize, 1..12usize, 1..80usize, 1..260usize, any::<bool>(), 5..=19usize).prop_map(|(f, b, t, e, conv, board)| {
            let family = [BlockFamily::AzResidual, BlockFamily::GoloisResidual, BlockFamily::MobileBottleneck][f];
            let head = if conv { PolicyHead::FullyConvolutional } else { PolicyHead::AzDense };
            NetworkSpec::new(family, b, t, e, head).with_board(board)
        })
    }

    proptest! {
        #[test]
        fn closed_form_matches_graph(spec in arb_spec()) {
            let g = build_graph(&spec).unwrap();
            prop_assert!(g.check().is_ok());
            prop_assert_eq!(g.param_count(), spec.count_params());
        }
    }
}
