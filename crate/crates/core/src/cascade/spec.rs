use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::LayerSpec;

/// Upper bound on any integer field of a textual spec.
pub const MAX_DIM: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentSpec {
    /// This component's segment of the shared convolutional trunk.
    pub trunk: Vec<LayerSpec>,
    /// Branch head reading the trunk output; ends in a fully connected
    /// layer with `num_classes` outputs.
    pub classifier: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CascadeSpec {
    /// Per-sample input shape `(C, H, W)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub blocks_per_module: usize,
    pub components: Vec<ComponentSpec>,
}

/// Parameters of the ResNet-style three-component cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub base_width: usize,
    pub blocks_per_module: usize,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Adds a 1×1 expansion to `4·base_width` channels (with batch norm and
    /// ReLU) in front of the pooling of every branch classifier.
    pub enhanced_classifiers: bool,
    pub batch_norm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// `w₀ = 8`, one block per module.
    Mini,
    /// `w₀ = 16`, two blocks per module.
    Small,
    /// `w₀ = 32`, eighteen blocks per module. Far beyond a CPU budget.
    Deep,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Mini, Preset::Small, Preset::Deep];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mini => "mini",
            Preset::Small => "small",
            Preset::Deep => "deep",
        }
    }

    pub fn arch(self, input_shape: [usize; 3], num_classes: usize) -> ArchConfig {
        let (base_width, blocks_per_module) = match self {
            Preset::Mini => (8, 1),
            Preset::Small => (16, 2),
            Preset::Deep => (32, 18),
        };
        ArchConfig {
            base_width,
            blocks_per_module,
            input_shape,
            num_classes,
            enhanced_classifiers: true,
            batch_norm: true,
        }
    }

    pub fn spec(self, input_shape: [usize; 3], num_classes: usize) -> CascadeSpec {
        CascadeSpec::resnet(&self.arch(input_shape, num_classes))
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (expected mini, small or deep)")))
    }
}

impl CascadeSpec {
    /// Initial 3×3 convolution, then three modules of residual blocks with
    /// widths `(w₀, 2w₀, 4w₀)`; modules 2 and 3 open with a stride-2 block.
    /// Each module is one component; the first two carry branch classifiers.
    pub fn resnet(cfg: &ArchConfig) -> CascadeSpec {
        let w0 = cfg.base_width;
        let n = cfg.blocks_per_module.max(1);
        let bn = cfg.batch_norm;
        let widths = [w0, 2 * w0, 4 * w0];
        let mut components = Vec::with_capacity(3);
        for (m, &width) in widths.iter().enumerate() {
            let mut trunk = Vec::new();
            if m == 0 {
                trunk.push(LayerSpec::conv(cfg.input_shape[0], w0, 3, 1, 1));
                if bn {
                    trunk.push(LayerSpec::BatchNorm { channels: w0 });
                }
                trunk.push(LayerSpec::Relu);
                trunk.extend((0..n).map(|_| LayerSpec::ResidualBlock { channels: w0, batch_norm: bn }));
            } else {
                trunk.push(LayerSpec::ResidualBlockDown {
                    in_channels: widths[m - 1],
                    out_channels: width,
                    batch_norm: bn,
                });
                trunk.extend((1..n).map(|_| LayerSpec::ResidualBlock { channels: width, batch_norm: bn }));
            }
            let last = m == widths.len() - 1;
            let mut classifier = Vec::new();
            let mut features = width;
            if cfg.enhanced_classifiers && !last {
                classifier.push(LayerSpec::conv(width, 4 * w0, 1, 1, 0));
                if bn {
                    classifier.push(LayerSpec::BatchNorm { channels: 4 * w0 });
                }
                classifier.push(LayerSpec::Relu);
                features = 4 * w0;
            }
            classifier.push(LayerSpec::GlobalAvgPool);
            classifier.push(LayerSpec::fc(features, cfg.num_classes));
            components.push(ComponentSpec { trunk, classifier });
        }
        CascadeSpec {
            input_shape: cfg.input_shape,
            num_classes: cfg.num_classes,
            blocks_per_module: n,
            components,
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Checks shape consistency of the trunk chain and every classifier.
    /// Returns the per-sample trunk output shape of every component.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.components.is_empty() {
            return Err(Error::InvalidSpec("cascade needs at least one component".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_shape.iter().any(|&d| d == 0 || d > MAX_DIM) {
            return Err(Error::InvalidSpec(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.to_vec();
        let mut producer = "input".to_string();
        let mut outputs = Vec::with_capacity(self.components.len());
        for (m, comp) in self.components.iter().enumerate() {
            for (i, layer) in comp.trunk.iter().enumerate() {
                shape = layer.output_shape(&shape).map_err(|e| {
                    Error::InvalidSpec(format!(
                        "component {m} trunk layer {i} ({}) cannot follow {producer}: {e}",
                        layer.name()
                    ))
                })?;
                producer = format!("component {m} trunk layer {i} ({}) producing {shape:?}", layer.name());
            }
            outputs.push(shape.clone());
            let mut head = shape.clone();
            let mut head_producer = producer.clone();
            for (i, layer) in comp.classifier.iter().enumerate() {
                head = layer.output_shape(&head).map_err(|e| {
                    Error::InvalidSpec(format!(
                        "component {m} classifier layer {i} ({}) cannot follow {head_producer}: {e}",
                        layer.name()
                    ))
                })?;
                head_producer = format!("component {m} classifier layer {i} ({})", layer.name());
            }
            match comp.classifier.last() {
                Some(LayerSpec::FullyConnected { out_features, .. }) if *out_features == self.num_classes => {}
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "component {m} classifier must end in a fully connected layer with {} outputs",
                        self.num_classes
                    )))
                }
            }
            debug_assert_eq!(head, vec![self.num_classes]);
        }
        Ok(outputs)
    }

    /// Canonical text form; [`CascadeSpec::parse`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::from("cscd-spec 1\n");
        let [c, h, w] = self.input_shape;
        let _ = writeln!(s, "input {c} {h} {w}");
        let _ = writeln!(s, "classes {}", self.num_classes);
        let _ = writeln!(s, "blocks_per_module {}", self.blocks_per_module);
        for comp in &self.components {
            s.push_str("component\n");
            for l in &comp.trunk {
                let _ = writeln!(s, "trunk {}", layer_text(l));
            }
            for l in &comp.classifier {
                let _ = writeln!(s, "classifier {}", layer_text(l));
            }
        }
        s
    }

    /// Parses the canonical text form. Blank lines and `#` comments are
    /// ignored. The result is not validated.
    pub fn parse(text: &str) -> Result<CascadeSpec> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let bad = |n: usize, msg: &str| Error::InvalidSpec(format!("line {n}: {msg}"));

        match lines.next() {
            Some((_, "cscd-spec 1")) => {}
            Some((n, _)) => return Err(bad(n, "expected header `cscd-spec 1`")),
            None => return Err(Error::InvalidSpec("empty spec".into())),
        }
        let mut input = None;
        let mut classes = None;
        let mut blocks = 1;
        let mut components: Vec<ComponentSpec> = Vec::new();
        for (n, line) in lines {
            let mut tok = line.split_whitespace();
            let key = tok.next().unwrap_or_default();
            let rest: Vec<&str> = tok.collect();
            match key {
                "input" => {
                    let v = ints(&rest, 3).map_err(|m| bad(n, &m))?;
                    input = Some([v[0], v[1], v[2]]);
                }
                "classes" => classes = Some(ints(&rest, 1).map_err(|m| bad(n, &m))?[0]),
                "blocks_per_module" => blocks = ints(&rest, 1).map_err(|m| bad(n, &m))?[0],
                "component" => {
                    if !rest.is_empty() {
                        return Err(bad(n, "`component` takes no arguments"));
                    }
                    components.push(ComponentSpec {
                        trunk: Vec::new(),
                        classifier: Vec::new(),
                    });
                }
                "trunk" | "classifier" => {
                    let layer = parse_layer(&rest).map_err(|m| bad(n, &m))?;
                    let Some(comp) = components.last_mut() else {
                        return Err(bad(n, "layer before the first `component`"));
                    };
                    if key == "trunk" {
                        if !comp.classifier.is_empty() {
                            return Err(bad(n, "trunk layer after classifier layers"));
                        }
                        comp.trunk.push(layer);
                    } else {
                        comp.classifier.push(layer);
                    }
                }
                other => return Err(bad(n, &format!("unknown directive `{other}`"))),
            }
        }
        Ok(CascadeSpec {
            input_shape: input.ok_or_else(|| Error::InvalidSpec("missing `input`".into()))?,
            num_classes: classes.ok_or_else(|| Error::InvalidSpec("missing `classes`".into()))?,
            blocks_per_module: blocks,
            components,
        })
    }
}

fn layer_text(l: &LayerSpec) -> String {
    let flag = |bn: bool| if bn { "bn" } else { "nobn" };
    match *l {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => format!("conv2d {in_channels} {out_channels} {kernel_h} {kernel_w} {stride} {padding}"),
        LayerSpec::BatchNorm { channels } => format!("batchnorm {channels}"),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::ResidualBlock { channels, batch_norm } => format!("resblock {channels} {}", flag(batch_norm)),
        LayerSpec::ResidualBlockDown {
            in_channels,
            out_channels,
            batch_norm,
        } => format!("resblock_down {in_channels} {out_channels} {}", flag(batch_norm)),
        LayerSpec::GlobalAvgPool => "gap".into(),
        LayerSpec::FullyConnected {
            in_features,
            out_features,
        } => format!("fc {in_features} {out_features}"),
    }
}

fn ints(tokens: &[&str], count: usize) -> std::result::Result<Vec<usize>, String> {
    if tokens.len() != count {
        return Err(format!("expected {count} integers, got {}", tokens.len()));
    }
    tokens
        .iter()
        .map(|t| match t.parse::<usize>() {
            Ok(v) if v <= MAX_DIM => Ok(v),
            Ok(v) => Err(format!("{v} exceeds {MAX_DIM}")),
            Err(_) => Err(format!("`{t}` is not a non-negative integer")),
        })
        .collect()
}

fn parse_layer(tokens: &[&str]) -> std::result::Result<LayerSpec, String> {
    let Some((&kind, args)) = tokens.split_first() else {
        return Err("missing layer kind".into());
    };
    let bn_flag = |t: &str| match t {
        "bn" => Ok(true),
        "nobn" => Ok(false),
        other => Err(format!("expected `bn` or `nobn`, got `{other}`")),
    };
    let positive = |v: &[usize]| {
        if v.iter().any(|&x| x == 0) {
            Err("dimensions must be positive".to_string())
        } else {
            Ok(())
        }
    };
    Ok(match kind {
        "conv2d" => {
            let v = ints(args, 6)?;
            positive(&v[..5])?;
            LayerSpec::Conv2d {
                in_channels: v[0],
                out_channels: v[1],
                kernel_h: v[2],
                kernel_w: v[3],
                stride: v[4],
                padding: v[5],
            }
        }
        "batchnorm" => {
            let v = ints(args, 1)?;
            positive(&v)?;
            LayerSpec::BatchNorm { channels: v[0] }
        }
        "relu" => {
            ints(args, 0)?;
            LayerSpec::Relu
        }
        "gap" => {
            ints(args, 0)?;
            LayerSpec::GlobalAvgPool
        }
        "fc" => {
            let v = ints(args, 2)?;
            positive(&v)?;
            LayerSpec::fc(v[0], v[1])
        }
        "resblock" => {
            let (flag, nums) = args.split_last().ok_or("missing arguments")?;
            let v = ints(nums, 1)?;
            positive(&v)?;
            LayerSpec::ResidualBlock {
                channels: v[0],
                batch_norm: bn_flag(flag)?,
            }
        }
        "resblock_down" => {
            let (flag, nums) = args.split_last().ok_or("missing arguments")?;
            let v = ints(nums, 2)?;
            positive(&v)?;
            LayerSpec::ResidualBlockDown {
                in_channels: v[0],
                out_channels: v[1],
                batch_norm: bn_flag(flag)?,
            }
        }
        other => return Err(format!("unknown layer kind `{other}`")),
    })
}
