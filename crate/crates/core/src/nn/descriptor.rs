//! Declarative layer lists for the large model families, used for exact
//! parameter accounting. These are never trained.
//!
//! Convolutions and pools use "same" padding: a stride-`s` layer maps a
//! spatial side `h` to `ceil(h / s)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "VGG16")]
    Vgg16,
    #[serde(rename = "VGG19")]
    Vgg19,
    #[serde(rename = "ResNet50")]
    ResNet50,
    #[serde(rename = "ResNet152")]
    ResNet152,
    #[serde(rename = "CustomCNN")]
    CustomCnn,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Vgg16,
        Family::Vgg19,
        Family::ResNet50,
        Family::ResNet152,
        Family::CustomCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Vgg16 => "VGG16",
            Family::Vgg19 => "VGG19",
            Family::ResNet50 => "ResNet50",
            Family::ResNet152 => "ResNet152",
            Family::CustomCnn => "CustomCNN",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| NnError::UnknownFamily(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv { kernel: usize, filters: usize, stride: usize },
    DepthwiseConv { kernel: usize, stride: usize },
    MaxPool { size: usize, stride: usize },
    /// Global average pooling to a flat channel vector.
    AvgPool,
    Flatten,
    Dense { units: usize },
    Dropout { rate: f64 },
    BatchNorm,
    /// `count` bottleneck blocks (1×1 → 3×3 → 1×1, each batch-normalised);
    /// the first block carries the stride and a projection shortcut.
    ResidualBottleneck { mid: usize, out: usize, stride: usize, count: usize },
    Activation { kind: Activation },
}

impl Layer {
    fn conv(kernel: usize, filters: usize, stride: usize) -> Self {
        Layer::Conv { kernel, filters, stride }
    }

    pub fn is_conv_type(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::DepthwiseConv { .. })
    }
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub family: Family,
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

fn same(side: usize, stride: usize) -> usize {
    side.div_ceil(stride)
}

fn vgg_layers(blocks: &[(usize, usize)]) -> Vec<Layer> {
    let mut layers = Vec::new();
    for &(convs, filters) in blocks {
        layers.extend((0..convs).map(|_| Layer::conv(3, filters, 1)));
        layers.push(Layer::MaxPool { size: 2, stride: 2 });
    }
    layers.extend([
        Layer::Flatten,
        Layer::Dense { units: 4096 },
        Layer::Dense { units: 4096 },
        Layer::Dense { units: 1000 },
        Layer::Activation { kind: Activation::Softmax },
    ]);
    layers
}

fn resnet_layers(stage_counts: [usize; 4]) -> Vec<Layer> {
    let mut layers = vec![
        Layer::conv(7, 64, 2),
        Layer::BatchNorm,
        Layer::Activation { kind: Activation::Relu },
        Layer::MaxPool { size: 3, stride: 2 },
    ];
    let stages = [(64, 256, 1), (128, 512, 2), (256, 1024, 2), (512, 2048, 2)];
    for ((mid, out, stride), count) in stages.into_iter().zip(stage_counts) {
        layers.push(Layer::ResidualBottleneck { mid, out, stride, count });
    }
    layers.extend([
        Layer::AvgPool,
        Layer::Dense { units: 1000 },
        Layer::Activation { kind: Activation::Softmax },
    ]);
    layers
}

fn custom_cnn_layers() -> Vec<Layer> {
    let mut layers = vec![
        Layer::conv(3, 64, 1),
        Layer::conv(3, 64, 1),
        Layer::MaxPool { size: 2, stride: 2 },
        Layer::conv(3, 128, 1),
        Layer::conv(3, 128, 1),
        Layer::MaxPool { size: 2, stride: 2 },
    ];
    // Depthwise + pointwise pairs, two per block.
    for channels in [128, 256, 512] {
        for _ in 0..2 {
            layers.push(Layer::DepthwiseConv { kernel: 3, stride: 1 });
            layers.push(Layer::conv(1, channels, 1));
        }
        layers.push(Layer::MaxPool { size: 2, stride: 2 });
    }
    layers.extend([
        Layer::Flatten,
        Layer::Dense { units: 4096 },
        Layer::Dropout { rate: 0.5 },
        Layer::Dense { units: 4096 },
        Layer::Dropout { rate: 0.5 },
        Layer::Dense { units: 1 },
        Layer::Activation { kind: Activation::Sigmoid },
    ]);
    layers
}

impl ArchitectureDescriptor {
    pub fn build(family: Family) -> Self {
        let (input_shape, layers) = match family {
            Family::Vgg16 => (
                (224, 224, 3),
                vgg_layers(&[(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]),
            ),
            Family::Vgg19 => (
                (224, 224, 3),
                vgg_layers(&[(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)]),
            ),
            Family::ResNet50 => ((224, 224, 3), resnet_layers([3, 4, 6, 3])),
            Family::ResNet152 => ((224, 224, 3), resnet_layers([3, 8, 36, 3])),
            Family::CustomCnn => ((128, 128, 1), custom_cnn_layers()),
        };
        ArchitectureDescriptor {
            family,
            input_shape,
            layers,
        }
    }

    pub fn count_layers(&self, pred: impl Fn(&Layer) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(l)).count()
    }

    /// Output shape after every layer, failing on the first invalid one.
    pub fn propagate(&self) -> Result<Vec<Shape>, NnError> {
        Ok(self.walk()?.into_iter().map(|(shape, _)| shape).collect())
    }

    /// Exact trainable parameter count (batch-norm scale and shift
    /// included, running statistics excluded).
    pub fn param_count(&self) -> Result<u64, NnError> {
        Ok(self.walk()?.into_iter().map(|(_, params)| params).sum())
    }

    fn walk(&self) -> Result<Vec<(Shape, u64)>, NnError> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(NnError::InvalidShape(format!("input {:?}", self.input_shape)));
        }
        let mut shape = Shape::Spatial { h, w, c };
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let bad = |why: &str| NnError::InvalidShape(format!("layer {index} ({layer:?}): {why}"));
            let (next, params) = match (*layer, shape) {
                (Layer::Conv { kernel, filters, stride }, Shape::Spatial { h, w, c }) => {
                    if kernel == 0 || filters == 0 || stride == 0 {
                        return Err(bad("zero-sized convolution"));
                    }
                    let params = ((kernel * kernel * c + 1) * filters) as u64;
                    (Shape::Spatial { h: same(h, stride), w: same(w, stride), c: filters }, params)
                }
                (Layer::DepthwiseConv { kernel, stride }, Shape::Spatial { h, w, c }) => {
                    if kernel == 0 || stride == 0 {
                        return Err(bad("zero-sized convolution"));
                    }
                    let params = ((kernel * kernel + 1) * c) as u64;
                    (Shape::Spatial { h: same(h, stride), w: same(w, stride), c }, params)
                }
                (Layer::MaxPool { size, stride }, Shape::Spatial { h, w, c }) => {
                    if size == 0 || stride == 0 {
                        return Err(bad("zero-sized pool"));
                    }
                    (Shape::Spatial { h: same(h, stride), w: same(w, stride), c }, 0)
                }
                (Layer::AvgPool, Shape::Spatial { c, .. }) => (Shape::Flat(c), 0),
                (Layer::Flatten, Shape::Spatial { h, w, c }) => (Shape::Flat(h * w * c), 0),
                (Layer::Flatten, flat @ Shape::Flat(_)) => (flat, 0),
                (Layer::Dense { units }, Shape::Flat(fan_in)) => {
                    if units == 0 {
                        return Err(bad("dense layer with no units"));
                    }
                    (Shape::Flat(units), ((fan_in + 1) * units) as u64)
                }
                (Layer::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad("dropout rate outside [0, 1)"));
                    }
                    (s, 0)
                }
                (Layer::Activation { .. }, s) => (s, 0),
                (Layer::BatchNorm, s) => {
                    let channels = match s {
                        Shape::Spatial { c, .. } => c,
                        Shape::Flat(n) => n,
                    };
                    (s, 2 * channels as u64)
                }
                (Layer::ResidualBottleneck { mid, out, stride, count }, Shape::Spatial { h, w, c }) => {
                    if mid == 0 || out == 0 || stride == 0 || count == 0 {
                        return Err(bad("degenerate bottleneck"));
                    }
                    let conv_bn = |k: usize, cin: usize, cout: usize| ((k * k * cin + 1) * cout + 2 * cout) as u64;
                    let mut params = 0;
                    let mut cin = c;
                    for block in 0..count {
                        params += conv_bn(1, cin, mid) + conv_bn(3, mid, mid) + conv_bn(1, mid, out);
                        let block_stride = if block == 0 { stride } else { 1 };
                        if cin != out || block_stride != 1 {
                            params += conv_bn(1, cin, out);
                        }
                        cin = out;
                    }
                    (Shape::Spatial { h: same(h, stride), w: same(w, stride), c: out }, params)
                }
                _ => return Err(bad("layer does not accept this input shape")),
            };
            shape = next;
            out.push((shape, params));
        }
        Ok(out)
    }
}
