use std::fmt;

use super::ModelError;

/// One stage of a feed-forward network. All networks end in a softmax
/// cross-entropy loss over the output of the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) 2-D convolution over `[channels, height, width]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Non-overlapping `size × size` max pooling.
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Dense { inputs, outputs } => write!(f, "dense({inputs}->{outputs})"),
            Layer::Conv2d { in_channels, out_channels, kernel, stride } => {
                write!(f, "conv2d({in_channels}->{out_channels}, {kernel}x{kernel}, stride {stride})")
            }
            Layer::Relu => write!(f, "relu"),
            Layer::MaxPool { size } => write!(f, "maxpool({size})"),
            Layer::Flatten => write!(f, "flatten"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

/// Shapes and parameter ids resolved from a valid architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ArchPlan {
    /// `shapes[i]` is the per-example input shape of layer `i`;
    /// `shapes[layers.len()]` is the logits shape.
    pub shapes: Vec<Vec<usize>>,
    /// Parameter id for each parameterized layer, `None` otherwise.
    pub param_ids: Vec<Option<String>>,
}

impl ModelArch {
    /// LeNet-5 with 20 and 50 convolution channels and a 500-unit hidden
    /// layer: 431,080 parameters (430,500 weights and 580 biases).
    ///
    /// `conv(1->20, 5x5)` 28->24, pool 24->12, `conv(20->50, 5x5)` 12->8,
    /// pool 8->4, then `fc(800->500)` and `fc(500->10)`.
    pub fn lenet5() -> Self {
        Self {
            input_shape: vec![1, 28, 28],
            num_classes: 10,
            layers: vec![
                Layer::Conv2d { in_channels: 1, out_channels: 20, kernel: 5, stride: 1 },
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Conv2d { in_channels: 20, out_channels: 50, kernel: 5, stride: 1 },
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Flatten,
                Layer::Dense { inputs: 800, outputs: 500 },
                Layer::Relu,
                Layer::Dense { inputs: 500, outputs: 10 },
            ],
        }
    }

    /// The classic 6/16-channel convnet with 120-84-10 dense head
    /// (62,006 parameters on 3x32x32 inputs).
    pub fn small_convnet(in_channels: usize, side: usize, num_classes: usize) -> Self {
        let after = ((side - 4) / 2 - 4) / 2;
        Self {
            input_shape: vec![in_channels, side, side],
            num_classes,
            layers: vec![
                Layer::Conv2d { in_channels, out_channels: 6, kernel: 5, stride: 1 },
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Conv2d { in_channels: 6, out_channels: 16, kernel: 5, stride: 1 },
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Flatten,
                Layer::Dense { inputs: 16 * after * after, outputs: 120 },
                Layer::Relu,
                Layer::Dense { inputs: 120, outputs: 84 },
                Layer::Relu,
                Layer::Dense { inputs: 84, outputs: num_classes },
            ],
        }
    }

    /// Fully connected ReLU network, e.g. `mlp(&[784, 300, 100, 10])`.
    pub fn mlp(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(Layer::Relu);
            }
            layers.push(Layer::Dense { inputs: pair[0], outputs: pair[1] });
        }
        Self { input_shape: vec![widths[0]], num_classes: *widths.last().unwrap(), layers }
    }

    pub(crate) fn plan(&self) -> Result<ArchPlan, ModelError> {
        let invalid = |msg: String| Err(ModelError::InvalidArch(msg));
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return invalid(format!("bad input shape {:?}", self.input_shape));
        }
        if self.num_classes < 2 {
            return invalid("need at least two classes".into());
        }
        if !self.layers.iter().any(Layer::is_parameterized) {
            return invalid("no parameterized layer".into());
        }
        let mut shapes = vec![self.input_shape.clone()];
        let mut param_ids = Vec::with_capacity(self.layers.len());
        let (mut convs, mut denses) = (0, 0);
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let next = match *layer {
                Layer::Dense { inputs, outputs } => {
                    if cur != [inputs] || outputs == 0 {
                        return invalid(format!("layer {i} {layer} cannot take input {cur:?}"));
                    }
                    denses += 1;
                    param_ids.push(Some(format!("fc{denses}")));
                    vec![outputs]
                }
                Layer::Conv2d { in_channels, out_channels, kernel, stride } => {
                    if cur.len() != 3
                        || cur[0] != in_channels
                        || kernel == 0
                        || stride == 0
                        || out_channels == 0
                        || kernel > cur[1]
                        || kernel > cur[2]
                    {
                        return invalid(format!("layer {i} {layer} cannot take input {cur:?}"));
                    }
                    convs += 1;
                    param_ids.push(Some(format!("conv{convs}")));
                    vec![out_channels, (cur[1] - kernel) / stride + 1, (cur[2] - kernel) / stride + 1]
                }
                Layer::Relu => {
                    param_ids.push(None);
                    cur
                }
                Layer::MaxPool { size } => {
                    if cur.len() != 3 || size == 0 || cur[1] < size || cur[2] < size {
                        return invalid(format!("layer {i} {layer} cannot take input {cur:?}"));
                    }
                    param_ids.push(None);
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
                Layer::Flatten => {
                    param_ids.push(None);
                    vec![cur.iter().product()]
                }
            };
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out != &[self.num_classes] {
            return invalid(format!("network emits {out:?} but the loss expects [{}]", self.num_classes));
        }
        Ok(ArchPlan { shapes, param_ids })
    }
}
