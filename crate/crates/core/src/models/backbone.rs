//! Encoder backbones. Each exposes its per-scale feature maps (shallowest
//! first), the channel count at each scale, and named-layer activations with
//! their gradients for interpretation hooks.

use ndarray::{s, Array4};

use crate::nn::layers::concat_channels;
use crate::nn::{join, AvgPool2, BatchNorm2d, Conv2d, MaxPool2, Mode, Param, Parameterized, Relu};
use crate::scalar::Scalar;

/// Small VGG-style stack: four 3x3 conv + BN + ReLU blocks with 2x2 max
/// pooling between them. Scale outputs are the post-ReLU block activations.
#[derive(Debug, Clone)]
pub struct TinyCnn<T> {
    convs: Vec<Conv2d<T>>,
    norms: Vec<BatchNorm2d<T>>,
    relus: Vec<Relu<T>>,
    pools: Vec<MaxPool2>,
    outputs: Vec<Array4<T>>,
    grads: Vec<Option<Array4<T>>>,
}

impl<T: Scalar> TinyCnn<T> {
    pub fn new(feature_dim: usize) -> Self {
        let channels = Self::channels_for(feature_dim);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut prev = 1;
        for &c in &channels {
            convs.push(Conv2d::new(prev, c, 3));
            norms.push(BatchNorm2d::new(c));
            prev = c;
        }
        Self {
            convs,
            norms,
            relus: vec![Relu::new(); 4],
            pools: vec![MaxPool2::new(); 3],
            outputs: Vec::new(),
            grads: vec![None; 4],
        }
    }

    pub fn channels_for(feature_dim: usize) -> [usize; 4] {
        [
            (feature_dim / 8).max(4),
            (feature_dim / 4).max(4),
            (feature_dim / 2).max(4),
            feature_dim,
        ]
    }

    pub fn scale_channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.out_channels()).collect()
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: &Mode<'_>) -> Vec<Array4<T>> {
        self.outputs.clear();
        self.grads = vec![None; 4];
        let mut h = x.clone();
        for i in 0..4 {
            if i > 0 {
                h = self.pools[i - 1].forward(&h);
            }
            h = self.relus[i].forward(&self.norms[i].forward(&self.convs[i].forward(&h), mode));
            self.outputs.push(h.clone());
        }
        self.outputs.clone()
    }

    pub fn backward(&mut self, mut scale_grads: Vec<Option<Array4<T>>>) {
        let mut carry: Option<Array4<T>> = None;
        for i in (0..4).rev() {
            let g = match (carry.take(), scale_grads[i].take()) {
                (Some(a), Some(b)) => Some(a + &b),
                (a, b) => a.or(b),
            };
            let Some(g) = g else { continue };
            self.grads[i] = Some(g.clone());
            let d = self.norms[i].backward(&self.relus[i].backward(&g));
            let dx = self.convs[i].backward(&d, i > 0);
            if i > 0 {
                carry = dx.map(|dx| self.pools[i - 1].backward(&dx));
            }
        }
    }

    fn layer_index(name: &str) -> Option<usize> {
        match name {
            "block1" => Some(0),
            "block2" => Some(1),
            "block3" => Some(2),
            "block4" => Some(3),
            _ => None,
        }
    }

    pub fn activation(&self, name: &str) -> Option<&Array4<T>> {
        Self::layer_index(name).and_then(|i| self.outputs.get(i))
    }

    pub fn activation_grad(&self, name: &str) -> Option<&Array4<T>> {
        Self::layer_index(name).and_then(|i| self.grads.get(i)?.as_ref())
    }
}

impl<T: Scalar> Parameterized<T> for TinyCnn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            c.visit(&join(prefix, &format!("block{}.conv", i + 1)), f);
            n.visit(&join(prefix, &format!("block{}.norm", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, (c, n)) in self.convs.iter_mut().zip(&mut self.norms).enumerate() {
            c.visit_mut(&join(prefix, &format!("block{}.conv", i + 1)), f);
            n.visit_mut(&join(prefix, &format!("block{}.norm", i + 1)), f);
        }
    }
}

/// BN → ReLU → conv, the pre-activation unit of dense blocks and transitions.
#[derive(Debug, Clone)]
struct BnReluConv<T> {
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
    conv: Conv2d<T>,
}

impl<T: Scalar> BnReluConv<T> {
    fn new(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self {
            bn: BatchNorm2d::new(in_ch),
            relu: Relu::new(),
            conv: Conv2d::new(in_ch, out_ch, k),
        }
    }

    fn forward(&mut self, x: &Array4<T>, mode: &Mode<'_>) -> Array4<T> {
        let h = self.relu.forward(&self.bn.forward(x, mode));
        self.conv.forward(&h)
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let d = self.conv.backward(dy, true).expect("input grad");
        self.bn.backward(&self.relu.backward(&d))
    }

    fn visit(&self, prefix: &str, names: (&str, &str), f: &mut dyn FnMut(&str, &Param<T>)) {
        self.bn.visit(&join(prefix, names.0), f);
        self.conv.visit(&join(prefix, names.1), f);
    }

    fn visit_mut(&mut self, prefix: &str, names: (&str, &str), f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.bn.visit_mut(&join(prefix, names.0), f);
        self.conv.visit_mut(&join(prefix, names.1), f);
    }
}

#[derive(Debug, Clone)]
struct DenseLayer<T> {
    bottleneck: BnReluConv<T>,
    growth: BnReluConv<T>,
}

#[derive(Debug, Clone)]
struct DenseBlock<T> {
    layers: Vec<DenseLayer<T>>,
    in_channels: usize,
    growth_rate: usize,
}

impl<T: Scalar> DenseBlock<T> {
    fn new(in_channels: usize, n_layers: usize, growth_rate: usize, bn_size: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let c = in_channels + l * growth_rate;
                DenseLayer {
                    bottleneck: BnReluConv::new(c, bn_size * growth_rate, 1),
                    growth: BnReluConv::new(bn_size * growth_rate, growth_rate, 3),
                }
            })
            .collect();
        Self {
            layers,
            in_channels,
            growth_rate,
        }
    }

    fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth_rate
    }

    fn forward(&mut self, x: &Array4<T>, mode: &Mode<'_>) -> Array4<T> {
        let mut features = x.clone();
        for layer in &mut self.layers {
            let h = layer.bottleneck.forward(&features, mode);
            let new = layer.growth.forward(&h, mode);
            features = concat_channels(&features, &new);
        }
        features
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let mut grad = dy.clone();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            let c = self.in_channels + l * self.growth_rate;
            let d_new = grad.slice(s![.., c..c + self.growth_rate, .., ..]).to_owned();
            let d_in = layer.bottleneck.backward(&layer.growth.backward(&d_new));
            let mut head = grad.slice_mut(s![.., ..c, .., ..]);
            head += &d_in;
        }
        grad.slice(s![.., ..self.in_channels, .., ..]).to_owned()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("denselayer{}", l + 1));
            layer.bottleneck.visit(&p, ("norm1", "conv1"), f);
            layer.growth.visit(&p, ("norm2", "conv2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("denselayer{}", l + 1));
            layer.bottleneck.visit_mut(&p, ("norm1", "conv1"), f);
            layer.growth.visit_mut(&p, ("norm2", "conv2"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct Transition<T> {
    unit: BnReluConv<T>,
    pool: AvgPool2,
}

/// DenseNet-121 (growth 32, blocks 6/12/24/16, 64-channel stem) on
/// single-channel input. The stem pools with 2x2 max pooling.
#[derive(Debug, Clone)]
pub struct DenseNet121<T> {
    conv0: Conv2d<T>,
    norm0: BatchNorm2d<T>,
    relu0: Relu<T>,
    pool0: MaxPool2,
    blocks: Vec<DenseBlock<T>>,
    transitions: Vec<Transition<T>>,
    norm5: BatchNorm2d<T>,
    relu5: Relu<T>,
    outputs: Vec<Array4<T>>,
    grads: Vec<Option<Array4<T>>>,
}

pub const DENSENET121_FEATURES: usize = 1024;

impl<T: Scalar> DenseNet121<T> {
    pub fn new() -> Self {
        let (growth, bn_size) = (32, 4);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut ch = 64;
        for (i, &n) in [6usize, 12, 24, 16].iter().enumerate() {
            let block = DenseBlock::new(ch, n, growth, bn_size);
            ch = block.out_channels();
            blocks.push(block);
            if i < 3 {
                transitions.push(Transition {
                    unit: BnReluConv::new(ch, ch / 2, 1),
                    pool: AvgPool2::default(),
                });
                ch /= 2;
            }
        }
        Self {
            conv0: Conv2d::with_stride(1, 64, 7, 2, 3),
            norm0: BatchNorm2d::new(64),
            relu0: Relu::new(),
            pool0: MaxPool2::new(),
            blocks,
            transitions,
            norm5: BatchNorm2d::new(ch),
            relu5: Relu::new(),
            outputs: Vec::new(),
            grads: vec![None; 5],
        }
    }

    pub fn scale_channels(&self) -> Vec<usize> {
        let mut v = vec![64];
        v.extend(self.blocks.iter().map(|b| b.out_channels()));
        v
    }

    /// Scales: stem (1/2), dense blocks 1-3 (1/4 .. 1/16), final features (1/32).
    pub fn forward(&mut self, x: &Array4<T>, mode: &Mode<'_>) -> Vec<Array4<T>> {
        self.outputs.clear();
        self.grads = vec![None; 5];
        let stem = self.relu0.forward(&self.norm0.forward(&self.conv0.forward(x), mode));
        self.outputs.push(stem.clone());
        let mut h = self.pool0.forward(&stem);
        for i in 0..4 {
            h = self.blocks[i].forward(&h, mode);
            if i < 3 {
                self.outputs.push(h.clone());
                let t = &mut self.transitions[i];
                h = t.pool.forward(&t.unit.forward(&h, mode));
            }
        }
        let last = self.relu5.forward(&self.norm5.forward(&h, mode));
        self.outputs.push(last);
        self.outputs.clone()
    }

    pub fn backward(&mut self, mut scale_grads: Vec<Option<Array4<T>>>) {
        let take = |g: &mut Vec<Option<Array4<T>>>, i: usize| g.get_mut(i).and_then(Option::take);
        let g_last = take(&mut scale_grads, 4).unwrap_or_else(|| Array4::zeros(self.outputs[4].raw_dim()));
        self.grads[4] = Some(g_last.clone());
        let mut d = self.norm5.backward(&self.relu5.backward(&g_last));
        for i in (0..4).rev() {
            if i < 3 {
                let t = &mut self.transitions[i];
                d = t.unit.backward(&t.pool.backward(&d));
                if let Some(extra) = take(&mut scale_grads, i + 1) {
                    d += &extra;
                }
                self.grads[i + 1] = Some(d.clone());
            }
            d = self.blocks[i].backward(&d);
        }
        let mut d = self.pool0.backward(&d);
        if let Some(extra) = take(&mut scale_grads, 0) {
            d += &extra;
        }
        self.grads[0] = Some(d.clone());
        let d = self.norm0.backward(&self.relu0.backward(&d));
        self.conv0.backward(&d, false);
    }

    fn layer_index(name: &str) -> Option<usize> {
        match name {
            "conv0" => Some(0),
            "denseblock1" => Some(1),
            "denseblock2" => Some(2),
            "denseblock3" => Some(3),
            "denseblock4" => Some(4),
            _ => None,
        }
    }

    pub fn activation(&self, name: &str) -> Option<&Array4<T>> {
        Self::layer_index(name).and_then(|i| self.outputs.get(i))
    }

    pub fn activation_grad(&self, name: &str) -> Option<&Array4<T>> {
        Self::layer_index(name).and_then(|i| self.grads.get(i)?.as_ref())
    }
}

impl<T: Scalar> Default for DenseNet121<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Parameterized<T> for DenseNet121<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        let p = join(prefix, "features");
        self.conv0.visit(&join(&p, "conv0"), f);
        self.norm0.visit(&join(&p, "norm0"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(&p, &format!("denseblock{}", i + 1)), f);
            if let Some(t) = self.transitions.get(i) {
                t.unit.visit(&join(&p, &format!("transition{}", i + 1)), ("norm", "conv"), f);
            }
        }
        self.norm5.visit(&join(&p, "norm5"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let p = join(prefix, "features");
        self.conv0.visit_mut(&join(&p, "conv0"), f);
        self.norm0.visit_mut(&join(&p, "norm0"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(&p, &format!("denseblock{}", i + 1)), f);
            if let Some(t) = self.transitions.get_mut(i) {
                t.unit.visit_mut(&join(&p, &format!("transition{}", i + 1)), ("norm", "conv"), f);
            }
        }
        self.norm5.visit_mut(&join(&p, "norm5"), f);
    }
}
