//! Named network geometries.

use super::{LayerSpec, Shape3};

fn conv(name: &str, filters: usize, kernel: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv {
        name: name.into(),
        filters,
        kernel: [kernel, kernel],
        stride: [1, 1],
        pad: [pad, pad],
    }
}

fn fc(name: &str, outputs: usize) -> LayerSpec {
    LayerSpec::Fc {
        name: name.into(),
        outputs,
    }
}

fn pool(size: usize, stride: usize) -> LayerSpec {
    LayerSpec::MaxPool {
        size: [size, size],
        stride: [stride, stride],
    }
}

/// Caffe's MNIST LeNet: conv 20@5×5, pool, conv 50@5×5, pool, fc 500, ReLU,
/// fc 10. As in Caffe there is no nonlinearity after the conv layers.
pub fn lenet() -> (Shape3, Vec<LayerSpec>) {
    (
        [1, 28, 28],
        vec![
            conv("conv1", 20, 5, 0),
            pool(2, 2),
            conv("conv2", 50, 5, 0),
            pool(2, 2),
            fc("fc1", 500),
            LayerSpec::Relu,
            fc("fc2", 10),
            LayerSpec::Softmax,
        ],
    )
}

/// 784-500-300-10 with ReLU hidden units.
pub fn mlp() -> (Shape3, Vec<LayerSpec>) {
    (
        [1, 28, 28],
        vec![
            fc("fc1", 500),
            LayerSpec::Relu,
            fc("fc2", 300),
            LayerSpec::Relu,
            fc("fc3", 10),
            LayerSpec::Softmax,
        ],
    )
}

/// A stem conv, three identity-shortcut blocks of two 16-filter 3×3 convs,
/// and a linear classifier, sized for MNIST.
pub fn mini_resnet() -> (Shape3, Vec<LayerSpec>) {
    let mut specs = vec![conv("conv0", 16, 3, 1), LayerSpec::Relu, pool(2, 2)];
    for b in 0..3 {
        specs.extend([
            LayerSpec::ResidualBegin { id: b },
            conv(&format!("block{b}_conv1"), 16, 3, 1),
            LayerSpec::Relu,
            conv(&format!("block{b}_conv2"), 16, 3, 1),
            LayerSpec::ResidualEnd { id: b },
            LayerSpec::Relu,
        ]);
    }
    specs.extend([pool(2, 2), fc("fc", 10), LayerSpec::Softmax]);
    ([1, 28, 28], specs)
}

/// Three 5×5 conv layers (32, 32, 64 filters) with ReLU and 2×2 pooling,
/// then a linear classifier, for 32×32 RGB input.
pub fn convnet() -> (Shape3, Vec<LayerSpec>) {
    (
        [3, 32, 32],
        vec![
            conv("conv1", 32, 5, 2),
            LayerSpec::Relu,
            pool(2, 2),
            conv("conv2", 32, 5, 2),
            LayerSpec::Relu,
            pool(2, 2),
            conv("conv3", 64, 5, 2),
            LayerSpec::Relu,
            pool(2, 2),
            fc("fc", 10),
            LayerSpec::Softmax,
        ],
    )
}

pub fn by_name(name: &str) -> Option<(Shape3, Vec<LayerSpec>)> {
    match name {
        "lenet" => Some(lenet()),
        "mlp" => Some(mlp()),
        "mini-resnet" => Some(mini_resnet()),
        "convnet" => Some(convnet()),
        _ => None,
    }
}
