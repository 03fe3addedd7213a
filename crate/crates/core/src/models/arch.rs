//! Architecture presets.

use crate::nn::{InputShape, LayerSpec, NetworkSpec, PadMode};

/// MNIST target classifier: two 5x5 conv + pool blocks, dense 1024, dense 10.
pub fn mnist_cnn() -> NetworkSpec {
    NetworkSpec {
        input: InputShape::Image { h: 28, w: 28, c: 1 },
        layers: vec![
            LayerSpec::Conv2d {
                cin: 1,
                cout: 32,
                kh: 5,
                kw: 5,
                pad: PadMode::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d {
                cin: 32,
                cout: 64,
                kh: 5,
                kw: 5,
                pad: PadMode::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                din: 7 * 7 * 64,
                dout: 1024,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                din: 1024,
                dout: 10,
            },
        ],
    }
}

/// MNIST mapper: convolutional autoencoder shape with a sigmoid output.
/// Encoder pools 28 -> 14 -> 7 -> 4, decoder upsamples back through a valid
/// 3x3 convolution (16 -> 14) so the output is again 28x28x1.
pub fn mnist_mapper() -> NetworkSpec {
    let conv = |cin: usize, cout: usize, pad: PadMode| LayerSpec::Conv2d {
        cin,
        cout,
        kh: 3,
        kw: 3,
        pad,
    };
    NetworkSpec {
        input: InputShape::Image { h: 28, w: 28, c: 1 },
        layers: vec![
            conv(1, 16, PadMode::Same),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            conv(16, 8, PadMode::Same),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            conv(8, 8, PadMode::Same),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            conv(8, 8, PadMode::Same),
            LayerSpec::Relu,
            LayerSpec::Upsample2,
            conv(8, 8, PadMode::Same),
            LayerSpec::Relu,
            LayerSpec::Upsample2,
            conv(8, 16, PadMode::Valid),
            LayerSpec::Upsample2,
            conv(16, 1, PadMode::Same),
            LayerSpec::Sigmoid,
        ],
    }
}

/// Small fully connected classifier, used by tests and toy experiments.
pub fn mlp_classifier(dims: &[usize]) -> NetworkSpec {
    assert!(dims.len() >= 2, "mlp needs at least input and output dims");
    let mut layers = Vec::new();
    for win in dims.windows(2) {
        layers.push(LayerSpec::Dense {
            din: win[0],
            dout: win[1],
        });
        layers.push(LayerSpec::Relu);
    }
    layers.pop(); // no activation after the logits layer
    NetworkSpec {
        input: InputShape::Flat(dims[0]),
        layers,
    }
}

/// Small fully connected input mapper with a sigmoid output.
pub fn mlp_mapper(dims: &[usize]) -> NetworkSpec {
    assert!(dims.len() >= 2, "mlp needs at least input and output dims");
    assert_eq!(
        dims[0],
        *dims.last().unwrap(),
        "mapper must preserve the input dimension"
    );
    let mut layers = Vec::new();
    for win in dims.windows(2) {
        layers.push(LayerSpec::Dense {
            din: win[0],
            dout: win[1],
        });
        layers.push(LayerSpec::Relu);
    }
    layers.pop();
    layers.push(LayerSpec::Sigmoid);
    NetworkSpec {
        input: InputShape::Flat(dims[0]),
        layers,
    }
}
