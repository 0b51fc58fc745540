//! Named model architectures. Every preset ends in a dense layer sized to the
//! dataset's class count.

use wus_core::LayerSpec;

use crate::error::CliError;

pub const PRESETS: [&str; 5] = ["mlp-small", "cnn-small", "alexnet-cifar", "vgg11-cifar", "vgg16-cifar"];

fn conv_block(specs: &mut Vec<LayerSpec>, filters: usize) {
    specs.push(LayerSpec::conv(filters, 3, 1, 1));
    specs.push(LayerSpec::Relu);
}

fn vgg(cfg: &[Option<usize>], classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for entry in cfg {
        match entry {
            Some(f) => conv_block(&mut specs, *f),
            None => specs.push(LayerSpec::pool(2)),
        }
    }
    specs.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(512),
        LayerSpec::Relu,
        LayerSpec::dense(512),
        LayerSpec::Relu,
        LayerSpec::dense(classes),
    ]);
    specs
}

pub fn preset(name: &str, classes: usize) -> Result<Vec<LayerSpec>, CliError> {
    const M: Option<usize> = None;
    let specs = match name {
        "mlp-small" => vec![
            LayerSpec::Flatten,
            LayerSpec::dense(128),
            LayerSpec::Relu,
            LayerSpec::dense(64),
            LayerSpec::Relu,
            LayerSpec::dense(classes),
        ],
        // about 90k parameters on 3×32×32 input
        "cnn-small" => {
            let mut s = Vec::new();
            for f in [16, 32, 64] {
                conv_block(&mut s, f);
                s.push(LayerSpec::pool(2));
            }
            s.extend([LayerSpec::Flatten, LayerSpec::dense(64), LayerSpec::Relu, LayerSpec::dense(classes)]);
            s
        }
        "alexnet-cifar" => vec![
            LayerSpec::conv(64, 5, 1, 2),
            LayerSpec::Relu,
            LayerSpec::pool(2),
            LayerSpec::conv(192, 5, 1, 2),
            LayerSpec::Relu,
            LayerSpec::pool(2),
            LayerSpec::conv(384, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(256, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(256, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::pool(2),
            LayerSpec::Flatten,
            LayerSpec::dense(512),
            LayerSpec::Relu,
            LayerSpec::dense(512),
            LayerSpec::Relu,
            LayerSpec::dense(classes),
        ],
        "vgg11-cifar" => vgg(
            &[Some(64), M, Some(128), M, Some(256), Some(256), M, Some(512), Some(512), M, Some(512), Some(512), M],
            classes,
        ),
        "vgg16-cifar" => vgg(
            &[
                Some(64), Some(64), M,
                Some(128), Some(128), M,
                Some(256), Some(256), Some(256), M,
                Some(512), Some(512), Some(512), M,
                Some(512), Some(512), Some(512), M,
            ],
            classes,
        ),
        other => {
            return Err(CliError::Config(format!(
                "unknown model preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(specs)
}
