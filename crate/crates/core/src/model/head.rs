use rand::Rng;

use super::backbone::BackboneConfig;
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::nn::{self, init, Conv2dSpec};
use crate::task::HeadSpec;
use crate::tensor::{Graph, Tensor, Var};

/// Number of upsampling blocks in a conv-transpose head.
pub const UPSAMPLE_BLOCKS: usize = 4;

fn upsample_specs(spec: &HeadSpec, backbone: &BackboneConfig) -> Option<Vec<(Conv2dSpec, Conv2dSpec)>> {
    let HeadSpec::ConvTranspose { filters, out_channels } = *spec else {
        return None;
    };
    Some(
        (0..UPSAMPLE_BLOCKS)
            .map(|b| {
                let cin = if b == 0 { backbone.channels } else { filters };
                let cout = if b + 1 == UPSAMPLE_BLOCKS { out_channels } else { filters };
                (Conv2dSpec::new(cin, filters, 2, 2, 0), Conv2dSpec::new(filters, cout, 3, 1, 1))
            })
            .collect(),
    )
}

/// Spatial extent of a conv-transpose head's output.
pub fn dense_output_extent(backbone: &BackboneConfig) -> (usize, usize) {
    let (h, w) = backbone.final_spatial();
    let f = 1 << UPSAMPLE_BLOCKS;
    (h * f, w * f)
}

pub fn init_head<R: Rng + ?Sized>(spec: &HeadSpec, backbone: &BackboneConfig, rng: &mut R) -> ParamSet {
    let mut p = ParamSet::new();
    match *spec {
        HeadSpec::FullyConnected { outputs } => {
            let shape = [backbone.embedding_len(), outputs];
            p.push("fc.weight", init::kaiming_uniform(&shape, init::linear_fan_in(&shape), rng));
            p.push("fc.bias", Tensor::zeros(&[outputs]));
        }
        HeadSpec::ConvTranspose { .. } => {
            for (b, (up, conv)) in upsample_specs(spec, backbone).unwrap().iter().enumerate() {
                let s = up.transposed_weight_shape();
                p.push(format!("up{b}.weight"), init::kaiming_uniform(&s, init::conv_transpose_fan_in(&s), rng));
                p.push(format!("up{b}.bias"), Tensor::zeros(&[up.out_channels]));
                let s = conv.weight_shape();
                p.push(format!("conv{b}.weight"), init::kaiming_uniform(&s, init::conv_fan_in(&s), rng));
                p.push(format!("conv{b}.bias"), Tensor::zeros(&[conv.out_channels]));
            }
        }
    }
    p
}

/// Maps an embedding (`N × embedding_len`) to predictions.
///
/// Fully connected heads give `N × outputs`; conv-transpose heads reshape the
/// embedding to `N × C × h × w` and upsample to `N × out_channels × 16h × 16w`
/// with a linear final layer.
pub fn head_forward(
    g: &mut Graph,
    spec: &HeadSpec,
    backbone: &BackboneConfig,
    params: &[Var],
    embedding: Var,
) -> Result<Var> {
    let s = g.shape(embedding).to_vec();
    if s.len() != 2 || s[1] != backbone.embedding_len() {
        return Err(Error::invalid(
            "head",
            format!("embedding {s:?} does not match length {}", backbone.embedding_len()),
        ));
    }
    match spec {
        HeadSpec::FullyConnected { .. } => {
            if params.len() != 2 {
                return Err(Error::invalid("head", "fully connected head needs 2 tensors"));
            }
            nn::linear(g, embedding, params[0], params[1])
        }
        HeadSpec::ConvTranspose { .. } => {
            let specs = upsample_specs(spec, backbone).unwrap();
            if params.len() != 4 * specs.len() {
                return Err(Error::invalid("head", "conv-transpose head parameter count mismatch"));
            }
            let (h, w) = backbone.final_spatial();
            let mut x = g.reshape(embedding, &[s[0], backbone.channels, h, w])?;
            for (b, (up, conv)) in specs.iter().enumerate() {
                let p = &params[4 * b..4 * b + 4];
                x = nn::conv_transpose2d(g, x, up, p[0], Some(p[1]))?;
                x = g.relu(x)?;
                x = nn::conv2d(g, x, conv, p[2], Some(p[3]))?;
                if b + 1 < specs.len() {
                    x = g.relu(x)?;
                }
            }
            Ok(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_fc_head_passes_embedding_through() {
        let backbone = BackboneConfig::new(1, 3, (1, 2, 2));
        let d = backbone.embedding_len();
        let mut g = Graph::new();
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        let w = g.constant(eye).unwrap();
        let b = g.constant(Tensor::zeros(&[d])).unwrap();
        let x = g.constant(Tensor::uniform(&[4, d], -1.0, 1.0, &mut rand::rng())).unwrap();
        let y = head_forward(&mut g, &HeadSpec::FullyConnected { outputs: d }, &backbone, &[w, b], x).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn fc_logit_shape() {
        let backbone = BackboneConfig::new(4, 32, (3, 84, 84));
        let spec = HeadSpec::FullyConnected { outputs: 5 };
        let p = init_head(&spec, &backbone, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::zeros(&[10, 800])).unwrap();
        let y = head_forward(&mut g, &spec, &backbone, &vars, x).unwrap();
        assert_eq!(g.shape(y), &[10, 5]);
        let bad = g.constant(Tensor::zeros(&[10, 799])).unwrap();
        assert!(head_forward(&mut g, &spec, &backbone, &vars, bad).is_err());
    }

    #[test]
    fn conv_transpose_head_reaches_80x80() {
        let backbone = BackboneConfig::new(4, 32, (3, 84, 84));
        assert_eq!(dense_output_extent(&backbone), (80, 80));
        for (filters, ch) in [(4, 1), (8, 3)] {
            let spec = HeadSpec::ConvTranspose { filters, out_channels: ch };
            let p = init_head(&spec, &backbone, &mut ChaCha8Rng::seed_from_u64(1));
            let mut g = Graph::new();
            let vars = p.bind(&mut g, false).unwrap();
            let x = g.constant(Tensor::uniform(&[2, 800], 0.0, 1.0, &mut rand::rng())).unwrap();
            let y = head_forward(&mut g, &spec, &backbone, &vars, x).unwrap();
            assert_eq!(g.shape(y), &[2, ch, 80, 80]);
        }
    }
}
