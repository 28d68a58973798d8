use rand::Rng;

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::nn::{self, init, Conv2dSpec, BN_EPS};
use crate::tensor::{Graph, Tensor, Var};

/// Stack of `blocks` × (3×3 conv, batch norm, relu, 2×2 max pool).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub channels: usize,
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
}

/// Parameters per block: conv weight, conv bias, gamma, beta.
pub const BLOCK_PARAMS: usize = 4;

impl BackboneConfig {
    pub fn new(blocks: usize, channels: usize, input: (usize, usize, usize)) -> Self {
        BackboneConfig { blocks, channels, input }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || self.input.0 == 0 {
            return Err(Error::Config("backbone blocks, channels and input channels must be ≥ 1".into()));
        }
        let (h, w) = self.final_spatial();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {}×{} vanishes after {} pooling blocks",
                self.input.1, self.input.2, self.blocks
            )));
        }
        Ok(())
    }

    /// Spatial extent after all pooling stages (floor division each time).
    pub fn final_spatial(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input.1, self.input.2);
        for _ in 0..self.blocks {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Length of the flattened embedding.
    pub fn embedding_len(&self) -> usize {
        let (h, w) = self.final_spatial();
        self.channels * h * w
    }

    /// Length of the full multiplier vector, one entry per block channel.
    pub fn modulation_len(&self) -> usize {
        self.blocks * self.channels
    }

    pub fn conv_spec(&self, block: usize) -> Conv2dSpec {
        let cin = if block == 0 { self.input.0 } else { self.channels };
        Conv2dSpec::new(cin, self.channels, 3, 1, 1)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for b in 0..self.blocks {
            let shape = self.conv_spec(b).weight_shape();
            p.push(format!("block{b}.conv.weight"), init::kaiming_uniform(&shape, init::conv_fan_in(&shape), rng));
            p.push(format!("block{b}.conv.bias"), Tensor::zeros(&[self.channels]));
            p.push(format!("block{b}.bn.gamma"), Tensor::ones(&[self.channels]));
            p.push(format!("block{b}.bn.beta"), Tensor::zeros(&[self.channels]));
        }
        p
    }
}

/// How block outputs are scaled before feeding the next block.
#[derive(Clone, Copy, Debug)]
pub enum Modulation {
    Identity,
    /// Vector of length `blocks · channels`; block `b` uses entries
    /// `[b·C, (b+1)·C)`.
    Multiplier(Var),
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Post-pool (and post-modulation) activation of every block.
    pub activations: Vec<Var>,
    /// Final activations flattened to `N × embedding_len`.
    pub embedding: Var,
}

/// Runs the backbone on `input` (`N × C_in × H × W`).
pub fn backbone_forward(
    g: &mut Graph,
    cfg: &BackboneConfig,
    params: &[Var],
    input: Var,
    modulation: Modulation,
) -> Result<BackboneOutput> {
    if params.len() != cfg.blocks * BLOCK_PARAMS {
        return Err(Error::invalid(
            "backbone",
            format!("expected {} parameters, got {}", cfg.blocks * BLOCK_PARAMS, params.len()),
        ));
    }
    let s = g.shape(input);
    if s.len() != 4 || s[1..] != [cfg.input.0, cfg.input.1, cfg.input.2] {
        return Err(Error::invalid(
            "backbone",
            format!("input {:?} does not match configured {:?}", s, cfg.input),
        ));
    }
    if let Modulation::Multiplier(m) = modulation {
        if g.shape(m) != [cfg.modulation_len()] {
            return Err(Error::shape("backbone", g.shape(m), &[cfg.modulation_len()]));
        }
    }
    let mut x = input;
    let mut activations = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let p = &params[b * BLOCK_PARAMS..(b + 1) * BLOCK_PARAMS];
        let y = nn::conv2d(g, x, &cfg.conv_spec(b), p[0], Some(p[1]))?;
        let y = nn::batch_norm(g, y, p[2], p[3], BN_EPS)?;
        let y = g.relu(y)?;
        let mut y = nn::max_pool2d(g, y, 2, 2)?;
        if let Modulation::Multiplier(m) = modulation {
            let slice = g.narrow(m, 0, b * cfg.channels, cfg.channels)?;
            y = nn::channel_modulate(g, y, slice)?;
        }
        activations.push(y);
        x = y;
    }
    let n = g.shape(x)[0];
    let embedding = g.reshape(x, &[n, cfg.embedding_len()])?;
    Ok(BackboneOutput { activations, embedding })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &BackboneConfig, n: usize, seed: u64) -> (Graph, Vec<Var>, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = cfg.init(&mut rng);
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true).unwrap();
        let (c, h, w) = cfg.input;
        let x = g.constant(Tensor::uniform(&[n, c, h, w], 0.0, 1.0, &mut rng)).unwrap();
        (g, vars, x)
    }

    #[test]
    fn paper_sized_embedding() {
        let cfg = BackboneConfig::new(4, 32, (3, 84, 84));
        assert_eq!(cfg.final_spatial(), (5, 5));
        assert_eq!(cfg.embedding_len(), 800);
        let (mut g, vars, x) = setup(&cfg, 2, 0);
        let out = backbone_forward(&mut g, &cfg, &vars, x, Modulation::Identity).unwrap();
        assert_eq!(g.shape(out.embedding), &[2, 800]);
        assert_eq!(out.activations.len(), 4);
    }

    #[test]
    fn ones_multiplier_is_bit_exact_identity() {
        let cfg = BackboneConfig::new(3, 4, (3, 16, 16));
        let (mut g, vars, x) = setup(&cfg, 3, 1);
        let plain = backbone_forward(&mut g, &cfg, &vars, x, Modulation::Identity).unwrap();
        let ones = g.constant(Tensor::ones(&[12])).unwrap();
        let modded = backbone_forward(&mut g, &cfg, &vars, x, Modulation::Multiplier(ones)).unwrap();
        assert!(g.value(plain.embedding).bit_eq(g.value(modded.embedding)));
    }

    #[test]
    fn zeroed_channel_matches_zeroed_activation() {
        let cfg = BackboneConfig::new(2, 3, (1, 8, 8));
        let (mut g, vars, x) = setup(&cfg, 2, 2);
        let mut m = vec![1.0; 6];
        m[1] = 0.0;
        let mv = g.constant(Tensor::vector(m)).unwrap();
        let modded = backbone_forward(&mut g, &cfg, &vars, x, Modulation::Multiplier(mv)).unwrap();

        // Manual substitution: run block 0, zero channel 1, then block 1.
        let p0 = &vars[0..4];
        let y = nn::conv2d(&mut g, x, &cfg.conv_spec(0), p0[0], Some(p0[1])).unwrap();
        let y = nn::batch_norm(&mut g, y, p0[2], p0[3], BN_EPS).unwrap();
        let y = g.relu(y).unwrap();
        let y = nn::max_pool2d(&mut g, y, 2, 2).unwrap();
        let mut t = g.value(y).clone();
        let hw = 16;
        for n in 0..2 {
            for v in &mut t.data_mut()[(n * 3 + 1) * hw..(n * 3 + 2) * hw] {
                *v = 0.0;
            }
        }
        let z = g.constant(t).unwrap();
        let p1 = &vars[4..8];
        let y = nn::conv2d(&mut g, z, &cfg.conv_spec(1), p1[0], Some(p1[1])).unwrap();
        let y = nn::batch_norm(&mut g, y, p1[2], p1[3], BN_EPS).unwrap();
        let y = g.relu(y).unwrap();
        let y = nn::max_pool2d(&mut g, y, 2, 2).unwrap();
        assert!(g.value(y).reshape(&[2, 12]).unwrap().bit_eq(g.value(modded.embedding)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = BackboneConfig::new(2, 3, (1, 8, 8));
        let (mut g, vars, x) = setup(&cfg, 2, 3);
        let short = g.constant(Tensor::ones(&[5])).unwrap();
        assert!(backbone_forward(&mut g, &cfg, &vars, x, Modulation::Multiplier(short)).is_err());
        let wrong = g.constant(Tensor::ones(&[2, 1, 4, 4])).unwrap();
        assert!(backbone_forward(&mut g, &cfg, &vars, wrong, Modulation::Identity).is_err());
        assert!(BackboneConfig::new(4, 32, (3, 8, 8)).validate().is_err());
    }

    #[test]
    fn first_block_count() {
        let cfg = BackboneConfig::new(4, 32, (3, 84, 84));
        let p = cfg.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.tensors()[0].len() + p.tensors()[1].len(), 896);
        assert_eq!(p.count(), 896 + 3 * (32 * 32 * 9 + 32) + 4 * 64);
    }
}
