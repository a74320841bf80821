//! 3D ResNet-34 / ResNet-50 feature extractors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, ForwardCtx, Graph, ParamStore, Var};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResNetVariant {
    #[serde(rename = "resnet34")]
    R34,
    #[serde(rename = "resnet50")]
    R50,
}

impl ResNetVariant {
    pub fn blocks(self) -> [usize; 4] {
        [3, 4, 6, 3]
    }

    fn expansion(self) -> usize {
        match self {
            ResNetVariant::R34 => 1,
            ResNetVariant::R50 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetBranchConfig {
    pub variant: ResNetVariant,
    pub in_channels: usize,
    /// Channels of the stem and first stage; 64 in the canonical networks.
    pub base_width: usize,
}

impl ResNetBranchConfig {
    pub fn canonical(variant: ResNetVariant, in_channels: usize) -> Self {
        Self {
            variant,
            in_channels,
            base_width: 64,
        }
    }

    /// Width of the pooled feature vector: 512 (34) or 2048 (50) at the
    /// canonical width.
    pub fn latent_dim(&self) -> usize {
        8 * self.base_width * self.variant.expansion()
    }
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<(Conv3d, BatchNorm)>,
    shortcut: Option<(Conv3d, BatchNorm)>,
}

impl Block {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let mut y = x;
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            let c = conv.forward(g, store, y)?;
            y = bn.forward(g, store, c, ctx)?;
            if i < last {
                y = g.relu(y);
            }
        }
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let c = conv.forward(g, store, x)?;
                bn.forward(g, store, c, ctx)?
            }
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct ResNet {
    pub config: ResNetBranchConfig,
    stem: (Conv3d, BatchNorm),
    blocks: Vec<Block>,
}

impl ResNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ResNetBranchConfig, rng: &mut Rng) -> Result<Self> {
        if config.in_channels == 0 || config.base_width == 0 {
            return Err(Error::InvalidArgument(format!("ResNet branch {config:?}")));
        }
        let w = config.base_width;
        let e = config.variant.expansion();
        let stem = (
            Conv3d::new(store, &format!("{name}.stem"), config.in_channels, w, 7, 2, 3, false, rng),
            BatchNorm::new(store, &format!("{name}.stem_bn"), w),
        );
        let mut blocks = Vec::new();
        let mut cin = w;
        for (stage, &count) in config.variant.blocks().iter().enumerate() {
            let width = w << stage;
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let p = format!("{name}.layer{}.{b}", stage + 1);
                let conv = |store: &mut ParamStore<T>, rng: &mut Rng, i: usize, ci, co, k, s| {
                    (
                        Conv3d::new(store, &format!("{p}.conv{i}"), ci, co, k, s, k / 2, false, rng),
                        BatchNorm::new(store, &format!("{p}.bn{i}"), co),
                    )
                };
                let convs = match config.variant {
                    ResNetVariant::R34 => vec![
                        conv(store, rng, 1, cin, width, 3, stride),
                        conv(store, rng, 2, width, width, 3, 1),
                    ],
                    ResNetVariant::R50 => vec![
                        conv(store, rng, 1, cin, width, 1, 1),
                        conv(store, rng, 2, width, width, 3, stride),
                        conv(store, rng, 3, width, width * e, 1, 1),
                    ],
                };
                let cout = width * e;
                let shortcut = (stride != 1 || cin != cout).then(|| {
                    (
                        Conv3d::new(store, &format!("{p}.down"), cin, cout, 1, stride, 0, false, rng),
                        BatchNorm::new(store, &format!("{p}.down_bn"), cout),
                    )
                });
                blocks.push(Block { convs, shortcut });
                cin = cout;
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
        })
    }

    /// `[N, C, D, H, W]` → `[N, latent_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let c = self.stem.0.forward(g, store, x)?;
        let b = self.stem.1.forward(g, store, c, ctx)?;
        let r = g.relu(b);
        let mut y = g.max_pool3d(r, 3, 2, 1)?;
        for block in &self.blocks {
            y = block.forward(g, store, y, ctx)?;
        }
        g.global_avg_pool(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use crate::rng;

    #[test]
    fn canonical_latent_widths() {
        assert_eq!(ResNetBranchConfig::canonical(ResNetVariant::R34, 1).latent_dim(), 512);
        assert_eq!(ResNetBranchConfig::canonical(ResNetVariant::R50, 9).latent_dim(), 2048);
    }

    #[test]
    fn block_layout() {
        for (variant, convs) in [(ResNetVariant::R34, 2), (ResNetVariant::R50, 3)] {
            let mut s = ParamStore::<f32>::new();
            let cfg = ResNetBranchConfig { variant, in_channels: 1, base_width: 2 };
            let net = ResNet::new(&mut s, "b", &cfg, &mut rng::rng(0)).unwrap();
            assert_eq!(net.blocks.len(), 16);
            assert!(net.blocks.iter().all(|b| b.convs.len() == convs));
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::full(vec![2, 1, 8, 8, 8], 0.5));
            let mut ctx = ForwardCtx::eval();
            let y = net.forward(&mut g, &s, x, &mut ctx).unwrap();
            assert_eq!(g.value(y).shape(), &[2, cfg.latent_dim()]);
        }
    }
}
