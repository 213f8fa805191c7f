use crate::autodiff::{Graph, Var};
use crate::error::{FpanError, Result};
use crate::nn::{Bindings, ConvLayer, Init, ParameterStore};
use crate::tensor::{Element, Tensor4};

use super::attention::PyramidNonLocal;
use super::config::{AttentionKind, ModelConfig};
use super::feedback::FeedbackStructure;

/// Feedback pyramid attention block: `F_g = F_{g-1} + attn(fc(F_{g-1}))`.
#[derive(Clone, Debug)]
pub struct Fpab {
    pub feedback: FeedbackStructure,
    /// `None` when attention is ablated (identity).
    pub attention: Option<PyramidNonLocal>,
}

impl Fpab {
    pub fn new<T: Element>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: &ModelConfig,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let feedback = FeedbackStructure::new(
            store,
            &format!("{prefix}.feedback"),
            config.channels,
            config.stage_depth,
            config.ablation,
            init,
            seed,
        )?;
        let attention = match config.ablation.attention {
            AttentionKind::None => None,
            AttentionKind::Gc | AttentionKind::Pnlb => Some(PyramidNonLocal::new(
                store,
                &format!("{prefix}.attn"),
                config.channels,
                &config.active_scales(),
                config.reduction,
                init,
                seed,
            )?),
        };
        Ok(Fpab { feedback, attention })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, f_prev: Var) -> Result<Var> {
        let x = self.feedback.forward(g, b, f_prev)?;
        let y = match &self.attention {
            Some(a) => a.forward(g, b, x)?,
            None => x,
        };
        g.add(f_prev, y)
    }
}

/// Intermediate features of one forward pass.
#[derive(Clone, Debug)]
pub struct Features {
    pub shallow: Var,
    /// `F_1 .. F_G` in block order.
    pub blocks: Vec<Var>,
    pub fused: Var,
    pub output: Var,
}

/// The full network with its parameters.
#[derive(Clone, Debug)]
pub struct Fpan<T> {
    pub config: ModelConfig,
    pub store: ParameterStore<T>,
    pub head: ConvLayer,
    pub blocks: Vec<Fpab>,
    /// 1x1 fusion over `[F_G, ..., F_1]`.
    pub fusion_merge: ConvLayer,
    pub fusion_conv: ConvLayer,
    /// Upsampling convolutions, each followed by a pixel shuffle of the paired factor.
    pub upsample: Vec<(ConvLayer, usize)>,
    pub tail: ConvLayer,
}

impl<T: Element> Fpan<T> {
    /// He-uniform weights derived from `seed`; attention fusion layers zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Init::HeUniform, seed)
    }

    /// All-zero parameters with the full layer layout, for loading and counting.
    pub fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::build(config, Init::Zero, 0)
    }

    pub fn build(config: ModelConfig, init: Init, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut store = ParameterStore::new();
        let head = ConvLayer::same(&mut store, "head", 3, c, 3, init, seed)?;
        let blocks = (0..config.num_blocks)
            .map(|i| Fpab::new(&mut store, &format!("blocks.{i}"), &config, init, seed))
            .collect::<Result<Vec<_>>>()?;
        let g = config.num_blocks;
        let fusion_merge = ConvLayer::same(&mut store, "fusion.merge", g * c, c, 1, init, seed)?;
        let fusion_conv = ConvLayer::same(&mut store, "fusion.conv", c, c, 3, init, seed)?;
        let factors: &[usize] = match config.scale {
            2 => &[2],
            3 => &[3],
            4 => &[2, 2],
            s => return Err(FpanError::config(format!("unsupported scale {s}"))),
        };
        let upsample = factors
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                ConvLayer::same(&mut store, &format!("recon.up{k}"), c, c * r * r, 3, init, seed).map(|l| (l, r))
            })
            .collect::<Result<Vec<_>>>()?;
        let tail = ConvLayer::same(&mut store, "recon.out", c, 3, 3, init, seed)?;
        Ok(Fpan {
            config,
            store,
            head,
            blocks,
            fusion_merge,
            fusion_conv,
            upsample,
            tail,
        })
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    /// Every convolution in forward order.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut out = vec![&self.head];
        for b in &self.blocks {
            out.extend(b.feedback.layers());
            if let Some(a) = &b.attention {
                out.extend(a.layers());
            }
        }
        out.push(&self.fusion_merge);
        out.push(&self.fusion_conv);
        out.extend(self.upsample.iter().map(|(l, _)| l));
        out.push(&self.tail);
        out
    }

    /// `F_GF = F_0 + conv3(conv1(concat[F_G, ..., F_1]))`.
    pub fn fuse(&self, g: &mut Graph<T>, b: &Bindings, shallow: Var, blocks: &[Var]) -> Result<Var> {
        let order: Vec<Var> = blocks.iter().rev().copied().collect();
        let cat = g.concat_channels(&order)?;
        let h = self.fusion_merge.forward(g, b, cat)?;
        let h = self.fusion_conv.forward(g, b, h)?;
        g.add(shallow, h)
    }

    /// Sub-pixel upsampling and the final 3-channel convolution.
    pub fn reconstruct(&self, g: &mut Graph<T>, b: &Bindings, fused: Var) -> Result<Var> {
        let mut x = fused;
        for (layer, r) in &self.upsample {
            x = layer.forward(g, b, x)?;
            x = g.pixel_shuffle(x, *r)?;
        }
        self.tail.forward(g, b, x)
    }

    pub fn forward_features(&self, g: &mut Graph<T>, b: &Bindings, lr: Var) -> Result<Features> {
        let [_, c, h, w] = g.shape(lr);
        if c != 3 {
            return Err(FpanError::dim(format!("expected a 3-channel input, got {c}")));
        }
        for block in &self.blocks {
            if let Some(a) = &block.attention {
                a.check_input(h, w)?;
            }
        }
        let shallow = self.head.forward(g, b, lr)?;
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut f = shallow;
        for block in &self.blocks {
            f = block.forward(g, b, f)?;
            feats.push(f);
        }
        let fused = self.fuse(g, b, shallow, &feats)?;
        let output = self.reconstruct(g, b, fused)?;
        Ok(Features {
            shallow,
            blocks: feats,
            fused,
            output,
        })
    }

    /// Output `[n, 3, s*h, s*w]`, not clamped.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bindings, lr: Var) -> Result<Var> {
        Ok(self.forward_features(g, b, lr)?.output)
    }

    /// Inference on a batch without gradient tracking; unclamped.
    pub fn predict(&self, lr: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let x = g.constant(lr.clone());
        let y = self.forward(&mut g, &b, x)?;
        Ok(g.take_leaf(y))
    }

    /// Inference with the output clamped to `[0, 1]`.
    pub fn super_resolve(&self, lr: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self
            .predict(lr)?
            .map(|v| v.max(T::zero()).min(T::one())))
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&self) -> Fpan<U> {
        Fpan {
            config: self.config.clone(),
            store: self.store.cast(),
            head: self.head.clone(),
            blocks: self.blocks.clone(),
            fusion_merge: self.fusion_merge.clone(),
            fusion_conv: self.fusion_conv.clone(),
            upsample: self.upsample.clone(),
            tail: self.tail.clone(),
        }
    }
}

/// Parameter count of a configuration without materializing random weights.
pub fn count_params_for(config: &ModelConfig) -> Result<usize> {
    Ok(Fpan::<f32>::skeleton(config.clone())?.param_count())
}
