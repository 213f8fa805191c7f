//! Two-stage feedback connection structure.
//!
//! ```text
//! X0     = relu(W0 * F)
//! X1[i]  = relu(W1[i] * [X1[i-1], X1[i-2]])     X1[-1] = F, X1[0] = X0
//! X2[i]  = relu(W2[i] * [X2[i-1], X1[i]])       X2[0] = X1[D]
//! ```
//! The block returns `X2[D]`.

use crate::autodiff::{Graph, Var};
use crate::error::{FpanError, Result};
use crate::nn::{Bindings, ConvLayer, Init, ParameterStore};
use crate::tensor::Element;

use super::config::Ablation;

#[derive(Clone, Debug)]
pub struct FeedbackStructure {
    pub channels: usize,
    pub initial: ConvLayer,
    pub stage1: Vec<ConvLayer>,
    /// Empty when the feedback stage is ablated.
    pub stage2: Vec<ConvLayer>,
    pub feedforward_skips: bool,
}

impl FeedbackStructure {
    pub fn new<T: Element>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        channels: usize,
        depth: usize,
        ablation: Ablation,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let c = channels;
        let initial = ConvLayer::same(store, &format!("{prefix}.initial"), c, c, 3, init, seed)?;
        let stage1 = (0..depth)
            .map(|i| ConvLayer::same(store, &format!("{prefix}.stage1.{i}"), 2 * c, c, 3, init, seed))
            .collect::<Result<Vec<_>>>()?;
        let stage2 = if ablation.feedback_skips {
            (0..depth)
                .map(|i| ConvLayer::same(store, &format!("{prefix}.stage2.{i}"), 2 * c, c, 3, init, seed))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(FeedbackStructure {
            channels,
            initial,
            stage1,
            stage2,
            feedforward_skips: ablation.feedforward_skips,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        std::iter::once(&self.initial)
            .chain(&self.stage1)
            .chain(&self.stage2)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, f_prev: Var) -> Result<Var> {
        let c = g.shape(f_prev)[1];
        if c != self.channels {
            return Err(FpanError::dim(format!(
                "feedback structure expects {} channels, got {c}",
                self.channels
            )));
        }
        let x0 = self.initial.forward(g, b, f_prev)?;
        let x0 = g.relu(x0);

        let (mut older, mut last) = (f_prev, x0);
        let mut stage1_out = Vec::with_capacity(self.stage1.len());
        for layer in &self.stage1 {
            let pair = if self.feedforward_skips {
                [last, older]
            } else {
                [last, last]
            };
            let input = g.concat_channels(&pair)?;
            let x = layer.forward(g, b, input)?;
            let x = g.relu(x);
            stage1_out.push(x);
            older = last;
            last = x;
        }
        if self.stage2.is_empty() {
            return Ok(last);
        }

        let mut x2 = last;
        for (layer, &x1) in self.stage2.iter().zip(&stage1_out) {
            let input = g.concat_channels(&[x2, x1])?;
            let x = layer.forward(g, b, input)?;
            x2 = g.relu(x);
        }
        Ok(x2)
    }
}
