//! Global-context attention at one or several pyramid scales, plus the
//! full pairwise non-local block kept as a reference.

use crate::autodiff::{Graph, Var};
use crate::error::{FpanError, Result};
use crate::nn::{Bindings, ConvLayer, Init, ParamId, ParameterStore};
use crate::tensor::Element;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Largest `h * w` accepted by [`NonLocalBlock`]; its similarity matrix is quadratic.
pub const NON_LOCAL_MAX_POSITIONS: usize = 4096;

/// Attention pooling: `alpha = softmax(W_k * x)` over positions, then the
/// per-channel weighted sum `sum_j alpha_j x_j`. Returns `(pooled [n, c, 1, 1], alpha [n, 1, h, w])`.
pub fn gc_context_pool<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    x: Var,
    key: &ConvLayer,
) -> Result<(Var, Var)> {
    let [n, c, h, w] = g.shape(x);
    let logits = key.forward(g, b, x)?;
    let alpha = g.softmax_positions(logits)?;
    let xs = g.reshape(x, [n, 1, c, h * w])?;
    let a = g.reshape(alpha, [n, 1, h * w, 1])?;
    let pooled = g.matmul(xs, a)?;
    Ok((g.reshape(pooled, [n, c, 1, 1])?, alpha))
}

/// Bottleneck transform `expand(relu(norm(squeeze(context))))`.
#[derive(Clone, Debug)]
pub struct ContextTransform {
    pub squeeze: ConvLayer,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub expand: ConvLayer,
}

impl ContextTransform {
    pub fn new<T: Element>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        cin: usize,
        bottleneck: usize,
        cout: usize,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let squeeze = ConvLayer::same(store, &format!("{prefix}.squeeze"), cin, bottleneck, 1, init, seed)?;
        let gamma = store.register(&format!("{prefix}.norm.gamma"), &[bottleneck], vec![T::one(); bottleneck])?;
        let beta = store.register(&format!("{prefix}.norm.beta"), &[bottleneck], vec![T::zero(); bottleneck])?;
        // The fusion layer always starts at zero, so the block is the identity at step 0.
        let expand = ConvLayer::same(store, &format!("{prefix}.expand"), bottleneck, cout, 1, Init::Zero, seed)?;
        Ok(ContextTransform {
            squeeze,
            gamma,
            beta,
            expand,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, context: Var) -> Result<Var> {
        let v = self.squeeze.forward(g, b, context)?;
        let v = g.layer_norm(v, b.var(self.gamma), b.var(self.beta), LAYER_NORM_EPS)?;
        let v = g.relu(v);
        self.expand.forward(g, b, v)
    }
}

/// One pyramid level: `log2(scale)` stride-2 downsamplers and a key conv.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub scale: usize,
    pub downsamplers: Vec<ConvLayer>,
    pub key: ConvLayer,
}

/// Pyramid non-local block: `Y = X + delta(concat_i PA_i)` where `PA_i` is
/// attention pooling on `X` downsampled by `i`.
#[derive(Clone, Debug)]
pub struct PyramidNonLocal {
    pub channels: usize,
    pub levels: Vec<PyramidLevel>,
    pub transform: ContextTransform,
}

impl PyramidNonLocal {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        channels: usize,
        scales: &[usize],
        reduction: usize,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        if scales.is_empty() {
            return Err(FpanError::config("pyramid attention needs at least one scale"));
        }
        let c = channels;
        let mut levels = Vec::with_capacity(scales.len());
        for &s in scales {
            if !s.is_power_of_two() {
                return Err(FpanError::config(format!("pyramid scale {s} is not a power of two")));
            }
            let steps = s.trailing_zeros() as usize;
            let downsamplers = (0..steps)
                .map(|j| ConvLayer::new(store, &format!("{prefix}.down{s}.{j}"), c, c, 6, 2, 2, init, seed))
                .collect::<Result<Vec<_>>>()?;
            let key = ConvLayer::same(store, &format!("{prefix}.key{s}"), c, 1, 1, init, seed)?;
            levels.push(PyramidLevel {
                scale: s,
                downsamplers,
                key,
            });
        }
        let transform = ContextTransform::new(
            store,
            prefix,
            scales.len() * c,
            c / reduction,
            c,
            init,
            seed,
        )?;
        Ok(PyramidNonLocal {
            channels,
            levels,
            transform,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.levels
            .iter()
            .flat_map(|l| l.downsamplers.iter().chain(std::iter::once(&l.key)))
            .chain([&self.transform.squeeze, &self.transform.expand])
    }

    /// Check that the coarsest level still has at least one position.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        for level in &self.levels {
            let (mut hh, mut ww) = (h, w);
            for d in &level.downsamplers {
                if hh + 2 * d.pad < d.kernel || ww + 2 * d.pad < d.kernel {
                    return Err(FpanError::config(format!(
                        "input {h}x{w} too small for pyramid scale {}",
                        level.scale
                    )));
                }
                (hh, ww) = d.out_size(hh, ww);
            }
        }
        Ok(())
    }

    /// Context vectors `PA_i`, one per level, each `[n, c, 1, 1]`, plus the
    /// attention maps.
    pub fn pooled<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Vec<(Var, Var)>> {
        let [_, c, h, w] = g.shape(x);
        if c != self.channels {
            return Err(FpanError::dim(format!(
                "pyramid attention expects {} channels, got {c}",
                self.channels
            )));
        }
        self.check_input(h, w)?;
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let mut xi = x;
            for d in &level.downsamplers {
                xi = d.forward(g, b, xi)?;
            }
            out.push(gc_context_pool(g, b, xi, &level.key)?);
        }
        Ok(out)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let pooled: Vec<Var> = self.pooled(g, b, x)?.into_iter().map(|(p, _)| p).collect();
        let context = g.concat_channels(&pooled)?;
        let delta = self.transform.forward(g, b, context)?;
        g.broadcast_add(x, delta)
    }
}

/// Pairwise non-local block with softmax similarity and a zero-initialized
/// output projection: `y_i = project(sum_j softmax_j(query(x_i) . key(x_j)) value(x_j)) + x_i`.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub query: ConvLayer,
    pub key: ConvLayer,
    pub value: ConvLayer,
    pub project: ConvLayer,
}

impl NonLocalBlock {
    pub fn new<T: Element>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        channels: usize,
        inner: usize,
        seed: u64,
    ) -> Result<Self> {
        let mk = |store: &mut ParameterStore<T>, n: &str, cin, cout, init| {
            ConvLayer::same(store, &format!("{prefix}.{n}"), cin, cout, 1, init, seed)
        };
        Ok(NonLocalBlock {
            query: mk(store, "query", channels, inner, Init::HeUniform)?,
            key: mk(store, "key", channels, inner, Init::HeUniform)?,
            value: mk(store, "value", channels, inner, Init::HeUniform)?,
            project: mk(store, "project", inner, channels, Init::Zero)?,
        })
    }

    /// Returns `(y, similarity [n, 1, hw, hw])`.
    pub fn forward<T: Element>(&self, gr: &mut Graph<T>, b: &Bindings, x: Var) -> Result<(Var, Var)> {
        let [n, _, h, w] = gr.shape(x);
        let hw = h * w;
        if hw > NON_LOCAL_MAX_POSITIONS {
            return Err(FpanError::usage(format!(
                "non-local block limited to {NON_LOCAL_MAX_POSITIONS} positions, got {h}x{w}"
            )));
        }
        let ci = self.query.cout;
        let flat = |gr: &mut Graph<T>, v: Var| gr.reshape(v, [n, 1, ci, hw]);

        let q = self.query.forward(gr, b, x)?;
        let q = flat(gr, q)?;
        let q_t = gr.transpose(q)?; // [n, 1, hw, ci]
        let k = self.key.forward(gr, b, x)?;
        let k = flat(gr, k)?;
        let logits = gr.matmul(q_t, k)?; // [n, 1, hw, hw]
        let rows = gr.reshape(logits, [n * hw, 1, 1, hw])?;
        let sim = gr.softmax_positions(rows)?;
        let sim = gr.reshape(sim, [n, 1, hw, hw])?;

        let v = self.value.forward(gr, b, x)?;
        let v = flat(gr, v)?;
        let v_t = gr.transpose(v)?; // [n, 1, hw, ci]
        let z = gr.matmul(sim, v_t)?; // [n, 1, hw, ci]
        let z = gr.transpose(z)?;
        let z = gr.reshape(z, [n, ci, h, w])?;
        let y = self.project.forward(gr, b, z)?;
        Ok((gr.add(y, x)?, sim))
    }
}
