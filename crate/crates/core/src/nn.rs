//! Parameterized layers and the parameter store shared by model, optimizer
//! and checkpoints.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{FpanError, Result};
use crate::tensor::{numel, Element, Shape, Tensor4};

/// Index of a tensor in a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its Adam moment slots. The slots stay empty until
/// the first optimizer step touches them.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub tensor: Tensor4<T>,
    /// Logical shape as persisted (`[cout]` for a bias, `[cout, cin, kh, kw]` for a kernel).
    pub dims: Vec<usize>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Ordered name → tensor map. Iteration order is insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Element> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: IndexMap::new(),
        }
    }

    /// Register a tensor under a unique name. `dims` is the persisted shape;
    /// the in-memory tensor is 4-D with trailing ones.
    pub fn register(&mut self, name: &str, dims: &[usize], values: Vec<T>) -> Result<ParamId> {
        if self.params.contains_key(name) {
            return Err(FpanError::usage(format!("parameter '{name}' registered twice")));
        }
        if dims.is_empty() || dims.len() > 4 {
            return Err(FpanError::usage(format!(
                "parameter '{name}': rank {} not in 1..=4",
                dims.len()
            )));
        }
        let mut shape: Shape = [1; 4];
        shape[..dims.len()].copy_from_slice(dims);
        let mut tensor = Tensor4::from_vec(shape, values)?;
        tensor.requires_grad = true;
        let (idx, _) = self.params.insert_full(
            name.to_string(),
            Param {
                tensor,
                dims: dims.to_vec(),
                m: Vec::new(),
                v: Vec::new(),
            },
        );
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Copy every parameter into `g` as a leaf. With `track_grads` the leaves
    /// record gradients for [`ParameterStore::accumulate_grads`].
    pub fn bind(&self, g: &mut Graph<T>, track_grads: bool) -> Bindings {
        Bindings(
            self.params
                .values()
                .map(|p| {
                    let mut t = p.tensor.clone();
                    t.grad = None;
                    t.requires_grad = track_grads;
                    g.leaf(t)
                })
                .collect(),
        )
    }

    /// `grad += leaf grad` for every bound parameter that received one.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bindings: &Bindings) {
        for (p, &v) in self.params.values_mut().zip(&bindings.0) {
            if let Some(gr) = g.grad(v) {
                p.tensor.accumulate_grad(gr);
            }
        }
    }

    /// Convert to another element type, dropping gradients and optimizer state.
    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, p) in self.iter() {
            out.register(name, &p.dims, p.tensor.cast::<U>().into_data())
                .expect("names are unique");
        }
        out
    }
}

/// Graph variables for each parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Derive a per-layer seed from the model seed and the layer name, so
/// configurations that share a layer also share its initial weights.
pub fn layer_seed(model_seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ model_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// He-uniform values for a `[cout, cin, kh, kw]` kernel: U(-b, b) with
/// `b = sqrt(6 / (cin * kh * kw))`.
pub fn init_he(shape: Shape, seed: u64) -> Result<Vec<f64>> {
    let fan_in = shape[1] * shape[2] * shape[3];
    if fan_in == 0 {
        return Err(FpanError::usage(format!("init_he: zero fan-in for shape {shape:?}")));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..numel(shape))
        .map(|_| rng.random_range(-bound..=bound))
        .collect())
}

pub fn init_zero(shape: Shape) -> Vec<f64> {
    vec![0.0; numel(shape)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    HeUniform,
    Zero,
}

/// Convolution with bias. Registers `<name>.weight` and `<name>.bias`.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParameterStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        model_seed: u64,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel, kernel];
        let values = match init {
            Init::HeUniform => init_he(shape, layer_seed(model_seed, name))?,
            Init::Zero => init_zero(shape),
        };
        let weight = store.register(
            &format!("{name}.weight"),
            &shape,
            values.into_iter().map(T::from_f64_lossy).collect(),
        )?;
        let bias = store.register(&format!("{name}.bias"), &[cout], vec![T::zero(); cout])?;
        Ok(ConvLayer {
            name: name.to_string(),
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        })
    }

    /// Stride-1 layer with `pad = (k - 1) / 2`.
    pub fn same<T: Element>(
        store: &mut ParameterStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: Init,
        model_seed: u64,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, kernel, 1, (kernel - 1) / 2, init, model_seed)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), Some(b.var(self.bias)), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }

    /// Output spatial size for an `h x w` input.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Multiply-adds counted as two operations, bias excluded.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_size(h, w);
        2 * (self.kernel * self.kernel * self.cin * self.cout * ho * wo) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.register("a", &[2], vec![0.0; 2]).unwrap();
        assert!(matches!(s.register("a", &[2], vec![0.0; 2]), Err(FpanError::Usage(_))));
        ConvLayer::same(&mut s, "c", 2, 2, 3, Init::HeUniform, 0).unwrap();
        assert!(ConvLayer::same(&mut s, "c", 2, 2, 3, Init::HeUniform, 0).is_err());
    }

    #[test]
    fn insertion_order_and_counts() {
        let mut s = ParameterStore::<f32>::new();
        let l1 = ConvLayer::same(&mut s, "z", 3, 4, 3, Init::HeUniform, 1).unwrap();
        let l2 = ConvLayer::same(&mut s, "a", 4, 2, 1, Init::Zero, 1).unwrap();
        let names: Vec<&str> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["z.weight", "z.bias", "a.weight", "a.bias"]);
        assert_eq!(s.total_elements(), l1.param_count() + l2.param_count());
        assert_eq!(s.total_elements(), 3 * 4 * 9 + 4 + 4 * 2 + 2);
        assert_eq!(s.get(l1.bias).dims, vec![4]);
    }

    #[test]
    fn single_3x3_64_to_64_has_36928_params() {
        let mut s = ParameterStore::<f32>::new();
        let l = ConvLayer::same(&mut s, "c", 64, 64, 3, Init::HeUniform, 0).unwrap();
        assert_eq!(l.param_count(), 36_928);
        assert_eq!(s.total_elements(), 36_928);
    }

    #[test]
    fn he_bounds_and_determinism() {
        let shape = [8, 4, 3, 3];
        let b = (6.0f64 / 36.0).sqrt();
        let a = init_he(shape, 7).unwrap();
        assert!(a.iter().all(|v| v.abs() <= b));
        assert_eq!(a, init_he(shape, 7).unwrap());
        assert_ne!(a, init_he(shape, 8).unwrap());
        assert!(matches!(init_he([4, 0, 3, 3], 0), Err(FpanError::Usage(_))));
    }

    #[test]
    fn he_variance_matches_uniform_moment() {
        // 100_000 samples from U(-b, b) should have variance b^2 / 3.
        let vals = init_he([100_000, 6, 1, 1], 99).unwrap();
        let vals = &vals[..100_000];
        let b2 = 6.0 / 6.0; // fan-in 6
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let expected = b2 / 3.0;
        assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn zero_init_is_zero() {
        assert!(init_zero([3, 2, 5, 5]).iter().all(|&v| v == 0.0));
        let mut s = ParameterStore::<f64>::new();
        let l = ConvLayer::same(&mut s, "w", 2, 3, 1, Init::Zero, 5).unwrap();
        assert!(s.get(l.weight).tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_seed_depends_on_name_and_seed() {
        assert_eq!(layer_seed(1, "a"), layer_seed(1, "a"));
        assert_ne!(layer_seed(1, "a"), layer_seed(1, "b"));
        assert_ne!(layer_seed(1, "a"), layer_seed(2, "a"));
    }

    #[test]
    fn bind_and_accumulate_round_trip() {
        let mut s = ParameterStore::<f64>::new();
        let l = ConvLayer::same(&mut s, "c", 1, 1, 3, Init::HeUniform, 3).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let b = s.bind(&mut g, true);
            let x = g.constant(Tensor4::full([1, 1, 4, 4], 1.0));
            let y = l.forward(&mut g, &b, x).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            s.accumulate_grads(&g, &b);
        }
        // d sum / d bias = number of output positions, accumulated twice.
        assert_eq!(s.get(l.bias).tensor.grad.as_deref(), Some(&[32.0][..]));
    }
}
