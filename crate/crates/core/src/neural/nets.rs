//! The two reference architectures: a compact patch classifier and a small
//! encoder-decoder translator with skip concatenation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, upsample_backward,
    upsample_forward, Cache, Conv3x3, Dense, Layer, LayerKind, LayerSpec,
};
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Architecture descriptor, stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Arch {
    /// `widths.len()` blocks of conv3x3 + ReLU + maxpool2, global average pool, dense → 2.
    Classifier { in_channels: usize, widths: Vec<usize> },
    /// Encoder levels `widths` (pooling between levels), mirrored decoder with skips, 1 → 1 channel.
    Translator { widths: Vec<usize> },
}

impl Arch {
    pub fn classifier(in_channels: usize) -> Self {
        Arch::Classifier {
            in_channels,
            widths: vec![8, 16, 32, 64],
        }
    }

    pub fn translator() -> Self {
        Arch::Translator {
            widths: vec![16, 32, 64, 128],
        }
    }
}

/// Anything with parameters and an analytic backward pass.
pub trait Differentiable<T: Scalar> {
    /// Forward pass that records what [`Differentiable::backward`] needs.
    fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>>;

    /// Accumulates parameter gradients for the last training forward pass and
    /// returns the gradient with respect to its input.
    fn backward(&mut self, grad: &Tensor4<T>) -> Tensor4<T>;

    fn zero_grad(&mut self);

    /// Parameters in declared layer order (weights before bias).
    fn params(&self) -> Vec<&[T]>;

    fn grads(&self) -> Vec<&[T]>;

    fn params_and_grads(&mut self) -> Vec<(&mut [T], &[T])>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn flat_params(&self) -> Vec<T> {
        self.params().concat()
    }

    /// Overwrites all parameters from a flat vector in declared order.
    fn load_params(&mut self, flat: &[T]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(Error::Checkpoint(format!(
                "expected {total} parameters, found {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (p, _) in self.params_and_grads() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }
}

/// A complete model with a serializable architecture.
pub trait Network<T: Scalar>: Differentiable<T> {
    fn arch(&self) -> Arch;

    fn in_channels(&self) -> usize;

    /// Pure forward pass (no caches); safe to share across threads.
    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>>;

    fn layer_specs(&self) -> Vec<LayerSpec>;
}

/// Wraps a single layer so it can be trained or gradient-checked in isolation.
#[derive(Debug, Clone)]
pub struct LayerProbe<T> {
    pub layer: Layer<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> LayerProbe<T> {
    pub fn new(layer: Layer<T>) -> Self {
        LayerProbe { layer, cache: None }
    }
}

impl<T: Scalar> Differentiable<T> for LayerProbe<T> {
    fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (y, c) = self.layer.forward(x, true)?;
        self.cache = c;
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        let cache = self.cache.as_ref().expect("backward without forward_train");
        self.layer.backward(cache, grad)
    }

    fn zero_grad(&mut self) {
        self.layer.zero_grad();
    }

    fn params(&self) -> Vec<&[T]> {
        self.layer.params()
    }

    fn grads(&self) -> Vec<&[T]> {
        self.layer.grads()
    }

    fn params_and_grads(&mut self) -> Vec<(&mut [T], &[T])> {
        self.layer.params_and_grads()
    }
}

fn check_input<T: Scalar>(x: &Tensor4<T>, channels: usize, multiple: usize) -> Result<()> {
    if x.channels() != channels {
        return Err(Error::Shape(format!(
            "model expects {channels} input channels, got {}",
            x.channels()
        )));
    }
    if !x.height().is_multiple_of(multiple) || !x.width().is_multiple_of(multiple) || x.height() == 0 {
        return Err(Error::Shape(format!(
            "spatial size {}x{} must be a positive multiple of {multiple}",
            x.width(),
            x.height()
        )));
    }
    Ok(())
}

/// Patch classifier producing logits `[p, n]` per sample (`p > n` ⇒ error).
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    in_channels: usize,
    widths: Vec<usize>,
    layers: Vec<Layer<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if !(1..=3).contains(&in_channels) || widths.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "classifier with {in_channels} channels and widths {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c = in_channels;
        for &w in widths {
            layers.push(Layer::Conv(Conv3x3::new(c, w, &mut rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool);
            c = w;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense(Dense::new(c, 2, &mut rng)));
        Ok(Classifier {
            in_channels,
            widths: widths.to_vec(),
            layers,
            caches: Vec::new(),
        })
    }

    pub fn from_arch(arch: &Arch, seed: u64) -> Result<Self> {
        match arch {
            Arch::Classifier {
                in_channels,
                widths,
            } => Self::new(*in_channels, widths, seed),
            other => Err(Error::Checkpoint(format!("expected a classifier, found {other:?}"))),
        }
    }

    fn spatial_multiple(&self) -> usize {
        1 << self.widths.len()
    }
}

impl<T: Scalar> Network<T> for Classifier<T> {
    fn arch(&self) -> Arch {
        Arch::Classifier {
            in_channels: self.in_channels,
            widths: self.widths.clone(),
        }
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        check_input(x, self.in_channels, self.spatial_multiple())?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, false)?.0;
        }
        Ok(cur)
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut c = self.in_channels;
        self.layers
            .iter()
            .map(|l| {
                let s = l.spec(c);
                c = l.out_channels(c);
                s
            })
            .collect()
    }
}

impl<T: Scalar> Differentiable<T> for Classifier<T> {
    fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        check_input(x, self.in_channels, self.spatial_multiple())?;
        self.caches.clear();
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&cur, true)?;
            self.caches.push(cache.expect("training cache"));
            cur = out;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        assert_eq!(self.caches.len(), self.layers.len(), "backward without forward_train");
        let mut g = grad.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&self.caches).rev() {
            g = layer.backward(cache, &g);
        }
        g
    }

    fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn grads(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(Layer::grads).collect()
    }

    fn params_and_grads(&mut self) -> Vec<(&mut [T], &[T])> {
        self.layers
            .iter_mut()
            .flat_map(Layer::params_and_grads)
            .collect()
    }
}

/// Caches of one translator training pass.
#[derive(Debug, Clone)]
struct TranslatorCaches<T> {
    enc_conv: Vec<Cache<T>>,
    enc_relu: Vec<Cache<T>>,
    pools: Vec<Cache<T>>,
    ups: Vec<Cache<T>>,
    dec_conv: Vec<Cache<T>>,
    dec_relu: Vec<Cache<T>>,
    out_conv: Cache<T>,
}

/// Encoder-decoder with skip concatenation mapping one channel to one channel.
///
/// Works in normalized units; callers map intensities through `/255` and back.
#[derive(Debug, Clone)]
pub struct Translator<T> {
    widths: Vec<usize>,
    enc: Vec<Conv3x3<T>>,
    /// `dec[i]` produces level `i` from `up(level i+1) ⊕ skip i`.
    dec: Vec<Conv3x3<T>>,
    out: Conv3x3<T>,
    caches: Option<TranslatorCaches<T>>,
}

impl<T: Scalar> Translator<T> {
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidParameter("translator needs at least two levels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = Vec::new();
        let mut c = 1;
        for &w in widths {
            enc.push(Conv3x3::new(c, w, &mut rng));
            c = w;
        }
        let dec = (0..widths.len() - 1)
            .map(|i| Conv3x3::new(widths[i + 1] + widths[i], widths[i], &mut rng))
            .collect();
        let out = Conv3x3::new(widths[0], 1, &mut rng);
        Ok(Translator {
            widths: widths.to_vec(),
            enc,
            dec,
            out,
            caches: None,
        })
    }

    pub fn from_arch(arch: &Arch, seed: u64) -> Result<Self> {
        match arch {
            Arch::Translator { widths } => Self::new(widths, seed),
            other => Err(Error::Checkpoint(format!("expected a translator, found {other:?}"))),
        }
    }

    fn levels(&self) -> usize {
        self.widths.len()
    }

    fn run(&self, x: &Tensor4<T>, keep: bool) -> Result<(Tensor4<T>, Option<TranslatorCaches<T>>)> {
        check_input(x, 1, 1 << (self.levels() - 1))?;
        let l = self.levels();
        let mut c = TranslatorCaches {
            enc_conv: Vec::new(),
            enc_relu: Vec::new(),
            pools: Vec::new(),
            ups: Vec::new(),
            dec_conv: Vec::new(),
            dec_relu: Vec::new(),
            out_conv: Cache::Up { in_shape: [0; 4] },
        };
        let mut skips = Vec::with_capacity(l);
        let mut cur = x.clone();
        for (i, conv) in self.enc.iter().enumerate() {
            if i > 0 {
                let (p, pc) = maxpool_forward(&cur, keep);
                c.pools.extend(pc);
                cur = p;
            }
            let (y, cc) = conv.forward(&cur, keep)?;
            let (y, rc) = relu_forward(&y, keep);
            c.enc_conv.extend(cc);
            c.enc_relu.extend(rc);
            skips.push(y.clone());
            cur = y;
        }
        // Decoder from the deepest level upwards; caches are stored deepest first.
        for i in (0..l - 1).rev() {
            let (u, uc) = upsample_forward(&cur, keep);
            c.ups.extend(uc);
            let cat = Tensor4::concat_channels(&u, &skips[i])?;
            let (y, cc) = self.dec[i].forward(&cat, keep)?;
            let (y, rc) = relu_forward(&y, keep);
            c.dec_conv.extend(cc);
            c.dec_relu.extend(rc);
            cur = y;
        }
        let (y, oc) = self.out.forward(&cur, keep)?;
        if let Some(oc) = oc {
            c.out_conv = oc;
        }
        Ok((y, keep.then_some(c)))
    }
}

impl<T: Scalar> Network<T> for Translator<T> {
    fn arch(&self) -> Arch {
        Arch::Translator {
            widths: self.widths.clone(),
        }
    }

    fn in_channels(&self) -> usize {
        1
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.run(x, false)?.0)
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut c = 1;
        for (i, &w) in self.widths.iter().enumerate() {
            if i > 0 {
                specs.push(LayerSpec {
                    stride: 2,
                    ..LayerSpec::new(LayerKind::Maxpool2, c, c)
                });
            }
            specs.push(LayerSpec::new(LayerKind::Conv3x3, c, w));
            specs.push(LayerSpec::new(LayerKind::Relu, w, w));
            c = w;
        }
        for i in (0..self.levels() - 1).rev() {
            let skip = self.widths[i];
            specs.push(LayerSpec::new(LayerKind::Upsample2, c, c));
            specs.push(LayerSpec::new(LayerKind::ConcatSkip, c, c + skip));
            specs.push(LayerSpec::new(LayerKind::Conv3x3, c + skip, skip));
            specs.push(LayerSpec::new(LayerKind::Relu, skip, skip));
            c = skip;
        }
        specs.push(LayerSpec::new(LayerKind::Conv3x3, c, 1));
        specs
    }
}

impl<T: Scalar> Differentiable<T> for Translator<T> {
    fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (y, caches) = self.run(x, true)?;
        self.caches = caches;
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        let caches = self.caches.take().expect("backward without forward_train");
        let l = self.levels();
        let mut g = self.out.backward(&caches.out_conv, grad);
        // Gradients flowing into each encoder level's output through its skip.
        let mut skip_grads: Vec<Option<Tensor4<T>>> = vec![None; l];
        for i in 0..l - 1 {
            let k = l - 2 - i;
            g = relu_backward(&caches.dec_relu[k], &g);
            g = self.dec[i].backward(&caches.dec_conv[k], &g);
            let (gu, gs) = g.split_channels(self.widths[i + 1]);
            skip_grads[i] = Some(gs);
            g = upsample_backward(&caches.ups[k], &gu);
        }
        // g is now the gradient at the deepest encoder output.
        for i in (0..l).rev() {
            if let Some(s) = skip_grads[i].take() {
                g.add_assign(&s);
            }
            g = relu_backward(&caches.enc_relu[i], &g);
            g = self.enc[i].backward(&caches.enc_conv[i], &g);
            if i > 0 {
                g = maxpool_backward(&caches.pools[i - 1], &g);
            }
        }
        g
    }

    fn zero_grad(&mut self) {
        for c in self.enc.iter_mut().chain(self.dec.iter_mut()).chain([&mut self.out]) {
            c.grad_w.fill(T::zero());
            c.grad_b.fill(T::zero());
        }
    }

    fn params(&self) -> Vec<&[T]> {
        self.enc
            .iter()
            .chain(self.dec.iter().rev())
            .chain([&self.out])
            .flat_map(|c| [&c.weight[..], &c.bias[..]])
            .collect()
    }

    fn grads(&self) -> Vec<&[T]> {
        self.enc
            .iter()
            .chain(self.dec.iter().rev())
            .chain([&self.out])
            .flat_map(|c| [&c.grad_w[..], &c.grad_b[..]])
            .collect()
    }

    fn params_and_grads(&mut self) -> Vec<(&mut [T], &[T])> {
        self.enc
            .iter_mut()
            .chain(self.dec.iter_mut().rev())
            .chain([&mut self.out])
            .flat_map(|c| [(&mut c.weight[..], &c.grad_w[..]), (&mut c.bias[..], &c.grad_b[..])])
            .collect()
    }
}
