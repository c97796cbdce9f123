//! Parameter storage and the convolutional building blocks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on the tape as a gradient-tracked leaf. The
    /// returned vector is indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Same as [`bind`](Self::bind) but without gradient tracking.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Replaces all values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Config(format!(
                "parameter sets differ ({} vs {} tensors)",
                self.names.len(),
                other.names.len()
            )));
        }
        for (i, v) in other.values.iter().enumerate() {
            v.expect_shape("load parameters", self.values[i].shape())?;
            self.values[i] = v.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Fan-in scaled uniform (He) for the given negative slope.
    HeUniform,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.2 }
    }
}

impl Activation {
    pub fn slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu { slope } => slope,
        }
    }

    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu { slope } => tape.leaky_relu(x, T::from_f64(slope)),
        }
    }
}

/// Square-kernel convolution with bias and same-padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || in_channels == 0 || out_channels == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv {name}: kernel {kernel} (must be odd), channels {in_channels}->{out_channels}, stride {stride}"
            )));
        }
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::HeUniform => {
                let fan_in = (in_channels * kernel * kernel) as f64;
                let gain = (2.0 / (1.0 + slope * slope)).sqrt();
                let bound = gain * (3.0 / fan_in).sqrt();
                Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
            }
        };
        Ok(Conv2d {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?,
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            params[self.weight.0],
            Some(params[self.bias.0]),
            self.stride,
            (self.kernel - 1) / 2,
        )
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Encoder-decoder network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "UnetSpec::default_base")]
    pub base_channels: usize,
    #[serde(default = "UnetSpec::default_levels")]
    pub levels: usize,
    #[serde(default = "UnetSpec::default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl UnetSpec {
    fn default_base() -> usize {
        64
    }

    fn default_levels() -> usize {
        3
    }

    fn default_kernel() -> usize {
        3
    }

    pub fn new(in_channels: usize, out_channels: usize, base_channels: usize, levels: usize) -> Self {
        UnetSpec {
            in_channels,
            out_channels,
            base_channels,
            levels,
            kernel_size: 3,
            activation: Activation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("unet channels must be positive"));
        }
        if self.base_channels == 0 || self.levels == 0 {
            return Err(Error::invalid("unet needs base_channels >= 1 and levels >= 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid("unet kernel size must be odd"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Unet with `levels` stride-2 downsamplings, channel doubling per level,
/// skip concatenation at each resolution and a final 1x1 projection.
///
/// Level 0 runs two convolutions at full resolution. Each deeper level starts
/// with a stride-2 convolution. The decoder upsamples, concatenates the skip
/// tensor of the matching level and applies two convolutions. Inputs whose
/// height or width is not a multiple of `2^levels` are reflect-padded at the
/// bottom/right and the output is cropped back.
#[derive(Clone, Debug)]
pub struct Unet {
    pub spec: UnetSpec,
    encoder: Vec<[Conv2d; 2]>,
    decoder: Vec<[Conv2d; 2]>,
    head: Conv2d,
}

impl Unet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &UnetSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel_size;
        let slope = spec.activation.slope();
        let mut conv = |store: &mut ParamStore<T>, n: String, i: usize, o: usize, k: usize, s: usize| {
            Conv2d::new(store, &n, i, o, k, s, Init::HeUniform, slope, rng)
        };
        let mut encoder = Vec::with_capacity(spec.levels + 1);
        encoder.push([
            conv(store, format!("{name}.enc0.a"), spec.in_channels, spec.width(0), k, 1)?,
            conv(store, format!("{name}.enc0.b"), spec.width(0), spec.width(0), k, 1)?,
        ]);
        for l in 1..=spec.levels {
            encoder.push([
                conv(store, format!("{name}.enc{l}.a"), spec.width(l - 1), spec.width(l), k, 2)?,
                conv(store, format!("{name}.enc{l}.b"), spec.width(l), spec.width(l), k, 1)?,
            ]);
        }
        let mut decoder = Vec::with_capacity(spec.levels);
        for l in (1..=spec.levels).rev() {
            let cin = spec.width(l) + spec.width(l - 1);
            decoder.push([
                conv(store, format!("{name}.dec{l}.a"), cin, spec.width(l - 1), k, 1)?,
                conv(store, format!("{name}.dec{l}.b"), spec.width(l - 1), spec.width(l - 1), k, 1)?,
            ]);
        }
        // linear output layer: unit gain
        let head = Conv2d::new(store, &format!("{name}.head"), spec.width(0), spec.out_channels, 1, 1, Init::HeUniform, 1.0, rng)?;
        Ok(Unet {
            spec: spec.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flatten()
            .map(Conv2d::param_count)
            .sum::<usize>()
            + self.head.param_count()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [n, c, h, w] = match shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(Error::invalid(format!(
                    "unet expects N x C x H x W, got {shape:?}"
                )))
            }
        };
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "unet input channels",
                expected: vec![n, self.spec.in_channels, h, w],
                got: shape,
            });
        }
        let m = 1usize << self.spec.levels;
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let input = if (ph, pw) != (h, w) {
            reflect_pad(tape, x, ph, pw)?
        } else {
            x
        };

        let act = self.spec.activation;
        let mut skips = Vec::with_capacity(self.spec.levels);
        let mut cur = input;
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            let y = a.forward(tape, params, cur)?;
            let y = act.apply(tape, y);
            let y = b.forward(tape, params, y)?;
            cur = act.apply(tape, y);
            if l < self.spec.levels {
                skips.push(cur);
            }
        }
        for [a, b] in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let up = tape.upsample2x(cur)?;
            let cat = tape.concat(&[up, skip], 1)?;
            let y = a.forward(tape, params, cat)?;
            let y = act.apply(tape, y);
            let y = b.forward(tape, params, y)?;
            cur = act.apply(tape, y);
        }
        let out = self.head.forward(tape, params, cur)?;
        if (ph, pw) != (h, w) {
            let out = tape.narrow(out, 2, 0, h)?;
            tape.narrow(out, 3, 0, w)
        } else {
            Ok(out)
        }
    }

    /// Sets weights so that output channel `j` equals input channel
    /// `sources[j]` exactly, for any sign of the input. Each copied channel is
    /// carried as the pair `(act(x), act(-x))` through the full-resolution
    /// path; every other weight and bias is zeroed. Requires
    /// `2 * sources.len() <= base_channels` and an activation with slope
    /// other than -1.
    pub fn set_passthrough<T: Real>(&self, store: &mut ParamStore<T>, sources: &[usize]) -> Result<()> {
        let pairs = sources.len();
        if pairs > self.spec.out_channels
            || 2 * pairs > self.spec.base_channels
            || sources.iter().any(|&s| s >= self.spec.in_channels)
        {
            return Err(Error::invalid("passthrough does not fit the network widths"));
        }
        let conv_layers = self
            .encoder
            .iter()
            .chain(&self.decoder)
            .flatten()
            .chain(std::iter::once(&self.head));
        for conv in conv_layers {
            store.get_mut(conv.weight).data_mut().fill(T::zero());
            store.get_mut(conv.bias).data_mut().fill(T::zero());
        }
        let inv = T::one() / (T::one() + T::from_f64(self.spec.activation.slope()));
        let set = |store: &mut ParamStore<T>, conv: &Conv2d, o: usize, i: usize, v: T| {
            let c = conv.kernel / 2;
            store.get_mut(conv.weight).set(&[o, i, c, c], v);
        };
        // (act(p) - act(q)) * inv recovers the signed value of a pair.
        let pair_identity = |store: &mut ParamStore<T>, conv: &Conv2d, in_off: usize| {
            for j in 0..pairs {
                let (p, q) = (in_off + 2 * j, in_off + 2 * j + 1);
                set(store, conv, 2 * j, p, inv);
                set(store, conv, 2 * j, q, -inv);
                set(store, conv, 2 * j + 1, p, -inv);
                set(store, conv, 2 * j + 1, q, inv);
            }
        };
        let [enc_a, enc_b] = &self.encoder[0];
        for (j, &s) in sources.iter().enumerate() {
            set(store, enc_a, 2 * j, s, T::one());
            set(store, enc_a, 2 * j + 1, s, -T::one());
        }
        pair_identity(store, enc_b, 0);
        let [dec_a, dec_b] = self.decoder.last().expect("levels >= 1");
        // decoder input is concat(upsampled, skip0); skip0 starts after width(1)
        pair_identity(store, dec_a, self.spec.width(1));
        pair_identity(store, dec_b, 0);
        for j in 0..pairs {
            store.get_mut(self.head.weight).set(&[j, 2 * j, 0, 0], inv);
            store.get_mut(self.head.weight).set(&[j, 2 * j + 1, 0, 0], -inv);
        }
        Ok(())
    }
}

/// Mirror index for reflect padding, valid for any overshoot.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn reflect_pad<T: Real>(tape: &mut Tape<T>, x: Var, ph: usize, pw: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut index = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        for y in 0..ph {
            let sy = reflect(y, h);
            for xx in 0..pw {
                index.push((p * h + sy) * w + reflect(xx, w));
            }
        }
    }
    tape.gather(x, Arc::new(index), &[s[0], s[1], ph, pw])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (0..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(0);
        assert!(Conv2d::new(&mut store, "c", 3, 4, 2, 1, Init::HeUniform, 0.2, &mut r).is_err());
        let mut spec = UnetSpec::new(3, 3, 8, 1);
        spec.levels = 0;
        assert!(Unet::new(&mut store, "u", &spec, &mut r).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1])).is_err());
    }
}
