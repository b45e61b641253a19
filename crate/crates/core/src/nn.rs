//! Small neural-network toolkit over `candle_core` tensors.
//!
//! Parameters are drawn from a seeded ChaCha stream so that model
//! construction is reproducible bit for bit; the candle CPU backend cannot be
//! seeded.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Ordered, named collection of trainable variables.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            entries: Vec::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Copies values from a store with identical names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::contract("parameter stores differ in size"));
        }
        for ((na, va), (nb, vb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || va.shape() != vb.shape() {
                return Err(Error::contract(format!("parameter mismatch: {na} vs {nb}")));
            }
            va.set(&vb.as_tensor().detach().copy()?)?;
        }
        Ok(())
    }

    /// Detached deep copies of every tensor, in declaration order.
    pub fn values(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    pub fn load_values(&self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                self.len(),
                values.len()
            )));
        }
        for ((na, va), (nb, t)) in self.entries.iter().zip(values) {
            if na != nb || va.shape() != t.shape() {
                return Err(Error::contract(format!("parameter mismatch: {na} vs {nb}")));
            }
            va.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn push(&mut self, name: String, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }
}

/// Scoped initializer writing into a [`ParamStore`].
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], limit: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-limit..limit)).collect();
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let full = self.full_name(name);
        self.store.push(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        let full = self.full_name(name);
        self.store.push(full, t)
    }
}

/// Dense layer with weight stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, inp: usize, out: usize) -> Result<Self> {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        Ok(Self {
            weight: init.uniform("w", &[inp, out], limit)?,
            bias: init.constant("b", &[out], 0.0)?,
        })
    }

    /// Output layer starting at exactly zero.
    pub fn zeros(init: &mut Init, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.constant("w", &[inp, out], 0.0)?,
            bias: init.constant("b", &[out], 0.0)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().ok_or_else(|| Error::contract("linear on a scalar"))?;
        if inp != self.weight.dims()[0] {
            return Err(Error::contract(format!(
                "linear expects {} inputs, got {:?}",
                self.weight.dims()[0],
                dims
            )));
        }
        let flat = x.reshape(((), inp))?;
        let y = flat.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension with learned scale and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-3;

    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: init.constant("g", &[dim], 1.0)?,
            bias: init.constant("b", &[dim], 0.0)?,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(self.gain.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Layer normalization across the channel axis of NCHW feature maps.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    gain: Var,
    bias: Var,
}

impl ChannelNorm {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: init.constant("g", &[1, channels, 1, 1], 1.0)?,
            bias: init.constant("b", &[1, channels, 1, 1], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let y = xc.broadcast_div(&(var + LayerNorm::EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(self.gain.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Stride-2 convolution with kernel 4 and padding 1: halves H and W.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
}

impl Conv2d {
    pub const KERNEL: usize = 4;

    pub fn new(init: &mut Init, inp: usize, out: usize) -> Result<Self> {
        let k = Self::KERNEL;
        let limit = (6.0 / ((inp + out) * k * k) as f64).sqrt();
        Ok(Self {
            weight: init.uniform("w", &[out, inp, k, k], limit)?,
            bias: init.constant("b", &[1, out, 1, 1], 0.0)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let out = self.weight.dims()[0];
        let cols = x.contiguous()?.apply_op1(Im2Col { channels: c, height: h, width: w })?;
        let wmat = self.weight.as_tensor().reshape((out, c * 16))?;
        let y = if cols.track_op() {
            cols.matmul(&wmat.t()?)?
        } else {
            // Inputs without gradient (observations): skip the patch gradient.
            let value = cols.matmul(&wmat.detach().t()?)?;
            wmat.apply_op1(ConstLhsMatmul { lhs: cols, value })?
        };
        let y = y.reshape((n, h / 2, w / 2, out))?.permute((0, 3, 1, 2))?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Stride-2 transposed convolution with kernel 4 and padding 1: doubles H
/// and W.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
}

impl ConvTranspose2d {
    pub fn new(init: &mut Init, inp: usize, out: usize) -> Result<Self> {
        let k = Conv2d::KERNEL;
        let limit = (6.0 / ((inp + out) * k * k) as f64).sqrt();
        Ok(Self {
            weight: init.uniform("w", &[inp, out, k, k], limit)?,
            bias: init.constant("b", &[1, out, 1, 1], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let out = self.weight.dims()[1];
        let xm = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((n * h * w, c))?;
        let cols = xm.matmul(&self.weight.as_tensor().reshape((c, out * 16))?)?;
        let y = cols.apply_op1(Col2Im {
            channels: out,
            height: 2 * h,
            width: 2 * w,
        })?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Patch extraction for the kernel-4, stride-2, padding-1 convolutions:
/// `(N, C, H, W)` to `(N * H/2 * W/2, C * 16)`, zero outside the image.
/// Column `c * 16 + ky * 4 + kx` holds pixel `(2 oy + ky - 1, 2 ox + kx - 1)`.
#[derive(Clone, Copy, Debug)]
struct Im2Col {
    channels: usize,
    height: usize,
    width: usize,
}

/// `lhs @ rhs^T` where only `rhs` receives a gradient. The product is
/// computed outside the op and passed in as `value`.
struct ConstLhsMatmul {
    lhs: Tensor,
    value: Tensor,
}

impl candle_core::CustomOp1 for ConstLhsMatmul {
    fn name(&self) -> &'static str {
        "const-lhs-matmul"
    }

    fn cpu_fwd(
        &self,
        _storage: &candle_core::CpuStorage,
        _layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let v = self.value.contiguous()?;
        let shape = v.shape().clone();
        let data = match v.dtype() {
            DType::F32 => S::F32(v.flatten_all()?.to_vec1::<f32>()?),
            DType::F64 => S::F64(v.flatten_all()?.to_vec1::<f64>()?),
            dt => return Err(candle_core::Error::Msg(format!("const-lhs matmul on {dt:?}"))),
        };
        Ok((data, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.t()?.matmul(&self.lhs)?))
    }
}

/// Adjoint of [`Im2Col`]: scatters patch columns back onto an image,
/// summing overlaps.
#[derive(Clone, Copy, Debug)]
struct Col2Im {
    channels: usize,
    height: usize,
    width: usize,
}

/// Visits `(patch row, patch column, image offset within one sample)` for
/// every in-bounds tap; `f` also receives the sample index.
fn for_each_tap(channels: usize, height: usize, width: usize, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (ho, wo) = (height / 2, width / 2);
    let k = Conv2d::KERNEL;
    let cols = channels * k * k;
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (b * ho + oy) * wo + ox;
                for c in 0..channels {
                    for ky in 0..k {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy as usize >= height {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix as usize >= width {
                                continue;
                            }
                            let col = c * k * k + ky * k + kx;
                            let img = ((b * channels + c) * height + iy as usize) * width + ix as usize;
                            f(row * cols + col, img, b);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Copy + Default>(x: &[T], channels: usize, height: usize, width: usize, batch: usize) -> Vec<T> {
    let mut out = vec![T::default(); batch * (height / 2) * (width / 2) * channels * 16];
    for_each_tap(channels, height, width, batch, |p, i, _| out[p] = x[i]);
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    batch: usize,
) -> Vec<T> {
    let mut out = vec![T::default(); batch * channels * height * width];
    for_each_tap(channels, height, width, batch, |p, i, _| out[i] += cols[p]);
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("patch ops need contiguous input".into())),
    }
}

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-k4s2p1"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let dims = layout.dims();
        if dims.len() != 4 || dims[1] != self.channels || dims[2] != self.height || dims[3] != self.width {
            return Err(candle_core::Error::Msg(format!("im2col got {dims:?}")));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(candle_core::Error::Msg("im2col needs even image sides".into()));
        }
        let n = dims[0];
        let (c, h, w) = (self.channels, self.height, self.width);
        let shape = candle_core::Shape::from((n * (h / 2) * (w / 2), c * 16));
        let out = match storage {
            S::F32(v) => S::F32(im2col(contiguous_slice(v, layout)?, c, h, w, n)),
            S::F64(v) => S::F64(im2col(contiguous_slice(v, layout)?, c, h, w, n)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1(Col2Im {
            channels: self.channels,
            height: self.height,
            width: self.width,
        })?;
        Ok(Some(g))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-k4s2p1"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (c, h, w) = (self.channels, self.height, self.width);
        let dims = layout.dims();
        let per_sample = (h / 2) * (w / 2);
        if dims.len() != 2 || dims[1] != c * 16 || per_sample == 0 || !dims[0].is_multiple_of(per_sample) {
            return Err(candle_core::Error::Msg(format!("col2im got {dims:?}")));
        }
        let n = dims[0] / per_sample;
        let shape = candle_core::Shape::from((n, c, h, w));
        let out = match storage {
            S::F32(v) => S::F32(col2im(contiguous_slice(v, layout)?, c, h, w, n)),
            S::F64(v) => S::F64(col2im(contiguous_slice(v, layout)?, c, h, w, n)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1(Im2Col {
            channels: self.channels,
            height: self.height,
            width: self.width,
        })?;
        Ok(Some(g))
    }
}

/// `layers` hidden blocks of Linear, LayerNorm, SiLU, then a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Vec<(Linear, LayerNorm)>,
    out: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, inp: usize, hidden: usize, layers: usize, out: usize, zero_out: bool) -> Result<Self> {
        let mut blocks = Vec::with_capacity(layers);
        let mut dim = inp;
        for i in 0..layers {
            let mut s = init.sub(&format!("h{i}"));
            let lin = Linear::new(&mut s.sub("lin"), dim, hidden)?;
            let norm = LayerNorm::new(&mut s.sub("norm"), hidden)?;
            blocks.push((lin, norm));
            dim = hidden;
        }
        let mut o = init.sub("out");
        let out = if zero_out {
            Linear::zeros(&mut o, dim, out)?
        } else {
            Linear::new(&mut o, dim, out)?
        };
        Ok(Self { hidden: blocks, out })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (lin, norm) in &self.hidden {
            h = norm.forward(&lin.forward(&h)?)?.silu()?;
        }
        self.out.forward(&h)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `ln(sigmoid(x))` computed as `-softplus(-x)` without overflow.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let neg = x.neg()?;
    let softplus = (neg.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok(softplus.neg()?)
}

/// One-hot rows for `indices` over `n` classes.
pub fn one_hot(indices: &[usize], n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; indices.len() * n];
    for (row, &i) in indices.iter().enumerate() {
        if i >= n {
            return Err(Error::contract(format!("index {i} out of range for {n} classes")));
        }
        data[row * n + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, (indices.len(), n), device)?.to_dtype(dtype)?)
}

/// Scalar view of a tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1000.0),
        }
    }
}

/// Adam with global-norm gradient clipping over one parameter group.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    params: Vec<Var>,
    moments: Vec<(Tensor, Tensor)>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        let params: Vec<Var> = store.vars().cloned().collect();
        let moments = params
            .iter()
            .map(|v| Ok((v.zeros_like()?, v.zeros_like()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            params,
            moments,
            steps: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> &[(Tensor, Tensor)] {
        &self.moments
    }

    pub fn restore(&mut self, steps: u64, moments: Vec<(Tensor, Tensor)>) -> Result<()> {
        if moments.len() != self.params.len() {
            return Err(Error::contract("optimizer state size mismatch"));
        }
        for ((m, v), p) in moments.iter().zip(&self.params) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::contract("optimizer moment shape mismatch"));
            }
        }
        self.steps = steps;
        self.moments = moments;
        Ok(())
    }

    /// Global L2 norm of the gradients this group owns.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.params {
            if let Some(g) = grads.get(p.as_tensor()) {
                total += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.steps += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (p, (m, v)) in self.params.iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * clip)?;
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&*v / bc2)?.sqrt()? + eps)?;
            let update = ((&*m / bc1)? / denom)?;
            let next = (p.as_tensor().detach() - (update * lr)?)?;
            p.set(&next)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        ParamStore::new(DType::F64, Device::Cpu)
    }

    fn conv_pair(transposed: bool) -> (Tensor, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut init = Init::new(&mut s, &mut rng);
        let (cin, cout, side) = (3, 5, 6);
        let x = Var::from_tensor(&Tensor::from_vec(
            (0..2 * cin * side * side).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect::<Vec<_>>(),
            (2, cin, side, side),
            &Device::Cpu,
        ).unwrap()).unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (ours, weight) = if transposed {
            let l = ConvTranspose2d::new(&mut init.sub("t"), cin, cout).unwrap();
            (l.forward(x.as_tensor()).unwrap(), l.weight.clone())
        } else {
            let l = Conv2d::new(&mut init.sub("c"), cin, cout).unwrap();
            (l.forward(x.as_tensor()).unwrap(), l.weight.clone())
        };
        let reference = if transposed {
            x.as_tensor().conv_transpose2d(weight.as_tensor(), 1, 0, 2, 1).unwrap()
        } else {
            x.as_tensor().conv2d(weight.as_tensor(), 1, 2, 1, 1).unwrap()
        };
        // Bias starts at zero, so outputs must match the library kernels.
        let probe = Tensor::from_vec(
            (0..reference.elem_count()).map(|i| (i % 7) as f64 - 3.0).collect::<Vec<_>>(),
            reference.dims(),
            &Device::Cpu,
        ).unwrap();
        let g_ours = ours.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g_ref = reference.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = |g: &GradStore| flat(g.get(x.as_tensor()).unwrap());
        let gw = |g: &GradStore| flat(g.get(weight.as_tensor()).unwrap());
        assert_eq!(ours.dims(), reference.dims());
        let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap();
        (diff, gx(&g_ours), gx(&g_ref), gw(&g_ours), gw(&g_ref))
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn patch_conv_matches_library_kernels() {
        for transposed in [false, true] {
            let (diff, gx, gx_ref, gw, gw_ref) = conv_pair(transposed);
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-10);
            assert_close(&gx, &gx_ref);
            assert_close(&gw, &gw_ref);
        }
    }

    #[test]
    fn detached_input_conv_matches_tracked() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(&mut Init::new(&mut s, &mut rng), 2, 3).unwrap();
        let x = Tensor::from_vec((0..2 * 2 * 4 * 4).map(|i| (i as f64).sin()).collect::<Vec<_>>(), (2, 2, 4, 4), &Device::Cpu).unwrap();
        let xv = Var::from_tensor(&x).unwrap();
        let a = conv.forward(&x).unwrap();
        let b = conv.forward(xv.as_tensor()).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let ga = a.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let gb = b.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let w = conv.weight.as_tensor();
        let flat = |g: &GradStore| g.get(w).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_close(&flat(&ga), &flat(&gb));
    }

    #[test]
    fn init_is_seeded() {
        let build = |seed| {
            let mut s = store();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut init = Init::new(&mut s, &mut rng);
            Linear::new(&mut init.sub("l"), 3, 4).unwrap();
            s.values().unwrap()[0].1.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn names_are_scoped() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut s, &mut rng);
        Mlp::new(&mut init.sub("mlp"), 2, 3, 1, 1, true).unwrap();
        let names: Vec<_> = s.named().map(|(n, _)| n.to_string()).collect();
        assert_eq!(
            names,
            ["mlp.h0.lin.w", "mlp.h0.lin.b", "mlp.h0.norm.g", "mlp.h0.norm.b", "mlp.out.w", "mlp.out.b"]
        );
    }

    #[test]
    fn conv_shapes() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut s, &mut rng);
        let c = Conv2d::new(&mut init.sub("c"), 3, 5).unwrap();
        let t = ConvTranspose2d::new(&mut init.sub("t"), 5, 2).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let y = c.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 5, 8, 8]);
        assert_eq!(t.forward(&y).unwrap().dims(), &[2, 2, 16, 16]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let x = Tensor::new(&[-800.0f64, -1.0, 0.0, 2.0, 800.0], &Device::Cpu).unwrap();
        let y = log_sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!((y[0] + 800.0).abs() < 1e-9);
        assert!((y[1] - (1.0 / (1.0 + 1f64.exp())).ln()).abs() < 1e-12);
        assert!((y[2] + 2f64.ln()).abs() < 1e-12);
        assert!(y[4].abs() < 1e-12);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut s, &mut rng);
        let w = init.uniform("w", &[4], 1.0).unwrap();
        let mut opt = Adam::new(&s, AdamConfig { lr: 0.05, ..Default::default() }).unwrap();
        let loss = |w: &Var| w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let start = scalar(&loss(&w)).unwrap();
        for _ in 0..200 {
            let g = loss(&w).backward().unwrap();
            opt.step(&g).unwrap();
        }
        assert!(scalar(&loss(&w)).unwrap() < start * 1e-3);
        assert_eq!(opt.steps(), 200);
    }

    #[test]
    fn clipping_bounds_first_update() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut s, &mut rng);
        let w = init.constant("w", &[1], 0.0).unwrap();
        let mut opt = Adam::new(&s, AdamConfig { lr: 1.0, clip_norm: Some(1.0), ..Default::default() }).unwrap();
        let g = (w.as_tensor() * 1e6).unwrap().sum_all().unwrap().backward().unwrap();
        let norm = opt.step(&g).unwrap();
        assert!((norm - 1e6).abs() < 1e-6);
        // Adam's first step has magnitude lr regardless of scale.
        let after = w.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((after + 1.0).abs() < 1e-6);
    }
}
