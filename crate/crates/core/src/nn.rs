//! Small f64 building blocks with hand-written backward passes.
//!
//! Feature maps are stored channel-major (`data[c * len + t]`). Every layer
//! keeps its weights in a [`ParamSet`] slot and accumulates gradients into a
//! matching [`Grads`] buffer, so a whole network can be optimized, saved and
//! finite-difference checked through one flat parameter list.

use rand::Rng;

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Saturating heads never reach their open-interval bounds exactly.
const SATURATION_MARGIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.params.len() - 1
    }

    pub fn get(&self, index: usize) -> &[f64] {
        &self.params[index].data
    }

    pub fn get_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.params[index].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    /// Maps a flat index (concatenation order) to `(tensor, offset)`.
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize)> {
        for (i, p) in self.params.iter().enumerate() {
            if flat < p.data.len() {
                return Some((i, flat));
            }
            flat -= p.data.len();
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffer shaped like a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.0[index]
    }

    pub fn get(&self, index: usize) -> &[f64] {
        &self.0[index]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= factor;
        }
    }

    pub fn flat(&self, index: usize, offset: usize) -> f64 {
        self.0[index][offset]
    }
}

/// A multi-channel 1-D feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Signal {
    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn mono(samples: &[f64]) -> Self {
        Self {
            channels: 1,
            len: samples.len(),
            data: samples.to_vec(),
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cols: usize,
}

impl Geometry {
    /// Valid column range `[lo, hi)` for kernel tap `j`.
    fn col_range(&self, j: usize) -> (usize, usize) {
        // position = t * stride + j - padding must lie in [0, len)
        let lo = if j >= self.padding {
            0
        } else {
            (self.padding - j).div_ceil(self.stride)
        };
        let hi = if self.len + self.padding > j {
            ((self.len + self.padding - j - 1) / self.stride + 1).min(self.cols)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col(src: &[f64], g: Geometry) -> Vec<f64> {
    let mut cols = vec![0.0; g.channels * g.kernel * g.cols];
    for c in 0..g.channels {
        let chan = &src[c * g.len..(c + 1) * g.len];
        for j in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + j) * g.cols..(c * g.kernel + j + 1) * g.cols];
            let (lo, hi) = g.col_range(j);
            for (t, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
                *slot = chan[t * g.stride + j - g.padding];
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: Geometry) -> Vec<f64> {
    let mut dst = vec![0.0; g.channels * g.len];
    for c in 0..g.channels {
        for j in 0..g.kernel {
            let row = &cols[(c * g.kernel + j) * g.cols..(c * g.kernel + j + 1) * g.cols];
            let (lo, hi) = g.col_range(j);
            let chan = &mut dst[c * g.len..(c + 1) * g.len];
            for (t, v) in row.iter().enumerate().take(hi).skip(lo) {
                chan[t * g.stride + j - g.padding] += *v;
            }
        }
    }
    dst
}

/// He-uniform for leaky rectifiers: keeps activation variance roughly
/// constant through deep stacks.
fn uniform_fill(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
    let bound = (3.0 * gain / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Biases get the plain `1/sqrt(fan_in)` bound.
fn bias_fill(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Strided 1-D convolution with symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: usize,
    bias: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n = out_channels * in_channels * kernel;
        let weight = params.push(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel],
            uniform_fill(rng, n, in_channels * kernel),
        );
        let bias = params.push(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn geometry(&self, len: usize, cols: usize) -> Geometry {
        Geometry {
            channels: self.in_channels,
            len,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            cols,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Signal) -> Signal {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let out_len = self.out_len(x.len).expect("conv input shorter than kernel");
        let cols = im2col(&x.data, self.geometry(x.len, out_len));
        let mut y = Signal::zeros(self.out_channels, out_len);
        let inner = self.in_channels * self.kernel;
        gemm(
            self.out_channels,
            inner,
            out_len,
            params.get(self.weight),
            inner,
            1,
            &cols,
            out_len,
            1,
            0.0,
            &mut y.data,
            out_len,
            1,
        );
        let bias = params.get(self.bias);
        for (o, row) in y.data.chunks_mut(out_len).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[o]);
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        params: &ParamSet,
        x: &Signal,
        grad_out: &Signal,
        grads: &mut Grads,
        input_grad: bool,
    ) -> Option<Signal> {
        let out_len = grad_out.len;
        let geometry = self.geometry(x.len, out_len);
        let cols = im2col(&x.data, geometry);
        let inner = self.in_channels * self.kernel;
        gemm(
            self.out_channels,
            out_len,
            inner,
            &grad_out.data,
            out_len,
            1,
            &cols,
            1,
            out_len,
            1.0,
            grads.get_mut(self.weight),
            inner,
            1,
        );
        let db = grads.get_mut(self.bias);
        for (o, row) in grad_out.data.chunks(out_len).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        if !input_grad {
            return None;
        }
        let mut dcols = vec![0.0; inner * out_len];
        gemm(
            inner,
            self.out_channels,
            out_len,
            params.get(self.weight),
            1,
            inner,
            &grad_out.data,
            out_len,
            1,
            0.0,
            &mut dcols,
            out_len,
            1,
        );
        Some(Signal {
            channels: self.in_channels,
            len: x.len,
            data: col2im(&dcols, geometry),
        })
    }
}

/// Strided transposed 1-D convolution; the adjoint of [`Conv1d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: usize,
    bias: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n = in_channels * out_channels * kernel;
        let fan_in = in_channels * kernel / stride.max(1);
        let weight = params.push(
            format!("{name}.weight"),
            vec![in_channels, out_channels, kernel],
            uniform_fill(rng, n, fan_in),
        );
        let bias = params.push(
            format!("{name}.bias"),
            vec![out_channels],
            bias_fill(rng, out_channels, fan_in),
        );
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let full = (len.checked_sub(1)?) * self.stride + self.kernel;
        full.checked_sub(2 * self.padding)
    }

    fn geometry(&self, out_len: usize, cols: usize) -> Geometry {
        Geometry {
            channels: self.out_channels,
            len: out_len,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            cols,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Signal) -> Signal {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channels");
        let out_len = self.out_len(x.len).expect("transposed conv output is empty");
        let inner = self.out_channels * self.kernel;
        let mut cols = vec![0.0; inner * x.len];
        gemm(
            inner,
            self.in_channels,
            x.len,
            params.get(self.weight),
            1,
            inner,
            &x.data,
            x.len,
            1,
            0.0,
            &mut cols,
            x.len,
            1,
        );
        let mut data = col2im(&cols, self.geometry(out_len, x.len));
        let bias = params.get(self.bias);
        for (o, row) in data.chunks_mut(out_len).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[o]);
        }
        Signal {
            channels: self.out_channels,
            len: out_len,
            data,
        }
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        x: &Signal,
        grad_out: &Signal,
        grads: &mut Grads,
        input_grad: bool,
    ) -> Option<Signal> {
        let inner = self.out_channels * self.kernel;
        let dcols = im2col(&grad_out.data, self.geometry(grad_out.len, x.len));
        gemm(
            self.in_channels,
            x.len,
            inner,
            &x.data,
            x.len,
            1,
            &dcols,
            1,
            x.len,
            1.0,
            grads.get_mut(self.weight),
            inner,
            1,
        );
        let db = grads.get_mut(self.bias);
        for (o, row) in grad_out.data.chunks(grad_out.len).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        if !input_grad {
            return None;
        }
        let mut dx = Signal::zeros(self.in_channels, x.len);
        gemm(
            self.in_channels,
            inner,
            x.len,
            params.get(self.weight),
            inner,
            1,
            &dcols,
            x.len,
            1,
            0.0,
            &mut dx.data,
            x.len,
            1,
        );
        Some(dx)
    }
}

/// Fully connected layer on a flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            vec![outputs, inputs],
            uniform_fill(rng, inputs * outputs, inputs),
        );
        let bias = params.push(format!("{name}.bias"), vec![outputs], bias_fill(rng, outputs, inputs));
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let w = params.get(self.weight);
        params
            .get(self.bias)
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        x: &[f64],
        grad_out: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let dw = grads.get_mut(self.weight);
        for (o, g) in grad_out.iter().enumerate() {
            let row = &mut dw[o * self.inputs..(o + 1) * self.inputs];
            row.iter_mut().zip(x).for_each(|(d, xi)| *d += g * xi);
        }
        let db = grads.get_mut(self.bias);
        db.iter_mut().zip(grad_out).for_each(|(d, g)| *d += g);
        let w = params.get(self.weight);
        let mut dx = vec![0.0; self.inputs];
        for (o, g) in grad_out.iter().enumerate() {
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            dx.iter_mut().zip(row).for_each(|(d, wi)| *d += g * wi);
        }
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    /// Hyperbolic tangent, kept strictly inside (-1, 1).
    Tanh,
    /// Logistic function, kept strictly inside (0, 1).
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, values: &mut [f64]) {
        match self {
            Activation::LeakyRelu => values.iter_mut().for_each(|v| {
                if *v <= 0.0 {
                    *v *= LEAKY_SLOPE
                }
            }),
            Activation::Tanh => values.iter_mut().for_each(|v| {
                let bound = 1.0 - SATURATION_MARGIN;
                *v = v.tanh().clamp(-bound, bound)
            }),
            Activation::Sigmoid => values.iter_mut().for_each(|v| {
                *v = sigmoid(*v).clamp(f64::MIN_POSITIVE, 1.0 - SATURATION_MARGIN)
            }),
        }
    }

    /// Multiplies `grad` in place by the derivative, given the activation's output.
    pub fn backprop(self, output: &[f64], grad: &mut [f64]) {
        match self {
            Activation::LeakyRelu => grad.iter_mut().zip(output).for_each(|(g, y)| {
                if *y <= 0.0 {
                    *g *= LEAKY_SLOPE
                }
            }),
            Activation::Tanh => grad.iter_mut().zip(output).for_each(|(g, y)| {
                if y.abs() >= 1.0 - SATURATION_MARGIN {
                    *g = 0.0
                } else {
                    *g *= 1.0 - y * y
                }
            }),
            Activation::Sigmoid => grad.iter_mut().zip(output).for_each(|(g, y)| {
                if *y <= f64::MIN_POSITIVE || *y >= 1.0 - SATURATION_MARGIN {
                    *g = 0.0
                } else {
                    *g *= y * (1.0 - y)
                }
            }),
        }
    }
}

/// Variance floor inside the pooled standard deviation.
pub const POOL_VAR_FLOOR: f64 = 1e-5;

/// Mean and standard deviation of every channel over time, concatenated.
pub fn stats_pool(x: &Signal) -> Vec<f64> {
    let n = x.len as f64;
    let mut means = Vec::with_capacity(x.channels);
    let mut stds = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let ch = x.channel(c);
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        means.push(mean);
        stds.push((var + POOL_VAR_FLOOR).sqrt());
    }
    means.extend(stds);
    means
}

pub fn stats_pool_backward(x: &Signal, pooled: &[f64], grad: &[f64]) -> Signal {
    let n = x.len as f64;
    let mut dx = Signal::zeros(x.channels, x.len);
    for c in 0..x.channels {
        let mean = pooled[c];
        let std = pooled[x.channels + c];
        let g_mean = grad[c] / n;
        let g_std = grad[x.channels + c] / (n * std);
        let src = x.channel(c);
        let dst = &mut dx.data[c * x.len..(c + 1) * x.len];
        for (d, v) in dst.iter_mut().zip(src) {
            *d = g_mean + g_std * (v - mean);
        }
    }
    dx
}

/// Adaptive-moment optimizer without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &Grads, learning_rate: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (k, w) in p.data.iter_mut().enumerate() {
                let g = grads.0[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= learning_rate * update;
            }
        }
    }
}
