//! Fully-connected Q-network with hand-rolled backprop and Adam.
//!
//! The network maps a flattened stack of four `G^3` crops to one Q-value per
//! action: linear layers with LeakyReLU (slope 0.01) between them and a
//! linear output. It is generic over `f32`/`f64` so the analytic gradients
//! can be verified against finite differences in double precision, while
//! training runs in `f32`.
//!
//! Checkpoints use the little-endian `QNT1` format: magic, crop edge G,
//! layer count, per-layer (in, out) dims, then per layer all weights
//! (row-major, out x in) followed by biases.

use std::io::{Read, Write};
use std::path::Path;

use num_traits::Float;
use thiserror::Error;

use crate::geometry::ACTION_COUNT;
use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.01;
/// Crops per network input (the state keeps the four most recent).
pub const HISTORY_LEN: usize = 4;
pub const QNT1_MAGIC: [u8; 4] = *b"QNT1";
const MAX_LAYERS: u32 = 64;
const MAX_PARAMS: u64 = 1 << 25;

/// Float type the network can run in.
pub trait Scalar:
    Float + num_traits::NumAssignOps + std::fmt::Debug + Default + Send + Sync + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn fl<F: Scalar>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

/// Network input width for crop edge `g`.
pub fn input_dim_for(g: u32) -> usize {
    assert!(g <= 4096, "crop edge {g} out of range");
    HISTORY_LEN * (g as usize).pow(3)
}

/// Overflow-proof variant for untrusted header values.
fn input_dim_wide(g: u32) -> u128 {
    HISTORY_LEN as u128 * (g as u128).pow(3)
}

#[derive(Debug, Error)]
pub enum QNetError {
    #[error("input has {got} values, network expects {want}")]
    InputSize { got: usize, want: usize },
    #[error("output gradient has {got} values, expected {want}")]
    GradSize { got: usize, want: usize },
    #[error("bad magic bytes, expected \"QNT1\"")]
    MagicMismatch,
    #[error("checkpoint truncated: need {need} bytes, have {have}")]
    Truncated { need: u64, have: u64 },
    #[error("{extra} trailing bytes after checkpoint payload")]
    TrailingBytes { extra: u64 },
    #[error("checkpoint shape invalid: {0}")]
    ShapeMismatch(String),
    #[error("non-finite parameter in checkpoint")]
    NonFiniteParam,
    #[error("non-finite gradient; training diverged")]
    NonFiniteGradient,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct Layer<F> {
    /// Row-major `out_dim x in_dim`.
    pub w: Vec<F>,
    pub b: Vec<F>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Dot product with eight independent accumulators: an order-fixed,
/// deterministic summation that the optimizer can keep in SIMD lanes.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let mut chunks_a = a.chunks_exact(8);
    let mut chunks_b = b.chunks_exact(8);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        acc[0] += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline]
fn leaky<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        x
    } else {
        x * fl::<F>(LEAKY_SLOPE)
    }
}

/// LeakyReLU derivative, recovered from the post-activation value (the
/// slope is positive, so activation and pre-activation share their sign).
#[inline]
fn leaky_deriv<F: Scalar>(post: F) -> F {
    if post >= F::zero() {
        F::one()
    } else {
        fl::<F>(LEAKY_SLOPE)
    }
}

#[derive(Clone, Debug)]
pub struct QNetwork<F> {
    layers: Vec<Layer<F>>,
    input_dim: usize,
    crop_edge: u32,
}

/// Post-activation values per layer from one forward pass; the last entry
/// is the (linear) output.
pub struct ForwardTrace<F> {
    acts: Vec<Vec<F>>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn output(&self) -> &[F] {
        self.acts.last().expect("at least one layer")
    }
}

/// Per-parameter gradients, same shapes as the network.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub dw: Vec<Vec<F>>,
    pub db: Vec<Vec<F>>,
}

impl<F: Scalar> QNetwork<F> {
    /// Standard Q-network for crop edge `g`: input `4 * g^3`, the given
    /// hidden widths, and one output per action.
    pub fn new(g: u32, hidden: &[usize], seed: u64) -> Self {
        assert!(g > 0, "crop edge must be positive");
        Self::with_layout(input_dim_for(g), hidden, g, seed)
    }

    /// Arbitrary input width; `crop_edge` 0 marks a layout not tied to a
    /// crop grid (used by small test networks).
    pub fn with_layout(input_dim: usize, hidden: &[usize], crop_edge: u32, seed: u64) -> Self {
        assert!(input_dim > 0 && hidden.iter().all(|&h| h > 0));
        let mut rng = Rng::new(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &out in hidden.iter().chain(std::iter::once(&ACTION_COUNT)) {
            // Uniform +-sqrt(6 / fan_in); weights drawn row-major, biases 0.
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * out).map(|_| fl(rng.range_f64(-bound, bound))).collect();
            layers.push(Layer { w, b: vec![F::zero(); out], in_dim: fan_in, out_dim: out });
            fan_in = out;
        }
        QNetwork { layers, input_dim, crop_edge }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn crop_edge(&self) -> u32 {
        self.crop_edge
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Checks that the network was built for crop edge `g`; this is the
    /// guard that rejects a checkpoint trained at a different G.
    pub fn ensure_crop_edge(&self, g: u32) -> Result<(), QNetError> {
        if self.crop_edge != g || self.input_dim != input_dim_for(g) {
            return Err(QNetError::ShapeMismatch(format!(
                "checkpoint crop edge {} (input {}) does not match configured G={} (input {})",
                self.crop_edge,
                self.input_dim,
                g,
                input_dim_for(g)
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[F]) -> Result<Vec<F>, QNetError> {
        Ok(self.forward_trace(x)?.acts.pop_unwrap())
    }

    pub fn forward_trace(&self, x: &[F]) -> Result<ForwardTrace<F>, QNetError> {
        if x.len() != self.input_dim {
            return Err(QNetError::InputSize { got: x.len(), want: self.input_dim });
        }
        let n = self.layers.len();
        let mut acts: Vec<Vec<F>> = Vec::with_capacity(n);
        for (k, layer) in self.layers.iter().enumerate() {
            let prev: &[F] = if k == 0 { x } else { &acts[k - 1] };
            let last = k + 1 == n;
            let mut out = Vec::with_capacity(layer.out_dim);
            for o in 0..layer.out_dim {
                let z = dot(&layer.w[o * layer.in_dim..(o + 1) * layer.in_dim], prev) + layer.b[o];
                out.push(if last { z } else { leaky(z) });
            }
            acts.push(out);
        }
        Ok(ForwardTrace { acts })
    }

    pub fn zero_gradients(&self) -> Gradients<F> {
        Gradients {
            dw: self.layers.iter().map(|l| vec![F::zero(); l.w.len()]).collect(),
            db: self.layers.iter().map(|l| vec![F::zero(); l.b.len()]).collect(),
        }
    }

    /// Accumulates the gradients of `sum(out_grad * output)` for one sample
    /// into `grads`, reusing the forward pass in `trace`.
    pub fn backward_from_trace(
        &self,
        x: &[F],
        trace: &ForwardTrace<F>,
        out_grad: &[F],
        grads: &mut Gradients<F>,
    ) -> Result<(), QNetError> {
        if out_grad.len() != ACTION_COUNT {
            return Err(QNetError::GradSize { got: out_grad.len(), want: ACTION_COUNT });
        }
        if x.len() != self.input_dim {
            return Err(QNetError::InputSize { got: x.len(), want: self.input_dim });
        }
        // The output layer is linear, so its delta is the output gradient.
        let mut delta = out_grad.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let prev: &[F] = if k == 0 { x } else { &trace.acts[k - 1] };
            let (dw, db) = (&mut grads.dw[k], &mut grads.db[k]);
            for o in 0..layer.out_dim {
                let d = delta[o];
                db[o] += d;
                let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (slot, p) in row.iter_mut().zip(prev) {
                    *slot += d * *p;
                }
            }
            if k > 0 {
                // delta_prev = phi'(z_prev) * W^T delta
                let prev_acts = &trace.acts[k - 1];
                let mut next = vec![F::zero(); layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (slot, w) in next.iter_mut().zip(row) {
                        *slot += d * *w;
                    }
                }
                for (slot, a) in next.iter_mut().zip(prev_acts) {
                    *slot *= leaky_deriv(*a);
                }
                delta = next;
            }
        }
        Ok(())
    }

    /// One-shot gradient of `sum(out_grad * forward(x))`.
    pub fn backward(&self, x: &[F], out_grad: &[F]) -> Result<Gradients<F>, QNetError> {
        let trace = self.forward_trace(x)?;
        let mut grads = self.zero_gradients();
        self.backward_from_trace(x, &trace, out_grad, &mut grads)?;
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&QNT1_MAGIC);
        out.extend_from_slice(&self.crop_edge.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.w.iter().chain(&l.b) {
                out.extend_from_slice(&v.to_f32().expect("finite parameter").to_le_bytes());
            }
        }
        out
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), QNetError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }
}

impl QNetwork<f32> {
    /// Decodes a `QNT1` checkpoint. The header is fully validated (layer
    /// chain consistency, action count, crop edge vs input width, bounded
    /// parameter count) before the parameter buffer is touched, and every
    /// parameter must be finite.
    pub fn from_bytes(data: &[u8]) -> Result<QNetwork<f32>, QNetError> {
        let need_min = 12u64;
        if data.len() < 4 {
            return Err(QNetError::Truncated { need: need_min, have: data.len() as u64 });
        }
        if data[..4] != QNT1_MAGIC {
            return Err(QNetError::MagicMismatch);
        }
        if data.len() < 12 {
            return Err(QNetError::Truncated { need: need_min, have: data.len() as u64 });
        }
        let u32_at = |off: usize| u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
        let crop_edge = u32_at(4);
        let layer_count = u32_at(8);
        if layer_count == 0 || layer_count > MAX_LAYERS {
            return Err(QNetError::ShapeMismatch(format!("layer count {layer_count} out of range")));
        }
        let header_len = 12 + 8 * layer_count as u64;
        if (data.len() as u64) < header_len {
            return Err(QNetError::Truncated { need: header_len, have: data.len() as u64 });
        }
        let mut dims = Vec::with_capacity(layer_count as usize);
        for i in 0..layer_count as usize {
            let in_dim = u32_at(12 + 8 * i);
            let out_dim = u32_at(16 + 8 * i);
            if in_dim == 0 || out_dim == 0 {
                return Err(QNetError::ShapeMismatch(format!("layer {i} has a zero dimension")));
            }
            dims.push((in_dim as u64, out_dim as u64));
        }
        for (i, win) in dims.windows(2).enumerate() {
            if win[0].1 != win[1].0 {
                return Err(QNetError::ShapeMismatch(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    win[0].1,
                    i + 1,
                    win[1].0
                )));
            }
        }
        if dims.last().unwrap().1 != ACTION_COUNT as u64 {
            return Err(QNetError::ShapeMismatch(format!(
                "final layer must output {ACTION_COUNT} action values, found {}",
                dims.last().unwrap().1
            )));
        }
        if crop_edge > 0 && dims[0].0 as u128 != input_dim_wide(crop_edge) {
            return Err(QNetError::ShapeMismatch(format!(
                "crop edge {} implies input {}, header says {}",
                crop_edge,
                input_dim_wide(crop_edge),
                dims[0].0
            )));
        }
        // Widened: 64 layers of u32 x u32 weights can overflow u64.
        let params_wide: u128 = dims.iter().map(|&(i, o)| (i as u128) * (o as u128) + o as u128).sum();
        if params_wide > MAX_PARAMS as u128 {
            return Err(QNetError::ShapeMismatch(format!("parameter count {params_wide} too large")));
        }
        let params = params_wide as u64;
        let need = header_len + params * 4;
        let have = data.len() as u64;
        if have < need {
            return Err(QNetError::Truncated { need, have });
        }
        if have > need {
            return Err(QNetError::TrailingBytes { extra: have - need });
        }
        let mut off = header_len as usize;
        let mut take = |n: usize| {
            let vals: Vec<f32> = data[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * n;
            vals
        };
        let mut layers = Vec::with_capacity(dims.len());
        for &(in_dim, out_dim) in &dims {
            let (in_dim, out_dim) = (in_dim as usize, out_dim as usize);
            let w = take(in_dim * out_dim);
            let b = take(out_dim);
            if w.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(QNetError::NonFiniteParam);
            }
            layers.push(Layer { w, b, in_dim, out_dim });
        }
        Ok(QNetwork { layers, input_dim: dims[0].0 as usize, crop_edge })
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<QNetwork<f32>, QNetError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        QNetwork::from_bytes(&data)
    }
}

// Small ergonomic shim: `forward` wants to move the last activation out.
trait PopUnwrap<T> {
    fn pop_unwrap(self) -> T;
}
impl<T> PopUnwrap<T> for Vec<T> {
    fn pop_unwrap(mut self) -> T {
        self.pop().expect("non-empty")
    }
}

/// Frozen copy of the online network used for bootstrap targets.
#[derive(Clone, Debug)]
pub struct TargetNetwork<F> {
    net: QNetwork<F>,
}

impl<F: Scalar> TargetNetwork<F> {
    pub fn from_net(net: &QNetwork<F>) -> Self {
        TargetNetwork { net: net.clone() }
    }

    /// Replaces the frozen parameters with the online network's.
    pub fn sync(&mut self, net: &QNetwork<F>) {
        self.net = net.clone();
    }

    pub fn net(&self) -> &QNetwork<F> {
        &self.net
    }

    pub fn forward(&self, x: &[F]) -> Result<Vec<F>, QNetError> {
        self.net.forward(x)
    }
}

/// Anything that scores the 11 actions from a flattened state. Implemented
/// by the real network and by test stubs driving the evaluator.
pub trait QValues {
    fn q_values(&self, input: &[f32]) -> [f32; ACTION_COUNT];
}

impl QValues for QNetwork<f32> {
    fn q_values(&self, input: &[f32]) -> [f32; ACTION_COUNT] {
        let out = self.forward(input).expect("input sized for network");
        out.try_into().expect("one value per action")
    }
}

impl QValues for TargetNetwork<f32> {
    fn q_values(&self, input: &[f32]) -> [f32; ACTION_COUNT] {
        self.net.q_values(input)
    }
}

/// Adam optimizer state (one slot pair per parameter).
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: u64,
    m_w: Vec<Vec<F>>,
    v_w: Vec<Vec<F>>,
    m_b: Vec<Vec<F>>,
    v_b: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(lr: f64, net: &QNetwork<F>) -> Self {
        AdamState {
            lr: fl(lr),
            beta1: fl(0.9),
            beta2: fl(0.999),
            eps: fl(1e-8),
            t: 0,
            m_w: net.layers.iter().map(|l| vec![F::zero(); l.w.len()]).collect(),
            v_w: net.layers.iter().map(|l| vec![F::zero(); l.w.len()]).collect(),
            m_b: net.layers.iter().map(|l| vec![F::zero(); l.b.len()]).collect(),
            v_b: net.layers.iter().map(|l| vec![F::zero(); l.b.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any parameter, so a diverged batch cannot corrupt the net.
    pub fn step(&mut self, net: &mut QNetwork<F>, grads: &Gradients<F>) -> Result<(), QNetError> {
        for g in grads.dw.iter().chain(&grads.db).flatten() {
            if !g.is_finite() {
                return Err(QNetError::NonFiniteGradient);
            }
        }
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t as i32);
        let bc2 = F::one() - self.beta2.powi(self.t as i32);
        let one = F::one();
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let update = |params: &mut [F], grads: &[F], m: &mut [F], v: &mut [F]| {
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            };
            update(&mut layer.w, &grads.dw[k], &mut self.m_w[k], &mut self.v_w[k]);
            update(&mut layer.b, &grads.db[k], &mut self.m_b[k], &mut self.v_b[k]);
        }
        Ok(())
    }
}
