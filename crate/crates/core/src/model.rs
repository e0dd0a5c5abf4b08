//! Multilayer perceptrons with explicit forward/backward passes, the
//! Adam/SGD optimizer, the step-decay learning-rate schedule and the binary
//! checkpoint format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// What a network is used for. Only informational; it does not change the math.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Learner,
    Adversary,
    LabelHead,
}

/// A dense layer computing `act(x · W + b)` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    role: Role,
}

/// Intermediate values retained by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn layer_count(&self) -> usize {
        self.pre.len()
    }

    pub fn output(&self) -> &Matrix {
        self.post.last().expect("trace has at least one layer")
    }
}

/// Parameter gradients, one `(dW, db)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpGrads {
    /// Flattened in the same order as [`Mlp::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// Builds a network with `sizes.len() - 1` layers.
    ///
    /// Weights are drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`, biases
    /// start at zero.
    pub fn init(
        sizes: &[usize],
        activations: &[Activation],
        role: Role,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid_config(
                "layer_sizes",
                "need at least an input and an output size",
            ));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(Error::DimensionMismatch {
                context: "Mlp::init activations",
                expected: sizes.len() - 1,
                actual: activations.len(),
            });
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid_config(
                "layer_sizes",
                format!("size at position {pos} is zero"),
            ));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(pair, &activation)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_in(-limit, limit))
                    .collect();
                Layer {
                    weight: Matrix::new(fan_in, fan_out, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Ok(Self { layers, role })
    }

    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>, role: Role) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid_config("layers", "empty layer list"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    context: "Mlp::from_layers bias",
                    expected: layer.out_dim(),
                    actual: layer.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::DimensionMismatch {
                    context: "Mlp::from_layers chain",
                    expected: layers[i - 1].out_dim(),
                    actual: layer.in_dim(),
                });
            }
        }
        Ok(Self { layers, role })
    }

    /// The pseudo-label adversary: three hidden layers of 256 sigmoid units
    /// and `classes` sigmoid outputs.
    pub fn adversary_256x3(input_dim: usize, classes: usize, rng: &mut RngStream) -> Result<Self> {
        Self::init(
            &[input_dim, 256, 256, 256, classes],
            &[Activation::Sigmoid; 4],
            Role::Adversary,
            rng,
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim() * l.out_dim() + l.out_dim())
            .sum()
    }

    /// All parameters, per layer: weights row-major, then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "Mlp::set_flat_params",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weight.as_slice().len();
            layer
                .weight
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "Mlp::forward input",
                expected: self.input_dim(),
                actual: inputs.cols(),
            });
        }
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        let mut current = inputs.clone();
        for layer in &self.layers {
            let mut pre = current.matmul(&layer.weight)?;
            for r in 0..pre.rows() {
                for (v, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let post = pre.map(|x| layer.activation.apply(x));
            trace.inputs.push(current);
            trace.pre.push(pre);
            current = post.clone();
            trace.post.push(post);
        }
        Ok((current, trace))
    }

    /// Forward pass without retaining a trace.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs).map(|(out, _)| out)
    }

    /// Reverse-mode gradients of `Σ ⟨outputs, output_grads⟩` with respect to
    /// every parameter and to the inputs.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        output_grads: &Matrix,
    ) -> Result<(MlpGrads, Matrix)> {
        if trace.layer_count() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                context: "Mlp::backward trace layers",
                expected: self.layers.len(),
                actual: trace.layer_count(),
            });
        }
        let out = trace.output();
        if output_grads.shape() != out.shape() {
            return Err(Error::DimensionMismatch {
                context: "Mlp::backward output grads",
                expected: out.rows() * out.cols(),
                actual: output_grads.rows() * output_grads.cols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grads.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre[i];
            let post = &trace.post[i];
            if pre.cols() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    context: "Mlp::backward trace shape",
                    expected: layer.out_dim(),
                    actual: pre.cols(),
                });
            }
            let mut delta = upstream;
            for ((d, &x), &y) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(pre.as_slice())
                .zip(post.as_slice())
            {
                *d *= layer.activation.derivative(x, y);
            }
            let dw = trace.inputs[i].t_matmul(&delta)?;
            let mut db = vec![0.0; layer.out_dim()];
            for row in delta.row_iter() {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            upstream = delta.matmul_t(&layer.weight)?;
            grads.push((dw, db));
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, upstream))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        let moments = matches!(kind, OptimizerKind::Adam { .. });
        Self {
            kind,
            first: if moments {
                vec![0.0; param_count]
            } else {
                Vec::new()
            },
            second: if moments {
                vec![0.0; param_count]
            } else {
                Vec::new()
            },
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One update of `params` along (`Maximize`) or against (`Minimize`) `grads`.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        direction: Direction,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                context: "OptimizerState::step",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if !(lr >= 0.0) {
            return Err(Error::invalid_config(
                "lr",
                "learning rate must be non-negative",
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "optimizer gradient",
                coordinate: i,
            });
        }
        let sign = match direction {
            Direction::Minimize => 1.0,
            Direction::Maximize => -1.0,
        };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * (sign * g);
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if self.first.len() != params.len() {
                    return Err(Error::DimensionMismatch {
                        context: "OptimizerState::step moments",
                        expected: self.first.len(),
                        actual: params.len(),
                    });
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = sign * grads[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let total = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if total > max_norm && total.is_finite() {
        let factor = max_norm / total;
        for g in grads.iter_mut() {
            *g *= factor;
        }
    }
    total
}

/// Step decay: `base_lr · decay_factor^⌊epoch / decay_interval_epochs⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval_epochs: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            decay_factor: 0.95,
            decay_interval_epochs: 3,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid_config("decay_factor", "must be in (0, 1]"));
        }
        if self.decay_interval_epochs == 0 {
            return Err(Error::invalid_config(
                "decay_interval_epochs",
                "must be >= 1",
            ));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::invalid_config("base_lr", "must be non-negative"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: u32) -> f64 {
        let decays = epoch / self.decay_interval_epochs.max(1);
        self.base_lr * self.decay_factor.powi(decays as i32)
    }
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"ARWM";
const CHECKPOINT_VERSION: u16 = 1;

/// Serializes a network:
///
/// ```text
/// magic "ARWM" | version u16 | layer count u32 |
///   per layer: in u32 | out u32 | activation u8 | weights f64[in·out] | biases f64[out]
/// ```
///
/// All integers and floats little-endian, weights row-major.
pub fn encode_checkpoint(mlp: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + mlp.param_count() * 8 + mlp.layers.len() * 9);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
    for layer in &mlp.layers {
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        out.push(layer.activation.code());
        for w in layer.weight.as_slice() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for b in &layer.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.offset;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.offset,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }

    pub(crate) fn finish(self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8], role: Role) -> Result<Mlp> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(FormatError::InvariantViolation("checkpoint has no layers".into()).into());
    }
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let code = r.u8()?;
        let activation = Activation::from_code(code).ok_or_else(|| {
            FormatError::InvariantViolation(format!("unknown activation code {code}"))
        })?;
        let n = in_dim.checked_mul(out_dim).ok_or_else(|| {
            FormatError::InvariantViolation(format!("layer size {in_dim}x{out_dim} overflows"))
        })?;
        let weights = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let bias = (0..out_dim)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>, _>>()?;
        layers.push(Layer {
            weight: Matrix::new(in_dim, out_dim, weights)?,
            bias,
            activation,
        });
    }
    r.finish()?;
    Mlp::from_layers(layers, role)
        .map_err(|e| FormatError::InvariantViolation(e.to_string()).into())
}

pub fn save_checkpoint(mlp: &Mlp, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(mlp)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, role: Role) -> Result<Mlp> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, role)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error};
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_structured() {
        let a = Mlp::init(
            &[64, 32],
            &[Activation::Identity],
            Role::Learner,
            &mut RngStream::new(9),
        )
        .unwrap();
        let b = Mlp::init(
            &[64, 32],
            &[Activation::Identity],
            Role::Learner,
            &mut RngStream::new(9),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 64 * 32 + 32);

        let deep = Mlp::init(
            &[8, 256, 256, 256, 128],
            &[Activation::Relu; 4],
            Role::Learner,
            &mut RngStream::new(1),
        )
        .unwrap();
        assert_eq!(deep.layers().len(), 4);

        let adv = Mlp::adversary_256x3(32, 8, &mut RngStream::new(1)).unwrap();
        let hidden: Vec<usize> = adv.layers()[..3].iter().map(Layer::out_dim).collect();
        assert_eq!(hidden, vec![256, 256, 256]);
        assert!(adv
            .layers()
            .iter()
            .all(|l| l.activation == Activation::Sigmoid));
        assert_eq!(adv.output_dim(), 8);
    }

    #[test]
    fn init_rejects_empty() {
        assert!(Mlp::init(&[], &[], Role::Learner, &mut RngStream::new(0)).is_err());
        assert!(Mlp::init(&[4], &[], Role::Learner, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn init_respects_glorot_limit() {
        let net = Mlp::init(
            &[10, 6],
            &[Activation::Relu],
            Role::Learner,
            &mut RngStream::new(3),
        )
        .unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(net.layers()[0]
            .weight
            .as_slice()
            .iter()
            .all(|w| w.abs() <= limit));
        assert!(net.layers()[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn affine_forward_is_exact() {
        let layer = Layer {
            weight: Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [-1.0, 0.5]]).unwrap(),
            bias: vec![0.25, -1.0],
            activation: Activation::Identity,
        };
        let net = Mlp::from_layers(vec![layer], Role::Learner).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]]).unwrap();
        let (y, trace) = net.forward(&x).unwrap();
        assert_eq!(
            y.as_slice(),
            &[1.0 - 2.0 + 0.25, 2.0 + 1.0 - 1.0, 3.25, 3.0]
        );
        assert_eq!(trace.layer_count(), 1);
    }

    #[test]
    fn zero_input_relu_net_gives_zero() {
        let net = Mlp::init(
            &[5, 7, 3],
            &[Activation::Relu; 2],
            Role::Learner,
            &mut RngStream::new(2),
        )
        .unwrap();
        let (y, _) = net.forward(&Matrix::zeros(4, 5)).unwrap();
        assert_eq!(y.shape(), (4, 3));
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_width() {
        let net = Mlp::init(
            &[5, 3],
            &[Activation::Relu],
            Role::Learner,
            &mut RngStream::new(2),
        )
        .unwrap();
        assert!(net.forward(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3u64 {
            for act in [Activation::Identity, Activation::Relu, Activation::Sigmoid] {
                let mut rng = RngStream::new(100 + seed);
                let net = Mlp::init(&[6, 5, 4], &[act, act], Role::Learner, &mut rng).unwrap();
                let x = random_matrix(3, 6, &mut rng);
                let g = random_matrix(3, 4, &mut rng);
                let (_, trace) = net.forward(&x).unwrap();
                let (pg, ig) = net.backward(&trace, &g).unwrap();

                let flat = net.flat_params();
                let objective = |p: &[f64]| {
                    let mut n = net.clone();
                    n.set_flat_params(p).unwrap();
                    let y = n.predict(&x).unwrap();
                    crate::numerics::dot(y.as_slice(), g.as_slice())
                };
                let numeric = finite_diff_gradient(objective, &flat, 1e-5).unwrap();
                for (i, (&a, &n)) in pg.flatten().iter().zip(&numeric).enumerate() {
                    if a.abs() > 1e-8 || n.abs() > 1e-8 {
                        assert!(
                            relative_error(a, n, 1e-6) < 1e-4,
                            "seed {seed} {act:?} coord {i}: {a} vs {n}"
                        );
                    }
                }
                let numeric_x = finite_diff_gradient(
                    |xs| {
                        let m = Matrix::new(3, 6, xs.to_vec()).unwrap();
                        crate::numerics::dot(net.predict(&m).unwrap().as_slice(), g.as_slice())
                    },
                    x.as_slice(),
                    1e-5,
                )
                .unwrap();
                for (&a, &n) in ig.as_slice().iter().zip(&numeric_x) {
                    assert!(relative_error(a, n, 1e-6) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn zero_output_grads_give_zero_gradients() {
        let mut rng = RngStream::new(4);
        let net = Mlp::init(
            &[3, 4, 2],
            &[Activation::Sigmoid; 2],
            Role::Learner,
            &mut rng,
        )
        .unwrap();
        let x = random_matrix(2, 3, &mut rng);
        let (_, trace) = net.forward(&x).unwrap();
        let (pg, ig) = net.backward(&trace, &Matrix::zeros(2, 2)).unwrap();
        assert!(pg.flatten().iter().all(|&v| v == 0.0));
        assert!(ig.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_input_grads_are_upstream_times_wt() {
        let mut rng = RngStream::new(5);
        let net = Mlp::init(&[4, 3], &[Activation::Identity], Role::Learner, &mut rng).unwrap();
        let x = random_matrix(2, 4, &mut rng);
        let g = random_matrix(2, 3, &mut rng);
        let (_, trace) = net.forward(&x).unwrap();
        let (_, ig) = net.backward(&trace, &g).unwrap();
        let expected = g.matmul(&net.layers()[0].weight.transpose()).unwrap();
        for (a, b) in ig.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let mut rng = RngStream::new(6);
        let a = Mlp::init(&[3, 2], &[Activation::Relu], Role::Learner, &mut rng).unwrap();
        let b = Mlp::init(&[3, 2, 2], &[Activation::Relu; 2], Role::Learner, &mut rng).unwrap();
        let (_, trace) = a.forward(&Matrix::zeros(1, 3)).unwrap();
        assert!(b.backward(&trace, &Matrix::zeros(1, 2)).is_err());
        assert!(a.backward(&trace, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn optimizer_descends_and_ascends() {
        for kind in [OptimizerKind::default(), OptimizerKind::Sgd] {
            let mut x = [1.0];
            let mut state = OptimizerState::new(kind, 1);
            state
                .step(&mut x, &[2.0 * 1.0], Direction::Minimize, 0.1)
                .unwrap();
            assert!(x[0] * x[0] < 1.0);
            assert_eq!(state.steps(), 1);

            let mut y = [1.0];
            let mut state = OptimizerState::new(kind, 1);
            state
                .step(&mut y, &[-2.0 * 1.0], Direction::Maximize, 0.1)
                .unwrap();
            assert!(-(y[0] * y[0]) > -1.0);
        }
    }

    #[test]
    fn maximize_is_minimize_of_negated_gradient() {
        let grads = [0.3, -1.7, 2.5e-3, 0.0];
        let mut a = [1.0, -2.0, 0.5, 3.0];
        let mut b = a;
        let mut sa = OptimizerState::new(OptimizerKind::default(), 4);
        let mut sb = sa.clone();
        for _ in 0..5 {
            sa.step(&mut a, &grads, Direction::Maximize, 0.01).unwrap();
            let neg: Vec<f64> = grads.iter().map(|g| -g).collect();
            sb.step(&mut b, &neg, Direction::Minimize, 0.01).unwrap();
        }
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_lr_is_identity_and_nan_is_rejected() {
        let mut p = [1.5, -0.25];
        let mut s = OptimizerState::new(OptimizerKind::default(), 2);
        s.step(&mut p, &[3.0, -4.0], Direction::Minimize, 0.0)
            .unwrap();
        assert_eq!(p, [1.5, -0.25]);
        assert!(matches!(
            s.step(&mut p, &[f64::NAN, 0.0], Direction::Minimize, 0.1),
            Err(Error::NonFinite { coordinate: 0, .. })
        ));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = [0.1, 0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, [0.1, 0.1]);
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::default();
        assert_eq!(s.learning_rate_at(0), 0.001);
        assert_eq!(s.learning_rate_at(2), 0.001);
        assert!((s.learning_rate_at(3) - 0.00095).abs() < 1e-18);
        assert!((s.learning_rate_at(6) - 0.0009025).abs() < 1e-18);
        assert!(LrSchedule {
            decay_factor: 0.0,
            ..s
        }
        .validate()
        .is_err());
        assert!(LrSchedule {
            decay_interval_epochs: 0,
            ..s
        }
        .validate()
        .is_err());
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let net = Mlp::init(
            &[3, 2],
            &[Activation::Relu],
            Role::Learner,
            &mut RngStream::new(0),
        )
        .unwrap();
        let bytes = encode_checkpoint(&net);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], Role::Learner),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, Role::Learner),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(
            decode_checkpoint(&newer, Role::Learner),
            Err(Error::Format(FormatError::UnsupportedVersion {
                found: 9,
                ..
            }))
        ));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(
            decode_checkpoint(&trailing, Role::Learner),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            sizes in prop::collection::vec(1usize..6, 2..5),
            seed in any::<u64>(),
            codes in prop::collection::vec(0u8..3, 4),
        ) {
            let acts: Vec<Activation> = codes[..sizes.len() - 1]
                .iter()
                .map(|&c| Activation::from_code(c).unwrap())
                .collect();
            let mut net = Mlp::init(&sizes, &acts, Role::Adversary, &mut RngStream::new(seed)).unwrap();
            let mut rng = RngStream::new(seed ^ 1);
            let params: Vec<f64> = net.flat_params().iter().map(|_| rng.normal() * 1e3).collect();
            net.set_flat_params(&params).unwrap();
            let bytes = encode_checkpoint(&net);
            let back = decode_checkpoint(&bytes, Role::Adversary).unwrap();
            prop_assert_eq!(encode_checkpoint(&back), bytes);
            prop_assert_eq!(back, net);
        }

        #[test]
        fn same_seed_same_trajectory(seed in any::<u64>()) {
            let run = || {
                let mut rng = RngStream::new(seed);
                let net = Mlp::init(&[4, 3, 2], &[Activation::Relu, Activation::Identity], Role::Learner, &mut rng).unwrap();
                let x = random_matrix(5, 4, &mut rng);
                let mut params = net.flat_params();
                let mut opt = OptimizerState::new(OptimizerKind::default(), params.len());
                let mut n = net.clone();
                for _ in 0..4 {
                    n.set_flat_params(&params).unwrap();
                    let (y, trace) = n.forward(&x).unwrap();
                    let (g, _) = n.backward(&trace, &y).unwrap();
                    opt.step(&mut params, &g.flatten(), Direction::Minimize, 0.01).unwrap();
                }
                params
            };
            let a = run();
            let b = run();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
