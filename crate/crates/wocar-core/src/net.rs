//! Small dense networks with hand-rolled reverse-mode gradients.
//!
//! Everything downstream — policies, Q networks, the worst-attack critic,
//! attack solvers — runs on plain MLPs, so instead of a general autodiff
//! graph this module implements the one architecture family directly:
//! affine layers with relu/tanh hidden activations and a raw (pre-softmax,
//! pre-noise) output head. Gradients are exact, checkable against finite
//! differences, and available with respect to both parameters and inputs
//! (the latter feed gradient-based attacks and inner maximizations).
//!
//! Parameters live in a flat vector ([`ParamVector`]) ordered layer by
//! layer, weights row-major then biases, which makes optimizer state and
//! text checkpoints trivial.

use crate::error::CoreError;
use crate::rng::{seeded_stream, stream};
use crate::Result;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// max(0, z)
    Relu,
    /// tanh(z)
    Tanh,
}

/// What the raw output vector means. The head never transforms the output —
/// softmax/noise are applied by callers — but it decides initialization
/// fan-out conventions and how checkpoints are labelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Plain real vector (Q values, state values).
    Linear,
    /// Mean of a gaussian action distribution (log-std lives with the agent).
    GaussianMean,
    /// Logits of a categorical action distribution.
    SoftmaxLogits,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(tok: &str) -> Option<Self> {
        match tok {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl OutputHead {
    fn name(self) -> &'static str {
        match self {
            OutputHead::Linear => "linear",
            OutputHead::GaussianMean => "gaussian-mean",
            OutputHead::SoftmaxLogits => "softmax-logits",
        }
    }

    fn parse(tok: &str) -> Option<Self> {
        match tok {
            "linear" => Some(OutputHead::Linear),
            "gaussian-mean" => Some(OutputHead::GaussianMean),
            "softmax-logits" => Some(OutputHead::SoftmaxLogits),
            _ => None,
        }
    }
}

/// Architecture description: `layer_widths` lists input width, hidden
/// widths, and output width (so a pure linear map is `[in, out]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    /// Input, hidden…, output widths; all positive, at least two entries.
    pub layer_widths: Vec<usize>,
    /// Applied to every hidden layer.
    pub activation: Activation,
    /// Meaning of the raw output.
    pub output_head: OutputHead,
}

impl NetSpec {
    /// Builds a spec, rejecting empty/zero widths.
    pub fn new(layer_widths: Vec<usize>, activation: Activation, output_head: OutputHead) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(CoreError::Config("need at least input and output widths".into()));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(CoreError::Config("layer widths must be positive".into()));
        }
        Ok(NetSpec { layer_widths, activation, output_head })
    }

    /// Number of affine layers.
    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Input dimensionality.
    pub fn in_dim(&self) -> usize {
        self.layer_widths[0]
    }

    /// Output dimensionality.
    pub fn out_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Total parameter count: Σ (in+1)·out over layers.
    pub fn n_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Flat offset of layer `l`'s weight block; biases follow the weights.
    pub(crate) fn layer_offset(&self, l: usize) -> usize {
        self.layer_widths
            .windows(2)
            .take(l)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

/// Flat parameter vector for a [`NetSpec`]. Layer l occupies
/// `[offset, offset + (in+1)·out)`: the out×in weight matrix row-major,
/// then the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    /// Flat storage.
    pub flat: Vec<f64>,
}

impl ParamVector {
    /// All zeros.
    pub fn zeros(spec: &NetSpec) -> Self {
        ParamVector { flat: vec![0.0; spec.n_params()] }
    }

    /// Checks congruence with a spec.
    pub fn validate(&self, spec: &NetSpec) -> Result<()> {
        if self.flat.len() != spec.n_params() {
            return Err(CoreError::Config(format!(
                "parameter vector has {} entries, spec needs {}",
                self.flat.len(),
                spec.n_params()
            )));
        }
        Ok(())
    }
}

/// Flat gradient vector congruent with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    /// Flat storage, same layout as [`ParamVector`].
    pub flat: Vec<f64>,
}

impl GradVector {
    /// All zeros.
    pub fn zeros(spec: &NetSpec) -> Self {
        GradVector { flat: vec![0.0; spec.n_params()] }
    }

    /// Adds `scale * other` in place.
    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        for (g, o) in self.flat.iter_mut().zip(&other.flat) {
            *g += scale * o;
        }
    }

    /// Scales in place.
    pub fn scale(&mut self, scale: f64) {
        for g in &mut self.flat {
            *g *= scale;
        }
    }

    /// Euclidean norm (for global gradient clipping).
    pub fn l2_norm(&self) -> f64 {
        self.flat.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Per-layer forward cache: layer inputs and post-activation outputs.
pub struct Activations {
    /// `inputs[l]` is the input vector fed to layer l (inputs[0] = x).
    inputs: Vec<Vec<f64>>,
    /// Raw network output.
    output: Vec<f64>,
}

impl Activations {
    /// The raw output vector.
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn check_input(spec: &NetSpec, params: &ParamVector, input: &[f64]) -> Result<()> {
    params.validate(spec)?;
    if input.len() != spec.in_dim() {
        return Err(CoreError::Config(format!(
            "input length {} does not match spec input width {}",
            input.len(),
            spec.in_dim()
        )));
    }
    Ok(())
}

/// Forward pass returning the full cache needed by [`backward`].
pub fn forward_cached(spec: &NetSpec, params: &ParamVector, input: &[f64]) -> Result<Activations> {
    check_input(spec, params, input)?;
    let n_layers = spec.n_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut h = input.to_vec();
    for l in 0..n_layers {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let off = spec.layer_offset(l);
        let w = &params.flat[off..off + n_in * n_out];
        let b = &params.flat[off + n_in * n_out..off + (n_in + 1) * n_out];
        let mut z = vec![0.0; n_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o];
            for (wi, hi) in row.iter().zip(&h) {
                acc += wi * hi;
            }
            *zo = acc;
        }
        if l + 1 < n_layers {
            match spec.activation {
                Activation::Relu => {
                    for zo in &mut z {
                        if *zo < 0.0 {
                            *zo = 0.0;
                        }
                    }
                }
                Activation::Tanh => {
                    for zo in &mut z {
                        *zo = zo.tanh();
                    }
                }
            }
        }
        inputs.push(std::mem::replace(&mut h, z));
    }
    Ok(Activations { inputs, output: h })
}

/// Plain forward pass: affine layers with hidden activations, raw output.
pub fn forward(spec: &NetSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    forward_cached(spec, params, input).map(|acts| acts.output)
}

/// Reverse-mode sweep: gradient of ⟨upstream, output⟩ with respect to all
/// parameters and to the input, in one pass over a forward cache.
pub fn backward(
    spec: &NetSpec,
    params: &ParamVector,
    acts: &Activations,
    upstream: &[f64],
) -> Result<(GradVector, Vec<f64>)> {
    if upstream.len() != spec.out_dim() {
        return Err(CoreError::Config(format!(
            "upstream length {} does not match output width {}",
            upstream.len(),
            spec.out_dim()
        )));
    }
    let n_layers = spec.n_layers();
    let mut grad = GradVector::zeros(spec);
    let mut delta = upstream.to_vec();
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let off = spec.layer_offset(l);
        // Post-activation output of this layer (the next layer's input, or
        // the raw output for the last layer).
        let layer_out: &[f64] = if l + 1 < n_layers { &acts.inputs[l + 1] } else { &acts.output };
        if l + 1 < n_layers {
            // Fold the activation derivative into delta. Both relu and tanh
            // derivatives are recoverable from the activation output alone.
            match spec.activation {
                Activation::Relu => {
                    for (d, &a) in delta.iter_mut().zip(layer_out) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::Tanh => {
                    for (d, &a) in delta.iter_mut().zip(layer_out) {
                        *d *= 1.0 - a * a;
                    }
                }
            }
        }
        let layer_in = &acts.inputs[l];
        let w = &params.flat[off..off + n_in * n_out];
        let gw = &mut grad.flat[off..off + (n_in + 1) * n_out];
        let mut next_delta = vec![0.0; n_in];
        for (o, &d) in delta.iter().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += d * layer_in[i];
                next_delta[i] += d * row[i];
            }
        }
        // Bias gradients sit after the weight block.
        for (o, &d) in delta.iter().enumerate() {
            gw[n_in * n_out + o] += d;
        }
        delta = next_delta;
    }
    Ok((grad, delta))
}

/// Gradient of ⟨upstream, forward(input)⟩ with respect to parameters.
pub fn grad_params(
    spec: &NetSpec,
    params: &ParamVector,
    input: &[f64],
    upstream: &[f64],
) -> Result<GradVector> {
    let acts = forward_cached(spec, params, input)?;
    backward(spec, params, &acts, upstream).map(|(g, _)| g)
}

/// Gradient of ⟨upstream, forward(input)⟩ with respect to the input.
pub fn grad_input(
    spec: &NetSpec,
    params: &ParamVector,
    input: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let acts = forward_cached(spec, params, input)?;
    backward(spec, params, &acts, upstream).map(|(_, gi)| gi)
}

/// Initialization scheme for [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// N(0, 2/fan_in) weights — suits relu.
    He,
    /// N(0, 2/(fan_in+fan_out)) weights — suits tanh.
    Xavier,
}

impl InitScheme {
    /// The conventional pairing with an activation.
    pub fn for_activation(act: Activation) -> Self {
        match act {
            Activation::Relu => InitScheme::He,
            Activation::Tanh => InitScheme::Xavier,
        }
    }
}

/// Seeded initialization: gaussian weights per the scheme, zero biases.
pub fn init_params(spec: &NetSpec, scheme: InitScheme, seed: u64) -> ParamVector {
    let mut rng = seeded_stream(seed, stream::INIT);
    init_params_rng(spec, scheme, &mut rng)
}

/// [`init_params`] drawing from a caller-owned RNG (training loops keep one
/// stream per network so their draws never interleave).
pub fn init_params_rng(spec: &NetSpec, scheme: InitScheme, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut params = ParamVector::zeros(spec);
    for l in 0..spec.n_layers() {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let std = match scheme {
            InitScheme::He => (2.0 / n_in as f64).sqrt(),
            InitScheme::Xavier => (2.0 / (n_in + n_out) as f64).sqrt(),
        };
        let off = spec.layer_offset(l);
        for w in &mut params.flat[off..off + n_in * n_out] {
            *w = crate::rng::normal(rng) * std;
        }
        // Biases stay zero.
    }
    params
}

/// Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Step counter (t in the bias correction).
    pub t: u64,
}

impl AdamState {
    /// Fresh state for a parameter vector of length `len`.
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One Adam update with bias correction, in place on a flat slice (works for
/// both network parameters and free vectors like a gaussian log-std).
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps_num: f64,
) {
    debug_assert_eq!(params.len(), grad.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps_num);
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// Writes `NET` header, spec line, and the flat parameters as
/// 17-significant-digit text.
pub fn save_net(path: &Path, spec: &NetSpec, params: &ParamVector) -> Result<()> {
    params.validate(spec)?;
    let mut out = String::from("NET\n");
    let widths: Vec<String> = spec.layer_widths.iter().map(|w| w.to_string()).collect();
    let _ = writeln!(
        out,
        "{} {} {}",
        widths.join(" "),
        spec.activation.name(),
        spec.output_head.name()
    );
    for chunk in params.flat.chunks(8) {
        let row: Vec<String> = chunk.iter().map(|&x| format!("{x:.16e}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_net`].
pub fn load_net(path: &Path) -> Result<(NetSpec, ParamVector)> {
    let text = std::fs::read_to_string(path)?;
    let pathstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let header = lines.next();
    if header.map(|(_, l)| l.trim()) != Some("NET") {
        return Err(CoreError::format(&pathstr, 1, "expected `NET` header"));
    }
    let (specno, spec_line) = lines
        .next()
        .ok_or_else(|| CoreError::format(&pathstr, 2, "missing spec line"))?;
    let tokens: Vec<&str> = spec_line.split_whitespace().collect();
    if tokens.len() < 4 {
        return Err(CoreError::format(&pathstr, specno + 1, "spec line needs widths, activation, head"));
    }
    let (width_toks, tail) = tokens.split_at(tokens.len() - 2);
    let mut layer_widths = Vec::with_capacity(width_toks.len());
    for t in width_toks {
        layer_widths.push(t.parse::<usize>().map_err(|_| {
            CoreError::format(&pathstr, specno + 1, &format!("cannot parse width `{t}`"))
        })?);
    }
    let activation = Activation::parse(tail[0])
        .ok_or_else(|| CoreError::format(&pathstr, specno + 1, &format!("unknown activation `{}`", tail[0])))?;
    let output_head = OutputHead::parse(tail[1])
        .ok_or_else(|| CoreError::format(&pathstr, specno + 1, &format!("unknown output head `{}`", tail[1])))?;
    let spec = NetSpec::new(layer_widths, activation, output_head)?;
    let mut flat = Vec::with_capacity(spec.n_params());
    for (no, line) in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                CoreError::format(&pathstr, no + 1, &format!("cannot parse parameter `{tok}`"))
            })?;
            flat.push(v);
        }
    }
    if flat.len() != spec.n_params() {
        return Err(CoreError::format(
            &pathstr,
            1,
            &format!("expected {} parameters, file holds {}", spec.n_params(), flat.len()),
        ));
    }
    Ok((spec, ParamVector { flat }))
}
