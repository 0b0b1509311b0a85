//! Multilayer perceptron encoder with hand-written backpropagation, the
//! momentum-updated key encoder, and a finite-difference gradient checker.
//!
//! Layout: affine -> ReLU for every hidden layer, a final affine layer, then
//! row L2 normalization. Weights are stored `outputs x inputs`, row-major.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::binfmt::{self, ByteReader};
use crate::embedding::{axpy, dot, norm, EmbeddingMatrix, ZERO_NORM};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SCNC";

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Parameters of one encoder. The same shape doubles as the container for
/// gradients and optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::BadShape(format!(
            "need at least input and output size, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::BadShape(format!("zero-width layer in {sizes:?}")));
    }
    Ok(())
}

impl EncoderParams {
    /// Fan-in scaled Gaussian weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let mut l = Layer::zeros(fan_in, fan_out);
                for v in l.weight.iter_mut() {
                    *v = dist.sample(&mut rng);
                }
                l
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::BadShape("no layers".into()));
        };
        let mut sizes = vec![first.inputs];
        for l in &layers {
            if l.inputs != *sizes.last().unwrap()
                || l.weight.len() != l.inputs * l.outputs
                || l.bias.len() != l.outputs
            {
                return Err(Error::BadShape(format!(
                    "layer {} does not chain ({}x{})",
                    sizes.len() - 1,
                    l.outputs,
                    l.inputs
                )));
            }
            sizes.push(l.outputs);
        }
        validate_sizes(&sizes)?;
        let p = Self { sizes, layers };
        if let Some(i) = p.flat().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(p)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in storage order: W0, b0, W1, b1, ...
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors().flat_map(|t| t.iter().copied())
    }

    fn flat_get(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    fn flat_set(&mut self, mut i: usize, v: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.sizes == other.sizes
    }

    /// FNV-1a over sizes and parameter bits; identifies an exact parameter state.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for &s in &self.sizes {
            feed(&(s as u64).to_le_bytes());
        }
        for v in self.flat() {
            feed(&v.to_bits().to_le_bytes());
        }
        h
    }

    /// Euclidean distance between two same-shaped parameter sets.
    pub fn distance(&self, other: &Self) -> f64 {
        self.flat()
            .zip(other.flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Intermediates retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    rows: usize,
    /// Input to each layer; index 0 is the raw batch, later ones are ReLU outputs.
    activations: Vec<Vec<f64>>,
    /// Pre-normalization output norms.
    norms: Vec<f64>,
    /// Normalized output rows.
    output: Vec<f64>,
}

fn affine(layer: &Layer, input: &[f64], rows: usize, relu: bool) -> Vec<f64> {
    let mut out = vec![0.0; rows * layer.outputs];
    out.par_chunks_mut(layer.outputs)
        .zip(input.par_chunks(layer.inputs))
        .with_min_len(16)
        .for_each(|(o, x)| {
            for (j, oj) in o.iter_mut().enumerate() {
                let w = &layer.weight[j * layer.inputs..(j + 1) * layer.inputs];
                let z = dot(x, w) + layer.bias[j];
                *oj = if relu { z.max(0.0) } else { z };
            }
        });
    out
}

/// Runs the batch through every layer and normalizes the output rows.
pub fn forward(
    params: &EncoderParams,
    batch: &EmbeddingMatrix,
) -> Result<(EmbeddingMatrix, ForwardCache)> {
    if batch.dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: batch.dim(),
        });
    }
    let rows = batch.rows();
    let last = params.layers.len() - 1;
    let mut activations = vec![batch.values().to_vec()];
    let mut raw = Vec::new();
    for (li, layer) in params.layers.iter().enumerate() {
        let out = affine(layer, activations.last().unwrap(), rows, li < last);
        if li < last {
            activations.push(out);
        } else {
            raw = out;
        }
    }
    let d = params.output_dim();
    let mut norms = Vec::with_capacity(rows);
    for (i, row) in raw.chunks_exact_mut(d).enumerate() {
        let nrm = norm(row);
        if nrm <= ZERO_NORM || !nrm.is_finite() {
            return Err(Error::ZeroRow(i));
        }
        row.iter_mut().for_each(|v| *v /= nrm);
        norms.push(nrm);
    }
    let emb = EmbeddingMatrix::from_normalized_unchecked(rows, d, raw.clone());
    Ok((
        emb,
        ForwardCache {
            fingerprint: params.fingerprint(),
            rows,
            activations,
            norms,
            output: raw,
        },
    ))
}

/// Normalized activations of the last hidden layer (the input of the final
/// affine map). Falls back to the output embedding for single-layer nets.
pub fn penultimate_features(
    params: &EncoderParams,
    batch: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    let (emb, cache) = forward(params, batch)?;
    if params.layers.len() == 1 {
        return Ok(emb);
    }
    let width = params.sizes[params.sizes.len() - 2];
    EmbeddingMatrix::new(cache.rows, width, cache.activations.last().unwrap().clone())?
        .l2_normalize_rows()
}

/// Backward through `y = u / |u|` for one row: `(g - y (y.g)) / |u|`.
pub fn normalization_backward(y: &[f64], nrm: f64, grad: &[f64]) -> Vec<f64> {
    let radial = dot(y, grad);
    y.iter()
        .zip(grad)
        .map(|(yi, gi)| (gi - yi * radial) / nrm)
        .collect()
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the normalized embeddings.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_embeddings: &[f64],
) -> Result<EncoderParams> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache);
    }
    let d = params.output_dim();
    if grad_embeddings.len() != cache.rows * d {
        return Err(Error::DimensionMismatch {
            expected: cache.rows * d,
            got: grad_embeddings.len(),
        });
    }
    let rows = cache.rows;
    let mut dz: Vec<f64> = Vec::with_capacity(rows * d);
    for r in 0..rows {
        dz.extend(normalization_backward(
            &cache.output[r * d..(r + 1) * d],
            cache.norms[r],
            &grad_embeddings[r * d..(r + 1) * d],
        ));
    }

    let mut grads = EncoderParams::zeros(&params.sizes)?;
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = &cache.activations[li];
        let g = &mut grads.layers[li];
        for r in 0..rows {
            let dzr = &dz[r * layer.outputs..(r + 1) * layer.outputs];
            let xr = &input[r * layer.inputs..(r + 1) * layer.inputs];
            for (o, &dzo) in dzr.iter().enumerate() {
                if dzo != 0.0 {
                    axpy(dzo, xr, &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs]);
                    g.bias[o] += dzo;
                }
            }
        }
        if li == 0 {
            break;
        }
        // gradient w.r.t. this layer's input, masked by the previous ReLU
        let mut dx = vec![0.0; rows * layer.inputs];
        dx.par_chunks_mut(layer.inputs)
            .enumerate()
            .with_min_len(16)
            .for_each(|(r, dxr)| {
                let dzr = &dz[r * layer.outputs..(r + 1) * layer.outputs];
                for (o, &dzo) in dzr.iter().enumerate() {
                    if dzo != 0.0 {
                        axpy(dzo, &layer.weight[o * layer.inputs..(o + 1) * layer.inputs], dxr);
                    }
                }
                let xr = &input[r * layer.inputs..(r + 1) * layer.inputs];
                for (v, &a) in dxr.iter_mut().zip(xr) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
            });
        dz = dx;
    }
    Ok(grads)
}

/// Query encoder trained by gradients plus its exponential-moving-average
/// key encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub query: EncoderParams,
    pub key: EncoderParams,
    momentum: f64,
}

impl MomentumPair {
    pub fn new(query: EncoderParams, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self {
            key: query.clone(),
            query,
            momentum,
        })
    }

    pub fn from_parts(query: EncoderParams, key: EncoderParams, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        if !query.same_shape(&key) {
            return Err(Error::ShapeMismatch("key encoder"));
        }
        Ok(Self {
            query,
            key,
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `key <- m * key + (1 - m) * query`
    pub fn momentum_update(&mut self) {
        let m = self.momentum;
        for (k, q) in self.key.tensors_mut().zip(self.query.tensors()) {
            for (kv, qv) in k.iter_mut().zip(q) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!(
            "encoder momentum {m} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat parameter index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares [`backward`] against central finite differences for a loss over
/// the encoder's output embeddings. `loss_fn` returns the loss and its
/// gradient w.r.t. the embeddings.
pub fn gradient_check<F>(
    params: &EncoderParams,
    input: &EmbeddingMatrix,
    loss_fn: F,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&EmbeddingMatrix) -> Result<(f64, Vec<f64>)>,
{
    let (emb, cache) = forward(params, input)?;
    let (_, g) = loss_fn(&emb)?;
    let analytic = backward(params, &cache, &g)?;
    compare_gradients(params, input, loss_fn, &analytic, tolerance)
}

/// Finite-difference comparison against an externally supplied gradient.
pub fn compare_gradients<F>(
    params: &EncoderParams,
    input: &EmbeddingMatrix,
    loss_fn: F,
    analytic: &EncoderParams,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&EmbeddingMatrix) -> Result<(f64, Vec<f64>)>,
{
    if !params.same_shape(analytic) {
        return Err(Error::ShapeMismatch("analytic gradient"));
    }
    let eval = |p: &EncoderParams| -> Result<f64> {
        let (emb, _) = forward(p, input)?;
        Ok(loss_fn(&emb)?.0)
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance,
        passed: true,
    };
    for (i, a) in analytic.flat().enumerate() {
        let orig = params.flat_get(i);
        probe.flat_set(i, orig + FD_STEP);
        let plus = eval(&probe)?;
        probe.flat_set(i, orig - FD_STEP);
        let minus = eval(&probe)?;
        probe.flat_set(i, orig);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

/// Writes both encoders and the momentum coefficient.
///
/// Layout: `SCNC`, version, u32 layer-size count, u32 sizes, f64 momentum,
/// then query tensors followed by key tensors (per layer: weight, bias),
/// all little-endian f64.
pub fn save_checkpoint(pair: &MomentumPair, path: &Path) -> Result<()> {
    binfmt::write_file(path, |buf| {
        binfmt::put_header(buf, CHECKPOINT_MAGIC);
        binfmt::put_u32(buf, pair.query.sizes.len(), "layer count")?;
        for &s in &pair.query.sizes {
            binfmt::put_u32(buf, s, "layer size")?;
        }
        buf.extend_from_slice(&pair.momentum.to_le_bytes());
        for v in pair.query.flat().chain(pair.key.flat()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<MomentumPair> {
    let bytes = binfmt::read_file(path)?;
    let mut r = ByteReader::new(&bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    if count > r.remaining() / 4 {
        return Err(Error::Corrupt(format!("{count} layer sizes")));
    }
    let sizes = (0..count)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    validate_sizes(&sizes).map_err(|e| Error::Corrupt(e.to_string()))?;
    let momentum = r.f64()?;
    let read_params = |r: &mut ByteReader| -> Result<EncoderParams> {
        let mut p = EncoderParams::zeros(&sizes)?;
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.f64()?;
            }
        }
        Ok(p)
    };
    let query = read_params(&mut r)?;
    let key = read_params(&mut r)?;
    r.finish()?;
    if query.flat().chain(key.flat()).any(|v| !v.is_finite()) {
        return Err(Error::Corrupt("non-finite parameter".into()));
    }
    MomentumPair::from_parts(query, key, momentum).map_err(|e| Error::Corrupt(e.to_string()))
}
