//! Small differentiable core: a tanh multilayer perceptron stored as one
//! flat parameter vector, with exact reverse-mode gradients and a central
//! finite-difference oracle.
//!
//! Parameters are laid out layer by layer: the weight matrix row-major
//! (`fan_out` rows of `fan_in` entries) followed by the bias vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Result<Self> {
        let arch = ArchSpec {
            input_dim,
            hidden_widths,
            output_dim,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArch("at least one hidden layer is required".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArch("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Checks the velocity-field contract: the input carries the state, one
    /// time coordinate and the condition embedding; the output is a state.
    pub fn validate_for_state(&self, state_dim: usize) -> Result<()> {
        self.validate()?;
        if self.output_dim != state_dim {
            return Err(Error::InvalidArch(format!(
                "output_dim {} differs from state dim {state_dim}",
                self.output_dim
            )));
        }
        if self.input_dim < state_dim + 1 {
            return Err(Error::InvalidArch(format!(
                "input_dim {} cannot hold a {state_dim}-dim state and time",
                self.input_dim
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let widths: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.hidden_widths.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect();
        (0..widths.len() - 1).map(move |i| (widths[i], widths[i + 1]))
    }

    fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }
}

pub fn param_count(arch: &ArchSpec) -> usize {
    arch.layer_dims().map(|(i, o)| i * o + o).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    arch: ArchSpec,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn from_values(arch: ArchSpec, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = param_count(&arch);
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(ParamVector { arch, values })
    }

    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        let n = param_count(&arch);
        Self::from_values(arch, vec![0.0; n])
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with one coordinate replaced; used by finite differences.
    pub fn with_value(&self, index: usize, value: f64) -> ParamVector {
        let mut out = self.clone();
        out.values[index] = value;
        out
    }

    /// `self += scale * direction`. Fails if the update produces a non-finite entry.
    pub fn add_scaled(&mut self, direction: &GradVector, scale: f64) -> Result<()> {
        if direction.values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                what: "update direction",
                expected: self.values.len(),
                got: direction.values.len(),
            });
        }
        for (p, d) in self.values.iter_mut().zip(&direction.values) {
            *p += scale * d;
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter update".into()));
        }
        Ok(())
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Stable 64-bit fingerprint of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for v in &self.values {
            h = crate::rollout::mix64(h ^ v.to_bits());
        }
        h
    }
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &GradVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// `‖self − other‖ / max(‖other‖, tiny)`.
    pub fn relative_error(&self, reference: &GradVector) -> f64 {
        let diff: f64 = self
            .values
            .iter()
            .zip(&reference.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / reference.norm().max(1e-300)
    }
}

pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ParamVector> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(param_count(arch));
    for (fan_in, fan_out) in arch.layer_dims() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::from_values(arch.clone(), values)
}

/// Activations recorded by a forward pass: the input, every hidden layer
/// after `tanh`, and the (linear) output.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape always holds input and output")
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

pub fn forward_tape(params: &ParamVector, input: &[f64]) -> Result<Tape> {
    let arch = &params.arch;
    if input.len() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            what: "network input",
            expected: arch.input_dim,
            got: input.len(),
        });
    }
    let last = arch.num_layers() - 1;
    let mut acts = Vec::with_capacity(arch.num_layers() + 1);
    acts.push(input.to_vec());
    let mut offset = 0;
    for (layer, (fan_in, fan_out)) in arch.layer_dims().enumerate() {
        let w = &params.values[offset..offset + fan_in * fan_out];
        let b = &params.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let prev = acts.last().unwrap();
        let out: Vec<f64> = (0..fan_out)
            .map(|r| {
                let row = &w[r * fan_in..(r + 1) * fan_in];
                let z = b[r] + row.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>();
                if layer == last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
        acts.push(out);
    }
    Ok(Tape { acts })
}

pub fn forward(params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let mut tape = forward_tape(params, input)?;
    Ok(tape.acts.pop().unwrap())
}

/// Accumulates `scale · ∂(upstream·output)/∂params` into `grad` and returns
/// the input gradient, scaled the same way.
pub fn backward_into(
    params: &ParamVector,
    tape: &Tape,
    upstream: &[f64],
    scale: f64,
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let arch = &params.arch;
    if upstream.len() != arch.output_dim {
        return Err(Error::DimensionMismatch {
            what: "upstream gradient",
            expected: arch.output_dim,
            got: upstream.len(),
        });
    }
    if grad.len() != params.values.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient buffer",
            expected: params.values.len(),
            got: grad.len(),
        });
    }
    let dims: Vec<(usize, usize)> = arch.layer_dims().collect();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(i, o) in &dims {
        offsets.push(off);
        off += i * o + o;
    }

    let mut delta: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
    for layer in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[layer];
        let base = offsets[layer];
        let prev = &tape.acts[layer];
        for r in 0..fan_out {
            let d = delta[r];
            if d != 0.0 {
                let row = &mut grad[base + r * fan_in..base + (r + 1) * fan_in];
                for (g, x) in row.iter_mut().zip(prev) {
                    *g += d * x;
                }
            }
            grad[base + fan_in * fan_out + r] += d;
        }
        let w = &params.values[base..base + fan_in * fan_out];
        let mut next = vec![0.0; fan_in];
        for r in 0..fan_out {
            let d = delta[r];
            if d != 0.0 {
                for (n, a) in next.iter_mut().zip(&w[r * fan_in..(r + 1) * fan_in]) {
                    *n += d * a;
                }
            }
        }
        if layer > 0 {
            // prev is a tanh activation
            for (n, a) in next.iter_mut().zip(prev) {
                *n *= 1.0 - a * a;
            }
        }
        delta = next;
    }
    Ok(delta)
}

/// Exact gradient of `upstream · forward(params, input)` with respect to the
/// parameters and to the input.
pub fn backward(params: &ParamVector, input: &[f64], upstream: &[f64]) -> Result<(GradVector, Vec<f64>)> {
    let tape = forward_tape(params, input)?;
    let mut grad = GradVector::zeros(params.len());
    let input_grad = backward_into(params, &tape, upstream, 1.0, &mut grad.values)?;
    Ok((grad, input_grad))
}

pub fn finite_diff_grad<F>(f: F, params: &ParamVector, eps: f64) -> Result<GradVector>
where
    F: Fn(&ParamVector) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    let mut work = params.clone();
    let mut values = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params.values[i];
        work.values[i] = orig + eps;
        let plus = f(&work);
        work.values[i] = orig - eps;
        let minus = f(&work);
        work.values[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        values.push((plus - minus) / (2.0 * eps));
    }
    Ok(GradVector { values })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FOPDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ParamVector {
    /// Binary checkpoint: magic, format version, architecture, an explicit
    /// value count, then little-endian `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.arch.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.arch.output_dim as u32).to_le_bytes())?;
        w.write_all(&(self.arch.hidden_widths.len() as u32).to_le_bytes())?;
        for h in &self.arch.hidden_widths {
            w.write_all(&(*h as u32).to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32_of(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_dim = u32_of(&mut r)? as usize;
        let output_dim = u32_of(&mut r)? as usize;
        let n_hidden = u32_of(&mut r)? as usize;
        if n_hidden > 1024 {
            return Err(Error::Checkpoint(format!("implausible hidden layer count {n_hidden}")));
        }
        let hidden_widths = (0..n_hidden)
            .map(|_| u32_of(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = ArchSpec::new(input_dim, hidden_widths, output_dim)?;
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        if len != param_count(&arch) {
            return Err(Error::Checkpoint(format!(
                "length header {len} disagrees with architecture ({})",
                param_count(&arch)
            )));
        }
        let mut values = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut b)
                .map_err(|e| Error::Checkpoint(format!("truncated values: {e}")))?;
            values.push(f64::from_le_bytes(b));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
            return Err(Error::Checkpoint("trailing bytes after values".into()));
        }
        ParamVector::from_values(arch, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
