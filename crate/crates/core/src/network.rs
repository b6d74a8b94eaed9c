//! Value-gradient predictor: two stacked LSTM layers and an affine head,
//! shared across all timesteps, plus the trainable initial value `ψ` and
//! trainable initial recurrent states.
//!
//! Parameters live in one flat buffer described by a named tensor layout so
//! that the optimizer, the finite-difference checker and the archive format
//! can all treat them uniformly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::NoiseStream;
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements into the flat buffer.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Offsets {
    w_ih1: usize,
    w_hh1: usize,
    b1: usize,
    w_ih2: usize,
    w_hh2: usize,
    b2: usize,
    head_w: usize,
    head_b: usize,
    psi: usize,
    h1: usize,
    c1: usize,
    h2: usize,
    c2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub n_x: usize,
    pub hidden: usize,
    pub tensors: Vec<TensorSpec>,
    off: Offsets,
    total: usize,
}

impl Layout {
    pub fn new(n_x: usize, hidden: usize) -> Self {
        let g = 4 * hidden;
        let shapes: [(&str, Vec<usize>); 13] = [
            ("lstm1.w_ih", vec![g, n_x]),
            ("lstm1.w_hh", vec![g, hidden]),
            ("lstm1.bias", vec![g]),
            ("lstm2.w_ih", vec![g, hidden]),
            ("lstm2.w_hh", vec![g, hidden]),
            ("lstm2.bias", vec![g]),
            ("head.weight", vec![n_x, hidden]),
            ("head.bias", vec![n_x]),
            ("psi", vec![1]),
            ("init.h1", vec![hidden]),
            ("init.c1", vec![hidden]),
            ("init.h2", vec![hidden]),
            ("init.c2", vec![hidden]),
        ];
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let len = shape.iter().product();
            tensors.push(TensorSpec { name: name.into(), shape, offset, len });
            offset += len;
        }
        let o = |i: usize| tensors[i].offset;
        let off = Offsets {
            w_ih1: o(0),
            w_hh1: o(1),
            b1: o(2),
            w_ih2: o(3),
            w_hh2: o(4),
            b2: o(5),
            head_w: o(6),
            head_b: o(7),
            psi: o(8),
            h1: o(9),
            c1: o(10),
            h2: o(11),
            c2: o(12),
        };
        Self { n_x, hidden, tensors, off, total: offset }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensors penalised by weight decay: every LSTM and linear weight and bias.
    pub fn is_decayed(&self, t: &TensorSpec) -> bool {
        t.name.starts_with("lstm") || t.name.starts_with("head")
    }

    /// Mask over the flat buffer, true where weight decay applies.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for t in &self.tensors {
            if self.is_decayed(t) {
                m[t.offset..t.offset + t.len].iter_mut().for_each(|v| *v = true);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layout: Layout,
    pub data: Vec<f64>,
}

/// Per-element recurrent state `(h, c)` for both layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h1: vec![0.0; hidden], c1: vec![0.0; hidden], h2: vec![0.0; hidden], c2: vec![0.0; hidden] }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Saved activations of one LSTM cell evaluation.
#[derive(Debug, Clone)]
pub struct CellCache {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates `[i, f, g, o]`, each of length `hidden`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Saved activations of one full network step.
#[derive(Debug, Clone)]
pub struct StepCache {
    l1: CellCache,
    l2: CellCache,
}

pub fn init_params(stream: &mut NoiseStream, n_x: usize) -> Result<NetworkParams> {
    init_params_with_hidden(stream, n_x, DEFAULT_HIDDEN)
}

pub fn init_params_with_hidden(stream: &mut NoiseStream, n_x: usize, hidden: usize) -> Result<NetworkParams> {
    if n_x == 0 || hidden == 0 {
        return Err(Error::InvalidParameter(format!("network needs n_x >= 1 and hidden >= 1, got {n_x}, {hidden}")));
    }
    let layout = Layout::new(n_x, hidden);
    let mut data = vec![0.0; layout.len()];
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    for t in &layout.tensors {
        let bound = match t.name.as_str() {
            "lstm1.w_ih" => inv(n_x),
            "lstm1.w_hh" | "lstm2.w_ih" | "lstm2.w_hh" | "lstm1.bias" | "lstm2.bias" => inv(hidden),
            "head.weight" | "head.bias" => inv(hidden),
            _ => continue,
        };
        for v in &mut data[t.offset..t.offset + t.len] {
            *v = stream.uniform(-bound, bound);
        }
    }
    // forget gates start open
    for b in [layout.off.b1, layout.off.b2] {
        data[b + hidden..b + 2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(NetworkParams { layout, data })
}

impl NetworkParams {
    pub fn zeros(n_x: usize, hidden: usize) -> Self {
        let layout = Layout::new(n_x, hidden);
        let data = vec![0.0; layout.len()];
        Self { layout, data }
    }

    pub fn from_parts(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!("buffer has {} values, layout needs {}", data.len(), layout.len())));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_x(&self) -> usize {
        self.layout.n_x
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn psi(&self) -> f64 {
        self.data[self.layout.off.psi]
    }

    pub fn set_psi(&mut self, v: f64) {
        let i = self.layout.off.psi;
        self.data[i] = v;
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.data[t.offset..t.offset + t.len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.tensor(name)?.clone();
        Some(&mut self.data[t.offset..t.offset + t.len])
    }

    /// Trainable initial recurrent state.
    pub fn initial_state(&self) -> RecurrentState {
        let (o, h) = (&self.layout.off, self.layout.hidden);
        RecurrentState {
            h1: self.data[o.h1..o.h1 + h].to_vec(),
            c1: self.data[o.c1..o.c1 + h].to_vec(),
            h2: self.data[o.h2..o.h2 + h].to_vec(),
            c2: self.data[o.c2..o.c2 + h].to_vec(),
        }
    }

    /// Squared norm of the weight-decayed parameters.
    pub fn decay_norm_sq(&self) -> f64 {
        self.layout
            .tensors
            .iter()
            .filter(|t| self.layout.is_decayed(t))
            .flat_map(|t| &self.data[t.offset..t.offset + t.len])
            .map(|v| v * v)
            .sum()
    }

    fn cell_forward(
        &self,
        w_ih: usize,
        w_hh: usize,
        bias: usize,
        input: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>, CellCache) {
        let hd = self.layout.hidden;
        let n_in = input.len();
        let p = &self.data;
        let mut gates = vec![0.0; 4 * hd];
        for (r, gate) in gates.iter_mut().enumerate() {
            let mut acc = p[bias + r];
            let wi = &p[w_ih + r * n_in..w_ih + (r + 1) * n_in];
            for (w, x) in wi.iter().zip(input) {
                acc += w * x;
            }
            let wh = &p[w_hh + r * hd..w_hh + (r + 1) * hd];
            for (w, h) in wh.iter().zip(h_prev) {
                acc += w * h;
            }
            *gate = if (2 * hd..3 * hd).contains(&r) { acc.tanh() } else { sigmoid(acc) };
        }
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
            c[k] = f * c_prev[k] + i * g;
            tanh_c[k] = c[k].tanh();
            h[k] = o * tanh_c[k];
        }
        let cache = CellCache {
            input: input.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
        };
        (h, c, cache)
    }

    /// Returns `(dinput, dh_prev, dc_prev)` and accumulates parameter grads.
    #[allow(clippy::too_many_arguments)]
    fn cell_backward(
        &self,
        w_ih: usize,
        w_hh: usize,
        bias: usize,
        cache: &CellCache,
        dh: &[f64],
        dc_next: &[f64],
        grad: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.layout.hidden;
        let n_in = cache.input.len();
        let g = &cache.gates;
        let mut dpre = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = cache.tanh_c[k];
            let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
            let d_o = dh[k] * tc;
            let d_i = dc * gg;
            let d_f = dc * cache.c_prev[k];
            let d_g = dc * i;
            dc_prev[k] = dc * f;
            dpre[k] = d_i * i * (1.0 - i);
            dpre[hd + k] = d_f * f * (1.0 - f);
            dpre[2 * hd + k] = d_g * (1.0 - gg * gg);
            dpre[3 * hd + k] = d_o * o * (1.0 - o);
        }
        let p = &self.data;
        let mut dinput = vec![0.0; n_in];
        let mut dh_prev = vec![0.0; hd];
        for (r, &dp) in dpre.iter().enumerate() {
            if dp == 0.0 {
                continue;
            }
            grad[bias + r] += dp;
            for j in 0..n_in {
                grad[w_ih + r * n_in + j] += dp * cache.input[j];
                dinput[j] += dp * p[w_ih + r * n_in + j];
            }
            for j in 0..hd {
                grad[w_hh + r * hd + j] += dp * cache.h_prev[j];
                dh_prev[j] += dp * p[w_hh + r * hd + j];
            }
        }
        (dinput, dh_prev, dc_prev)
    }

    /// One recurrent step: predicts `V_x` at `x` and advances the state.
    pub fn predict_vx(&self, x: &[f64], state: &RecurrentState) -> (Vec<f64>, RecurrentState) {
        let (vx, next, _) = self.step(x, state);
        (vx, next)
    }

    /// Like [`predict_vx`](Self::predict_vx) but also returns the activations
    /// needed for the backward pass.
    pub fn step(&self, x: &[f64], state: &RecurrentState) -> (Vec<f64>, RecurrentState, StepCache) {
        let o = self.layout.off;
        let (h1, c1, l1) = self.cell_forward(o.w_ih1, o.w_hh1, o.b1, x, &state.h1, &state.c1);
        let (h2, c2, l2) = self.cell_forward(o.w_ih2, o.w_hh2, o.b2, &h1, &state.h2, &state.c2);
        let (n_x, hd) = (self.layout.n_x, self.layout.hidden);
        let vx = (0..n_x)
            .map(|r| {
                let w = &self.data[o.head_w + r * hd..o.head_w + (r + 1) * hd];
                self.data[o.head_b + r] + w.iter().zip(&h2).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        (vx, RecurrentState { h1, c1, h2, c2 }, StepCache { l1, l2 })
    }

    /// Backward through one step.
    ///
    /// `dvx` is the gradient w.r.t. this step's output and `dnext` the
    /// gradient w.r.t. the outgoing recurrent state. Returns the gradient
    /// w.r.t. the input `x` and the incoming recurrent state.
    pub fn step_backward(
        &self,
        cache: &StepCache,
        dvx: &[f64],
        dnext: &RecurrentState,
        grad: &mut [f64],
    ) -> (Vec<f64>, RecurrentState) {
        let o = self.layout.off;
        let hd = self.layout.hidden;
        let h2_out: Vec<f64> = (0..hd).map(|k| cache.l2.gates[3 * hd + k] * cache.l2.tanh_c[k]).collect();
        let mut dh2 = dnext.h2.clone();
        for (r, &g) in dvx.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[o.head_b + r] += g;
            for k in 0..hd {
                grad[o.head_w + r * hd + k] += g * h2_out[k];
                dh2[k] += g * self.data[o.head_w + r * hd + k];
            }
        }
        let (dh1_from2, dh2_prev, dc2_prev) =
            self.cell_backward(o.w_ih2, o.w_hh2, o.b2, &cache.l2, &dh2, &dnext.c2, grad);
        let dh1: Vec<f64> = dnext.h1.iter().zip(&dh1_from2).map(|(a, b)| a + b).collect();
        let (dx, dh1_prev, dc1_prev) = self.cell_backward(o.w_ih1, o.w_hh1, o.b1, &cache.l1, &dh1, &dnext.c1, grad);
        (dx, RecurrentState { h1: dh1_prev, c1: dc1_prev, h2: dh2_prev, c2: dc2_prev })
    }

    /// Routes a gradient on the initial recurrent state into its trainable leaves.
    pub fn accumulate_initial_state_grad(&self, d: &RecurrentState, grad: &mut [f64]) {
        let (o, hd) = (self.layout.off, self.layout.hidden);
        for k in 0..hd {
            grad[o.h1 + k] += d.h1[k];
            grad[o.c1 + k] += d.c1[k];
            grad[o.h2 + k] += d.h2[k];
            grad[o.c2 + k] += d.c2[k];
        }
    }

    pub fn psi_index(&self) -> usize {
        self.layout.off.psi
    }

    /// Writes `<path>` (JSON manifest) and `<path>.bin` sibling blob of
    /// little-endian `f64` values.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = manifest_path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("bad archive path {}", manifest_path.display())))?
            .to_string();
        let manifest = ArchiveManifest {
            format: ARCHIVE_FORMAT.into(),
            version: 1,
            dtype: "f64-le".into(),
            n_x: self.layout.n_x,
            hidden: self.layout.hidden,
            blob: blob_name,
            num_values: self.data.len(),
            tensors: self.layout.tensors.clone(),
        };
        let mut bytes = Vec::with_capacity(8 * self.data.len());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&blob_path, bytes)?;
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: ArchiveManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if manifest.format != ARCHIVE_FORMAT || manifest.dtype != "f64-le" {
            return Err(Error::Config(format!("unsupported archive {} / {}", manifest.format, manifest.dtype)));
        }
        let layout = Layout::new(manifest.n_x, manifest.hidden);
        if layout.tensors != manifest.tensors {
            return Err(Error::Config("archive tensor table does not match the network layout".into()));
        }
        let blob_path = manifest_path.with_file_name(&manifest.blob);
        let bytes = fs::read(blob_path)?;
        if bytes.len() != 8 * layout.len() {
            return Err(Error::Config(format!("blob has {} bytes, expected {}", bytes.len(), 8 * layout.len())));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_parts(layout, data)
    }
}

pub const ARCHIVE_FORMAT: &str = "safe-fbsde-params";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub n_x: usize,
    pub hidden: usize,
    pub blob: String,
    pub num_values: usize,
    pub tensors: Vec<TensorSpec>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expected_count(n_x: usize) -> usize {
        4 * 16 * (n_x + 16 + 1) + 4 * 16 * (16 + 16 + 1) + (16 * n_x + n_x) + 1 + 4 * 16
    }

    #[test]
    fn parameter_count() {
        for n_x in [2, 4, 16] {
            assert_eq!(Layout::new(n_x, 16).len(), expected_count(n_x));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&mut NoiseStream::new(5, 0), 2).unwrap();
        let b = init_params(&mut NoiseStream::new(5, 0), 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.psi(), 0.0);
        assert!(a.initial_state().h1.iter().all(|v| *v == 0.0));
        let bias = a.tensor("lstm1.bias").unwrap();
        assert!(bias[16..32].iter().all(|v| *v == 1.0));
        let (vx, _) = a.predict_vx(&[0.5, -1.0], &a.initial_state());
        assert_eq!(vx.len(), 2);
        assert!(vx.iter().all(|v| v.abs() <= 10.0));
        assert!(init_params(&mut NoiseStream::new(5, 0), 0).is_err());
    }

    #[test]
    fn zero_network_predicts_zero() {
        let p = NetworkParams::zeros(3, 16);
        let (vx, _) = p.predict_vx(&[1.0, 2.0, 3.0], &p.initial_state());
        assert_eq!(vx, vec![0.0; 3]);
    }

    #[test]
    fn output_depends_on_prefix() {
        let p = init_params(&mut NoiseStream::new(2, 0), 2).unwrap();
        let s0 = p.initial_state();
        let (_, s1a) = p.predict_vx(&[3.0, 0.0], &s0);
        let (_, s1b) = p.predict_vx(&[2.5, 0.3], &s0);
        let (va, _) = p.predict_vx(&[3.1, 0.1], &s1a);
        let (vb, _) = p.predict_vx(&[3.1, 0.1], &s1b);
        assert_ne!(va, vb);
    }

    #[test]
    fn archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params(&mut NoiseStream::new(9, 0), 4).unwrap();
        let path = dir.path().join("params.json");
        p.save(&path).unwrap();
        assert!(dir.path().join("params.bin").exists());
        let q = NetworkParams::load(&path).unwrap();
        assert_eq!(p, q);
    }
}
