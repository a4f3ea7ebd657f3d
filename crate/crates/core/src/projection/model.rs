use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 6] = b"NRPMv1";
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input: 1024,
            hidden: 500,
            output: 500,
        }
    }
}

impl ModelDims {
    pub fn with_input(input: usize) -> Self {
        ModelDims {
            input,
            ..Self::default()
        }
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Two-layer SiLU MLP: `W2 · dropout(silu(W1 · x + b1)) + b2`.
///
/// Parameters are stored as `f32`; all arithmetic runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    pub(crate) dims: ModelDims,
    pub(crate) dropout: f64,
    pub(crate) w1: Array2<f32>,
    pub(crate) b1: Array1<f32>,
    pub(crate) w2: Array2<f32>,
    pub(crate) b2: Array1<f32>,
}

/// `f64` copies of the parameters for one batch of computation.
pub(crate) struct WideParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Activations {
    pub pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub out: Array2<f64>,
}

impl ProjectionModel {
    pub fn zeros(dims: ModelDims, dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidParams(format!(
                "dropout must be in [0, 1), got {dropout}"
            )));
        }
        if dims.input == 0 || dims.hidden == 0 || dims.output == 0 {
            return Err(Error::InvalidParams("model dimensions must be positive".into()));
        }
        Ok(ProjectionModel {
            dims,
            dropout,
            w1: Array2::zeros((dims.hidden, dims.input)),
            b1: Array1::zeros(dims.hidden),
            w2: Array2::zeros((dims.output, dims.hidden)),
            b2: Array1::zeros(dims.output),
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn new_random(dims: ModelDims, dropout: f64, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(dims, dropout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_in = 1.0 / (dims.input as f64).sqrt();
        let b_hid = 1.0 / (dims.hidden as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.random_range(-b_in..b_in) as f32);
        m.b1.iter_mut().for_each(|w| *w = rng.random_range(-b_in..b_in) as f32);
        m.w2.iter_mut()
            .for_each(|w| *w = rng.random_range(-b_hid..b_hid) as f32);
        m.b2.iter_mut()
            .for_each(|w| *w = rng.random_range(-b_hid..b_hid) as f32);
        Ok(m)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn w1(&self) -> &Array2<f32> {
        &self.w1
    }

    pub fn b1(&self) -> &Array1<f32> {
        &self.b1
    }

    pub fn w2(&self) -> &Array2<f32> {
        &self.w2
    }

    pub fn b2(&self) -> &Array1<f32> {
        &self.b2
    }

    pub fn w1_mut(&mut self) -> &mut Array2<f32> {
        &mut self.w1
    }

    pub fn b1_mut(&mut self) -> &mut Array1<f32> {
        &mut self.b1
    }

    pub fn w2_mut(&mut self) -> &mut Array2<f32> {
        &mut self.w2
    }

    pub fn b2_mut(&mut self) -> &mut Array1<f32> {
        &mut self.b2
    }

    /// All parameters in checkpoint order: W1, b1, W2, b2 (row-major).
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dims.num_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    pub(crate) fn wide(&self) -> WideParams {
        WideParams {
            w1: self.w1.mapv(f64::from),
            b1: self.b1.mapv(f64::from),
            w2: self.w2.mapv(f64::from),
            b2: self.b2.mapv(f64::from),
        }
    }

    /// Inverted-dropout masks (`0` or `1 / (1 - p)`) for `rows` inputs.
    pub fn dropout_masks<R: Rng>(&self, rows: usize, rng: &mut R) -> Array2<f64> {
        let keep = 1.0 - self.dropout;
        let scale = 1.0 / keep;
        Array2::from_shape_fn((rows, self.dims.hidden), |_| {
            if self.dropout == 0.0 || rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
    }

    pub(crate) fn forward_rows(&self, p: &WideParams, x: ArrayView2<f64>, masks: Option<&Array2<f64>>) -> Activations {
        let mut pre = x.dot(&p.w1.t());
        pre += &p.b1.view().insert_axis(Axis(0));
        let mut hidden = pre.mapv(silu);
        if let Some(m) = masks {
            hidden *= m;
        }
        let mut out = hidden.dot(&p.w2.t());
        out += &p.b2.view().insert_axis(Axis(0));
        Activations { pre, hidden, out }
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dims.input {
            return Err(Error::DimMismatch {
                expected: self.dims.input,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Projects one vector. With `training`, a fresh dropout mask is drawn from `rng`.
    pub fn forward<R: Rng>(&self, x: &[f32], training: bool, rng: &mut R) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let row = Array2::from_shape_fn((1, x.len()), |(_, j)| f64::from(x[j]));
        let masks = training.then(|| self.dropout_masks(1, rng));
        let act = self.forward_rows(&self.wide(), row.view(), masks.as_ref());
        Ok(act.out.iter().map(|&v| v as f32).collect())
    }

    /// Deterministic inference over many inputs.
    pub fn project_batch(&self, xs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        for x in xs {
            self.check_input(x)?;
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.wide();
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(1024) {
            let rows = Array2::from_shape_fn((chunk.len(), self.dims.input), |(i, j)| f64::from(chunk[i][j]));
            let act = self.forward_rows(&p, rows.view(), None);
            out.extend(act.out.outer_iter().map(|r| r.iter().map(|&v| v as f32).collect()));
        }
        Ok(out)
    }

    pub fn project(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.project_batch(&[x])?.pop().expect("one row"))
    }

    pub fn to_bytes(&self, config: Option<&serde_json::Value>) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            input_dim: self.dims.input,
            hidden_dim: self.dims.hidden,
            output_dim: self.dims.output,
            activation: "silu".into(),
            dropout: self.dropout,
            config: config.cloned(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::json(0, e))?;
        let mut out = Vec::with_capacity(MODEL_MAGIC.len() + 4 + header.len() + self.dims.num_params() * 4 + 4);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for x in self.flat_params() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint, returning the model and any embedded run config.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<serde_json::Value>)> {
        let corrupt = |m: &str| Error::CorruptModel(m.to_string());
        if bytes.len() < MODEL_MAGIC.len() + 8 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut pos = MODEL_MAGIC.len();
        let hlen = u32::from_le_bytes(body[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        pos += 4;
        let header_bytes = body.get(pos..pos + hlen).ok_or_else(|| corrupt("truncated header"))?;
        pos += hlen;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::CorruptModel(format!("bad header: {e}")))?;
        if header.activation != "silu" {
            return Err(Error::CorruptModel(format!(
                "unsupported activation {:?}",
                header.activation
            )));
        }
        let dims = ModelDims {
            input: header.input_dim,
            hidden: header.hidden_dim,
            output: header.output_dim,
        };
        let mut model = Self::zeros(dims, header.dropout).map_err(|e| Error::CorruptModel(e.to_string()))?;
        let want = dims.num_params() * 4;
        if body.len() - pos != want {
            return Err(Error::CorruptModel(format!(
                "expected {want} parameter bytes, found {}",
                body.len() - pos
            )));
        }
        let mut floats = body[pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for slot in model
            .w1
            .iter_mut()
            .chain(model.b1.iter_mut())
            .chain(model.w2.iter_mut())
            .chain(model.b2.iter_mut())
        {
            *slot = floats.next().expect("length checked");
        }
        Ok((model, header.config))
    }

    pub fn save(&self, path: impl AsRef<Path>, config: Option<&serde_json::Value>) -> Result<()> {
        fs::write(path, self.to_bytes(config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<serde_json::Value>)> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    activation: String,
    dropout: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    config: Option<serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelDims {
        ModelDims {
            input: 6,
            hidden: 5,
            output: 4,
        }
    }

    /// Straight-line reimplementation of the forward pass.
    #[allow(clippy::needless_range_loop)]
    fn reference_forward(m: &ProjectionModel, x: &[f32]) -> Vec<f64> {
        let d = m.dims();
        let mut h = vec![0.0f64; d.hidden];
        for i in 0..d.hidden {
            let mut z = f64::from(m.b1[i]);
            for j in 0..d.input {
                z += f64::from(m.w1[[i, j]]) * f64::from(x[j]);
            }
            h[i] = z * (1.0 / (1.0 + (-z).exp()));
        }
        (0..d.output)
            .map(|o| {
                let mut y = f64::from(m.b2[o]);
                for i in 0..d.hidden {
                    y += f64::from(m.w2[[o, i]]) * h[i];
                }
                y
            })
            .collect()
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.73105858).abs() < 1e-8);
        assert!((silu(40.0) - 40.0).abs() < 1e-12);
        assert!(silu(-40.0).abs() < 1e-12);
    }

    #[test]
    fn silu_grad_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn default_shape() {
        let m = ProjectionModel::new_random(ModelDims::default(), DEFAULT_DROPOUT, 1).unwrap();
        let x = vec![0.01f32; 1024];
        assert_eq!(m.project(&x).unwrap().len(), 500);
        assert!(matches!(m.project(&[0.0; 10]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn zero_model_and_zero_second_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ProjectionModel::zeros(small(), 0.1).unwrap();
        assert!(m.forward(&[1.0; 6], true, &mut rng).unwrap().iter().all(|&v| v == 0.0));
        let mut m = ProjectionModel::new_random(small(), 0.1, 3).unwrap();
        m.w1.fill(0.0);
        for i in 0..5 {
            m.w1[[i, i]] = 1.0;
        }
        m.w2.fill(0.0);
        m.b2.fill(0.0);
        for x in [[3.0f32; 6], [-1.0, 2.0, 0.0, 5.0, 1.0, 9.0]] {
            assert!(m.project(&x).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_matches_reference() {
        for seed in 0..5 {
            let m = ProjectionModel::new_random(small(), 0.1, seed).unwrap();
            let x: Vec<f32> = (0..6).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
            let got = m.project(&x).unwrap();
            let want = reference_forward(&m, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((f64::from(*g) - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inference_is_pure_training_is_not() {
        let m = ProjectionModel::new_random(small(), 0.5, 9).unwrap();
        let x = [0.3f32, -0.2, 0.5, 0.1, 0.9, -0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = m.forward(&x, false, &mut rng).unwrap();
        let b = m.forward(&x, false, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, m.project(&x).unwrap());
        let outs: Vec<_> = (0..8).map(|_| m.forward(&x, true, &mut rng).unwrap()).collect();
        assert!(outs.iter().any(|o| o != &a));
    }

    #[test]
    fn dropout_masks_are_inverted() {
        let m = ProjectionModel::new_random(small(), 0.25, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let masks = m.dropout_masks(2000, &mut rng);
        assert!(masks.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let mean = masks.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        let none = ProjectionModel::new_random(small(), 0.0, 0)
            .unwrap()
            .dropout_masks(10, &mut rng);
        assert!(none.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = ProjectionModel::new_random(small(), 0.1, 4).unwrap();
        let cfg = serde_json::json!({"seed": 4});
        let bytes = m.to_bytes(Some(&cfg)).unwrap();
        let (back, got_cfg) = ProjectionModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(got_cfg, Some(cfg.clone()));
        assert_eq!(back.to_bytes(Some(&cfg)).unwrap(), bytes);

        assert!(matches!(
            ProjectionModel::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::CorruptModel(_))
        ));
        let mut flipped = bytes.clone();
        let at = bytes.len() - 20;
        flipped[at] ^= 1;
        assert!(matches!(
            ProjectionModel::from_bytes(&flipped),
            Err(Error::CorruptModel(_))
        ));
        assert!(matches!(
            ProjectionModel::from_bytes(b"NRPMv0garbage"),
            Err(Error::CorruptModel(_))
        ));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(ProjectionModel::zeros(small(), 1.0).is_err());
        assert!(ProjectionModel::zeros(ModelDims { input: 0, ..small() }, 0.1).is_err());
    }
}
