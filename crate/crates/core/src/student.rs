//! The trainable student: relu MLP backbone, linear classifier head, and a linear
//! projector into the teacher's embedding space (training only).

use std::cell::Cell;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::{self, Cursor};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCMD-CK1";

thread_local! {
    static PROJECTOR_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of projector evaluations on the current thread.
pub fn projector_calls() -> u64 {
    PROJECTOR_CALLS.with(Cell::get)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub teacher_embed_dim: usize,
    pub init_seed: u64,
    pub projector_bias: bool,
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.num_classes == 0
            || self.teacher_embed_dim == 0
            || self.hidden_dims.is_empty()
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::Config(format!(
                "student dims must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap()
    }

    /// Shapes in storage order: backbone `(w, b)` pairs, head `(w, b)`, projector `w` (+ `b`).
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            shapes.push(vec![fan_in, h]);
            shapes.push(vec![h]);
            fan_in = h;
        }
        shapes.push(vec![fan_in, self.num_classes]);
        shapes.push(vec![self.num_classes]);
        shapes.push(vec![fan_in, self.teacher_embed_dim]);
        if self.projector_bias {
            shapes.push(vec![self.teacher_embed_dim]);
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    fn head_index(&self) -> usize {
        2 * self.hidden_dims.len()
    }

    fn projector_index(&self) -> usize {
        self.head_index() + 2
    }
}

/// User-facing architecture choices; the remaining sizes come from data and teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSettings {
    pub hidden_dims: Vec<usize>,
    pub projector_bias: bool,
    pub init_seed: u64,
}

impl Default for StudentSettings {
    fn default() -> Self {
        StudentSettings {
            hidden_dims: vec![64, 64],
            projector_bias: true,
            init_seed: 0,
        }
    }
}

impl StudentSettings {
    pub fn resolve(
        &self,
        input_dim: usize,
        num_classes: usize,
        teacher_embed_dim: usize,
    ) -> StudentConfig {
        StudentConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes,
            teacher_embed_dim,
            init_seed: self.init_seed,
            projector_bias: self.projector_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams {
    pub config: StudentConfig,
    tensors: Vec<Tensor>,
}

impl StudentParams {
    /// He-scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: &StudentConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(config.init_seed);
        let tensors = config
            .shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let values = if shape.len() == 2 {
                    let normal = Normal::new(0.0, (2.0 / shape[0] as f64).sqrt()).unwrap();
                    (0..n).map(|_| normal.sample(&mut r)).collect()
                } else {
                    vec![0.0; n]
                };
                Tensor::new(shape, values)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StudentParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: StudentConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        if shapes.len() != tensors.len()
            || shapes
                .iter()
                .zip(&tensors)
                .any(|(s, t)| s.as_slice() != t.shape())
        {
            return Err(Error::Contract(
                "tensor shapes do not match the student config".into(),
            ));
        }
        Ok(StudentParams { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values().iter().all(|v| v.is_finite()))
    }

    pub fn head_index(&self) -> usize {
        self.config.head_index()
    }

    pub fn projector_index(&self) -> usize {
        self.config.projector_index()
    }

    /// Puts every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundStudent {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundStudent {
            vars,
            layers: self.config.hidden_dims.len(),
            projector_bias: self.config.projector_bias,
        }
    }

    /// Classifier logits for a `B x D` batch; the projector is not touched.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = bound.features(&mut tape, xv)?;
        let z = bound.logits(&mut tape, f)?;
        Ok(tape.value(z).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        let (rows, _) = z.dims2()?;
        Ok((0..rows)
            .map(|i| crate::teacher::argmax(z.row(i)))
            .collect())
    }

    pub fn to_bytes(&self, step: usize) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: 1,
            config: self.config.clone(),
            step,
            param_count: self.param_count(),
        };
        let mut payload = Vec::with_capacity(8 * self.param_count());
        for t in &self.tensors {
            t.values()
                .iter()
                .for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(io::frame(
            CHECKPOINT_MAGIC,
            &serde_json::to_vec(&header)?,
            &payload,
        ))
    }

    /// Returns the parameters and the training step stored with them.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let (header, payload) = io::unframe(CHECKPOINT_MAGIC, bytes)?;
        let h: CheckpointHeader =
            serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
        if h.format_version != 1 {
            return Err(Error::Header(format!(
                "unsupported format_version {}",
                h.format_version
            )));
        }
        h.config.validate()?;
        if h.param_count != h.config.param_count() {
            return Err(Error::Header("param_count disagrees with config".into()));
        }
        let mut cur = Cursor::new(payload);
        let mut tensors = Vec::new();
        for shape in h.config.shapes() {
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, values)?);
        }
        cur.finish()?;
        Ok((StudentParams::from_tensors(h.config, tensors)?, h.step))
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        io::write_atomic(path, &self.to_bytes(step)?)
    }

    pub fn load(path: &Path) -> Result<(Self, usize)> {
        Self::from_bytes(&io::read_file(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: StudentConfig,
    step: usize,
    param_count: usize,
}

/// Student parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundStudent {
    vars: Vec<Var>,
    layers: usize,
    projector_bias: bool,
}

impl BoundStudent {
    /// Wraps variables already on a tape, in storage order.
    pub fn from_vars(config: &StudentConfig, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != config.shapes().len() {
            return Err(Error::Contract(format!(
                "expected {} parameter variables, got {}",
                config.shapes().len(),
                vars.len()
            )));
        }
        Ok(BoundStudent {
            vars,
            layers: config.hidden_dims.len(),
            projector_bias: config.projector_bias,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn head_vars(&self) -> [Var; 2] {
        [self.vars[2 * self.layers], self.vars[2 * self.layers + 1]]
    }

    pub fn projector_vars(&self) -> &[Var] {
        &self.vars[2 * self.layers + 2..]
    }

    pub fn backbone_vars(&self) -> &[Var] {
        &self.vars[..2 * self.layers]
    }

    /// Backbone output: relu after every hidden layer.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.layers {
            let z = tape.matmul(h, self.vars[2 * l])?;
            let z = tape.add_row(z, self.vars[2 * l + 1])?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    pub fn logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let [w, b] = self.head_vars();
        let z = tape.matmul(features, w)?;
        tape.add_row(z, b)
    }

    /// Linear projection into the teacher space followed by row normalization.
    pub fn project(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        PROJECTOR_CALLS.with(|c| c.set(c.get() + 1));
        let p = self.projector_vars();
        let mut z = tape.matmul(features, p[0])?;
        if self.projector_bias {
            z = tape.add_row(z, p[1])?;
        }
        tape.l2_normalize(z)
    }

    /// Gradients in storage order; parameters that received none get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)
            })
            .collect()
    }
}
