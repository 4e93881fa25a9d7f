//! Small MLP embedder with unit-norm outputs, manual forward/backward
//! passes, an optional classification head for pretraining, and Adam.
//!
//! Stands in for a large backbone at desk scale: input D -> hidden H ->
//! hidden H -> embedding E with tanh activations, followed by L2
//! normalization. Everything is f64 so gradient checks are clean.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::l2_norm;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct MlpConfig {
    #[serde(default = "default_input")]
    pub input: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_embed")]
    pub embed: usize,
}

fn default_input() -> usize {
    32
}
fn default_hidden() -> usize {
    64
}
fn default_embed() -> usize {
    16
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input: default_input(),
            hidden: default_hidden(),
            embed: default_embed(),
        }
    }
}

/// One fully connected layer, row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub out: usize,
    pub inp: usize,
}

impl Dense {
    fn init(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        // Scaled-uniform fan-in init.
        let a = (1.0 / inp as f64).sqrt();
        Dense {
            w: (0..out * inp).map(|_| rng.gen_range(-a..a)).collect(),
            b: vec![0.0; out],
            out,
            inp,
        }
    }

    fn zeros_like(&self) -> Dense {
        Dense {
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
            out: self.out,
            inp: self.inp,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (r, yo) in y.iter_mut().enumerate() {
            let row = &self.w[r * self.inp..(r + 1) * self.inp];
            *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        y
    }

    /// Transposed apply: `W^T g`.
    fn apply_t(&self, g: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.inp];
        for (r, gr) in g.iter().enumerate() {
            let row = &self.w[r * self.inp..(r + 1) * self.inp];
            for (yi, w) in y.iter_mut().zip(row) {
                *yi += w * gr;
            }
        }
        y
    }
}

/// Adam first/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// Embedder parameters: three dense layers, an optional classifier head,
/// and the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub cfg: MlpConfig,
    pub layers: Vec<Dense>,
    pub classifier: Option<Dense>,
    pub adam: AdamState,
}

/// Cached activations from one forward call, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    hidden1: Vec<Vec<f64>>,
    hidden2: Vec<Vec<f64>>,
    norms: Vec<f64>,
    embeddings: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }
}

/// Gradients mirroring [`MlpParams`] tensor shapes.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<Dense>,
    pub classifier: Option<Dense>,
}

impl MlpParams {
    pub fn init(cfg: MlpConfig, classes: Option<usize>, rng: &mut impl Rng) -> Self {
        let layers = vec![
            Dense::init(cfg.hidden, cfg.input, rng),
            Dense::init(cfg.hidden, cfg.hidden, rng),
            Dense::init(cfg.embed, cfg.hidden, rng),
        ];
        let classifier = classes.map(|c| Dense::init(c, cfg.embed, rng));
        let adam = Self::fresh_adam(&layers, classifier.as_ref());
        MlpParams {
            cfg,
            layers,
            classifier,
            adam,
        }
    }

    fn fresh_adam(layers: &[Dense], classifier: Option<&Dense>) -> AdamState {
        let mut sizes = Vec::new();
        for l in layers.iter().chain(classifier) {
            sizes.push(l.w.len());
            sizes.push(l.b.len());
        }
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    /// Drop the classification head (after stage-1 pretraining) and reset
    /// the optimizer state to match the remaining tensors.
    pub fn discard_classifier(&mut self) {
        self.classifier = None;
        self.adam = Self::fresh_adam(&self.layers, None);
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            classifier: self.classifier.as_ref().map(Dense::zeros_like),
        }
    }
}

/// Run the MLP on a batch; outputs are unit-norm embeddings plus the
/// activation trace needed for `backward`.
pub fn forward(params: &MlpParams, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, ForwardTrace)> {
    let mut hidden1 = Vec::with_capacity(inputs.len());
    let mut hidden2 = Vec::with_capacity(inputs.len());
    let mut norms = Vec::with_capacity(inputs.len());
    let mut embeddings = Vec::with_capacity(inputs.len());
    for x in inputs {
        if x.len() != params.cfg.input {
            return Err(Error::ShapeMismatch(format!(
                "forward: input dim {} vs configured {}",
                x.len(),
                params.cfg.input
            )));
        }
        let a1: Vec<f64> = params.layers[0].apply(x).iter().map(|z| z.tanh()).collect();
        let a2: Vec<f64> = params.layers[1].apply(&a1).iter().map(|z| z.tanh()).collect();
        let f = params.layers[2].apply(&a2);
        let norm = l2_norm(&f);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NonFinite("pre-normalization embedding".into()));
        }
        embeddings.push(f.iter().map(|v| v / norm).collect());
        hidden1.push(a1);
        hidden2.push(a2);
        norms.push(norm);
    }
    let trace = ForwardTrace {
        inputs: inputs.to_vec(),
        hidden1,
        hidden2,
        norms,
        embeddings: embeddings.clone(),
    };
    Ok((embeddings, trace))
}

/// Backpropagate an upstream gradient on the unit embeddings down to the
/// parameters and the raw inputs.
///
/// The normalization Jacobian `(I - u u^T)/||f||` is applied first; the
/// projection is idempotent, so upstream gradients that already live in the
/// tangent space compose exactly.
pub fn backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    grad_embeddings: &[Vec<f64>],
) -> Result<(ParamGrads, Vec<Vec<f64>>)> {
    if grad_embeddings.len() != trace.inputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "backward: {} upstream grads vs {} traced samples",
            grad_embeddings.len(),
            trace.inputs.len()
        )));
    }
    let mut grads = params.zero_grads();
    let mut input_grads = Vec::with_capacity(trace.inputs.len());
    for (i, g) in grad_embeddings.iter().enumerate() {
        if g.len() != params.cfg.embed {
            return Err(Error::ShapeMismatch(format!(
                "backward: grad dim {} vs embed {}",
                g.len(),
                params.cfg.embed
            )));
        }
        let u = &trace.embeddings[i];
        let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        let gf: Vec<f64> = g
            .iter()
            .zip(u)
            .map(|(gi, ui)| (gi - dot * ui) / trace.norms[i])
            .collect();

        let a2 = &trace.hidden2[i];
        accumulate_dense(&mut grads.layers[2], &gf, a2);
        let ga2 = params.layers[2].apply_t(&gf);
        let gz2: Vec<f64> = ga2.iter().zip(a2).map(|(g, a)| g * (1.0 - a * a)).collect();

        let a1 = &trace.hidden1[i];
        accumulate_dense(&mut grads.layers[1], &gz2, a1);
        let ga1 = params.layers[1].apply_t(&gz2);
        let gz1: Vec<f64> = ga1.iter().zip(a1).map(|(g, a)| g * (1.0 - a * a)).collect();

        accumulate_dense(&mut grads.layers[0], &gz1, &trace.inputs[i]);
        input_grads.push(params.layers[0].apply_t(&gz1));
    }
    Ok((grads, input_grads))
}

fn accumulate_dense(grad: &mut Dense, gout: &[f64], ain: &[f64]) {
    for (r, g) in gout.iter().enumerate() {
        let row = &mut grad.w[r * grad.inp..(r + 1) * grad.inp];
        for (w, a) in row.iter_mut().zip(ain) {
            *w += g * a;
        }
        grad.b[r] += g;
    }
}

/// Classifier logits for a batch of unit embeddings.
pub fn classifier_logits(params: &MlpParams, embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let clf = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no classifier head".into()))?;
    Ok(embeddings.iter().map(|e| clf.apply(e)).collect())
}

/// Backprop through the classifier head: returns head gradients and the
/// gradient contribution on the unit embeddings.
pub fn classifier_backward(
    params: &MlpParams,
    embeddings: &[Vec<f64>],
    grad_logits: &[Vec<f64>],
) -> Result<(Dense, Vec<Vec<f64>>)> {
    let clf = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no classifier head".into()))?;
    let mut grad = clf.zeros_like();
    let mut grad_embeddings = Vec::with_capacity(embeddings.len());
    for (e, gl) in embeddings.iter().zip(grad_logits) {
        accumulate_dense(&mut grad, gl, e);
        grad_embeddings.push(clf.apply_t(gl));
    }
    Ok((grad, grad_embeddings))
}

/// One Adam step with bias correction. Errors on non-finite gradients so a
/// diverged run halts with a diagnostic instead of poisoning the params.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &ParamGrads,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let (b1, b2) = betas;
    params.adam.step += 1;
    let t = params.adam.step as i32;
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);

    let mut tensors: Vec<&mut [f64]> = Vec::new();
    let mut gtensors: Vec<&[f64]> = Vec::new();
    for (l, g) in params.layers.iter_mut().zip(&grads.layers) {
        tensors.push(&mut l.w);
        gtensors.push(&g.w);
        tensors.push(&mut l.b);
        gtensors.push(&g.b);
    }
    match (params.classifier.as_mut(), grads.classifier.as_ref()) {
        (Some(l), Some(g)) => {
            tensors.push(&mut l.w);
            gtensors.push(&g.w);
            tensors.push(&mut l.b);
            gtensors.push(&g.b);
        }
        (None, None) => {}
        _ => {
            return Err(Error::ShapeMismatch(
                "classifier presence differs between params and grads".into(),
            ))
        }
    }

    for ((tensor, gt), (m, v)) in tensors
        .iter_mut()
        .zip(&gtensors)
        .zip(params.adam.m.iter_mut().zip(params.adam.v.iter_mut()))
    {
        if tensor.len() != gt.len() {
            return Err(Error::ShapeMismatch("adam: tensor/grad size".into()));
        }
        for k in 0..tensor.len() {
            let g = gt[k];
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient in adam_step".into()));
            }
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let mhat = m[k] / corr1;
            let vhat = v[k] / corr2;
            tensor[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// --- checkpoint format -----------------------------------------------------
//
// Little-endian binary: magic, version, dims, classifier class count (0 if
// absent), then every tensor (layer w/b in order, classifier, Adam m/v,
// step). f64 bit patterns are preserved so save/load round-trips exactly.

const CKPT_MAGIC: &[u8; 8] = b"GDSMLP\x01\x00";

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    for dim in [
        params.cfg.input,
        params.cfg.hidden,
        params.cfg.embed,
        params.classifier.as_ref().map_or(0, |c| c.out),
    ] {
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    buf.extend_from_slice(&params.adam.step.to_le_bytes());
    let write_f64s = |buf: &mut Vec<u8>, data: &[f64]| {
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    for l in params.layers.iter().chain(&params.classifier) {
        write_f64s(&mut buf, &l.w);
        write_f64s(&mut buf, &l.b);
    }
    for t in params.adam.m.iter().chain(&params.adam.v) {
        write_f64s(&mut buf, t);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic/version".into()));
    }
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        let s = take(pos, 8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    };
    let input = read_u64(&mut pos)? as usize;
    let hidden = read_u64(&mut pos)? as usize;
    let embed = read_u64(&mut pos)? as usize;
    let classes = read_u64(&mut pos)? as usize;
    let step = read_u64(&mut pos)?;
    let read_f64s = |pos: &mut usize, expect: usize| -> Result<Vec<f64>> {
        let len = {
            let s = take(pos, 8)?;
            u64::from_le_bytes(s.try_into().unwrap()) as usize
        };
        if len != expect {
            return Err(Error::Checkpoint(format!(
                "tensor length {len}, expected {expect}"
            )));
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let s = take(pos, 8)?;
            out.push(f64::from_le_bytes(s.try_into().unwrap()));
        }
        Ok(out)
    };
    let shapes = [(hidden, input), (hidden, hidden), (embed, hidden)];
    let mut layers = Vec::new();
    for (out, inp) in shapes {
        let w = read_f64s(&mut pos, out * inp)?;
        let b = read_f64s(&mut pos, out)?;
        layers.push(Dense { w, b, out, inp });
    }
    let classifier = if classes > 0 {
        let w = read_f64s(&mut pos, classes * embed)?;
        let b = read_f64s(&mut pos, classes)?;
        Some(Dense {
            w,
            b,
            out: classes,
            inp: embed,
        })
    } else {
        None
    };
    let mut sizes = Vec::new();
    for l in layers.iter().chain(&classifier) {
        sizes.push(l.w.len());
        sizes.push(l.b.len());
    }
    let moments = |pos: &mut usize| -> Result<Vec<Vec<f64>>> {
        sizes.iter().map(|&s| read_f64s(pos, s)).collect()
    };
    let m = moments(&mut pos)?;
    let v = moments(&mut pos)?;
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(MlpParams {
        cfg: MlpConfig {
            input,
            hidden,
            embed,
        },
        layers,
        classifier,
        adam: AdamState { m, v, step },
    })
}
