//! The global model `f_w = classifier ∘ h_w`: a three-block ConvNet (or a small
//! MLP) whose feature extractor feeds one linear classifier.

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{self, tag};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchKind {
    /// Three `conv3×3 → relu → avgpool2×2` blocks of `width` channels.
    Convnet { width: usize },
    /// Fully connected `affine → relu` layers of the given widths.
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub kind: ArchKind,
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
}

impl ModelArchitecture {
    pub fn convnet(input: (usize, usize, usize), width: usize, classes: usize) -> Self {
        ModelArchitecture { kind: ArchKind::Convnet { width }, input, classes }
    }

    pub fn mlp(input: (usize, usize, usize), hidden: Vec<usize>, classes: usize) -> Self {
        ModelArchitecture { kind: ArchKind::Mlp { hidden }, input, classes }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        match &self.kind {
            ArchKind::Convnet { width } => {
                if *width == 0 || h < 8 || w < 8 {
                    return Err(Error::InvalidArgument(format!(
                        "convnet needs width >= 1 and inputs of at least 8x8, got width {width}, {h}x{w}"
                    )));
                }
            }
            ArchKind::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::InvalidArgument("mlp hidden widths must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    /// Length of the feature vector produced by `h_w`.
    pub fn feature_dim(&self) -> usize {
        match &self.kind {
            ArchKind::Convnet { width } => {
                let (_, h, w) = self.input;
                width * (h / 8) * (w / 8)
            }
            ArchKind::Mlp { hidden } => hidden.last().copied().unwrap_or_else(|| self.input_dim()),
        }
    }

    /// Names, shapes and fan-in of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        match &self.kind {
            ArchKind::Convnet { width } => {
                let mut cin = self.input.0;
                for i in 0..3 {
                    out.push((format!("conv{i}.weight"), vec![*width, cin, 3, 3], cin * 9));
                    out.push((format!("conv{i}.bias"), vec![*width], cin * 9));
                    cin = *width;
                }
            }
            ArchKind::Mlp { hidden } => {
                let mut din = self.input_dim();
                for (i, &h) in hidden.iter().enumerate() {
                    out.push((format!("fc{i}.weight"), vec![h, din], din));
                    out.push((format!("fc{i}.bias"), vec![h], din));
                    din = h;
                }
            }
        }
        let f = self.feature_dim();
        out.push(("classifier.weight".into(), vec![self.classes, f], f));
        out.push(("classifier.bias".into(), vec![self.classes], f));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// Size of the parameters as transmitted: four bytes per float.
    pub fn serialized_bytes(&self) -> usize {
        4 * self.param_count()
    }

    fn check_batch(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        let (c, h, w) = self.input;
        let ok = match self.kind {
            ArchKind::Convnet { .. } => s.len() == 4 && s[1..] == [c, h, w],
            ArchKind::Mlp { .. } => s.len() >= 2 && s[1..].iter().product::<usize>() == c * h * w,
        };
        if ok {
            Ok(())
        } else {
            Err(shape_err("forward", format!("batch {s:?} for input {:?}", self.input)))
        }
    }

    /// Records `h_w(x)` on the tape; returns `[n, feature_dim]`.
    pub fn features(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_batch(tape, x)?;
        let mut h = x;
        match &self.kind {
            ArchKind::Convnet { .. } => {
                for blk in 0..3 {
                    h = tape.conv2d(h, params[2 * blk], params[2 * blk + 1])?;
                    h = tape.relu(h)?;
                    h = tape.avgpool2x2(h)?;
                }
                tape.flatten(h)
            }
            ArchKind::Mlp { hidden } => {
                h = tape.flatten(h)?;
                for i in 0..hidden.len() {
                    h = tape.affine(h, params[2 * i], params[2 * i + 1])?;
                    h = tape.relu(h)?;
                }
                Ok(h)
            }
        }
    }

    /// Applies the linear classifier to features.
    pub fn classify(&self, tape: &mut Tape, params: &[Var], features: Var) -> Result<Var> {
        let n = params.len();
        tape.affine(features, params[n - 2], params[n - 1])
    }

    /// Records `f_w(x)` (logits, no softmax); returns `[n, classes]`.
    pub fn logits(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let f = self.features(tape, params, x)?;
        self.classify(tape, params, f)
    }
}

/// Weights of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ModelArchitecture,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_tensors(arch: ModelArchitecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(shape_err("model", format!("{} tensors for {} slots", tensors.len(), layout.len())));
        }
        for ((name, shape, _), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(shape_err("model", format!("{name}: {:?} vs {shape:?}", t.shape())));
            }
        }
        let names = layout.into_iter().map(|(n, _, _)| n).collect();
        Ok(ModelParams { arch, names, tensors })
    }

    /// All-zero weights.
    pub fn zeros(arch: &ModelArchitecture) -> Result<Self> {
        let tensors = arch.layout().iter().map(|(_, s, _)| Tensor::zeros(s)).collect();
        Self::from_tensors(arch.clone(), tensors)
    }

    /// He-uniform weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(arch: &ModelArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let tensors = arch
            .layout()
            .iter()
            .map(|(name, shape, fan_in)| {
                if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let bound = (6.0 / *fan_in as f32).sqrt();
                    Tensor::from_fn(shape, |_| (2.0 * rng.random::<f32>() - 1.0) * bound)
                }
            })
            .collect();
        Self::from_tensors(arch.clone(), tensors)
    }

    /// `γ·w + (1−γ)·w̃` with `w̃ = init(arch, seed)`.
    pub fn resample(&self, gamma: f32, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        let fresh = Self::init(&self.arch, seed)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&fresh.tensors)
            .map(|(w, r)| w.lerp(gamma, r, 1.0 - gamma))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(self.arch.clone(), tensors)
    }

    pub fn arch(&self) -> &ModelArchitecture {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    pub fn forward_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let f = self.arch.features(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let f = self.arch.logits(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }

    /// Writes the little-endian checkpoint format described in `docs/formats.md`.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut out, CHECKPOINT_VERSION)?;
        let (c, h, w) = self.arch.input;
        match &self.arch.kind {
            ArchKind::Convnet { width } => {
                out.write_all(&[0])?;
                put_u32(&mut out, *width as u32)?;
            }
            ArchKind::Mlp { hidden } => {
                out.write_all(&[1])?;
                put_u32(&mut out, hidden.len() as u32)?;
                for &d in hidden {
                    put_u32(&mut out, d as u32)?;
                }
            }
        }
        for v in [c, h, w, self.arch.classes, self.tensors.len()] {
            put_u32(&mut out, v as u32)?;
        }
        for (name, t) in self.names.iter().zip(&self.tensors) {
            put_u32(&mut out, name.len() as u32)?;
            out.write_all(name.as_bytes())?;
            put_u32(&mut out, t.shape().len() as u32)?;
            for &d in t.shape() {
                put_u32(&mut out, d as u32)?;
            }
            for &v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(*CHECKPOINT_MAGIC),
                found: u32::from_be_bytes(magic),
            });
        }
        let version = get_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported checkpoint version {version}")));
        }
        let mut kind = [0u8; 1];
        input.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => ArchKind::Convnet { width: get_u32(&mut input)? as usize },
            1 => {
                let n = get_u32(&mut input)? as usize;
                let hidden = (0..n).map(|_| get_u32(&mut input).map(|v| v as usize)).collect::<Result<_>>()?;
                ArchKind::Mlp { hidden }
            }
            k => return Err(Error::InvalidArgument(format!("unknown architecture kind {k}"))),
        };
        let c = get_u32(&mut input)? as usize;
        let h = get_u32(&mut input)? as usize;
        let w = get_u32(&mut input)? as usize;
        let classes = get_u32(&mut input)? as usize;
        let count = get_u32(&mut input)? as usize;
        let arch = ModelArchitecture { kind, input: (c, h, w), classes };
        let layout = arch.layout();
        if count != layout.len() {
            return Err(shape_err("checkpoint", format!("{count} tensors for {} slots", layout.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (expected, _, _) in &layout {
            let len = get_u32(&mut input)? as usize;
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            if name != expected.as_bytes() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint tensor {:?}, expected {expected}",
                    String::from_utf8_lossy(&name)
                )));
            }
            let rank = get_u32(&mut input)? as usize;
            let shape = (0..rank).map(|_| get_u32(&mut input).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * n];
            input.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        Self::from_tensors(arch, tensors)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FAFM";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(out: &mut W, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
