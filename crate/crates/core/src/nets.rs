//! Teacher/student depth networks, the image transformation network, their
//! batch-norm statistics, and the single-file checkpoint format.
//!
//! Everything downstream touches networks only through [`forward_depth`],
//! [`capture_batchwise_stats`], [`running_stats`], [`forward_transform`] and
//! the `build` constructors, so architectures can be swapped freely.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderDecoder, Head, Mode, NetTrace, StageSpec};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"DFDCKPT\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthNetworkSpec {
    pub base_width: usize,
    pub depth_stages: usize,
    pub uses_batchnorm: bool,
    /// Upper end of the output range; outputs lie in `(0, max_depth]`.
    pub max_depth: f64,
    /// Configured input size as `(height, width)`.
    pub input_size: (usize, usize),
}

impl DepthNetworkSpec {
    pub fn teacher(max_depth: f64, input_size: (usize, usize)) -> Self {
        Self { base_width: 32, depth_stages: 4, uses_batchnorm: true, max_depth, input_size }
    }

    pub fn student(max_depth: f64, input_size: (usize, usize)) -> Self {
        Self { base_width: 8, depth_stages: 4, uses_batchnorm: true, max_depth, input_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(Error::Config(format!("base_width must be >= 4, got {}", self.base_width)));
        }
        if self.depth_stages < 2 {
            return Err(Error::Config(format!("depth_stages must be >= 2, got {}", self.depth_stages)));
        }
        if !(self.max_depth.is_finite() && self.max_depth > 0.0) {
            return Err(Error::Config(format!("max_depth must be positive, got {}", self.max_depth)));
        }
        let (h, w) = self.input_size;
        if h < 1 << self.depth_stages || w < 1 << self.depth_stages {
            return Err(Error::Config(format!("input size {h}x{w} too small for {} stages", self.depth_stages)));
        }
        Ok(())
    }

    /// Encoder widths grow once and then plateau; decoder widths mirror the
    /// encoder at half width.
    fn architecture(&self) -> EncoderDecoder {
        let widths: Vec<usize> = (0..self.depth_stages).map(|s| self.base_width * if s == 0 { 1 } else { 2 }).collect();
        let stages: Vec<StageSpec> = widths.iter().map(|&width| StageSpec { width, stride: 2, dilation: 1 }).collect();
        let decoder: Vec<usize> = widths[..self.depth_stages - 1].iter().map(|&w| (w / 2).max(4)).collect();
        EncoderDecoder::new(3, 1, &stages, &decoder, self.uses_batchnorm, Head::ScaledSigmoid { max_depth: self.max_depth })
    }

    pub fn param_count(&self) -> usize {
        self.architecture().param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Checks the compression setting: the teacher must have strictly more
/// parameters than the student.
pub fn validate_compression_pair(teacher: &DepthNetworkSpec, student: &DepthNetworkSpec) -> Result<()> {
    if !teacher.uses_batchnorm {
        return Err(Error::Config("teacher must use batch normalization".into()));
    }
    let (t, s) = (teacher.param_count(), student.param_count());
    if t <= s {
        return Err(Error::Config(format!("teacher ({t} params) must be larger than student ({s} params)")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformNetworkSpec {
    pub base_width: usize,
    /// One dilation rate per encoder stage.
    pub dilation_rates: Vec<usize>,
    /// `(encoder stage, decoder stage)` pairs; must be exactly `(k, k)` for
    /// every stage except the deepest.
    pub skip_connections: Vec<(usize, usize)>,
    pub input_size: (usize, usize),
}

impl TransformNetworkSpec {
    pub fn standard(input_size: (usize, usize)) -> Self {
        Self { base_width: 8, dilation_rates: vec![1, 2, 4], skip_connections: vec![(0, 0), (1, 1)], input_size }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.dilation_rates.len();
        if stages < 2 {
            return Err(Error::Config("transform network needs at least 2 stages".into()));
        }
        if self.base_width < 1 {
            return Err(Error::Config("transform base_width must be positive".into()));
        }
        if self.dilation_rates.iter().any(|&d| d == 0) {
            return Err(Error::Config("dilation rates must be positive".into()));
        }
        let mut skips = self.skip_connections.clone();
        skips.sort_unstable();
        let symmetric: Vec<(usize, usize)> = (0..stages - 1).map(|k| (k, k)).collect();
        if skips != symmetric {
            return Err(Error::Config(format!("skip connections must be symmetric {symmetric:?}, got {:?}", self.skip_connections)));
        }
        let (h, w) = self.input_size;
        if h < 1 << stages || w < 1 << stages {
            return Err(Error::Config(format!("input size {h}x{w} too small for {stages} stages")));
        }
        Ok(())
    }

    fn architecture(&self) -> EncoderDecoder {
        let stages: Vec<StageSpec> = self
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(s, &dilation)| StageSpec { width: self.base_width << s, stride: 2, dilation })
            .collect();
        let decoder: Vec<usize> = (0..stages.len() - 1).map(|k| self.base_width << k).collect();
        EncoderDecoder::new(3, 3, &stages, &decoder, false, Head::ResidualClamp)
    }

    pub fn param_count(&self) -> usize {
        self.architecture().param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Running,
    Batchwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F> LayerStats<F> {
    pub fn channel_count(&self) -> usize {
        self.mean.len()
    }
}

/// Per-layer BN statistics in the network's forward traversal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatSet<F> {
    pub kind: StatKind,
    pub layers: Vec<LayerStats<F>>,
}

impl<F: Clone> BnStatSet<F> {
    /// Keeps only layers whose mask entry is true.
    pub fn select(&self, mask: &[bool]) -> Self {
        Self {
            kind: self.kind,
            layers: self.layers.iter().zip(mask).filter(|(_, &keep)| keep).map(|(l, _)| l.clone()).collect(),
        }
    }
}

/// Which teacher BN layers participate in statistic alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnLayerMask {
    #[default]
    All,
    EncoderOnly,
}

/// A teacher or student depth estimator.
#[derive(Debug, Clone)]
pub struct DepthNet<F = f32> {
    spec: DepthNetworkSpec,
    role: Role,
    arch: EncoderDecoder,
    params: Vec<F>,
    buffers: Vec<F>,
}

/// Image-to-image transformation network with a residual, clamped output.
#[derive(Debug, Clone)]
pub struct TransformNet<F = f32> {
    spec: TransformNetworkSpec,
    arch: EncoderDecoder,
    params: Vec<F>,
}

fn check_images<F: Scalar>(images: &Tensor<F>, size: (usize, usize)) -> Result<()> {
    let [n, c, h, w] = images.shape();
    if n == 0 {
        return Err(Error::Shape("empty image batch".into()));
    }
    if c != 3 || (h, w) != size {
        return Err(Error::Shape(format!("expected N x 3 x {} x {} images, got {:?}", size.0, size.1, images.shape())));
    }
    Ok(())
}

impl<F: Scalar> DepthNet<F> {
    pub fn build(spec: DepthNetworkSpec, role: Role, seed: u64) -> Result<Self> {
        spec.validate()?;
        if role == Role::Teacher && !spec.uses_batchnorm {
            return Err(Error::Config("teacher must use batch normalization".into()));
        }
        let arch = spec.architecture();
        let mut params = vec![F::zero(); arch.param_len];
        let mut buffers = vec![F::zero(); arch.buffer_len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        arch.init(&mut params, &mut buffers, &mut rng, 0.1);
        Ok(Self { spec, role, arch, params, buffers })
    }

    pub fn spec(&self) -> &DepthNetworkSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[F] {
        &self.buffers
    }

    pub fn bn_layer_count(&self) -> usize {
        self.arch.batchnorms().count()
    }

    /// Mask over BN layers (traversal order) selecting the requested subset.
    pub fn bn_mask(&self, which: BnLayerMask) -> Vec<bool> {
        let enc = self.arch.encoder.iter().filter(|b| b.bn.is_some()).count();
        (0..self.bn_layer_count()).map(|i| which == BnLayerMask::All || i < enc).collect()
    }

    pub(crate) fn check_input(&self, images: &Tensor<F>) -> Result<()> {
        check_images(images, self.spec.input_size)
    }

    pub(crate) fn trace(&self, images: &Tensor<F>, mode: Mode) -> Result<NetTrace<F>> {
        self.check_input(images)?;
        if mode == Mode::Train && images.batch() < 2 && self.spec.uses_batchnorm {
            return Err(Error::InvalidInput("train-mode batch norm needs a batch of at least 2".into()));
        }
        Ok(self.arch.forward(&self.params, &self.buffers, images, mode))
    }

    pub(crate) fn backward(
        &self,
        trace: &NetTrace<F>,
        grad_output: Option<&Tensor<F>>,
        bn_input_grads: Option<&[Tensor<F>]>,
        grads: Option<&mut [F]>,
        need_input: bool,
    ) -> Option<Tensor<F>> {
        self.arch.backward(&self.params, trace, grad_output, bn_input_grads, grads, need_input)
    }

    /// Overwrites the running statistics; layer order as in [`running_stats`].
    pub fn set_running_stats(&mut self, stats: &BnStatSet<F>) -> Result<()> {
        let bns: Vec<_> = self.arch.batchnorms().cloned().collect();
        if stats.layers.len() != bns.len() || stats.layers.iter().zip(&bns).any(|(l, bn)| l.channel_count() != bn.channels || l.var.len() != bn.channels) {
            return Err(Error::InvalidInput("statistics do not match the network's batch-norm layers".into()));
        }
        for (l, bn) in stats.layers.iter().zip(&bns) {
            self.buffers[bn.running_mean..bn.running_mean + bn.channels].copy_from_slice(&l.mean);
            self.buffers[bn.running_var..bn.running_var + bn.channels].copy_from_slice(&l.var);
        }
        Ok(())
    }

    pub(crate) fn apply_running_update(&mut self, trace: &NetTrace<F>) {
        self.arch.update_running(&mut self.buffers, trace);
    }

    pub fn cast<G: Scalar>(&self) -> DepthNet<G> {
        DepthNet {
            spec: self.spec.clone(),
            role: self.role,
            arch: self.arch.clone(),
            params: self.params.iter().map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect(),
            buffers: self.buffers.iter().map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    /// Copies parameters and running statistics from a network of identical
    /// architecture.
    pub fn load_state_from(&mut self, other: &DepthNet<F>) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::Checkpoint("spec mismatch while copying network state".into()));
        }
        self.params.clone_from(&other.params);
        self.buffers.clone_from(&other.buffers);
        Ok(())
    }

    pub fn save(&self, path: &Path, config: Option<&serde_json::Value>) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: F::DTYPE.to_string(),
            network: NetworkDescriptor::Depth { spec: self.spec.clone(), role: self.role },
            param_len: self.params.len(),
            buffer_len: self.buffers.len(),
            config: config.cloned(),
        };
        write_checkpoint(path, &header, &self.params, &self.buffers)
    }

    /// Loads a checkpoint; when `expected` is given the stored spec must
    /// match it before any weights are restored.
    pub fn load(path: &Path, expected: Option<&DepthNetworkSpec>) -> Result<(Self, Option<serde_json::Value>)> {
        let (header, params, buffers) = read_checkpoint::<F>(path)?;
        let NetworkDescriptor::Depth { spec, role } = header.network else {
            return Err(Error::Checkpoint(format!("{} holds a transform network, not a depth network", path.display())));
        };
        if let Some(exp) = expected {
            if exp != &spec {
                return Err(Error::Checkpoint(format!("{}: stored spec {spec:?} does not match expected {exp:?}", path.display())));
            }
        }
        let mut net = Self::build(spec, role, 0)?;
        if params.len() != net.params.len() || buffers.len() != net.buffers.len() {
            return Err(Error::Checkpoint(format!("{}: parameter blob size does not match spec", path.display())));
        }
        net.params = params;
        net.buffers = buffers;
        Ok((net, header.config))
    }
}

impl<F: Scalar> TransformNet<F> {
    pub fn build(spec: TransformNetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let arch = spec.architecture();
        let mut params = vec![F::zero(); arch.param_len];
        let mut buffers = vec![F::zero(); arch.buffer_len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        arch.init(&mut params, &mut buffers, &mut rng, 0.1);
        Ok(Self { spec, arch, params })
    }

    pub fn spec(&self) -> &TransformNetworkSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub(crate) fn trace(&self, images: &Tensor<F>) -> Result<NetTrace<F>> {
        check_images(images, self.spec.input_size)?;
        Ok(self.arch.forward(&self.params, &[], images, Mode::Train))
    }

    pub(crate) fn backward(&self, trace: &NetTrace<F>, grad_output: &Tensor<F>, grads: Option<&mut [F]>, need_input: bool) -> Option<Tensor<F>> {
        self.arch.backward(&self.params, trace, Some(grad_output), None, grads, need_input)
    }

    pub fn cast<G: Scalar>(&self) -> TransformNet<G> {
        TransformNet {
            spec: self.spec.clone(),
            arch: self.arch.clone(),
            params: self.params.iter().map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn save(&self, path: &Path, config: Option<&serde_json::Value>) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: F::DTYPE.to_string(),
            network: NetworkDescriptor::Transform { spec: self.spec.clone() },
            param_len: self.params.len(),
            buffer_len: 0,
            config: config.cloned(),
        };
        write_checkpoint(path, &header, &self.params, &[])
    }

    pub fn load(path: &Path, expected: Option<&TransformNetworkSpec>) -> Result<(Self, Option<serde_json::Value>)> {
        let (header, params, _) = read_checkpoint::<F>(path)?;
        let NetworkDescriptor::Transform { spec } = header.network else {
            return Err(Error::Checkpoint(format!("{} holds a depth network, not a transform network", path.display())));
        };
        if let Some(exp) = expected {
            if exp != &spec {
                return Err(Error::Checkpoint(format!("{}: stored spec {spec:?} does not match expected {exp:?}", path.display())));
            }
        }
        let mut net = Self::build(spec, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!("{}: parameter blob size does not match spec", path.display())));
        }
        net.params = params;
        Ok((net, header.config))
    }
}

/// Eval-mode depth prediction, `N x 1 x H x W`, strictly positive and at
/// most `max_depth`.
pub fn forward_depth<F: Scalar>(net: &DepthNet<F>, images: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(net.trace(images, Mode::Eval)?.output)
}

/// Batch-wise mean and biased variance of every BN layer's input, from an
/// eval-mode pass. Running statistics are left untouched.
pub fn capture_batchwise_stats<F: Scalar>(net: &DepthNet<F>, images: &Tensor<F>) -> Result<BnStatSet<F>> {
    if images.batch() < 2 {
        return Err(Error::InvalidInput(format!("batch-wise statistics need a batch of at least 2, got {}", images.batch())));
    }
    if net.bn_layer_count() == 0 {
        return Err(Error::InvalidInput("network has no batch-norm layers".into()));
    }
    let trace = net.trace(images, Mode::Eval)?;
    Ok(stats_from_trace(&trace))
}

pub(crate) fn stats_from_trace<F: Scalar>(trace: &NetTrace<F>) -> BnStatSet<F> {
    BnStatSet {
        kind: StatKind::Batchwise,
        layers: trace.bn_input_stats().into_iter().map(|s| LayerStats { mean: s.mean, var: s.var }).collect(),
    }
}

pub fn running_stats<F: Scalar>(net: &DepthNet<F>) -> Result<BnStatSet<F>> {
    if net.bn_layer_count() == 0 {
        return Err(Error::InvalidInput("network has no batch-norm layers".into()));
    }
    let layers = net
        .arch
        .batchnorms()
        .map(|bn| LayerStats {
            mean: net.buffers[bn.running_mean..bn.running_mean + bn.channels].to_vec(),
            var: net.buffers[bn.running_var..bn.running_var + bn.channels].to_vec(),
        })
        .collect();
    Ok(BnStatSet { kind: StatKind::Running, layers })
}

pub fn forward_transform<F: Scalar>(g: &TransformNet<F>, images: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(g.trace(images)?.output)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NetworkDescriptor {
    Depth { spec: DepthNetworkSpec, role: Role },
    Transform { spec: TransformNetworkSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dtype: String,
    network: NetworkDescriptor,
    param_len: usize,
    buffer_len: usize,
    config: Option<serde_json::Value>,
}

fn write_checkpoint<F: Scalar>(path: &Path, header: &CheckpointHeader, params: &[F], buffers: &[F]) -> Result<()> {
    let header_json = serde_json::to_vec(header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + (params.len() + buffers.len()) * std::mem::size_of::<F>());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&F::to_le_bytes_vec(params));
    bytes.extend_from_slice(&F::to_le_bytes_vec(buffers));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_checkpoint<F: Scalar>(path: &Path) -> Result<(CheckpointHeader, Vec<F>, Vec<F>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    // Peek at the version before committing to the full schema.
    let raw: serde_json::Value = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: format_version {version:?} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            path.display()
        )));
    }
    let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| Error::format(path, e.to_string()))?;
    if header.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!("{}: stored dtype {} cannot be loaded as {}", path.display(), header.dtype, F::DTYPE)));
    }
    let width = std::mem::size_of::<F>();
    let data = &bytes[16 + hlen..];
    if data.len() != (header.param_len + header.buffer_len) * width {
        return Err(Error::Checkpoint(format!("{}: payload size does not match header", path.display())));
    }
    let (p, b) = data.split_at(header.param_len * width);
    let params = F::from_le_bytes_slice(p).ok_or_else(|| Error::Checkpoint("corrupt parameter blob".into()))?;
    let buffers = F::from_le_bytes_slice(b).ok_or_else(|| Error::Checkpoint("corrupt buffer blob".into()))?;
    Ok((header, params, buffers))
}
