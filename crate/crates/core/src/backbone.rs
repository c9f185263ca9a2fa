//! Spatio-temporal graph-convolutional encoder.
//!
//! Each block is a partitioned graph convolution over joints followed by a
//! temporal convolution over frames, both batch-normalised, with a residual
//! path. Input `N × T × V × 3`, output `N × T′ × V × C`.

use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SkeletonLayout, SkeletonSequence};
use crate::error::{Error, Result};
use crate::params::{uniform, BatchNorm, Dense, Mode, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::{SparseAdjacency, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    Uniform,
    Distance,
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub temporal_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Explicit block list; when empty the default six-block pattern is
    /// derived from `base_channels`.
    pub blocks: Vec<BlockSpec>,
    pub temporal_kernel: usize,
    pub partition_strategy: PartitionStrategy,
    pub base_channels: usize,
    /// Per-(joint, coordinate) input normalisation ahead of the first block.
    pub input_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            temporal_kernel: 9,
            partition_strategy: PartitionStrategy::Spatial,
            base_channels: 64,
            input_norm: true,
        }
    }
}

impl EncoderConfig {
    /// A small encoder that trains in seconds on one CPU core.
    pub fn desk() -> Self {
        Self {
            blocks: vec![
                BlockSpec { out_channels: 16, temporal_stride: 1 },
                BlockSpec { out_channels: 32, temporal_stride: 2 },
                BlockSpec { out_channels: 32, temporal_stride: 2 },
            ],
            temporal_kernel: 5,
            ..Self::default()
        }
    }

    pub fn resolved_blocks(&self) -> Vec<BlockSpec> {
        if !self.blocks.is_empty() {
            return self.blocks.clone();
        }
        let b = self.base_channels;
        [(b, 1), (b, 1), (2 * b, 2), (2 * b, 1), (4 * b, 2), (4 * b, 1)]
            .into_iter()
            .map(|(out_channels, temporal_stride)| BlockSpec {
                out_channels,
                temporal_stride,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal_kernel must be odd, got {}", self.temporal_kernel)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        for b in self.resolved_blocks() {
            if !matches!(b.temporal_stride, 1 | 2) {
                return Err(Error::Config(format!("temporal strides must be 1 or 2, got {}", b.temporal_stride)));
            }
            if b.out_channels == 0 {
                return Err(Error::Config("block channels must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.resolved_blocks().last().map(|b| b.out_channels).unwrap_or(3)
    }

    pub fn total_stride(&self) -> usize {
        self.resolved_blocks().iter().map(|b| b.temporal_stride).product()
    }
}

/// Short stable digest of any serialisable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("configs serialise");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

/// Binary supports of the partitions; their sum is `A + I`.
pub fn partition_supports(layout: &SkeletonLayout, strategy: PartitionStrategy) -> Vec<Array2<f64>> {
    let v = layout.joint_count;
    let mut adj = Array2::<f64>::zeros((v, v));
    for &(p, c) in &layout.edges {
        adj[[p, c]] = 1.0;
        adj[[c, p]] = 1.0;
    }
    let eye = Array2::<f64>::eye(v);
    match strategy {
        PartitionStrategy::Uniform => vec![&adj + &eye],
        PartitionStrategy::Distance => vec![eye, adj],
        PartitionStrategy::Spatial => {
            // neighbours grouped by their distance to the root relative to the
            // centre joint: same (self), closer (centripetal), farther
            // (centrifugal)
            let depth = layout.depths();
            let mut closer = Array2::<f64>::zeros((v, v));
            let mut farther = Array2::<f64>::zeros((v, v));
            for i in 0..v {
                for j in 0..v {
                    if adj[[i, j]] == 0.0 {
                        continue;
                    }
                    if depth[j] < depth[i] {
                        closer[[i, j]] = 1.0;
                    } else {
                        farther[[i, j]] = 1.0;
                    }
                }
            }
            vec![eye, closer, farther]
        }
    }
}

/// Partitioned adjacency, each part scaled as `D^{-1/2} A_k D^{-1/2}` with
/// `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(layout: &SkeletonLayout, strategy: PartitionStrategy) -> Vec<Array2<f64>> {
    let supports = partition_supports(layout, strategy);
    let v = layout.joint_count;
    let full: Array2<f64> = supports.iter().fold(Array2::zeros((v, v)), |acc, s| acc + s);
    let inv_sqrt: Vec<f64> = full
        .sum_axis(Axis(1))
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    supports
        .into_iter()
        .map(|mut a| {
            for ((i, j), x) in a.indexed_iter_mut() {
                *x *= inv_sqrt[i] * inv_sqrt[j];
            }
            a
        })
        .collect()
}

/// What downstream heads need from an encoder.
pub trait Backbone<S: Scalar> {
    /// `x` is `N × T × V × 3`; returns `N × T′ × V × C`.
    fn encode(&self, sess: &mut Session<'_, S>, x: Var) -> Var;
    fn out_channels(&self) -> usize;
    fn output_frames(&self, input_frames: usize) -> usize;
    fn config_hash(&self) -> String;
}

#[derive(Clone, Debug)]
enum Residual {
    None,
    Identity,
    Project { weight: ParamId, bias: ParamId, norm: BatchNorm },
}

#[derive(Clone, Debug)]
struct Block {
    gcn: Dense,
    gcn_norm: BatchNorm,
    tcn_weight: ParamId,
    tcn_bias: ParamId,
    tcn_norm: BatchNorm,
    stride: usize,
    residual: Residual,
}

#[derive(Clone, Debug)]
pub struct StGcnEncoder<S: Scalar> {
    config: EncoderConfig,
    joints: usize,
    adjacency: Arc<SparseAdjacency<S>>,
    input_norm: Option<BatchNorm>,
    blocks: Vec<Block>,
}

impl<S: Scalar> StGcnEncoder<S> {
    /// Registers the encoder's parameters under `encoder.` in `store`.
    pub fn new<R: Rng + ?Sized>(
        config: &EncoderConfig,
        layout: &SkeletonLayout,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let dense: Vec<Array2<S>> = normalize_adjacency(layout, config.partition_strategy)
            .into_iter()
            .map(|a| a.mapv(S::of))
            .collect();
        let adjacency = Arc::new(SparseAdjacency::from_dense(&dense));
        let k = adjacency.partitions();
        let v = layout.joint_count;
        let kernel = config.temporal_kernel;
        let input_norm = config
            .input_norm
            .then(|| BatchNorm::new(store, "encoder.input_norm", v * 3, true));
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, spec) in config.resolved_blocks().iter().enumerate() {
            let name = format!("encoder.block{i}");
            let c_out = spec.out_channels;
            let gcn_fan = k * c_in;
            let gcn = Dense {
                weight: store.trainable(
                    format!("{name}.gcn.weight"),
                    uniform(rng, &[gcn_fan, c_out], (6.0 / gcn_fan as f64).sqrt()),
                ),
                bias: Some(store.trainable(format!("{name}.gcn.bias"), ArrayD::zeros(IxDyn(&[c_out])))),
                inputs: gcn_fan,
                outputs: c_out,
            };
            let gcn_norm = BatchNorm::new(store, &format!("{name}.gcn_norm"), c_out, true);
            let tcn_fan = kernel * c_out;
            let tcn_weight = store.trainable(
                format!("{name}.tcn.weight"),
                uniform(rng, &[tcn_fan, c_out], (6.0 / tcn_fan as f64).sqrt()),
            );
            let tcn_bias = store.trainable(format!("{name}.tcn.bias"), ArrayD::zeros(IxDyn(&[c_out])));
            let tcn_norm = BatchNorm::new(store, &format!("{name}.tcn_norm"), c_out, true);
            let residual = if i == 0 {
                Residual::None
            } else if c_in == c_out && spec.temporal_stride == 1 {
                Residual::Identity
            } else {
                Residual::Project {
                    weight: store.trainable(
                        format!("{name}.residual.weight"),
                        uniform(rng, &[c_in, c_out], (6.0 / c_in as f64).sqrt()),
                    ),
                    bias: store.trainable(format!("{name}.residual.bias"), ArrayD::zeros(IxDyn(&[c_out]))),
                    norm: BatchNorm::new(store, &format!("{name}.residual_norm"), c_out, true),
                }
            };
            blocks.push(Block {
                gcn,
                gcn_norm,
                tcn_weight,
                tcn_bias,
                tcn_norm,
                stride: spec.temporal_stride,
                residual,
            });
            c_in = c_out;
        }
        Ok(Self {
            config: config.clone(),
            joints: v,
            adjacency,
            input_norm,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Array-level encode in the given mode; running statistics are not
    /// updated.
    pub fn encode_batch(&self, store: &ParamStore<S>, batch: &Array4<S>, mode: Mode) -> Result<EncodedFeature<S>> {
        if batch.dim().2 != self.joints || batch.dim().3 != 3 {
            return Err(Error::Shape(format!(
                "encoder expects N×T×{}×3 input, got {:?}",
                self.joints,
                batch.dim()
            )));
        }
        let mut sess = Session::new(store, mode);
        let x = sess.input(batch.clone().into_dyn());
        let y = self.encode(&mut sess, x);
        let tensor = sess
            .tape
            .value(y)
            .clone()
            .into_dimensionality()
            .expect("encoder output is 4-d");
        Ok(EncodedFeature {
            tensor,
            provenance: self.config_hash(),
        })
    }
}

impl<S: Scalar> Backbone<S> for StGcnEncoder<S> {
    fn encode(&self, sess: &mut Session<'_, S>, x: Var) -> Var {
        let shape = sess.tape.shape(x).to_vec();
        let (n, t, v) = (shape[0], shape[1], shape[2]);
        let mut h = x;
        if let Some(norm) = &self.input_norm {
            let flat = sess.tape.reshape(h, &[n, t, v * 3]);
            let normed = norm.forward(sess, flat);
            h = sess.tape.reshape(normed, &[n, t, v, 3]);
        }
        for block in &self.blocks {
            let input = h;
            let mixed = sess.tape.graph_mix(h, self.adjacency.clone());
            let g = block.gcn.forward(sess, mixed);
            let g = block.gcn_norm.forward(sess, g);
            let g = sess.tape.relu(g);
            let w = sess.param(block.tcn_weight);
            let b = sess.param(block.tcn_bias);
            let z = sess
                .tape
                .temporal_conv(g, w, Some(b), self.config.temporal_kernel, block.stride);
            let z = block.tcn_norm.forward(sess, z);
            let z = match &block.residual {
                Residual::None => z,
                Residual::Identity => sess.tape.add(z, input),
                Residual::Project { weight, bias, norm } => {
                    let w = sess.param(*weight);
                    let b = sess.param(*bias);
                    let r = sess.tape.temporal_conv(input, w, Some(b), 1, block.stride);
                    let r = norm.forward(sess, r);
                    sess.tape.add(z, r)
                }
            };
            h = sess.tape.relu(z);
        }
        h
    }

    fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    fn output_frames(&self, input_frames: usize) -> usize {
        let k = self.config.temporal_kernel;
        let pad = (k - 1) / 2;
        self.config
            .resolved_blocks()
            .iter()
            .fold(input_frames, |t, b| (t + 2 * pad - k) / b.temporal_stride + 1)
    }

    fn config_hash(&self) -> String {
        config_hash(&self.config)
    }
}

/// Encoder output `N × T′ × V × C` tagged with the producing config.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeature<S> {
    pub tensor: Array4<S>,
    pub provenance: String,
}

/// Stacks sequences into an `N × T × V × 3` batch; all must share T and V.
pub fn stack_batch<S: Scalar>(seqs: &[&SkeletonSequence]) -> Result<Array4<S>> {
    let first = seqs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (t, v, _) = first.coords().dim();
    let mut out = Array4::<S>::zeros((seqs.len(), t, v, 3));
    for (i, s) in seqs.iter().enumerate() {
        if s.coords().dim() != (t, v, 3) {
            return Err(Error::Shape(format!(
                "batch member {i} is {:?}, expected {:?}",
                s.coords().dim(),
                (t, v, 3)
            )));
        }
        out.index_axis_mut(Axis(0), i)
            .assign(&s.coords().mapv(|x| S::of(x as f64)));
    }
    Ok(out)
}
