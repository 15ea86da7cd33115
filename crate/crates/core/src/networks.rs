//! The four learnable maps: Φ (image to skeleton image), Ω (skeleton image to
//! 2D pose), Λ (2D pose to depth offsets) and the discriminator D.
//!
//! Images are NCHW tensors. Every forward takes a [`Bound`] view of a
//! parameter group on a tape, so the same code serves training (trainable
//! leaves), frozen use (constants) and inference.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::skeleton::SkeletonTopology;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Φ channel widths at full, half and quarter resolution.
    pub phi_channels: [usize; 3],
    /// Ω widths at 1/2, 1/4, 1/8 and 1/16 resolution; heatmaps come out at 1/4.
    pub omega_channels: [usize; 4],
    pub lifter_width: usize,
    pub lifter_blocks: usize,
    /// Λ dropout rate during training; 0 disables it.
    pub lifter_dropout: f64,
    pub disc_channels: [usize; 4],
    pub leaky_slope: f64,
    /// Initial gain of Φ's 1x1 path from the input to its output logit, so
    /// a fresh Φ passes a contrast-stretched input through; 0 starts it shut.
    pub phi_skip_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            in_channels: 1,
            phi_channels: [8, 16, 32],
            omega_channels: [16, 32, 32, 64],
            lifter_width: 1024,
            lifter_blocks: 2,
            lifter_dropout: 0.0,
            disc_channels: [8, 16, 32, 64],
            leaky_slope: 0.2,
            phi_skip_gain: 8.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        let widths = self
            .phi_channels
            .iter()
            .chain(&self.omega_channels)
            .chain(&self.disc_channels);
        if self.in_channels == 0 || self.lifter_width == 0 || widths.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("layer widths must be non-zero".into()));
        }
        if !self.phi_skip_gain.is_finite() {
            return Err(Error::Config("phi skip gain must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.lifter_dropout) {
            return Err(Error::Config("lifter dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    HeNormal {
        fan_in: usize,
    },
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Phi,
    Omega,
    Lifter,
    Disc,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Phi, Group::Omega, Group::Lifter, Group::Disc];
    pub const GENERATOR: [Group; 3] = [Group::Phi, Group::Omega, Group::Lifter];

    pub fn name(self) -> &'static str {
        match self {
            Group::Phi => "phi",
            Group::Omega => "omega",
            Group::Lifter => "lifter",
            Group::Disc => "disc",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
}

/// Ordered, named parameters of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Puts every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| (p.name.clone(), tape.leaf(p.value.clone(), trainable)))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    init: p.init,
                })
                .collect(),
        }
    }
}

/// Tape handles of a bound [`ParamSet`], by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Handles in parameter-set order.
    pub fn ordered<T: Real>(&self, set: &ParamSet<T>) -> Vec<Var> {
        set.params.iter().map(|p| self.var(&p.name)).collect()
    }
}

struct Builder<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> Builder<T> {
    fn new() -> Self {
        Self { params: Vec::new() }
    }

    fn conv(mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> Self {
        self.params.push(Param {
            name: format!("{name}.w"),
            value: Tensor::zeros([out_c, in_c, k, k]),
            init: Init::HeNormal {
                fan_in: in_c * k * k,
            },
        });
        self.bias(name, out_c)
    }

    fn dense(mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        self.params.push(Param {
            name: format!("{name}.w"),
            value: Tensor::zeros([fan_in, fan_out]),
            init,
        });
        self.bias(name, fan_out)
    }

    fn bias(mut self, name: &str, n: usize) -> Self {
        self.params.push(Param {
            name: format!("{name}.b"),
            value: Tensor::zeros([n]),
            init: Init::Zeros,
        });
        self
    }

    fn build(self) -> ParamSet<T> {
        ParamSet {
            params: self.params,
        }
    }
}

/// All four networks plus the pieces of the topology they depend on.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub num_joints: usize,
    pub root: usize,
    pub topology_hash: String,
    pub phi: ParamSet<T>,
    pub omega: ParamSet<T>,
    pub lifter: ParamSet<T>,
    pub disc: ParamSet<T>,
}

impl<T: Real> Model<T> {
    /// Zero-filled parameters with their init schemes recorded.
    pub fn skeleton(config: &NetworkConfig, topology: &SkeletonTopology) -> Result<Self> {
        config.validate()?;
        let j = topology.num_joints();
        let [p1, p2, p3] = config.phi_channels;
        let phi = Builder::new()
            .conv("e1", p1, config.in_channels, 3)
            .conv("e2", p2, p1, 3)
            .conv("e3", p3, p2, 3)
            .conv("e4", p3, p3, 3)
            .conv("d1", p2, p3 + p2, 3)
            .conv("d2", p1, p2 + p1, 3)
            .conv("d3", p1, p1, 3)
            .conv("out", 1, p1, 1)
            .conv("skip", 1, config.in_channels, 1)
            .build();
        let [o1, o2, o3, o4] = config.omega_channels;
        let omega = Builder::new()
            .conv("c1", o1, 1, 3)
            .conv("c2", o2, o1, 3)
            .conv("c3", o3, o2, 3)
            .conv("c4", o4, o3, 3)
            .conv("c5", o4, o4, 3)
            .conv("up1", o3, o4 + o3, 3)
            .conv("up2", o2, o3 + o2, 3)
            .conv("heat", j, o2, 1)
            .build();
        let w = config.lifter_width;
        let mut lifter = Builder::new().dense("in", 2 * j, w, Init::HeNormal { fan_in: 2 * j });
        for b in 0..config.lifter_blocks {
            lifter = lifter
                .dense(&format!("block{b}.l1"), w, w, Init::HeNormal { fan_in: w })
                .dense(&format!("block{b}.l2"), w, w, Init::HeNormal { fan_in: w });
        }
        let lifter = lifter.dense("out", w, j, Init::Zeros).build();
        let [d1, d2, d3, d4] = config.disc_channels;
        let s = config.image_size / 16;
        let disc = Builder::new()
            .conv("c1", d1, 1, 3)
            .conv("c2", d2, d1, 3)
            .conv("c3", d3, d2, 3)
            .conv("c4", d4, d3, 3)
            .dense("fc", d4 * s * s, 1, Init::HeNormal { fan_in: d4 * s * s })
            .build();
        Ok(Self {
            config: config.clone(),
            num_joints: j,
            root: topology.root_index(),
            topology_hash: topology.hash(),
            phi,
            omega,
            lifter,
            disc,
        })
    }

    /// Fresh model initialized from `seed`.
    pub fn new(config: &NetworkConfig, topology: &SkeletonTopology, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config, topology)?;
        let mut ordinal = 0u64;
        for group in Group::ALL {
            for p in &mut model.group_mut(group).params {
                let mut rng = stream_rng(seed, Stream::Init, ordinal);
                ordinal += 1;
                if let Init::HeNormal { fan_in } = p.init {
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    for v in p.value.data_mut() {
                        *v = T::from_f64_lossy(normal.sample(&mut rng));
                    }
                }
            }
        }
        let gain = config.phi_skip_gain;
        for p in &mut model.phi.params {
            let v = match p.name.as_str() {
                "skip.w" => gain / config.in_channels as f64,
                "skip.b" => -gain / 2.0,
                _ => continue,
            };
            p.value.data_mut().fill(T::from_f64_lossy(v));
        }
        Ok(model)
    }

    pub fn group(&self, group: Group) -> &ParamSet<T> {
        match group {
            Group::Phi => &self.phi,
            Group::Omega => &self.omega,
            Group::Lifter => &self.lifter,
            Group::Disc => &self.disc,
        }
    }

    pub fn group_mut(&mut self, group: Group) -> &mut ParamSet<T> {
        match group {
            Group::Phi => &mut self.phi,
            Group::Omega => &mut self.omega,
            Group::Lifter => &mut self.lifter,
            Group::Disc => &mut self.disc,
        }
    }

    pub fn parameter_count(&self) -> usize {
        Group::ALL.iter().map(|&g| self.group(g).count()).sum()
    }

    pub fn all_finite(&self) -> bool {
        Group::ALL.iter().all(|&g| self.group(g).all_finite())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            num_joints: self.num_joints,
            root: self.root,
            topology_hash: self.topology_hash.clone(),
            phi: self.phi.cast(),
            omega: self.omega.cast(),
            lifter: self.lifter.cast(),
            disc: self.disc.cast(),
        }
    }

    /// SHA-256 over the little-endian bytes of every parameter of `group`.
    pub fn checksum(&self, group: Group) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.group(group).params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    fn check_image(&self, tape: &Tape<T>, x: Var, channels: usize) -> Result<usize> {
        let s = tape.shape(x);
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != channels || s[2] != n || s[3] != n {
            return Err(Error::Shape(format!(
                "expected [B, {channels}, {n}, {n}] images, got {s:?}"
            )));
        }
        if s[0] == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(s[0])
    }

    /// Φ: `[B, C, N, N]` image in `[0, 1]` to a `[B, 1, N, N]` skeleton image.
    pub fn phi_forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_image(tape, x, self.config.in_channels)?;
        let a = self.config.leaky_slope;
        let e1 = conv_act(tape, p, "e1", x, 1, a);
        let e2 = conv_act(tape, p, "e2", e1, 2, a);
        let e3 = conv_act(tape, p, "e3", e2, 2, a);
        let e4 = conv_act(tape, p, "e4", e3, 1, a);
        let u1 = tape.upsample2x(e4);
        let c1 = tape.concat_channels(&[u1, e2]);
        let d1 = conv_act(tape, p, "d1", c1, 1, a);
        let u2 = tape.upsample2x(d1);
        let c2 = tape.concat_channels(&[u2, e1]);
        let d2 = conv_act(tape, p, "d2", c2, 1, a);
        let d3 = conv_act(tape, p, "d3", d2, 1, a);
        let out = conv(tape, p, "out", d3, 1);
        let skip = conv(tape, p, "skip", x, 1);
        let logit = tape.add(out, skip);
        Ok(tape.sigmoid(logit))
    }

    /// Ω: `[B, 1, N, N]` skeleton image to `[B, J, 2]` coordinates in `[-1, 1]`.
    pub fn omega_forward(&self, tape: &mut Tape<T>, p: &Bound, s: Var) -> Result<Var> {
        self.check_image(tape, s, 1)?;
        let a = self.config.leaky_slope;
        let c1 = conv_act(tape, p, "c1", s, 2, a);
        let c2 = conv_act(tape, p, "c2", c1, 2, a);
        let c3 = conv_act(tape, p, "c3", c2, 2, a);
        let c4 = conv_act(tape, p, "c4", c3, 2, a);
        let c5 = conv_act(tape, p, "c5", c4, 1, a);
        let u = tape.upsample2x(c5);
        let cat = tape.concat_channels(&[u, c3]);
        let u1 = conv_act(tape, p, "up1", cat, 1, a);
        let u = tape.upsample2x(u1);
        let cat = tape.concat_channels(&[u, c2]);
        let u2 = conv_act(tape, p, "up2", cat, 1, a);
        let heat = conv(tape, p, "heat", u2, 1);
        Ok(tape.soft_argmax(heat))
    }

    /// Λ: `[B, J, 2]` poses to `[B, J]` root-relative depth offsets.
    ///
    /// The input is re-centred on the root joint first, so Λ only sees shape.
    /// `dropout` carries the rng used for train-time dropout; `None` is
    /// evaluation mode.
    pub fn lifter_forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        y: Var,
        dropout: Option<&mut R>,
    ) -> Result<Var> {
        let s = tape.shape(y).to_vec();
        let j = self.num_joints;
        if s.len() != 3 || s[1] != j || s[2] != 2 || s[0] == 0 {
            return Err(Error::Shape(format!(
                "expected [B, {j}, 2] poses, got {s:?}"
            )));
        }
        let b = s[0];
        let centred = tape.sub_joint(y, self.root);
        let flat = tape.reshape(centred, [b, 2 * j]);
        let mut h = dense(tape, p, "in", flat);
        h = tape.relu(h);
        let rate = self.config.lifter_dropout;
        let mut dropout = dropout.filter(|_| rate > 0.0);
        for k in 0..self.config.lifter_blocks {
            let mut r = dense(tape, p, &format!("block{k}.l1"), h);
            r = tape.relu(r);
            if let Some(rng) = dropout.as_deref_mut() {
                r = apply_dropout(tape, r, rate, rng);
            }
            r = dense(tape, p, &format!("block{k}.l2"), r);
            r = tape.relu(r);
            h = tape.add(h, r);
        }
        let d = dense(tape, p, "out", h);
        let d = tape.reshape(d, [b, j, 1]);
        let d = tape.sub_joint(d, self.root);
        Ok(tape.reshape(d, [b, j]))
    }

    /// D: `[B, 1, N, N]` skeleton images to `[B]` logits.
    pub fn disc_forward(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Result<Var> {
        let b = self.check_image(tape, img, 1)?;
        let a = self.config.leaky_slope;
        let mut h = img;
        for name in ["c1", "c2", "c3", "c4"] {
            h = conv_act(tape, p, name, h, 2, a);
        }
        let features: usize = tape.shape(h)[1..].iter().product();
        let flat = tape.reshape(h, [b, features]);
        let logit = dense(tape, p, "fc", flat);
        Ok(tape.reshape(logit, [b]))
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Var {
    let w = p.var(&format!("{name}.w"));
    let pad = tape.shape(w)[2] / 2;
    let y = tape.conv2d(x, w, stride, pad);
    tape.add_bias(y, p.var(&format!("{name}.b")))
}

fn conv_act<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    slope: f64,
) -> Var {
    let y = conv(tape, p, name, x, stride);
    tape.leaky_relu(y, slope)
}

fn dense<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Var {
    let y = tape.matmul(x, p.var(&format!("{name}.w")));
    tape.add_bias(y, p.var(&format!("{name}.b")))
}

fn apply_dropout<T: Real, R: Rng>(tape: &mut Tape<T>, x: Var, rate: f64, rng: &mut R) -> Var {
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::from_f64(shape, &mask));
    tape.mul(x, m)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SELFPOSE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    topology_hash: String,
    network: NetworkConfig,
    num_joints: usize,
    root: usize,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Saved model plus training state.
///
/// Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
/// then every tensor as little-endian `f32` in header order. Parameters are
/// named `<group>/<name>`; `extra` holds optimizer state under free names.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub step: u64,
    /// Snapshot of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub extra: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for g in Group::ALL {
            for p in &self.model.group(g).params {
                tensors.push((format!("{}/{}", g.name(), p.name), &p.value));
            }
        }
        tensors.extend(self.extra.iter().map(|(n, t)| (n.clone(), t)));
        let header = CheckpointHeader {
            topology_hash: self.model.topology_hash.clone(),
            network: self.model.config.clone(),
            num_joints: self.model.num_joints,
            root: self.model.root,
            step: self.step,
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 20 + 4 * self.model.parameter_count());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let ctx = || format!("writing checkpoint {}", path.display());
        // write to a sibling file and rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
        f.sync_all().map_err(|e| Error::io(ctx(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
    }

    /// Reads a checkpoint and checks it against `topology`.
    pub fn read(path: &Path, topology: &SkeletonTopology) -> Result<Self> {
        let ctx = || format!("reading checkpoint {}", path.display());
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(ctx(), e))?;
        let bad = |detail: &str| Error::malformed("checkpoint", detail.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnknownSchemaVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body.get(..hlen).ok_or_else(|| bad("truncated header"))?)?;
        if header.topology_hash != topology.hash() {
            return Err(Error::TopologyMismatch {
                checkpoint: header.topology_hash,
                expected: topology.hash(),
            });
        }
        let mut data = &body[hlen..];
        let mut model = Model::<f32>::skeleton(&header.network, topology)?;
        let mut loaded: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = data
                .get(..4 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[4 * n..];
            loaded.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        for g in Group::ALL {
            for p in &mut model.group_mut(g).params {
                let key = format!("{}/{}", g.name(), p.name);
                let t = loaded.remove(&key).ok_or_else(|| {
                    Error::malformed("checkpoint", format!("missing tensor {key}"))
                })?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Shape(format!(
                        "{key}: checkpoint shape {:?}, model shape {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t;
            }
        }
        if loaded
            .keys()
            .any(|k| k.split('/').next().and_then(Group::parse).is_some())
        {
            return Err(bad("unknown parameter tensors"));
        }
        let extra = header
            .tensors
            .iter()
            .filter_map(|e| loaded.remove(&e.name).map(|t| (e.name.clone(), t)))
            .collect();
        Ok(Self {
            model,
            step: header.step,
            config: header.config,
            extra,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            image_size: 16,
            lifter_width: 32,
            ..Default::default()
        }
    }

    fn random_images(b: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * n * n).map(|_| rng.gen()).collect();
        Tensor::new([b, 1, n, n], data)
    }

    #[test]
    fn default_shapes_and_ranges() {
        let t = SkeletonTopology::quadruped();
        let model = Model::<f32>::new(&NetworkConfig::default(), &t, 3).unwrap();
        assert!(model.all_finite());
        assert!(model.parameter_count() > 2_000_000);
        let mut tape = Tape::new();
        let x = tape.constant(random_images(2, 128, 1).cast());
        let (phi, omega) = (
            model.phi.bind(&mut tape, false),
            model.omega.bind(&mut tape, false),
        );
        let (lifter, disc) = (
            model.lifter.bind(&mut tape, false),
            model.disc.bind(&mut tape, false),
        );
        let s = model.phi_forward(&mut tape, &phi, x).unwrap();
        assert_eq!(tape.shape(s), [2, 1, 128, 128]);
        assert!(tape.value(s).data().iter().all(|v| (0.0..=1.0).contains(v)));
        let y = model.omega_forward(&mut tape, &omega, s).unwrap();
        assert_eq!(tape.shape(y), [2, 20, 2]);
        assert!(tape.value(y).data().iter().all(|v| v.abs() <= 1.0));
        let d = model
            .lifter_forward::<ChaCha8Rng>(&mut tape, &lifter, y, None)
            .unwrap();
        assert_eq!(tape.shape(d), [2, 20]);
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
        let logits = model.disc_forward(&mut tape, &disc, s).unwrap();
        assert_eq!(tape.shape(logits), [2]);
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let t = SkeletonTopology::quadruped();
        let model = Model::<f64>::new(&small_config(), &t, 0).unwrap();
        let mut tape = Tape::new();
        let p = model.phi.bind(&mut tape, false);
        let x = tape.constant(random_images(1, 24, 0));
        assert!(matches!(
            model.phi_forward(&mut tape, &p, x),
            Err(Error::Shape(_))
        ));
        let o = model.omega.bind(&mut tape, false);
        assert!(matches!(
            model.omega_forward(&mut tape, &o, x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn duplicated_and_permuted_batches_match() {
        let t = SkeletonTopology::quadruped();
        let model = Model::<f64>::new(&small_config(), &t, 5).unwrap();
        let imgs = random_images(3, 16, 2);
        let order = [2usize, 0, 1];
        let permuted = Tensor::cat_batch(&order.map(|i| imgs.batch_item(i)));
        let mut tape = Tape::new();
        let p = model.phi.bind(&mut tape, false);
        let o = model.omega.bind(&mut tape, false);
        let run = |tape: &mut Tape<f64>, x: Tensor<f64>| {
            let x = tape.constant(x);
            let s = model.phi_forward(tape, &p, x).unwrap();
            let y = model.omega_forward(tape, &o, s).unwrap();
            tape.value(y).clone()
        };
        let a = run(&mut tape, imgs.clone());
        let b = run(&mut tape, permuted);
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(a.batch_item(i), b.batch_item(k));
        }
        let dup = Tensor::cat_batch(&[imgs.batch_item(0), imgs.batch_item(0)]);
        let c = run(&mut tape, dup);
        assert_eq!(c.batch_item(0), c.batch_item(1));
    }

    #[test]
    fn fresh_phi_passes_bright_strokes_through() {
        let t = SkeletonTopology::quadruped();
        let model = Model::<f64>::new(&small_config(), &t, 4).unwrap();
        let imgs = random_images(2, 16, 9).map(|v| if v > 0.8 { 0.95 } else { 0.05 });
        let mut tape = Tape::new();
        let p = model.phi.bind(&mut tape, false);
        let x = tape.constant(imgs.clone());
        let s = model.phi_forward(&mut tape, &p, x).unwrap();
        let (mut on, mut off) = (Vec::new(), Vec::new());
        for (&v, &o) in imgs.data().iter().zip(tape.value(s).data()) {
            if v > 0.5 {
                on.push(o)
            } else {
                off.push(o)
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&on) > 0.7 && mean(&off) < 0.3,
            "{} {}",
            mean(&on),
            mean(&off)
        );

        let shut = Model::<f64>::new(
            &NetworkConfig {
                phi_skip_gain: 0.0,
                ..small_config()
            },
            &t,
            4,
        )
        .unwrap();
        assert!(shut
            .phi
            .get("skip.w")
            .unwrap()
            .data()
            .iter()
            .all(|&w| w == 0.0));
    }

    #[test]
    fn discriminator_is_near_chance_at_init() {
        let t = SkeletonTopology::quadruped();
        let cfg = NetworkConfig::default();
        let imgs = random_images(4, 128, 7).map(|v| if v > 0.9 { 1.0 } else { 0.0 });
        for seed in 0..10 {
            let model = Model::<f64>::new(&cfg, &t, seed).unwrap();
            let mut tape = Tape::new();
            let d = model.disc.bind(&mut tape, false);
            let x = tape.constant(imgs.clone());
            let logits = model.disc_forward(&mut tape, &d, x).unwrap();
            let p = tape
                .value(logits)
                .data()
                .iter()
                .map(|&l| crate::autodiff::sigmoid(l))
                .sum::<f64>()
                / 4.0;
            assert!(p > 0.3 && p < 0.7, "seed {seed}: mean probability {p}");
        }
    }

    fn check_group(group: Group, probe: impl Fn(&Model<f64>, &mut Tape<f64>, &Bound) -> Var) {
        let t = SkeletonTopology::quadruped();
        let mut model = Model::<f64>::new(&small_config(), &t, 11).unwrap();
        // Λ's output layer starts at zero; give it some weight so every layer carries gradient
        if group == Group::Lifter {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for p in &mut model.lifter.params {
                for v in p.value.data_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
            }
        }
        let mut tape = Tape::new();
        let bound = model.group(group).bind(&mut tape, true);
        let out = probe(&model, &mut tape, &bound);
        let grads = tape.backward(out);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for (pi, param) in model.group(group).params.iter().enumerate() {
            let analytic = grads.get(bound.var(&param.name)).expect("gradient").clone();
            for _ in 0..3 {
                let e = rng.gen_range(0..param.value.len());
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.group_mut(group).params[pi].value.data_mut()[e] += delta;
                    let mut tape = Tape::new();
                    let b = m.group(group).bind(&mut tape, false);
                    let o = probe(&m, &mut tape, &b);
                    tape.value(o).item()
                };
                // small enough that a shared bias rarely moves a leaky-ReLU input across zero
                let h = 1e-7;
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max(rel_err(analytic.data()[e], numeric));
            }
        }
        assert!(worst < 1e-2, "{group:?}: relative error {worst}");
    }

    #[test]
    fn phi_gradient_matches_finite_differences() {
        let x = random_images(2, 16, 3);
        check_group(Group::Phi, |m, tape, b| {
            let x = tape.constant(x.clone());
            let s = m.phi_forward(tape, b, x).unwrap();
            tape.sum(s)
        });
    }

    #[test]
    fn omega_gradient_matches_finite_differences() {
        let x = random_images(2, 16, 4);
        check_group(Group::Omega, |m, tape, b| {
            let x = tape.constant(x.clone());
            let y = m.omega_forward(tape, b, x).unwrap();
            tape.sum(y)
        });
    }

    #[test]
    fn lifter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..2 * 20 * 2).map(|_| rng.gen_range(-0.8..0.8)).collect();
        check_group(Group::Lifter, |m, tape, b| {
            let y = tape.constant(Tensor::new([2, 20, 2], y.clone()));
            let d = m.lifter_forward::<ChaCha8Rng>(tape, b, y, None).unwrap();
            tape.sum(d)
        });
    }

    #[test]
    fn disc_gradient_matches_finite_differences() {
        let x = random_images(2, 16, 6);
        check_group(Group::Disc, |m, tape, b| {
            let x = tape.constant(x.clone());
            let l = m.disc_forward(tape, b, x).unwrap();
            tape.sum(l)
        });
    }

    #[test]
    fn checkpoint_round_trip_and_topology_guard() {
        let t = SkeletonTopology::quadruped();
        let model = Model::<f32>::new(&small_config(), &t, 8).unwrap();
        let ck = Checkpoint {
            model,
            step: 42,
            config: serde_json::json!({"seed": 8}),
            extra: vec![("adam/t".into(), Tensor::scalar(3.0))],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path, &t).unwrap(), ck);

        let rename = |s: &String| {
            if s == "tail_tip" {
                "tail_end".to_string()
            } else {
                s.clone()
            }
        };
        let mut cfg = t.to_config();
        cfg.joints = cfg.joints.iter().map(rename).collect();
        cfg.bones = cfg
            .bones
            .iter()
            .map(|[a, b]| [rename(a), rename(b)])
            .collect();
        let other = SkeletonTopology::from_config(&cfg).unwrap();
        assert!(matches!(
            Checkpoint::read(&path, &other),
            Err(Error::TopologyMismatch { .. })
        ));
    }
}
