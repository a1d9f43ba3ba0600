//! The refinement-generative network.
//!
//! A window of `w` feedback matrices and one current measurement become
//! `w + 1` tokens of width `d = J_in * c`. Each block runs causal temporal
//! self-attention, gated cross-attention against the current measurement, a
//! feed-forward layer and, after stage two, spatio-temporal joint
//! self-attention (STJ-SA). The last token feeds a pose head and a PWD head.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{SkeletonSpec, NUM_ANCHORS};
use crate::edm::{DistanceMatrix, PoseFrame};
use crate::error::{Result, WipError};
use crate::losses::{tensor as lt, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Dense human output: sparse measurements in, every joint out.
    H,
    /// Shape-invariant: outputs the measured nodes only.
    SI,
    /// Dense output with the predicted coordinates as feedback.
    Geo,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::H => "wip-h",
            Variant::SI => "wip-si",
            Variant::Geo => "wip-geo",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = WipError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wip-h" | "h" => Ok(Variant::H),
            "wip-si" | "si" => Ok(Variant::SI),
            "wip-geo" | "geo" => Ok(Variant::Geo),
            _ => Err(WipError::invalid(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossAttention {
    /// Queries and keys from the measurement, values from the hidden state.
    Literal,
    /// Queries from the hidden state, keys and values from the measurement.
    Conventional,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_blocks: usize,
    /// Per-node channel width `c`.
    pub channels: usize,
    pub heads: usize,
    pub dropout: f64,
    pub j_in: usize,
    pub j_out: usize,
    pub window: usize,
    pub ff_mult: usize,
    pub cross_attention: CrossAttention,
    pub gating: bool,
    pub pwd_head: bool,
    /// Whether the STJ-SA layers are present.
    pub stj_sa: bool,
    /// Classical placement the pose head is offset from. `None` makes the
    /// pose head absolute.
    #[serde(default)]
    pub pose_skip: Option<PoseSkip>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseSkip {
    /// Input row each output node borrows its position from.
    pub proxies: Vec<usize>,
    /// Output node holding each input row.
    pub rows: Vec<usize>,
}

impl ModelConfig {
    /// Desk-scale defaults for the human skeleton: 6 sensors plus 3 anchors in,
    /// 24 joints plus 3 anchors out.
    pub fn human(variant: Variant) -> Self {
        let j_in = 9;
        Self {
            variant,
            num_blocks: 4,
            channels: 32,
            heads: 4,
            dropout: 0.1,
            j_in,
            j_out: if variant == Variant::SI { j_in } else { 27 },
            window: 16,
            ff_mult: 4,
            cross_attention: CrossAttention::Literal,
            gating: true,
            pwd_head: true,
            stj_sa: false,
            pose_skip: None,
        }
    }

    /// Pose head offsets from the measured sensor nearest to each joint.
    pub fn with_pose_skip(mut self, spec: &SkeletonSpec) -> Self {
        let rows = if self.j_out == self.j_in { (0..self.j_in).collect() } else { spec.sparse_with_anchors() };
        self.pose_skip = Some(PoseSkip { proxies: crate::inference::proxy_nodes(spec, self.j_out), rows });
        self
    }

    pub fn hidden(&self) -> usize {
        self.j_in * self.channels
    }

    pub fn tokens(&self) -> usize {
        self.window + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WipError::invalid(m));
        if self.num_blocks == 0 || self.channels == 0 || self.heads == 0 || self.window == 0 {
            return bad("blocks, channels, heads and window must be positive".into());
        }
        if self.j_in < 2 {
            return bad(format!("need at least 2 input nodes, got {}", self.j_in));
        }
        if self.hidden() % self.heads != 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "hidden width {} and channels {} must be divisible by {} heads",
                self.hidden(),
                self.channels,
                self.heads
            ));
        }
        match self.variant {
            Variant::SI if self.j_out != self.j_in => {
                return bad(format!("shape-invariant variant needs j_out = j_in = {}", self.j_in))
            }
            Variant::H | Variant::Geo if self.j_out < self.j_in => {
                return bad(format!("j_out {} < j_in {}", self.j_out, self.j_in))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive".into());
        }
        if let Some(p) = &self.pose_skip {
            if self.j_in <= NUM_ANCHORS
                || p.proxies.len() != self.j_out
                || p.proxies.iter().any(|&i| i >= self.j_in)
                || p.rows.len() != self.j_in
                || p.rows.iter().any(|&i| i >= self.j_out)
            {
                return bad(format!("pose skip needs {} input rows below {} and anchored input", self.j_out, self.j_in));
            }
        }
        Ok(())
    }

    fn lifted(&self) -> bool {
        self.j_out != self.j_in
    }
}

/// Named trainable tensors. Not `Clone`: copies of a `Var` share storage, so
/// use [`ParamStore::deep_clone`].
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so a parameter's values do not depend on creation order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
                let dist = Normal::new(0.0, std).map_err(|e| WipError::Numeric(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
        self.add(&format!("{name}.w"), &[fan_in, fan_out], Init::Normal(1.0 / (fan_in as f64).sqrt()), seed)?;
        self.add(&format!("{name}.b"), &[fan_out], Init::Zeros, seed)
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
        self.add(&format!("{name}.w"), &[fan_in, fan_out], Init::Zeros, seed)?;
        self.add(&format!("{name}.b"), &[fan_out], Init::Zeros, seed)
    }

    fn norm(&mut self, name: &str, width: usize, seed: u64) -> Result<()> {
        self.add(&format!("{name}.g"), &[width], Init::Ones, seed)?;
        self.add(&format!("{name}.b"), &[width], Init::Zeros, seed)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| WipError::invalid(format!("missing parameter '{name}'")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| WipError::invalid(format!("missing parameter '{name}'")))?;
        if var.dims() != value.dims() {
            return Err(WipError::invalid(format!(
                "shape mismatch for '{name}': {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copy: the clone's values no longer track this store.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars, dtype: self.dtype, device: self.device.clone() })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?);
        }
        Ok(Self { vars, dtype, device: self.device.clone() })
    }

    /// Raw little-endian bytes of a parameter, for bitwise comparisons.
    pub fn snapshot(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }
}

/// Dropout source; `None` means evaluation mode.
pub struct Mode<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    hold_trust: bool,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Self { rng: None, hold_trust: false }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng), hold_trust: false }
    }

    /// No gradient is wanted for the skip blend weight, so a fully trusting
    /// blend may skip placing the feedback frame.
    pub fn holding_trust(mut self) -> Self {
        self.hold_trust = true;
        self
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep as f32 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> candle_core::Result<Tensor> {
    let dims = x.dims();
    let (last, lead) = dims.split_last().expect("linear on a scalar");
    let rows: usize = lead.iter().product();
    let mut y = x.reshape((rows, *last))?.matmul(w)?;
    if let Some(b) = b {
        y = y.broadcast_add(b)?;
    }
    let mut shape = lead.to_vec();
    shape.push(w.dim(1)?);
    y.reshape(shape)
}

pub(crate) fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    xn.broadcast_mul(g)?.broadcast_add(b)
}

pub(crate) use crate::kernels::softmax_last;

pub(crate) fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)
}

pub(crate) fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

fn split_heads(x: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    x.reshape((b, l, heads, d / heads))?.transpose(1, 2)?.contiguous()
}

fn merge_heads(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, h, l, dh) = x.dims4()?;
    x.transpose(1, 2)?.reshape((b, l, h * dh))
}

/// Scaled dot-product attention over `(B, H, L, dh)` tensors. Returns the
/// merged output and the `(B, H, Lq, Lk)` weights.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<(Tensor, Tensor)> {
    let dh = q.dim(D::Minus1)?;
    let mut scores = (q / (dh as f64).sqrt())?.matmul(&k.t()?.contiguous()?)?;
    if let Some(m) = mask {
        scores = scores.broadcast_add(m)?;
    }
    let a = softmax_last(&scores)?;
    let out = a.matmul(v)?;
    Ok((merge_heads(&out)?, a))
}

fn causal_mask(t: usize, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let data: Vec<f64> = (0..t * t)
        .map(|k| if k % t > k / t { -1e9 } else { 0.0 })
        .collect();
    Tensor::from_vec(data, (t, t), device)?.to_dtype(dtype)
}

/// Upper-triangle gather indices: entry `(i, j)` maps to its pair slot, the
/// diagonal to the extra zero slot at the end.
fn mirror_index(n: usize) -> Vec<u32> {
    let pairs = n * (n - 1) / 2;
    let mut slot = vec![0u32; n * n];
    let mut k = 0;
    for i in 0..n {
        slot[i * n + i] = pairs as u32;
        for j in i + 1..n {
            slot[i * n + j] = k as u32;
            slot[j * n + i] = k as u32;
            k += 1;
        }
    }
    slot
}

/// Network outputs for a batch.
pub struct ModelOutput {
    /// `(B, J_out, 3)`.
    pub pose: Tensor,
    /// `(B, J_out, J_out)`.
    pub distances: Tensor,
    /// Final hidden state `(B, T, d)`.
    pub hidden: Tensor,
    /// STJ-SA weights per block, `(B, H, T*J_out, T*J_out)`; empty unless requested.
    pub attention: Vec<Tensor>,
}

/// Feedback history for one prediction.
#[derive(Clone, Copy, Debug)]
pub enum Feedback<'a> {
    Distances(&'a [DistanceMatrix]),
    Poses(&'a [PoseFrame]),
}

pub struct WipModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn blk(i: usize, rest: &str) -> String {
    format!("blocks.{i}.{rest}")
}

impl WipModel {
    /// Independent copy; training one leaves the other untouched.
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self { config: self.config.clone(), params: self.params.deep_clone()? })
    }

    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(dtype);
        let (c, d, ji, jo) = (config.channels, config.hidden(), config.j_in, config.j_out);
        p.linear("embed.meas", ji, c, seed)?;
        match config.variant {
            Variant::Geo => p.linear("embed.fb.geo", 3 * jo, d, seed)?,
            _ => {
                p.linear("embed.fb.row", jo, c, seed)?;
                if config.lifted() {
                    p.linear("embed.fb.proj", jo * c, d, seed)?;
                }
            }
        }
        p.add("pos", &[config.tokens(), d], Init::Normal(0.02), seed)?;
        for i in 0..config.num_blocks {
            p.norm(&blk(i, "self_attn.ln"), d, seed)?;
            for m in ["q", "k", "v", "o"] {
                p.linear(&blk(i, &format!("self_attn.{m}")), d, d, seed)?;
            }
            p.norm(&blk(i, "cross_attn.ln"), d, seed)?;
            match config.cross_attention {
                CrossAttention::Literal => {
                    for m in ["q", "k", "v", "o"] {
                        p.linear(&blk(i, &format!("cross_attn.{m}")), c, c, seed)?;
                    }
                }
                CrossAttention::Conventional => {
                    p.linear(&blk(i, "cross_attn.q"), d, d, seed)?;
                    p.linear(&blk(i, "cross_attn.k"), c, d, seed)?;
                    p.linear(&blk(i, "cross_attn.v"), c, d, seed)?;
                    p.linear(&blk(i, "cross_attn.o"), d, d, seed)?;
                }
                CrossAttention::Off => {}
            }
            if config.gating && config.cross_attention != CrossAttention::Off {
                p.linear(&blk(i, "cross_attn.gate"), d, d, seed)?;
            }
            p.norm(&blk(i, "ffn.ln"), d, seed)?;
            p.linear(&blk(i, "ffn.fc1"), d, config.ff_mult * d, seed)?;
            p.linear(&blk(i, "ffn.fc2"), config.ff_mult * d, d, seed)?;
        }
        p.norm("final_ln", d, seed)?;
        if config.lifted() {
            p.linear("lift", d, jo * c, seed)?;
        }
        p.linear("head.pose", jo * c, 3 * jo, seed)?;
        if config.pwd_head {
            p.linear("head.pwd", jo * c, jo * (jo - 1) / 2, seed)?;
        }
        if config.pose_skip.is_some() {
            p.add(SKIP_TRUST, &[jo], Init::Ones, seed)?;
        }
        let mut model = Self { config: ModelConfig { stj_sa: false, ..config.clone() }, params: p };
        if config.stj_sa {
            model.insert_stj_sa(seed)?;
        }
        Ok(model)
    }

    /// Adds STJ-SA layers whose output projection is zero, so the network
    /// computes the same function as before.
    pub fn insert_stj_sa(&mut self, seed: u64) -> Result<()> {
        if self.config.stj_sa {
            return Err(WipError::invalid("STJ-SA layers already present"));
        }
        let (c, jo) = (self.config.channels, self.config.j_out);
        for i in 0..self.config.num_blocks {
            let ji = self.config.j_in;
            self.params.linear(&blk(i, "stj_sa.up_nodes"), ji, jo, seed)?;
            self.params.linear(&blk(i, "stj_sa.up_chan"), c, c, seed)?;
            for m in ["q", "k", "v", "o"] {
                self.params.linear(&blk(i, &format!("stj_sa.{m}")), c, c, seed)?;
            }
            self.params.norm(&blk(i, "stj_sa.ln"), c, seed)?;
            self.params.zero_linear(&blk(i, "stj_sa.down_chan"), c, c, seed)?;
            self.params.linear(&blk(i, "stj_sa.down_nodes"), jo, ji, seed)?;
        }
        self.config.stj_sa = true;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    fn lin(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(linear(x, self.p(&format!("{name}.w"))?, Some(self.p(&format!("{name}.b"))?))?)
    }

    fn ln(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(layer_norm(x, self.p(&format!("{name}.g"))?, self.p(&format!("{name}.b"))?)?)
    }

    /// Row-wise measurement embedding of `(B, J_in, J_in)` into `(B, J_in, c)`.
    pub fn embed_measurement(&self, current: &Tensor) -> Result<Tensor> {
        let (_, r, k) = current.dims3()?;
        if r != self.config.j_in || k != self.config.j_in {
            return Err(WipError::invalid(format!(
                "measurement is {r}x{k}, expected {n}x{n}",
                n = self.config.j_in
            )));
        }
        self.lin(current, "embed.meas")
    }

    /// Node embedding of a single measured matrix.
    pub fn embed_pwd(&self, d: &DistanceMatrix) -> Result<DMatrix<f64>> {
        if d.size() != self.config.j_in {
            return Err(WipError::invalid(format!(
                "matrix is {n}x{n}, expected {m}x{m}",
                n = d.size(),
                m = self.config.j_in
            )));
        }
        let t = self.distances_tensor(&[d.clamped()])?;
        let e = self.embed_measurement(&t)?.squeeze(0)?.to_dtype(DType::F64)?;
        let rows = e.to_vec2::<f64>()?;
        let c = self.config.channels;
        Ok(DMatrix::from_fn(d.size(), c, |i, j| rows[i][j]))
    }

    fn embed_feedback(&self, past: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let dims = past.dims();
        let (b, w) = (dims[0], dims[1]);
        let expect_cols = if cfg.variant == Variant::Geo { 3 } else { cfg.j_out };
        if dims.len() != 4 || w != cfg.window || dims[2] != cfg.j_out || dims[3] != expect_cols {
            return Err(WipError::invalid(format!(
                "feedback has shape {dims:?}, expected (B, {}, {}, {})",
                cfg.window, cfg.j_out, expect_cols
            )));
        }
        match cfg.variant {
            Variant::Geo => self.lin(&past.reshape((b, w, 3 * cfg.j_out))?, "embed.fb.geo"),
            _ => {
                let rows = self.lin(past, "embed.fb.row")?;
                let flat = rows.reshape((b, w, cfg.j_out * cfg.channels))?;
                if cfg.lifted() {
                    self.lin(&flat, "embed.fb.proj")
                } else {
                    Ok(flat)
                }
            }
        }
    }

    /// Token sequence `(B, w + 1, d)` and measurement node embedding `(B, J_in, c)`.
    pub fn embed(&self, past: &Tensor, current: &Tensor) -> Result<(Tensor, Tensor)> {
        let fb = self.embed_feedback(past)?;
        let m = self.embed_measurement(current)?;
        if fb.dim(0)? != m.dim(0)? {
            return Err(WipError::invalid("feedback and measurement batch sizes differ"));
        }
        let b = m.dim(0)?;
        let cur = m.reshape((b, 1, self.config.hidden()))?;
        let tokens = Tensor::cat(&[&fb, &cur], 1)?.broadcast_add(self.p("pos")?)?;
        Ok((tokens, m))
    }

    fn self_attention(&self, i: usize, h: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let heads = self.config.heads;
        let x = self.ln(h, &blk(i, "self_attn.ln"))?;
        let q = split_heads(&self.lin(&x, &blk(i, "self_attn.q"))?, heads)?;
        let k = split_heads(&self.lin(&x, &blk(i, "self_attn.k"))?, heads)?;
        let v = split_heads(&self.lin(&x, &blk(i, "self_attn.v"))?, heads)?;
        let mask = causal_mask(h.dim(1)?, h.dtype(), h.device())?;
        let (a, _) = attend(&q, &k, &v, Some(&mask))?;
        let a = self.lin(&a, &blk(i, "self_attn.o"))?;
        Ok((h + mode.dropout(&a, self.config.dropout)?)?)
    }

    /// Cross-attention output `A_ca` before gating, `(B, T, d)`.
    fn cross_attention_raw(&self, i: usize, m: &Tensor, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, t, d) = x.dims3()?;
        let (c, heads, j) = (cfg.channels, cfg.heads, cfg.j_in);
        match cfg.cross_attention {
            CrossAttention::Literal => {
                let q = split_heads(&self.lin(m, &blk(i, "cross_attn.q"))?, heads)?;
                let k = split_heads(&self.lin(m, &blk(i, "cross_attn.k"))?, heads)?;
                let ch = c / heads;
                let scores = (q / (ch as f64).sqrt())?.matmul(&k.t()?.contiguous()?)?;
                let a = softmax_last(&scores)?;
                let v = self.lin(&x.reshape((b, t, j, c))?, &blk(i, "cross_attn.v"))?;
                let v = v
                    .reshape((b, t, j, heads, ch))?
                    .permute(vec![0, 3, 2, 1, 4])?
                    .reshape((b, heads, j, t * ch))?;
                let out = a
                    .matmul(&v)?
                    .reshape((b, heads, j, t, ch))?
                    .permute(vec![0, 3, 2, 1, 4])?
                    .reshape((b, t, j, c))?;
                Ok(self.lin(&out, &blk(i, "cross_attn.o"))?.reshape((b, t, d))?)
            }
            CrossAttention::Conventional => {
                let q = split_heads(&self.lin(x, &blk(i, "cross_attn.q"))?, heads)?;
                let k = split_heads(&self.lin(m, &blk(i, "cross_attn.k"))?, heads)?;
                let v = split_heads(&self.lin(m, &blk(i, "cross_attn.v"))?, heads)?;
                let (a, _) = attend(&q, &k, &v, None)?;
                self.lin(&a, &blk(i, "cross_attn.o"))
            }
            CrossAttention::Off => Ok(x.zeros_like()?),
        }
    }

    /// `A_ca * sigmoid(W_g h + b_g) + dropout(h)`.
    pub fn gated_cross_attention(&self, i: usize, m: &Tensor, h: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        if self.config.cross_attention == CrossAttention::Off {
            return Ok(h.clone());
        }
        let x = self.ln(h, &blk(i, "cross_attn.ln"))?;
        let a = self.cross_attention_raw(i, m, &x)?;
        let a = if self.config.gating {
            (a * sigmoid(&self.lin(&x, &blk(i, "cross_attn.gate"))?)?)?
        } else {
            a
        };
        Ok((a + mode.dropout(h, self.config.dropout)?)?)
    }

    fn feed_forward(&self, i: usize, h: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let x = self.ln(h, &blk(i, "ffn.ln"))?;
        let x = self.lin(&x, &blk(i, "ffn.fc1"))?.gelu()?;
        let x = self.lin(&x, &blk(i, "ffn.fc2"))?;
        Ok((h + mode.dropout(&x, self.config.dropout)?)?)
    }

    /// Mixes the node axis of `(B, T, N, c)` into `(B, T, M, c)`.
    fn node_mix(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(self.lin(&x.transpose(2, 3)?, name)?.transpose(2, 3)?)
    }

    /// Joint-time self-attention: each token is lifted to `J_out` joint
    /// tokens of width `c`, all `T * J_out` of them attend to each other, and
    /// the normalized result is projected back onto the residual stream.
    pub fn stj_sa(&self, i: usize, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let (b, t, d) = h.dims3()?;
        let (c, ji, jo) = (cfg.channels, cfg.j_in, cfg.j_out);
        let u = self.node_mix(&h.reshape((b, t, ji, c))?, &blk(i, "stj_sa.up_nodes"))?;
        let u = self.lin(&u, &blk(i, "stj_sa.up_chan"))?.reshape((b, t * jo, c))?;
        let q = split_heads(&self.lin(&u, &blk(i, "stj_sa.q"))?, cfg.heads)?;
        let k = split_heads(&self.lin(&u, &blk(i, "stj_sa.k"))?, cfg.heads)?;
        let v = split_heads(&self.lin(&u, &blk(i, "stj_sa.v"))?, cfg.heads)?;
        let (a, weights) = attend(&q, &k, &v, None)?;
        let a = self.lin(&a, &blk(i, "stj_sa.o"))?;
        let a = self.ln(&a, &blk(i, "stj_sa.ln"))?.reshape((b, t, jo, c))?;
        let a = self.lin(&a, &blk(i, "stj_sa.down_chan"))?;
        let a = self.node_mix(&a, &blk(i, "stj_sa.down_nodes"))?.reshape((b, t, d))?;
        let out = (h + a)?;
        debug_assert_eq!(out.dim(2)?, d);
        Ok((out, weights))
    }

    /// Anchored classical placement of every node of each `(n, n)` matrix,
    /// `None` where it fails.
    fn place(d: &Tensor) -> Result<Vec<Option<PoseFrame>>> {
        let (b, n, _) = d.dims3()?;
        let flat = d.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let anchors: Vec<usize> = (n - NUM_ANCHORS..n).collect();
        let targets = PoseFrame::new(SkeletonSpec::default_anchor_targets().to_vec());
        (0..b)
            .map(|k| {
                let m = DistanceMatrix::from_row_major(n, &flat[k * n * n..(k + 1) * n * n], true)?;
                Ok(match crate::inference::baseline_frame(&m, &anchors, &targets, None) {
                    Ok(f) => Some(f.pose),
                    Err(e) => {
                        log::debug!("no classical placement for sample {k}: {e}");
                        None
                    }
                })
            })
            .collect()
    }

    /// `(B, J_out, 3)` skip: the placement of each output node's proxy from
    /// the current measurement, blended per node with the proxy's position in
    /// the last feedback frame.
    fn skip_positions(&self, past: &Tensor, current: &Tensor, skip: &PoseSkip, hold: bool) -> Result<Tensor> {
        let b = current.dim(0)?;
        let proxies = &skip.proxies;
        let jo = proxies.len();
        let g = self.p(SKIP_TRUST)?;
        let now = Self::place(current)?;
        let trusted = hold && g.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().all(|&v| v == 1.0);
        let last = past.narrow(1, past.dim(1)? - 1, 1)?.squeeze(1)?;
        let prev: Vec<Option<PoseFrame>> = match self.config.variant {
            _ if trusted => vec![None; b],
            Variant::Geo => tensor_to_poses(&last)?.into_iter().map(Some).collect(),
            _ => Self::place(&last)?,
        };
        let mut meas = Vec::with_capacity(b * jo * 3);
        let mut hist = Vec::with_capacity(b * jo * 3);
        for (m, p) in now.iter().zip(&prev) {
            let from_meas = m.as_ref().map(|f| proxies.iter().map(|&i| f.points[i]).collect::<Vec<_>>());
            let from_hist = p
                .as_ref()
                .filter(|f| f.len() == jo)
                .map(|f| proxies.iter().map(|&i| f.points[skip.rows[i]]).collect::<Vec<_>>());
            // Either branch stands in for the other when its placement fails.
            let (from_meas, from_hist) = match (from_meas, from_hist) {
                (Some(a), Some(h)) => (a, h),
                (Some(a), None) => (a.clone(), a),
                (None, Some(h)) => (h.clone(), h),
                (None, None) => (vec![Vector3::zeros(); jo], vec![Vector3::zeros(); jo]),
            };
            meas.extend(from_meas.iter().flat_map(|q| [q.x, q.y, q.z]));
            hist.extend(from_hist.iter().flat_map(|q| [q.x, q.y, q.z]));
        }
        let dev = current.device();
        let meas = Tensor::from_vec(meas, (b, jo, 3), dev)?.to_dtype(current.dtype())?;
        let hist = Tensor::from_vec(hist, (b, jo, 3), dev)?.to_dtype(current.dtype())?;
        let g = g.reshape((1, jo, 1))?;
        Ok((hist.clone() + (meas - hist)?.broadcast_mul(&g)?)?)
    }

    fn heads(&self, hidden: &Tensor, skip: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let (b, t, _) = hidden.dims3()?;
        let last = hidden.narrow(1, t - 1, 1)?.squeeze(1)?;
        let mut z = self.ln(&last, "final_ln")?;
        if cfg.lifted() {
            z = self.lin(&z, "lift")?;
        }
        let jo = cfg.j_out;
        let mut pose = self.lin(&z, "head.pose")?.reshape((b, jo, 3))?;
        if let Some(s) = skip {
            pose = (pose + s)?;
        }
        let distances = if cfg.pwd_head {
            let tri = softplus(&self.lin(&z, "head.pwd")?)?;
            let padded = Tensor::cat(&[&tri, &Tensor::zeros((b, 1), tri.dtype(), tri.device())?], 1)?;
            let idx = Tensor::new(mirror_index(jo).as_slice(), tri.device())?;
            padded.index_select(&idx, 1)?.reshape((b, jo, jo))?
        } else {
            lt::pwd(&pose)?
        };
        Ok((pose, distances))
    }

    /// Batched forward pass. `past` is `(B, w, J_out, J_out)` feedback
    /// distances, or `(B, w, J_out, 3)` poses for the geometric variant;
    /// `current` is `(B, J_in, J_in)`.
    pub fn forward(&self, past: &Tensor, current: &Tensor, mode: &mut Mode, keep_attention: bool) -> Result<ModelOutput> {
        let (mut h, m) = self.embed(past, current)?;
        let mut attention = Vec::new();
        let check = !mode.is_train();
        for i in 0..self.config.num_blocks {
            h = self.self_attention(i, &h, mode)?;
            h = self.gated_cross_attention(i, &m, &h, mode)?;
            h = self.feed_forward(i, &h, mode)?;
            if self.config.stj_sa {
                let (out, w) = self.stj_sa(i, &h)?;
                h = out;
                if keep_attention {
                    attention.push(w);
                }
            }
            if check {
                let s = h.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !s.is_finite() {
                    return Err(WipError::Numeric(format!("non-finite hidden state after block {i}")));
                }
            }
        }
        let skip = match &self.config.pose_skip {
            Some(p) => Some(self.skip_positions(past, current, p, mode.hold_trust)?),
            None => None,
        };
        let (pose, distances) = self.heads(&h, skip.as_ref())?;
        Ok(ModelOutput { pose, distances, hidden: h, attention })
    }

    pub fn distances_tensor(&self, ds: &[DistanceMatrix]) -> Result<Tensor> {
        let n = ds.first().map(|d| d.size()).unwrap_or(0);
        let mut data = Vec::with_capacity(ds.len() * n * n);
        for d in ds {
            if d.size() != n {
                return Err(WipError::invalid("matrices of different sizes in one batch"));
            }
            data.extend(d.to_row_major());
        }
        Ok(Tensor::from_vec(data, (ds.len(), n, n), self.params.device())?.to_dtype(self.dtype())?)
    }

    pub fn poses_tensor(&self, ps: &[PoseFrame]) -> Result<Tensor> {
        let n = ps.first().map(|p| p.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(ps.len() * n * 3);
        for p in ps {
            if p.len() != n {
                return Err(WipError::invalid("poses of different sizes in one batch"));
            }
            data.extend(p.points.iter().flat_map(|q| [q.x, q.y, q.z]));
        }
        Ok(Tensor::from_vec(data, (ps.len(), n, 3), self.params.device())?.to_dtype(self.dtype())?)
    }

    /// Feedback tensor `(1, w, ...)` for a single window.
    pub fn feedback_tensor(&self, fb: Feedback<'_>) -> Result<Tensor> {
        let t = match fb {
            Feedback::Distances(ds) => self.distances_tensor(ds)?,
            Feedback::Poses(ps) => self.poses_tensor(ps)?,
        };
        Ok(t.unsqueeze(0)?)
    }

    /// One evaluation-mode prediction.
    pub fn predict(&self, past: Feedback<'_>, current: &DistanceMatrix) -> Result<(PoseFrame, DistanceMatrix)> {
        match (self.config.variant, past) {
            (Variant::Geo, Feedback::Distances(_)) => {
                return Err(WipError::invalid("geometric variant takes pose feedback"))
            }
            (Variant::H | Variant::SI, Feedback::Poses(_)) => {
                return Err(WipError::invalid("distance variants take distance feedback"))
            }
            _ => {}
        }
        let past = self.feedback_tensor(past)?;
        let cur = self.distances_tensor(&[current.clamped()])?;
        let out = self.forward(&past, &cur, &mut Mode::eval().holding_trust(), false)?;
        let pose = tensor_to_poses(&out.pose)?.remove(0);
        let d = tensor_to_distances(&out.distances)?.remove(0);
        if !pose.is_finite() {
            return Err(WipError::Numeric("non-finite pose prediction".into()));
        }
        Ok((pose, d))
    }

    /// STJ-SA weights per block averaged over heads, `(T*J_out)^2` each, for
    /// one window.
    pub fn attention_maps(&self, past: Feedback<'_>, current: &DistanceMatrix) -> Result<Vec<DMatrix<f64>>> {
        if !self.config.stj_sa {
            return Err(WipError::invalid("model has no STJ-SA layers"));
        }
        let past = self.feedback_tensor(past)?;
        let cur = self.distances_tensor(&[current.clamped()])?;
        let out = self.forward(&past, &cur, &mut Mode::eval(), true)?;
        out.attention
            .iter()
            .map(|w| {
                let avg = w.squeeze(0)?.mean(0)?.to_dtype(DType::F64)?;
                let n = avg.dim(0)?;
                let rows = avg.to_vec2::<f64>()?;
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            })
            .collect()
    }

    /// Names of parameters trained in the given stage. Clean stage-1 input
    /// is trusted fully, so the skip trust stays at one until stage 2.
    pub fn trainable(&self, stage: Stage) -> Vec<String> {
        self.params
            .names()
            .filter(|n| match stage {
                Stage::One => *n != SKIP_TRUST,
                Stage::Two => is_stage_two_param(n),
            })
            .map(str::to_string)
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>, stage: Stage) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert("stage".to_string(), stage.tag().to_string());
        meta.insert("variant".to_string(), self.config.variant.name().to_string());
        meta.insert(
            "config".to_string(),
            serde_json::to_string(&self.config).map_err(|e| WipError::Checkpoint(e.to_string()))?,
        );
        let tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (k.to_string(), v.as_tensor().clone()))
            .collect();
        safetensors::serialize_to_file(tensors, Some(meta), path.as_ref())
            .map_err(|e| WipError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Stage)> {
        let bytes = std::fs::read(path.as_ref())?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| WipError::Checkpoint(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| WipError::Checkpoint("missing metadata".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| WipError::Checkpoint(format!("missing metadata field '{k}'")))
        };
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(WipError::Checkpoint("not a model checkpoint".into()));
        }
        let version = field("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(WipError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let stage = match field("stage")?.as_str() {
            "stage1" => Stage::One,
            "stage2" => Stage::Two,
            s => return Err(WipError::Checkpoint(format!("unknown stage tag '{s}'"))),
        };
        let config: ModelConfig =
            serde_json::from_str(&field("config")?).map_err(|e| WipError::Checkpoint(e.to_string()))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let dtype = tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| WipError::Checkpoint("no tensors".into()))?;
        let model = Self::new(config, 0, dtype)?;
        if tensors.len() != model.params.len() {
            return Err(WipError::Checkpoint(format!(
                "checkpoint has {} tensors, config implies {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in &tensors {
            if !model.params.contains(name) {
                return Err(WipError::Checkpoint(format!("unexpected tensor '{name}'")));
            }
            model
                .params
                .set(name, t)
                .map_err(|e| WipError::Checkpoint(e.to_string()))?;
        }
        Ok((model, stage))
    }
}

const CHECKPOINT_FORMAT: &str = "wip-checkpoint";
const CHECKPOINT_VERSION: &str = "1";

/// Stage-two trainable groups: gated cross-attention and STJ-SA.
/// Per-node weight of the measurement against the previous pose in the
/// pose skip. Part of the gated cross-attention group.
pub const SKIP_TRUST: &str = "skip.cross_attn.trust";

pub fn is_stage_two_param(name: &str) -> bool {
    name.contains(".cross_attn.") || name.contains(".stj_sa.")
}

pub fn tensor_to_poses(t: &Tensor) -> Result<Vec<PoseFrame>> {
    let v = t.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    Ok(v.into_iter()
        .map(|rows| PoseFrame::new(rows.into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect()))
        .collect())
}

pub fn tensor_to_distances(t: &Tensor) -> Result<Vec<DistanceMatrix>> {
    let (_, n, _) = t.dims3()?;
    let v = t.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?;
    v.into_iter()
        .map(|row| DistanceMatrix::from_clean(DMatrix::from_row_slice(n, n, &row)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edm::pwd;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            num_blocks: 1,
            channels: 4,
            heads: 2,
            dropout: 0.1,
            j_in: 4,
            j_out: if variant == Variant::SI { 4 } else { 6 },
            window: 3,
            ff_mult: 2,
            cross_attention: CrossAttention::Literal,
            gating: true,
            pwd_head: true,
            stj_sa: false,
            pose_skip: None,
        }
    }

    fn frame(n: usize, phase: f64) -> PoseFrame {
        PoseFrame::new(
            (0..n)
                .map(|i| {
                    let a = i as f64 * 1.3 + phase;
                    Vector3::new(a.cos(), a.sin(), 0.3 * i as f64 + 0.1 * phase)
                })
                .collect(),
        )
    }

    fn window(cfg: &ModelConfig) -> (Vec<DistanceMatrix>, DistanceMatrix) {
        let past = (0..cfg.window).map(|t| pwd(&frame(cfg.j_out, t as f64 * 0.1)).unwrap()).collect();
        let cur = pwd(&frame(cfg.j_in, 0.5)).unwrap();
        (past, cur)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::human(Variant::H).validate().is_ok());
        assert_eq!(ModelConfig::human(Variant::H).hidden(), 288);
        let mut bad = ModelConfig::human(Variant::H);
        bad.heads = 5;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::human(Variant::SI);
        bad.j_out = 27;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::human(Variant::H);
        bad.j_out = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn human_output_shapes() {
        let mut cfg = ModelConfig::human(Variant::H);
        cfg.num_blocks = 1;
        let model = WipModel::new(cfg.clone(), 1, DType::F32).unwrap();
        let past: Vec<_> = (0..16).map(|t| pwd(&frame(27, t as f64)).unwrap()).collect();
        let cur = pwd(&frame(9, 0.0)).unwrap();
        let (pose, d) = model.predict(Feedback::Distances(&past), &cur).unwrap();
        assert_eq!(pose.len(), 27);
        assert_eq!(d.size(), 27);
        for i in 0..27 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..27 {
                assert_eq!(d.get(i, j), d.get(j, i));
                assert!(d.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn embedding_shape_bias_and_locality() {
        let mut cfg = ModelConfig::human(Variant::H);
        cfg.num_blocks = 1;
        let model = WipModel::new(cfg, 3, DType::F64).unwrap();
        let d = pwd(&frame(9, 0.2)).unwrap();
        let e = model.embed_pwd(&d).unwrap();
        assert_eq!((e.nrows(), e.ncols()), (9, 32));

        let zero = DistanceMatrix::from_clean(DMatrix::zeros(9, 9)).unwrap();
        let ez = model.embed_pwd(&zero).unwrap();
        let bias = model.params.snapshot("embed.meas.b").unwrap();
        for i in 0..9 {
            for j in 0..32 {
                assert_eq!(ez[(i, j)], bias[j]);
            }
        }

        let mut vals = d.values.clone();
        vals[(4, 1)] += 0.5;
        vals[(4, 7)] += 0.25;
        let d2 = DistanceMatrix { values: vals, measured: true };
        let e2 = model.embed_pwd(&d2).unwrap();
        for i in 0..9 {
            let same = (0..32).all(|j| e2[(i, j)] == e[(i, j)]);
            assert_eq!(same, i != 4, "row {i}");
        }
        assert!(model.embed_pwd(&pwd(&frame(8, 0.0)).unwrap()).is_err());
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let cfg = tiny(Variant::H);
        let a = WipModel::new(cfg.clone(), 7, DType::F64).unwrap();
        let b = WipModel::new(cfg.clone(), 7, DType::F64).unwrap();
        let (past, cur) = window(&cfg);
        let (pa, _) = a.predict(Feedback::Distances(&past), &cur).unwrap();
        let (pb, _) = b.predict(Feedback::Distances(&past), &cur).unwrap();
        assert_eq!(pa, pb);
        let mut rev = past.clone();
        rev.reverse();
        let (pr, _) = a.predict(Feedback::Distances(&rev), &cur).unwrap();
        assert_ne!(pa, pr);
    }

    #[test]
    fn causal_hidden_states() {
        let mut cfg = tiny(Variant::SI);
        cfg.cross_attention = CrossAttention::Off;
        let model = WipModel::new(cfg.clone(), 5, DType::F64).unwrap();
        let (past, cur) = window(&cfg);
        let p = model.feedback_tensor(Feedback::Distances(&past)).unwrap();
        let c = model.distances_tensor(&[cur]).unwrap();
        let full = model.forward(&p, &c, &mut Mode::eval(), false).unwrap().hidden;
        for k in 0..cfg.window {
            let keep = p.narrow(1, 0, k + 1).unwrap();
            let zeros = p.narrow(1, k + 1, cfg.window - k - 1).unwrap().zeros_like().unwrap();
            let cut = Tensor::cat(&[&keep, &zeros], 1).unwrap();
            let h = model
                .forward(&cut, &c.zeros_like().unwrap(), &mut Mode::eval(), false)
                .unwrap()
                .hidden;
            let a = full.narrow(1, 0, k + 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = h.narrow(1, 0, k + 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b, "prefix {k}");
        }
    }

    fn set_gate(model: &WipModel, bias: f64) {
        let d = model.config.hidden();
        let p = &model.params;
        p.set("blocks.0.cross_attn.gate.w", &Tensor::zeros((d, d), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        p.set("blocks.0.cross_attn.gate.b", &Tensor::full(bias, d, &Device::Cpu).unwrap())
            .unwrap();
    }

    #[test]
    fn gate_limits() {
        let cfg = tiny(Variant::H);
        let model = WipModel::new(cfg.clone(), 9, DType::F64).unwrap();
        let (past, cur) = window(&cfg);
        let p = model.feedback_tensor(Feedback::Distances(&past)).unwrap();
        let c = model.distances_tensor(&[cur]).unwrap();
        let (h, m) = model.embed(&p, &c).unwrap();

        set_gate(&model, -1e4);
        let out = model.gated_cross_attention(0, &m, &h, &mut Mode::eval()).unwrap();
        let diff = (out - &h).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);

        set_gate(&model, 1e4);
        let out = model.gated_cross_attention(0, &m, &h, &mut Mode::eval()).unwrap();
        let x = model.ln(&h, "blocks.0.cross_attn.ln").unwrap();
        let raw = model.cross_attention_raw(0, &m, &x).unwrap();
        let expect = (raw + &h).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn stj_sa_insertion_is_a_no_op_and_rows_are_stochastic() {
        let cfg = tiny(Variant::H);
        let mut model = WipModel::new(cfg.clone(), 2, DType::F64).unwrap();
        let (past, cur) = window(&cfg);
        let before = model.predict(Feedback::Distances(&past), &cur).unwrap();
        model.insert_stj_sa(11).unwrap();
        assert!(model.insert_stj_sa(11).is_err());
        let after = model.predict(Feedback::Distances(&past), &cur).unwrap();
        assert_eq!(before, after);
        let maps = model.attention_maps(Feedback::Distances(&past), &cur).unwrap();
        let tj = cfg.tokens() * cfg.j_out;
        assert_eq!(maps.len(), cfg.num_blocks);
        for m in &maps {
            assert_eq!((m.nrows(), m.ncols()), (tj, tj));
            for r in 0..tj {
                assert!((m.row(r).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stage_two_groups() {
        let mut model = WipModel::new(ModelConfig::human(Variant::H), 0, DType::F32).unwrap();
        model.insert_stj_sa(0).unwrap();
        let names = model.trainable(Stage::Two);
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| n.contains("cross_attn") || n.contains("stj_sa")));
        let trainable: usize = names.iter().map(|n| model.params.get(n).unwrap().elem_count()).sum();
        let frac = 1.0 - trainable as f64 / model.num_parameters() as f64;
        assert!(frac >= 0.9, "frozen fraction {frac}");
    }

    #[test]
    fn geo_variant_only_changes_feedback_embedding() {
        let h = WipModel::new(tiny(Variant::H), 0, DType::F64).unwrap();
        let g = WipModel::new(tiny(Variant::Geo), 0, DType::F64).unwrap();
        let hn: Vec<_> = h.params.names().filter(|n| !n.starts_with("embed.fb")).collect();
        let gn: Vec<_> = g.params.names().filter(|n| !n.starts_with("embed.fb")).collect();
        assert_eq!(hn, gn);
        assert!(g.params.contains("embed.fb.geo.w"));
        let cfg = tiny(Variant::Geo);
        let past: Vec<_> = (0..cfg.window).map(|t| frame(cfg.j_out, t as f64)).collect();
        let cur = pwd(&frame(cfg.j_in, 0.0)).unwrap();
        assert!(g.predict(Feedback::Poses(&past), &cur).is_ok());
        let dpast: Vec<_> = past.iter().map(|p| pwd(p).unwrap()).collect();
        assert!(g.predict(Feedback::Distances(&dpast), &cur).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut model = WipModel::new(tiny(Variant::Geo), 4, DType::F32).unwrap();
        model.insert_stj_sa(4).unwrap();
        model.save(&path, Stage::Two).unwrap();
        let (loaded, stage) = WipModel::load(&path).unwrap();
        assert_eq!(stage, Stage::Two);
        assert_eq!(loaded.config, model.config);
        for name in model.params.names() {
            assert_eq!(model.params.snapshot(name).unwrap(), loaded.params.snapshot(name).unwrap());
        }
        std::fs::write(&path, b"garbage").unwrap();
        assert!(WipModel::load(&path).is_err());
    }

    #[test]
    fn mirror_index_covers_upper_triangle() {
        let idx = mirror_index(4);
        assert_eq!(idx[0], 6);
        assert_eq!(idx[1], 0);
        assert_eq!(idx[4], 0);
        assert_eq!(idx[2 * 4 + 3], 5);
        assert_eq!(idx[3 * 4 + 2], 5);
    }

    #[test]
    fn deep_clone_is_independent() {
        let model = WipModel::new(ModelConfig { window: 4, ..ModelConfig::human(Variant::H) }, 3, DType::F32).unwrap();
        let copy = model.deep_clone().unwrap();
        let before = copy.params.snapshot("head.pose.b").unwrap();
        let w = model.params.get("head.pose.b").unwrap().ones_like().unwrap();
        model.params.set("head.pose.b", &w).unwrap();
        assert_eq!(copy.params.snapshot("head.pose.b").unwrap(), before);
        assert_ne!(model.params.snapshot("head.pose.b").unwrap(), before);
    }

    #[test]
    fn pose_skip_blends_measurement_and_feedback() {
        use crate::dataio::{attach_anchors, generate_synthetic, preprocess, LowerBodyMode, MotionKind};
        let spec = SkeletonSpec::human(LowerBodyMode::Feet);
        let raw = generate_synthetic(MotionKind::Walk, 0.5, 60.0, 2).unwrap();
        let seq = attach_anchors(&preprocess(&raw, &spec).unwrap(), &spec).unwrap();
        let cfg = ModelConfig { window: 4, ..ModelConfig::human(Variant::H) }.with_pose_skip(&spec);
        let model = WipModel::new(cfg, 0, DType::F64).unwrap();
        for name in ["head.pose.w", "head.pose.b"] {
            let z = model.params.get(name).unwrap().zeros_like().unwrap();
            model.params.set(name, &z).unwrap();
        }
        let past: Vec<_> = seq.frames[..4].iter().map(|f| pwd(f).unwrap()).collect();
        let gt = &seq.frames[4];
        let cur = pwd(&gt.select(&spec.sparse_with_anchors())).unwrap();
        let (pose, _) = model.predict(Feedback::Distances(&past), &cur).unwrap();
        for node in spec.sparse_with_anchors() {
            assert!((pose.points[node] - gt.points[node]).norm() < 1e-9, "node {node}");
        }
        // The weight must be learnable from its initial value.
        let fb = model.feedback_tensor(Feedback::Distances(&past)).unwrap();
        let noisy = DistanceMatrix::from_measured(cur.values.map(|v| v * 1.05)).unwrap();
        let now = model.distances_tensor(&[noisy]).unwrap();
        let out = model.forward(&fb, &now, &mut Mode::eval(), false).unwrap();
        let grads = out.pose.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(model.params.get(SKIP_TRUST).unwrap()).unwrap();
        assert!(g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() > 1e-6);
        let trust = model.params.get(SKIP_TRUST).unwrap().zeros_like().unwrap();
        model.params.set(SKIP_TRUST, &trust).unwrap();
        let (pose, _) = model.predict(Feedback::Distances(&past), &cur).unwrap();
        let last = &seq.frames[3];
        for node in spec.sparse_with_anchors() {
            assert!((pose.points[node] - last.points[node]).norm() < 1e-9, "node {node}");
        }
        let short = PoseSkip { proxies: vec![0; 5], ..model.config.pose_skip.clone().unwrap() };
        let bad = ModelConfig { pose_skip: Some(short), ..model.config.clone() };
        assert!(bad.validate().is_err());
    }
}
