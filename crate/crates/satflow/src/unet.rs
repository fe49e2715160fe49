//! The conditional vector-field network u_theta(x_t, t, c): a U-Net with
//! ResNet-style blocks, bottom-level self-attention, channel-concatenated
//! conditioning and embedded time/metadata injected into every block.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::numcore::{attention_core, AttnProj, NodeId, Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_base_channels() -> usize {
    16
}
fn default_multipliers() -> Vec<usize> {
    vec![1, 2, 4]
}
fn default_res_blocks() -> usize {
    2
}
fn default_attention_levels() -> Option<Vec<usize>> {
    None
}
fn default_bands() -> usize {
    6
}
fn default_embed_dim() -> usize {
    64
}

/// Architecture hyper-parameters. `attention_levels: None` places
/// attention at the lowest-resolution level only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_multipliers")]
    pub channel_multipliers: Vec<usize>,
    #[serde(default = "default_res_blocks")]
    pub num_res_blocks: usize,
    #[serde(default = "default_attention_levels")]
    pub attention_levels: Option<Vec<usize>>,
    #[serde(default = "default_bands")]
    pub bands: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: default_base_channels(),
            channel_multipliers: default_multipliers(),
            num_res_blocks: default_res_blocks(),
            attention_levels: None,
            bands: default_bands(),
            embed_dim: default_embed_dim(),
        }
    }
}

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Levels carrying self-attention; defaults to the lowest level.
    pub fn attn_levels(&self) -> Vec<usize> {
        match &self.attention_levels {
            Some(v) => v.clone(),
            None => vec![self.levels() - 1],
        }
    }

    /// Channel count of the network input: x_t + composite + coarse.
    pub fn input_channels(&self) -> usize {
        3 * self.bands
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(arg_err("base_channels must be positive"));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(arg_err("channel_multipliers must be non-empty and positive"));
        }
        if self.num_res_blocks == 0 {
            return Err(arg_err("num_res_blocks must be at least 1"));
        }
        if self.bands != 6 {
            return Err(arg_err(format!("bands must be 6, got {}", self.bands)));
        }
        if self.embed_dim < 4 || self.embed_dim % 2 != 0 {
            return Err(arg_err("embed_dim must be an even number >= 4"));
        }
        for &l in &self.attn_levels() {
            if l >= self.levels() {
                return Err(arg_err(format!(
                    "attention level {l} out of range for {} levels",
                    self.levels()
                )));
            }
        }
        Ok(())
    }

    /// Input spatial sizes must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Largest group count <= 8 dividing the channel count.
fn norm_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap()
}

/// Largest head count <= 4 dividing the channel count.
fn attn_heads(c: usize) -> usize {
    [4, 2, 1].into_iter().find(|h| c % h == 0).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensor {
    TM,
    OLI,
}

impl Sensor {
    pub fn index(self) -> usize {
        match self {
            Sensor::TM => 0,
            Sensor::OLI => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tm" => Ok(Sensor::TM),
            "oli" => Ok(Sensor::OLI),
            other => Err(arg_err(format!("unknown sensor '{other}' (expected tm|oli)"))),
        }
    }
}

impl std::fmt::Display for Sensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sensor::TM => write!(f, "tm"),
            Sensor::OLI => write!(f, "oli"),
        }
    }
}

/// Scalar conditioning metadata. Out-of-range t or DOY is an error,
/// never clamped.
#[derive(Clone, Copy, Debug)]
pub struct MetaInputs {
    pub t: f64,
    pub doy: u32,
    pub sensor: Sensor,
    pub modis_available: bool,
}

impl MetaInputs {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) || !self.t.is_finite() {
            return Err(arg_err(format!("t must lie in [0,1], got {}", self.t)));
        }
        if !(1..=366).contains(&self.doy) {
            return Err(arg_err(format!("doy must lie in [1,366], got {}", self.doy)));
        }
        Ok(())
    }
}

/// The conditioning input c: gap-free composite + coarse raster in the
/// normalized network domain, the availability flag, and metadata.
/// When MODIS is unavailable the coarse channels are zero-filled; the
/// flag, not a sentinel value, carries that information.
#[derive(Clone, Debug)]
pub struct ConditionStack<T> {
    pub composite: Tensor<T>,
    pub coarse: Tensor<T>,
    pub modis_available: bool,
    pub doy: u32,
    pub sensor: Sensor,
}

impl<T: Real> ConditionStack<T> {
    pub fn new(
        composite: Tensor<T>,
        coarse: Option<Tensor<T>>,
        doy: u32,
        sensor: Sensor,
    ) -> Result<Self> {
        let (modis_available, coarse) = match coarse {
            Some(c) => {
                if c.shape() != composite.shape() {
                    return Err(shape_err(format!(
                        "coarse {:?} vs composite {:?}",
                        c.shape(),
                        composite.shape()
                    )));
                }
                (true, c)
            }
            None => (false, Tensor::zeros(composite.shape())),
        };
        Ok(ConditionStack {
            composite,
            coarse,
            modis_available,
            doy,
            sensor,
        })
    }

    /// Drop the coarse input: channels zero-filled, flag cleared.
    pub fn without_modis(mut self) -> Self {
        self.coarse = Tensor::zeros(self.composite.shape());
        self.modis_available = false;
        self
    }

    pub fn meta_at(&self, t: f64) -> MetaInputs {
        MetaInputs {
            t,
            doy: self.doy,
            sensor: self.sensor,
            modis_available: self.modis_available,
        }
    }
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    HeNormal { fan_in: usize },
    SmallNormal,
    Zero,
    One,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// All learnable tensors keyed by a stable hierarchical name.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> NetParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| arg_err(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| arg_err(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        NetParams { map }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }
}

/// The full parameter inventory (names, shapes, initializers) implied by
/// a config, in deterministic construction order.
pub fn param_specs(cfg: &NetConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec { name, shape, init });
    };
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, Init),
                prefix: &str,
                cout: usize,
                cin: usize,
                k: usize| {
        push(
            format!("{prefix}.w"),
            vec![cout, cin, k, k],
            Init::HeNormal { fan_in: cin * k * k },
        );
        push(format!("{prefix}.b"), vec![cout], Init::Zero);
    };
    let gn = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, c: usize| {
        push(format!("{prefix}.g"), vec![c], Init::One);
        push(format!("{prefix}.b"), vec![c], Init::Zero);
    };
    let res_block = |push: &mut dyn FnMut(String, Vec<usize>, Init),
                     prefix: &str,
                     cin: usize,
                     cout: usize,
                     embed: usize| {
        gn(push, &format!("{prefix}.gn1"), cin);
        conv(push, &format!("{prefix}.conv1"), cout, cin, 3);
        push(
            format!("{prefix}.emb.w"),
            vec![cout, embed],
            Init::HeNormal { fan_in: embed },
        );
        push(format!("{prefix}.emb.b"), vec![cout], Init::Zero);
        gn(push, &format!("{prefix}.gn2"), cout);
        conv(push, &format!("{prefix}.conv2"), cout, cout, 3);
        if cin != cout {
            conv(push, &format!("{prefix}.skip"), cout, cin, 1);
        }
    };

    let e = cfg.embed_dim;
    conv(&mut push, "stem", cfg.channels(0), cfg.input_channels(), 3);
    push("emb.sensor.table".into(), vec![2, 8], Init::SmallNormal);
    push("emb.avail.table".into(), vec![2, 8], Init::SmallNormal);
    let concat_dim = e + 2 + 8 + 8;
    push(
        "emb.mlp1.w".into(),
        vec![e, concat_dim],
        Init::HeNormal { fan_in: concat_dim },
    );
    push("emb.mlp1.b".into(), vec![e], Init::Zero);
    push("emb.mlp2.w".into(), vec![e, e], Init::HeNormal { fan_in: e });
    push("emb.mlp2.b".into(), vec![e], Init::Zero);

    let attn = cfg.attn_levels();
    for l in 0..cfg.levels() {
        let c = cfg.channels(l);
        if l > 0 {
            conv(&mut push, &format!("enc{l}.down"), c, cfg.channels(l - 1), 3);
        }
        for b in 0..cfg.num_res_blocks {
            res_block(&mut push, &format!("enc{l}.res{b}"), c, c, e);
        }
        if attn.contains(&l) {
            gn(&mut push, &format!("attn{l}.gn"), c);
            for name in ["q", "k", "v"] {
                conv(&mut push, &format!("attn{l}.{name}"), c, c, 1);
            }
            // Zero-initialized output projection: the block starts as an
            // identity.
            push(format!("attn{l}.o.w"), vec![c, c, 1, 1], Init::Zero);
            push(format!("attn{l}.o.b"), vec![c], Init::Zero);
        }
    }
    for l in (0..cfg.levels().saturating_sub(1)).rev() {
        let c = cfg.channels(l);
        conv(&mut push, &format!("dec{l}.up"), c, cfg.channels(l + 1), 3);
        for b in 0..cfg.num_res_blocks {
            let cin = if b == 0 { 2 * c } else { c };
            res_block(&mut push, &format!("dec{l}.res{b}"), cin, c, e);
        }
    }
    gn(&mut push, "out.gn", cfg.channels(0));
    // Zero-initialized head: a freshly built network predicts the zero
    // field for any input.
    push(
        "out.conv.w".into(),
        vec![cfg.bands, cfg.channels(0), 3, 3],
        Init::Zero,
    );
    push("out.conv.b".into(), vec![cfg.bands], Init::Zero);

    Ok(specs)
}

/// Total learnable scalar count implied by a config.
pub fn param_count(cfg: &NetConfig) -> Result<usize> {
    Ok(param_specs(cfg)?
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum())
}

/// Deterministic parameter initialization from a seed.
pub fn build<T: Real>(cfg: &NetConfig, seed: u64) -> Result<NetParams<T>> {
    let specs = param_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Zero => vec![T::zero(); numel],
            Init::One => vec![T::one(); numel],
            Init::SmallNormal => (0..numel)
                .map(|_| T::std_normal(&mut rng) * T::c(0.5))
                .collect(),
            Init::HeNormal { fan_in } => {
                let std = T::c((2.0 / fan_in as f64).sqrt());
                (0..numel).map(|_| T::std_normal(&mut rng) * std).collect()
            }
        };
        map.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(NetParams { map })
}

// ── Metadata embedding ───────────────────────────────────────────────

/// Non-learned feature vector for one sample: sinusoidal t features
/// (geometric frequencies from 1 to 1e4) followed by the DOY sin/cos
/// pair on the 365.25-day cycle.
pub fn meta_base_features<T: Real>(meta: &MetaInputs, embed_dim: usize) -> Vec<T> {
    let half = embed_dim / 2;
    let mut out = Vec::with_capacity(embed_dim + 2);
    for i in 0..half {
        let exponent = if half > 1 {
            4.0 * i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 10f64.powf(exponent);
        out.push(T::c((meta.t * freq).sin()));
        out.push(T::c((meta.t * freq).cos()));
    }
    let phase = 2.0 * std::f64::consts::PI * meta.doy as f64 / 365.25;
    out.push(T::c(phase.sin()));
    out.push(T::c(phase.cos()));
    out
}

/// Pre-MLP concatenated features [B, embed_dim+2+8+8]: sinusoidal t,
/// DOY sin/cos, learned sensor row, learned availability row. Exposed so
/// the additive composition of the sub-embeddings is testable.
pub fn embed_concat_features<T: Real>(
    params: &NetParams<T>,
    cfg: &NetConfig,
    metas: &[MetaInputs],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let id = build_concat_features(&mut tape, &binding, cfg, metas)?;
    Ok(tape.value(id).clone())
}

fn build_concat_features<T: Real>(
    tape: &mut Tape<T>,
    binding: &ParamBinding,
    cfg: &NetConfig,
    metas: &[MetaInputs],
) -> Result<NodeId> {
    let b = metas.len();
    let mut base = Vec::with_capacity(b * (cfg.embed_dim + 2));
    for meta in metas {
        meta.validate()?;
        base.extend(meta_base_features::<T>(meta, cfg.embed_dim));
    }
    let base = tape.leaf(Tensor::new(vec![b, cfg.embed_dim + 2], base)?, false);
    let sensor_idx: Vec<usize> = metas.iter().map(|m| m.sensor.index()).collect();
    let avail_idx: Vec<usize> = metas
        .iter()
        .map(|m| m.modis_available as usize)
        .collect();
    let sensor = tape.embed_rows(binding.id("emb.sensor.table")?, sensor_idx)?;
    let avail = tape.embed_rows(binding.id("emb.avail.table")?, avail_idx)?;
    let cat = tape.concat_axis1(base, sensor)?;
    tape.concat_axis1(cat, avail)
}

/// Learned embedding [B, embed_dim] for a batch of metadata records.
pub fn build_embedding<T: Real>(
    tape: &mut Tape<T>,
    binding: &ParamBinding,
    cfg: &NetConfig,
    metas: &[MetaInputs],
) -> Result<NodeId> {
    let cat = build_concat_features(tape, binding, cfg, metas)?;
    let h = tape.linear(cat, binding.id("emb.mlp1.w")?, Some(binding.id("emb.mlp1.b")?))?;
    let h = tape.silu(h)?;
    tape.linear(h, binding.id("emb.mlp2.w")?, Some(binding.id("emb.mlp2.b")?))
}

/// Standalone embedding evaluation (inference convenience).
pub fn embed_meta<T: Real>(
    params: &NetParams<T>,
    cfg: &NetConfig,
    meta: &MetaInputs,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let id = build_embedding(&mut tape, &binding, cfg, std::slice::from_ref(meta))?;
    Ok(tape.value(id).clone())
}

// ── Forward pass ─────────────────────────────────────────────────────

/// Tape ids of every bound parameter.
pub struct ParamBinding {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| arg_err(format!("parameter '{name}' not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }
}

/// Insert every parameter as a tape leaf. `trainable` controls whether
/// gradients are materialized for them.
pub fn bind_params<T: Real>(
    tape: &mut Tape<T>,
    params: &NetParams<T>,
    trainable: bool,
) -> ParamBinding {
    let mut ids = BTreeMap::new();
    for (name, tensor) in params.iter() {
        ids.insert(name.clone(), tape.leaf(tensor.clone(), trainable));
    }
    ParamBinding { ids }
}

struct NetBuilder<'a, T: Real> {
    tape: &'a mut Tape<T>,
    binding: &'a ParamBinding,
    cfg: &'a NetConfig,
}

impl<'a, T: Real> NetBuilder<'a, T> {
    fn conv(&mut self, prefix: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.binding.id(&format!("{prefix}.w"))?;
        let b = self.binding.id(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, Some(b), stride, pad)
    }

    fn group_norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let (_, c, _, _) = self.tape.value(x).dims4()?;
        let g = self.binding.id(&format!("{prefix}.g"))?;
        let b = self.binding.id(&format!("{prefix}.b"))?;
        self.tape.group_norm(x, g, b, norm_groups(c), T::c(1e-5))
    }

    fn res_block(&mut self, prefix: &str, x: NodeId, silu_emb: NodeId) -> Result<NodeId> {
        let (_, cin, _, _) = self.tape.value(x).dims4()?;
        let h = self.group_norm(&format!("{prefix}.gn1"), x)?;
        let h = self.tape.silu(h)?;
        let h = self.conv(&format!("{prefix}.conv1"), h, 1, 1)?;
        let (_, cout, _, _) = self.tape.value(h).dims4()?;
        let ew = self.binding.id(&format!("{prefix}.emb.w"))?;
        let eb = self.binding.id(&format!("{prefix}.emb.b"))?;
        let e = self.tape.linear(silu_emb, ew, Some(eb))?;
        let h = self.tape.add_bcast_nc(h, e)?;
        let h = self.group_norm(&format!("{prefix}.gn2"), h)?;
        let h = self.tape.silu(h)?;
        let h = self.conv(&format!("{prefix}.conv2"), h, 1, 1)?;
        let shortcut = if cin != cout {
            self.conv(&format!("{prefix}.skip"), x, 1, 0)?
        } else {
            x
        };
        self.tape.add(h, shortcut)
    }

    fn attn_block(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let (_, c, _, _) = self.tape.value(x).dims4()?;
        let n = self.group_norm(&format!("{prefix}.gn"), x)?;
        let id = |b: &ParamBinding, s: &str| b.id(&format!("{prefix}.{s}"));
        let proj = AttnProj {
            q_w: id(self.binding, "q.w")?,
            q_b: id(self.binding, "q.b")?,
            k_w: id(self.binding, "k.w")?,
            k_b: id(self.binding, "k.b")?,
            v_w: id(self.binding, "v.w")?,
            v_b: id(self.binding, "v.b")?,
            o_w: id(self.binding, "o.w")?,
            o_b: id(self.binding, "o.b")?,
        };
        let a = attention_core(self.tape, n, attn_heads(c), &proj)?;
        self.tape.add(x, a)
    }
}

/// Build the network graph on an existing tape. Inputs are tape nodes of
/// shape [B, bands, H, W]; metadata is per-sample. Returns the predicted
/// vector field node [B, bands, H, W].
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    binding: &ParamBinding,
    cfg: &NetConfig,
    x_t: NodeId,
    composite: NodeId,
    coarse: NodeId,
    metas: &[MetaInputs],
) -> Result<NodeId> {
    cfg.validate()?;
    let (b, c, h, w) = tape.value(x_t).dims4()?;
    if c != cfg.bands {
        return Err(shape_err(format!("x_t has {c} channels, expected {}", cfg.bands)));
    }
    for (name, node) in [("composite", composite), ("coarse", coarse)] {
        if tape.value(node).shape() != [b, cfg.bands, h, w] {
            return Err(shape_err(format!(
                "{name} shape {:?} does not match x_t {:?}",
                tape.value(node).shape(),
                [b, cfg.bands, h, w]
            )));
        }
    }
    if metas.len() != b {
        return Err(shape_err(format!(
            "batch has {b} samples but {} metadata records",
            metas.len()
        )));
    }
    let div = cfg.spatial_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(shape_err(format!(
            "spatial size {h}x{w} not divisible by {div} for {} levels",
            cfg.levels()
        )));
    }

    let emb = build_embedding(tape, binding, cfg, metas)?;
    let silu_emb = tape.silu(emb)?;

    let mut nb = NetBuilder { tape, binding, cfg };
    let cat = nb.tape.concat_axis1(x_t, composite)?;
    let cat = nb.tape.concat_axis1(cat, coarse)?;
    let mut hcur = nb.conv("stem", cat, 1, 1)?;

    let attn = cfg.attn_levels();
    let mut skips: Vec<NodeId> = Vec::new();
    for l in 0..cfg.levels() {
        if l > 0 {
            hcur = nb.conv(&format!("enc{l}.down"), hcur, 2, 1)?;
        }
        for bi in 0..cfg.num_res_blocks {
            hcur = nb.res_block(&format!("enc{l}.res{bi}"), hcur, silu_emb)?;
        }
        if attn.contains(&l) {
            hcur = nb.attn_block(&format!("attn{l}"), hcur)?;
        }
        if l < cfg.levels() - 1 {
            skips.push(hcur);
        }
    }
    for l in (0..cfg.levels().saturating_sub(1)).rev() {
        hcur = nb.tape.upsample_nearest2(hcur)?;
        hcur = nb.conv(&format!("dec{l}.up"), hcur, 1, 1)?;
        let skip = skips.pop().expect("one skip per non-bottom level");
        hcur = nb.tape.concat_axis1(hcur, skip)?;
        for bi in 0..cfg.num_res_blocks {
            hcur = nb.res_block(&format!("dec{l}.res{bi}"), hcur, silu_emb)?;
        }
    }
    let out = nb.group_norm("out.gn", hcur)?;
    let out = nb.tape.silu(out)?;
    nb.conv("out.conv", out, 1, 1)
}

/// Single-sample inference: u_theta(x_t, t, c) without gradients.
pub fn forward<T: Real>(
    params: &NetParams<T>,
    cfg: &NetConfig,
    x_t: &Tensor<T>,
    cond: &ConditionStack<T>,
    t: f64,
) -> Result<Tensor<T>> {
    let (c, h, w) = x_t.dims3()?;
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let x_id = tape.leaf(x_t.clone().reshaped(vec![1, c, h, w])?, false);
    let comp = tape.leaf(cond.composite.clone().reshaped(vec![1, c, h, w])?, false);
    let coarse = tape.leaf(cond.coarse.clone().reshaped(vec![1, c, h, w])?, false);
    let meta = cond.meta_at(t);
    let out = forward_on_tape(&mut tape, &binding, cfg, x_id, comp, coarse, &[meta])?;
    tape.value(out).clone().reshaped(vec![c, h, w])
}

// ── Checkpoint bridge ────────────────────────────────────────────────

/// Validate a named tensor map against the config's parameter inventory.
pub fn validate_params_against(cfg: &NetConfig, map: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let specs = param_specs(cfg)?;
    if specs.len() != map.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config implies {}",
            map.len(),
            specs.len()
        )));
    }
    for spec in &specs {
        match map.get(&spec.name) {
            None => {
                return Err(Error::Format(format!(
                    "checkpoint is missing parameter '{}'",
                    spec.name
                )))
            }
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?}, config implies {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            attention_levels: None,
            bands: 6,
            embed_dim: 8,
        }
    }

    fn rand_cond(h: usize, w: usize, seed: u64) -> ConditionStack<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConditionStack::new(
            Tensor::randn(&[6, h, w], &mut rng),
            Some(Tensor::randn(&[6, h, w], &mut rng)),
            120,
            Sensor::OLI,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = tiny_cfg();
        let a: NetParams<f32> = build(&cfg, 99).unwrap();
        let b: NetParams<f32> = build(&cfg, 99).unwrap();
        assert_eq!(a, b);
        let c: NetParams<f32> = build(&cfg, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_init_head_gives_zero_output() {
        let cfg = tiny_cfg();
        let params: NetParams<f32> = build(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 8, 8], &mut rng);
        let cond = rand_cond(8, 8, 2);
        let u = forward(&params, &cfg, &x, &cond, 0.5).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_channel_count_is_eighteen() {
        assert_eq!(NetConfig::default().input_channels(), 18);
    }

    #[test]
    fn param_count_matches_map() {
        let cfg = tiny_cfg();
        let params: NetParams<f32> = build(&cfg, 1).unwrap();
        assert_eq!(params.param_count(), param_count(&cfg).unwrap());
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let cfg = tiny_cfg();
        let params: NetParams<f32> = build(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 8, 8], &mut rng);
        let mut cond = rand_cond(8, 8, 2);
        cond.composite = Tensor::randn(&[6, 4, 4], &mut rng);
        assert!(forward(&params, &cfg, &x, &cond, 0.5).is_err());
        // Odd spatial size cannot be halved.
        let x = Tensor::randn(&[6, 7, 7], &mut rng);
        let cond = rand_cond(7, 7, 3);
        assert!(forward(&params, &cfg, &x, &cond, 0.5).is_err());
    }

    #[test]
    fn meta_validation() {
        let ok = MetaInputs {
            t: 0.5,
            doy: 100,
            sensor: Sensor::TM,
            modis_available: true,
        };
        assert!(ok.validate().is_ok());
        assert!(MetaInputs { t: -0.1, ..ok }.validate().is_err());
        assert!(MetaInputs { t: 1.5, ..ok }.validate().is_err());
        assert!(MetaInputs { doy: 0, ..ok }.validate().is_err());
        assert!(MetaInputs { doy: 367, ..ok }.validate().is_err());
    }

    #[test]
    fn time_endpoints_embed_distinctly() {
        let cfg = tiny_cfg();
        let params: NetParams<f32> = build(&cfg, 3).unwrap();
        let m0 = MetaInputs {
            t: 0.0,
            doy: 50,
            sensor: Sensor::TM,
            modis_available: true,
        };
        let m1 = MetaInputs { t: 1.0, ..m0 };
        let e0 = embed_meta(&params, &cfg, &m0).unwrap();
        let e1 = embed_meta(&params, &cfg, &m1).unwrap();
        assert!(e0.max_abs_diff(&e1) > 1e-4);
    }

    #[test]
    fn availability_flips_only_its_sub_embedding() {
        let cfg = tiny_cfg();
        let params: NetParams<f32> = build(&cfg, 3).unwrap();
        let m = MetaInputs {
            t: 0.25,
            doy: 200,
            sensor: Sensor::OLI,
            modis_available: true,
        };
        let with = embed_concat_features(&params, &cfg, &[m]).unwrap();
        let without = embed_concat_features(
            &params,
            &cfg,
            &[MetaInputs {
                modis_available: false,
                ..m
            }],
        )
        .unwrap();
        let e = cfg.embed_dim;
        // t/doy/sensor segments identical, availability segment differs.
        let w_data = with.data();
        let wo_data = without.data();
        assert_eq!(&w_data[..e + 2 + 8], &wo_data[..e + 2 + 8]);
        assert!(w_data[e + 2 + 8..]
            .iter()
            .zip(&wo_data[e + 2 + 8..])
            .any(|(a, b)| a != b));
    }

    #[test]
    fn doy_wraparound_is_nearly_seamless() {
        // sin/cos(2*pi*doy/365.25) for doy 1 and 366 differ by <= 0.02.
        let f = |doy: f64| {
            let p = 2.0 * std::f64::consts::PI * doy / 365.25;
            (p.sin(), p.cos())
        };
        let (s1, c1) = f(1.0);
        let (s2, c2) = f(366.0);
        assert!((s1 - s2).abs() <= 0.02, "sin differs by {}", (s1 - s2).abs());
        assert!((c1 - c2).abs() <= 0.02, "cos differs by {}", (c1 - c2).abs());
        // And the embedded features agree.
        let m1 = MetaInputs {
            t: 0.5,
            doy: 1,
            sensor: Sensor::TM,
            modis_available: true,
        };
        let m366 = MetaInputs { doy: 366, ..m1 };
        let f1 = meta_base_features::<f64>(&m1, 8);
        let f366 = meta_base_features::<f64>(&m366, 8);
        for (a, b) in f1.iter().zip(&f366).skip(8) {
            assert!((a - b).abs() <= 0.02);
        }
    }

    #[test]
    fn batch_order_permutes_outputs_identically() {
        let cfg = tiny_cfg();
        let params: NetParams<f32> = build(&cfg, 11).unwrap();
        // Make the head non-zero so outputs are informative.
        let mut params = params;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += 0.05 * f32::std_normal(&mut rng);
            }
        }
        let (h, w) = (8, 8);
        let xa = Tensor::randn(&[1, 6, h, w], &mut rng);
        let xb = Tensor::randn(&[1, 6, h, w], &mut rng);
        let ca = rand_cond(h, w, 21);
        let cb = rand_cond(h, w, 22);
        let run = |first: (&Tensor<f32>, &ConditionStack<f32>),
                   second: (&Tensor<f32>, &ConditionStack<f32>)| {
            let mut tape = Tape::new();
            let binding = bind_params(&mut tape, &params, false);
            let mut stack = |t: &Tensor<f32>, u: &Tensor<f32>| {
                let mut data = t.data().to_vec();
                data.extend_from_slice(u.data());
                Tensor::new(vec![2, 6, h, w], data).unwrap()
            };
            let x = stack(first.0, second.0);
            let comp = stack(&first.1.composite.clone().reshaped(vec![1, 6, h, w]).unwrap(),
                             &second.1.composite.clone().reshaped(vec![1, 6, h, w]).unwrap());
            let coarse = stack(&first.1.coarse.clone().reshaped(vec![1, 6, h, w]).unwrap(),
                               &second.1.coarse.clone().reshaped(vec![1, 6, h, w]).unwrap());
            let xi = tape.leaf(x, false);
            let ci = tape.leaf(comp, false);
            let oi = tape.leaf(coarse, false);
            let metas = [first.1.meta_at(0.3), second.1.meta_at(0.3)];
            let out = forward_on_tape(&mut tape, &binding, &cfg, xi, ci, oi, &metas).unwrap();
            tape.value(out).data().to_vec()
        };
        let ab = run((&xa, &ca), (&xb, &cb));
        let ba = run((&xb, &cb), (&xa, &ca));
        let half = ab.len() / 2;
        assert_eq!(&ab[..half], &ba[half..]);
        assert_eq!(&ab[half..], &ba[..half]);
    }
}
