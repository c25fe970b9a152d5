//! Swin-BathyUNet: a convolutional U-Net whose deeper skip connections pass
//! through window self-attention and cross-attention blocks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    /// Number of encoder stages; stage `s` has `base_filters * 2^s` channels.
    pub encoder_depth: usize,
    pub center_channels: usize,
    /// Token width per Swin block, deepest block first.
    pub swin_embed_dims: Vec<usize>,
    pub num_heads: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
    /// Stacked Swin layers per block.
    pub swin_depth: usize,
    pub dropout: f64,
    pub num_swin_blocks: usize,
    pub cross_attention: bool,
    /// Average-pool factor applied to the stage features before tokenizing,
    /// deepest block first.
    pub swin_pool: Vec<usize>,
    /// Concatenate the raw encoder skip alongside the Swin output.
    pub concat_raw_skip: bool,
    pub conv_bias: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk(8, 4)
    }
}

impl NetworkConfig {
    /// Desk-scale configuration with three Swin blocks where the depth allows.
    pub fn desk(base_filters: usize, encoder_depth: usize) -> Self {
        let blocks = 3.min(encoder_depth.saturating_sub(1));
        let mut cfg = Self {
            in_channels: 3,
            base_filters,
            encoder_depth,
            center_channels: base_filters << encoder_depth,
            swin_embed_dims: Vec::new(),
            num_heads: 2,
            window_size: 4,
            mlp_ratio: 4,
            swin_depth: 1,
            dropout: 0.1,
            num_swin_blocks: blocks,
            cross_attention: true,
            swin_pool: vec![1; blocks],
            concat_raw_skip: false,
            conv_bias: true,
        };
        cfg.swin_embed_dims = (0..blocks).map(|b| cfg.stage_channels(cfg.swin_stage(b))).collect();
        cfg
    }

    /// Full-size configuration: 64 base filters, four encoder stages.
    pub fn full() -> Self {
        Self {
            in_channels: 3,
            base_filters: 64,
            encoder_depth: 4,
            center_channels: 1024,
            swin_embed_dims: vec![512, 256, 128],
            num_heads: 8,
            window_size: 64,
            mlp_ratio: 4,
            swin_depth: 1,
            dropout: 0.1,
            num_swin_blocks: 3,
            cross_attention: true,
            swin_pool: vec![2, 2, 2],
            concat_raw_skip: false,
            conv_bias: true,
        }
    }

    /// Small network used for gradient checks and overfit runs.
    pub fn micro(encoder_depth: usize) -> Self {
        let blocks = 3.min(encoder_depth.saturating_sub(1));
        Self {
            base_filters: 4,
            num_heads: 1,
            window_size: 2,
            swin_embed_dims: vec![8; blocks],
            ..Self::desk(4, encoder_depth)
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_filters << stage
    }

    /// Encoder stage fed by Swin block `b` (0 is the deepest).
    pub fn swin_stage(&self, b: usize) -> usize {
        self.encoder_depth - 1 - b
    }

    fn block_at_stage(&self, stage: usize) -> Option<usize> {
        (0..self.num_swin_blocks).find(|b| self.swin_stage(*b) == stage)
    }

    /// Channels the decoder stage `s` receives from its skip connection.
    pub fn skip_channels(&self, stage: usize) -> usize {
        match self.block_at_stage(stage) {
            Some(b) if self.concat_raw_skip => self.swin_embed_dims[b] + self.stage_channels(stage),
            Some(b) => self.swin_embed_dims[b],
            None => self.stage_channels(stage),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.base_filters == 0 || self.encoder_depth == 0 || self.center_channels == 0 {
            return bad("channel counts and encoder depth must be positive".into());
        }
        if self.num_swin_blocks > 3 || self.num_swin_blocks > self.encoder_depth - 1 {
            return bad(format!(
                "{} Swin blocks need at least {} encoder stages and at most 3 blocks",
                self.num_swin_blocks,
                self.num_swin_blocks + 1
            ));
        }
        if self.swin_embed_dims.len() < self.num_swin_blocks || self.swin_pool.len() < self.num_swin_blocks {
            return bad("one embed dim and one pool factor per Swin block".into());
        }
        if self.num_heads == 0 || self.window_size == 0 || self.mlp_ratio == 0 || self.swin_depth == 0 {
            return bad("heads, window size, MLP ratio and Swin depth must be positive".into());
        }
        for b in 0..self.num_swin_blocks {
            let d = self.swin_embed_dims[b];
            if d == 0 || d % self.num_heads != 0 {
                return bad(format!("embed dim {d} of Swin block {b} is not divisible by {} heads", self.num_heads));
            }
            if self.swin_pool[b] == 0 {
                return bad(format!("pool factor of Swin block {b} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Input sizes must halve cleanly through every stage and tile into
    /// whole windows at every Swin stage.
    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if channels != self.in_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {channels}", self.in_channels)));
        }
        let m = 1usize << self.encoder_depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by {m}")));
        }
        for b in 0..self.num_swin_blocks {
            let s = self.swin_stage(b);
            let unit = self.swin_pool[b] * self.window_size;
            let (sh, sw) = (h >> s, w >> s);
            if sh % unit != 0 || sw % unit != 0 {
                return Err(Error::Shape(format!(
                    "stage {s} map {sh}x{sw} does not tile into windows of {} after pooling by {}",
                    self.window_size, self.swin_pool[b]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-uniform with the given fan-in.
    He(usize),
    /// Xavier-uniform with (fan_in, fan_out).
    Xavier(usize, usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamSpec { name, shape, init });
}

fn conv_spec(out: &mut Vec<ParamSpec>, cfg: &NetworkConfig, name: &str, c_in: usize, c_out: usize, k: usize) {
    spec(out, format!("{name}.w"), vec![c_out, c_in, k, k], Init::He(c_in * k * k));
    if cfg.conv_bias {
        spec(out, format!("{name}.b"), vec![c_out], Init::Zeros);
    }
}

/// Every parameter the configuration implies, in canonical order.
pub fn param_specs(cfg: &NetworkConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut c_in = cfg.in_channels;
    for s in 0..cfg.encoder_depth {
        let c = cfg.stage_channels(s);
        conv_spec(&mut out, cfg, &format!("enc{s}.conv1"), c_in, c, 3);
        conv_spec(&mut out, cfg, &format!("enc{s}.conv2"), c, c, 3);
        c_in = c;
    }
    conv_spec(&mut out, cfg, "center.conv1", c_in, cfg.center_channels, 3);
    conv_spec(&mut out, cfg, "center.conv2", cfg.center_channels, cfg.center_channels, 3);
    for b in 0..cfg.num_swin_blocks {
        let s = cfg.swin_stage(b);
        let (c, d) = (cfg.stage_channels(s), cfg.swin_embed_dims[b]);
        let hidden = d * cfg.mlp_ratio;
        let p = format!("swin{s}");
        spec(&mut out, format!("{p}.embed.w"), vec![c, d], Init::Xavier(c, d));
        spec(&mut out, format!("{p}.embed.b"), vec![d], Init::Zeros);
        for l in 0..cfg.swin_depth {
            let q = format!("{p}.l{l}");
            spec(&mut out, format!("{q}.ln1.g"), vec![d], Init::Ones);
            spec(&mut out, format!("{q}.ln1.b"), vec![d], Init::Zeros);
            for m in ["wq", "wk", "wv", "wo"] {
                spec(&mut out, format!("{q}.attn.{m}"), vec![d, d], Init::Xavier(d, d));
            }
            spec(&mut out, format!("{q}.attn.bo"), vec![d], Init::Zeros);
            if cfg.cross_attention {
                let c_low = cfg.stage_channels(s - 1);
                spec(&mut out, format!("{q}.ca.wq"), vec![d, d], Init::Xavier(d, d));
                spec(&mut out, format!("{q}.ca.wk"), vec![c_low, d], Init::Xavier(c_low, d));
                spec(&mut out, format!("{q}.ca.wv"), vec![c_low, d], Init::Xavier(c_low, d));
            }
            spec(&mut out, format!("{q}.ln2.g"), vec![d], Init::Ones);
            spec(&mut out, format!("{q}.ln2.b"), vec![d], Init::Zeros);
            spec(&mut out, format!("{q}.mlp.w1"), vec![d, hidden], Init::He(d));
            spec(&mut out, format!("{q}.mlp.b1"), vec![hidden], Init::Zeros);
            spec(&mut out, format!("{q}.mlp.w2"), vec![hidden, d], Init::He(hidden));
            spec(&mut out, format!("{q}.mlp.b2"), vec![d], Init::Zeros);
        }
    }
    let mut prev = cfg.center_channels;
    for s in (0..cfg.encoder_depth).rev() {
        let c = cfg.stage_channels(s);
        conv_spec(&mut out, cfg, &format!("dec{s}.up"), prev, c, 3);
        conv_spec(&mut out, cfg, &format!("dec{s}.conv1"), c + cfg.skip_channels(s), c, 3);
        conv_spec(&mut out, cfg, &format!("dec{s}.conv2"), c, c, 3);
        prev = c;
    }
    conv_spec(&mut out, cfg, "head", prev, 1, 1);
    Ok(out)
}

/// Named parameter tensors plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl ModelParams {
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let specs = param_specs(config)?;
        let mut r = rng::stream(seed, 0x494e_4954);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let n: usize = s.shape.iter().product();
            let bound = match s.init {
                Init::He(fan_in) => Float::sqrt(6.0 / fan_in as f64),
                Init::Xavier(a, b) => Float::sqrt(6.0 / (a + b) as f64),
                Init::Zeros | Init::Ones => 0.0,
            };
            let data: Vec<f32> = (0..n)
                .map(|_| match s.init {
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    _ => r.random_range(-bound..bound) as f32,
                })
                .collect();
            names.push(s.name);
            tensors.push(Tensor::new(s.shape, data)?);
        }
        Ok(Self { config: config.clone(), names, tensors })
    }

    /// Parameters with every entry zero.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        let specs = param_specs(config)?;
        Ok(Self {
            config: config.clone(),
            names: specs.iter().map(|s| s.name.clone()).collect(),
            tensors: specs.into_iter().map(|s| Tensor::zeros(s.shape)).collect(),
        })
    }

    /// Checks names and shapes against what the configuration implies,
    /// naming the first offending tensor.
    pub fn validate(&self) -> Result<()> {
        let specs = param_specs(&self.config)?;
        if self.names.len() != self.tensors.len() {
            return Err(Error::Shape("parameter names and tensors differ in count".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            match (self.names.get(i), self.tensors.get(i)) {
                (Some(n), Some(t)) if *n == s.name && t.shape() == s.shape.as_slice() => {}
                (Some(n), Some(t)) => {
                    return Err(Error::Shape(format!(
                        "tensor `{n}` has shape {:?}; configuration expects `{}` with shape {:?}",
                        t.shape(),
                        s.name,
                        s.shape
                    )))
                }
                _ => return Err(Error::Shape(format!("missing tensor `{}`", s.name))),
            }
        }
        if self.names.len() > specs.len() {
            return Err(Error::Shape(format!("unexpected tensor `{}`", self.names[specs.len()])));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Places every tensor on the graph, as trainable leaves or constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.cast()) } else { g.constant(t.cast()) })
            .collect();
        Bound::new(&self.names, vars)
    }
}

/// Graph handles for a parameter set, looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    index: BTreeMap<String, usize>,
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn new(names: &[String], vars: Vec<Var>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { index, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|i| self.vars[*i])
            .ok_or_else(|| Error::Shape(format!("no parameter named `{name}`")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|i| self.vars[*i])
    }
}

/// Dropout source for training; `None` means inference.
pub type DropoutRng<'a> = Option<&'a mut rng::SeededRng>;

fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, padding: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.opt(&format!("{name}.b"));
    g.conv2d(x, w, b, padding, 1)
}

fn conv_relu<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = conv(g, p, name, x, 1)?;
    Ok(g.relu(y))
}

/// Two 3x3 conv + ReLU layers at stage `s`, before pooling.
pub fn encoder_block<T: Real>(g: &mut Graph<T>, p: &Bound, stage: usize, x: Var) -> Result<Var> {
    let y = conv_relu(g, p, &format!("enc{stage}.conv1"), x)?;
    conv_relu(g, p, &format!("enc{stage}.conv2"), y)
}

fn drop<T: Real>(g: &mut Graph<T>, x: Var, p: f64, r: &mut DropoutRng) -> Result<Var> {
    match r {
        Some(r) if p > 0.0 => g.dropout(x, p, Some(&mut **r)),
        _ => Ok(x),
    }
}

/// Multi-head scaled dot-product attention over `q[B, Nq, D]`,
/// `k, v[B, Nk, D]`. Returns the output `[B, Nq, D]` and the attention
/// weights `[B, heads, Nq, Nk]`.
pub fn attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || g.shape(v) != ks.as_slice() {
        return Err(Error::Shape(format!(
            "attention needs q[B,Nq,D], k/v[B,Nk,D]; got {:?}, {:?}, {:?}",
            qs,
            ks,
            g.shape(v)
        )));
    }
    let (b, nq, d, nk) = (qs[0], qs[1], qs[2], ks[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("embed dim {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<T>, x: Var, n: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, n, heads, dh])?;
        g.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(g, q, nq)?;
    let kh = split(g, k, nk)?;
    let vh = split(g, v, nk)?;
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, T::lit(1.0 / Float::sqrt(dh as f64)));
    let probs = g.softmax(scores, 3)?;
    let out = g.matmul(probs, vh)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, nq, d])?;
    Ok((out, probs))
}

/// Token order that groups a row-major `h x w` grid into `ws x ws` windows.
pub fn window_order(h: usize, w: usize, ws: usize) -> Result<Vec<usize>> {
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::Shape(format!("{h}x{w} token grid does not tile into {ws}x{ws} windows")));
    }
    let mut order = Vec::with_capacity(h * w);
    for wy in 0..h / ws {
        for wx in 0..w / ws {
            for ty in 0..ws {
                for tx in 0..ws {
                    order.push((wy * ws + ty) * w + wx * ws + tx);
                }
            }
        }
    }
    Ok(order)
}

/// Window self-attention projections.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Option<Var>,
}

/// Multi-head self-attention inside non-overlapping windows of a token grid
/// `x[h*w, D]`, followed by the output projection. No residual.
pub fn w_msa<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    grid: (usize, usize),
    window: usize,
    heads: usize,
    wts: &AttnWeights,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let (h, w) = grid;
    if xs.len() != 2 || xs[0] != h * w {
        return Err(Error::Shape(format!("tokens {:?} do not match a {h}x{w} grid", xs)));
    }
    let d = xs[1];
    let order = window_order(h, w, window)?;
    let mut inverse = vec![0; order.len()];
    for (pos, &tok) in order.iter().enumerate() {
        inverse[tok] = pos;
    }
    let t = window * window;
    let n_win = h * w / t;
    let xw = g.gather(x, order)?;
    let xw = g.reshape(xw, &[n_win, t, d])?;
    let q = g.matmul(xw, wts.wq)?;
    let k = g.matmul(xw, wts.wk)?;
    let v = g.matmul(xw, wts.wv)?;
    let (att, _) = attention(g, q, k, v, heads)?;
    let att = g.reshape(att, &[n_win * t, d])?;
    let att = g.gather(att, inverse)?;
    g.linear(att, wts.wo, wts.bo)
}

/// Global cross-attention: queries from `x_high[N, D]`, keys and values
/// projected from `x_low[M, C_low]`. Output follows the queries, `[N, D]`.
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    x_high: Var,
    x_low: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> Result<Var> {
    let q = g.matmul(x_high, wq)?;
    let k = g.matmul(x_low, wk)?;
    let v = g.matmul(x_low, wv)?;
    if g.shape(q)[1] != g.shape(k)[1] {
        return Err(Error::Shape(format!(
            "projected query width {} differs from key width {}",
            g.shape(q)[1],
            g.shape(k)[1]
        )));
    }
    let (n, m, d) = (g.shape(q)[0], g.shape(k)[0], g.shape(q)[1]);
    let q = g.reshape(q, &[1, n, d])?;
    let k = g.reshape(k, &[1, m, d])?;
    let v = g.reshape(v, &[1, m, d])?;
    let (out, _) = attention(g, q, k, v, heads)?;
    g.reshape(out, &[n, d])
}

/// `[C, h, w]` map to `[h*w, C]` tokens.
pub fn to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// `[h*w, D]` tokens to a `[D, h, w]` map.
pub fn from_tokens<T: Real>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let d = g.shape(t)[1];
    let tt = g.transpose(t)?;
    g.reshape(tt, &[d, h, w])
}

fn pool<T: Real>(g: &mut Graph<T>, x: Var, k: usize) -> Result<Var> {
    if k == 1 {
        Ok(x)
    } else {
        g.avgpool2d(x, k)
    }
}

/// Swin block `b` on encoder features `x[C, h, w]`, with `low[C', 2h, 2w]` the
/// adjacent shallower stage. Returns a `[D, h, w]` skip map.
pub fn swin_block<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    p: &Bound,
    b: usize,
    x: Var,
    low: Var,
    rng: &mut DropoutRng,
) -> Result<Var> {
    let s = cfg.swin_stage(b);
    let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
    let k = cfg.swin_pool[b];
    let pooled = pool(g, x, k)?;
    let (th, tw) = (h / k, w / k);
    let tokens = to_tokens(g, pooled)?;
    let pre = format!("swin{s}");
    let mut z = g.linear(tokens, p.get(&format!("{pre}.embed.w"))?, Some(p.get(&format!("{pre}.embed.b"))?))?;
    // low-level tokens on the same grid as the queries
    let low_tokens = if cfg.cross_attention {
        let lp = pool(g, low, 2 * k)?;
        Some(to_tokens(g, lp)?)
    } else {
        None
    };
    for l in 0..cfg.swin_depth {
        let q = format!("{pre}.l{l}");
        let ln1 = g.layernorm(z, p.get(&format!("{q}.ln1.g"))?, p.get(&format!("{q}.ln1.b"))?, T::lit(LN_EPS))?;
        let wts = AttnWeights {
            wq: p.get(&format!("{q}.attn.wq"))?,
            wk: p.get(&format!("{q}.attn.wk"))?,
            wv: p.get(&format!("{q}.attn.wv"))?,
            wo: p.get(&format!("{q}.attn.wo"))?,
            bo: Some(p.get(&format!("{q}.attn.bo"))?),
        };
        let att = w_msa(g, ln1, (th, tw), cfg.window_size, cfg.num_heads, &wts)?;
        let att = drop(g, att, cfg.dropout, rng)?;
        let z_hat = g.add(z, att)?;
        let mixed = match low_tokens {
            Some(lt) => cross_attention(
                g,
                z_hat,
                lt,
                p.get(&format!("{q}.ca.wq"))?,
                p.get(&format!("{q}.ca.wk"))?,
                p.get(&format!("{q}.ca.wv"))?,
                cfg.num_heads,
            )?,
            None => z_hat,
        };
        let ln2 = g.layernorm(mixed, p.get(&format!("{q}.ln2.g"))?, p.get(&format!("{q}.ln2.b"))?, T::lit(LN_EPS))?;
        let hid = g.linear(ln2, p.get(&format!("{q}.mlp.w1"))?, Some(p.get(&format!("{q}.mlp.b1"))?))?;
        let hid = g.relu(hid);
        let mlp = g.linear(hid, p.get(&format!("{q}.mlp.w2"))?, Some(p.get(&format!("{q}.mlp.b2"))?))?;
        let mlp = drop(g, mlp, cfg.dropout, rng)?;
        z = g.add(mlp, z_hat)?;
    }
    let map = from_tokens(g, z, th, tw)?;
    if k == 1 {
        Ok(map)
    } else {
        g.bilinear_resize(map, h, w)
    }
}

/// Normalized `[3, H, W]` image to a `[1, H, W]` normalized depth map.
/// Dropout is active only when `rng` is given.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    p: &Bound,
    image: Var,
    mut rng: DropoutRng,
) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected a [C, H, W] image, got {:?}", s)));
    }
    cfg.check_input(s[0], s[1], s[2])?;
    let mut skips = Vec::with_capacity(cfg.encoder_depth);
    let mut x = image;
    for stage in 0..cfg.encoder_depth {
        let f = encoder_block(g, p, stage, x)?;
        skips.push(f);
        x = g.maxpool2d(f)?;
    }
    x = conv_relu(g, p, "center.conv1", x)?;
    x = conv_relu(g, p, "center.conv2", x)?;
    for stage in (0..cfg.encoder_depth).rev() {
        let (h, w) = (g.shape(skips[stage])[1], g.shape(skips[stage])[2]);
        let up = g.bilinear_resize(x, h, w)?;
        let up = conv_relu(g, p, &format!("dec{stage}.up"), up)?;
        let mut parts = vec![up];
        match cfg.block_at_stage(stage) {
            Some(b) => {
                let sw = swin_block(g, cfg, p, b, skips[stage], skips[stage - 1], &mut rng)?;
                parts.push(sw);
                if cfg.concat_raw_skip {
                    parts.push(skips[stage]);
                }
            }
            None => parts.push(skips[stage]),
        }
        let cat = g.concat(&parts, 0)?;
        x = conv_relu(g, p, &format!("dec{stage}.conv1"), cat)?;
        x = conv_relu(g, p, &format!("dec{stage}.conv2"), x)?;
    }
    conv(g, p, "head", x, 0)
}

/// Inference on a normalized image tensor.
pub fn predict<T: Real>(params: &ModelParams, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let y = forward(&mut g, &params.config, &p, x, None)?;
    Ok(g.value(y).clone())
}
