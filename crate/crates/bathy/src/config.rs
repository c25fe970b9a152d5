//! Plain-text `key = value` configuration with `#` comments.
//!
//! Keys are grouped by prefix: `scene.*`, `pairs.*`, `svr.*`, `net.*`,
//! `train.*`, `predict.*`, `eval.*` and `band.catzoc.<name>` /
//! `band.s44.<name>`. Unknown keys are rejected with a suggestion.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use bathy_core::loss::{BswConfig, Decay, LossKind};
use bathy_core::metrics::{default_depth_bins, Band, DepthBin, HydroBandingConfig, DEFAULT_THRESHOLDS};
use bathy_core::network::NetworkConfig;
use bathy_core::svr::SvrTrainConfig;
use bathy_core::synth::SceneConfig;
use bathy_core::train::{PredictConfig, TrainConfig};
use bathy_core::NormalizationSpec;

use crate::error::{read_file, BathyError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parsed entries in file order.
#[derive(Clone, Debug, Default)]
pub struct KvFile {
    pub origin: String,
    pub entries: Vec<Entry>,
}

impl KvFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BathyError::parse(origin, i + 1, format!("expected `key = value`, found `{line}`")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(BathyError::parse(origin, i + 1, "empty key"));
            }
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(BathyError::parse(origin, i + 1, format!("`{key}` already set on line {}", prev.line)));
            }
            entries.push(Entry { key: key.into(), value: v.trim().into(), line: i + 1 });
        }
        Ok(Self { origin: origin.into(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| BathyError::parse(path.display().to_string(), 0, "not UTF-8 text"))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn err(&self, e: &Entry, msg: String) -> BathyError {
        BathyError::parse(&self.origin, e.line, msg)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| self.err(e, format!("bad value `{}` for `{key}`", e.value))),
        }
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(Some(true)),
                "false" | "no" | "off" | "0" => Ok(Some(false)),
                _ => Err(self.err(e, format!("`{key}` expects true/false, got `{}`", e.value))),
            },
        }
    }

    fn set_bool(&self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.get_bool(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| self.err(e, format!("bad list item `{}` in `{key}`", t.trim()))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Rejects keys that are neither known nor under a free-form prefix.
    pub fn check_keys(&self, known: &[&str], prefixes: &[&str]) -> Result<()> {
        for e in &self.entries {
            if known.contains(&e.key.as_str()) || prefixes.iter().any(|p| e.key.starts_with(p)) {
                continue;
            }
            let best = known
                .iter()
                .map(|k| (strsim::jaro_winkler(k, &e.key), *k))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .filter(|(s, _)| *s > 0.8);
            let hint = best.map(|(_, k)| format!(" (did you mean `{k}`?)")).unwrap_or_default();
            return Err(self.err(e, format!("unknown key `{}`{hint}", e.key)));
        }
        Ok(())
    }
}

pub const SCENE_KEYS: &[&str] = &[
    "scene.width",
    "scene.height",
    "scene.gsd",
    "scene.depth_min",
    "scene.depth_max",
    "scene.bump_count",
    "scene.smoothness",
    "scene.tilt",
    "scene.substrate_blobs",
    "scene.glint_fraction",
    "scene.n_air",
    "scene.n_water",
    "scene.surface_z",
    "scene.flying_height",
    "scene.baseline",
    "scene.gap_window",
    "scene.gap_fraction",
    "scene.depth_cutoff",
    "scene.noise_sigma",
    "scene.seed",
    "pairs.grid",
    "pairs.noise_sigma",
];

pub const SVR_KEYS: &[&str] =
    &["svr.c", "svr.epsilon", "svr.max_iter", "svr.tol", "svr.grid_search", "svr.c_grid", "svr.folds", "svr.tie_tolerance", "svr.seed"];

pub const NET_KEYS: &[&str] = &[
    "net.preset",
    "net.in_channels",
    "net.base_filters",
    "net.encoder_depth",
    "net.center_channels",
    "net.embed_dims",
    "net.num_heads",
    "net.window_size",
    "net.mlp_ratio",
    "net.swin_depth",
    "net.dropout",
    "net.num_swin_blocks",
    "net.cross_attention",
    "net.swin_pool",
    "net.concat_raw_skip",
    "net.conv_bias",
];

pub const TRAIN_KEYS: &[&str] = &[
    "train.lr",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.init_seed",
    "train.hflip",
    "train.vflip",
    "train.rot90",
    "train.glint_threshold",
    "train.rgb_divisor",
    "train.depth_divisor",
    "train.loss",
    "train.bsw.d_min",
    "train.bsw.d_max",
    "train.bsw.decay",
    "train.bsw.w_floor",
    "train.bsw.w_ceil",
    "train.shuffle",
    "train.patch",
    "train.stride",
    "predict.patch",
];

pub const EVAL_KEYS: &[&str] = &["eval.thresholds", "eval.depth_bins", "eval.hist_bins", "eval.hist_range", "eval.hist2d_bins"];

pub const BAND_PREFIXES: &[&str] = &["band.catzoc.", "band.s44."];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSettings {
    pub grid: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    pub depth_bins: Vec<DepthBin>,
    pub hist_bins: usize,
    /// Fixed histogram range; the data range when `None`.
    pub hist_range: Option<(f64, f64)>,
    pub hist2d_bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            depth_bins: default_depth_bins(),
            hist_bins: 50,
            hist_range: None,
            hist2d_bins: 40,
        }
    }
}

/// Everything a pipeline run can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub scene: SceneConfig,
    pub pairs: PairSettings,
    pub svr: SvrTrainConfig,
    pub svr_grid_search: bool,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub patch: usize,
    pub stride: usize,
    pub predict_patch: usize,
    pub eval: EvalSettings,
    pub banding: HydroBandingConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            pairs: PairSettings { grid: 20, noise_sigma: 0.05 },
            svr: SvrTrainConfig::default(),
            svr_grid_search: false,
            net: NetworkConfig::desk(8, 3),
            train: TrainConfig::default(),
            init_seed: 0,
            patch: 32,
            stride: 32,
            predict_patch: 32,
            eval: EvalSettings::default(),
            banding: HydroBandingConfig::default(),
        }
    }
}

fn all_keys() -> Vec<&'static str> {
    [SCENE_KEYS, SVR_KEYS, NET_KEYS, TRAIN_KEYS, EVAL_KEYS].concat()
}

impl Settings {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(&all_keys(), BAND_PREFIXES)?;
        let mut s = Self::default();
        read_scene(kv, &mut s.scene)?;
        kv.set("pairs.grid", &mut s.pairs.grid)?;
        kv.set("pairs.noise_sigma", &mut s.pairs.noise_sigma)?;
        read_svr(kv, &mut s.svr)?;
        kv.set_bool("svr.grid_search", &mut s.svr_grid_search)?;
        s.net = network_config(kv)?;
        read_train(kv, &mut s)?;
        read_eval(kv, &mut s.eval)?;
        s.banding = banding_config(kv)?;
        Ok(s)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_kv(&KvFile::load(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig { patch: self.predict_patch, norm: self.train.norm, glint_threshold: self.train.glint_threshold }
    }
}

fn read_scene(kv: &KvFile, c: &mut SceneConfig) -> Result<()> {
    kv.set("scene.width", &mut c.width)?;
    kv.set("scene.height", &mut c.height)?;
    kv.set("scene.gsd", &mut c.gsd)?;
    kv.set("scene.depth_min", &mut c.depth_range.0)?;
    kv.set("scene.depth_max", &mut c.depth_range.1)?;
    kv.set("scene.bump_count", &mut c.bump_count)?;
    kv.set("scene.smoothness", &mut c.smoothness)?;
    kv.set("scene.tilt", &mut c.tilt)?;
    kv.set("scene.substrate_blobs", &mut c.substrate_blobs)?;
    kv.set("scene.glint_fraction", &mut c.glint_fraction)?;
    kv.set("scene.n_air", &mut c.interface.n_air)?;
    kv.set("scene.n_water", &mut c.interface.n_water)?;
    kv.set("scene.surface_z", &mut c.interface.surface_z)?;
    kv.set("scene.flying_height", &mut c.flying_height)?;
    kv.set("scene.baseline", &mut c.baseline)?;
    kv.set("scene.gap_window", &mut c.gap_window)?;
    kv.set("scene.gap_fraction", &mut c.target_gap_fraction)?;
    kv.set("scene.depth_cutoff", &mut c.depth_cutoff)?;
    kv.set("scene.noise_sigma", &mut c.noise_sigma)?;
    kv.set("scene.seed", &mut c.seed)?;
    Ok(())
}

fn read_svr(kv: &KvFile, c: &mut SvrTrainConfig) -> Result<()> {
    kv.set("svr.c", &mut c.c)?;
    kv.set("svr.epsilon", &mut c.epsilon)?;
    kv.set("svr.max_iter", &mut c.max_iter)?;
    kv.set("svr.tol", &mut c.tol)?;
    if let Some(g) = kv.get_list("svr.c_grid")? {
        c.c_grid = g;
    }
    kv.set("svr.folds", &mut c.folds)?;
    kv.set("svr.tie_tolerance", &mut c.tie_tolerance)?;
    kv.set("svr.seed", &mut c.seed)?;
    Ok(())
}

/// `net.preset` is `desk` (default), `micro` or `full`; the other keys
/// override individual fields of the preset.
pub fn network_config(kv: &KvFile) -> Result<NetworkConfig> {
    let depth: usize = kv.get("net.encoder_depth")?.unwrap_or(3);
    let base: usize = kv.get("net.base_filters")?.unwrap_or(8);
    let preset: String = kv.get("net.preset")?.unwrap_or_else(|| "desk".into());
    let mut c = match preset.as_str() {
        "desk" => NetworkConfig::desk(base, depth),
        "micro" => NetworkConfig::micro(depth),
        "full" => NetworkConfig::full(),
        other => {
            let e = kv.entry("net.preset").expect("preset came from the file");
            return Err(kv.err(e, format!("unknown preset `{other}` (desk, micro, full)")));
        }
    };
    kv.set("net.in_channels", &mut c.in_channels)?;
    kv.set("net.base_filters", &mut c.base_filters)?;
    kv.set("net.encoder_depth", &mut c.encoder_depth)?;
    kv.set("net.center_channels", &mut c.center_channels)?;
    if let Some(v) = kv.get_list("net.embed_dims")? {
        c.swin_embed_dims = v;
    }
    kv.set("net.num_heads", &mut c.num_heads)?;
    kv.set("net.window_size", &mut c.window_size)?;
    kv.set("net.mlp_ratio", &mut c.mlp_ratio)?;
    kv.set("net.swin_depth", &mut c.swin_depth)?;
    kv.set("net.dropout", &mut c.dropout)?;
    kv.set("net.num_swin_blocks", &mut c.num_swin_blocks)?;
    kv.set_bool("net.cross_attention", &mut c.cross_attention)?;
    if let Some(v) = kv.get_list("net.swin_pool")? {
        c.swin_pool = v;
    }
    kv.set_bool("net.concat_raw_skip", &mut c.concat_raw_skip)?;
    kv.set_bool("net.conv_bias", &mut c.conv_bias)?;
    c.validate()?;
    Ok(c)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every field written out, so [`network_config`] reads it back exactly.
pub fn network_config_text(c: &NetworkConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "net.in_channels = {}", c.in_channels);
    let _ = writeln!(s, "net.base_filters = {}", c.base_filters);
    let _ = writeln!(s, "net.encoder_depth = {}", c.encoder_depth);
    let _ = writeln!(s, "net.center_channels = {}", c.center_channels);
    let _ = writeln!(s, "net.embed_dims = {}", join(&c.swin_embed_dims));
    let _ = writeln!(s, "net.num_heads = {}", c.num_heads);
    let _ = writeln!(s, "net.window_size = {}", c.window_size);
    let _ = writeln!(s, "net.mlp_ratio = {}", c.mlp_ratio);
    let _ = writeln!(s, "net.swin_depth = {}", c.swin_depth);
    let _ = writeln!(s, "net.dropout = {}", c.dropout);
    let _ = writeln!(s, "net.num_swin_blocks = {}", c.num_swin_blocks);
    let _ = writeln!(s, "net.cross_attention = {}", c.cross_attention);
    let _ = writeln!(s, "net.swin_pool = {}", join(&c.swin_pool));
    let _ = writeln!(s, "net.concat_raw_skip = {}", c.concat_raw_skip);
    let _ = writeln!(s, "net.conv_bias = {}", c.conv_bias);
    s
}

fn read_train(kv: &KvFile, s: &mut Settings) -> Result<()> {
    let t = &mut s.train;
    kv.set("train.lr", &mut t.lr0)?;
    kv.set("train.epochs", &mut t.epochs)?;
    kv.set("train.batch_size", &mut t.batch_size)?;
    kv.set("train.seed", &mut t.seed)?;
    kv.set_bool("train.hflip", &mut t.augment.hflip)?;
    kv.set_bool("train.vflip", &mut t.augment.vflip)?;
    kv.set_bool("train.rot90", &mut t.augment.rot90)?;
    kv.set_bool("train.shuffle", &mut t.shuffle)?;
    if let Some(e) = kv.entry("train.glint_threshold") {
        t.glint_threshold = match e.value.as_str() {
            "none" | "off" => None,
            v => Some(v.parse().map_err(|_| kv.err(e, format!("glint threshold must be 0..=255 or `none`, got `{v}`")))?),
        };
    }
    let mut norm = NormalizationSpec::default();
    kv.set("train.rgb_divisor", &mut norm.rgb_divisor)?;
    kv.set("train.depth_divisor", &mut norm.depth_divisor)?;
    norm.validate()?;
    t.norm = norm;
    let mut bsw = BswConfig::default();
    kv.set("train.bsw.d_min", &mut bsw.d_min)?;
    kv.set("train.bsw.d_max", &mut bsw.d_max)?;
    kv.set("train.bsw.w_floor", &mut bsw.w_floor)?;
    kv.set("train.bsw.w_ceil", &mut bsw.w_ceil)?;
    if let Some(e) = kv.entry("train.bsw.decay") {
        bsw.decay = match e.value.as_str() {
            "linear" => Decay::Linear,
            "exponential" => Decay::Exponential,
            v => return Err(kv.err(e, format!("decay must be `linear` or `exponential`, got `{v}`"))),
        };
    }
    t.loss = match kv.entry("train.loss").map(|e| (e, e.value.as_str())) {
        None | Some((_, "bsw")) => LossKind::Bsw(bsw),
        Some((_, "rmse")) => LossKind::Rmse,
        Some((e, v)) => return Err(kv.err(e, format!("loss must be `bsw` or `rmse`, got `{v}`"))),
    };
    t.validate()?;
    kv.set("train.init_seed", &mut s.init_seed)?;
    kv.set("train.patch", &mut s.patch)?;
    s.stride = s.patch;
    kv.set("train.stride", &mut s.stride)?;
    s.predict_patch = s.patch;
    kv.set("predict.patch", &mut s.predict_patch)?;
    Ok(())
}

fn read_eval(kv: &KvFile, e: &mut EvalSettings) -> Result<()> {
    if let Some(t) = kv.get_list("eval.thresholds")? {
        e.thresholds = t;
    }
    if let Some(entry) = kv.entry("eval.depth_bins") {
        let bad = |tok: &str| kv.err(entry, format!("depth bin `{tok}` is not `lo-hi` with lo < hi"));
        e.depth_bins = entry
            .value
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                let (lo, hi) = tok.split_once('-').ok_or_else(|| bad(tok))?;
                let (lo, hi): (f64, f64) = (lo.trim().parse().map_err(|_| bad(tok))?, hi.trim().parse().map_err(|_| bad(tok))?);
                if lo < hi {
                    Ok(DepthBin { lo, hi })
                } else {
                    Err(bad(tok))
                }
            })
            .collect::<Result<_>>()?;
    }
    kv.set("eval.hist_bins", &mut e.hist_bins)?;
    kv.set("eval.hist2d_bins", &mut e.hist2d_bins)?;
    if let Some(r) = kv.get_list::<f64>("eval.hist_range")? {
        let entry = kv.entry("eval.hist_range").expect("present");
        match r[..] {
            [lo, hi] if lo < hi => e.hist_range = Some((lo, hi)),
            _ => return Err(kv.err(entry, "hist_range needs `lo, hi` with lo < hi".into())),
        }
    }
    Ok(())
}

/// `band.catzoc.<name> = a, b` lines in file order, tightest first. A
/// standard with no lines keeps its defaults.
pub fn banding_config(kv: &KvFile) -> Result<HydroBandingConfig> {
    let mut cfg = HydroBandingConfig::default();
    for (prefix, slot) in [("band.catzoc.", &mut cfg.catzoc), ("band.s44.", &mut cfg.s44)] {
        let mut bands = Vec::new();
        for e in kv.entries.iter().filter(|e| e.key.starts_with(prefix)) {
            let name = &e.key[prefix.len()..];
            let ab: Vec<f64> = kv.get_list(&e.key)?.unwrap_or_default();
            match ab[..] {
                [a, b] => bands.push(Band::new(name, a, b)),
                _ => return Err(kv.err(e, format!("band `{name}` needs `a, b`"))),
            }
        }
        if !bands.is_empty() {
            *slot = bands;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
