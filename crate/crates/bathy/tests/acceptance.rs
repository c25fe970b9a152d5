//! End-to-end acceptance suite. Prints one line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=5,6` runs a subset.

use std::time::Instant;

use bathy::cli;
use bathy::config::Settings;
use bathy::formats::read_grid;
use bathy_core::loss::{bsw_rmse, edt_squared, masked_rmse, BswConfig, LossKind};
use bathy_core::metrics::{assign_band, catzoc_tolerance, compute_metrics, hydro_banding, threshold_exceedance};
use bathy_core::network::{forward, Bound, ModelParams, NetworkConfig};
use bathy_core::raster::extract_patches;
use bathy_core::refraction::generate_depth_pairs;
use bathy_core::svr::{train_svr, SvrTrainConfig};
use bathy_core::synth::{generate_scene, Scene, SceneConfig};
use bathy_core::tensor::{check_at_precision, check_sampled, ScalarFn};
use bathy_core::train::{masked_rmse_on, predict_raster, train, AugmentFlags, PredictConfig, TrainConfig};
use bathy_core::{DepthRaster, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Weighted sum with fixed uneven weights, so no output entry's gradient
/// cancels by symmetry.
fn probe<T: Real>(g: &mut Graph<T>, y: Var) -> bathy_core::Result<Var> {
    let n: usize = g.shape(y).iter().product();
    let w: Vec<T> = (0..n).map(|i| T::lit(0.3 + ((i * 7) % 11) as f64 / 5.0)).collect();
    let s = g.mul_const(y, w)?;
    Ok(g.sum(s))
}

struct Op(&'static str);

impl Op {
    fn shapes(&self) -> Vec<Vec<usize>> {
        match self.0 {
            "add" | "sub" | "mul" => vec![vec![3, 4], vec![3, 4]],
            "add_row_bias" => vec![vec![2, 3, 4], vec![4]],
            "scale" | "sqrt" | "sum" | "mean" | "relu" | "dropout" => vec![vec![12]],
            "mul_const" => vec![vec![2, 5]],
            "matmul" => vec![vec![4, 3], vec![3, 5]],
            "matmul_batched" => vec![vec![2, 4, 3], vec![2, 3, 5]],
            "matmul_broadcast" => vec![vec![2, 4, 3], vec![3, 5]],
            "linear" => vec![vec![5, 3], vec![3, 4], vec![4]],
            "conv2d" => vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            "conv2d_stride" => vec![vec![2, 6, 7], vec![2, 2, 2, 2], vec![2]],
            "layernorm" => vec![vec![3, 6], vec![6], vec![6]],
            "softmax_rows" | "softmax_cols" => vec![vec![4, 5]],
            "maxpool2d" | "avgpool2d" => vec![vec![2, 4, 6]],
            "bilinear_up" => vec![vec![2, 3, 4]],
            "bilinear_odd" => vec![vec![1, 5, 3]],
            "concat" => vec![vec![2, 3], vec![2, 2]],
            "narrow" => vec![vec![3, 5]],
            "reshape" => vec![vec![2, 6]],
            "permute" | "transpose" => vec![vec![2, 3, 4]],
            "gather" => vec![vec![4, 3]],
            other => panic!("no shapes for {other}"),
        }
    }
}

const OPS: &[&str] = &[
    "add", "sub", "mul", "add_row_bias", "scale", "mul_const", "sqrt", "sum", "mean", "matmul", "matmul_batched",
    "matmul_broadcast", "linear", "conv2d", "conv2d_stride", "relu", "layernorm", "softmax_rows", "softmax_cols",
    "maxpool2d", "avgpool2d", "bilinear_up", "bilinear_odd", "concat", "narrow", "reshape", "permute", "transpose",
    "gather", "dropout",
];

impl ScalarFn for Op {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> bathy_core::Result<Var> {
        let y = match self.0 {
            "add" => g.add(p[0], p[1])?,
            "sub" => g.sub(p[0], p[1])?,
            "mul" => g.mul(p[0], p[1])?,
            "add_row_bias" => g.add_row_bias(p[0], p[1])?,
            "scale" => g.scale(p[0], T::lit(-1.7)),
            "mul_const" => g.mul_const(p[0], (0..10).map(|i| T::lit(i as f64 - 4.5)).collect())?,
            "sqrt" => {
                let sq = g.mul(p[0], p[0])?;
                let one = g.constant(Tensor::full(vec![12], T::one()));
                let pos = g.add(sq, one)?;
                g.sqrt(pos)
            }
            "sum" => return Ok(g.sum(p[0])),
            "mean" => return Ok(g.mean(p[0])),
            "matmul" | "matmul_batched" | "matmul_broadcast" => g.matmul(p[0], p[1])?,
            "linear" => g.linear(p[0], p[1], Some(p[2]))?,
            "conv2d" => g.conv2d(p[0], p[1], Some(p[2]), 1, 1)?,
            "conv2d_stride" => g.conv2d(p[0], p[1], Some(p[2]), 0, 2)?,
            "relu" => g.relu(p[0]),
            "layernorm" => g.layernorm(p[0], p[1], p[2], T::lit(1e-5))?,
            "softmax_rows" => g.softmax(p[0], 1)?,
            "softmax_cols" => g.softmax(p[0], 0)?,
            "maxpool2d" => g.maxpool2d(p[0])?,
            "avgpool2d" => g.avgpool2d(p[0], 2)?,
            "bilinear_up" => g.bilinear_resize(p[0], 6, 8)?,
            "bilinear_odd" => g.bilinear_resize(p[0], 2, 7)?,
            "concat" => g.concat(&[p[0], p[1]], 1)?,
            "narrow" => g.narrow(p[0], 1, 1, 3)?,
            "reshape" => g.reshape(p[0], &[3, 4])?,
            "permute" => g.permute(p[0], &[2, 0, 1])?,
            "transpose" => g.transpose(p[0])?,
            "gather" => g.gather(p[0], vec![3, 0, 0, 2])?,
            "dropout" => {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                g.dropout(p[0], 0.3, Some(&mut r))?
            }
            other => panic!("unknown op {other}"),
        };
        probe(g, y)
    }
}

struct NetLoss {
    cfg: NetworkConfig,
    names: Vec<String>,
    image: Tensor<f64>,
    target: Vec<f64>,
    mask: Vec<bool>,
}

impl ScalarFn for NetLoss {
    fn eval<T: Real>(&self, g: &mut Graph<T>, params: &[Var]) -> bathy_core::Result<Var> {
        let p = Bound::new(&self.names, params.to_vec());
        let x = g.constant(self.image.cast());
        let y = forward(g, &self.cfg, &p, x, None)?;
        bsw_rmse(g, y, &self.target, &self.mask, &BswConfig::default())
    }
}

fn net_loss(cfg: NetworkConfig, h: usize, seed: u64) -> (NetLoss, Vec<Tensor<f64>>) {
    let params = ModelParams::init(&cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = h * h;
    let f = NetLoss {
        names: params.names.clone(),
        image: Tensor::from_fn(vec![3, h, h], |_| r.random_range(0.0..1.0)),
        target: (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
        mask: (0..n).map(|_| r.random_range(0.0..1.0) > 0.3).collect(),
        cfg,
    };
    (f, params.tensors.iter().map(|t| t.cast()).collect())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for name in OPS {
        let op = Op(name);
        let params: Vec<Tensor<f64>> = op.shapes().iter().map(|s| rand_tensor(&mut r, s)).collect();
        let e64 = check_at_precision::<f64>(&op, &params, 1e-5).map_err(|e| format!("{name}: {e}"))?.max_rel_err;
        let e32 = check_at_precision::<f32>(&op, &params, 1e-4).map_err(|e| format!("{name}: {e}"))?.max_rel_err;
        if e64 >= 1e-5 || e32 >= 1e-3 {
            return Err(format!("{name}: 64-bit {e64:.2e}, 32-bit {e32:.2e}"));
        }
        worst64 = worst64.max(e64);
        worst32 = worst32.max(e32);
    }
    // micro network: base 4, window 2, embed 8, one head, 8x8 input
    let cfg = NetworkConfig { dropout: 0.0, ..NetworkConfig::micro(3) };
    let (f, tensors) = net_loss(cfg, 8, 5);
    let n: usize = tensors.iter().map(|t| t.numel()).sum();
    let net64 = check_at_precision::<f64>(&f, &tensors, 1e-5).map_err(|e| e.to_string())?;
    let net32 = check_sampled::<f32>(&f, &tensors, 1e-4, 16, 2).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    if net64.kinked + net32.kinked > 0 {
        return Err(format!("{} network entries sat on a ReLU/max-pool switch", net64.kinked + net32.kinked));
    }
    ensure(
        net64.max_rel_err < 1e-5 && net32.max_rel_err < 1e-3 && secs < 120.0,
        format!(
            "{} ops worst rel-err {worst64:.1e} (64-bit) / {worst32:.1e} (32-bit); micro net all {n} coords {:.1e} (64-bit), {} sampled {:.1e} (32-bit); {secs:.1}s",
            OPS.len(),
            net64.max_rel_err,
            net32.evaluated,
            net32.max_rel_err
        ),
    )
}

fn brute_edt(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            (0..w * h)
                .filter(|j| !mask[*j])
                .map(|j| {
                    let (dx, dy) = ((j % w) as i64 - x, (j / w) as i64 - y);
                    (dx * dx + dy * dy) as f64
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let (w, h) = (r.random_range(1..=16), r.random_range(1..=16));
        let density = r.random_range(0.02..0.98);
        let mask: Vec<bool> = (0..w * h).map(|_| r.random_range(0.0..1.0) < density).collect();
        let got = edt_squared(&mask, w, h).map_err(|e| e.to_string())?;
        let want = brute_edt(&mask, w, h);
        if got != want {
            return Err(format!("mask {case} ({w}x{h}) differs from brute force"));
        }
    }
    Ok("200 random masks up to 16x16 match the brute-force oracle exactly".into())
}

fn rmse(a: &DepthRaster, b: &DepthRaster) -> f64 {
    compute_metrics("x", a, b, None, &[]).unwrap().stats.unwrap().rmse
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let scene_cfg = SceneConfig::default();
    let scene = generate_scene(&scene_cfg).map_err(|e| e.to_string())?;
    let mut pc = scene_cfg.pair_config(20);
    let clean = generate_depth_pairs(&pc, scene_cfg.cameras(), &scene_cfg.interface).map_err(|e| e.to_string())?;
    pc.noise_sigma = 0.05;
    let noisy = generate_depth_pairs(&pc, scene_cfg.cameras(), &scene_cfg.interface).map_err(|e| e.to_string())?;
    let (ls_slope, _, _) = clean.least_squares().map_err(|e| e.to_string())?;
    let model = train_svr(&noisy, &SvrTrainConfig::default()).map_err(|e| e.to_string())?;
    let slope_err = (model.w - ls_slope).abs() / ls_slope.abs();
    let before = rmse(&scene.sfm, &scene.truth);
    let after = rmse(&model.correct_raster(&scene.sfm), &scene.truth);
    let reduction = 1.0 - after / before;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        slope_err < 0.01 && reduction >= 0.70 && secs < 60.0,
        format!(
            "slope {:.4} vs noiseless LS {ls_slope:.4} ({:.2}%); raster RMSE {before:.3} -> {after:.3} m ({:.1}% reduction); {secs:.2}s",
            model.w,
            100.0 * slope_err,
            100.0 * reduction
        ),
    )
}

struct BswLoss {
    target: Vec<f64>,
    mask: Vec<bool>,
    cfg: BswConfig,
}

impl ScalarFn for BswLoss {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> bathy_core::Result<Var> {
        let shaped = g.reshape(p[0], &[1, 6, 7])?;
        bsw_rmse(g, shaped, &self.target, &self.mask, &self.cfg)
    }
}

fn criterion_4() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_uniform, mut worst_unit) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (w, h) = (r.random_range(2..12), r.random_range(2..12));
        let n = w * h;
        let mask: Vec<bool> = (0..n).map(|_| r.random_range(0.0..1.0) < 0.7).collect();
        if !mask.iter().any(|m| *m) {
            continue;
        }
        let target: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let pred = Tensor::from_fn(vec![1, h, w], |_| r.random_range(0.0..1.0));
        let weight = r.random_range(0.5..4.0);
        let eval = |cfg: &BswConfig| -> (f64, f64) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(pred.clone());
            let b = bsw_rmse(&mut g, x, &target, &mask, cfg).unwrap();
            let m = masked_rmse(&mut g, x, &target, &mask).unwrap();
            (g.value(b).item().unwrap(), g.value(m).item().unwrap())
        };
        let (b, m) = eval(&BswConfig { w_floor: weight, w_ceil: weight, ..Default::default() });
        worst_uniform = worst_uniform.max((b - weight.sqrt() * m).abs());
        let (b1, m1) = eval(&BswConfig { w_floor: 1.0, w_ceil: 1.0, ..Default::default() });
        worst_unit = worst_unit.max((b1 - m1).abs());
    }
    let mask: Vec<bool> = (0..42).map(|i| i % 4 != 1 && i != 20).collect();
    let target: Vec<f64> = (0..42).map(|_| r.random_range(0.0..1.0)).collect();
    let f = BswLoss { target, mask, cfg: BswConfig { d_max: 3.0, ..Default::default() } };
    let params = vec![rand_tensor(&mut r, &[42])];
    let g64 = check_at_precision::<f64>(&f, &params, 1e-5).map_err(|e| e.to_string())?.max_rel_err;
    let g32 = check_at_precision::<f32>(&f, &params, 1e-4).map_err(|e| e.to_string())?.max_rel_err;
    ensure(
        worst_uniform < 1e-6 && worst_unit == 0.0 && g64 < 1e-5 && g32 < 1e-3,
        format!("uniform-w deviation {worst_uniform:.1e}; unit weights exact ({worst_unit:e}); gradient {g64:.1e} (64-bit) / {g32:.1e} (32-bit)"),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let scene = generate_scene(&SceneConfig::default()).map_err(|e| e.to_string())?;
    let patches = extract_patches(&scene.image, &scene.sfm, 32, 32).map_err(|e| e.to_string())?;
    let net = NetworkConfig { dropout: 0.0, ..NetworkConfig::micro(3) };
    let cfg = TrainConfig {
        lr0: 1e-3,
        epochs: 300,
        batch_size: 1,
        seed: 1,
        augment: AugmentFlags::NONE,
        shuffle: false,
        ..TrainConfig::default()
    };
    let out = train(&patches, &net, &cfg).map_err(|e| e.to_string())?;
    let per_patch = masked_rmse_on(&out.params, &patches, &cfg).map_err(|e| e.to_string())?;
    let worst = per_patch.iter().cloned().fold(0.0, f64::max);
    let first: Vec<f64> = out.trace.iter().take(10).map(|e| e.loss).collect();
    let decreasing = first.windows(2).all(|w| w[1] < w[0]);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        patches.len() == 4 && worst < 0.05 && decreasing && secs < 600.0,
        format!(
            "{} patches, worst masked RMSE {worst:.4} normalized after {} epochs; first 10 epoch losses strictly decreasing: {decreasing}; {secs:.1}s",
            patches.len(),
            out.trace.len()
        ),
    )
}

/// Standard benchmark: a default synthetic scene with the survey depths
/// refraction-corrected by an SVR fitted on noisy pairs.
struct Benchmark {
    scene: Scene,
    corrected: DepthRaster,
}

fn benchmark(seed: u64) -> Result<Benchmark, String> {
    let cfg = SceneConfig { seed, ..SceneConfig::default() };
    let scene = generate_scene(&cfg).map_err(|e| e.to_string())?;
    let mut pc = cfg.pair_config(20);
    pc.noise_sigma = 0.05;
    let pairs = generate_depth_pairs(&pc, cfg.cameras(), &cfg.interface).map_err(|e| e.to_string())?;
    let model = train_svr(&pairs, &SvrTrainConfig::default()).map_err(|e| e.to_string())?;
    let corrected = model.correct_raster(&scene.sfm);
    Ok(Benchmark { scene, corrected })
}

fn bench_net() -> NetworkConfig {
    NetworkConfig { base_filters: 8, swin_embed_dims: vec![16; 3], dropout: 0.0, ..NetworkConfig::micro(3) }
}

/// Trains on the corrected survey alone (gap depths are never seen) and
/// returns the whole prediction.
fn fit_and_predict(b: &Benchmark, loss: LossKind, seed: u64) -> Result<DepthRaster, String> {
    let patches = extract_patches(&b.scene.image, &b.corrected, 32, 16).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { lr0: 2e-3, epochs: 150, seed, loss, ..TrainConfig::default() };
    let out = train(&patches, &bench_net(), &cfg).map_err(|e| e.to_string())?;
    let pc = PredictConfig { patch: 32, norm: cfg.norm, glint_threshold: cfg.glint_threshold };
    predict_raster(&out.params, &b.scene.image, &pc).map_err(|e| e.to_string())
}

fn region_rmse(pred: &DepthRaster, truth: &DepthRaster, region: &[bool]) -> f64 {
    compute_metrics("x", pred, truth, Some(region), &[]).unwrap().stats.unwrap().rmse
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let b = benchmark(7)?;
    let valid = b.corrected.mask();
    let gaps: Vec<bool> = valid.iter().map(|v| !v).collect();
    let whole = fit_and_predict(&b, LossKind::Bsw(BswConfig::default()), 1)?;
    let truth = &b.scene.truth;
    let (gap, non_gap) = (region_rmse(&whole, truth, &gaps), region_rmse(&whole, truth, &valid));
    let ratio = gap / non_gap;
    let ex = |r: &DepthRaster, region: Option<&[bool]>| threshold_exceedance(r, truth, region, &[0.5]).unwrap().unwrap()[0];
    let corrected_ex = ex(&b.corrected, None);
    let pred_ex_valid = ex(&whole, Some(&valid));
    let pred_ex_all = ex(&whole, None);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        ratio <= 2.0 && pred_ex_valid < corrected_ex,
        format!(
            "held-out scene, {:.0}% gaps: gap RMSE {gap:.3} / non-gap {non_gap:.3} = {ratio:.2}; >0.5 m exceedance on survey pixels {corrected_ex:.1}% -> {pred_ex_valid:.1}% ({pred_ex_all:.1}% over the whole scene); {secs:.1}s",
            100.0 * b.scene.gap_fraction
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let b = benchmark(1)?;
    let gaps: Vec<bool> = b.corrected.mask().iter().map(|v| !v).collect();
    let (mut bsw, mut plain) = (Vec::new(), Vec::new());
    for seed in 1..=5 {
        let p = fit_and_predict(&b, LossKind::Bsw(BswConfig::default()), seed)?;
        bsw.push(region_rmse(&p, &b.scene.truth, &gaps));
        let p = fit_and_predict(&b, LossKind::Rmse, seed)?;
        plain.push(region_rmse(&p, &b.scene.truth, &gaps));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, mr) = (mean(&bsw), mean(&plain));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let secs = start.elapsed().as_secs_f64();
    ensure(
        mb <= 1.02 * mr,
        format!(
            "gap RMSE over seeds 1-5: BSW [{}] mean {mb:.4}, RMSE loss [{}] mean {mr:.4} ({:+.1}%); {secs:.1}s",
            fmt(&bsw),
            fmt(&plain),
            100.0 * (mb / mr - 1.0)
        ),
    )
}

fn demo_run(root: &std::path::Path, name: &str) -> Result<std::path::PathBuf, String> {
    let cfg = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let (demo, bands) = (cfg.join("demo.cfg").display().to_string(), cfg.join("hydro_bands.cfg").display().to_string());
    let o = root.join(name);
    let f = |n: &str| o.join(n).display().to_string();
    let od = o.display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--config".into(), demo.clone(), "--out".into(), od.clone()],
        vec!["svr-train".into(), "--config".into(), demo.clone(), "--pairs".into(), f("pairs.csv"), "--out".into(), f("svr.txt")],
        vec!["correct".into(), "--svr".into(), f("svr.txt"), "--dsm".into(), f("sfm.grid"), "--out".into(), f("corrected.grid")],
        vec!["train".into(), "--config".into(), demo.clone(), "--image".into(), f("image.ppm"), "--dsm".into(), f("corrected.grid"), "--out".into(), od.clone()],
        vec!["predict".into(), "--config".into(), demo.clone(), "--model".into(), f("model.sbun"), "--image".into(), f("image.ppm"), "--out".into(), f("whole.grid")],
        vec!["combine".into(), "--dsm".into(), f("corrected.grid"), "--pred".into(), f("whole.grid"), "--out".into(), f("combined.grid")],
        vec![
            "eval".into(), "--config".into(), demo.clone(), "--ref".into(), f("truth.grid"), "--sfm".into(), f("sfm.grid"),
            "--corrected".into(), f("corrected.grid"), "--whole".into(), f("whole.grid"), "--combined".into(), f("combined.grid"),
            "--out".into(), od.clone(),
        ],
        vec![
            "report".into(), "--config".into(), bands, "--ref".into(), f("truth.grid"), "--pred".into(), f("combined.grid"),
            "--sfm".into(), f("sfm.grid"), "--corrected".into(), f("corrected.grid"), "--out".into(), od,
        ],
    ];
    for s in steps {
        let mut args = vec!["bathy".to_string()];
        args.extend(s.iter().cloned());
        let cli = <cli::Cli as clap::Parser>::try_parse_from(&args).map_err(|e| e.to_string())?;
        cli::execute(cli, &mut std::io::sink()).map_err(|e| format!("{}: {e}", s[0]))?;
    }
    Ok(o)
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = demo_run(dir.path(), "a")?;
    let b = demo_run(dir.path(), "b")?;
    let mut files: Vec<String> = std::fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        if x != y {
            return Err(format!("{f} differs between reruns"));
        }
    }
    let load = |n: &str| read_grid(&a.join(n)).map_err(|e| e.to_string());
    let (truth, corrected, combined) = (load("truth.grid")?, load("corrected.grid")?, load("combined.grid")?);
    let valid = corrected.mask();
    let c = compute_metrics("c", &combined, &truth, Some(&valid), &[1.0, 0.5]).unwrap();
    let s = compute_metrics("s", &corrected, &truth, None, &[1.0, 0.5]).unwrap();
    let same = c.stats == s.stats && c.exceedance == s.exceedance && c.count == s.count;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        same,
        format!(
            "{} outputs bit-identical across reruns; combined on survey pixels == corrected SfM (RMSE {:.4} m, n = {}): {same}; {secs:.1}s",
            files.len(),
            s.stats.map_or(f64::NAN, |x| x.rmse),
            s.count
        ),
    )
}

fn criterion_9() -> Outcome {
    let cfg = Settings::load(Some(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/hydro_bands.cfg")))
        .map_err(|e| e.to_string())?
        .banding;
    let bands = &cfg.catzoc;
    let a1 = assign_band(bands, catzoc_tolerance, 0.4, -10.0);
    let big = assign_band(bands, catzoc_tolerance, 1.5, -10.0);
    let edge = assign_band(bands, catzoc_tolerance, 0.6, -10.0);
    let zero = assign_band(bands, catzoc_tolerance, 0.0, -10.0);
    let fixtures_ok = bands[a1].name == "A1" && big > 1 && edge == 0 && zero == 0;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..400);
        let truth: Vec<f64> = (0..n).map(|_| -r.random_range(0.0..25.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|d| (d + r.random_range(-4.0..4.0)).min(0.0)).collect();
        let t = DepthRaster::new(n, 1, 1.0, truth, -9999.0).unwrap();
        let p = DepthRaster::new(n, 1, 1.0, pred, -9999.0).unwrap();
        let rep = hydro_banding(&p, &t, None, &cfg).map_err(|e| e.to_string())?;
        for s in [&rep.catzoc, &rep.s44] {
            worst = worst.max((s.shares.iter().map(|x| x.1).sum::<f64>() - 100.0).abs());
        }
    }
    ensure(
        fixtures_ok && worst <= 1e-9,
        format!(
            "0.4 m @ 10 m -> {}; 1.5 m @ 10 m -> {} (beyond A2/B); 0.6 m @ 10 m -> {} (boundary inside); shares sum to 100 within {worst:.1e}",
            bands[a1].name,
            bands.get(big).map_or("outside", |b| b.name.as_str()),
            bands[edge].name
        ),
    )
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let scene = generate_scene(&SceneConfig::default()).map_err(|e| e.to_string())?;
    let patches = extract_patches(&scene.image, &scene.sfm, 32, 32).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let (mut built, mut kinked, mut checked) = (0, 0, 0);
    for blocks in 1..=3 {
        for ca in [true, false] {
            for window in [2, 4] {
                let name = format!("{blocks} blocks, CA {ca}, window {window}");
                let cfg = NetworkConfig { num_swin_blocks: blocks, cross_attention: ca, window_size: window, ..NetworkConfig::micro(4) };
                let tc = TrainConfig { epochs: 1, seed: 3, ..TrainConfig::default() };
                let out = train(&patches[..2], &cfg, &tc).map_err(|e| format!("{name}: {e}"))?;
                if out.trace.len() != 1 || !out.trace[0].loss.is_finite() {
                    return Err(format!("{name}: one-epoch trace {:?}", out.trace));
                }
                let image: Tensor<f32> = patches[0].image.to_tensor(&tc.norm);
                let y = bathy_core::network::predict(&out.params, &image).map_err(|e| format!("{name}: {e}"))?;
                if y.shape() != [1, 32, 32] {
                    return Err(format!("{name}: output shape {:?}", y.shape()));
                }
                // at 32x32 the loss carries ~1e-14 of round-off, so a 1e-5 step is
                // noise-dominated; 1e-4 keeps truncation and round-off both small
                let (f, tensors) = net_loss(NetworkConfig { dropout: 0.0, ..cfg }, 32, 10 + blocks as u64);
                let g = check_sampled::<f64>(&f, &tensors, 1e-4, 3, 4).map_err(|e| format!("{name}: {e}"))?;
                if g.max_rel_err >= 1e-5 {
                    return Err(format!("{name}: gradient rel-err {:.2e}", g.max_rel_err));
                }
                worst = worst.max(g.max_rel_err);
                kinked += g.kinked;
                checked += g.evaluated;
                built += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(format!(
        "{built} configurations built, trained one epoch, output 1x32x32; {checked} sampled gradient entries rel-err <= {worst:.1e} ({kinked} on a ReLU/max-pool switch); {secs:.1}s"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient integrity", criterion_1),
        ("EDT exactness", criterion_2),
        ("SVR recovery", criterion_3),
        ("BSW loss algebra", criterion_4),
        ("overfit capability", criterion_5),
        ("gap-fill generalization", criterion_6),
        ("BSW vs plain RMSE", criterion_7),
        ("pipeline determinism", criterion_8),
        ("hydro banding", criterion_9),
        ("ablation structure", criterion_10),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
