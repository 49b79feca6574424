//! Checks shared by the per-topic integration tests and the acceptance run.
//! Each returns an [`Outcome`] so the acceptance target can print one line
//! per criterion while the topic tests assert on the details.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovseg_core::autodiff::{Graph, Var};
use ovseg_core::data::folds::{make_fold, pascal_universe};
use ovseg_core::data::metrics::{miou, LabelMap};
use ovseg_core::data::sample::{Dataset, SegmentationSample};
use ovseg_core::encoders::{FrozenEncoder, ImageRef};
use ovseg_core::fusion::{FusionConfig, FusionModule};
use ovseg_core::posenc::{apply_positional, fourier_embed, fourier_field, FieldCache, FourierConfig, PatchGrid};
use ovseg_core::seghead::{predict_masks, similarity_logits, similarity_logits_of, Decoder, DecoderConfig};
use ovseg_core::train::run::audit_training_stream;
use ovseg_core::train::{
    build_encoder, fold_datasets, run_ablation, train, AblationTable, AblationVariant, ExperimentConfig, FeatureCache, Model,
};
use ovseg_core::{Error, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn map(mut t: Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    for x in t.data_mut() {
        *x = f(*x);
    }
    t
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients
/// from turning round-off into huge ratios.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

// ---------------------------------------------------------------------------
// Criterion 1: finite differences

/// Largest relative error of one gradient check and where it happened.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel: f64,
    pub worst: String,
    pub coords: usize,
}

impl GradCheck {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), max_rel: 0.0, worst: String::new(), coords: 0 }
    }

    fn record(&mut self, at: String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.coords += 1;
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            self.worst = format!("{at}: analytic {analytic:.6e}, numeric {numeric:.6e}");
        }
    }
}

/// `sum(out * r)` for a fixed random `r`, so every output element carries
/// a distinct weight into the scalar loss.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    if g.value(out).len() == 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random_tensor(&mut rng, g.shape(out), 1.0);
    let r = g.constant(r);
    let prod = g.mul(out, r).unwrap();
    g.sum(prod).unwrap()
}

type OpFn = dyn Fn(&mut Graph, &[Var]) -> ovseg_core::Result<Var>;

/// Checks every input element of one graph operation.
pub fn check_op(name: &str, inputs: &[Tensor], seed: u64, f: &OpFn) -> GradCheck {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs).unwrap();
        let loss = project(&mut g, out, seed);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_grad())).collect();
    let out = f(&mut g, &vs).unwrap();
    let loss = project(&mut g, out, seed);
    let grads = g.backward(loss).unwrap();
    let mut check = GradCheck::new(name);
    for (i, v) in vs.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf tracks gradients").to_vec();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            check.record(format!("input {i}[{j}]"), analytic[j], numeric);
        }
    }
    check
}

/// Checks named parameters of a model-like value. `run` returns the loss
/// and, when asked, per-name gradients; `access` exposes a parameter for
/// perturbation. At most `per_param` coordinates per tensor are probed.
pub fn check_params<M: Clone>(
    name: &str,
    model: &M,
    names: &[String],
    access: for<'a> fn(&'a mut M, &str) -> &'a mut Tensor,
    run: &dyn Fn(&M, bool) -> (f64, HashMap<String, Vec<f64>>),
    per_param: usize,
    seed: u64,
) -> GradCheck {
    let (_, grads) = run(model, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = GradCheck::new(name);
    let mut m = model.clone();
    for pname in names {
        let analytic = grads.get(pname).unwrap_or_else(|| panic!("no gradient for {pname}"));
        let n = access(&mut m, pname).len();
        let coords: Vec<usize> = if n <= per_param { (0..n).collect() } else { (0..per_param).map(|_| rng.gen_range(0..n)).collect() };
        for j in coords {
            let orig = access(&mut m, pname).data()[j];
            access(&mut m, pname).data_mut()[j] = orig + FD_STEP;
            let lp = run(&m, false).0;
            access(&mut m, pname).data_mut()[j] = orig - FD_STEP;
            let lm = run(&m, false).0;
            access(&mut m, pname).data_mut()[j] = orig;
            check.record(format!("{pname}[{j}]"), analytic[j], (lp - lm) / (2.0 * FD_STEP));
        }
    }
    check
}

fn param_grads(g: &mut Graph, loss: Var) -> HashMap<String, Vec<f64>> {
    let grads = g.backward(loss).unwrap();
    grads.params().map(|(n, v)| (n.to_string(), v.to_vec())).collect()
}

fn fusion_access<'a>(m: &'a mut FusionModule, name: &str) -> &'a mut Tensor {
    m.params.get_mut(name).unwrap()
}

fn decoder_access<'a>(m: &'a mut Decoder, name: &str) -> &'a mut Tensor {
    m.params.get_mut(name).unwrap()
}

fn model_access<'a>(m: &'a mut Model, name: &str) -> &'a mut Tensor {
    m.param_mut(name).unwrap()
}

/// theta MLPs alone (fusion layers bypassed), random widths.
pub fn grad_theta(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dv, dt) = (rng.gen_range(3..8), rng.gen_range(3..8));
    let cfg = FusionConfig { d_fuse: 2 * rng.gen_range(2..5), num_layers: 1, num_heads: 2, mlp_ratio: 2, out_gain: 1.0, seed };
    let module = FusionModule::new(cfg, dv, dt).unwrap();
    let n_vis = rng.gen_range(2..6);
    let vis = random_tensor(&mut rng, &[n_vis, dv], 1.0);
    let n_txt = rng.gen_range(1..4);
    let txt = random_tensor(&mut rng, &[n_txt, dt], 1.0);
    let names: Vec<String> = module.params.names().filter(|n| n.starts_with("theta")).map(str::to_string).collect();
    let run = |m: &FusionModule, back: bool| {
        let mut g = Graph::new();
        let v = g.constant(vis.clone());
        let t = g.constant(txt.clone());
        let out = m.forward(&mut g, v, t, false).unwrap();
        let both = g.concat_rows(&[out.visual, out.text]).unwrap();
        let loss = project(&mut g, both, seed);
        let value = g.value(loss).data()[0];
        (value, if back { param_grads(&mut g, loss) } else { HashMap::new() })
    };
    check_params("theta MLPs", &module, &names, fusion_access, &run, 24, seed)
}

/// Full fusion stack; every parameter including the transformer layers.
pub fn grad_fusion(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dv, dt) = (rng.gen_range(3..7), rng.gen_range(3..7));
    let heads = rng.gen_range(1..3);
    let cfg = FusionConfig { d_fuse: 2 * heads * rng.gen_range(1..3), num_layers: rng.gen_range(1..3), num_heads: heads, mlp_ratio: 2, out_gain: 1.0, seed };
    let module = FusionModule::new(cfg, dv, dt).unwrap();
    let n_vis = rng.gen_range(2..5);
    let vis = random_tensor(&mut rng, &[n_vis, dv], 1.0);
    let n_txt = rng.gen_range(1..4);
    let txt = random_tensor(&mut rng, &[n_txt, dt], 1.0);
    let names: Vec<String> = module.params.names().map(str::to_string).collect();
    let run = |m: &FusionModule, back: bool| {
        let mut g = Graph::new();
        let v = g.constant(vis.clone());
        let t = g.constant(txt.clone());
        let out = m.forward(&mut g, v, t, true).unwrap();
        let both = g.concat_rows(&[out.visual, out.text]).unwrap();
        let loss = project(&mut g, both, seed);
        let value = g.value(loss).data()[0];
        (value, if back { param_grads(&mut g, loss) } else { HashMap::new() })
    };
    check_params("fusion layers", &module, &names, fusion_access, &run, 12, seed)
}

/// Decoder convolutions and head under the cosine-logit BCE loss.
pub fn grad_decoder(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = if rng.gen_bool(0.5) { 2 } else { 4 };
    let grid = PatchGrid { h: rng.gen_range(1..3), w: rng.gen_range(1..3), p };
    let d = 4 * rng.gen_range(1..3);
    let mut cfg = DecoderConfig::for_patch(p, d).unwrap();
    cfg.channels = (0..cfg.stages).map(|s| (d >> s).max(2)).collect();
    let decoder = Decoder::new(cfg.clone(), d, seed).unwrap();
    let tokens = random_tensor(&mut rng, &[grid.tokens(), d], 1.0);
    let c = rng.gen_range(1..4);
    let text = random_tensor(&mut rng, &[c, d], 1.0);
    let target: Vec<f64> = (0..c * grid.image_height() * grid.image_width()).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let names: Vec<String> = decoder.params.names().map(str::to_string).collect();
    let run = |m: &Decoder, back: bool| {
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let feat = m.decode(&mut g, t, &grid).unwrap();
        let txt = g.constant(text.clone());
        let logits = similarity_logits(&mut g, feat, txt).unwrap();
        let loss = g.bce_with_logits(logits, &target, 1.0 / cfg.tau).unwrap();
        let value = g.value(loss).data()[0];
        (value, if back { param_grads(&mut g, loss) } else { HashMap::new() })
    };
    check_params("decoder convolutions", &decoder, &names, decoder_access, &run, 16, seed)
}

/// A tiny end-to-end config: 8x8 images, 4-pixel patches, width 8.
pub fn tiny_config(seed: u64, variant: AblationVariant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "height=8\nwidth=8\npatch=4\nencoder.d_visual=8\nencoder.d_text=8\nencoder.layers=1\nencoder.heads=2\n\
         fourier.num_bands=2\nfusion.d_fuse=8\nfusion.num_layers=1\nfusion.num_heads=2\nfusion.mlp_ratio=2\nfusion.out_gain=1\n\
         decoder.channels=4,4\ntrain.pos_table_std=0.5\n",
    )
    .unwrap();
    cfg.seed = seed;
    cfg.variant = variant;
    cfg
}

/// Learned position table through the frozen encoder layers, plus every
/// other trainable parameter of the baseline variant.
pub fn grad_learned_positions(seed: u64) -> GradCheck {
    let cfg = tiny_config(seed, AblationVariant::BL0);
    let enc = build_encoder(&cfg).unwrap();
    let model = Model::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = map(random_tensor(&mut rng, &[8, 8, 3], 1.0), |x| 0.5 + 0.5 * x);
    let cats: Vec<String> = vec!["red solid".into(), "blue checkered".into()];
    let target: Vec<f64> = (0..2 * 64).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let cache = FeatureCache::default();
    let names: Vec<String> = model.trainable_names().into_iter().collect();
    let tau = cfg.decoder.tau;
    let run = |m: &Model, back: bool| {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &enc, &cache, ImageRef { id: "x", pixels: &image }, &cats).unwrap();
        let loss = g.bce_with_logits(out.logits, &target, 1.0 / tau).unwrap();
        let value = g.value(loss).data()[0];
        (value, if back { param_grads(&mut g, loss) } else { HashMap::new() })
    };
    let mut check = check_params("learned-position baseline", &model, &names, model_access, &run, 6, seed);
    // The table itself gets every coordinate.
    let full = check_params("pos_table", &model, &["pos_table".to_string()], model_access, &run, usize::MAX, seed);
    if full.max_rel > check.max_rel {
        check.max_rel = full.max_rel;
        check.worst = full.worst;
    }
    check.coords += full.coords;
    check
}

/// One check per differentiable graph operation.
pub fn grad_ops(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    // ReLU inputs kept away from the kink.
    let away = map(r(&[3, 4]), |x| if x.abs() < 0.1 { x.signum() * 0.1 + x } else { x });
    let positive = map(r(&[2, 5]), |x| x.abs() + 0.5);
    let target: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let cases: Vec<(&str, Vec<Tensor>, Box<OpFn>)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_bt", vec![r(&[3, 4]), r(&[2, 4])], Box::new(|g, v| g.matmul_bt(v[0], v[1]))),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![r(&[3, 4])], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("relu", vec![away], Box::new(|g, v| g.relu(v[0]))),
        ("gelu", vec![map(r(&[3, 4]), |x| 3.0 * x)], Box::new(|g, v| g.gelu(v[0]))),
        ("add_row_vec", vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| g.add_row_vec(v[0], v[1]))),
        ("softmax axis 0", vec![r(&[3, 4])], Box::new(|g, v| g.softmax(v[0], 0))),
        ("softmax axis 1", vec![r(&[3, 4])], Box::new(|g, v| g.softmax(v[0], 1))),
        ("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("l2_normalize", vec![positive], Box::new(|g, v| g.l2_normalize(v[0], 1))),
        ("sum", vec![r(&[3, 4])], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![r(&[3, 4])], Box::new(|g, v| g.mean(v[0]))),
        ("reshape", vec![r(&[3, 4])], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        ("concat_rows", vec![r(&[2, 3]), r(&[1, 3])], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("slice_rows", vec![r(&[4, 3])], Box::new(|g, v| g.slice_rows(v[0], 1, 3))),
        ("slice_cols", vec![r(&[3, 5])], Box::new(|g, v| g.slice_cols(v[0], 1, 4))),
        ("conv3x3", vec![r(&[3, 4, 2]), r(&[3, 3, 2, 3]), r(&[3])], Box::new(|g, v| g.conv3x3(v[0], v[1], v[2]))),
        ("upsample2x", vec![r(&[2, 3, 2])], Box::new(|g, v| g.upsample2x(v[0]))),
        ("bce_with_logits", vec![r(&[2, 3])], Box::new(move |g, v| g.bce_with_logits(v[0], &target, 2.5))),
    ];
    cases.into_iter().map(|(name, inputs, f)| check_op(name, &inputs, seed, f.as_ref())).collect()
}

/// All component and op checks; five random instances per component.
pub fn all_grad_checks() -> Vec<GradCheck> {
    let mut out = grad_ops(11);
    for seed in 0..5 {
        out.push(grad_theta(100 + seed));
        out.push(grad_fusion(200 + seed));
        out.push(grad_decoder(300 + seed));
        out.push(grad_learned_positions(400 + seed));
    }
    out
}

pub fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let checks = all_grad_checks();
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).unwrap();
    let coords: usize = checks.iter().map(|c| c.coords).sum();
    let pass = worst.max_rel <= FD_TOL && checks.len() >= 20 && secs < 120.0;
    Outcome::new(
        pass,
        format!(
            "{} instances, {coords} coordinates, max rel err {:.2e} ({}: {}), {secs:.1}s",
            checks.len(),
            worst.max_rel,
            worst.name,
            worst.worst
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 2: mIoU oracle

/// Independent oracle: full confusion matrix over labels `0..=classes`,
/// IoU per scored class from its row and column sums, 1.0 when absent.
pub fn oracle_miou(pred: &[u32], truth: &[u32], classes: u32) -> (f64, Vec<u32>) {
    let k = classes as usize + 1;
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t as usize][p as usize] += 1;
    }
    let mut total = 0.0;
    let mut absent = Vec::new();
    for c in 1..k {
        let tp = m[c][c];
        let row: u64 = m[c].iter().sum();
        let col: u64 = m.iter().map(|r| r[c]).sum();
        let union = row + col - tp;
        if union == 0 {
            absent.push(c as u32);
            total += 1.0;
        } else {
            total += tp as f64 / union as f64;
        }
    }
    (total / classes as f64, absent)
}

/// 8x8 label-map pair over background plus classes 1..=3; some cases
/// drop classes from both maps so absent classes occur.
pub fn random_pair(rng: &mut impl Rng) -> (Vec<u32>, Vec<u32>) {
    let alphabet: Vec<u32> = match rng.gen_range(0..6) {
        0 => vec![0, 1],
        1 => vec![0],
        2 => vec![0, 2, 3],
        _ => vec![0, 1, 2, 3],
    };
    let mut draw = || -> Vec<u32> { (0..64).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect() };
    (draw(), draw())
}

pub fn criterion_miou() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let names = [(1, "a"), (2, "b"), (3, "c")];
    let (mut worst, mut absent_cases, mut flag_mismatch) = (0.0f64, 0, 0);
    for _ in 0..1000 {
        let (p, t) = random_pair(&mut rng);
        let report = miou(&[LabelMap::new(8, 8, p.clone()).unwrap()], &[LabelMap::new(8, 8, t.clone()).unwrap()], &names).unwrap();
        let (expected, absent) = oracle_miou(&p, &t, 3);
        worst = worst.max((report.miou - expected).abs());
        let flagged: Vec<u32> = report.absent_classes.iter().map(|n| names.iter().find(|(_, m)| m == n).unwrap().0).collect();
        if flagged != absent {
            flag_mismatch += 1;
        }
        if !absent.is_empty() {
            absent_cases += 1;
        }
    }
    Outcome::new(
        worst <= 1e-12 && absent_cases > 0 && flag_mismatch == 0,
        format!("1000 cases, max |diff| {worst:.1e}, {absent_cases} with absent classes, {flag_mismatch} flag mismatches"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 3: Fourier field

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn fourier_determinism(cfg: &FourierConfig) -> bool {
    (1..=16).all(|h| {
        (1..=16).all(|w| {
            let g = PatchGrid { h, w, p: 8 };
            let a = fourier_field(&g, cfg).unwrap();
            let b = fourier_field(&g, cfg).unwrap();
            let c = FieldCache::default().get(&g, cfg).unwrap();
            a.data().iter().zip(b.data()).zip(c.data()).all(|((x, y), z)| x.to_bits() == y.to_bits() && x.to_bits() == z.to_bits())
        })
    })
}

/// Largest `|(x + f) - x - f|` over random patch embeddings.
pub fn fourier_additivity(cfg: &FourierConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for (h, w) in [(4, 4), (3, 7), (16, 16)] {
        let grid = PatchGrid { h, w, p: 8 };
        let x = random_tensor(&mut rng, &[grid.tokens(), cfg.d], 2.0);
        let y = apply_positional(&x, &grid, cfg).unwrap();
        let field = fourier_field(&grid, cfg).unwrap();
        for ((yo, xi), f) in y.data().iter().zip(x.data()).zip(field.data()) {
            worst = worst.max((yo - xi - f).abs());
        }
    }
    worst
}

/// Smallest Euclidean distance between two cells of any grid up to 16x16.
pub fn fourier_min_separation(cfg: &FourierConfig) -> f64 {
    let mut min = f64::INFINITY;
    for h in 1..=16 {
        for w in 1..=16 {
            let grid = PatchGrid { h, w, p: 8 };
            let f = fourier_field(&grid, cfg).unwrap();
            for a in 0..grid.tokens() {
                for b in a + 1..grid.tokens() {
                    let d: f64 = f.row(a).iter().zip(f.row(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    min = min.min(d);
                }
            }
        }
    }
    min
}

/// Grids where some adjacent pair is no more similar than some far pair.
/// "Far" means at least half the longer side apart in both-axis max norm.
pub fn fourier_smoothness_failures(cfg: &FourierConfig) -> Vec<(usize, usize)> {
    let mut failures = Vec::new();
    for h in 4..=16 {
        for w in 4..=16 {
            let grid = PatchGrid { h, w, p: 8 };
            let f = fourier_field(&grid, cfg).unwrap();
            let far = h.max(w).div_ceil(2);
            let (mut min_adj, mut max_far) = (f64::INFINITY, f64::NEG_INFINITY);
            for ya in 0..h {
                for xa in 0..w {
                    for yb in 0..h {
                        for xb in 0..w {
                            let (dx, dy) = (xa.abs_diff(xb), ya.abs_diff(yb));
                            if dx + dy == 1 || dx.max(dy) >= far {
                                let c = cosine(f.row(ya * w + xa), f.row(yb * w + xb));
                                if dx + dy == 1 {
                                    min_adj = min_adj.min(c);
                                } else {
                                    max_far = max_far.max(c);
                                }
                            }
                        }
                    }
                }
            }
            if !(min_adj > max_far) {
                failures.push((h, w));
            }
        }
    }
    failures
}

/// A model trained on 32x32 images (4x4 grid) scores 64x64 images (8x8 grid).
pub fn fourier_double_grid() -> ovseg_core::Result<[usize; 3]> {
    let cfg = ExperimentConfig::default();
    let enc = build_encoder(&cfg)?;
    let model = Model::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = map(random_tensor(&mut rng, &[64, 64, 3], 0.5), |x| x + 0.5);
    fourier_embed(7, 7, &PatchGrid { h: 8, w: 8, p: 8 }, &cfg.fourier)?;
    let logits = model.logits(&enc, &FeatureCache::default(), ImageRef { id: "big", pixels: &image }, &["red solid".into()])?;
    let s = logits.shape();
    Ok([s[0], s[1], s[2]])
}

pub fn criterion_fourier() -> Outcome {
    let cfg = ExperimentConfig::default().fourier;
    let det = fourier_determinism(&cfg);
    let add = fourier_additivity(&cfg);
    let sep = fourier_min_separation(&cfg);
    let smooth = fourier_smoothness_failures(&cfg);
    let big = fourier_double_grid();
    let pass = det && add <= 1e-12 && sep > 1e-6 && smooth.is_empty() && matches!(big, Ok([1, 64, 64]));
    Outcome::new(
        pass,
        format!(
            "deterministic {det}, additivity err {add:.1e}, min cell distance {sep:.3e}, smoothness failures {}, 2x grid {:?}",
            smooth.len(),
            big.map_err(|e| e.to_string())
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 4: fusion shapes and cross-modal flow

/// `(n_v, n_t, d_fuse, output visual shape, output text shape)` per random config.
pub fn fusion_shape_cases(count: u64) -> Vec<(Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
    (0..count)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let heads = rng.gen_range(1..5);
            let cfg = FusionConfig {
                d_fuse: heads * rng.gen_range(1..9),
                num_layers: rng.gen_range(1..4),
                num_heads: heads,
                mlp_ratio: rng.gen_range(1..5),
                out_gain: 0.1,
                seed,
            };
            let (dv, dt) = (rng.gen_range(1..40), rng.gen_range(1..40));
            let (nv, nt) = (rng.gen_range(1..30), rng.gen_range(1..8));
            let m = FusionModule::new(cfg, dv, dt).unwrap();
            let v = random_tensor(&mut rng, &[nv, dv], 1.0);
            let t = random_tensor(&mut rng, &[nt, dt], 1.0);
            let mut g = Graph::new();
            let (vc, tc) = (g.constant(v.clone()), g.constant(t.clone()));
            let (va, ta) = m.align(&mut g, vc, tc).unwrap();
            let aligned = (g.shape(va).to_vec(), g.shape(ta).to_vec());
            let (fv, ft) = m.fuse_tokens(&v, &t).unwrap();
            (aligned.0, aligned.1, fv.shape().to_vec(), ft.shape().to_vec())
        })
        .collect()
}

/// Largest change in fused visual tokens after perturbing the text tokens.
pub fn cross_modal_change(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let m = FusionModule::new(FusionConfig { seed, ..FusionConfig::default() }, 64, 64).unwrap();
    let v = random_tensor(&mut rng, &[16, 64], 1.0);
    let t = random_tensor(&mut rng, &[3, 64], 1.0);
    let mut t2 = t.clone();
    for x in t2.data_mut() {
        *x += rng.gen_range(-0.5..0.5);
    }
    let (a, _) = m.fuse_tokens(&v, &t).unwrap();
    let (b, _) = m.fuse_tokens(&v, &t2).unwrap();
    a.max_abs_diff(&b)
}

pub fn criterion_fusion() -> Outcome {
    let cases = fusion_shape_cases(20);
    let shapes_ok = cases.iter().filter(|(va, ta, fv, ft)| va == fv && ta == ft).count();
    let moved = (0..10).filter(|&s| cross_modal_change(s) > 1e-9).count();
    Outcome::new(
        shapes_ok == 20 && moved >= 9,
        format!("{shapes_ok}/20 shape configs preserved, text perturbation moved visual output on {moved}/10 seeds"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 5: zero-shot protocol

pub const PASCAL_FOLDS: [[&str; 5]; 4] = [
    ["aeroplane", "bicycle", "bird", "boat", "bottle"],
    ["bus", "car", "cat", "chair", "cow"],
    ["diningtable", "dog", "horse", "motor-bike", "person"],
    ["potted plant", "sheep", "sofa", "train", "tv/monitor"],
];

/// Copies the first sample of `test` into `train` under a fresh id.
pub fn inject_leak(train: &Dataset, test: &Dataset) -> Dataset {
    let mut leaked = train.clone();
    let mut s: SegmentationSample = test.samples[0].clone();
    s.id = "leak".into();
    leaked.samples.push(s);
    leaked
}

pub fn criterion_protocol() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_images = 60;
    cfg.data.test_images = 10;
    let enc = build_encoder(&cfg).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for fold in 0..4 {
        let (train_set, test_set) = fold_datasets(&cfg, 0, fold).unwrap();
        let spec = make_fold(fold, &train_set.universe).unwrap();
        let clean = audit_training_stream(&train_set, &spec).is_ok()
            && train_set.samples.iter().all(|s| s.categories.iter().all(|c| spec.is_train(c)));
        let leaked = inject_leak(&train_set, &test_set);
        let caught = matches!(audit_training_stream(&leaked, &spec), Err(Error::LeakedTestCategory(_)));
        let mut c = cfg.clone();
        c.fold_index = fold;
        c.epochs = 1;
        let caught_by_train = matches!(train(&c, &enc, &leaked, None), Err(Error::LeakedTestCategory(_)));
        pass &= clean && caught && caught_by_train;
        notes.push(format!("fold {fold}: clean {clean}, leak caught {caught}/{caught_by_train}"));
    }
    let universe = pascal_universe();
    let verbatim = (0..4).all(|i| {
        let f = make_fold(i, &universe).unwrap();
        f.test_categories == PASCAL_FOLDS[i] && f.train_categories.len() == 15 && f.train_categories.iter().all(|c| !f.is_test(c))
    });
    pass &= verbatim;
    notes.push(format!("PASCAL folds verbatim {verbatim}"));
    Outcome::new(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// Criterion 6: ablation ordering

pub struct AblationVerdict {
    pub table: AblationTable,
    pub per_seed: BTreeMap<u64, [f64; 3]>,
    pub bl2_over_bl0: usize,
    pub full_order: usize,
    pub variant_secs: [f64; 3],
}

pub fn ablation_verdict(table: AblationTable) -> AblationVerdict {
    let mut per_seed = BTreeMap::new();
    let (mut bl2_over_bl0, mut full_order) = (0, 0);
    for seed in table.seeds() {
        let m = AblationVariant::ALL.map(|v| table.seed_miou(seed, v).unwrap());
        if m[2] > m[0] {
            bl2_over_bl0 += 1;
        }
        if m[2] > m[1] && m[1] > m[0] {
            full_order += 1;
        }
        per_seed.insert(seed, m);
    }
    let mut variant_secs = [0.0; 3];
    for (i, v) in AblationVariant::ALL.iter().enumerate() {
        variant_secs[i] = table.runs.iter().filter(|r| r.variant == v.name()).map(|r| r.train_secs).sum();
    }
    AblationVerdict { table, per_seed, bl2_over_bl0, full_order, variant_secs }
}

pub fn criterion_ablation() -> Outcome {
    let cfg = ExperimentConfig::default();
    let enc = build_encoder(&cfg).unwrap();
    let v = ablation_verdict(run_ablation(&cfg, &enc, None).unwrap());
    let seeds = v.per_seed.len();
    let per_seed: Vec<String> = v
        .per_seed
        .iter()
        .map(|(s, m)| format!("seed {s}: {:.1}/{:.1}/{:.1}", 100.0 * m[0], 100.0 * m[1], 100.0 * m[2]))
        .collect();
    let slowest = v.variant_secs.iter().copied().fold(0.0, f64::max);
    let pass = seeds == 3 && v.bl2_over_bl0 == 3 && v.full_order >= 2 && slowest <= 600.0;
    Outcome::new(
        pass,
        format!(
            "B_L_2>B_L_0 on {}/{seeds} seeds, full order on {}/{seeds}; mIoU B_L_0/1/2 {}; slowest variant {slowest:.0}s\n{}",
            v.bl2_over_bl0,
            v.full_order,
            per_seed.join(", "),
            v.table.to_text()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 7: segmentation head

pub fn criterion_head() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cats: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
    let mut half_exact = true;
    for _ in 0..200 {
        let mut cfg = DecoderConfig::for_patch(8, 64).unwrap();
        cfg.tau = 10f64.powf(rng.gen_range(-6.0..6.0));
        let zeros = Tensor::zeros(&[3, 2, 2]);
        let p = predict_masks(&zeros, &cfg, &cats).unwrap();
        half_exact &= p.probs.data().iter().all(|&x| x == 0.5);
    }
    let (mut range_ok, mut worst_scale) = (true, 0.0f64);
    for _ in 0..50 {
        let (h, w, d, c) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..10), rng.gen_range(1..5));
        let feat = random_tensor(&mut rng, &[h, w, d], 3.0);
        let text = random_tensor(&mut rng, &[c, d], 3.0);
        let a = similarity_logits_of(&feat, &text).unwrap();
        range_ok &= a.data().iter().all(|x| (-1.0..=1.0).contains(x));
        let mut scaled = feat.clone();
        for px in 0..h * w {
            let s = 10f64.powf(rng.gen_range(-3.0..3.0));
            for x in &mut scaled.data_mut()[px * d..(px + 1) * d] {
                *x *= s;
            }
        }
        let b = similarity_logits_of(&scaled, &text).unwrap();
        worst_scale = worst_scale.max(a.max_abs_diff(&b));
    }
    let mut masks_exact = true;
    for _ in 0..50 {
        let mut cfg = DecoderConfig::for_patch(8, 64).unwrap();
        cfg.tau = rng.gen_range(0.01..1.0);
        cfg.default_threshold = rng.gen_range(0.05..0.95);
        cfg.thresholds.insert("b".into(), rng.gen_range(0.05..0.95));
        let logits = random_tensor(&mut rng, &[3, 4, 5], 1.0);
        let p = predict_masks(&logits, &cfg, &cats).unwrap();
        let th = [cfg.default_threshold, cfg.thresholds["b"], cfg.default_threshold];
        masks_exact &= p.masks_consistent()
            && p.probs.data().iter().zip(p.masks.data()).enumerate().all(|(i, (pr, m))| (*pr >= th[i / 20]) as u8 as f64 == *m);
    }
    Outcome::new(
        half_exact && range_ok && worst_scale <= 1e-12 && masks_exact,
        format!("sigmoid(0)=0.5 exact {half_exact}, logits in [-1,1] {range_ok}, rescale diff {worst_scale:.1e}, masks exact {masks_exact}"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 8: reproducibility

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

pub fn reproducibility_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_images = 24;
    cfg.epochs = 2;
    cfg
}

pub fn criterion_reproducibility() -> Outcome {
    let cfg = reproducibility_config();
    let (dataset, _) = fold_datasets(&cfg, cfg.seed, cfg.fold_index).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for variant in AblationVariant::ALL {
        let mut c = cfg.clone();
        c.variant = variant;
        let enc: FrozenEncoder = build_encoder(&c).unwrap();
        let before = enc.checksum();
        let (a, b) = (tmp.path().join(format!("{variant}_a")), tmp.path().join(format!("{variant}_b")));
        let (_, log_a) = train(&c, &enc, &dataset, Some(&a)).unwrap();
        let (_, log_b) = train(&c, &build_encoder(&c).unwrap(), &dataset, Some(&b)).unwrap();
        let losses = std::fs::read(a.join("losses.txt")).unwrap() == std::fs::read(b.join("losses.txt")).unwrap()
            && log_a.loss_text() == log_b.loss_text();
        let ckpt = dir_bytes(&a.join("checkpoint")) == dir_bytes(&b.join("checkpoint"));
        let frozen = enc.checksum() == before && log_a.encoder_checksum_before == log_a.encoder_checksum_after;
        pass &= losses && ckpt && frozen;
        notes.push(format!("{variant}: losses {losses}, checkpoint {ckpt}, encoder unchanged {frozen}"));
    }
    Outcome::new(pass, notes.join("; "))
}
