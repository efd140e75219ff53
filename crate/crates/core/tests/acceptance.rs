//! Acceptance suite. Runs every criterion in sequence (so runtime budgets
//! are measured without competing tests), prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.
//!
//! Criterion 6 needs the EuroSAT RGB patches: set `EUROSAT_ROOT` to an
//! unpacked copy, otherwise the suite tries to download the archive.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use artmap::collage::{compose, CollageInput};
use artmap::eurosat::{fetch_dataset, DatasetManifest, SampleSet, EUROSAT_RGB_MD5, EUROSAT_RGB_URL};
use artmap::mlp::{self, majority_filter, MlpParams, TrainConfig};
use artmap::nst::{
    content_loss, content_target, gram, loss_and_grad, style_layer_loss, style_targets, stylize, total_loss,
    InitKind, LayerSelection, NstConfig,
};
use artmap::pipeline::{self, ConfigOverrides, DatasetTrainConfig, PipelineConfig, RunOptions};
use artmap::raster::{load_image, ResizeMethod};
use artmap::vgg::{Pooling, VggNet, VggWeights, VGG19_WIDTHS};
use artmap::{LabelMap, Raster};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, budget: Duration, detail: String) -> Outcome {
    let t = start.elapsed();
    if t > budget {
        Err(format!("{detail}; over budget: {:.1}s > {}s", t.as_secs_f64(), budget.as_secs()))
    } else {
        Ok(detail)
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn mean_ce(p: &MlpParams, x: ArrayView2<f64>, y: &[u8]) -> f64 {
    let rows: Vec<f64> = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(r, &l)| mlp::cross_entropy(p.forward(r.as_slice().unwrap()).unwrap(), l))
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

fn c1_mlp_gradient() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for batch in 0..20 {
        let params = MlpParams::init(&[3, 4, 2], 100 + batch).unwrap();
        let n = rng.random_range(1..=16);
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let analytic = params.backward(x.view(), &y).unwrap().flat();
        let base = params.flat();
        for i in 0..base.len() {
            let mut p = params.clone();
            let mut v = base.clone();
            v[i] = base[i] + h;
            p.set_flat(&v).unwrap();
            let plus = mean_ce(&p, x.view(), &y);
            v[i] = base[i] - h;
            p.set_flat(&v).unwrap();
            let minus = mean_ce(&p, x.view(), &y);
            worst = worst.max(rel_err(analytic[i], (plus - minus) / (2.0 * h)));
            checked += 1;
        }
    }
    let detail = format!("max relative error {worst:.2e} over {checked} parameters");
    check(worst < 1e-4, detail).and_then(|d| within(start, Duration::from_secs(10), d))
}

fn c2_nst_gradient() -> Outcome {
    let start = Instant::now();
    let net = VggNet::new(VggWeights::<f64>::seeded(VGG19_WIDTHS, 7), Pooling::Average);
    // conv5_x has no spatial extent at 12x12, so the selection stops at block 4.
    let cfg = NstConfig {
        selection: LayerSelection {
            content_layer: "conv4_2".into(),
            style_layers: ["conv1_1", "conv2_1", "conv3_1", "conv4_1"].map(String::from).to_vec(),
            style_layer_weights: vec![0.25; 4],
        },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let unit = |seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Raster::new(12, 12, 3, (0..432).map(|_| r.random::<f64>()).collect()).unwrap()
    };
    let content = net.weights.preprocess(&unit(10)).unwrap();
    let style = net.weights.preprocess(&unit(11)).unwrap();
    let image = net.weights.preprocess(&unit(12)).unwrap();
    let ct = content_target(&net, &content, &cfg.selection).unwrap();
    let st = style_targets(&net, &style, &cfg.selection).unwrap();
    let (_, grad) = loss_and_grad(&net, &image, &ct, &st, &cfg).unwrap();

    let h = 1e-3;
    let idx = rand::seq::index::sample(&mut rng, 12 * 12 * 3, 200);
    let mut ok = 0;
    let mut worst = 0.0f64;
    for flat in idx.iter() {
        let (y, x, c) = (flat / 36, (flat / 3) % 12, flat % 3);
        let eval = |d: f64| {
            let mut a = image.clone().into_array();
            a[[y, x, c]] += d;
            total_loss(&net, &Raster::from_array(a).unwrap(), &ct, &st, &cfg).unwrap().total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let e = rel_err(grad.get(y, x, c), numeric);
        worst = worst.max(e);
        if e < 1e-3 {
            ok += 1;
        }
    }
    let detail = format!("{ok}/200 pixels within 1e-3 (worst {worst:.2e})");
    check(ok >= 198, detail).and_then(|d| within(start, Duration::from_secs(120), d))
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0))
}

fn brute_gram(f: &Array2<f64>) -> Array2<f64> {
    let (n, m) = f.dim();
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..m {
                s += f[[i, k]] * f[[j, k]];
            }
            g[[i, j]] = s;
        }
    }
    g
}

fn brute_reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

fn brute_majority(labels: &LabelMap, r: usize) -> Vec<u8> {
    let (h, w, k) = (labels.height(), labels.width(), labels.num_categories());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut counts = vec![0; k];
            for yy in y as isize - r as isize..=y as isize + r as isize {
                for xx in x as isize - r as isize..=x as isize + r as isize {
                    counts[labels.get(brute_reflect(yy, h), brute_reflect(xx, w)) as usize] += 1;
                }
            }
            let best = counts.iter().copied().max().unwrap();
            let center = labels.get(y, x);
            let mut pick = center;
            if counts[center as usize] != best {
                for (c, &n) in counts.iter().enumerate() {
                    if n == best {
                        pick = c as u8;
                        break;
                    }
                }
            }
            out.push(pick);
        }
    }
    out
}

fn c3_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..8), rng.random_range(1..12));
        let f = random_matrix(&mut rng, n, m);
        let p = random_matrix(&mut rng, n, m);
        let g = gram(f.view()).unwrap();
        let a = brute_gram(&p);
        let bg = brute_gram(&f);
        worst = worst.max((&g - &bg).iter().fold(0.0, |s, v| s.max(v.abs())));

        let mut c = 0.0;
        let mut sg = 0.0;
        for i in 0..n {
            for k in 0..m {
                c += 0.5 * (f[[i, k]] - p[[i, k]]).powi(2);
            }
            for j in 0..n {
                sg += (bg[[i, j]] - a[[i, j]]).powi(2);
            }
        }
        let s = sg / (4.0 * (n * n) as f64 * (m * m) as f64);
        worst = worst.max((content_loss(f.view(), p.view()).unwrap() - c).abs());
        worst = worst.max((style_layer_loss(g.view(), a.view(), n, m).unwrap() - s).abs());
    }
    if worst > 1e-6 {
        return Err(format!("loss/gram max abs error {worst:.2e}"));
    }
    for t in 0..100 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let labels = LabelMap::new(h, w, 2, (0..h * w).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let srcs: Vec<Raster<f32>> = (0..2)
            .map(|_| Raster::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect();
        let out = compose(&CollageInput::new(&labels, srcs.iter().collect()).unwrap());
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    if out.get(y, x, c) != srcs[labels.get(y, x) as usize].get(y, x, c) {
                        return Err(format!("compose instance {t} differs at ({y}, {x}, {c})"));
                    }
                }
            }
        }
        let r = rng.random_range(0..4);
        if majority_filter(&labels, r).labels() != brute_majority(&labels, r).as_slice() {
            return Err(format!("majority_filter instance {t} (radius {r}) differs"));
        }
    }
    Ok(format!(
        "100 instances each; gram/loss max abs error {worst:.2e}; compose and majority_filter exact"
    ))
}

fn c4_analytic_zeros() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_matrix(&mut rng, 6, 9);
    let g = gram(f.view()).unwrap();
    let cl = content_loss(f.view(), f.view()).unwrap();
    let sl = style_layer_loss(g.view(), g.view(), 6, 9).unwrap();
    let net = VggNet::new(VggWeights::<f32>::seeded(VGG19_WIDTHS, 4), Pooling::Average);
    let coastal = load_image(repo_root().join("assets/coastal.png")).map_err(|e| e.to_string())?;
    let content = coastal.resize(32, 32, ResizeMethod::Bilinear).unwrap();
    let style = load_image(repo_root().join("assets/style_water.png")).map_err(|e| e.to_string())?;
    let cfg = NstConfig {
        beta: 0.0,
        init: InitKind::Content,
        ..Default::default()
    };
    let (out, _) = stylize(&net, &content, &style, &cfg).map_err(|e| e.to_string())?;
    let diff = out.max_abs_diff(&content).unwrap();
    check(
        cl == 0.0 && sl == 0.0 && diff <= 1.0 / 255.0,
        format!("content_loss {cl}, style_layer_loss {sl}, beta=0 stylize max diff {diff:.2e}"),
    )
}

fn c5_gram_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_ratio = f64::INFINITY;
    for t in 0..100 {
        let (n, m) = (rng.random_range(1..20), rng.random_range(1..40));
        let f = random_matrix(&mut rng, n, m).mapv(|v| v.max(0.0) * 10.0);
        let g = gram(f.view()).unwrap();
        if g != g.t() {
            return Err(format!("instance {t} is not exactly symmetric"));
        }
        let gm = nalgebra::DMatrix::from_fn(n, n, |i, j| g[[i, j]]);
        let eig = gm.symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if lo < -1e-6 * hi.abs() {
            return Err(format!("instance {t}: min eigenvalue {lo:.3e}, max {hi:.3e}"));
        }
        if hi > 0.0 {
            worst_ratio = worst_ratio.min(lo / hi);
        }
    }
    Ok(format!("100 matrices symmetric; min eigenvalue / max >= {worst_ratio:.2e}"))
}

fn blobs(n: usize, dim: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = (i % 2) as u8;
        let center = if l == 0 { 0.3 } else { 0.7 };
        features.extend((0..dim).map(|_| center + rng.random_range(-0.1..0.1f32)));
        labels.push(l);
    }
    SampleSet::new(features, labels, dim).unwrap()
}

fn eurosat_manifest() -> Result<DatasetManifest, String> {
    if let Ok(root) = std::env::var("EUROSAT_ROOT") {
        return DatasetManifest::scan(&root).map_err(|e| format!("EUROSAT_ROOT={root}: {e}"));
    }
    let dest = repo_root().join("target/eurosat");
    fetch_dataset(EUROSAT_RGB_URL, &dest, EUROSAT_RGB_MD5)
        .map_err(|e| format!("EuroSAT unavailable (set EUROSAT_ROOT): {e}"))
}

fn c6_training() -> Outcome {
    let start = Instant::now();
    let set = blobs(1000, 27, 6);
    let empty = SampleSet::new(Vec::new(), Vec::new(), 27).unwrap();
    let (_, report) = mlp::train(&TrainConfig::default(), &set, &empty).map_err(|e| e.to_string())?;
    let blob_acc = report.epochs.last().unwrap().train_acc;
    if blob_acc < 0.99 {
        return Err(format!("blob training accuracy {blob_acc:.4} < 0.99"));
    }
    let manifest = eurosat_manifest().map_err(|e| format!("blobs train_acc {blob_acc:.4}; {e}"))?;
    let outcome = pipeline::train_on_dataset(
        &manifest,
        &DatasetTrainConfig {
            categories: vec!["Forest".into(), "SeaLake".into()],
            per_category: Some(200),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let acc = outcome.test_accuracy.unwrap_or(0.0);
    let detail = format!(
        "blobs train_acc {blob_acc:.4}; Forest/SeaLake held-out pixel accuracy {acc:.4} on {} patches",
        outcome.patches[2]
    );
    check(acc >= 0.90, detail).and_then(|d| within(start, Duration::from_secs(300), d))
}

fn c7_convergence() -> Outcome {
    let start = Instant::now();
    let net = VggNet::new(VggWeights::<f32>::seeded(VGG19_WIDTHS, 0), Pooling::Average);
    let content = load_image(repo_root().join("assets/coastal.png"))
        .map_err(|e| e.to_string())?
        .resize(64, 64, ResizeMethod::Bilinear)
        .unwrap();
    let style = load_image(repo_root().join("assets/style_land.png")).map_err(|e| e.to_string())?;
    let cfg = NstConfig {
        iterations: 200,
        ..Default::default()
    };
    let (out, trace) = stylize(&net, &content, &style, &cfg).map_err(|e| e.to_string())?;
    // Loss of the returned (clamped) image, not just the last traced iterate.
    let style_r = style.resize(64, 64, ResizeMethod::Bilinear).unwrap();
    let ct = content_target(&net, &net.weights.preprocess(&content).unwrap(), &cfg.selection).unwrap();
    let st = style_targets(&net, &net.weights.preprocess(&style_r).unwrap(), &cfg.selection).unwrap();
    let fin = total_loss(&net, &net.weights.preprocess(&out).unwrap(), &ct, &st, &cfg).unwrap().total;
    let init = trace.first().unwrap().total;
    let detail = format!("initial {init:.4e}, final {fin:.4e}, ratio {:.3}", fin / init);
    check(fin < 0.5 * init, detail).and_then(|d| within(start, Duration::from_secs(300), d))
}

fn c8_end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let weights = tmp.path().join("vgg19-stub.safetensors");
    VggWeights::<f32>::seeded(VGG19_WIDTHS, 0).save(&weights).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        let cfg = PipelineConfig::load(
            repo_root().join("assets/demo.toml"),
            &ConfigOverrides {
                vgg_weights: Some(weights.clone()),
                output_dir: Some(dir.clone()),
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let out = pipeline::execute(&cfg, &RunOptions { single_thread: true }).map_err(|e| e.to_string())?;
        for name in [
            "labels.png",
            "stylized_0.png",
            "stylized_1.png",
            "collage.png",
            "trace_0.jsonl",
            "trace_1.jsonl",
            "report.json",
        ] {
            if !dir.join(name).is_file() {
                return Err(format!("run {run}: missing {name}"));
            }
        }
        if dir.join(pipeline::PARTIAL_MARKER).exists() {
            return Err(format!("run {run}: partial marker left behind"));
        }
        pipeline::verify_artifacts(&dir).map_err(|e| format!("run {run}: {e}"))?;
        outputs.push(out);
    }
    let diff = outputs[0].collage.max_abs_diff(&outputs[1].collage).unwrap();
    let r = &outputs[0].report;
    let both_present = r.histogram.iter().all(|&n| n > 0);
    let decreasing = r
        .categories
        .iter()
        .all(|c| matches!((c.initial_loss, c.final_loss), (Some(a), Some(b)) if b.total < a.total));
    let detail = format!(
        "histogram {:?}, collage re-verified, repeat-run max diff {diff:.1e}, losses decrease: {decreasing}",
        r.histogram
    );
    check(diff < 1e-6 && both_present && decreasing, detail).and_then(|d| within(start, Duration::from_secs(900), d))
}

fn c9_shape_law() -> Outcome {
    let net = VggNet::new(VggWeights::<f32>::seeded(VGG19_WIDTHS, 9), Pooling::Average);
    let img = Raster::filled(224, 224, 3, 0.5f32).unwrap();
    let feats = net
        .forward_features(&net.weights.preprocess(&img).unwrap(), &["conv1_1", "conv4_2"])
        .map_err(|e| e.to_string())?;
    let a = feats.get("conv1_1").unwrap().dim();
    let b = feats.get("conv4_2").unwrap().dim();
    check(
        a == (64, 224, 224) && b == (512, 28, 28),
        format!("conv1_1 {a:?}, conv4_2 {b:?}"),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "mlp gradient vs finite differences", c1_mlp_gradient),
        (2, "style transfer gradient vs finite differences", c2_nst_gradient),
        (3, "oracle equivalence", c3_oracles),
        (4, "analytic zeros", c4_analytic_zeros),
        (5, "gram structure", c5_gram_structure),
        (6, "mlp training", c6_training),
        (7, "style transfer convergence", c7_convergence),
        (8, "end-to-end run", c8_end_to_end),
        (9, "feature shape law", c9_shape_law),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| p == &id.to_string()) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("ACCEPTANCE {id} {name}: PASS ({d}) [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("ACCEPTANCE {id} {name}: FAIL ({d}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
