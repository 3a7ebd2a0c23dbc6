//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p terrafuse-cli --test acceptance -- 1 5 7`.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terrafuse_cli::grid::{model_parameters, read_table, COMPLETE_MARKER, IOU_BY_CLASS_FILE, TABLE_FILE};
use terrafuse_cli::report::REPORT_SVG;
use terrafuse_core::batch::PatchLoader;
use terrafuse_core::data::{compute_band_stats, write_sample, Manifest};
use terrafuse_core::encoders::{
    build_attn_block, build_deconv_header, build_encoder, count_parameters, ArchDescriptor, AttnBlock, Checkpoint,
    DeconvHeader, DownBlock, Encoder, EncoderVariant, UpBlock,
};
use terrafuse_core::finetune::{
    confusion_matrix, finetune_run, iou_per_class, weighted_mean_iou, class_weights, ClassTaxonomy, EvalReport,
    FinetuneConfig, EVAL_REPORT_FILE,
};
use terrafuse_core::geo::{
    build_neighbor_graph, draw_triplet_with, haversine_km, is_neighbor_pair, sample_clustered, sample_sphere_uniform,
    LonLat,
};
use terrafuse_core::nn::{check_module_gradients, GradCheckConfig, Mode, Module, Tensor, TensorSpec};
use terrafuse_core::pretrain::{
    check_objective_gradients, embedding_rows, initial_encoder, kl_divergence, pretrain_run, triplet_distances,
    triplet_loss, triplet_separation, CurriculumSchedule, Objective, PretrainConfig,
};
use terrafuse_core::synth::{generate_dataset, generate_sample, SynthConfig, DEFAULT_SIGNATURES};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1 ---------------------------------------------------------------------------

fn parameter_counts() -> Outcome {
    let encoders = [
        ("resnet18", 11_211_008),
        ("resnet34", 21_319_168),
        ("resnet18attn", 11_621_570),
    ];
    for (name, want) in encoders {
        let got = ok(build_encoder(name, 0))?.num_params();
        ensure!(got == want, "{name}: {got} parameters, expected {want}");
    }
    let header = count_parameters(&ok(build_deconv_header(7, 0))?);
    ensure!(header == 2_266_631, "header: {header}");
    for (c, want) in [(256, 82_241), (512, 328_321)] {
        let got = count_parameters(&ok(build_attn_block(c, 0))?);
        ensure!(got == want, "attention C={c}: {got}, expected {want}");
    }
    let mut totals = Vec::new();
    for (v, want) in EncoderVariant::ALL.into_iter().zip([13_477_639, 23_585_799, 13_888_201]) {
        let got = ok(model_parameters(v, 7))?;
        ensure!(got == want, "{v} + header: {got}, expected {want}");
        totals.push(got.to_string());
    }
    Ok(format!("encoder+header {}", totals.join(" / ")))
}

// 2 ---------------------------------------------------------------------------

fn per_layer_counts() -> Outcome {
    let expected: [(EncoderVariant, &[usize]); 3] = [
        (EncoderVariant::ResNet18, &[43_904, 128, 147_968, 525_568, 2_099_712, 8_393_728]),
        (EncoderVariant::ResNet34, &[43_904, 128, 221_952, 1_116_416, 6_822_400, 13_114_368]),
        (
            EncoderVariant::ResNet18Attn,
            &[43_904, 128, 147_968, 525_568, 2_099_712, 82_241, 8_393_728, 328_321],
        ),
    ];
    for (v, want) in expected {
        let got: Vec<usize> = Encoder::new(v, 0).layer_param_counts().into_iter().map(|(_, n)| n).collect();
        ensure!(got == want, "{v}: {got:?}, expected {want:?}");
    }
    let header: Vec<usize> = ok(DeconvHeader::new(7, 0))?
        .layer_param_counts()
        .into_iter()
        .map(|(_, n)| n)
        .collect();
    ensure!(header == [1_705_728, 426_880, 106_944, 26_848, 231], "header layers {header:?}");
    Ok("3 encoders and the 7-class header match layer by layer".into())
}

// 3 ---------------------------------------------------------------------------

const GRADIENT_BUDGET: Duration = Duration::from_secs(300);

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut attn = ok(AttnBlock::new(16, &mut rng))?;
    attn.gamma.value[0] = 0.7;
    let mut blocks: Vec<(&str, Box<dyn Module>, TensorSpec, f32)> = vec![
        (
            "down(identity)",
            Box::new(DownBlock::new(4, 4, 1, &mut rng)),
            TensorSpec::new(2, 4, 8, 8),
            0.1,
        ),
        (
            "down(projection)",
            Box::new(DownBlock::new(4, 8, 2, &mut rng)),
            TensorSpec::new(2, 4, 8, 8),
            0.1,
        ),
        ("up", Box::new(UpBlock::new(8, &mut rng)), TensorSpec::new(2, 8, 4, 4), 0.1),
        ("attention", Box::new(attn), TensorSpec::new(2, 16, 8, 8), 1.0),
    ];
    let mut worst = Vec::new();
    for (i, (name, block, spec, std)) in blocks.iter_mut().enumerate() {
        let r = ok(check_module_gradients(block.as_mut(), *spec, *std, i as u64, cfg))?;
        ensure!(r.passed(), "{name}: {r}");
        worst.push(format!("{name} {:.2e}", r.params.max_rel_err.max(r.input.max_rel_err)));
    }
    // The segmentation header is an up stack plus a 1x1 conv, the same
    // composition as the VAE decoder, so the VAE check covers it end to end.
    for objective in [Objective::Vae, Objective::T2v, Objective::Csf] {
        let r = ok(check_objective_gradients(objective, EncoderVariant::ResNet18, 0, cfg))?;
        ensure!(r.passed(), "{objective}: {r}");
        worst.push(format!("{objective} {:.2e} ({} coords)", r.max_rel_err, r.checked));
    }
    let elapsed = start.elapsed();
    ensure!(
        elapsed < GRADIENT_BUDGET,
        "checks passed but took {elapsed:.0?}, over the {GRADIENT_BUDGET:?} budget"
    );
    Ok(format!("max rel err: {}; {elapsed:.0?}", worst.join(", ")))
}

// 4 ---------------------------------------------------------------------------

fn loss_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 8;
    let mut zero_cases = 0;
    for trial in 0..10_000 {
        let margin: f64 = rng.random_range(0.01..2.0);
        let a: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let n: Vec<f32> = if trial % 2 == 0 {
            (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
        } else {
            // Place the negative beyond the positive distance plus the margin.
            let dp = a.iter().zip(&p).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
            let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let reach = dp + margin + rng.random_range(1e-3..1.0);
            a.iter().zip(&dir).map(|(&x, d)| (x as f64 + d / norm * reach) as f32).collect()
        };
        let t = |v: &Vec<f32>| embedding_rows(std::slice::from_ref(v));
        let (za, zp, zn) = (ok(t(&a))?, ok(t(&p))?, ok(t(&n))?);
        let (loss, _) = ok(triplet_loss(&za, &zp, &zn, margin))?;
        ensure!(loss >= 0.0, "negative hinge {loss} at trial {trial}");
        let (dp, dn) = triplet_distances(&za, &zp, &zn)[0];
        if dn - dp >= margin {
            ensure!(loss == 0.0, "gap {} >= margin {margin} but loss {loss}", dn - dp);
            zero_cases += 1;
        }
    }
    ensure!(zero_cases >= 5_000, "only {zero_cases} triples had gap >= margin");

    let spec = TensorSpec::new(1, 4, 2, 2);
    let (kl0, _, _) = ok(kl_divergence(&Tensor::zeros(spec), &Tensor::zeros(spec)))?;
    ensure!(kl0 == 0.0, "KL at the standard normal is {kl0}");
    let one = TensorSpec::new(1, 1, 1, 1);
    let (kl1, _, _) = ok(kl_divergence(&Tensor::full(one, 1.0), &Tensor::zeros(one)))?;
    ensure!((kl1 - 0.5).abs() < 1e-12, "KL at mu=1 is {kl1}");
    for _ in 0..1_000 {
        let mu = Tensor::randn(spec, &mut rng);
        let mut lv = Tensor::randn(spec, &mut rng);
        lv.scale(2.0);
        let (kl, _, _) = ok(kl_divergence(&mu, &lv))?;
        ensure!(kl >= 0.0, "negative KL {kl}");
    }

    let c = CurriculumSchedule::default();
    let got: Vec<f64> = [0, 4, 5, 14, 15, 20].iter().map(|&e| c.intensity(e)).collect();
    let want = [0.0, 0.0, 0.1, 1.0, 1.0, 1.0];
    ensure!(
        got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-12),
        "curriculum {got:?}, expected {want:?}"
    );
    Ok(format!("10^4 triples ({zero_cases} past the margin), KL spot values, curriculum {got:?}"))
}

// 5 ---------------------------------------------------------------------------

struct OracleScores {
    iou: Vec<Option<f64>>,
    weighted: Option<f64>,
}

/// Per-pixel counting straight from the definitions.
fn oracle(pred: &[u8], truth: &[u8], codes: &[u8]) -> OracleScores {
    let scored = |c: u8| codes.contains(&c);
    let total = truth.iter().filter(|&&t| scored(t)).count();
    let mut iou = Vec::new();
    let mut weights = Vec::new();
    for &c in codes {
        let (mut tp, mut fp, mut fn_, mut truth_c) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth) {
            if !scored(t) {
                continue;
            }
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
            if t == c {
                truth_c += 1;
            }
        }
        let d = tp + fp + fn_;
        iou.push((d > 0).then(|| tp as f64 / d as f64));
        weights.push(if total == 0 { 0.0 } else { truth_c as f64 / total as f64 });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (i, w) in iou.iter().zip(&weights) {
        if let Some(v) = i {
            num += w * v;
            den += w;
        }
    }
    OracleScores {
        iou,
        weighted: (den > 0.0).then(|| num / den),
    }
}

fn metric_oracle() -> Outcome {
    let taxonomy = ClassTaxonomy::default();
    let codes: Vec<u8> = taxonomy.classes.iter().map(|(c, _)| *c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        // Some cases leave classes out entirely so absent classes are exercised.
        let classes = rng.random_range(1..=5u8);
        let truth: Vec<u8> = (0..256).map(|_| rng.random_range(0..=classes)).collect();
        let pred: Vec<u8> = (0..256).map(|_| rng.random_range(1..=classes)).collect();
        let cm = ok(confusion_matrix(&pred, &truth, &taxonomy))?;
        let iou = iou_per_class(&cm);
        let weighted = weighted_mean_iou(&iou, &class_weights(&cm));
        let want = oracle(&pred, &truth, &codes);
        ensure!(iou == want.iou, "case {case}: iou {iou:?} vs oracle {:?}", want.iou);
        ensure!(weighted == want.weighted, "case {case}: weighted {weighted:?} vs {:?}", want.weighted);
        let pixels = truth.iter().filter(|&&t| t != 0).count() as u64;
        ensure!(cm.total() == pixels, "case {case}: {} counted, {pixels} scored", cm.total());
    }

    let two = ClassTaxonomy {
        classes: vec![(1, "a".into()), (2, "b".into())],
    };
    let truth = [1, 1, 1, 1, 2, 2, 2, 2, 2, 2];
    let pred = [1, 1, 1, 2, 1, 1, 2, 2, 2, 2];
    let iou = iou_per_class(&ok(confusion_matrix(&pred, &truth, &two))?);
    ensure!(iou == [Some(0.5), Some(4.0 / 7.0)], "hand case {iou:?}");
    Ok("200 random 16x16 mask pairs match the oracle exactly; hand case {0.5, 4/7}".into())
}

// 6 ---------------------------------------------------------------------------

fn attention_gate() -> Outcome {
    let mut attn = Encoder::new(EncoderVariant::ResNet18Attn, 5);
    let gammas: Vec<f32> = attn.attention_blocks_mut().iter().map(|b| b.gamma.value[0]).collect();
    ensure!(gammas == [0.0, 0.0], "fresh gates {gammas:?}");
    let mut plain = Encoder::new(EncoderVariant::ResNet18, 0);
    let mut ck = Checkpoint::new(ArchDescriptor {
        encoder: EncoderVariant::ResNet18Attn,
        header_classes: None,
        objective: None,
        seed: 5,
    });
    ck.add("", &attn);
    ck.arrays.retain(|(info, _)| !info.name.starts_with("attn"));
    ok(ck.restore("", &mut plain))?;
    let x = Tensor::randn(TensorSpec::new(2, 14, 64, 64), &mut ChaCha8Rng::seed_from_u64(6));
    let a = ok(attn.forward(&x, Mode::Eval))?;
    let b = ok(plain.forward(&x, Mode::Eval))?;
    let diff = a.max_abs_diff(&b);
    ensure!(diff <= 1e-5, "max abs diff {diff:e}");
    Ok(format!("max abs diff {diff:e} on [2,14,64,64]"))
}

// 7 ---------------------------------------------------------------------------

fn geo_oracles() -> Outcome {
    // Half the points in small caps so the graph has many edges near the 1 degree boundary.
    let mut points: Vec<LonLat> = ok(sample_clustered(7, 500, 25, 1.5))?;
    points.extend(sample_sphere_uniform(8, 500));
    let graph = build_neighbor_graph(&points);
    let mut edges = 0;
    for i in 0..points.len() {
        let brute: BTreeSet<usize> = (0..points.len())
            .filter(|&j| j != i && is_neighbor_pair(points[i], points[j]))
            .collect();
        let fast: BTreeSet<usize> = graph.neighbors[i].iter().map(|nb| nb.index).collect();
        ensure!(brute == fast, "point {i}: graph {fast:?} vs brute force {brute:?}");
        edges += brute.len();
    }
    ensure!(edges > 1000, "only {} edges; oracle too weak", edges / 2);

    let one = haversine_km((0.0, 0.0), (1.0, 0.0));
    ensure!((one - 111.195).abs() <= 1e-3, "1 degree = {one} km");
    let half = haversine_km((0.0, 0.0), (180.0, 0.0));
    ensure!((half - 20015.087).abs() <= 1e-2, "antipode = {half} km");

    // Anchor 0 with neighbours at 10, 30 and 60 km plus far points.
    let deg = |km: f64| (km / 6371.0).to_degrees();
    let pts: Vec<LonLat> = vec![
        (0.0, 0.0),
        (deg(10.0), 0.0),
        (0.0, deg(30.0)),
        (-deg(60.0), 0.0),
        (40.0, 10.0),
        (-70.0, -20.0),
        (120.0, 45.0),
        (10.0, -60.0),
    ];
    let g = build_neighbor_graph(&pts);
    let temperature = 20.0;
    let probs = ok(g.neighbor_probabilities(0, temperature))?;
    let draws = 40_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut neighbor_hits = vec![0usize; pts.len()];
    let mut distant_hits = vec![0usize; pts.len()];
    for _ in 0..draws {
        let t = ok(draw_triplet_with(&g, 0, &mut rng, temperature))?;
        neighbor_hits[t.neighbor] += 1;
        distant_hits[t.distant] += 1;
    }
    let within = |hits: usize, p: f64| -> bool {
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        (hits as f64 - draws as f64 * p).abs() <= 5.0 * sd.max(1.0)
    };
    for (k, nb) in g.neighbors[0].iter().enumerate() {
        ensure!(
            within(neighbor_hits[nb.index], probs[k]),
            "neighbour {} drawn {} times, expected {:.0}",
            nb.index,
            neighbor_hits[nb.index],
            draws as f64 * probs[k]
        );
    }
    for (j, &hits) in distant_hits.iter().enumerate().skip(4) {
        ensure!(within(hits, 0.25), "distant {j} drawn {hits} times");
    }
    ensure!(distant_hits[..4].iter().all(|&h| h == 0), "distant drew a neighbour");
    Ok(format!(
        "{} edges match brute force; {one:.4} km, {half:.3} km; draws within 5 sigma",
        edges / 2
    ))
}

// 8 ---------------------------------------------------------------------------

fn vae_smoke(root: &Path) -> Outcome {
    let synth = SynthConfig {
        seed: 1,
        n_samples: 64,
        patch_size: 32,
        ..SynthConfig::default()
    };
    let m = ok(generate_dataset(&synth, &ok(sample_clustered(1, 64, 8, 0.4))?, root))?;
    let s = ok(compute_band_stats(&m))?;
    let cfg = PretrainConfig {
        objective: Objective::Vae,
        epochs: 3,
        batch_size: 8,
        input_size: 32,
        ..PretrainConfig::default()
    };
    let out = ok(pretrain_run(&cfg, &m, &s, None))?;
    let (first, last) = (out.metrics[0].loss, out.metrics[2].loss);
    ensure!(last < first, "VAE loss {first} at epoch 1, {last} at epoch 3");
    Ok(format!("VAE loss {first:.3} -> {last:.3}"))
}

/// Four location clusters whose patches share one land-cover signature, so
/// geographic neighbours also look alike.
fn clustered_signature_dataset(root: &Path, n: usize, clusters: usize) -> Result<Manifest, String> {
    let locations = ok(sample_clustered(2, n, clusters, 0.4))?;
    let mut m = Manifest::new("clustered", 32, root);
    for (i, &loc) in locations.iter().enumerate() {
        let cfg = SynthConfig {
            seed: 2,
            n_samples: n,
            patch_size: 32,
            n_classes: 1,
            class_signatures: Some(vec![DEFAULT_SIGNATURES[i % clusters].to_vec()]),
            ..SynthConfig::default()
        };
        let sample = ok(generate_sample(&cfg, i, loc))?;
        ok(write_sample(&sample, root))?;
        m.push(&sample);
    }
    ok(m.save())?;
    Ok(m)
}

fn t2v_smoke(root: &Path) -> Outcome {
    let m = clustered_signature_dataset(root, 64, 4)?;
    let s = ok(compute_band_stats(&m))?;
    let points: Vec<LonLat> = m.entries.iter().map(|e| (e.lon, e.lat)).collect();
    let graph = build_neighbor_graph(&points);
    let temperature = graph.mean_neighbor_km().ok_or("no neighbours")?;
    let cfg = PretrainConfig {
        objective: Objective::T2v,
        epochs: 3,
        batch_size: 8,
        input_size: 32,
        ..PretrainConfig::default()
    };
    let loader = ok(PatchLoader::new(&m, &s, true))?;
    let mut init = initial_encoder(cfg.encoder, cfg.seed);
    let before = ok(triplet_separation(&mut init, &loader, &graph, 32, temperature, 64, 5))?;
    let mut out = ok(pretrain_run(&cfg, &m, &s, Some(&graph)))?;
    let (pos, neg) = ok(triplet_separation(&mut out.encoder, &loader, &graph, 32, temperature, 64, 5))?;
    ensure!(pos < neg, "after training positive {pos} >= negative {neg}");
    ensure!(
        neg / pos > before.1 / before.0,
        "separation ratio fell from {:.3} to {:.3}",
        before.1 / before.0,
        neg / pos
    );
    Ok(format!(
        "T2V pos/neg {:.1}/{:.1} -> {pos:.1}/{neg:.1}",
        before.0, before.1
    ))
}

fn overfit_smoke(root: &Path) -> Outcome {
    let synth = SynthConfig {
        seed: 4,
        n_samples: 8,
        patch_size: 32,
        label_noise: 0.0,
        cloud_fraction: 0.0,
        field_smoothness: 6.0,
        ..SynthConfig::default()
    };
    let m = ok(generate_dataset(&synth, &ok(sample_clustered(4, 8, 2, 0.4))?, root))?;
    let s = ok(compute_band_stats(&m))?;
    let none = PretrainConfig {
        objective: Objective::None,
        input_size: 32,
        ..PretrainConfig::default()
    };
    let encoder = ok(pretrain_run(&none, &m, &s, None))?;
    let cfg = FinetuneConfig {
        epochs: 60,
        batch_size: 8,
        input_size: 32,
        lr: 1e-3,
        evaluate_on_train: true,
        ..FinetuneConfig::default()
    };
    let out = ok(finetune_run(&encoder.checkpoint, &m, &s, &cfg))?;
    let miou = out.report.weighted_miou.unwrap_or(0.0);
    ensure!(miou >= 0.95, "training-set weighted mIoU {miou:.4} < 0.95");
    Ok(format!("overfit weighted mIoU {miou:.4} (epoch {})", out.report.selected_epoch))
}

const SMOKE_BUDGET: Duration = Duration::from_secs(20 * 60);

fn learning_smoke() -> Outcome {
    let start = Instant::now();
    let dir = ok(tempfile::tempdir())?;
    let parts = [
        vae_smoke(&dir.path().join("vae"))?,
        t2v_smoke(&dir.path().join("t2v"))?,
        overfit_smoke(&dir.path().join("overfit"))?,
    ];
    let elapsed = start.elapsed();
    ensure!(elapsed < SMOKE_BUDGET, "smoke tests took {elapsed:.0?}");
    Ok(format!("{}; {elapsed:.0?}", parts.join("; ")))
}

// 9 and 10: the command-line tool ---------------------------------------------

const TINY_CONFIG: &str = r#"
[data]
clusters = 2

[synth]
seed = 3
n_samples = 6
patch_size = 32
field_smoothness = 6.0

[pretrain]
epochs = 1
batch_size = 4
input_size = 32

[finetune]
epochs = 1
batch_size = 4
input_size = 32
"#;

fn terrafuse(out: &Path, config: &Path, args: &[&str]) -> Result<String, String> {
    let output = ok(Command::new(env!("CARGO_BIN_EXE_terrafuse"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output())?;
    ensure!(
        output.status.success(),
        "terrafuse {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn run_stages(out: &Path, config: &Path) -> Result<(), String> {
    terrafuse(out, config, &["--deterministic", "synth"])?;
    for objective in ["none", "vae", "t2v", "csf"] {
        terrafuse(out, config, &["--deterministic", "pretrain", "--objective", objective])?;
    }
    terrafuse(out, config, &["--deterministic", "finetune", "--objective", "csf"])?;
    terrafuse(out, config, &["--deterministic", "evaluate", "--objective", "csf"])?;
    Ok(())
}

fn reproducibility() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let config = dir.path().join("tiny.toml");
    ok(fs::write(&config, TINY_CONFIG))?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_stages(&a, &config)?;
    run_stages(&b, &config)?;
    let files = files_under(&a);
    ensure!(files == files_under(&b), "runs produced different file sets");
    let mut compared = 0;
    for f in &files {
        ensure!(
            ok(fs::read(a.join(f)))? == ok(fs::read(b.join(f)))?,
            "{} differs between identical runs",
            f.display()
        );
        compared += 1;
    }
    let wanted = ["metrics.csv", "finetune_metrics.csv", EVAL_REPORT_FILE];
    for name in wanted {
        ensure!(files.iter().any(|f| f.ends_with(name)), "no {name} produced");
    }
    let tuned = ok(fs::read_to_string(a.join("finetune/csf-resnet18").join(EVAL_REPORT_FILE)))?;
    let evaluated = ok(fs::read_to_string(a.join("evaluate/csf-resnet18").join(EVAL_REPORT_FILE)))?;
    ensure!(tuned == evaluated, "evaluate disagrees with the fine-tune report");

    let c = dir.path().join("c");
    terrafuse(&c, &config, &["--deterministic", "--seed", "9", "synth"])?;
    terrafuse(&c, &config, &["--deterministic", "--seed", "9", "pretrain"])?;
    ensure!(
        ok(fs::read(a.join("pretrain/vae-resnet18/metrics.csv")))?
            != ok(fs::read(c.join("pretrain/vae-resnet18/metrics.csv")))?,
        "a different seed reproduced the same metrics"
    );
    Ok(format!("{compared} files bit-identical across two runs of synth/pretrain x4/finetune/evaluate"))
}

fn count_lines(stdout: &str, prefix: &str) -> usize {
    stdout.lines().filter(|l| l.starts_with(prefix)).count()
}

fn grid_integrity() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let config = dir.path().join("tiny.toml");
    ok(fs::write(&config, TINY_CONFIG))?;
    let out = dir.path().join("resumed");

    let first = terrafuse(&out, &config, &["grid", "--max-cells", "5"])?;
    ensure!(count_lines(&first, "ran ") == 5, "interrupted run executed:\n{first}");
    ensure!(count_lines(&first, "pending ") == 7, "interrupted run left:\n{first}");
    let grid = out.join("grid");
    let markers = |grid: &Path| -> Vec<String> {
        let mut v: Vec<String> = fs::read_dir(grid)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().join(COMPLETE_MARKER).exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    let done_first = markers(&grid);
    ensure!(done_first.len() == 5, "{} markers after the interrupted run", done_first.len());
    let stamps: Vec<_> = done_first
        .iter()
        .map(|c| fs::metadata(grid.join(c).join("finetune").join(EVAL_REPORT_FILE)).and_then(|m| m.modified()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    // A cell killed mid-run leaves a directory without a marker.
    let partial = grid.join("csf-resnet34");
    ok(fs::create_dir_all(partial.join("pretrain")))?;
    ok(fs::write(partial.join("pretrain").join("junk"), "partial"))?;

    let second = terrafuse(&out, &config, &["grid"])?;
    ensure!(count_lines(&second, "ran ") == 7, "resumed run executed:\n{second}");
    ensure!(count_lines(&second, "skipped ") == 5, "resumed run skipped:\n{second}");
    ensure!(!partial.join("pretrain").join("junk").exists(), "partial cell was not rerun from scratch");
    ensure!(markers(&grid).len() == 12, "{} markers after resuming", markers(&grid).len());
    for (c, before) in done_first.iter().zip(&stamps) {
        let after = ok(fs::metadata(grid.join(c).join("finetune").join(EVAL_REPORT_FILE)).and_then(|m| m.modified()))?;
        ensure!(after == *before, "completed cell {c} was recomputed");
    }
    let third = terrafuse(&out, &config, &["grid"])?;
    ensure!(count_lines(&third, "ran ") == 0, "a finished grid reran cells:\n{third}");

    let table = ok(read_table(&grid.join(TABLE_FILE)))?;
    ensure!(
        table[0] == ["pretrain", "resnet18", "resnet34", "resnet18attn"],
        "table header {:?}",
        table[0]
    );
    let rows: Vec<&str> = table[1..5].iter().map(|r| r[0].as_str()).collect();
    ensure!(rows == ["none", "vae", "t2v", "csf"], "table rows {rows:?}");
    for row in &table[1..5] {
        ensure!(row.len() == 4, "row {row:?}");
        for v in &row[1..] {
            let x: f64 = v.parse().map_err(|_| format!("table cell {v:?} in {row:?} is not a number"))?;
            ensure!((0.0..=1.0).contains(&x), "table value {x}");
        }
    }
    ensure!(
        table[5] == ["parameters", "13477639", "23585799", "13888201"],
        "parameter row {:?}",
        table[5]
    );
    for row in &table[1..5] {
        for (j, v) in row[1..].iter().enumerate() {
            let cell = format!("{}-{}", row[0], table[0][j + 1]);
            let text = ok(fs::read_to_string(grid.join(&cell).join("finetune").join(EVAL_REPORT_FILE)))?;
            let report = ok(EvalReport::from_json(&text))?;
            ensure!(
                report.weighted_miou.map(|x| x.to_string()).as_deref() == Some(v.as_str()),
                "{cell}: table {v} vs report {:?}",
                report.weighted_miou
            );
        }
    }

    // The same grid in one go with two workers gives the same tables.
    let fresh = dir.path().join("fresh");
    terrafuse(&fresh, &config, &["grid", "--workers", "2"])?;
    for f in [TABLE_FILE, IOU_BY_CLASS_FILE] {
        ensure!(
            ok(fs::read(grid.join(f)))? == ok(fs::read(fresh.join("grid").join(f)))?,
            "{f} differs between the resumed and the uninterrupted grid"
        );
    }

    terrafuse(&out, &config, &["report"])?;
    let svg = ok(fs::read_to_string(out.join(REPORT_SVG)))?;
    ensure!(svg.starts_with("<?xml") && svg.contains("<svg xmlns=\"http://www.w3.org/2000/svg\""), "svg header");
    let bars = svg.matches("<rect class=\"bar\"").count();
    ensure!(bars == 60, "{bars} bars for 5 classes x 12 cells");
    Ok("5 cells, then 7 on resume; 4x3 table with parameter row; 60 bars".into())
}

fn main() {
    let criteria: [(u8, &str, fn() -> Outcome); 10] = [
        (1, "parameter counts", parameter_counts),
        (2, "per-layer counts", per_layer_counts),
        (3, "gradient checks", gradient_checks),
        (4, "loss properties", loss_properties),
        (5, "metric oracle", metric_oracle),
        (6, "attention gate", attention_gate),
        (7, "geospatial oracles", geo_oracles),
        (8, "learning smoke tests", learning_smoke),
        (9, "reproducibility", reproducibility),
        (10, "grid integrity", grid_integrity),
    ];
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id:>2} {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:>2} {name} [{secs:.1}s]: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
