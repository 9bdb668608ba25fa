//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ttt_ucdr::cli::{
    cmd_compare, cmd_eval, cmd_gen, cmd_pretrain, cmd_ttt, load_dataset, CompareReport, ExperimentConfig,
    PRETRAINED_CHECKPOINT,
};
use ttt_ucdr::datagen::{generate_samples, label_reads, render_sample, strip_labels, GenConfig, ImageSample, Split};
use ttt_ucdr::imaging::{assemble3x3, invert_permutation, rotate, tile3x3, Image, Rotation};
use ttt_ucdr::model::{
    forward_backbone, forward_head, forward_latent, init_params, load_checkpoint, BoundParams, ModelDims, ModelParams,
    TaskKind,
};
use ttt_ucdr::optim::{run_ttt, sgd_step, TTTConfig, HEAD_LR_RANGE};
use ttt_ucdr::retrieval::{
    average_precision_at_k, cross_dataset_eval, score_queries, EmbeddingIndex, EvalOptions, Metric, Protocol,
};
use ttt_ucdr::rng::Rng;
use ttt_ucdr::ssl::{barlow_loss, barlow_terms, generate_permutation_set, hamming, DEFAULT_POOL};
use ttt_ucdr::tensor::{grad_check_many, Tape, Tensor, Var};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap()
}

fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image {
    Image::from_fn(h, w, |_, _| [rng.uniform(), rng.uniform(), rng.uniform()])
}

// ---------------------------------------------------------------- 1

/// Backbone pre-activations of every layer, row-major per layer.
fn pre_activations(p: &ModelParams, x: &Tensor) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut h = x.clone();
    for layer in &p.backbone {
        let mut z = h.matmul(&layer.weight).unwrap();
        let cols = z.cols();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v += layer.bias.data()[i % cols];
        }
        h = z.clone();
        h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        out.push(z);
    }
    out
}

/// True when a relu input sits within 1e-3 of its kink, or when a unit of
/// the last layer is active on every row (its bias then only shifts a
/// column, which standardization cancels).
fn awkward_point(p: &ModelParams, x: &Tensor) -> bool {
    let zs = pre_activations(p, x);
    let near_kink = zs.iter().any(|z| z.data().iter().any(|v| v.abs() < 1e-3));
    let last = zs.last().unwrap();
    let always_on = (0..last.cols()).any(|c| (0..last.rows()).all(|r| last.row(r)[c] > 0.0));
    near_kink || always_on
}

fn ce_loss(t: &mut Tape, vars: &[Var], layers: usize, x: &Tensor, labels: &[usize]) -> ttt_ucdr::Result<Var> {
    let bound = BoundParams::from_vars(vars, layers)?;
    let xv = t.constant(x);
    let g = forward_backbone(t, &bound, xv)?;
    let f = forward_latent(t, &bound, g)?;
    let h = forward_head(t, &bound, f, 4)?;
    t.cross_entropy(h, labels)
}

/// True when some analytic gradient coordinate is nonzero but below 1e-4:
/// the central difference's roundoff (about 1e-10 absolute) would then
/// dominate the relative error.
fn tiny_gradient(points: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> ttt_ucdr::Result<Var>) -> bool {
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter()
        .any(|v| grads.get(*v).unwrap().iter().any(|g| *g != 0.0 && g.abs() < 1e-4))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let dims = ModelDims {
        input_dim: 12,
        hidden: 8,
        latent: 5,
        head_k: 4,
        classes: None,
    };
    let (mut worst_ce, mut worst_bt, mut worst_shift) = (0.0f64, 0.0f64, 0.0f64);
    let (mut accepted, mut candidate) = (0, 0u64);
    while accepted < 20 {
        candidate += 1;
        if candidate > 5000 {
            return Err(format!("only {accepted} usable points in 5000 candidates"));
        }
        let mut rng = Rng::new(1000 + candidate);
        let mut p = init_params(candidate, &dims).unwrap();
        for t in [&mut p.head.weight, &mut p.head.bias, &mut p.latent.bias] {
            t.data_mut().iter_mut().for_each(|v| *v = rng.range(-0.5, 0.5));
        }
        let x = random_matrix(6, dims.input_dim, &mut rng);
        let v1 = random_matrix(16, dims.input_dim, &mut rng);
        let v2 = random_matrix(16, dims.input_dim, &mut rng);
        let zs = pre_activations(&p, &x);
        if zs.iter().any(|z| z.data().iter().any(|v| v.abs() < 1e-3)) || awkward_point(&p, &v1) || awkward_point(&p, &v2)
        {
            continue;
        }
        let layers = p.backbone.len();
        let labels: Vec<usize> = (0..6).map(|_| rng.index(4)).collect();
        let all: Vec<Tensor> = p.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        if tiny_gradient(&all, |t, vs| ce_loss(t, vs, layers, &x, &labels)) {
            continue;
        }
        accepted += 1;
        let ce = grad_check_many(|t, vs| ce_loss(t, vs, layers, &x, &labels), &all, 1e-6);
        worst_ce = worst_ce.max(ce);

        // backbone layers and the latent weight; the latent bias is checked below
        let encoder = &all[..2 * layers + 1];
        let fixed = [p.latent.bias.clone(), p.head.weight.clone(), p.head.bias.clone()];
        let barlow = |t: &mut Tape, vars: &[Var]| {
            let bound = BoundParams::from_vars(vars, layers)?;
            let mut embed = |input: &Tensor| -> ttt_ucdr::Result<_> {
                let xv = t.constant(input);
                let g = forward_backbone(t, &bound, xv)?;
                forward_latent(t, &bound, g)
            };
            let f1 = embed(&v1)?;
            let f2 = embed(&v2)?;
            barlow_loss(t, f1, f2, 0.005)
        };
        let bt = grad_check_many(
            |t, vs| {
                let mut vars = vs.to_vec();
                vars.extend(fixed.iter().map(|f| t.constant(f)));
                barlow(t, &vars)
            },
            encoder,
            1e-6,
        );
        worst_bt = worst_bt.max(bt);

        let mut tape = Tape::new();
        let vars: Vec<_> = all.iter().map(|a| tape.param(a)).collect();
        let loss = barlow(&mut tape, &vars).map_err(|e| e.to_string())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let shift = grads.get(vars[2 * layers + 1]).unwrap_or(&[]);
        worst_shift = shift.iter().fold(worst_shift, |m, g| m.max(g.abs()));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "20 points ({} resampled), max rel err CE {worst_ce:.2e}, Barlow {worst_bt:.2e}, latent-bias grad {worst_shift:.1e}, {secs:.2}s",
        candidate - 20
    );
    ensure(worst_ce <= 1e-5 && worst_bt <= 1e-5 && worst_shift <= 1e-10 && secs < 10.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

/// Full stable sort of the gallery, then AP by counting hits from scratch
/// at every rank.
fn oracle_scores(gallery: &[Vec<f64>], classes: &[usize], query: &[f64], qclass: usize, k: usize) -> (f64, f64) {
    let mut order: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (g.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let k = k.min(gallery.len());
    let rel: Vec<bool> = order[..k].iter().map(|&(_, i)| classes[i] == qclass).collect();
    let total = classes.iter().filter(|&&c| c == qclass).count();
    let mut sum = 0.0;
    for i in 0..k {
        if rel[i] {
            let hits = rel[..=i].iter().filter(|&&r| r).count();
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let ap = if total == 0 { 0.0 } else { sum / total.min(k) as f64 };
    let prec = rel.iter().filter(|&&r| r).count() as f64 / k as f64;
    (ap, prec)
}

fn metric_oracle() -> Outcome {
    let hand = average_precision_at_k(&[true, false, true], 3, 2).map_err(|e| e.to_string())?;
    ensure((hand - 0.833333).abs() <= 1e-6, || format!("hand case AP {hand}"))?;
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let mut rng = Rng::new(case);
        let g = 1 + rng.index(60);
        let dim = 1 + rng.index(5);
        let n_classes = 1 + rng.index(5);
        // coarse grid values make distance ties common
        let coarse = rng.uniform() < 0.5;
        let value = |rng: &mut Rng| {
            if coarse {
                rng.index(3) as f64
            } else {
                rng.range(-1.0, 1.0)
            }
        };
        let gallery: Vec<Vec<f64>> = (0..g).map(|_| (0..dim).map(|_| value(&mut rng)).collect()).collect();
        let classes: Vec<usize> = (0..g).map(|_| rng.index(n_classes)).collect();
        let nq = 1 + rng.index(4);
        let queries: Vec<Vec<f64>> = (0..nq).map(|_| (0..dim).map(|_| value(&mut rng)).collect()).collect();
        let qclasses: Vec<usize> = (0..nq).map(|_| rng.index(n_classes)).collect();
        let k = 1 + rng.index(70);
        let index = EmbeddingIndex::new(
            Tensor::from_rows(&gallery).unwrap(),
            (0..g).map(|i| format!("g{i}")).collect(),
            classes.clone(),
            vec![0; g],
            vec![false; g],
        )
        .unwrap();
        let ids: Vec<String> = (0..nq).map(|i| format!("q{i}")).collect();
        let report = score_queries(
            &index,
            &Tensor::from_rows(&queries).unwrap(),
            &qclasses,
            &ids,
            k,
            Metric::Euclidean,
            Protocol::Generalized,
        )
        .map_err(|e| format!("case {case}: {e}"))?;
        let (mut map, mut prec) = (0.0, 0.0);
        for (q, rec) in report.per_query.iter().enumerate() {
            let (ap, p) = oracle_scores(&gallery, &classes, &queries[q], qclasses[q], k);
            worst = worst.max((ap - rec.ap).abs()).max((p - rec.prec).abs());
            map += ap / nq as f64;
            prec += p / nq as f64;
        }
        worst = worst.max((map - report.map_at_k).abs()).max((prec - report.prec_at_k).abs());
    }
    ensure(worst <= 1e-12, || format!("max abs diff {worst:e}"))?;
    Ok(format!("1000 instances, max abs diff {worst:.1e}, AP([1,0,1],3,2) = {hand:.6}"))
}

// ---------------------------------------------------------------- 3

fn algebraic_suites() -> Outcome {
    let mut rng = Rng::new(3);
    for case in 0..1000 {
        let s = 1 + rng.index(9);
        let img = random_image(s, s, &mut rng);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate(&r, Rotation::R90).unwrap();
        }
        ensure(r.bit_eq(&img), || format!("rotation case {case}: four quarter turns differ"))?;
        for rot in Rotation::ALL {
            let back = rotate(&rotate(&img, rot).unwrap(), rot.inverse()).unwrap();
            ensure(back.bit_eq(&img), || format!("rotation case {case}: {rot:?} inverse"))?;
        }
    }
    let identity: Vec<usize> = (0..9).collect();
    for case in 0..1000 {
        let (h, w) = (3 * (1 + rng.index(4)), 3 * (1 + rng.index(4)));
        let img = random_image(h, w, &mut rng);
        let tiles = tile3x3(&img).unwrap();
        ensure(assemble3x3(&tiles, &identity).unwrap().bit_eq(&img), || {
            format!("tile case {case}: identity assembly")
        })?;
        let re_tiled = tile3x3(&assemble3x3(&tiles, &identity).unwrap()).unwrap();
        ensure(re_tiled.iter().zip(&tiles).all(|(a, b)| a.bit_eq(b)), || {
            format!("tile case {case}: tiling after identity assembly")
        })?;
        let mut sigma = identity.clone();
        rng.shuffle(&mut sigma);
        let shuffled = assemble3x3(&tiles, &sigma).unwrap();
        let restored = assemble3x3(&tile3x3(&shuffled).unwrap(), &invert_permutation(&sigma)).unwrap();
        ensure(restored.bit_eq(&img), || format!("tile case {case}: {sigma:?} not undone"))?;
    }
    let mut min_seen = usize::MAX;
    for seed in 0..1000u64 {
        let set = generate_permutation_set(31, DEFAULT_POOL, seed).map_err(|e| e.to_string())?;
        let perms = set.perms();
        ensure(perms.len() == 31, || format!("seed {seed}: {} permutations", perms.len()))?;
        let distinct: HashSet<_> = perms.iter().collect();
        ensure(distinct.len() == 31, || format!("seed {seed}: duplicates"))?;
        let mut pairs = 0;
        for i in 0..31 {
            for j in i + 1..31 {
                let d = hamming(&perms[i], &perms[j]);
                min_seen = min_seen.min(d);
                ensure(d >= 2, || format!("seed {seed}: pair {i},{j} at distance {d}"))?;
                pairs += 1;
            }
        }
        ensure(pairs == 465, || format!("seed {seed}: {pairs} pairs"))?;
    }
    let (mut worst_inv, mut worst_sym) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let n = 4 + rng.index(13);
        let m = 1 + rng.index(6);
        let f1 = random_matrix(n, m, &mut rng);
        let f2 = random_matrix(n, m, &mut rng);
        let lambda = rng.range(0.0, 0.1);
        let inv = barlow_terms(&f1, &f1).unwrap().invariance;
        worst_inv = worst_inv.max(inv);
        let loss = |a: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a), t.constant(b));
            let l = barlow_loss(&mut t, va, vb, lambda).unwrap();
            t.value(l)[0]
        };
        let (l12, l21) = (loss(&f1, &f2), loss(&f2, &f1));
        ensure(l12 >= 0.0, || format!("barlow case {case}: negative loss {l12}"))?;
        worst_sym = worst_sym.max((l12 - l21).abs());
    }
    ensure(worst_inv <= 1e-6 && worst_sym <= 1e-12, || {
        format!("barlow invariance {worst_inv:e}, symmetry {worst_sym:e}")
    })?;
    Ok(format!(
        "1000 cases each; min pairwise Hamming {min_seen}; barlow(f,f) invariance {worst_inv:.1e}; symmetry {worst_sym:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

fn recipe_fidelity() -> Outcome {
    let dims = ModelDims {
        input_dim: 6,
        hidden: 4,
        latent: 3,
        head_k: 4,
        classes: None,
    };
    let plant = |p: &mut ttt_ucdr::model::ModelParams, g: f64| {
        for (_, t) in p.trainable_mut(false) {
            let n = t.numel();
            t.set_grad(vec![g; n]).unwrap();
        }
    };
    let cfg = TTTConfig::default();
    let mut p = init_params(0, &dims).unwrap();
    p.head.bias.data_mut()[0] = 1.0;
    plant(&mut p, 2.0);
    sgd_step(&mut p, ttt_ucdr::optim::GroupLrs::uniform(0.1), false).map_err(|e| e.to_string())?;
    ensure(p.head.bias.data()[0] == 0.8, || format!("1.0 - 0.1*2.0 gave {}", p.head.bias.data()[0]))?;
    // a second identical step must move by the same amount: no velocity carried over
    plant(&mut p, 2.0);
    sgd_step(&mut p, ttt_ucdr::optim::GroupLrs::uniform(0.1), false).map_err(|e| e.to_string())?;
    ensure(p.head.bias.data()[0] == 0.8 - 0.1 * 2.0, || "second step carried momentum".into())?;
    // zero gradient leaves parameters untouched: no weight decay
    let before = p.clone();
    plant(&mut p, 0.0);
    sgd_step(&mut p, cfg.lrs(), false).map_err(|e| e.to_string())?;
    ensure(p.bit_eq(&before), || "zero gradient changed parameters".into())?;

    let mut z = init_params(0, &dims).unwrap();
    for (_, t) in z.trainable_mut(false) {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    plant(&mut z, 0.3);
    sgd_step(&mut z, cfg.lrs(), false).map_err(|e| e.to_string())?;
    let head_delta = -z.head.weight.data()[0];
    let bb_delta = -z.backbone[0].weight.data()[0];
    ensure(
        cfg.backbone_lr_ratio == 0.1 && head_delta == cfg.head_lr * 0.3 && bb_delta == cfg.head_lr * 0.1 * 0.3,
        || format!("head delta {head_delta:e}, backbone delta {bb_delta:e}"),
    )?;
    let (lo, hi) = HEAD_LR_RANGE;
    ensure(cfg.epochs == 1 && cfg.batch_size == 64 && (lo..=hi).contains(&cfg.head_lr), || {
        format!("defaults epochs {} batch {} head_lr {}", cfg.epochs, cfg.batch_size, cfg.head_lr)
    })?;
    Ok(format!(
        "sgd arithmetic exact; backbone/head delta ratio {}; epochs 1, batch 64, head_lr {:e}",
        bb_delta / head_delta,
        cfg.head_lr
    ))
}

// ---------------------------------------------------------------- 5, 6

struct SeedRun {
    seed: u64,
    dir: tempfile::TempDir,
    report: CompareReport,
    seconds_per_variant: f64,
}

fn base_config(out: &Path, seed: u64, extra: &[(&str, &str)]) -> ExperimentConfig {
    let overrides: Vec<(String, String)> = extra.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    ExperimentConfig::resolve(None, Some(seed), Some(out), &overrides).unwrap()
}

fn seed_runs() -> Result<Vec<SeedRun>, String> {
    (0..5)
        .map(|seed| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let cfg = base_config(dir.path(), seed, &[("eval.k", "50")]);
            cmd_gen(&cfg).map_err(|e| e.to_string())?;
            let ckpt = cmd_pretrain(&cfg).map_err(|e| e.to_string())?;
            let start = Instant::now();
            let report = cmd_compare(&cfg, &ckpt).map_err(|e| e.to_string())?;
            Ok(SeedRun {
                seed,
                dir,
                report,
                seconds_per_variant: start.elapsed().as_secs_f64() / 3.0,
            })
        })
        .collect()
}

fn ttt_descent(runs: &[SeedRun]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for task in TaskKind::ALL {
        let mut descended = 0;
        for run in runs {
            let (_, v) = run.report.variants().into_iter().find(|(t, _)| *t == task).unwrap();
            if let Some((first, last)) = v.loss_quarters {
                descended += usize::from(last < first);
            }
        }
        ok &= descended >= 4;
        lines.push(format!("{} {descended}/5", task.name()));
    }
    let slowest = runs.iter().map(|r| r.seconds_per_variant).fold(0.0, f64::max);
    ok &= slowest < 120.0;
    let detail = format!("{}; slowest variant {slowest:.1}s", lines.join(", "));
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn retrieval_behavior(runs: &[SeedRun]) -> Outcome {
    let key = "non_generalized";
    let mut winners = 0;
    let mut cells = Vec::new();
    for run in runs {
        let table = run.report.table();
        ensure(table.lines().count() == 1 + 4 * run.report.baseline.len(), || {
            format!("seed {}: delta table incomplete", run.seed)
        })?;
        let best = run
            .report
            .variants()
            .into_iter()
            .map(|(t, v)| (t, v.delta[key].map))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        winners += usize::from(best.1 > 0.0);
        cells.push(format!("seed {}: {} {:+.2e}", run.seed, best.0.name(), best.1));
    }
    let detail = format!("{winners}/5 seeds with a gain in mAP@50 ({})", cells.join(", "));
    ensure(winners >= 3, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn cross_dataset(source: &SeedRun) -> Outcome {
    let params = load_checkpoint(source.dir.path().join(PRETRAINED_CHECKPOINT)).map_err(|e| e.to_string())?;
    let other_seed = source.seed + 101;
    let proto_differs = (0..12).all(|c| {
        render_sample(source.seed, c, 0, 0, 36).max_abs_diff(&render_sample(other_seed, c, 0, 0, 36)) > 0.0
    });
    ensure(proto_differs, || "datasets share prototypes".into())?;
    let (_, samples) = generate_samples(&GenConfig {
        seed: other_seed,
        ..GenConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let pick = |s: Split| samples.iter().filter(|x| x.split == s).cloned().collect::<Vec<ImageSample>>();
    let (queries, gallery) = (pick(Split::TestQuery), pick(Split::TestGallery));
    let opts = EvalOptions {
        k: 50,
        ..EvalOptions::default()
    };
    let frozen = TTTConfig {
        head_lr: 0.0,
        seed: other_seed,
        ..TTTConfig::for_task(TaskKind::Barlow)
    };
    let r = cross_dataset_eval(&params, &queries, &gallery, Some(&frozen), opts).map_err(|e| e.to_string())?;
    ensure(r.before.bit_eq(&r.after), || "head_lr = 0 changed the report".into())?;
    let defaults = TTTConfig {
        seed: other_seed,
        ..TTTConfig::for_task(TaskKind::Barlow)
    };
    let a = cross_dataset_eval(&params, &queries, &gallery, Some(&defaults), opts).map_err(|e| e.to_string())?;
    let b = cross_dataset_eval(&params, &queries, &gallery, Some(&defaults), opts).map_err(|e| e.to_string())?;
    let (ja, jb) = (serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    ensure(a.after.bit_eq(&b.after) && ja == jb, || "repeat runs differ".into())?;
    Ok(format!(
        "frozen run bit-identical; default run reproducible (mAP@50 {:.4} -> {:.4})",
        a.before.map_at_k, a.after.map_at_k
    ))
}

// ---------------------------------------------------------------- 8

fn pipeline(out: &Path, workers: usize) -> Result<Vec<(String, Vec<u8>)>, String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let w = workers.to_string();
        let cfg = base_config(out, 9, &[("eval.workers", &w), ("ttt.task", "barlow"), ("pretrain.epochs", "3")]);
        cmd_gen(&cfg).map_err(|e| e.to_string())?;
        let ckpt = cmd_pretrain(&cfg).map_err(|e| e.to_string())?;
        let adapted = cmd_ttt(&cfg, &ckpt).map_err(|e| e.to_string())?;
        cmd_eval(&cfg, &adapted.checkpoint).map_err(|e| e.to_string())?;
        let files = [
            PathBuf::from("dataset/manifest.json"),
            PathBuf::from(PRETRAINED_CHECKPOINT),
            adapted.checkpoint.clone(),
            adapted.trace_csv.clone(),
            PathBuf::from("eval_ttt_barlow.json"),
        ];
        files
            .iter()
            .map(|f| {
                let path = out.join(f);
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                fs::read(&path).map(|b| (name, b)).map_err(|e| format!("{}: {e}", path.display()))
            })
            .collect()
    })
}

fn determinism() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = pipeline(dirs[0].path(), 1)?;
    let b = pipeline(dirs[1].path(), 1)?;
    let c = pipeline(dirs[2].path(), 4)?;
    for (other, label) in [(&b, "repeat run"), (&c, "4 workers")] {
        for ((name, x), (_, y)) in a.iter().zip(other.iter()) {
            ensure(x == y, || format!("{name} differs on {label}"))?;
        }
    }
    Ok(format!(
        "{} artifacts bit-identical across repeat runs and 1 vs 4 workers",
        a.len()
    ))
}

// ---------------------------------------------------------------- 9

fn label_isolation(source: &SeedRun) -> Outcome {
    let cfg = base_config(source.dir.path(), source.seed, &[]);
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let queries = data.split(Split::TestQuery).map_err(|e| e.to_string())?;
    let params = load_checkpoint(source.dir.path().join(PRETRAINED_CHECKPOINT)).map_err(|e| e.to_string())?;
    let unlabeled = strip_labels(&queries);
    let mut reads = Vec::new();
    for task in TaskKind::ALL {
        let before = label_reads();
        run_ttt(&params, &unlabeled, &TTTConfig::for_task(task)).map_err(|e| e.to_string())?;
        reads.push(label_reads() - before);
        let cfg = ExperimentConfig {
            ttt: TTTConfig::for_task(task),
            ..cfg.clone()
        };
        let before = label_reads();
        cmd_ttt(&cfg, &source.dir.path().join(PRETRAINED_CHECKPOINT)).map_err(|e| e.to_string())?;
        reads.push(label_reads() - before);
    }
    // the counter does see ordinary label reads
    let before = label_reads();
    let _ = queries[0].class_id();
    ensure(label_reads() == before + 1, || "label counter is not wired".into())?;
    ensure(reads.iter().all(|&r| r == 0), || format!("label reads during adaptation: {reads:?}"))?;
    Ok(format!("0 label reads across {} adaptation runs", reads.len()))
}

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("criterion {n}: PASS {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {n}: FAIL {name}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "gradient correctness", gradient_correctness());
    ok &= report(2, "metric oracle", metric_oracle());
    ok &= report(3, "algebraic suites", algebraic_suites());
    ok &= report(4, "recipe fidelity", recipe_fidelity());
    match seed_runs() {
        Ok(runs) => {
            ok &= report(5, "test-time training descent", ttt_descent(&runs));
            ok &= report(6, "retrieval behavior", retrieval_behavior(&runs));
            ok &= report(7, "cross-dataset harness", cross_dataset(&runs[0]));
            ok &= report(8, "determinism", determinism());
            ok &= report(9, "label isolation", label_isolation(&runs[0]));
        }
        Err(e) => {
            for (n, name) in [
                (5, "test-time training descent"),
                (6, "retrieval behavior"),
                (7, "cross-dataset harness"),
            ] {
                ok &= report(n, name, Err(format!("pipeline failed: {e}")));
            }
            ok &= report(8, "determinism", determinism());
            ok &= report(9, "label isolation", Err(format!("pipeline failed: {e}")));
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
