//! End-to-end acceptance checks A1–A10.
//!
//! Runs as a plain binary (`harness = false`): one PASS/FAIL line per
//! criterion, non-zero exit if any fails. Desk-scale budget: 1800 target
//! and 1800 OOD images at 48×64, teacher 4 epochs, students 5 epochs.

use std::collections::{BTreeSet, HashSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dfdepth::config::ExperimentConfig;
use dfdepth::distiller::{run_datafree_distillation, run_kd_ood, run_random_noise_kd, train_teacher, AblationFlags, RunRecord, TrainConfig};
use dfdepth::evalkit::{
    attack_then_distill_seeds, depth_histogram, depth_metrics, ifgsm_attack, make_report, predict_all, MetricsReport, IFGSM_STEPS, JSD_BINS,
};
use dfdepth::losses::{
    bn_alignment_loss, depth_loss, distillation_objective, generator_objective, reconstruction_loss, valid_mask, BranchWeights,
};
use dfdepth::mixer::{classmix, classmix_with_classes};
use dfdepth::nets::{BnStatSet, DepthNet, LayerStats, Role, StatKind, TransformNet, TransformNetworkSpec};
use dfdepth::simworld::{generate_sample, DomainConfig, LoadedDataset, Sample};
use dfdepth::Tensor;

const SEEDS: [u64; 3] = [0, 1, 2];
const TEACHER_EPOCHS: usize = 4;
const STUDENT_EPOCHS: usize = 5;
const LR: f64 = 1e-3;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(o: &Outcome) {
    println!("{} {} {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn load(domain: &DomainConfig, count: usize) -> LoadedDataset {
    let samples: Vec<Sample> = (0..count as u64).map(|i| generate_sample(domain, domain.seed_namespace + i).unwrap()).collect();
    LoadedDataset::from_samples(domain.clone(), &samples).unwrap()
}

fn metrics(r: &RunRecord) -> &MetricsReport {
    r.metrics.as_ref().expect("run was evaluated")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn student_cfg(seed: u64) -> TrainConfig {
    TrainConfig { epochs: STUDENT_EPOCHS, lr: LR, seed, ..Default::default() }
}

// ---------------------------------------------------------------- A7

fn a7_analytic() -> Outcome {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    let set = |kind, layers: Vec<(Vec<f64>, Vec<f64>)>| BnStatSet { kind, layers: layers.into_iter().map(|(mean, var)| LayerStats { mean, var }).collect() };

    // Batch-norm alignment.
    let running = set(StatKind::Running, vec![(vec![0.0, 0.0], vec![1.0, 1.0]), (vec![0.5, -0.5, 2.0], vec![1.0, 1.0, 0.25])]);
    let same = BnStatSet { kind: StatKind::Batchwise, ..running.clone() };
    check("bn zero", bn_alignment_loss(&same, &running).unwrap() == 0.0);
    let batch = set(StatKind::Batchwise, vec![(vec![3.0, 4.0], vec![1.0, 1.0]), (vec![0.5, -0.5, 2.0], vec![1.0, 3.0, 0.25])]);
    let l = bn_alignment_loss(&batch, &running).unwrap();
    check("bn value", (l - 7.0).abs() <= 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let layers: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(1..9)).collect();
        let mut mk = |kind| {
            set(kind, layers.iter().map(|&c| ((0..c).map(|_| rng.random_range(-2.0..2.0)).collect(), (0..c).map(|_| rng.random_range(0.1..3.0)).collect())).collect())
        };
        let (b, r) = (mk(StatKind::Batchwise), mk(StatKind::Running));
        let whole = bn_alignment_loss(&b, &r).unwrap();
        check("bn positive", whole > 0.0);
        let parts: f64 = (0..layers.len())
            .map(|i| {
                let m: Vec<bool> = (0..layers.len()).map(|j| j == i).collect();
                bn_alignment_loss(&b.select(&m), &r.select(&m)).unwrap()
            })
            .sum();
        check("bn additive", (whole - parts).abs() <= 1e-6);
    }

    // Reconstruction: constant offset c gives exactly |c|.
    for &c in &[0.0, 0.25, -0.125, 0.5] {
        let a = Tensor::<f64>::from_vec([2, 3, 4, 5], (0..120).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let b = a.map(|v| v + c);
        check("rec offset", (reconstruction_loss(&a, &b).unwrap() - f64::abs(c)).abs() <= 1e-6);
    }

    // Depth loss identity value.
    let t = Tensor::<f64>::from_vec([2, 1, 8, 8], (0..128).map(|_| rng.random_range(0.2..9.0)).collect()).unwrap();
    let identity = 0.5f64.ln() + 2.0 * 0.5f64.ln();
    check("depth identity", (depth_loss(&t, &t, &valid_mask(&t)).unwrap().total - identity).abs() <= 1e-6);

    // ClassMix 2×2 hand case: class 1 of x_i pasted onto x_j.
    let xi = Sample { height: 2, width: 2, rgb: (0..12).map(|v| v as f32 / 12.0).collect(), depth: vec![1.0; 4], semantics: vec![0, 1, 1, 2] };
    let xj = Sample { height: 2, width: 2, rgb: vec![1.0; 12], depth: vec![2.0; 4], semantics: vec![3, 3, 3, 3] };
    let m = classmix_with_classes(&xi, &xj, &[1], (4, 9)).unwrap();
    let mut expect = vec![1.0f32; 12];
    expect[3..9].copy_from_slice(&xi.rgb[3..9]);
    check("mix hand", m.mixed_rgb == expect && m.mask == [false, true, true, false] && m.selected_classes == [1] && m.source_ids == (4, 9));

    // Pixel provenance on random instances.
    for k in 0..1000u64 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let classes = rng.random_range(1..7u8);
        let mk = |rng: &mut ChaCha8Rng| Sample {
            height: h,
            width: w,
            rgb: (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
            depth: vec![1.0; h * w],
            semantics: (0..h * w).map(|_| rng.random_range(0..classes)).collect(),
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let r = classmix(&a, &b, k).unwrap();
        let present: BTreeSet<u8> = a.semantics.iter().copied().collect();
        let chosen: HashSet<u8> = r.selected_classes.iter().copied().collect();
        let mut ok = r.selected_classes.len() == present.len().div_ceil(2) && chosen.iter().all(|c| present.contains(c));
        for p in 0..h * w {
            let from_a = chosen.contains(&a.semantics[p]);
            let src = if from_a { &a.rgb } else { &b.rgb };
            ok &= r.mask[p] == from_a && r.mixed_rgb[3 * p..3 * p + 3] == src[3 * p..3 * p + 3];
        }
        check("mix provenance", ok);
    }

    let mut names: Vec<String> = fails.clone();
    names.dedup();
    Outcome {
        id: "A7",
        pass: fails.is_empty(),
        detail: if fails.is_empty() { "bn zero/positive/additive, rec offset, depth identity, classmix hand + 1000 provenance".into() } else { format!("failed: {names:?}") },
    }
}

// ---------------------------------------------------------------- A8

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn a8_gradients(teacher: &DepthNet<f32>, ood: &LoadedDataset) -> Outcome {
    let t = teacher.cast::<f64>();
    let spec = dfdepth::nets::DepthNetworkSpec::student(t.spec().max_depth, t.spec().input_size);
    let student = DepthNet::<f32>::build(spec, Role::Student, 5).unwrap().cast::<f64>();
    let mut g = TransformNet::<f32>::build(TransformNetworkSpec::standard(t.spec().input_size), 6).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in g.params_mut() {
        *p += rng.random_range(-0.02..0.02);
    }
    let raw = ood.images.gather(&[0, 1]).cast::<f64>();
    let mixed = ood.images.gather(&[2, 3]).cast::<f64>();
    let (alpha, beta) = (1.0, 0.5);
    let w = BranchWeights::default();

    let pick = |n: usize, seed: u64| rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, 40).into_vec();

    let gen = generator_objective(&g, &t, &mixed, alpha, beta).unwrap();
    let (mut g_checked, mut g_worst) = (0, 0.0f64);
    for i in pick(g.param_count(), 9) {
        if gen.grads[i].abs() < 1e-6 || g_checked >= 12 {
            continue;
        }
        // Small enough that no ReLU / |·| / clamp kink is crossed.
        let h = 1e-5;
        let eval = |d: f64| {
            let mut gp = g.clone();
            gp.params_mut()[i] += d;
            generator_objective(&gp, &t, &mixed, alpha, beta).unwrap().breakdown.total
        };
        let num = (eval(h) - eval(-h)) / (2.0 * h);
        g_worst = g_worst.max(rel_err(num, gen.grads[i]));
        g_checked += 1;
    }

    let dist = distillation_objective(&t, &student, Some(&g), &raw, Some(&mixed), w).unwrap();
    let (mut d_checked, mut d_worst) = (0, 0.0f64);
    for i in pick(student.param_count(), 10) {
        if dist.student_grads[i].abs() < 1e-7 || d_checked >= 12 {
            continue;
        }
        let h = 1e-5;
        let eval = |d: f64| {
            let mut sp = student.clone();
            sp.params_mut()[i] += d;
            distillation_objective(&t, &sp, Some(&g), &raw, Some(&mixed), w).unwrap().breakdown.total
        };
        let num = (eval(h) - eval(-h)) / (2.0 * h);
        d_worst = d_worst.max(rel_err(num, dist.student_grads[i]));
        d_checked += 1;
    }

    let pass = g_checked >= 10 && d_checked >= 10 && g_worst <= 1e-4 && d_worst <= 1e-4;
    Outcome {
        id: "A8",
        pass,
        detail: format!("generator {g_checked} params max rel err {g_worst:.2e}; distillation {d_checked} params max rel err {d_worst:.2e} (≤ 1e-4)"),
    }
}

// ---------------------------------------------------------------- A9

fn oracle(pred: &[f64], gt: &[f64], valid: &[bool]) -> [f64; 6] {
    let mut acc = [0.0; 6];
    let mut n = 0.0;
    for i in 0..gt.len() {
        if !valid[i] {
            continue;
        }
        let (p, g) = (pred[i], gt[i]);
        acc[0] += (p - g).abs() / g;
        let ratio = if p / g > g / p { p / g } else { g / p };
        for k in 1..=3 {
            if ratio < 1.25f64.powi(k as i32) {
                acc[k] += 1.0;
            }
        }
        acc[4] += (p - g) * (p - g);
        acc[5] += (p.log10() - g.log10()).abs();
        n += 1.0;
    }
    let mut out = acc.map(|v| v / n);
    out[4] = out[4].sqrt();
    out
}

fn a9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let shape = [rng.random_range(1..4), 1, rng.random_range(2..12), rng.random_range(2..12)];
        let n: usize = shape.iter().product();
        let gt: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.1..10.0) }).collect();
        let pred: Vec<f64> = gt.iter().map(|&g| if g > 0.0 && rng.random_bool(0.3) { g * rng.random_range(0.7..1.4) } else { rng.random_range(0.1..10.0) }).collect();
        let mut valid: Vec<bool> = gt.iter().map(|&g| g > 0.0).collect();
        valid[0] = false;
        if !valid.iter().any(|&v| v) {
            continue;
        }
        let m = depth_metrics(&Tensor::from_vec(shape, pred.clone()).unwrap(), &Tensor::from_vec(shape, gt.clone()).unwrap(), &valid).unwrap();
        let o = oracle(&pred, &gt, &valid);
        for (a, b) in [m.rel, m.delta1, m.delta2, m.delta3, m.rmse, m.log10].iter().zip(o) {
            worst = worst.max((a - b).abs());
        }
    }
    Outcome { id: "A9", pass: worst <= 1e-7, detail: format!("100 instances, max abs diff {worst:.1e} (≤ 1e-7)") }
}

// ---------------------------------------------------------------- main

fn main() {
    let total = Instant::now();
    let mut outcomes = Vec::new();
    let emit = |o: Outcome, all: &mut Vec<Outcome>| {
        line(&o);
        all.push(o);
    };

    emit(a7_analytic(), &mut outcomes);
    emit(a9_metrics(), &mut outcomes);

    let cfg = ExperimentConfig::default();
    let train_a = load(&cfg.domain_a, cfg.sizes.train_a);
    let test_a = load(&cfg.domain_a_test(), cfg.sizes.test_a);
    let ood = load(&cfg.domain_b, cfg.sizes.ood);

    // A1: teacher quality floor.
    let t0 = Instant::now();
    let tcfg = TrainConfig { epochs: TEACHER_EPOCHS, lr: LR, seed: 0, ..Default::default() };
    let (teacher, trec) = train_teacher(&cfg.teacher, &train_a, Some(&test_a), &tcfg, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let d1 = metrics(&trec).delta1;
    emit(Outcome { id: "A1", pass: d1 >= 0.80 && secs <= 600.0, detail: format!("teacher δ1 {d1:.4} (≥ 0.80), {secs:.0}s (≤ 600s)") }, &mut outcomes);

    emit(a8_gradients(&teacher, &ood), &mut outcomes);

    // A5: histogram contrast.
    let t0 = Instant::now();
    let range = (0.0, cfg.teacher.max_depth);
    let gt_hist = depth_histogram(&[&train_a.depths], JSD_BINS, range).unwrap();
    let on_b = predict_all(&teacher, &ood.images, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let [_, c, h, w] = ood.images.shape();
    let noise = Tensor::from_vec([300, c, h, w], (0..300 * c * h * w).map(|_| StandardNormal.sample(&mut rng)).map(|v: f32| v.clamp(0.0, 1.0)).collect()).unwrap();
    let on_noise = predict_all(&teacher, &noise, 32).unwrap();
    let jsd_b = depth_histogram(&[&on_b], JSD_BINS, range).unwrap().jsd(&gt_hist).unwrap();
    let jsd_n = depth_histogram(&[&on_noise], JSD_BINS, range).unwrap().jsd(&gt_hist).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    emit(
        Outcome { id: "A5", pass: jsd_b < jsd_n && secs <= 120.0, detail: format!("JSD teacher-on-B {jsd_b:.4} < teacher-on-noise {jsd_n:.4}, {secs:.0}s (≤ 120s)") },
        &mut outcomes,
    );

    let mut records: Vec<RunRecord> = vec![trec];

    // A2: OOD images vs noise.
    let t0 = Instant::now();
    let mut kd = Vec::new();
    let mut kd_students = Vec::new();
    let mut noise_kd = Vec::new();
    for &seed in &SEEDS {
        let (s, r) = run_kd_ood(&teacher, &cfg.student, &ood, Some(&test_a), &student_cfg(seed), None).unwrap();
        kd_students.push(s);
        kd.push(r);
        noise_kd.push(run_random_noise_kd(&teacher, &cfg.student, cfg.sizes.ood, Some(&test_a), &student_cfg(seed), None).unwrap().1);
    }
    let secs = t0.elapsed().as_secs_f64();
    let kd_d1: Vec<f64> = kd.iter().map(|r| metrics(r).delta1).collect();
    let noise_d1: Vec<f64> = noise_kd.iter().map(|r| metrics(r).delta1).collect();
    let gaps: Vec<f64> = kd_d1.iter().zip(&noise_d1).map(|(a, b)| a - b).collect();
    emit(
        Outcome {
            id: "A2",
            pass: gaps.iter().all(|&g| g >= 0.30) && secs <= 900.0,
            detail: format!("δ1 kd_ood {} noise {} gaps {} (≥ 0.30 each), {secs:.0}s (≤ 900s)", fmt(&kd_d1), fmt(&noise_d1), fmt(&gaps)),
        },
        &mut outcomes,
    );

    // A3: data-free vs plain OOD distillation.
    let t0 = Instant::now();
    let mut df = Vec::new();
    for &seed in &SEEDS {
        df.push(run_datafree_distillation(&teacher, &cfg.student, &ood, Some(&test_a), &student_cfg(seed), None, None).unwrap().1);
    }
    let secs = t0.elapsed().as_secs_f64();
    let kd_rel: Vec<f64> = kd.iter().map(|r| metrics(r).rel).collect();
    let df_rel: Vec<f64> = df.iter().map(|r| metrics(r).rel).collect();
    let wins = kd_rel.iter().zip(&df_rel).filter(|(k, d)| d <= k).count();
    let improvement = median(kd_rel.iter().zip(&df_rel).map(|(k, d)| k - d).collect());
    emit(
        Outcome {
            id: "A3",
            pass: wins >= 2 && improvement >= -0.005 && secs <= 1200.0,
            detail: format!(
                "REL datafree {} kd_ood {}; {wins}/3 seeds ≤ (≥ 2), median improvement {improvement:.4} (≥ 0 − 0.005), {secs:.0}s (≤ 1200s)",
                fmt(&df_rel),
                fmt(&kd_rel)
            ),
        },
        &mut outcomes,
    );

    // A4: ablation lattice; "original" is the seed-0 run above.
    let mut rows = vec![format!("original δ1 {:.4} REL {:.4}", metrics(&df[0]).delta1, metrics(&df[0]).rel)];
    let mut ablations = Vec::new();
    let mut identical = false;
    let mut ran = true;
    for (name, flags) in AblationFlags::ablation_matrix().into_iter().skip(1) {
        let c = TrainConfig { ablation: flags, ..student_cfg(0) };
        let (s, r) = run_datafree_distillation(&teacher, &cfg.student, &ood, Some(&test_a), &c, Some(name.to_string()), None).unwrap();
        ran &= r.metrics.as_ref().is_some_and(|m| m.delta1.is_finite() && m.rel.is_finite());
        rows.push(format!("{name} δ1 {:.4} REL {:.4}", metrics(&r).delta1, metrics(&r).rel));
        if name == "all_disabled" {
            identical = s.params() == kd_students[0].params()
                && s.buffers() == kd_students[0].buffers()
                && r.losses() == kd[0].losses()
                && r.metrics == kd[0].metrics;
        }
        ablations.push(r);
    }
    emit(
        Outcome {
            id: "A4",
            pass: identical && ran,
            detail: format!("all_disabled ≡ kd_ood bit-for-bit: {identical}; {}", rows.join("; ")),
        },
        &mut outcomes,
    );

    // A10: OOD set size.
    let small = ood.truncated(300);
    let small_d1: Vec<f64> = SEEDS.iter().map(|&s| metrics(&run_kd_ood(&teacher, &cfg.student, &small, Some(&test_a), &student_cfg(s), None).unwrap().1).delta1).collect();
    let (m_big, m_small) = (median(kd_d1.clone()), median(small_d1.clone()));
    emit(
        Outcome { id: "A10", pass: m_big >= m_small, detail: format!("median δ1 size 1800 {m_big:.4} ≥ size 300 {m_small:.4} (per seed {})", fmt(&small_d1)) },
        &mut outcomes,
    );

    // A6: attack-then-distill.
    let t0 = Instant::now();
    let eps: Vec<f64> = [0.0, 1.0, 2.0, 4.0].iter().map(|e| e / 255.0).collect();
    let sweep = attack_then_distill_seeds(&teacher, &cfg.student, &ood, &eps, IFGSM_STEPS, Some(&test_a), &student_cfg(0), &SEEDS, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let per_eps: Vec<f64> = eps.iter().map(|&e| median(sweep.iter().filter(|r| r.config["epsilon"].as_f64() == Some(e)).map(|r| metrics(r).delta1).collect())).collect();
    let drop = per_eps[0] - per_eps[3];
    let monotone = per_eps.windows(2).all(|p| p[1] <= p[0] + 0.03);
    // Probe: teacher self-inconsistency under untargeted attacks.
    let probe_imgs = ood.images.gather(&(0..100).collect::<Vec<_>>());
    let clean = predict_all(&teacher, &probe_imgs, 32).unwrap();
    let all = vec![true; clean.data().len()];
    let probe: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|e| {
            let adv = ifgsm_attack(&teacher, &probe_imgs, None, e / 255.0, IFGSM_STEPS).unwrap();
            depth_loss(&predict_all(&teacher, &adv, 32).unwrap(), &clean, &all).unwrap().total
        })
        .collect();
    emit(
        Outcome {
            id: "A6",
            pass: drop >= 0.05 && monotone && secs <= 1200.0,
            detail: format!(
                "median δ1 over ε {{0,1,2,4}}/255 {}; drop {drop:.4} (≥ 0.05), non-increasing ±0.03: {monotone}, {secs:.0}s (≤ 1200s); teacher self-inconsistency at {{1,2,4,8}}/255 {}",
                fmt(&per_eps),
                fmt(&probe)
            ),
        },
        &mut outcomes,
    );

    records.extend(kd);
    records.extend(noise_kd);
    records.extend(df);
    records.extend(ablations);
    records.extend(sweep);
    let report_dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-report");
    let report = make_report(&records, &report_dir).unwrap();
    println!("report: {} rows in {}", report.rows.len(), report_dir.display());

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("acceptance: {}/{} passed in {:.0}s", outcomes.len() - failed.len(), outcomes.len(), total.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(" "));
        std::process::exit(1);
    }
}
