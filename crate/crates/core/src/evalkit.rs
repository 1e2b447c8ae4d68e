//! Depth metrics, histograms, adversarial probing and reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::distiller::{kd_loop, run_dir, KdSource, Method, RunRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{depth_loss_eval, valid_mask};
use crate::nets::{forward_depth, DepthNet, DepthNetworkSpec};
use crate::nn::Mode;
use crate::plot::{line_chart, Series};
use crate::simworld::LoadedDataset;
use crate::tensor::{Scalar, Tensor};

/// Bin count used for every histogram comparison.
pub const JSD_BINS: usize = 20;

/// Default IFGSM iteration count.
pub const IFGSM_STEPS: usize = 10;

/// IFGSM per-step size (one intensity level), capped at ε.
pub const IFGSM_STEP_SIZE: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
    pub log10: f64,
    pub n_pixels: u64,
}

/// REL, δ1–δ3 (thresholds 1.25^k), RMSE and mean |log10| error over valid
/// pixels.
pub fn depth_metrics<F: Scalar>(pred: &Tensor<F>, gt: &Tensor<F>, valid: &[bool]) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() || valid.len() != gt.data().len() {
        return Err(Error::Shape(format!("metrics need matching maps, got {:?} and {:?}", pred.shape(), gt.shape())));
    }
    let (mut rel, mut d1, mut d2, mut d3, mut se, mut lg) = (0.0, 0u64, 0u64, 0u64, 0.0, 0.0);
    let mut n = 0u64;
    let t1 = 1.25;
    let (t2, t3) = (t1 * t1, t1 * t1 * t1);
    for ((&p, &g), &v) in pred.data().iter().zip(gt.data()).zip(valid) {
        if !v {
            continue;
        }
        let (p, g) = (p.to_f64().unwrap_or(f64::NAN), g.to_f64().unwrap_or(f64::NAN));
        if !(g > 0.0) {
            return Err(Error::InvalidInput(format!("ground-truth depth {g} on a valid pixel")));
        }
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::NonFinite(format!("prediction {p} is not a positive finite depth")));
        }
        rel += (p - g).abs() / g;
        let ratio = (p / g).max(g / p);
        d1 += (ratio < t1) as u64;
        d2 += (ratio < t2) as u64;
        d3 += (ratio < t3) as u64;
        se += (p - g) * (p - g);
        lg += (p.log10() - g.log10()).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("no valid pixels to evaluate".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        rel: rel / nf,
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        rmse: (se / nf).sqrt(),
        log10: lg / nf,
        n_pixels: n,
    })
}

/// Eval-mode predictions for a whole image set, in batches.
pub fn predict_all(net: &DepthNet<f32>, images: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>> {
    let n = images.batch();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch.max(1)).min(n)).collect();
        parts.push(forward_depth(net, &images.gather(&idx))?);
        start += idx.len();
    }
    Tensor::stack(&parts)
}

/// Metrics of `net` on a dataset with ground truth.
pub fn evaluate(net: &DepthNet<f32>, data: &LoadedDataset) -> Result<MetricsReport> {
    Ok(evaluate_with_histogram(net, data)?.0)
}

/// [`evaluate`] plus the histogram of the predictions over `(0, max_depth]`.
pub fn evaluate_with_histogram(net: &DepthNet<f32>, data: &LoadedDataset) -> Result<(MetricsReport, DepthHistogram)> {
    let pred = predict_all(net, &data.images, 32)?;
    let valid = valid_mask(&data.depths);
    let m = depth_metrics(&pred, &data.depths, &valid)?;
    let h = depth_histogram(&[&pred], JSD_BINS, (0.0, net.spec().max_depth))?;
    Ok((m, h))
}

/// Per-bin counts of valid (finite, positive) depths over `range`.
/// Depths outside the range land in the edge bins, so the counts always sum
/// to the number of valid pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHistogram {
    pub range: (f64, f64),
    pub counts: Vec<u64>,
}

impl DepthHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalized mass function.
    pub fn mass(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let (lo, hi) = self.range;
        let w = (hi - lo) / self.bins() as f64;
        (0..self.bins()).map(|i| lo + (i as f64 + 0.5) * w).collect()
    }

    /// Jensen–Shannon divergence (bits) to another histogram on the same bins.
    pub fn jsd(&self, other: &DepthHistogram) -> Result<f64> {
        if self.range != other.range || self.bins() != other.bins() {
            return Err(Error::Shape(format!(
                "histograms differ in binning: {} bins over {:?} vs {} over {:?}",
                self.bins(),
                self.range,
                other.bins(),
                other.range
            )));
        }
        jsd(&self.mass(), &other.mass())
    }
}

pub fn depth_histogram<F: Scalar>(maps: &[&Tensor<F>], bins: usize, range: (f64, f64)) -> Result<DepthHistogram> {
    let (lo, hi) = range;
    if bins < 2 {
        return Err(Error::InvalidInput(format!("a histogram needs at least 2 bins, got {bins}")));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidInput(format!("invalid histogram range {range:?}")));
    }
    let mut counts = vec![0u64; bins];
    let scale = bins as f64 / (hi - lo);
    for m in maps {
        for v in m.data() {
            let d = v.to_f64().unwrap_or(f64::NAN);
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let b = ((d - lo) * scale).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::InvalidInput("no valid depths to histogram".into()));
    }
    Ok(DepthHistogram { range, counts })
}

/// Jensen–Shannon divergence with base-2 logarithms; inputs must be
/// probability vectors of equal length.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!("mass functions of length {} and {}", p.len(), q.len())));
    }
    for v in [p, q] {
        let s: f64 = v.iter().sum();
        if v.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("expected a probability vector".into()));
        }
    }
    let kl = |a: &[f64], m: &[f64]| -> f64 { a.iter().zip(m).filter(|(&x, _)| x > 0.0).map(|(&x, &y)| x * (x / y).log2()).sum() };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0))
}

/// Iterative FGSM against the (eval-mode) network: `steps` sign-gradient
/// ascent steps of size `min(epsilon, 1/255)` on the depth loss w.r.t.
/// `targets`, projected onto the ∞-ball of radius `epsilon` around the input
/// and onto `[0, 1]`.
///
/// Without `targets` the clean predictions are used; at the clean point every
/// error is zero, so ties in `|p − t|` are broken towards larger depth.
pub fn ifgsm_attack(net: &DepthNet<f32>, images: &Tensor<f32>, targets: Option<&Tensor<f32>>, epsilon: f64, steps: usize) -> Result<Tensor<f32>> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be finite and non-negative, got {epsilon}")));
    }
    if steps == 0 {
        return Err(Error::InvalidInput("the attack needs at least one step".into()));
    }
    if epsilon == 0.0 {
        return Ok(images.clone());
    }
    let n = images.batch();
    if let Some(t) = targets {
        if t.shape() != [n, 1, images.height(), images.width()] {
            return Err(Error::Shape(format!("attack targets {:?} do not match images {:?}", t.shape(), images.shape())));
        }
    }
    let alpha = epsilon.min(IFGSM_STEP_SIZE) as f32;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + 8).min(n)).collect();
        start += idx.len();
        let x0 = images.gather(&idx);
        let (t, tie_break) = match targets {
            Some(t) => (t.gather(&idx), false),
            None => (forward_depth(net, &x0)?, true),
        };
        let valid = valid_mask(&t);
        let n_valid = valid.iter().filter(|&&v| v).count().max(1) as f32;
        let bounds: Vec<(f32, f32)> = x0.data().iter().map(|&v| ball(v, epsilon)).collect();
        let mut x = x0.clone();
        for _ in 0..steps {
            let trace = net.trace(&x, Mode::Eval)?;
            let mut dpred = depth_loss_eval(&trace.output, &t, &valid, true)?.dpred.expect("requested");
            if tie_break {
                for ((g, (&p, &q)), &v) in dpred.data_mut().iter_mut().zip(trace.output.data().iter().zip(t.data())).zip(&valid) {
                    if v && p == q {
                        *g += 1.0 / (0.5 * n_valid);
                    }
                }
            }
            let dx = net.backward(&trace, Some(&dpred), None, None, true).expect("input gradient requested");
            if !dx.is_finite() {
                return Err(Error::NonFinite("attack gradient w.r.t. the input".into()));
            }
            for ((v, &g), &(lo, hi)) in x.data_mut().iter_mut().zip(dx.data()).zip(&bounds) {
                let s = if g > 0.0 {
                    alpha
                } else if g < 0.0 {
                    -alpha
                } else {
                    0.0
                };
                *v = (*v + s).clamp(lo, hi);
            }
        }
        parts.push(x);
    }
    Tensor::stack(&parts)
}

/// `[max(0, x − ε), min(1, x + ε)]` in f32, tightened so that every value in
/// it is within ε of `x` in exact arithmetic.
fn ball(x: f32, eps: f64) -> (f32, f32) {
    let within = |v: f32| (v as f64 - x as f64).abs() <= eps;
    let mut lo = ((x as f64 - eps) as f32).max(0.0);
    while !within(lo) {
        lo = next_toward(lo, x);
    }
    let mut hi = ((x as f64 + eps) as f32).min(1.0);
    while !within(hi) {
        hi = next_toward(hi, x);
    }
    (lo.min(x), hi.max(x))
}

fn next_toward(v: f32, target: f32) -> f32 {
    if v < target {
        v.next_up()
    } else {
        v.next_down()
    }
}

/// For each ε, perturbs the OOD images with [`ifgsm_attack`] (pushing the
/// teacher away from its own clean predictions) and distills a student on the attacked images
/// paired with the teacher's predictions on them.
#[allow(clippy::too_many_arguments)]
pub fn attack_then_distill(
    teacher: &DepthNet<f32>,
    student_spec: &DepthNetworkSpec,
    ood: &LoadedDataset,
    epsilons: &[f64],
    steps: usize,
    eval: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    out_root: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    attack_then_distill_seeds(teacher, student_spec, ood, epsilons, steps, eval, cfg, &[cfg.seed], out_root)
}

/// [`attack_then_distill`] over several seeds; each attack is computed once.
/// Records are ordered by ε, then seed.
#[allow(clippy::too_many_arguments)]
pub fn attack_then_distill_seeds(
    teacher: &DepthNet<f32>,
    student_spec: &DepthNetworkSpec,
    ood: &LoadedDataset,
    epsilons: &[f64],
    steps: usize,
    eval: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    seeds: &[u64],
    out_root: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    if epsilons.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidInput("attack sweep needs at least one bound and one seed".into()));
    }
    let mut records = Vec::with_capacity(epsilons.len() * seeds.len());
    for &eps in epsilons {
        let attacked = ifgsm_attack(teacher, &ood.images, None, eps, steps)?;
        let targets = predict_all(teacher, &attacked, 32)?;
        let label = eps_label(eps);
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let out = out_root.map(|r| run_dir(r, Method::KdOod, Some(&label), seed));
            let extra = json!({ "epsilon": eps, "attack_steps": steps, "attack_target": "clean_prediction" });
            let source = KdSource::Images { images: &attacked, targets: targets.clone() };
            let (_, rec) = kd_loop(Method::KdOod, Some(label.clone()), teacher, student_spec, source, eval, &cfg, extra, out.as_deref())?;
            log::info!("attack eps {eps:.5} seed {seed}: delta1 {:?}", rec.metrics.as_ref().map(|m| m.delta1));
            records.push(rec);
        }
    }
    Ok(records)
}

fn eps_label(eps: f64) -> String {
    let k = eps * 255.0;
    if (k - k.round()).abs() < 1e-9 {
        format!("eps{}of255", k.round() as i64)
    } else {
        format!("eps{eps}")
    }
}

/// One table row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub method: Method,
    pub label: Option<String>,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub metrics: Option<MetricsReport>,
    pub final_loss: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Files written, relative to the report directory.
    pub files: Vec<String>,
}

impl Report {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("metrics.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn record_epsilon(r: &RunRecord) -> Option<f64> {
    r.config.get("epsilon").and_then(|v| v.as_f64())
}

/// Writes `metrics.json`, `metrics.txt` and PNG figures (loss curves,
/// prediction histograms, ε sweep when at least two bounds are present) into
/// `out_dir`. Rows are ordered by method, then label, then seed; rows sharing
/// a name get a seed suffix.
pub fn make_report(records: &[RunRecord], out_dir: &Path) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::InvalidInput("a report needs at least one run record".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut order: Vec<&RunRecord> = records.iter().collect();
    order.sort_by(|a, b| (a.method, &a.label, a.seed).cmp(&(b.method, &b.label, b.seed)));

    let mut name_count: BTreeMap<String, usize> = BTreeMap::new();
    for r in &order {
        *name_count.entry(r.display_name()).or_default() += 1;
    }
    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    let rows: Vec<ReportRow> = order
        .iter()
        .map(|r| {
            let base = r.display_name();
            let mut name = if name_count[&base] > 1 { format!("{base}@seed{}", r.seed) } else { base };
            let k = used.entry(name.clone()).or_default();
            *k += 1;
            if *k > 1 {
                name = format!("{name}#{k}");
            }
            ReportRow {
                name,
                method: r.method,
                label: r.label.clone(),
                seed: r.seed,
                epsilon: record_epsilon(r),
                metrics: r.metrics.clone(),
                final_loss: r.curve.last().map(|e| e.loss),
                wall_seconds: r.wall_seconds,
            }
        })
        .collect();

    let mut files = vec!["metrics.json".to_string(), "metrics.txt".to_string()];
    let write = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("metrics.txt", text_table(&rows))?;

    if order.iter().any(|r| !r.curve.is_empty()) {
        let series: Vec<Series> =
            order.iter().map(|r| Series { points: r.curve.iter().map(|e| (e.epoch as f64, e.loss)).collect(), bars: false }).collect();
        line_chart(&out_dir.join("loss_curves.png"), &series, 480, 320)?;
        files.push("loss_curves.png".into());
    }
    let hists: Vec<&DepthHistogram> = order.iter().filter_map(|r| r.prediction_histogram.as_ref()).collect();
    if !hists.is_empty() {
        let series: Vec<Series> =
            hists.iter().map(|h| Series { points: h.bin_centers().into_iter().zip(h.mass()).collect(), bars: false }).collect();
        line_chart(&out_dir.join("histograms.png"), &series, 480, 320)?;
        files.push("histograms.png".into());
    }
    let mut sweep: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        if let (Some(e), Some(m)) = (r.epsilon, &r.metrics) {
            sweep.entry(r.seed).or_default().push((e, m.delta1));
        }
    }
    let distinct = {
        let mut e: Vec<f64> = rows.iter().filter_map(|r| r.epsilon).collect();
        e.sort_by(f64::total_cmp);
        e.dedup();
        e.len()
    };
    if distinct >= 2 {
        let series: Vec<Series> = sweep
            .into_values()
            .map(|mut pts| {
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { points: pts, bars: false }
            })
            .collect();
        line_chart(&out_dir.join("eps_sweep.png"), &series, 480, 320)?;
        files.push("eps_sweep.png".into());
    }

    let report = Report { rows, files };
    let p = out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format(&p, e.to_string()))?;
    write("metrics.json", text + "\n")?;
    Ok(report)
}

fn text_table(rows: &[ReportRow]) -> String {
    let header = ["name", "REL", "d1", "d2", "d3", "RMSE", "log10", "loss", "secs"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let m = r.metrics.as_ref();
        cells.push(vec![
            r.name.clone(),
            f(m.map(|m| m.rel)),
            f(m.map(|m| m.delta1)),
            f(m.map(|m| m.delta2)),
            f(m.map(|m| m.delta3)),
            f(m.map(|m| m.rmse)),
            f(m.map(|m| m.log10)),
            f(r.final_loss),
            format!("{:.1}", r.wall_seconds),
        ]);
    }
    let widths: Vec<usize> = (0..header.len()).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// Loads every `run.json` under the given directories (a directory that is
/// itself a run is taken as is).
pub fn collect_records(dirs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for d in dirs {
        if d.join("run.json").is_file() || d.is_file() {
            out.push(RunRecord::load(d)?);
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(d).map_err(|e| Error::io(d, e))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("run.json").is_file()).collect();
        if subs.is_empty() {
            return Err(Error::Missing(format!("no run.json in {}", d.display())));
        }
        subs.sort();
        for s in subs {
            out.push(RunRecord::load(&s)?);
        }
    }
    Ok(out)
}
