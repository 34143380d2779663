//! Per-event summary statistics and two-sample discrepancies.

use serde::{Deserialize, Serialize};

use crate::dataset::{condition_vector, EventRecord, CONDITION_DIM};
use crate::error::{Error, Result};
use crate::manifold::{cube_to_sphere, spherical_angles};
use crate::net::{AdamW, AdamWConfig, Mlp};
use crate::oracle::Species;
use crate::rng;

pub const SUMMARY_DIM: usize = 34;

pub type SummaryVector = [f64; SUMMARY_DIM];

/// Index of the first deposition/count entry.
pub const TAIL: usize = 30;

/// Per species: means of `(θ_p, φ_p, |p|, θ_x, φ_x)` then their standard
/// deviations; followed by `E_dep, n_e⁻, n_e⁺, n_γ`.
pub fn summarize(ev: &EventRecord) -> Result<SummaryVector> {
    let mut s = [0.0; SUMMARY_DIM];
    let mut feats: [Vec<[f64; 5]>; 3] = Default::default();
    for o in &ev.outgoing {
        let sp = Species::from_pdg(o.pdg)?;
        let (tp, pp) = spherical_angles(&o.dir);
        let (tx, px) = spherical_angles(&cube_to_sphere(o.pos)?);
        feats[sp.index()].push([tp, pp, o.e, tx, px]);
    }
    for (si, f) in feats.iter().enumerate() {
        if f.is_empty() {
            continue;
        }
        let n = f.len() as f64;
        for j in 0..5 {
            let mean = f.iter().map(|x| x[j]).sum::<f64>() / n;
            let var = f.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
            s[10 * si + j] = mean;
            s[10 * si + 5 + j] = var.sqrt();
        }
        s[TAIL + 1 + si] = n;
    }
    s[TAIL] = ev.e_dep;
    Ok(s)
}

pub fn summarize_all(events: &[EventRecord]) -> Result<Vec<SummaryVector>> {
    events.iter().map(summarize).collect()
}

/// Jointly standardized copies of two samples. Features with (near) zero
/// pooled spread are dropped and counted.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub dropped: usize,
}

pub fn standardize<T: AsRef<[f64]>>(xs: &[T], ys: &[T]) -> Result<Standardized> {
    let dim = xs.first().or(ys.first()).map(|v| v.as_ref().len()).unwrap_or(0);
    if xs.iter().chain(ys).any(|v| v.as_ref().len() != dim) {
        return Err(Error::invalid("samples have inconsistent dimensions"));
    }
    let n = (xs.len() + ys.len()) as f64;
    let mut mean = vec![0.0; dim];
    for v in xs.iter().chain(ys) {
        mean.iter_mut().zip(v.as_ref()).for_each(|(m, x)| *m += x / n);
    }
    let mut var = vec![0.0; dim];
    for v in xs.iter().chain(ys) {
        var.iter_mut().zip(v.as_ref().iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m).powi(2) / n);
    }
    let keep: Vec<usize> = (0..dim).filter(|&j| var[j].sqrt() > 1e-12 * (1.0 + mean[j].abs())).collect();
    let map = |v: &T| -> Vec<f64> {
        let v = v.as_ref();
        keep.iter().map(|&j| (v[j] - mean[j]) / var[j].sqrt()).collect()
    };
    Ok(Standardized {
        xs: xs.iter().map(map).collect(),
        ys: ys.iter().map(map).collect(),
        dropped: dim - keep.len(),
    })
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance of the pooled sample, from at most 1000 evenly
/// spaced points of the lexicographically sorted pool (so the result does not
/// depend on input order).
pub fn median_distance(pool: &[&[f64]]) -> f64 {
    let stride = pool.len().div_ceil(1000).max(1);
    let mut sorted = pool.to_vec();
    if stride > 1 {
        sorted.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    }
    let sub: Vec<&[f64]> = sorted.into_iter().step_by(stride).collect();
    let mut d = Vec::with_capacity(sub.len() * sub.len() / 2);
    for i in 0..sub.len() {
        for j in 0..i {
            d.push(sq_dist(sub[i], sub[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 { *m } else { 1.0 }
}

/// Mean of `f(x, y)` over distinct within-sample pairs and over all cross pairs.
fn pair_means(xs: &[Vec<f64>], ys: &[Vec<f64>], f: impl Fn(f64) -> f64) -> (f64, f64, f64) {
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..i {
                acc += f(sq_dist(&s[i], &s[j]));
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in xs {
        for y in ys {
            cross += f(sq_dist(x, y));
        }
    }
    (within(xs), within(ys), cross / (xs.len() * ys.len()) as f64)
}

fn check_sizes(nx: usize, ny: usize) -> Result<()> {
    if nx < 2 || ny < 2 {
        return Err(Error::invalid(format!("two-sample metrics need at least 2 points per side, got {nx} and {ny}")));
    }
    Ok(())
}

/// Unbiased squared MMD with an RBF kernel on standardized features,
/// bandwidth by the median heuristic.
pub fn mmd<T: AsRef<[f64]>>(xs: &[T], ys: &[T]) -> Result<f64> {
    check_sizes(xs.len(), ys.len())?;
    let s = standardize(xs, ys)?;
    let pool: Vec<&[f64]> = s.xs.iter().chain(&s.ys).map(|v| v.as_slice()).collect();
    let sigma = median_distance(&pool);
    let g = 1.0 / (2.0 * sigma * sigma);
    let (kxx, kyy, kxy) = pair_means(&s.xs, &s.ys, |d2| (-g * d2).exp());
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` on standardized features.
pub fn energy_distance<T: AsRef<[f64]>>(xs: &[T], ys: &[T]) -> Result<f64> {
    check_sizes(xs.len(), ys.len())?;
    let s = standardize(xs, ys)?;
    let (dxx, dyy, dxy) = pair_means(&s.xs, &s.ys, f64::sqrt);
    Ok(2.0 * dxy - dxx - dyy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sem: f64,
}

impl Estimate {
    /// `|value| ≤ n·sem`.
    pub fn consistent_with_zero(&self, n: f64) -> bool {
        self.value.abs() <= n * self.sem
    }
}

/// Splits `n` items into `k` disjoint contiguous parts of equal size.
fn parts(n: usize, k: usize) -> Result<Vec<std::ops::Range<usize>>> {
    let size = n / k.max(1);
    if k < 2 || size < 2 {
        return Err(Error::invalid(format!("cannot split {n} items into {k} parts of at least 2")));
    }
    Ok((0..k).map(|i| i * size..(i + 1) * size).collect())
}

/// Point estimate on the full pools; sem = std / √K over K disjoint parts.
pub fn subsample_report<T>(
    metric: impl Fn(&[T], &[T]) -> Result<f64>,
    xs: &[T],
    ys: &[T],
    k: usize,
) -> Result<Estimate> {
    let (px, py) = (parts(xs.len(), k)?, parts(ys.len(), k)?);
    let per: Vec<f64> = px
        .into_iter()
        .zip(py)
        .map(|(a, b)| metric(&xs[a], &ys[b]))
        .collect::<Result<_>>()?;
    Ok(Estimate {
        value: metric(xs, ys)?,
        sem: sem(&per),
    })
}

/// Sample standard deviation over √n.
pub fn sem(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
}

/// Rank-statistic AUC, `P(score of a positive > score of a negative)` with ties
/// counted half (midranks).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != labels.len() {
        return Err(Error::invalid("auc needs both classes and one score per label"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        rank_sum += idx[i..=j].iter().filter(|&&t| labels[t]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of each class used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 30,
            batch_size: 256,
            lr: 2e-3,
            train_fraction: 0.5,
        }
    }
}

/// Summary vector and condition vector of one event.
pub fn classifier_features(ev: &EventRecord, e_cutoff: f64) -> Result<Vec<f64>> {
    let mut f = summarize(ev)?.to_vec();
    f.extend_from_slice(&condition_vector(&ev.condition()?, e_cutoff));
    Ok(f)
}

/// Held-out AUC of a condition-parametrized classifier separating `p`
/// (label 1) from `q`; sem over K disjoint parts of the held-out set.
pub fn classifier_auc(
    p: &[EventRecord],
    q: &[EventRecord],
    e_cutoff: f64,
    cfg: &ClassifierConfig,
    k: usize,
    seed: u64,
) -> Result<Estimate> {
    let (np, nq) = (p.len().max(1) as f64, q.len().max(1) as f64);
    if np / nq > 10.0 || nq / np > 10.0 {
        return Err(Error::invalid(format!("class imbalance {} : {} exceeds 10:1", p.len(), q.len())));
    }
    let fp = p.iter().map(|e| classifier_features(e, e_cutoff)).collect::<Result<Vec<_>>>()?;
    let fq = q.iter().map(|e| classifier_features(e, e_cutoff)).collect::<Result<Vec<_>>>()?;
    classifier_auc_features(&fp, &fq, cfg, k, seed)
}

pub fn classifier_auc_features(fp: &[Vec<f64>], fq: &[Vec<f64>], cfg: &ClassifierConfig, k: usize, seed: u64) -> Result<Estimate> {
    use rand::seq::SliceRandom;
    let split = |n: usize, tag: u64| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, &[tag]));
        let cut = ((n as f64) * cfg.train_fraction).round() as usize;
        let held = idx.split_off(cut.min(n));
        (idx, held)
    };
    let (tp, hp) = split(fp.len(), 0);
    let (tq, hq) = split(fq.len(), 1);
    if tp.len() < 2 || tq.len() < 2 || hp.len() < 2 * k || hq.len() < 2 * k {
        return Err(Error::invalid("not enough events for the classifier split"));
    }
    let train_x: Vec<&Vec<f64>> = tp.iter().map(|&i| &fp[i]).chain(tq.iter().map(|&i| &fq[i])).collect();
    let train_y: Vec<bool> = tp.iter().map(|_| true).chain(tq.iter().map(|_| false)).collect();
    let dim = fp.first().or(fq.first()).map(|v| v.len()).unwrap_or(0);
    // standardization from the training split only
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| train_x.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let s = (train_x.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 { s } else { f64::INFINITY }
        })
        .collect();
    let norm = |v: &Vec<f64>| -> Vec<f64> { (0..dim).map(|j| (v[j] - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = train_x.iter().map(|v| norm(v)).collect();

    let mut net = Mlp::new(&[dim, cfg.hidden, cfg.hidden, 1], rng::named(seed, "classifier"))?;
    let mut opt = AdamW::new(
        &net.params,
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, &[2, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let b = chunk.len();
            let x: Vec<f64> = chunk.iter().flat_map(|&i| xs[i].iter().copied()).collect();
            let (z, cache) = net.forward(&x, b);
            // binary cross-entropy on logits
            let d: Vec<f64> = z
                .iter()
                .zip(chunk)
                .map(|(&zi, &i)| (crate::net::ops::sigmoid(zi) - if train_y[i] { 1.0 } else { 0.0 }) / b as f64)
                .collect();
            let g = net.backward(&cache, &d, b);
            opt.step(&mut net.params, &g)?;
        }
    }
    let score = |idx: &[usize], f: &[Vec<f64>]| -> Vec<f64> {
        let x: Vec<f64> = idx.iter().flat_map(|&i| norm(&f[i])).collect();
        net.forward(&x, idx.len()).0
    };
    let (sp, sq) = (score(&hp, fp), score(&hq, fq));
    let full = |a: &[f64], b: &[f64]| -> Result<f64> {
        let s: Vec<f64> = a.iter().chain(b).copied().collect();
        let l: Vec<bool> = a.iter().map(|_| true).chain(b.iter().map(|_| false)).collect();
        auc(&s, &l)
    };
    let value = full(&sp, &sq)?;
    let per: Vec<f64> = parts(sp.len(), k)?
        .into_iter()
        .zip(parts(sq.len(), k)?)
        .map(|(a, b)| full(&sp[a], &sq[b]))
        .collect::<Result<_>>()?;
    Ok(Estimate { value, sem: sem(&per) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mmd: Estimate,
    pub ed: Estimate,
    pub auc: Option<Estimate>,
    pub n_eval: usize,
    pub k_subsamples: usize,
}

/// MMD and energy distance on summary vectors with K-part uncertainties.
pub fn distance_report<T: AsRef<[f64]>>(xs: &[T], ys: &[T], k: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        mmd: subsample_report(|a, b| mmd(a, b), xs, ys, k)?,
        ed: subsample_report(|a, b| energy_distance(a, b), xs, ys, k)?,
        auc: None,
        n_eval: xs.len().min(ys.len()),
        k_subsamples: k,
    })
}

/// Full report including the classifier AUC.
pub fn full_report(p: &[EventRecord], q: &[EventRecord], e_cutoff: f64, cfg: &ClassifierConfig, k: usize, seed: u64) -> Result<MetricReport> {
    let (sp, sq) = (summarize_all(p)?, summarize_all(q)?);
    let mut r = distance_report(&sp, &sq, k)?;
    r.auc = Some(classifier_auc(p, q, e_cutoff, cfg, k, seed)?);
    Ok(r)
}

/// Dimension of the classifier input.
pub const CLASSIFIER_DIM: usize = SUMMARY_DIM + CONDITION_DIM;
