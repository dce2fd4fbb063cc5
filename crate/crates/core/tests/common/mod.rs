//! Oracles shared by the integration tests.
#![allow(dead_code)]

use diarkit::clustering::StopRule;
use diarkit::network::{ForwardOptions, Network, Pooling};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Mean softmax cross-entropy, written out with a max-shifted log-sum-exp.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.max();
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn cross_entropy_grad(logits: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
    let n = labels.len() as f64;
    let mut g = DMatrix::zeros(logits.nrows(), logits.ncols());
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.max();
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for c in 0..logits.ncols() {
            g[(r, c)] = ((row[c] - m).exp() / z - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    g
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    /// Largest per-tensor relative error `||a - n|| / max(||a||, ||n||, 1e-7)`.
    pub max_rel: f64,
    pub worst: String,
}

pub fn tensor_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // tensors whose gradient vanishes by symmetry (e.g. a shift ahead of batch norm) are judged absolutely
    diff / na.max(nb).max(1e-7)
}

/// Compares every trainable parameter's analytic gradient with central
/// differences of the cross-entropy. ReLU patterns are frozen at the
/// unperturbed pass so that a perturbation never crosses a kink.
pub fn check_gradients(
    net: &Network,
    examples: &[DMatrix<f64>],
    labels: &[usize],
    pooling: Pooling,
    step: f64,
) -> GradReport {
    let out = net
        .forward(examples, ForwardOptions::training(pooling))
        .unwrap();
    let tape = out.tape.unwrap();
    let patterns = tape.relu_patterns();
    let grads = net
        .backward(&tape, &cross_entropy_grad(&out.logits, labels))
        .unwrap();
    let loss_at = |n: &Network| {
        let mut opts = ForwardOptions::training(pooling);
        opts.relu_patterns = Some(&patterns);
        cross_entropy(&n.forward(examples, opts).unwrap().logits, labels)
    };
    let mut probe = net.clone();
    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for li in 0..net.params().len() {
        for pi in 0..net.params()[li].len() {
            let role = net.params()[li][pi].role;
            if !role.trainable() {
                continue;
            }
            let len = net.params()[li][pi].value.len();
            let mut numeric = vec![0.0; len];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let orig = probe.params()[li][pi].value[k];
                probe.params_mut()[li][pi].value[k] = orig + step;
                let up = loss_at(&probe);
                probe.params_mut()[li][pi].value[k] = orig - step;
                let down = loss_at(&probe);
                probe.params_mut()[li][pi].value[k] = orig;
                *slot = (up - down) / (2.0 * step);
            }
            let analytic = grads.0[li][pi].as_slice();
            let e = tensor_rel_err(analytic, &numeric);
            report.checked += len;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{} {:?}", net.spec().layers[li].name, role);
            }
        }
    }
    report
}

/// Moves every activated unit's bias so that the given quantile of its
/// pre-activations over `examples` sits at zero.
pub fn center_units(net: &mut Network, examples: &[DMatrix<f64>], pooling: Pooling, quantile: f64) {
    use diarkit::network::ParamRole;
    for li in 0..net.params().len() {
        if !net.spec().layers[li].activation {
            continue;
        }
        let tape = net
            .trace(examples, ForwardOptions::training(pooling))
            .unwrap();
        let z = tape.pre_activation(li).unwrap().clone();
        let name = net.spec().layers[li].name.clone();
        let bias = net.param_mut(&name, ParamRole::Bias).unwrap();
        for c in 0..z.ncols() {
            let mut col: Vec<f64> = z.column(c).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            let pos = quantile * (col.len() - 1) as f64;
            let (lo, frac) = (pos.floor() as usize, pos.fract());
            let hi = (lo + 1).min(col.len() - 1);
            bias[c] -= col[lo] + frac * (col[hi] - col[lo]);
        }
    }
}

/// Scales the linear map of every batch-normalized block by `c`. Apart from
/// the batch-norm epsilon the network computes the same function.
pub fn rescale_blocks(net: &mut Network, c: f64) {
    use diarkit::network::ParamRole;
    let activated: Vec<bool> = net.spec().layers.iter().map(|l| l.activation).collect();
    for (params, act) in net.params_mut().iter_mut().zip(activated) {
        if !act {
            continue;
        }
        let factorized = params.iter().any(|p| p.role == ParamRole::Factor1);
        for p in params.iter_mut() {
            match p.role {
                ParamRole::Weight | ParamRole::Factor1 | ParamRole::Factor2 => p.value *= c,
                ParamRole::Bias => p.value *= if factorized { c * c } else { c },
                _ => {}
            }
        }
    }
}

/// Puts a freshly initialized network at a generic point for finite
/// differences.
///
/// Deep ReLU + batch-norm stacks amplify perturbations by roughly 1.7x per
/// half-active block, and a unit that fires for a single example with a
/// tiny value puts batch norm inside its epsilon, where it is not smooth on
/// the scale of the step. Centring units so that about 90% of
/// pre-activations are positive keeps both effects small while every ReLU
/// still has inactive frames, and scaling each block's linear map by 10
/// (exact under batch norm) shrinks the step relative to the weights.
pub fn condition_for_gradcheck(
    net: &mut Network,
    examples: &[DMatrix<f64>],
    pooling: Pooling,
    seed: u64,
) {
    use diarkit::network::ParamRole;
    let mut r = rng(seed);
    for p in net.params_mut().iter_mut().flatten() {
        match p.role {
            ParamRole::BnShift => p.value = random_matrix(p.value.nrows(), 1, &mut r) * 0.1,
            ParamRole::BnScale => {
                p.value = random_matrix(p.value.nrows(), 1, &mut r).map(|v| 1.0 + 0.1 * v)
            }
            _ => {}
        }
    }
    center_units(net, examples, pooling, 0.1);
    rescale_blocks(net, 10.0);
}

pub fn gaussian_vector(dim: usize, rng: &mut ChaCha8Rng) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_fn(dim, |_, _| rng.sample(rand_distr::StandardNormal))
}

fn normal_pdf(x: f64, var: f64) -> f64 {
    (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// One-dimensional PLDA log-likelihood ratio by trapezoid integration over
/// the speaker variable `y ~ N(0, psi)`, with unit within-speaker noise.
pub fn plda_llr_numeric(psi: f64, u: f64, v: f64) -> f64 {
    let (lo, hi, steps) = (-20.0, 20.0, 100_000);
    let h = (hi - lo) / steps as f64;
    let f = |y: f64| normal_pdf(y, psi) * normal_pdf(u - y, 1.0) * normal_pdf(v - y, 1.0);
    let mut same = 0.5 * (f(lo) + f(hi));
    for k in 1..steps {
        same += f(lo + k as f64 * h);
    }
    same *= h;
    let diff = normal_pdf(u, psi + 1.0) * normal_pdf(v, psi + 1.0);
    same.ln() - diff.ln()
}

/// Random turns on a 10 ms grid in `[0, horizon_s)`; reference-style
/// timelines may overlap across speakers.
pub fn random_timeline(
    rng: &mut ChaCha8Rng,
    conv: &str,
    speakers: usize,
    turns: usize,
    horizon_s: f64,
) -> diarkit::der::Timeline {
    let mut tl = diarkit::der::Timeline::new();
    let grid = (horizon_s * 100.0) as i64;
    for _ in 0..turns {
        let a = rng.random_range(0..grid - 10);
        let b = rng.random_range(a + 10..=(a + 800).min(grid));
        let spk = rng.random_range(0..speakers);
        tl.push(conv, a as f64 / 100.0, b as f64 / 100.0, &format!("s{spk}"))
            .unwrap();
    }
    tl
}

/// All permutations of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// Largest total weight of a one-to-one row/column matching, by enumeration.
pub fn best_matching_weight(w: &[Vec<i64>]) -> i64 {
    let rows = w.len();
    let cols = w.first().map_or(0, |r| r.len());
    let n = rows.max(cols);
    permutations(n)
        .iter()
        .map(|p| (0..rows).filter(|&i| p[i] < cols).map(|i| w[i][p[i]]).sum())
        .max()
        .unwrap_or(0)
}

/// DER components in milliseconds by walking a 1 ms grid; every time in the
/// inputs must sit on that grid. Speakers are mapped by permutation search.
pub fn brute_force_der(
    reference: &diarkit::der::Timeline,
    hypothesis: &diarkit::der::Timeline,
    sad: (f64, f64),
    collar_s: f64,
    ignore_overlap: bool,
) -> (i64, i64, i64, i64) {
    let ms = |t: f64| (t * 1000.0).round() as i64;
    let names = |tl: &diarkit::der::Timeline| {
        let mut v: Vec<String> = tl.turns.iter().map(|t| t.speaker.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let (rn, hn) = (names(reference), names(hypothesis));
    let active = |tl: &diarkit::der::Timeline, names: &[String], t: i64| -> Vec<usize> {
        (0..names.len())
            .filter(|&k| {
                tl.turns
                    .iter()
                    .any(|x| x.speaker == names[k] && ms(x.start_s) <= t && t < ms(x.end_s))
            })
            .collect()
    };
    let c = ms(collar_s);
    // a boundary is any instant where some reference speaker starts or stops talking
    let on = |k: usize, t: i64| {
        reference
            .turns
            .iter()
            .any(|x| x.speaker == rn[k] && ms(x.start_s) <= t && t < ms(x.end_s))
    };
    let candidates: Vec<i64> = reference
        .turns
        .iter()
        .flat_map(|t| [ms(t.start_s), ms(t.end_s)])
        .collect();
    let bounds: Vec<i64> = candidates
        .into_iter()
        .filter(|&b| (0..rn.len()).any(|k| on(k, b - 1) != on(k, b)))
        .collect();
    let mut cells = Vec::new();
    for t in ms(sad.0)..ms(sad.1) {
        // the cell [t, t+1) lies in a collar iff |t - b| < c for its left end
        if bounds.iter().any(|&b| t >= b - c && t < b + c) {
            continue;
        }
        let r = active(reference, &rn, t);
        if ignore_overlap && r.len() > 1 {
            continue;
        }
        cells.push((r, active(hypothesis, &hn, t)));
    }
    let mut w = vec![vec![0i64; hn.len()]; rn.len()];
    for (r, h) in &cells {
        for &i in r {
            for &j in h {
                w[i][j] += 1;
            }
        }
    }
    let correct_total = best_matching_weight(&w);
    let (mut scored, mut miss, mut fa, mut overlap_pairs) = (0, 0, 0, 0);
    for (r, h) in &cells {
        let (nr, nh) = (r.len() as i64, h.len() as i64);
        scored += nr;
        miss += (nr - nh).max(0);
        fa += (nh - nr).max(0);
        overlap_pairs += nr.min(nh);
    }
    (scored, miss, fa, overlap_pairs - correct_total)
}

pub fn symmetric(n: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else if i < j {
            f(i, j)
        } else {
            f(j, i)
        }
    })
}

/// Greedy average linkage recomputed from scratch at every step, clusters
/// ordered by smallest member, first maximal pair wins.
pub fn reference_ahc(s: &DMatrix<f64>, stop: StopRule) -> Vec<usize> {
    let n = s.nrows();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        if let StopRule::OracleK(k) = stop {
            if clusters.len() == k {
                break;
            }
        }
        if clusters.len() == 1 {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += s[(i.min(j), i.max(j))];
                    }
                }
                let link = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|x| link > x.2) {
                    best = Some((a, b, link));
                }
            }
        }
        let (a, b, link) = best.unwrap();
        if let StopRule::Threshold(t) = stop {
            if link < t {
                break;
            }
        }
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort();
        clusters.sort_by_key(|c| c[0]);
    }
    let mut labels = vec![0; n];
    let mut order: Vec<&Vec<usize>> = clusters.iter().collect();
    order.sort_by_key(|c| c[0]);
    for (k, c) in order.iter().enumerate() {
        for &i in c.iter() {
            labels[i] = k;
        }
    }
    labels
}
