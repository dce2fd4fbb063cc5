//! Average-linkage agglomerative clustering of PLDA score matrices and
//! cross-validated stopping-threshold calibration.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;

use crate::der::{self, DerOptions, Timeline};
use crate::error::{Error, Result};
use crate::features::{SadMark, Segment};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Keep merging while the best linkage is at least this score.
    Threshold(f64),
    /// Merge down to this many clusters.
    OracleK(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Cluster of each segment, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Linkage of every merge performed, in order.
    pub merges: Vec<f64>,
}

impl Partition {
    pub fn num_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Full greedy merge schedule: `(kept, absorbed, linkage)` with clusters
/// named by their smallest member. Linkage is the mean of the original
/// pairwise scores between two clusters; ties go to the lowest `(i, j)`.
pub fn merge_schedule(scores: &DMatrix<f64>) -> Result<Vec<(usize, usize, f64)>> {
    let n = scores.nrows();
    if !scores.is_square() {
        return Err(Error::Dimension {
            expected: n,
            actual: scores.ncols(),
            context: "score matrix columns",
        });
    }
    for i in 0..n {
        for j in i + 1..n {
            if !scores[(i, j)].is_finite() {
                return Err(Error::invalid(format!("score ({i}, {j}) is not finite")));
            }
        }
    }
    // sums[(i, j)] is the total score between clusters i and j
    let mut sums = DMatrix::from_fn(n, n, |i, j| {
        if i < j {
            scores[(i, j)]
        } else {
            scores[(j, i)]
        }
    });
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut schedule = Vec::with_capacity(n.saturating_sub(1));
    while active.len() > 1 {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (x, &i) in active.iter().enumerate() {
            for &j in &active[x + 1..] {
                let link = sums[(i, j)] / (size[i] * size[j]) as f64;
                if link > best.2 {
                    best = (i, j, link);
                }
            }
        }
        let (i, j, link) = best;
        for &k in &active {
            if k != i && k != j {
                let s = sums[(i, k)] + sums[(j, k)];
                sums[(i, k)] = s;
                sums[(k, i)] = s;
            }
        }
        size[i] += size[j];
        active.retain(|&k| k != j);
        schedule.push((i, j, link));
    }
    Ok(schedule)
}

/// Labels after applying the first `merges` steps of a schedule.
fn cut(n: usize, schedule: &[(usize, usize, f64)], merges: usize) -> Partition {
    let mut owner: Vec<usize> = (0..n).collect();
    for &(i, j, _) in &schedule[..merges] {
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
    }
    let mut relabel = vec![usize::MAX; n];
    let mut next = 0;
    let labels = owner
        .iter()
        .map(|&o| {
            if relabel[o] == usize::MAX {
                relabel[o] = next;
                next += 1;
            }
            relabel[o]
        })
        .collect();
    Partition {
        labels,
        merges: schedule[..merges].iter().map(|m| m.2).collect(),
    }
}

fn merges_for(n: usize, schedule: &[(usize, usize, f64)], stop: StopRule) -> Result<usize> {
    match stop {
        StopRule::Threshold(t) => {
            if t.is_nan() {
                return Err(Error::invalid("threshold is NaN"));
            }
            Ok(schedule
                .iter()
                .position(|m| m.2 < t)
                .unwrap_or(schedule.len()))
        }
        StopRule::OracleK(k) => {
            if k == 0 || k > n {
                return Err(Error::invalid(format!(
                    "cannot form {k} clusters from {n} segments"
                )));
            }
            Ok(n - k)
        }
    }
}

pub fn ahc(scores: &DMatrix<f64>, stop: StopRule) -> Result<Partition> {
    let n = scores.nrows();
    if n == 0 {
        return Err(Error::invalid("nothing to cluster"));
    }
    let schedule = merge_schedule(scores)?;
    let m = merges_for(n, &schedule, stop)?;
    Ok(cut(n, &schedule, m))
}

/// One conversation's segments and their pairwise scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredConversation {
    pub id: String,
    pub segments: Vec<Segment>,
    pub scores: DMatrix<f64>,
}

impl ScoredConversation {
    pub fn new(
        id: impl Into<String>,
        segments: Vec<Segment>,
        scores: DMatrix<f64>,
    ) -> Result<Self> {
        if scores.nrows() != segments.len() || !scores.is_square() {
            return Err(Error::Dimension {
                expected: segments.len(),
                actual: scores.nrows(),
                context: "score matrix vs segments",
            });
        }
        if segments.is_empty() {
            return Err(Error::invalid("conversation has no segments"));
        }
        Ok(ScoredConversation {
            id: id.into(),
            segments,
            scores,
        })
    }

    pub fn diarize(&self, stop: StopRule) -> Result<Timeline> {
        let p = ahc(&self.scores, stop)?;
        der::build_hypothesis(&self.segments, &p.labels)
    }
}

/// `points` thresholds evenly spanning mean +- 2 standard deviations of all
/// off-diagonal scores.
pub fn default_grid(conversations: &[ScoredConversation], points: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = conversations
        .iter()
        .flat_map(|c| {
            let n = c.scores.nrows();
            (0..n).flat_map(move |i| (i + 1..n).map(move |j| c.scores[(i, j)]))
        })
        .collect();
    if vals.is_empty() || points == 0 {
        return Err(Error::invalid(
            "no pairwise scores to build a threshold grid from",
        ));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    if points == 1 {
        return Ok(vec![mean]);
    }
    Ok((0..points)
        .map(|k| mean - 2.0 * sd + 4.0 * sd * k as f64 / (points - 1) as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub threshold: f64,
    pub dev_der: f64,
    pub eval_der: f64,
    pub eval_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub folds: Vec<FoldResult>,
    /// Time-weighted DER over all held-out conversations.
    pub cv_der: f64,
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fold threshold dev_der eval_der")?;
        for (k, r) in self.folds.iter().enumerate() {
            writeln!(
                f,
                "{k} {:.6} {:.6} {:.6}",
                r.threshold, r.dev_der, r.eval_der
            )?;
        }
        writeln!(f, "cv {:.6}", self.cv_der)
    }
}

/// Pooled DER of a set of conversations diarized with one stop rule.
fn pooled_der(
    convs: &[&ScoredConversation],
    stop: StopRule,
    reference: &Timeline,
    sad: &[SadMark],
    opts: DerOptions,
) -> Result<der::DerResult> {
    let ids: BTreeSet<&str> = convs.iter().map(|c| c.id.as_str()).collect();
    let mut hyp = Timeline::new();
    for c in convs {
        hyp.turns.extend(c.diarize(stop)?.turns);
    }
    let mut refs = Timeline::new();
    refs.turns = reference
        .turns
        .iter()
        .filter(|t| ids.contains(t.conversation.as_str()))
        .cloned()
        .collect();
    let missing: Vec<&str> = ids
        .iter()
        .copied()
        .filter(|id| !refs.conversations().contains(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "no reference turns for {missing:?}"
        )));
    }
    der::compute_der(&refs, &hyp, sad, opts)
}

/// K-fold threshold selection. Conversations are sorted by id and dealt to
/// folds in turn; each fold is scored with the grid threshold that
/// minimizes DER on the other folds (ties go to the lower threshold).
pub fn calibrate_threshold(
    conversations: &[ScoredConversation],
    reference: &Timeline,
    sad: &[SadMark],
    folds: usize,
    grid: &[f64],
    opts: DerOptions,
) -> Result<CalibrationReport> {
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    if folds < 2 || conversations.len() < folds {
        return Err(Error::invalid(format!(
            "{folds}-fold calibration needs at least {folds} conversations, got {}",
            conversations.len()
        )));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut sorted: Vec<&ScoredConversation> = conversations.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut results = Vec::with_capacity(folds);
    let (mut err, mut scored) = (0.0, 0.0);
    for f in 0..folds {
        let (eval, dev): (Vec<_>, Vec<_>) =
            sorted.iter().enumerate().partition(|(p, _)| p % folds == f);
        let eval: Vec<&ScoredConversation> = eval.into_iter().map(|(_, c)| *c).collect();
        let dev: Vec<&ScoredConversation> = dev.into_iter().map(|(_, c)| *c).collect();
        let mut best = (grid[0], f64::INFINITY);
        for &t in &grid {
            let d = pooled_der(&dev, StopRule::Threshold(t), reference, sad, opts)?.der;
            if d < best.1 {
                best = (t, d);
            }
        }
        let held = pooled_der(&eval, StopRule::Threshold(best.0), reference, sad, opts)?;
        err += held.error_time_s();
        scored += held.scored_time_s;
        results.push(FoldResult {
            threshold: best.0,
            dev_der: best.1,
            eval_der: held.der,
            eval_ids: eval.iter().map(|c| c.id.clone()).collect(),
        });
    }
    Ok(CalibrationReport {
        folds: results,
        cv_der: err / scored,
    })
}
