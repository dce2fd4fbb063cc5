//! RTTM I/O, hypothesis timelines and diarization error rate.
//!
//! All interval algebra runs on an integer grid of 0.1 ms ticks, so set
//! operations and the error identity `miss + fa + spkerr = der * scored`
//! hold exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{SadMark, Segment};

const TICKS_PER_SECOND: f64 = 10_000.0;

fn to_ticks(t: f64) -> i64 {
    (t * TICKS_PER_SECOND).round() as i64
}

fn to_seconds(ticks: i64) -> f64 {
    ticks as f64 / TICKS_PER_SECOND
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub conversation: String,
    pub start_s: f64,
    pub end_s: f64,
    pub speaker: String,
}

/// Speaker turns, possibly spanning several conversations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    pub turns: Vec<Turn>,
}

impl Timeline {
    pub fn new() -> Self {
        Timeline::default()
    }

    pub fn push(
        &mut self,
        conversation: &str,
        start_s: f64,
        end_s: f64,
        speaker: &str,
    ) -> Result<()> {
        if !(start_s.is_finite() && end_s.is_finite() && start_s >= 0.0 && end_s > start_s) {
            return Err(Error::invalid(format!(
                "turn needs 0 <= start < end, got [{start_s}, {end_s}]"
            )));
        }
        self.turns.push(Turn {
            conversation: conversation.to_string(),
            start_s,
            end_s,
            speaker: speaker.to_string(),
        });
        Ok(())
    }

    pub fn conversations(&self) -> BTreeSet<&str> {
        self.turns.iter().map(|t| t.conversation.as_str()).collect()
    }

    pub fn speakers(&self, conversation: &str) -> BTreeSet<&str> {
        self.turns
            .iter()
            .filter(|t| t.conversation == conversation)
            .map(|t| t.speaker.as_str())
            .collect()
    }

    /// Same-speaker turns merged where they touch or overlap; sorted by
    /// conversation, start, then speaker.
    pub fn merged(&self) -> Timeline {
        let mut out = Timeline::new();
        for ((conv, spk), set) in self.speaker_sets() {
            for (a, b) in set.0 {
                out.turns.push(Turn {
                    conversation: conv.clone(),
                    start_s: to_seconds(a),
                    end_s: to_seconds(b),
                    speaker: spk.clone(),
                });
            }
        }
        out.sort();
        out
    }

    fn sort(&mut self) {
        self.turns.sort_by(|a, b| {
            a.conversation
                .cmp(&b.conversation)
                .then(a.start_s.total_cmp(&b.start_s))
                .then(a.speaker.cmp(&b.speaker))
                .then(a.end_s.total_cmp(&b.end_s))
        });
    }

    fn speaker_sets(&self) -> BTreeMap<(String, String), Ticks> {
        let mut raw: BTreeMap<(String, String), Vec<(i64, i64)>> = BTreeMap::new();
        for t in &self.turns {
            raw.entry((t.conversation.clone(), t.speaker.clone()))
                .or_default()
                .push((to_ticks(t.start_s), to_ticks(t.end_s)));
        }
        raw.into_iter()
            .map(|(k, v)| (k, Ticks::from_intervals(v)))
            .collect()
    }

    pub fn write_rttm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_rttm())?;
        Ok(())
    }

    pub fn to_rttm(&self) -> String {
        let mut s = String::new();
        for t in &self.turns {
            let _ = writeln!(
                s,
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                t.conversation,
                t.start_s,
                t.end_s - t.start_s,
                t.speaker
            );
        }
        s
    }

    pub fn read_rttm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Timeline::parse_rttm(&fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Parses `SPEAKER` records; other record types and `;;` comments are skipped.
    pub fn parse_rttm(text: &str, origin: &str) -> Result<Self> {
        let mut tl = Timeline::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() || f[0].starts_with(";;") || f[0] != "SPEAKER" {
                continue;
            }
            if f.len() < 8 {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("SPEAKER record needs at least 8 fields, got {}", f.len()),
                ));
            }
            let num = |s: &str, what: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(origin, i + 1, format!("bad {what} {s:?}")))
            };
            let tbeg = num(f[3], "onset")?;
            let tdur = num(f[4], "duration")?;
            if tdur <= 0.0 || tbeg < 0.0 {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("turn needs onset >= 0 and duration > 0, got {tbeg} {tdur}"),
                ));
            }
            tl.push(f[1], tbeg, tbeg + tdur, f[7])?;
        }
        Ok(tl)
    }
}

/// Sorted, disjoint half-open tick intervals.
#[derive(Debug, Clone, Default, PartialEq)]
struct Ticks(Vec<(i64, i64)>);

impl Ticks {
    fn from_intervals(mut v: Vec<(i64, i64)>) -> Self {
        v.retain(|&(a, b)| b > a);
        v.sort_unstable();
        let mut out: Vec<(i64, i64)> = Vec::with_capacity(v.len());
        for (a, b) in v {
            match out.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        Ticks(out)
    }

    fn contains(&self, t: i64) -> bool {
        let i = self.0.partition_point(|&(a, _)| a <= t);
        i > 0 && t < self.0[i - 1].1
    }
}

/// Turns a per-segment labelling into a timeline. Adjacent overlapping
/// segments split their overlap at its midpoint; same-label pieces merge.
pub fn build_hypothesis(segments: &[Segment], labels: &[usize]) -> Result<Timeline> {
    if segments.len() != labels.len() {
        return Err(Error::Dimension {
            expected: segments.len(),
            actual: labels.len(),
            context: "labels per segment",
        });
    }
    let mut by_conv: BTreeMap<&str, Vec<(i64, i64, usize)>> = BTreeMap::new();
    for (s, &l) in segments.iter().zip(labels) {
        by_conv.entry(&s.conversation_id).or_default().push((
            to_ticks(s.start_s),
            to_ticks(s.end_s),
            l,
        ));
    }
    let mut tl = Timeline::new();
    for (conv, mut segs) in by_conv {
        segs.sort_unstable();
        let mut pieces = Vec::with_capacity(segs.len());
        for (i, &(a, b, l)) in segs.iter().enumerate() {
            let mut lo = a;
            let mut hi = b;
            if i > 0 && segs[i - 1].1 > a {
                lo = lo.max((a + segs[i - 1].1).div_euclid(2));
            }
            if i + 1 < segs.len() && segs[i + 1].0 < b {
                hi = hi.min((segs[i + 1].0 + b).div_euclid(2));
            }
            if hi > lo {
                pieces.push((l, lo, hi));
            }
        }
        let mut per_label: BTreeMap<usize, Vec<(i64, i64)>> = BTreeMap::new();
        for (l, a, b) in pieces {
            per_label.entry(l).or_default().push((a, b));
        }
        for (l, v) in per_label {
            for (a, b) in Ticks::from_intervals(v).0 {
                tl.turns.push(Turn {
                    conversation: conv.to_string(),
                    start_s: to_seconds(a),
                    end_s: to_seconds(b),
                    speaker: format!("spk{l}"),
                });
            }
        }
    }
    tl.sort();
    Ok(tl)
}

/// Maximum-weight one-to-one assignment on a `rows x cols` weight matrix
/// (Hungarian algorithm on negated integer weights). Entry `r` of the
/// result is the column matched to row `r`, if any.
pub fn optimal_assignment(weights: &[Vec<i64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    let n = rows.max(cols);
    if n == 0 {
        return vec![None; rows];
    }
    let cost = |i: usize, j: usize| -> i64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0
        }
    };
    // 1-based potentials formulation; p[j] is the row assigned to column j
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for (j, &i) in p.iter().enumerate().take(n + 1).skip(1) {
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerOptions {
    /// Half-width of the no-score zone around every reference boundary.
    pub collar_s: f64,
    /// Drop regions where two or more reference speakers talk.
    pub ignore_overlap: bool,
}

impl Default for DerOptions {
    fn default() -> Self {
        DerOptions {
            collar_s: 0.25,
            ignore_overlap: true,
        }
    }
}

/// Error components of one or more conversations, in ticks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    scored: i64,
    miss: i64,
    fa: i64,
    spkerr: i64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.scored += o.scored;
        self.miss += o.miss;
        self.fa += o.fa;
        self.spkerr += o.spkerr;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerResult {
    /// Scored reference speaker time.
    pub scored_time_s: f64,
    pub missed_time_s: f64,
    pub false_alarm_time_s: f64,
    pub speaker_error_time_s: f64,
    pub der: f64,
}

impl DerResult {
    fn from_counts(c: Counts) -> Result<Self> {
        if c.scored <= 0 {
            return Err(Error::Unscorable("no scored reference speech".into()));
        }
        Ok(DerResult {
            scored_time_s: to_seconds(c.scored),
            missed_time_s: to_seconds(c.miss),
            false_alarm_time_s: to_seconds(c.fa),
            speaker_error_time_s: to_seconds(c.spkerr),
            der: (c.miss + c.fa + c.spkerr) as f64 / c.scored as f64,
        })
    }

    pub fn error_time_s(&self) -> f64 {
        self.missed_time_s + self.false_alarm_time_s + self.speaker_error_time_s
    }
}

/// Per-conversation scores plus their time-weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct DerReport {
    pub conversations: Vec<(String, usize, DerResult)>,
    pub total: DerResult,
    totals_by_count: BTreeMap<usize, Counts>,
}

impl DerReport {
    /// Totals for conversations with 2, 3 and at least 4 reference speakers.
    pub fn breakdown(&self) -> Vec<(String, DerResult)> {
        let mut groups: BTreeMap<usize, Counts> = BTreeMap::new();
        for (&k, &c) in &self.totals_by_count {
            *groups.entry(k.clamp(2, 4)).or_default() += c;
        }
        groups
            .into_iter()
            .filter_map(|(k, c)| {
                let name = if k == 4 {
                    ">=4".to_string()
                } else {
                    k.to_string()
                };
                DerResult::from_counts(c).ok().map(|r| (name, r))
            })
            .collect()
    }
}

impl fmt::Display for DerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = |f: &mut fmt::Formatter<'_>, name: &str, r: &DerResult| {
            writeln!(
                f,
                "{name} {:.3} {:.3} {:.3} {:.3} {:.3}",
                r.scored_time_s,
                r.missed_time_s,
                r.false_alarm_time_s,
                r.speaker_error_time_s,
                r.der * 100.0
            )
        };
        writeln!(f, "conversation scored miss fa spkerr der")?;
        for (c, _, r) in &self.conversations {
            line(f, c, r)?;
        }
        line(f, "TOTAL", &self.total)
    }
}

/// DER over every conversation in the reference.
pub fn compute_der(
    reference: &Timeline,
    hypothesis: &Timeline,
    sad: &[SadMark],
    opts: DerOptions,
) -> Result<DerResult> {
    Ok(score(reference, hypothesis, sad, opts)?.total)
}

/// Per conversation, the hypothesis label each reference speaker maps to
/// under the maximum-overlap assignment on the scored region.
pub fn optimal_speaker_mapping(
    reference: &Timeline,
    hypothesis: &Timeline,
    sad: &[SadMark],
    opts: DerOptions,
) -> Result<BTreeMap<String, BTreeMap<String, Option<String>>>> {
    let mut out = BTreeMap::new();
    for conv in Conversation::all(reference, hypothesis, sad, opts)? {
        let pieces = conv.pieces();
        let mapping = optimal_assignment(&overlaps(&pieces, conv.refs.len(), conv.hyps.len()));
        let names = conv
            .ref_names
            .iter()
            .zip(mapping)
            .map(|(r, m)| (r.clone(), m.map(|j| conv.hyp_names[j].clone())))
            .collect();
        out.insert(conv.id, names);
    }
    Ok(out)
}

/// Everything needed to score one conversation.
struct Conversation {
    id: String,
    ref_names: Vec<String>,
    refs: Vec<Ticks>,
    hyp_names: Vec<String>,
    hyps: Vec<Ticks>,
    region: Ticks,
    no_score: Ticks,
    ignore_overlap: bool,
}

/// Elementary scored piece: length, active reference and hypothesis speakers.
type Piece = (i64, Vec<usize>, Vec<usize>);

impl Conversation {
    fn all(
        reference: &Timeline,
        hypothesis: &Timeline,
        sad: &[SadMark],
        opts: DerOptions,
    ) -> Result<Vec<Self>> {
        if !(opts.collar_s >= 0.0 && opts.collar_s.is_finite()) {
            return Err(Error::invalid(format!(
                "collar {} must be a non-negative time",
                opts.collar_s
            )));
        }
        let collar = to_ticks(opts.collar_s);
        let refs = reference.speaker_sets();
        let hyps = hypothesis.speaker_sets();
        let pick =
            |m: &BTreeMap<(String, String), Ticks>, conv: &str| -> (Vec<String>, Vec<Ticks>) {
                m.iter()
                    .filter(|((c, _), _)| c == conv)
                    .map(|((_, s), t)| (s.clone(), t.clone()))
                    .unzip()
            };
        let mut out = Vec::new();
        for conv in reference.conversations() {
            let (ref_names, refs) = pick(&refs, conv);
            let (hyp_names, hyps) = pick(&hyps, conv);
            let marks: Vec<(i64, i64)> = sad
                .iter()
                .filter(|m| m.conversation_id == conv)
                .map(|m| (to_ticks(m.start_s), to_ticks(m.end_s)))
                .collect();
            let region = if marks.is_empty() {
                // without SAD marks, score the reference speech
                Ticks::from_intervals(refs.iter().flat_map(|t| t.0.iter().copied()).collect())
            } else {
                Ticks::from_intervals(marks)
            };
            let no_score = Ticks::from_intervals(
                refs.iter()
                    .flat_map(|t| t.0.iter())
                    .flat_map(|&(a, b)| [(a - collar, a + collar), (b - collar, b + collar)])
                    .collect(),
            );
            out.push(Conversation {
                id: conv.to_string(),
                ref_names,
                refs,
                hyp_names,
                hyps,
                region,
                no_score,
                ignore_overlap: opts.ignore_overlap,
            });
        }
        Ok(out)
    }

    fn pieces(&self) -> Vec<Piece> {
        let mut cuts: Vec<i64> = Vec::new();
        for set in self
            .refs
            .iter()
            .chain(&self.hyps)
            .chain([&self.region, &self.no_score])
        {
            for &(a, b) in &set.0 {
                cuts.push(a);
                cuts.push(b);
            }
        }
        cuts.sort_unstable();
        cuts.dedup();
        let mut pieces = Vec::new();
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if !self.region.contains(a) || self.no_score.contains(a) {
                continue;
            }
            let r: Vec<usize> = (0..self.refs.len())
                .filter(|&i| self.refs[i].contains(a))
                .collect();
            if self.ignore_overlap && r.len() > 1 {
                continue;
            }
            let h: Vec<usize> = (0..self.hyps.len())
                .filter(|&j| self.hyps[j].contains(a))
                .collect();
            pieces.push((b - a, r, h));
        }
        pieces
    }

    fn counts(&self) -> Counts {
        let pieces = self.pieces();
        let mapping = optimal_assignment(&overlaps(&pieces, self.refs.len(), self.hyps.len()));
        let mut c = Counts::default();
        for (len, r, h) in &pieces {
            let (nr, nh) = (r.len() as i64, h.len() as i64);
            let correct = r
                .iter()
                .filter(|&&i| mapping[i].is_some_and(|j| h.contains(&j)))
                .count() as i64;
            c.scored += len * nr;
            c.miss += len * (nr - nh).max(0);
            c.fa += len * (nh - nr).max(0);
            c.spkerr += len * (nr.min(nh) - correct);
        }
        c
    }
}

fn overlaps(pieces: &[Piece], refs: usize, hyps: usize) -> Vec<Vec<i64>> {
    let mut overlap = vec![vec![0i64; hyps]; refs];
    for (len, r, h) in pieces {
        for &i in r {
            for &j in h {
                overlap[i][j] += len;
            }
        }
    }
    overlap
}

pub fn score(
    reference: &Timeline,
    hypothesis: &Timeline,
    sad: &[SadMark],
    opts: DerOptions,
) -> Result<DerReport> {
    let mut conversations = Vec::new();
    let mut total = Counts::default();
    let mut totals_by_count: BTreeMap<usize, Counts> = BTreeMap::new();
    for conv in Conversation::all(reference, hypothesis, sad, opts)? {
        let c = conv.counts();
        if c.scored > 0 {
            conversations.push((conv.id.clone(), conv.refs.len(), DerResult::from_counts(c)?));
        }
        total += c;
        *totals_by_count.entry(conv.refs.len()).or_default() += c;
    }
    Ok(DerReport {
        conversations,
        total: DerResult::from_counts(total)?,
        totals_by_count,
    })
}
