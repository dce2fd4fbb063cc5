use std::collections::BTreeMap;
use std::ops::Range;

use super::{SadMark, Segment};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentConfig {
    pub seg_len_s: f64,
    pub shift_s: f64,
    pub min_len_s: f64,
    pub frame_shift_s: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            seg_len_s: 1.5,
            shift_s: 0.75,
            min_len_s: 0.5,
            frame_shift_s: 0.010,
        }
    }
}

const EPS: f64 = 1e-9;

pub(crate) fn frames_for(start_s: f64, end_s: f64, frame_shift_s: f64) -> Range<usize> {
    let a = (start_s / frame_shift_s).round() as usize;
    let b = (end_s / frame_shift_s).round() as usize;
    a..b.max(a)
}

/// Sorts marks per conversation and merges overlapping or touching ones.
/// Conversations keep their first-appearance order.
pub fn merge_marks(marks: &[SadMark]) -> Vec<SadMark> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_conv: BTreeMap<&str, Vec<&SadMark>> = BTreeMap::new();
    for m in marks {
        by_conv
            .entry(&m.conversation_id)
            .or_insert_with(|| {
                order.push(&m.conversation_id);
                Vec::new()
            })
            .push(m);
    }
    let mut out = Vec::new();
    for conv in order {
        let mut list = by_conv.remove(conv).unwrap_or_default();
        list.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let mut current: Option<SadMark> = None;
        for m in list {
            match current.as_mut() {
                Some(cur) if m.start_s <= cur.end_s => cur.end_s = cur.end_s.max(m.end_s),
                _ => {
                    if let Some(done) = current.take() {
                        out.push(done);
                    }
                    current = Some(m.clone());
                }
            }
        }
        out.extend(current);
    }
    out
}

/// Cuts each SAD region into overlapping fixed-length windows.
///
/// Windows start at `region.start + k * shift`; the last one is truncated at
/// the region end. Regions shorter than a window give one segment spanning
/// the region, and anything shorter than `min_len_s` is dropped.
pub fn segment_speech(marks: &[SadMark], cfg: &SegmentConfig) -> Vec<Segment> {
    let mut out = Vec::new();
    for region in merge_marks(marks) {
        let mut k = 0usize;
        loop {
            let start = region.start_s + k as f64 * cfg.shift_s;
            let end = (start + cfg.seg_len_s).min(region.end_s);
            if end - start + EPS >= cfg.min_len_s {
                out.push(Segment {
                    conversation_id: region.conversation_id.clone(),
                    start_s: start,
                    end_s: end,
                    frame_range: frames_for(start, end, cfg.frame_shift_s),
                });
            }
            if end >= region.end_s - EPS {
                break;
            }
            k += 1;
        }
    }
    out
}
