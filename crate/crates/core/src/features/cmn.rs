use nalgebra::DMatrix;

use super::FeatureMatrix;

/// Sliding-window cepstral mean normalization.
///
/// Each frame has the per-coefficient mean of a centred window of
/// `window_frames` frames subtracted. The window is truncated at the
/// utterance edges. Utterances no longer than the window use the
/// whole-utterance mean.
pub fn sliding_cmn(feats: &FeatureMatrix, window_frames: usize) -> FeatureMatrix {
    let window = window_frames.max(1);
    let (rows, cols) = feats.values.shape();
    let x = &feats.values;
    let mut out = DMatrix::zeros(rows, cols);

    if rows <= window {
        for c in 0..cols {
            let mean = x.column(c).sum() / rows.max(1) as f64;
            for r in 0..rows {
                out[(r, c)] = x[(r, c)] - mean;
            }
        }
    } else {
        let half = window / 2;
        for c in 0..cols {
            // prefix[i] = sum of rows < i
            let mut prefix = Vec::with_capacity(rows + 1);
            prefix.push(0.0);
            let mut acc = 0.0;
            for r in 0..rows {
                acc += x[(r, c)];
                prefix.push(acc);
            }
            for r in 0..rows {
                let lo = r.saturating_sub(half);
                let hi = (r + window - half).min(rows);
                let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
                out[(r, c)] = x[(r, c)] - mean;
            }
        }
    }

    FeatureMatrix {
        values: out,
        frame_shift_s: feats.frame_shift_s,
        frame_length_s: feats.frame_length_s,
    }
}
