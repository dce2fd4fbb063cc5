//! Front end: waveform input, MFCC extraction, sliding cepstral mean
//! normalization and speech sub-segmentation.

mod cmn;
mod mfcc;
mod segment;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;

use crate::container;
use crate::error::{Error, Result};

pub use cmn::sliding_cmn;
pub use mfcc::{compute_mfcc, Mfcc, MfccConfig};
pub use segment::{merge_marks, segment_speech, SegmentConfig};

/// Default telephone-band sample rate.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
/// Number of cepstral coefficients produced by the default front end.
pub const NUM_CEPS: usize = 23;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a 16-bit mono PCM RIFF file. Only 8 kHz input is accepted.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(Error::Format(format!(
                "{}: expected 16-bit mono PCM, got {} channel(s) {}-bit {:?}",
                path.display(),
                spec.channels,
                spec.bits_per_sample,
                spec.sample_format
            )));
        }
        if spec.sample_rate != DEFAULT_SAMPLE_RATE {
            return Err(Error::Format(format!(
                "{}: sample rate {} Hz is not supported (resample to {} Hz)",
                path.display(),
                spec.sample_rate,
                DEFAULT_SAMPLE_RATE
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes the samples as 16-bit mono PCM, clamping to the i16 range.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(s.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// Frame-level features, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
}

const FEATURE_MAGIC: &[u8; 4] = b"FEA1";

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Self {
        FeatureMatrix {
            values,
            frame_shift_s: 0.010,
            frame_length_s: 0.025,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames() as f64 * self.frame_shift_s
    }

    /// Copies out a contiguous block of frames, clamped to the matrix.
    pub fn frames(&self, range: Range<usize>) -> DMatrix<f64> {
        let end = range.end.min(self.num_frames());
        let start = range.start.min(end);
        self.values.rows(start, end - start).into_owned()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        container::write_magic(&mut w, FEATURE_MAGIC)?;
        container::write_u32(&mut w, self.num_frames() as u32)?;
        container::write_u32(&mut w, self.dim() as u32)?;
        let (rows, cols) = (self.num_frames(), self.dim());
        container::write_f32s(
            &mut w,
            (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .map(|(r, c)| self.values[(r, c)] as f32),
        )?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        container::expect_magic(&mut r, FEATURE_MAGIC)?;
        let rows = container::read_u32(&mut r)? as usize;
        let cols = container::read_u32(&mut r)? as usize;
        let data = container::read_f32s(&mut r, rows * cols)?;
        let values = DMatrix::from_row_iterator(rows, cols, data.into_iter().map(f64::from));
        Ok(FeatureMatrix::new(values))
    }
}

/// Oracle speech region of one conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct SadMark {
    pub conversation_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl SadMark {
    pub fn new(conversation_id: impl Into<String>, start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s >= 0.0 && start_s < end_s) {
            return Err(Error::invalid(format!(
                "SAD mark needs 0 <= start < end, got [{start_s}, {end_s}]"
            )));
        }
        Ok(SadMark {
            conversation_id: conversation_id.into(),
            start_s,
            end_s,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Parses `<conversation_id> <start_s> <end_s>` lines.
pub fn read_sad(path: impl AsRef<Path>) -> Result<Vec<SadMark>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_sad(&text, &path.display().to_string())
}

pub fn parse_sad(text: &str, origin: &str) -> Result<Vec<SadMark>> {
    let mut marks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                origin,
                i + 1,
                "expected `<conversation_id> <start_s> <end_s>`",
            ));
        }
        let start: f64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(origin, i + 1, format!("bad start time {:?}", fields[1])))?;
        let end: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(origin, i + 1, format!("bad end time {:?}", fields[2])))?;
        let mark = SadMark::new(fields[0], start, end)
            .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        marks.push(mark);
    }
    Ok(marks)
}

pub fn write_sad(marks: &[SadMark], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for m in marks {
        writeln!(w, "{} {:.3} {:.3}", m.conversation_id, m.start_s, m.end_s)?;
    }
    w.flush()?;
    Ok(())
}

/// A fixed-length speech window cut from a SAD region.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub conversation_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub frame_range: Range<usize>,
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Stable identifier `<conversation>_<start_ms>-<end_ms>`.
    pub fn id(&self) -> String {
        format!(
            "{}_{:08}-{:08}",
            self.conversation_id,
            (self.start_s * 1000.0).round() as u64,
            (self.end_s * 1000.0).round() as u64
        )
    }

    /// Inverse of [`Segment::id`]; frame indices follow `frame_shift_s`.
    pub fn from_id(id: &str, frame_shift_s: f64) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed segment id {id:?}"));
        let (conv, times) = id.rsplit_once('_').ok_or_else(bad)?;
        let (a, b) = times.split_once('-').ok_or_else(bad)?;
        let start_ms: u64 = a.parse().map_err(|_| bad())?;
        let end_ms: u64 = b.parse().map_err(|_| bad())?;
        if conv.is_empty() || end_ms <= start_ms {
            return Err(bad());
        }
        let start_s = start_ms as f64 / 1000.0;
        let end_s = end_ms as f64 / 1000.0;
        Ok(Segment {
            conversation_id: conv.to_string(),
            start_s,
            end_s,
            frame_range: segment::frames_for(start_s, end_s, frame_shift_s),
        })
    }
}

/// Writes `<segment_id> <conversation_id> <start_s> <end_s>` lines.
pub fn write_segments(segments: &[Segment], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in segments {
        writeln!(
            w,
            "{} {} {:.3} {:.3}",
            s.id(),
            s.conversation_id,
            s.start_s,
            s.end_s
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_segments(path: impl AsRef<Path>, frame_shift_s: f64) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(
                &origin,
                i + 1,
                "expected `<segment_id> <conversation> <start> <end>`",
            ));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(&origin, i + 1, format!("bad time {s:?}")))
        };
        let (start_s, end_s) = (parse(fields[2])?, parse(fields[3])?);
        if !(start_s >= 0.0 && end_s > start_s) {
            return Err(Error::parse(
                &origin,
                i + 1,
                "segment needs 0 <= start < end",
            ));
        }
        out.push(Segment {
            conversation_id: fields[1].to_string(),
            start_s,
            end_s,
            frame_range: segment::frames_for(start_s, end_s, frame_shift_s),
        });
    }
    Ok(out)
}
