//! End-to-end composition: segment embeddings, the fitted back-end and
//! per-conversation scoring.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::backend::{
    conversation_pca, fit_pca_whitener, fit_plda, length_normalize, score_matrix, Embedding,
    PldaModel, Whitener,
};
use crate::clustering::ScoredConversation;
use crate::container;
use crate::error::{Error, Result};
use crate::features::{segment_speech, FeatureMatrix, SadMark, Segment, SegmentConfig};
use crate::network::Network;
use crate::training::Corpus;

const BACKEND_MAGIC: &[u8; 4] = b"XBKE";
const BACKEND_VERSION: u32 = 1;

/// Embeds each segment's frames, clipped to the available features.
pub fn embed_segments(
    net: &Network,
    feats: &FeatureMatrix,
    segments: &[Segment],
) -> Result<Vec<Embedding>> {
    segments
        .iter()
        .map(|s| {
            let end = s.frame_range.end.min(feats.num_frames());
            if s.frame_range.start >= end {
                return Err(Error::invalid(format!(
                    "segment {} lies past the end of its features",
                    s.id()
                )));
            }
            Ok(Embedding {
                id: s.id(),
                vector: net.extract_embedding(&feats.frames(s.frame_range.start..end))?,
            })
        })
        .collect()
}

/// Windows every training utterance like conversation speech and embeds
/// the windows; returns the embeddings with their speaker labels.
pub fn embed_corpus(
    net: &Network,
    corpus: &Corpus,
    seg: &SegmentConfig,
) -> Result<(Vec<Embedding>, Vec<String>)> {
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for u in corpus.utterances() {
        let feats = FeatureMatrix::new(u.features.clone());
        let region = SadMark::new(
            u.id.clone(),
            0.0,
            u.features.nrows() as f64 * seg.frame_shift_s,
        )?;
        for e in embed_segments(net, &feats, &segment_speech(&[region], seg))? {
            embs.push(e);
            labels.push(corpus.speakers()[u.speaker].clone());
        }
    }
    Ok((embs, labels))
}

/// Global whitening plus a PLDA model living in the whitened space.
#[derive(Debug, Clone, PartialEq)]
pub struct Backend {
    pub whitener: Whitener,
    pub plda: PldaModel,
    /// Share of whitened dimensions kept by the per-conversation PCA.
    pub conversation_fraction: f64,
}

impl Backend {
    pub fn fit<L: Ord + Clone>(
        embeddings: &[DVector<f64>],
        labels: &[L],
        whiten_dim: usize,
        conversation_fraction: f64,
    ) -> Result<Self> {
        if !(conversation_fraction > 0.0 && conversation_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "conversation fraction {conversation_fraction} outside (0, 1]"
            )));
        }
        let normed = embeddings
            .iter()
            .map(length_normalize)
            .collect::<Result<Vec<_>>>()?;
        let whitener = fit_pca_whitener(&normed, whiten_dim)?;
        let white = normed
            .iter()
            .map(|v| whitener.apply(v))
            .collect::<Result<Vec<_>>>()?;
        let plda = fit_plda(&white, labels)?;
        Ok(Backend {
            whitener,
            plda,
            conversation_fraction,
        })
    }

    /// Length normalization followed by whitening.
    pub fn prepare(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.whitener.apply(&length_normalize(v)?)
    }

    /// Pairwise scores of one conversation's embeddings after projecting
    /// both the embeddings and the PLDA model onto the conversation's own
    /// principal directions.
    pub fn score_conversation(&self, embeddings: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let white = embeddings
            .iter()
            .map(|v| self.prepare(v))
            .collect::<Result<Vec<_>>>()?;
        let p = conversation_pca(&white, self.conversation_fraction)?;
        let model = self.plda.project(&p)?;
        let reduced: Vec<DVector<f64>> = white.iter().map(|v| &p * v).collect();
        score_matrix(&model, &reduced)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_magic(w, BACKEND_MAGIC)?;
        container::write_u32(w, BACKEND_VERSION)?;
        container::write_f64_blob(w, &[self.conversation_fraction])?;
        self.whitener.write_to(w)?;
        self.plda.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        container::expect_magic(r, BACKEND_MAGIC)?;
        let version = container::read_u32(r)?;
        if version != BACKEND_VERSION {
            return Err(Error::Format(format!(
                "unsupported back-end version {version}"
            )));
        }
        let fraction = container::read_f64_blob(r)?;
        if fraction.len() != 1 {
            return Err(Error::Format("back-end header is malformed".into()));
        }
        let whitener = Whitener::read_from(r)?;
        let plda = PldaModel::read_from(r)?;
        if plda.dim() != whitener.output_dim() {
            return Err(Error::Dimension {
                expected: whitener.output_dim(),
                actual: plda.dim(),
                context: "PLDA vs whitener output",
            });
        }
        Ok(Backend {
            whitener,
            plda,
            conversation_fraction: fraction[0],
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Backend::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Network, back-end and segmentation settings used to diarize.
#[derive(Debug, Clone)]
pub struct Diarizer {
    pub network: Network,
    pub backend: Backend,
    pub segments: SegmentConfig,
}

impl Diarizer {
    /// Segments the conversation's speech, embeds and scores the segments.
    pub fn score(
        &self,
        id: &str,
        feats: &FeatureMatrix,
        sad: &[SadMark],
    ) -> Result<ScoredConversation> {
        let marks: Vec<SadMark> = sad
            .iter()
            .filter(|m| m.conversation_id == id)
            .cloned()
            .collect();
        if marks.is_empty() {
            return Err(Error::invalid(format!(
                "no speech marks for conversation {id}"
            )));
        }
        let segments = segment_speech(&marks, &self.segments);
        let embs = embed_segments(&self.network, feats, &segments)?;
        let vectors: Vec<DVector<f64>> = embs.into_iter().map(|e| e.vector).collect();
        let scores = self.backend.score_conversation(&vectors)?;
        ScoredConversation::new(id, segments, scores)
    }
}
