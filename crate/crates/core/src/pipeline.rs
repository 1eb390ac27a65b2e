//! End-to-end helpers: plan + embed, extract + layout recovery, and
//! bit-level scoring against the ground-truth plan.

use crate::embedder::{content_bits, embed, extract, KeyFile, QimConfig};
use crate::error::{Error, Result};
use crate::matching::{partition, plan, AssignmentPlan, MatchConfig};
use crate::poscodec::{assign_positions, DecodedPatch};
use crate::tensor::{FrameSequence, Plane, WatermarkImage};

pub struct Embedded {
    pub video: FrameSequence,
    pub key: KeyFile,
    pub plan: AssignmentPlan,
}

pub fn embed_video(v: &FrameSequence, w: &WatermarkImage, cfg: &QimConfig) -> Result<Embedded> {
    // fail on capacity before spending time on matching
    KeyFile::derive(
        v.frames, v.height, v.width, v.channels, w.height, w.width, w.channels, cfg,
    )?;
    let plan = plan(
        w,
        v,
        &MatchConfig {
            patch_size: cfg.patch_size,
            seed: cfg.seed,
        },
    )?;
    let (video, key) = embed(v, w, &plan, cfg)?;
    Ok(Embedded { video, key, plan })
}

/// The `P` most confident records, kept in slot order. Ties keep the earlier
/// slot.
pub fn select_confident(decoded: &[DecodedPatch], positions: usize) -> Vec<DecodedPatch> {
    if decoded.len() <= positions {
        return decoded.to_vec();
    }
    let mut order: Vec<usize> = (0..decoded.len()).collect();
    order.sort_by(|&a, &b| decoded[b].confidence.total_cmp(&decoded[a].confidence));
    let mut keep: Vec<usize> = order[..positions].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| decoded[i].clone()).collect()
}

pub struct Recovered {
    pub watermark: Plane,
    /// every slot, in slot order
    pub decoded: Vec<DecodedPatch>,
    /// the records used for the layout, in slot order
    pub selected: Vec<DecodedPatch>,
    /// layout position of each selected record
    pub positions: Vec<usize>,
}

pub fn extract_watermark(v: &FrameSequence, key: &KeyFile) -> Result<Recovered> {
    let decoded = extract(v, key)?;
    let p = key.positions();
    let selected = select_confident(&decoded, p);
    let claims: Vec<(usize, f64)> = selected.iter().map(|d| (d.index, d.confidence)).collect();
    let positions = assign_positions(&claims, p)?;
    let ps = key.patch_size;
    let mut ordered = vec![Plane::zeros(ps, ps, key.wm_channels); p];
    for (d, &at) in selected.iter().zip(&positions) {
        ordered[at] = d.content.clone();
    }
    let watermark =
        crate::matching::reassemble(&ordered, key.rows(), key.cols(), ps, key.wm_channels)?;
    Ok(Recovered {
        watermark,
        decoded,
        selected,
        positions,
    })
}

/// Bit-level comparison of extracted slots against what was embedded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotScore {
    pub content_bits: usize,
    pub content_errors: usize,
    pub patches: usize,
    /// slots whose decoded index equals the embedded patch index
    pub index_correct: usize,
}

impl SlotScore {
    pub fn bit_error_rate(&self) -> f64 {
        if self.content_bits == 0 {
            0.0
        } else {
            self.content_errors as f64 / self.content_bits as f64
        }
    }

    pub fn position_accuracy(&self) -> f64 {
        if self.patches == 0 {
            1.0
        } else {
            self.index_correct as f64 / self.patches as f64
        }
    }
}

pub fn score(
    plan: &AssignmentPlan,
    w: &WatermarkImage,
    key: &KeyFile,
    decoded: &[DecodedPatch],
) -> Result<SlotScore> {
    let patches = partition(w, key.patch_size)?;
    let cap = key.cap();
    if decoded.len() != key.slots() {
        return Err(Error::dims(format!(
            "{} decoded slots, key describes {}",
            decoded.len(),
            key.slots()
        )));
    }
    let mut s = SlotScore {
        content_bits: 0,
        content_errors: 0,
        patches: plan.len(),
        index_correct: 0,
    };
    for a in &plan.assignments {
        let d = &decoded[a.frame * cap + a.region];
        if d.index == a.patch {
            s.index_correct += 1;
        }
        for c in 0..key.wm_channels {
            let want = content_bits(&patches.patches[a.patch], c, key.bit_depth);
            let got = content_bits(&d.content, c, key.bit_depth);
            s.content_bits += want.len();
            s.content_errors += want.iter().zip(&got).filter(|(x, y)| x != y).count();
        }
    }
    Ok(s)
}
