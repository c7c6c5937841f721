//! Multiplicative augmentation of face crops with physiological maps.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::ingest::CropSequence;
use crate::physmaps::{MapMode, PhysMap, Signal};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSequence {
    pub crops: CropSequence,
    pub signal: Signal,
    pub mode: MapMode,
}

/// `out[t,i,j,c] = crops[t,i,j,c] * map[t,i',j',c']`, with gray maps
/// broadcast over channels and maps upsampled nearest-neighbor when the
/// crops are larger than the map.
pub fn apply_map(crops: &CropSequence, m: &PhysMap) -> Result<AugmentedSequence> {
    let (t, h, w, c) = crops.frames().dim();
    let (mt, ms, _, mc) = m.values.dim();
    if t != mt {
        return Err(Error::ShapeMismatch(format!(
            "{t} crop frames but {mt} map frames"
        )));
    }
    if h < ms {
        return Err(Error::ShapeMismatch(format!(
            "crops of {h}px are smaller than the {ms}px map"
        )));
    }
    if mc != m.mode.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} map with {mc} channels",
            m.mode
        )));
    }
    let src = |i: usize| i * ms / h;
    let frames = crops.frames();
    let out = Array4::from_shape_fn((t, h, w, c), |(f, i, j, ch)| {
        let mch = if mc == 1 { 0 } else { ch };
        frames[[f, i, j, ch]] * m.values[[f, src(i), src(j), mch]]
    });
    Ok(AugmentedSequence {
        crops: CropSequence::new(out, crops.fps())?,
        signal: m.signal,
        mode: m.mode,
    })
}
