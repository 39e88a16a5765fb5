//! Consistent dropout: masks that are sampled once, recorded, and replayed.
//!
//! A forward pass routes its dropout sites through a [`MaskRouter`]. In fresh
//! mode each site samples a mask and pushes it to the sink; in replay mode
//! each site pops the next mask from the source instead. After the pass the
//! sink is returned as a [`MaskBundle`] and both queues are empty.

use std::collections::VecDeque;

use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Bit-packed keep mask, one bit per activation, least significant bit first.
///
/// Masks with `p == 0` keep everything and carry no bits at all.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    width: u32,
    batch: u32,
    p: f64,
    bits: Vec<u8>,
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config("dropout", format!("p must lie in [0, 1), got {p}")))
    }
}

fn check_extent(width: usize, batch: usize) -> Result<(u32, u32)> {
    match (u32::try_from(width), u32::try_from(batch)) {
        (Ok(w), Ok(b)) if w > 0 && b > 0 => Ok((w, b)),
        _ => Err(Error::Contract(format!("invalid mask extent {width}x{batch}"))),
    }
}

impl DropoutMask {
    pub fn all_ones(width: usize, batch: usize) -> Result<Self> {
        let (width, batch) = check_extent(width, batch)?;
        Ok(DropoutMask {
            width,
            batch,
            p: 0.0,
            bits: Vec::new(),
        })
    }

    /// Builds a mask from explicit keep flags, row-major over `batch × width`.
    pub fn from_keep(keep: &[bool], width: usize, batch: usize, p: f64) -> Result<Self> {
        check_p(p)?;
        let (w, b) = check_extent(width, batch)?;
        if keep.len() != width * batch {
            return Err(Error::shape("mask", &[batch, width], &[keep.len()]));
        }
        if p == 0.0 {
            if keep.iter().any(|&k| !k) {
                return Err(Error::Contract("a p = 0 mask must keep every unit".into()));
            }
            return Self::all_ones(width, batch);
        }
        let mut bits = vec![0u8; keep.len().div_ceil(8)];
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            bits[i / 8] |= 1 << (i % 8);
        }
        Ok(DropoutMask {
            width: w,
            batch: b,
            p,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn batch(&self) -> usize {
        self.batch as usize
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn len(&self) -> usize {
        self.width() * self.batch()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn keep(&self, i: usize) -> bool {
        debug_assert!(i < self.len());
        self.p == 0.0 || self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn keep_bits(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(|i| self.keep(i))
    }

    pub fn keep_count(&self) -> usize {
        if self.p == 0.0 {
            self.len()
        } else {
            self.bits.iter().map(|b| b.count_ones() as usize).sum()
        }
    }

    /// Per-activation multipliers: `1/(1-p)` for kept units, 0 for dropped.
    pub fn factors(&self) -> Vec<f64> {
        let scale = 1.0 / (1.0 - self.p);
        self.keep_bits().map(|k| if k { scale } else { 0.0 }).collect()
    }

    /// Rows `[start, start + count)` of the batch as a new mask.
    pub fn rows(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.batch() {
            return Err(Error::Routing(format!(
                "rows {start}..{} out of batch {}",
                start + count,
                self.batch
            )));
        }
        let w = self.width();
        let keep: Vec<bool> = (start * w..(start + count) * w).map(|i| self.keep(i)).collect();
        Self::from_keep(&keep, w, count, self.p)
    }

    fn byte_len(&self) -> usize {
        if self.p == 0.0 {
            0
        } else {
            self.len().div_ceil(8)
        }
    }
}

/// Samples a keep mask with one uniform draw per activation in row-major
/// order; `p == 0` consumes no draws.
pub fn sample_mask<R: RngCore + ?Sized>(rng: &mut R, width: usize, batch: usize, p: f64) -> Result<DropoutMask> {
    check_p(p)?;
    if p == 0.0 {
        return DropoutMask::all_ones(width, batch);
    }
    check_extent(width, batch)?;
    let keep: Vec<bool> = (0..width * batch).map(|_| rng.random::<f64>() >= p).collect();
    DropoutMask::from_keep(&keep, width, batch, p)
}

/// The ordered masks of one forward pass, one per dropout site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskBundle {
    masks: Vec<DropoutMask>,
}

const BUNDLE_VERSION: u8 = 1;
const MASK_HEADER: usize = 16;

impl MaskBundle {
    pub fn new(masks: Vec<DropoutMask>) -> Self {
        MaskBundle { masks }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[DropoutMask] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<DropoutMask> {
        self.masks
    }

    /// Samples one mask per `(width, p)` site, site by site, for a single
    /// batch element.
    pub fn sample<R: RngCore + ?Sized>(rng: &mut R, sites: &[(usize, f64)]) -> Result<Self> {
        sites
            .iter()
            .map(|&(w, p)| sample_mask(rng, w, 1, p))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// Concatenates per-element bundles along the batch axis, site by site.
    pub fn stack(parts: &[MaskBundle]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Ok(Self::empty());
        };
        let mut masks = Vec::with_capacity(first.len());
        for s in 0..first.len() {
            let (w, p) = (first.masks[s].width(), first.masks[s].p);
            let mut keep = Vec::new();
            let mut batch = 0;
            for part in parts {
                let m = part.masks.get(s).filter(|_| part.len() == first.len()).ok_or_else(|| {
                    Error::Routing(format!(
                        "cannot stack bundles of {} and {} sites",
                        first.len(),
                        part.len()
                    ))
                })?;
                if m.width() != w || m.p != p {
                    return Err(Error::Routing(format!(
                        "site {s}: cannot stack width {} p {} onto width {w} p {p}",
                        m.width(),
                        m.p
                    )));
                }
                keep.extend(m.keep_bits());
                batch += m.batch();
            }
            masks.push(DropoutMask::from_keep(&keep, w, batch, p)?);
        }
        Ok(Self::new(masks))
    }

    /// Splits a batched bundle into one bundle per batch element.
    pub fn split(&self) -> Result<Vec<MaskBundle>> {
        let Some(first) = self.masks.first() else {
            return Ok(Vec::new());
        };
        let batch = first.batch();
        if self.masks.iter().any(|m| m.batch() != batch) {
            return Err(Error::Routing("sites disagree on batch extent".into()));
        }
        (0..batch)
            .map(|b| {
                self.masks
                    .iter()
                    .map(|m| m.rows(b, 1))
                    .collect::<Result<Vec<_>>>()
                    .map(Self::new)
            })
            .collect()
    }

    pub fn serialized_len(&self) -> usize {
        1 + self.masks.iter().map(|m| MASK_HEADER + m.byte_len()).sum::<usize>()
    }

    /// Version byte, then per mask: width u32, batch u32, p f64 (little
    /// endian) followed by the packed keep bits (omitted when `p == 0`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.push(BUNDLE_VERSION);
        for m in &self.masks {
            out.extend_from_slice(&m.width.to_le_bytes());
            out.extend_from_slice(&m.batch.to_le_bytes());
            out.extend_from_slice(&m.p.to_le_bytes());
            out.extend_from_slice(&m.bits);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (&version, mut rest) = bytes
            .split_first()
            .ok_or_else(|| Error::Format("empty mask bundle payload".into()))?;
        if version != BUNDLE_VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let mut masks = Vec::new();
        while !rest.is_empty() {
            if rest.len() < MASK_HEADER {
                return Err(Error::Format("truncated mask header".into()));
            }
            let width = u32::from_le_bytes(rest[0..4].try_into().unwrap());
            let batch = u32::from_le_bytes(rest[4..8].try_into().unwrap());
            let p = f64::from_le_bytes(rest[8..16].try_into().unwrap());
            if width == 0 || batch == 0 || !(0.0..1.0).contains(&p) {
                return Err(Error::Format(format!("invalid mask header {width}x{batch} p={p}")));
            }
            let n = width as usize * batch as usize;
            let nbytes = if p == 0.0 { 0 } else { n.div_ceil(8) };
            rest = &rest[MASK_HEADER..];
            if rest.len() < nbytes {
                return Err(Error::Format("truncated mask bits".into()));
            }
            let bits = rest[..nbytes].to_vec();
            rest = &rest[nbytes..];
            if !n.is_multiple_of(8) && nbytes > 0 && bits[nbytes - 1] >> (n % 8) != 0 {
                return Err(Error::Format("nonzero padding bits".into()));
            }
            masks.push(DropoutMask { width, batch, p, bits });
        }
        Ok(Self::new(masks))
    }
}

/// Where a forward pass gets its dropout masks from.
pub enum MaskMode<'a> {
    /// Dropout is the identity; nothing is recorded.
    Eval,
    /// Sample a fresh mask at every site from the given stream.
    Fresh(&'a mut dyn RngCore),
    /// Consume the provided masks in order.
    Replay(MaskBundle),
}

/// Per-pass source/sink bookkeeping for dropout sites.
pub struct MaskRouter<'a> {
    mode: MaskMode<'a>,
    source: VecDeque<DropoutMask>,
    sink: Vec<DropoutMask>,
    site: usize,
}

impl<'a> MaskRouter<'a> {
    pub fn new(mode: MaskMode<'a>) -> Self {
        let (mode, source) = match mode {
            MaskMode::Replay(b) => (MaskMode::Replay(MaskBundle::empty()), b.masks.into()),
            m => (m, VecDeque::new()),
        };
        MaskRouter {
            mode,
            source,
            sink: Vec::new(),
            site: 0,
        }
    }

    pub fn eval() -> Self {
        Self::new(MaskMode::Eval)
    }

    pub fn is_eval(&self) -> bool {
        matches!(self.mode, MaskMode::Eval)
    }

    /// Returns the mask for the next site, or `None` in eval mode.
    pub fn next(&mut self, width: usize, batch: usize, p: f64) -> Result<Option<DropoutMask>> {
        let site = self.site;
        self.site += 1;
        let mask = match &mut self.mode {
            MaskMode::Eval => return Ok(None),
            MaskMode::Fresh(rng) => sample_mask(&mut **rng, width, batch, p)?,
            MaskMode::Replay(_) => {
                let m = self
                    .source
                    .pop_front()
                    .ok_or_else(|| Error::Routing(format!("bundle exhausted at site {site}")))?;
                if m.width() != width || m.batch() != batch {
                    return Err(Error::Routing(format!(
                        "site {site} expects {batch}x{width}, mask is {}x{}",
                        m.batch(),
                        m.width()
                    )));
                }
                if m.p != p {
                    return Err(Error::Routing(format!("site {site} has p={p}, mask has p={}", m.p)));
                }
                m
            }
        };
        self.sink.push(mask.clone());
        Ok(Some(mask))
    }

    /// Ends the pass, returning the masks used. Unconsumed replay masks are
    /// an error.
    pub fn finish(mut self) -> Result<MaskBundle> {
        if !self.source.is_empty() {
            return Err(Error::Routing(format!(
                "{} unconsumed masks after {} sites",
                self.source.len(),
                self.site
            )));
        }
        Ok(MaskBundle::new(std::mem::take(&mut self.sink)))
    }
}

/// `x ⊙ mask / (1 - p)`. A `p == 0` mask returns `x` itself.
pub fn apply(tape: &mut Tape, x: Var, mask: &DropoutMask) -> Result<Var> {
    let n: usize = tape.shape(x).iter().product();
    if n != mask.len() {
        return Err(Error::shape("dropout", tape.shape(x), &[mask.batch(), mask.width()]));
    }
    if mask.p == 0.0 {
        return Ok(x);
    }
    tape.masked_scale(x, mask.factors())
}

/// A dropout site with fixed drop probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistentDropout {
    pub p: f64,
}

impl ConsistentDropout {
    pub fn new(p: f64) -> Result<Self> {
        check_p(p)?;
        Ok(ConsistentDropout { p })
    }

    /// Applies dropout to `x`, treating its leading `batch` rows as separate
    /// batch elements with `numel / batch` activations each.
    pub fn forward(&self, tape: &mut Tape, x: Var, batch: usize, router: &mut MaskRouter<'_>) -> Result<Var> {
        let n: usize = tape.shape(x).iter().product();
        if batch == 0 || !n.is_multiple_of(batch) {
            return Err(Error::shape("dropout", tape.shape(x), &[batch]));
        }
        match router.next(n / batch, batch, self.p)? {
            None => Ok(x),
            Some(mask) => apply(tape, x, &mask),
        }
    }
}
