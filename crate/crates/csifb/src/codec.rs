//! Feedback codecs: compress → quantize → feed back → recover.
//!
//! Three representation families share one pipeline. The sparse-domain
//! scheme transforms the CSI with the covariance eigenbasis, the
//! time-domain scheme with a unitary IDFT, and the frequency-domain scheme
//! feeds back raw subcarriers and rebuilds the rest by spline
//! interpolation. Selection is either a fixed index pattern (free) or the
//! per-realization largest-magnitude coefficients (paid for with index
//! bits). Bit accounting is exact, including the variable-selection index
//! cost, so schemes are comparable at equal feedback budget.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::{Fft, FftPlanner};

use crate::channel::{restructure, restructure_inverse, CsiLayout};
use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::interp::CubicSpline;
use crate::Cpx;

/// Representation family applied before selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// Identity representation; recovery interpolates missing subcarriers.
    Fcf,
    /// Unitary inverse DFT over the whole stacked vector.
    Tcf,
    /// Covariance eigenbasis (KLT), coefficients ordered by eigenvalue.
    Scf,
    /// No compression: every entry fed back.
    Full,
}

/// How the kept coefficient positions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    /// First `m` positions under descending-eigenvalue ordering.
    PcaFixed,
    /// Whole subcarriers on an even frequency grid (`m` multiple of the
    /// spatial block size).
    FcfEquidistant,
    /// First `⌈m/2⌉` and last `⌊m/2⌋` positions.
    TcfFixedBoundary,
    /// The `m` largest-magnitude coefficients; indices are fed back.
    VariableMagnitude,
    /// Everything (full feedback).
    All,
}

impl SelectionKind {
    pub fn is_variable(self) -> bool {
        matches!(self, SelectionKind::VariableMagnitude)
    }
}

/// One feedback scheme from the comparison matrix: representation family,
/// CSI vector layout and selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeId {
    FcfF1,
    FcfF2,
    TcfF1,
    TcfF2,
    TcfV1,
    TcfV2,
    ScfF,
    ScfV,
    Full,
}

impl SchemeId {
    pub const ALL: [SchemeId; 9] = [
        SchemeId::FcfF1,
        SchemeId::FcfF2,
        SchemeId::TcfF1,
        SchemeId::TcfF2,
        SchemeId::TcfV1,
        SchemeId::TcfV2,
        SchemeId::ScfF,
        SchemeId::ScfV,
        SchemeId::Full,
    ];

    pub fn kind(self) -> SchemeKind {
        match self {
            SchemeId::FcfF1 | SchemeId::FcfF2 => SchemeKind::Fcf,
            SchemeId::TcfF1 | SchemeId::TcfF2 | SchemeId::TcfV1 | SchemeId::TcfV2 => {
                SchemeKind::Tcf
            }
            SchemeId::ScfF | SchemeId::ScfV => SchemeKind::Scf,
            SchemeId::Full => SchemeKind::Full,
        }
    }

    pub fn layout(self) -> CsiLayout {
        match self {
            SchemeId::FcfF2 | SchemeId::TcfF2 | SchemeId::TcfV2 => CsiLayout::TrackMajor,
            _ => CsiLayout::SubcarrierMajor,
        }
    }

    pub fn selection(self) -> SelectionKind {
        match self {
            SchemeId::FcfF1 | SchemeId::FcfF2 => SelectionKind::FcfEquidistant,
            SchemeId::TcfF1 | SchemeId::TcfF2 => SelectionKind::TcfFixedBoundary,
            SchemeId::TcfV1 | SchemeId::TcfV2 | SchemeId::ScfV => SelectionKind::VariableMagnitude,
            SchemeId::ScfF => SelectionKind::PcaFixed,
            SchemeId::Full => SelectionKind::All,
        }
    }

    pub fn acronym(self) -> &'static str {
        match self {
            SchemeId::FcfF1 => "FCF-f1",
            SchemeId::FcfF2 => "FCF-f2",
            SchemeId::TcfF1 => "TCF-f1",
            SchemeId::TcfF2 => "TCF-f2",
            SchemeId::TcfV1 => "TCF-v1",
            SchemeId::TcfV2 => "TCF-v2",
            SchemeId::ScfF => "SCF-f",
            SchemeId::ScfV => "SCF-v",
            SchemeId::Full => "FULL",
        }
    }

    fn frame_code(self) -> u8 {
        match self {
            SchemeId::FcfF1 => 0,
            SchemeId::FcfF2 => 1,
            SchemeId::TcfF1 => 2,
            SchemeId::TcfF2 => 3,
            SchemeId::TcfV1 => 4,
            SchemeId::TcfV2 => 5,
            SchemeId::ScfF => 6,
            SchemeId::ScfV => 7,
            SchemeId::Full => 8,
        }
    }

    fn from_frame_code(code: u8) -> Result<Self> {
        SchemeId::ALL
            .iter()
            .copied()
            .find(|s| s.frame_code() == code)
            .ok_or_else(|| Error::MalformedData(format!("unknown scheme code {code}")))
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.acronym())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeId::ALL
            .iter()
            .copied()
            .find(|id| id.acronym().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme acronym {s:?}")))
    }
}

impl serde::Serialize for SchemeId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(self.acronym())
    }
}

impl<'de> serde::Deserialize<'de> for SchemeId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Quantization metadata carried with quantized feedback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantMeta {
    /// Bits per real dimension.
    pub q: u32,
    /// Per-vector normalization: the largest absolute real/imaginary part.
    pub scale: f64,
}

/// Selected (and possibly quantized) sparse coefficients ready to feed back.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFeedback {
    pub scheme: SchemeId,
    /// Kept coefficient count.
    pub m: usize,
    /// Coefficients in ascending-position order.
    pub coefficients: Vec<Cpx>,
    /// Ascending 0-based positions; only present for variable selection.
    pub indices: Option<Vec<u32>>,
    pub quant: Option<QuantMeta>,
}

/// Exact feedback-bit accounting for one scheme at one compression point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackBudget {
    pub q: u32,
    pub m: usize,
    pub total_bits: u64,
    /// Uncompressed bits (2NQ) over `total_bits`.
    pub gamma_fb: f64,
}

/// Index side-information cost of variable selection: ⌈2·log₂ ∏(n−k)⌉ bits.
fn variable_index_bits(m: usize, n: usize) -> u64 {
    let sum: f64 = (0..m).map(|k| ((n - k) as f64).log2()).sum();
    (2.0 * sum).ceil() as u64
}

/// Total feedback bits and compression ratio for a scheme (fixed selection:
/// 2mQ; variable: 2mQ plus index bits; full: 2nQ).
pub fn feedback_bits(scheme: SchemeId, m: usize, q: u32, n: usize) -> Result<FeedbackBudget> {
    if m < 1 || m > n {
        return Err(Error::InvalidParameter(format!(
            "kept coefficient count {m} must lie in 1..={n}"
        )));
    }
    if q < 1 {
        return Err(Error::InvalidParameter(
            "quantizer needs at least 1 bit".into(),
        ));
    }
    let total_bits = match scheme.selection() {
        SelectionKind::All => 2 * n as u64 * q as u64,
        SelectionKind::VariableMagnitude => 2 * m as u64 * q as u64 + variable_index_bits(m, n),
        _ => 2 * m as u64 * q as u64,
    };
    let uncompressed = 2 * n as u64 * q as u64;
    Ok(FeedbackBudget {
        q,
        m,
        total_bits,
        gamma_fb: uncompressed as f64 / total_bits as f64,
    })
}

// ---------------------------------------------------------------------------
// Quantizer
// ---------------------------------------------------------------------------

/// Uniform midrise quantizer over `[-scale, scale]` per real dimension.
#[derive(Debug, Clone, Copy)]
pub struct Quantizer {
    pub q: u32,
}

impl Quantizer {
    pub fn new(q: u32) -> Result<Self> {
        if !(1..=32).contains(&q) {
            return Err(Error::InvalidParameter(format!(
                "quantizer bits must lie in 1..=32, got {q}"
            )));
        }
        Ok(Self { q })
    }

    fn levels(&self) -> u64 {
        1u64 << self.q
    }

    /// Integer code of one real component.
    pub fn encode(&self, x: f64, scale: f64) -> u32 {
        if scale <= 0.0 {
            return 0;
        }
        let step = 2.0 * scale / self.levels() as f64;
        let raw = ((x + scale) / step).floor();
        raw.clamp(0.0, (self.levels() - 1) as f64) as u32
    }

    /// Bin-center reconstruction of a code.
    pub fn decode(&self, code: u32, scale: f64) -> f64 {
        if scale <= 0.0 {
            return 0.0;
        }
        let step = 2.0 * scale / self.levels() as f64;
        -scale + (code as f64 + 0.5) * step
    }
}

/// Quantizes the coefficients of a feedback vector: real and imaginary
/// parts separately, normalized by the largest component magnitude. The
/// scale travels as uncounted side information.
pub fn quantize_feedback(fb: &CompressedFeedback, q: u32) -> Result<CompressedFeedback> {
    let quantizer = Quantizer::new(q)?;
    let scale = fb
        .coefficients
        .iter()
        .flat_map(|c| [c.re.abs(), c.im.abs()])
        .fold(0.0_f64, f64::max);
    let coefficients = fb
        .coefficients
        .iter()
        .map(|c| {
            Cpx::new(
                quantizer.decode(quantizer.encode(c.re, scale), scale),
                quantizer.decode(quantizer.encode(c.im, scale), scale),
            )
        })
        .collect();
    Ok(CompressedFeedback {
        scheme: fb.scheme,
        m: fb.m,
        coefficients,
        indices: fb.indices.clone(),
        quant: Some(QuantMeta { q, scale }),
    })
}

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

/// Bound compression/recovery pipeline for one scheme and one CSI geometry.
///
/// Immutable after construction; `compress`/`recover` are pure and safe to
/// call concurrently.
pub struct Codec {
    scheme: SchemeId,
    n_f: usize,
    n_spatial: usize,
    model: Option<Arc<CovarianceModel>>,
    fft_forward: Option<Arc<dyn Fft<f64>>>,
    fft_inverse: Option<Arc<dyn Fft<f64>>>,
}

impl fmt::Debug for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Codec")
            .field("scheme", &self.scheme)
            .field("n_f", &self.n_f)
            .field("n_spatial", &self.n_spatial)
            .finish()
    }
}

impl Codec {
    /// Binds a scheme to the CSI geometry. The sparse-domain schemes require
    /// a covariance model; others ignore it.
    pub fn new(
        scheme: SchemeId,
        n_f: usize,
        n_spatial: usize,
        model: Option<Arc<CovarianceModel>>,
    ) -> Result<Self> {
        if n_f == 0 || n_spatial == 0 {
            return Err(Error::InvalidParameter(
                "codec geometry must be nonempty".into(),
            ));
        }
        let n = n_f * n_spatial;
        if scheme.kind() == SchemeKind::Scf {
            match &model {
                None => {
                    return Err(Error::MissingContext(
                        "sparse-domain scheme requires a covariance model".into(),
                    ))
                }
                Some(m) if m.n() != n || m.n_f() != n_f => {
                    return Err(Error::DimensionMismatch(format!(
                        "covariance model dimension {} does not match geometry {n}",
                        m.n()
                    )))
                }
                _ => {}
            }
        }
        let (fft_forward, fft_inverse) = if scheme.kind() == SchemeKind::Tcf {
            let mut planner = FftPlanner::new();
            (
                Some(planner.plan_fft_forward(n)),
                Some(planner.plan_fft_inverse(n)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            scheme,
            n_f,
            n_spatial,
            model,
            fft_forward,
            fft_inverse,
        })
    }

    pub fn scheme(&self) -> SchemeId {
        self.scheme
    }

    pub fn n(&self) -> usize {
        self.n_f * self.n_spatial
    }

    /// Transforms the native (subcarrier-major) CSI vector into the scheme's
    /// sparse domain, after applying the scheme's vector layout.
    pub fn sparsify(&self, h: &[Cpx]) -> Result<Vec<Cpx>> {
        let structured = restructure(h, self.n_spatial, self.n_f, self.scheme.layout())?;
        match self.scheme.kind() {
            SchemeKind::Fcf | SchemeKind::Full => Ok(structured),
            SchemeKind::Tcf => {
                let mut buf = structured;
                self.fft_inverse
                    .as_ref()
                    .expect("TCF codec always plans its transforms")
                    .process(&mut buf);
                let norm = 1.0 / (self.n() as f64).sqrt();
                for v in &mut buf {
                    *v *= norm;
                }
                Ok(buf)
            }
            SchemeKind::Scf => self
                .model
                .as_ref()
                .ok_or_else(|| {
                    Error::MissingContext("sparse-domain scheme requires a covariance model".into())
                })?
                .klt_forward(&structured),
        }
    }

    /// Positions kept by a fixed selection rule, ascending.
    fn fixed_positions(&self, m: usize) -> Result<Vec<usize>> {
        let n = self.n();
        match self.scheme.selection() {
            SelectionKind::All => Ok((0..n).collect()),
            SelectionKind::PcaFixed => Ok((0..m).collect()),
            SelectionKind::TcfFixedBoundary => {
                let head = m.div_ceil(2);
                let tail = m / 2;
                let mut pos: Vec<usize> = (0..head).collect();
                pos.extend(n - tail..n);
                Ok(pos)
            }
            SelectionKind::FcfEquidistant => {
                let subs = self.fcf_subcarriers(m)?;
                let mut pos = Vec::with_capacity(m);
                match self.scheme.layout() {
                    CsiLayout::SubcarrierMajor => {
                        for &f in &subs {
                            for s in 0..self.n_spatial {
                                pos.push(f * self.n_spatial + s);
                            }
                        }
                    }
                    CsiLayout::TrackMajor => {
                        for s in 0..self.n_spatial {
                            for &f in &subs {
                                pos.push(s * self.n_f + f);
                            }
                        }
                    }
                }
                pos.sort_unstable();
                Ok(pos)
            }
            SelectionKind::VariableMagnitude => Err(Error::InvalidParameter(
                "variable selection has no fixed positions".into(),
            )),
        }
    }

    /// Kept subcarriers for the equidistant frequency grid: always the band
    /// edges when at least two subcarriers are kept.
    fn fcf_subcarriers(&self, m: usize) -> Result<Vec<usize>> {
        if m % self.n_spatial != 0 {
            return Err(Error::InvalidParameter(format!(
                "kept count {m} must be a multiple of the spatial block size {}",
                self.n_spatial
            )));
        }
        let n_keep = m / self.n_spatial;
        if n_keep == 0 {
            return Err(Error::InvalidParameter(
                "frequency-domain scheme needs at least one kept subcarrier".into(),
            ));
        }
        if n_keep == 1 {
            return Ok(vec![0]);
        }
        let step = (self.n_f - 1) as f64 / (n_keep - 1) as f64;
        Ok((0..n_keep)
            .map(|k| (k as f64 * step).round() as usize)
            .collect())
    }

    /// Keeps `m` coefficients of the sparse vector according to the scheme's
    /// selection rule.
    pub fn select(&self, s: &[Cpx], m: usize) -> Result<CompressedFeedback> {
        let n = self.n();
        if s.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "sparse vector length {} does not match geometry {n}",
                s.len()
            )));
        }
        if m < 1 || m > n {
            return Err(Error::InvalidParameter(format!(
                "kept coefficient count {m} must lie in 1..={n}"
            )));
        }
        if self.scheme.selection() == SelectionKind::All && m != n {
            return Err(Error::InvalidParameter(format!(
                "full feedback keeps everything; got m = {m} for n = {n}"
            )));
        }
        match self.scheme.selection() {
            SelectionKind::VariableMagnitude => {
                let mut by_mag: Vec<usize> = (0..n).collect();
                by_mag.sort_by(|&a, &b| {
                    s[b].norm_sqr()
                        .partial_cmp(&s[a].norm_sqr())
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let mut kept: Vec<usize> = by_mag[..m].to_vec();
                kept.sort_unstable();
                Ok(CompressedFeedback {
                    scheme: self.scheme,
                    m,
                    coefficients: kept.iter().map(|&i| s[i]).collect(),
                    indices: Some(kept.iter().map(|&i| i as u32).collect()),
                    quant: None,
                })
            }
            _ => {
                let pos = self.fixed_positions(m)?;
                Ok(CompressedFeedback {
                    scheme: self.scheme,
                    m,
                    coefficients: pos.iter().map(|&i| s[i]).collect(),
                    indices: None,
                    quant: None,
                })
            }
        }
    }

    /// Full pipeline: sparsify, select, optionally quantize.
    pub fn compress(&self, h: &[Cpx], m: usize, q: Option<u32>) -> Result<CompressedFeedback> {
        let s = self.sparsify(h)?;
        let fb = self.select(&s, m)?;
        match q {
            Some(q) => quantize_feedback(&fb, q),
            None => Ok(fb),
        }
    }

    /// Reconstructs the native CSI vector from fed-back coefficients:
    /// zero-fills unselected positions, inverts the representation (or
    /// interpolates, for the frequency-domain scheme) and undoes the layout.
    pub fn recover(&self, fb: &CompressedFeedback) -> Result<Vec<Cpx>> {
        if fb.scheme != self.scheme {
            return Err(Error::MissingContext(format!(
                "feedback was produced by {} but this codec is {}",
                fb.scheme, self.scheme
            )));
        }
        if fb.coefficients.len() != fb.m {
            return Err(Error::DimensionMismatch(format!(
                "feedback carries {} coefficients but claims m = {}",
                fb.coefficients.len(),
                fb.m
            )));
        }
        let n = self.n();
        let positions: Vec<usize> = match &fb.indices {
            Some(idx) => {
                if idx.len() != fb.m {
                    return Err(Error::DimensionMismatch(format!(
                        "index list length {} does not match m = {}",
                        idx.len(),
                        fb.m
                    )));
                }
                if idx.windows(2).any(|w| w[1] <= w[0]) || idx.iter().any(|&i| i as usize >= n) {
                    return Err(Error::MalformedData(
                        "indices must be strictly increasing and in range".into(),
                    ));
                }
                idx.iter().map(|&i| i as usize).collect()
            }
            None => self.fixed_positions(fb.m)?,
        };

        let structured = match self.scheme.kind() {
            SchemeKind::Fcf => self.interpolate_tracks(&positions, &fb.coefficients)?,
            SchemeKind::Full => {
                let mut v = vec![Cpx::default(); n];
                for (&p, &c) in positions.iter().zip(&fb.coefficients) {
                    v[p] = c;
                }
                v
            }
            SchemeKind::Tcf => {
                let mut buf = vec![Cpx::default(); n];
                for (&p, &c) in positions.iter().zip(&fb.coefficients) {
                    buf[p] = c;
                }
                self.fft_forward
                    .as_ref()
                    .expect("TCF codec always plans its transforms")
                    .process(&mut buf);
                let norm = 1.0 / (n as f64).sqrt();
                for v in &mut buf {
                    *v *= norm;
                }
                buf
            }
            SchemeKind::Scf => {
                let mut s = vec![Cpx::default(); n];
                for (&p, &c) in positions.iter().zip(&fb.coefficients) {
                    s[p] = c;
                }
                self.model
                    .as_ref()
                    .ok_or_else(|| {
                        Error::MissingContext(
                            "sparse-domain scheme requires a covariance model".into(),
                        )
                    })?
                    .klt_inverse(&s)?
            }
        };
        restructure_inverse(&structured, self.n_spatial, self.n_f, self.scheme.layout())
    }

    /// Spline-interpolates each spatial coefficient track over the frequency
    /// axis from the kept subcarriers (real and imaginary separately).
    fn interpolate_tracks(&self, positions: &[usize], coeffs: &[Cpx]) -> Result<Vec<Cpx>> {
        let n = self.n();
        let mut values = vec![Cpx::default(); n];
        for (&p, &c) in positions.iter().zip(coeffs) {
            values[p] = c;
        }
        let subs = self.fcf_subcarriers(positions.len())?;
        let xs: Vec<f64> = subs.iter().map(|&f| f as f64).collect();
        let layout = self.scheme.layout();
        let mut out = vec![Cpx::default(); n];
        let pos_of = |s: usize, f: usize| match layout {
            CsiLayout::SubcarrierMajor => f * self.n_spatial + s,
            CsiLayout::TrackMajor => s * self.n_f + f,
        };
        for s in 0..self.n_spatial {
            let re: Vec<f64> = subs.iter().map(|&f| values[pos_of(s, f)].re).collect();
            let im: Vec<f64> = subs.iter().map(|&f| values[pos_of(s, f)].im).collect();
            let sp_re = CubicSpline::new(&xs, &re)?;
            let sp_im = CubicSpline::new(&xs, &im)?;
            for f in 0..self.n_f {
                out[pos_of(s, f)] = Cpx::new(sp_re.eval(f as f64), sp_im.eval(f as f64));
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

struct BitWriter {
    bytes: Vec<u8>,
    bit: u8,
}

impl BitWriter {
    fn new(bytes: Vec<u8>) -> Self {
        Self { bytes, bit: 0 }
    }

    /// MSB-first append of the low `width` bits of `value`.
    fn push(&mut self, value: u64, width: u32) {
        for i in (0..width).rev() {
            let b = ((value >> i) & 1) as u8;
            if self.bit == 0 {
                self.bytes.push(0);
            }
            let last = self.bytes.last_mut().expect("just pushed");
            *last |= b << (7 - self.bit);
            self.bit = (self.bit + 1) % 8;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn read(&mut self, width: u32) -> Result<u64> {
        let mut out = 0u64;
        for _ in 0..width {
            let byte = self
                .bytes
                .get(self.pos / 8)
                .ok_or_else(|| Error::MalformedData("feedback frame truncated".into()))?;
            let bit = (byte >> (7 - (self.pos % 8) as u8)) & 1;
            out = (out << 1) | bit as u64;
            self.pos += 1;
        }
        Ok(out)
    }
}

/// Bit width of one packed index for a length-`n` sparse vector.
fn index_width(n: usize) -> u32 {
    (usize::BITS - (n - 1).leading_zeros()).max(1)
}

impl CompressedFeedback {
    /// Serializes quantized feedback into the compact binary frame:
    /// header (scheme, m, q, flags), little-endian scale, packed q-bit codes
    /// (all real parts, then all imaginary parts, in coefficient order),
    /// then the packed index list for variable selection.
    pub fn to_frame(&self, n: usize) -> Result<Vec<u8>> {
        let quant = self
            .quant
            .ok_or_else(|| Error::MissingContext("only quantized feedback can be framed".into()))?;
        let quantizer = Quantizer::new(quant.q)?;
        let mut header = Vec::with_capacity(16);
        header.push(self.scheme.frame_code());
        header.extend_from_slice(&(self.m as u32).to_le_bytes());
        header.push(quant.q as u8);
        header.push(if self.indices.is_some() { 1 } else { 0 });
        header.extend_from_slice(&quant.scale.to_le_bytes());
        let mut w = BitWriter::new(header);
        for c in &self.coefficients {
            w.push(quantizer.encode(c.re, quant.scale) as u64, quant.q);
        }
        for c in &self.coefficients {
            w.push(quantizer.encode(c.im, quant.scale) as u64, quant.q);
        }
        if let Some(idx) = &self.indices {
            let width = index_width(n);
            for &i in idx {
                w.push(i as u64, width);
            }
        }
        Ok(w.finish())
    }

    /// Parses a frame produced by [`CompressedFeedback::to_frame`] for a
    /// length-`n` sparse vector.
    pub fn from_frame(bytes: &[u8], n: usize) -> Result<Self> {
        if bytes.len() < 15 {
            return Err(Error::MalformedData("feedback frame too short".into()));
        }
        let scheme = SchemeId::from_frame_code(bytes[0])?;
        let m = u32::from_le_bytes(bytes[1..5].try_into().expect("sized slice")) as usize;
        let q = bytes[5] as u32;
        let flags = bytes[6];
        let scale = f64::from_le_bytes(bytes[7..15].try_into().expect("sized slice"));
        if m > n {
            return Err(Error::MalformedData(format!(
                "frame claims m = {m} above the vector length {n}"
            )));
        }
        let quantizer = Quantizer::new(q)?;
        let mut r = BitReader::new(&bytes[15..]);
        let mut re = Vec::with_capacity(m);
        for _ in 0..m {
            re.push(quantizer.decode(r.read(q)? as u32, scale));
        }
        let mut coefficients = Vec::with_capacity(m);
        for item in re {
            let im = quantizer.decode(r.read(q)? as u32, scale);
            coefficients.push(Cpx::new(item, im));
        }
        let indices = if flags & 1 != 0 {
            let width = index_width(n);
            let mut idx = Vec::with_capacity(m);
            for _ in 0..m {
                idx.push(r.read(width)? as u32);
            }
            if idx.windows(2).any(|w| w[1] <= w[0]) || idx.iter().any(|&i| i as usize >= n) {
                return Err(Error::MalformedData(
                    "frame indices must be strictly increasing and in range".into(),
                ));
            }
            Some(idx)
        } else {
            None
        };
        Ok(Self {
            scheme,
            m,
            coefficients,
            indices,
            quant: Some(QuantMeta { q, scale }),
        })
    }
}

// ---------------------------------------------------------------------------
// Permuted-pipeline support (structure invariance)
// ---------------------------------------------------------------------------

/// Dense eigenbasis transform, used to compare a permuted pipeline against
/// the factored one. Only available below the model's dense threshold.
#[derive(Debug, Clone)]
pub struct DenseKlt {
    eigenvalues: Vec<f64>,
    /// Eigenvector columns, descending eigenvalue order.
    u: DMatrix<Cpx>,
}

impl DenseKlt {
    fn from_covariance(c: DMatrix<Cpx>) -> Self {
        let eig = c.symmetric_eigen();
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let n = order.len();
        let mut u = DMatrix::zeros(n, n);
        let mut eigenvalues = Vec::with_capacity(n);
        for (dst, &src) in order.iter().enumerate() {
            eigenvalues.push(eig.eigenvalues[src].max(0.0));
            u.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { eigenvalues, u }
    }

    pub fn from_model(model: &CovarianceModel) -> Result<Self> {
        Ok(Self::from_covariance(model.dense_covariance()?))
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn forward(&self, h: &[Cpx]) -> Vec<Cpx> {
        let hv = nalgebra::DVector::from_column_slice(h);
        (self.u.adjoint() * hv).iter().cloned().collect()
    }

    pub fn inverse(&self, s: &[Cpx]) -> Vec<Cpx> {
        let sv = nalgebra::DVector::from_column_slice(s);
        (&self.u * sv).iter().cloned().collect()
    }

    /// Keeps the `m` leading coefficients and reconstructs.
    pub fn recover_principal(&self, h: &[Cpx], m: usize) -> Vec<Cpx> {
        let mut s = self.forward(h);
        for v in s.iter_mut().skip(m) {
            *v = Cpx::default();
        }
        self.inverse(&s)
    }
}

/// Applies a permutation: `out[i] = x[perm[i]]`.
pub fn permute_vector(x: &[Cpx], perm: &[usize]) -> Result<Vec<Cpx>> {
    validate_permutation(perm, x.len())?;
    Ok(perm.iter().map(|&p| x[p]).collect())
}

/// Restructures the model for a permuted CSI vector: returns the permuted
/// vector together with the eigenbasis transform of the permuted covariance,
/// so recovery performance can be compared against the original pipeline.
pub fn permute_model(
    model: &CovarianceModel,
    h: &[Cpx],
    perm: &[usize],
) -> Result<(Vec<Cpx>, DenseKlt)> {
    validate_permutation(perm, model.n())?;
    let ph = permute_vector(h, perm)?;
    let c = model.dense_covariance()?;
    let n = model.n();
    let pc = DMatrix::from_fn(n, n, |i, j| c[(perm[i], perm[j])]);
    Ok((ph, DenseKlt::from_covariance(pc)))
}

fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "permutation length {} does not match dimension {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidParameter("not a permutation of 0..n".into()));
        }
        seen[p] = true;
    }
    Ok(())
}
