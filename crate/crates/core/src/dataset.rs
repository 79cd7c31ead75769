//! Procedural factor-annotated image dataset.
//!
//! Every combination of five discrete factors (shape, scale, horizontal and
//! vertical position, hue) is rendered once as a hard-edged shape on a black
//! canvas. Rendering is integer-exact, so the same tuple always yields the
//! same bytes.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::Cursor;
use crate::tensor::Tensor;

pub const DEFAULT_FACTORS: [(&str, usize); 5] = [("shape", 3), ("scale", 4), ("pos_x", 8), ("pos_y", 8), ("hue", 4)];

const MAGIC: &[u8; 4] = b"TOYD";
const VERSION: u32 = 1;
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSpace {
    names: Vec<String>,
    cards: Vec<usize>,
}

impl Default for FactorSpace {
    fn default() -> Self {
        Self::new(DEFAULT_FACTORS.iter().map(|&(n, c)| (n.to_string(), c)).collect()).expect("valid defaults")
    }
}

impl FactorSpace {
    /// Factors in order. `shape` may have a single value; every other factor needs at least two.
    pub fn new(factors: Vec<(String, usize)>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Domain("factor space needs at least one factor".into()));
        }
        for (name, card) in &factors {
            let min = if name == "shape" { 1 } else { 2 };
            if *card < min {
                return Err(Error::Domain(format!("factor {name} needs cardinality ≥ {min}, got {card}")));
            }
            if *card > u16::MAX as usize + 1 {
                return Err(Error::Domain(format!("factor {name} cardinality {card} exceeds the u16 table")));
            }
        }
        let (names, cards) = factors.into_iter().unzip();
        Ok(Self { names, cards })
    }

    /// Names recovered from a file header, which stores only cardinalities.
    fn from_cardinalities(cards: Vec<usize>) -> Result<Self> {
        let names: Vec<String> = if cards.len() == DEFAULT_FACTORS.len() {
            DEFAULT_FACTORS.iter().map(|(n, _)| n.to_string()).collect()
        } else {
            (0..cards.len()).map(|i| format!("factor{i}")).collect()
        };
        Self::new(names.into_iter().zip(cards).collect())
    }

    pub fn num_factors(&self) -> usize {
        self.cards.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cards
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Number of factor combinations.
    pub fn size(&self) -> usize {
        self.cards.iter().product()
    }

    pub fn check(&self, t: &FactorTuple) -> Result<()> {
        if t.0.len() != self.cards.len() {
            return Err(Error::Domain(format!("tuple has {} factors, space has {}", t.0.len(), self.cards.len())));
        }
        for ((v, c), name) in t.0.iter().zip(&self.cards).zip(&self.names) {
            if v >= c {
                return Err(Error::Domain(format!("factor {name} index {v} out of range 0..{c}")));
            }
        }
        Ok(())
    }

    /// Row-major flat index, last factor fastest.
    pub fn encode(&self, t: &FactorTuple) -> Result<usize> {
        self.check(t)?;
        Ok(t.0.iter().zip(&self.cards).fold(0, |acc, (v, c)| acc * c + v))
    }

    pub fn decode(&self, mut index: usize) -> Result<FactorTuple> {
        if index >= self.size() {
            return Err(Error::Domain(format!("flat index {index} out of range 0..{}", self.size())));
        }
        let mut out = vec![0; self.cards.len()];
        for (slot, c) in out.iter_mut().zip(&self.cards).rev() {
            *slot = index % c;
            index /= c;
        }
        Ok(FactorTuple(out))
    }

    /// All tuples in lexicographic order.
    pub fn enumerate(&self) -> Vec<FactorTuple> {
        (0..self.size()).map(|i| self.decode(i).expect("in range")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FactorTuple(pub Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Disk,
    Triangle,
}

/// Pixel-space geometry shared by all tuples at one resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layout {
    pub height: usize,
    pub width: usize,
}

impl Layout {
    /// Half-extent of the shape in pixels.
    pub fn radius(&self, scale: usize) -> f64 {
        self.height.min(self.width) as f64 / 16.0 * (1.25 + scale as f64)
    }

    /// Integer pixel spacing between adjacent grid positions along an axis of `extent` pixels.
    pub fn step(extent: usize, positions: usize) -> usize {
        if positions < 2 {
            return 0;
        }
        ((0.45 * extent as f64 / (positions - 1) as f64).floor() as usize).max(1)
    }

    /// Centre coordinate of grid position `i` of `positions` along an axis.
    pub fn center(extent: usize, positions: usize, i: usize) -> f64 {
        let step = Self::step(extent, positions);
        let span = (positions.saturating_sub(1) * step) as f64;
        (extent as f64 - span) / 2.0 + (i * step) as f64
    }
}

fn hue_rgb(index: usize, card: usize) -> [u8; 3] {
    let h = index as f64 / card as f64 * 6.0;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    let (up, down) = ((255.0 * f).round() as u8, (255.0 * (1.0 - f)).round() as u8);
    match sector {
        0 => [255, up, 0],
        1 => [down, 255, 0],
        2 => [0, 255, up],
        3 => [0, down, 255],
        4 => [up, 0, 255],
        _ => [255, 0, down],
    }
}

fn factor(space: &FactorSpace, t: &FactorTuple, name: &str) -> (usize, usize) {
    match space.position(name) {
        Some(i) => (t.0[i], space.cards[i]),
        None => (0, 1),
    }
}

/// Renders `t` as 8-bit C×H×W pixels. Factors missing from `space` take their first value.
pub fn render(space: &FactorSpace, t: &FactorTuple, height: usize, width: usize) -> Result<Vec<u8>> {
    space.check(t)?;
    if height == 0 || width == 0 {
        return Err(Error::Domain("image dimensions must be positive".into()));
    }
    let layout = Layout { height, width };
    let shape = match factor(space, t, "shape").0 % 3 {
        0 => Shape::Square,
        1 => Shape::Disk,
        _ => Shape::Triangle,
    };
    let r = layout.radius(factor(space, t, "scale").0);
    let (px, nx) = factor(space, t, "pos_x");
    let (py, ny) = factor(space, t, "pos_y");
    let cx = Layout::center(width, nx, px);
    let cy = Layout::center(height, ny, py);
    let (hue, nh) = factor(space, t, "hue");
    let color = hue_rgb(hue, nh);

    let plane = height * width;
    let mut out = vec![0u8; CHANNELS * plane];
    for y in 0..height {
        let dy = y as f64 + 0.5 - cy;
        for x in 0..width {
            let dx = x as f64 + 0.5 - cx;
            let inside = match shape {
                Shape::Square => dx.abs() <= r && dy.abs() <= r,
                Shape::Disk => dx * dx + dy * dy <= r * r,
                Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            };
            if inside {
                for (c, &v) in color.iter().enumerate() {
                    out[c * plane + y * width + x] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Rendered image as a 1×C×H×W tensor in [0, 1].
pub fn render_tensor(space: &FactorSpace, t: &FactorTuple, height: usize, width: usize) -> Result<Tensor> {
    let px = render(space, t, height, width)?;
    Tensor::new(vec![1, CHANNELS, height, width], px.iter().map(|&v| f64::from(v) / 255.0).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyDataset {
    space: FactorSpace,
    height: usize,
    width: usize,
    factors: Vec<FactorTuple>,
    pixels: Vec<u8>,
    lookup: Vec<Option<usize>>,
}

impl ToyDataset {
    /// Renders every factor combination in enumeration order.
    pub fn generate(space: FactorSpace, height: usize, width: usize) -> Result<Self> {
        let factors = space.enumerate();
        let mut pixels = Vec::with_capacity(factors.len() * CHANNELS * height * width);
        for t in &factors {
            pixels.extend(render(&space, t, height, width)?);
        }
        Self::from_parts(space, height, width, factors, pixels)
    }

    fn from_parts(space: FactorSpace, height: usize, width: usize, factors: Vec<FactorTuple>, pixels: Vec<u8>) -> Result<Self> {
        let mut lookup = vec![None; space.size()];
        for (i, t) in factors.iter().enumerate() {
            lookup[space.encode(t)?].get_or_insert(i);
        }
        Ok(Self { space, height, width, factors, pixels, lookup })
    }

    pub fn space(&self) -> &FactorSpace {
        &self.space
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Every factor combination present.
    pub fn is_exhaustive(&self) -> bool {
        self.lookup.iter().all(Option::is_some)
    }

    pub fn factors(&self, record: usize) -> &FactorTuple {
        &self.factors[record]
    }

    pub fn all_factors(&self) -> &[FactorTuple] {
        &self.factors
    }

    pub fn record_of(&self, t: &FactorTuple) -> Option<usize> {
        self.space.encode(t).ok().and_then(|i| self.lookup[i])
    }

    fn image_len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn pixels(&self, record: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[record * n..(record + 1) * n]
    }

    /// Images of `records` as an N×C×H×W tensor in [0, 1].
    pub fn images(&self, records: &[usize]) -> Result<Tensor> {
        if records.is_empty() {
            return Err(Error::Contract("cannot build an image tensor from zero records".into()));
        }
        let mut data = Vec::with_capacity(records.len() * self.image_len());
        for &r in records {
            if r >= self.len() {
                return Err(Error::Domain(format!("record {r} out of range 0..{}", self.len())));
            }
            data.extend(self.pixels(r).iter().map(|&v| f64::from(v) / 255.0));
        }
        Tensor::new(vec![records.len(), CHANNELS, self.height, self.width], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.space.num_factors();
        let mut out = Vec::with_capacity(4 + 4 + 8 * (5 + k) + self.len() * 2 * k + self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.height, self.width, CHANNELS, k] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &c in self.space.cardinalities() {
            out.extend_from_slice(&(c as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for t in &self.factors {
            for &v in &t.0 {
                out.extend_from_slice(&(v as u16).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(fmt(0, "bad dataset magic, expected TOYD".into()));
        }
        let version = u32::from_le_bytes(c.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(fmt(4, format!("unsupported dataset version {version}")));
        }
        let dim_at = c.pos;
        let (h, w, ch, k) = (c.u64("height")?, c.u64("width")?, c.u64("channels")?, c.u64("factor count")?);
        if h == 0 || w == 0 || ch != CHANNELS as u64 {
            return Err(fmt(dim_at, format!("unsupported image geometry {h}x{w}x{ch}")));
        }
        if k == 0 || k > 64 {
            return Err(fmt(dim_at + 24, format!("implausible factor count {k}")));
        }
        let card_at = c.pos;
        let cards = (0..k).map(|_| c.u64("cardinality").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let space = FactorSpace::from_cardinalities(cards).map_err(|e| fmt(card_at, e.to_string()))?;
        let count = c.u64("record count")? as usize;
        let (h, w, k) = (h as usize, w as usize, k as usize);

        let table_at = c.pos;
        let table_len = count.checked_mul(2 * k).ok_or_else(|| fmt(table_at, "record count overflows".into()))?;
        let table = c.take(table_len, "factor table")?;
        let mut factors = Vec::with_capacity(count);
        for (r, rec) in table.chunks_exact(2 * k).enumerate() {
            let t = FactorTuple(rec.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect());
            space.check(&t).map_err(|e| fmt(table_at + r * 2 * k, e.to_string()))?;
            factors.push(t);
        }

        let pixel_at = c.pos;
        let expected = count
            .checked_mul(CHANNELS * h * w)
            .ok_or_else(|| fmt(pixel_at, "pixel payload size overflows".into()))?;
        let found = bytes.len() - pixel_at;
        if found != expected {
            return Err(fmt(
                pixel_at,
                format!("pixel payload length mismatch: expected {expected} bytes, found {found}"),
            ));
        }
        Self::from_parts(space, h, w, factors, bytes[pixel_at..].to_vec())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&bytes)
    }
}

/// A set of drawn records with their factor labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub records: Vec<usize>,
    pub factors: Vec<FactorTuple>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn images(&self, data: &ToyDataset) -> Result<Tensor> {
        data.images(&self.records)
    }
}

/// Seeded batch source. Call `i` draws from ChaCha8 stream `i` of `seed`, so
/// any call is reproducible from `(seed, i)` alone.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    calls: u64,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self { seed, calls: 0 }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        let rng = Self::rng_for(self.seed, self.calls);
        self.calls += 1;
        rng
    }

    pub fn rng_for(seed: u64, call: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(call);
        rng
    }

    /// `n` records drawn uniformly with replacement.
    pub fn sample_batch(&mut self, data: &ToyDataset, n: usize) -> Result<Batch> {
        let mut rng = self.next_rng();
        if n > 0 && data.is_empty() {
            return Err(Error::Contract("cannot sample from an empty dataset".into()));
        }
        let records: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
        let factors = records.iter().map(|&r| data.factors(r).clone()).collect();
        Ok(Batch { records, factors })
    }

    /// `n` records sharing one uniformly drawn value of factor `k`; the other
    /// factors are uniform over their ranges.
    pub fn sample_fixed_factor(&mut self, data: &ToyDataset, k: usize, n: usize) -> Result<Batch> {
        let space = data.space();
        if k >= space.num_factors() {
            return Err(Error::Domain(format!("factor index {k} out of range 0..{}", space.num_factors())));
        }
        if !data.is_exhaustive() {
            return Err(Error::Contract("fixed-factor sampling needs every factor combination".into()));
        }
        let mut rng = self.next_rng();
        let cards = space.cardinalities();
        let value = rng.random_range(0..cards[k]);
        let mut records = Vec::with_capacity(n);
        let mut factors = Vec::with_capacity(n);
        for _ in 0..n {
            let t = FactorTuple(
                cards.iter().enumerate().map(|(j, &c)| if j == k { value } else { rng.random_range(0..c) }).collect(),
            );
            records.push(data.record_of(&t).expect("exhaustive"));
            factors.push(t);
        }
        Ok(Batch { records, factors })
    }
}
