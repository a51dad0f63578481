//! The likelihood datastore.
//!
//! One sparse `key -> count` row per class. Training increments the row of
//! the sample's label at the key its CAM produces; inference keys the CAM of
//! every class, reads `count / row_total` from that class's row and picks the
//! most likely class. Counts are kept exact, so stores trained on disjoint
//! shards can be merged into the store a single pass would have produced.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{attention_key, BitKey, BitOrder, GcmlConfig};
use crate::cam::{class_scores, compute_cam, ClassifierHead, Downsample, FeatureMapStack, PoolingMode};
use crate::error::{Error, Result};
use crate::tensorio::DatasetManifest;

pub const STORE_MAGIC: [u8; 4] = *b"GCS1";
pub const STORE_VERSION: u16 = 1;
/// Largest key length for which [`GcmlStore::to_dense`] will materialize rows.
pub const MAX_DENSE_BITS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stack: FeatureMapStack,
    pub label: usize,
}

impl Sample {
    pub fn new(stack: FeatureMapStack, label: usize) -> Self {
        Self { stack, label }
    }
}

pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest
        .read_tensors()?
        .into_iter()
        .map(|(t, label)| Ok(Sample { stack: FeatureMapStack::from_tensor(&t)?, label }))
        .collect()
}

/// What to predict when every class likelihood is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fallback {
    /// Argmax of the head's class scores.
    #[default]
    CnnScore,
    /// Class 0.
    FirstClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PredictOptions {
    pub fallback: Fallback,
    /// Add-alpha smoothing; 0 disables it.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_index: usize,
    pub likelihoods: Vec<f64>,
    pub keys: Vec<BitKey>,
    pub fallback_used: bool,
    /// Head scores for every class, the plain CNN path.
    pub scores: Vec<f64>,
    pub cnn_class: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pools the stack onto the attention grid when it is finer than the grid.
pub fn reduce_to_grid(f: &FeatureMapStack, cfg: &GcmlConfig) -> Result<FeatureMapStack> {
    let (gh, gw) = cfg.grid();
    if (f.height(), f.width()) == (gh, gw) {
        return Ok(f.clone());
    }
    f.downsample_avg(gh, gw).map_err(|e| match e {
        Error::DimensionMismatch(msg) => Error::ConfigMismatch(msg),
        other => other,
    })
}

/// Key of class `c`'s CAM on the attention grid.
pub fn class_key(f: &FeatureMapStack, head: &ClassifierHead, c: usize, cfg: &GcmlConfig) -> Result<BitKey> {
    let f = reduce_to_grid(f, cfg)?;
    attention_key(&compute_cam(&f, head, c)?, cfg)
}

pub fn class_keys(f: &FeatureMapStack, head: &ClassifierHead, cfg: &GcmlConfig) -> Result<Vec<BitKey>> {
    let f = reduce_to_grid(f, cfg)?;
    (0..head.classes()).map(|c| attention_key(&compute_cam(&f, head, c)?, cfg)).collect()
}

/// Shifts the stack by up to one cell in each direction, zero filling the
/// vacated border, like a padded random crop. The shift depends only on
/// `(seed, index)`.
pub fn augment_stack(f: &FeatureMapStack, seed: u64, index: usize) -> FeatureMapStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let dy = rng.random_range(-1i32..=1) as isize;
    let dx = rng.random_range(-1i32..=1) as isize;
    let (k, h, w) = (f.filters(), f.height(), f.width());
    let mut out = vec![0.0; k * h * w];
    for kk in 0..k {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(kk * h + y) * w + x] = f.get(kk, sy as usize, sx as usize);
            }
        }
    }
    FeatureMapStack::new(k, h, w, out).expect("shifted stack keeps its shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcmlStore {
    classes: Vec<String>,
    rows: Vec<HashMap<u64, u64>>,
    row_totals: Vec<u64>,
    cfg: GcmlConfig,
    pooling: PoolingMode,
    normalized: bool,
}

impl GcmlStore {
    pub fn new(classes: Vec<String>, cfg: GcmlConfig, pooling: PoolingMode) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidConfig("a store needs at least one class".into()));
        }
        let n = classes.len();
        Ok(Self { classes, rows: vec![HashMap::new(); n], row_totals: vec![0; n], cfg, pooling, normalized: false })
    }

    /// Builds a store from explicit per-class counts, validating every entry.
    pub fn from_counts<I>(classes: Vec<String>, cfg: GcmlConfig, pooling: PoolingMode, rows: Vec<I>) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64)>,
    {
        let mut s = Self::new(classes, cfg, pooling)?;
        if rows.len() != s.classes.len() {
            return Err(Error::InvalidShape(format!("{} rows for {} classes", rows.len(), s.classes.len())));
        }
        for (c, row) in rows.into_iter().enumerate() {
            for (key, count) in row {
                s.add(c, BitKey(key), count)?;
            }
        }
        Ok(s)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn config(&self) -> &GcmlConfig {
        &self.cfg
    }

    pub fn pooling(&self) -> PoolingMode {
        self.pooling
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Flags the store as finalized for inference. Training and merging are
    /// rejected afterwards; counts are untouched.
    pub fn mark_normalized(&mut self) {
        self.normalized = true;
    }

    /// Replaces the attention grid with another shape of the same key length.
    pub fn set_grid(&mut self, h: usize, w: usize) -> Result<()> {
        self.cfg = self.cfg.with_grid(h, w)?;
        Ok(())
    }

    pub fn row_total(&self, class: usize) -> Result<u64> {
        self.check_class(class)?;
        Ok(self.row_totals[class])
    }

    pub fn row_totals(&self) -> &[u64] {
        &self.row_totals
    }

    pub fn total(&self) -> u64 {
        self.row_totals.iter().sum()
    }

    pub fn count(&self, class: usize, key: BitKey) -> Result<u64> {
        self.check_class(class)?;
        Ok(self.rows[class].get(&key.0).copied().unwrap_or(0))
    }

    pub fn row(&self, class: usize) -> Result<&HashMap<u64, u64>> {
        self.check_class(class)?;
        Ok(&self.rows[class])
    }

    /// Row entries ordered by key.
    pub fn row_sorted(&self, class: usize) -> Result<Vec<(BitKey, u64)>> {
        let mut v: Vec<_> = self.row(class)?.iter().map(|(&k, &c)| (BitKey(k), c)).collect();
        v.sort_unstable();
        Ok(v)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes.len() {
            return Err(Error::ClassOutOfRange { index: class, len: self.classes.len() });
        }
        Ok(())
    }

    fn check_key(&self, key: BitKey) -> Result<()> {
        if !self.cfg.key_fits(key) {
            return Err(Error::InvalidValue(format!("key {key} does not fit in {} bits", self.cfg.key_bits())));
        }
        Ok(())
    }

    fn check_head(&self, head: &ClassifierHead) -> Result<()> {
        if head.classes() != self.classes.len() {
            return Err(Error::ConfigMismatch(format!(
                "head has {} classes, store has {}",
                head.classes(),
                self.classes.len()
            )));
        }
        if head.pooling() != self.pooling {
            return Err(Error::ConfigMismatch(format!(
                "head pools with {:?}, store was built with {:?}",
                head.pooling(),
                self.pooling
            )));
        }
        Ok(())
    }

    /// Adds `count` observations of `key` to `class`.
    pub fn add(&mut self, class: usize, key: BitKey, count: u64) -> Result<()> {
        if self.normalized {
            return Err(Error::Frozen);
        }
        self.check_class(class)?;
        self.check_key(key)?;
        if count == 0 {
            return Ok(());
        }
        let total = self.row_totals[class]
            .checked_add(count)
            .ok_or_else(|| Error::InvalidValue("row total overflows u64".into()))?;
        *self.rows[class].entry(key.0).or_insert(0) += count;
        self.row_totals[class] = total;
        Ok(())
    }

    pub fn increment(&mut self, class: usize, key: BitKey) -> Result<()> {
        self.add(class, key, 1)
    }

    /// Keys the label's CAM and counts it once. Returns the key.
    pub fn train_update(&mut self, f: &FeatureMapStack, head: &ClassifierHead, label: usize) -> Result<BitKey> {
        if self.normalized {
            return Err(Error::Frozen);
        }
        self.check_class(label)?;
        self.check_head(head)?;
        let key = class_key(f, head, label, &self.cfg)?;
        self.increment(label, key)?;
        Ok(key)
    }

    /// One pass over `samples`. With `augment`, sample `i` is shifted by
    /// [`augment_stack`]`(stack, seed, i)` before keying.
    pub fn train_epoch(&mut self, samples: &[Sample], head: &ClassifierHead, augment: Option<u64>) -> Result<()> {
        if self.normalized {
            return Err(Error::Frozen);
        }
        self.check_head(head)?;
        if let Some(s) = samples.iter().find(|s| s.label >= self.classes.len()) {
            return Err(Error::ClassOutOfRange { index: s.label, len: self.classes.len() });
        }
        for (i, s) in samples.iter().enumerate() {
            match augment {
                Some(seed) => self.train_update(&augment_stack(&s.stack, seed, i), head, s.label)?,
                None => self.train_update(&s.stack, head, s.label)?,
            };
        }
        Ok(())
    }

    /// `count / row_total`, or 0 for an unseen key or an empty row.
    pub fn lookup(&self, class: usize, key: BitKey) -> Result<f64> {
        self.lookup_smoothed(class, key, 0.0)
    }

    /// `(count + alpha) / (row_total + alpha * 2^L)`.
    pub fn lookup_smoothed(&self, class: usize, key: BitKey, alpha: f64) -> Result<f64> {
        self.check_class(class)?;
        self.check_key(key)?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidValue(format!("smoothing alpha {alpha} must be finite and non-negative")));
        }
        let count = self.rows[class].get(&key.0).copied().unwrap_or(0) as f64;
        let denom = self.row_totals[class] as f64 + alpha * self.cfg.key_space();
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok((count + alpha) / denom)
    }

    pub fn predict(&self, f: &FeatureMapStack, head: &ClassifierHead, opts: PredictOptions) -> Result<Prediction> {
        self.check_head(head)?;
        let keys = class_keys(f, head, &self.cfg)?;
        let scores = class_scores(f, head)?;
        let likelihoods = keys
            .iter()
            .enumerate()
            .map(|(c, &k)| self.lookup_smoothed(c, k, opts.alpha))
            .collect::<Result<Vec<_>>>()?;
        let cnn_class = argmax(&scores);
        let fallback_used = likelihoods.iter().all(|&v| v == 0.0);
        let class_index = if fallback_used {
            match opts.fallback {
                Fallback::CnnScore => cnn_class,
                Fallback::FirstClass => 0,
            }
        } else {
            argmax(&likelihoods)
        };
        Ok(Prediction { class_index, likelihoods, keys, fallback_used, scores, cnn_class })
    }

    pub fn normalized_view(&self) -> NormalizedStoreView<'_> {
        NormalizedStoreView { store: self }
    }

    /// Adds every count of `other` into `self`.
    pub fn merge_from(&mut self, other: &GcmlStore) -> Result<()> {
        if self.normalized || other.normalized {
            return Err(Error::Frozen);
        }
        if self.classes != other.classes {
            return Err(Error::ConfigMismatch(format!(
                "class lists differ: {:?} vs {:?}",
                self.classes, other.classes
            )));
        }
        let (a, b) = (&self.cfg, &other.cfg);
        if a.tau().to_bits() != b.tau().to_bits() || a.key_bits() != b.key_bits() || a.bit_order() != b.bit_order() {
            return Err(Error::ConfigMismatch(format!(
                "stores differ in tau/key length/bit order: ({}, {}, {:?}) vs ({}, {}, {:?})",
                a.tau(),
                a.key_bits(),
                a.bit_order(),
                b.tau(),
                b.key_bits(),
                b.bit_order()
            )));
        }
        if self.pooling != other.pooling {
            return Err(Error::ConfigMismatch("stores were built with different pooling modes".into()));
        }
        for (c, row) in other.rows.iter().enumerate() {
            for (&k, &n) in row {
                self.add(c, BitKey(k), n)?;
            }
        }
        Ok(())
    }

    /// Dense copy of one row; only for `L <= MAX_DENSE_BITS`.
    pub fn to_dense(&self, class: usize) -> Result<Vec<u64>> {
        self.check_class(class)?;
        let bits = self.cfg.key_bits();
        if bits > MAX_DENSE_BITS {
            return Err(Error::InvalidConfig(format!("dense rows need L <= {MAX_DENSE_BITS}, store has L = {bits}")));
        }
        let mut dense = vec![0u64; 1 << bits];
        for (&k, &n) in &self.rows[class] {
            dense[k as usize] = n;
        }
        Ok(dense)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_store(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_store(BufReader::new(File::open(path)?))
    }
}

pub fn merge(a: &GcmlStore, b: &GcmlStore) -> Result<GcmlStore> {
    let mut out = a.clone();
    out.merge_from(b)?;
    Ok(out)
}

/// Trains `shards` independent stores in parallel over contiguous slices of
/// `samples` and merges them. Equal to a single `train_epoch` pass.
pub fn train_sharded(
    template: &GcmlStore,
    samples: &[Sample],
    head: &ClassifierHead,
    shards: usize,
) -> Result<GcmlStore> {
    let shards = shards.max(1);
    let chunk = samples.len().div_ceil(shards).max(1);
    let parts = samples
        .par_chunks(chunk)
        .map(|part| {
            let mut s = template.clone();
            s.train_epoch(part, head, None)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = template.clone();
    for p in &parts {
        out.merge_from(p)?;
    }
    Ok(out)
}

/// Dense `C x 2^L` count table built with a parallel fold, for `L <= MAX_DENSE_BITS`.
pub fn train_dense_parallel(samples: &[Sample], head: &ClassifierHead, cfg: &GcmlConfig) -> Result<Vec<Vec<u64>>> {
    let bits = cfg.key_bits();
    if bits > MAX_DENSE_BITS {
        return Err(Error::InvalidConfig(format!("dense table needs L <= {MAX_DENSE_BITS}, got {bits}")));
    }
    let c = head.classes();
    if let Some(s) = samples.iter().find(|s| s.label >= c) {
        return Err(Error::ClassOutOfRange { index: s.label, len: c });
    }
    let empty = || vec![vec![0u64; 1 << bits]; c];
    samples
        .par_iter()
        .try_fold(empty, |mut acc, s| {
            let key = class_key(&s.stack, head, s.label, cfg)?;
            acc[s.label][key.0 as usize] += 1;
            Ok(acc)
        })
        .try_reduce(empty, |mut a, b| {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
            Ok(a)
        })
}

/// Read-only probability view over a store. Each non-empty row sums to one;
/// the counts underneath stay available for further training.
#[derive(Debug, Clone, Copy)]
pub struct NormalizedStoreView<'a> {
    store: &'a GcmlStore,
}

impl NormalizedStoreView<'_> {
    pub fn likelihood(&self, class: usize, key: BitKey) -> Result<f64> {
        self.store.lookup(class, key)
    }

    pub fn row(&self, class: usize) -> Result<Vec<(BitKey, f64)>> {
        let total = self.store.row_total(class)?;
        let entries = self.store.row_sorted(class)?;
        if total == 0 {
            return Ok(Vec::new());
        }
        Ok(entries.into_iter().map(|(k, n)| (k, n as f64 / total as f64)).collect())
    }

    pub fn row_sum(&self, class: usize) -> Result<f64> {
        Ok(self.row(class)?.iter().map(|(_, p)| p).sum())
    }

    /// Classes whose row has no observations and therefore reads as all zeros.
    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.store.num_classes()).filter(|&c| self.store.row_totals[c] == 0).collect()
    }
}

pub fn write_store<W: Write>(s: &GcmlStore, mut sink: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.push(s.cfg.key_bits() as u8);
    buf.extend_from_slice(&s.cfg.tau().to_le_bytes());
    buf.push(s.cfg.bit_order().code());
    buf.push(u8::from(s.normalized));
    buf.push(s.pooling.code());
    let c = u32::try_from(s.classes.len()).map_err(|_| Error::InvalidValue("too many classes".into()))?;
    buf.extend_from_slice(&c.to_le_bytes());
    for label in &s.classes {
        let len = u16::try_from(label.len())
            .map_err(|_| Error::InvalidValue(format!("label of {} bytes exceeds u16", label.len())))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(label.as_bytes());
    }
    for (row, &total) in s.rows.iter().zip(&s.row_totals) {
        let mut entries: Vec<_> = row.iter().map(|(&k, &n)| (k, n)).collect();
        entries.sort_unstable();
        buf.extend_from_slice(&total.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (k, n) in entries {
            buf.extend_from_slice(&k.to_le_bytes());
            buf.extend_from_slice(&n.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(what)?))
    }
}

/// Square grid when `L` is a perfect square, otherwise a single row.
fn default_grid(bits: usize) -> (usize, usize) {
    let r = (bits as f64).sqrt().round() as usize;
    if r * r == bits {
        (r, r)
    } else {
        (1, bits)
    }
}

pub fn read_store<R: Read>(source: R) -> Result<GcmlStore> {
    let mut r = Cursor { inner: source };
    let magic: [u8; 4] = r.bytes("magic")?;
    if magic != STORE_MAGIC {
        return Err(Error::BadMagic { expected: STORE_MAGIC, found: magic });
    }
    let version = r.u16("version")?;
    if version != STORE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let bits = r.u8("key length")? as usize;
    let tau = r.f32("tau")?;
    let order_code = r.u8("bit order")?;
    let bit_order =
        BitOrder::from_code(order_code).ok_or_else(|| Error::Corrupt(format!("bit order code {order_code}")))?;
    let normalized = match r.u8("normalized flag")? {
        0 => false,
        1 => true,
        v => return Err(Error::Corrupt(format!("normalized flag {v}"))),
    };
    let pooling_code = r.u8("pooling mode")?;
    let pooling = PoolingMode::from_code(pooling_code)
        .ok_or_else(|| Error::Corrupt(format!("pooling mode code {pooling_code}")))?;
    if bits == 0 {
        return Err(Error::Corrupt("key length 0".into()));
    }
    let (gh, gw) = default_grid(bits);
    let cfg = GcmlConfig::new(tau, gh, gw, bit_order).map_err(|e| Error::Corrupt(e.to_string()))?;
    let c = r.u32("class count")? as usize;
    if c == 0 {
        return Err(Error::Corrupt("zero classes".into()));
    }
    let mut classes = Vec::with_capacity(c.min(1 << 16));
    for i in 0..c {
        let len = r.u16("label length")? as usize;
        let mut raw = vec![0u8; len];
        r.inner.read_exact(&mut raw).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("label {i}")),
            _ => Error::Io(e),
        })?;
        classes.push(String::from_utf8(raw).map_err(|_| Error::Corrupt(format!("label {i} is not UTF-8")))?);
    }
    let mut store = GcmlStore::new(classes, cfg, pooling)?;
    for class in 0..c {
        let declared = r.u64("row total")?;
        let entries = r.u64("entry count")?;
        let mut prev: Option<u64> = None;
        let mut sum: u64 = 0;
        for _ in 0..entries {
            let key = r.u64("entry key")?;
            let count = r.u64("entry count")?;
            if prev.is_some_and(|p| key <= p) {
                return Err(Error::Corrupt(format!("class {class}: keys not strictly ascending at {key}")));
            }
            if !cfg.key_fits(BitKey(key)) {
                return Err(Error::Corrupt(format!("class {class}: key {key} exceeds {bits} bits")));
            }
            if count == 0 {
                return Err(Error::Corrupt(format!("class {class}: zero count stored for key {key}")));
            }
            sum = sum.checked_add(count).ok_or_else(|| Error::Corrupt(format!("class {class}: counts overflow")))?;
            store.rows[class].insert(key, count);
            prev = Some(key);
        }
        if sum != declared {
            return Err(Error::Corrupt(format!("class {class}: row total {declared} but counts sum to {sum}")));
        }
        store.row_totals[class] = declared;
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::TrailingBytes);
    }
    store.normalized = normalized;
    Ok(store)
}
