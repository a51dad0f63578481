//! Synthetic data where classes differ only in where activations sit, not in
//! how much activation there is, plus a loop-by-loop reference trainer.
//!
//! With one filter and equal total intensity per class, the additive head
//! score carries no class information. The attention key still separates the
//! classes because it records which cells are hot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{BitOrder, GcmlConfig};
use crate::cam::{class_scores, ClassifierHead, FeatureMapStack, PoolingMode};
use crate::error::{Error, Result};
use crate::store::{argmax, GcmlStore, Sample};
use crate::tensorio::{save_tensor, write_tensor, DatasetManifest, SampleEntry};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub y: usize,
    pub x: usize,
    pub intensity: f64,
}

impl Blob {
    pub fn new(y: usize, x: usize, intensity: f64) -> Self {
        Self { y, x, intensity }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialClassSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// One blob layout per class.
    pub layouts: Vec<Vec<Blob>>,
    /// Standard deviation of the Gaussian noise added to each blob intensity.
    pub noise_sigma: f64,
    /// Probability that a blob moves to a random 4-neighbour cell.
    pub jitter_prob: f64,
}

impl SpatialClassSpec {
    /// Two classes on 4x4: hot corners on the main diagonal versus the anti-diagonal.
    pub fn diagonal_pair(noise_sigma: f64, jitter_prob: f64) -> Self {
        Self {
            grid_h: 4,
            grid_w: 4,
            layouts: vec![
                vec![Blob::new(0, 0, 1.0), Blob::new(3, 3, 1.0)],
                vec![Blob::new(0, 3, 1.0), Blob::new(3, 0, 1.0)],
            ],
            noise_sigma,
            jitter_prob,
        }
    }

    /// [`Self::diagonal_pair`] plus a brighter blob at (1, 1) shared by both
    /// classes, so the single hottest cell says nothing about the class.
    pub fn anchored_diagonal_pair(noise_sigma: f64, jitter_prob: f64) -> Self {
        let mut spec = Self::diagonal_pair(noise_sigma, jitter_prob);
        for layout in &mut spec.layouts {
            layout.push(Blob::new(1, 1, 2.0));
        }
        spec
    }

    /// Three classes on 4x4 with two unit blobs each.
    pub fn three_way(noise_sigma: f64, jitter_prob: f64) -> Self {
        Self {
            grid_h: 4,
            grid_w: 4,
            layouts: vec![
                vec![Blob::new(0, 0, 1.0), Blob::new(3, 3, 1.0)],
                vec![Blob::new(0, 3, 1.0), Blob::new(3, 0, 1.0)],
                vec![Blob::new(1, 0, 1.0), Blob::new(2, 3, 1.0)],
            ],
            noise_sigma,
            jitter_prob,
        }
    }

    pub fn classes(&self) -> usize {
        self.layouts.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes()).map(|c| format!("class{c}")).collect()
    }

    /// Noise-free total activation of each class layout.
    pub fn layout_sums(&self) -> Vec<f64> {
        self.layouts.iter().map(|l| l.iter().map(|b| b.intensity).sum()).collect()
    }

    pub fn has_equal_sums(&self) -> bool {
        let sums = self.layout_sums();
        sums.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::InvalidConfig("synthetic grid is empty".into()));
        }
        if self.layouts.is_empty() {
            return Err(Error::InvalidConfig("no class layouts".into()));
        }
        for (c, layout) in self.layouts.iter().enumerate() {
            if layout.is_empty() {
                return Err(Error::InvalidConfig(format!("class {c} has no blobs")));
            }
            for b in layout {
                if b.y >= self.grid_h || b.x >= self.grid_w {
                    return Err(Error::InvalidConfig(format!(
                        "class {c} blob at ({}, {}) is outside the {}x{} grid",
                        b.y, b.x, self.grid_h, self.grid_w
                    )));
                }
                if !(b.intensity > 0.0 && b.intensity.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "class {c} blob intensity {} is not positive",
                        b.intensity
                    )));
                }
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise sigma {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.jitter_prob) {
            return Err(Error::InvalidConfig(format!("jitter probability {}", self.jitter_prob)));
        }
        Ok(())
    }

    fn neighbours(&self, y: usize, x: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(4);
        if y > 0 {
            v.push((y - 1, x));
        }
        if y + 1 < self.grid_h {
            v.push((y + 1, x));
        }
        if x > 0 {
            v.push((y, x - 1));
        }
        if x + 1 < self.grid_w {
            v.push((y, x + 1));
        }
        v
    }

    fn render(&self, class: usize, rng: &mut ChaCha8Rng) -> FeatureMapStack {
        let noise = Normal::new(0.0, self.noise_sigma).expect("sigma validated");
        let mut map = vec![0.0; self.grid_h * self.grid_w];
        for b in &self.layouts[class] {
            let (mut y, mut x) = (b.y, b.x);
            if self.jitter_prob > 0.0 && rng.random_bool(self.jitter_prob) {
                let n = self.neighbours(y, x);
                if !n.is_empty() {
                    (y, x) = n[rng.random_range(0..n.len())];
                }
            }
            let value = if self.noise_sigma > 0.0 { b.intensity + noise.sample(rng) } else { b.intensity };
            map[y * self.grid_w + x] += value;
        }
        FeatureMapStack::new(1, self.grid_h, self.grid_w, map).expect("rendered map is finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub seed: u64,
}

impl SynthDataset {
    /// All samples as GCT1 bytes followed by the label, in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.samples {
            write_tensor(&s.stack.to_tensor(), &mut out).expect("writing to memory");
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
        }
        out
    }

    /// Writes `sample_NNNNN.gct` files and `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("sample_{i:05}.gct");
            save_tensor(&s.stack.to_tensor(), dir.join(&name))?;
            entries.push(SampleEntry { path: name.into(), label: s.label });
        }
        let manifest = DatasetManifest::new(self.classes.clone(), entries)?;
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}

/// `n_per_class` samples per class, class-major order. Sample `i` draws from
/// its own random stream derived from `(seed, i)`.
pub fn gen_spatial_classes(spec: &SpatialClassSpec, seed: u64, n_per_class: usize) -> Result<SynthDataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.classes() * n_per_class);
    for class in 0..spec.classes() {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((class * n_per_class + i) as u64);
            samples.push(Sample::new(spec.render(class, &mut rng), class));
        }
    }
    Ok(SynthDataset { classes: spec.class_names(), samples, seed })
}

/// One filter, unit weight for every class, no bias.
pub fn unit_head(classes: usize) -> ClassifierHead {
    ClassifierHead::new(classes, 1, vec![1.0; classes], None, PoolingMode::Sum).expect("valid unit head")
}

/// Uniform random `k x h x w` stacks with random labels and a random head,
/// for exercising multi-filter CAMs.
pub fn gen_random_stacks(
    seed: u64,
    n: usize,
    classes: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Result<(SynthDataset, ClassifierHead)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..classes * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let head = ClassifierHead::new(classes, k, weights, None, PoolingMode::Sum)?;
    let samples = (0..n)
        .map(|_| {
            let v = (0..k * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            Ok(Sample::new(FeatureMapStack::new(k, h, w, v)?, rng.random_range(0..classes)))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = (0..classes).map(|c| format!("class{c}")).collect();
    Ok((SynthDataset { classes: names, samples, seed }, head))
}

/// Reference trainer written with plain index loops. It pools, weights,
/// normalizes, thresholds and packs bits itself and only uses the store type
/// to hold the result.
pub fn oracle_store(
    samples: &[Sample],
    head: &ClassifierHead,
    cfg: &GcmlConfig,
    classes: Vec<String>,
) -> Result<GcmlStore> {
    let (gh, gw) = cfg.grid();
    let len = gh * gw;
    let mut rows: Vec<BTreeMap<u64, u64>> = vec![BTreeMap::new(); classes.len()];
    for s in samples {
        let f = &s.stack;
        let (sh, sw) = (f.height(), f.width());
        let (wy, wx) = (sh / gh, sw / gw);

        // pool each filter onto the grid
        let mut pooled = vec![vec![0.0f64; len]; f.filters()];
        for (k, plane) in pooled.iter_mut().enumerate() {
            for gy in 0..gh {
                for gx in 0..gw {
                    if (wy, wx) == (1, 1) {
                        plane[gy * gw + gx] = f.get(k, gy, gx);
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in gy * wy..(gy + 1) * wy {
                        for x in gx * wx..(gx + 1) * wx {
                            acc += f.get(k, y, x);
                        }
                    }
                    plane[gy * gw + gx] = acc / (wy * wx) as f64;
                }
            }
        }

        let mut cam = vec![0.0f64; len];
        for (k, plane) in pooled.iter().enumerate() {
            let wk = head.row(s.label)[k];
            for i in 0..len {
                cam[i] += wk * plane[i];
            }
        }

        let mut lo = cam[0];
        let mut hi = cam[0];
        for &v in &cam {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }

        let mut key = 0u64;
        for (i, &v) in cam.iter().enumerate() {
            let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            if norm >= f64::from(cfg.tau()) {
                let bit = match cfg.bit_order() {
                    BitOrder::Little => i,
                    BitOrder::Big => len - 1 - i,
                };
                key |= 1u64 << bit;
            }
        }
        *rows[s.label].entry(key).or_insert(0) += 1;
    }
    GcmlStore::from_counts(classes, *cfg, head.pooling(), rows)
}

/// Accuracy of classifying by the largest head score.
pub fn additive_baseline(samples: &[Sample], head: &ClassifierHead) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        let scores = class_scores(&s.stack, head)?;
        correct += usize::from(argmax(&scores) == s.label);
    }
    Ok(correct as f64 / samples.len() as f64)
}
