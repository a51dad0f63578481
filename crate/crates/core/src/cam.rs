//! Class scores and class activation maps computed from exported
//! last-layer feature stacks and the classifier head that follows them.
//!
//! A CAM for class `c` is the head-weighted sum of the filter maps,
//! `M_c(y, x) = sum_k w[c][k] * f_k(y, x)`. The class score applies the same
//! weights to the globally pooled filters and adds the optional bias. Because
//! both are linear in the feature values, average-pooling the stack and then
//! computing the CAM gives the same map as pooling the CAM itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{load_tensor, save_tensor, TensorF32};

/// How the head pools each filter map before the linear layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Sum,
    Mean,
}

impl PoolingMode {
    pub fn code(self) -> u8 {
        match self {
            PoolingMode::Sum => 0,
            PoolingMode::Mean => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PoolingMode::Sum),
            1 => Some(PoolingMode::Mean),
            _ => None,
        }
    }
}

/// `k` filter maps of `h × w` activations, filter-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    k: usize,
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl FeatureMapStack {
    pub fn new(k: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!("feature stack {k}x{h}x{w} has an empty dimension")));
        }
        if values.len() != k * h * w {
            return Err(Error::InvalidShape(format!(
                "feature stack {k}x{h}x{w} needs {} values, got {}",
                k * h * w,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("feature stack contains non-finite values".into()));
        }
        Ok(Self { k, h, w, values })
    }

    /// Accepts `[k, h, w]`, or `[1, k, h, w]` as exported with a batch axis.
    pub fn from_tensor(t: &TensorF32) -> Result<Self> {
        let (k, h, w) = match *t.shape() {
            [k, h, w] => (k, h, w),
            [1, k, h, w] => (k, h, w),
            ref s => return Err(Error::InvalidShape(format!("expected a [k, h, w] feature stack, got {s:?}"))),
        };
        Self::new(k, h, w, t.data().iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_tensor(&self) -> TensorF32 {
        TensorF32::new(vec![self.k, self.h, self.w], self.values.iter().map(|&v| v as f32).collect())
            .expect("stack dimensions are valid by construction")
    }

    pub fn filters(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f64 {
        self.values[(k * self.h + y) * self.w + x]
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * a).collect(), ..self.clone() }
    }
}

/// Final linear layer: `c × k` weights, optional per-class bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    classes: usize,
    k: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
    pooling: PoolingMode,
}

impl ClassifierHead {
    pub fn new(
        classes: usize,
        k: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
        pooling: PoolingMode,
    ) -> Result<Self> {
        if classes == 0 || k == 0 {
            return Err(Error::InvalidShape(format!("head {classes}x{k} has an empty dimension")));
        }
        if weights.len() != classes * k {
            return Err(Error::InvalidShape(format!(
                "head weights need {} values for {classes}x{k}, got {}",
                classes * k,
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != classes {
                return Err(Error::InvalidShape(format!("bias has {} entries for {classes} classes", b.len())));
            }
        }
        let all = weights.iter().chain(bias.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("head contains non-finite values".into()));
        }
        Ok(Self { classes, k, weights, bias, pooling })
    }

    pub fn from_tensors(weights: &TensorF32, bias: Option<&TensorF32>, pooling: PoolingMode) -> Result<Self> {
        let [c, k] = *weights.shape() else {
            return Err(Error::InvalidShape(format!("head weights must be [c, k], got {:?}", weights.shape())));
        };
        let bias = match bias {
            Some(b) => {
                if b.shape() != [c] {
                    return Err(Error::InvalidShape(format!("bias must be [{c}], got {:?}", b.shape())));
                }
                Some(b.data().iter().map(|&v| f64::from(v)).collect())
            }
            None => None,
        };
        Self::new(c, k, weights.data().iter().map(|&v| f64::from(v)).collect(), bias, pooling)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn filters(&self) -> usize {
        self.k
    }

    pub fn pooling(&self) -> PoolingMode {
        self.pooling
    }

    pub fn with_pooling(mut self, pooling: PoolingMode) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.k..(c + 1) * self.k]
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    fn check(&self, f: &FeatureMapStack, c: usize) -> Result<()> {
        if c >= self.classes {
            return Err(Error::ClassOutOfRange { index: c, len: self.classes });
        }
        if f.k != self.k {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} filters, feature stack has {}",
                self.k, f.k
            )));
        }
        Ok(())
    }

    /// Reads a head manifest and the tensors it references.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = std::fs::read_to_string(manifest)?;
        let hm: HeadManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", manifest.display())))?;
        let base = manifest.parent().unwrap_or_else(|| Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let weights = load_tensor(resolve(&hm.weights))?;
        let bias = hm.bias.as_deref().map(|p| load_tensor(resolve(p))).transpose()?;
        Self::from_tensors(&weights, bias.as_ref(), hm.pooling_mode)
    }

    /// Writes `<stem>.weights.gct`, an optional `<stem>.bias.gct` and
    /// `<stem>.json` into `dir`; returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let weights_name = format!("{stem}.weights.gct");
        let w = TensorF32::new(vec![self.classes, self.k], self.weights.iter().map(|&v| v as f32).collect())?;
        save_tensor(&w, dir.join(&weights_name))?;
        let bias_name = match &self.bias {
            Some(b) => {
                let name = format!("{stem}.bias.gct");
                let t = TensorF32::new(vec![self.classes], b.iter().map(|&v| v as f32).collect())?;
                save_tensor(&t, dir.join(&name))?;
                Some(PathBuf::from(name))
            }
            None => None,
        };
        let hm = HeadManifest { weights: weights_name.into(), bias: bias_name, pooling_mode: self.pooling };
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&hm).map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

/// On-disk description of a classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub weights: PathBuf,
    #[serde(default)]
    pub bias: Option<PathBuf>,
    #[serde(default)]
    pub pooling_mode: PoolingMode,
}

/// Activation-intensity grid for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub class_index: usize,
}

impl Cam {
    pub fn new(h: usize, w: usize, values: Vec<f64>, class_index: usize) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(Error::InvalidShape(format!("cam {h}x{w} with {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("cam contains non-finite values".into()));
        }
        Ok(Self { h, w, values, class_index })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }
}

fn pooled(plane: &[f64], mode: PoolingMode) -> f64 {
    let s: f64 = plane.iter().sum();
    match mode {
        PoolingMode::Sum => s,
        PoolingMode::Mean => s / plane.len() as f64,
    }
}

pub fn class_score(f: &FeatureMapStack, head: &ClassifierHead, c: usize) -> Result<f64> {
    head.check(f, c)?;
    let s: f64 = head.row(c).iter().enumerate().map(|(k, w)| w * pooled(f.filter(k), head.pooling)).sum();
    Ok(s + head.bias.as_ref().map_or(0.0, |b| b[c]))
}

/// Scores for every class, pooling each filter once.
pub fn class_scores(f: &FeatureMapStack, head: &ClassifierHead) -> Result<Vec<f64>> {
    head.check(f, 0)?;
    let pooled: Vec<f64> = (0..f.k).map(|k| pooled(f.filter(k), head.pooling)).collect();
    Ok((0..head.classes)
        .map(|c| {
            let s: f64 = head.row(c).iter().zip(&pooled).map(|(w, p)| w * p).sum();
            s + head.bias.as_ref().map_or(0.0, |b| b[c])
        })
        .collect())
}

/// Weighted sum of filter maps for class `c`. The bias never enters.
pub fn compute_cam(f: &FeatureMapStack, head: &ClassifierHead, c: usize) -> Result<Cam> {
    head.check(f, c)?;
    let n = f.h * f.w;
    let mut values = vec![0.0; n];
    for (k, &wk) in head.row(c).iter().enumerate() {
        for (acc, &v) in values.iter_mut().zip(f.filter(k)) {
            *acc += wk * v;
        }
    }
    Ok(Cam { h: f.h, w: f.w, values, class_index: c })
}

pub fn compute_cams(f: &FeatureMapStack, head: &ClassifierHead) -> Result<Vec<Cam>> {
    (0..head.classes).map(|c| compute_cam(f, head, c)).collect()
}

/// Fixed-window average pooling to a smaller grid.
pub trait Downsample: Sized {
    fn downsample_avg(&self, target_h: usize, target_w: usize) -> Result<Self>;
}

fn pooling_windows(h: usize, w: usize, th: usize, tw: usize) -> Result<(usize, usize)> {
    if th == 0 || tw == 0 || th > h || tw > w || !h.is_multiple_of(th) || !w.is_multiple_of(tw) {
        return Err(Error::DimensionMismatch(format!(
            "cannot average-pool {h}x{w} onto {th}x{tw}; source dims must be integer multiples of the target"
        )));
    }
    Ok((h / th, w / tw))
}

fn pool_plane(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let (wh, ww) = (h / th, w / tw);
    let area = (wh * ww) as f64;
    let mut out = Vec::with_capacity(th * tw);
    for ty in 0..th {
        for tx in 0..tw {
            let mut s = 0.0;
            for y in ty * wh..(ty + 1) * wh {
                for x in tx * ww..(tx + 1) * ww {
                    s += src[y * w + x];
                }
            }
            out.push(s / area);
        }
    }
    out
}

impl Downsample for Cam {
    fn downsample_avg(&self, target_h: usize, target_w: usize) -> Result<Self> {
        pooling_windows(self.h, self.w, target_h, target_w)?;
        Ok(Cam {
            h: target_h,
            w: target_w,
            values: pool_plane(&self.values, self.h, self.w, target_h, target_w),
            class_index: self.class_index,
        })
    }
}

impl Downsample for FeatureMapStack {
    fn downsample_avg(&self, target_h: usize, target_w: usize) -> Result<Self> {
        pooling_windows(self.h, self.w, target_h, target_w)?;
        let values = (0..self.k).flat_map(|k| pool_plane(self.filter(k), self.h, self.w, target_h, target_w)).collect();
        Ok(FeatureMapStack { k: self.k, h: target_h, w: target_w, values })
    }
}

/// Rescales to `[0, 1]`. A constant map becomes all zeros.
pub fn minmax_normalize(m: &Cam) -> Cam {
    let (lo, hi) = m.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let values =
        if range > 0.0 { m.values.iter().map(|&v| (v - lo) / range).collect() } else { vec![0.0; m.values.len()] };
    Cam { values, ..m.clone() }
}

/// Corner-aligned bilinear upsampling: output corners coincide with input corners.
pub fn upsample_bilinear(m: &Cam, out_h: usize, out_w: usize) -> Result<TensorF32> {
    if out_h < m.h || out_w < m.w {
        return Err(Error::InvalidShape(format!(
            "upsampling target {out_h}x{out_w} is smaller than the {}x{} map",
            m.h, m.w
        )));
    }
    let axis = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        if out == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (out - 1) as f64;
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, out_h, m.h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, out_w, m.w);
            let top = m.get(y0, x0) * (1.0 - fx) + m.get(y0, x1) * fx;
            let bottom = m.get(y1, x0) * (1.0 - fx) + m.get(y1, x1) * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    TensorF32::new(vec![out_h, out_w], data)
}
