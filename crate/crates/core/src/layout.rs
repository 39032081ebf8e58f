//! Per-pixel class maps (`H×W×C`) and class ratios derived from them.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// A scene layout: one channel per class, values in `[0, 1]`, stored
/// channel-major (`C×H×W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Layout {
    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            data: vec![0.0; classes * height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3, "layout tensor must be C×H×W");
        Self {
            classes: s[0],
            height: s[1],
            width: s[2],
            data: t.data().to_vec(),
        }
    }

    /// One-hot layout from a class-index map; indices `>= classes` are empty.
    pub fn from_class_map(map: &[u16], classes: usize, height: usize, width: usize) -> Self {
        assert_eq!(map.len(), height * width);
        let mut l = Self::zeros(classes, height, width);
        for (p, &c) in map.iter().enumerate() {
            if (c as usize) < classes {
                l.data[c as usize * height * width + p] = 1.0;
            }
        }
        l
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.classes, self.height, self.width], self.data.clone())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, class: usize, y: usize, x: usize, v: f64) {
        self.data[(class * self.height + y) * self.width + x] = v;
    }

    /// Winning class per pixel (row-major); `None` where every channel is 0.
    /// Ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<Option<usize>> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|p| {
                let mut best = None;
                let mut best_v = 0.0;
                for c in 0..self.classes {
                    let v = self.data[c * plane + p];
                    if v > best_v {
                        best_v = v;
                        best = Some(c);
                    }
                }
                best
            })
            .collect()
    }

    pub fn all_in_unit_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

/// A probability per class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassRatio(Vec<f64>);

impl ClassRatio {
    pub fn new(p: Vec<f64>) -> Result<Self, String> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("class ratio entries must be finite and non-negative".into());
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(format!("class ratio sums to {s}, expected 1"));
        }
        Ok(Self(p))
    }

    /// Normalizes non-negative counts; all-zero counts give the uniform ratio.
    pub fn from_counts(counts: &[f64]) -> Self {
        let s: f64 = counts.iter().sum();
        if s <= 0.0 {
            let n = counts.len().max(1) as f64;
            return Self(vec![1.0 / n; counts.len()]);
        }
        Self(counts.iter().map(|c| c / s).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Pixel share of each class under the layout's argmax. Empty pixels are
/// ignored; a layout with no labelled pixel gives the uniform ratio.
pub fn class_ratio_of_layout(layout: &Layout) -> ClassRatio {
    let mut counts = vec![0.0; layout.classes()];
    for c in layout.argmax().into_iter().flatten() {
        counts[c] += 1.0;
    }
    ClassRatio::from_counts(&counts)
}
