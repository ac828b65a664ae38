//! Constructed feature bundles with a known answer, for tests and demos.
//!
//! The image is split vertically into two flat-coloured halves. Every patch
//! feature points along its half's class direction, so cosine logits are
//! one-hot dominant before any refinement. Attention maps are softmaxed
//! feature similarities, as a real backbone would produce for such input.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Grid;
use crate::tensorio::{FeatureBundle, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TwoRegionSpec {
    pub height: usize,
    pub width: usize,
    /// CLIP patch size in pixels.
    pub clip_patch: usize,
    /// DINO patch size in pixels.
    pub dino_patch: usize,
    pub dim: usize,
    /// Number of CLIP layers `N`; the bundle carries `N - 1` attention maps.
    pub clip_layers: usize,
    pub dino_layers: usize,
    pub heads: usize,
    /// Per-entry uniform noise amplitude relative to the unit class directions.
    pub noise: f64,
    pub seed: u64,
    pub class_token: bool,
}

impl Default for TwoRegionSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            clip_patch: 4,
            dino_patch: 2,
            dim: 16,
            clip_layers: 3,
            dino_layers: 3,
            heads: 2,
            noise: 0.0,
            seed: 0,
            class_token: true,
        }
    }
}

pub const CLASS_NAMES: [&str; 3] = ["meadow", "water", "road"];
pub const LEFT_COLOR: [u8; 3] = [190, 70, 40];
pub const RIGHT_COLOR: [u8; 3] = [40, 90, 200];

impl TwoRegionSpec {
    pub fn clip_grid(&self) -> Grid {
        Grid::new(self.height / self.clip_patch, self.width / self.clip_patch)
    }

    pub fn dino_grid(&self) -> Grid {
        Grid::new(self.height / self.dino_patch, self.width / self.dino_patch)
    }

    /// Class 0 on the left half, class 1 on the right; class 2 never occurs.
    pub fn ground_truth(&self) -> Array2<i64> {
        Array2::from_shape_fn((self.height, self.width), |(_, x)| i64::from(2 * x >= self.width))
    }

    pub fn image(&self) -> Array3<u8> {
        Array3::from_shape_fn((self.height, self.width, 3), |(_, x, c)| {
            if 2 * x >= self.width {
                RIGHT_COLOR[c]
            } else {
                LEFT_COLOR[c]
            }
        })
    }

    pub fn build(&self) -> (FeatureBundle, Tensor) {
        assert!(self.dim >= CLASS_NAMES.len(), "need one axis per class");
        assert!(self.clip_layers >= 2 && self.dino_layers >= 2 && self.heads >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let cg = self.clip_grid();
        let dg = self.dino_grid();

        let clip_layers: Vec<Array2<f64>> = (0..self.clip_layers)
            .map(|_| self.tokens(&mut rng, cg, self.clip_patch))
            .collect();
        let dino_layers: Vec<Array2<f64>> = (0..self.dino_layers)
            .map(|_| self.tokens(&mut rng, dg, self.dino_patch))
            .collect();

        let intermediate = self.clip_layers - 1;
        let p_clip = clip_layers[0].nrows();
        let mut attn = Array4::<f64>::zeros((intermediate, self.heads, p_clip, p_clip));
        for n in 0..intermediate {
            for h in 0..self.heads {
                attn.index_axis_mut(Axis(0), n)
                    .index_axis_mut(Axis(0), h)
                    .assign(&softmax_similarity(&clip_layers[n], 4.0 + 2.0 * h as f64));
            }
        }
        let mut clip_feats = Array3::<f64>::zeros((intermediate, p_clip, self.dim));
        for n in 0..intermediate {
            clip_feats.index_axis_mut(Axis(0), n).assign(&clip_layers[n]);
        }
        let p_dino = dino_layers[0].nrows();
        let mut dino_feats = Array3::<f64>::zeros((self.dino_layers, p_dino, self.dim));
        for (n, layer) in dino_layers.iter().enumerate() {
            dino_feats.index_axis_mut(Axis(0), n).assign(layer);
        }
        let dino_attn = softmax_similarity(dino_layers.last().expect("two layers"), 6.0);
        let text = Array2::from_shape_fn((CLASS_NAMES.len(), self.dim), |(k, d)| f64::from(u8::from(k == d)));

        let gt = self.ground_truth();
        let bundle = FeatureBundle {
            image: Tensor::from_u8(vec![self.height, self.width, 3], self.image().into_iter().collect())
                .expect("non-empty"),
            clip_layer_features: Tensor::from_array(&clip_feats).expect("non-empty"),
            clip_layer_attn: Tensor::from_array(&attn).expect("non-empty"),
            clip_value_last: Tensor::from_array(clip_layers.last().expect("two layers")).expect("non-empty"),
            dino_layer_features: Tensor::from_array(&dino_feats).expect("non-empty"),
            dino_attn_last: Tensor::from_array(&dino_attn).expect("non-empty"),
            text_embeddings: Tensor::from_array(&text).expect("non-empty"),
            grid_clip: cg,
            grid_dino: dg,
            has_class_token_clip: self.class_token,
            has_class_token_dino: self.class_token,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        };
        let gt = Tensor::from_i64(vec![self.height, self.width], gt.into_iter().collect()).expect("non-empty");
        (bundle, gt)
    }

    /// Token features for one layer: optional class token first, then the
    /// patches in row-major order.
    fn tokens(&self, rng: &mut ChaCha8Rng, grid: Grid, patch: usize) -> Array2<f64> {
        let lead = usize::from(self.class_token);
        let mut out = Array2::<f64>::zeros((grid.len() + lead, self.dim));
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let centre_x = (c as f64 + 0.5) * patch as f64;
                let class = usize::from(2.0 * centre_x >= self.width as f64);
                let mut row = out.row_mut(lead + r * grid.cols + c);
                row[class] = 1.0;
                if self.noise > 0.0 {
                    row.mapv_inplace(|v| v + rng.gen_range(-self.noise..=self.noise));
                }
            }
        }
        if self.class_token {
            let mean: Array1<f64> = out.slice(ndarray::s![1.., ..]).mean_axis(Axis(0)).expect("patches");
            out.row_mut(0).assign(&mean);
        }
        out
    }
}

/// Row-wise softmax of `temperature * cos(f_i, f_j)`.
fn softmax_similarity(f: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let norms: Vec<f64> = f.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let mut sim = f.dot(&f.t());
    for ((i, j), v) in sim.indexed_iter_mut() {
        *v = temperature * *v / (norms[i] * norms[j]);
    }
    for mut row in sim.rows_mut() {
        let top = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - top).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    sim
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bundle_validates() {
        let spec = TwoRegionSpec::default();
        let (bundle, gt) = spec.build();
        bundle.validate().unwrap();
        assert_eq!(gt.shape(), &[32, 32]);
        assert_eq!(bundle.clip_layer_attn.shape(), &[2, 2, 65, 65]);
        assert_eq!(bundle.dino_attn_last.shape(), &[257, 257]);
    }

    #[test]
    fn noise_is_seeded() {
        let spec = TwoRegionSpec {
            noise: 0.1,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(spec.build().0.clip_value_last, spec.build().0.clip_value_last);
        let other = TwoRegionSpec { seed: 10, ..spec };
        assert_ne!(spec.build().0.clip_value_last, other.build().0.clip_value_last);
    }

    #[test]
    fn without_class_token() {
        let spec = TwoRegionSpec {
            class_token: false,
            ..Default::default()
        };
        let (bundle, _) = spec.build();
        bundle.validate().unwrap();
        assert_eq!(bundle.clip_value_last.shape(), &[64, 16]);
    }
}
