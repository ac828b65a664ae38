//! Cross-model attention fusion.
//!
//! The semantic (CLIP) branch averages its intermediate attention maps, turns
//! the sharpened average into a spatial prior for the last-layer values, and
//! produces per-layer cosine logits against the text embeddings. The
//! structural (DINO) branch normalizes its layer features and contributes its
//! last-layer attention. Each branch's last-layer scores are then propagated
//! through the sum of its own attention and the other branch's attention, and
//! the mean of its intermediate-layer scores is added.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis, Ix2, Ix3, Ix4};

use crate::geometry::{resample_bilinear, Grid};
use crate::scalar::Scalar;
use crate::tensorio::{FeatureBundle, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum CafError {
    #[error("attention stack has no layers")]
    EmptyLayerAxis,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature dim {features} does not match text embedding dim {text}")]
    DimensionMismatch { features: usize, text: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn shape_err(msg: impl Into<String>) -> CafError {
    CafError::ShapeMismatch(msg.into())
}

/// Patch-to-patch attention on a spatial grid, class token already removed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub values: Array2<T>,
    pub grid: Grid,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(values: Array2<T>, grid: Grid) -> Result<Self, CafError> {
        if values.nrows() != values.ncols() || values.nrows() != grid.len() {
            return Err(shape_err(format!(
                "attention {:?} does not fit grid {grid}",
                values.dim()
            )));
        }
        Ok(Self { values, grid })
    }
}

/// Per-patch, per-class scores (`P x K`) on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    pub values: Array2<T>,
    pub grid: Grid,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn new(values: Array2<T>, grid: Grid) -> Result<Self, CafError> {
        if values.nrows() != grid.len() {
            return Err(shape_err(format!(
                "score map has {} rows, grid {grid} has {} patches",
                values.nrows(),
                grid.len()
            )));
        }
        Ok(Self { values, grid })
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn resample(&self, target: Grid) -> Self {
        Self {
            values: resample_bilinear(self.values.view(), self.grid, target),
            grid: target,
        }
    }

    /// `rows x cols x K` tensor; the grid is recoverable from the shape.
    pub fn to_tensor(&self) -> Tensor {
        let k = self.num_classes();
        let arr = self
            .values
            .clone()
            .into_shape_with_order((self.grid.rows, self.grid.cols, k))
            .expect("rows match grid");
        Tensor::from_array(&arr).expect("non-empty score map")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, CafError> {
        let arr = t.to_array::<T>()?;
        let arr = arr
            .into_dimensionality::<Ix3>()
            .map_err(|_| shape_err(format!("score tensor must be rows x cols x K, got {:?}", t.shape())))?;
        let (r, c, k) = arr.dim();
        let values = arr.into_shape_with_order((r * c, k)).expect("contiguous");
        Ok(Self {
            values,
            grid: Grid::new(r, c),
        })
    }
}

/// Scales each row to unit l2 norm; zero rows stay zero.
pub(crate) fn normalize_rows_l2<T: Scalar>(mut m: Array2<T>) -> Array2<T> {
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            row.mapv_inplace(|v| v / norm);
        }
    }
    m
}

/// Scales each row to unit l1 norm (entries assumed non-negative); zero rows stay zero.
pub(crate) fn normalize_rows_l1<T: Scalar>(mut m: Array2<T>) -> Array2<T> {
    for mut row in m.rows_mut() {
        let total: T = row.iter().copied().sum();
        if total > T::zero() {
            row.mapv_inplace(|v| v / total);
        }
    }
    m
}

/// Mean over the layer axis of a `layers x heads x P' x P'` stack.
pub fn average_attention<T: Scalar>(layer_attn: ArrayView4<'_, T>) -> Result<Array3<T>, CafError> {
    let layers = layer_attn.len_of(Axis(0));
    if layers == 0 {
        return Err(CafError::EmptyLayerAxis);
    }
    let (_, h, p, q) = layer_attn.dim();
    if p != q {
        return Err(shape_err(format!("attention maps are not square: {p}x{q}")));
    }
    let mut sum = Array3::<T>::zeros((h, p, q));
    for layer in layer_attn.outer_iter() {
        sum += &layer;
    }
    Ok(sum / T::of_usize(layers))
}

/// Sharpens the averaged attention of each head and uses it to aggregate the
/// last-layer values:
/// `mean_h l1_rows(relu(sym(A_h) - mean(A_h))) . V`, class-token row dropped.
pub fn sharpen_and_project<T: Scalar>(
    a_avg: ArrayView3<'_, T>,
    v_last: ArrayView2<'_, T>,
    has_class_token: bool,
) -> Result<Array2<T>, CafError> {
    let (heads, p, q) = a_avg.dim();
    if p != q || v_last.nrows() != p {
        return Err(shape_err(format!(
            "attention {:?} incompatible with values {:?}",
            a_avg.dim(),
            v_last.dim()
        )));
    }
    if heads == 0 {
        return Err(CafError::EmptyLayerAxis);
    }
    if has_class_token && p < 2 {
        return Err(shape_err("class token leaves no spatial patches"));
    }
    let mut out = Array2::<T>::zeros(v_last.dim());
    for head in a_avg.outer_iter() {
        let mu = head.mean().expect("non-empty head");
        let half = T::of_f64(0.5);
        let sharpened = Array2::from_shape_fn((p, p), |(i, j)| {
            ((head[[i, j]] + head[[j, i]]) * half - mu).max(T::zero())
        });
        out += &normalize_rows_l1(sharpened).dot(&v_last);
    }
    out /= T::of_usize(heads);
    let start = usize::from(has_class_token);
    Ok(out.slice(s![start.., ..]).to_owned())
}

/// Mean over heads, class token stripped, as an attention map on `grid`.
pub fn head_average<T: Scalar>(
    a_avg: ArrayView3<'_, T>,
    has_class_token: bool,
    grid: Grid,
) -> Result<AttentionMap<T>, CafError> {
    if a_avg.len_of(Axis(0)) == 0 {
        return Err(CafError::EmptyLayerAxis);
    }
    let mean = a_avg.mean_axis(Axis(0)).expect("at least one head");
    let start = usize::from(has_class_token);
    AttentionMap::new(mean.slice(s![start.., start..]).to_owned(), grid)
}

/// l2-normalizes every patch vector of every layer.
pub fn normalize_dino_layers<T: Scalar>(raw: ArrayView3<'_, T>) -> Array3<T> {
    let mut out = raw.to_owned();
    for mut layer in out.outer_iter_mut() {
        for mut row in layer.rows_mut() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }
    out
}

/// Cosine similarity of every patch feature with every text embedding.
pub fn compute_logits<T: Scalar>(
    features: ArrayView2<'_, T>,
    text: ArrayView2<'_, T>,
    grid: Grid,
) -> Result<ScoreMap<T>, CafError> {
    if features.ncols() != text.ncols() {
        return Err(CafError::DimensionMismatch {
            features: features.ncols(),
            text: text.ncols(),
        });
    }
    let f = normalize_rows_l2(features.to_owned());
    let t = normalize_rows_l2(text.to_owned());
    ScoreMap::new(f.dot(&t.t()), grid)
}

/// Resamples both the query and the key axes of an attention map onto
/// `target`, clamps negatives and l1-normalizes the rows.
pub fn align<T: Scalar>(a: &AttentionMap<T>, target: Grid) -> AttentionMap<T> {
    if a.grid == target {
        return a.clone();
    }
    let by_query = resample_bilinear(a.values.view(), a.grid, target);
    let both = resample_bilinear(by_query.t(), a.grid, target).reversed_axes();
    let clamped = both.mapv(|v| v.max(T::zero()));
    AttentionMap {
        values: normalize_rows_l1(clamped),
        grid: target,
    }
}

/// `(a_self + lambda1 * a_other) . s_last + mean(s_layers)`.
pub fn cross_fuse<T: Scalar>(
    s_last: &ScoreMap<T>,
    s_layers: &[ScoreMap<T>],
    a_self: &AttentionMap<T>,
    a_other: &AttentionMap<T>,
    lambda1: T,
) -> Result<ScoreMap<T>, CafError> {
    if s_layers.is_empty() {
        return Err(CafError::EmptyLayerAxis);
    }
    let dim = s_last.values.dim();
    if let Some(bad) = s_layers.iter().find(|s| s.values.dim() != dim) {
        return Err(shape_err(format!(
            "layer scores {:?} differ from last-layer scores {dim:?}",
            bad.values.dim()
        )));
    }
    for a in [a_self, a_other] {
        if a.values.dim() != (dim.0, dim.0) {
            return Err(shape_err(format!(
                "attention {:?} does not act on {} patches",
                a.values.dim(),
                dim.0
            )));
        }
    }
    let propagation = &a_self.values + &(&a_other.values * lambda1);
    let mut fused = propagation.dot(&s_last.values);
    let mut layer_sum = Array2::<T>::zeros(dim);
    for layer in s_layers {
        layer_sum += &layer.values;
    }
    fused += &(layer_sum / T::of_usize(s_layers.len()));
    Ok(ScoreMap {
        values: fused,
        grid: s_last.grid,
    })
}

/// Outputs of the attention-fusion stage, all on the CLIP grid.
#[derive(Debug, Clone)]
pub struct CafOutput<T> {
    pub s_clip: ScoreMap<T>,
    pub s_dino: ScoreMap<T>,
    /// `N x P_c x D`: intermediate CLIP layer features followed by the
    /// attention-guided last layer.
    pub clip_layer_feats: Array3<T>,
    /// `N_d x P_c x D`: normalized DINO layers resampled to the CLIP grid.
    pub dino_layer_feats: Array3<T>,
}

fn tensor_as<T: Scalar, D: ndarray::Dimension>(t: &Tensor) -> Result<ndarray::Array<T, D>, CafError> {
    t.to_array::<T>()?
        .into_dimensionality::<D>()
        .map_err(|_| shape_err(format!("unexpected rank for tensor of shape {:?}", t.shape())))
}

fn strip_tokens<T: Scalar>(layers: Array3<T>, has_class_token: bool) -> Array3<T> {
    if has_class_token {
        layers.slice(s![.., 1.., ..]).to_owned()
    } else {
        layers
    }
}

/// Resamples each `P x D` layer from `from` to `to`.
fn resample_layers<T: Scalar>(layers: ArrayView3<'_, T>, from: Grid, to: Grid) -> Array3<T> {
    if from == to {
        return layers.to_owned();
    }
    let (n, _, d) = layers.dim();
    let mut out = Array3::zeros((n, to.len(), d));
    for (i, layer) in layers.outer_iter().enumerate() {
        out.slice_mut(s![i, .., ..]).assign(&resample_bilinear(layer, from, to));
    }
    out
}

/// Runs the full attention-fusion stage on a validated bundle.
pub fn run_caf<T: Scalar>(bundle: &FeatureBundle, lambda1: T) -> Result<CafOutput<T>, CafError> {
    let grid = bundle.grid_clip;
    let text: Array2<T> = tensor_as::<T, Ix2>(&bundle.text_embeddings)?;

    // semantic branch
    let layer_attn: ndarray::Array4<T> = tensor_as::<T, Ix4>(&bundle.clip_layer_attn)?;
    let a_avg = average_attention(layer_attn.view())?;
    let values: Array2<T> = tensor_as::<T, Ix2>(&bundle.clip_value_last)?;
    let last_feats = sharpen_and_project(a_avg.view(), values.view(), bundle.has_class_token_clip)?;
    let a_clip = head_average(a_avg.view(), bundle.has_class_token_clip, grid)?;

    let intermediate = layer_attn.len_of(Axis(0));
    let raw_clip: Array3<T> = tensor_as::<T, Ix3>(&bundle.clip_layer_features)?;
    let raw_clip = strip_tokens(raw_clip, bundle.has_class_token_clip);
    let mut clip_layer_feats = Array3::zeros((intermediate + 1, grid.len(), last_feats.ncols()));
    clip_layer_feats
        .slice_mut(s![..intermediate, .., ..])
        .assign(&raw_clip.slice(s![..intermediate, .., ..]));
    clip_layer_feats.slice_mut(s![intermediate, .., ..]).assign(&last_feats);

    let clip_scores = clip_layer_feats
        .outer_iter()
        .map(|f| compute_logits(f, text.view(), grid))
        .collect::<Result<Vec<_>, _>>()?;

    // structural branch
    let dgrid = bundle.grid_dino;
    let raw_dino: Array3<T> = tensor_as::<T, Ix3>(&bundle.dino_layer_features)?;
    let dino_norm = normalize_dino_layers(strip_tokens(raw_dino, bundle.has_class_token_dino).view());
    let dino_scores = dino_norm
        .outer_iter()
        .map(|f| compute_logits(f, text.view(), dgrid).map(|s| s.resample(grid)))
        .collect::<Result<Vec<_>, _>>()?;
    let dino_attn: Array2<T> = tensor_as::<T, Ix2>(&bundle.dino_attn_last)?;
    let start = usize::from(bundle.has_class_token_dino);
    let a_dino = AttentionMap::new(dino_attn.slice(s![start.., start..]).to_owned(), dgrid)?;

    let a_clip = align(&a_clip, grid);
    let a_dino = align(&a_dino, grid);

    let (clip_last, clip_inter) = clip_scores.split_last().expect("at least two clip layers");
    let (dino_last, dino_inter) = dino_scores.split_last().expect("validated >= 2 dino layers");
    let s_clip = cross_fuse(clip_last, clip_inter, &a_clip, &a_dino, lambda1)?;
    let s_dino = cross_fuse(dino_last, dino_inter, &a_dino, &a_clip, lambda1)?;

    Ok(CafOutput {
        s_clip,
        s_dino,
        clip_layer_feats,
        dino_layer_feats: resample_layers(dino_norm.view(), dgrid, grid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn averaging_identical_layers_is_identity() {
        let a = array![[0.2, 0.8], [0.6, 0.4]];
        let mut stack = Array4::<f64>::zeros((2, 1, 2, 2));
        stack.slice_mut(s![0, 0, .., ..]).assign(&a);
        stack.slice_mut(s![1, 0, .., ..]).assign(&a);
        let avg = average_attention(stack.view()).unwrap();
        assert_eq!(avg.slice(s![0, .., ..]), a);
    }

    #[test]
    fn averaging_two_layers() {
        let mut stack = Array4::<f64>::zeros((2, 1, 2, 2));
        stack
            .slice_mut(s![0, 0, .., ..])
            .assign(&array![[0.0, 1.0], [1.0, 0.0]]);
        stack
            .slice_mut(s![1, 0, .., ..])
            .assign(&array![[2.0, 1.0], [1.0, 2.0]]);
        let avg = average_attention(stack.view()).unwrap();
        assert_eq!(avg.slice(s![0, .., ..]), array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn averaging_empty_stack_fails() {
        let stack = Array4::<f64>::zeros((0, 1, 2, 2));
        assert!(matches!(average_attention(stack.view()), Err(CafError::EmptyLayerAxis)));
    }

    #[test]
    fn sharpening_identity_returns_values() {
        // sym(I) = I, mean 0.5, relu(I - 0.5) = 0.5 I, row-normalized to I
        let a = Array2::<f64>::eye(2).insert_axis(Axis(0));
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let out = sharpen_and_project(a.view(), v.view(), false).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn constant_attention_degenerates_to_zero() {
        let a = Array3::from_elem((1, 3, 3), 0.37f64);
        let v = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let out = sharpen_and_project(a.view(), v.view(), false).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sharpening_drops_class_token_row() {
        let a = Array3::from_shape_fn((2, 3, 3), |(h, i, j)| (h + i * 3 + j) as f64 * 0.1);
        let v = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) - (j as f64));
        let with = sharpen_and_project(a.view(), v.view(), true).unwrap();
        let without = sharpen_and_project(a.view(), v.view(), false).unwrap();
        assert_eq!(with.dim(), (2, 4));
        assert_eq!(with, without.slice(s![1.., ..]));
    }

    #[test]
    fn sharpening_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 4;
        let a = Array3::from_shape_fn((1, p, p), |_| rng.gen_range(0.0..1.0));
        let v = rand_array2(&mut rng, p, 3);
        let got = sharpen_and_project(a.view(), v.view(), false).unwrap();

        let mut mean = 0.0;
        for i in 0..p {
            for j in 0..p {
                mean += a[[0, i, j]];
            }
        }
        mean /= (p * p) as f64;
        for i in 0..p {
            let mut row = vec![0.0; p];
            for j in 0..p {
                let sym = 0.5 * (a[[0, i, j]] + a[[0, j, i]]);
                row[j] = if sym - mean > 0.0 { sym - mean } else { 0.0 };
            }
            let total: f64 = row.iter().sum();
            for d in 0..3 {
                let mut acc = 0.0;
                for j in 0..p {
                    if total > 0.0 {
                        acc += row[j] / total * v[[j, d]];
                    }
                }
                assert!((got[[i, d]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_average_cases() {
        let single = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f64);
        let m = head_average(single.view(), true, Grid::new(1, 2)).unwrap();
        assert_eq!(m.values, array![[4.0, 5.0], [7.0, 8.0]]);

        let mut two = Array3::<f64>::zeros((2, 2, 2));
        two.slice_mut(s![0, .., ..]).assign(&Array2::eye(2));
        two.slice_mut(s![1, .., ..]).assign(&(Array2::<f64>::eye(2) * 2.0));
        let m = head_average(two.view(), false, Grid::new(1, 2)).unwrap();
        assert_eq!(m.values, Array2::<f64>::eye(2) * 1.5);
    }

    #[test]
    fn head_average_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array3::from_shape_fn((4, 5, 5), |_| rng.gen_range(0.0..1.0f64));
        let m = head_average(a.view(), false, Grid::new(5, 1)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for h in 0..4 {
                    acc += a[[h, i, j]];
                }
                assert!((m.values[[i, j]] - acc / 4.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn dino_normalization() {
        let raw = array![[[3.0f64, 4.0], [0.0, 0.0], [0.6, 0.8]]];
        let out = normalize_dino_layers(raw.view());
        assert!((out[[0, 0, 0]] - 0.6).abs() < 1e-12 && (out[[0, 0, 1]] - 0.8).abs() < 1e-12);
        assert_eq!(out.slice(s![0, 1, ..]), array![0.0, 0.0]);
        assert!((out[[0, 2, 0]] - 0.6).abs() < 1e-7 && (out[[0, 2, 1]] - 0.8).abs() < 1e-7);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn logits_are_cosines() {
        let text = array![[1.0f64, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let feats = array![[0.0, 5.0, 0.0], [0.0, 0.0, 1.0]];
        let s = compute_logits(feats.view(), text.view(), Grid::new(1, 2)).unwrap();
        assert!((s.values[[0, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(s.values[[0, 0]], 0.0);
        assert_eq!(s.values[[1, 0]], 0.0);
        assert_eq!(s.values[[1, 1]], 0.0);
    }

    #[test]
    fn logits_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_array2(&mut rng, 5, 8);
        let t = rand_array2(&mut rng, 3, 8);
        let s = compute_logits(f.view(), t.view(), Grid::new(5, 1)).unwrap();
        for i in 0..5 {
            for k in 0..3 {
                let (mut dot, mut nf, mut nt) = (0.0, 0.0, 0.0);
                for d in 0..8 {
                    dot += f[[i, d]] * t[[k, d]];
                    nf += f[[i, d]] * f[[i, d]];
                    nt += t[[k, d]] * t[[k, d]];
                }
                assert!((s.values[[i, k]] - dot / (nf.sqrt() * nt.sqrt())).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn logits_reject_dimension_mismatch() {
        let f = Array2::<f64>::zeros((2, 3));
        let t = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            compute_logits(f.view(), t.view(), Grid::new(1, 2)),
            Err(CafError::DimensionMismatch { features: 3, text: 4 })
        ));
    }

    #[test]
    fn align_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = AttentionMap::new(rand_array2(&mut rng, 4, 4), Grid::new(2, 2)).unwrap();
        assert_eq!(align(&a, Grid::new(2, 2)), a);

        let c = AttentionMap::new(Array2::from_elem((16, 16), 1.0f64 / 16.0), Grid::new(4, 4)).unwrap();
        let out = align(&c, Grid::new(2, 2));
        assert!(out.values.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn aligned_rows_are_stochastic_or_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = AttentionMap::new(rand_array2(&mut rng, 12, 12), Grid::new(3, 4)).unwrap();
        let out = align(&a, Grid::new(5, 2));
        for row in out.values.rows() {
            let sum: f64 = row.sum();
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((sum - 1.0).abs() < 1e-12 || sum == 0.0);
        }
    }

    #[test]
    fn cross_fuse_degenerate_cases() {
        let g = Grid::new(1, 3);
        let s = ScoreMap::new(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], g).unwrap();
        let zero = AttentionMap::new(Array2::zeros((3, 3)), g).unwrap();
        let out = cross_fuse(&s, std::slice::from_ref(&s), &zero, &zero, 1.0).unwrap();
        assert_eq!(out.values, s.values);

        let eye = AttentionMap::new(Array2::eye(3), g).unwrap();
        let zeros = ScoreMap::new(Array2::zeros((3, 2)), g).unwrap();
        let out = cross_fuse(&s, &[zeros], &eye, &zero, 0.0).unwrap();
        assert_eq!(out.values, s.values);
    }

    #[test]
    fn cross_fuse_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p, k) = (6, 3);
        let g = Grid::new(2, 3);
        let last = ScoreMap::new(rand_array2(&mut rng, p, k), g).unwrap();
        let layers: Vec<_> = (0..3)
            .map(|_| ScoreMap::new(rand_array2(&mut rng, p, k), g).unwrap())
            .collect();
        let a = AttentionMap::new(rand_array2(&mut rng, p, p), g).unwrap();
        let b = AttentionMap::new(rand_array2(&mut rng, p, p), g).unwrap();
        let lambda = 0.7;
        let out = cross_fuse(&last, &layers, &a, &b, lambda).unwrap();
        for i in 0..p {
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += (a.values[[i, j]] + lambda * b.values[[i, j]]) * last.values[[j, c]];
                }
                let mean: f64 = layers.iter().map(|l| l.values[[i, c]]).sum::<f64>() / 3.0;
                assert!((out.values[[i, c]] - (acc + mean)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cross_fuse_rejects_mismatch() {
        let g = Grid::new(1, 2);
        let s = ScoreMap::new(Array2::<f64>::zeros((2, 2)), g).unwrap();
        let s3 = ScoreMap::new(Array2::<f64>::zeros((2, 3)), g).unwrap();
        let a = AttentionMap::new(Array2::eye(2), g).unwrap();
        assert!(matches!(
            cross_fuse(&s, &[s3], &a, &a, 1.0),
            Err(CafError::ShapeMismatch(_))
        ));
        assert!(matches!(
            cross_fuse(&s, &[], &a, &a, 1.0),
            Err(CafError::EmptyLayerAxis)
        ));
    }

    #[test]
    fn score_map_tensor_round_trip_keeps_grid() {
        let s = ScoreMap::new(
            Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f32),
            Grid::new(2, 3),
        )
        .unwrap();
        let t = s.to_tensor();
        assert_eq!(t.shape(), &[2, 3, 2]);
        assert_eq!(ScoreMap::<f32>::from_tensor(&t).unwrap(), s);
    }
}
