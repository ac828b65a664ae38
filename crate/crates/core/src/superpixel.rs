//! Graph-based superpixels (greedy union-find merging on an 8-connected pixel
//! graph) and the superpixel-aware edge weights used by the TV regularizer.

use std::collections::VecDeque;

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::scalar::{lit, Scalar};
use crate::tensorio::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum SuperpixelError {
    #[error("image must be non-empty with 3 channels, got shape {0:?}")]
    EmptyImage(Vec<usize>),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-pixel superpixel ids `0..num_segments`, assigned in first-occurrence scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    labels: Array2<i64>,
    num_segments: usize,
}

impl SuperpixelMap {
    /// Relabels an arbitrary integer map into scan-order ids.
    pub fn from_labels(raw: Array2<i64>) -> Self {
        let mut remap = std::collections::HashMap::new();
        let labels = raw.mapv(|v| {
            let next = remap.len() as i64;
            *remap.entry(v).or_insert(next)
        });
        Self {
            num_segments: remap.len(),
            labels,
        }
    }

    pub fn labels(&self) -> &Array2<i64> {
        &self.labels
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        self.labels.iter().for_each(|&l| sizes[l as usize] += 1);
        sizes
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_i64(vec![self.height(), self.width()], self.labels.iter().copied().collect())
            .expect("superpixel map is non-empty")
    }

    /// Accepts any `H x W` integer label tensor; ids are re-indexed.
    pub fn from_tensor(t: &Tensor) -> Result<Self, SuperpixelError> {
        t.expect_rank(2)?;
        let (h, w) = (t.shape()[0], t.shape()[1]);
        if h == 0 || w == 0 {
            return Err(SuperpixelError::EmptyImage(t.shape().to_vec()));
        }
        let raw = Array2::from_shape_vec((h, w), t.to_labels()?).expect("tensor shape invariant");
        Ok(Self::from_labels(raw))
    }
}

/// Weight for every 4-neighbour pixel pair: `horizontal[[y, x]]` joins
/// `(y, x)`–`(y, x + 1)`, `vertical[[y, x]]` joins `(y, x)`–`(y + 1, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeightField<T> {
    pub horizontal: Array2<T>,
    pub vertical: Array2<T>,
}

impl<T: Scalar> EdgeWeightField<T> {
    /// Same weight on every edge of an `height x width` grid.
    pub fn uniform(height: usize, width: usize, w: T) -> Self {
        Self {
            horizontal: Array2::from_elem((height, width.saturating_sub(1)), w),
            vertical: Array2::from_elem((height.saturating_sub(1), width), w),
        }
    }

    pub fn height(&self) -> usize {
        self.horizontal.nrows()
    }

    pub fn width(&self) -> usize {
        self.vertical.ncols()
    }

    pub fn max_weight(&self) -> T {
        self.horizontal
            .iter()
            .chain(self.vertical.iter())
            .fold(T::zero(), |m, &w| m.max(w))
    }
}

pub fn build_edge_weights<T: Scalar>(sp: &SuperpixelMap, w_in: T, w_cross: T) -> EdgeWeightField<T> {
    let labels = &sp.labels;
    let (h, w) = labels.dim();
    let pick = |same: bool| w_cross + (w_in - w_cross) * if same { T::one() } else { T::zero() };
    let horizontal = Array2::from_shape_fn((h, w.saturating_sub(1)), |(y, x)| {
        pick(labels[[y, x]] == labels[[y, x + 1]])
    });
    let vertical = Array2::from_shape_fn((h.saturating_sub(1), w), |(y, x)| {
        pick(labels[[y, x]] == labels[[y + 1, x]])
    });
    EdgeWeightField { horizontal, vertical }
}

/// Views a `H x W x 3` u8 tensor as an image array.
pub fn image_view(t: &Tensor) -> Result<ArrayView3<'_, u8>, SuperpixelError> {
    let data = t.as_u8()?;
    let shape = t.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(SuperpixelError::EmptyImage(shape.to_vec()));
    }
    Ok(ArrayView3::from_shape((shape[0], shape[1], 3), data).expect("tensor shape invariant"))
}

struct DisjointSet<T> {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<T>,
}

impl<T: Scalar> DisjointSet<T> {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![T::zero(); n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Joins two roots; the larger component stays the root.
    fn join(&mut self, a: usize, b: usize, weight: T) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(weight);
        big
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge<T> {
    weight: T,
    a: usize,
    b: usize,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel<T: Scalar>(sigma: T) -> Vec<T> {
    let radius = (sigma * lit(3.0)).ceil().to_usize().unwrap_or(0);
    let two_s2 = lit::<T>(2.0) * sigma * sigma;
    let raw: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let d = T::of_usize(i) - T::of_usize(radius);
            (-(d * d) / two_s2).exp()
        })
        .collect();
    let total: T = raw.iter().copied().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur per channel with a truncated kernel of radius
/// `ceil(3 sigma)` and symmetric reflection at the borders.
fn smooth<T: Scalar>(image: ArrayView3<'_, u8>, sigma: T) -> Array3<T> {
    let src = image.mapv(|v| T::of_f64(v as f64));
    if sigma <= T::zero() {
        return src;
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w, c) = src.dim();
    let mut tmp = Array3::<T>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = T::zero();
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - radius, w);
                    acc += kv * src[[y, sx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::<T>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = T::zero();
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - radius, h);
                    acc += kv * tmp[[sy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

fn color_distance<T: Scalar>(img: &Array3<T>, (y0, x0): (usize, usize), (y1, x1): (usize, usize)) -> T {
    (0..img.len_of(Axis(2)))
        .map(|ch| {
            let d = img[[y0, x0, ch]] - img[[y1, x1, ch]];
            d * d
        })
        .sum::<T>()
        .sqrt()
}

/// Edges in (source index, direction) order, then stably sorted by weight,
/// which gives the lexicographic (weight, source, direction) order.
fn sorted_edges<T: Scalar>(img: &Array3<T>, eight_connected: bool) -> Vec<Edge<T>> {
    let (h, w, _) = img.dim();
    let mut offsets: Vec<(isize, isize)> = vec![(0, 1), (1, 0)];
    if eight_connected {
        offsets.extend([(1, 1), (-1, 1)]);
    }
    let mut edges = Vec::with_capacity(h * w * offsets.len());
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx) in &offsets {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                edges.push(Edge {
                    weight: color_distance(img, (y, x), (ny, nx)),
                    a: y * w + x,
                    b: ny * w + nx,
                });
            }
        }
    }
    edges.sort_by(|e, f| e.weight.partial_cmp(&f.weight).expect("finite edge weights"));
    edges
}

pub fn segment_felzenszwalb<T: Scalar>(
    image: ArrayView3<'_, u8>,
    scale: T,
    min_size: usize,
    sigma: T,
) -> Result<SuperpixelMap, SuperpixelError> {
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(SuperpixelError::EmptyImage(vec![h, w, c]));
    }
    if !(scale > T::zero()) {
        return Err(SuperpixelError::InvalidParameter(format!(
            "scale must be > 0, got {scale}"
        )));
    }
    if min_size == 0 {
        return Err(SuperpixelError::InvalidParameter("min_size must be >= 1".into()));
    }
    if !(sigma >= T::zero()) {
        return Err(SuperpixelError::InvalidParameter(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }

    let img = smooth(image, sigma);
    let n = h * w;

    let mut sets = DisjointSet::<T>::new(n);
    let edges = sorted_edges(&img, true);
    for e in &edges {
        let ra = sets.find(e.a);
        let rb = sets.find(e.b);
        if ra == rb {
            continue;
        }
        let tol_a = sets.internal[ra] + scale / T::of_usize(sets.size[ra]);
        let tol_b = sets.internal[rb] + scale / T::of_usize(sets.size[rb]);
        if e.weight <= tol_a.min(tol_b) {
            sets.join(ra, rb, e.weight);
        }
    }

    if min_size > 1 {
        enforce_min_size(&mut sets, &edges, |i| i, min_size);
    }

    // 8-connected merging can leave segments joined only through corners;
    // split those into 4-connected pieces and fold any piece that fell under
    // the size floor into its closest 4-neighbour.
    let roots: Vec<usize> = (0..n).map(|i| sets.find(i)).collect();
    let pieces = four_connected_pieces(&roots, h, w);
    let mut sizes = DisjointSet::<T>::new(pieces.count);
    sizes.size = vec![0; pieces.count];
    for &p in &pieces.ids {
        sizes.size[p] += 1;
    }
    if min_size > 1 {
        let four: Vec<Edge<T>> = edges.into_iter().filter(|e| e.b == e.a + 1 || e.b == e.a + w).collect();
        enforce_min_size(&mut sizes, &four, |i| pieces.ids[i], min_size);
    }

    let raw = Array2::from_shape_fn((h, w), |(y, x)| sizes.find(pieces.ids[y * w + x]) as i64);
    Ok(SuperpixelMap::from_labels(raw))
}

/// Joins across edges, in weight order, while either side is below `min_size`.
fn enforce_min_size<T: Scalar>(
    sets: &mut DisjointSet<T>,
    edges: &[Edge<T>],
    node: impl Fn(usize) -> usize,
    min_size: usize,
) {
    for e in edges {
        let ra = sets.find(node(e.a));
        let rb = sets.find(node(e.b));
        if ra != rb && (sets.size[ra] < min_size || sets.size[rb] < min_size) {
            sets.join(ra, rb, e.weight);
        }
    }
}

struct Pieces {
    ids: Vec<usize>,
    count: usize,
}

fn four_connected_pieces(roots: &[usize], h: usize, w: usize) -> Pieces {
    let mut ids = vec![usize::MAX; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if ids[start] != usize::MAX {
            continue;
        }
        ids[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if ids[q] == usize::MAX && roots[q] == roots[p] {
                    ids[q] = count;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        count += 1;
    }
    Pieces { ids, count }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_tone(h: usize, w: usize) -> Array3<u8> {
        Array3::from_shape_fn((h, w, 3), |(_, x, _)| if x < w / 2 { 0 } else { 255 })
    }

    /// Every segment must be reachable from any of its pixels via 4-neighbour steps.
    fn assert_four_connected(sp: &SuperpixelMap) {
        let labels = sp.labels();
        let (h, w) = labels.dim();
        let mut seen = vec![false; sp.num_segments()];
        let mut visited = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                if visited[[y, x]] {
                    continue;
                }
                let id = labels[[y, x]] as usize;
                assert!(!seen[id], "segment {id} has more than one 4-connected component");
                seen[id] = true;
                let mut stack = vec![(y, x)];
                visited[[y, x]] = true;
                while let Some((cy, cx)) = stack.pop() {
                    let nbrs = [
                        (cy.wrapping_sub(1), cx),
                        (cy + 1, cx),
                        (cy, cx.wrapping_sub(1)),
                        (cy, cx + 1),
                    ];
                    for (ny, nx) in nbrs {
                        if ny < h && nx < w && !visited[[ny, nx]] && labels[[ny, nx]] as usize == id {
                            visited[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn uniform_image_is_one_segment() {
        let img = Array3::from_elem((16, 16, 3), 128u8);
        let sp = segment_felzenszwalb(img.view(), 100.0f64, 1, 0.8).unwrap();
        assert_eq!(sp.num_segments(), 1);
    }

    #[test]
    fn two_tone_splits_exactly_at_seam() {
        let img = two_tone(16, 16);
        let sp = segment_felzenszwalb(img.view(), 10.0f64, 1, 0.0).unwrap();
        assert_eq!(sp.num_segments(), 2);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(sp.labels()[[y, x]], i64::from(x >= 8));
            }
        }
    }

    #[test]
    fn min_size_larger_than_halves_forces_single_segment() {
        let img = two_tone(16, 16);
        let sp = segment_felzenszwalb(img.view(), 10.0f64, 300, 0.0).unwrap();
        assert_eq!(sp.num_segments(), 1);
    }

    #[test]
    fn checkerboard_diagonals_are_split_into_four_connected_pieces() {
        // 8-connected merging joins same-colour diagonal neighbours
        let img = Array3::from_shape_fn((4, 4, 3), |(y, x, _)| if (x + y) % 2 == 0 { 0 } else { 255 });
        let sp = segment_felzenszwalb(img.view(), 10.0f64, 1, 0.0).unwrap();
        assert_eq!(sp.num_segments(), 16);
        assert_four_connected(&sp);
    }

    #[test]
    fn rejects_empty_image_and_bad_parameters() {
        let empty = Array3::<u8>::zeros((0, 4, 3));
        assert!(matches!(
            segment_felzenszwalb(empty.view(), 1.0f64, 1, 0.0),
            Err(SuperpixelError::EmptyImage(_))
        ));
        let img = Array3::<u8>::zeros((2, 2, 3));
        assert!(segment_felzenszwalb(img.view(), 0.0f64, 1, 0.0).is_err());
        assert!(segment_felzenszwalb(img.view(), 1.0f64, 0, 0.0).is_err());
        assert!(segment_felzenszwalb(img.view(), 1.0f64, 1, -1.0).is_err());
    }

    #[test]
    fn gaussian_kernel_sums_to_one_with_expected_radius() {
        let k = gaussian_kernel(0.8f64);
        assert_eq!(k.len(), 2 * 3 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k.windows(2).take(3).all(|p| p[0] < p[1]));
    }

    #[test]
    fn reflection_is_symmetric() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn default_weights_on_single_segment() {
        let sp = SuperpixelMap::from_labels(Array2::zeros((3, 4)));
        let wf = build_edge_weights(&sp, 1.0f64, 0.10);
        assert!(wf.horizontal.iter().chain(wf.vertical.iter()).all(|&w| w == 1.0));
        assert_eq!(wf.horizontal.dim(), (3, 3));
        assert_eq!(wf.vertical.dim(), (2, 4));
    }

    #[test]
    fn vertical_split_weights_seam_column() {
        let sp = SuperpixelMap::from_labels(Array2::from_shape_fn((4, 6), |(_, x)| i64::from(x >= 3)));
        let wf = build_edge_weights(&sp, 1.0f64, 0.10);
        for ((_, x), &w) in wf.horizontal.indexed_iter() {
            assert_eq!(w, if x == 2 { 0.10 } else { 1.0 });
        }
        assert!(wf.vertical.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn equal_weights_give_constant_field() {
        let sp = SuperpixelMap::from_labels(Array2::from_shape_fn((5, 5), |(y, x)| ((x + y) % 3) as i64));
        let wf = build_edge_weights(&sp, 0.5f64, 0.5);
        assert!(wf.horizontal.iter().chain(wf.vertical.iter()).all(|&w| w == 0.5));
    }

    #[test]
    fn from_labels_reindexes_in_scan_order() {
        let sp = SuperpixelMap::from_labels(ndarray::array![[7, 7, 3], [9, 3, 3]]);
        assert_eq!(sp.labels(), &ndarray::array![[0, 0, 1], [2, 1, 1]]);
        assert_eq!(sp.num_segments(), 3);
    }

    fn arb_image() -> impl Strategy<Value = Array3<u8>> {
        (2usize..9, 2usize..9).prop_flat_map(|(h, w)| {
            prop::collection::vec(any::<u8>(), h * w * 3)
                .prop_map(move |v| Array3::from_shape_vec((h, w, 3), v).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn segments_are_connected_and_respect_min_size(
            img in arb_image(),
            scale in 1.0f64..500.0,
            min_size in 1usize..12,
            sigma in 0.0f64..1.5,
        ) {
            let sp = segment_felzenszwalb(img.view(), scale, min_size, sigma).unwrap();
            assert_four_connected(&sp);
            let total = img.dim().0 * img.dim().1;
            if sp.num_segments() > 1 {
                prop_assert!(sp.segment_sizes().iter().all(|&s| s >= min_size.min(total)));
            }
            let again = segment_felzenszwalb(img.view(), scale, min_size, sigma).unwrap();
            prop_assert_eq!(again, sp);
        }

        #[test]
        fn edge_field_takes_two_values_matching_membership(img in arb_image()) {
            let sp = segment_felzenszwalb(img.view(), 50.0f64, 1, 0.0).unwrap();
            let wf = build_edge_weights(&sp, 1.0f64, 0.1);
            let l = sp.labels();
            for ((y, x), &w) in wf.horizontal.indexed_iter() {
                prop_assert_eq!(w == 1.0, l[[y, x]] == l[[y, x + 1]]);
                prop_assert!(w == 1.0 || w == 0.1);
            }
            for ((y, x), &w) in wf.vertical.indexed_iter() {
                prop_assert_eq!(w == 1.0, l[[y, x]] == l[[y + 1, x]]);
                prop_assert!(w == 1.0 || w == 0.1);
            }
        }
    }
}
