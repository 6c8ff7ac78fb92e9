//! Chain-structured message passing over landmark probability maps.
//!
//! Each vertebra label is a node in a chain; every directed edge `j -> i`
//! carries a displacement kernel learned from training landmark pairs. One
//! pass updates every channel simultaneously (Jacobi style) to
//!
//! ```text
//! new_i = normalize( alpha * (sum_{j in N(i)} P_j * k_{j->i}) / |N(i)| + P_i )
//! ```
//!
//! where `*` is the correlation convention of [`apply_message`], `N(i)` are
//! the chain neighbors of `i`, and `normalize` divides by the map sum. A few
//! passes let healthy neighbors repair a missing response and vote down
//! remote false positives.

use thiserror::Error;

use crate::heatmap::HeatmapStack;
use crate::landmarks::LandmarkSet;
use crate::net::ops::accumulate_shifted;
use crate::par;
use crate::volume::Volume3D;

/// Errors from kernel learning and message passing.
#[derive(Debug, Error)]
pub enum MessageError {
    #[error("no training sample has both {from:?} and {to:?} present")]
    NoTrainingPair { from: String, to: String },
    #[error("invalid kernel: {0}")]
    BadKernel(String),
    #[error("invalid chain graph: {0}")]
    BadGraph(String),
    #[error("stack does not match graph: {0}")]
    StackMismatch(String),
}

/// A nonnegative unit-sum distribution over voxel displacements.
///
/// The array has odd side `2 * half_width + 1`; the entry at grid index
/// `(ix, iy, iz)` is the weight of displacement
/// `anchor + ([ix, iy, iz] - half_width)`, in voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementKernel {
    half_width: usize,
    anchor: [i64; 3],
    weights: Vec<f64>,
}

impl DisplacementKernel {
    /// Validates and wraps raw kernel data. `sum_tol` bounds the allowed
    /// deviation from unit sum (float32 storage loosens it on reload).
    pub fn from_raw(
        half_width: usize,
        anchor: [i64; 3],
        weights: Vec<f64>,
        sum_tol: f64,
    ) -> Result<DisplacementKernel, MessageError> {
        let side = 2 * half_width + 1;
        if weights.len() != side * side * side {
            return Err(MessageError::BadKernel(format!(
                "{} weights for side {side}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MessageError::BadKernel(
                "weights must be finite and nonnegative".to_string(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > sum_tol {
            return Err(MessageError::BadKernel(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(DisplacementKernel {
            half_width,
            anchor,
            weights,
        })
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn side(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn anchor(&self) -> [i64; 3] {
        self.anchor
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The displacement with the largest weight (lowest grid index on ties).
    pub fn argmax_displacement(&self) -> [i64; 3] {
        let side = self.side();
        let mut best = 0usize;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        let ix = best % side;
        let iy = (best / side) % side;
        let iz = best / (side * side);
        let w = self.half_width as i64;
        [
            self.anchor[0] + ix as i64 - w,
            self.anchor[1] + iy as i64 - w,
            self.anchor[2] + iz as i64 - w,
        ]
    }

    /// Nonzero `(displacement, weight)` entries in grid order.
    fn support(&self) -> Vec<([i64; 3], f64)> {
        let side = self.side();
        let w = self.half_width as i64;
        let mut out = Vec::new();
        for iz in 0..side {
            for iy in 0..side {
                for ix in 0..side {
                    let v = self.weights[(iz * side + iy) * side + ix];
                    if v != 0.0 {
                        out.push((
                            [
                                self.anchor[0] + ix as i64 - w,
                                self.anchor[1] + iy as i64 - w,
                                self.anchor[2] + iz as i64 - w,
                            ],
                            v,
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Learns the displacement kernel for the directed edge `from -> to` from
/// training landmark sets.
///
/// Displacements `position(to) - position(from)` are converted to voxels,
/// rounded to the nearest bin, histogrammed around the anchor (the rounded
/// mean displacement), optionally blurred by a Gaussian of `smoothing_sigma`
/// voxels, and renormalized to unit sum. `half_width` defaults to
/// `ceil(1.5 * max displacement magnitude)` so every observed displacement is
/// representable; displacements outside a caller-chosen support are clamped
/// onto its boundary with a warning.
pub fn learn_kernel(
    train: &[LandmarkSet],
    from: &str,
    to: &str,
    spacing_mm: [f64; 3],
    half_width: Option<usize>,
    smoothing_sigma: f64,
) -> Result<DisplacementKernel, MessageError> {
    let mut disp = Vec::new();
    for set in train {
        let (a, b) = match (set.get(from), set.get(to)) {
            (Some(a), Some(b)) => (a, b),
            _ => continue,
        };
        if !(a.present && b.present) {
            continue;
        }
        disp.push([
            (b.position_mm[0] - a.position_mm[0]) / spacing_mm[0],
            (b.position_mm[1] - a.position_mm[1]) / spacing_mm[1],
            (b.position_mm[2] - a.position_mm[2]) / spacing_mm[2],
        ]);
    }
    if disp.is_empty() {
        return Err(MessageError::NoTrainingPair {
            from: from.to_string(),
            to: to.to_string(),
        });
    }

    let mut mean = [0.0f64; 3];
    for d in &disp {
        for a in 0..3 {
            mean[a] += d[a] / disp.len() as f64;
        }
    }
    let anchor = [
        mean[0].round() as i64,
        mean[1].round() as i64,
        mean[2].round() as i64,
    ];
    let w = half_width.unwrap_or_else(|| {
        let max_mag = disp
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0f64, f64::max);
        ((1.5 * max_mag).ceil() as usize).max(1)
    });

    let side = 2 * w + 1;
    let mut hist = vec![0.0f64; side * side * side];
    let mut clamped = 0usize;
    for d in &disp {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = d[a].round() as i64 - anchor[a] + w as i64;
            let clip = rel.clamp(0, side as i64 - 1);
            if clip != rel {
                clamped += 1;
            }
            idx[a] = clip as usize;
        }
        hist[(idx[2] * side + idx[1]) * side + idx[0]] += 1.0;
    }
    if clamped > 0 {
        log::warn!(
            "edge {from} -> {to}: {clamped} displacement component(s) outside \
             kernel support (half-width {w}), clamped to the boundary"
        );
    }

    let weights = if smoothing_sigma > 0.0 {
        blur3(&hist, side, smoothing_sigma)
    } else {
        hist
    };
    let sum: f64 = weights.iter().sum();
    let weights = weights.into_iter().map(|v| v / sum).collect();
    DisplacementKernel::from_raw(w, anchor, weights, 1e-9)
}

/// Separable truncated-Gaussian blur of a cubic array, zero padded.
fn blur3(data: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let radius = (crate::volume::GAUSSIAN_TRUNCATION_SIGMAS * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = side as isize;
    let idx = |x: isize, y: isize, z: isize| ((z * n + y) * n + x) as usize;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0f64; cur.len()];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for (t, tap) in taps.iter().enumerate() {
                        let o = t as isize - radius;
                        let p = match axis {
                            0 => [x + o, y, z],
                            1 => [x, y + o, z],
                            _ => [x, y, z + o],
                        };
                        if p.iter().all(|&c| c >= 0 && c < n) {
                            acc += tap * cur[idx(p[0], p[1], p[2])];
                        }
                    }
                    next[idx(x, y, z)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Correlates a probability map with a displacement kernel: a unit mass at
/// voxel `p` contributes mass `k(d)` to voxel `p + d`. Mass pushed outside
/// the volume is dropped (zero padding). A delta map therefore moves its
/// peak by the kernel's argmax displacement.
pub fn apply_message(map: &Volume3D, kernel: &DisplacementKernel) -> Volume3D {
    let dims = map.dims();
    let mut out = Volume3D::zeros(map.geometry().clone());
    for (d, weight) in kernel.support() {
        // out[p] = sum_d k(d) * map[p - d]; accumulate_shifted reads src[p + s].
        accumulate_shifted(
            out.data_mut(),
            map.data(),
            dims,
            [-d[0] as isize, -d[1] as isize, -d[2] as isize],
            weight,
        );
    }
    out
}

/// The vertebra chain with learned kernels for both directions of every
/// adjacent pair, plus the discount and iteration count for [`run_passing`].
#[derive(Debug, Clone)]
pub struct ChainGraph {
    labels: Vec<String>,
    /// `up[e]` is the kernel for edge `labels[e] -> labels[e+1]`.
    up: Vec<DisplacementKernel>,
    /// `down[e]` is the kernel for edge `labels[e+1] -> labels[e]`.
    down: Vec<DisplacementKernel>,
    alpha: f64,
    iterations: usize,
}

impl ChainGraph {
    pub fn new(
        labels: Vec<String>,
        up: Vec<DisplacementKernel>,
        down: Vec<DisplacementKernel>,
        alpha: f64,
        iterations: usize,
    ) -> Result<ChainGraph, MessageError> {
        if labels.len() < 2 {
            return Err(MessageError::BadGraph("need at least two nodes".to_string()));
        }
        if up.len() != labels.len() - 1 || down.len() != labels.len() - 1 {
            return Err(MessageError::BadGraph(format!(
                "{} nodes want {} kernels per direction, got {} up / {} down",
                labels.len(),
                labels.len() - 1,
                up.len(),
                down.len()
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(MessageError::BadGraph(format!(
                "alpha {alpha} outside (0, 1)"
            )));
        }
        if iterations == 0 {
            return Err(MessageError::BadGraph("iterations must be >= 1".to_string()));
        }
        Ok(ChainGraph {
            labels,
            up,
            down,
            alpha,
            iterations,
        })
    }

    /// Learns every directed edge kernel of the chain from training sets.
    pub fn learn(
        labels: &[String],
        train: &[LandmarkSet],
        spacing_mm: [f64; 3],
        half_width: Option<usize>,
        smoothing_sigma: f64,
        alpha: f64,
        iterations: usize,
    ) -> Result<ChainGraph, MessageError> {
        let mut up = Vec::with_capacity(labels.len().saturating_sub(1));
        let mut down = Vec::with_capacity(labels.len().saturating_sub(1));
        for e in 0..labels.len().saturating_sub(1) {
            let (a, b) = (labels[e].as_str(), labels[e + 1].as_str());
            up.push(learn_kernel(train, a, b, spacing_mm, half_width, smoothing_sigma)?);
            down.push(learn_kernel(train, b, a, spacing_mm, half_width, smoothing_sigma)?);
        }
        ChainGraph::new(labels.to_vec(), up, down, alpha, iterations)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Kernel for the directed edge `labels[e] -> labels[e+1]`.
    pub fn up_kernel(&self, e: usize) -> &DisplacementKernel {
        &self.up[e]
    }

    /// Kernel for the directed edge `labels[e+1] -> labels[e]`.
    pub fn down_kernel(&self, e: usize) -> &DisplacementKernel {
        &self.down[e]
    }

    fn check_stack(&self, maps: &HeatmapStack) -> Result<(), MessageError> {
        if maps.labels() != self.labels.as_slice() {
            return Err(MessageError::StackMismatch(format!(
                "stack channels {:?} vs graph nodes {:?}",
                maps.labels(),
                self.labels
            )));
        }
        Ok(())
    }
}

/// One Jacobi message-passing update of every channel.
///
/// Channels whose pre-normalization sum is zero are left all-zero and
/// returned in the flag list; the rest are normalized to unit sum.
pub fn pass_once(maps: &HeatmapStack, graph: &ChainGraph) -> Result<(HeatmapStack, Vec<usize>), MessageError> {
    graph.check_stack(maps)?;
    let n = maps.len();
    let updated: Vec<(Volume3D, bool)> = par::map_indexed(n, |i| {
        let mut incoming = Volume3D::zeros(maps.geometry().clone());
        let mut degree = 0usize;
        if i > 0 {
            let m = apply_message(maps.channel(i - 1), graph.up_kernel(i - 1));
            for (acc, v) in incoming.data_mut().iter_mut().zip(m.data()) {
                *acc += v;
            }
            degree += 1;
        }
        if i + 1 < n {
            let m = apply_message(maps.channel(i + 1), graph.down_kernel(i));
            for (acc, v) in incoming.data_mut().iter_mut().zip(m.data()) {
                *acc += v;
            }
            degree += 1;
        }
        let scale = graph.alpha() / degree as f64;
        let mut new = incoming;
        for (v, p) in new.data_mut().iter_mut().zip(maps.channel(i).data()) {
            *v = *v * scale + p;
        }
        let z = new.sum();
        if z == 0.0 {
            (new, true)
        } else {
            for v in new.data_mut() {
                *v /= z;
            }
            (new, false)
        }
    });
    let mut channels = Vec::with_capacity(n);
    let mut flagged = Vec::new();
    for (i, (c, zero)) in updated.into_iter().enumerate() {
        if zero {
            flagged.push(i);
        }
        channels.push(c);
    }
    let stack = HeatmapStack::new(maps.labels().to_vec(), channels)
        .map_err(|e| MessageError::StackMismatch(e.to_string()))?;
    Ok((stack, flagged))
}

/// Runs `graph.iterations()` passes of [`pass_once`]. The flag list is the
/// union of per-pass zero-sum channels, sorted and deduplicated.
pub fn run_passing(maps: &HeatmapStack, graph: &ChainGraph) -> Result<(HeatmapStack, Vec<usize>), MessageError> {
    let mut cur = maps.clone();
    let mut flagged = Vec::new();
    for _ in 0..graph.iterations() {
        let (next, flags) = pass_once(&cur, graph)?;
        cur = next;
        flagged.extend(flags);
    }
    flagged.sort_unstable();
    flagged.dedup();
    Ok((cur, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Landmark;
    use crate::volume::Geometry;
    use approx::assert_relative_eq;

    fn set(entries: &[(&str, [f64; 3])]) -> LandmarkSet {
        LandmarkSet::new(
            entries
                .iter()
                .map(|(l, p)| Landmark::present(l, *p))
                .collect(),
        )
        .unwrap()
    }

    fn delta_stack(labels: &[&str], peaks: &[[usize; 3]], dims: [usize; 3]) -> HeatmapStack {
        let g = Geometry::isotropic(dims, 1.0).unwrap();
        let channels = peaks
            .iter()
            .map(|p| {
                let mut v = Volume3D::zeros(g.clone());
                v.set(p[0], p[1], p[2], 1.0);
                v
            })
            .collect();
        HeatmapStack::new(labels.iter().map(|s| s.to_string()).collect(), channels).unwrap()
    }

    #[test]
    fn single_sample_gives_delta_kernel_at_displacement() {
        let train = vec![set(&[("A", [0.0, 0.0, 0.0]), ("B", [2.0, -1.0, 3.0])])];
        let k = learn_kernel(&train, "A", "B", [1.0, 1.0, 1.0], None, 0.0).unwrap();
        assert_eq!(k.argmax_displacement(), [2, -1, 3]);
        assert_eq!(k.weights().iter().filter(|w| **w != 0.0).count(), 1);
        assert_relative_eq!(k.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_samples_split_mass_evenly() {
        let train = vec![
            set(&[("A", [0.0; 3]), ("B", [1.0, 0.0, 2.0])]),
            set(&[("A", [0.0; 3]), ("B", [-1.0, 0.0, 2.0])]),
        ];
        let k = learn_kernel(&train, "A", "B", [1.0, 1.0, 1.0], None, 0.0).unwrap();
        let nonzero: Vec<f64> = k.weights().iter().copied().filter(|w| *w != 0.0).collect();
        assert_eq!(nonzero, vec![0.5, 0.5]);
    }

    #[test]
    fn smoothing_preserves_unit_sum() {
        let train = vec![
            set(&[("A", [0.0; 3]), ("B", [1.0, 0.0, 2.0])]),
            set(&[("A", [0.0; 3]), ("B", [-1.0, 1.0, 3.0])]),
        ];
        let k = learn_kernel(&train, "A", "B", [1.0, 1.0, 1.0], None, 1.0).unwrap();
        assert_relative_eq!(k.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(k.weights().iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn default_half_width_covers_max_displacement() {
        let train = vec![set(&[("A", [0.0; 3]), ("B", [0.0, 0.0, 4.0])])];
        let k = learn_kernel(&train, "A", "B", [1.0, 1.0, 1.0], None, 0.0).unwrap();
        // 1.5 * 4 = 6.
        assert_eq!(k.half_width(), 6);
    }

    #[test]
    fn spacing_converts_mm_to_voxels() {
        let train = vec![set(&[("A", [0.0; 3]), ("B", [0.0, 0.0, 14.0])])];
        let k = learn_kernel(&train, "A", "B", [4.0, 4.0, 4.0], None, 0.0).unwrap();
        // 14 mm at 4 mm spacing is 3.5 voxels, rounded to 4.
        assert_eq!(k.argmax_displacement(), [0, 0, 4]);
    }

    #[test]
    fn absent_landmarks_are_skipped() {
        let mut marks = vec![
            Landmark::present("A", [0.0; 3]),
            Landmark::absent("B"),
        ];
        let missing = LandmarkSet::new(marks.clone()).unwrap();
        marks[1] = Landmark::present("B", [0.0, 0.0, 3.0]);
        let ok = LandmarkSet::new(marks).unwrap();
        let k = learn_kernel(&[missing, ok], "A", "B", [1.0; 3], None, 0.0).unwrap();
        assert_eq!(k.argmax_displacement(), [0, 0, 3]);
        let only_missing = vec![set(&[("A", [0.0; 3])])];
        assert!(matches!(
            learn_kernel(&only_missing, "A", "B", [1.0; 3], None, 0.0),
            Err(MessageError::NoTrainingPair { .. })
        ));
    }

    #[test]
    fn out_of_support_displacement_is_clamped() {
        let train = vec![
            set(&[("A", [0.0; 3]), ("B", [0.0, 0.0, 1.0])]),
            set(&[("A", [0.0; 3]), ("B", [0.0, 0.0, 9.0])]),
        ];
        // Anchor is round(mean) = 5; half-width 1 covers only 4..=6.
        let k = learn_kernel(&train, "A", "B", [1.0; 3], Some(1), 0.0).unwrap();
        let sum: f64 = k.weights().iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        // Both samples survive, one clamped onto the support boundary.
        assert_eq!(k.weights().iter().filter(|w| **w != 0.0).count(), 2);
    }

    #[test]
    fn delta_map_moves_by_kernel_displacement() {
        let train = vec![set(&[("A", [0.0; 3]), ("B", [1.0, 2.0, -1.0])])];
        let k = learn_kernel(&train, "A", "B", [1.0; 3], None, 0.0).unwrap();
        let g = Geometry::isotropic([6, 6, 6], 1.0).unwrap();
        let mut map = Volume3D::zeros(g);
        map.set(2, 2, 3, 1.0);
        let out = apply_message(&map, &k);
        let ([x, y, z], peak) = out.argmax();
        assert_eq!([x, y, z], [3, 4, 2]);
        assert_relative_eq!(peak, 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_kernel_conserves_interior_mass() {
        let w = 1usize;
        let side = 2 * w + 1;
        let uni = vec![1.0 / (side * side * side) as f64; side * side * side];
        let k = DisplacementKernel::from_raw(w, [0, 0, 0], uni, 1e-12).unwrap();
        let g = Geometry::isotropic([8, 8, 8], 1.0).unwrap();
        let mut map = Volume3D::zeros(g);
        map.set(4, 4, 4, 2.5);
        map.set(3, 4, 4, 1.5);
        let out = apply_message(&map, &k);
        assert_relative_eq!(out.sum(), map.sum(), epsilon = 1e-12);
    }

    /// Independent nested-loop oracle for the message convention.
    fn naive_message(map: &Volume3D, k: &DisplacementKernel) -> Volume3D {
        let [nx, ny, nz] = map.dims();
        let side = k.side() as i64;
        let w = k.half_width() as i64;
        let mut out = Volume3D::zeros(map.geometry().clone());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let m = map.at(x, y, z);
                    if m == 0.0 {
                        continue;
                    }
                    for iz in 0..side {
                        for iy in 0..side {
                            for ix in 0..side {
                                let wgt = k.weights()[((iz * side + iy) * side + ix) as usize];
                                let d = [
                                    k.anchor()[0] + ix - w,
                                    k.anchor()[1] + iy - w,
                                    k.anchor()[2] + iz - w,
                                ];
                                let tx = x as i64 + d[0];
                                let ty = y as i64 + d[1];
                                let tz = z as i64 + d[2];
                                if tx >= 0
                                    && ty >= 0
                                    && tz >= 0
                                    && (tx as usize) < nx
                                    && (ty as usize) < ny
                                    && (tz as usize) < nz
                                {
                                    let t = (tx as usize, ty as usize, tz as usize);
                                    let cur = out.at(t.0, t.1, t.2);
                                    out.set(t.0, t.1, t.2, cur + m * wgt);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn apply_message_matches_nested_loop_oracle() {
        use rand::Rng;
        let mut r = crate::rng::stream(31, 9, 0);
        let g = Geometry::isotropic([6, 6, 6], 1.0).unwrap();
        let mut map = Volume3D::zeros(g);
        for v in map.data_mut() {
            *v = r.random_range(0.0..1.0);
        }
        let mut weights: Vec<f64> = (0..27).map(|_| r.random_range(0.0..1.0)).collect();
        let s: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= s;
        }
        let k = DisplacementKernel::from_raw(1, [1, -2, 0], weights, 1e-9).unwrap();
        let fast = apply_message(&map, &k);
        let slow = naive_message(&map, &k);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    fn graph_from_one_sample(
        labels: &[&str],
        positions: &[[f64; 3]],
        alpha: f64,
        iterations: usize,
    ) -> ChainGraph {
        let train = vec![set(
            &labels
                .iter()
                .zip(positions)
                .map(|(l, p)| (*l, *p))
                .collect::<Vec<_>>(),
        )];
        let owned: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        ChainGraph::learn(&owned, &train, [1.0; 3], None, 0.0, alpha, iterations).unwrap()
    }

    #[test]
    fn graph_construction_validates() {
        let train = vec![set(&[("A", [0.0; 3]), ("B", [0.0, 0.0, 3.0])])];
        let labels = vec!["A".to_string(), "B".to_string()];
        assert!(ChainGraph::learn(&labels, &train, [1.0; 3], None, 0.0, 0.5, 3).is_ok());
        assert!(ChainGraph::learn(&labels, &train, [1.0; 3], None, 0.0, 1.0, 3).is_err());
        assert!(ChainGraph::learn(&labels, &train, [1.0; 3], None, 0.0, 0.5, 0).is_err());
        assert!(ChainGraph::learn(&labels[..1], &train, [1.0; 3], None, 0.0, 0.5, 3).is_err());
    }

    #[test]
    fn self_consistent_deltas_keep_their_peaks() {
        let labels = ["A", "B", "C"];
        let pos = [[2.0, 2.0, 1.0], [2.0, 2.0, 4.0], [2.0, 2.0, 7.0]];
        let graph = graph_from_one_sample(&labels, &pos, 0.5, 1);
        let stack = delta_stack(&labels, &[[2, 2, 1], [2, 2, 4], [2, 2, 7]], [6, 6, 10]);
        let (out, flags) = pass_once(&stack, &graph).unwrap();
        assert!(flags.is_empty());
        for (i, p) in [[2, 2, 1], [2, 2, 4], [2, 2, 7]].iter().enumerate() {
            let (arg, _) = out.channel(i).argmax();
            assert_eq!(arg, *p, "channel {i}");
            assert_relative_eq!(out.channel(i).sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn alpha_near_zero_leaves_normalized_maps_unchanged() {
        let labels = ["A", "B"];
        let pos = [[2.0, 2.0, 2.0], [2.0, 2.0, 5.0]];
        let graph = graph_from_one_sample(&labels, &pos, 1e-12, 1);
        let stack = delta_stack(&labels, &[[2, 2, 2], [2, 2, 5]], [6, 6, 8]);
        let (out, _) = pass_once(&stack, &graph).unwrap();
        for i in 0..2 {
            for (a, b) in out.channel(i).data().iter().zip(stack.channel(i).data()) {
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    /// Scalar reference implementation of one pass, written independently of
    /// the production accumulate-by-offset path.
    fn naive_pass_once(maps: &HeatmapStack, graph: &ChainGraph) -> Vec<Volume3D> {
        let n = maps.len();
        let mut out = Vec::new();
        for i in 0..n {
            let mut neigh = Vec::new();
            if i > 0 {
                neigh.push(naive_message(maps.channel(i - 1), graph.up_kernel(i - 1)));
            }
            if i + 1 < n {
                neigh.push(naive_message(maps.channel(i + 1), graph.down_kernel(i)));
            }
            let mut v = Volume3D::zeros(maps.geometry().clone());
            for m in &neigh {
                for (a, b) in v.data_mut().iter_mut().zip(m.data()) {
                    *a += b;
                }
            }
            let scale = graph.alpha() / neigh.len() as f64;
            for (a, p) in v.data_mut().iter_mut().zip(maps.channel(i).data()) {
                *a = *a * scale + p;
            }
            let z = v.sum();
            if z != 0.0 {
                for a in v.data_mut() {
                    *a /= z;
                }
            }
            out.push(v);
        }
        out
    }

    #[test]
    fn pass_once_matches_scalar_reference() {
        use rand::Rng;
        let labels = ["A", "B", "C"];
        let pos = [[4.0, 4.0, 1.0], [4.0, 4.0, 4.0], [4.0, 4.0, 7.0]];
        let graph = graph_from_one_sample(&labels, &pos, 0.5, 1);
        let g = Geometry::isotropic([8, 8, 8], 1.0).unwrap();
        let mut r = crate::rng::stream(77, 9, 1);
        let channels: Vec<Volume3D> = (0..3)
            .map(|_| {
                let mut v = Volume3D::zeros(g.clone());
                for x in v.data_mut() {
                    *x = r.random_range(0.0..1.0);
                }
                v
            })
            .collect();
        let stack =
            HeatmapStack::new(labels.iter().map(|s| s.to_string()).collect(), channels).unwrap();
        let (fast, _) = pass_once(&stack, &graph).unwrap();
        let slow = naive_pass_once(&stack, &graph);
        for i in 0..3 {
            for (a, b) in fast.channel(i).data().iter().zip(slow[i].data()) {
                assert_relative_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn all_zero_stack_is_flagged_not_normalized() {
        let labels = ["A", "B"];
        let pos = [[2.0, 2.0, 2.0], [2.0, 2.0, 5.0]];
        let graph = graph_from_one_sample(&labels, &pos, 0.5, 2);
        let g = Geometry::isotropic([6, 6, 8], 1.0).unwrap();
        let stack = HeatmapStack::new(
            labels.iter().map(|s| s.to_string()).collect(),
            vec![Volume3D::zeros(g.clone()), Volume3D::zeros(g)],
        )
        .unwrap();
        let (out, flags) = run_passing(&stack, &graph).unwrap();
        assert_eq!(flags, vec![0, 1]);
        assert!(out.channel(0).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn chain_locality_bounds_influence_speed() {
        let labels = ["A", "B", "C", "D"];
        let pos = [
            [3.0, 3.0, 1.0],
            [3.0, 3.0, 4.0],
            [3.0, 3.0, 7.0],
            [3.0, 3.0, 10.0],
        ];
        let graph = graph_from_one_sample(&labels, &pos, 0.5, 1);
        let base = delta_stack(
            &labels,
            &[[3, 3, 1], [3, 3, 4], [3, 3, 7], [3, 3, 10]],
            [6, 6, 12],
        );
        // The edit sits where the learned +3 z displacement keeps its message
        // inside the volume (zero padding would otherwise drop it).
        let mut touched = base.clone();
        touched.channel_mut(0).set(5, 5, 2, 0.7);
        let (a, _) = pass_once(&base, &graph).unwrap();
        let (b, _) = pass_once(&touched, &graph).unwrap();
        // One pass: channel 0's edit reaches channel 1 but not 2 or 3.
        assert_ne!(a.channel(1).data(), b.channel(1).data());
        assert_eq!(a.channel(2).data(), b.channel(2).data());
        assert_eq!(a.channel(3).data(), b.channel(3).data());
    }

    #[test]
    fn run_passing_t1_equals_pass_once() {
        let labels = ["A", "B"];
        let pos = [[2.0, 2.0, 2.0], [2.0, 2.0, 5.0]];
        let graph = graph_from_one_sample(&labels, &pos, 0.5, 1);
        let stack = delta_stack(&labels, &[[2, 2, 2], [3, 2, 5]], [6, 6, 8]);
        let (a, _) = run_passing(&stack, &graph).unwrap();
        let (b, _) = pass_once(&stack, &graph).unwrap();
        for i in 0..2 {
            assert_eq!(a.channel(i).data(), b.channel(i).data());
        }
    }

    #[test]
    fn missing_response_is_repaired() {
        let labels = ["A", "B", "C", "D", "E"];
        let pos: Vec<[f64; 3]> = (0..5).map(|i| [4.0, 4.0, 2.0 + 3.0 * i as f64]).collect();
        let train = vec![set(
            &labels.iter().zip(&pos).map(|(l, p)| (*l, *p)).collect::<Vec<_>>(),
        )];
        let owned: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        let graph = ChainGraph::learn(&owned, &train, [1.0; 3], None, 1.0, 0.5, 3).unwrap();
        let g = Geometry::isotropic([8, 8, 16], 1.0).unwrap();
        let marks = set(&labels.iter().zip(&pos).map(|(l, p)| (*l, *p)).collect::<Vec<_>>());
        let mut stack = HeatmapStack::gaussian_targets(&g, &marks, 1.0).unwrap();
        stack.normalize();
        // Knock out an interior channel entirely.
        for v in stack.channel_mut(2).data_mut() {
            *v = 0.0;
        }
        let (out, flags) = run_passing(&stack, &graph).unwrap();
        assert!(flags.is_empty(), "neighbors should repopulate channel 2");
        let (arg, _) = out.channel(2).argmax();
        let truth = [4i64, 4, 8];
        for a in 0..3 {
            assert!(
                (arg[a] as i64 - truth[a]).abs() <= 1,
                "axis {a}: argmax {arg:?} vs truth {truth:?}"
            );
        }
    }

    #[test]
    fn remote_false_positive_is_suppressed() {
        let labels = ["A", "B", "C", "D", "E"];
        let pos: Vec<[f64; 3]> = (0..5).map(|i| [4.0, 4.0, 2.0 + 3.0 * i as f64]).collect();
        let train = vec![set(
            &labels.iter().zip(&pos).map(|(l, p)| (*l, *p)).collect::<Vec<_>>(),
        )];
        let owned: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        let graph = ChainGraph::learn(&owned, &train, [1.0; 3], None, 1.0, 0.5, 3).unwrap();
        let g = Geometry::isotropic([8, 8, 16], 1.0).unwrap();
        let marks = set(&labels.iter().zip(&pos).map(|(l, p)| (*l, *p)).collect::<Vec<_>>());
        let mut stack = HeatmapStack::gaussian_targets(&g, &marks, 1.0).unwrap();
        // Spurious peak on channel 1 at 0.8x the true amplitude, >= 3
        // inter-vertebra spacings away from its truth at z=5.
        let true_peak = stack.channel(1).at(4, 4, 5);
        stack.channel_mut(1).set(1, 1, 15, 0.8 * true_peak);
        stack.normalize();
        let (out, _) = run_passing(&stack, &graph).unwrap();
        let (arg, _) = out.channel(1).argmax();
        assert_eq!(arg, [4, 4, 5]);
    }
}
