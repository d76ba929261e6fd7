//! Teacher/student knowledge alignment.
//!
//! Three losses connect teacher and student:
//! - high-level: L2 distance between teacher and student hash features;
//! - global: L2 distance between projected teacher and raw student class
//!   tokens of an aligned layer pair;
//! - local: the layer's patch tokens are arranged on their 2-D grid,
//!   partitioned into `w x w` windows (edge windows keep their natural,
//!   smaller size), average-pooled per window, and matched with each window
//!   weighted by its share of the token count.
//!
//! Projections map the teacher's hidden width onto the student's and are
//! separate per aligned layer and per path (global vs local). The teacher
//! side of every loss is expected to be bound as constants; nothing here
//! creates a gradient path into teacher parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{trunc_normal, BoundParams, Graph, ParamStore, Tx};
use crate::vit::EncoderOutput;

/// One aligned layer pair, 1-based indices into teacher/student blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPairSpec {
    pub student_layer: usize,
    pub teacher_layer: usize,
}

impl LayerPairSpec {
    pub fn validate(&self, student_layers: usize, teacher_layers: usize) -> Result<()> {
        if self.student_layer == 0 || self.student_layer > student_layers {
            return Err(Error::config(format!(
                "student layer {} outside [1, {student_layers}]",
                self.student_layer
            )));
        }
        if self.teacher_layer == 0 || self.teacher_layer > teacher_layers {
            return Err(Error::config(format!(
                "teacher layer {} outside [1, {teacher_layers}]",
                self.teacher_layer
            )));
        }
        Ok(())
    }
}

/// Tail mapping used when no explicit pairs are configured: the student's
/// last two layers align with the teacher's last two layers.
pub fn default_alignment_pairs(student_layers: usize, teacher_layers: usize) -> Vec<LayerPairSpec> {
    let count = 2.min(student_layers).min(teacher_layers);
    (0..count)
        .rev()
        .map(|back| LayerPairSpec {
            student_layer: student_layers - back,
            teacher_layer: teacher_layers - back,
        })
        .collect()
}

/// Unshared projection parameters for one aligned layer pair, stored under
/// `<prefix>.pair<m>.{global,local}`.
pub struct AlignmentProjections {
    prefix: String,
    pub num_pairs: usize,
    pub teacher_dim: usize,
    pub student_dim: usize,
}

impl AlignmentProjections {
    pub fn new(prefix: impl Into<String>, num_pairs: usize, teacher_dim: usize, student_dim: usize) -> Self {
        Self { prefix: prefix.into(), num_pairs, teacher_dim, student_dim }
    }

    fn name(&self, pair: usize, path: &str) -> String {
        format!("{}.pair{pair}.{path}", self.prefix)
    }

    /// Fan-in scaled init keeps projected teacher features on the student's
    /// feature scale from the first step.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = 1.0 / (self.teacher_dim as f64).sqrt();
        for m in 0..self.num_pairs {
            store.insert(
                self.name(m, "global"),
                trunc_normal(&[self.teacher_dim, self.student_dim], std, rng),
            );
            store.insert(
                self.name(m, "local"),
                trunc_normal(&[self.teacher_dim, self.student_dim], std, rng),
            );
        }
    }

    pub fn global_proj(&self, bound: &BoundParams, pair: usize) -> Tx {
        bound.get(&self.name(pair, "global"))
    }

    pub fn local_proj(&self, bound: &BoundParams, pair: usize) -> Tx {
        bound.get(&self.name(pair, "local"))
    }
}

/// Batch mean of per-sample L2 distances between equally shaped features.
pub fn high_level_loss(g: &Graph, h_teacher: Tx, h_student: Tx) -> Result<Tx> {
    let st = g.shape(h_teacher);
    let ss = g.shape(h_student);
    if st != ss {
        return Err(Error::shape(format!("hash features {st:?} vs {ss:?}")));
    }
    Ok(g.mean_all(g.l2_norm_last(g.sub(h_teacher, h_student))))
}

/// Batch mean of `|class_t W - class_s|_2` for one aligned layer.
pub fn global_align_loss(g: &Graph, class_teacher: Tx, class_student: Tx, proj: Tx) -> Result<Tx> {
    let st = g.shape(class_teacher);
    let ss = g.shape(class_student);
    let sw = g.shape(proj);
    if st.len() != 2 || ss.len() != 2 || sw != vec![st[1], ss[1]] {
        return Err(Error::shape(format!(
            "global alignment shapes: teacher {st:?}, student {ss:?}, projection {sw:?}"
        )));
    }
    let projected = g.matmul(class_teacher, proj);
    Ok(g.mean_all(g.l2_norm_last(g.sub(projected, class_student))))
}

/// Pooled window vectors with their token counts.
pub struct WindowSummary {
    /// `[batch, K, D]` mean-pooled window features.
    pub pooled: Tx,
    /// Tokens per window, row-major over the window grid.
    pub counts: Vec<usize>,
    pub window_size: usize,
    /// Token count N of the source sequence (the weight denominator).
    pub total_tokens: usize,
}

/// Partition patch tokens `[batch, N, D]` into `w x w` windows on their
/// spatial grid and average-pool each window.
///
/// The grid side is floor(sqrt(N)); trailing tokens beyond the square are
/// discarded. When `w` does not divide the side, edge windows keep their
/// natural smaller extent, which is exactly when the count weighting of
/// [`local_align_loss`] matters. `proj` (the teacher path) is applied to the
/// tokens before partitioning.
pub fn window_partition_pool(
    g: &Graph,
    tokens: Tx,
    window_size: usize,
    proj: Option<Tx>,
) -> Result<WindowSummary> {
    let shape = g.shape(tokens);
    if shape.len() != 3 {
        return Err(Error::shape(format!("expected [batch, N, D], got {shape:?}")));
    }
    let (batch, n) = (shape[0], shape[1]);
    let side = (n as f64).sqrt().floor() as usize;
    if side == 0 {
        return Err(Error::config("window partition needs at least one token"));
    }
    if window_size == 0 || window_size > side {
        return Err(Error::config(format!(
            "window size {window_size} outside [1, {side}] for {n} tokens"
        )));
    }

    let mapped = match proj {
        Some(p) => g.matmul(tokens, p),
        None => tokens,
    };
    let d = *g.shape(mapped).last().unwrap();
    let grid = g.reshape(g.narrow(mapped, 1, 0, side * side), &[batch, side, side, d]);

    let windows_per_side = side.div_ceil(window_size);
    let mut pooled_parts = Vec::new();
    let mut counts = Vec::new();
    for wy in 0..windows_per_side {
        let y0 = wy * window_size;
        let rows = window_size.min(side - y0);
        for wx in 0..windows_per_side {
            let x0 = wx * window_size;
            let cols = window_size.min(side - x0);
            let cell = g.narrow(g.narrow(grid, 1, y0, rows), 2, x0, cols);
            let flat = g.reshape(cell, &[batch, rows * cols, d]);
            let mean = g.mean_axis(flat, 1);
            pooled_parts.push(g.reshape(mean, &[batch, 1, d]));
            counts.push(rows * cols);
        }
    }
    let pooled = g.concat(&pooled_parts, 1);
    Ok(WindowSummary { pooled, counts, window_size, total_tokens: n })
}

/// Count-weighted sum of per-window L2 distances, batch-averaged:
/// `sum_i p_i |win_s_i - win_t_i|_2` with `p_i = n(win_i) / N`.
pub fn local_align_loss(g: &Graph, student: &WindowSummary, teacher: &WindowSummary) -> Result<Tx> {
    if student.counts != teacher.counts
        || student.window_size != teacher.window_size
        || student.total_tokens != teacher.total_tokens
    {
        return Err(Error::shape("window layout mismatch between student and teacher"));
    }
    let ss = g.shape(student.pooled);
    let st = g.shape(teacher.pooled);
    if ss != st {
        return Err(Error::shape(format!("pooled windows {ss:?} vs {st:?}")));
    }
    let (batch, k) = (ss[0], ss[1]);
    let dist = g.reshape(g.l2_norm_last(g.sub(student.pooled, teacher.pooled)), &[batch, k]);
    let weights = ndarray::Array1::from_iter(
        student.counts.iter().map(|&c| c as f64 / student.total_tokens as f64),
    )
    .into_dyn();
    let weighted = g.mul(dist, g.constant(weights));
    Ok(g.mean_all(g.sum_axis(weighted, 1)))
}

/// All distillation components for one batch.
pub struct DistillComponents {
    pub high: Tx,
    /// Sum of global alignment losses over the aligned pairs.
    pub global: Tx,
    /// Sum of local alignment losses over the aligned pairs.
    pub local: Tx,
    /// `high + gamma * (global + local)`.
    pub total: Tx,
}

/// Compose the distillation loss over the configured layer pairs.
///
/// `projections` supplies the per-pair (global, local) projection nodes in
/// pair order. `window_pref` is the preferred window size; it shrinks to the
/// token grid when the grid is smaller. Teacher quantities must come from
/// constant-bound parameters; the loss itself adds no gradient barrier.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    g: &Graph,
    teacher_out: &EncoderOutput,
    student_out: &EncoderOutput,
    h_teacher: Tx,
    h_student: Tx,
    pairs: &[LayerPairSpec],
    projections: &[(Tx, Tx)],
    gamma: f64,
    window_pref: usize,
) -> Result<DistillComponents> {
    if pairs.is_empty() {
        return Err(Error::config("distillation needs at least one aligned layer pair"));
    }
    if projections.len() != pairs.len() {
        return Err(Error::config(format!(
            "{} projection pairs for {} layer pairs",
            projections.len(),
            pairs.len()
        )));
    }
    let high = high_level_loss(g, h_teacher, h_student)?;

    let mut global_sum: Option<Tx> = None;
    let mut local_sum: Option<Tx> = None;
    for (pair, &(gproj, lproj)) in pairs.iter().zip(projections.iter()) {
        pair.validate(student_out.per_layer.len(), teacher_out.per_layer.len())?;
        let t_tokens = teacher_out.per_layer[pair.teacher_layer - 1];
        let s_tokens = student_out.per_layer[pair.student_layer - 1];
        let ts = g.shape(t_tokens);
        let ss = g.shape(s_tokens);
        if ts[1] != ss[1] {
            return Err(Error::config(format!(
                "token grids must align for window alignment: teacher {} vs student {} tokens",
                ts[1] - 1,
                ss[1] - 1
            )));
        }

        let t_class = g.reshape(g.narrow(t_tokens, 1, 0, 1), &[ts[0], ts[2]]);
        let s_class = g.reshape(g.narrow(s_tokens, 1, 0, 1), &[ss[0], ss[2]]);
        let global = global_align_loss(g, t_class, s_class, gproj)?;

        let n = ts[1] - 1;
        let t_patches = g.narrow(t_tokens, 1, 1, n);
        let s_patches = g.narrow(s_tokens, 1, 1, n);
        let window = effective_window(n, window_pref);
        let t_win = window_partition_pool(g, t_patches, window, Some(lproj))?;
        let s_win = window_partition_pool(g, s_patches, window, None)?;
        let local = local_align_loss(g, &s_win, &t_win)?;

        global_sum = Some(match global_sum {
            Some(acc) => g.add(acc, global),
            None => global,
        });
        local_sum = Some(match local_sum {
            Some(acc) => g.add(acc, local),
            None => local,
        });
    }
    let global = global_sum.expect("at least one pair");
    let local = local_sum.expect("at least one pair");
    let low = g.add(global, local);
    let total = g.add(high, g.scale(low, gamma));
    Ok(DistillComponents { high, global, local, total })
}

/// Reference window size from the experiment settings.
pub const DEFAULT_WINDOW: usize = 7;

/// Shrink the window to fit small token grids (desk-scale configs have
/// grids smaller than the reference window).
pub fn effective_window(num_tokens: usize, preferred: usize) -> usize {
    let side = (num_tokens as f64).sqrt().floor() as usize;
    preferred.min(side).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Arr;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Brute-force window assignment: map each of the first side^2 tokens to
    /// its window by integer division of its grid coordinates.
    fn brute_force_windows(n: usize, w: usize) -> Vec<usize> {
        let side = (n as f64).sqrt().floor() as usize;
        let per_side = side.div_ceil(w);
        let mut counts = vec![0usize; per_side * per_side];
        for t in 0..side * side {
            let (y, x) = (t / side, t % side);
            counts[(y / w) * per_side + (x / w)] += 1;
        }
        counts
    }

    #[test]
    fn high_level_loss_cases() {
        let g = Graph::new();
        let a = g.constant(rand_arr(&[3, 8], 1));
        let same = high_level_loss(&g, a, a).unwrap();
        assert!(g.scalar(same).abs() < 1e-12);

        let t = g.constant(ndarray::arr2(&[[1.0, 0.0]]).into_dyn());
        let s = g.constant(ndarray::arr2(&[[0.0, 0.0]]).into_dyn());
        assert!((g.scalar(high_level_loss(&g, t, s).unwrap()) - 1.0).abs() < 1e-12);

        // batch of 4 vs per-row loop oracle
        let ht = rand_arr(&[4, 6], 2);
        let hs = rand_arr(&[4, 6], 3);
        let g2 = Graph::new();
        let got = g2.scalar(
            high_level_loss(&g2, g2.constant(ht.clone()), g2.constant(hs.clone())).unwrap(),
        );
        let mut want = 0.0;
        for i in 0..4 {
            let mut acc = 0.0;
            for j in 0..6 {
                let d = ht[[i, j]] - hs[[i, j]];
                acc += d * d;
            }
            want += acc.sqrt();
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-12);

        // shape mismatch
        let a = g.constant(rand_arr(&[2, 4], 4));
        let b = g.constant(rand_arr(&[2, 5], 5));
        assert!(high_level_loss(&g, a, b).is_err());
    }

    #[test]
    fn global_align_identity_cases() {
        let g = Graph::new();
        let d = 5;
        let mut eye = Arr::zeros(IxDyn(&[d, d]));
        for i in 0..d {
            eye[[i, i]] = 1.0;
        }
        let class = rand_arr(&[3, d], 6);
        let t = g.constant(class.clone());
        let s = g.constant(class);
        let w = g.constant(eye);
        assert!(g.scalar(global_align_loss(&g, t, s, w).unwrap()).abs() < 1e-12);

        // unit-vector offset gives exactly 1
        let t = g.constant(ndarray::arr2(&[[1.0, 0.0, 0.0]]).into_dyn());
        let s = g.constant(ndarray::arr2(&[[0.0, 1.0, 0.0]]).into_dyn());
        let mut eye3 = Arr::zeros(IxDyn(&[3, 3]));
        for i in 0..3 {
            eye3[[i, i]] = 1.0;
        }
        // t W - s = (1,-1,0), norm sqrt(2)... use s = t shifted by unit in one axis instead
        let s2 = g.constant(ndarray::arr2(&[[1.0, 0.0, 1.0]]).into_dyn());
        let w3 = g.constant(eye3);
        let loss = global_align_loss(&g, t, s2, w3).unwrap();
        assert!((g.scalar(loss) - 1.0).abs() < 1e-12);
        let _ = s;
    }

    #[test]
    fn global_align_matches_loop_oracle() {
        let (b, dt, ds) = (4, 6, 3);
        let ct = rand_arr(&[b, dt], 7);
        let cs = rand_arr(&[b, ds], 8);
        let w = rand_arr(&[dt, ds], 9);
        let g = Graph::new();
        let got = g.scalar(
            global_align_loss(&g, g.constant(ct.clone()), g.constant(cs.clone()), g.constant(w.clone()))
                .unwrap(),
        );
        let mut want = 0.0;
        for i in 0..b {
            let mut acc = 0.0;
            for j in 0..ds {
                let mut proj = 0.0;
                for k in 0..dt {
                    proj += ct[[i, k]] * w[[k, j]];
                }
                let d = proj - cs[[i, j]];
                acc += d * d;
            }
            want += acc.sqrt();
        }
        want /= b as f64;
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn window_counts_196_tokens_window_7() {
        let g = Graph::new();
        let tokens = g.constant(rand_arr(&[1, 196, 4], 10));
        let sum = window_partition_pool(&g, tokens, 7, None).unwrap();
        assert_eq!(sum.counts.len(), 4);
        assert!(sum.counts.iter().all(|&c| c == 49));
        assert_eq!(sum.counts, brute_force_windows(196, 7));
        let weights: Vec<f64> = sum.counts.iter().map(|&c| c as f64 / 196.0).collect();
        assert!(weights.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_single_cell_pools_all_tokens() {
        let toks = rand_arr(&[1, 4, 3], 11);
        let g = Graph::new();
        let sum = window_partition_pool(&g, g.constant(toks.clone()), 2, None).unwrap();
        assert_eq!(sum.counts, vec![4]);
        let pooled = g.value(sum.pooled);
        for d in 0..3 {
            let mean = (0..4).map(|t| toks[[0, t, d]]).sum::<f64>() / 4.0;
            assert!((pooled[[0, 0, d]] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn ragged_windows_nine_tokens_window_2() {
        let g = Graph::new();
        let tokens = g.constant(rand_arr(&[2, 9, 4], 12));
        let sum = window_partition_pool(&g, tokens, 2, None).unwrap();
        assert_eq!(sum.counts, vec![4, 2, 2, 1]);
        assert_eq!(sum.counts, brute_force_windows(9, 2));
        assert_eq!(sum.counts.iter().sum::<usize>(), 9);
    }

    #[test]
    fn window_pool_matches_brute_force_means() {
        // ragged case, checked element-by-element against a loop oracle
        let (n, w, d) = (9, 2, 3);
        let toks = rand_arr(&[1, n, d], 13);
        let g = Graph::new();
        let sum = window_partition_pool(&g, g.constant(toks.clone()), w, None).unwrap();
        let pooled = g.value(sum.pooled);
        let side = 3;
        let per_side = 2;
        let mut acc = vec![vec![0.0; d]; per_side * per_side];
        let mut cnt = vec![0usize; per_side * per_side];
        for t in 0..side * side {
            let (y, x) = (t / side, t % side);
            let win = (y / w) * per_side + (x / w);
            cnt[win] += 1;
            for j in 0..d {
                acc[win][j] += toks[[0, t, j]];
            }
        }
        for win in 0..per_side * per_side {
            for j in 0..d {
                let want = acc[win][j] / cnt[win] as f64;
                assert!((pooled[[0, win, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oversized_window_is_config_error() {
        let g = Graph::new();
        let tokens = g.constant(rand_arr(&[1, 9, 4], 14));
        assert!(matches!(
            window_partition_pool(&g, tokens, 4, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pooling_is_linear() {
        let a = rand_arr(&[1, 16, 3], 15);
        let b = rand_arr(&[1, 16, 3], 16);
        let g = Graph::new();
        let pa = g.value(window_partition_pool(&g, g.constant(a.clone()), 2, None).unwrap().pooled);
        let pb = g.value(window_partition_pool(&g, g.constant(b.clone()), 2, None).unwrap().pooled);
        let pab =
            g.value(window_partition_pool(&g, g.constant(&a + &b), 2, None).unwrap().pooled);
        let sum = &pa + &pb;
        for (x, y) in pab.iter().zip(sum.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn local_loss_identical_summaries_zero() {
        let g = Graph::new();
        let toks = g.constant(rand_arr(&[2, 16, 3], 17));
        let a = window_partition_pool(&g, toks, 2, None).unwrap();
        let b = window_partition_pool(&g, toks, 2, None).unwrap();
        assert!(g.scalar(local_align_loss(&g, &a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn local_loss_equal_windows_unit_distances() {
        // K=4 windows of 49 tokens each (N=196, w=7): weights 0.25, so four
        // unit distances sum to 1
        let g = Graph::new();
        let zero = g.constant(Arr::zeros(IxDyn(&[1, 196, 4])));
        let mut shifted = Arr::zeros(IxDyn(&[1, 196, 4]));
        for t in 0..196 {
            shifted[[0, t, 0]] = 1.0; // every pooled window differs by a unit vector
        }
        let s = window_partition_pool(&g, g.constant(shifted), 7, None).unwrap();
        let t = window_partition_pool(&g, zero, 7, None).unwrap();
        let loss = g.scalar(local_align_loss(&g, &s, &t).unwrap());
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn local_loss_matches_loop_oracle() {
        let (n, w, d, batch) = (9, 2, 3, 2);
        let st = rand_arr(&[batch, n, d], 18);
        let tt = rand_arr(&[batch, n, d], 19);
        let g = Graph::new();
        let s = window_partition_pool(&g, g.constant(st), w, None).unwrap();
        let t = window_partition_pool(&g, g.constant(tt), w, None).unwrap();
        let got = g.scalar(local_align_loss(&g, &s, &t).unwrap());

        let ps = g.value(s.pooled);
        let pt = g.value(t.pooled);
        let mut want = 0.0;
        for bi in 0..batch {
            for (win, &cnt) in s.counts.iter().enumerate() {
                let mut acc = 0.0;
                for j in 0..d {
                    let diff = ps[[bi, win, j]] - pt[[bi, win, j]];
                    acc += diff * diff;
                }
                want += cnt as f64 / n as f64 * acc.sqrt();
            }
        }
        want /= batch as f64;
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn layout_mismatch_is_error() {
        let g = Graph::new();
        let a = window_partition_pool(&g, g.constant(rand_arr(&[1, 16, 3], 20)), 2, None).unwrap();
        let b = window_partition_pool(&g, g.constant(rand_arr(&[1, 16, 3], 21)), 4, None).unwrap();
        assert!(local_align_loss(&g, &a, &b).is_err());
    }

    #[test]
    fn default_pairs_take_the_tail() {
        assert_eq!(
            default_alignment_pairs(6, 12),
            vec![
                LayerPairSpec { student_layer: 5, teacher_layer: 11 },
                LayerPairSpec { student_layer: 6, teacher_layer: 12 }
            ]
        );
        assert_eq!(
            default_alignment_pairs(1, 4),
            vec![LayerPairSpec { student_layer: 1, teacher_layer: 4 }]
        );
    }

    #[test]
    fn effective_window_shrinks_to_grid() {
        assert_eq!(effective_window(196, 7), 7);
        assert_eq!(effective_window(64, 7), 7);
        assert_eq!(effective_window(16, 7), 4);
        assert_eq!(effective_window(1, 7), 1);
    }
}
