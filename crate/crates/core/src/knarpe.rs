//! K-nearest-neighbor attention with relative pose encoding.
//!
//! Each query token attends only to its `K` nearest source tokens. Keys and
//! values of a neighbor are augmented with a learned projection of the
//! neighbor's pose relative to the query:
//!
//! ```text
//! e_ij = (u_i W_q + b_q) · (u_j W_k + b_k + RPE(r_ij) Ŵ_k + b̂_k) / √D_head
//! z_i  = Σ_j softmax_j(e_ij) (u_j W_v + b_v + RPE(r_ij) Ŵ_v + b̂_v)
//! ```
//!
//! Token features are expressed in each token's local frame, so the output
//! depends on poses only through `r_ij` and is invariant to a global rigid
//! transform of the scene.

use rand_chacha::ChaCha8Rng;

use crate::geom::{relative_pose_values, rpe_values, Pose2D, PoseValues, RpeConfig};
use crate::numcore::{concat_rows, Ctx, LayerNorm, Linear, ParamStore, Tape, Tensor, Value};

/// Token features with their poses and validity.
#[derive(Clone, Debug)]
pub struct PosedTokens<'t> {
    /// `[N, D]` local attributes.
    pub features: Value<'t>,
    pub poses: PoseValues<'t>,
    pub valid: Vec<bool>,
}

impl<'t> PosedTokens<'t> {
    pub fn new(features: Value<'t>, poses: PoseValues<'t>, valid: Vec<bool>) -> Self {
        let n = features.dim(0);
        assert_eq!(poses.len(), n, "pose count must match feature rows");
        assert_eq!(valid.len(), n, "valid flags must match feature rows");
        Self { features, poses, valid }
    }

    pub fn with_constant_poses(features: Value<'t>, poses: &[Pose2D], valid: Vec<bool>) -> Self {
        let tape = features.tape();
        Self::new(features, PoseValues::constant(tape, poses), valid)
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn pose_list(&self) -> Vec<Pose2D> {
        self.poses.poses()
    }

    /// Stacks several token sets into one source pool, in order.
    pub fn concat(parts: &[&PosedTokens<'t>]) -> Self {
        let nonempty: Vec<&&PosedTokens<'t>> = parts.iter().filter(|p| !p.is_empty()).collect();
        if nonempty.is_empty() {
            return parts[0].clone();
        }
        let cat = |f: &dyn Fn(&PosedTokens<'t>) -> Value<'t>| concat_rows(&nonempty.iter().map(|p| f(p)).collect::<Vec<_>>());
        Self {
            features: cat(&|p| p.features),
            poses: PoseValues {
                x: cat(&|p| p.poses.x),
                y: cat(&|p| p.poses.y),
                theta: cat(&|p| p.poses.theta),
            },
            valid: nonempty.iter().flat_map(|p| p.valid.iter().copied()).collect(),
        }
    }
}

/// Neighbor table: `neighbors[i·k + j]` is the `j`-th nearest source of query `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnIndex {
    pub k: usize,
    pub neighbors: Vec<usize>,
    pub neighbor_valid: Vec<bool>,
}

impl KnnIndex {
    pub fn queries(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.neighbors.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (i * self.k..(i + 1) * self.k).filter(|&s| self.neighbor_valid[s]).map(|s| self.neighbors[s])
    }

    /// Joins per-source-set indices side by side along the neighbor axis,
    /// shifting each part's indices by its offset into the stacked pool.
    pub fn union(parts: &[(&KnnIndex, usize)]) -> KnnIndex {
        let n = parts.iter().map(|(p, _)| p.queries()).find(|&q| q > 0).unwrap_or(0);
        let parts: Vec<&(&KnnIndex, usize)> = parts.iter().filter(|(p, _)| p.k > 0).collect();
        let k: usize = parts.iter().map(|(p, _)| p.k).sum();
        let mut neighbors = Vec::with_capacity(n * k);
        let mut neighbor_valid = Vec::with_capacity(n * k);
        for i in 0..n {
            for (p, off) in &parts {
                assert_eq!(p.queries(), n, "union parts must share queries");
                for s in i * p.k..(i + 1) * p.k {
                    // Empty slots point at row 0 so offsets never run past the pool.
                    neighbors.push(if p.neighbor_valid[s] { p.neighbors[s] + off } else { 0 });
                    neighbor_valid.push(p.neighbor_valid[s]);
                }
            }
        }
        KnnIndex {
            k,
            neighbors,
            neighbor_valid,
        }
    }
}

/// The `k` valid sources closest in the plane to each query. Ties go to the
/// lower source index; unfilled slots are marked invalid.
///
/// Squared distances are compared on a 1e-6 m^2 grid, so symmetric layouts
/// keep the same neighbor sets under rigid motions despite rounding noise.
pub fn knn_select(query_poses: &[Pose2D], source_poses: &[Pose2D], source_valid: &[bool], k: usize) -> KnnIndex {
    assert!(k >= 1, "knn_select needs k >= 1");
    assert_eq!(source_poses.len(), source_valid.len());
    let mut neighbors = Vec::with_capacity(query_poses.len() * k);
    let mut neighbor_valid = Vec::with_capacity(query_poses.len() * k);
    let mut cand: Vec<(i64, usize)> = Vec::with_capacity(source_poses.len());
    for q in query_poses {
        cand.clear();
        cand.extend(
            source_poses
                .iter()
                .enumerate()
                .filter(|(j, _)| source_valid[*j])
                .map(|(j, s)| ((((s.x - q.x).powi(2) + (s.y - q.y).powi(2)) * 1e6).round() as i64, j)),
        );
        let take = k.min(cand.len());
        if take < cand.len() {
            cand.select_nth_unstable_by(take, |a, b| a.cmp(b));
            cand.truncate(take);
        }
        cand.sort_unstable();
        for slot in 0..k {
            match cand.get(slot) {
                Some(&(_, j)) => {
                    neighbors.push(j);
                    neighbor_valid.push(true);
                }
                None => {
                    neighbors.push(0);
                    neighbor_valid.push(false);
                }
            }
        }
    }
    KnnIndex {
        k,
        neighbors,
        neighbor_valid,
    }
}

/// Learnable weights of one pre-LN KNARPE transformer block.
#[derive(Clone, Debug)]
pub struct KnarpeBlockParams {
    pub heads: usize,
    pub hidden: usize,
    pub rpe: RpeConfig,
    pub ln_query: LayerNorm,
    pub ln_source: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub rpe_key: Linear,
    pub rpe_value: Linear,
    pub out: Linear,
    pub ln_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl KnarpeBlockParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        ff: usize,
        rpe: RpeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && hidden % heads == 0, "{heads} heads must divide hidden width {hidden}");
        let w = rpe.width();
        Self {
            heads,
            hidden,
            rpe,
            ln_query: LayerNorm::new(store, &format!("{name}.ln_query"), hidden),
            ln_source: LayerNorm::new(store, &format!("{name}.ln_source"), hidden),
            query: Linear::new(store, &format!("{name}.query"), hidden, hidden, rng),
            key: Linear::new(store, &format!("{name}.key"), hidden, hidden, rng),
            value: Linear::new(store, &format!("{name}.value"), hidden, hidden, rng),
            rpe_key: Linear::new(store, &format!("{name}.rpe_key"), w, hidden, rng),
            rpe_value: Linear::new(store, &format!("{name}.rpe_value"), w, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, hidden, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), hidden),
            ff1: Linear::new(store, &format!("{name}.ff1"), hidden, ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, hidden, rng),
        }
    }
}

/// Attention output plus the per-head weights `[N, heads, K]`.
pub struct AttentionOutput<'t> {
    pub output: Value<'t>,
    pub weights: Value<'t>,
}

/// Multi-head KNARPE attention of `queries` over their indexed `sources`.
/// Query rows without any valid neighbor produce a zero row.
pub fn knarpe_attention<'t>(
    ctx: Ctx<'t>,
    params: &KnarpeBlockParams,
    queries: &PosedTokens<'t>,
    sources: &PosedTokens<'t>,
    index: &KnnIndex,
) -> AttentionOutput<'t> {
    let tape: &Tape = ctx.tape;
    let n = queries.len();
    let k = index.k;
    let d = params.hidden;
    if n == 0 || k == 0 || sources.is_empty() {
        return AttentionOutput {
            output: tape.zeros(&[n, d]),
            weights: tape.zeros(&[n, params.heads, k]),
        };
    }
    assert_eq!(index.queries(), n, "index built for a different query set");

    // Project only the source rows that some query actually references.
    let mut used: Vec<usize> = index.neighbors.clone();
    used.sort_unstable();
    used.dedup();
    let mut remap = vec![usize::MAX; sources.len()];
    for (r, &s) in used.iter().enumerate() {
        remap[s] = r;
    }
    let flat: Vec<usize> = index.neighbors.iter().map(|&s| remap[s]).collect();
    let src = sources.features.gather_rows(&used);
    let keys = params.key.forward(ctx, src).gather_rows(&flat);
    let values = params.value.forward(ctx, src).gather_rows(&flat);

    let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let from = queries.poses.gather(&repeat);
    let to = sources.poses.gather(&index.neighbors);
    let enc = rpe_values(&relative_pose_values(&from, &to), &params.rpe);
    let keys = keys + params.rpe_key.forward(ctx, enc);
    let values = values + params.rpe_value.forward(ctx, enc);

    let q = params.query.forward(ctx, queries.features);
    let head_dim = d / params.heads;
    let logits = q.head_dot(keys, params.heads, 1.0 / (head_dim as f64).sqrt());
    let mask: Vec<bool> = (0..n)
        .flat_map(|i| {
            let row = &index.neighbor_valid[i * k..(i + 1) * k];
            std::iter::repeat_n(row, params.heads).flatten().map(|v| !v)
        })
        .collect();
    let weights = logits.mask_fill(&mask).softmax();
    let mixed = weights.head_mix(values);
    let has_neighbor: Vec<f64> = (0..n)
        .map(|i| {
            if index.neighbor_valid[i * k..(i + 1) * k].iter().any(|v| *v) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let gate = tape.constant(Tensor::new(vec![n, 1], has_neighbor).unwrap());
    AttentionOutput {
        output: params.out.forward(ctx, mixed) * gate,
        weights,
    }
}

/// Pre-LN transformer block: `x + Attn(LN(x), LN(s))`, then `x + FF(LN(x))`.
/// Poses and validity pass through; invalid query rows keep their input.
pub fn knarpe_block<'t>(
    ctx: Ctx<'t>,
    params: &KnarpeBlockParams,
    queries: &PosedTokens<'t>,
    sources: &PosedTokens<'t>,
    index: &KnnIndex,
) -> PosedTokens<'t> {
    let n = queries.len();
    if n == 0 {
        return queries.clone();
    }
    let q_in = PosedTokens {
        features: params.ln_query.forward(ctx, queries.features),
        ..queries.clone()
    };
    let s_in = PosedTokens {
        features: if sources.is_empty() {
            sources.features
        } else {
            params.ln_source.forward(ctx, sources.features)
        },
        ..sources.clone()
    };
    let gate = ctx.tape.constant(
        Tensor::new(vec![n, 1], queries.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()).unwrap(),
    );
    let attn = knarpe_attention(ctx, params, &q_in, &s_in, index).output;
    let x = queries.features + attn * gate;
    let h = params.ff1.forward(ctx, params.ln_ff.forward(ctx, x)).relu();
    let x = x + params.ff2.forward(ctx, h) * gate;
    PosedTokens {
        features: x,
        ..queries.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check_params;
    use rand::{Rng, SeedableRng};

    fn rand_poses(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Pose2D> {
        (0..n)
            .map(|_| Pose2D::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-3.0..3.0)))
            .collect()
    }

    fn rand_feats(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_block(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> KnarpeBlockParams {
        KnarpeBlockParams::new(store, "blk", 8, 2, 16, RpeConfig::new(4, 0.1).unwrap(), rng)
    }

    /// Brute force: full sort of all valid sources by (distance, index).
    fn sort_oracle(q: &Pose2D, src: &[Pose2D], valid: &[bool], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = src
            .iter()
            .enumerate()
            .filter(|(j, _)| valid[*j])
            .map(|(j, s)| ((s.x - q.x).powi(2) + (s.y - q.y).powi(2), j))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn knn_degenerate_single_source() {
        let src = [Pose2D::new(1.0, 0.0, 0.0), Pose2D::new(2.0, 0.0, 0.0)];
        let idx = knn_select(&[Pose2D::default()], &src, &[false, true], 3);
        assert_eq!(idx.neighbor_valid, vec![true, false, false]);
        assert_eq!(idx.neighbors[0], 1);
    }

    #[test]
    fn knn_collinear_two_nearest() {
        let src: Vec<Pose2D> = [3.0, 1.0, 4.0, 2.0].iter().map(|&x| Pose2D::new(x, 0.0, 0.0)).collect();
        let idx = knn_select(&[Pose2D::default()], &src, &[true; 4], 2);
        assert_eq!(idx.neighbors, vec![1, 3]);
    }

    #[test]
    fn knn_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = rand_poses(&mut rng, 50, 20.0);
        let valid = vec![true; 50];
        let idx = knn_select(&pts, &pts, &valid, 8);
        for (i, q) in pts.iter().enumerate() {
            let got: Vec<usize> = idx.row(i).collect();
            assert_eq!(got, sort_oracle(q, &pts, &valid, 8));
            assert_eq!(got[0], i, "self is its own nearest neighbor");
        }
    }

    #[test]
    fn union_offsets_indices() {
        let a = KnnIndex {
            k: 1,
            neighbors: vec![0, 1],
            neighbor_valid: vec![true, true],
        };
        let b = KnnIndex {
            k: 2,
            neighbors: vec![0, 0, 1, 0],
            neighbor_valid: vec![true, false, true, true],
        };
        let u = KnnIndex::union(&[(&a, 0), (&b, 5)]);
        assert_eq!(u.k, 3);
        assert_eq!(u.neighbors, vec![0, 5, 0, 1, 6, 5]);
        assert_eq!(u.neighbor_valid, vec![true, true, false, true, true, true]);
    }

    #[test]
    fn single_neighbor_takes_its_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = small_block(&mut store, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let qp = rand_poses(&mut rng, 3, 5.0);
        let sp = rand_poses(&mut rng, 4, 5.0);
        let q = PosedTokens::with_constant_poses(tape.constant(rand_feats(&mut rng, 3, 8)), &qp, vec![true; 3]);
        let s = PosedTokens::with_constant_poses(tape.constant(rand_feats(&mut rng, 4, 8)), &sp, vec![true; 4]);
        let idx = knn_select(&qp, &sp, &s.valid, 1);
        let out = knarpe_attention(ctx, &p, &q, &s, &idx);
        assert!(out.weights.data().iter().all(|w| *w == 1.0));

        // Direct evaluation of u_j W_v + b_v + RPE(r_ij) Ŵ_v + b̂_v, then the output projection.
        let got = out.output.tensor();
        for i in 0..3 {
            let j = idx.neighbors[i];
            let r = crate::geom::relative_pose(&qp[i], &sp[j]).unwrap();
            let enc = crate::geom::rpe(&r, &p.rpe).unwrap();
            let u = s.features.tensor();
            let mut v = store.get(p.value.bias).data().to_vec();
            for c in 0..8 {
                for l in 0..8 {
                    v[c] += u.get2(j, l) * store.get(p.value.weight).get2(l, c);
                }
                v[c] += store.get(p.rpe_value.bias).data()[c];
                for (l, e) in enc.iter().enumerate() {
                    v[c] += e * store.get(p.rpe_value.weight).get2(l, c);
                }
            }
            for c in 0..8 {
                let mut o = store.get(p.out.bias).data()[c];
                for l in 0..8 {
                    o += v[l] * store.get(p.out.weight).get2(l, c);
                }
                assert!((got.get2(i, c) - o).abs() < 1e-12);
            }
        }
    }

    /// Textbook multi-head attention over all tokens, written with plain loops.
    fn dense_mha(store: &ParamStore, p: &KnarpeBlockParams, u: &Tensor) -> Vec<Vec<f64>> {
        let n = u.shape()[0];
        let d = p.hidden;
        let proj = |lin: &Linear, row: usize| -> Vec<f64> {
            let (w, b) = (store.get(lin.weight), store.get(lin.bias));
            (0..d).map(|c| b.data()[c] + (0..d).map(|l| u.get2(row, l) * w.get2(l, c)).sum::<f64>()).collect()
        };
        let q: Vec<Vec<f64>> = (0..n).map(|i| proj(&p.query, i)).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|i| proj(&p.key, i)).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|i| proj(&p.value, i)).collect();
        let dh = d / p.heads;
        (0..n)
            .map(|i| {
                let mut z = vec![0.0; d];
                for h in 0..p.heads {
                    let cols = h * dh..(h + 1) * dh;
                    let e: Vec<f64> = (0..n)
                        .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = e.iter().map(|x| (x - m).exp()).sum();
                    for j in 0..n {
                        let a = (e[j] - m).exp() / s;
                        for c in cols.clone() {
                            z[c] += a * v[j][c];
                        }
                    }
                }
                let (w, b) = (store.get(p.out.weight), store.get(p.out.bias));
                (0..d).map(|c| b.data()[c] + (0..d).map(|l| z[l] * w.get2(l, c)).sum::<f64>()).collect()
            })
            .collect()
    }

    #[test]
    fn zero_rpe_colocated_equals_dense_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1, 3, 6] {
            let mut store = ParamStore::new();
            let p = small_block(&mut store, &mut rng);
            for id in [p.rpe_key.weight, p.rpe_key.bias, p.rpe_value.weight, p.rpe_value.bias] {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let pose = Pose2D::new(rng.random_range(-9.0..9.0), 2.0, 0.3);
            let poses = vec![pose; n];
            let u = rand_feats(&mut rng, n, 8);
            let toks = PosedTokens::with_constant_poses(tape.constant(u.clone()), &poses, vec![true; n]);
            let idx = knn_select(&poses, &poses, &toks.valid, n);
            let out = knarpe_attention(ctx, &p, &toks, &toks, &idx);
            let got = out.output.tensor();
            for (i, row) in dense_mha(&store, &p, &u).iter().enumerate() {
                for (c, want) in row.iter().enumerate() {
                    assert!((got.get2(i, c) - want).abs() < 1e-9);
                }
            }
            for row in out.weights.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masked_slots_match_truncated_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let p = small_block(&mut store, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let mut poses = rand_poses(&mut rng, 6, 3.0);
        for p in poses.iter_mut().skip(3) {
            p.x += 1e3;
        }
        let toks = PosedTokens::with_constant_poses(tape.constant(rand_feats(&mut rng, 6, 8)), &poses, vec![true; 6]);
        let full = knn_select(&poses, &poses, &toks.valid, 6);
        let near = knn_select(&poses, &poses, &toks.valid, 3);
        let mut masked = full.clone();
        for s in 0..36 {
            if (s / 6 < 3) != (full.neighbors[s] < 3) {
                masked.neighbor_valid[s] = false;
            }
        }
        let a = knarpe_attention(ctx, &p, &toks, &toks, &masked);
        let b = knarpe_attention(ctx, &p, &toks, &toks, &near);
        assert!(a.output.tensor().max_abs_diff(&b.output.tensor()) < 1e-12);
        let w = a.weights.tensor();
        for (s, valid) in masked.neighbor_valid.iter().enumerate() {
            let (i, j) = (s / 6, s % 6);
            for h in 0..2 {
                if !valid {
                    assert_eq!(w.data()[(i * 2 + h) * 6 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn block_with_zero_output_projections_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let p = small_block(&mut store, &mut rng);
        for id in [p.out.weight, p.out.bias, p.ff2.weight, p.ff2.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        for n in [1, 5] {
            let poses = rand_poses(&mut rng, n, 4.0);
            let x = rand_feats(&mut rng, n, 8);
            let toks = PosedTokens::with_constant_poses(tape.constant(x.clone()), &poses, vec![true; n]);
            let idx = knn_select(&poses, &poses, &toks.valid, 3);
            let out = knarpe_block(ctx, &p, &toks, &toks, &idx);
            assert_eq!(out.features.tensor(), x);
        }
    }

    #[test]
    fn invalid_queries_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let p = small_block(&mut store, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let poses = rand_poses(&mut rng, 4, 4.0);
        let x = rand_feats(&mut rng, 4, 8);
        let valid = vec![true, false, true, true];
        let toks = PosedTokens::with_constant_poses(tape.constant(x.clone()), &poses, valid.clone());
        let idx = knn_select(&poses, &poses, &valid, 2);
        let out = knarpe_block(ctx, &p, &toks, &toks, &idx).features.tensor();
        assert_eq!(&out.data()[8..16], &x.data()[8..16]);
        assert_ne!(&out.data()[0..8], &x.data()[0..8]);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let p = small_block(&mut store, &mut rng);
        let poses = rand_poses(&mut rng, 5, 3.0);
        let x = rand_feats(&mut rng, 5, 8);
        let w = rand_feats(&mut rng, 5, 8);
        let idx = knn_select(&poses, &poses, &[true; 5], 3);
        let report = grad_check_params(&mut store, None, |tape, store| {
            let ctx = Ctx::new(tape, store);
            let toks = PosedTokens::with_constant_poses(tape.constant(x.clone()), &poses, vec![true; 5]);
            knarpe_block(ctx, &p, &toks, &toks, &idx).features * tape.constant(w.clone())
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn pose_gradients_flow_through_rpe() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let p = small_block(&mut store, &mut rng);
        let poses = rand_poses(&mut rng, 4, 3.0);
        let x = rand_feats(&mut rng, 4, 8);
        let idx = knn_select(&poses, &poses, &[true; 4], 4);
        // The checker's closure is generic over the tape lifetime.
        let store: &'static ParamStore = Box::leak(Box::new(store));
        let inputs = vec![
            Tensor::from_vec(poses.iter().map(|p| p.x).collect()),
            Tensor::from_vec(poses.iter().map(|p| p.y).collect()),
            Tensor::from_vec(poses.iter().map(|p| p.theta).collect()),
        ];
        let report = crate::numcore::grad_check_inputs(&inputs, |tape, v| {
            let ctx = Ctx::new(tape, store);
            let toks = PosedTokens::new(
                tape.constant(x.clone()),
                PoseValues {
                    x: v[0],
                    y: v[1],
                    theta: v[2],
                },
                vec![true; 4],
            );
            knarpe_block(ctx, &p, &toks, &toks, &idx).features.square()
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn empty_sources_give_zero_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = small_block(&mut store, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let poses = rand_poses(&mut rng, 2, 1.0);
        let q = PosedTokens::with_constant_poses(tape.constant(rand_feats(&mut rng, 2, 8)), &poses, vec![true; 2]);
        let s = PosedTokens::with_constant_poses(tape.zeros(&[0, 8]), &[], vec![]);
        let idx = knn_select(&poses, &[], &[], 3);
        let out = knarpe_attention(ctx, &p, &q, &s, &idx).output;
        assert!(out.data().iter().all(|v| *v == 0.0));
    }
    #[test]
    fn block_is_invariant_to_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let p = small_block(&mut store, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let poses = rand_poses(&mut rng, 7, 10.0);
        let x = tape.constant(rand_feats(&mut rng, 7, 8));
        let g = Pose2D::new(123.0, -45.0, 2.1);
        let moved: Vec<Pose2D> = poses.iter().map(|q| g.compose(q)).collect();
        let run = |ps: &[Pose2D]| {
            let toks = PosedTokens::with_constant_poses(x, ps, vec![true; 7]);
            let idx = knn_select(ps, ps, &toks.valid, 4);
            knarpe_block(ctx, &p, &toks, &toks, &idx).features.tensor()
        };
        assert!(run(&poses).max_abs_diff(&run(&moved)) < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn knn_agrees_with_full_sort(
            pts in proptest::collection::vec((-5i32..5, -5i32..5, proptest::bool::weighted(0.8)), 1..30),
            k in 1usize..8,
        ) {
            // Integer grid coordinates force plenty of distance ties.
            let src: Vec<Pose2D> = pts.iter().map(|&(x, y, _)| Pose2D::new(x as f64, y as f64, 0.0)).collect();
            let valid: Vec<bool> = pts.iter().map(|p| p.2).collect();
            let idx = knn_select(&src, &src, &valid, k);
            for (i, q) in src.iter().enumerate() {
                let got: Vec<usize> = idx.row(i).collect();
                proptest::prop_assert_eq!(got, sort_oracle(q, &src, &valid, k));
            }
        }
    }
}
