use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::dsp::SpectrogramBatch;
use crate::tensor::{Scalar, Tape, Tensor, Var};

fn random<T: Scalar>(shape: &[usize], seed: u64, scale: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::of(v * scale)
    })
}

/// Tensor filled from each element's multi-index.
fn indexed<T: Scalar>(shape: Vec<usize>, f: impl Fn(&[usize]) -> f64) -> Tensor<T> {
    let dims = shape.clone();
    Tensor::from_fn(shape, |flat| {
        let mut idx = vec![0; dims.len()];
        let mut rem = flat;
        for (slot, &d) in idx.iter_mut().zip(&dims).rev() {
            *slot = rem % d;
            rem /= d;
        }
        T::of(f(&idx))
    })
}

fn reduced_config() -> ModelConfig {
    ModelConfig {
        segments: 2,
        window: 2,
        embed_dim: 8,
        depths: vec![2, 2],
        heads: vec![2, 4],
        num_classes: 3,
        n_mels: 8,
        frames: 16,
        ..ModelConfig::default()
    }
}

fn batch_from(t: &Tensor<f32>) -> SpectrogramBatch {
    let s = t.shape();
    SpectrogramBatch {
        batch: s[0],
        channels: s[1],
        n_mels: s[2],
        frames: s[3],
        data: t.to_vec(),
    }
}

fn grid_leaf<T: Scalar>(tape: &Tape<T>, t: Tensor<T>) -> TokenGrid {
    let v = tape.leaf(t, false).unwrap();
    TokenGrid::new(tape, v).unwrap()
}

// ---- split_segments / patch_embed ----

#[test]
fn split_single_segment_is_a_reshape() {
    let tape = Tape::<f64>::new();
    let x = random::<f64>(&[2, 1, 4, 6], 1, 1.0);
    let v = tape.constant(x.clone()).unwrap();
    let s = split_segments(&tape, v, 1).unwrap();
    assert_eq!(tape.shape(s), vec![2, 4, 6, 1]);
    assert_eq!(tape.value(s).data(), x.data());
}

#[test]
fn split_segments_reconstructs_input() {
    let (f, d, n) = (32, 128, 4);
    let x = indexed::<f64>(vec![1, 1, f, d], |i| (i[2] * 1000 + i[3]) as f64);
    let tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let s = tape.value(split_segments(&tape, v, n).unwrap());
    assert_eq!(s.shape(), &[4, 32, 32, 1]);
    // concatenate segments along time
    for band in 0..f {
        for col in 0..d {
            let (seg, local) = (col / 32, col % 32);
            assert_eq!(s.get(&[seg, band, local, 0]), x.get(&[0, 0, band, col]));
        }
    }
    assert_eq!(s.get(&[2, 0, 6, 0]), 70.0);
    assert!(split_segments(&tape, v, 3).is_err());
}

#[test]
fn patch_embed_zero_and_one_hot() {
    let tape = Tape::<f64>::new();
    let w = tape.param(random(&[1, 6], 2, 1.0)).unwrap();
    let b = tape.param(random(&[6], 3, 1.0)).unwrap();
    let params = LinearParams { weight: w, bias: b };

    let zero = tape.constant(Tensor::zeros(vec![2, 4, 4, 1])).unwrap();
    let g = patch_embed(&tape, zero, &params).unwrap();
    assert_eq!(g.dims.shape(), [2, 4, 4, 6]);
    let out = tape.value(g.values);
    for row in out.data().chunks(6) {
        assert_eq!(row, tape.value(b).data());
    }

    let hot = indexed(vec![1, 4, 4, 1], |i| if i[1] == 1 && i[2] == 3 { 1.0 } else { 0.0 });
    let hot = tape.constant(hot).unwrap();
    let out = tape.value(patch_embed(&tape, hot, &params).unwrap().values);
    let (wv, bv) = (tape.value(w), tape.value(b));
    for ch in 0..6 {
        assert_eq!(out.get(&[0, 1, 3, ch]), wv.data()[ch] + bv.data()[ch]);
        assert_eq!(out.get(&[0, 0, 0, ch]), bv.data()[ch]);
    }
}

// ---- window partition / merge / shift ----

#[test]
fn partition_paper_stage_one() {
    let tape = Tape::<f32>::new();
    let g = grid_leaf(&tape, random(&[2, 32, 32, 96], 4, 1.0));
    let ws = window_partition(&tape, &g, 4).unwrap();
    assert_eq!(ws.num_windows(), 8);
    assert_eq!(ws.tokens_per_window(), 128);
    assert_eq!(tape.shape(ws.values), vec![16, 128, 96]);
    let back = window_merge(&tape, &ws).unwrap();
    assert_eq!(back.dims.shape(), [2, 32, 32, 96]);
    assert_eq!(tape.value(back.values).data(), tape.value(g.values).data());
}

#[test]
fn partition_token_order_is_frequency_major() {
    let tape = Tape::<f64>::new();
    let x = indexed(vec![1, 3, 8, 1], |i| (i[1] * 100 + i[2]) as f64);
    let g = grid_leaf(&tape, x);
    let ws = tape.value(window_partition(&tape, &g, 4).unwrap().values);
    for w in 0..2 {
        for tok in 0..12 {
            let (h, t) = (tok / 4, tok % 4);
            assert_eq!(ws.get(&[w, tok, 0]), (h * 100 + w * 4 + t) as f64);
        }
    }
}

#[test]
fn single_window_is_flattened_grid() {
    let tape = Tape::<f64>::new();
    let x = random::<f64>(&[2, 3, 4, 5], 5, 1.0);
    let g = grid_leaf(&tape, x.clone());
    let ws = window_partition(&tape, &g, 4).unwrap();
    assert_eq!(tape.shape(ws.values), vec![2, 12, 5]);
    assert_eq!(tape.value(ws.values).data(), x.data());
    assert!(window_partition(&tape, &g, 3).is_err());
}

#[test]
fn partition_round_trips_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100u64 {
        use rand::Rng;
        let window = rng.gen_range(1..=4);
        let dims = [rng.gen_range(1..=3), rng.gen_range(1..=5), window * rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let tape = Tape::<f32>::new();
        let x = random::<f32>(&dims, 100 + trial, 1.0);
        let g = grid_leaf(&tape, x.clone());
        let ws = window_partition(&tape, &g, window).unwrap();
        let back = window_merge(&tape, &ws).unwrap();
        assert_eq!(tape.value(back.values).data(), x.data());
        let offset = rng.gen_range(0..dims[2]) as isize;
        let shifted = cyclic_shift(&tape, &g, offset).unwrap();
        let restored = cyclic_shift(&tape, &shifted, -offset).unwrap();
        assert_eq!(tape.value(restored.values).data(), x.data());
    }
}

#[test]
fn window_merge_rejects_inconsistent_metadata() {
    let tape = Tape::<f64>::new();
    let g = grid_leaf(&tape, random(&[1, 2, 8, 3], 7, 1.0));
    let mut ws = window_partition(&tape, &g, 4).unwrap();
    ws.window = 2;
    assert!(window_merge(&tape, &ws).is_err());
}

#[test]
fn cyclic_shift_columns() {
    let tape = Tape::<f64>::new();
    let w = 8;
    let x = indexed(vec![1, 2, w, 1], |i| (i[1] * 10 + i[2]) as f64);
    let g = grid_leaf(&tape, x.clone());
    assert_eq!(cyclic_shift(&tape, &g, 0).unwrap().values, g.values);
    let s = tape.value(cyclic_shift(&tape, &g, 2).unwrap().values);
    for h in 0..2 {
        for j in 0..w {
            assert_eq!(s.get(&[0, h, (j + w - 2) % w, 0]), x.get(&[0, h, j, 0]));
        }
    }
    let a = cyclic_shift(&tape, &g, 3).unwrap();
    let b = cyclic_shift(&tape, &a, (w - 3) as isize).unwrap();
    assert_eq!(tape.value(b.values).data(), x.data());
}

// ---- mask ----

#[test]
fn shift_mask_hand_case() {
    let m = build_shift_mask::<f64>(1, 4, 4, 2);
    assert_eq!(m.shape(), &[1, 4, 4]);
    let inf = f64::NEG_INFINITY;
    #[rustfmt::skip]
    let expected = [
        0.0, 0.0, inf, inf,
        0.0, 0.0, inf, inf,
        inf, inf, 0.0, 0.0,
        inf, inf, 0.0, 0.0,
    ];
    assert_eq!(m.data(), &expected);
    assert!(build_shift_mask::<f64>(2, 8, 4, 0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shift_mask_only_last_window_is_mixed_and_symmetric() {
    let (h, w, t, off) = (2, 12, 4, 2);
    let m = build_shift_mask::<f32>(h, w, t, off);
    let n = h * t;
    for win in 0..w / t {
        let mixed = (0..n * n).any(|k| m.data()[win * n * n + k] != 0.0);
        assert_eq!(mixed, win == w / t - 1);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(m.get(&[win, i, j]), m.get(&[win, j, i]));
            }
        }
    }
    let tape = Tape::<f32>::new();
    let s = tape.constant(m).unwrap();
    let p = tape.value(tape.softmax(s, 2).unwrap());
    for row in p.data().chunks(n) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

// ---- window attention ----

struct AttnFixture<T: Scalar> {
    wqkv: Tensor<T>,
    bqkv: Tensor<T>,
    wproj: Tensor<T>,
    bproj: Tensor<T>,
}

impl<T: Scalar> AttnFixture<T> {
    fn new(c: usize, seed: u64) -> Self {
        Self {
            wqkv: random(&[c, 3 * c], seed, 0.4),
            bqkv: random(&[3 * c], seed + 1, 0.1),
            wproj: random(&[c, c], seed + 2, 0.4),
            bproj: random(&[c], seed + 3, 0.1),
        }
    }

    fn bind(&self, tape: &Tape<T>) -> AttentionParams {
        AttentionParams {
            qkv_weight: tape.param(self.wqkv.clone()).unwrap(),
            qkv_bias: tape.param(self.bqkv.clone()).unwrap(),
            proj_weight: tape.param(self.wproj.clone()).unwrap(),
            proj_bias: tape.param(self.bproj.clone()).unwrap(),
            rel_bias: None,
        }
    }
}

fn linear_ref(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

/// Plain dense multi-head attention among `tokens`, all in f64.
fn dense_attention<T: Scalar>(tokens: &[Vec<f64>], p: &AttnFixture<T>, heads: usize) -> Vec<Vec<f64>> {
    let f = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let (wqkv, bqkv, wproj, bproj) = (f(&p.wqkv), f(&p.bqkv), f(&p.wproj), f(&p.bproj));
    let c = bproj.len();
    let hd = c / heads;
    let qkv: Vec<Vec<f64>> = tokens.iter().map(|x| linear_ref(x, &wqkv, &bqkv)).collect();
    tokens
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let mut concat = vec![0.0; c];
            for h in 0..heads {
                let q = &qkv[i][h * hd..(h + 1) * hd];
                let scores: Vec<f64> = qkv
                    .iter()
                    .map(|r| {
                        let k = &r[c + h * hd..c + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, r) in qkv.iter().enumerate() {
                    for d in 0..hd {
                        concat[h * hd + d] += e[j] / z * r[2 * c + h * hd + d];
                    }
                }
            }
            linear_ref(&concat, &wproj, &bproj)
        })
        .collect()
}

fn grid_token(t: &Tensor<f32>, b: usize, h: usize, w: usize) -> Vec<f64> {
    let c = t.shape()[3];
    (0..c).map(|ch| t.get(&[b, h, w, ch]) as f64).collect()
}

#[test]
fn singleton_window_is_projected_value() {
    let c = 4;
    let p = AttnFixture::<f64>::new(c, 10);
    let tape = Tape::new();
    let g = grid_leaf(&tape, random(&[1, 1, 3, c], 11, 1.0));
    let ws = window_partition(&tape, &g, 1).unwrap();
    let out = tape.value(window_msa(&tape, &ws, &p.bind(&tape), None, 2).unwrap().values);
    let x = tape.value(g.values);
    for w in 0..3 {
        let tok: Vec<f64> = (0..c).map(|ch| x.get(&[0, 0, w, ch])).collect();
        let v = linear_ref(&tok, p.wqkv.data(), p.bqkv.data());
        let expected = linear_ref(&v[2 * c..], p.wproj.data(), p.bproj.data());
        for ch in 0..c {
            assert!((out.get(&[w, 0, ch]) - expected[ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn unshifted_attention_isolates_windows() {
    let c = 8;
    let p = AttnFixture::<f32>::new(c, 12);
    let x = random::<f32>(&[2, 4, 12, c], 13, 1.0);
    let mut y = x.to_vec();
    // perturb every token of window 1 in sample 0
    for h in 0..4 {
        for w in 4..8 {
            for ch in 0..c {
                y[((h * 12) + w) * c + ch] += 3.0;
            }
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y).unwrap();
    let run = |input: Tensor<f32>| {
        let tape = Tape::new();
        let g = grid_leaf(&tape, input);
        let ws = window_partition(&tape, &g, 4).unwrap();
        let out = window_msa(&tape, &ws, &p.bind(&tape), None, 2).unwrap();
        tape.value(window_merge(&tape, &out).unwrap().values)
    };
    let (a, b) = (run(x), run(y));
    for s in 0..2 {
        for h in 0..4 {
            for w in 0..12 {
                let touched = s == 0 && (4..8).contains(&w);
                for ch in 0..c {
                    let same = a.get(&[s, h, w, ch]) == b.get(&[s, h, w, ch]);
                    assert_eq!(same, !touched, "token ({s},{h},{w},{ch})");
                }
            }
        }
    }
}

#[test]
fn unshifted_attention_matches_dense_oracle() {
    let (c, heads, t) = (8, 2, 4);
    let p = AttnFixture::<f32>::new(c, 14);
    let x = random::<f32>(&[2, 3, 8, c], 15, 1.0);
    let tape = Tape::new();
    let g = grid_leaf(&tape, x.clone());
    let ws = window_partition(&tape, &g, t).unwrap();
    let out = window_msa(&tape, &ws, &p.bind(&tape), None, heads).unwrap();
    let out = tape.value(window_merge(&tape, &out).unwrap().values);
    let mut worst: f64 = 0.0;
    for b in 0..2 {
        for win in 0..2 {
            let cells: Vec<(usize, usize)> = (0..3).flat_map(|h| (0..t).map(move |j| (h, win * t + j))).collect();
            let tokens: Vec<Vec<f64>> = cells.iter().map(|&(h, w)| grid_token(&x, b, h, w)).collect();
            let expected = dense_attention(&tokens, &p, heads);
            for (&(h, w), e) in cells.iter().zip(&expected) {
                for ch in 0..c {
                    worst = worst.max((out.get(&[b, h, w, ch]) as f64 - e[ch]).abs());
                }
            }
        }
    }
    assert!(worst < 1e-5, "max abs diff {worst}");
}

/// Masked attention on the shifted grid, brought back to original
/// coordinates, must equal dense attention inside each pre-shift region of
/// each shifted window.
fn shifted_attention_error(h: usize, w: usize, t: usize, offset: usize, seed: u64) -> f64 {
    let (c, heads) = (8, 2);
    let p = AttnFixture::<f32>::new(c, seed);
    let x = random::<f32>(&[2, h, w, c], seed + 10, 1.0);
    let tape = Tape::new();
    let g = grid_leaf(&tape, x.clone());
    let shifted = cyclic_shift(&tape, &g, offset as isize).unwrap();
    let ws = window_partition(&tape, &shifted, t).unwrap();
    let mask = build_shift_mask::<f32>(h, w, t, offset);
    let out = window_msa(&tape, &ws, &p.bind(&tape), Some(&mask), heads).unwrap();
    let merged = window_merge(&tape, &out).unwrap();
    let out = tape.value(cyclic_shift(&tape, &merged, -(offset as isize)).unwrap().values);

    // group original columns by (shifted window, pre-shift region)
    let group = |col: usize| {
        let s = (col + w - offset) % w;
        let wrapped = col < offset;
        let in_last = s >= w - t;
        (s / t, in_last && !wrapped, in_last && wrapped)
    };
    let mut worst: f64 = 0.0;
    for b in 0..2 {
        let mut keys: Vec<_> = (0..w).map(group).collect();
        keys.sort();
        keys.dedup();
        for key in keys {
            let cells: Vec<(usize, usize)> = (0..h)
                .flat_map(|r| (0..w).filter(|&col| group(col) == key).map(move |col| (r, col)))
                .collect();
            let tokens: Vec<Vec<f64>> = cells.iter().map(|&(r, col)| grid_token(&x, b, r, col)).collect();
            let expected = dense_attention(&tokens, &p, heads);
            for (&(r, col), e) in cells.iter().zip(&expected) {
                for ch in 0..c {
                    worst = worst.max((out.get(&[b, r, col, ch]) as f64 - e[ch]).abs());
                }
            }
        }
    }
    worst
}

#[test]
fn shifted_attention_matches_regrouped_oracle() {
    for (h, w, t, off, seed) in [(2, 8, 4, 2, 20), (3, 12, 4, 2, 30), (1, 4, 4, 2, 40), (2, 8, 2, 1, 50)] {
        let err = shifted_attention_error(h, w, t, off, seed);
        assert!(err < 1e-5, "grid {h}x{w} t={t} offset={off}: {err}");
    }
}

#[test]
fn attention_is_permutation_equivariant_within_windows() {
    let (c, n) = (6, 8);
    let p = AttnFixture::<f64>::new(c, 60);
    let x = random::<f64>(&[1, 2, 4, c], 61, 1.0);
    let perm = [3, 0, 7, 5, 1, 6, 2, 4];
    let tape = Tape::new();
    let g = grid_leaf(&tape, x);
    let ws = window_partition(&tape, &g, 4).unwrap();
    let params = p.bind(&tape);
    let base = tape.value(window_msa(&tape, &ws, &params, None, 3).unwrap().values);
    let permuted = tape.gather(ws.values, 1, &perm).unwrap();
    let pws = WindowSet { values: permuted, ..ws };
    let out = tape.value(window_msa(&tape, &pws, &params, None, 3).unwrap().values);
    for (i, &src) in perm.iter().enumerate() {
        for ch in 0..c {
            assert!((out.get(&[0, i, ch]) - base.get(&[0, src, ch])).abs() < 1e-12);
        }
    }
    assert_eq!(n, perm.len());
}

#[test]
fn attention_rejects_bad_heads_and_mask() {
    let tape = Tape::<f64>::new();
    let p = AttnFixture::<f64>::new(6, 70).bind(&tape);
    let g = grid_leaf(&tape, random(&[1, 2, 4, 6], 71, 1.0));
    let ws = window_partition(&tape, &g, 2).unwrap();
    assert!(window_msa(&tape, &ws, &p, None, 4).is_err());
    let wrong = build_shift_mask::<f64>(2, 4, 4, 2);
    assert!(window_msa(&tape, &ws, &p, Some(&wrong), 2).is_err());
}

#[test]
fn relative_position_index_is_symmetric_around_center() {
    let (h, t) = (3, 4);
    let idx = relative_position_index(h, t);
    let n = h * t;
    let center = (h - 1) * (2 * t - 1) + (t - 1);
    for i in 0..n {
        assert_eq!(idx[i * n + i], center);
        for j in 0..n {
            assert_eq!(idx[i * n + j] + idx[j * n + i], 2 * center);
        }
    }
}

// ---- blocks and merging ----

struct BlockFixture {
    tensors: Vec<Tensor<f64>>,
}

impl BlockFixture {
    fn new(c: usize, seed: u64) -> Self {
        let shapes: [&[usize]; 12] = [
            &[c],
            &[c],
            &[c, 3 * c],
            &[3 * c],
            &[c, c],
            &[c],
            &[c],
            &[c],
            &[c, 4 * c],
            &[4 * c],
            &[4 * c, c],
            &[c],
        ];
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = random::<f64>(s, seed + i as u64, 0.3);
                if i == 0 || i == 6 {
                    t.map(|v| v + 1.0)
                } else {
                    t
                }
            })
            .collect();
        Self { tensors }
    }

    fn zero_residual_branches(mut self) -> Self {
        for i in [4, 5, 10, 11] {
            self.tensors[i] = Tensor::zeros(self.tensors[i].shape().to_vec());
        }
        self
    }

    fn bind(&self, tape: &Tape<f64>) -> BlockParams {
        let v: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        BlockParams {
            norm1: NormParams { weight: v[0], bias: v[1] },
            attn: AttentionParams {
                qkv_weight: v[2],
                qkv_bias: v[3],
                proj_weight: v[4],
                proj_bias: v[5],
                rel_bias: None,
            },
            norm2: NormParams { weight: v[6], bias: v[7] },
            fc1: LinearParams { weight: v[8], bias: v[9] },
            fc2: LinearParams { weight: v[10], bias: v[11] },
        }
    }
}

#[test]
fn block_preserves_shape() {
    let c = 8;
    let f = BlockFixture::new(c, 80);
    let tape = Tape::new();
    let g = grid_leaf(&tape, random(&[2, 4, 8, c], 81, 1.0));
    let p = f.bind(&tape);
    let local = swin_block(&tape, &g, &p, 4, 0, 2, None, 1e-5).unwrap();
    let mask = build_shift_mask(4, 8, 4, 2);
    let shifted = swin_block(&tape, &local, &p, 4, 2, 2, Some(&mask), 1e-5).unwrap();
    assert_eq!(tape.shape(shifted.values), vec![2, 4, 8, c]);
    // degenerate single-window shifted block
    let mask = build_shift_mask(4, 4, 4, 2);
    let g4 = grid_leaf(&tape, random(&[1, 4, 4, c], 82, 1.0));
    let out = swin_block(&tape, &g4, &p, 4, 2, 2, Some(&mask), 1e-5).unwrap();
    assert!(tape.value(out.values).all_finite());
}

#[test]
fn block_with_zeroed_branches_is_identity() {
    let c = 8;
    let f = BlockFixture::new(c, 90).zero_residual_branches();
    let x = random::<f64>(&[2, 4, 8, c], 91, 1.0);
    let tape = Tape::new();
    let g = grid_leaf(&tape, x.clone());
    let p = f.bind(&tape);
    let mask = build_shift_mask(4, 8, 4, 2);
    for (offset, mask) in [(0, None), (2, Some(&mask))] {
        let out = swin_block(&tape, &g, &p, 4, offset, 2, mask, 1e-5).unwrap();
        assert_eq!(tape.value(out.values).data(), x.data());
    }
}

#[test]
fn zero_offset_shifted_block_equals_local_block() {
    let c = 8;
    let f = BlockFixture::new(c, 100);
    let tape = Tape::new();
    let g = grid_leaf(&tape, random(&[2, 4, 8, c], 101, 1.0));
    let p = f.bind(&tape);
    let zero_mask = build_shift_mask(4, 8, 4, 0);
    let local = swin_block(&tape, &g, &p, 4, 0, 2, None, 1e-5).unwrap();
    let shifted = swin_block(&tape, &g, &p, 4, 0, 2, Some(&zero_mask), 1e-5).unwrap();
    assert_eq!(tape.value(local.values).data(), tape.value(shifted.values).data());
}

#[test]
fn gather_quads_index_oracle() {
    let (b, h, w, c) = (2, 4, 6, 3);
    let x = indexed::<f64>(vec![b, h, w, c], |i| (((i[0] * 10 + i[1]) * 10 + i[2]) * 10 + i[3]) as f64);
    let tape = Tape::new();
    let g = grid_leaf(&tape, x.clone());
    let q = gather_quads(&tape, &g).unwrap();
    assert_eq!(q.dims.shape(), [b, 2, 3, 4 * c]);
    let out = tape.value(q.values);
    for s in 0..b {
        for i in 0..2 {
            for j in 0..3 {
                for quad in 0..4 {
                    let (dh, dw) = (quad % 2, quad / 2);
                    for ch in 0..c {
                        assert_eq!(out.get(&[s, i, j, quad * c + ch]), x.get(&[s, 2 * i + dh, 2 * j + dw, ch]));
                    }
                }
            }
        }
    }
    let odd = grid_leaf(&tape, Tensor::zeros(vec![1, 3, 4, 2]));
    assert!(gather_quads(&tape, &odd).is_err());
}

#[test]
fn patch_merging_shapes_and_constant_grid() {
    let tape = Tape::<f32>::new();
    let c = 96;
    let merge = MergeParams {
        norm: NormParams {
            weight: tape.param(Tensor::ones(vec![4 * c])).unwrap(),
            bias: tape.param(Tensor::zeros(vec![4 * c])).unwrap(),
        },
        reduction: LinearParams {
            weight: tape.param(random(&[4 * c, 2 * c], 110, 0.02)).unwrap(),
            bias: tape.param(Tensor::zeros(vec![2 * c])).unwrap(),
        },
    };
    let g = grid_leaf(&tape, random(&[2, 32, 32, c], 111, 1.0));
    let out = patch_merging(&tape, &g, &merge, 1e-5).unwrap();
    assert_eq!(out.dims.shape(), [2, 16, 16, 2 * c]);
    assert_eq!(out.dims.tokens(), g.dims.tokens() / 4);

    let k = grid_leaf(&tape, Tensor::full(vec![1, 4, 4, 3], 2.5));
    let q = tape.value(gather_quads(&tape, &k).unwrap().values);
    assert!(q.data().iter().all(|&v| v == 2.5));
}

// ---- full model ----

#[test]
fn forward_shape_ladder_at_paper_config() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.stage(0).tokens(), 1024);
    assert_eq!(cfg.stage(0).num_windows(), 8);
    let model = SwinModel::<f32>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::new();
    let bound = model.params().bind(&tape, false).unwrap();
    let x = tape.constant(random(&[2, 1, 32, 128], 120, 1.0)).unwrap();
    let out = model.forward(&tape, &bound, x).unwrap();
    assert_eq!(tape.shape(out.logits), vec![2, 4]);
    assert_eq!(tape.shape(out.pooled), vec![2, 768]);
    let ladder: Vec<[usize; 4]> = out.stages.iter().map(|g| g.dims.shape()).collect();
    assert_eq!(
        ladder,
        vec![[8, 32, 32, 96], [8, 16, 16, 192], [8, 8, 8, 384], [8, 4, 4, 768]]
    );
    assert!(tape.value(out.logits).all_finite());
}

#[test]
fn forward_rejects_mismatched_input() {
    let model = SwinModel::<f64>::new(reduced_config(), 0).unwrap();
    let tape = Tape::new();
    let bound = model.params().bind(&tape, false).unwrap();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 8, 12])).unwrap();
    assert!(matches!(model.forward(&tape, &bound, x), Err(ModelError::Shape(_))));
}

#[test]
fn batch_permutation_permutes_logits() {
    let model = SwinModel::<f32>::new(reduced_config(), 3).unwrap();
    let x = random::<f32>(&[3, 1, 8, 16], 130, 1.0);
    let per = 8 * 16;
    let order = [2, 0, 1];
    let mut y = Vec::new();
    for &s in &order {
        y.extend_from_slice(&x.data()[s * per..(s + 1) * per]);
    }
    let y = Tensor::new(vec![3, 1, 8, 16], y).unwrap();
    let a = model.logits(&batch_from(&x)).unwrap();
    let b = model.logits(&batch_from(&y)).unwrap();
    for (i, &s) in order.iter().enumerate() {
        for k in 0..3 {
            assert!((b.get(&[i, k]) - a.get(&[s, k])).abs() <= 1e-6);
        }
    }
}

#[test]
fn single_stage_model_is_invariant_to_band_permutation() {
    let cfg = ModelConfig {
        depths: vec![2],
        heads: vec![2],
        ..reduced_config()
    };
    let model = SwinModel::<f64>::new(cfg, 8).unwrap();
    let x = random::<f32>(&[2, 1, 8, 16], 135, 1.0);
    let perm = [5, 2, 7, 0, 3, 6, 1, 4];
    let y = indexed::<f32>(vec![2, 1, 8, 16], |i| x.get(&[i[0], 0, perm[i[2]], i[3]]) as f64);
    let a = model.logits(&batch_from(&x)).unwrap();
    let b = model.logits(&batch_from(&y)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let norm = |c: usize| 2 * c;
    let mut total = linear(cfg.in_channels, cfg.embed_dim);
    for s in 0..cfg.num_stages() {
        let c = cfg.embed_dim << s;
        let hidden = cfg.mlp_ratio * c;
        let block = norm(c) + linear(c, 3 * c) + linear(c, c) + norm(c) + linear(c, hidden) + linear(hidden, c);
        total += cfg.depths[s] * block;
        if s + 1 < cfg.num_stages() {
            total += norm(4 * c) + linear(4 * c, 2 * c);
        }
    }
    let y = cfg.feature_dim();
    total + norm(y) + linear(y, cfg.num_classes)
}

#[test]
fn parameter_count_matches_analytic_and_golden() {
    let paper = ModelConfig::default();
    let model = SwinModel::<f32>::new(paper.clone(), 0).unwrap();
    assert_eq!(model.num_params(), analytic_param_count(&paper));
    assert_eq!(model.num_params(), 23_946_820);
    let reduced = reduced_config();
    let model = SwinModel::<f32>::new(reduced.clone(), 0).unwrap();
    assert_eq!(model.num_params(), analytic_param_count(&reduced));
}

#[test]
fn initialization_is_seeded_and_bounded() {
    let a = SwinModel::<f32>::new(reduced_config(), 9).unwrap();
    let b = SwinModel::<f32>::new(reduced_config(), 9).unwrap();
    let c = SwinModel::<f32>::new(reduced_config(), 10).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    for (name, t) in a.params().iter() {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else if name.contains("norm") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        } else {
            assert!(t.data().iter().all(|&v| v.abs() <= 0.04), "{name}");
        }
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = [
        ModelConfig {
            depths: vec![2, 3],
            heads: vec![1, 1],
            ..reduced_config()
        },
        ModelConfig {
            embed_dim: 9,
            ..reduced_config()
        },
        ModelConfig {
            frames: 18,
            ..reduced_config()
        },
        ModelConfig {
            window: 3,
            ..reduced_config()
        },
        ModelConfig {
            heads: vec![2],
            ..reduced_config()
        },
        ModelConfig {
            n_mels: 7,
            ..reduced_config()
        },
    ];
    for cfg in bad {
        assert!(matches!(SwinModel::<f32>::new(cfg.clone(), 0), Err(ModelError::Config(_))), "{cfg:?}");
    }
}

#[test]
fn gradients_match_finite_differences_at_reduced_config() {
    let cfg = reduced_config();
    let model = SwinModel::<f64>::new(cfg.clone(), 5).unwrap();
    // perturb away from the zero/one init so every path carries signal
    let mut params = ParamStore::new();
    for (i, (name, t)) in model.params().iter().enumerate() {
        let noise = random::<f64>(t.shape(), 1000 + i as u64, 0.3);
        params.insert(name, Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + noise.data()[i]));
    }
    let model = SwinModel::from_params(cfg, params.clone()).unwrap();
    let x = random::<f64>(&[2, 1, 8, 16], 140, 1.0);
    let cot = random::<f64>(&[2, 3], 141, 1.0);
    let loss_of = |p: &ParamStore<f64>, grads: bool| {
        let tape = Tape::new();
        let bound = p.bind(&tape, grads).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = model.forward(&tape, &bound, xv).unwrap();
        let w = tape.constant(cot.clone()).unwrap();
        let loss = tape.sum(tape.mul(out.logits, w).unwrap()).unwrap();
        let value = tape.value(loss).item();
        let g = grads.then(|| bound.gradients(&tape.backward(loss).unwrap()));
        (value, g)
    };
    let analytic = loss_of(&params, true).1.unwrap();
    assert_eq!(analytic.len(), params.len());
    let h = 1e-6;
    let mut checked = 0;
    // every fourth element keeps the unit test quick; acceptance checks all
    for (name, t) in params.iter() {
        let g = analytic.get(name).unwrap();
        for i in (0..t.numel()).step_by(4) {
            let eval = |delta: f64| {
                let mut data = t.to_vec();
                data[i] += delta;
                let mut p = params.clone();
                p.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap());
                loss_of(&p, false).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.data()[i];
            let abs = (numeric - a).abs();
            let rel = abs / numeric.abs().max(a.abs()).max(f64::MIN_POSITIVE);
            assert!(rel < 1e-4 || abs < 1e-7, "{name}[{i}]: analytic {a} numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn feature_maps_widths_and_recomputation() {
    let cfg = ModelConfig {
        embed_dim: 16,
        heads: vec![1, 2, 4, 8],
        ..ModelConfig::default()
    };
    let model = SwinModel::<f32>::new(cfg.clone(), 2).unwrap();
    let x = random::<f32>(&[1, 1, 32, 128], 150, 1.0);
    let maps = model.feature_maps(&batch_from(&x)).unwrap();
    let widths: Vec<usize> = maps.iter().map(|m| m.shape()[3]).collect();
    assert_eq!(widths, vec![32, 16, 8, 4]);

    let tape = Tape::new();
    let bound = model.params().bind(&tape, false).unwrap();
    let xv = tape.constant(x).unwrap();
    let out = model.forward(&tape, &bound, xv).unwrap();
    for (map, grid) in maps.iter().zip(&out.stages) {
        let GridDims { height, width, channels, .. } = grid.dims;
        assert_eq!(map.shape(), &[1, 4, height, width]);
        let acts = tape.value(grid.values);
        for seg in 0..4 {
            for r in 0..height {
                for col in 0..width {
                    let base = ((seg * height + r) * width + col) * channels;
                    let mean = acts.data()[base..base + channels].iter().map(|&v| v as f64).sum::<f64>() / channels as f64;
                    assert!((map.get(&[0, seg, r, col]) as f64 - mean).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn constant_input_with_identity_blocks_gives_flat_maps() {
    let cfg = reduced_config();
    let model = SwinModel::<f64>::new(cfg.clone(), 4).unwrap();
    let mut params = model.params().clone();
    let zeroed: Vec<String> = params
        .names()
        .filter(|n| n.contains(".attn.proj.") || n.contains(".mlp.fc2."))
        .map(String::from)
        .collect();
    for name in zeroed {
        let shape = params.get(&name).unwrap().shape().to_vec();
        params.insert(name, Tensor::zeros(shape));
    }
    let model = SwinModel::from_params(cfg, params).unwrap();
    let x = Tensor::<f32>::full(vec![1, 1, 8, 16], 0.7);
    for map in model.feature_maps(&batch_from(&x)).unwrap() {
        let first = map.data()[0];
        assert!(map.data().iter().all(|&v| (v - first).abs() < 1e-12));
    }
}

#[test]
fn relative_position_bias_variant_runs() {
    let cfg = ModelConfig {
        relative_position_bias: true,
        ..reduced_config()
    };
    let model = SwinModel::<f64>::new(cfg.clone(), 1).unwrap();
    assert!(model.params().get("stages.0.blocks.0.attn.rel_bias").is_some());
    let logits = model.logits(&batch_from(&random(&[2, 1, 8, 16], 160, 1.0))).unwrap();
    assert_eq!(logits.shape(), &[2, 3]);
}

#[test]
fn from_params_checks_layout() {
    let cfg = reduced_config();
    let model = SwinModel::<f32>::new(cfg.clone(), 0).unwrap();
    let mut params = model.params().clone();
    params.insert("head.bias", Tensor::zeros(vec![5]));
    assert!(matches!(SwinModel::from_params(cfg.clone(), params), Err(ModelError::Shape(_))));
    let mut params = ParamStore::<f32>::new();
    for (name, t) in model.params().iter().skip(1) {
        params.insert(name, t.clone());
    }
    params.insert("bogus", Tensor::zeros(vec![1]));
    assert!(matches!(SwinModel::from_params(cfg, params), Err(ModelError::MissingParam(_))));
}

// ---- checkpoint ----

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = reduced_config();
    let model = SwinModel::<f32>::new(cfg, 21).unwrap();
    let norm = crate::dsp::FeatureNorm::Global { mean: -3.25, std: 1.5 };
    let ckpt = Checkpoint::new(&model, 0xdead_beef, Some(norm));
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &ckpt).unwrap();
    let back = read_checkpoint::<f32, _>(bytes.as_slice()).unwrap();
    assert_eq!(back.meta, ckpt.meta);
    assert_eq!(back.params, ckpt.params);
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    assert_eq!(again, bytes);

    let (loaded, _) = back.into_model().unwrap();
    let x = batch_from(&random(&[2, 1, 8, 16], 170, 1.0));
    assert_eq!(model.logits(&x).unwrap().data(), loaded.logits(&x).unwrap().data());

    let wide = read_checkpoint::<f64, _>(bytes.as_slice()).unwrap();
    assert_eq!(wide.params.cast::<f32>(), ckpt.params);
}

#[test]
fn checkpoint_rejects_corruption() {
    let model = SwinModel::<f32>::new(reduced_config(), 22).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &Checkpoint::new(&model, 1, None)).unwrap();
    assert!(matches!(read_checkpoint::<f32, _>(&b"NOTACKPT...."[..]), Err(CheckpointError::BadMagic)));
    assert!(matches!(
        read_checkpoint::<f32, _>(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Corrupt(_))
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(read_checkpoint::<f32, _>(extra.as_slice()), Err(CheckpointError::Corrupt(_))));
    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(read_checkpoint::<f32, _>(version.as_slice()), Err(CheckpointError::Version(9))));
}
