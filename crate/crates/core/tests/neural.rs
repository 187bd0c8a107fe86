//! Forward passes against plain-loop reimplementations, plus gradient checks.

use enrichrec::nn::{finite_difference_check, softmax_rows, AttentionMask, FeedForward, LayerNorm, MultiHeadAttention, Parameterized, Tensor};
use enrichrec::recommender::{make_training_step, TrainingSequence};
use enrichrec::seed::{rng_for, Rng};
use enrichrec::{Enricher64, EnricherConfig, ItemIndex, MaskedExample, RecConfig, Recommender64, MASK, PAD};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

type M = Vec<Vec<f64>>;

fn to_m(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Per-head attention written out element by element.
fn attention_oracle(x: &M, wq: &M, wk: &M, wv: &M, wo: &M, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> M {
    let (n, d) = (x.len(), x[0].len());
    let dh = d / heads;
    let (q, k, v) = (mm(x, wq), mm(x, wk), mm(x, wv));
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let mut scores = Vec::new();
            for j in 0..n {
                let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt();
                scores.push(if allowed(i, j) { s } else { f64::NEG_INFINITY });
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                concat[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    mm(&concat, wo)
}

fn layer_norm_oracle(x: &M) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn ffn_oracle(x: &M, ffn: &FeedForward<f64>) -> M {
    let (w1, b1, w2, b2) = (to_m(&ffn.w1.value), &ffn.b1.value, to_m(&ffn.w2.value), &ffn.b2.value);
    x.iter()
        .map(|row| {
            let hidden: Vec<f64> = (0..w1[0].len())
                .map(|j| (row.iter().enumerate().map(|(i, v)| v * w1[i][j]).sum::<f64>() + b1.get(0, j)).max(0.0))
                .collect();
            (0..w2[0].len())
                .map(|j| hidden.iter().enumerate().map(|(i, v)| v * w2[i][j]).sum::<f64>() + b2.get(0, j))
                .collect()
        })
        .collect()
}

fn assert_close(a: &M, b: &M, tol: f64) {
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }
}

#[test]
fn multi_head_attention_matches_per_head_oracle() {
    let mut rng = rng_for(11, "mha", 0);
    for heads in [1, 2, 4] {
        let mha = MultiHeadAttention::<f64>::new("a", 8, heads, &mut rng).unwrap();
        let x = random_tensor(5, 8, &mut rng);
        let (y, _) = mha.forward(&x, &AttentionMask::causal(5)).unwrap();
        let oracle = attention_oracle(
            &to_m(&x),
            &to_m(&mha.wq.value),
            &to_m(&mha.wk.value),
            &to_m(&mha.wv.value),
            &to_m(&mha.wo.value),
            heads,
            |i, j| j <= i,
        );
        assert_close(&to_m(&y), &oracle, 1e-12);
    }
}

#[test]
fn feed_forward_matches_scalar_loops() {
    let mut rng = rng_for(12, "ffn", 0);
    let mut ffn = FeedForward::<f64>::new("f", 6, 10, &mut rng);
    for v in ffn.b1.value.data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    let x = random_tensor(4, 6, &mut rng);
    let (y, _) = ffn.forward(&x).unwrap();
    assert_close(&to_m(&y), &ffn_oracle(&to_m(&x), &ffn), 1e-12);
}

#[test]
fn layer_norm_output_moments() {
    let mut rng = rng_for(13, "ln", 0);
    let ln = LayerNorm::<f64>::new("n", 16);
    let x = random_tensor(7, 16, &mut rng);
    let (y, _) = ln.forward(&x);
    for r in 0..7 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }
}

#[test]
fn recommender_forward_matches_single_block_oracle() {
    let cfg = RecConfig { blocks: 1, hidden_dim: 6, heads: 1, max_seq_len: 5, dropout: 0.0, ..Default::default() };
    let model = Recommender64::new(9, cfg).unwrap();
    let items: Vec<ItemIndex> = vec![4, 2, 7];
    let out = model.forward(&items).unwrap();

    let e = to_m(&model.item_embedding.value);
    let p = to_m(&model.position_embedding.value);
    let x: M = items.iter().enumerate().map(|(t, &i)| e[i as usize].iter().zip(&p[2 + t]).map(|(a, b)| a + b).collect()).collect();
    let b = &model.blocks[0];
    let a = attention_oracle(
        &x,
        &to_m(&b.attn.wq.value),
        &to_m(&b.attn.wk.value),
        &to_m(&b.attn.wv.value),
        &to_m(&b.attn.wo.value),
        1,
        |i, j| j <= i,
    );
    let h = layer_norm_oracle(&add(&x, &a));
    let f = layer_norm_oracle(&add(&h, &ffn_oracle(&h, &b.ffn)));

    assert!(out.row(0).iter().chain(out.row(1)).all(|&v| v == 0.0));
    let got: M = (2..5).map(|r| out.row(r).to_vec()).collect();
    assert_close(&got, &f, 1e-10);
}

#[test]
fn zeroed_blocks_reduce_to_normalized_embeddings() {
    let cfg = RecConfig { blocks: 2, hidden_dim: 4, heads: 1, max_seq_len: 3, dropout: 0.0, ..Default::default() };
    let mut model = Recommender64::new(6, cfg).unwrap();
    for blk in &mut model.blocks {
        for w in [&mut blk.attn.wq, &mut blk.attn.wk, &mut blk.attn.wv, &mut blk.attn.wo, &mut blk.ffn.w1, &mut blk.ffn.w2] {
            w.value.fill_zero();
        }
    }
    let emb = to_m(&model.embed_sequence(&[3, 5]).unwrap());
    // Two norms per block, two blocks.
    let mut expected = emb[1..].to_vec();
    for _ in 0..4 {
        expected = layer_norm_oracle(&expected);
    }
    let out = to_m(&model.forward(&[3, 5]).unwrap());
    assert_close(&out[1..].to_vec(), &expected, 1e-9);
}

#[test]
fn recommender_gradients_match_finite_differences() {
    let cfg = RecConfig { blocks: 1, hidden_dim: 8, heads: 1, max_seq_len: 4, dropout: 0.0, ..Default::default() };
    let mut model = Recommender64::new(10, cfg).unwrap();
    let mut rng = Rng::seed_from_u64(5);
    let steps: Vec<_> = [vec![2, 5, 3, 8, 4], vec![6, 9, 7], vec![3, 2]]
        .into_iter()
        .map(|items: Vec<ItemIndex>| {
            let mut seen = items.clone();
            seen.sort_unstable();
            make_training_step(&TrainingSequence { items, seen }, 10, 4, &mut rng).unwrap()
        })
        .collect();
    model.zero_grad();
    model.accumulate_gradients(&steps, None).unwrap();
    let report = finite_difference_check(&mut model, |m| m.training_loss(&steps).unwrap(), 1e-5, None, 1);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    assert_eq!(report.groups.len(), model.params().len());
}

#[test]
fn enricher_gradients_match_finite_differences() {
    let cfg = EnricherConfig { layers: 1, model_dim: 8, heads: 2, ffn_dim: 16, max_seq_len: 6, dropout: 0.0, ..Default::default() };
    let mut model = Enricher64::new(10, cfg).unwrap();
    let ex = MaskedExample { input: vec![3, MASK, 7, 2, MASK], target_positions: vec![1, 4], target_items: vec![5, 9] };
    model.zero_grad();
    model.accumulate_gradients(&ex, 1.0, None).unwrap();
    let report = finite_difference_check(&mut model, |m| m.masked_loss(&ex).unwrap(), 1e-5, None, 2);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn enricher_ignores_pad_keys() {
    let cfg = EnricherConfig { layers: 2, model_dim: 8, heads: 2, ffn_dim: 16, max_seq_len: 6, dropout: 0.0, ..Default::default() };
    let model = Enricher64::new(10, cfg).unwrap();
    let a = model.forward(&[3, MASK, 7, PAD]).unwrap().logits;
    let b = model.forward(&[3, MASK, 7, PAD, PAD]).unwrap().logits;
    for r in 0..3 {
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, seed in any::<u64>(), scale in 0.1f64..500.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let x = random_tensor(rows, cols, &mut rng).map(|v| v * scale);
        let s = softmax_rows(&x).unwrap();
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn left_padding_is_invisible(items in proptest::collection::vec(2u32..12, 1..6), pad in 0usize..4) {
        let cfg = RecConfig { blocks: 2, hidden_dim: 8, heads: 2, max_seq_len: 10, dropout: 0.0, ..Default::default() };
        let model = Recommender64::new(12, cfg).unwrap();
        let mut padded = vec![PAD; pad];
        padded.extend_from_slice(&items);
        prop_assert_eq!(model.last_hidden(&items).unwrap(), model.last_hidden(&padded).unwrap());
    }

    #[test]
    fn future_items_never_leak(items in proptest::collection::vec(2u32..12, 2..8), t in 0usize..7, swap in 2u32..12) {
        let t = t % (items.len() - 1);
        let cfg = RecConfig { blocks: 2, hidden_dim: 8, heads: 2, max_seq_len: 8, dropout: 0.0, ..Default::default() };
        let model = Recommender64::new(12, cfg).unwrap();
        let base = model.forward(&items).unwrap();
        let mut changed = items.clone();
        let last = changed.len() - 1;
        changed[last] = swap;
        let other = model.forward(&changed).unwrap();
        let row = 8 - items.len() + t;
        prop_assert_eq!(base.row(row), other.row(row));
    }
}
