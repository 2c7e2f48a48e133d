//! The encoder against a direct loop implementation, plus set-encoder
//! invariances.

mod common;

use common::*;
use mcrec_core::data::TowerInput;
use mcrec_core::encoder::{attention, encode_tower, Tower};
use mcrec_core::numerics::{AttentionLayout, Binder, Graph, ParamSet, Tensor, LAYER_NORM_EPS};
use mcrec_core::{rng, EncoderConfig};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head attention over one unpadded sequence.
fn naive_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let (n, c) = (q.len(), q[0].len());
    let dh = c / heads;
    let mut out = vec![vec![0.0; c]; n];
    for a in 0..heads {
        let cols = a * dh..(a + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for t in cols.clone() {
                out[i][t] = (0..n).map(|j| p[j] * v[j][t]).sum();
            }
        }
    }
    out
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let c = row.len() as f64;
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// CLS output of one tower for the token ids `[CLS, codes…]`.
fn naive_tower(params: &ParamSet, enc: &EncoderConfig, tower: Tower, tokens: &[usize]) -> Vec<f64> {
    let table = params.get(tower.table()).unwrap();
    let mut x: Mat = tokens.iter().map(|&t| table.row(t).to_vec()).collect();
    for i in 0..enc.layers {
        let prefix = tower.layer_prefix(enc, i);
        let p = |n: &str| params.get(&format!("{prefix}.{n}")).unwrap();
        let q = mm(&x, &mat(p("W_Q")));
        let k = mm(&x, &mat(p("W_K")));
        let v = mm(&x, &mat(p("W_V")));
        let att = mm(&naive_attention(&q, &k, &v, enc.heads), &mat(p("W_O")));
        let m = layer_norm(&add(&x, &att), p("ln1.gain").data(), p("ln1.bias").data());
        let mut h = mm(&m, &mat(p("W_1")));
        for row in &mut h {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + p("b_1").data()[j]).max(0.0);
            }
        }
        let mut f = mm(&h, &mat(p("W_2")));
        for row in &mut f {
            for (j, v) in row.iter_mut().enumerate() {
                *v += p("b_2").data()[j];
            }
        }
        x = layer_norm(&add(&m, &f), p("ln2.gain").data(), p("ln2.bias").data());
    }
    x[0].clone()
}

/// Padded tower input from raw code sequences, in the given order.
fn tower_input(seqs: &[Vec<usize>], cls: usize) -> TowerInput {
    let len = 1 + seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for s in seqs {
        ids.push(cls);
        mask.push(true);
        ids.extend(s);
        mask.extend(std::iter::repeat_n(true, s.len()));
        ids.extend(std::iter::repeat_n(cls, len - 1 - s.len()));
        mask.extend(std::iter::repeat_n(false, len - 1 - s.len()));
    }
    TowerInput {
        ids,
        mask,
        batch: seqs.len(),
        len,
    }
}

fn run_tower(params: &ParamSet, enc: &EncoderConfig, tower: Tower, input: &TowerInput) -> Mat {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let r = encode_tower(&mut g, &mut b, enc, tower, input, 0).unwrap();
    mat(g.value(r))
}

#[test]
fn two_layer_encoder_matches_loop_oracle() {
    let enc = small_encoder(false);
    let params = backbone(&enc, 17);
    let seqs = [vec![3, 0, 6], vec![5], vec![1, 2, 4, 6, 0]];
    for tower in [Tower::Diagnosis, Tower::Procedure] {
        let cls = match tower {
            Tower::Diagnosis => sizes().diagnoses,
            Tower::Procedure => sizes().procedures,
        };
        let seqs: Vec<Vec<usize>> = seqs.iter().map(|s| s.iter().map(|&c| c % cls).collect()).collect();
        let got = run_tower(&params, &enc, tower, &tower_input(&seqs, cls));
        for (b, s) in seqs.iter().enumerate() {
            let tokens: Vec<usize> = std::iter::once(cls).chain(s.iter().copied()).collect();
            let want = naive_tower(&params, &enc, tower, &tokens);
            for (x, y) in got[b].iter().zip(&want) {
                assert!((x - y).abs() < 1e-10, "{tower:?} row {b}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn fused_attention_matches_loop_oracle() {
    let mut r = rng::stream(9, &["attn"]);
    let (batch, len, heads, c) = (3, 4, 2, 6);
    let q = Tensor::uniform(&[batch * len, c], 1.0, &mut r);
    let k = Tensor::uniform(&[batch * len, c], 1.0, &mut r);
    let v = Tensor::uniform(&[batch * len, c], 1.0, &mut r);
    let valid = [4, 2, 1];
    let mask: Vec<bool> = valid.iter().flat_map(|&n| (0..len).map(move |j| j < n)).collect();
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap());
    let out = g.attention(qv, kv, vv, &mask, AttentionLayout { batch, len, heads }).unwrap();
    let out = mat(g.value(out));
    for (b, &n) in valid.iter().enumerate() {
        let rows = |t: &Tensor| -> Mat { (b * len..b * len + n).map(|i| t.row(i).to_vec()).collect() };
        let want = naive_attention(&rows(&q), &rows(&k), &rows(&v), heads);
        for i in 0..n {
            for t in 0..c {
                assert!((out[b * len + i][t] - want[i][t]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn composed_attention_ignores_masked_keys() {
    let mut r = rng::stream(9, &["single"]);
    let q = Tensor::uniform(&[3, 4], 1.0, &mut r);
    let k = Tensor::uniform(&[5, 4], 1.0, &mut r);
    let v = Tensor::uniform(&[5, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap());
    let out = attention(&mut g, qv, kv, vv, &[true, true, false, true, false]).unwrap();
    let keep = [0, 1, 3];
    for i in 0..3 {
        let s: Vec<f64> = keep
            .iter()
            .map(|&j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / 2.0)
            .collect();
        let p = softmax(&s);
        for t in 0..4 {
            let want: f64 = keep.iter().zip(&p).map(|(&j, w)| w * v.row(j)[t]).sum();
            assert!((g.value(out).row(i)[t] - want).abs() < 1e-12);
        }
    }
}

fn code_set(n: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cls_output_ignores_code_order(codes in code_set(7), seed in 0u64..1000, perm_seed in any::<u64>()) {
        let enc = small_encoder(true);
        let params = backbone(&enc, seed);
        let mut shuffled = codes.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng::stream(perm_seed, &["perm"]));
        let cls = sizes().diagnoses;
        let a = run_tower(&params, &enc, Tower::Diagnosis, &tower_input(&[codes], cls));
        let b = run_tower(&params, &enc, Tower::Diagnosis, &tower_input(&[shuffled], cls));
        for (x, y) in a[0].iter().zip(&b[0]) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_independent_of_padding_and_batch(
        target in code_set(7),
        others in proptest::collection::vec(code_set(7), 1..4),
        seed in 0u64..1000,
    ) {
        let enc = small_encoder(true);
        let params = backbone(&enc, seed);
        let cls = sizes().diagnoses;
        let alone = run_tower(&params, &enc, Tower::Diagnosis, &tower_input(std::slice::from_ref(&target), cls));
        let mut batch = others.clone();
        batch.insert(others.len() / 2, target);
        let within = run_tower(&params, &enc, Tower::Diagnosis, &tower_input(&batch, cls));
        prop_assert_eq!(&alone[0], &within[others.len() / 2]);
    }
}

#[test]
fn separate_towers_do_not_share_weights() {
    let enc = small_encoder(false);
    let mut params = backbone(&enc, 3);
    let input_d = tower_input(&[vec![0, 1]], sizes().diagnoses);
    let input_p = tower_input(&[vec![2, 3]], sizes().procedures);
    let before_d = run_tower(&params, &enc, Tower::Diagnosis, &input_d);
    let before_p = run_tower(&params, &enc, Tower::Procedure, &input_p);
    for v in params.get_mut("encoder_p.layer0.W_V").unwrap().data_mut() {
        *v += 0.5;
    }
    assert_eq!(run_tower(&params, &enc, Tower::Diagnosis, &input_d), before_d);
    assert_ne!(run_tower(&params, &enc, Tower::Procedure, &input_p), before_p);
}
