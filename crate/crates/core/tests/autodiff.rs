use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfkd_core::autodiff::{softmax_row, Span, Tape, TensorError, Var};
use selfkd_core::gradcheck::{check_gradients, DEFAULT_EPS};
use selfkd_core::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces any output to a scalar with fixed, non-uniform weights.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, TensorError> {
    let w = tape.constant(random(tape.value(x).shape(), seed ^ 0xA5));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn gradcheck<F>(params: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    check_gradients(f, params, DEFAULT_EPS, 1).unwrap().max_rel_error
}

/// Causal attention composed from elementary tape ops.
fn reference_attention(tape: &mut Tape, qkv: Var, spans: &[Span], n_heads: usize) -> Result<Var, TensorError> {
    let d = tape.value(qkv).cols() / 3;
    let dh = d / n_heads;
    let mut blocks = Vec::new();
    for s in spans {
        let rows: Vec<usize> = (s.start..s.start + s.len).collect();
        let x = tape.embedding(qkv, &rows)?;
        let mask: Vec<bool> = (0..s.len * s.len).map(|i| i % s.len > i / s.len).collect();
        let mut heads = Vec::new();
        for h in 0..n_heads {
            let q = tape.slice_cols(x, h * dh, dh)?;
            let k = tape.slice_cols(x, d + h * dh, dh)?;
            let v = tape.slice_cols(x, 2 * d + h * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = tape.masked_fill(scores, &mask, -1e30)?;
            let p = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(p, v)?);
        }
        blocks.push(tape.concat(&heads, 1)?);
    }
    tape.concat(&blocks, 0)
}

fn tile(lens: &[usize]) -> Vec<Span> {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let s = Span { start, len };
            start += len;
            s
        })
        .collect()
}

#[test]
fn fused_attention_matches_reference_forward_and_backward() {
    let spans = tile(&[5, 1, 7, 3]);
    let n: usize = spans.iter().map(|s| s.len).sum();
    let qkv = random(&[n, 3 * 12], 11);
    let run = |fused: bool| {
        let mut tape = Tape::new();
        let x = tape.param(qkv.clone());
        let out = if fused {
            tape.causal_attention(x, &spans, 3).unwrap()
        } else {
            reference_attention(&mut tape, x, &spans, 3).unwrap()
        };
        let value = tape.value(out).clone();
        let loss = weighted_sum(&mut tape, out, 4).unwrap();
        tape.backward(loss).unwrap();
        (value, tape.grad(x).unwrap().clone())
    };
    let (fv, fg) = run(true);
    let (rv, rg) = run(false);
    assert!(fv.max_abs_diff(&rv) < 1e-12, "forward {}", fv.max_abs_diff(&rv));
    assert!(fg.max_abs_diff(&rg) < 1e-12, "backward {}", fg.max_abs_diff(&rg));
}

#[test]
fn fused_attention_passes_gradcheck() {
    let spans = tile(&[4, 6]);
    let err = gradcheck(&[random(&[10, 24], 2)], |t, v| {
        let o = t.causal_attention(v[0], &spans, 2)?;
        weighted_sum(t, o, 9)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementary_ops_pass_gradcheck() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 5], 2);
    let c = random(&[3, 4], 3);
    let bias = random(&[4], 4);
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", gradcheck(&[a.clone(), b.clone()], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, 0)
        })),
        ("add/sub/mul", gradcheck(&[a.clone(), c.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let o = t.mul(s, d)?;
            weighted_sum(t, o, 1)
        })),
        ("add_bias", gradcheck(&[a.clone(), bias.clone()], |t, v| {
            let o = t.add_bias(v[0], v[1])?;
            weighted_sum(t, o, 2)
        })),
        ("layer_norm", gradcheck(&[a.clone(), bias.clone(), random(&[4], 5)], |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, o, 3)
        })),
        ("gelu", gradcheck(&[a.clone()], |t, v| {
            let o = t.gelu(v[0]);
            weighted_sum(t, o, 4)
        })),
        ("tanh", gradcheck(&[a.clone()], |t, v| {
            let o = t.tanh(v[0]);
            weighted_sum(t, o, 5)
        })),
        ("softmax", gradcheck(&[a.clone()], |t, v| {
            let o = t.softmax(v[0], 1)?;
            weighted_sum(t, o, 6)
        })),
        ("log_softmax axis 0", gradcheck(&[a.clone()], |t, v| {
            let o = t.log_softmax(v[0], 0)?;
            weighted_sum(t, o, 7)
        })),
        ("concat/slice", gradcheck(&[a.clone(), c.clone()], |t, v| {
            let j = t.concat(&[v[0], v[1]], 1)?;
            let o = t.slice_cols(j, 2, 5)?;
            weighted_sum(t, o, 8)
        })),
        ("embedding", gradcheck(&[random(&[6, 3], 6)], |t, v| {
            let o = t.embedding(v[0], &[4, 0, 4, 2])?;
            weighted_sum(t, o, 9)
        })),
        ("masked_mean_rows", gradcheck(&[a.clone()], |t, v| {
            let o = t.masked_mean_rows(v[0], &[true, false, true])?;
            weighted_sum(t, o, 10)
        })),
        ("transpose/reshape", gradcheck(&[a.clone()], |t, v| {
            let tr = t.transpose(v[0])?;
            let o = t.reshape(tr, &[2, 6])?;
            weighted_sum(t, o, 11)
        })),
        ("cross_entropy", gradcheck(&[random(&[3, 5], 7)], |t, v| {
            t.cross_entropy(v[0], &[1, 4, 0], &[true, true, false])
        })),
        ("kl_divergence", gradcheck(&[random(&[3, 5], 9)], |t, v| {
            // The teacher side is a stop-gradient input.
            let p = t.constant(random(&[3, 5], 8));
            t.kl_divergence(p, v[0], &[true, false, true], 2.0)
        })),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: {err}");
    }
}

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-8.0f64..8.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax_row(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn kl_is_non_negative(p in logits(4, 6), q in logits(4, 6), tau in 0.5f64..4.0) {
        let mut tape = Tape::new();
        let (pv, qv) = (tape.constant(p), tape.param(q));
        let kl = tape.kl_divergence(pv, qv, &[true; 4], tau).unwrap();
        prop_assert!(tape.value(kl).item() >= -1e-12);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero(z in logits(3, 7), t in prop::collection::vec(0usize..7, 3)) {
        let mut tape = Tape::new();
        let x = tape.param(z);
        let l = tape.cross_entropy(x, &t, &[true; 3]).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        for r in 0..3 {
            prop_assert!(g.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions(
        lens in prop::collection::vec(1usize..6, 1..4),
        seed in any::<u64>(),
    ) {
        let spans = tile(&lens);
        let n: usize = lens.iter().sum();
        let mut tape = Tape::new();
        let x = tape.constant(random(&[n, 12], seed));
        let out = tape.causal_attention(x, &spans, 2).unwrap();
        let w = tape.attention_weights(out).unwrap();
        for (si, s) in spans.iter().enumerate() {
            for h in 0..2 {
                let b = w.block(si, h);
                for i in 0..s.len {
                    let row = &b[i * s.len..(i + 1) * s.len];
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn packing_does_not_mix_sequences(a in 1usize..6, b in 1usize..6, seed in any::<u64>()) {
        let x = random(&[a + b, 12], seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let packed = tape.causal_attention(v, &tile(&[a, b]), 2).unwrap();
        let first = tape.embedding(v, &(0..a).collect::<Vec<_>>()).unwrap();
        let alone = tape.causal_attention(first, &tile(&[a]), 2).unwrap();
        let head: Vec<f64> = tape.value(packed).data()[..a * 4].to_vec();
        let diff = head.iter().zip(tape.value(alone).data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12);
    }
}
