//! Model-level properties: gradients, causality, cache equivalence, decoding.

use btrans::autograd::Tape;
use btrans::generate::{decode_log_probs, generate, generate_rows, DecodeConfig};
use btrans::gradcheck::finite_diff_check;
use btrans::lora::{LoraAdapter, LoraConfig};
use btrans::model::{forward, ModelConfig, ModelParams, ModelRef, NoHooks, Trainable};
use btrans::tensor::Tensor;
use btrans::Error;

fn toy(layers: usize) -> ModelConfig {
    ModelConfig { d_model: 16, n_layers: layers, n_heads: 2, d_ff: 24, max_seq_len: 32, ..Default::default() }
}

fn tokens() -> Vec<u32> {
    vec![1, 5, 9, 13, 3, 7, 20, 11, 1, 4, 4, 30, 17, 8, 2, 6]
}

fn loss_f64(params: &ModelParams<f64>, adapter: Option<&LoraAdapter<f64>>, toks: &[u32], batch: usize, trainable: Trainable) -> (f64, Vec<Vec<f64>>) {
    let model = ModelRef::with_adapter(params, adapter);
    let mut tape = Tape::new(true);
    let bound = model.bind(&mut tape, trainable);
    let out = forward(&mut tape, model.config(), &bound, toks, batch, None, &mut NoHooks).unwrap();
    let t = toks.len() / batch;
    let targets: Vec<u32> = (0..batch)
        .flat_map(|b| (0..t).map(move |i| if i + 1 < t { toks[b * t + i + 1] } else { 0 }))
        .collect();
    let mask: Vec<bool> = (0..batch * t).map(|r| r % t + 1 < t).collect();
    let loss = tape.cross_entropy(out.logits, &targets, Some(&mask)).unwrap();
    let g = tape.backward(loss).unwrap();
    let vars = match trainable {
        Trainable::Adapter => bound.adapter_vars(),
        _ => bound.base_vars(),
    };
    let grads = vars.iter().map(|&v| g.get(v).unwrap().to_vec()).collect();
    (tape.value(loss).data()[0], grads)
}

fn set_groups(params: &mut ModelParams<f64>, groups: &[Vec<f64>]) {
    for (t, g) in params.tensors_mut().into_iter().zip(groups) {
        t.data_mut().copy_from_slice(g);
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig { norm_bias: true, ..toy(2) };
    let base = ModelParams::<f32>::init(&cfg, 11).unwrap().cast::<f64>();
    let toks = tokens();
    let groups: Vec<Vec<f64>> = base.named().iter().map(|(_, t)| t.data().to_vec()).collect();
    let report = finite_diff_check(
        |g| {
            let mut p = base.clone();
            set_groups(&mut p, g);
            Ok(loss_f64(&p, None, &toks, 2, Trainable::Base).0)
        },
        |g| {
            let mut p = base.clone();
            set_groups(&mut p, g);
            Ok(loss_f64(&p, None, &toks, 2, Trainable::Base).1)
        },
        &groups,
        1e-5,
        3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn adapter_gradient_matches_finite_differences() {
    let cfg = toy(2);
    let base = ModelParams::<f32>::init(&cfg, 4).unwrap().cast::<f64>();
    let mut adapter = LoraAdapter::<f64>::new(&cfg, LoraConfig::default(), 2).unwrap();
    // move off the zero init so both factors receive gradient
    for t in adapter.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i % 7) as f64 - 3.0);
        }
    }
    let toks = tokens();
    let groups: Vec<Vec<f64>> = adapter.named().iter().map(|(_, t)| t.data().to_vec()).collect();
    let with = |g: &[Vec<f64>]| {
        let mut a = adapter.clone();
        for (t, src) in a.tensors_mut().into_iter().zip(g) {
            t.data_mut().copy_from_slice(src);
        }
        loss_f64(&base, Some(&a), &toks, 2, Trainable::Adapter)
    };
    let report = finite_diff_check(|g| Ok(with(g).0), |g| Ok(with(g).1), &groups, 1e-5, 5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn base_gradients_are_zero_when_training_the_adapter() {
    let cfg = toy(1);
    let base = ModelParams::<f32>::init(&cfg, 4).unwrap();
    let adapter = LoraAdapter::<f32>::new(&cfg, LoraConfig::default(), 2).unwrap();
    let model = ModelRef::with_adapter(&base, Some(&adapter));
    let mut tape = Tape::new(true);
    let bound = model.bind(&mut tape, Trainable::Adapter);
    let toks = tokens();
    let out = forward(&mut tape, model.config(), &bound, &toks, 1, None, &mut NoHooks).unwrap();
    let loss = tape.cross_entropy(out.logits, &toks, None).unwrap();
    let g = tape.backward(loss).unwrap();
    for v in bound.base_vars() {
        assert!(g.get(v).is_none(), "base parameter tracked");
    }
    assert!(bound.adapter_vars().iter().any(|&v| g.get(v).unwrap().iter().any(|x| *x != 0.0)));
}

#[test]
fn traced_and_untraced_forward_are_bit_identical() {
    let p = ModelParams::<f32>::init(&toy(2), 1).unwrap();
    let model = ModelRef::new(&p);
    let toks = tokens();
    let plain = model.logits(&toks, 2, None, &mut NoHooks).unwrap();
    let mut tape = Tape::new(true);
    let bound = model.bind(&mut tape, Trainable::Base);
    let out = forward(&mut tape, model.config(), &bound, &toks, 2, None, &mut NoHooks).unwrap();
    assert!(tape.value(out.logits).bit_eq(&plain));
}

#[test]
fn fresh_adapter_leaves_logits_bit_identical() {
    let cfg = toy(2);
    let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let a = LoraAdapter::<f32>::new(&cfg, LoraConfig::default(), 3).unwrap();
    let toks = tokens();
    let plain = ModelRef::new(&p).logits(&toks, 2, None, &mut NoHooks).unwrap();
    let adapted = ModelRef::with_adapter(&p, Some(&a)).logits(&toks, 2, None, &mut NoHooks).unwrap();
    assert!(plain.bit_eq(&adapted));
}

#[test]
fn logits_are_causal() {
    let p = ModelParams::<f32>::init(&toy(2), 8).unwrap();
    let model = ModelRef::new(&p);
    let toks = tokens();
    let full = model.logits(&toks, 1, None, &mut NoHooks).unwrap();
    let v = p.config.vocab_size;
    for t in 1..toks.len() {
        let prefix = model.logits(&toks[..t], 1, None, &mut NoHooks).unwrap();
        let mut altered = toks.clone();
        for x in &mut altered[t..] {
            *x = (*x + 5) % 32;
        }
        let alt = model.logits(&altered, 1, None, &mut NoHooks).unwrap();
        assert_eq!(prefix.data(), &full.data()[..t * v], "prefix {t}");
        assert_eq!(&alt.data()[..t * v], &full.data()[..t * v], "future edit leaked into prefix {t}");
    }
}

#[test]
fn cached_decode_matches_full_recompute() {
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 2).unwrap();
    let model = ModelRef::new(&p);
    let toks: Vec<u32> = (0..40).map(|i| (i * 7 + 3) % 32).collect();
    let full = model.logits(&toks, 1, None, &mut NoHooks).unwrap();
    let mut cache = btrans::kv_cache::KvCache::new(4, 1, 64, 128);
    let mut got = model.logits(&toks[..10], 1, Some(&mut cache), &mut NoHooks).unwrap().into_data();
    for &t in &toks[10..] {
        got.extend(model.logits(&[t], 1, Some(&mut cache), &mut NoHooks).unwrap().into_data());
    }
    let max = got.iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(max < 1e-4, "max abs diff {max}");
}

#[test]
fn identical_rows_give_identical_logits_and_rows_are_batch_independent() {
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 2).unwrap();
    let model = ModelRef::new(&p);
    let row: Vec<u32> = vec![1, 4, 9, 16, 25, 3, 12];
    let other: Vec<u32> = vec![1, 7, 7, 7, 2, 30, 5];
    let batch: Vec<u32> = [row.clone(), other.clone(), row.clone()].concat();
    let out = model.logits(&batch, 3, None, &mut NoHooks).unwrap();
    let n = row.len() * 32;
    assert_eq!(&out.data()[..n], &out.data()[2 * n..]);
    let single = model.logits(&row, 1, None, &mut NoHooks).unwrap();
    assert_eq!(single.data(), &out.data()[..n]);
}

#[test]
fn sequence_overflow_is_rejected() {
    let p = ModelParams::<f32>::init(&toy(1), 0).unwrap();
    let r = ModelRef::new(&p).logits(&[3; 33], 1, None, &mut NoHooks);
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn greedy_decoding_is_deterministic_and_sampling_is_seeded() {
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 5).unwrap();
    let model = ModelRef::new(&p);
    let prompt = [1, 4, 5, 13];
    let g = DecodeConfig { max_new_tokens: 20, stop_token: None, ..Default::default() };
    let a = generate(model, &prompt, &g, &mut NoHooks).unwrap();
    let b = generate(model, &prompt, &g, &mut NoHooks).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tokens.len(), 20);
    let s = DecodeConfig { temperature: 1.0, seed: 42, ..g };
    let x = generate(model, &prompt, &s, &mut NoHooks).unwrap();
    let y = generate(model, &prompt, &s, &mut NoHooks).unwrap();
    assert_eq!(x, y);
    let z = generate(model, &prompt, &DecodeConfig { seed: 43, ..s }, &mut NoHooks).unwrap();
    assert_ne!(x.tokens, z.tokens);
}

#[test]
fn empty_prompt_is_rejected() {
    let p = ModelParams::<f32>::init(&toy(1), 0).unwrap();
    let r = generate(ModelRef::new(&p), &[], &DecodeConfig::default(), &mut NoHooks);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn reported_logprobs_match_teacher_forced_recompute() {
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 6).unwrap();
    let model = ModelRef::new(&p);
    let prompt = vec![1, 10, 11, 12];
    for (temperature, top_k) in [(1.0, 0), (0.7, 0), (1.3, 5), (0.0, 0)] {
        let cfg = DecodeConfig { temperature, top_k, max_new_tokens: 30, stop_token: None, seed: 9 };
        let g = generate(model, &prompt, &cfg, &mut NoHooks).unwrap();
        let full: Vec<u32> = prompt.iter().chain(&g.tokens).copied().collect();
        let logits = model.logits(&full, 1, None, &mut NoHooks).unwrap();
        let v = 32;
        let mut recomputed = 0.0;
        for (i, &tok) in g.tokens.iter().enumerate() {
            let pos = prompt.len() - 1 + i;
            let row = &logits.data()[pos * v..(pos + 1) * v];
            recomputed += decode_log_probs(row, temperature, top_k)[tok as usize];
        }
        let diff = (recomputed - g.logprob_sum()).abs();
        assert!(diff < 1e-4, "T={temperature} k={top_k}: diff {diff}");
    }
}

#[test]
fn batched_rows_match_single_row_generation() {
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 7).unwrap();
    let model = ModelRef::new(&p);
    let prompt = [1, 3, 4, 5];
    let cfg = DecodeConfig { temperature: 1.0, max_new_tokens: 25, ..Default::default() };
    let seeds = [11u64, 12, 13, 14, 15];
    let batched = generate_rows(model, &prompt, &cfg, &seeds, &mut NoHooks).unwrap();
    for (r, &s) in seeds.iter().enumerate() {
        let single = generate(model, &prompt, &DecodeConfig { seed: s, ..cfg.clone() }, &mut NoHooks).unwrap();
        assert_eq!(single, batched[r], "row {r}");
    }
}

#[test]
fn untraced_tensor_roundtrip_through_cast() {
    let t = Tensor::<f32>::from_f64(vec![2], &[0.5, -1.25]).unwrap();
    assert!(t.cast::<f64>().cast::<f32>().bit_eq(&t));
}
