use super::*;
use crate::kernel::{AdamConfig, AdamState, Tape};
use crate::testutil::{param_grad_error, rng};
use crate::text::{Language, Sentence, BOS, EOS, PAD, UNK};

fn tiny(vocab: usize, hidden: usize) -> Model<f64> {
    let config = ModelConfig {
        vocab_size: vocab,
        hidden,
        layers: 2,
        r_hidden: vec![hidden],
        r_out: hidden,
    };
    Model::new(config, &mut rng(11)).unwrap()
}

fn sent(ids: &[usize]) -> Sentence {
    Sentence::new(ids.to_vec()).unwrap()
}

fn opts(max_len: usize) -> DecodeOptions<'static> {
    DecodeOptions { max_len, allowed: None }
}

#[test]
fn single_token_embedding_is_its_hidden_state() {
    let m = tiny(12, 8);
    let mut t = Tape::new();
    let enc = m.encode(&mut t, &[&sent(&[5])]).unwrap();
    assert_eq!(t.value(enc.memory).shape(), &[1, 1, 8]);
    assert_eq!(t.value(enc.pooled).data(), t.value(enc.memory).data());
}

#[test]
fn hidden_sequence_matches_input_length() {
    let m = tiny(12, 8);
    let mut t = Tape::new();
    let enc = m.encode(&mut t, &[&sent(&[4, 5, 6, 7, 8])]).unwrap();
    assert_eq!(t.value(enc.memory).shape(), &[1, 5, 8]);
}

#[test]
fn embeddings_are_deterministic_and_padding_invariant() {
    let m = tiny(20, 8);
    let short = sent(&[4, 9]);
    let long = sent(&[7, 8, 9, 10, 11, 12, 13]);
    let alone = m.embed_sentences(&[&short], 8).unwrap();
    let again = m.embed_sentences(&[&short], 8).unwrap();
    let padded = m.embed_sentences(&[&long, &short], 8).unwrap();
    assert_eq!(alone.data(), again.data());
    for (a, b) in alone.row(0).iter().zip(padded.row(1)) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn empty_batch_is_degenerate() {
    let m = tiny(12, 8);
    let mut t = Tape::new();
    assert!(matches!(m.encode(&mut t, &[]), Err(Error::Degenerate { .. })));
}

#[test]
fn cosine_to_fixed_vector_gradient_matches_finite_differences() {
    let m = tiny(10, 8);
    let s = sent(&[4, 7, 5, 9]);
    let target: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let mut mm = m.clone();
        mm.store = store.clone();
        let enc = mm.encode(tape, &[&s])?;
        let fixed = tape.constant(Tensor::vector(target.clone()))?;
        let e = tape.reshape(enc.pooled, &[8])?;
        tape.cosine(e, fixed)
    };
    let err = param_grad_error(&m.store, &m.encoder_params(), 1e-6, f);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn decoder_nll_gradient_matches_finite_differences() {
    let m = tiny(10, 6);
    let (s, r) = (sent(&[4, 7, 5]), sent(&[8, 6]));
    let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let mut mm = m.clone();
        mm.store = store.clone();
        mm.translation_nll(tape, &[&s, &r], &[&r, &s], Language::Target)
    };
    let err = param_grad_error(&m.store, &m.translator_params(), 1e-6, f);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn edit_conditioning_gradient_matches_finite_differences() {
    let m = tiny(10, 6);
    let (a, b) = (sent(&[4, 7, 5]), sent(&[8, 6]));
    let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let mut mm = m.clone();
        mm.store = store.clone();
        let ea = mm.encode(tape, &[&a])?;
        let eb = mm.encode(tape, &[&b])?;
        let v = tape.elementwise_max(ea.pooled, eb.pooled)?;
        mm.nll(tape, Conditioning::Pooled(v), Language::Source, &[&b])
    };
    let err = param_grad_error(&m.store, &m.translator_params(), 1e-6, f);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn rigged_eos_still_yields_a_token() {
    let mut m = tiny(12, 8);
    let b_out = m.store.id_of("dec.b_out").unwrap();
    m.store.get_mut(b_out).data_mut()[EOS] = 1e3;
    let ctx = m.context(&[&sent(&[4, 5])]).unwrap();
    let out = m.decode_greedy(&ctx, Language::Target, opts(10)).unwrap();
    assert_eq!(out[0].sentence.len(), 1);
    assert!(!out[0].truncated);
}

#[test]
fn forbidden_tokens_never_appear() {
    for seed in 0..5 {
        let config = ModelConfig {
            vocab_size: 15,
            hidden: 8,
            layers: 2,
            r_hidden: vec![8],
            r_out: 8,
        };
        let mut m: Model<f64> = Model::new(config, &mut rng(seed)).unwrap();
        let b_out = m.store.id_of("dec.b_out").unwrap();
        for tok in [PAD, BOS, UNK] {
            m.store.get_mut(b_out).data_mut()[tok] = 50.0;
        }
        let srcs = [sent(&[4, 5, 6]), sent(&[9]), sent(&[14, 13, 12, 11])];
        let refs: Vec<&Sentence> = srcs.iter().collect();
        for d in m.translate(&refs, Language::Source, opts(6), 2).unwrap() {
            assert!(d.sentence.ids().iter().all(|&t| t >= 4));
            assert!(d.sentence.len() <= 6);
        }
    }
}

#[test]
fn decoding_is_deterministic_and_respects_masks() {
    let m = tiny(16, 8);
    let s = sent(&[4, 5, 6]);
    let ctx = m.context(&[&s]).unwrap();
    let a = m.decode_greedy(&ctx, Language::Target, opts(8)).unwrap();
    let b = m.decode_greedy(&ctx, Language::Target, opts(8)).unwrap();
    assert_eq!(a, b);
    let allowed: Vec<bool> = (0..16).map(|t| t == 9 || t == 10).collect();
    let masked = m
        .decode_greedy(&ctx, Language::Target, DecodeOptions { max_len: 8, allowed: Some(&allowed) })
        .unwrap();
    assert!(masked[0].sentence.ids().iter().all(|&t| t == 9 || t == 10));
}

#[test]
fn uniform_output_gives_log_vocab_nll() {
    let mut m = tiny(13, 8);
    for name in ["dec.w_out", "dec.b_out"] {
        let id = m.store.id_of(name).unwrap();
        let shape = m.store.get(id).shape().to_vec();
        *m.store.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut t = Tape::new();
    let (s, r) = (sent(&[4, 5, 6]), sent(&[7, 8]));
    let l = m.translation_nll(&mut t, &[&s], &[&r], Language::Target).unwrap();
    assert!((t.value(l).data()[0] - 13f64.ln()).abs() < 1e-12);
}

fn train_copy(m: &mut Model<f64>, data: &[Sentence], steps: usize, lr: f64) -> Vec<f64> {
    let ids = m.translator_params();
    let mut adam = AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, &m.store, &ids);
    let refs: Vec<&Sentence> = data.iter().collect();
    let mut losses = Vec::new();
    for _ in 0..steps {
        let mut t = Tape::with_trainable(&ids);
        let l = m.translation_nll(&mut t, &refs, &refs, Language::Source).unwrap();
        losses.push(t.value(l).data()[0]);
        let g = t.backward(l).unwrap().params(&t);
        adam.apply(&mut m.store, &g).unwrap();
    }
    losses
}

#[test]
fn overfitting_one_pair_decreases_nll() {
    let mut m = tiny(12, 8);
    let pair = [sent(&[4, 5, 6, 7])];
    let losses = train_copy(&mut m, &pair, 50, 1e-2);
    assert!(losses.iter().all(|&l| l >= 0.0));
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn copy_task_reconstructs_short_sentences() {
    let config = ModelConfig {
        vocab_size: 24,
        hidden: 32,
        layers: 2,
        r_hidden: vec![32],
        r_out: 32,
    };
    let mut m: Model<f64> = Model::new(config, &mut rng(5)).unwrap();
    let mut r = rng(6);
    let data: Vec<Sentence> = (0..50)
        .map(|_| {
            let len = r.gen_range(2..=5);
            sent(&(0..len).map(|_| r.gen_range(4..24)).collect::<Vec<_>>())
        })
        .collect();
    train_copy(&mut m, &data, 200, 1e-2);
    let refs: Vec<&Sentence> = data.iter().collect();
    let out = m.translate(&refs, Language::Source, opts(10), 50).unwrap();
    let exact = out.iter().zip(&data).filter(|(d, s)| &d.sentence == *s).count();
    assert!(exact as f64 / 50.0 >= 0.9, "exact matches {exact}/50");

    let mut t = Tape::new();
    let l = m.translation_nll(&mut t, &refs, &refs, Language::Source).unwrap();
    assert!(t.value(l).data()[0] < 24f64.ln() / 4.0);
}

#[test]
fn one_shared_parameter_set_serves_both_languages() {
    let m = tiny(12, 8);
    let ids = m.translator_params();
    let grads_for = |lang: Language| {
        let mut t = Tape::with_trainable(&ids);
        let s = sent(&[4, 5]);
        let l = m.translation_nll(&mut t, &[&s], &[&s], lang).unwrap();
        t.backward(l).unwrap().params(&t).into_iter().map(|(id, _)| id).collect::<Vec<_>>()
    };
    assert_eq!(grads_for(Language::Source), grads_for(Language::Target));
    assert_eq!(m.store.len(), ids.len() + m.evaluator_params().len());
}

#[test]
fn parameter_groups_partition_the_store() {
    let m = tiny(12, 8);
    let mut all: Vec<ParamId> = m.translator_params();
    all.extend(m.evaluator_params());
    all.sort();
    all.dedup();
    assert_eq!(all.len(), m.store.len());
    assert!(m.encoder_params().contains(&m.embedding_table()));
}

#[test]
fn dictionary_init_copies_rows() {
    let mut m = tiny(12, 8);
    m.apply_dictionary(&[(4, 9), (5, 10)]).unwrap();
    let table = m.store.get(m.embedding_table());
    assert_eq!(table.row(4), table.row(9));
    assert_eq!(table.row(5), table.row(10));
    assert!(m.apply_dictionary(&[(4, 99)]).is_err());
}

#[test]
fn save_and_load_roundtrip() {
    let m = tiny(12, 8);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.bin");
    m.save(&p).unwrap();
    let mut other = Model::<f64>::new(m.config.clone(), &mut rng(99)).unwrap();
    assert_ne!(other.store, m.store);
    other.load(&p).unwrap();
    assert_eq!(other.store, m.store);
}

#[test]
fn evaluator_maps_rows() {
    let m = tiny(12, 8);
    let e = Tensor::filled(&[3, 8], 0.25);
    let r = m.evaluate_values(&e).unwrap();
    assert_eq!(r.shape(), &[3, 8]);
}

use rand::Rng;
