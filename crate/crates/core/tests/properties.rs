//! Property tests over randomly generated inputs.

use std::collections::BTreeMap;

use multitag::autodiff::{grad_check, Tape, Tensor, Var, IGNORE_INDEX};
use multitag::checkpoint;
use multitag::data::{
    encode_example, make_minibatches, wordpiece_tokenize, LabelMap, MiniBatch, RawSentence,
    TokenizedExample, Vocab,
};
use multitag::encoder::{
    encoder_forward, BoundEncoder, EncoderConfig, EncoderInput, EncoderParams,
};
use multitag::eval::{iob_decode, iob_encode, span_f1, Span, SpanSet};
use multitag::model::{MultiTaskModel, TaskRegistry, TaskSpec};
use multitag::training::{lr_at, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Contracts a non-scalar output with fixed random weights into a scalar.
fn project(tape: &mut Tape, x: Var, rng_seed: u64) -> multitag::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = random(&mut rng, tape.shape(x), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> multitag::Result<Var>, inputs: &[Tensor]) {
    let report = grad_check(f, inputs, FD_STEP).unwrap();
    assert!(
        report.max_relative_error < GRAD_TOLERANCE,
        "max relative error {:e} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_family_gradients(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k], 1.0);
        let b = random(&mut rng, &[k, n], 1.0);
        let bt = random(&mut rng, &[n, k], 1.0);
        let bias = random(&mut rng, &[n], 1.0);
        check(|t, v| { let y = t.matmul(v[0], v[1])?; let y = t.add_bias(y, v[2])?; project(t, y, seed) }, &[a.clone(), b, bias]);
        check(|t, v| { let y = t.matmul_transposed(v[0], v[1])?; let y = t.transpose(y)?; project(t, y, seed ^ 1) }, &[a, bt]);
    }

    #[test]
    // Two-column layer norm is flat (outputs are ±1), leaving only
    // finite-difference noise to compare; start at three.
    fn normalization_and_activation_gradients(seed in any::<u64>(), rows in 1usize..4, cols in 3usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols], 2.0);
        let gamma = random(&mut rng, &[cols], 1.5);
        let beta = random(&mut rng, &[cols], 1.0);
        check(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?; project(t, y, seed) }, &[x.clone(), gamma, beta]);
        check(|t, v| { let y = t.gelu(v[0])?; let y = t.scale(y, 0.7)?; project(t, y, seed) }, std::slice::from_ref(&x));
        check(|t, v| { let y = t.softmax(v[0])?; project(t, y, seed) }, std::slice::from_ref(&x));
        let mask: Vec<bool> = (0..cols).map(|j| j == 0 || rng.gen_bool(0.6)).collect();
        check(move |t, v| { let y = t.masked_softmax(v[0], &mask)?; project(t, y, seed) }, &[x]);
    }

    #[test]
    fn indexing_and_loss_gradients(seed in any::<u64>(), rows in 1usize..5, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random(&mut rng, &[6, 3], 1.0);
        let ids: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..6)).collect();
        check(move |t, v| {
            let g = t.gather(v[0], &ids)?;
            let top = t.slice_rows(g, 0, 1)?;
            let left = t.slice_cols(g, 0, 2)?;
            let c = t.concat_rows(&[g, top])?;
            let wide = t.concat_cols(&[g, left])?;
            let s = project(t, c, seed)?;
            let w = project(t, wide, seed ^ 2)?;
            t.add(s, w)
        }, &[table]);

        let logits = random(&mut rng, &[rows, k], 3.0);
        let targets: Vec<usize> = (0..rows).map(|i| if i == 0 { 0 } else if rng.gen_bool(0.2) { IGNORE_INDEX } else { rng.gen_range(0..k) }).collect();
        check(move |t, v| t.cross_entropy(v[0], &targets, IGNORE_INDEX), &[logits]);
    }
}

fn toy_encoder(seed: u64, layers: usize) -> EncoderParams {
    let mut cfg = EncoderConfig::toy(7, 8, layers, 2);
    cfg.max_position = 6;
    let mut enc = EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    // Larger than the init scale so attention is far from uniform.
    for (_, t) in enc.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    enc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn full_encoder_gradients(seed in any::<u64>(), n in 2usize..6) {
        let enc = toy_encoder(seed, 2);
        let config = enc.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..7)).collect();
        let segs: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.8)).collect();
        let inputs: Vec<Tensor> = enc.tensors().values().cloned().collect();
        check(move |t, v| {
            let bound = BoundEncoder::from_vars(&config, v)?;
            let input = EncoderInput::single(&ids, &segs, Some(&mask))?;
            let y = encoder_forward(t, &config, &bound, &input, None)?;
            project(t, y, seed)
        }, &inputs);
    }

    #[test]
    fn padding_does_not_change_real_positions(seed in any::<u64>(), n in 1usize..5, pad in 1usize..3) {
        let enc = toy_encoder(seed, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(1..7)).collect();
        let alone = enc.forward(&EncoderInput::single(&ids, &vec![0; n], None).unwrap()).unwrap();
        let mut padded = ids.clone();
        padded.extend((0..pad).map(|_| rng.gen_range(0..7)));
        let mask: Vec<bool> = (0..n + pad).map(|i| i < n).collect();
        let out = enc.forward(&EncoderInput::single(&padded, &vec![0; n + pad], Some(&mask)).unwrap()).unwrap();
        let h = 8;
        for i in 0..n * h {
            prop_assert!((alone.data()[i] - out.data()[i]).abs() < 1e-12);
        }
    }
}

fn span_sets(max_len: usize) -> impl Strategy<Value = (usize, SpanSet)> {
    (1..max_len).prop_flat_map(|len| {
        proptest::collection::vec((0..len, 1usize..4, 0usize..3), 0..len).prop_map(move |raw| {
            // Greedily keep non-overlapping spans.
            let mut taken = vec![false; len];
            let mut set = SpanSet::new();
            for (start, width, ty) in raw {
                let end = (start + width - 1).min(len - 1);
                if taken[start..=end].iter().any(|&t| t) {
                    continue;
                }
                taken[start..=end].iter_mut().for_each(|t| *t = true);
                set.insert(Span::new(start, end, ["Gene", "Disease", "Cell"][ty]));
            }
            (len, set)
        })
    })
}

proptest! {
    #[test]
    fn iob_encode_decode_round_trip((len, spans) in span_sets(20)) {
        let labels = iob_encode(&spans, len).unwrap();
        prop_assert_eq!(labels.len(), len);
        prop_assert_eq!(iob_decode(&labels).unwrap(), spans);
    }

    #[test]
    fn decode_of_any_sequence_is_a_fixed_point(labels in proptest::collection::vec(prop_oneof![
        Just("O"), Just("B-X"), Just("I-X"), Just("B-Y"), Just("I-Y")
    ], 0..16)) {
        let spans = iob_decode(&labels).unwrap();
        let again = iob_decode(&iob_encode(&spans, labels.len()).unwrap()).unwrap();
        prop_assert_eq!(again, spans);
    }

    #[test]
    fn f1_counts_partition_predictions_and_gold((len, gold) in span_sets(12), (_, pred) in span_sets(12)) {
        let pred: SpanSet = pred.into_iter().filter(|s| s.end < len).collect();
        let s = span_f1(std::slice::from_ref(&pred), std::slice::from_ref(&gold)).unwrap();
        prop_assert_eq!(s.tp + s.fp, pred.len());
        prop_assert_eq!(s.tp + s.fn_, gold.len());
        prop_assert_eq!(s.tp, pred.intersection(&gold).count());
        prop_assert!((0.0..=1.0).contains(&s.f1));
    }

    #[test]
    fn wordpiece_pieces_spell_the_word(word in "[a-d]{1,12}") {
        let vocab = Vocab::new(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b", "c", "d", "ab", "##a", "##b", "##c", "##d", "##cd"]
                .iter().map(|s| s.to_string()).collect(),
        ).unwrap();
        let pieces = wordpiece_tokenize(&word, &vocab);
        let spelled: String = pieces.iter().map(|p| p.trim_start_matches("##")).collect();
        prop_assert_eq!(spelled, word);
        prop_assert!(pieces.iter().skip(1).all(|p| p.starts_with("##")));
    }

    #[test]
    fn batching_conserves_the_example_multiset(n in 1usize..40, bs in 1usize..9, seed in any::<u64>()) {
        let vocab = Vocab::from_words(["x"]);
        let labels = LabelMap::from_types(["T"]);
        let examples: Vec<TokenizedExample> = (0..n)
            .map(|i| {
                let s = RawSentence::new(vec!["x".into(); 1 + i % 5], vec!["O".into(); 1 + i % 5]).unwrap();
                encode_example(&s, &vocab, &labels, "t", 32).unwrap()
            })
            .collect();
        let batches: Vec<MiniBatch> = make_minibatches("t", &examples, bs, seed).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.members.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for b in &batches {
            for (row, &m) in b.members.iter().enumerate() {
                let len = examples[m].len();
                prop_assert_eq!(&b.token_ids[row * b.seq_len..row * b.seq_len + len], &examples[m].token_ids[..]);
                prop_assert!(b.token_ids[row * b.seq_len + len..(row + 1) * b.seq_len].iter().all(|&t| t == 0));
            }
        }
        let again = make_minibatches("t", &examples, bs, seed).unwrap();
        prop_assert_eq!(batches, again);
    }

    #[test]
    fn lr_is_piecewise_linear(total in 2usize..2000, warmup in 0.05f64..0.95, peak in 1e-6f64..1e-2, frac in 0.0f64..1.0) {
        let cfg = TrainConfig { warmup_proportion: warmup, peak_lr: peak, ..TrainConfig::default() };
        let w = warmup * total as f64;
        let step = (frac * total as f64) as usize;
        let lr = lr_at(step, total, &cfg).unwrap();
        let s = step as f64;
        let expected = if s < w { peak * s / w } else { peak * (total as f64 - s) / (total as f64 - w) };
        prop_assert!((lr - expected).abs() <= 1e-12 * peak, "{lr} vs {expected}");
        prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), h in prop::sample::select(vec![4usize, 8]), layers in 0usize..3) {
        let vocab = Vocab::from_words(["p", "q", "r", "s"]);
        let registry = TaskRegistry::new(vec![
            TaskSpec::new("A", LabelMap::from_types(["X", "Y"])),
            TaskSpec::new("B", LabelMap::from_types(["Z"])).with_lambda(0.25),
        ]).unwrap();
        let cfg = EncoderConfig::toy(vocab.len(), h, layers, 2);
        let model = MultiTaskModel::init(vocab, cfg, registry, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&model, None).unwrap()).unwrap().model;
        let words: Vec<String> = "p s q zz r".split(' ').map(String::from).collect();
        for task in ["A", "B"] {
            let a = model.task_forward_words(&words, task);
            let b = back.task_forward_words(&words, task);
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn total_loss_is_the_lambda_weighted_sum(seed in any::<u64>(), la in 0.0f64..3.0, lb in 0.0f64..3.0) {
        let vocab = Vocab::from_words(["p", "q", "r"]);
        let registry = TaskRegistry::new(vec![
            TaskSpec::new("A", LabelMap::from_types(["X"])).with_lambda(la),
            TaskSpec::new("B", LabelMap::from_types(["Z"])).with_lambda(lb),
        ]).unwrap();
        let cfg = EncoderConfig::toy(vocab.len(), 8, 1, 2);
        let model = MultiTaskModel::init(vocab, cfg, registry, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut by_task = BTreeMap::new();
        for (task, labels) in [("A", ["B-X", "I-X", "O"]), ("B", ["O", "B-Z", "O"])] {
            let s = RawSentence::new(vec!["p".into(), "q".into(), "r".into()], labels.iter().map(|l| l.to_string()).collect()).unwrap();
            let ex = encode_example(&s, &model.vocab, &model.registry.get(task).unwrap().labels, task, 16).unwrap();
            by_task.insert(task, MiniBatch::from_examples(task, &[&ex], vec![0]).unwrap());
        }
        let report = model.multi_task_loss(&[&by_task["A"], &by_task["B"]]).unwrap();
        let expected = la * report.per_task["A"].raw_loss + lb * report.per_task["B"].raw_loss;
        prop_assert!((report.total - expected).abs() < 1e-12);
    }
}

trait ForwardWords {
    fn task_forward_words(&self, words: &[String], task: &str) -> Vec<f64>;
}

impl ForwardWords for MultiTaskModel {
    fn task_forward_words(&self, words: &[String], task: &str) -> Vec<f64> {
        let labels = vec!["O".to_string(); words.len()];
        let s = RawSentence::new(words.to_vec(), labels).unwrap();
        let ex = encode_example(
            &s,
            &self.vocab,
            &self.registry.get(task).unwrap().labels,
            task,
            16,
        )
        .unwrap();
        let b = MiniBatch::from_examples(task, &[&ex], vec![0]).unwrap();
        self.task_forward(&b, task).unwrap().into_data()
    }
}
