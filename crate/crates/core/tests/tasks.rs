use std::collections::HashMap;

use pararnn::newton::NewtonConfig;
use pararnn::tasks::layers::{cross_entropy, positional_encoding};
use pararnn::tasks::*;
use pararnn::{CellKind, DType, Rng, SequenceBatch};

/// Direct evaluation of each task definition, written without reference to
/// the generator's bookkeeping.
fn brute_force(spec: &TaskSpec, tokens: &[u32]) -> Vec<Option<u32>> {
    let len = tokens.len();
    (0..len)
        .map(|l| match spec.kind {
            TaskKind::Parity => Some(tokens[..=l].iter().sum::<u32>() % 2),
            TaskKind::KeepNth => (l == len - 1).then(|| tokens[spec.n - 1]),
            TaskKind::Mqar => {
                if l < 2 * spec.pairs || tokens[l] == 0 {
                    return None;
                }
                let pairs: HashMap<u32, u32> =
                    tokens[..2 * spec.pairs].chunks(2).map(|kv| (kv[0], kv[1])).collect();
                pairs.get(&tokens[l]).copied()
            }
            TaskKind::KHop => {
                let mut pos = l;
                for _ in 0..spec.hops {
                    let prev = (0..pos).rev().find(|&j| tokens[j] == tokens[pos])?;
                    pos = prev + 1;
                }
                Some(tokens[pos])
            }
        })
        .collect()
}

fn all_specs() -> Vec<TaskSpec> {
    vec![
        TaskSpec::parity(100),
        TaskSpec::keep_nth(100),
        TaskSpec::mqar(100),
        TaskSpec::khop(1, 100),
        TaskSpec::khop(2, 100),
        TaskSpec::khop(3, 40),
    ]
}

#[test]
fn generated_labels_match_brute_force() {
    for spec in all_specs() {
        let spec = spec.with_seed(17);
        let samples = generate(&spec, 1000).unwrap();
        for s in &samples {
            assert_eq!(s.len(), spec.len);
            assert!(s.tokens.iter().all(|&t| (t as usize) < spec.vocab));
            let oracle = brute_force(&spec, &s.tokens);
            for l in 0..spec.len {
                let supervised = s.mask[l].then_some(s.targets[l]);
                match spec.kind {
                    // every position carries the running parity; only the last is scored
                    TaskKind::Parity => {
                        assert_eq!(supervised, oracle[l]);
                        assert_eq!(s.score_mask[l], l == spec.len - 1);
                    }
                    _ => {
                        assert_eq!(supervised, oracle[l], "{:?} position {l}", spec.kind);
                        assert_eq!(s.score_mask[l], s.mask[l]);
                    }
                }
            }
        }
    }
}

#[test]
fn mqar_layout() {
    let spec = TaskSpec::mqar(100).with_seed(3);
    for s in generate(&spec, 200).unwrap() {
        let half = spec.vocab as u32 / 2;
        let keys = [s.tokens[0], s.tokens[2]];
        assert_ne!(keys[0], keys[1]);
        for k in keys {
            assert!((1..half).contains(&k));
        }
        for v in [s.tokens[1], s.tokens[3]] {
            assert!((half..spec.vocab as u32).contains(&v));
        }
        let queries: Vec<usize> = (4..100).filter(|&l| s.tokens[l] != 0).collect();
        assert_eq!(queries.len(), spec.queries);
        assert_eq!(s.mask.iter().filter(|&&m| m).count(), spec.queries);
        assert!(queries.iter().all(|&l| keys.contains(&s.tokens[l])));
    }
}

#[test]
fn label_examples() {
    let parity = TaskSpec::parity(4);
    assert_eq!(label(&parity, &[0, 0, 0, 0]).unwrap().targets[3], 0);
    let s = label(&parity, &[1, 1, 0, 1]).unwrap();
    assert_eq!(s.targets, vec![1, 0, 0, 1]);
    assert_eq!(s.score_mask, vec![false, false, false, true]);

    let keep = TaskSpec { len: 6, ..TaskSpec::keep_nth(6) };
    let s = label(&keep, &[7, 3, 9, 1, 4, 8]).unwrap();
    assert_eq!(s.targets[5], 4);
    assert_eq!(s.mask, vec![false, false, false, false, false, true]);

    // 1-hop: x = a b a c b, position 2 (a) -> b, position 4 (b) -> a
    let hop = TaskSpec { vocab: 3, ..TaskSpec::khop(1, 5) };
    let s = label(&hop, &[0, 1, 0, 2, 1]).unwrap();
    assert_eq!(s.mask, vec![false, false, true, false, true]);
    assert_eq!((s.targets[2], s.targets[4]), (1, 0));
    // 2-hop at position 4: b -> position 2 (a) -> position 1 (b)
    let hop2 = TaskSpec { vocab: 3, ..TaskSpec::khop(2, 5) };
    let s = label(&hop2, &[0, 1, 0, 2, 1]).unwrap();
    assert_eq!(s.mask, vec![false, false, false, false, true]);
    assert_eq!(s.targets[4], 1);

    assert!(label(&parity, &[0, 1, 2, 0]).is_err());
    assert!(label(&parity, &[0, 1]).is_err());
}

#[test]
fn generation_is_deterministic_and_indexed() {
    let spec = TaskSpec::khop(2, 50).with_seed(9);
    let a = generate(&spec, 64).unwrap();
    assert_eq!(a, generate(&spec, 64).unwrap());
    assert_eq!(&a[40..], &generate_range(&spec, 40, 24).unwrap()[..]);
    assert_ne!(a, generate(&spec.with_seed(10), 64).unwrap());
}

#[test]
fn invalid_specs() {
    assert!(TaskSpec { vocab: 3, ..TaskSpec::parity(10) }.validate().is_err());
    assert!(TaskSpec { n: 11, ..TaskSpec::keep_nth(10) }.validate().is_err());
    assert!(TaskSpec { n: 0, ..TaskSpec::keep_nth(10) }.validate().is_err());
    assert!(TaskSpec::mqar(10).validate().is_err()); // 2·2 + 8 > 10
    assert!(TaskSpec { pairs: 6, queries: 1, ..TaskSpec::mqar(20) }.validate().is_ok());
    assert!(TaskSpec { pairs: 11, queries: 1, vocab: 20, ..TaskSpec::mqar(40) }.validate().is_err());
    assert!(TaskSpec::khop(0, 10).validate().is_err());
    assert!(TaskSpec::parity(0).validate().is_err());
    assert!(generate(&TaskSpec::parity(5), 0).is_err());
    assert!("k-hop".parse::<TaskKind>().is_ok());
    assert!("nope".parse::<TaskKind>().is_err());
}

#[test]
fn jsonl_round_trip() {
    let samples = generate(&TaskSpec::mqar(30).with_seed(1), 5).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&samples, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["tokens", "targets", "mask", "score_mask"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(read_jsonl(&buf[..]).unwrap(), samples);
}

fn one_hot(batch: usize, len: usize, vocab: usize, hot: &[u32]) -> SequenceBatch<f64> {
    SequenceBatch::from_fn(batch, len, vocab, |b, l, v| if hot[b * len + l] as usize == v { 1.0 } else { 0.0 })
        .unwrap()
}

#[test]
fn accuracy_examples() {
    let targets = vec![0, 1, 2, 3, 0, 1];
    let mask = vec![true; 6];
    assert_eq!(accuracy(&one_hot(2, 3, 4, &targets), &targets, &mask).unwrap(), 1.0);
    let shifted: Vec<u32> = targets.iter().map(|t| (t + 1) % 4).collect();
    assert_eq!(accuracy(&one_hot(2, 3, 4, &shifted), &targets, &mask).unwrap(), 0.0);
    let half: Vec<u32> = targets.iter().enumerate().map(|(i, &t)| if i % 2 == 0 { t } else { (t + 1) % 4 }).collect();
    assert_eq!(accuracy(&one_hot(2, 3, 4, &half), &targets, &mask).unwrap(), 0.5);
    // masked positions are ignored
    let m: Vec<bool> = (0..6).map(|i| i % 2 == 0).collect();
    assert_eq!(accuracy(&one_hot(2, 3, 4, &half), &targets, &m).unwrap(), 1.0);
    // ties go to the lowest index
    let flat = SequenceBatch::<f64>::zeros(1, 2, 3).unwrap();
    assert_eq!(accuracy(&flat, &[0, 1], &[true, true]).unwrap(), 0.5);
    assert!(accuracy(&flat, &[0, 1], &[false, false]).is_err());
    assert!(accuracy(&flat, &[0], &[true]).is_err());
}

#[test]
fn cross_entropy_of_uniform_logits() {
    let logits = vec![0.0f64; 3 * 4];
    let mut d = vec![0.0; 12];
    let loss = cross_entropy(&logits, 4, &[1, 2, 3], &[true, false, true], &mut d);
    assert!((loss - 4f64.ln()).abs() < 1e-15);
    assert_eq!(&d[4..8], &[0.0; 4]);
    assert!((d[1] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
    assert!((d[0] - 0.125).abs() < 1e-15);
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding::<f64>(3, 4);
    assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
    assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
    assert!((pe[5] - 1f64.cos()).abs() < 1e-15);
    assert!((pe[6] - (0.01f64).sin()).abs() < 1e-15);
}

fn small_config(kind: CellKind, full: bool, positional: bool) -> ModelConfig {
    ModelConfig {
        vocab: 5,
        d_model: 8,
        hidden: 4,
        heads: 2,
        cell: kind,
        full_block: full,
        positional,
        conv_kernel: 3,
        clip_norm: None,
    }
}

fn engines() -> [Engine; 2] {
    let converged = NewtonConfig { n_its: 64, ..NewtonConfig::verify(DType::F64) };
    [
        Engine::new(ForwardMode::Parallel, converged).unwrap(),
        Engine::new(ForwardMode::Sequential, converged).unwrap(),
    ]
}

#[test]
fn zero_embedding_and_head_give_zero_logits() {
    for full in [false, true] {
        let mut m = SingleLayerModel::<f64>::new(small_config(CellKind::ParaGru, full, false), &mut Rng::new(0)).unwrap();
        m.params_mut().get_mut("embed").unwrap().fill(0.0);
        m.params_mut().get_mut("head_w").unwrap().fill(0.0);
        let tokens: Vec<u32> = (0..14).map(|i| i % 5).collect();
        let logits = m.logits(&tokens, 2, 7, &engines()[0]).unwrap();
        assert_eq!(logits.max_abs(), 0.0);
    }
}

#[test]
fn model_is_causal() {
    let mut rng = Rng::new(5);
    for (i, (kind, full, pe)) in [
        (CellKind::ParaGru, false, false),
        (CellKind::ParaLstm, true, false),
        (CellKind::ParaGru, true, true),
        (CellKind::Ssm, false, true),
    ]
    .into_iter()
    .enumerate()
    {
        let m = SingleLayerModel::<f64>::new(small_config(kind, full, pe), &mut Rng::new(i as u64)).unwrap();
        let engine = Engine::new(ForwardMode::Parallel, NewtonConfig::training(DType::F64)).unwrap();
        for _ in 0..25 {
            let len = 2 + rng.below(30);
            let tokens: Vec<u32> = (0..len).map(|_| rng.below(5) as u32).collect();
            let l = rng.below(len);
            let mut other = tokens.clone();
            other[l] = (other[l] + 1 + rng.below(4) as u32) % 5;
            let a = m.logits(&tokens, 1, len, &engine).unwrap();
            let b = m.logits(&other, 1, len, &engine).unwrap();
            for p in 0..l {
                assert_eq!(a.at(0, p), b.at(0, p), "{kind:?} full {full}: position {p} saw token {l}");
            }
            assert_ne!(a.at(0, l), b.at(0, l));
        }
    }
}

/// Loss as a function of all parameters, for finite differences.
fn loss_at(m: &SingleLayerModel<f64>, b: &Batch, engine: &Engine) -> f64 {
    let logits = m.logits(&b.tokens, b.batch, b.len, engine).unwrap();
    let mut d = vec![0.0; logits.data().len()];
    cross_entropy(logits.data(), m.config().vocab, &b.targets, &b.mask, &mut d)
}

#[test]
fn model_gradients_match_finite_differences() {
    let spec = TaskSpec { vocab: 5, ..TaskSpec::khop(1, 7) }.with_seed(2);
    let samples = generate(&spec, 3).unwrap();
    let refs: Vec<&TaskSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs).unwrap();
    let mut worst: f64 = 0.0;
    for (i, kind) in [CellKind::ParaGru, CellKind::ParaLstm, CellKind::Ssm].into_iter().enumerate() {
        for (full, pe) in [(false, false), (false, true), (true, false)] {
            let model = SingleLayerModel::<f64>::new(small_config(kind, full, pe), &mut Rng::new(i as u64)).unwrap();
            for engine in engines() {
                let cache = model.forward(&batch.tokens, batch.batch, batch.len, &engine).unwrap();
                let mut dl = vec![0.0; cache.logits.data().len()];
                cross_entropy(cache.logits.data(), 5, &batch.targets, &batch.mask, &mut dl);
                let g = model.backward(&cache, &dl, &engine).unwrap();
                let analytic: Vec<f64> = g.model.data().iter().chain(g.cell.data()).copied().collect();

                let all = model.all_params();
                let mut probe = model.clone();
                let eps = 1e-6;
                let mut fd = vec![0.0; all.len()];
                for j in 0..all.len() {
                    let mut p = all.clone();
                    p.data_mut()[j] += eps;
                    probe.load_all_params(&p).unwrap();
                    let up = loss_at(&probe, &batch, &engine);
                    p.data_mut()[j] -= 2.0 * eps;
                    probe.load_all_params(&p).unwrap();
                    let down = loss_at(&probe, &batch, &engine);
                    fd[j] = (up - down) / (2.0 * eps);
                }
                let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let err = num / den;
                assert!(err < 1e-6, "{kind:?} full {full} pe {pe} {:?}: {err:e}", engine.mode);
                worst = worst.max(err);
            }
        }
    }
    eprintln!("worst model gradient relative error {worst:e}");
}

#[test]
fn all_params_round_trip() {
    let mut m = SingleLayerModel::<f64>::new(small_config(CellKind::ParaLstm, true, false), &mut Rng::new(3)).unwrap();
    let all = m.all_params();
    assert_eq!(all.len(), m.num_params());
    assert!(all.index_of("cell.a_f").is_some());
    let doubled = ParamSetExt::scaled(&all, 2.0);
    m.load_all_params(&doubled).unwrap();
    assert_eq!(m.all_params(), doubled);
    assert!(m.load_all_params(&pararnn::ParamSet::new()).is_err());
}

trait ParamSetExt {
    fn scaled(&self, k: f64) -> Self;
}

impl ParamSetExt for pararnn::ParamSet<f64> {
    fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        out
    }
}

#[test]
fn task_defaults_follow_the_recipe() {
    let parity = ModelConfig::for_task(&TaskSpec::parity(100), CellKind::ParaGru);
    assert!(!parity.full_block && !parity.positional && parity.clip_norm.is_none());
    let keep = ModelConfig::for_task(&TaskSpec::keep_nth(100), CellKind::ParaLstm);
    assert!(!keep.full_block && keep.positional && keep.clip_norm == Some(0.9));
    let mqar = ModelConfig::for_task(&TaskSpec::mqar(100), CellKind::ParaGru);
    assert!(mqar.full_block && mqar.conv_kernel == 4);
    assert_eq!((mqar.d_model, mqar.hidden, mqar.heads), (64, 64, 4));
    let m = SingleLayerModel::<f32>::new(parity, &mut Rng::new(0)).unwrap();
    // embedding 2x64, two norms, head 64x2 + 2, cell 3·64 + 3·(4·16·16) + 3·64
    assert_eq!(m.num_params(), 128 + 128 + 130 + 192 + 3072 + 192);
}

#[test]
fn bad_tokens_are_rejected() {
    let m = SingleLayerModel::<f64>::new(small_config(CellKind::ParaGru, false, false), &mut Rng::new(0)).unwrap();
    let e = &engines()[1];
    assert!(m.logits(&[0, 1, 5], 1, 3, e).is_err());
    assert!(m.logits(&[0, 1, 2], 2, 3, e).is_err());
}
