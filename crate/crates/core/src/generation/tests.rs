use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{loss_and_grad, per_sample_losses, Batch, ModelConfig, NeighborSet};

#[test]
fn left_pad_examples() {
    let (p, n) = left_pad(&[1, 2, 3], 64);
    assert_eq!((p.len(), n), (64, 61));
    assert_eq!(&p[61..], &[1, 2, 3]);
    assert_eq!(left_pad(&[7; 64], 64).1, 0);
    let (p, n) = left_pad(&[7; 70], 64);
    assert_eq!((p.len(), n), (128, 58));
    assert!(p[64..].iter().all(|&t| t == 7));
}

proptest! {
    #[test]
    fn left_pad_formula(n in 0usize..300, m in 2usize..80) {
        let toks = vec![5; n];
        let (p, pads) = left_pad(&toks, m);
        prop_assert_eq!(pads, (m - n % m) % m);
        prop_assert_eq!(p.len() % m, 0);
        prop_assert_eq!(&p[pads..], &toks[..]);
    }
}

#[test]
fn greedy_takes_first_maximum() {
    let g = SamplingParams::greedy(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_token(&[1.0f64, 2.0, 0.5], &g, &mut rng).unwrap(), 1);
    assert_eq!(sample_token(&[3.0f32, 1.0, 3.0], &g, &mut rng).unwrap(), 0);
    assert!(sample_token(&[f64::NAN, 1.0], &g, &mut rng).is_err());
}

#[test]
fn nucleus_support_examples() {
    assert_eq!(nucleus_support(&[0.5, 0.3, 0.15, 0.05], 0.9), vec![0, 1, 2]);
    assert_eq!(nucleus_support(&[0.05, 0.15, 0.3, 0.5], 0.9), vec![3, 2, 1]);
    assert_eq!(nucleus_support(&[0.5, 0.3, 0.15, 0.05], 1.0), vec![0, 1, 2, 3]);
    assert_eq!(nucleus_support(&[0.5, 0.3, 0.15, 0.05], 0.5), vec![0]);
}

#[test]
fn nucleus_samples_stay_in_support() {
    let probs = [0.5f64, 0.3, 0.15, 0.05];
    let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = [0usize; 4];
    let p = SamplingParams { top_p: 0.9, ..SamplingParams::default() };
    for _ in 0..4000 {
        seen[sample_token(&logits, &p, &mut rng).unwrap() as usize] += 1;
    }
    assert_eq!(seen[3], 0);
    assert!(seen[..3].iter().all(|&c| c > 0));
    let freq0 = seen[0] as f64 / 4000.0;
    assert!((freq0 - 0.5 / 0.95).abs() < 0.03, "{freq0}");

    let full = SamplingParams { top_p: 1.0, ..SamplingParams::default() };
    let mut seen = [0usize; 4];
    for _ in 0..4000 {
        seen[sample_token(&logits, &full, &mut rng).unwrap() as usize] += 1;
    }
    assert!(seen.iter().all(|&c| c > 0));
}

#[test]
fn sampling_params_validation() {
    assert!(SamplingParams { top_p: 0.0, ..Default::default() }.validate().is_err());
    assert!(SamplingParams { top_p: 1.2, ..Default::default() }.validate().is_err());
    assert!(SamplingParams { temperature: 0.0, ..Default::default() }.validate().is_err());
    assert!(SamplingParams::default().validate().is_ok());
}

fn model(m: usize, max_seq: usize) -> RetroParams<f32> {
    let c = ModelConfig {
        n_layers: 1,
        hidden: 8,
        n_heads: 2,
        chunk_size: m,
        k_neighbors: 2,
        cca_layers: vec![1],
        enc_layers: 1,
        max_seq,
        init_std: 0.5,
        ..ModelConfig::default()
    };
    RetroParams::init(&c, 3).unwrap()
}

struct Counting {
    inner: FixedNeighbors,
    calls: AtomicUsize,
}

impl NeighborSource for Counting {
    fn retrieve(&self, chunk: &[TokenId], k: usize) -> Result<Vec<Neighbor>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.retrieve(chunk, k)
    }
}

fn constant_source(m: usize) -> Counting {
    let tokens: Vec<TokenId> = (0..2 * m as u32).map(|i| 40 + i % 50).collect();
    Counting {
        inner: FixedNeighbors(vec![Neighbor::from_tokens(tokens)]),
        calls: AtomicUsize::new(0),
    }
}

fn drive(session: &mut GenerationSession<'_, f32>, prompt: &[TokenId], steps: usize, step: usize) {
    session.start(prompt).unwrap();
    for i in 0..steps {
        session.next_logits().unwrap();
        session.accept(65 + (i % 20) as TokenId);
        assert_eq!(session.buffer().len() % 4, 0);
        assert!(session.tokens_since_retrieval() < step);
    }
}

#[test]
fn refresh_count_is_ceiling_of_tokens_over_step() {
    let params = model(4, 32);
    let src = constant_source(4);
    let mut s = GenerationSession::new(&params, &src, 2).unwrap();
    drive(&mut s, &[1, 2, 3, 4, 5, 6, 7, 8, 9], 10, 2);
    assert_eq!(s.refresh_queries(), 5);
    assert_eq!(s.prefill_queries(), 1);
    assert_eq!(src.calls.load(Ordering::SeqCst), 6);

    let params = model(64, 256);
    let src = constant_source(64);
    let mut s = GenerationSession::new(&params, &src, 64).unwrap();
    s.start(&[10; 5]).unwrap();
    for _ in 0..200 {
        s.next_logits().unwrap();
        s.accept(66);
    }
    assert_eq!(s.refresh_queries(), 4);
    assert_eq!(s.prefill_queries(), 0);
}

#[test]
fn left_pads_shift_out_then_buffer_grows() {
    let params = model(4, 16);
    let src = constant_source(4);
    let mut s = GenerationSession::new(&params, &src, 4).unwrap();
    s.start(&[1]).unwrap();
    assert_eq!(s.buffer(), &[PAD_ID, PAD_ID, PAD_ID, 1]);
    assert_eq!(s.left_pad_count(), 3);
    for t in 2..=4 {
        s.next_logits().unwrap();
        s.accept(t);
    }
    assert_eq!(s.buffer(), &[1, 2, 3, 4]);
    s.next_logits().unwrap();
    s.accept(5);
    assert_eq!(s.buffer(), &[1, 2, 3, 4, 5, PAD_ID, PAD_ID, PAD_ID]);
    for t in 6..=20 {
        s.next_logits().unwrap();
        s.accept(t);
    }
    assert_eq!(s.buffer().len(), 16);
    assert_eq!(s.buffer()[0], 5);
}

#[test]
fn constant_neighbors_make_greedy_output_step_invariant() {
    let params = model(64, 256);
    let src = constant_source(64);
    let prompt: Vec<TokenId> = (0..70).map(|i| 30 + i % 40).collect();
    let run = |s: usize| {
        let mut sess = GenerationSession::new(&params, &src, s).unwrap();
        let out = sess.generate(&prompt, &SamplingParams::greedy(80)).unwrap();
        (out, sess.refresh_queries())
    };
    let (a, qa) = run(1);
    let (b, _) = run(2);
    let (c, qc) = run(64);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(qa, a.len() + usize::from(a.len() < 80));
    assert_eq!(qc, a.len().max(1).div_ceil(64));
}

#[test]
fn generated_tokens_exclude_pads_and_respect_limits() {
    let params = model(4, 16);
    let src = FixedNeighbors::default();
    let mut s = GenerationSession::new(&params, &src, 3).unwrap();
    let sampling = SamplingParams { seed: 9, max_tokens: 30, ..SamplingParams::default() };
    let out = s.generate(&[72, 105], &sampling).unwrap();
    assert!(out.len() <= 30);
    assert!(out.iter().all(|&t| t != PAD_ID));
    assert!(GenerationSession::new(&params, &src, 0).is_err());
    assert!(GenerationSession::new(&params, &src, 5).is_err());
    let mut s = GenerationSession::new(&params, &src, 3).unwrap();
    assert!(matches!(s.start(&[1; 17]), Err(Error::Length(_))));
}

#[test]
fn nucleus_generation_is_seed_deterministic() {
    let params = model(4, 32);
    let src = constant_source(4);
    let sampling = SamplingParams { seed: 4, max_tokens: 12, ..SamplingParams::default() };
    let gen = || GenerationSession::new(&params, &src, 2).unwrap().generate(&[50, 51, 52], &sampling).unwrap();
    assert_eq!(gen(), gen());
}

fn sanders() -> Evidence {
    Evidence {
        title: "Sanders Associates".into(),
        text: "Sanders Associates Sanders Associates was a defense contractor in Nashua, New Hampshire".into(),
    }
}

const QUESTION: &str = "who invented the first home video security system";

#[test]
fn templates_render_exactly() {
    let a = format_qa(QUESTION, &[sanders()], QaTemplate::A, 2).unwrap();
    assert!(a.decoder_text.starts_with(
        "title: Sanders Associates, source: Sanders Associates Sanders Associates was a defense contractor"
    ));
    assert!(a.decoder_text.ends_with(&format!(" \n question: {QUESTION} \n answer:")));
    assert!(a.encoder_evidences.is_empty());
    let b = format_qa(QUESTION, &[sanders()], QaTemplate::B, 2).unwrap();
    assert_eq!(
        b.decoder_text,
        "question: who invented the first home video security system \n answer:"
    );
    assert_eq!(b.encoder_evidences, vec![sanders().text]);
    for t in [a.decoder_text, b.decoder_text] {
        assert_eq!(t.matches(QUESTION).count(), 1);
    }
    assert!(matches!(format_qa(QUESTION, &[], QaTemplate::A, 2), Err(Error::Argument(_))));
    assert_eq!("a".parse::<QaTemplate>().unwrap(), QaTemplate::A);
    assert!("C".parse::<QaTemplate>().is_err());
}

#[test]
fn evidence_split_between_decoder_and_encoder() {
    let ev: Vec<Evidence> = (0..5)
        .map(|i| Evidence { title: format!("t{i}"), text: format!("text {i}") })
        .collect();
    let a = format_qa("q", &ev, QaTemplate::A, 4).unwrap();
    assert!(a.decoder_text.contains("text 0"));
    assert_eq!(a.encoder_evidences, vec!["text 1", "text 2", "text 3", "text 4"]);
    let b = format_qa("q", &ev, QaTemplate::B, 4).unwrap();
    assert_eq!(b.encoder_evidences, vec!["text 0", "text 1", "text 2", "text 3"]);
    let nb = evidence_neighbors(&a.encoder_evidences[..1], 2, 8);
    assert_eq!(nb[0].tokens, vec![116, 101, 120, 116, 32, 49, PAD_ID, PAD_ID]);
    assert_eq!(nb[1], Neighbor::pad(8));
}

#[test]
fn qa_padding_layout() {
    let s = QaSample { context: vec![1, 2, 3], answer: vec![9; 5] };
    let p = batch_pad_qa(std::slice::from_ref(&s), 64, 512).unwrap();
    assert_eq!(p.tokens[0].len(), 128);
    assert_eq!(p.chunks, 2);
    assert_eq!(p.left_pads, vec![61]);
    assert_eq!(p.answer_mask[0].iter().filter(|&&b| b).count(), 5);
    assert_eq!(&p.tokens[0][61..69], &[1, 2, 3, 9, 9, 9, 9, 9]);
    assert_eq!(p.pad_mask[0].iter().filter(|&&b| b).count(), 61 + 59);

    let long = QaSample { context: vec![1; 70], answer: vec![9; 5] };
    let p = batch_pad_qa(&[s.clone(), long], 64, 512).unwrap();
    assert_eq!(p.chunks, 3);
    assert!(p.tokens.iter().all(|t| t.len() == 192));
    assert!(p.tokens[0][128..].iter().all(|&t| t == PAD_ID));
    assert!(p.pad_mask[0][128..].iter().all(|&b| b));

    assert!(matches!(batch_pad_qa(&[s], 64, 64), Err(Error::Length(_))));
    let batch = batch_pad_qa(&[QaSample { context: vec![1, 2, 3], answer: vec![9; 5] }], 64, 512)
        .unwrap()
        .into_batch(NeighborSet::padded(1, 2, 0, 0));
    assert_eq!(batch.loss_mask[0].iter().filter(|&&b| b).count(), 5);
    assert!(batch.loss_mask[0][63]);
    assert_eq!(batch.targets[0][63], 9);
}

#[test]
fn padded_qa_losses_match_unbatched() {
    let params = model(4, 32);
    let c = params.config.clone();
    let samples = vec![
        QaSample { context: vec![10, 11, 12], answer: vec![20, 21, 22, 23, 24] },
        QaSample { context: (0..9).map(|i| 30 + i).collect(), answer: vec![40, 41] },
        QaSample { context: vec![50], answer: vec![60] },
    ];
    let evid = |i: usize| evidence_neighbors(&[format!("evidence {i}")], c.k_neighbors, c.neighbor_len());
    let neighbors_for = |idx: &[usize], chunks: usize| NeighborSet {
        k: c.k_neighbors,
        neighbor_len: c.neighbor_len(),
        items: idx.iter().map(|&i| vec![evid(i); chunks]).collect(),
    };
    let padded = batch_pad_qa(&samples, 4, 32).unwrap();
    let chunks = padded.chunks;
    let batch: Batch = padded.into_batch(neighbors_for(&[0, 1, 2], chunks));
    let per = per_sample_losses(&params, &batch).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let solo = batch_pad_qa(std::slice::from_ref(s), 4, 32).unwrap();
        let n = solo.chunks;
        let (loss, _) = loss_and_grad(&params, &solo.into_batch(neighbors_for(&[i], n))).unwrap();
        assert!((loss - per[i]).abs() < 1e-6, "sample {i}: {loss} vs {}", per[i]);
    }
}

#[test]
fn reads_qa_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("qa.jsonl");
    std::fs::write(
        &p,
        "{\"question\": \"q1\", \"answers\": [\"a\"], \"passages\": [{\"title\": \"t\", \"text\": \"x\"}]}\n\n{\"question\": \"q2\", \"answers\": []}\n",
    )
    .unwrap();
    let recs = read_qa(&p).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].passages[0].title, "t");
    std::fs::write(&p, "{\"question\": \"q1\"}\n").unwrap();
    assert!(matches!(read_qa(&p), Err(Error::Parse { line: 1, .. })));
}
