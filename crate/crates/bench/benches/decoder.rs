use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dbeam_core::align::{asg_loss, forward_score, TargetTokens, TransitionMatrix};
use dbeam_core::dbd::{dbd_backward, dbd_forward, DecoderOpts};
use dbeam_core::lexicon::{build_trie, Lexicon, Trie};
use dbeam_core::lm::WordLm;
use dbeam_core::token::TokenSet;
use dbeam_core::Mat;

struct Fixture {
    tokens: TokenSet,
    lexicon: Lexicon,
    trie: Trie,
    em: Mat,
    g: TransitionMatrix,
    y: TargetTokens,
    words: Vec<usize>,
}

fn fixture(frames: usize) -> Fixture {
    let tokens = TokenSet::english();
    let word_list = [
        "cat", "car", "care", "a", "an", "and", "band", "bat", "top", "stop", "step", "steps",
        "dog", "dig", "den", "pen", "pens", "apple", "grape", "grapes",
    ];
    let lexicon = Lexicon::from_words(word_list, &tokens).unwrap();
    let trie = build_trie(&lexicon, &tokens).unwrap();
    let n = tokens.size();
    let em = Mat::from_fn(frames, n, |t, i| ((t * 31 + i * 7) as f64 * 0.37).sin());
    let mut g = TransitionMatrix::zeros(n);
    g.weights = Mat::from_fn(n, n, |a, b| ((a * 13 + b) as f64 * 0.11).cos() * 0.3);
    let target = ["a", "cat", "and", "a", "dog"];
    let y = TargetTokens::new(lexicon.target_tokens(&target, &tokens).unwrap()).unwrap();
    let words = lexicon.word_ids(&target).unwrap();
    Fixture {
        tokens,
        lexicon,
        trie,
        em,
        g,
        y,
        words,
    }
}

fn bench_beam_pass(c: &mut Criterion) {
    let mut group = c.benchmark_group("beam_pass");
    for &beam in &[16usize, 64, 256] {
        let fx = fixture(120);
        let opts = DecoderOpts {
            beam_size: beam,
            apply_eos: true,
        };
        group.bench_with_input(BenchmarkId::new("forward", beam), &beam, |b, _| {
            b.iter(|| {
                dbd_forward(
                    &fx.em,
                    &fx.g,
                    &fx.trie,
                    &WordLm::Zero,
                    &fx.y,
                    &fx.words,
                    &opts,
                )
                .unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", beam), &beam, |b, _| {
            b.iter(|| {
                let (rep, lat) = dbd_forward(
                    &fx.em,
                    &fx.g,
                    &fx.trie,
                    &WordLm::Zero,
                    &fx.y,
                    &fx.words,
                    &opts,
                )
                .unwrap();
                dbd_backward(&lat, &fx.em, &fx.g, &WordLm::Zero, &rep).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_align(c: &mut Criterion) {
    let mut group = c.benchmark_group("align");
    for &frames in &[60usize, 240] {
        let fx = fixture(frames);
        group.bench_with_input(BenchmarkId::new("forward", frames), &frames, |b, _| {
            b.iter(|| forward_score(&fx.em, &fx.g, &fx.y))
        });
        group.bench_with_input(BenchmarkId::new("asg_loss", frames), &frames, |b, _| {
            b.iter(|| asg_loss(&fx.em, &fx.g, &fx.y).unwrap())
        });
    }
    group.finish();
}

fn bench_trie(c: &mut Criterion) {
    let fx = fixture(10);
    let spellings: Vec<Vec<usize>> = (0..fx.lexicon.len())
        .map(|w| fx.lexicon.spelling(w).to_vec())
        .collect();
    c.bench_function("trie_walk_lexicon", |b| {
        b.iter(|| {
            let mut live = 0usize;
            for sp in &spellings {
                let mut s = dbeam_core::TrieState::ROOT;
                for &tok in sp {
                    s = fx.trie.step(s, tok);
                }
                if fx.trie.is_completing(s) {
                    live += 1;
                }
            }
            live
        })
    });
    let _ = &fx.tokens;
}

criterion_group!(benches, bench_beam_pass, bench_align, bench_trie);
criterion_main!(benches);
