//! Sequential vs parallel execution of the main pipeline stages.
//!
//! `cargo bench --bench pipeline`; with `--no-default-features` both variants
//! run sequentially, which is a quick way to see the rayon overhead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use wordprobe::attn_stats::aggregate;
use wordprobe::corpus::{CharVocab, Granularity, SegmentedSentence, SyntheticLanguage, SyntheticParams};
use wordprobe::encoder::{train_mlm, MlmHyper};
use wordprobe::probe::{layer_sweep, FeatureSet, ProbeConfig};
use wordprobe::{Encoder, Exec, ForwardTrace, ModelConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

struct Fixture {
    sentences: Vec<SegmentedSentence>,
    vocab: CharVocab,
    model: Encoder<f32>,
    traces: Vec<ForwardTrace>,
}

fn fixture() -> Fixture {
    let lang = SyntheticLanguage::new(SyntheticParams::default());
    let sentences: Vec<SegmentedSentence> =
        lang.sample(200, Granularity::Fine, 1).iter().flat_map(|s| s.split_to_fit(30)).collect();
    let vocab = CharVocab::build(&sentences, 1).unwrap();
    let cfg =
        ModelConfig { layers: 4, heads: 4, dim: 64, vocab_size: vocab.size(), max_len: 32, dropout: 0.1, seed: 7 };
    let model = Encoder::new(cfg).unwrap();
    let traces = sentences.iter().map(|s| model.trace_sentence(&vocab, s).unwrap()).collect();
    Fixture { sentences, vocab, model, traces }
}

fn stages(c: &mut Criterion) {
    let f = fixture();
    let items: Vec<_> = f.traces.iter().zip(&f.sentences).collect();
    let cfg = f.model.config().clone();

    let mut g = c.benchmark_group("head_stats");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| aggregate(cfg.layers, cfg.heads, black_box(&items), exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("trace");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(black_box(&f.sentences), |s| f.model.trace_sentence(&f.vocab, s).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("mlm_epoch");
    g.sample_size(10);
    let hyper = MlmHyper { epochs: 1, ..MlmHyper::default() };
    let small = ModelConfig { layers: 2, dim: 32, ..cfg.clone() };
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_mlm(black_box(&f.sentences[..64]), &f.vocab, small.clone(), &hyper, exec).unwrap())
        });
    }
    g.finish();

    let features = FeatureSet::from_traces(&items).unwrap();
    let probe = ProbeConfig { lr: 1e-3, epochs: 1, ..ProbeConfig::default() };
    let mut g = c.benchmark_group("probe_sweep");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| layer_sweep(&features, &features, &features, black_box(&probe), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
