//! Inputs shared by the criterion benchmarks.

use ooc_core::fixtures::{synthetic_corpus, SyntheticSpec};
use ooc_core::trainer::{build_samples, SampleSpec};
use ooc_core::{BpeVocab, CaptionModel, LabelSet, ModelConfig, TrainSample};

pub struct ModelBench {
    pub model: CaptionModel,
    pub samples: Vec<TrainSample>,
    pub vocab: BpeVocab,
}

/// Desk-width model over the tiny synthetic corpus.
pub fn model_bench(d_vis: usize, n_obj: usize) -> ModelBench {
    let corpus = synthetic_corpus(&SyntheticSpec::tiny(d_vis, n_obj)).expect("synthetic corpus");
    let vocab = BpeVocab::train(&corpus.tokenizer_corpus(&LabelSet::default()), 400).expect("tokenizer");
    let mut config = ModelConfig::desk(vocab.vocab_size(), vocab.specials(), d_vis);
    config.n_obj = n_obj;
    config.graph.k = config.graph.k.min(n_obj.saturating_sub(1)).max(1);
    let samples = build_samples(
        &corpus.features,
        &corpus.ner,
        &vocab,
        SampleSpec {
            text_len: config.text_len,
            include_types: true,
            max_caption_len: config.max_caption_len,
        },
    )
    .expect("samples");
    ModelBench {
        model: CaptionModel::new(config).expect("model"),
        samples,
        vocab,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_inputs_build() {
        let b = model_bench(16, 4);
        assert_eq!(b.samples.len(), 8);
        assert_eq!(b.model.config().n_obj, 4);
    }
}
