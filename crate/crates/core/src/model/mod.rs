//! The encoder: embeddings for text and pinyin slots, masked self-attention
//! blocks, and an output head tied to the word embeddings.

pub mod checkpoint;
mod config;
pub mod forward;
mod params;

pub use checkpoint::{load_model, model_container, read_model, save_model, Container, ModelManifest};
pub use config::ModelConfig;
pub use forward::{
    embed, encode, encode_pinyin_only, forward_phonetics, forward_raw, predict_logits, AttentionMaps, Noise,
    PhoneticsOutput,
};
pub use params::{BoundParams, ModelParams, INIT_STD};

use crate::data::CorrectionExample;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor};
use crate::pinyin::PinyinTable;
use crate::scalar::Scalar;
use crate::textcodec::{encode_example, Batch, CharVocab, PhonemeVocab, UNK_ID};

/// Configuration plus parameters.
#[derive(Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params)
            .finish()
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let template = ModelParams::<T>::zeros(&config);
        if template.names() != params.names()
            || template
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Config("parameters do not match the configuration".into()));
        }
        Ok(Model { config, params })
    }

    fn eval_graph(&self) -> (Graph<T>, BoundParams) {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        (g, p)
    }

    /// Text and pinyin logits of the phonetics-aware pass, each `[B*n, |V|]`,
    /// without dropout.
    pub fn phonetics_logits(&self, batch: &Batch) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mut g, p) = self.eval_graph();
        let out = forward_phonetics(&mut g, &p, &self.config, batch, &mut Noise::Off, None)?;
        Ok((g.value(out.text_logits).clone(), g.value(out.pinyin_logits).clone()))
    }

    /// Logits of the raw-text pass, `[B*n, |V|]`.
    pub fn raw_logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        let (mut g, p) = self.eval_graph();
        let out = forward_raw(&mut g, &p, &self.config, batch, &mut Noise::Off)?;
        Ok(g.value(out).clone())
    }

    /// Final hidden states of the phonetics-aware pass, `[B, 2n, d]`.
    pub fn phonetic_hidden(&self, batch: &Batch) -> Result<Tensor<T>> {
        let (mut g, p) = self.eval_graph();
        let out = forward_phonetics(&mut g, &p, &self.config, batch, &mut Noise::Off, None)?;
        Ok(g.value(out.hidden).clone())
    }

    /// Hidden states from encoding the pinyin slots alone, `[B, n, d]`.
    pub fn pinyin_only_hidden(&self, batch: &Batch) -> Result<Tensor<T>> {
        let (mut g, p) = self.eval_graph();
        let out = encode_pinyin_only(&mut g, &p, &self.config, batch, &mut Noise::Off)?;
        Ok(g.value(out).clone())
    }

    /// Attention weights of every layer, each `[B, heads, 2n, 2n]`.
    pub fn attention(&self, batch: &Batch) -> Result<AttentionMaps<T>> {
        let (mut g, p) = self.eval_graph();
        let mut maps = Vec::with_capacity(self.config.layers);
        forward_phonetics(&mut g, &p, &self.config, batch, &mut Noise::Off, Some(&mut maps))?;
        Ok(maps)
    }

    /// Argmax ids of the text positions, one vector per example (ties go to
    /// the lowest id).
    pub fn predict_ids(&self, batch: &Batch) -> Result<Vec<Vec<usize>>> {
        let (text, _) = self.phonetics_logits(batch)?;
        let ids = text.argmax_rows();
        Ok(batch
            .lengths
            .iter()
            .enumerate()
            .map(|(k, &len)| ids[k * batch.n..k * batch.n + len].to_vec())
            .collect())
    }
}

/// Everything needed to turn sentences into model inputs.
#[derive(Clone, Copy)]
pub struct Codec<'a> {
    pub chars: &'a CharVocab,
    pub phonemes: &'a PhonemeVocab,
    pub table: &'a PinyinTable,
}

impl Codec<'_> {
    pub fn batch(&self, examples: &[CorrectionExample], with_labels: bool, max_len: usize) -> Result<Batch> {
        let items = examples
            .iter()
            .map(|ex| encode_example(ex, self.chars, self.phonemes, self.table, with_labels, max_len))
            .collect::<Result<Vec<_>>>()?;
        Batch::collate(&items)
    }

    /// Maps predicted ids back to text. A reserved prediction, or a source
    /// character the vocabulary does not know, keeps the source character.
    pub fn decode_prediction(&self, source: &[char], ids: &[usize]) -> String {
        source
            .iter()
            .zip(ids)
            .map(|(&x, &id)| match self.chars.char_of(id) {
                Some(c) if self.chars.id(x) != UNK_ID => c,
                _ => x,
            })
            .collect()
    }

    /// Predicted corrections for the sources of `examples`.
    pub fn predict_examples<T: Scalar>(
        &self,
        model: &Model<T>,
        examples: &[CorrectionExample],
        batch_size: usize,
    ) -> Result<Vec<Vec<char>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let batch = self.batch(chunk, false, model.config.max_len)?;
            for (ex, ids) in chunk.iter().zip(model.predict_ids(&batch)?) {
                out.push(self.decode_prediction(&ex.source, &ids).chars().collect());
            }
        }
        Ok(out)
    }

    /// Corrects each sentence; output lengths equal input lengths.
    pub fn correct_all<T: Scalar>(
        &self,
        model: &Model<T>,
        sentences: &[&str],
        batch_size: usize,
    ) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(batch_size.max(1)) {
            let nonempty: Vec<CorrectionExample> = chunk
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| CorrectionExample::clean(s))
                .collect();
            let mut preds = if nonempty.is_empty() {
                Vec::new()
            } else {
                let batch = self.batch(&nonempty, false, model.config.max_len)?;
                model.predict_ids(&batch)?
            }
            .into_iter();
            for s in chunk {
                if s.is_empty() {
                    out.push(String::new());
                    continue;
                }
                let source: Vec<char> = s.chars().collect();
                let ids = preds.next().expect("one prediction per non-empty sentence");
                out.push(self.decode_prediction(&source, &ids));
            }
        }
        Ok(out)
    }
}

/// Corrects one sentence: the text-position argmax, with the pinyin-position
/// predictions discarded.
pub fn infer_correct<T: Scalar>(
    sentence: &str,
    model: &Model<T>,
    chars: &CharVocab,
    phonemes: &PhonemeVocab,
    table: &PinyinTable,
) -> Result<String> {
    let codec = Codec { chars, phonemes, table };
    Ok(codec.correct_all(model, &[sentence], 1)?.remove(0))
}

/// Per-layer, per-head `2n × 2n` attention weights for one sentence, stored
/// as `layer{l}.head{h}`.
pub fn dump_attention<T: Scalar>(model: &Model<T>, sentence: &str, codec: Codec<'_>) -> Result<Container> {
    let ex = CorrectionExample::clean(sentence);
    let batch = codec.batch(std::slice::from_ref(&ex), false, model.config.max_len)?;
    let maps = model.attention(&batch)?;
    let t = 2 * batch.n;
    let manifest = serde_json::json!({
        "kind": checkpoint::ATTENTION_KIND,
        "sentence": sentence,
        "n": batch.n,
        "layers": model.config.layers,
        "heads": model.config.heads,
    });
    let mut c = Container::new(manifest);
    for (l, m) in maps.iter().enumerate() {
        for h in 0..model.config.heads {
            let data = m.data()[h * t * t..(h + 1) * t * t].to_vec();
            c.push(format!("layer{l}.head{h}"), &Tensor::new(&[t, t], data)?);
        }
    }
    Ok(c)
}
