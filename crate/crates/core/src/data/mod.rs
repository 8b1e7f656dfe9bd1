//! Manifests, tensor files, metrics and synthetic data.

mod manifest;
mod metrics;
mod synth;
mod tensor_file;

use rayon::prelude::*;

use crate::encoders::{load_sequence_features, tokenize, Provider, Vocab};
use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, ModelInput, SequenceInput};

pub use manifest::{
    parse_manifest, parse_manifest_str, thousands, Manifest, ManifestStats, Sample, Split,
    SplitCounts, MULTIBULLY_STATS, TWITTER_STATS,
};
pub use metrics::{compute_metrics, f1_score, Averaging, MetricsReport};
pub use synth::{synth_dataset, SynthConfig, HOLDOUT_FRACTION};
pub use tensor_file::{
    decode_tensor, encode_tensor, read_tensor_file, write_tensor_file, MAGIC, MAX_RANK,
};

/// Turns manifest samples into model inputs: tokenizes (or loads features
/// for) text and caption, and loads region features when the variant needs
/// them. Feature files are read in parallel; the output keeps input order.
pub fn load_inputs(
    manifest: &Manifest,
    samples: &[&Sample],
    vocab: Option<&Vocab>,
    config: &ModelConfig,
) -> Result<Vec<ModelInput>> {
    let enc = &config.encoder;
    let sequence = |sample: &Sample,
                    text: &str,
                    path: Option<&std::path::PathBuf>,
                    len: usize,
                    what: &str|
     -> Result<SequenceInput> {
        match enc.provider {
            Provider::Toy => {
                let vocab = vocab.ok_or_else(|| {
                    CoreError::Config("the toy encoder needs a vocabulary".into())
                })?;
                Ok(SequenceInput::Tokens(tokenize(text, vocab, len)?))
            }
            Provider::File => {
                let path = path.ok_or_else(|| {
                    CoreError::Data(format!("sample {}: no {what} feature file", sample.id))
                })?;
                Ok(SequenceInput::Features(load_sequence_features(
                    &manifest.resolve(path),
                    (len, config.d),
                )?))
            }
        }
    };
    samples
        .par_iter()
        .map(|s| {
            let text = sequence(
                s,
                &s.text,
                s.text_features_path.as_ref(),
                enc.text_len,
                "text",
            )?;
            let caption = if config.use_tau_sc {
                Some(sequence(
                    s,
                    &s.caption,
                    s.caption_features_path.as_ref(),
                    enc.caption_len,
                    "caption",
                )?)
            } else {
                None
            };
            let regions = match (&s.region_features_path, config.use_tau_si) {
                (Some(p), true) => Some(read_tensor_file(&manifest.resolve(p))?),
                (None, true) => {
                    return Err(CoreError::Data(format!(
                        "sample {}: region features are required by this variant",
                        s.id
                    )))
                }
                (_, false) => None,
            };
            Ok(ModelInput {
                id: s.id.clone(),
                text,
                caption,
                regions,
                label: s.label,
            })
        })
        .collect()
}
