//! Run configuration and the shipped hyper-parameter presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::hex;
use crate::decoder::{DecodeFrom, DecoderConfig, DecoderKind};
use crate::encoder::EncoderConfig;
use crate::error::{KgeError, Result};

/// Full hyper-parameter record for one training run.
///
/// Dropout sites: `do_enc` on the encoder input and output, `do_sdp` on the
/// attention probabilities, `do_mha` after the output projection and `do_pff`
/// after the feed-forward activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dataset: String,
    pub decoder: DecoderKind,
    pub decode_from: DecodeFrom,
    pub d: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_h: usize,
    pub do_enc: f64,
    pub do_mha: f64,
    pub do_pff: f64,
    pub do_sdp: f64,
    /// Layer norm after the encoder block; `None` means on for TwoMult, off for Tucker.
    pub final_layer_norm: Option<bool>,
    /// Batch norm on ẽ_s before the Tucker mode-1 product.
    pub tucker_input_bn: bool,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `decay_step` epochs.
    pub decay_rate: f64,
    pub decay_step: usize,
    pub label_smoothing: f64,
    /// Label every known training target of a query instead of one per row.
    pub multi_label: bool,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Stop after this many evaluations without validation-MRR improvement.
    pub patience: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dataset: "FB15k-237".into(),
            decoder: DecoderKind::TwoMult,
            decode_from: DecodeFrom::Relation,
            d: 100,
            heads: 64,
            d_k: 32,
            d_v: 50,
            d_h: 2048,
            do_enc: 0.4,
            do_mha: 0.3,
            do_pff: 0.2,
            do_sdp: 0.1,
            final_layer_norm: None,
            tucker_input_bn: true,
            batch_size: 2048,
            lr: 0.001,
            decay_rate: 0.995,
            decay_step: 2,
            label_smoothing: 0.1,
            multi_label: false,
            epochs: 1000,
            seed: 0,
            eval_every: 5,
            eval_batch: 512,
            patience: None,
        }
    }
}

/// Canonical dataset key: lowercase with `_` mapped to `-`.
pub fn dataset_key(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('_', "-")
}

impl ModelConfig {
    /// The nine rows of the published settings table.
    pub fn presets() -> Vec<ModelConfig> {
        use DecoderKind::{Tucker, TwoMult};
        // (dataset, decoder, d, do_enc, do_mha, do_pff, do_sdp)
        let rows: [(&str, DecoderKind, usize, f64, f64, f64, f64); 9] = [
            ("FB15k-237", TwoMult, 100, 0.4, 0.3, 0.2, 0.1),
            ("FB15k-237", TwoMult, 64, 0.2, 0.3, 0.2, 0.1),
            ("FB15k-237", TwoMult, 32, 0.1, 0.1, 0.1, 0.1),
            ("FB15k-237", Tucker, 100, 0.4, 0.2, 0.3, 0.1),
            ("FB15k-237", Tucker, 64, 0.4, 0.2, 0.2, 0.1),
            ("FB15k-237", Tucker, 32, 0.1, 0.2, 0.1, 0.1),
            ("WN18RR", TwoMult, 100, 0.3, 0.4, 0.4, 0.1),
            ("WN18RR", Tucker, 64, 0.3, 0.4, 0.4, 0.1),
            ("WN18RR", Tucker, 32, 0.1, 0.1, 0.3, 0.4),
        ];
        rows.iter()
            .map(|&(dataset, decoder, d, do_enc, do_mha, do_pff, do_sdp)| {
                let wn = dataset == "WN18RR";
                ModelConfig {
                    dataset: dataset.into(),
                    decoder,
                    d,
                    do_enc,
                    do_mha,
                    do_pff,
                    do_sdp,
                    d_h: if wn { 100 } else { 2048 },
                    batch_size: if wn { 1024 } else { 2048 },
                    decay_rate: if wn { 1.0 } else { 0.995 },
                    ..ModelConfig::default()
                }
            })
            .collect()
    }

    pub fn preset(dataset: &str, decoder: DecoderKind, d: usize) -> Option<ModelConfig> {
        let key = dataset_key(dataset);
        Self::presets()
            .into_iter()
            .find(|c| dataset_key(&c.dataset) == key && c.decoder == decoder && c.d == d)
    }

    /// File stem used for the shipped preset configs, e.g. `fb15k-237_twomult_d100`.
    pub fn preset_name(&self) -> String {
        format!("{}_{}_d{}", dataset_key(&self.dataset), self.decoder, self.d)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ModelConfig = toml::from_str(text).map_err(|e| KgeError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KgeError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        if self.batch_size == 0 {
            return Err(KgeError::Config("batch_size must be >= 1".into()));
        }
        if self.decay_step == 0 {
            return Err(KgeError::Config("decay_step must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(KgeError::Config("label_smoothing must be in [0, 1)".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.decay_rate.is_nan() || self.decay_rate <= 0.0 {
            return Err(KgeError::Config("lr must be >= 0 and decay_rate > 0".into()));
        }
        if self.eval_batch == 0 {
            return Err(KgeError::Config("eval_batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            heads: self.heads,
            d_k: self.d_k,
            d_v: self.d_v,
            d_h: self.d_h,
            do_enc: self.do_enc,
            do_mha: self.do_mha,
            do_sdp: self.do_sdp,
            do_pff: self.do_pff,
            final_layer_norm: self
                .final_layer_norm
                .unwrap_or(self.decoder == DecoderKind::TwoMult),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            kind: self.decoder,
            decode_from: self.decode_from,
            tucker_input_bn: self.tucker_input_bn,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(Sha256::digest(json.as_bytes()).as_slice())
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::TwoMult => "twomult",
            DecoderKind::Tucker => "tucker",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = KgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "twomult" => Ok(DecoderKind::TwoMult),
            "tucker" => Ok(DecoderKind::Tucker),
            other => Err(KgeError::Config(format!(
                "unknown decoder `{other}`; expected one of {{twomult, tucker}}"
            ))),
        }
    }
}

impl FromStr for DecodeFrom {
    type Err = KgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relation" => Ok(DecodeFrom::Relation),
            "source" => Ok(DecodeFrom::Source),
            other => Err(KgeError::Config(format!(
                "unknown decode-from `{other}`; expected one of {{relation, source}}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_presets_with_table_values() {
        let presets = ModelConfig::presets();
        assert_eq!(presets.len(), 9);
        let fb = ModelConfig::preset("fb15k-237", DecoderKind::TwoMult, 100).unwrap();
        assert_eq!((fb.do_enc, fb.do_mha, fb.do_pff, fb.do_sdp), (0.4, 0.3, 0.2, 0.1));
        assert_eq!((fb.d_h, fb.batch_size, fb.decay_rate), (2048, 2048, 0.995));
        let wn = ModelConfig::preset("WN18RR", DecoderKind::Tucker, 32).unwrap();
        assert_eq!((wn.do_enc, wn.do_mha, wn.do_pff, wn.do_sdp), (0.1, 0.1, 0.3, 0.4));
        assert_eq!((wn.d_h, wn.batch_size, wn.decay_rate), (100, 1024, 1.0));
        assert!(presets.iter().all(|c| c.heads == 64 && c.d_k == 32 && c.d_v == 50));
        assert!(ModelConfig::preset("WN18RR", DecoderKind::TwoMult, 32).is_none());
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = ModelConfig::preset("WN18RR", DecoderKind::Tucker, 64).unwrap();
        let back = ModelConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let partial = ModelConfig::from_toml_str("d = 32\ndecoder = \"tucker\"\n").unwrap();
        assert_eq!(partial.d, 32);
        assert_eq!(partial.decoder, DecoderKind::Tucker);
        assert!(ModelConfig::from_toml_str("bogus = 1").is_err());
        assert!(ModelConfig::from_toml_str("do_enc = 1.0").is_err());
    }

    #[test]
    fn decoder_names() {
        assert_eq!("TwoMult".parse::<DecoderKind>().unwrap(), DecoderKind::TwoMult);
        let err = "conve".parse::<DecoderKind>().unwrap_err().to_string();
        assert!(err.contains("twomult") && err.contains("tucker"));
    }

    #[test]
    fn final_layer_norm_follows_decoder() {
        let mut c = ModelConfig::default();
        assert!(c.encoder_config().final_layer_norm);
        c.decoder = DecoderKind::Tucker;
        assert!(!c.encoder_config().final_layer_norm);
        c.final_layer_norm = Some(true);
        assert!(c.encoder_config().final_layer_norm);
    }

    #[test]
    fn hash_changes_with_fields() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
