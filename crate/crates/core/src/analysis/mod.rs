//! Closed-form parameter counts and first-derivative saliency.

mod render;

use serde::{Deserialize, Serialize};

pub use render::{render_saliency, RenderFormat};

use crate::error::{Error, Result};
use crate::metanet::MetaNetKind;
use crate::model::{Method, Model, ModelSpec};
use crate::text::EncodedDocument;

/// Trainable scalar counts by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    /// Filter generator: meta-network weights and biases (batch norm
    /// excluded), the LCU look-up tensor, or the shared convolution filters.
    pub context_unit: usize,
    pub batch_norm: usize,
    pub fc: usize,
    pub total: usize,
}

impl ParamBreakdown {
    /// Everything that produces the context units, batch norm included.
    pub fn context_unit_total(&self) -> usize {
        self.context_unit + self.batch_norm
    }
}

/// Counts the parameters a model with `spec` instantiates.
///
/// Batch-norm running statistics are not trainable and are not counted.
pub fn count_params(spec: &ModelSpec) -> ParamBreakdown {
    let ModelSpec { h, v, n, u, .. } = *spec;
    let r = spec.region();
    let hr = h * r;
    let lstm = 4 * hr * h + 4 * hr * hr + 4 * hr;
    let (context_unit, batch_norm) = match spec.method {
        Method::Lre => (v * h * r, 0),
        Method::Conv => (h * h * r, 0),
        Method::Are => match spec.meta {
            MetaNetKind::Cnn => (h * hr * r + hr, 2 * hr),
            MetaNetKind::SmallCnn => (h * h * r + h, 2 * h),
            MetaNetKind::FactoredCnn => (u * h * r + u + u * hr, 2 * u),
            MetaNetKind::Lstm => (lstm, 0),
            MetaNetKind::Gru => (3 * hr * h + 3 * hr * hr + 6 * hr, 0),
            MetaNetKind::Ensemble => (h * hr * r + hr + lstm, 2 * hr),
        },
    };
    let embedding = v * h;
    let fc = h * n + n;
    ParamBreakdown {
        embedding,
        context_unit,
        batch_norm,
        fc,
        total: embedding + context_unit + batch_norm + fc,
    }
}

/// Benchmark corpus sizes with reference parameter totals for the default
/// ARE (h=256, region 9) and LRE (h=128, region 7) configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct KnownDataset {
    pub name: &'static str,
    pub aliases: &'static [&'static str],
    pub vocab: usize,
    pub classes: usize,
    pub are_total: usize,
    pub lre_total: usize,
    pub lcu_only: usize,
}

/// Context-unit generator size of the default ARE configuration; it does
/// not depend on the vocabulary.
pub const REFERENCE_ACU_ONLY: usize = 5_315_328;

pub const KNOWN_DATASETS: [KnownDataset; 8] = [
    KnownDataset {
        name: "ag",
        aliases: &["ag_news", "agnews"],
        vocab: 42_783,
        classes: 4,
        are_total: 16_268_804,
        lre_total: 43_810_308,
        lcu_only: 38_333_568,
    },
    KnownDataset {
        name: "sogou",
        aliases: &["sogou_news"],
        vocab: 99_394,
        classes: 5,
        are_total: 30_761_477,
        lre_total: 101_780_101,
        lcu_only: 89_057_024,
    },
    KnownDataset {
        name: "dbpedia",
        aliases: &["dbp"],
        vocab: 227_863,
        classes: 14,
        are_total: 63_651_854,
        lre_total: 233_333_518,
        lcu_only: 204_165_248,
    },
    KnownDataset {
        name: "yelp-p",
        aliases: &["yelp_polarity", "yelp-polarity"],
        vocab: 115_298,
        classes: 2,
        are_total: 34_832_130,
        lre_total: 118_065_410,
        lcu_only: 103_307_008,
    },
    KnownDataset {
        name: "yelp-f",
        aliases: &["yelp_full", "yelp-full"],
        vocab: 124_273,
        classes: 5,
        are_total: 37_130_501,
        lre_total: 127_256_197,
        lcu_only: 111_348_608,
    },
    KnownDataset {
        name: "yahoo",
        aliases: &["yahoo_answers", "yah"],
        vocab: 361_926,
        classes: 10,
        are_total: 97_970_954,
        lre_total: 370_613_514,
        lcu_only: 324_285_696,
    },
    KnownDataset {
        name: "amazon-p",
        aliases: &["amazon_polarity", "amazon-polarity", "amz-p"],
        vocab: 394_385,
        classes: 2,
        are_total: 106_278_402,
        lre_total: 403_850_498,
        lcu_only: 353_368_960,
    },
    KnownDataset {
        name: "amazon-f",
        aliases: &["amazon_full", "amazon-full", "amz-f"],
        vocab: 356_312,
        classes: 5,
        are_total: 96_532_485,
        lre_total: 364_864_133,
        lcu_only: 319_255_552,
    },
];

pub fn known_dataset(name: &str) -> Option<&'static KnownDataset> {
    let key = name.to_ascii_lowercase();
    KNOWN_DATASETS
        .iter()
        .find(|d| d.name == key || d.aliases.contains(&key.as_str()))
}

impl KnownDataset {
    /// Default ARE spec (h=256, region 9, CNN meta-network).
    pub fn are_spec(&self) -> ModelSpec {
        ModelSpec::new(Method::Are, self.vocab, self.classes)
    }

    /// Default LRE spec (h=128, region 7).
    pub fn lre_spec(&self) -> ModelSpec {
        ModelSpec { h: 128, c: 3, ..ModelSpec::new(Method::Lre, self.vocab, self.classes) }
    }

    /// Reference total for `spec` when it is one of the two default
    /// configurations on this dataset.
    pub fn reference_total(&self, spec: &ModelSpec) -> Option<usize> {
        if *spec == self.are_spec() {
            Some(self.are_total)
        } else if *spec == self.lre_spec() {
            Some(self.lre_total)
        } else {
            None
        }
    }
}

/// Per-token first-derivative saliency of the predicted class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub tokens: Vec<String>,
    /// L2 norm of d(logit of predicted class)/d(embedding of token).
    pub scores: Vec<f64>,
    /// Sign of the gradient's dot product with the embedding: +1, 0, or -1.
    pub signs: Vec<i8>,
    pub predicted: usize,
    pub label: usize,
}

/// Saliency of each real token of `doc`; `tokens` are its token strings.
pub fn saliency<S: AsRef<str>>(model: &Model, doc: &EncodedDocument, tokens: &[S]) -> Result<SaliencyReport> {
    if tokens.len() != doc.len() {
        return Err(Error::dim(
            "saliency",
            format!("{} tokens for a document of {} positions", tokens.len(), doc.len()),
        ));
    }
    let (predicted, grads, embedded) = logit_gradient(model, doc)?;
    let h = model.spec().h;
    let c = doc.radius();
    let width = doc.indices().len();
    let mut scores = Vec::with_capacity(doc.len());
    let mut signs = Vec::with_capacity(doc.len());
    for i in c..c + doc.len() {
        let column = |t: &[f64]| (0..h).map(|a| t[a * width + i]).collect::<Vec<_>>();
        let (g, e) = (column(&grads), column(&embedded));
        scores.push(g.iter().map(|x| x * x).sum::<f64>().sqrt());
        let dot: f64 = g.iter().zip(&e).map(|(a, b)| a * b).sum();
        signs.push(if dot > 0.0 { 1 } else if dot < 0.0 { -1 } else { 0 });
    }
    Ok(SaliencyReport {
        tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        scores,
        signs,
        predicted,
        label: doc.label(),
    })
}

/// Predicted class, gradient of its logit with respect to the padded
/// embedding `[h × (L + 2c)]`, and that embedding, both row-major.
fn logit_gradient(model: &Model, doc: &EncodedDocument) -> Result<(usize, Vec<f64>, Vec<f64>)> {
    let mut pass = model.forward(&[doc], false)?;
    let logits = pass.tape.value(pass.logits).data().to_vec();
    let predicted = logits
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
    let target = pass.tape.pick(pass.logits, predicted)?;
    pass.tape.backward(target)?;
    let e = pass.embedded[0];
    Ok((
        predicted,
        pass.tape.grad_or_zeros(e).into_data(),
        pass.tape.value(e).data().to_vec(),
    ))
}
