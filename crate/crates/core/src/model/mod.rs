//! End-to-end classifier: embedding look-up, filter provider, region
//! pooling, and a fully-connected softmax head.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::filtering::{
    generalized_filter, lcu_filters, project_and_pool, sequence_embedding, FilterBank, Filters, Pooling,
};
use crate::metanet::{MetaNet, MetaNetKind, DEFAULT_FACTOR_RANK};
use crate::numeric::gradcheck::{numerical_grad, relative_error};
use crate::numeric::{softmax_rows, BnState, Tape, Tensor, Var};
use crate::params::{xavier, BoundParams, ParamId, ParamStore};
use crate::text::EncodedDocument;

pub const DEFAULT_EMBEDDING: usize = 256;
pub const DEFAULT_RADIUS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Instance-level filters from a meta-network.
    Are,
    /// Word-level filters from a look-up tensor.
    Lre,
    /// Shared convolution filters, sum-pooled.
    Conv,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Are, Method::Lre, Method::Conv];

    pub fn name(self) -> &'static str {
        match self {
            Method::Are => "are",
            Method::Lre => "lre",
            Method::Conv => "conv",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown method `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub method: Method,
    /// Meta-network variant; only used by [`Method::Are`].
    pub meta: MetaNetKind,
    /// Embedding size.
    pub h: usize,
    /// Region radius; the region spans `2c + 1` words.
    pub c: usize,
    /// Number of classes.
    pub n: usize,
    /// Vocabulary size, reserved entries included.
    pub v: usize,
    /// Rank of the factored meta-network.
    pub u: usize,
}

impl ModelSpec {
    /// Spec with default embedding size, radius, and meta-network.
    pub fn new(method: Method, v: usize, n: usize) -> Self {
        Self {
            method,
            meta: MetaNetKind::Cnn,
            h: DEFAULT_EMBEDDING,
            c: DEFAULT_RADIUS,
            n,
            v,
            u: DEFAULT_FACTOR_RANK,
        }
    }

    pub fn region(&self) -> usize {
        2 * self.c + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.h == 0 {
            return bad("embedding size h must be at least 1".into());
        }
        if self.n < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n));
        }
        if self.v < 2 {
            return bad(format!("vocabulary size {} cannot hold the reserved entries", self.v));
        }
        if self.method == Method::Are
            && self.meta == MetaNetKind::FactoredCnn
            && (self.u == 0 || self.u >= self.h * self.region())
        {
            return bad(format!(
                "factored rank u={} must satisfy 1 <= u < h·(2c+1) = {}",
                self.u,
                self.h * self.region()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Provider {
    Meta(MetaNet),
    Lcu(ParamId),
    Conv(ParamId),
}

/// Classifier parameters plus batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    embedding: ParamId,
    provider: Provider,
    fc_weight: ParamId,
    fc_bias: ParamId,
    bn: Option<BnState>,
}

/// Recorded forward computation over a batch.
pub struct ForwardPass<'a> {
    pub tape: Tape<'a>,
    pub params: BoundParams,
    /// Padded embeddings `[h × (L + 2c)]`, one per document.
    pub embedded: Vec<Var>,
    /// `[B × n]`.
    pub logits: Var,
    /// Batch-norm statistics after this pass (updated in training mode).
    pub bn: Option<BnState>,
}

impl ForwardPass<'_> {
    /// Mean cross-entropy of the batch.
    pub fn loss(&mut self, labels: &[usize]) -> Result<Var> {
        let n = self.tape.shape(self.logits)[1];
        if let Some(&label) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::Label { label, classes: n });
        }
        self.tape.softmax_cross_entropy(self.logits, labels)
    }
}

/// Result of [`Model::loss_and_grads`].
#[derive(Clone, Debug)]
pub struct Step {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub bn: Option<BnState>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl Model {
    /// Fresh model with Xavier-initialized weights.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let ModelSpec { h, v, n, .. } = spec;
        let r = spec.region();
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", xavier(&[h, v], v, h, rng));
        let provider = match spec.method {
            Method::Are => Provider::Meta(MetaNet::new(spec.meta, h, spec.c, spec.u, &mut params, rng)?),
            Method::Lre => Provider::Lcu(params.add("lcu.table", xavier(&[h, r, v], v, h * r, rng))),
            Method::Conv => Provider::Conv(params.add("conv.filters", xavier(&[h, h, r], h * r, h * r, rng))),
        };
        let fc_weight = params.add("fc.weight", xavier(&[n, h], h, n, rng));
        let fc_bias = params.add("fc.bias", Tensor::zeros(&[n]));
        let bn = match &provider {
            Provider::Meta(m) => m.batchnorm_channels().map(BnState::new),
            _ => None,
        };
        Ok(Self { spec, params, embedding, provider, fc_weight, fc_bias, bn })
    }

    pub fn seeded(spec: ModelSpec, seed: u64) -> Result<Self> {
        Self::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_state(&self) -> Option<&BnState> {
        self.bn.as_ref()
    }

    pub fn set_bn_state(&mut self, bn: Option<BnState>) {
        self.bn = bn;
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    /// Trainable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Runs the model on a batch.
    ///
    /// In training mode batch norm uses the statistics of all positions of
    /// all documents; the updated running statistics are returned in the
    /// pass and must be stored back with [`Model::set_bn_state`].
    pub fn forward(&self, docs: &[&EncodedDocument], training: bool) -> Result<ForwardPass<'_>> {
        self.check_docs(docs)?;
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let table = params.var(self.embedding);
        let embedded = docs
            .iter()
            .map(|d| tape.gather(table, d.indices()))
            .collect::<Result<Vec<_>>>()?;
        self.finish(tape, params, docs, embedded, training)
    }

    /// Like [`Model::forward`] but with the padded embeddings supplied
    /// directly as differentiable leaves.
    pub fn forward_embedded(
        &self,
        docs: &[&EncodedDocument],
        embedded: Vec<Tensor>,
        training: bool,
    ) -> Result<ForwardPass<'_>> {
        self.check_docs(docs)?;
        if embedded.len() != docs.len() {
            return Err(Error::dim("forward_embedded", "one embedding matrix per document"));
        }
        for (d, e) in docs.iter().zip(&embedded) {
            if e.shape() != [self.spec.h, d.indices().len()] {
                return Err(Error::dim(
                    "forward_embedded",
                    format!("embedding {:?} for document of padded length {}", e.shape(), d.indices().len()),
                ));
            }
        }
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let embedded = embedded.into_iter().map(|e| tape.leaf(e)).collect();
        self.finish(tape, params, docs, embedded, training)
    }

    fn check_docs(&self, docs: &[&EncodedDocument]) -> Result<()> {
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for d in docs {
            if d.is_empty() {
                return Err(Error::EmptyDocument);
            }
            if d.radius() != self.spec.c {
                return Err(Error::dim(
                    "forward",
                    format!("document padded with radius {} for model radius {}", d.radius(), self.spec.c),
                ));
            }
            if d.max_index() >= self.spec.v {
                return Err(Error::Vocabulary { index: d.max_index(), size: self.spec.v });
            }
        }
        Ok(())
    }

    fn finish<'a>(
        &'a self,
        mut tape: Tape<'a>,
        params: BoundParams,
        docs: &[&EncodedDocument],
        embedded: Vec<Var>,
        training: bool,
    ) -> Result<ForwardPass<'a>> {
        let mut bn = self.bn.clone();
        let (pooled, _) = self.regions(&mut tape, &params, docs, &embedded, bn.as_mut(), training)?;
        let h = self.spec.h;
        let rows = pooled
            .into_iter()
            .map(|regions| {
                let r = sequence_embedding(&mut tape, regions)?;
                tape.reshape(r, &[1, h])
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let w_t = tape.transpose(params.var(self.fc_weight))?;
        let scores = tape.matmul(batch, w_t)?;
        let logits = tape.add_bias(scores, params.var(self.fc_bias))?;
        Ok(ForwardPass { tape, params, embedded, logits, bn })
    }

    /// Region embeddings `[h × L]` per document, and the filter banks that
    /// produced them (none for the convolution baseline).
    fn regions(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        docs: &[&EncodedDocument],
        embedded: &[Var],
        bn: Option<&mut BnState>,
        training: bool,
    ) -> Result<(Vec<Var>, Vec<FilterBank>)> {
        let c = self.spec.c;
        let banks = match &self.provider {
            Provider::Meta(meta) => {
                let content = docs
                    .iter()
                    .zip(embedded)
                    .map(|(d, &e)| tape.slice(e, 1, c, d.len()))
                    .collect::<Result<Vec<_>>>()?;
                meta.generate(tape, params, &content, bn, training)?
            }
            Provider::Lcu(table) => {
                let table = params.var(*table);
                docs.iter().map(|d| lcu_filters(tape, table, d)).collect::<Result<Vec<_>>>()?
            }
            Provider::Conv(filters) => {
                let filters = params.var(*filters);
                let pooled = embedded
                    .iter()
                    .map(|&e| generalized_filter(tape, e, Filters::Shared(filters), Pooling::Sum))
                    .collect::<Result<Vec<_>>>()?;
                return Ok((pooled, Vec::new()));
            }
        };
        let pooled = embedded
            .iter()
            .zip(&banks)
            .map(|(&e, &bank)| project_and_pool(tape, e, bank, Pooling::Max))
            .collect::<Result<Vec<_>>>()?;
        Ok((pooled, banks))
    }

    /// Region embeddings `[h × L]` and context units `[h × (2c+1) × L]` of
    /// a single document. Context units are `None` for the convolution
    /// baseline. In training mode batch norm uses this document's own
    /// statistics.
    pub fn inspect(&self, doc: &EncodedDocument, training: bool) -> Result<(Tensor, Option<Tensor>)> {
        self.check_docs(&[doc])?;
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let e = tape.gather(params.var(self.embedding), doc.indices())?;
        let mut bn = self.bn.clone();
        let (pooled, banks) = self.regions(&mut tape, &params, &[doc], &[e], bn.as_mut(), training)?;
        let units = banks.first().map(|b| tape.value(b.var()).clone());
        Ok((tape.value(pooled[0]).clone(), units))
    }

    /// Mean cross-entropy of a batch and its gradient for every parameter
    /// tensor, in store order.
    pub fn loss_and_grads(&self, docs: &[&EncodedDocument], training: bool) -> Result<Step> {
        let labels: Vec<usize> = docs.iter().map(|d| d.label()).collect();
        let mut pass = self.forward(docs, training)?;
        let loss = pass.loss(&labels)?;
        pass.tape.backward(loss)?;
        let grads = pass.params.vars().iter().map(|&v| pass.tape.grad_or_zeros(v)).collect();
        Ok(Step { loss: pass.tape.value(loss).data()[0], grads, bn: pass.bn })
    }

    /// Compares [`Model::loss_and_grads`] against central differences with
    /// step `step` and returns the largest relative error per tensor.
    pub fn gradient_check(&self, docs: &[&EncodedDocument], step: f64) -> Result<Vec<(String, f64)>> {
        let analytic = self.loss_and_grads(docs, true)?.grads;
        let mut report = Vec::with_capacity(analytic.len());
        for (id, grad) in self.params.ids().zip(&analytic) {
            let mut failure = None;
            let numeric = numerical_grad(
                |inputs| {
                    let mut probe = self.clone();
                    *probe.params.get_mut(id) = inputs[0].clone();
                    match probe.batch_loss(docs) {
                        Ok(l) => l,
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    }
                },
                std::slice::from_ref(self.params.get(id)),
                0,
                step,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let name = self.params.iter().nth(report.len()).map(|(n, _)| n.to_string()).unwrap();
            report.push((name, relative_error(grad, &numeric)));
        }
        Ok(report)
    }

    fn batch_loss(&self, docs: &[&EncodedDocument]) -> Result<f64> {
        let labels: Vec<usize> = docs.iter().map(|d| d.label()).collect();
        let mut pass = self.forward(docs, true)?;
        let loss = pass.loss(&labels)?;
        Ok(pass.tape.value(loss).data()[0])
    }

    /// Logits `[B × n]` in eval mode.
    pub fn logits(&self, docs: &[&EncodedDocument]) -> Result<Tensor> {
        let pass = self.forward(docs, false)?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    pub fn predict(&self, doc: &EncodedDocument) -> Result<Prediction> {
        Ok(self.predict_batch(&[doc])?.remove(0))
    }

    pub fn predict_batch(&self, docs: &[&EncodedDocument]) -> Result<Vec<Prediction>> {
        let logits = self.logits(docs)?;
        Ok(predictions_from_logits(&logits))
    }

    /// Bundles the parameters and batch-norm statistics.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(bn) = &self.bn {
            tensors.push((BN_MEAN.into(), bn.running_mean.clone()));
            tensors.push((BN_VAR.into(), bn.running_var.clone()));
        }
        Checkpoint { spec: self.spec, tensors, counters: Vec::new() }
    }

    /// Rebuilds a model; every tensor must be present with the shape
    /// implied by the checkpoint's spec. Tensors under `optim.` are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::seeded(ckpt.spec, 0)?;
        let mut seen = 0;
        for (name, tensor) in &ckpt.tensors {
            if name.starts_with(OPTIM_PREFIX) {
                continue;
            }
            let slot = if name == BN_MEAN || name == BN_VAR {
                let bn = model
                    .bn
                    .as_mut()
                    .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
                if name == BN_MEAN { &mut bn.running_mean } else { &mut bn.running_var }
            } else {
                let id = model
                    .params
                    .find(name)
                    .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
                model.params.get_mut(id)
            };
            if slot.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: tensor.shape().to_vec(),
                });
            }
            *slot = tensor.clone();
            seen += 1;
        }
        let expected = model.params.len() + if model.bn.is_some() { 2 } else { 0 };
        if seen != expected {
            return Err(Error::Format(format!("checkpoint holds {seen} of {expected} model tensors")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Prefix reserved for optimizer tensors stored alongside the model.
pub const OPTIM_PREFIX: &str = "optim.";
const BN_MEAN: &str = "meta.bn.running_mean";
const BN_VAR: &str = "meta.bn.running_var";

pub fn predictions_from_logits(logits: &Tensor) -> Vec<Prediction> {
    let [rows, n] = *logits.shape() else {
        panic!("logits must be [B × n]");
    };
    let probs = softmax_rows(logits.data(), rows, n);
    probs
        .chunks(n)
        .map(|p| {
            // first index wins ties
            let class = p
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
            Prediction { class, probabilities: p.to_vec() }
        })
        .collect()
}

#[cfg(test)]
mod tests;
