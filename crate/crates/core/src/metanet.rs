//! Meta-networks that generate instance-level filters (ACU) from the
//! embedded document.
//!
//! Every variant maps a document's unpadded embeddings `[h × L]` to a
//! [`FilterBank`] `[h × (2c+1) × L]`. Convolutional variants share one
//! batch-norm layer across all positions of all documents in a batch, so
//! they work on the whole batch at once.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::FilterBank;
use crate::numeric::{BnState, Tape, Tensor, Var};
use crate::params::{xavier, xavier_conv, BoundParams, ParamId, ParamStore};

pub const DEFAULT_FACTOR_RANK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaNetKind {
    Cnn,
    SmallCnn,
    FactoredCnn,
    Lstm,
    Gru,
    Ensemble,
}

impl MetaNetKind {
    pub const ALL: [MetaNetKind; 6] = [
        MetaNetKind::Cnn,
        MetaNetKind::SmallCnn,
        MetaNetKind::FactoredCnn,
        MetaNetKind::Lstm,
        MetaNetKind::Gru,
        MetaNetKind::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetaNetKind::Cnn => "cnn",
            MetaNetKind::SmallCnn => "smallcnn",
            MetaNetKind::FactoredCnn => "factoredcnn",
            MetaNetKind::Lstm => "lstm",
            MetaNetKind::Gru => "gru",
            MetaNetKind::Ensemble => "ensemble",
        }
    }

    /// Channels of the batch-norm layer, if the variant has one.
    pub fn batchnorm_channels(self, h: usize, window: usize, rank: usize) -> Option<usize> {
        match self {
            MetaNetKind::Cnn | MetaNetKind::Ensemble => Some(h * window),
            MetaNetKind::SmallCnn => Some(h),
            MetaNetKind::FactoredCnn => Some(rank),
            MetaNetKind::Lstm | MetaNetKind::Gru => None,
        }
    }
}

impl fmt::Display for MetaNetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaNetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetaNetKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown meta-network `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecurrentKind {
    Lstm,
    Gru,
}

/// One convolution followed by batch norm.
#[derive(Clone, Copy, Debug)]
pub struct ConvBranch {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl ConvBranch {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        h: usize,
        out: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(format!("{prefix}.conv.weight"), xavier_conv(out, h, window, rng)),
            bias: store.add(format!("{prefix}.conv.bias"), Tensor::zeros(&[out])),
            gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::ones(&[out])),
            beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[out])),
        }
    }

    fn bind(&self, p: &BoundParams) -> ConvVars {
        ConvVars {
            weight: p.var(self.weight),
            bias: p.var(self.bias),
            gamma: p.var(self.gamma),
            beta: p.var(self.beta),
        }
    }
}

/// Single-layer recurrent cell. For the LSTM `bias_hh` is `None` and the
/// gate order is input, forget, cell, output; the GRU uses reset, update,
/// new with separate input and hidden biases.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentBranch {
    pub kind: RecurrentKind,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias_ih: ParamId,
    pub bias_hh: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct RecurrentVars {
    pub kind: RecurrentKind,
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias_ih: Var,
    pub bias_hh: Option<Var>,
}

impl RecurrentBranch {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: RecurrentKind,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let gates = match kind {
            RecurrentKind::Lstm => 4,
            RecurrentKind::Gru => 3,
        } * hidden;
        let w_ih = store.add(format!("{prefix}.w_ih"), xavier(&[gates, input], input, gates, rng));
        let w_hh = store.add(format!("{prefix}.w_hh"), xavier(&[gates, hidden], hidden, gates, rng));
        let bias_ih = store.add(format!("{prefix}.bias_ih"), Tensor::zeros(&[gates]));
        let bias_hh = match kind {
            RecurrentKind::Lstm => None,
            RecurrentKind::Gru => Some(store.add(format!("{prefix}.bias_hh"), Tensor::zeros(&[gates]))),
        };
        Self { kind, w_ih, w_hh, bias_ih, bias_hh }
    }

    fn bind(&self, p: &BoundParams) -> RecurrentVars {
        RecurrentVars {
            kind: self.kind,
            w_ih: p.var(self.w_ih),
            w_hh: p.var(self.w_hh),
            bias_ih: p.var(self.bias_ih),
            bias_hh: self.bias_hh.map(|id| p.var(id)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Layout {
    Cnn(ConvBranch),
    SmallCnn(ConvBranch),
    FactoredCnn { conv: ConvBranch, factor: ParamId },
    Recurrent(RecurrentBranch),
    Ensemble { conv: ConvBranch, lstm: RecurrentBranch },
}

/// A meta-network whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MetaNet {
    kind: MetaNetKind,
    channels: usize,
    radius: usize,
    rank: usize,
    layout: Layout,
}

impl MetaNet {
    /// Registers the variant's parameters in `store`.
    pub fn new<R: Rng + ?Sized>(
        kind: MetaNetKind,
        h: usize,
        radius: usize,
        rank: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let window = 2 * radius + 1;
        let layout = match kind {
            MetaNetKind::Cnn => Layout::Cnn(ConvBranch::register(store, "meta", h, h * window, window, rng)),
            MetaNetKind::SmallCnn => Layout::SmallCnn(ConvBranch::register(store, "meta", h, h, window, rng)),
            MetaNetKind::FactoredCnn => {
                if rank == 0 || rank >= h * window {
                    return Err(Error::InvalidSpec(format!(
                        "factored rank u={rank} must satisfy 1 <= u < h·(2c+1) = {}",
                        h * window
                    )));
                }
                let conv = ConvBranch::register(store, "meta", h, rank, window, rng);
                let factor = store.add(
                    "meta.factor",
                    xavier(&[rank, h * window], rank, h * window, rng),
                );
                Layout::FactoredCnn { conv, factor }
            }
            MetaNetKind::Lstm => Layout::Recurrent(RecurrentBranch::register(
                store, "meta.lstm", RecurrentKind::Lstm, h, h * window, rng,
            )),
            MetaNetKind::Gru => Layout::Recurrent(RecurrentBranch::register(
                store, "meta.gru", RecurrentKind::Gru, h, h * window, rng,
            )),
            MetaNetKind::Ensemble => {
                let conv = ConvBranch::register(store, "meta", h, h * window, window, rng);
                let lstm = RecurrentBranch::register(
                    store, "meta.lstm", RecurrentKind::Lstm, h, h * window, rng,
                );
                Layout::Ensemble { conv, lstm }
            }
        };
        Ok(Self { kind, channels: h, radius, rank, layout })
    }

    pub fn kind(&self) -> MetaNetKind {
        self.kind
    }

    pub fn batchnorm_channels(&self) -> Option<usize> {
        self.kind.batchnorm_channels(self.channels, 2 * self.radius + 1, self.rank)
    }

    /// Generates one filter bank per document from its unpadded embeddings.
    pub fn generate(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        embedded: &[Var],
        bn: Option<&mut BnState>,
        training: bool,
    ) -> Result<Vec<FilterBank>> {
        let c = self.radius;
        let need_bn = || Error::InvalidSpec("meta-network requires batch-norm state".into());
        match self.layout {
            Layout::Cnn(conv) => acu_cnn(tape, conv.bind(params), embedded, c, bn.ok_or_else(need_bn)?, training),
            Layout::SmallCnn(conv) => {
                acu_small_cnn(tape, conv.bind(params), embedded, c, bn.ok_or_else(need_bn)?, training)
            }
            Layout::FactoredCnn { conv, factor } => acu_factored_cnn(
                tape,
                conv.bind(params),
                params.var(factor),
                embedded,
                c,
                bn.ok_or_else(need_bn)?,
                training,
            ),
            Layout::Recurrent(cell) => embedded
                .iter()
                .map(|&e| acu_recurrent(tape, cell.bind(params), e, c))
                .collect(),
            Layout::Ensemble { conv, lstm } => acu_ensemble(
                tape,
                conv.bind(params),
                lstm.bind(params),
                embedded,
                c,
                bn.ok_or_else(need_bn)?,
                training,
            ),
        }
    }
}

/// Same-padded convolution of every document, then one batch norm over
/// all positions of the batch. Returns `[C_out × L_d]` per document.
fn conv_bn_batch(
    tape: &mut Tape,
    conv: ConvVars,
    embedded: &[Var],
    radius: usize,
    bn: &mut BnState,
    training: bool,
) -> Result<Vec<Var>> {
    if embedded.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut outs = Vec::with_capacity(embedded.len());
    let mut lens = Vec::with_capacity(embedded.len());
    for &e in embedded {
        let out = tape.conv1d(e, conv.weight, conv.bias, radius)?;
        lens.push(tape.shape(out)[1]);
        outs.push(out);
    }
    let joined = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let normed = tape.batchnorm(joined, conv.gamma, conv.beta, bn, training)?;
    if outs.len() == 1 {
        return Ok(vec![normed]);
    }
    let mut start = 0;
    let mut parts = Vec::with_capacity(lens.len());
    for len in lens {
        parts.push(tape.slice(normed, 1, start, len)?);
        start += len;
    }
    Ok(parts)
}

/// `K = Bn(Conv(E))` with `h·(2c+1)` output channels, reshaped per position.
pub fn acu_cnn(
    tape: &mut Tape,
    conv: ConvVars,
    embedded: &[Var],
    radius: usize,
    bn: &mut BnState,
    training: bool,
) -> Result<Vec<FilterBank>> {
    let window = 2 * radius + 1;
    conv_bn_batch(tape, conv, embedded, radius, bn, training)?
        .into_iter()
        .map(|k| {
            let [hr, len] = *tape.shape(k) else { unreachable!() };
            let k = tape.reshape(k, &[hr / window, window, len])?;
            FilterBank::new(tape, k)
        })
        .collect()
}

/// `h` output channels, the same filter broadcast over the whole window.
pub fn acu_small_cnn(
    tape: &mut Tape,
    conv: ConvVars,
    embedded: &[Var],
    radius: usize,
    bn: &mut BnState,
    training: bool,
) -> Result<Vec<FilterBank>> {
    conv_bn_batch(tape, conv, embedded, radius, bn, training)?
        .into_iter()
        .map(|k| {
            let k = tape.expand(k, 1, 2 * radius + 1)?;
            FilterBank::new(tape, k)
        })
        .collect()
}

/// `u` channels per position, mapped to `h·(2c+1)` through the factor
/// matrix `P: [u × h·(2c+1)]`.
pub fn acu_factored_cnn(
    tape: &mut Tape,
    conv: ConvVars,
    factor: Var,
    embedded: &[Var],
    radius: usize,
    bn: &mut BnState,
    training: bool,
) -> Result<Vec<FilterBank>> {
    let window = 2 * radius + 1;
    let coeffs = conv_bn_batch(tape, conv, embedded, radius, bn, training)?;
    let factor_t = tape.transpose(factor)?;
    let hr = tape.shape(factor_t)[0];
    coeffs
        .into_iter()
        .map(|k| {
            let len = tape.shape(k)[1];
            let full = tape.matmul(factor_t, k)?;
            let full = tape.reshape(full, &[hr / window, window, len])?;
            FilterBank::new(tape, full)
        })
        .collect()
}

/// Unidirectional LSTM or GRU over positions with hidden size
/// `h·(2c+1)`; each hidden state becomes that position's filter.
/// Initial hidden and cell states are zero.
pub fn acu_recurrent(tape: &mut Tape, cell: RecurrentVars, embedded: Var, radius: usize) -> Result<FilterBank> {
    let window = 2 * radius + 1;
    let [_, len] = *tape.shape(embedded) else {
        return Err(Error::dim("acu_recurrent", format!("expected [h × L], got {:?}", tape.shape(embedded))));
    };
    let gates = tape.shape(cell.w_ih)[0];
    let hidden = tape.shape(cell.w_hh)[1];
    let col = |tape: &mut Tape, bias: Var| -> Result<Var> { tape.reshape(bias, &[gates, 1]) };

    let x_proj = tape.matmul(cell.w_ih, embedded)?;
    let b_ih = col(tape, cell.bias_ih)?;
    let b_hh = cell.bias_hh.map(|b| col(tape, b)).transpose()?;
    let mut h = tape.constant(Tensor::zeros(&[hidden, 1]));
    let mut c = tape.constant(Tensor::zeros(&[hidden, 1]));
    let mut states = Vec::with_capacity(len);
    for t in 0..len {
        let xt = tape.slice(x_proj, 1, t, 1)?;
        let xt = tape.add(xt, b_ih)?;
        let mut hh = tape.matmul(cell.w_hh, h)?;
        if let Some(b) = b_hh {
            hh = tape.add(hh, b)?;
        }
        match cell.kind {
            RecurrentKind::Lstm => {
                let z = tape.add(xt, hh)?;
                let gate = |tape: &mut Tape, k: usize| tape.slice(z, 0, k * hidden, hidden);
                let i = gate(tape, 0)?;
                let i = tape.sigmoid(i)?;
                let f = gate(tape, 1)?;
                let f = tape.sigmoid(f)?;
                let g = gate(tape, 2)?;
                let g = tape.tanh(g)?;
                let o = gate(tape, 3)?;
                let o = tape.sigmoid(o)?;
                let keep = tape.mul(f, c)?;
                let write = tape.mul(i, g)?;
                c = tape.add(keep, write)?;
                let tc = tape.tanh(c)?;
                h = tape.mul(o, tc)?;
            }
            RecurrentKind::Gru => {
                let xr = tape.slice(xt, 0, 0, hidden)?;
                let xz = tape.slice(xt, 0, hidden, hidden)?;
                let xn = tape.slice(xt, 0, 2 * hidden, hidden)?;
                let hr = tape.slice(hh, 0, 0, hidden)?;
                let hz = tape.slice(hh, 0, hidden, hidden)?;
                let hn = tape.slice(hh, 0, 2 * hidden, hidden)?;
                let r = tape.add(xr, hr)?;
                let r = tape.sigmoid(r)?;
                let z = tape.add(xz, hz)?;
                let z = tape.sigmoid(z)?;
                let gated = tape.mul(r, hn)?;
                let n = tape.add(xn, gated)?;
                let n = tape.tanh(n)?;
                // h' = (1 − z)·n + z·h = n + z·(h − n)
                let diff = tape.sub(h, n)?;
                let step = tape.mul(z, diff)?;
                h = tape.add(n, step)?;
            }
        }
        states.push(h);
    }
    let all = if states.len() == 1 { states[0] } else { tape.concat(&states, 1)? };
    let k = tape.reshape(all, &[hidden / window, window, len])?;
    FilterBank::new(tape, k)
}

/// Elementwise product of the CNN and LSTM filter banks.
pub fn acu_ensemble(
    tape: &mut Tape,
    conv: ConvVars,
    lstm: RecurrentVars,
    embedded: &[Var],
    radius: usize,
    bn: &mut BnState,
    training: bool,
) -> Result<Vec<FilterBank>> {
    let cnn = acu_cnn(tape, conv, embedded, radius, bn, training)?;
    cnn.into_iter()
        .zip(embedded)
        .map(|(kc, &e)| {
            let kl = acu_recurrent(tape, lstm, e, radius)?;
            let k = tape.mul(kc.var(), kl.var())?;
            FilterBank::new(tape, k)
        })
        .collect()
}
