//! Generalized text filtering.
//!
//! A filter slides a window of `r = 2c + 1` positions over the embedded
//! sequence, weights each window column, and pools the `r` results with `g`.
//! Three providers supply the filters at different levels:
//!
//! * dataset level: one shared filter set for every document (convolution
//!   when `g = sum`),
//! * word level: a look-up table indexed by the center word (LCU),
//! * instance level: a meta-network reading the whole document (ACU, see
//!   [`crate::metanet`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ReduceMode, Tape, Var};
use crate::text::EncodedDocument;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Sum,
}

impl From<Pooling> for ReduceMode {
    fn from(p: Pooling) -> Self {
        match p {
            Pooling::Max => ReduceMode::Max,
            Pooling::Sum => ReduceMode::Sum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterLevel {
    Dataset,
    Word,
    Instance,
}

/// Per-position filters `K` of shape `[h × (2c+1) × L]` recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterBank {
    var: Var,
    channels: usize,
    window: usize,
    len: usize,
}

impl FilterBank {
    pub fn new(tape: &Tape, var: Var) -> Result<Self> {
        match *tape.shape(var) {
            [channels, window, len] => Ok(Self { var, channels, window, len }),
            ref other => Err(Error::dim(
                "filter bank",
                format!("expected [h × r × L], got {other:?}"),
            )),
        }
    }

    pub fn var(&self) -> Var {
        self.var
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Filters applied by [`generalized_filter`].
#[derive(Clone, Copy, Debug)]
pub enum Filters {
    /// One `[h × r]` filter per output position, applied per channel.
    PerPosition(FilterBank),
    /// `F` filters of shape `[h × r]` (tensor `[F × h × r]`) shared by every
    /// position; each window column is reduced to an inner product.
    Shared(Var),
}

/// Slides the filters over `x: [h × L_padded]` and pools each window with `g`.
///
/// * `PerPosition(K)`: `y[a, i] = g_t(K[a, t, i] · x[a, i + t])`, output `[h × L]`.
/// * `Shared(W)`: `y[f, i] = g_k(Σ_a W[f, a, k] · x[a, i + k])`, output
///   `[F × (L_padded − r + 1)]`. With `g = sum` this is a bias-free 1-d
///   convolution.
pub fn generalized_filter(tape: &mut Tape, x: Var, filters: Filters, g: Pooling) -> Result<Var> {
    match filters {
        Filters::PerPosition(bank) => {
            let xs = tape.shape(x).to_vec();
            if xs.len() != 2 || xs[0] != bank.channels() {
                return Err(Error::dim(
                    "generalized_filter",
                    format!("input {xs:?} vs filter bank [{}, {}, {}]", bank.channels, bank.window, bank.len),
                ));
            }
            if xs[1] != bank.len() + bank.window() - 1 {
                return Err(Error::dim(
                    "generalized_filter",
                    format!(
                        "padded length {} does not match {} positions with window {}",
                        xs[1], bank.len, bank.window
                    ),
                ));
            }
            let windows = tape.unfold(x, bank.window())?;
            let projected = tape.mul(windows, bank.var())?;
            tape.reduce(projected, 1, g.into())
        }
        Filters::Shared(w) => {
            let dots = tape.window_dot(x, w)?;
            tape.reduce(dots, 1, g.into())
        }
    }
}

/// Projects the padded embeddings `[h × (L + 2c)]` through `K` and
/// pools each region, giving one region embedding per position `[h × L]`.
pub fn project_and_pool(tape: &mut Tape, embedded: Var, bank: FilterBank, g: Pooling) -> Result<Var> {
    generalized_filter(tape, embedded, Filters::PerPosition(bank), g)
}

/// Sums the region embeddings `[h × L]` over positions into `[h]`.
pub fn sequence_embedding(tape: &mut Tape, regions: Var) -> Result<Var> {
    if tape.shape(regions).len() != 2 {
        return Err(Error::dim(
            "sequence_embedding",
            format!("expected [h × L], got {:?}", tape.shape(regions)),
        ));
    }
    tape.reduce(regions, 1, ReduceMode::Sum)
}

/// Word-level filters: `K[:, :, i] = U[:, :, w_i]` for each real position.
///
/// `table` is the LCU look-up tensor `[h × (2c+1) × v]`.
pub fn lcu_filters(tape: &mut Tape, table: Var, doc: &EncodedDocument) -> Result<FilterBank> {
    if doc.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let shape = tape.shape(table).to_vec();
    if shape.len() != 3 || shape[1] != 2 * doc.radius() + 1 {
        return Err(Error::dim(
            "lcu_filters",
            format!("table {shape:?} incompatible with radius {}", doc.radius()),
        ));
    }
    let k = tape.gather(table, doc.content())?;
    FilterBank::new(tape, k)
}
