//! Flat `key = value` run configuration shared by every subcommand.

use std::collections::BTreeSet;
use std::path::PathBuf;

use are_core::analysis::RenderFormat;
use are_core::metanet::{MetaNetKind, DEFAULT_FACTOR_RANK};
use are_core::model::{Method, ModelSpec, DEFAULT_EMBEDDING, DEFAULT_RADIUS};
use are_core::text::{DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT};
use are_core::trainer::{
    AdamConfig, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE, DEFAULT_VALIDATION_FRACTION,
};

use crate::failure::Failure;

/// Keys accepted in config files and as `--key` flags, in snapshot order.
pub const KEYS: &[&str] = &[
    "method",
    "meta",
    "h",
    "region",
    "u",
    "v",
    "n",
    "dataset",
    "seed",
    "batch",
    "lr",
    "epochs",
    "eval-every",
    "val-fraction",
    "max-steps",
    "runs",
    "min-count",
    "max-len",
    "train",
    "test",
    "out",
    "checkpoint",
    "vocab",
    "format",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub meta: MetaNetKind,
    pub h: usize,
    /// Region size 2c+1.
    pub region: usize,
    pub u: usize,
    pub v: Option<usize>,
    pub n: Option<usize>,
    pub dataset: Option<String>,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub val_fraction: f64,
    pub max_steps: Option<u64>,
    pub runs: usize,
    pub min_count: usize,
    pub max_len: usize,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub format: RenderFormat,
    /// Keys given explicitly by a file or a flag.
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Are,
            meta: MetaNetKind::Cnn,
            h: DEFAULT_EMBEDDING,
            region: 2 * DEFAULT_RADIUS + 1,
            u: DEFAULT_FACTOR_RANK,
            v: None,
            n: None,
            dataset: None,
            seed: 0,
            batch: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            eval_every: 0,
            val_fraction: DEFAULT_VALIDATION_FRACTION,
            max_steps: None,
            runs: 1,
            min_count: DEFAULT_MIN_COUNT,
            max_len: DEFAULT_MAX_LEN,
            train: None,
            test: None,
            out: None,
            checkpoint: None,
            vocab: None,
            format: RenderFormat::Json,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, Failure> {
    value
        .parse()
        .map_err(|_| Failure::input(format!("config key `{key}`: `{value}` is not {what}")))
}

fn positive(key: &str, value: &str) -> Result<usize, Failure> {
    match parse::<usize>(key, value, "a positive integer")? {
        0 => Err(Failure::input(format!("config key `{key}` must be at least 1"))),
        x => Ok(x),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let value = value.trim();
        let Some(&known) = KEYS.iter().find(|k| **k == key) else {
            return Err(Failure::input(format!("unknown config key `{key}`")));
        };
        match known {
            "method" => self.method = value.parse().map_err(Failure::from)?,
            "meta" => self.meta = value.parse().map_err(Failure::from)?,
            "h" => self.h = positive(key, value)?,
            "region" => {
                let r = positive(key, value)?;
                if r % 2 == 0 {
                    return Err(Failure::input(format!("config key `region` must be odd, got {r}")));
                }
                self.region = r;
            }
            "u" => self.u = positive(key, value)?,
            "v" => self.v = Some(positive(key, value)?),
            "n" => self.n = Some(positive(key, value)?),
            "dataset" => self.dataset = Some(value.to_string()),
            "seed" => self.seed = parse(key, value, "an unsigned integer")?,
            "batch" => self.batch = positive(key, value)?,
            "lr" => {
                let lr: f64 = parse(key, value, "a number")?;
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Failure::input(format!("config key `lr` must be positive, got {value}")));
                }
                self.lr = lr;
            }
            "epochs" => self.epochs = positive(key, value)?,
            "eval-every" => self.eval_every = parse(key, value, "an unsigned integer")?,
            "val-fraction" => {
                let f: f64 = parse(key, value, "a number")?;
                if !(0.0..1.0).contains(&f) {
                    return Err(Failure::input(format!("config key `val-fraction` must lie in [0, 1), got {value}")));
                }
                self.val_fraction = f;
            }
            "max-steps" => self.max_steps = Some(positive(key, value)? as u64),
            "runs" => self.runs = positive(key, value)?,
            "min-count" => self.min_count = positive(key, value)?,
            "max-len" => self.max_len = positive(key, value)?,
            "train" => self.train = Some(value.into()),
            "test" => self.test = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "vocab" => self.vocab = Some(value.into()),
            "format" => self.format = value.parse().map_err(Failure::from)?,
            _ => unreachable!("key list and match arms disagree"),
        }
        self.explicit.insert(known);
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Failure> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Failure::input(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|f| Failure::input(format!("{origin}:{}: {}", i + 1, f.message)))?;
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Every set value as `key = value` lines; reading it back yields the
    /// same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(&format!("{k} = {v}\n"));
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        line("method", self.method.to_string());
        line("meta", self.meta.to_string());
        line("h", self.h.to_string());
        line("region", self.region.to_string());
        line("u", self.u.to_string());
        let optional = [
            ("v", self.v.map(|x| x.to_string())),
            ("n", self.n.map(|x| x.to_string())),
            ("dataset", self.dataset.clone()),
        ];
        for (k, v) in optional {
            if let Some(v) = v {
                line(k, v);
            }
        }
        line("seed", self.seed.to_string());
        line("batch", self.batch.to_string());
        // `{:?}` prints the shortest string that parses back to the same f64
        line("lr", format!("{:?}", self.lr));
        line("epochs", self.epochs.to_string());
        line("eval-every", self.eval_every.to_string());
        line("val-fraction", format!("{:?}", self.val_fraction));
        if let Some(s) = self.max_steps {
            line("max-steps", s.to_string());
        }
        line("runs", self.runs.to_string());
        line("min-count", self.min_count.to_string());
        line("max-len", self.max_len.to_string());
        let paths = [
            ("train", path(&self.train)),
            ("test", path(&self.test)),
            ("out", path(&self.out)),
            ("checkpoint", path(&self.checkpoint)),
            ("vocab", path(&self.vocab)),
        ];
        for (k, v) in paths {
            if let Some(v) = v {
                line(k, v);
            }
        }
        line(
            "format",
            match self.format {
                RenderFormat::Json => "json",
                RenderFormat::Ansi => "ansi",
                RenderFormat::Html => "html",
            }
            .into(),
        );
        out
    }

    pub fn radius(&self) -> usize {
        self.region / 2
    }

    pub fn model_spec(&self, v: usize, n: usize) -> ModelSpec {
        ModelSpec {
            method: self.method,
            meta: self.meta,
            h: self.h,
            c: self.radius(),
            n,
            v,
            u: self.u,
        }
    }

    pub fn train_config(&self, seed: u64, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            adam: AdamConfig { learning_rate: self.lr, ..Default::default() },
            epochs: self.epochs,
            seed,
            eval_every: self.eval_every,
            checkpoint_dir,
        }
    }
}
