//! Synthetic key-value recall: the context lists `(key, value)` pairs, the query names one key,
//! and the answer is its value. Used to train small decoders under every compression method.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{
    answer_loss, argmax, compress_context, predict_with_cache, train_step, CompressionConfig, Episode, Method, ModelBundle,
    Trainer,
};
use crate::error::{Error, Result};
use crate::layers::MlpKind;
use crate::model::ModelSpec;
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tape::HeadConfig;

/// Separates the context from the query key.
pub const QSEP: usize = 1;
const FIRST_KEY: usize = 2;

/// Token layout and sample sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallTask {
    pub n_keys: usize,
    pub n_values: usize,
    pub min_pairs: usize,
    pub max_pairs: usize,
    /// Size of a fixed training set; 0 draws a fresh batch every step.
    pub n_train: usize,
    pub n_eval: usize,
    /// Pairs in every eval context; `None` samples them like training contexts.
    pub eval_pairs: Option<usize>,
}

impl Default for RecallTask {
    fn default() -> Self {
        RecallTask {
            n_keys: 32,
            n_values: 32,
            min_pairs: 2,
            max_pairs: 16,
            n_train: 0,
            n_eval: 256,
            eval_pairs: Some(16),
        }
    }
}

impl RecallTask {
    pub fn vocab(&self) -> usize {
        FIRST_KEY + self.n_keys + self.n_values
    }

    pub fn key_token(&self, k: usize) -> usize {
        FIRST_KEY + k
    }

    pub fn value_token(&self, v: usize) -> usize {
        FIRST_KEY + self.n_keys + v
    }

    pub fn is_key(&self, t: usize) -> bool {
        (FIRST_KEY..FIRST_KEY + self.n_keys).contains(&t)
    }

    pub fn is_value(&self, t: usize) -> bool {
        (FIRST_KEY + self.n_keys..self.vocab()).contains(&t)
    }

    /// Exact-match rate of always guessing one value.
    pub fn chance(&self) -> f64 {
        1.0 / self.n_values as f64
    }

    /// Longest context in tokens.
    pub fn max_context(&self) -> usize {
        2 * self.max_pairs.max(self.eval_pairs.unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_pairs == 0 || self.min_pairs > self.max_pairs {
            return Err(Error::Config(format!("pair range {}..={} is empty", self.min_pairs, self.max_pairs)));
        }
        if self.n_keys < self.max_pairs {
            return Err(Error::Config(format!(
                "{} keys cannot give {} distinct keys per sample",
                self.n_keys, self.max_pairs
            )));
        }
        if let Some(p) = self.eval_pairs {
            if p == 0 || p > self.n_keys {
                return Err(Error::Config(format!("eval_pairs {p} must lie in 1..={}", self.n_keys)));
            }
        }
        if self.n_values == 0 {
            return Err(Error::Config("no value tokens".into()));
        }
        if self.vocab() > 512 {
            return Err(Error::Config(format!("vocabulary of {} exceeds 512 tokens", self.vocab())));
        }
        Ok(())
    }
}

/// One recall problem in token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallSample {
    pub pairs: Vec<(usize, usize)>,
    pub query_key: usize,
    pub answer: usize,
}

impl RecallSample {
    /// Keys distinct, tokens in their sub-vocabularies, query present, answer its value.
    pub fn validate(&self, task: &RecallTask) -> Result<()> {
        let mut seen = HashSet::new();
        for &(k, v) in &self.pairs {
            if !task.is_key(k) || !task.is_value(v) {
                return Err(Error::Config(format!("pair ({k}, {v}) leaves its sub-vocabulary")));
            }
            if !seen.insert(k) {
                return Err(Error::Config(format!("key {k} appears twice")));
            }
        }
        match self.pairs.iter().find(|p| p.0 == self.query_key) {
            Some(&(_, v)) if v == self.answer => Ok(()),
            Some(_) => Err(Error::Config("answer differs from the queried value".into())),
            None => Err(Error::Config(format!("query key {} is not in the context", self.query_key))),
        }
    }

    /// `k1 v1 k2 v2 ...`, then `QSEP key`, answer `value`.
    pub fn episode(&self) -> Episode {
        Episode {
            context: self.pairs.iter().flat_map(|&(k, v)| [k, v]).collect(),
            query: vec![QSEP, self.query_key],
            answer: vec![self.answer],
        }
    }
}

/// Reads the answer straight off the raw context.
pub fn scan_oracle(context: &[usize], query_key: usize) -> Option<usize> {
    context.chunks(2).find(|c| c.len() == 2 && c[0] == query_key).map(|c| c[1])
}

#[derive(Clone, Debug)]
pub struct RecallData {
    pub task: RecallTask,
    pub train: Vec<RecallSample>,
    pub eval: Vec<RecallSample>,
}

fn draw(task: &RecallTask, rng: &mut impl Rng) -> RecallSample {
    let n = rng.random_range(task.min_pairs..=task.max_pairs);
    let mut keys: Vec<usize> = (0..task.n_keys).collect();
    keys.shuffle(rng);
    let pairs: Vec<(usize, usize)> = keys[..n]
        .iter()
        .map(|&k| (task.key_token(k), task.value_token(rng.random_range(0..task.n_values))))
        .collect();
    let &(query_key, answer) = pairs.choose(rng).expect("at least one pair");
    RecallSample { pairs, query_key, answer }
}

/// Independent train and eval samples from separate streams of `seed`.
pub fn gen_recall(task: &RecallTask, seed: u64) -> Result<RecallData> {
    task.validate()?;
    let mut tr = substream(seed, "recall/train");
    let mut ev = substream(seed, "recall/eval");
    let train = (0..task.n_train).map(|_| draw(task, &mut tr)).collect();
    let eval_task = match task.eval_pairs {
        Some(p) => RecallTask {
            min_pairs: p,
            max_pairs: p,
            ..task.clone()
        },
        None => task.clone(),
    };
    let eval = (0..task.n_eval).map(|_| draw(&eval_task, &mut ev)).collect();
    Ok(RecallData {
        task: task.clone(),
        train,
        eval,
    })
}

/// Model size, method and schedule for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub compression: CompressionConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Anneal the rate from `lr` to 0 along a half cosine.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl RunSpec {
    /// Rate used for step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cosine_decay {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
        } else {
            self.lr
        }
    }

    pub fn new(n_layers: usize, d_model: usize, compression: CompressionConfig) -> Self {
        RunSpec {
            n_layers,
            d_model,
            hidden: 4 * d_model,
            n_heads: 4,
            n_kv_heads: 2,
            compression,
            steps: 3000,
            batch: 32,
            lr: 1e-3,
            cosine_decay: false,
        }
    }

    pub fn model(&self, task: &RecallTask) -> Result<ModelSpec> {
        let spec = ModelSpec {
            vocab: task.vocab(),
            d_model: self.d_model,
            hidden: self.hidden,
            n_layers: self.n_layers,
            heads: HeadConfig::with_total(self.n_heads, self.n_kv_heads, self.d_model)?,
            mlp: MlpKind::GeGlu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self, task: &RecallTask) -> Result<()> {
        self.model(task)?;
        self.compression.validate()?;
        if self.steps == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("steps, batch and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one `(spec, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRecord {
    pub method: Method,
    pub xi: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub seed: u64,
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub exact_match: Option<f64>,
    pub failure: Option<String>,
}

/// Greedy one-token answers after compressing each context.
pub fn decode_answers<T: Scalar>(bundle: &ModelBundle<T>, config: &CompressionConfig, samples: &[RecallSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let ep = s.episode();
            let cache = compress_context(bundle, config, &ep.context)?;
            let logits = predict_with_cache(bundle, config, &cache, &ep.query)?;
            Ok(argmax(logits.row(logits.nrows() - 1).iter().copied()))
        })
        .collect()
}

/// Fraction of samples whose decoded answer is exactly right.
pub fn eval_exact_match(decoded: &[usize], samples: &[RecallSample]) -> Result<f64> {
    if decoded.len() != samples.len() || samples.is_empty() {
        return Err(Error::Shape(format!("{} answers for {} samples", decoded.len(), samples.len())));
    }
    let hits = decoded.iter().zip(samples).filter(|(d, s)| **d == s.answer).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean answer cross-entropy over `samples`, in chunks of `chunk`.
pub fn eval_loss<T: Scalar>(bundle: &ModelBundle<T>, config: &CompressionConfig, samples: &[RecallSample], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in samples.chunks(chunk.max(1)) {
        let eps: Vec<Episode> = c.iter().map(RecallSample::episode).collect();
        total += answer_loss(bundle, config, &eps)? * c.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Initial bundle for `seed`; prediction weights depend only on the model spec and seed.
pub fn init_bundle<T: Scalar>(spec: &RunSpec, task: &RecallTask, seed: u64) -> Result<ModelBundle<T>> {
    let model = spec.model(task)?;
    ModelBundle::init(&model, &spec.compression, task.max_context(), &mut substream(seed, "recall/init"))
}

/// Train one spec from its seed and evaluate on the held-out split.
pub fn train_run<T: Scalar>(spec: &RunSpec, data: &RecallData, seed: u64) -> Result<(ModelBundle<T>, RecallRecord)> {
    spec.validate(&data.task)?;
    let mut bundle = init_bundle::<T>(spec, &data.task, seed)?;
    let mut trainer = Trainer::<T>::new(spec.lr);
    let mut order = substream(seed, "recall/order");
    let mut stream = substream(seed, "recall/stream");
    let mut idx: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = idx.len();
    let mut record = RecallRecord {
        method: spec.compression.method,
        xi: spec.compression.xi,
        n_layers: spec.n_layers,
        d_model: spec.d_model,
        seed,
        steps: 0,
        final_train_loss: None,
        eval_loss: None,
        exact_match: None,
        failure: None,
    };
    for step in 0..spec.steps {
        let mut batch = Vec::with_capacity(spec.batch);
        while batch.len() < spec.batch {
            if idx.is_empty() {
                batch.push(draw(&data.task, &mut stream).episode());
                continue;
            }
            if cursor == idx.len() {
                idx.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(data.train[idx[cursor]].episode());
            cursor += 1;
        }
        trainer.adam.lr = spec.lr_at(step);
        match train_step(&mut bundle, &spec.compression, &mut trainer, &batch) {
            Ok(l) if l > 1e6 => {
                record.failure = Some(format!("loss {l:.3e} at step {step}"));
                return Ok((bundle, record));
            }
            Ok(l) => record.final_train_loss = Some(l),
            Err(e) => {
                record.failure = Some(e.to_string());
                return Ok((bundle, record));
            }
        }
        record.steps = step + 1;
    }
    let decoded = decode_answers(&bundle, &spec.compression, &data.eval)?;
    record.exact_match = Some(eval_exact_match(&decoded, &data.eval)?);
    record.eval_loss = Some(eval_loss(&bundle, &spec.compression, &data.eval, 64)?);
    Ok((bundle, record))
}

/// Every spec under every seed, in input order.
pub fn train_compare<T: Scalar>(specs: &[RunSpec], data: &RecallData, seeds: &[u64]) -> Result<Vec<RecallRecord>> {
    let jobs: Vec<(&RunSpec, u64)> = specs.iter().flat_map(|s| seeds.iter().map(move |&z| (s, z))).collect();
    jobs.par_iter().map(|&(s, z)| train_run::<T>(s, data, z).map(|r| r.1)).collect()
}

/// Aggregate over seeds for one method and rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub method: Method,
    pub xi: usize,
    pub runs: usize,
    pub failures: usize,
    pub mean_exact_match: Option<f64>,
    pub best_exact_match: Option<f64>,
    pub mean_eval_loss: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(records: &[RecallRecord]) -> Vec<RecallSummary> {
    let mut keys: Vec<(Method, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.method, r.xi)) {
            keys.push((r.method, r.xi));
        }
    }
    keys.into_iter()
        .map(|(m, xi)| {
            let rs: Vec<&RecallRecord> = records.iter().filter(|r| r.method == m && r.xi == xi).collect();
            let em: Vec<f64> = rs.iter().filter_map(|r| r.exact_match).collect();
            let loss: Vec<f64> = rs.iter().filter_map(|r| r.eval_loss).collect();
            RecallSummary {
                method: m,
                xi,
                runs: rs.len(),
                failures: rs.iter().filter(|r| r.failure.is_some()).count(),
                mean_exact_match: mean(&em),
                best_exact_match: em.iter().cloned().reduce(f64::max),
                mean_eval_loss: mean(&loss),
            }
        })
        .collect()
}

/// Methods whose mean accuracy rises when the rate grows; reported, never fatal.
pub fn degradation_violations(summary: &[RecallSummary]) -> Vec<String> {
    let mut out = Vec::new();
    for a in summary {
        for b in summary {
            if a.method == b.method && a.xi < b.xi {
                if let (Some(x), Some(y)) = (a.mean_exact_match, b.mean_exact_match) {
                    if y > x {
                        out.push(format!("{}: xi={} scores {y:.3} above xi={} at {x:.3}", a.method, b.xi, a.xi));
                    }
                }
            }
        }
    }
    out
}

/// One JSON object per line.
pub fn records_jsonl(records: &[RecallRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn summary_csv(summary: &[RecallSummary]) -> Result<String> {
    crate::constructions::to_csv(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RecallTask {
        RecallTask {
            n_keys: 8,
            n_values: 8,
            min_pairs: 1,
            max_pairs: 4,
            n_train: 64,
            n_eval: 16,
            eval_pairs: None,
        }
    }

    #[test]
    fn one_pair_answers_its_value() {
        let task = RecallTask {
            min_pairs: 1,
            max_pairs: 1,
            ..small()
        };
        let d = gen_recall(&task, 3).unwrap();
        for s in d.train.iter().chain(&d.eval) {
            assert_eq!(s.answer, s.pairs[0].1);
        }
    }

    #[test]
    fn oracle_recovers_every_answer() {
        let d = gen_recall(&small(), 5).unwrap();
        for s in d.train.iter().chain(&d.eval) {
            s.validate(&d.task).unwrap();
            let e = s.episode();
            assert_eq!(scan_oracle(&e.context, e.query[1]), Some(s.answer));
        }
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let task = small();
        let d = gen_recall(&RecallTask { min_pairs: 3, ..task.clone() }, 1).unwrap();
        let mut s = d.eval[0].clone();
        s.pairs[1].0 = s.pairs[0].0;
        assert!(s.validate(&task).is_err());
    }

    #[test]
    fn too_few_keys_is_an_error() {
        let task = RecallTask { n_keys: 3, ..small() };
        assert!(gen_recall(&task, 0).is_err());
    }

    #[test]
    fn exact_match_counts() {
        let d = gen_recall(&small(), 2).unwrap();
        let perfect: Vec<usize> = d.eval.iter().map(|s| s.answer).collect();
        assert_eq!(eval_exact_match(&perfect, &d.eval).unwrap(), 1.0);
        let v = d.task.value_token(0);
        let constant = vec![v; d.eval.len()];
        let freq = d.eval.iter().filter(|s| s.answer == v).count() as f64 / d.eval.len() as f64;
        assert_eq!(eval_exact_match(&constant, &d.eval).unwrap(), freq);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_recall(&small(), 9).unwrap();
        let b = gen_recall(&small(), 9).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
    }
}
