//! Finite-difference checks over every trainable architecture in the crate.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::compress::{episode_loss, CompressionConfig, Episode, Method, ModelBundle};
use crate::error::Result;
use crate::layers::{attention_rows, block_rows, grad_check, normal_matrix, BlockParams, GradCheckOptions, MlpKind, RowPlan};
use crate::masks::AttentionMask;
use crate::model::ModelSpec;
use crate::rng::substream;
use crate::synthpool::*;
use crate::tape::{AttnBlock, Graph, HeadConfig, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradSuiteOptions {
    pub epsilon: f64,
    pub samples_per_tensor: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradSuiteOptions {
    fn default() -> Self {
        GradSuiteOptions {
            epsilon: 1e-5,
            samples_per_tensor: 12,
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

fn flat<S>(params: &[(S, &Array2<f64>)]) -> Vec<Array2<f64>> {
    params.iter().map(|(_, t)| (*t).clone()).collect()
}

fn opts(o: &GradSuiteOptions, name: &str) -> GradCheckOptions {
    GradCheckOptions {
        epsilon: o.epsilon,
        samples_per_tensor: o.samples_per_tensor,
        seed: crate::rng::subseed(o.seed, name),
    }
}

fn case(name: &str, o: &GradSuiteOptions, r: Result<crate::layers::GradCheckReport>) -> Result<GradCase> {
    let r = r?;
    Ok(GradCase {
        name: name.to_string(),
        max_rel_err: r.max_rel_err,
        checked: r.checked,
        passed: r.max_rel_err < o.tolerance,
    })
}

/// One attention sublayer under a causal mask, MSE against a fixed target.
pub fn check_attention(o: &GradSuiteOptions) -> Result<GradCase> {
    let name = "attention";
    let mut rng = substream(o.seed, name);
    let (n, d) = (5, 8);
    let block = BlockParams::<f64>::init(d, 16, HeadConfig::new(2, 1, 4)?, MlpKind::GeGlu, &mut rng)?;
    let x: Array2<f64> = normal_matrix(n, d, 1.0, &mut rng);
    let target: Array2<f64> = normal_matrix(n, d, 1.0, &mut rng);
    let plan = RowPlan::dense(&AttentionMask::causal(n));
    let positions: Vec<usize> = (0..n).collect();
    let params = flat(&block.named_tensors());
    let r = grad_check(
        |g: &mut Graph<f64>, vs: &[Var]| {
            let bv = block.vars_from(&mut vs.iter().copied());
            let xv = g.constant(x.clone());
            let out = attention_rows(g, &bv, xv, &positions, &plan)?;
            Ok(g.mse(out, target.clone()))
        },
        &params,
        opts(o, name),
    );
    case(name, o, r)
}

/// A full block, for either MLP kind, on a subset of query rows.
pub fn check_block(o: &GradSuiteOptions, mlp: MlpKind) -> Result<GradCase> {
    let name = format!("block/{}", if mlp == MlpKind::GeGlu { "GEGLU" } else { "GELU" });
    let mut rng = substream(o.seed, &name);
    let (n, d) = (6, 8);
    let block = BlockParams::<f64>::init(d, 16, HeadConfig::new(2, 1, 4)?, mlp, &mut rng)?;
    let x: Array2<f64> = normal_matrix(n, d, 1.0, &mut rng);
    // only the last three rows produce outputs; keys still cover every row
    let all: Vec<usize> = (0..n).collect();
    let plan = RowPlan {
        q_rows: vec![3, 4, 5],
        blocks: Rc::new(vec![AttnBlock {
            q_rows: vec![0, 1, 2],
            k_rows: all.clone(),
            mask: AttentionMask::causal(n).submatrix(&[3, 4, 5], &all),
        }]),
    };
    let target: Array2<f64> = normal_matrix(3, d, 1.0, &mut rng);
    let positions: Vec<usize> = (0..n).collect();
    let params = flat(&block.named_tensors());
    let r = grad_check(
        |g: &mut Graph<f64>, vs: &[Var]| {
            let bv = block.vars_from(&mut vs.iter().copied());
            let xv = g.constant(x.clone());
            let out = block_rows(g, &bv, xv, &positions, &plan)?;
            Ok(g.mse(out, target.clone()))
        },
        &params,
        opts(o, &name),
    );
    case(&name, o, r)
}

/// The single-layer pooling model: block plus gist table, MSE at gist rows.
pub fn check_synthpool(o: &GradSuiteOptions, mask: SynthMask, gist_positions: GistPositions) -> Result<GradCase> {
    let name = format!("synthpool/{mask}/{gist_positions}");
    let cell = SynthCell {
        n: 8,
        xi: 2,
        source: Source::Hypersphere,
        regime: Regime::Variable,
        mask,
        heads: HeadSplit { n_heads: 2, n_kv_heads: 1 },
        gist_positions,
    };
    let settings = SynthSettings {
        d_model: 8,
        hidden: 16,
        head_total: 8,
        ..SynthSettings::default()
    };
    let config = SynthConfig { cell, settings };
    let model = SynthModel::<f64>::init(&config, &mut substream(o.seed, &name))?;
    let src = SampleSource::<f64>::new(&cell, &config.settings, o.seed)?;
    let mut rng = substream(o.seed, &format!("{name}/data"));
    let batch = vec![src.sample(&mut rng)?, src.sample(&mut rng)?];
    let mut params = flat(&model.block.named_tensors());
    params.push(model.gists.clone());
    let r = grad_check(
        |g: &mut Graph<f64>, vs: &[Var]| {
            let bv = model.block.vars_from(&mut vs.iter().copied());
            let (loss, _) = synth_loss_graph(g, &bv, vs[vs.len() - 1], &cell, &batch)?;
            Ok(loss)
        },
        &params,
        opts(o, &name),
    );
    case(&name, o, r)
}

/// Two-layer decoder trained through both the compression and the prediction pass.
pub fn check_compress(o: &GradSuiteOptions, method: Method) -> Result<GradCase> {
    let name = format!("compress/{method}");
    let spec = ModelSpec {
        vocab: 12,
        d_model: 16,
        hidden: 32,
        n_layers: 2,
        heads: HeadConfig::new(2, 1, 8)?,
        mlp: MlpKind::GeGlu,
    };
    let config = CompressionConfig::new(method, 2);
    let bundle = ModelBundle::<f64>::init(&spec, &config, 6, &mut substream(o.seed, &name))?;
    let batch = vec![
        Episode {
            context: vec![3, 4, 5, 6, 7, 8],
            query: vec![1, 5],
            answer: vec![6, 2],
        },
        Episode {
            context: vec![9, 10, 11, 2],
            query: vec![1, 11],
            answer: vec![2],
        },
    ];
    let params = flat(&bundle.named_tensors());
    let r = grad_check(
        |g: &mut Graph<f64>, vs: &[Var]| {
            let bv = bundle.vars_from(vs);
            episode_loss(g, &bundle, &bv, &config, &batch)
        },
        &params,
        opts(o, &name),
    );
    case(&name, o, r)
}

/// Every case, in a fixed order.
pub fn run_grad_suite(o: &GradSuiteOptions) -> Result<Vec<GradCase>> {
    let mut out = vec![
        check_attention(o)?,
        check_block(o, MlpKind::GeGlu)?,
        check_block(o, MlpKind::Gelu)?,
    ];
    for mask in [SynthMask::Standard, SynthMask::Pool] {
        for gp in [GistPositions::Sequential, GistPositions::FrozenZero] {
            out.push(check_synthpool(o, mask, gp)?);
        }
    }
    for m in Method::ALL {
        out.push(check_compress(o, m)?);
    }
    Ok(out)
}
