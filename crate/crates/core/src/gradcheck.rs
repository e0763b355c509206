//! Finite-difference verification of the full model gradient.
//!
//! Builds a small synthetic instance, takes the summed BCE loss of the whole
//! network (sequence encoder, message-passing layers, classifier) and compares
//! the tape gradient with central differences on sampled coordinates of every
//! parameter block.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{bce_loss, forward, Ablation, ForwardOptions, ModelParams};
use crate::rng::{derive_seed, stream};
use crate::sampler::{sample_block, Block};
use crate::synth::{generate, SynthConfig};
use crate::tensor::Tape;
use crate::train::{xavier_init, Prepared, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub nodes: usize,
    pub hidden: usize,
    pub attr_dim: usize,
    pub t_max: usize,
    pub layers: usize,
    /// Coordinates per block; smaller blocks are checked exhaustively.
    pub coords_per_block: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero are judged on absolute error.
    pub floor: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            hidden: 8,
            attr_dim: 3,
            t_max: 4,
            layers: 2,
            coords_per_block: 100,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            ablation: Ablation::None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CoordCheck>,
    pub tolerance: f64,
    pub blocks: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.checks.iter().filter(|c| c.rel_error >= self.tolerance)
    }

    /// The `n` largest relative errors, largest first.
    pub fn worst(&self, n: usize) -> Vec<&CoordCheck> {
        let mut all: Vec<&CoordCheck> = self.checks.iter().collect();
        all.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        all.truncate(n);
        all
    }
}

/// The instance a check runs on: prepared graph, block over every node and labels.
pub struct Instance {
    pub prepared: Prepared,
    pub block: Block,
    pub labels: Vec<bool>,
    pub params: ModelParams,
    pub ablation: Ablation,
}

impl Instance {
    pub fn build(cfg: &GradcheckConfig) -> Result<Self> {
        if cfg.nodes < 4 {
            return Err(Error::Argument("gradcheck needs at least 4 nodes".into()));
        }
        let n_illicit = (cfg.nodes / 4).max(2);
        let (graph, labels) = generate(&SynthConfig {
            n_normal: cfg.nodes - n_illicit,
            n_illicit,
            mean_out_degree: 3.0,
            attr_dim: cfg.attr_dim,
            seed: derive_seed(cfg.seed, &["gradcheck", "graph"]),
            ..SynthConfig::default()
        })?;
        let prepared = Prepared::new(&graph, cfg.t_max, true, None)?;
        let train_cfg = TrainConfig {
            hidden: cfg.hidden,
            layers: cfg.layers,
            fanouts: vec![1; cfg.layers],
            ablation: cfg.ablation,
            ..TrainConfig::default()
        };
        let dims = train_cfg.dims(cfg.attr_dim)?;
        let mut params = xavier_init(dims, derive_seed(cfg.seed, &["gradcheck", "init"]));
        // non-zero biases so their gradients are not trivially symmetric
        let mut rng = stream(derive_seed(cfg.seed, &["gradcheck", "bias"]));
        for t in params.values_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        let nodes: Vec<usize> = (0..graph.node_count()).collect();
        let full = vec![graph.max_degree().max(1); dims.layers];
        let block = sample_block(&prepared.graph, &nodes, &full, 0)?;
        let y = nodes.iter().map(|&v| labels.get(v).unwrap_or(false)).collect();
        Ok(Self {
            prepared,
            block,
            labels: y,
            params,
            ablation: cfg.ablation,
        })
    }

    pub fn loss(&self, params: &ModelParams) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind_constant(&mut tape)?;
        let out = forward(
            &mut tape,
            &self.block,
            &self.prepared.cache,
            &bound,
            params.dims(),
            &ForwardOptions::eval(self.ablation),
        )?;
        let loss = bce_loss(&mut tape, out.probs, &self.labels)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and gradient per block, in [`ModelParams::named`] order.
    pub fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let out = forward(
            &mut tape,
            &self.block,
            &self.prepared.cache,
            &bound,
            params.dims(),
            &ForwardOptions::eval(self.ablation),
        )?;
        let loss = bce_loss(&mut tape, out.probs, &self.labels)?;
        let grads = tape.backward(loss)?;
        let g = bound.named().into_iter().map(|(_, &v)| grads.get(v).into_data()).collect();
        Ok((tape.value(loss).data()[0], g))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0 && cfg.floor > 0.0) {
        return Err(Error::Argument("step, tolerance and floor must be positive".into()));
    }
    let inst = Instance::build(cfg)?;
    let (_, analytic) = inst.loss_and_grad(&inst.params)?;
    let names: Vec<(String, usize)> = inst
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let mut checks = Vec::new();
    let mut work = inst.params.clone();
    for (b, (name, numel)) in names.iter().enumerate() {
        let coords: Vec<usize> = if *numel <= cfg.coords_per_block {
            (0..*numel).collect()
        } else {
            let mut rng = stream(derive_seed(cfg.seed, &["gradcheck", "coords", name]));
            let mut c = index::sample(&mut rng, *numel, cfg.coords_per_block).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = work.values_mut()[b].data()[i];
            work.values_mut()[b].data_mut()[i] = orig + cfg.step;
            let plus = inst.loss(&work)?;
            work.values_mut()[b].data_mut()[i] = orig - cfg.step;
            let minus = inst.loss(&work)?;
            work.values_mut()[b].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[b][i];
            checks.push(CoordCheck {
                block: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, cfg.floor),
            });
        }
    }
    Ok(GradcheckReport {
        checks,
        tolerance: cfg.tolerance,
        blocks: names.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instance_passes() {
        let cfg = GradcheckConfig {
            nodes: 8,
            coords_per_block: 5,
            ..GradcheckConfig::default()
        };
        let r = run(&cfg).unwrap();
        assert!(r.passed(), "worst {:?}", r.worst(3));
        assert_eq!(r.blocks, 34);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-5), 0.0);
        assert_eq!(relative_error(1e-9, 0.0, 1e-5), 1e-4);
        assert_eq!(relative_error(2.0, 1.0, 1e-5), 0.5);
    }
}
