//! Finite-difference verification of the full model gradient on a toy graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::global::GlobalGraph;
use crate::hkg::{build_hypergraph, HFact, Vocabulary};
use crate::local::SequenceBatch;
use crate::model::{Architecture, Model};
use crate::numerics::{finite_difference_gradient, max_relative_error, Tape};

/// Pass threshold on the max relative error per parameter.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

pub const TOY_ENTITIES: usize = 12;
pub const TOY_RELATIONS: usize = 4;

/// Six facts over twelve entities; every fact becomes one hyperedge.
pub fn toy_facts() -> Vec<HFact> {
    vec![
        HFact::triple(0, 0, 1).with_qualifier(1, 2),
        HFact::triple(2, 1, 3),
        HFact::triple(4, 2, 5).with_qualifier(3, 6).with_qualifier(0, 7),
        HFact::triple(7, 0, 8),
        HFact::triple(9, 3, 10).with_qualifier(2, 11),
        HFact::triple(1, 1, 9),
    ]
}

pub fn toy_vocab() -> Vocabulary {
    Vocabulary::from_labels(
        (0..TOY_ENTITIES).map(|i| format!("e{i}")).collect(),
        (0..TOY_RELATIONS).map(|i| format!("r{i}")).collect(),
    )
    .expect("distinct labels")
}

/// d = 8, one global layer, two local layers, two heads each.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        embedding_dim: 8,
        global_layers: 1,
        global_heads: 2,
        local_layers: 2,
        local_heads: 2,
        hidden_size: 16,
        soft_label_entity: 0.1,
        soft_label_relation: 0.2,
        ..TrainConfig::default()
    }
}

/// Result for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Compare analytic and central-difference gradients of the batch loss for
/// every parameter. `corrupt` scales the first parameter's analytic gradient
/// by 1.5, which must make the check fail.
pub fn gradient_check(config: &TrainConfig, seed: u64, corrupt: bool) -> Result<Vec<GradCheckRow>> {
    let config = config.clone().finalize()?;
    let facts = toy_facts();
    let vocab = toy_vocab();
    let arch = Architecture::from_config(&config, TOY_ENTITIES, TOY_RELATIONS, facts.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(arch, &mut rng)?;
    // move off the zero-bias initialization so every path carries gradient
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model.zero_pad_rows();
    let graph = if model.arch.global_layers > 0 {
        Some(GlobalGraph::new(&build_hypergraph(&facts, TOY_ENTITIES)?, TOY_ENTITIES + 2)?)
    } else {
        None
    };
    let masks: [&[usize]; 6] = [&[4], &[0], &[1, 6], &[2], &[3], &[0, 1]];
    let queries: Vec<(&HFact, &[usize])> = facts.iter().zip(masks).collect();
    let batch = SequenceBatch::new(&queries, &vocab)?;
    let smoothing = (config.soft_label_entity, config.soft_label_relation);
    let loss_of = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let l = m.batch_loss(&mut tape, &bound, graph.as_ref(), &batch, smoothing, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(tape.value(l).data()[0])
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let l = model.batch_loss(&mut tape, &bound, graph.as_ref(), &batch, smoothing, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let grads = tape.backward(l)?;
    let mut analytic = model.params.clone();
    analytic.zero_grads();
    grads.accumulate_into(&tape, &mut analytic);

    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut rows = Vec::with_capacity(ids.len());
    for (k, id) in ids.into_iter().enumerate() {
        let x0 = model.params.value(id).clone();
        let mut probe = model.clone();
        let mut failure = None;
        let numeric = finite_difference_gradient(
            |x| {
                probe.params.get_mut(id).value = x.clone();
                loss_of(&probe).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            &x0,
            GRADCHECK_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let mut g = analytic.get(id).grad.clone();
        if corrupt && k == 0 {
            g.data_mut().iter_mut().for_each(|v| *v *= 1.5);
        }
        let err = max_relative_error(&g, &numeric);
        rows.push(GradCheckRow {
            name: analytic.get(id).name.clone(),
            elements: x0.len(),
            max_relative_error: err,
            passed: err <= GRADCHECK_TOLERANCE,
        });
    }
    Ok(rows)
}
