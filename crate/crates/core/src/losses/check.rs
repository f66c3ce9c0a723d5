//! Finite-difference verification of every objective term against the
//! tape gradients, over all parameters of both branches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{build_loss, dce_loss, embed_batch, l_faem, l_fb, l_f, l_orth, l_pb, penalty_set, Batch, LossWeights, Objective, Penalty};
use crate::error::Result;
use crate::model::{init_model, DualBranchModel, EncoderConfig};
use crate::ndnum::{grad_check_many, Tape, Tensor, Var};

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;
const MIN_KINK_MARGIN: f64 = 1e-4;
const MAX_ATTEMPTS: usize = 200;

pub const TERMS: [&str; 8] = ["dce", "l_f", "l_fb", "l_faem", "l_orth", "l_pb", "l_opl", "total"];

#[derive(Debug, Clone, Serialize)]
pub struct TermCheck {
    pub term: &'static str,
    pub max_relative_error: f64,
    pub points: usize,
}

impl TermCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADIENT_TOLERANCE
    }
}

fn random_problem(seed: u64) -> (DualBranchModel, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        input_dim: 5,
        hidden_dims: vec![6],
        feature_dim: 4,
        activation: Default::default(),
    };
    let mut model = init_model(&cfg, 3, seed).unwrap();
    // mix both regimes of the smooth norm
    for b in [&mut model.branch_a, &mut model.branch_b] {
        let s = rng.gen_range(0.2..1.0);
        b.prototypes.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect() };
    let batch = Batch {
        known_x: Tensor::matrix(6, 5, draw(30)).unwrap(),
        known_y: vec![0, 1, 2, 2, 1, 0],
        background_x: Tensor::matrix(6, 5, draw(30)).unwrap(),
    };
    (model, batch)
}

fn frozen_selection(model: &DualBranchModel, batch: &Batch) -> Result<Vec<Penalty>> {
    let za = model.branch_a.encode(&batch.background_x)?;
    let zb = model.branch_b.encode(&batch.background_x)?;
    penalty_set(&model.branch_a.similarity_matrix(&za)?, &model.branch_b.similarity_matrix(&zb)?)
}

fn base_kink_margin(model: &DualBranchModel, batch: &Batch, sel: &[Penalty]) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = model.bind(&mut tape, false);
    build_loss(&mut tape, &a, &b, batch, &Objective::default(), Some(sel))?;
    Ok(tape.kink_margin())
}

fn term_value(
    term: &str,
    tape: &mut Tape,
    vars: &[Var],
    model: &DualBranchModel,
    batch: &Batch,
    sel: &[Penalty],
) -> Result<Var> {
    let w = LossWeights::default();
    let na = model.branch_a.parameters().len();
    let a = model.branch_a.bind_vars(&vars[..na])?;
    let b = model.branch_b.bind_vars(&vars[na..])?;
    let kx = tape.constant(batch.known_x.clone());
    let bx = tape.constant(batch.background_x.clone());
    let ea = embed_batch(tape, &a, kx, Some(bx))?;
    let za_b = ea.background.unwrap();
    Ok(match term {
        "dce" => {
            let logits = a.similarity(tape, ea.known)?;
            dce_loss(tape, logits, &batch.known_y)?
        }
        "l_f" => l_f(tape, ea.known, &batch.known_y, a.prototypes)?,
        "l_fb" => {
            let c = a.center(tape)?;
            l_fb(tape, za_b, c)?
        }
        "l_faem" => l_faem(tape, &a, &ea, &batch.known_y, &w)?.total,
        "l_orth" => l_orth(tape, a.prototypes, b.prototypes)?,
        "l_pb" | "l_opl" => {
            let eb = embed_batch(tape, &b, kx, Some(bx))?;
            let pb = l_pb(tape, sel, za_b, eb.background.unwrap(), a.prototypes, b.prototypes)?;
            if term == "l_pb" {
                pb
            } else {
                let o = l_orth(tape, a.prototypes, b.prototypes)?;
                let wo = tape.scale(o, w.alpha);
                let wp = tape.scale(pb, w.beta);
                tape.add(wo, wp)?
            }
        }
        _ => build_loss(tape, &a, &b, batch, &Objective { weights: w, multi_projection: true }, Some(sel))?.total,
    })
}

/// Runs the finite-difference check for every term at `points` seeded
/// random problems. Problems whose forward pass lies within 1e-4 of a kink,
/// or whose background penalty selection is empty, are redrawn.
pub fn gradient_suite(seed: u64, points: usize) -> Result<Vec<TermCheck>> {
    let mut results: Vec<TermCheck> = TERMS
        .iter()
        .map(|&term| TermCheck {
            term,
            max_relative_error: 0.0,
            points: 0,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    let mut attempts = 0;
    while done < points && attempts < MAX_ATTEMPTS * points.max(1) {
        attempts += 1;
        let (model, batch) = random_problem(rng.gen());
        let sel = frozen_selection(&model, &batch)?;
        if sel.is_empty() || base_kink_margin(&model, &batch, &sel)? < MIN_KINK_MARGIN {
            continue;
        }
        let params: Vec<Tensor> = model
            .branches()
            .iter()
            .flat_map(|b| b.parameters())
            .cloned()
            .collect();
        for r in results.iter_mut() {
            let report = grad_check_many(
                |tape, vars| term_value(r.term, tape, vars, &model, &batch, &sel),
                &params,
                STEP,
            )?;
            r.max_relative_error = r.max_relative_error.max(report.max_relative_error);
            r.points += 1;
        }
        done += 1;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_points() {
        let res = gradient_suite(3, 2).unwrap();
        assert_eq!(res.len(), TERMS.len());
        for r in &res {
            assert_eq!(r.points, 2);
            assert!(r.passed(), "{} {}", r.term, r.max_relative_error);
        }
    }
}
