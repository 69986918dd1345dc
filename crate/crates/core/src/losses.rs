//! Chamfer distance and the reconstruction objectives.

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::geometry::{KdTree, PointCloud};

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Chamfer distance between two clouds using kd-tree nearest neighbors:
/// mean squared distance from `a` to `b` plus mean from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    one_sided(a, &KdTree::build(b.points())) + one_sided(b, &KdTree::build(a.points()))
}

fn one_sided(from: &PointCloud, to: &KdTree) -> f64 {
    let s: f64 = from
        .points()
        .iter()
        .map(|p| to.nearest(p).map(|x| x.1).unwrap_or(f64::INFINITY))
        .sum();
    s / from.len() as f64
}

/// Loss values of one step. When decomposed, `total = local + lambda * global`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub local: f64,
    pub global: f64,
    pub lambda: f64,
}

pub fn loss_all(local: f64, global: f64, lambda: f64) -> Result<LossReport> {
    check_lambda(lambda)?;
    Ok(LossReport {
        total: local + lambda * global,
        local,
        global,
        lambda,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

/// Chamfer between a reconstruction and the clean cloud (global-feature path).
pub fn loss_nontransformer<T: Scalar>(g: &mut Graph<T>, recon: Var, clean: Var) -> Result<Var> {
    g.chamfer(recon, clean)
}

/// Mean per-patch chamfer over `[m, k, 3]` predicted and target patches.
pub fn loss_local<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) || g.shape(pred).len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "loss_local",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(gt).to_vec(),
        });
    }
    g.chamfer(pred, gt)
}

/// Chamfer between predicted and target `[n, 3]` centers.
pub fn loss_global<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::ShapeMismatch {
            op: "loss_global",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(gt).to_vec(),
        });
    }
    g.chamfer(pred, gt)
}

/// Chamfer between a whole-cloud prediction and the target cloud.
pub fn loss_whole<T: Scalar>(g: &mut Graph<T>, pred: Var, clean: Var) -> Result<Var> {
    g.chamfer(pred, clean)
}

/// `local + lambda * global` as a graph node.
pub fn combine<T: Scalar>(g: &mut Graph<T>, local: Var, global: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let weighted = g.scale(global, T::lit(lambda));
    g.add(local, weighted)
}
