//! Central-difference probes covering every differentiable graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::gradcheck::{grad_check, grad_check_where};
use super::graph::{BnParams, Graph, Var};
use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used by every probe.
pub const PROBE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Contracts `y` against a fixed random tensor so every output coordinate
/// reaches the scalar loss with a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = randn(&mut ChaCha8Rng::seed_from_u64(seed), g.shape(y), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

struct Fixture {
    x: Tensor,
    other: Tensor,
    row: Tensor,
    kernel: Tensor,
    conv_bias: Tensor,
    rhs: Tensor,
    lin_w: Tensor,
    lin_b: Tensor,
    store: ParamStore,
    bn: BnParams,
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bn = BnParams {
            gamma: store.add("gamma", randn(&mut r, &[3], 1.0), ParamKind::NoDecay)?,
            beta: store.add("beta", randn(&mut r, &[3], 1.0), ParamKind::NoDecay)?,
            running_mean: store.add("mean", randn(&mut r, &[3], 0.5), ParamKind::Buffer)?,
            running_var: store.add("var", Tensor::from_fn(&[3], |_| r.random_range(0.5..1.5)), ParamKind::Buffer)?,
        };
        Ok(Self {
            x: randn(&mut r, &[2, 3, 5, 4], 1.0),
            other: randn(&mut r, &[2, 3, 5, 4], 1.0),
            row: randn(&mut r, &[5, 4], 1.0),
            kernel: randn(&mut r, &[4, 3, 3, 1], 0.5),
            conv_bias: randn(&mut r, &[4], 0.5),
            rhs: randn(&mut r, &[2, 4, 4], 1.0),
            lin_w: randn(&mut r, &[6, 4], 0.5),
            lin_b: randn(&mut r, &[6], 0.5),
            store,
            bn,
        })
    }
}

fn check(out: &mut Vec<PrimitiveCheck>, name: &'static str, x: &Tensor, probe: &dyn Fn(&mut Graph, Var) -> Result<Var>) -> Result<()> {
    let max_rel_error = grad_check(probe, x, PROBE_EPS)?;
    out.push(PrimitiveCheck { name, max_rel_error, coordinates: x.numel() });
    Ok(())
}

/// Runs every probe and returns its worst relative error.
pub fn primitive_suite(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let f = Fixture::new(seed)?;
    let mut out = Vec::new();
    let labels: Vec<usize> = (0..30).map(|i| (7 * i) % 4).collect();

    check(&mut out, "add", &f.x, &|g, v| {
        let c = g.constant(f.other.clone());
        let y = g.add(v, c)?;
        project(g, y, 1)
    })?;
    check(&mut out, "add_broadcast.lhs", &f.x, &|g, v| {
        let c = g.constant(f.row.clone());
        let y = g.add_broadcast(v, c)?;
        project(g, y, 2)
    })?;
    check(&mut out, "add_broadcast.rhs", &f.row, &|g, v| {
        let c = g.constant(f.x.clone());
        let y = g.add_broadcast(c, v)?;
        project(g, y, 3)
    })?;
    check(&mut out, "mul", &f.x, &|g, v| {
        let c = g.constant(f.other.clone());
        let y = g.mul(v, c)?;
        let z = g.mul(y, v)?;
        project(g, z, 4)
    })?;
    check(&mut out, "scale", &f.x, &|g, v| {
        let y = g.scale(v, -1.7);
        project(g, y, 5)
    })?;
    check(&mut out, "scale_by.tensor", &f.x, &|g, v| {
        let s = g.constant(Tensor::scalar(0.6));
        let y = g.scale_by(v, s)?;
        project(g, y, 6)
    })?;
    check(&mut out, "scale_by.scalar", &Tensor::scalar(-0.8), &|g, s| {
        let x = g.constant(f.x.clone());
        let y = g.scale_by(x, s)?;
        project(g, y, 7)
    })?;
    check(&mut out, "matmul.lhs", &f.x, &|g, v| {
        let a = g.reshape(v, &[2, 15, 4])?;
        let b = g.constant(f.rhs.clone());
        let y = g.matmul(a, b)?;
        project(g, y, 8)
    })?;
    check(&mut out, "matmul.rhs", &f.rhs, &|g, v| {
        let a = g.constant(f.x.clone().reshape(&[2, 15, 4])?);
        let y = g.matmul(a, v)?;
        project(g, y, 9)
    })?;
    check(&mut out, "transpose", &f.x, &|g, v| {
        let a = g.reshape(v, &[6, 5, 4])?;
        let y = g.transpose(a)?;
        project(g, y, 10)
    })?;
    check(&mut out, "permute", &f.x, &|g, v| {
        let y = g.permute(v, &[3, 0, 2, 1])?;
        project(g, y, 11)
    })?;
    check(&mut out, "conv2d.input", &f.x, &|g, v| {
        let w = g.constant(f.kernel.clone());
        let b = g.constant(f.conv_bias.clone());
        let y = g.conv2d(v, w, Some(b), 2, 1)?;
        project(g, y, 12)
    })?;
    check(&mut out, "conv2d.weight", &f.kernel, &|g, w| {
        let x = g.constant(f.x.clone());
        let y = g.conv2d(x, w, None, 1, 1)?;
        project(g, y, 13)
    })?;
    check(&mut out, "conv2d.bias", &f.conv_bias, &|g, b| {
        let x = g.constant(f.x.clone());
        let w = g.constant(f.kernel.clone());
        let y = g.conv2d(x, w, Some(b), 1, 0)?;
        project(g, y, 14)
    })?;
    for (name, training) in [("batch_norm.train", true), ("batch_norm.eval", false)] {
        check(&mut out, name, &f.x, &|g, v| {
            let y = g.batch_norm(&f.store, v, f.bn, training)?;
            project(g, y, 15)
        })?;
    }
    // Kinks are excluded by keeping coordinates near zero out of the comparison.
    let relu = grad_check_where(
        |g: &mut Graph, v| {
            let y = g.relu(v);
            project(g, y, 16)
        },
        &f.x,
        PROBE_EPS,
        |_, x| x.abs() > 10.0 * PROBE_EPS,
    )?;
    out.push(PrimitiveCheck { name: "relu", max_rel_error: relu, coordinates: f.x.numel() });
    check(&mut out, "softmax", &f.x, &|g, v| {
        let y = g.softmax(v);
        project(g, y, 17)
    })?;
    check(&mut out, "sum", &f.x, &|g, v| {
        let y = g.mul(v, v)?;
        Ok(g.sum(y))
    })?;
    check(&mut out, "mean_last", &f.x, &|g, v| {
        let y = g.mean_last(v)?;
        project(g, y, 18)
    })?;
    check(&mut out, "linear.input", &f.x, &|g, v| {
        let a = g.reshape(v, &[30, 4])?;
        let w = g.constant(f.lin_w.clone());
        let b = g.constant(f.lin_b.clone());
        let y = g.linear(a, w, Some(b))?;
        project(g, y, 19)
    })?;
    check(&mut out, "linear.weight", &f.lin_w, &|g, w| {
        let a = g.constant(f.x.clone().reshape(&[30, 4])?);
        let y = g.linear(a, w, None)?;
        project(g, y, 20)
    })?;
    check(&mut out, "linear.bias", &f.lin_b, &|g, b| {
        let a = g.constant(f.x.clone().reshape(&[30, 4])?);
        let w = g.constant(f.lin_w.clone());
        let y = g.linear(a, w, Some(b))?;
        project(g, y, 21)
    })?;
    check(&mut out, "dropout", &f.x, &|g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let y = g.dropout(v, 0.3, true, &mut rng)?;
        project(g, y, 22)
    })?;
    check(&mut out, "cross_entropy", &f.x, &|g, v| {
        let a = g.reshape(v, &[30, 4])?;
        g.cross_entropy(a, &labels)
    })?;
    Ok(out)
}
