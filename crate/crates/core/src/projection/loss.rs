use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::model::{silu_grad, ProjectionModel};
use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.2;

/// Anchor (type description), positive mention, negative mention.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: Vec<f32>,
    pub positive: Vec<f32>,
    pub negative: Vec<f32>,
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `max(0, d(a, p) - d(a, n) + margin)` with `d(u, v) = 1 - cos(u, v)`.
pub fn triplet_loss(a: &[f32], p: &[f32], n: &[f32], margin: f64) -> Result<f64> {
    let pos = crate::sweep::cosine(a, p)?;
    let neg = crate::sweep::cosine(a, n)?;
    Ok(((1.0 - pos) - (1.0 - neg) + margin).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BatchGrad {
    /// Mean loss over every triplet in the batch, inactive ones included.
    pub loss: f64,
    pub active: usize,
    pub grads: Gradients,
}

fn stack(model: &ProjectionModel, batch: &[Triplet]) -> Result<Array2<f64>> {
    let d = model.dims().input;
    let b = batch.len();
    for t in batch {
        for v in [&t.anchor, &t.positive, &t.negative] {
            if v.len() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    actual: v.len(),
                });
            }
        }
    }
    Ok(Array2::from_shape_fn((3 * b, d), |(r, j)| {
        let t = &batch[r % b];
        f64::from(match r / b {
            0 => t.anchor[j],
            1 => t.positive[j],
            _ => t.negative[j],
        })
    }))
}

/// Mean triplet loss and its exact gradient for one batch.
///
/// `masks` holds one dropout row per input, laid out as all anchors, then all
/// positives, then all negatives. `None` disables dropout.
pub fn backward(
    model: &ProjectionModel,
    batch: &[Triplet],
    margin: f64,
    masks: Option<&Array2<f64>>,
) -> Result<BatchGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("triplet batch"));
    }
    let b = batch.len();
    let dims = model.dims();
    if let Some(m) = masks {
        if m.dim() != (3 * b, dims.hidden) {
            return Err(Error::InvalidParams(format!(
                "dropout mask shape {:?}, expected {:?}",
                m.dim(),
                (3 * b, dims.hidden)
            )));
        }
    }
    let x = stack(model, batch)?;
    let p = model.wide();
    let act = model.forward_rows(&p, x.view(), masks);

    let mut d_out = Array2::<f64>::zeros(act.out.dim());
    let mut total = 0.0;
    let mut active = 0;
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let ya = act.out.row(i);
        let yp = act.out.row(b + i);
        let yn = act.out.row(2 * b + i);
        let (na, np, nn) = (norm(ya), norm(yp), norm(yn));
        if na == 0.0 || np == 0.0 || nn == 0.0 {
            return Err(Error::ZeroVector);
        }
        let ua = &ya / na;
        let up = &yp / np;
        let un = &yn / nn;
        let l = ua.dot(&un) - ua.dot(&up) + margin;
        if l <= 0.0 {
            continue;
        }
        total += l;
        active += 1;
        let ga = (&un - &up) * scale;
        let gp = &ua * -scale;
        let gn = &ua * scale;
        for (row, u, g, n) in [(i, &ua, ga, na), (b + i, &up, gp, np), (2 * b + i, &un, gn, nn)] {
            let proj = u.dot(&g);
            let gy = (&g - &(u * proj)) / n;
            d_out.row_mut(row).assign(&gy);
        }
    }

    let w2 = d_out.t().dot(&act.hidden);
    let b2 = d_out.sum_axis(Axis(0));
    let mut d_pre = d_out.dot(&p.w2);
    if let Some(m) = masks {
        d_pre *= m;
    }
    d_pre.zip_mut_with(&act.pre, |g, &z| *g *= silu_grad(z));
    let w1 = d_pre.t().dot(&x);
    let b1 = d_pre.sum_axis(Axis(0));
    Ok(BatchGrad {
        loss: total * scale,
        active,
        grads: Gradients { w1, b1, w2, b2 },
    })
}
