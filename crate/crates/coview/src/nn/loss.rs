//! Loss kernels shared by the graph ops and the float64 gradient checks.
//!
//! Both losses are plain sums, with no batch averaging.

use ndarray::{Array1, ArrayD, Axis};

use super::var::{c, Elem};

/// Probabilities are clamped to `[EPS, 1-EPS]` before the logarithm.
pub const SEG_LOSS_EPS: f64 = 1e-7;

fn clamp_prob<F: Elem>(p: F) -> F {
    let eps = c::<F>(SEG_LOSS_EPS);
    p.max(eps).min(F::one() - eps)
}

/// Pixel-summed binary cross entropy between predicted foreground
/// probabilities and a {0,1} target of the same shape.
pub fn seg_loss_value<F: Elem>(probs: &ArrayD<F>, target: &ArrayD<F>) -> F {
    assert_eq!(probs.shape(), target.shape(), "seg loss shape mismatch");
    let mut acc = F::zero();
    for (&p, &t) in probs.iter().zip(target.iter()) {
        let p = clamp_prob(p);
        acc = acc - (t * p.ln() + (F::one() - t) * (F::one() - p).ln());
    }
    acc
}

/// Loss together with its gradient w.r.t. the probabilities. The clamp is
/// part of the function, so the gradient is zero where it saturates.
pub fn seg_loss_value_grad<F: Elem>(probs: &ArrayD<F>, target: &ArrayD<F>) -> (F, ArrayD<F>) {
    assert_eq!(probs.shape(), target.shape(), "seg loss shape mismatch");
    let eps = c::<F>(SEG_LOSS_EPS);
    let mut acc = F::zero();
    let mut grad = ArrayD::zeros(probs.raw_dim());
    for ((&p, &t), g) in probs.iter().zip(target.iter()).zip(grad.iter_mut()) {
        let pc = clamp_prob(p);
        acc = acc - (t * pc.ln() + (F::one() - t) * (F::one() - pc).ln());
        if p > eps && p < F::one() - eps {
            *g = -(t / pc) + (F::one() - t) / (F::one() - pc);
        }
    }
    (acc, grad)
}

/// Generalized contrastive loss over a batch of feature pairs.
///
/// `a` and `b` are `[N, ...]` with one exemplar per leading index; `y[i]`
/// is true for a correct correspondence. Differences are taken elementwise:
/// per scalar element, `y*(a-b)^2 + (1-y)*max(m - |a-b|, 0)^2`, summed over
/// everything.
pub fn contrastive_value<F: Elem>(a: &ArrayD<F>, b: &ArrayD<F>, y: &Array1<bool>, margin: F) -> F {
    assert_eq!(a.shape(), b.shape(), "contrastive shape mismatch");
    assert_eq!(a.shape()[0], y.len(), "label count mismatch");
    let mut acc = F::zero();
    for (i, &yi) in y.iter().enumerate() {
        let ai = a.index_axis(Axis(0), i);
        let bi = b.index_axis(Axis(0), i);
        for (&av, &bv) in ai.iter().zip(bi.iter()) {
            let d = av - bv;
            if yi {
                acc = acc + d * d;
            } else {
                let hinge = (margin - d.abs()).max(F::zero());
                acc = acc + hinge * hinge;
            }
        }
    }
    acc
}

/// Contrastive loss with gradients w.r.t. both feature blocks. At the hinge
/// corner `|a-b| == m` the subgradient is zero.
pub fn contrastive_value_grad<F: Elem>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    y: &Array1<bool>,
    margin: F,
) -> (F, ArrayD<F>, ArrayD<F>) {
    assert_eq!(a.shape(), b.shape(), "contrastive shape mismatch");
    assert_eq!(a.shape()[0], y.len(), "label count mismatch");
    let two = c::<F>(2.0);
    let mut acc = F::zero();
    let mut ga = ArrayD::zeros(a.raw_dim());
    let mut gb = ArrayD::zeros(b.raw_dim());
    for (i, &yi) in y.iter().enumerate() {
        let ai = a.index_axis(Axis(0), i);
        let bi = b.index_axis(Axis(0), i);
        let mut gai = ga.index_axis_mut(Axis(0), i);
        let mut gbi = gb.index_axis_mut(Axis(0), i);
        for (((&av, &bv), gav), gbv) in ai
            .iter()
            .zip(bi.iter())
            .zip(gai.iter_mut())
            .zip(gbi.iter_mut())
        {
            let d = av - bv;
            if yi {
                acc = acc + d * d;
                *gav = two * d;
                *gbv = -two * d;
            } else {
                let hinge = margin - d.abs();
                if hinge > F::zero() {
                    acc = acc + hinge * hinge;
                    // d/da |a-b| = sign(a-b); zero contribution exactly at d = 0.
                    let sign = if d > F::zero() {
                        F::one()
                    } else if d < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    *gav = -two * hinge * sign;
                    *gbv = two * hinge * sign;
                }
            }
        }
    }
    (acc, ga, gb)
}

/// Squared L2 distance between two equally shaped feature blocks, the
/// ranking score for retrieval.
pub fn squared_distance<F: Elem>(a: &ArrayD<F>, b: &ArrayD<F>) -> F {
    assert_eq!(a.shape(), b.shape(), "distance shape mismatch");
    let mut acc = F::zero();
    for (&av, &bv) in a.iter().zip(b.iter()) {
        let d = av - bv;
        acc = acc + d * d;
    }
    acc
}
