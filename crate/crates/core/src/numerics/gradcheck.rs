use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Analytic and central-difference gradients of a scalar graph function.
#[derive(Clone, Debug)]
pub struct GradientPair {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradientPair {
    /// `max_i |a_i − c_i| / (|a_i| + |c_i| + 1e-12)`
    pub fn max_relative_error(&self) -> f64 {
        relative_error(self.analytic.data(), self.numeric.data())
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, c)| (a - c).abs() / (a.abs() + c.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Builds `build(graph, x)` with `x` a trainable leaf bound to `point` and
/// returns both gradient estimates.
pub fn gradient_pair<F>(build: F, point: &Tensor, eps: f64) -> Result<GradientPair>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("finite-difference eps must be in (0, 1e-3], got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.trainable(point.clone());
    let loss = build(&mut g, x)?;
    let analytic = g
        .backward(loss)?
        .take(x)
        .expect("trainable leaf always has a gradient entry");

    let mut numeric = Tensor::new(point.shape().to_vec(), vec![0.0; point.len()])?;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        g.forward(&[(x, probe.clone())])?;
        let up = g.value(loss).item()?;
        probe.data_mut()[i] = orig - eps;
        g.forward(&[(x, probe.clone())])?;
        let down = g.value(loss).item()?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite-difference probe at coordinate {i}")));
        }
        numeric.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    g.forward(&[(x, point.clone())])?;
    Ok(GradientPair { analytic, numeric })
}

/// Max relative error between the analytic gradient and central differences.
pub fn finite_difference_check<F>(build: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    Ok(gradient_pair(build, point, eps)?.max_relative_error())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn sum_of_squares() {
        let mut rng = SeededRng::new(1);
        let point = Tensor::row((0..6).map(|_| rng.normal()).collect());
        let err = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn composite_ops_agree() {
        let mut rng = SeededRng::new(2);
        let point = Tensor::matrix(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let w = Tensor::matrix(4, 5, (0..20).map(|_| rng.normal()).collect()).unwrap();
        // softmax rows sum to one, so weight the output to keep a gradient
        let r = Tensor::matrix(3, 7, (0..21).map(|_| rng.normal()).collect()).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let w = g.input(w);
                let ln = g.layer_norm(x)?;
                let h = g.matmul(ln, w)?;
                let h = g.gelu(h)?;
                let t = g.transpose(h)?;
                let s = g.slice(t, 1..4, 0..3)?;
                let c = g.concat(&[s, ln], crate::numerics::Axis::Cols)?;
                let n = g.l2_normalize(c)?;
                let sm = g.softmax(n)?;
                let lg = g.log(sm)?;
                let e = g.exp(lg)?;
                let a = g.abs(e)?;
                let r = g.input(r);
                let p = g.mul(a, r)?;
                g.mean(p)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn eps_out_of_range() {
        let p = Tensor::scalar(1.0);
        assert!(finite_difference_check(|g, x| g.sum(x), &p, 0.1).is_err());
        assert!(finite_difference_check(|g, x| g.sum(x), &p, 0.0).is_err());
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let p = Tensor::scalar(1e-7);
        let r = finite_difference_check(|g, x| g.log(x), &p, 1e-6);
        assert!(r.is_err());
    }
}
