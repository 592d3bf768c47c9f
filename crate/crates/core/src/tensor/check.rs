//! Central finite differences against the reverse sweep.

use std::collections::BTreeMap;

use super::{Graph, NodeId, Tensor, TensorError};

/// Named parameter collection handed to graph builders.
pub type NamedTensors = BTreeMap<String, Tensor>;

fn eval<F>(build: &F, params: &NamedTensors, name: &str) -> Result<f64, TensorError>
where
    F: Fn(&NamedTensors) -> Result<(Graph, NodeId), TensorError>,
{
    let (graph, loss) = build(params)?;
    let t = graph.value(loss);
    if t.shape() != [1, 1] {
        return Err(TensorError::NonScalarLoss {
            shape: t.shape().to_vec(),
        });
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(TensorError::NonFiniteEval {
            name: name.to_string(),
        });
    }
    Ok(v)
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct a fresh graph from the given parameters and return
/// its scalar loss node. Every element of every parameter is perturbed by
/// `eps` in both directions; the result is the largest relative error seen,
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// Parameters absent from the gradient map (leaves without `requires_grad`,
/// or never mounted) are treated as having analytic gradient zero, so a
/// parameter the loss actually uses will surface as a mismatch.
pub fn grad_check<F>(build: F, params: &NamedTensors, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&NamedTensors) -> Result<(Graph, NodeId), TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::EpsOutOfRange { eps });
    }
    let (graph, loss) = build(params)?;
    let base = graph.value(loss);
    if base.shape() != [1, 1] {
        return Err(TensorError::NonScalarLoss {
            shape: base.shape().to_vec(),
        });
    }
    if !base.data()[0].is_finite() {
        return Err(TensorError::NonFiniteEval {
            name: "<unperturbed>".to_string(),
        });
    }
    let grads = graph.backward(loss)?;

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for (name, original) in params {
        for i in 0..original.len() {
            let center = original.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = center + eps;
            let plus = eval(&build, &work, name)?;
            work.get_mut(name).unwrap().data_mut()[i] = center - eps;
            let minus = eval(&build, &work, name)?;
            work.get_mut(name).unwrap().data_mut()[i] = center;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap().with_grad()
    }

    #[test]
    fn linear_map_is_exact_to_rounding() {
        let mut params = NamedTensors::new();
        params.insert(
            "w".into(),
            param(2, 3, vec![0.5, -1.0, 2.0, 3.0, -0.25, 1.5]),
        );
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, -1.0]).unwrap();
        let err = grad_check(
            move |p| {
                let mut g = Graph::new();
                let w = g.leaf("w", &p["w"])?;
                let xc = g.constant(&x);
                let y = g.matmul(w, xc)?;
                let loss = g.sum(y)?;
                Ok((g, loss))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn nonlinear_composite_stays_tight() {
        let mut params = NamedTensors::new();
        params.insert("w".into(), param(2, 2, vec![0.37, -0.81, 0.22, 0.63]));
        params.insert("v".into(), param(2, 1, vec![0.91, -0.44]));
        let x = Tensor::matrix(2, 2, vec![0.2, -0.7, 1.3, 0.5]).unwrap();
        let err = grad_check(
            move |p| {
                let mut g = Graph::new();
                let w = g.leaf("w", &p["w"])?;
                let v = g.leaf("v", &p["v"])?;
                let xc = g.constant(&x);
                let h = g.matmul(xc, w)?;
                let s = g.sigmoid(h)?;
                let sm = g.softmax_rows(s)?;
                let y = g.matmul(sm, v)?;
                let loss = g.sum(y)?;
                Ok((g, loss))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn unused_parameter_checks_clean() {
        let mut params = NamedTensors::new();
        params.insert("w".into(), param(1, 2, vec![1.0, 2.0]));
        params.insert("spare".into(), param(1, 2, vec![5.0, 6.0]));
        let err = grad_check(
            |p| {
                let mut g = Graph::new();
                let w = g.leaf("w", &p["w"])?;
                let _ = g.leaf("spare", &p["spare"])?;
                let loss = g.sum(w)?;
                Ok((g, loss))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn eps_bounds_enforced() {
        let params = NamedTensors::new();
        let build = |_: &NamedTensors| {
            let mut g = Graph::new();
            let c = g.constant(&Tensor::scalar(0.0));
            Ok((g, c))
        };
        assert!(matches!(
            grad_check(build, &params, 0.0),
            Err(TensorError::EpsOutOfRange { .. })
        ));
        assert!(matches!(
            grad_check(build, &params, 0.5),
            Err(TensorError::EpsOutOfRange { .. })
        ));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut params = NamedTensors::new();
        params.insert("x".into(), param(1, 1, vec![1e200]));
        let err = grad_check(
            |p| {
                let mut g = Graph::new();
                let x = g.leaf("x", &p["x"])?;
                let sq = g.mul(x, x)?;
                let quad = g.mul(sq, sq)?;
                let loss = g.sum(quad)?;
                Ok((g, loss))
            },
            &params,
            1e-5,
        );
        assert!(matches!(err, Err(TensorError::NonFiniteEval { .. })));
    }
}
