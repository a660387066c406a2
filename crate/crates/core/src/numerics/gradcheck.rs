use super::{Graph, NodeId, NumericsError, Tensor};

/// Compares an analytic gradient against central differences.
///
/// `f` maps an input to `(output, analytic_gradient)`; the output must be a
/// `[1 × 1]` scalar. Returns the largest elementwise relative error, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&Tensor) -> Result<(Tensor, Tensor), NumericsError>,
{
    let (out, analytic) = f(x)?;
    let scalar = |t: &Tensor| -> Result<f64, NumericsError> {
        if t.shape() != [1, 1] {
            return Err(NumericsError::NonScalar(t.shape().to_vec()));
        }
        Ok(t.get(0, 0))
    };
    scalar(&out)?;
    if !analytic.same_shape(x) {
        return Err(analytic.shape_err("grad_check", x));
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = scalar(&f(&probe)?.0)?;
        probe.data_mut()[i] = orig - eps;
        let down = scalar(&f(&probe)?.0)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Evaluates a graph-built function of one input and its gradient, suitable
/// as the `f` argument of [`grad_check`].
pub fn eval_graph<B>(build: B, x: &Tensor) -> Result<(Tensor, Tensor), NumericsError>
where
    B: Fn(&mut Graph<'_>, NodeId) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    let input = g.input(x.clone());
    let root = build(&mut g, input)?;
    let out = g.value(root).clone();
    let seed = Tensor::filled(out.rows(), out.cols(), 1.0);
    let grads = g.backward(root, seed, None)?;
    let dx = grads
        .wrt(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
    Ok((out, dx))
}
