//! Forward evaluation and reverse-mode gradients over a [`Graph`].

use super::graph::{Graph, NodeId, Op};
use super::kernels::{self, ConvGeom};
use super::random::{check_rate, keep_mask};
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
enum Saved {
    None,
    Conv { geom: ConvGeom, cols: Vec<f64> },
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
}

/// All node values of one forward evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    saved: Vec<Saved>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

fn node_err(i: usize, op: &Op, msg: impl Into<String>) -> Error {
    Error::shape(format!("node {i} ({})", op.name()), msg)
}

fn same_shape(i: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(node_err(
            i,
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softmax_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_structure(graph: &Graph) -> Result<()> {
    for (i, op) in graph.nodes.iter().enumerate() {
        for inp in op.inputs() {
            if inp.0 >= i {
                return Err(node_err(
                    i,
                    op,
                    format!("input node {} does not precede it", inp.0),
                ));
            }
        }
    }
    Ok(())
}

/// Evaluates every node of `graph`.
pub fn forward(graph: &Graph, params: &ParamSet, inputs: &[Tensor]) -> Result<Evaluation> {
    check_structure(graph)?;
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.len());
    let mut saved = Vec::with_capacity(graph.len());
    for (i, op) in graph.nodes.iter().enumerate() {
        let (value, s) = eval_node(i, op, &values, params, inputs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { node: i });
        }
        values.push(value);
        saved.push(s);
    }
    Ok(Evaluation { values, saved })
}

fn eval_node(
    i: usize,
    op: &Op,
    v: &[Tensor],
    params: &ParamSet,
    inputs: &[Tensor],
) -> Result<(Tensor, Saved)> {
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Op::Input(k) => match inputs.get(*k) {
            Some(t) => plain(t.clone()),
            None => Err(Error::Contract(format!(
                "node {i} reads input {k} but only {} inputs were supplied",
                inputs.len()
            ))),
        },
        Op::Param(name) => match params.get(name) {
            Some(t) => plain(t.clone()),
            None => Err(Error::Contract(format!(
                "node {i}: missing parameter `{name}`"
            ))),
        },
        Op::Const(t) => plain(t.clone()),
        Op::Affine { x, w, b } => {
            let (x, w, b) = (&v[x.0], &v[w.0], &v[b.0]);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || b.shape() != [ws[1]] {
                return Err(node_err(
                    i,
                    op,
                    format!("x {xs:?}, w {ws:?}, b {:?} incompatible", b.shape()),
                ));
            }
            let (n, din, dout) = (xs[0], xs[1], ws[1]);
            let mut y = Vec::with_capacity(n * dout);
            for _ in 0..n {
                y.extend_from_slice(b.data());
            }
            kernels::gemm(n, din, dout, x.data(), false, w.data(), false, 1.0, &mut y);
            plain(Tensor::new(vec![n, dout], y)?)
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (x, w, b) = (&v[x.0], &v[w.0], &v[b.0]);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
                return Err(node_err(
                    i,
                    op,
                    format!("x {xs:?} and w {ws:?} incompatible"),
                ));
            }
            if b.shape() != [ws[0]] {
                return Err(node_err(
                    i,
                    op,
                    format!("bias {:?} for {} outputs", b.shape(), ws[0]),
                ));
            }
            if *stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
                return Err(node_err(
                    i,
                    op,
                    "kernel larger than padded input or zero stride",
                ));
            }
            let k = ws[2];
            let geom = ConvGeom {
                n: xs[0],
                c: xs[1],
                h: xs[2],
                w: xs[3],
                o: ws[0],
                k,
                stride: *stride,
                pad: *pad,
                ho: (xs[2] + 2 * pad - k) / stride + 1,
                wo: (xs[3] + 2 * pad - k) / stride + 1,
            };
            let (y, cols) = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
            let out = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], y)?;
            Ok((out, Saved::Conv { geom, cols }))
        }
        Op::MaxPool { x, size } => {
            let x = &v[x.0];
            let s = x.shape();
            if s.len() != 4 || *size == 0 || s[2] < *size || s[3] < *size {
                return Err(node_err(i, op, format!("cannot pool {s:?} by {size}")));
            }
            let (y, arg) = kernels::maxpool_forward(x.data(), s[0], s[1], s[2], s[3], *size);
            let out = Tensor::new(vec![s[0], s[1], s[2] / size, s[3] / size], y)?;
            Ok((out, Saved::Argmax(arg)))
        }
        Op::MeanPool(x) => {
            let x = &v[x.0];
            let s = x.shape();
            if s.len() != 4 {
                return Err(node_err(i, op, format!("expected NCHW, got {s:?}")));
            }
            let hw = s[2] * s[3];
            let y = x
                .data()
                .chunks(hw)
                .map(|c| c.iter().sum::<f64>() / hw as f64)
                .collect();
            plain(Tensor::new(vec![s[0], s[1]], y)?)
        }
        Op::Relu(x) => plain(v[x.0].map(|a| a.max(0.0))),
        Op::Sigmoid(x) => plain(v[x.0].map(sigmoid)),
        Op::Softmax { x, axis } => {
            let x = &v[x.0];
            if *axis >= x.shape().len() {
                return Err(node_err(
                    i,
                    op,
                    format!("axis {axis} out of range for {:?}", x.shape()),
                ));
            }
            let (outer, len, inner) = softmax_dims(x.shape(), *axis);
            let mut y = x.clone();
            let d = y.data_mut();
            for o in 0..outer {
                for r in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + r;
                    let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (d[at(j)] - max).exp();
                        d[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        d[at(j)] /= total;
                    }
                }
            }
            plain(y)
        }
        Op::Log(x) => plain(v[x.0].map(f64::ln)),
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (a, b) = (&v[a.0], &v[b.0]);
            same_shape(i, op, a, b)?;
            let f: fn(f64, f64) -> f64 = if matches!(op, Op::Add(..)) {
                |p, q| p + q
            } else {
                |p, q| p * q
            };
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            plain(Tensor::new(a.shape().to_vec(), data)?)
        }
        Op::SmoothL1(x) => plain(v[x.0].map(smooth_l1)),
        Op::Sum(x) => plain(Tensor::scalar(v[x.0].data().iter().sum())),
        Op::Scale(x, c) => plain(v[x.0].map(|a| a * c)),
        Op::AddScalar(x, c) => plain(v[x.0].map(|a| a + c)),
        Op::Pow(x, p) => {
            let p = *p;
            plain(v[x.0].map(|a| if p == 0.0 { 1.0 } else { a.powf(p) }))
        }
        Op::Clamp { x, lo, hi } => plain(v[x.0].map(|a| a.clamp(*lo, *hi))),
        Op::Dropout { x, rate, seed } => {
            check_rate(*rate)?;
            let x = &v[x.0];
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mask = keep_mask(x.len(), *rate, &mut rng);
            let scale = 1.0 / (1.0 - rate);
            let data = x
                .data()
                .iter()
                .zip(&mask)
                .map(|(a, m)| a * m * scale)
                .collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, Saved::Mask(mask)))
        }
        Op::GradReverse { x, .. } => plain(v[x.0].clone()),
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Which nodes depend on a parameter (and therefore need adjoints).
fn needs_grad(graph: &Graph) -> Vec<bool> {
    let mut needs = vec![false; graph.len()];
    for (i, op) in graph.nodes.iter().enumerate() {
        needs[i] = match op {
            Op::Param(_) => true,
            Op::Input(_) | Op::Const(_) => false,
            _ => op.inputs().iter().any(|n| needs[n.0]),
        };
    }
    needs
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of the scalar graph output with respect to every parameter in
/// `params` (zeros for parameters the graph does not use).
pub fn backward(graph: &Graph, eval: &Evaluation, params: &ParamSet) -> Result<ParamSet> {
    let out = graph
        .output()
        .ok_or_else(|| Error::Contract("graph has no output node".into()))?;
    let out_val = &eval.values[out.0];
    if out_val.len() != 1 {
        return Err(Error::Contract(format!(
            "gradients requested for non-scalar output of shape {:?}",
            out_val.shape()
        )));
    }
    let needs = needs_grad(graph);
    let mut adj: Vec<Option<Tensor>> = vec![None; graph.len()];
    adj[out.0] = Some(Tensor::full(out_val.shape(), 1.0));
    let mut grads = params.zeros_like();

    for i in (0..=out.0).rev() {
        let Some(dy) = adj[i].take() else { continue };
        if !needs[i] {
            continue;
        }
        let op = &graph.nodes[i];
        let y = &eval.values[i];
        let val = |n: NodeId| &eval.values[n.0];
        let wants = |n: &NodeId| needs[n.0];
        match op {
            Op::Input(_) | Op::Const(_) => {}
            Op::Param(name) => {
                if let Some(g) = grads.get_mut(name) {
                    g.add_assign(&dy);
                }
            }
            Op::Affine { x, w, b } => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (n, din, dout) = (xs[0], xs[1], ws[1]);
                if wants(w) {
                    let mut dw = vec![0.0; din * dout];
                    kernels::gemm(
                        din,
                        n,
                        dout,
                        val(*x).data(),
                        true,
                        dy.data(),
                        false,
                        0.0,
                        &mut dw,
                    );
                    accumulate(&mut adj, *w, Tensor::new(ws.to_vec(), dw)?);
                }
                if wants(b) {
                    let mut db = vec![0.0; dout];
                    for row in dy.data().chunks(dout) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    accumulate(&mut adj, *b, Tensor::new(vec![dout], db)?);
                }
                if wants(x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(
                        n,
                        dout,
                        din,
                        dy.data(),
                        false,
                        val(*w).data(),
                        true,
                        0.0,
                        &mut dx,
                    );
                    accumulate(&mut adj, *x, Tensor::new(xs.to_vec(), dx)?);
                }
            }
            Op::Conv2d { x, w, b, .. } => {
                let Saved::Conv { geom, cols } = &eval.saved[i] else {
                    unreachable!("conv node without saved columns")
                };
                let mut dw = vec![0.0; val(*w).len()];
                let mut db = vec![0.0; geom.o];
                let dx = kernels::conv2d_backward(
                    geom,
                    cols,
                    val(*w).data(),
                    dy.data(),
                    &mut dw,
                    &mut db,
                    wants(x),
                );
                if wants(w) {
                    accumulate(&mut adj, *w, Tensor::new(val(*w).shape().to_vec(), dw)?);
                }
                if wants(b) {
                    accumulate(&mut adj, *b, Tensor::new(vec![geom.o], db)?);
                }
                if let Some(dx) = dx {
                    accumulate(&mut adj, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
            }
            Op::MaxPool { x, .. } => {
                let Saved::Argmax(arg) = &eval.saved[i] else {
                    unreachable!("maxpool node without argmax")
                };
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (&a, g) in arg.iter().zip(dy.data()) {
                    d[a] += g;
                }
                accumulate(&mut adj, *x, dx);
            }
            Op::MeanPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let dx = Tensor::from_fn(s, |k| dy.data()[k / hw] / hw as f64);
                accumulate(&mut adj, *x, dx);
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let dx =
                    Tensor::from_fn(y.shape(), |k| if xv[k] > 0.0 { dy.data()[k] } else { 0.0 });
                accumulate(&mut adj, *x, dx);
            }
            Op::Sigmoid(x) => {
                let yv = y.data();
                let dx = Tensor::from_fn(y.shape(), |k| dy.data()[k] * yv[k] * (1.0 - yv[k]));
                accumulate(&mut adj, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = softmax_dims(y.shape(), *axis);
                let (yv, g) = (y.data(), dy.data());
                let mut dx = Tensor::zeros(y.shape());
                let d = dx.data_mut();
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + r;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * yv[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = yv[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(&mut adj, *x, dx);
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                let dx = Tensor::from_fn(y.shape(), |k| dy.data()[k] / xv[k]);
                accumulate(&mut adj, *x, dx);
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut adj, *a, dy.clone());
                }
                if wants(b) {
                    accumulate(&mut adj, *b, dy);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(*b).data();
                    accumulate(
                        &mut adj,
                        *a,
                        Tensor::from_fn(y.shape(), |k| dy.data()[k] * bv[k]),
                    );
                }
                if wants(b) {
                    let av = val(*a).data();
                    accumulate(
                        &mut adj,
                        *b,
                        Tensor::from_fn(y.shape(), |k| dy.data()[k] * av[k]),
                    );
                }
            }
            Op::SmoothL1(x) => {
                let xv = val(*x).data();
                let dx = Tensor::from_fn(y.shape(), |k| {
                    let d = xv[k];
                    dy.data()[k] * if d.abs() < 1.0 { d } else { d.signum() }
                });
                accumulate(&mut adj, *x, dx);
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                accumulate(&mut adj, *x, Tensor::full(val(*x).shape(), g));
            }
            Op::Scale(x, c) => accumulate(&mut adj, *x, dy.map(|g| g * c)),
            Op::AddScalar(x, _) => accumulate(&mut adj, *x, dy),
            Op::Pow(x, p) => {
                let xv = val(*x).data();
                let p = *p;
                let dx = Tensor::from_fn(y.shape(), |k| {
                    if p == 0.0 {
                        0.0
                    } else {
                        dy.data()[k] * p * xv[k].powf(p - 1.0)
                    }
                });
                accumulate(&mut adj, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x).data();
                let dx = Tensor::from_fn(y.shape(), |k| {
                    if xv[k] > *lo && xv[k] < *hi {
                        dy.data()[k]
                    } else {
                        0.0
                    }
                });
                accumulate(&mut adj, *x, dx);
            }
            Op::Dropout { x, rate, .. } => {
                let Saved::Mask(mask) = &eval.saved[i] else {
                    unreachable!("dropout node without mask")
                };
                let scale = 1.0 / (1.0 - rate);
                let dx = Tensor::from_fn(y.shape(), |k| dy.data()[k] * mask[k] * scale);
                accumulate(&mut adj, *x, dx);
            }
            Op::GradReverse { x, scale } => accumulate(&mut adj, *x, dy.map(|g| -scale * g)),
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite { node: out.0 });
    }
    Ok(grads)
}

/// Forward value of the output node and gradients of it w.r.t. all parameters.
pub fn evaluate_with_gradients(
    graph: &Graph,
    params: &ParamSet,
    inputs: &[Tensor],
) -> Result<(Tensor, ParamSet)> {
    let out = graph
        .output()
        .ok_or_else(|| Error::Contract("graph has no output node".into()))?;
    let eval = forward(graph, params, inputs)?;
    let grads = backward(graph, &eval, params)?;
    Ok((eval.values[out.0].clone(), grads))
}

/// Forward value of the output node only.
pub fn evaluate(graph: &Graph, params: &ParamSet, inputs: &[Tensor]) -> Result<Tensor> {
    let out = graph
        .output()
        .ok_or_else(|| Error::Contract("graph has no output node".into()))?;
    let mut eval = forward(graph, params, inputs)?;
    Ok(eval.values.swap_remove(out.0))
}

/// Central-difference derivative of the output with respect to coordinate `k`
/// of parameter `name`.
pub fn numeric_partial(
    graph: &Graph,
    params: &ParamSet,
    inputs: &[Tensor],
    name: &str,
    k: usize,
    h: f64,
) -> Result<f64> {
    fn slot<'a>(p: &'a mut ParamSet, name: &str, k: usize) -> Result<&'a mut f64> {
        p.get_mut(name)
            .and_then(|t| t.data_mut().get_mut(k))
            .ok_or_else(|| Error::Contract(format!("no coordinate {k} of parameter {name}")))
    }
    let mut probe = params.clone();
    let orig = *slot(&mut probe, name, k)?;
    *slot(&mut probe, name, k)? = orig + h;
    let up = evaluate(graph, &probe, inputs)?.item()?;
    *slot(&mut probe, name, k)? = orig - h;
    let down = evaluate(graph, &probe, inputs)?.item()?;
    Ok((up - down) / (2.0 * h))
}

/// Max over all parameter coordinates of
/// `|analytic - central difference| / max(1, |central difference|)`.
pub fn grad_check(graph: &Graph, params: &ParamSet, inputs: &[Tensor], h: f64) -> Result<f64> {
    let (_, analytic) = evaluate_with_gradients(graph, params, inputs)?;
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        for k in 0..t.len() {
            let numeric = numeric_partial(graph, params, inputs, name, k, h)?;
            let a = analytic.get(name).expect("same layout").data()[k];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random::rng_for;
    use rand::Rng;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::scalar(v));
        p
    }

    #[test]
    fn identity_of_scalar_param() {
        let mut g = Graph::new();
        let p = g.param("p");
        g.set_output(p);
        let (v, grads) = evaluate_with_gradients(&g, &scalar_params(3.0), &[]).unwrap();
        assert_eq!(v.item().unwrap(), 3.0);
        assert_eq!(grads.get("p").unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn square_of_scalar_param() {
        let mut g = Graph::new();
        let p = g.param("p");
        let sq = g.mul(p, p);
        g.set_output(sq);
        let params = scalar_params(3.0);
        let (v, grads) = evaluate_with_gradients(&g, &params, &[]).unwrap();
        assert_eq!(v.item().unwrap(), 9.0);
        assert_eq!(grads.get("p").unwrap().item().unwrap(), 6.0);
        assert!(grad_check(&g, &params, &[], 1e-6).unwrap() <= 1e-8);
    }

    #[test]
    fn linear_graph_check_is_exact() {
        let mut g = Graph::new();
        let x = g.input(0);
        let w = g.param("w");
        let b = g.param("b");
        let y = g.affine(x, w, b);
        let s = g.sum(y);
        let out = g.scale(s, 0.5);
        g.set_output(out);
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3 - 0.4));
        params.insert("b", Tensor::from_fn(&[2], |i| i as f64));
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64).sin());
        assert!(grad_check(&g, &params, &[x], 1e-3).unwrap() <= 1e-10);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let mut g = Graph::new();
        let x = g.input(0);
        let w = g.param("p");
        let y = g.mul(x, w);
        g.set_output(y);
        let params = {
            let mut p = ParamSet::new();
            p.insert("p", Tensor::zeros(&[2]));
            p
        };
        let err = evaluate_with_gradients(&g, &params, &[Tensor::zeros(&[2])]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input(0);
        let b = g.input(1);
        let c = g.add(a, b);
        let s = g.sum(c);
        g.set_output(s);
        let err = evaluate(
            &g,
            &ParamSet::new(),
            &[Tensor::zeros(&[2]), Tensor::zeros(&[3])],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("node 2 (add)"), "{err}");
    }

    #[test]
    fn log_of_zero_reports_node() {
        let mut g = Graph::new();
        let a = g.input(0);
        let l = g.log(a);
        g.set_output(l);
        let err = evaluate(&g, &ParamSet::new(), &[Tensor::scalar(0.0)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node: 1 }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(0);
        let s = g.softmax(x, 1);
        g.set_output(s);
        let x = Tensor::from_fn(&[2, 5, 3], |i| ((i * 7919) % 13) as f64 * 3.1 - 20.0);
        let y = evaluate(&g, &ParamSet::new(), &[x]).unwrap();
        for n in 0..2 {
            for r in 0..3 {
                let total: f64 = (0..5).map(|j| y.data()[(n * 5 + j) * 3 + r]).sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_is_open_unit_interval_for_moderate_inputs() {
        for a in [-30.0, -1.0, 0.0, 2.0, 30.0] {
            let s = sigmoid(a);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    /// Graph touching every op with random parameters; checked against
    /// central differences.
    fn every_op_graph() -> (Graph, ParamSet, Vec<Tensor>) {
        let mut rng = rng_for(17, &[]);
        let mut rand_t = |shape: &[usize], s: f64| {
            Tensor::from_fn(shape, |_| (rng.gen::<f64>() - 0.5) * 2.0 * s)
        };
        let mut p = ParamSet::new();
        p.insert("c1.w", rand_t(&[3, 1, 3, 3], 0.6));
        p.insert("c1.b", rand_t(&[3], 0.1));
        p.insert("c2.w", rand_t(&[4, 3, 3, 3], 0.4));
        p.insert("c2.b", rand_t(&[4], 0.1));
        p.insert("fc.w", rand_t(&[4, 3], 0.5));
        p.insert("fc.b", rand_t(&[3], 0.1));
        let x = rand_t(&[2, 1, 8, 8], 1.0);
        let target = rand_t(&[2, 4, 2, 2], 2.0);

        let mut g = Graph::new();
        let xi = g.input(0);
        let (w1, b1) = (g.param("c1.w"), g.param("c1.b"));
        let h1 = g.conv2d(xi, w1, b1, 2, 1);
        let h1 = g.relu(h1);
        let (w2, b2) = (g.param("c2.w"), g.param("c2.b"));
        let h2 = g.conv2d(h1, w2, b2, 1, 1);
        let h2 = g.dropout(h2, 0.3, 99);
        let pooled = g.max_pool(h2, 2);
        // smooth-L1 regression branch
        let t = g.constant(target.clone().map(|v| -v));
        let diff = g.add(pooled, t);
        let sl1 = g.smooth_l1(diff);
        let reg = g.sum(sl1);
        // classification-like branch through mean pool, affine, softmax, log
        let gfeat = g.mean_pool(h2);
        let (wf, bf) = (g.param("fc.w"), g.param("fc.b"));
        let logits = g.affine(gfeat, wf, bf);
        let probs = g.softmax(logits, 1);
        let logp = g.log(probs);
        let onehot = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let ce = g.weighted_sum(logp, onehot);
        let ce = g.scale(ce, -0.5);
        // focal-style branch through sigmoid, clamp, pow
        let sig = g.sigmoid(gfeat);
        let sig = g.clamp(sig, 1e-7, 1.0 - 1e-7);
        let om = g.one_minus(sig);
        let focal = g.pow(om, 2.5);
        let lg = g.log(sig);
        let fl = g.mul(focal, lg);
        let fl = g.sum(fl);
        let fl = g.add_scalar(fl, 0.25);
        let total = g.add(reg, ce);
        let total = g.add(total, fl);
        g.set_output(total);
        (g, p, vec![x])
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let (g, p, inputs) = every_op_graph();
        let err = grad_check(&g, &p, &inputs, 1e-6).unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let (g, mut p, inputs) = every_op_graph();
        p.insert("unused", Tensor::full(&[3], 1.0));
        let (_, grads) = evaluate_with_gradients(&g, &p, &inputs).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[3]));
        p.check_same_layout(&grads).unwrap();
    }

    #[test]
    fn grad_reverse_flips_and_scales() {
        let mut g = Graph::new();
        let p = g.param("p");
        let r = g.grad_reverse(p, 2.0);
        let sq = g.mul(r, r);
        g.set_output(sq);
        let (v, grads) = evaluate_with_gradients(&g, &scalar_params(3.0), &[]).unwrap();
        assert_eq!(v.item().unwrap(), 9.0);
        assert_eq!(grads.get("p").unwrap().item().unwrap(), -12.0);
    }

    #[test]
    fn forward_is_deterministic_with_dropout() {
        let (g, p, inputs) = every_op_graph();
        let a = evaluate(&g, &p, &inputs).unwrap();
        let b = evaluate(&g, &p, &inputs).unwrap();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    }
}
