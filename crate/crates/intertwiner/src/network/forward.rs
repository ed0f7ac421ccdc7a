use crate::error::{Error, Result};
use crate::network::spec::{NetworkSpec, WeightSet};
use crate::numerics::Matrix;

/// Hidden state after some layer m. Inside a residual block the state is
/// the pair (value at the last skip-connected layer, value inside the
/// block); the pending skip addition cannot be reconstructed from the
/// in-block value alone.
#[derive(Debug, Clone, PartialEq)]
pub enum HiddenState {
    Plain(Vec<f64>),
    InBlock { trunk: Vec<f64>, partial: Vec<f64> },
}

impl HiddenState {
    pub fn value(&self) -> &[f64] {
        match self {
            HiddenState::Plain(v) => v,
            HiddenState::InBlock { partial, .. } => partial,
        }
    }
}

fn affine(w: &WeightSet, l: usize, h: &[f64]) -> Result<Vec<f64>> {
    let lw = w.layer(l);
    let mut z = lw.w.matvec(h)?;
    if let Some(b) = &lw.bias {
        for (zi, bi) in z.iter_mut().zip(b) {
            *zi += bi;
        }
    }
    if let Some(bn) = &lw.bn {
        for j in 0..z.len() {
            z[j] = bn.gamma[j] * (z[j] - bn.running_mean[j]) / bn.running_var[j].sqrt()
                + bn.beta[j];
        }
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("forward pre-activation"));
    }
    Ok(z)
}

/// Run layers `start+1 ..= stop` from state `(h, trunk)`, returning the new
/// state. `trunk` is the value at the most recent skip-connected layer, when
/// one has been passed.
fn run_layers(
    spec: &NetworkSpec,
    w: &WeightSet,
    mut h: Vec<f64>,
    mut trunk: Option<Vec<f64>>,
    start: usize,
    stop: usize,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let k = spec.depth();
    let connected = spec.residual_connected_layers();
    let entry = spec.residual_entry();
    for l in start + 1..=stop {
        let z = affine(w, l, &h)?;
        let mut next = if l < k {
            spec.activation(l).apply(&z)?
        } else {
            z
        };
        if Some(l) == entry {
            trunk = Some(next.clone());
        } else if connected.contains(&l) {
            let t = trunk
                .as_ref()
                .ok_or(Error::NonFinite("missing trunk state at residual layer"))?;
            for (x, t) in next.iter_mut().zip(t) {
                *x += t;
            }
            trunk = Some(next.clone());
        }
        h = next;
    }
    Ok((h, trunk))
}

/// Full forward pass f(x).
pub fn forward(spec: &NetworkSpec, w: &WeightSet, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.input_dim() {
        return Err(Error::shape(
            "forward",
            format!("input length {} vs n0 {}", x.len(), spec.input_dim()),
        ));
    }
    let (out, _) = run_layers(spec, w, x.to_vec(), None, 0, spec.depth())?;
    Ok(out)
}

/// Truncated forward f_{<=m}. For m strictly inside a residual block the
/// returned state carries the trunk value alongside the in-block value.
pub fn forward_upto(spec: &NetworkSpec, w: &WeightSet, x: &[f64], m: usize) -> Result<HiddenState> {
    let k = spec.depth();
    if !(1..=k - 1).contains(&m) {
        return Err(Error::shape("forward_upto", format!("m={m} outside 1..={}", k - 1)));
    }
    if x.len() != spec.input_dim() {
        return Err(Error::shape(
            "forward_upto",
            format!("input length {} vs n0 {}", x.len(), spec.input_dim()),
        ));
    }
    let (h, trunk) = run_layers(spec, w, x.to_vec(), None, 0, m)?;
    if spec.is_inside_block(m) {
        Ok(HiddenState::InBlock {
            trunk: trunk.expect("inside a block implies a trunk"),
            partial: h,
        })
    } else {
        Ok(HiddenState::Plain(h))
    }
}

/// Resume from the state at layer m: f_{>m}. Composing with `forward_upto`
/// at any m reproduces `forward` exactly (same code path).
pub fn forward_from(
    spec: &NetworkSpec,
    w: &WeightSet,
    state: &HiddenState,
    m: usize,
) -> Result<Vec<f64>> {
    let k = spec.depth();
    if !(1..=k - 1).contains(&m) {
        return Err(Error::shape("forward_from", format!("m={m} outside 1..={}", k - 1)));
    }
    let inside = spec.is_inside_block(m);
    let (h, trunk) = match state {
        HiddenState::Plain(v) => {
            if inside {
                return Err(Error::shape(
                    "forward_from",
                    format!("layer {m} is inside a residual block; trunk state required"),
                ));
            }
            // At a skip-connected layer the state itself is the trunk for
            // the next block.
            let trunk = if spec.residual_connected_layers().contains(&m) {
                Some(v.clone())
            } else {
                None
            };
            (v.clone(), trunk)
        }
        HiddenState::InBlock { trunk, partial } => {
            if !inside {
                return Err(Error::shape(
                    "forward_from",
                    format!("layer {m} is not inside a residual block"),
                ));
            }
            (partial.clone(), Some(trunk.clone()))
        }
    };
    if h.len() != spec.width(m) {
        return Err(Error::shape(
            "forward_from",
            format!("state length {} vs width {}", h.len(), spec.width(m)),
        ));
    }
    let (out, _) = run_layers(spec, w, h, trunk, m, k)?;
    Ok(out)
}

/// Row-per-sample forward over a batch (inference mode).
pub fn forward_batch(spec: &NetworkSpec, w: &WeightSet, xs: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(xs.rows(), spec.output_dim());
    for i in 0..xs.rows() {
        let y = forward(spec, w, xs.row(i))?;
        out.row_mut(i).copy_from_slice(&y);
    }
    Ok(out)
}
