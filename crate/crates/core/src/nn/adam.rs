use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>], lr: f64) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            operand: "adam parameter list".into(),
            expected: vec![params.len()],
            got: vec![grads.len(), state.m.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        g.expect_shape(&format!("adam grad[{i}]"), p.shape())?;
        state.m[i].expect_shape(&format!("adam moment[{i}]"), p.shape())?;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gv = gv as f64;
            let m_new = b1 * *mv as f64 + (1.0 - b1) * gv;
            let v_new = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *pv = (*pv as f64 - update) as f32;
        }
    }
    Ok(())
}
