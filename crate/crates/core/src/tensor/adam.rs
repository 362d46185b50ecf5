use crate::error::{Error, Result};

/// A persistent trainable tensor owned by a network.
///
/// Forward passes copy `data` onto a [`Tape`](super::Tape) as a leaf; the
/// resulting gradient is added into `grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Parameter {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter shape/data mismatch");
        Parameter {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len());
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(numel: usize, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay.
///
/// The decay `p -= lr * wd * p` is applied before the moment update. The
/// gradient buffer is zeroed afterwards.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState) -> Result<()> {
    let grad = param.grad.as_mut().ok_or(Error::MissingGrad)?;
    if state.m.len() != param.data.len() || state.v.len() != param.data.len() {
        return Err(Error::shape("adam_step", &param.shape, &[state.m.len()]));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;
    for (((p, g), m), v) in param
        .data
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = *g as f64;
        let mut w = *p as f64 * decay;
        let mn = b1 * *m as f64 + (1.0 - b1) * g;
        let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
        *m = mn as f32;
        *v = vn as f32;
        w -= state.lr * (mn / bc1) / ((vn / bc2).sqrt() + state.eps);
        *p = w as f32;
    }
    grad.fill(0.0);
    Ok(())
}
