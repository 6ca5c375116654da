//! Layer graph of the inverse model, written once and instantiated for both
//! `f32` (training) and `f64` (gradient checks).
//!
//! ```text
//! current ─┐                    ┌─ p head ───────────────────────────── P(p)
//!          ├─ encoder (tied) ─ concat ─ trunk ─┼─ [h, 1(p)] ─ θ head ────────── P(θ | p)
//! goal ────┘                    └─ [h, 1(p), 1(θ)] ─ l head ─────────── P(l | θ, p)
//! ```

use serde::{Deserialize, Serialize};

use crate::actions::ActionDiscrete;
use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward, conv2d_forward, conv_out_size, elu_backward, elu_forward, fc_backward,
    fc_forward, softmax_xent_backward, softmax_xent_forward, ConvCache, Real, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Truncated normal with std 0.01 everywhere.
    SmallNormal,
    /// Truncated normal with std `1/sqrt(fan_in)` for hidden layers and 0.01 for
    /// the three output layers.
    #[default]
    FanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InverseModelSpec {
    pub input_width: usize,
    pub input_height: usize,
    pub conv: Vec<ConvLayerSpec>,
    pub latent_dim: usize,
    pub trunk: Vec<usize>,
    /// Hidden width of the two conditional heads.
    pub head_hidden: usize,
    pub grid: usize,
    pub n_theta: usize,
    pub n_len: usize,
    #[serde(default)]
    pub init: InitScheme,
}

impl Default for InverseModelSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl InverseModelSpec {
    /// C16-C32-C32-F128 encoder, F128-F128 trunk, sized for 64×64 rasters.
    pub fn desk() -> Self {
        Self {
            input_width: 64,
            input_height: 64,
            conv: vec![
                ConvLayerSpec { filters: 16, kernel: 5, stride: 2 },
                ConvLayerSpec { filters: 32, kernel: 3, stride: 2 },
                ConvLayerSpec { filters: 32, kernel: 3, stride: 2 },
            ],
            latent_dim: 128,
            trunk: vec![128, 128],
            head_hidden: 128,
            grid: 20,
            n_theta: 36,
            n_len: 10,
            init: InitScheme::default(),
        }
    }

    /// C96-C256-C384-C384-C256-C200 encoder with 200-d latents and an
    /// F200-F200 trunk. Far too slow for CPU training; kept for comparison.
    pub fn full_scale() -> Self {
        let c = |filters, kernel, stride| ConvLayerSpec { filters, kernel, stride };
        Self {
            conv: vec![c(96, 11, 4), c(256, 5, 1), c(384, 3, 1), c(384, 3, 1), c(256, 3, 1), c(200, 3, 2)],
            latent_dim: 200,
            trunk: vec![200, 200],
            head_hidden: 200,
            ..Self::desk()
        }
    }

    pub fn n_cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Output spatial size of each conv layer.
    pub fn conv_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        self.conv
            .iter()
            .map(|l| {
                h = conv_out_size(h, l.kernel, l.stride, l.kernel / 2);
                w = conv_out_size(w, l.kernel, l.stride, l.kernel / 2);
                (h, w)
            })
            .collect()
    }

    pub fn flat_dim(&self) -> usize {
        let (h, w) = *self.conv_sizes().last().unwrap_or(&(self.input_height, self.input_width));
        let c = self.conv.last().map_or(1, |l| l.filters);
        c * h * w
    }

    pub fn trunk_out(&self) -> usize {
        *self.trunk.last().unwrap_or(&(2 * self.latent_dim))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 || self.latent_dim == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, l) in self.conv.iter().enumerate() {
            if l.filters == 0 || l.stride == 0 || l.kernel == 0 || h + 2 * (l.kernel / 2) < l.kernel {
                return Err(Error::InvalidConfig(format!("conv layer {i} is degenerate")));
            }
            h = conv_out_size(h, l.kernel, l.stride, l.kernel / 2);
            w = conv_out_size(w, l.kernel, l.stride, l.kernel / 2);
            if h == 0 || w == 0 {
                return Err(Error::InvalidConfig(format!("conv layer {i} collapses the image")));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |name: String, w: Vec<usize>, b: usize| {
            out.push((format!("{name}.weight"), w));
            out.push((format!("{name}.bias"), vec![b]));
        };
        let mut c_in = 1;
        for (i, l) in self.conv.iter().enumerate() {
            push(format!("encoder.conv{i}"), vec![l.filters, c_in, l.kernel, l.kernel], l.filters);
            c_in = l.filters;
        }
        push("encoder.latent".into(), vec![self.latent_dim, self.flat_dim()], self.latent_dim);
        let mut d = 2 * self.latent_dim;
        for (j, &t) in self.trunk.iter().enumerate() {
            push(format!("trunk.fc{j}"), vec![t, d], t);
            d = t;
        }
        let g2 = self.n_cells();
        push("pick.out".into(), vec![g2, d], g2);
        push("theta.hidden".into(), vec![self.head_hidden, d + g2], self.head_hidden);
        push("theta.out".into(), vec![self.n_theta, self.head_hidden], self.n_theta);
        push("length.hidden".into(), vec![self.head_hidden, d + g2 + self.n_theta], self.head_hidden);
        push("length.out".into(), vec![self.n_len, self.head_hidden], self.n_len);
        out
    }
}

/// Indices of each layer's (weight, bias) pair in the parameter list.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    conv: Vec<usize>,
    latent: usize,
    trunk: Vec<usize>,
    pick: usize,
    theta_hidden: usize,
    theta_out: usize,
    len_hidden: usize,
    len_out: usize,
}

impl Layout {
    pub(crate) fn new(spec: &InverseModelSpec) -> Self {
        let nc = spec.conv.len();
        let nt = spec.trunk.len();
        let base = 2 * (nc + 1 + nt);
        Self {
            conv: (0..nc).map(|i| 2 * i).collect(),
            latent: 2 * nc,
            trunk: (0..nt).map(|j| 2 * (nc + 1 + j)).collect(),
            pick: base,
            theta_hidden: base + 2,
            theta_out: base + 4,
            len_hidden: base + 6,
            len_out: base + 8,
        }
    }

    /// Indices of the three output layers' weights.
    pub(crate) fn output_weights(&self) -> [usize; 3] {
        [self.pick, self.theta_out, self.len_out]
    }
}

/// How the conditional heads receive their upstream pick / direction.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// Ground-truth labels (training).
    Teacher { pick: &'a [usize], theta: &'a [usize] },
    /// Argmax of the upstream head (inference).
    Argmax,
}

#[derive(Debug)]
pub(crate) struct Forward<T> {
    batch: usize,
    conv_caches: Vec<ConvCache<T>>,
    conv_out: Vec<Tensor<T>>,
    flat: Tensor<T>,
    latent: Tensor<T>,
    joint: Tensor<T>,
    trunk_out: Vec<Tensor<T>>,
    pub(crate) pick_logits: Tensor<T>,
    theta_in: Tensor<T>,
    theta_hidden: Tensor<T>,
    pub(crate) theta_logits: Tensor<T>,
    len_in: Tensor<T>,
    len_hidden: Tensor<T>,
    pub(crate) len_logits: Tensor<T>,
    pub(crate) pick_cond: Vec<usize>,
    pub(crate) theta_cond: Vec<usize>,
}

fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `[x, onehot(a), onehot(b), ...]` row by row.
fn concat_onehots<T: Real>(x: &Tensor<T>, hots: &[(&[usize], usize)]) -> Tensor<T> {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let width = d + hots.iter().map(|h| h.1).sum::<usize>();
    let mut out = Tensor::zeros(&[b, width]);
    for (bi, row) in out.data_mut().chunks_exact_mut(width).enumerate() {
        row[..d].copy_from_slice(&x.data()[bi * d..][..d]);
        let mut off = d;
        for &(idx, n) in hots {
            row[off + idx[bi]] = T::one();
            off += n;
        }
    }
    out
}

fn take_cols<T: Real>(x: &Tensor<T>, cols: usize) -> Tensor<T> {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let data = x.data().chunks_exact(d).flat_map(|r| r[..cols].iter().copied()).collect::<Vec<_>>();
    Tensor::from_vec(&[b, cols], data).unwrap()
}

fn add_into<T: Real>(acc: &mut Tensor<T>, x: &Tensor<T>) {
    for (a, &v) in acc.data_mut().iter_mut().zip(x.data()) {
        *a = *a + v;
    }
}

fn check_labels(what: &str, labels: &[usize], n: usize, batch: usize) -> Result<()> {
    if labels.len() != batch || labels.iter().any(|&l| l >= n) {
        return Err(Error::ShapeMismatch {
            operand: format!("{what} conditioning labels"),
            expected: vec![batch],
            got: vec![labels.len()],
        });
    }
    Ok(())
}

/// Runs the network on `images = [current_0..current_B, goal_0..goal_B]`,
/// shaped `[2B, 1, H, W]`.
pub(crate) fn forward<T: Real>(
    params: &[Tensor<T>],
    spec: &InverseModelSpec,
    images: &Tensor<T>,
    cond: Conditioning<'_>,
) -> Result<Forward<T>> {
    let lay = Layout::new(spec);
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != spec.input_height || shape[3] != spec.input_width || shape[0] % 2 != 0 {
        return Err(Error::ShapeMismatch {
            operand: "model input images".into(),
            expected: vec![2, 1, spec.input_height, spec.input_width],
            got: shape.to_vec(),
        });
    }
    let batch = shape[0] / 2;

    let mut x = images.clone();
    let mut conv_caches = Vec::new();
    let mut conv_out = Vec::new();
    for (i, l) in spec.conv.iter().enumerate() {
        let (y, cache) = conv2d_forward(&x, &params[lay.conv[i]], &params[lay.conv[i] + 1], l.stride, l.kernel / 2)?;
        let y = elu_forward(&y);
        conv_caches.push(cache);
        x = y.clone();
        conv_out.push(y);
    }
    let flat = x.reshape(&[2 * batch, spec.flat_dim()])?;
    let latent = elu_forward(&fc_forward(&flat, &params[lay.latent], &params[lay.latent + 1])?);

    let l = spec.latent_dim;
    let mut joint = Tensor::zeros(&[batch, 2 * l]);
    for (bi, row) in joint.data_mut().chunks_exact_mut(2 * l).enumerate() {
        row[..l].copy_from_slice(&latent.data()[bi * l..][..l]);
        row[l..].copy_from_slice(&latent.data()[(batch + bi) * l..][..l]);
    }

    let mut h = joint.clone();
    let mut trunk_out = Vec::new();
    for &ix in &lay.trunk {
        h = elu_forward(&fc_forward(&h, &params[ix], &params[ix + 1])?);
        trunk_out.push(h.clone());
    }

    let g2 = spec.n_cells();
    let pick_logits = fc_forward(&h, &params[lay.pick], &params[lay.pick + 1])?;
    let pick_cond = match cond {
        Conditioning::Teacher { pick, .. } => {
            check_labels("pick", pick, g2, batch)?;
            pick.to_vec()
        }
        Conditioning::Argmax => argmax_rows(&pick_logits),
    };
    let theta_in = concat_onehots(&h, &[(&pick_cond, g2)]);
    let theta_hidden = elu_forward(&fc_forward(&theta_in, &params[lay.theta_hidden], &params[lay.theta_hidden + 1])?);
    let theta_logits = fc_forward(&theta_hidden, &params[lay.theta_out], &params[lay.theta_out + 1])?;
    let theta_cond = match cond {
        Conditioning::Teacher { theta, .. } => {
            check_labels("theta", theta, spec.n_theta, batch)?;
            theta.to_vec()
        }
        Conditioning::Argmax => argmax_rows(&theta_logits),
    };
    let len_in = concat_onehots(&h, &[(&pick_cond, g2), (&theta_cond, spec.n_theta)]);
    let len_hidden = elu_forward(&fc_forward(&len_in, &params[lay.len_hidden], &params[lay.len_hidden + 1])?);
    let len_logits = fc_forward(&len_hidden, &params[lay.len_out], &params[lay.len_out + 1])?;

    Ok(Forward {
        batch,
        conv_caches,
        conv_out,
        flat,
        latent,
        joint,
        trunk_out,
        pick_logits,
        theta_in,
        theta_hidden,
        theta_logits,
        len_in,
        len_hidden,
        len_logits,
        pick_cond,
        theta_cond,
    })
}

/// Parameter gradients given gradients of the loss w.r.t. the three logit tensors.
pub(crate) fn backward<T: Real>(
    params: &[Tensor<T>],
    spec: &InverseModelSpec,
    fwd: &Forward<T>,
    g_pick: &Tensor<T>,
    g_theta: &Tensor<T>,
    g_len: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let lay = Layout::new(spec);
    let mut grads: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut set = |ix: usize, w: Tensor<T>, b: Tensor<T>| {
        grads[ix] = w;
        grads[ix + 1] = b;
    };
    let d = spec.trunk_out();
    let h = fwd.trunk_out.last().unwrap_or(&fwd.joint);

    // Length head.
    let g = fc_backward(&fwd.len_hidden, &params[lay.len_out], g_len)?;
    set(lay.len_out, g.weight, g.bias);
    let g_hidden = elu_backward(&fwd.len_hidden, &g.input)?;
    let g = fc_backward(&fwd.len_in, &params[lay.len_hidden], &g_hidden)?;
    set(lay.len_hidden, g.weight, g.bias);
    let mut g_h = take_cols(&g.input, d);

    // Direction head.
    let g = fc_backward(&fwd.theta_hidden, &params[lay.theta_out], g_theta)?;
    set(lay.theta_out, g.weight, g.bias);
    let g_hidden = elu_backward(&fwd.theta_hidden, &g.input)?;
    let g = fc_backward(&fwd.theta_in, &params[lay.theta_hidden], &g_hidden)?;
    set(lay.theta_hidden, g.weight, g.bias);
    add_into(&mut g_h, &take_cols(&g.input, d));

    // Pick head.
    let g = fc_backward(h, &params[lay.pick], g_pick)?;
    set(lay.pick, g.weight, g.bias);
    add_into(&mut g_h, &g.input);

    // Trunk.
    let mut g_out = g_h;
    for (j, &ix) in lay.trunk.iter().enumerate().rev() {
        let g_pre = elu_backward(&fwd.trunk_out[j], &g_out)?;
        let input = if j == 0 { &fwd.joint } else { &fwd.trunk_out[j - 1] };
        let g = fc_backward(input, &params[ix], &g_pre)?;
        set(ix, g.weight, g.bias);
        g_out = g.input;
    }

    // Split the joint gradient back onto the two encoder passes.
    let (b, l) = (fwd.batch, spec.latent_dim);
    let mut g_latent = Tensor::zeros(&[2 * b, l]);
    for bi in 0..b {
        let row = &g_out.data()[bi * 2 * l..][..2 * l];
        g_latent.data_mut()[bi * l..][..l].copy_from_slice(&row[..l]);
        g_latent.data_mut()[(b + bi) * l..][..l].copy_from_slice(&row[l..]);
    }
    let g_pre = elu_backward(&fwd.latent, &g_latent)?;
    let g = fc_backward(&fwd.flat, &params[lay.latent], &g_pre)?;
    set(lay.latent, g.weight, g.bias);

    let mut g_x = g.input;
    for i in (0..spec.conv.len()).rev() {
        let y = &fwd.conv_out[i];
        let g_y = g_x.reshape(y.shape())?;
        let g_pre = elu_backward(y, &g_y)?;
        let g = conv2d_backward(&params[lay.conv[i]], &fwd.conv_caches[i], &g_pre, i > 0)?;
        set(lay.conv[i], g.weight, g.bias);
        match g.input {
            Some(gi) => g_x = gi,
            None => break,
        }
    }
    Ok(grads)
}

/// Summed teacher-forced cross-entropy of the three heads and its gradient
/// with respect to every parameter, in `param_shapes` order. `images` is
/// `[current_0..current_B, goal_0..goal_B]`, shaped `[2B, 1, H, W]`.
pub fn loss_and_grads<T: Real>(
    params: &[Tensor<T>],
    spec: &InverseModelSpec,
    images: &Tensor<T>,
    labels: &[ActionDiscrete],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let pick: Vec<usize> = labels.iter().map(|a| a.cell).collect();
    let theta: Vec<usize> = labels.iter().map(|a| a.theta_bin).collect();
    let len: Vec<usize> = labels.iter().map(|a| a.len_bin).collect();
    let shapes = spec.param_shapes();
    if params.len() != shapes.len() {
        return Err(Error::ShapeMismatch { operand: "params".into(), expected: vec![shapes.len()], got: vec![params.len()] });
    }
    for (p, (name, shape)) in params.iter().zip(&shapes) {
        p.expect_shape(name, shape)?;
    }
    let f = forward(params, spec, images, Conditioning::Teacher { pick: &pick, theta: &theta })?;
    let (lp, pp) = softmax_xent_forward(&f.pick_logits, &pick)?;
    let (lt, pt) = softmax_xent_forward(&f.theta_logits, &theta)?;
    let (ll, pl) = softmax_xent_forward(&f.len_logits, &len)?;
    let grads = backward(
        params,
        spec,
        &f,
        &softmax_xent_backward(&pp, &pick),
        &softmax_xent_backward(&pt, &theta),
        &softmax_xent_backward(&pl, &len),
    )?;
    Ok((lp + lt + ll, grads))
}
