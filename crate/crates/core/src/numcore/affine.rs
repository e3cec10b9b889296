use super::ParamTensor;
use crate::{Error, Result};

/// `out = W x + b` with `W` stored row-major as `[out, in]`.
#[inline]
pub fn matvec(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        let mut acc = *bias;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Accumulate the gradients of `out = W x + b` given `d out`.
///
/// `gin`, when present, receives `W^T gout` added onto its contents.
#[inline]
pub fn matvec_backward(w: &[f64], x: &[f64], gout: &[f64], gw: &mut [f64], gb: &mut [f64], gin: Option<&mut [f64]>) {
    let n_in = x.len();
    for ((g, grow), bb) in gout.iter().zip(gw.chunks_exact_mut(n_in)).zip(gb.iter_mut()) {
        if *g == 0.0 {
            continue;
        }
        *bb += g;
        for (gwi, xi) in grow.iter_mut().zip(x) {
            *gwi += g * xi;
        }
    }
    if let Some(gin) = gin {
        for (g, row) in gout.iter().zip(w.chunks_exact(n_in)) {
            if *g == 0.0 {
                continue;
            }
            for (gi, wi) in gin.iter_mut().zip(row) {
                *gi += g * wi;
            }
        }
    }
}

/// Saved forward state for [`affine_backward`].
#[derive(Debug, Clone)]
pub struct AffineCache {
    input: Vec<f64>,
    weight_name: String,
    out_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input_grad: Vec<f64>,
    pub weight_grad: Vec<f64>,
    pub bias_grad: Vec<f64>,
}

fn dims(weights: &ParamTensor, bias: &ParamTensor) -> Result<(usize, usize)> {
    let [out, inp] = weights.shape() else {
        return Err(Error::config(format!("weight {} must be rank 2, has shape {:?}", weights.name(), weights.shape())));
    };
    if bias.shape() != [*out] {
        return Err(Error::config(format!(
            "bias {} shape {:?} does not match weight rows {out}",
            bias.name(),
            bias.shape()
        )));
    }
    Ok((*out, *inp))
}

pub fn affine_forward(input: &[f64], weights: &ParamTensor, bias: &ParamTensor) -> Result<(Vec<f64>, AffineCache)> {
    let (out_dim, in_dim) = dims(weights, bias)?;
    if input.len() != in_dim {
        return Err(Error::config(format!(
            "input length {} does not match {} input dimension {in_dim}",
            input.len(),
            weights.name()
        )));
    }
    if !input.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite affine input"));
    }
    if !weights.is_finite() || !bias.is_finite() {
        return Err(Error::numeric(format!("non-finite parameters in {}", weights.name())));
    }
    let mut out = vec![0.0; out_dim];
    matvec(weights.values(), bias.values(), input, &mut out);
    Ok((
        out,
        AffineCache {
            input: input.to_vec(),
            weight_name: weights.name().to_owned(),
            out_dim,
        },
    ))
}

/// Backpropagate through one affine map, accumulating into the tensors'
/// `grad` buffers. A missing cache, or one recorded for a different
/// tensor, is a usage error.
pub fn affine_backward(
    output_grad: &[f64],
    cache: Option<&AffineCache>,
    weights: &mut ParamTensor,
    bias: &mut ParamTensor,
) -> Result<AffineGrads> {
    let cache = cache.ok_or_else(|| Error::usage("affine_backward called without a forward cache"))?;
    let (out_dim, in_dim) = dims(weights, bias)?;
    if cache.weight_name != weights.name() || cache.out_dim != out_dim || cache.input.len() != in_dim {
        return Err(Error::usage(format!(
            "stale affine cache: recorded for {} but applied to {}",
            cache.weight_name,
            weights.name()
        )));
    }
    if output_grad.len() != out_dim {
        return Err(Error::config(format!("output gradient length {} != {out_dim}", output_grad.len())));
    }
    let mut grads = AffineGrads {
        input_grad: vec![0.0; in_dim],
        weight_grad: vec![0.0; out_dim * in_dim],
        bias_grad: vec![0.0; out_dim],
    };
    matvec_backward(
        weights.values(),
        &cache.input,
        output_grad,
        &mut grads.weight_grad,
        &mut grads.bias_grad,
        Some(&mut grads.input_grad),
    );
    for (g, d) in weights.grad_mut().iter_mut().zip(&grads.weight_grad) {
        *g += d;
    }
    for (g, d) in bias.grad_mut().iter_mut().zip(&grads.bias_grad) {
        *g += d;
    }
    Ok(grads)
}
