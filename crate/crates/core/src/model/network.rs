use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, RngCore};

use super::data::Batch;
use super::loss::{head_loss, hierarchical_loss, LossBreakdown, LossConfig};
use super::{ModelParams, Pooling};
use crate::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one direction of one layer, rows indexed `step * B + b`.
#[derive(Debug, Clone)]
struct DirCache {
    /// Activated gates `[i | f | g | o]`.
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// Inverted-dropout multipliers applied to `input`, if any.
    mask: Option<Array2<f64>>,
    dirs: [DirCache; 2],
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: usize,
    size: usize,
    layers: Vec<LayerCache>,
    pub features: Array2<f64>,
    pub logits_l1: Array2<f64>,
    pub logits_l2: Array2<f64>,
}

fn dir_forward(
    x: &Array2<f64>,
    steps: usize,
    size: usize,
    (w_ih, w_hh, bias): (&Array2<f64>, &Array2<f64>, &Array2<f64>),
    reverse: bool,
) -> DirCache {
    let hd = w_hh.ncols();
    let mut gates = Array2::<f64>::zeros((steps * size, 4 * hd));
    gates += &bias.row(0);
    general_mat_mul(1.0, x, &w_ih.t(), 1.0, &mut gates);
    let mut c = Array2::<f64>::zeros((steps * size, hd));
    let mut tanh_c = Array2::<f64>::zeros((steps * size, hd));
    let mut h = Array2::<f64>::zeros((steps * size, hd));
    for step in 0..steps {
        let t = if reverse { steps - 1 - step } else { step };
        let prev = (step > 0).then(|| if reverse { t + 1 } else { t - 1 });
        if let Some(p) = prev {
            let hp = h.slice(s![p * size..(p + 1) * size, ..]);
            let mut block = gates.slice_mut(s![t * size..(t + 1) * size, ..]);
            general_mat_mul(1.0, &hp, &w_hh.t(), 1.0, &mut block);
        }
        let g = gates.as_slice_mut().expect("standard layout");
        let cs = c.as_slice_mut().expect("standard layout");
        let ts = tanh_c.as_slice_mut().expect("standard layout");
        let hs = h.as_slice_mut().expect("standard layout");
        for b in 0..size {
            let r = t * size + b;
            let row = &mut g[r * 4 * hd..(r + 1) * 4 * hd];
            for j in 0..hd {
                let i = sigmoid(row[j]);
                let f = sigmoid(row[hd + j]);
                let gg = row[2 * hd + j].tanh();
                let o = sigmoid(row[3 * hd + j]);
                row[j] = i;
                row[hd + j] = f;
                row[2 * hd + j] = gg;
                row[3 * hd + j] = o;
                let c_prev = prev.map_or(0.0, |p| cs[(p * size + b) * hd + j]);
                let cc = f * c_prev + i * gg;
                let tc = cc.tanh();
                cs[r * hd + j] = cc;
                ts[r * hd + j] = tc;
                hs[r * hd + j] = o * tc;
            }
        }
    }
    DirCache { gates, c, tanh_c, h }
}

/// Accumulates parameter gradients of one direction and returns the gradient
/// with respect to its input sequence.
fn dir_backward(
    x: &Array2<f64>,
    cache: &DirCache,
    (w_ih, w_hh): (&Array2<f64>, &Array2<f64>),
    dh_out: &Array2<f64>,
    steps: usize,
    size: usize,
    reverse: bool,
    grads: &mut [Array2<f64>],
) -> Array2<f64> {
    let hd = w_hh.ncols();
    let mut dgates = Array2::<f64>::zeros((steps * size, 4 * hd));
    let mut dh_next = Array2::<f64>::zeros((size, hd));
    let mut dc_next = vec![0.0; size * hd];
    let g = cache.gates.as_slice().expect("standard layout");
    let cs = cache.c.as_slice().expect("standard layout");
    let ts = cache.tanh_c.as_slice().expect("standard layout");
    let dho = dh_out.as_slice().expect("standard layout");
    for step in (0..steps).rev() {
        let t = if reverse { steps - 1 - step } else { step };
        let prev = (step > 0).then(|| if reverse { t + 1 } else { t - 1 });
        {
            let dg = dgates.as_slice_mut().expect("standard layout");
            let dhn = dh_next.as_slice().expect("standard layout");
            for b in 0..size {
                let r = t * size + b;
                let row = &g[r * 4 * hd..(r + 1) * 4 * hd];
                let drow = &mut dg[r * 4 * hd..(r + 1) * 4 * hd];
                for j in 0..hd {
                    let (i, f, gg, o) = (row[j], row[hd + j], row[2 * hd + j], row[3 * hd + j]);
                    let tc = ts[r * hd + j];
                    let dh = dho[r * hd + j] + dhn[b * hd + j];
                    let dc = dc_next[b * hd + j] + dh * o * (1.0 - tc * tc);
                    let c_prev = prev.map_or(0.0, |p| cs[(p * size + b) * hd + j]);
                    dc_next[b * hd + j] = dc * f;
                    drow[j] = dc * gg * i * (1.0 - i);
                    drow[hd + j] = dc * c_prev * f * (1.0 - f);
                    drow[2 * hd + j] = dc * i * (1.0 - gg * gg);
                    drow[3 * hd + j] = dh * tc * o * (1.0 - o);
                }
            }
        }
        if prev.is_some() {
            let block = dgates.slice(s![t * size..(t + 1) * size, ..]);
            general_mat_mul(1.0, &block, w_hh, 0.0, &mut dh_next);
        }
    }
    if steps > 1 {
        let n = (steps - 1) * size;
        let (dg_rows, h_rows) = if reverse {
            (s![..n, ..], s![size.., ..])
        } else {
            (s![size.., ..], s![..n, ..])
        };
        general_mat_mul(
            1.0,
            &dgates.slice(dg_rows).t(),
            &cache.h.slice(h_rows),
            1.0,
            &mut grads[1],
        );
    }
    general_mat_mul(1.0, &dgates.t(), x, 1.0, &mut grads[0]);
    grads[2] += &dgates.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut dx = Array2::<f64>::zeros((steps * size, w_ih.ncols()));
    general_mat_mul(1.0, &dgates, w_ih, 0.0, &mut dx);
    dx
}

fn affine(features: &Array2<f64>, (w, b): (&Array2<f64>, &Array2<f64>)) -> Result<Array2<f64>> {
    if features.ncols() != w.ncols() {
        return Err(Error::Shape(format!(
            "features have {} columns, head expects {}",
            features.ncols(),
            w.ncols()
        )));
    }
    let mut out = features.dot(&w.t());
    out += &b.row(0);
    Ok(out)
}

/// Logits of both heads for pooled features `B × 2H`.
pub fn heads_forward(params: &ModelParams, features: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((affine(features, params.head(0))?, affine(features, params.head(1))?))
}

/// Full forward pass over a time-major input (`steps * size` rows). Dropout
/// is active only when an RNG is supplied.
pub fn forward(
    params: &ModelParams,
    x: &Array2<f64>,
    steps: usize,
    size: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<ForwardCache> {
    let cfg = params.config;
    if steps == 0 || size == 0 || x.nrows() != steps * size || x.ncols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "input {:?} does not match {steps} steps × {size} samples × {} channels",
            x.shape(),
            cfg.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input".into()));
    }
    let hd = cfg.hidden;
    let mut layers: Vec<LayerCache> = Vec::with_capacity(cfg.layers);
    let mut input = x.to_owned();
    for l in 0..cfg.layers {
        let mut mask = None;
        if l > 0 && cfg.dropout > 0.0 {
            if let Some(rng) = rng.as_deref_mut() {
                let keep = 1.0 / (1.0 - cfg.dropout);
                let m = Array2::from_shape_simple_fn(input.raw_dim(), || {
                    if rng.random::<f64>() < cfg.dropout {
                        0.0
                    } else {
                        keep
                    }
                });
                input *= &m;
                mask = Some(m);
            }
        }
        let fwd = dir_forward(&input, steps, size, params.lstm(l, 0), false);
        let bwd = dir_forward(&input, steps, size, params.lstm(l, 1), true);
        let next = concatenate(Axis(1), &[fwd.h.view(), bwd.h.view()]).expect("same row count");
        layers.push(LayerCache {
            input,
            mask,
            dirs: [fwd, bwd],
        });
        input = next;
    }
    let top = layers.last().expect("at least one layer");
    let features = match cfg.pooling {
        Pooling::Final => concatenate(
            Axis(1),
            &[
                top.dirs[0].h.slice(s![(steps - 1) * size.., ..]),
                top.dirs[1].h.slice(s![..size, ..]),
            ],
        )
        .expect("same row count"),
        Pooling::Mean => {
            let mut acc = Array2::<f64>::zeros((size, 2 * hd));
            for t in 0..steps {
                acc += &input.slice(s![t * size..(t + 1) * size, ..]);
            }
            acc / steps as f64
        }
    };
    let (logits_l1, logits_l2) = heads_forward(params, &features)?;
    Ok(ForwardCache {
        steps,
        size,
        layers,
        features,
        logits_l1,
        logits_l2,
    })
}

/// Gradients of all parameters given the gradients of both heads' logits.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits_l1: &Array2<f64>,
    dlogits_l2: &Array2<f64>,
) -> ModelParams {
    let cfg = params.config;
    let (steps, size, hd) = (cache.steps, cache.size, cfg.hidden);
    let mut grads = params.zeros_like();
    let mut dfeat = Array2::<f64>::zeros(cache.features.raw_dim());
    for (level, dl) in [dlogits_l1, dlogits_l2].into_iter().enumerate() {
        let k = cfg.layers * 6 + level * 2;
        let (w, _) = params.head(level);
        general_mat_mul(1.0, &dl.t(), &cache.features, 1.0, &mut grads.tensors[k]);
        grads.tensors[k + 1] += &dl.sum_axis(Axis(0)).insert_axis(Axis(0));
        general_mat_mul(1.0, dl, w, 1.0, &mut dfeat);
    }

    let mut dh_f = Array2::<f64>::zeros((steps * size, hd));
    let mut dh_b = Array2::<f64>::zeros((steps * size, hd));
    match cfg.pooling {
        Pooling::Final => {
            dh_f.slice_mut(s![(steps - 1) * size.., ..])
                .assign(&dfeat.slice(s![.., ..hd]));
            dh_b.slice_mut(s![..size, ..]).assign(&dfeat.slice(s![.., hd..]));
        }
        Pooling::Mean => {
            let share = &dfeat / steps as f64;
            for t in 0..steps {
                dh_f.slice_mut(s![t * size..(t + 1) * size, ..])
                    .assign(&share.slice(s![.., ..hd]));
                dh_b.slice_mut(s![t * size..(t + 1) * size, ..])
                    .assign(&share.slice(s![.., hd..]));
            }
        }
    }

    for l in (0..cfg.layers).rev() {
        let layer = &cache.layers[l];
        let mut dinput = None::<Array2<f64>>;
        for (dir, dh) in [(0, &dh_f), (1, &dh_b)] {
            let (w_ih, w_hh, _) = params.lstm(l, dir);
            let k = (l * 2 + dir) * 3;
            let dx = dir_backward(
                &layer.input,
                &layer.dirs[dir],
                (w_ih, w_hh),
                dh,
                steps,
                size,
                dir == 1,
                &mut grads.tensors[k..k + 3],
            );
            dinput = Some(match dinput {
                Some(acc) => acc + dx,
                None => dx,
            });
        }
        if l == 0 {
            break;
        }
        let mut dinput = dinput.expect("two directions");
        if let Some(mask) = &layer.mask {
            dinput *= mask;
        }
        dh_f = dinput.slice(s![.., ..hd]).to_owned();
        dh_b = dinput.slice(s![.., hd..]).to_owned();
    }
    grads
}

/// Hierarchical loss of a batch and the gradients of every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    config: &LossConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<(LossBreakdown, ModelParams, ForwardCache)> {
    let cache = forward(params, &batch.x, batch.steps, batch.size, rng)?;
    let (l1, mut d1) = head_loss(&cache.logits_l1, &batch.l1, config.alpha, config.gamma, config.reduction)?;
    let (l2, mut d2) = head_loss(&cache.logits_l2, &batch.l2, config.alpha, config.gamma, config.reduction)?;
    d1 *= config.lambda_l1;
    d2 *= config.lambda_l2;
    let grads = backward(params, &cache, &d1, &d2);
    let loss = LossBreakdown {
        l1,
        l2,
        total: hierarchical_loss(l1, l2, config),
    };
    Ok((loss, grads, cache))
}
