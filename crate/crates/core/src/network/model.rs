//! Forward and backward passes of the dual-decoder network.

use std::rc::Rc;

use super::layers::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, concat_channels, conv2d_backward,
    conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_inplace, sigmoid, split_channels,
    upsample2_backward, upsample2_forward, BnCache,
};
use super::params::{ConvBlock, ConvBn, Decoder, Gradients, NetworkParams, UpBlock};
use super::tensor::Tensor;
use super::Mode;
use crate::error::{Error, Result};

pub(crate) struct ConvBnCache {
    input: Rc<Tensor>,
    bn: BnCache,
    output: Rc<Tensor>,
}

pub(crate) struct BlockCache {
    first: ConvBnCache,
    second: ConvBnCache,
}

struct UpCache {
    up: ConvBnCache,
    block: BlockCache,
}

struct DecoderCache {
    ups: Vec<UpCache>,
    head_input: Rc<Tensor>,
    /// Sigmoid outputs of both head channels.
    probs: Tensor,
}

/// Intermediates of a training-mode forward pass, consumed by [`backward`].
pub struct ForwardCache {
    encoder: Vec<(BlockCache, Vec<u8>)>,
    bottleneck: BlockCache,
    heads: [DecoderCache; 2],
}

/// Foreground probabilities of both heads, each N×1×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub gland: Tensor,
    pub contour: Tensor,
}

fn convbn_forward(p: &ConvBn, x: Rc<Tensor>, mode: Mode, eps: f64) -> (Rc<Tensor>, Option<ConvBnCache>) {
    let z = conv2d_forward(&x, &p.conv);
    match mode {
        Mode::Train => {
            let (mut y, bn) = batchnorm_forward_train(&z, &p.bn, eps);
            relu_inplace(&mut y);
            let output = Rc::new(y);
            (
                output.clone(),
                Some(ConvBnCache {
                    input: x,
                    bn,
                    output,
                }),
            )
        }
        Mode::Infer => {
            let mut y = batchnorm_forward_infer(&z, &p.bn, eps);
            relu_inplace(&mut y);
            (Rc::new(y), None)
        }
    }
}

fn convbn_backward(p: &ConvBn, cache: &ConvBnCache, mut dout: Tensor, grad: &mut ConvBn, need_dx: bool) -> Option<Tensor> {
    relu_backward(&cache.output, &mut dout);
    let dz = batchnorm_backward(&cache.bn, &p.bn, &dout, &mut grad.bn);
    conv2d_backward(&cache.input, &p.conv, &dz, &mut grad.conv, need_dx)
}

pub(crate) fn block_forward(
    p: &ConvBlock,
    x: Rc<Tensor>,
    mode: Mode,
    eps: f64,
    name: &str,
) -> Result<(Rc<Tensor>, Option<BlockCache>)> {
    let (mid, c1) = convbn_forward(&p.first, x, mode, eps);
    let (out, c2) = convbn_forward(&p.second, mid, mode, eps);
    if !out.all_finite() {
        return Err(Error::NonFiniteActivation(name.to_string()));
    }
    let cache = c1.zip(c2).map(|(first, second)| BlockCache { first, second });
    Ok((out, cache))
}

fn block_backward(p: &ConvBlock, cache: &BlockCache, dout: Tensor, grad: &mut ConvBlock, need_dx: bool) -> Option<Tensor> {
    let dmid = convbn_backward(&p.second, &cache.second, dout, &mut grad.second, true).expect("dx requested");
    convbn_backward(&p.first, &cache.first, dmid, &mut grad.first, need_dx)
}

fn check_upconv_shapes(x: &Tensor, skip: &Tensor) -> Result<()> {
    if skip.n != x.n || skip.h != 2 * x.h || skip.w != 2 * x.w {
        return Err(Error::Shape(format!(
            "skip tensor {:?} must have twice the spatial size of {:?}",
            skip.shape(),
            x.shape()
        )));
    }
    Ok(())
}

fn up_forward(
    p: &UpBlock,
    x: &Tensor,
    skip: &Tensor,
    mode: Mode,
    eps: f64,
    name: &str,
) -> Result<(Rc<Tensor>, Option<UpCache>)> {
    check_upconv_shapes(x, skip)?;
    let upsampled = Rc::new(upsample2_forward(x));
    let (u, up_cache) = convbn_forward(&p.up, upsampled, mode, eps);
    let cat = Rc::new(concat_channels(&u, skip));
    let (out, block_cache) = block_forward(&p.block, cat, mode, eps, name)?;
    let cache = up_cache.zip(block_cache).map(|(up, block)| UpCache { up, block });
    Ok((out, cache))
}

/// Two successive conv → BN → ReLU stages; spatial size preserved.
pub fn conv_block(p: &ConvBlock, x: &Tensor, mode: Mode, eps: f64) -> Result<Tensor> {
    let (out, _) = block_forward(p, Rc::new(x.clone()), mode, eps, "conv_block")?;
    Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
}

/// Upsample ×2, 2×2 conv → BN → ReLU, concatenate `skip`, conv block.
pub fn upconv_block(p: &UpBlock, x: &Tensor, skip: &Tensor, mode: Mode, eps: f64) -> Result<Tensor> {
    let (out, _) = up_forward(p, x, skip, mode, eps, "upconv_block")?;
    Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
}

fn decoder_forward(
    p: &Decoder,
    bottom: &Rc<Tensor>,
    skips: &[Rc<Tensor>],
    mode: Mode,
    eps: f64,
    name: &str,
) -> Result<(Tensor, Option<DecoderCache>)> {
    let depth = skips.len();
    let mut cur = bottom.clone();
    let mut ups = Vec::with_capacity(depth);
    for (j, up) in p.ups.iter().enumerate() {
        let skip = &skips[depth - 1 - j];
        let (out, cache) = up_forward(up, &cur, skip, mode, eps, &format!("{name}.up{j}"))?;
        ups.extend(cache);
        cur = out;
    }
    let mut probs = conv2d_forward(&cur, &p.head);
    for v in &mut probs.data {
        *v = sigmoid(*v);
    }
    let mut fg = Tensor::zeros(probs.n, 1, probs.h, probs.w);
    for i in 0..probs.n {
        fg.plane_mut(i, 0).copy_from_slice(probs.plane(i, 1));
    }
    let cache = matches!(mode, Mode::Train).then(|| DecoderCache {
        ups,
        head_input: cur,
        probs,
    });
    Ok((fg, cache))
}

/// Returns dL/d(bottleneck output) and accumulates skip gradients.
fn decoder_backward(p: &Decoder, cache: &DecoderCache, dfg: &Tensor, grad: &mut Decoder, dskips: &mut [Tensor]) -> Tensor {
    let probs = &cache.probs;
    let mut dlogits = Tensor::zeros(probs.n, 2, probs.h, probs.w);
    for i in 0..probs.n {
        let pfg = probs.plane(i, 1);
        for ((d, &g), &pv) in dlogits.plane_mut(i, 1).iter_mut().zip(dfg.plane(i, 0)).zip(pfg) {
            *d = g * pv * (1.0 - pv);
        }
    }
    let mut dcur = conv2d_backward(&cache.head_input, &p.head, &dlogits, &mut grad.head, true).expect("dx");
    let depth = dskips.len();
    for (j, (up, uc)) in p.ups.iter().zip(&cache.ups).enumerate().rev() {
        let g = &mut grad.ups[j];
        let dcat = block_backward(&up.block, &uc.block, dcur, &mut g.block, true).expect("dx");
        let (du, dskip) = split_channels(&dcat, up.up.conv.out_ch);
        dskips[depth - 1 - j].add_assign(&dskip);
        let dupsampled = convbn_backward(&up.up, &uc.up, du, &mut g.up, true).expect("dx");
        dcur = upsample2_backward(&dupsampled);
    }
    dcur
}

/// Run the network on an N×C×S×S batch with S = `input_size`.
pub fn forward_batch(params: &NetworkParams, x: &Tensor, mode: Mode) -> Result<(BatchOutput, Option<ForwardCache>)> {
    let cfg = &params.config;
    if x.c != cfg.channels_in || x.h != cfg.input_size || x.w != cfg.input_size || x.n == 0 {
        return Err(Error::Shape(format!(
            "network expects N×{}×{}×{} input, got {:?}",
            cfg.channels_in,
            cfg.input_size,
            cfg.input_size,
            x.shape()
        )));
    }
    let eps = cfg.bn_eps;
    let mut cur = Rc::new(x.clone());
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut enc_caches = Vec::with_capacity(cfg.depth);
    for (level, block) in params.encoder.iter().enumerate() {
        let (out, cache) = block_forward(block, cur, mode, eps, &format!("encoder{level}"))?;
        let (pooled, arg) = maxpool2_forward(&out);
        if let Some(c) = cache {
            enc_caches.push((c, arg));
        }
        skips.push(out);
        cur = Rc::new(pooled);
    }
    let (bottom, bottleneck) = block_forward(&params.bottleneck, cur, mode, eps, "bottleneck")?;
    let (gland, gc) = decoder_forward(&params.gland, &bottom, &skips, mode, eps, "gland")?;
    let (contour, cc) = decoder_forward(&params.contour, &bottom, &skips, mode, eps, "contour")?;
    let cache = match (mode, bottleneck, gc, cc) {
        (Mode::Train, Some(bottleneck), Some(g), Some(c)) => Some(ForwardCache {
            encoder: enc_caches,
            bottleneck,
            heads: [g, c],
        }),
        _ => None,
    };
    Ok((BatchOutput { gland, contour }, cache))
}

/// Gradients of the loss given dL/d(foreground probability) of both heads.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, d_gland: &Tensor, d_contour: &Tensor) -> Gradients {
    let mut grads = Gradients::zeros_for(params);
    let g = &mut grads.0;
    let mut dskips: Vec<Tensor> = cache
        .encoder
        .iter()
        .map(|(bc, _)| {
            let o = &bc.second.output;
            Tensor::zeros(o.n, o.c, o.h, o.w)
        })
        .collect();
    let mut dbottom = decoder_backward(&params.gland, &cache.heads[0], d_gland, &mut g.gland, &mut dskips);
    let dc = decoder_backward(&params.contour, &cache.heads[1], d_contour, &mut g.contour, &mut dskips);
    dbottom.add_assign(&dc);

    let mut dcur = block_backward(&params.bottleneck, &cache.bottleneck, dbottom, &mut g.bottleneck, true).expect("dx");
    for level in (0..cache.encoder.len()).rev() {
        let (bc, arg) = &cache.encoder[level];
        let mut dout = maxpool2_backward(&dcur, arg);
        dout.add_assign(&dskips[level]);
        match block_backward(&params.encoder[level], bc, dout, &mut g.encoder[level], level > 0) {
            Some(dx) => dcur = dx,
            None => break,
        }
    }
    grads
}

/// Fold the batch statistics of a training pass into the running averages.
pub fn update_running_stats(params: &mut NetworkParams, cache: &ForwardCache) {
    let m = params.config.bn_momentum;
    let upd = |p: &mut ConvBn, c: &ConvBnCache| p.bn.update_running(&c.bn.mean, &c.bn.var, m);
    let upd_block = |p: &mut ConvBlock, c: &BlockCache| {
        upd(&mut p.first, &c.first);
        upd(&mut p.second, &c.second);
    };
    for (p, (c, _)) in params.encoder.iter_mut().zip(&cache.encoder) {
        upd_block(p, c);
    }
    upd_block(&mut params.bottleneck, &cache.bottleneck);
    for (dec, dc) in [&mut params.gland, &mut params.contour].into_iter().zip(&cache.heads) {
        for (p, c) in dec.ups.iter_mut().zip(&dc.ups) {
            upd(&mut p.up, &c.up);
            upd_block(&mut p.block, &c.block);
        }
    }
}
