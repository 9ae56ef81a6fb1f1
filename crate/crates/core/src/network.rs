//! Small convolutional classifier with an optional attention head.
//!
//! Every block is `conv3x3 (pad 1) -> ReLU -> maxpool 2x2`. The final
//! feature map optionally passes through the attention bank before global
//! average pooling and a linear classifier. Parameters live in one flat
//! vector so optimizer state, EMA and checkpoints stay trivial.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{head_backward, head_forward, AttentionBank, HeadCache};
use crate::error::{Error, Result};
use crate::tensor::{col2im3, gemm, im2col3, Op, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSettings {
    pub num_branches: usize,
    pub reduction: usize,
    pub drop_p: f64,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        Self {
            num_branches: 6,
            reduction: 16,
            drop_p: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub attention: Option<AttentionSettings>,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    weight: usize,
    bias: usize,
}

impl ConvBlock {
    fn out_height(&self) -> usize {
        self.height / 2
    }

    fn out_width(&self) -> usize {
        self.width / 2
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetConfig,
    blocks: Vec<ConvBlock>,
    feat_channels: usize,
    feat_height: usize,
    feat_width: usize,
    bank: Option<(AttentionBank, usize)>,
    fc_weight: usize,
    fc_bias: usize,
    param_count: usize,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    cols: Vec<T>,
    pre: Vec<T>,
    pool_index: Vec<u32>,
}

#[derive(Clone, Debug)]
struct SampleCache<T> {
    blocks: Vec<BlockCache<T>>,
    feats: Vec<T>,
    head: Option<HeadCache<T>>,
    pooled: Vec<T>,
}

/// Logits of a batch plus whatever backward needs.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub batch: usize,
    pub logits: Vec<T>,
    caches: Vec<SampleCache<T>>,
}

impl<T: Real> Forward<T> {
    pub fn sample_logits(&self, i: usize, num_classes: usize) -> &[T] {
        &self.logits[i * num_classes..(i + 1) * num_classes]
    }
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Shape(format!("invalid backbone widths {:?}", config.widths)));
        }
        if config.num_classes < 2 {
            return Err(Error::Shape("classifier needs at least 2 classes".into()));
        }
        let mut offset = 0;
        let mut blocks = Vec::new();
        let (mut cin, mut h, mut w) = (config.in_channels, config.input_size, config.input_size);
        for &cout in &config.widths {
            if h < 2 || w < 2 {
                return Err(Error::Shape(format!(
                    "input size {} too small for {} pooling stages",
                    config.input_size,
                    config.widths.len()
                )));
            }
            let block = ConvBlock {
                cin,
                cout,
                height: h,
                width: w,
                weight: offset,
                bias: offset + cout * cin * 9,
            };
            offset += cout * cin * 9 + cout;
            cin = cout;
            h = block.out_height();
            w = block.out_width();
            blocks.push(block);
        }
        let bank = match &config.attention {
            Some(a) => {
                let bank = AttentionBank::new(cin, a.num_branches, a.reduction)?;
                let start = offset;
                offset += bank.param_count();
                Some((bank, start))
            }
            None => None,
        };
        let fc_weight = offset;
        let fc_bias = offset + config.num_classes * cin;
        offset = fc_bias + config.num_classes;
        Ok(Self {
            feat_channels: cin,
            feat_height: h,
            feat_width: w,
            config,
            blocks,
            bank,
            fc_weight,
            fc_bias,
            param_count: offset,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.config.in_channels * self.config.input_size * self.config.input_size
    }

    /// `(channels, height, width)` of the final backbone feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.feat_channels, self.feat_height, self.feat_width)
    }

    pub fn attention_bank(&self) -> Option<&AttentionBank> {
        self.bank.as_ref().map(|(b, _)| b)
    }

    /// Range of the attention bank's parameters in the flat vector.
    pub fn attention_params(&self) -> Option<std::ops::Range<usize>> {
        self.bank.as_ref().map(|(b, start)| *start..*start + b.param_count())
    }

    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut params = vec![T::zero(); self.param_count];
        for b in &self.blocks {
            let normal = Normal::new(0.0, (2.0 / (b.cin * 9) as f64).sqrt()).expect("finite std");
            for v in &mut params[b.weight..b.bias] {
                *v = T::from_f64(normal.sample(rng));
            }
        }
        if let Some((bank, start)) = &self.bank {
            let init: Vec<T> = bank.init(rng);
            params[*start..*start + init.len()].copy_from_slice(&init);
        }
        let normal = Normal::new(0.0, (1.0 / self.feat_channels as f64).sqrt()).expect("finite std");
        for v in &mut params[self.fc_weight..self.fc_bias] {
            *v = T::from_f64(normal.sample(rng));
        }
        params
    }

    fn check_inputs<T>(&self, params: &[T], input: &[T], batch: usize) {
        assert_eq!(params.len(), self.param_count, "parameter vector length");
        assert_eq!(input.len(), batch * self.input_len(), "input batch length");
    }

    /// Forward pass. `drops` gives each element's zeroed attention branch;
    /// `None` means eval mode (no drop at all).
    pub fn forward<T: Real>(&self, params: &[T], input: &[T], batch: usize, drops: Option<&[Option<usize>]>) -> Forward<T> {
        self.check_inputs(params, input, batch);
        let k = self.num_classes();
        let mut logits = vec![T::zero(); batch * k];
        let mut caches = Vec::with_capacity(batch);
        for (i, x) in input.chunks(self.input_len()).enumerate() {
            let dropped = drops.and_then(|d| d[i]);
            let cache = self.forward_sample(params, x, dropped, &mut logits[i * k..(i + 1) * k]);
            caches.push(cache);
        }
        Forward { batch, logits, caches }
    }

    /// Eval-mode logits without keeping caches.
    pub fn predict<T: Real>(&self, params: &[T], input: &[T], batch: usize) -> Vec<T> {
        self.check_inputs(params, input, batch);
        let k = self.num_classes();
        let mut logits = vec![T::zero(); batch * k];
        for (i, x) in input.chunks(self.input_len()).enumerate() {
            self.forward_sample(params, x, None, &mut logits[i * k..(i + 1) * k]);
        }
        logits
    }

    fn forward_sample<T: Real>(&self, params: &[T], x: &[T], dropped: Option<usize>, logits: &mut [T]) -> SampleCache<T> {
        let mut act = x.to_vec();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let hw = b.height * b.width;
            let mut cols = vec![T::zero(); b.cin * 9 * hw];
            im2col3(&act, b.cin, b.height, b.width, &mut cols);
            let mut pre = vec![T::zero(); b.cout * hw];
            for (c, row) in pre.chunks_mut(hw).enumerate() {
                row.fill(params[b.bias + c]);
            }
            gemm(
                Op::N,
                Op::N,
                b.cout,
                b.cin * 9,
                hw,
                &params[b.weight..b.bias],
                &cols,
                T::one(),
                &mut pre,
            );
            let (oh, ow) = (b.out_height(), b.out_width());
            let mut out = vec![T::zero(); b.cout * oh * ow];
            let mut pool_index = vec![0u32; b.cout * oh * ow];
            for c in 0..b.cout {
                let plane = &pre[c * hw..(c + 1) * hw];
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best_i = (2 * y) * b.width + 2 * x;
                        let mut best = plane[best_i];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * y + dy) * b.width + 2 * x + dx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_i = idx;
                            }
                        }
                        // relu commutes with max
                        let o = (c * oh + y) * ow + x;
                        out[o] = best.max(T::zero());
                        pool_index[o] = best_i as u32;
                    }
                }
            }
            block_caches.push(BlockCache { cols, pre, pool_index });
            act = out;
        }
        let positions = self.feat_height * self.feat_width;
        let (enhanced, head) = match &self.bank {
            Some((bank, start)) => {
                let (out, cache) = head_forward(bank, &params[*start..*start + bank.param_count()], &act, positions, dropped);
                (out, Some(cache))
            }
            None => (act.clone(), None),
        };
        let scale = T::one() / T::from_f64(positions as f64);
        let pooled: Vec<T> = enhanced
            .chunks(positions)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let k = self.num_classes();
        logits.copy_from_slice(&params[self.fc_bias..self.fc_bias + k]);
        gemm(
            Op::N,
            Op::N,
            k,
            self.feat_channels,
            1,
            &params[self.fc_weight..self.fc_bias],
            &pooled,
            T::one(),
            logits,
        );
        SampleCache {
            blocks: block_caches,
            feats: act,
            head,
            pooled,
        }
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub fn backward<T: Real>(&self, params: &[T], fwd: &Forward<T>, grad_logits: &[T], grads: &mut [T]) {
        let k = self.num_classes();
        assert_eq!(grad_logits.len(), fwd.batch * k, "logit gradient length");
        assert_eq!(grads.len(), self.param_count, "gradient vector length");
        for (cache, gl) in fwd.caches.iter().zip(grad_logits.chunks(k)) {
            if gl.iter().all(|g| *g == T::zero()) {
                continue;
            }
            self.backward_sample(params, cache, gl, grads);
        }
    }

    fn backward_sample<T: Real>(&self, params: &[T], cache: &SampleCache<T>, grad_logits: &[T], grads: &mut [T]) {
        let k = self.num_classes();
        let cf = self.feat_channels;
        gemm(
            Op::N,
            Op::N,
            k,
            1,
            cf,
            grad_logits,
            &cache.pooled,
            T::one(),
            &mut grads[self.fc_weight..self.fc_bias],
        );
        for (g, &d) in grads[self.fc_bias..self.fc_bias + k].iter_mut().zip(grad_logits) {
            *g = *g + d;
        }
        let mut grad_pooled = vec![T::zero(); cf];
        gemm(
            Op::T,
            Op::N,
            cf,
            k,
            1,
            &params[self.fc_weight..self.fc_bias],
            grad_logits,
            T::zero(),
            &mut grad_pooled,
        );
        let positions = self.feat_height * self.feat_width;
        let scale = T::one() / T::from_f64(positions as f64);
        let grad_enhanced: Vec<T> = grad_pooled
            .iter()
            .flat_map(|&g| std::iter::repeat(g * scale).take(positions))
            .collect();
        let mut grad_act = match (&self.bank, &cache.head) {
            (Some((bank, start)), Some(head)) => {
                let end = *start + bank.param_count();
                let mut grad_feats = vec![T::zero(); cf * positions];
                head_backward(
                    bank,
                    &params[*start..end],
                    &cache.feats,
                    positions,
                    head,
                    &grad_enhanced,
                    &mut grads[*start..end],
                    &mut grad_feats,
                );
                grad_feats
            }
            _ => grad_enhanced,
        };
        for (bi, (b, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let hw = b.height * b.width;
            let mut grad_pre = vec![T::zero(); b.cout * hw];
            let pooled_len = b.out_height() * b.out_width();
            for c in 0..b.cout {
                for o in 0..pooled_len {
                    let idx = c * pooled_len + o;
                    let src = c * hw + bc.pool_index[idx] as usize;
                    if bc.pre[src] > T::zero() {
                        grad_pre[src] = grad_pre[src] + grad_act[idx];
                    }
                }
            }
            gemm(
                Op::N,
                Op::T,
                b.cout,
                hw,
                b.cin * 9,
                &grad_pre,
                &bc.cols,
                T::one(),
                &mut grads[b.weight..b.bias],
            );
            for (c, row) in grad_pre.chunks(hw).enumerate() {
                grads[b.bias + c] = grads[b.bias + c] + row.iter().copied().sum();
            }
            if bi == 0 {
                break;
            }
            let mut grad_cols = vec![T::zero(); b.cin * 9 * hw];
            gemm(
                Op::T,
                Op::N,
                b.cin * 9,
                b.cout,
                hw,
                &params[b.weight..b.bias],
                &grad_pre,
                T::zero(),
                &mut grad_cols,
            );
            let mut grad_in = vec![T::zero(); b.cin * hw];
            col2im3(&grad_cols, b.cin, b.height, b.width, &mut grad_in);
            grad_act = grad_in;
        }
    }
}
