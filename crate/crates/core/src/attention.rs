//! Local-attention feature enhancement.
//!
//! A bank of `N` branches scores every spatial position of the backbone's
//! final feature map (two 1x1 convolutions, `C -> C/r -> 1`, rectifier then
//! sigmoid). During training one branch per batch element is picked
//! uniformly and zeroed with probability `p`; the surviving maps are fused by
//! an elementwise max and the result reweights every feature channel.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, Op, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }
}

/// `N x 1 x h x w` branch scores, each in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreStack<T> {
    pub branches: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> ScoreStack<T> {
    pub fn branch(&self, n: usize) -> &[T] {
        let p = self.height * self.width;
        &self.values[n * p..(n + 1) * p]
    }
}

/// Fused `1 x h x w` attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

/// Shape of an attention bank; parameters live in a flat slice laid out as
/// `[w1 (N*h x C), b1 (N*h), w2 (N x h), b2 (N)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBank {
    pub num_branches: usize,
    pub channels: usize,
    pub hidden: usize,
}

struct BankParams<'a, T> {
    w1: &'a [T],
    b1: &'a [T],
    w2: &'a [T],
    b2: &'a [T],
}

impl AttentionBank {
    pub fn new(channels: usize, num_branches: usize, reduction: usize) -> Result<Self> {
        if num_branches == 0 {
            return Err(Error::Shape("attention bank needs at least one branch".into()));
        }
        if channels == 0 || reduction == 0 {
            return Err(Error::Shape(format!(
                "invalid attention bank: {channels} channels, reduction {reduction}"
            )));
        }
        Ok(Self {
            num_branches,
            channels,
            hidden: (channels / reduction).max(1),
        })
    }

    fn rows(&self) -> usize {
        self.num_branches * self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.rows() * self.channels + 2 * self.rows() + self.num_branches
    }

    fn split<'a, T>(&self, params: &'a [T]) -> BankParams<'a, T> {
        let (w1, rest) = params.split_at(self.rows() * self.channels);
        let (b1, rest) = rest.split_at(self.rows());
        let (w2, b2) = rest.split_at(self.rows());
        BankParams { w1, b1, w2, b2 }
    }

    /// He-normal weights, zero biases.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut params = vec![T::zero(); self.param_count()];
        let std1 = (2.0 / self.channels as f64).sqrt();
        let std2 = (1.0 / self.hidden as f64).sqrt();
        let n1 = self.rows() * self.channels;
        let normal1 = Normal::new(0.0, std1).expect("finite std");
        for v in &mut params[..n1] {
            *v = T::from_f64(normal1.sample(rng));
        }
        let normal2 = Normal::new(0.0, std2).expect("finite std");
        let w2_start = n1 + self.rows();
        for v in &mut params[w2_start..w2_start + self.rows()] {
            *v = T::from_f64(normal2.sample(rng));
        }
        params
    }

    fn check(&self, features: &FeatureMap<impl Real>) -> Result<()> {
        if features.channels != self.channels {
            return Err(Error::DimensionMismatch {
                expected: self.channels,
                got: features.channels,
            });
        }
        Ok(())
    }
}

/// Intermediate values of one sample's score computation.
#[derive(Clone, Debug)]
pub struct ScoreCache<T> {
    /// Pre-rectifier hidden activations, `N*h x P`.
    pub hidden_pre: Vec<T>,
    /// Sigmoid scores, `N x P`.
    pub scores: Vec<T>,
}

fn score_forward<T: Real>(bank: &AttentionBank, params: &[T], feats: &[T], positions: usize) -> ScoreCache<T> {
    let p = bank.split(params);
    let rows = bank.rows();
    let mut hidden_pre = vec![T::zero(); rows * positions];
    gemm(Op::N, Op::N, rows, bank.channels, positions, p.w1, feats, T::zero(), &mut hidden_pre);
    for (r, row) in hidden_pre.chunks_mut(positions).enumerate() {
        for v in row {
            *v = *v + p.b1[r];
        }
    }
    let mut scores = vec![T::zero(); bank.num_branches * positions];
    for n in 0..bank.num_branches {
        let out = &mut scores[n * positions..(n + 1) * positions];
        out.fill(p.b2[n]);
        for j in 0..bank.hidden {
            let r = n * bank.hidden + j;
            let w = p.w2[r];
            for (o, &h) in out.iter_mut().zip(&hidden_pre[r * positions..(r + 1) * positions]) {
                if h > T::zero() {
                    *o = *o + w * h;
                }
            }
        }
        for o in out.iter_mut() {
            *o = sigmoid(*o);
        }
    }
    ScoreCache { hidden_pre, scores }
}

/// Scores every position of `features` with every branch of the bank.
pub fn lanet_score<T: Real>(features: &FeatureMap<T>, bank: &AttentionBank, params: &[T]) -> Result<ScoreStack<T>> {
    bank.check(features)?;
    if params.len() != bank.param_count() {
        return Err(Error::DimensionMismatch {
            expected: bank.param_count(),
            got: params.len(),
        });
    }
    let positions = features.height * features.width;
    let cache = score_forward(bank, params, &features.values, positions);
    Ok(ScoreStack {
        branches: bank.num_branches,
        height: features.height,
        width: features.width,
        values: cache.scores,
    })
}

/// Per batch element, the branch whose map is zeroed (if any).
pub type DropPlan = Vec<Option<usize>>;

/// Draws one branch index per element, then zeroes it with probability `p`.
/// Indices are drawn for the whole batch before the drop coins.
pub fn sample_drop_plan<R: Rng + ?Sized>(batch: usize, branches: usize, p: f64, rng: &mut R) -> DropPlan {
    let picks: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..branches)).collect();
    picks
        .into_iter()
        .map(|branch| (rng.gen::<f64>() < p).then_some(branch))
        .collect()
}

/// Elementwise max over branches with `dropped` zeroed. Also returns, for
/// every position, the branch that supplied the max (smallest index on ties).
fn max_fuse<T: Real>(scores: &[T], branches: usize, positions: usize, dropped: Option<usize>) -> (Vec<T>, Vec<usize>) {
    let value = |n: usize, i: usize| {
        if dropped == Some(n) {
            T::zero()
        } else {
            scores[n * positions + i]
        }
    };
    let mut out = Vec::with_capacity(positions);
    let mut winners = Vec::with_capacity(positions);
    for i in 0..positions {
        let mut best = 0;
        let mut best_value = value(0, i);
        for n in 1..branches {
            let v = value(n, i);
            if v > best_value {
                best = n;
                best_value = v;
            }
        }
        out.push(best_value);
        winners.push(best);
    }
    (out, winners)
}

/// Applies [`sample_drop_plan`] in training mode, then max-fuses each stack.
/// In eval mode nothing is dropped and `rng` is not touched.
pub fn drop_and_max<T: Real, R: Rng + ?Sized>(
    scores: &[ScoreStack<T>],
    p: f64,
    rng: &mut R,
    training: bool,
) -> (Vec<AttentionMap<T>>, DropPlan) {
    let plan = match (training, scores.first()) {
        (true, Some(first)) => sample_drop_plan(scores.len(), first.branches, p, rng),
        _ => vec![None; scores.len()],
    };
    let maps = scores
        .iter()
        .zip(&plan)
        .map(|(stack, &dropped)| AttentionMap {
            height: stack.height,
            width: stack.width,
            values: max_fuse(&stack.values, stack.branches, stack.height * stack.width, dropped).0,
        })
        .collect();
    (maps, plan)
}

/// Hadamard product with the single attention channel broadcast over all
/// feature channels.
pub fn fuse<T: Real>(features: &FeatureMap<T>, atten: &AttentionMap<T>) -> Result<FeatureMap<T>> {
    if features.height != atten.height || features.width != atten.width {
        return Err(Error::Shape(format!(
            "features are {}x{}, attention map is {}x{}",
            features.height, features.width, atten.height, atten.width
        )));
    }
    let positions = atten.values.len();
    let values = features
        .values
        .chunks(positions)
        .flat_map(|plane| plane.iter().zip(&atten.values).map(|(&f, &a)| f * a))
        .collect();
    Ok(FeatureMap {
        values,
        ..features.clone()
    })
}

/// Everything needed to backpropagate through one sample's head.
#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    pub score: ScoreCache<T>,
    pub dropped: Option<usize>,
    pub winners: Vec<usize>,
    pub atten: Vec<T>,
}

/// Score, drop per `dropped`, max-fuse and reweight one sample's features
/// (`C x P`, channel-major). Returns the enhanced features.
pub fn head_forward<T: Real>(
    bank: &AttentionBank,
    params: &[T],
    feats: &[T],
    positions: usize,
    dropped: Option<usize>,
) -> (Vec<T>, HeadCache<T>) {
    let score = score_forward(bank, params, feats, positions);
    let (atten, winners) = max_fuse(&score.scores, bank.num_branches, positions, dropped);
    let out = feats
        .chunks(positions)
        .flat_map(|plane| plane.iter().zip(&atten).map(|(&f, &a)| f * a))
        .collect();
    (
        out,
        HeadCache {
            score,
            dropped,
            winners,
            atten,
        },
    )
}

/// Accumulates parameter gradients into `grad_params` and feature gradients
/// into `grad_feats`, given the gradient of the enhanced features.
pub fn head_backward<T: Real>(
    bank: &AttentionBank,
    params: &[T],
    feats: &[T],
    positions: usize,
    cache: &HeadCache<T>,
    grad_out: &[T],
    grad_params: &mut [T],
    grad_feats: &mut [T],
) {
    let p = bank.split(params);
    let rows = bank.rows();
    let c = bank.channels;

    let mut grad_atten = vec![T::zero(); positions];
    for ch in 0..c {
        let f = &feats[ch * positions..(ch + 1) * positions];
        let g = &grad_out[ch * positions..(ch + 1) * positions];
        let gf = &mut grad_feats[ch * positions..(ch + 1) * positions];
        for i in 0..positions {
            gf[i] = gf[i] + g[i] * cache.atten[i];
            grad_atten[i] = grad_atten[i] + g[i] * f[i];
        }
    }

    // Only the winning branch receives gradient, and a zeroed branch is a constant.
    let mut grad_logit = vec![T::zero(); bank.num_branches * positions];
    for i in 0..positions {
        let n = cache.winners[i];
        if cache.dropped == Some(n) {
            continue;
        }
        let s = cache.score.scores[n * positions + i];
        grad_logit[n * positions + i] = grad_atten[i] * s * (T::one() - s);
    }

    let (gw1, rest) = grad_params.split_at_mut(rows * c);
    let (gb1, rest) = rest.split_at_mut(rows);
    let (gw2, gb2) = rest.split_at_mut(rows);

    let mut grad_hidden = vec![T::zero(); rows * positions];
    for n in 0..bank.num_branches {
        let gl = &grad_logit[n * positions..(n + 1) * positions];
        gb2[n] = gb2[n] + gl.iter().copied().sum();
        for j in 0..bank.hidden {
            let r = n * bank.hidden + j;
            let hpre = &cache.score.hidden_pre[r * positions..(r + 1) * positions];
            let gh = &mut grad_hidden[r * positions..(r + 1) * positions];
            let mut acc = T::zero();
            for i in 0..positions {
                if hpre[i] > T::zero() {
                    acc = acc + gl[i] * hpre[i];
                    gh[i] = p.w2[r] * gl[i];
                }
            }
            gw2[r] = gw2[r] + acc;
            gb1[r] = gb1[r] + gh.iter().copied().sum();
        }
    }
    gemm(Op::N, Op::T, rows, positions, c, &grad_hidden, feats, T::one(), gw1);
    gemm(Op::T, Op::N, c, rows, positions, p.w1, &grad_hidden, T::one(), grad_feats);
}
