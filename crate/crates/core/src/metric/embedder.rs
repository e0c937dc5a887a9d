//! A small shared-weight embedder trained with the contrastive loss.
//!
//! Both views go through the same map: an optional ReLU hidden layer
//! followed by a linear projection, then L2 normalization. Layers carry no
//! bias. Parameters are addressed as one flat vector (layer by layer,
//! row-major) so gradients and finite differences line up index by index.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{contrastive_loss_at, l2_norm, Embedding, MIN_NORM};
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "crossview-embedder 1";

/// Raw features of a cross-view pair and whether they show the same building.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub matched: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderShape {
    pub input_dim: usize,
    /// Width of the optional ReLU hidden layer.
    pub hidden: Option<usize>,
    pub output_dim: usize,
}

impl Default for EmbedderShape {
    fn default() -> Self {
        EmbedderShape {
            input_dim: 64,
            hidden: None,
            output_dim: 32,
        }
    }
}

/// Dense row-major weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl Layer {
    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(input).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// `W^T g`
    fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, gi) in self.weights.chunks_exact(self.cols).zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    shape: EmbedderShape,
    layers: Vec<Layer>,
    margin: f64,
}

struct Forward {
    /// Hidden pre-activations and activations, when there is a hidden layer.
    hidden: Option<(Vec<f64>, Vec<f64>)>,
    out: Vec<f64>,
}

impl Embedder {
    /// Gaussian initialization with variance `1 / fan_in`.
    pub fn random(shape: EmbedderShape, margin: f64, seed: u64) -> Result<Self> {
        validate_shape(shape)?;
        validate_margin(margin)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<(usize, usize)> = match shape.hidden {
            Some(h) => vec![(h, shape.input_dim), (shape.output_dim, h)],
            None => vec![(shape.output_dim, shape.input_dim)],
        };
        let layers = dims
            .into_iter()
            .map(|(rows, cols)| {
                let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("positive std");
                Layer {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
                }
            })
            .collect();
        Ok(Embedder { shape, layers, margin })
    }

    pub fn from_layers(layers: Vec<Layer>, margin: f64) -> Result<Self> {
        validate_margin(margin)?;
        let shape = match layers.as_slice() {
            [only] => EmbedderShape {
                input_dim: only.cols,
                hidden: None,
                output_dim: only.rows,
            },
            [first, second] if second.cols == first.rows => EmbedderShape {
                input_dim: first.cols,
                hidden: Some(first.rows),
                output_dim: second.rows,
            },
            _ => return Err(Error::InvalidParameter("embedder needs 1 or 2 chained layers".into())),
        };
        validate_shape(shape)?;
        for l in &layers {
            if l.weights.len() != l.rows * l.cols {
                return Err(Error::DimensionMismatch {
                    expected: l.rows * l.cols,
                    actual: l.weights.len(),
                });
            }
            if l.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::InvalidParameter("non-finite weight".into()));
            }
        }
        Ok(Embedder { shape, layers, margin })
    }

    pub fn shape(&self) -> EmbedderShape {
        self.shape
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (head, tail) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn check_input(&self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.shape.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.shape.input_dim,
                actual: raw.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, raw: &[f64]) -> Forward {
        match self.layers.as_slice() {
            [only] => Forward {
                hidden: None,
                out: only.apply(raw),
            },
            [first, second] => {
                let pre = first.apply(raw);
                let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                let out = second.apply(&act);
                Forward {
                    hidden: Some((pre, act)),
                    out,
                }
            }
            _ => unreachable!("layer count validated at construction"),
        }
    }

    /// Maps raw features to a unit-norm embedding.
    pub fn embed(&self, raw: &[f64]) -> Result<Embedding> {
        self.check_input(raw)?;
        super::l2_normalize(&self.forward(raw).out)
    }

    pub fn loss(&self, sample: &PairSample) -> Result<f64> {
        let a = self.embed(&sample.x)?;
        let b = self.embed(&sample.y)?;
        Ok(contrastive_loss_at(
            super::pair_distance(&a, &b),
            sample.matched,
            self.margin,
        ))
    }

    pub fn mean_loss(&self, pairs: &[PairSample]) -> Result<f64> {
        let mut total = 0.0;
        for p in pairs {
            total += self.loss(p)?;
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    /// Loss and its gradient with respect to [`Embedder::params`].
    pub fn loss_and_grad(&self, sample: &PairSample) -> Result<(f64, Vec<f64>)> {
        self.check_input(&sample.x)?;
        self.check_input(&sample.y)?;
        let fx = self.forward(&sample.x);
        let fy = self.forward(&sample.y);
        let nu = l2_norm(&fx.out);
        let nv = l2_norm(&fy.out);
        if nu <= MIN_NORM || nv <= MIN_NORM {
            return Err(Error::DegenerateVector { norm: nu.min(nv) });
        }
        let uh: Vec<f64> = fx.out.iter().map(|v| v / nu).collect();
        let vh: Vec<f64> = fy.out.iter().map(|v| v / nv).collect();
        let diff: Vec<f64> = uh.iter().zip(&vh).map(|(a, b)| a - b).collect();
        let d = l2_norm(&diff);
        let loss = contrastive_loss_at(d, sample.matched, self.margin);

        // dL/d(uh) = coef * diff, dL/d(vh) = -coef * diff
        let coef = if sample.matched {
            1.0
        } else if d < self.margin && d > MIN_NORM {
            -(self.margin - d) / d
        } else {
            0.0
        };
        let mut grad = vec![0.0; self.param_count()];
        if coef == 0.0 {
            return Ok((loss, grad));
        }
        let g_uh: Vec<f64> = diff.iter().map(|x| coef * x).collect();
        let g_vh: Vec<f64> = g_uh.iter().map(|x| -x).collect();
        let g_u = through_normalization(&uh, nu, &g_uh);
        let g_v = through_normalization(&vh, nv, &g_vh);

        self.backprop(&sample.x, &fx, &g_u, &mut grad);
        self.backprop(&sample.y, &fy, &g_v, &mut grad);
        Ok((loss, grad))
    }

    /// Accumulates into `grad` the parameter gradient for one branch given
    /// the gradient `g_out` at its pre-normalization output.
    fn backprop(&self, raw: &[f64], fwd: &Forward, g_out: &[f64], grad: &mut [f64]) {
        match (self.layers.as_slice(), &fwd.hidden) {
            ([only], None) => outer_add(&mut grad[..only.weights.len()], g_out, raw),
            ([first, second], Some((pre, act))) => {
                let (g_first, g_second) = grad.split_at_mut(first.weights.len());
                outer_add(g_second, g_out, act);
                let mut g_hidden = second.apply_transpose(g_out);
                for (g, p) in g_hidden.iter_mut().zip(pre) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
                outer_add(g_first, &g_hidden, raw);
            }
            _ => unreachable!("forward pass matches layer layout"),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FORMAT_TAG}")?;
        writeln!(w, "input_dim {}", self.shape.input_dim)?;
        writeln!(w, "hidden {}", self.shape.hidden.unwrap_or(0))?;
        writeln!(w, "output_dim {}", self.shape.output_dim)?;
        writeln!(w, "margin {}", self.margin)?;
        for l in &self.layers {
            writeln!(w, "layer {} {}", l.rows, l.cols)?;
            for row in l.weights.chunks_exact(l.cols) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Parse {
                    line: 0,
                    message: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let (n, tag) = next("header")?;
        if tag.trim() != FORMAT_TAG {
            return Err(Error::Parse {
                line: n,
                message: format!("expected `{FORMAT_TAG}`"),
            });
        }
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (n, l) = next(key)?;
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(k), Some(v)) if k == key => Ok((n, v.to_string())),
                _ => Err(Error::Parse {
                    line: n,
                    message: format!("expected `{key} <value>`"),
                }),
            }
        };
        let input_dim: usize = parse_at(header("input_dim")?)?;
        let hidden: usize = parse_at(header("hidden")?)?;
        let output_dim: usize = parse_at(header("output_dim")?)?;
        let margin: f64 = parse_at(header("margin")?)?;
        let n_layers = if hidden == 0 { 1 } else { 2 };
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (n, l) = next("layer header")?;
            let dims: Vec<&str> = l.split_whitespace().collect();
            let (rows, cols) = match dims.as_slice() {
                ["layer", r, c] => (parse_at((n, r.to_string()))?, parse_at((n, c.to_string()))?),
                _ => {
                    return Err(Error::Parse {
                        line: n,
                        message: "expected `layer <rows> <cols>`".into(),
                    })
                }
            };
            let mut weights = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (n, l) = next("weight row")?;
                let row: Vec<f64> = l
                    .split_whitespace()
                    .map(|v| parse_at((n, v.to_string())))
                    .collect::<Result<_>>()?;
                if row.len() != cols {
                    return Err(Error::Parse {
                        line: n,
                        message: format!("expected {cols} weights, found {}", row.len()),
                    });
                }
                weights.extend(row);
            }
            layers.push(Layer { rows, cols, weights });
        }
        let e = Embedder::from_layers(layers, margin)?;
        let expected = EmbedderShape {
            input_dim,
            hidden: (hidden > 0).then_some(hidden),
            output_dim,
        };
        if e.shape != expected {
            return Err(Error::Parse {
                line: 0,
                message: "layer sizes disagree with header".into(),
            });
        }
        Ok(e)
    }
}

fn parse_at<T>((line, value): (usize, String)) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Parse {
        line,
        message: format!("`{value}`: {e}"),
    })
}

/// Gradient of `u / |u|` pulled back to `u`.
fn through_normalization(unit: &[f64], norm: f64, g_unit: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(g_unit).map(|(a, b)| a * b).sum();
    unit.iter().zip(g_unit).map(|(u, g)| (g - u * dot) / norm).collect()
}

/// `grad += g x^T` for a row-major `g.len() x x.len()` block.
fn outer_add(grad: &mut [f64], g: &[f64], x: &[f64]) {
    for (row, gi) in grad.chunks_exact_mut(x.len()).zip(g) {
        if *gi == 0.0 {
            continue;
        }
        for (r, xj) in row.iter_mut().zip(x) {
            *r += gi * xj;
        }
    }
}

fn validate_shape(shape: EmbedderShape) -> Result<()> {
    if shape.input_dim == 0 || shape.output_dim == 0 || shape.hidden == Some(0) {
        return Err(Error::InvalidParameter(format!("bad embedder shape {shape:?}")));
    }
    Ok(())
}

fn validate_margin(margin: f64) -> Result<()> {
    if !(margin.is_finite() && margin > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "margin must be positive, got {margin}"
        )));
    }
    Ok(())
}

/// Gradient of the contrastive loss for one pair w.r.t. all embedder weights.
pub fn contrastive_grad(sample: &PairSample, embedder: &Embedder) -> Result<Vec<f64>> {
    embedder.loss_and_grad(sample).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub shape: EmbedderShape,
    pub margin: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shape: EmbedderShape::default(),
            margin: 1.0,
            epochs: 20,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub embedder: Embedder,
    /// Mean loss over all pairs before training and after each epoch.
    pub loss_curve: Vec<f64>,
    /// Epoch whose weights were returned (0 = initial weights).
    pub best_epoch: usize,
}

/// Plain SGD over shuffled pairs, starting from `Embedder::random(shape,
/// margin, seed)`.
///
/// Returns the weights with the lowest full-data mean loss seen at an epoch
/// boundary, so the final loss never exceeds the initial one.
pub fn train_embedder(pairs: &[PairSample], config: &TrainConfig) -> Result<TrainOutcome> {
    let init = Embedder::random(config.shape, config.margin, config.seed)?;
    train_from(init, pairs, config)
}

pub fn train_from(init: Embedder, pairs: &[PairSample], config: &TrainConfig) -> Result<TrainOutcome> {
    let positives = pairs.iter().filter(|p| p.matched).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::InsufficientData(format!(
            "need matched and unmatched pairs, got {positives} of {}",
            pairs.len()
        )));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::InvalidParameter("learning rate must be positive".into()));
    }

    let mut model = init;
    let mut params = model.params();
    let mut best = (model.mean_loss(pairs)?, 0usize, params.clone());
    let mut curve = vec![best.0];
    // Distinct stream from the initializer.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5a17_0000_0001);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (_, g) = model.loss_and_grad(&pairs[i])?;
            for (p, gi) in params.iter_mut().zip(&g) {
                *p -= config.learning_rate * gi;
            }
            model.set_params(&params)?;
        }
        let loss = model.mean_loss(pairs)?;
        if !loss.is_finite() {
            return Err(Error::InvalidParameter(format!("loss diverged at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: mean loss {loss:.6}");
        curve.push(loss);
        if loss < best.0 {
            best = (loss, epoch, params.clone());
        }
    }
    model.set_params(&best.2)?;
    Ok(TrainOutcome {
        embedder: model,
        loss_curve: curve,
        best_epoch: best.1,
    })
}
