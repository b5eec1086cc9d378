//! Quality metrics, per-layer threshold selection and joint threshold-factor
//! sweeps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{CbNetwork, DenseNetwork, Reference, RunOptions};
use crate::tensor::Tensor3;

/// How an output is scored against its reference. Both are reported as a
/// loss (lower is better): `1 − accuracy` or the mean squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossMetric {
    /// Fraction of pixels whose arg-max class differs from the reference's.
    PixelAccuracy,
    #[default]
    Mse,
}

impl LossMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMetric::PixelAccuracy => "pixel_accuracy",
            LossMetric::Mse => "mse",
        }
    }

    pub fn loss(&self, pred: &Tensor3, reference: &Tensor3) -> Result<f64> {
        match self {
            LossMetric::PixelAccuracy => Ok(1.0 - pixel_accuracy(pred, &argmax_labels(reference))?),
            LossMetric::Mse => mse(pred, reference),
        }
    }
}

impl std::str::FromStr for LossMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_accuracy" | "accuracy" => Ok(LossMetric::PixelAccuracy),
            "mse" => Ok(LossMetric::Mse),
            other => Err(Error::config(format!(
                "unknown metric '{other}' (expected pixel_accuracy or mse)"
            ))),
        }
    }
}

/// Per-pixel index of the largest channel (first one on ties), row-major.
pub fn argmax_labels(t: &Tensor3) -> Vec<u32> {
    let n = t.shape().pixels();
    let mut best = vec![0u32; n];
    let mut best_v = t.plane(0).to_vec();
    for c in 1..t.channels() {
        for (k, &v) in t.plane(c).iter().enumerate() {
            if v > best_v[k] {
                best_v[k] = v;
                best[k] = c as u32;
            }
        }
    }
    best
}

/// Fraction of pixels whose arg-max class equals `labels`.
pub fn pixel_accuracy(pred: &Tensor3, labels: &[u32]) -> Result<f64> {
    if labels.len() != pred.shape().pixels() {
        return Err(Error::invalid(format!(
            "{} labels for a {}x{} prediction",
            labels.len(),
            pred.height(),
            pred.width()
        )));
    }
    if labels.is_empty() {
        return Ok(1.0);
    }
    let hits = argmax_labels(pred).iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean squared difference, accumulated in `f64`.
pub fn mse(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "cannot compare {} with {}",
            a.shape(),
            b.shape()
        )));
    }
    if a.data().is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Frames with their reference outputs.
#[derive(Clone, Debug)]
pub struct EvalSequence {
    pub frames: Vec<Tensor3>,
    pub reference: Vec<Tensor3>,
}

impl EvalSequence {
    pub fn new(frames: Vec<Tensor3>, reference: Vec<Tensor3>) -> Result<Self> {
        if frames.len() != reference.len() {
            return Err(Error::invalid(format!(
                "{} frames but {} reference outputs",
                frames.len(),
                reference.len()
            )));
        }
        Ok(EvalSequence { frames, reference })
    }

    /// Uses the dense network's outputs as the reference.
    pub fn with_dense_reference(net: &DenseNetwork, frames: Vec<Tensor3>) -> Result<Self> {
        let reference = frames.iter().map(|f| net.forward(f)).collect::<Result<_>>()?;
        Ok(EvalSequence { frames, reference })
    }
}

/// Which frames of a sequence contribute to its loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalWindow {
    /// Mean over every frame after the first (the first is always exact).
    #[default]
    AfterBootstrap,
    LastFrame,
}

/// How per-sequence losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    #[default]
    Mean,
    Worst,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalConfig {
    pub metric: LossMetric,
    pub window: EvalWindow,
    pub aggregation: Aggregation,
    /// Record wall-clock time (otherwise reported as 0).
    pub timing: bool,
}

/// Result of running every evaluation sequence at one threshold vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub sequence_losses: Vec<f64>,
    /// Effective convolution operations over all frames of all sequences.
    pub total_eff_ops: u64,
    pub wall_ns: u64,
}

fn window_loss(losses: &[f64], window: EvalWindow) -> f64 {
    match (window, losses) {
        (_, []) => 0.0,
        (EvalWindow::LastFrame, _) => *losses.last().expect("non-empty"),
        (EvalWindow::AfterBootstrap, [only]) => *only,
        (EvalWindow::AfterBootstrap, [_, rest @ ..]) => rest.iter().sum::<f64>() / rest.len() as f64,
    }
}

/// Runs every sequence from a reset state at `thresholds` on clones of `net`.
pub fn evaluate(
    net: &CbNetwork,
    thresholds: &[f32],
    sequences: &[EvalSequence],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if sequences.is_empty() {
        return Err(Error::calibration("no evaluation sequences"));
    }
    let mut template = net.clone();
    template.set_thresholds(thresholds)?;
    template.set_options(RunOptions {
        timing: cfg.timing,
        ..RunOptions::default()
    });
    template.reset_state();
    let runs: Vec<(f64, u64, u64)> = sequences
        .par_iter()
        .map(|seq| {
            let mut cb = template.clone();
            let stats = cb.run_sequence(
                &seq.frames,
                Some(Reference {
                    outputs: &seq.reference,
                    metric: cfg.metric,
                }),
            )?;
            let losses: Vec<f64> = stats.frames.iter().map(|f| f.loss.unwrap_or(0.0)).collect();
            let wall = stats.frames.iter().map(|f| f.wall_ns).sum();
            Ok((
                window_loss(&losses, cfg.window),
                stats.total_eff_ops(0..stats.frames.len()),
                wall,
            ))
        })
        .collect::<Result<_>>()?;
    let sequence_losses: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let loss = match cfg.aggregation {
        Aggregation::Mean => sequence_losses.iter().sum::<f64>() / sequence_losses.len() as f64,
        Aggregation::Worst => sequence_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(Evaluation {
        loss,
        sequence_losses,
        total_eff_ops: runs.iter().map(|r| r.1).sum(),
        wall_ns: runs.iter().map(|r| r.2).sum(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibConfig {
    pub initial_tau: f32,
    pub growth_factor: f32,
    /// Allowed loss increment per layer.
    pub per_layer_budget: f64,
    /// Per convolution layer overrides of the budget.
    pub budget_overrides: Vec<Option<f64>>,
    /// Growth steps tried per layer before giving up.
    pub max_iterations: usize,
    /// Turn hitting `max_iterations` into an error instead of a report.
    pub fail_on_cap: bool,
    pub eval: EvalConfig,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            initial_tau: 0.01,
            growth_factor: 1.1,
            per_layer_budget: 0.0,
            budget_overrides: Vec::new(),
            max_iterations: 100,
            fail_on_cap: false,
            eval: EvalConfig::default(),
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_tau.is_finite() && self.initial_tau > 0.0) {
            return Err(Error::config(format!(
                "initial tau must be > 0, got {}",
                self.initial_tau
            )));
        }
        if !(self.growth_factor.is_finite() && self.growth_factor > 1.0) {
            return Err(Error::config(format!(
                "growth factor must be > 1, got {}",
                self.growth_factor
            )));
        }
        let budgets = std::iter::once(Some(self.per_layer_budget)).chain(self.budget_overrides.iter().copied());
        for b in budgets.flatten() {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::config(format!("loss budget must be >= 0, got {b}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max iterations must be at least 1"));
        }
        Ok(())
    }

    pub fn budget(&self, layer: usize) -> f64 {
        self.budget_overrides
            .get(layer)
            .copied()
            .flatten()
            .unwrap_or(self.per_layer_budget)
    }
}

/// One evaluated candidate during selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// Convolution-layer ordinal.
    pub layer: usize,
    pub tau: f32,
    pub loss: f64,
    /// Loss minus the loss with this layer's threshold at 0.
    pub increment: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub thresholds: Vec<f32>,
    pub trace: Vec<TraceRow>,
    /// Convolution-layer ordinals that reached the iteration cap.
    pub capped: Vec<usize>,
}

/// Greedy layer-by-layer selection: each layer's threshold grows
/// geometrically until its loss increment exceeds the budget, keeping the
/// last admissible value; earlier layers stay at their selected values and
/// later ones at 0.
pub fn select_thresholds(net: &CbNetwork, cfg: &CalibConfig, sequences: &[EvalSequence]) -> Result<Calibration> {
    cfg.validate()?;
    let n = net.conv_layers().len();
    let mut taus = vec![0.0f32; n];
    let mut trace = Vec::new();
    let mut capped = Vec::new();
    for layer in 0..n {
        let budget = cfg.budget(layer);
        let base = evaluate(net, &taus, sequences, &cfg.eval)?.loss;
        trace.push(TraceRow {
            layer,
            tau: 0.0,
            loss: base,
            increment: 0.0,
        });
        let mut tau = cfg.initial_tau;
        let mut iterations = 0;
        loop {
            if iterations == cfg.max_iterations {
                if cfg.fail_on_cap {
                    return Err(Error::calibration(format!(
                        "layer {layer}: threshold still within budget after {} growth steps",
                        cfg.max_iterations
                    )));
                }
                capped.push(layer);
                break;
            }
            let mut candidate = taus.clone();
            candidate[layer] = tau;
            let loss = evaluate(net, &candidate, sequences, &cfg.eval)?.loss;
            let increment = loss - base;
            trace.push(TraceRow {
                layer,
                tau,
                loss,
                increment,
            });
            if increment > budget {
                break;
            }
            taus[layer] = tau;
            tau *= cfg.growth_factor;
            if !tau.is_finite() {
                capped.push(layer);
                break;
            }
            iterations += 1;
        }
    }
    Ok(Calibration {
        thresholds: taus,
        trace,
        capped,
    })
}

/// Loss increment of every layer at `thresholds`, measured as during
/// selection: earlier layers at their values, later ones at 0.
pub fn layer_increments(
    net: &CbNetwork,
    thresholds: &[f32],
    sequences: &[EvalSequence],
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    let mut prefix = vec![0.0f32; thresholds.len()];
    let mut out = Vec::with_capacity(thresholds.len());
    for (layer, &tau) in thresholds.iter().enumerate() {
        let base = evaluate(net, &prefix, sequences, cfg)?.loss;
        prefix[layer] = tau;
        out.push(evaluate(net, &prefix, sequences, cfg)?.loss - base);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffRow {
    pub factor: f64,
    pub loss: f64,
    pub total_eff_ops: u64,
    pub wall_ns: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TradeoffCurve {
    pub rows: Vec<TradeoffRow>,
}

/// Evaluates `factor · base` for every factor.
pub fn sweep_threshold_factor(
    net: &CbNetwork,
    base: &[f32],
    factors: &[f64],
    sequences: &[EvalSequence],
    cfg: &EvalConfig,
) -> Result<TradeoffCurve> {
    if let Some(f) = factors.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
        return Err(Error::config(format!("threshold factors must be >= 0, got {f}")));
    }
    if factors.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("threshold factors must be strictly increasing"));
    }
    let rows = factors
        .iter()
        .map(|&factor| {
            let taus: Vec<f32> = base.iter().map(|&t| (t as f64 * factor) as f32).collect();
            let e = evaluate(net, &taus, sequences, cfg)?;
            Ok(TradeoffRow {
                factor,
                loss: e.loss,
                total_eff_ops: e.total_eff_ops,
                wall_ns: e.wall_ns,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TradeoffCurve { rows })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::network::{build_network, convert_to_cb, ConvGeometry, ConvWeights, LayerKind, NetworkSpec};
    use crate::tensor::Shape3;

    #[test]
    fn metric_examples() {
        let a = Tensor3::from_vec(Shape3::new(1, 1, 2), vec![0.0, 0.0]).unwrap();
        let b = Tensor3::from_vec(Shape3::new(1, 1, 2), vec![1.0, 1.0]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);

        let pred = Tensor3::from_vec(Shape3::new(2, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pixel_accuracy(&pred, &argmax_labels(&pred)).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&pred, &[0, 0]).unwrap(), 0.5);
        assert_eq!(LossMetric::PixelAccuracy.loss(&pred, &pred).unwrap(), 0.0);

        assert!(mse(&a, &pred).is_err());
        assert!(pixel_accuracy(&pred, &[0]).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor3::from_vec(Shape3::new(3, 1, 1), vec![0.5, 0.5, 0.1]).unwrap();
        assert_eq!(argmax_labels(&t), vec![0]);
    }

    #[test]
    fn config_validation() {
        let ok = CalibConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            CalibConfig {
                growth_factor: 1.0,
                ..ok.clone()
            },
            CalibConfig {
                initial_tau: 0.0,
                ..ok.clone()
            },
            CalibConfig {
                per_layer_budget: -1.0,
                ..ok.clone()
            },
            CalibConfig {
                budget_overrides: vec![None, Some(f64::NAN)],
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let over = CalibConfig {
            budget_overrides: vec![Some(0.5)],
            per_layer_budget: 0.1,
            ..ok
        };
        assert_eq!((over.budget(0), over.budget(1)), (0.5, 0.1));
    }

    fn tiny(rng: &mut ChaCha8Rng) -> (DenseNetwork, CbNetwork) {
        let g = |cin, cout, k, pad| {
            LayerKind::Conv(ConvGeometry {
                in_channels: cin,
                out_channels: cout,
                kernel_h: k,
                kernel_w: k,
                stride: 1,
                padding: pad,
                fuse_relu: true,
            })
        };
        let spec = NetworkSpec::sequential(
            Shape3::new(1, 10, 10),
            vec![("a".into(), g(1, 3, 3, 1)), ("b".into(), g(3, 2, 3, 1))],
        );
        let weights = spec
            .conv_layers()
            .iter()
            .map(|&i| {
                let LayerKind::Conv(g) = &spec.layers[i].kind else {
                    unreachable!()
                };
                ConvWeights {
                    weights: (0..g.weight_len()).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    bias: vec![0.05; g.out_channels],
                }
            })
            .collect();
        let net = build_network(&spec, weights).unwrap();
        let cb = convert_to_cb(&net, &[0.0; 2], &[]).unwrap();
        (net, cb)
    }

    fn noisy(rng: &mut ChaCha8Rng, n: usize) -> Vec<Tensor3> {
        let base: Vec<f32> = (0..100).map(|_| rng.random_range(0.0..0.5)).collect();
        (0..n)
            .map(|_| {
                let data = base.iter().map(|v| v + rng.random_range(-0.02..0.02)).collect();
                Tensor3::from_vec(Shape3::new(1, 10, 10), data).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_budget_on_noise_keeps_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (net, cb) = tiny(&mut rng);
        let seq = EvalSequence::with_dense_reference(&net, noisy(&mut rng, 4)).unwrap();
        let cfg = CalibConfig {
            initial_tau: 0.001,
            max_iterations: 20,
            ..CalibConfig::default()
        };
        let cal = select_thresholds(&cb, &cfg, &[seq]).unwrap();
        assert_eq!(cal.thresholds, vec![0.0, 0.0]);
        assert!(cal.capped.is_empty());
    }

    #[test]
    fn static_frames_hit_the_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (net, cb) = tiny(&mut rng);
        let frame = noisy(&mut rng, 1).remove(0);
        let seq = EvalSequence::with_dense_reference(&net, vec![frame; 3]).unwrap();
        let cfg = CalibConfig {
            max_iterations: 5,
            ..CalibConfig::default()
        };
        let cal = select_thresholds(&cb, &cfg, std::slice::from_ref(&seq)).unwrap();
        assert_eq!(cal.capped, vec![0, 1]);
        assert!(cal.thresholds.iter().all(|&t| t > 0.0));
        let strict = CalibConfig {
            fail_on_cap: true,
            ..cfg
        };
        assert!(matches!(
            select_thresholds(&cb, &strict, &[seq]),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn trace_is_increasing_and_budget_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (net, cb) = tiny(&mut rng);
        let seqs: Vec<_> = (0..2)
            .map(|_| EvalSequence::with_dense_reference(&net, noisy(&mut rng, 5)).unwrap())
            .collect();
        let cfg = CalibConfig {
            initial_tau: 0.002,
            per_layer_budget: 1e-5,
            max_iterations: 60,
            ..CalibConfig::default()
        };
        let cal = select_thresholds(&cb, &cfg, &seqs).unwrap();
        for layer in 0..2 {
            let taus: Vec<f32> = cal.trace.iter().filter(|r| r.layer == layer).map(|r| r.tau).collect();
            assert!(taus.windows(2).all(|w| w[1] > w[0]), "{taus:?}");
        }
        for inc in layer_increments(&cb, &cal.thresholds, &seqs, &cfg.eval).unwrap() {
            assert!(inc <= cfg.per_layer_budget);
        }
        assert_eq!(select_thresholds(&cb, &cfg, &seqs).unwrap(), cal);
    }

    #[test]
    fn sweep_rejects_bad_factors_and_factor_zero_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (net, cb) = tiny(&mut rng);
        let seq = EvalSequence::with_dense_reference(&net, noisy(&mut rng, 4)).unwrap();
        let cfg = EvalConfig::default();
        assert!(sweep_threshold_factor(&cb, &[0.1, 0.1], &[0.0, 0.0], std::slice::from_ref(&seq), &cfg).is_err());
        assert!(sweep_threshold_factor(&cb, &[0.1, 0.1], &[-1.0], std::slice::from_ref(&seq), &cfg).is_err());
        let curve = sweep_threshold_factor(&cb, &[0.02, 0.02], &[0.0, 1.0, 2.0], &[seq], &cfg).unwrap();
        assert_eq!(curve.rows[0].loss, 0.0);
        let max_ops = curve.rows.iter().map(|r| r.total_eff_ops).max().unwrap();
        assert_eq!(curve.rows[0].total_eff_ops, max_ops);
        assert!(curve.rows.iter().all(|r| r.wall_ns == 0));
    }
}
