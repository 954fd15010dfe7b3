//! Per-layer weight reports: sparsity of the deployed ternary kernels,
//! approximation errors under three quantizers, and latent-weight
//! histograms split by quantization destination.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{fuse, fuse_twn};
use crate::nn::{BlockWeights, Model};
use crate::quant::{approx_error, optimal_ternary_oracle, twn_quantize, TwnMode};

pub const HISTOGRAM_BINS: usize = 64;

/// Where a layer's ternary kernel comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TernarySource {
    /// Fused sign agreement of the two latent kernels.
    SttnFused,
    /// Hard threshold at `0.7 * mean|w|` (TWN layers, and float layers
    /// projected for comparison).
    TwnHeuristic,
}

/// Weights the TWN-heuristic error was measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwnInput {
    /// Same weights as the other columns.
    Own,
    /// The matching layer of a separately trained float model.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub to_neg: usize,
    pub to_zero: usize,
    pub to_pos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub n: usize,
    pub source: TernarySource,
    /// Fraction of zeros in the ternary kernel.
    pub sparsity: f64,
    /// `|(w1 + w2) - 2 alpha T|^2` for STTN layers.
    pub sttn_error: Option<f64>,
    pub twn_heuristic_error: f64,
    pub twn_input: TwnInput,
    /// Lowest `|w - alpha t|^2` over all ternary `t` and `alpha >= 0`, on
    /// the layer's own weights.
    pub oracle_error: f64,
    /// Bins over `[min, max]` of the layer's own weights (`w1 + w2` for
    /// STTN layers), with counts of where each weight lands in the ternary
    /// kernel.
    pub histogram: Vec<HistogramBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub architecture: String,
    pub mode: String,
    pub layers: Vec<LayerReport>,
    pub total_sttn_error: Option<f64>,
    pub total_twn_heuristic_error: f64,
    pub total_oracle_error: f64,
    /// Count of adjacent layer pairs whose sparsity decreases.
    pub sparsity_decreasing_steps: usize,
}

/// One CSV row per layer (histograms go to their own CSV).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub n: usize,
    pub source: TernarySource,
    pub sparsity: f64,
    pub sttn_error: Option<f64>,
    pub twn_heuristic_error: f64,
    pub twn_input: TwnInput,
    pub oracle_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub layer: String,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub to_neg: usize,
    pub to_zero: usize,
    pub to_pos: usize,
}

pub fn histogram(w: &[f64], t: &[i8], bins: usize) -> Vec<HistogramBin> {
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + width * b as f64,
            hi: if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 },
            count: 0,
            to_neg: 0,
            to_zero: 0,
            to_pos: 0,
        })
        .collect();
    for (&v, &d) in w.iter().zip(t) {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        let bin = &mut out[b];
        bin.count += 1;
        match d {
            -1 => bin.to_neg += 1,
            0 => bin.to_zero += 1,
            _ => bin.to_pos += 1,
        }
    }
    out
}

struct LayerInput<'a> {
    name: String,
    weights: &'a BlockWeights<f32>,
    reference: Option<Vec<f64>>,
}

fn analyze_layer(input: LayerInput) -> Result<LayerReport> {
    let LayerInput { name, weights, reference } = input;
    let (own, shape, t, source, sttn_error) = match weights {
        BlockWeights::Sttn(pair) => {
            let k = fuse(pair)?;
            let own: Vec<f64> = pair
                .w1()
                .data()
                .iter()
                .zip(pair.w2().data())
                .map(|(&a, &b)| a as f64 + b as f64)
                .collect();
            let err = approx_error(&own, k.scale as f64, &k.t)?;
            (own, k.shape, k.t, TernarySource::SttnFused, Some(err))
        }
        BlockWeights::Twn(w) | BlockWeights::Float(w) => {
            let k = fuse_twn(w)?;
            let own = w.data().iter().map(|&v| v as f64).collect();
            (own, k.shape, k.t, TernarySource::TwnHeuristic, None)
        }
    };
    let (twn_w, twn_input) = match reference {
        Some(r) => (r, TwnInput::Reference),
        None => (own.clone(), TwnInput::Own),
    };
    let twn = twn_quantize(&twn_w, TwnMode::Heuristic)?;
    let twn_heuristic_error = approx_error(&twn_w, twn.alpha, &twn.t)?;
    let oracle = optimal_ternary_oracle(&own)?;
    let oracle_error = approx_error(&own, oracle.alpha, &oracle.t)?;
    let zeros = t.iter().filter(|&&v| v == 0).count();
    Ok(LayerReport {
        n: own.len(),
        sparsity: zeros as f64 / t.len() as f64,
        histogram: histogram(&own, &t, HISTOGRAM_BINS),
        name,
        shape,
        source,
        sttn_error,
        twn_heuristic_error,
        twn_input,
        oracle_error,
    })
}

fn block_weights_f64(w: &BlockWeights<f32>) -> Vec<f64> {
    match w {
        BlockWeights::Float(t) | BlockWeights::Twn(t) => t.data().iter().map(|&v| v as f64).collect(),
        BlockWeights::Sttn(p) => p
            .w1()
            .data()
            .iter()
            .zip(p.w2().data())
            .map(|(&a, &b)| a as f64 + b as f64)
            .collect(),
    }
}

/// Analyze every block of `model`. With `reference`, the TWN-heuristic
/// error of each layer is measured on the same-named layer of that model.
pub fn analyze(model: &Model<f32>, reference: Option<&Model<f32>>) -> Result<AnalysisReport> {
    let refs: HashMap<String, Vec<f64>> = match reference {
        Some(r) => r
            .blocks()
            .into_iter()
            .map(|(name, b)| (name, block_weights_f64(&b.weights)))
            .collect(),
        None => HashMap::new(),
    };
    let inputs = model
        .blocks()
        .into_iter()
        .map(|(name, block)| {
            let reference = match reference {
                None => None,
                Some(_) => {
                    let r = refs
                        .get(&name)
                        .ok_or_else(|| Error::invalid("analyze", format!("reference has no layer {name}")))?;
                    if r.len() != block.kernel_shape().iter().product::<usize>() {
                        return Err(Error::shape(
                            "analyze",
                            format!("{name}: {} weights vs {} in the reference", block.kernel_shape().iter().product::<usize>(), r.len()),
                        ));
                    }
                    Some(r.clone())
                }
            };
            Ok(LayerInput {
                name,
                weights: &block.weights,
                reference,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = inputs.into_par_iter().map(analyze_layer).collect::<Result<Vec<_>>>()?;
    let total_sttn_error = layers
        .iter()
        .map(|l| l.sttn_error)
        .sum::<Option<f64>>()
        .filter(|_| !layers.is_empty());
    Ok(AnalysisReport {
        architecture: model.config.architecture.id().to_string(),
        mode: model.config.mode.id().to_string(),
        total_twn_heuristic_error: layers.iter().map(|l| l.twn_heuristic_error).sum(),
        total_oracle_error: layers.iter().map(|l| l.oracle_error).sum(),
        sparsity_decreasing_steps: layers.windows(2).filter(|p| p[1].sparsity < p[0].sparsity).count(),
        total_sttn_error,
        layers,
    })
}

impl AnalysisReport {
    pub fn layer_rows(&self) -> Vec<LayerRow> {
        self.layers
            .iter()
            .map(|l| LayerRow {
                name: l.name.clone(),
                n: l.n,
                source: l.source,
                sparsity: l.sparsity,
                sttn_error: l.sttn_error,
                twn_heuristic_error: l.twn_heuristic_error,
                twn_input: l.twn_input,
                oracle_error: l.oracle_error,
            })
            .collect()
    }

    pub fn histogram_rows(&self) -> Vec<HistogramRow> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.histogram.iter().enumerate().map(|(bin, b)| HistogramRow {
                    layer: l.name.clone(),
                    bin,
                    lo: b.lo,
                    hi: b.hi,
                    count: b.count,
                    to_neg: b.to_neg,
                    to_zero: b.to_zero,
                    to_pos: b.to_pos,
                })
            })
            .collect()
    }

    pub fn write_layers_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(out, &self.layer_rows())
    }

    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(out, &self.histogram_rows())
    }
}

fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{Architecture, ModelConfig, QuantMode};

    fn model(mode: QuantMode, seed: u64) -> Model<f32> {
        let mut cfg = ModelConfig::new(Architecture::LenetT, mode);
        cfg.width = 0.5;
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn histogram_counts() {
        let w = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let t = [-1, 0, 0, 0, 1];
        let h = histogram(&w, &t, 4);
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1, 1, 2]);
        assert_eq!(h[0].to_neg, 1);
        assert_eq!(h[3].to_pos, 1);
        assert_eq!(h[3].to_zero, 1);
        assert_eq!(h[3].hi, 1.0);
        let flat = histogram(&[2.0, 2.0], &[1, 1], 64);
        assert_eq!(flat[0].count, 2);
    }

    #[test]
    fn report_invariants() {
        let m = model(QuantMode::Sttn22, 1);
        let r = analyze(&m, None).unwrap();
        assert_eq!(r.layers.len(), 2);
        for l in &r.layers {
            assert!((0.0..=1.0).contains(&l.sparsity));
            assert_eq!(l.histogram.len(), HISTOGRAM_BINS);
            assert_eq!(l.histogram.iter().map(|b| b.count).sum::<usize>(), l.n);
            for b in &l.histogram {
                assert_eq!(b.to_neg + b.to_zero + b.to_pos, b.count);
            }
            assert!(l.oracle_error <= l.sttn_error.unwrap() * (1.0 + 1e-12));
            assert!(l.oracle_error <= l.twn_heuristic_error * (1.0 + 1e-12));
        }
        assert_eq!(r, analyze(&m, None).unwrap());
    }

    #[test]
    fn reference_is_matched_by_name() {
        let m = model(QuantMode::Sttn22, 1);
        let f = model(QuantMode::Float, 2);
        let r = analyze(&m, Some(&f)).unwrap();
        assert!(r.layers.iter().all(|l| l.twn_input == TwnInput::Reference));
        let own = analyze(&m, None).unwrap();
        assert_ne!(r.total_twn_heuristic_error, own.total_twn_heuristic_error);
        let mut cfg = f.config.clone();
        cfg.width = 1.0;
        let wide = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(analyze(&m, Some(&wide)).is_err());
    }

    #[test]
    fn float_and_twn_models_use_heuristic_projection() {
        for mode in [QuantMode::Float, QuantMode::TwnBaseline] {
            let r = analyze(&model(mode, 3), None).unwrap();
            assert!(r.total_sttn_error.is_none());
            assert!(r.layers.iter().all(|l| l.source == TernarySource::TwnHeuristic));
        }
    }

    #[test]
    fn csv_round_trips() {
        let r = analyze(&model(QuantMode::Sttn22, 4), None).unwrap();
        let mut buf = Vec::new();
        r.write_layers_csv(&mut buf).unwrap();
        let back: Vec<LayerRow> = csv::Reader::from_reader(buf.as_slice())
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .unwrap();
        assert_eq!(back, r.layer_rows());
        let mut buf = Vec::new();
        r.write_histogram_csv(&mut buf).unwrap();
        let back: Vec<HistogramRow> = csv::Reader::from_reader(buf.as_slice())
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .unwrap();
        assert_eq!(back, r.histogram_rows());
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<AnalysisReport>(&json).unwrap(), r);
    }
}
