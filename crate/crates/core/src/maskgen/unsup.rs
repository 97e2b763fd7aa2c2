use serde::{Deserialize, Serialize};

use super::superpixel::{build_superpixeler, SuperpixelConfig};
use super::{refine_with_superpixels, ClusterMask};
use crate::error::{Error, Result};
use crate::numerics::{build_optimizer, OptimizerConfig, ParamStore, Tape, Tensor, NORM_EPS};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnsupConfig {
    /// Initial class count M (width of the last conv layer).
    pub n_classes: usize,
    pub max_iters: usize,
    pub stop_clusters: usize,
    pub superpixel: SuperpixelConfig,
    /// Intensity multiplier applied to the [0, 1] image before superpixel clustering.
    pub superpixel_scale: f64,
    /// Hidden conv widths; the final layer always has `n_classes` channels.
    pub widths: Vec<usize>,
    pub lr: f64,
}

impl Default for UnsupConfig {
    fn default() -> Self {
        Self {
            n_classes: 32,
            max_iters: 60,
            stop_clusters: 4,
            superpixel: SuperpixelConfig::default(),
            superpixel_scale: 100.0,
            widths: vec![32, 32],
            lr: 0.1,
        }
    }
}

impl UnsupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stop_clusters == 0 || self.max_iters == 0 {
            return Err(Error::Config(
                "maskgen: stop_clusters and max_iters must be >= 1".into(),
            ));
        }
        if self.n_classes < self.stop_clusters {
            return Err(Error::Config(format!(
                "maskgen: n_classes ({}) must be >= stop_clusters ({})",
                self.n_classes, self.stop_clusters
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || !(self.lr > 0.0) {
            return Err(Error::Config(
                "maskgen: widths must be non-empty and positive, lr > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub loss: f64,
    /// Distinct labels of the raw argmax before refinement.
    pub distinct_before: usize,
    /// Distinct labels after superpixel refinement.
    pub distinct_count: usize,
}

#[derive(Clone, Debug)]
pub struct UnsupResult {
    pub mask: ClusterMask,
    pub trace: Vec<IterationRecord>,
}

impl UnsupResult {
    /// `iter,loss,distinct_count` rows with a header line.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iter,loss,distinct_count\n");
        for r in &self.trace {
            s.push_str(&format!("{},{},{}\n", r.iter, r.loss, r.distinct_count));
        }
        s
    }
}

fn argmax_channels(logits: &Tensor) -> Result<Vec<usize>> {
    let (m, h, w) = logits.dims3()?;
    let p = h * w;
    let d = logits.data();
    Ok((0..p)
        .map(|i| {
            let mut best = 0;
            for c in 1..m {
                if d[c * p + i] > d[best * p + i] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Trains a fresh clustering CNN on one normalized image and returns the
/// refined cluster mask together with the per-iteration trace.
pub fn train_unsupervised(
    image: &[f64],
    height: usize,
    width: usize,
    cfg: &UnsupConfig,
    seed: u64,
) -> Result<UnsupResult> {
    cfg.validate()?;
    if image.len() != height * width {
        return Err(Error::shape(
            "train_unsupervised",
            format!("{} values for a {height}x{width} image", image.len()),
        ));
    }
    let scaled: Vec<f64> = image.iter().map(|v| v * cfg.superpixel_scale).collect();
    let superpixels = build_superpixeler(&cfg.superpixel)?.segment(&scaled, height, width)?;

    let mut rng = seed::rng(seed);
    let mut params = ParamStore::new();
    let mut c_in = 1;
    let widths: Vec<usize> = cfg.widths.iter().copied().chain([cfg.n_classes]).collect();
    for (i, &c_out) in widths.iter().enumerate() {
        // only the centre tap is random, so the untrained net is a pointwise
        // function of intensity; spatial taps are learned from zero
        let std = (2.0 / c_in as f64).sqrt();
        let mut w = Tensor::zeros(&[c_out, c_in, 3, 3]);
        let centres = Tensor::randn(&[c_out * c_in], std, &mut rng);
        for (k, v) in centres.data().iter().enumerate() {
            w.data_mut()[k * 9 + 4] = *v;
        }
        params.push(format!("conv{i}.w"), w);
        params.push(format!("conv{i}.b"), Tensor::zeros(&[c_out]));
        params.push(format!("norm{i}.scale"), Tensor::full(&[c_out], 1.0));
        params.push(format!("norm{i}.shift"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
    let mut opt = build_optimizer(&OptimizerConfig::sgd(cfg.lr))?;
    let input = Tensor::new(vec![1, height, width], image.to_vec())?;

    let mut trace = Vec::new();
    let mut refined = None;
    for iter in 0..cfg.max_iters {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let mut x = tape.leaf(input.clone());
        for layer in 0..widths.len() {
            let v = &vars[4 * layer..4 * layer + 4];
            x = tape.conv2d(x, v[0], Some(v[1]), 1, 1)?;
            x = tape.instance_norm(x, NORM_EPS)?;
            x = tape.channel_affine(x, v[2], v[3])?;
            if layer + 1 < widths.len() {
                x = tape.relu(x);
            }
        }
        let raw = ClusterMask::new(height, width, argmax_channels(tape.value(x))?)?;
        let c_prime = refine_with_superpixels(&raw, &superpixels)?;
        let loss = tape.cross_entropy(x, c_prime.labels())?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                stage: "maskgen",
                step: iter,
                detail: format!("cross-entropy loss is {loss_value}"),
            });
        }
        trace.push(IterationRecord {
            iter,
            loss: loss_value,
            distinct_before: raw.distinct_count(),
            distinct_count: c_prime.distinct_count(),
        });
        let done = c_prime.distinct_count() <= cfg.stop_clusters;
        refined = Some(c_prime);
        if done {
            break;
        }
        let grads = tape.backward(loss)?;
        let grads = params.collect_grads(&grads, &vars);
        opt.step(&mut params, &grads).map_err(|e| Error::Divergence {
            stage: "maskgen",
            step: iter,
            detail: e.to_string(),
        })?;
    }
    Ok(UnsupResult {
        mask: refined.expect("max_iters >= 1"),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> UnsupConfig {
        UnsupConfig {
            n_classes: 8,
            widths: vec![8, 8],
            superpixel: SuperpixelConfig {
                n_segments: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn constant_image_collapses() {
        let r = train_unsupervised(&[0.5; 256], 16, 16, &UnsupConfig::default(), 1).unwrap();
        assert!(r.mask.distinct_count() <= 4, "{:?}", r.trace);
        assert!(r.trace.len() < 60, "{:?}", r.trace);
        assert!(r.trace.iter().all(|t| t.distinct_count <= t.distinct_before));
    }

    #[test]
    fn deterministic_and_bounded() {
        let img: Vec<f64> = (0..144).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let cfg = UnsupConfig {
            max_iters: 5,
            stop_clusters: 1,
            ..small_cfg()
        };
        let a = train_unsupervised(&img, 12, 12, &cfg, 3).unwrap();
        let b = train_unsupervised(&img, 12, 12, &cfg, 3).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.len() <= 5);
        assert!(a.trace_csv().starts_with("iter,loss,distinct_count\n"));
    }

    #[test]
    fn invalid_config() {
        let cfg = UnsupConfig {
            n_classes: 2,
            ..UnsupConfig::default()
        };
        assert!(train_unsupervised(&[0.0; 16], 4, 4, &cfg, 0).is_err());
    }
}
