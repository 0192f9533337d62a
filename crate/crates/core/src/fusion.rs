//! Bayesian combination of a model probability map (prior) with an ancillary
//! categorical map (evidence).
//!
//! Evidence enters through a two-parameter Bernoulli sensor model
//! p(observation | true class); independent evidence layers multiply
//! likelihoods. The per-pixel kernel runs in f64; the raster surface stores
//! f32.

use serde::{Deserialize, Serialize};

use crate::raster::{Dtype, Raster, Samples};
use crate::{Error, Result};

/// Likelihood of the ancillary map reporting class 1, conditioned on the
/// true class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    pub p_obs1_given_palm: f64,
    pub p_obs1_given_not: f64,
}

impl SensorModel {
    pub fn new(p_obs1_given_palm: f64, p_obs1_given_not: f64) -> Result<Self> {
        for (name, p) in [
            ("p_obs1_given_palm", p_obs1_given_palm),
            ("p_obs1_given_not", p_obs1_given_not),
        ] {
            if !(0.0 < p && p < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie strictly in (0, 1), got {p}"
                )));
            }
        }
        Ok(SensorModel {
            p_obs1_given_palm,
            p_obs1_given_not,
        })
    }

    /// Equal rates are permitted but flagged: the evidence then carries no
    /// information and fusion returns the prior unchanged.
    pub fn is_informative(&self) -> bool {
        self.p_obs1_given_palm != self.p_obs1_given_not
    }

    /// (L1, L0) for one observed value.
    fn likelihood(&self, observed: u8) -> (f64, f64) {
        if observed == 1 {
            (self.p_obs1_given_palm, self.p_obs1_given_not)
        } else {
            (1.0 - self.p_obs1_given_palm, 1.0 - self.p_obs1_given_not)
        }
    }
}

/// How many evidence pixels feed one prior pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// The single co-located evidence pixel (default).
    Single,
    /// Every evidence pixel in the aligned `factor` x `factor` block, e.g.
    /// the 10x10 fine pixels under one coarse label.
    Block { factor: usize },
}

/// Scalar posterior kernel: prior odds updated by a product of independent
/// likelihood pairs (L1, L0). An empty or uninformative likelihood product
/// returns the prior exactly.
pub fn posterior(prior: f64, likelihoods: &[(f64, f64)]) -> f64 {
    let mut l1 = 1.0f64;
    let mut l0 = 1.0f64;
    for &(a, b) in likelihoods {
        l1 *= a;
        l0 *= b;
    }
    if l1 == l0 {
        return prior;
    }
    let num = prior * l1;
    num / (num + (1.0 - prior) * l0)
}

fn check_fusable(prior: &Raster, evidence: &Raster) -> Result<()> {
    if prior.dtype() != Dtype::F32 || prior.bands() != 1 {
        return Err(Error::InvalidArgument(
            "prior must be a single-band F32 raster".into(),
        ));
    }
    if evidence.dtype() != Dtype::U8 || evidence.bands() != 1 {
        return Err(Error::InvalidArgument(
            "evidence must be a single-band U8 raster".into(),
        ));
    }
    if !prior.aligned_with(evidence) {
        return Err(Error::Alignment(
            "prior and evidence must share dims and geotransform".into(),
        ));
    }
    if evidence.as_u8()?.iter().any(|&v| v > 1) {
        return Err(Error::Validation("evidence values must be in {0, 1}".into()));
    }
    if prior.as_f32()?.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Validation("prior probabilities must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Posterior map from one evidence layer.
pub fn fuse(
    prior: &Raster,
    evidence: &Raster,
    sensor: &SensorModel,
    neighborhood: Neighborhood,
) -> Result<Raster> {
    check_fusable(prior, evidence)?;
    let (h, w) = prior.dims();
    let pv = prior.as_f32()?;
    let ev = evidence.as_u8()?;
    let mut out = vec![0f32; h * w];
    match neighborhood {
        Neighborhood::Single => {
            for i in 0..h * w {
                let like = sensor.likelihood(ev[i]);
                out[i] = posterior(pv[i] as f64, &[like]) as f32;
            }
        }
        Neighborhood::Block { factor } => {
            if factor == 0 {
                return Err(Error::InvalidArgument("block factor must be >= 1".into()));
            }
            // All pixels of one aligned block share the same evidence set, so
            // the likelihood product is computed once per block.
            for by in (0..h).step_by(factor) {
                for bx in (0..w).step_by(factor) {
                    let y1 = (by + factor).min(h);
                    let x1 = (bx + factor).min(w);
                    let mut ones = 0i32;
                    let mut zeros = 0i32;
                    for y in by..y1 {
                        for x in bx..x1 {
                            if ev[y * w + x] == 1 {
                                ones += 1;
                            } else {
                                zeros += 1;
                            }
                        }
                    }
                    let l1 = sensor.p_obs1_given_palm.powi(ones)
                        * (1.0 - sensor.p_obs1_given_palm).powi(zeros);
                    let l0 = sensor.p_obs1_given_not.powi(ones)
                        * (1.0 - sensor.p_obs1_given_not).powi(zeros);
                    for y in by..y1 {
                        for x in bx..x1 {
                            out[y * w + x] =
                                posterior(pv[y * w + x] as f64, &[(l1, l0)]) as f32;
                        }
                    }
                }
            }
        }
    }
    Raster::new(
        prior.width(),
        prior.height(),
        1,
        prior.geotransform(),
        prior.nodata(),
        Samples::F32(out),
    )
}

/// Posterior map from several independent co-located evidence layers; the
/// joint likelihood is the product over layers.
pub fn fuse_many(prior: &Raster, layers: &[(&Raster, &SensorModel)]) -> Result<Raster> {
    for (evidence, _) in layers {
        check_fusable(prior, evidence)?;
    }
    let (h, w) = prior.dims();
    let pv = prior.as_f32()?;
    let mut out = vec![0f32; h * w];
    let mut likes = Vec::with_capacity(layers.len());
    for i in 0..h * w {
        likes.clear();
        for (evidence, sensor) in layers {
            likes.push(sensor.likelihood(evidence.as_u8()?[i]));
        }
        out[i] = posterior(pv[i] as f64, &likes) as f32;
    }
    Raster::new(
        prior.width(),
        prior.height(),
        1,
        prior.geotransform(),
        prior.nodata(),
        Samples::F32(out),
    )
}
