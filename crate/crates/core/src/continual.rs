//! Elastic weight consolidation: empirical Fisher diagonal, quadratic
//! anchor penalty and the combined training objective.

use std::path::Path;

use crate::adapter::{self, AdapterConfig, AdapterParams};
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::fixtures::FixtureSet;

#[derive(Debug, Clone, PartialEq)]
pub struct EwcConfig {
    pub lambda: f64,
    /// Use at most this many samples (in dataset order) for the Fisher estimate.
    pub fisher_samples: Option<usize>,
    /// Count the current-task cross-entropy twice, as in the literal
    /// `L_CE + (L_B + penalty)` composition.
    pub strict_eq11: bool,
}

pub const DEFAULT_LAMBDA: f64 = 100.0;

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            fisher_samples: None,
            strict_eq11: false,
        }
    }
}

impl EwcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.fisher_samples == Some(0) {
            return Err(Error::Config("fisher sample cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fisher diagonal and anchor parameters from a finished task.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherState {
    pub fisher_diag: Vec<f64>,
    pub anchor: Vec<f64>,
    pub task_id: u32,
    pub sample_count: u64,
}

impl FisherState {
    pub fn new(fisher_diag: Vec<f64>, anchor: Vec<f64>, task_id: u32, sample_count: u64) -> Result<Self> {
        if fisher_diag.len() != anchor.len() {
            return Err(Error::Shape(format!(
                "{} Fisher entries for {} anchor parameters",
                fisher_diag.len(),
                anchor.len()
            )));
        }
        if let Some(i) = fisher_diag.iter().position(|&f| !(f >= 0.0 && f.is_finite())) {
            return Err(Error::NonFinite(format!("Fisher entry {i} = {}", fisher_diag[i])));
        }
        if anchor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("anchor parameters".into()));
        }
        Ok(Self {
            fisher_diag,
            anchor,
            task_id,
            sample_count,
        })
    }

    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} parameters against a Fisher state of {}",
                theta.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// GAFI layout (little-endian):
    ///
    /// ```text
    /// "GAFI" | version u32 = 1 | count u64 | fisher f64 × count | anchor f64 × count
    /// task_id u32 | sample_count u64
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&GAFI_MAGIC);
        w.u32(GAFI_VERSION);
        w.u64(self.len() as u64);
        self.fisher_diag.iter().for_each(|&v| w.f64(v));
        self.anchor.iter().for_each(|&v| w.f64(v));
        w.u32(self.task_id);
        w.u64(self.sample_count);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(GAFI_MAGIC)?;
        r.version(GAFI_VERSION)?;
        let count = usize::try_from(r.u64()?)
            .map_err(|_| Error::DimensionOverflow("parameter count".into()))?;
        let payload = binio::checked_product(&[count, 16], "Fisher payload")?;
        if r.remaining() < payload {
            return Err(Error::Truncated {
                offset: bytes.len(),
                needed: payload + 12 - r.remaining(),
            });
        }
        let fisher = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let anchor = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let task_id = r.u32()?;
        let sample_count = r.u64()?;
        r.finish()?;
        Self::new(fisher, anchor, task_id, sample_count)
    }
}

pub const GAFI_MAGIC: [u8; 4] = *b"GAFI";
pub const GAFI_VERSION: u32 = 1;

pub fn save_fisher(state: &FisherState, path: &Path) -> Result<()> {
    binio::write_atomic(path, &state.to_bytes())
}

pub fn load_fisher(path: &Path) -> Result<FisherState> {
    FisherState::from_bytes(&binio::read_file(path)?)
}

/// Kahan-compensated running sums, one per coordinate.
struct CompensatedSum {
    sum: Vec<f64>,
    carry: Vec<f64>,
}

impl CompensatedSum {
    fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            carry: vec![0.0; len],
        }
    }

    fn add_squares(&mut self, values: &[f64]) {
        for ((s, c), &v) in self.sum.iter_mut().zip(&mut self.carry).zip(values) {
            let y = v * v - *c;
            let t = *s + y;
            *c = (t - *s) - y;
            *s = t;
        }
    }
}

/// Empirical Fisher diagonal: the mean over `count` samples of the squared
/// per-sample gradient returned by `grad_at`.
pub fn estimate_fisher_from<F>(anchor: &[f64], count: usize, task_id: u32, mut grad_at: F) -> Result<FisherState>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if count == 0 {
        return Err(Error::EmptyDataset("Fisher estimate needs at least one sample".into()));
    }
    let mut acc = CompensatedSum::new(anchor.len());
    for i in 0..count {
        let g = grad_at(i)?;
        if g.len() != anchor.len() {
            return Err(Error::Shape(format!(
                "sample {i}: {} gradient entries for {} parameters",
                g.len(),
                anchor.len()
            )));
        }
        acc.add_squares(&g);
    }
    let inv = 1.0 / count as f64;
    let fisher = acc.sum.into_iter().map(|s| s * inv).collect();
    FisherState::new(fisher, anchor.to_vec(), task_id, count as u64)
}

/// Empirical Fisher of the adapter at `params` on the true labels of `dataset`.
///
/// Each sample contributes the gradient of its own cross-entropy, computed
/// on a graph containing only that sample (its tokens in token mode, a
/// single node in sample mode).
pub fn estimate_fisher(
    params: &AdapterParams,
    config: &AdapterConfig,
    dataset: &FixtureSet,
    ewc: &EwcConfig,
    task_id: u32,
) -> Result<FisherState> {
    ewc.validate()?;
    let count = ewc
        .fisher_samples
        .map_or(dataset.len(), |cap| cap.min(dataset.len()));
    let samples = dataset.samples();
    estimate_fisher_from(&params.flatten(), count, task_id, |i| {
        adapter::loss_and_grad(params, config, &[&samples[i]]).map(|(_, g)| g.flatten())
    })
}

/// `(λ/2) Σ_i F_i (θ_i − θ*_i)²`.
pub fn ewc_penalty(theta: &[f64], fisher: &FisherState, lambda: f64) -> Result<f64> {
    fisher.check_len(theta)?;
    let quad: f64 = theta
        .iter()
        .zip(&fisher.anchor)
        .zip(&fisher.fisher_diag)
        .map(|((t, a), f)| f * (t - a) * (t - a))
        .sum();
    Ok(0.5 * lambda * quad)
}

/// `λ F ∘ (θ − θ*)`.
pub fn ewc_penalty_grad(theta: &[f64], fisher: &FisherState, lambda: f64) -> Result<Vec<f64>> {
    fisher.check_len(theta)?;
    Ok(theta
        .iter()
        .zip(&fisher.anchor)
        .zip(&fisher.fisher_diag)
        .map(|((t, a), f)| lambda * f * (t - a))
        .collect())
}

/// Cross-entropy plus penalty, counting the cross-entropy once.
pub fn total_loss(ce: f64, penalty: f64) -> Result<f64> {
    total_loss_with(ce, penalty, false)
}

/// As [`total_loss`]; with `strict_eq11` the cross-entropy is counted twice.
pub fn total_loss_with(ce: f64, penalty: f64, strict_eq11: bool) -> Result<f64> {
    if !ce.is_finite() || !penalty.is_finite() {
        return Err(Error::NonFinite(format!("ce = {ce}, penalty = {penalty}")));
    }
    Ok(ce_weight(strict_eq11) * ce + penalty)
}

/// Multiplier on the cross-entropy term of the objective.
pub fn ce_weight(strict_eq11: bool) -> f64 {
    if strict_eq11 {
        2.0
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;

    fn state(fisher: &[f64], anchor: &[f64]) -> FisherState {
        FisherState::new(fisher.to_vec(), anchor.to_vec(), 0, 1).unwrap()
    }

    #[test]
    fn penalty_examples() {
        let s = state(&[1.0, 1.0], &[0.0, 0.0]);
        assert_eq!(ewc_penalty(&[0.0, 0.0], &s, 2.0).unwrap(), 0.0);
        assert_eq!(ewc_penalty(&[3.0, -1.0], &s, 0.0).unwrap(), 0.0);
        assert_eq!(ewc_penalty(&[1.0, 1.0], &s, 2.0).unwrap(), 2.0);
        assert_eq!(ewc_penalty_grad(&[1.0, 1.0], &s, 2.0).unwrap(), vec![2.0, 2.0]);
        assert!(ewc_penalty(&[1.0], &s, 2.0).is_err());
    }

    #[test]
    fn penalty_gradient_is_exact() {
        let s = state(&[0.5, 2.0, 0.0, 1e-3], &[1.0, -1.0, 0.5, 2.0]);
        let theta = [1.3, -0.2, 4.0, 2.5];
        let g = ewc_penalty_grad(&theta, &s, 7.0).unwrap();
        // The coordinate with zero Fisher has zero gradient on both sides.
        let err = finite_diff_check(|p| ewc_penalty(p, &s, 7.0).unwrap(), &theta, &g, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, 0.0).unwrap(), 0.5);
        assert_eq!(total_loss(0.0, 2.0).unwrap(), 2.0);
        assert!((total_loss(0.4076, 2.0).unwrap() - 2.4076).abs() < 1e-15);
        assert_eq!(total_loss_with(0.5, 1.0, true).unwrap(), 2.0);
        assert!(total_loss(f64::NAN, 0.0).is_err());
        assert!(total_loss(0.0, f64::INFINITY).is_err());
    }

    /// One weight `w`, loss `−log σ(w x)` with label 1, so
    /// `dL/dw = x (σ(w x) − 1)` and the Fisher is its mean square.
    #[test]
    fn logistic_toy_matches_closed_form() {
        let xs = [0.5, -1.2, 2.0, 0.1, -0.7, 3.3];
        let w = 0.8;
        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let expected =
            xs.iter().map(|&x| (x * (sigmoid(w * x) - 1.0)).powi(2)).sum::<f64>() / xs.len() as f64;
        let f = estimate_fisher_from(&[w], xs.len(), 0, |i| {
            let x = xs[i];
            Ok(vec![x * (sigmoid(w * x) - 1.0)])
        })
        .unwrap();
        assert!((f.fisher_diag[0] - expected).abs() < 1e-12);
        assert_eq!(f.sample_count, 6);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            estimate_fisher_from(&[0.0], 0, 0, |_| Ok(vec![0.0])),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn rejects_negative_fisher() {
        assert!(FisherState::new(vec![-1.0], vec![0.0], 0, 1).is_err());
        assert!(FisherState::new(vec![1.0], vec![0.0, 1.0], 0, 1).is_err());
    }

    #[test]
    fn gafi_round_trip_and_errors() {
        let s = FisherState::new(vec![0.25, 0.0, 3.5], vec![-1.0, 2.0, 1e-9], 7, 42).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(FisherState::from_bytes(&bytes).unwrap(), s);
        assert!(matches!(
            FisherState::from_bytes(&bytes[..bytes.len() - 20]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"GAFX");
        assert!(matches!(FisherState::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 3;
        assert!(matches!(FisherState::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn lambda_validation() {
        assert!(EwcConfig { lambda: -1.0, ..EwcConfig::default() }.validate().is_err());
        assert!(EwcConfig { fisher_samples: Some(0), ..EwcConfig::default() }.validate().is_err());
    }
}
