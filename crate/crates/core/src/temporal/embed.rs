//! Per-frame diffusion timestep embedding.

use super::TemporalError;
use crate::numerics::{NumericsError, Tensor, Var};

/// Sinusoid feature width (sine and cosine per frequency).
pub const TIME_FEATURES: usize = 32;

fn frequencies() -> Vec<f64> {
    let half = TIME_FEATURES / 2;
    (0..half).map(|k| 10000f64.powf(-(k as f64) / half as f64)).collect()
}

/// Sinusoid features `[L, TIME_FEATURES]`, divided by the norm of the
/// frequency vector so each row is 1-Lipschitz in `t`.
pub fn time_features(t: &[usize], max_t: usize) -> Result<Tensor, TemporalError> {
    if let Some(&bad) = t.iter().find(|&&x| x > max_t) {
        return Err(TemporalError::Invalid(format!("timestep {bad} outside 0..={max_t}")));
    }
    if t.is_empty() {
        return Err(TemporalError::Invalid("no timesteps".into()));
    }
    let w = frequencies();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        for &wk in &w {
            let (s, c) = (wk * ti as f64).sin_cos();
            out.push(s / norm);
            out.push(c / norm);
        }
    }
    Ok(Tensor::from_parts(vec![t.len(), TIME_FEATURES], out))
}

/// Two-layer projection of the sinusoid features, `[L, d]`.
pub fn timestep_embed<'g>(
    feats: Var<'g>,
    w1: Var<'g>,
    b1: Var<'g>,
    w2: Var<'g>,
    b2: Var<'g>,
) -> Result<Var<'g>, NumericsError> {
    feats.matmul(w1)?.add(b1)?.relu()?.matmul(w2)?.add(b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Graph, RngStream};

    fn embed(t: &[usize]) -> Tensor {
        let mut rng = RngStream::new(9);
        let g = Graph::new();
        let c = |t: Tensor| g.constant(t);
        timestep_embed(
            c(time_features(t, 1000).unwrap()),
            c(gaussian(&mut rng, &[TIME_FEATURES, 8])),
            c(gaussian(&mut rng, &[8])),
            c(gaussian(&mut rng, &[8, 8])),
            c(gaussian(&mut rng, &[8])),
        )
        .unwrap()
        .value()
    }

    #[test]
    fn endpoints_differ_and_constant_t_repeats() {
        let e = embed(&[0, 1000]);
        let diff: f64 = (0..8).map(|c| (e.get(&[0, c]) - e.get(&[1, c])).powi(2)).sum();
        assert!(diff > 0.0);
        let same = embed(&[250; 5]);
        for l in 1..5 {
            for c in 0..8 {
                assert_eq!(same.get(&[l, c]), same.get(&[0, c]));
            }
        }
        assert!(time_features(&[1001], 1000).is_err());
    }

    #[test]
    fn features_are_one_lipschitz_on_the_grid() {
        let grid: Vec<usize> = (0..=1000).collect();
        let f = time_features(&grid, 1000).unwrap();
        let row = |i: usize| &f.data()[i * TIME_FEATURES..][..TIME_FEATURES];
        for step in [1usize, 2, 7, 50, 333] {
            for i in (0..=1000 - step).step_by(3) {
                let d: f64 = row(i).iter().zip(row(i + step)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d <= step as f64 + 1e-12);
            }
        }
    }
}
