use crate::error::{Error, Result};
use crate::model::{is_adapter_param, VlgModel};
use crate::params::VisitParams;
use crate::seqcore::Example;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Parameters larger than this are checked on a random subset.
pub const FULL_CHECK_LIMIT: usize = 512;
pub const SUBSET_SIZE: usize = 128;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.params {
            w.serialize(p).map_err(|e| Error::Decode(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Decode(e.to_string()))
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Overwrite every adapter parameter with `U(-scale, scale)` so that all
/// adapter paths carry gradient.
pub fn randomize_adapters(model: &mut VlgModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut("", &mut |name, p| {
        if is_adapter_param(name) {
            p.value.mapv_inplace(|_| rng.random_range(-scale..scale));
        }
    });
}

fn set_scalar(model: &mut VlgModel, name: &str, idx: usize, value: f64) {
    model.visit_mut("", &mut |n, p| {
        if n == name {
            let cols = p.value.ncols();
            p.value[[idx / cols, idx % cols]] = value;
        }
    });
}

/// Compare analytic gradients of the evaluation-mode loss with central
/// differences on every trainable parameter (a seeded subset of entries for
/// parameters above [`FULL_CHECK_LIMIT`] scalars).
pub fn grad_check(
    model: &VlgModel,
    ex: &Example,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.example_grad(ex, None)?;
    let mut work = Vec::new();
    let mut ordinal = 0u64;
    let mut missing = None;
    model.visit("", &mut |name, p| {
        if p.frozen {
            return;
        }
        let Some(g) = grads.get(name) else {
            missing.get_or_insert(name.to_owned());
            return;
        };
        let total = p.len();
        let idx: Vec<usize> = if total > FULL_CHECK_LIMIT {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ordinal);
            let mut v = rand::seq::index::sample(&mut rng, total, SUBSET_SIZE).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..total).collect()
        };
        let cols = p.value.ncols();
        let analytic: Vec<f64> = idx.iter().map(|&i| g[[i / cols, i % cols]]).collect();
        let base: Vec<f64> = idx.iter().map(|&i| p.value[[i / cols, i % cols]]).collect();
        ordinal += 1;
        work.push((name.to_owned(), total, idx, analytic, base));
    });
    if let Some(name) = missing {
        return Err(Error::Numeric(format!(
            "no analytic gradient for trainable {name}"
        )));
    }
    if let Some((name, ..)) = work
        .iter()
        .find(|(_, _, _, a, _)| a.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric(format!(
            "non-finite analytic gradient in {name}"
        )));
    }

    let params = work
        .into_par_iter()
        .map(|(name, total, idx, analytic, base)| {
            let mut m = model.clone();
            let mut rel = 0.0f64;
            let mut abs = 0.0f64;
            for ((&i, &a), &w) in idx.iter().zip(&analytic).zip(&base) {
                set_scalar(&mut m, &name, i, w + GRAD_CHECK_STEP);
                let up = m.example_loss(ex)?.total;
                set_scalar(&mut m, &name, i, w - GRAD_CHECK_STEP);
                let down = m.example_loss(ex)?.total;
                set_scalar(&mut m, &name, i, w);
                let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
                rel = rel.max(relative_error(a, numeric));
                abs = abs.max((a - numeric).abs());
            }
            Ok(ParamCheck {
                name,
                checked: idx.len(),
                total,
                max_rel_err: rel,
                max_abs_err: abs,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (worst_param, max_rel_err) = params.iter().fold((String::new(), 0.0f64), |(n, e), p| {
        if p.max_rel_err > e || n.is_empty() {
            (p.name.clone(), p.max_rel_err)
        } else {
            (n, e)
        }
    });
    Ok(GradCheckReport {
        passed: max_rel_err <= tolerance,
        params,
        max_rel_err,
        worst_param,
        tolerance,
    })
}
