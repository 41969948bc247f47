//! Synthetic instruction corpus with a local 2D image prior.
//!
//! Each image is generated in raster order: the first row and column are
//! drawn independently, and every interior patch is
//! `T * top + L * left + sigma * noise` for fixed `C x C` matrices `T`, `L`
//! (random orthogonal matrices scaled by `1/sqrt(2)`, drawn from
//! `process_seed`), so interior patches keep the boundary's variance.
//!
//! Text follows two toy grammars keyed by the instruction
//! `[task, k1, k2, k3]`: *copy* repeats the context run, *count* emits an
//! ascending run starting at `k1`.

use crate::error::{Error, Result};
use crate::seqcore::{
    DatasetInstance, InterleavedSequence, Metadata, PatchGrid, Segment, SpecialToken, TokenId,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grammar {
    Copy,
    Count,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub grammar: Grammar,
    pub instances: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub vocab_size: u32,
    pub sigma: f64,
    pub boundary_std: f64,
    pub images_min: usize,
    pub images_max: usize,
    /// Reuse one seed-fixed initial row and column for every image instead
    /// of drawing them per image.
    #[serde(default)]
    pub shared_boundary: bool,
    pub process_seed: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grammar: Grammar::Mixed,
            instances: 32,
            grid_height: 5,
            grid_width: 5,
            channels: 16,
            vocab_size: 32,
            sigma: 0.05,
            boundary_std: 0.5,
            images_min: 1,
            images_max: 3,
            shared_boundary: false,
            process_seed: 7,
            seed: 0,
        }
    }
}

/// Ordinary token ids reserved for the two task markers.
pub const TASK_COPY: TokenId = SpecialToken::COUNT as TokenId;
pub const TASK_COUNT: TokenId = TASK_COPY + 1;
const FIRST_CONTENT: TokenId = TASK_COUNT + 1;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_height == 0 || self.grid_width == 0 || self.channels == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if self.vocab_size < FIRST_CONTENT + 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves fewer than 4 content tokens",
                self.vocab_size
            )));
        }
        if self.images_min == 0 || self.images_min > self.images_max {
            return Err(Error::Config(format!(
                "image count range {}..={} is invalid",
                self.images_min, self.images_max
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite())
            || !(self.boundary_std > 0.0 && self.boundary_std.is_finite())
        {
            return Err(Error::Config(
                "sigma must be >= 0 and boundary_std > 0".into(),
            ));
        }
        Ok(())
    }

    fn content_tokens(&self) -> u32 {
        self.vocab_size - FIRST_CONTENT
    }
}

/// The fixed linear maps `(T, L)` of the image recurrence.
pub fn image_process(channels: usize, process_seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(process_seed);
    let t = orthogonal(channels, &mut rng) * FRAC_1_SQRT_2;
    let l = orthogonal(channels, &mut rng) * FRAC_1_SQRT_2;
    (t, l)
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    loop {
        let mut q = Array2::<f64>::zeros((n, n));
        let mut ok = true;
        for j in 0..n {
            let mut v: Array1<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            for k in 0..j {
                let qk = q.column(k);
                let proj = qk.dot(&v);
                v.scaled_add(-proj, &qk);
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).assign(&(v / norm));
        }
        if ok {
            return q;
        }
    }
}

fn draw_boundary(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = spec.grid_height + spec.grid_width - 1;
    Array2::from_shape_fn((n, spec.channels), |_| {
        let z: f64 = StandardNormal.sample(rng);
        spec.boundary_std * z
    })
}

/// Draw one image from the recurrence. `boundary` holds the first row
/// followed by the rest of the first column; `None` draws a fresh one.
pub fn sample_image(
    spec: &SynthSpec,
    t: &Array2<f64>,
    l: &Array2<f64>,
    boundary: Option<&Array2<f64>>,
    rng: &mut ChaCha8Rng,
) -> PatchGrid {
    let (h, w, c) = (spec.grid_height, spec.grid_width, spec.channels);
    let fresh;
    let boundary = match boundary {
        Some(b) => b,
        None => {
            fresh = draw_boundary(spec, rng);
            &fresh
        }
    };
    let mut m = Array2::<f64>::zeros((h * w, c));
    for r in 0..h {
        for col in 0..w {
            let i = r * w + col;
            let patch: Array1<f64> = if r == 0 {
                boundary.row(col).to_owned()
            } else if col == 0 {
                boundary.row(w + r - 1).to_owned()
            } else {
                let top = m.row(i - w);
                let left = m.row(i - 1);
                let mut p = t.dot(&top) + l.dot(&left);
                if spec.sigma > 0.0 {
                    for v in p.iter_mut() {
                        let e: f64 = StandardNormal.sample(rng);
                        *v += spec.sigma * e;
                    }
                }
                p
            };
            m.row_mut(i).assign(&patch);
        }
    }
    PatchGrid::from_matrix(h, w, m.view()).expect("finite recurrence output")
}

/// Largest deviation of an interior patch from `T * top + L * left`.
pub fn recurrence_residual(grid: &PatchGrid, t: &Array2<f64>, l: &Array2<f64>) -> f64 {
    let m = grid.to_matrix();
    let w = grid.width();
    let mut worst = 0.0f64;
    for r in 1..grid.height() {
        for c in 1..w {
            let i = r * w + c;
            let pred = t.dot(&m.row(i - w)) + l.dot(&m.row(i - 1));
            for (a, b) in pred.iter().zip(m.row(i)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

fn content(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> TokenId {
    FIRST_CONTENT + rng.random_range(0..spec.content_tokens())
}

/// Generate the corpus. Deterministic per `seed` and `process_seed`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<DatasetInstance>> {
    spec.validate()?;
    let (t, l) = image_process(spec.channels, spec.process_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared = spec.shared_boundary.then(|| draw_boundary(spec, &mut rng));
    let mut out = Vec::with_capacity(spec.instances);
    for i in 0..spec.instances {
        let grammar = match spec.grammar {
            Grammar::Mixed if i % 2 == 0 => Grammar::Copy,
            Grammar::Mixed => Grammar::Count,
            g => g,
        };
        let keys: Vec<TokenId> = (0..3).map(|_| content(spec, &mut rng)).collect();
        let task = if grammar == Grammar::Copy {
            TASK_COPY
        } else {
            TASK_COUNT
        };
        let instruction = [vec![task], keys.clone()].concat();
        let n_images = rng.random_range(spec.images_min..=spec.images_max);

        let (context, first_run) = match grammar {
            Grammar::Copy => {
                let len = rng.random_range(2..=5);
                let run: Vec<TokenId> = (0..len).map(|_| content(spec, &mut rng)).collect();
                (
                    InterleavedSequence::new(vec![Segment::Text(run.clone())])?,
                    run,
                )
            }
            _ => {
                let len = 2 + (keys[1] - FIRST_CONTENT) as usize % 4;
                let n = spec.content_tokens();
                let run = (0..len as u32)
                    .map(|j| FIRST_CONTENT + (keys[0] - FIRST_CONTENT + j) % n)
                    .collect();
                (InterleavedSequence::empty(), run)
            }
        };
        let mut segments = vec![Segment::Text(first_run)];
        for j in 0..n_images {
            if j > 0 {
                segments.push(Segment::Text(vec![keys[j % 3]]));
            }
            segments.push(Segment::Image(sample_image(
                spec,
                &t,
                &l,
                shared.as_ref(),
                &mut rng,
            )));
        }
        out.push(DatasetInstance {
            instruction,
            context,
            target: InterleavedSequence::new(segments)?,
            metadata: Metadata {
                source_id: format!("synth-{}-{i}", spec.seed),
                domain: Some(match grammar {
                    Grammar::Copy => "copy".into(),
                    _ => "count".into(),
                }),
                instruction_text: None,
            },
        });
    }
    Ok(out)
}
