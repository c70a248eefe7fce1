use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::GaussianStats;
use crate::ndkernel::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianBlobs,
    Bars,
    Checker,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(Self::GaussianBlobs),
            "bars" => Ok(Self::Bars),
            "checker" => Ok(Self::Checker),
            other => Err(invalid(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Class templates plus isotropic Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Pixel noise standard deviation around each template.
    pub noise_std: f64,
    /// Blob width as a fraction of the image size (gaussian-blobs only).
    pub blob_width: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs,
            num_classes: 10,
            image_size: 16,
            channels: 1,
            noise_std: 0.1,
            blob_width: 0.15,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(invalid("dataset needs classes, a size and channels"));
        }
        if !(self.noise_std >= 0.0) || !(self.blob_width > 0.0) {
            return Err(invalid("need noise_std >= 0 and blob_width > 0"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Noise-free image of class `k`, values in `[-1, 1]`.
    pub fn template(&self, k: usize) -> Array {
        let n = self.image_size;
        let kk = self.num_classes as f64;
        let coord = |i: usize| (i as f64 + 0.5) / n as f64;
        let plane: Vec<f64> = match self.kind {
            DatasetKind::GaussianBlobs => {
                let angle = 2.0 * PI * k as f64 / kk;
                let (cx, cy) = (0.5 + 0.3 * angle.cos(), 0.5 + 0.3 * angle.sin());
                let w2 = 2.0 * self.blob_width * self.blob_width;
                (0..n * n)
                    .map(|p| {
                        let (x, y) = (coord(p % n), coord(p / n));
                        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                        2.0 * (-r2 / w2).exp() - 1.0
                    })
                    .collect()
            }
            DatasetKind::Bars => {
                // Even classes: vertical bars, odd: horizontal; position by k / 2.
                let slots = self.num_classes.div_ceil(2).max(1) as f64;
                let centre = ((k / 2) as f64 + 0.5) / slots;
                let half = 0.5 / slots;
                (0..n * n)
                    .map(|p| {
                        let v = if k % 2 == 0 { coord(p % n) } else { coord(p / n) };
                        if (v - centre).abs() <= half {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect()
            }
            DatasetKind::Checker => {
                let cell = 1 + k / 2;
                let phase = k % 2;
                (0..n * n)
                    .map(|p| {
                        let (x, y) = (p % n, p / n);
                        if (x / cell + y / cell + phase) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect()
            }
        };
        let data = (0..self.channels).flat_map(|_| plane.iter().copied()).collect();
        Array::new(self.image_shape().to_vec(), data).expect("template shape")
    }

    pub fn templates(&self) -> Vec<Array> {
        (0..self.num_classes).map(|k| self.template(k)).collect()
    }

    /// Mean and covariance of the balanced class mixture:
    /// `σ² I + (1/K) Σ_k (t_k - μ)(t_k - μ)ᵀ`, optionally projected.
    pub fn population_stats(&self, projection: Option<&Projection>) -> Result<GaussianStats> {
        let d = self.pixels();
        let templates = self.templates();
        let kk = templates.len() as f64;
        let mut mean = DVector::zeros(d);
        for t in &templates {
            mean += DVector::from_column_slice(t.data());
        }
        mean /= kk;
        let mut cov = DMatrix::identity(d, d) * self.noise_std.powi(2);
        for t in &templates {
            let c = DVector::from_column_slice(t.data()) - &mean;
            cov.syger(1.0 / kk, &c, &c, 1.0);
        }
        cov.fill_upper_triangle_with_lower_triangle();
        match projection {
            None => GaussianStats::new(mean, cov),
            Some(p) => {
                let m = p.matrix();
                if m.ncols() != d {
                    return Err(invalid(format!("projection expects {} pixels, images have {d}", m.ncols())));
                }
                let pc = m * cov * m.transpose();
                GaussianStats::new(m * mean, (&pc + pc.transpose()) * 0.5)
            }
        }
    }

    pub fn stream(&self) -> Result<DataStream> {
        self.validate()?;
        Ok(DataStream {
            templates: self.templates(),
            noise_std: self.noise_std,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            order: Vec::new(),
        })
    }
}

/// Endless reproducible `(image, label)` stream. Labels come in shuffled
/// blocks containing every class once, so any prefix of `j K` samples is
/// exactly balanced.
pub struct DataStream {
    templates: Vec<Array>,
    noise_std: f64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl DataStream {
    pub fn next_sample(&mut self) -> (Array, usize) {
        if self.order.is_empty() {
            self.order = (0..self.templates.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        let k = self.order.pop().expect("refilled above");
        let t = &self.templates[k];
        let noise = Array::randn(t.shape().to_vec(), &mut self.rng);
        let x = t.zip_map(&noise, |a, e| a + self.noise_std * e).expect("same shape");
        (x, k)
    }
}

impl Iterator for DataStream {
    type Item = (Array, usize);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_sample())
    }
}

/// Fixed linear map to a lower dimension with orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    matrix: DMatrix<f64>,
}

impl Projection {
    pub fn random(from: usize, to: usize, seed: u64) -> Result<Self> {
        if to == 0 || to > from {
            return Err(invalid(format!("cannot project {from} dims to {to}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array::randn([from, to], &mut rng);
        let q = DMatrix::from_row_slice(from, to, g.data()).qr().q();
        Ok(Self {
            matrix: q.transpose(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, x: &Array) -> Result<Array> {
        if x.len() != self.matrix.ncols() {
            return Err(invalid(format!(
                "projection expects {} values, got {}",
                self.matrix.ncols(),
                x.len()
            )));
        }
        let y = &self.matrix * DVector::from_column_slice(x.data());
        Ok(Array::from_vec(y.iter().copied().collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_deterministic_and_balanced() {
        let spec = DatasetSpec {
            num_classes: 4,
            image_size: 6,
            ..DatasetSpec::default()
        };
        let a: Vec<_> = spec.stream().unwrap().take(100).collect();
        let b: Vec<_> = spec.stream().unwrap().take(100).collect();
        for ((xa, la), (xb, lb)) in a.iter().zip(&b) {
            assert_eq!(la, lb);
            assert!(xa.bit_eq(xb));
        }
        let mut counts = [0; 4];
        for (_, l) in &a[..96] {
            counts[*l] += 1;
        }
        assert_eq!(counts, [24; 4]);
        assert!(a.iter().all(|(_, l)| *l < 4));
    }

    #[test]
    fn unknown_kind() {
        assert!("stripes".parse::<DatasetKind>().is_err());
        assert_eq!("bars".parse::<DatasetKind>().unwrap(), DatasetKind::Bars);
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"kind": "stripes"}"#).is_err());
    }

    #[test]
    fn templates_are_distinct_and_bounded() {
        for kind in [DatasetKind::GaussianBlobs, DatasetKind::Bars, DatasetKind::Checker] {
            let spec = DatasetSpec {
                kind,
                num_classes: 6,
                image_size: 8,
                ..DatasetSpec::default()
            };
            let ts = spec.templates();
            for i in 0..ts.len() {
                assert!(ts[i].data().iter().all(|v| (-1.0..=1.0).contains(v)));
                for j in 0..i {
                    assert!(ts[i].max_abs_diff(&ts[j]).unwrap() > 0.1, "{kind:?} {i} {j}");
                }
            }
        }
    }

    #[test]
    fn projection_has_orthonormal_rows() {
        let p = Projection::random(20, 5, 1).unwrap();
        let m = p.matrix();
        assert!((m * m.transpose() - DMatrix::identity(5, 5)).amax() < 1e-12);
        assert!(Projection::random(4, 5, 1).is_err());
    }
}
