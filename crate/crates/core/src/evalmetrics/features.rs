use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Domain, ImageRecord};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{io_err, Error, Result};
use crate::nn::RoiSampling;
use crate::params::ParamSet;

/// Diagonal loading added to covariance estimates.
pub const COV_REGULARIZATION: f64 = 1e-6;

const MAGIC: &[u8; 8] = b"DAODFEAT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ImageLevel,
    InstanceLevel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub vectors: Vec<Vec<f64>>,
    pub pooling: Pooling,
    pub domain: Domain,
}

impl FeatureSample {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    fn matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if self.vectors.iter().any(|v| v.len() != d) {
            return Err(Error::DimensionMismatch("feature vectors differ in length".into()));
        }
        Ok(DMatrix::from_fn(self.vectors.len(), d, |i, j| self.vectors[i][j]))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::InvalidData(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_u64::<LittleEndian>(self.vectors.len() as u64).map_err(io)?;
        w.write_u64::<LittleEndian>(self.dim() as u64).map_err(io)?;
        w.write_u8(matches!(self.pooling, Pooling::InstanceLevel) as u8).map_err(io)?;
        w.write_u8(matches!(self.domain, Domain::Target) as u8).map_err(io)?;
        for v in self.vectors.iter().flatten() {
            w.write_f64::<LittleEndian>(*v).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::InvalidData(format!("feature file: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::InvalidData("not a feature file".into()));
        }
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let d = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let pooling = match r.read_u8().map_err(io)? {
            0 => Pooling::ImageLevel,
            _ => Pooling::InstanceLevel,
        };
        let domain = match r.read_u8().map_err(io)? {
            0 => Domain::Source,
            _ => Domain::Target,
        };
        let mut vectors = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = vec![0.0; d];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(io)?;
            vectors.push(v);
        }
        Ok(Self {
            vectors,
            pooling,
            domain,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn mean_and_cov(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mean = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += COV_REGULARIZATION;
    }
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature samples.
pub fn frechet_dissimilarity(a: &FeatureSample, b: &FeatureSample) -> Result<f64> {
    if a.vectors.len() < 2 || b.vectors.len() < 2 {
        return Err(Error::InvalidData("need at least two feature vectors per sample".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dimensions {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    let (ma, ca) = mean_and_cov(&a.matrix()?);
    let (mb, cb) = mean_and_cov(&b.matrix()?);
    let (ma, ca, mb, cb) = if a.vectors <= b.vectors { (ma, ca, mb, cb) } else { (mb, cb, ma, ca) };
    let ra = sqrt_psd(&ca);
    let inner = &ra * &cb * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d2 = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d2.max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaEmbedding {
    /// One row of `dims` coordinates per input vector, in input order.
    pub coordinates: Vec<Vec<f64>>,
    pub explained_variance_ratio: f64,
    /// Unit principal directions, one per output dimension.
    pub components: Vec<Vec<f64>>,
}

/// Principal-component projection of all vectors of `samples`, concatenated.
pub fn pca_embed(samples: &[FeatureSample], dims: usize) -> Result<PcaEmbedding> {
    let rows: Vec<&Vec<f64>> = samples.iter().flat_map(|s| &s.vectors).collect();
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch("feature vectors differ in length".into()));
    }
    if dims == 0 || rows.len() <= dims || d < dims {
        return Err(Error::RankDeficient(format!(
            "{} vectors of dimension {d} cannot give {dims} components",
            rows.len()
        )));
    }
    let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let mean = m.row_mean();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (rows.len() as f64 - 1.0);
    let e = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = e.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = e.eigenvalues[order[0]].max(0.0);
    let rank = e.eigenvalues.iter().filter(|v| **v > 1e-12 * top.max(1e-300)).count();
    if total <= 0.0 || rank < dims {
        return Err(Error::RankDeficient(format!("data has rank {rank}, {dims} components requested")));
    }
    let mut components = Vec::with_capacity(dims);
    for &k in &order[..dims] {
        let mut v: Vec<f64> = e.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
    }
    let explained = order[..dims].iter().map(|&k| e.eigenvalues[k].max(0.0)).sum::<f64>() / total;
    let coordinates = centered
        .row_iter()
        .map(|r| components.iter().map(|c| r.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(PcaEmbedding {
        coordinates,
        explained_variance_ratio: explained.clamp(0.0, 1.0),
        components,
    })
}

/// Pooled final-layer backbone features of `params` on each record.
///
/// Image level averages the whole map; instance level averages the
/// ROI-pooled map inside each annotated box.
pub fn extract_features(
    params: &ParamSet,
    config: &DetectorConfig,
    records: &[ImageRecord],
    pooling: Pooling,
    domain: Domain,
) -> Result<FeatureSample> {
    let det = Detector::new(config, params)?;
    let mut vectors = Vec::new();
    for r in records {
        let bb = det.backbone(&r.pixels)?;
        match pooling {
            Pooling::ImageLevel => vectors.push(bb.pooled()),
            Pooling::InstanceLevel => {
                let (h, w) = bb.feature_hw();
                let c = config.feature_channels();
                let bins = config.roi_pool_size * config.roi_pool_size;
                for a in r.annotations_or_empty() {
                    let s = RoiSampling::new(
                        &a.bbox,
                        1.0 / config.feature_stride as f64,
                        h,
                        w,
                        config.roi_pool_size,
                        config.roi_sampling_ratio,
                    );
                    let pooled = s.forward(bb.features(), c, h, w);
                    vectors.push(pooled.chunks(bins).map(|b| b.iter().sum::<f64>() / bins as f64).collect());
                }
            }
        }
    }
    Ok(FeatureSample {
        vectors,
        pooling,
        domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: Vec<Vec<f64>>) -> FeatureSample {
        FeatureSample {
            vectors: v,
            pooling: Pooling::ImageLevel,
            domain: Domain::Source,
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let h = 0.5f64.sqrt();
        let a = sample(vec![vec![-h], vec![h]]);
        let b = sample(vec![vec![3.0 - h], vec![3.0 + h]]);
        assert!((frechet_dissimilarity(&a, &b).unwrap() - 3.0).abs() < 1e-6);
        assert!(frechet_dissimilarity(&a, &a).unwrap() < 1e-6);
        assert_eq!(frechet_dissimilarity(&a, &b).unwrap(), frechet_dissimilarity(&b, &a).unwrap());
    }

    #[test]
    fn dimension_mismatch_errors() {
        let a = sample(vec![vec![0.0], vec![1.0]]);
        let b = sample(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(frechet_dissimilarity(&a, &b).is_err());
    }

    #[test]
    fn line_has_full_explained_variance() {
        let s = sample((0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect());
        let e = pca_embed(&[s.clone()], 1).unwrap();
        assert!((e.explained_variance_ratio - 1.0).abs() < 1e-12);
        assert!(pca_embed(&[s], 2).is_err());
    }

    #[test]
    fn file_round_trip() {
        let s = FeatureSample {
            vectors: vec![vec![1.5, -2.0], vec![0.1, 3.0]],
            pooling: Pooling::InstanceLevel,
            domain: Domain::Target,
        };
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(FeatureSample::read_from(&buf[..]).unwrap(), s);
    }
}
