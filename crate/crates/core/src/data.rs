//! Synthetic two-modality data and its on-disk format.
//!
//! Both modalities observe the same latent semantic variable `s`, drawn from
//! one shared Gaussian mixture, through different random maps:
//!
//! ```text
//! s ~ sum_c w_c N(mu_c, cluster_std^2 I),   w_c proportional to weight_ratio^c
//! a = map_a(s) + N(0, noise_std^2 I)
//! b = map_b(s) + N(0, noise_std^2 I)
//! ```
//!
//! A pair shares one draw of `s`; unpaired items draw `s` independently per
//! modality.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Random map from semantic space into a modality's input space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// `x = s`. Requires the modality width to equal `semantic_dim`.
    Identity,
    /// `x = W s + o`.
    Linear,
    /// `x = tanh(W s) + o`.
    TanhWarped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub semantic_dim: usize,
    pub clusters: usize,
    /// Ratio between consecutive mixture weights; 1 gives equal weights.
    pub weight_ratio: f64,
    /// Std of the cluster centers around the origin.
    pub center_scale: f64,
    /// Within-cluster std.
    pub cluster_std: f64,
    pub dim_a: usize,
    pub dim_b: usize,
    pub map_a: MapKind,
    pub map_b: MapKind,
    pub noise_std: f64,
    pub n_pairs: usize,
    pub m_a: usize,
    pub m_b: usize,
    pub test_pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            semantic_dim: 8,
            clusters: 8,
            weight_ratio: 1.0,
            center_scale: 1.0,
            cluster_std: 0.5,
            dim_a: 24,
            dim_b: 32,
            map_a: MapKind::Linear,
            map_b: MapKind::TanhWarped,
            noise_std: 0.3,
            n_pairs: 100,
            m_a: 900,
            m_b: 900,
            test_pairs: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.semantic_dim == 0 || self.dim_a == 0 || self.dim_b == 0 {
            return bad("data dimensions must be positive");
        }
        if self.clusters == 0 {
            return bad("need at least one cluster");
        }
        for (name, x) in [
            ("noise_std", self.noise_std),
            ("cluster_std", self.cluster_std),
            ("center_scale", self.center_scale),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !(self.weight_ratio > 0.0 && self.weight_ratio.is_finite()) {
            return bad("weight_ratio must be positive");
        }
        for (kind, dim) in [(self.map_a, self.dim_a), (self.map_b, self.dim_b)] {
            if kind == MapKind::Identity && dim != self.semantic_dim {
                return bad("identity map requires modality width == semantic_dim");
            }
        }
        Ok(())
    }
}

/// Generated or loaded dataset. Cluster labels are kept for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub paired_a: Matrix,
    pub paired_b: Matrix,
    pub paired_labels: Vec<u32>,
    pub unpaired_a: Matrix,
    pub unpaired_a_labels: Vec<u32>,
    pub unpaired_b: Matrix,
    pub unpaired_b_labels: Vec<u32>,
    pub test_a: Matrix,
    pub test_b: Matrix,
    pub test_labels: Vec<u32>,
}

impl Dataset {
    pub fn n_pairs(&self) -> usize {
        self.paired_a.rows()
    }

    pub fn widths(&self) -> (usize, usize) {
        (self.paired_a.cols(), self.paired_b.cols())
    }

    pub fn is_empty(&self) -> bool {
        self.paired_a.rows() == 0 && self.unpaired_a.rows() == 0 && self.unpaired_b.rows() == 0
    }

    /// Same dataset with the unpaired pools emptied.
    pub fn without_unpaired(&self) -> Dataset {
        Dataset {
            unpaired_a: Matrix::zeros(0, self.unpaired_a.cols()),
            unpaired_a_labels: vec![],
            unpaired_b: Matrix::zeros(0, self.unpaired_b.cols()),
            unpaired_b_labels: vec![],
            ..self.clone()
        }
    }
}

struct SemanticMap {
    kind: MapKind,
    weight: Matrix,
    offset: Vec<f64>,
}

impl SemanticMap {
    fn sample(kind: MapKind, sdim: usize, out: usize, rng: &mut Rng) -> Self {
        let gain = 1.0 / (sdim as f64).sqrt();
        let (weight, offset) = match kind {
            MapKind::Identity => (Matrix::identity(sdim), vec![0.0; out]),
            _ => (
                Matrix::from_fn(sdim, out, |_, _| gain * rng.normal()),
                (0..out).map(|_| rng.normal()).collect(),
            ),
        };
        Self {
            kind,
            weight,
            offset,
        }
    }

    fn apply(&self, s: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let z: f64 = s
                .iter()
                .enumerate()
                .map(|(k, sk)| sk * self.weight[(k, j)])
                .sum();
            *o = match self.kind {
                MapKind::Identity | MapKind::Linear => z,
                MapKind::TanhWarped => z.tanh(),
            } + self.offset[j];
        }
    }
}

struct Mixture {
    weights: Vec<f64>,
    centers: Matrix,
    std: f64,
}

impl Mixture {
    fn draw(&self, rng: &mut Rng) -> (u32, Vec<f64>) {
        let c = rng.categorical(&self.weights);
        let s = self
            .centers
            .row(c)
            .iter()
            .map(|m| m + self.std * rng.normal())
            .collect();
        (c as u32, s)
    }
}

fn observe(map: &SemanticMap, s: &[f64], noise: f64, out: &mut [f64], rng: &mut Rng) {
    map.apply(s, out);
    if noise > 0.0 {
        out.iter_mut().for_each(|x| *x += noise * rng.normal());
    }
}

fn paired_split(
    n: usize,
    mix: &Mixture,
    maps: (&SemanticMap, &SemanticMap),
    spec: &SyntheticSpec,
    rng: &mut Rng,
) -> (Matrix, Matrix, Vec<u32>) {
    let mut a = Matrix::zeros(n, spec.dim_a);
    let mut b = Matrix::zeros(n, spec.dim_b);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (c, s) = mix.draw(rng);
        observe(maps.0, &s, spec.noise_std, a.row_mut(i), rng);
        observe(maps.1, &s, spec.noise_std, b.row_mut(i), rng);
        labels.push(c);
    }
    (a, b, labels)
}

fn unpaired_split(
    m: usize,
    dim: usize,
    mix: &Mixture,
    map: &SemanticMap,
    noise: f64,
    rng: &mut Rng,
) -> (Matrix, Vec<u32>) {
    let mut x = Matrix::zeros(m, dim);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let (c, s) = mix.draw(rng);
        observe(map, &s, noise, x.row_mut(i), rng);
        labels.push(c);
    }
    (x, labels)
}

/// Draws a dataset. Maps, mixture and each split come from separate
/// sub-seeds, so changing a count does not reshuffle the other splits.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut crng = root.derive(0);
    let centers = Matrix::from_fn(spec.clusters, spec.semantic_dim, |_, _| {
        spec.center_scale * crng.normal()
    });
    let mix = Mixture {
        weights: (0..spec.clusters)
            .map(|c| spec.weight_ratio.powi(c as i32))
            .collect(),
        centers,
        std: spec.cluster_std,
    };
    let map_a = SemanticMap::sample(
        spec.map_a,
        spec.semantic_dim,
        spec.dim_a,
        &mut root.derive(1),
    );
    let map_b = SemanticMap::sample(
        spec.map_b,
        spec.semantic_dim,
        spec.dim_b,
        &mut root.derive(2),
    );

    let (paired_a, paired_b, paired_labels) = paired_split(
        spec.n_pairs,
        &mix,
        (&map_a, &map_b),
        spec,
        &mut root.derive(3),
    );
    let (unpaired_a, unpaired_a_labels) = unpaired_split(
        spec.m_a,
        spec.dim_a,
        &mix,
        &map_a,
        spec.noise_std,
        &mut root.derive(4),
    );
    let (unpaired_b, unpaired_b_labels) = unpaired_split(
        spec.m_b,
        spec.dim_b,
        &mix,
        &map_b,
        spec.noise_std,
        &mut root.derive(5),
    );
    let (test_a, test_b, test_labels) = paired_split(
        spec.test_pairs,
        &mix,
        (&map_a, &map_b),
        spec,
        &mut root.derive(6),
    );

    Ok(Dataset {
        spec: spec.clone(),
        paired_a,
        paired_b,
        paired_labels,
        unpaired_a,
        unpaired_a_labels,
        unpaired_b,
        unpaired_b_labels,
        test_a,
        test_b,
        test_labels,
    })
}

pub const MAGIC: &[u8; 8] = b"SEMALIGN";
pub const FORMAT_VERSION: u32 = 1;

/// Path of the JSON sidecar written next to a dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    spec: &'a SyntheticSpec,
    splits: Vec<(&'static str, usize, usize)>,
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_labels<W: Write>(w: &mut W, labels: &[u32]) -> Result<()> {
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

/// Encodes `d` in the binary dataset format.
///
/// Layout, all integers little-endian: magic, `u32` version, `u64` length
/// and bytes of the JSON spec, then for each split a `u64` row count, `u64`
/// column count and the values column by column as `f64`, followed by the
/// label arrays as `u64` length plus `u32` entries.
pub fn encode<W: Write>(d: &Dataset, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let spec = serde_json::to_vec(&d.spec)?;
    w.write_all(&(spec.len() as u64).to_le_bytes())?;
    w.write_all(&spec)?;
    for m in [
        &d.paired_a,
        &d.paired_b,
        &d.unpaired_a,
        &d.unpaired_b,
        &d.test_a,
        &d.test_b,
    ] {
        write_matrix(&mut w, m)?;
    }
    for l in [
        &d.paired_labels,
        &d.unpaired_a_labels,
        &d.unpaired_b_labels,
        &d.test_labels,
    ] {
        write_labels(&mut w, l)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the dataset file and its `<path>.json` sidecar.
pub fn save(d: &Dataset, path: &Path) -> Result<()> {
    encode(d, BufWriter::new(fs::File::create(path)?))?;
    let splits = vec![
        ("paired_a", d.paired_a.rows(), d.paired_a.cols()),
        ("paired_b", d.paired_b.rows(), d.paired_b.cols()),
        ("unpaired_a", d.unpaired_a.rows(), d.unpaired_a.cols()),
        ("unpaired_b", d.unpaired_b.rows(), d.unpaired_b.cols()),
        ("test_a", d.test_a.rows(), d.test_a.cols()),
        ("test_b", d.test_b.rows(), d.test_b.cols()),
    ];
    let side = Sidecar {
        format_version: FORMAT_VERSION,
        spec: &d.spec,
        splits,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "unexpected end of file reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, what: &str, elem: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem as u64) > left {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!("{what} of {n} entries exceeds the {left} remaining bytes"),
            });
        }
        Ok(n as usize)
    }

    fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let rows = self.len(what, 0)?;
        let cols = self.len(what, 0)?;
        let total = rows
            .checked_mul(cols)
            .ok_or_else(|| self.err(format!("{what}: size overflow")))?;
        let bytes = self.take(
            total
                .checked_mul(8)
                .ok_or_else(|| self.err("size overflow"))?,
            what,
        )?;
        let mut m = Matrix::zeros(rows, cols);
        for (k, chunk) in bytes.chunks_exact(8).enumerate() {
            m.data_mut()[(k % rows) * cols + k / rows] =
                f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(m)
    }

    fn labels(&mut self, what: &str) -> Result<Vec<u32>> {
        let n = self.len(what, 4)?;
        (0..n).map(|_| self.u32(what)).collect()
    }
}

/// Decodes a complete dataset from `buf`. Nothing is returned unless the
/// whole buffer parses.
pub fn decode(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a dataset file (bad magic)".into(),
        });
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let spec_len = c.len("spec", 1)?;
    let spec_at = c.pos;
    let spec: SyntheticSpec =
        serde_json::from_slice(c.take(spec_len, "spec")?).map_err(|e| Error::Parse {
            offset: spec_at as u64,
            message: format!("bad spec record: {e}"),
        })?;
    let paired_a = c.matrix("paired_a")?;
    let paired_b = c.matrix("paired_b")?;
    let unpaired_a = c.matrix("unpaired_a")?;
    let unpaired_b = c.matrix("unpaired_b")?;
    let test_a = c.matrix("test_a")?;
    let test_b = c.matrix("test_b")?;
    let paired_labels = c.labels("paired_labels")?;
    let unpaired_a_labels = c.labels("unpaired_a_labels")?;
    let unpaired_b_labels = c.labels("unpaired_b_labels")?;
    let test_labels = c.labels("test_labels")?;
    if c.pos != buf.len() {
        return Err(c.err(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let d = Dataset {
        spec,
        paired_a,
        paired_b,
        paired_labels,
        unpaired_a,
        unpaired_a_labels,
        unpaired_b,
        unpaired_b_labels,
        test_a,
        test_b,
        test_labels,
    };
    check_consistent(&d).map_err(|message| Error::Parse {
        offset: buf.len() as u64,
        message,
    })?;
    Ok(d)
}

fn check_consistent(d: &Dataset) -> std::result::Result<(), String> {
    let pairs = [
        ("paired", &d.paired_a, &d.paired_b, d.paired_labels.len()),
        ("test", &d.test_a, &d.test_b, d.test_labels.len()),
    ];
    for (name, a, b, labels) in pairs {
        if a.rows() != b.rows() || a.rows() != labels {
            return Err(format!("{name} split row counts disagree"));
        }
    }
    if d.unpaired_a.rows() != d.unpaired_a_labels.len()
        || d.unpaired_b.rows() != d.unpaired_b_labels.len()
    {
        return Err("unpaired label counts disagree".into());
    }
    let wa = [&d.paired_a, &d.unpaired_a, &d.test_a];
    let wb = [&d.paired_b, &d.unpaired_b, &d.test_b];
    if wa.iter().any(|m| m.cols() != d.spec.dim_a) || wb.iter().any(|m| m.cols() != d.spec.dim_b) {
        return Err("split widths disagree with the spec".into());
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_pairs: 7,
            m_a: 5,
            m_b: 3,
            test_pairs: 4,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let d = generate(&small()).unwrap();
        assert_eq!(d, generate(&small()).unwrap());
        assert_eq!(d.paired_a.shape(), (7, 24));
        assert_eq!(d.paired_b.shape(), (7, 32));
        assert_eq!(d.unpaired_a.shape(), (5, 24));
        assert_eq!(d.unpaired_b.shape(), (3, 32));
        assert_eq!(d.test_a.shape(), (4, 24));
        assert!(d.paired_a.all_finite() && d.test_b.all_finite());
    }

    #[test]
    fn identity_maps_without_noise_give_equal_modalities() {
        let spec = SyntheticSpec {
            dim_a: 8,
            dim_b: 8,
            map_a: MapKind::Identity,
            map_b: MapKind::Identity,
            noise_std: 0.0,
            ..small()
        };
        let d = generate(&spec).unwrap();
        assert_eq!(d.paired_a, d.paired_b);
        assert_eq!(d.test_a, d.test_b);
    }

    #[test]
    fn zero_pairs() {
        let d = generate(&SyntheticSpec {
            n_pairs: 0,
            ..small()
        })
        .unwrap();
        assert_eq!(d.n_pairs(), 0);
        assert_eq!(d.unpaired_a.rows(), 5);
        assert!(!d.is_empty());
    }

    #[test]
    fn unpaired_label_marginals_match() {
        let spec = SyntheticSpec {
            n_pairs: 0,
            m_a: 10_000,
            m_b: 10_000,
            test_pairs: 0,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let d = generate(&spec).unwrap();
        let freq = |labels: &[u32]| {
            let mut f = vec![0.0; spec.clusters];
            labels
                .iter()
                .for_each(|&l| f[l as usize] += 1.0 / labels.len() as f64);
            f
        };
        let (fa, fb) = (freq(&d.unpaired_a_labels), freq(&d.unpaired_b_labels));
        let tv: f64 = fa.iter().zip(&fb).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.03, "total variation {tv}");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let d = generate(&small()).unwrap();
        save(&d, &path).unwrap();
        assert_eq!(load(&path).unwrap(), d);
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["spec"]["n_pairs"], 7);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        encode(&generate(&small()).unwrap(), &mut buf).unwrap();
        for cut in [3, 10, 20, buf.len() / 2, buf.len() - 1] {
            match decode(&buf[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Parse { .. })));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut buf = Vec::new();
        encode(&generate(&small()).unwrap(), &mut buf).unwrap();
        buf[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode(&buf),
            Err(Error::UnsupportedVersion {
                found: 7,
                expected: 1
            })
        ));
        buf[0] = b'X';
        assert!(matches!(decode(&buf), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn rejects_bad_specs() {
        let s = SyntheticSpec {
            map_a: MapKind::Identity,
            ..SyntheticSpec::default()
        };
        assert!(generate(&s).is_err());
        let s = SyntheticSpec {
            noise_std: -1.0,
            ..SyntheticSpec::default()
        };
        assert!(generate(&s).is_err());
    }
}
