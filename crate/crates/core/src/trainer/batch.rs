use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// One composed training batch. Row `i < n` of the paired blocks are aligned;
/// the unpaired blocks are drawn independently per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalBatch {
    pub paired_a: Matrix,
    pub paired_b: Matrix,
    pub unpaired_a: Matrix,
    pub unpaired_b: Matrix,
    /// Some block had to be drawn with replacement.
    pub with_replacement: bool,
}

impl MultimodalBatch {
    pub fn n_paired(&self) -> usize {
        self.paired_a.rows()
    }

    pub fn size(&self) -> usize {
        self.paired_a.rows() + self.unpaired_a.rows()
    }

    /// `paired || unpaired` for modality A.
    pub fn full_a(&self) -> Matrix {
        self.paired_a.vstack(&self.unpaired_a).expect("same width")
    }

    pub fn full_b(&self) -> Matrix {
        self.paired_b.vstack(&self.unpaired_b).expect("same width")
    }
}

/// Unpaired pool size `M` used by the batch rule: the larger of the two
/// modality pools.
pub fn unpaired_size(d: &Dataset) -> usize {
    d.unpaired_a.rows().max(d.unpaired_b.rows())
}

/// `n = floor(N / (M + N) * B)`, clamped to `[0, B]`.
pub fn paired_share(n_pairs: usize, m: usize, batch: usize) -> usize {
    if n_pairs + m == 0 {
        return 0;
    }
    // exact integer floor of N*B/(N+M)
    ((n_pairs as u128 * batch as u128) / (n_pairs + m) as u128).min(batch as u128) as usize
}

fn draw(rng: &mut Rng, pool: usize, k: usize, flag: &mut bool) -> Vec<usize> {
    if k <= pool {
        rng.sample_without_replacement(pool, k)
    } else {
        *flag = true;
        (0..k).map(|_| rng.below(pool)).collect()
    }
}

/// Samples one batch of `batch` rows per modality.
///
/// An empty unpaired pool falls back to that modality's side of the pairs,
/// which is drawn from the same marginal.
pub fn compose_batch(d: &Dataset, batch: usize, rng: &mut Rng) -> Result<MultimodalBatch> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if d.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot compose a batch from an empty dataset".into(),
        ));
    }
    let n_pairs = d.n_pairs();
    let n = paired_share(n_pairs, unpaired_size(d), batch);
    let mut flag = false;

    let idx = if n > 0 {
        draw(rng, n_pairs, n, &mut flag)
    } else {
        vec![]
    };
    let paired_a = d.paired_a.select_rows(&idx);
    let paired_b = d.paired_b.select_rows(&idx);

    let rest = batch - n;
    let mut side = |pool: &Matrix, fallback: &Matrix| -> Result<Matrix> {
        let src = if pool.rows() > 0 { pool } else { fallback };
        if rest == 0 {
            return Ok(Matrix::zeros(0, src.cols()));
        }
        if src.rows() == 0 {
            return Err(Error::InvalidConfig(
                "no rows available for an unpaired block".into(),
            ));
        }
        let idx = draw(rng, src.rows(), rest, &mut flag);
        Ok(src.select_rows(&idx))
    };
    let unpaired_a = side(&d.unpaired_a, &d.paired_a)?;
    let unpaired_b = side(&d.unpaired_b, &d.paired_b)?;
    if flag {
        log::debug!("batch of {batch} drawn with replacement");
    }
    Ok(MultimodalBatch {
        paired_a,
        paired_b,
        unpaired_a,
        unpaired_b,
        with_replacement: flag,
    })
}
