use std::cmp::Ordering;

use super::conv::kernel_offsets;
use super::tensor::{canonical_cmp, Coord, Dims, SparseTensor};
use crate::error::{Error, Result};

/// Sparse max pooling over a single-channel score tensor.
///
/// Only active sites take part. A site survives when no active neighbour in its
/// `kernel_size` window scores higher; against neighbours that precede it in
/// canonical order it must score strictly higher, so an exact tie keeps only the
/// canonically-first site. Survivors are returned in canonical order.
pub fn sparse_max_pool(scores: &SparseTensor, kernel_size: usize) -> Result<Vec<Coord>> {
    if scores.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: scores.channels(),
        });
    }
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "max-pool kernel must be odd and positive, got {kernel_size}"
        )));
    }
    let offsets: Vec<Coord> = kernel_offsets(scores.dims(), kernel_size)
        .into_iter()
        .filter(|o| *o != [0, 0, 0])
        .collect();
    let values = scores.features();

    let keep = scores
        .coords()
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let s = values[*i];
            offsets.iter().all(|o| {
                let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                match scores.index_of(&q) {
                    None => true,
                    Some(j) => {
                        let n = values[j];
                        match canonical_cmp(&q, p) {
                            Ordering::Less => s > n,
                            _ => s >= n,
                        }
                    }
                }
            })
        })
        .map(|(_, p)| *p)
        .collect();
    Ok(keep)
}

/// Sparse height compression: drops `z` and sums the features of every site
/// sharing the same `(x, y)` column. Sums run in increasing `z`.
pub fn height_compress(t: &SparseTensor) -> Result<SparseTensor> {
    if t.dims() != Dims::Three {
        return Err(Error::DimMismatch {
            expected: 3,
            actual: t.dims().count(),
        });
    }
    let c = t.channels();
    let mut order: Vec<usize> = (0..t.len()).collect();
    // canonical is z-major; regroup by column keeping z ascending
    order.sort_by_key(|&i| {
        let p = t.coords()[i];
        (p[1], p[0], p[2])
    });

    let mut coords: Vec<Coord> = Vec::new();
    let mut features: Vec<f32> = Vec::new();
    for i in order {
        let p = t.coords()[i];
        let col = [p[0], p[1], 0];
        if coords.last() == Some(&col) {
            let start = features.len() - c;
            for (acc, v) in features[start..].iter_mut().zip(t.row(i)) {
                *acc += *v;
            }
        } else {
            coords.push(col);
            features.extend_from_slice(t.row(i));
        }
    }
    Ok(SparseTensor::from_canonical(t.layout().flattened(), coords, features, c))
}
