//! `[CLS]` attention to image-resolution saliency.
//!
//! Heads are averaged as given (no re-normalization), the patch grid is
//! upsampled bilinearly with the half-pixel convention
//! (`src = (dst + 0.5) * in / out - 0.5`, clamped to the grid).

use thiserror::Error;

use crate::tensors::{AttentionStack, SaliencyMap, TensorError};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("target {target_h}x{target_w} is smaller than the {grid_h}x{grid_w} patch grid")]
    Shrink {
        grid_h: usize,
        grid_w: usize,
        target_h: usize,
        target_w: usize,
    },
    #[error("head index {index} out of range for {heads} heads")]
    HeadIndex { index: usize, heads: usize },
    #[error("empty head selection")]
    NoHeads,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Head-averaged attention on the patch grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, SaliencyError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "grid {rows}x{cols} with {} values",
                data.len()
            ))
            .into());
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }
}

/// Mean over the selected heads (all heads when `heads` is `None`).
pub fn average_heads(
    attn: &AttentionStack,
    heads: Option<&[usize]>,
) -> Result<PatchGrid, SaliencyError> {
    let all: Vec<usize>;
    let selected = match heads {
        Some(h) => h,
        None => {
            all = (0..attn.heads()).collect();
            &all
        }
    };
    if selected.is_empty() {
        return Err(SaliencyError::NoHeads);
    }
    if let Some(&bad) = selected.iter().find(|&&h| h >= attn.heads()) {
        return Err(SaliencyError::HeadIndex {
            index: bad,
            heads: attn.heads(),
        });
    }
    let cells = attn.grid_h() * attn.grid_w();
    let mut acc = vec![0f64; cells];
    for &h in selected {
        for (a, &v) in acc.iter_mut().zip(attn.head(h)) {
            *a += f64::from(v);
        }
    }
    let n = selected.len() as f64;
    let data = acc.into_iter().map(|s| (s / n) as f32).collect();
    PatchGrid::new(attn.grid_h(), attn.grid_w(), data)
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear enlargement of a patch grid to `target_h x target_w`.
pub fn upsample_bilinear(
    grid: &PatchGrid,
    target_h: usize,
    target_w: usize,
) -> Result<SaliencyMap, SaliencyError> {
    if target_h < grid.rows || target_w < grid.cols {
        return Err(SaliencyError::Shrink {
            grid_h: grid.rows,
            grid_w: grid.cols,
            target_h,
            target_w,
        });
    }
    let cols: Vec<_> = (0..target_w)
        .map(|x| source_coord(x, grid.cols, target_w))
        .collect();
    let mut out = Vec::with_capacity(target_h * target_w);
    for y in 0..target_h {
        let (y0, y1, fy) = source_coord(y, grid.rows, target_h);
        for &(x0, x1, fx) in &cols {
            let v00 = f64::from(grid.get(y0, x0));
            let v01 = f64::from(grid.get(y0, x1));
            let v10 = f64::from(grid.get(y1, x0));
            let v11 = f64::from(grid.get(y1, x1));
            let top = v00 * (1.0 - fx) + v01 * fx;
            let bottom = v10 * (1.0 - fx) + v11 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(SaliencyMap::new(target_h, target_w, out)?)
}

/// Head average followed by bilinear upsampling to image resolution.
pub fn compute_saliency(
    attn: &AttentionStack,
    target_h: usize,
    target_w: usize,
    heads: Option<&[usize]>,
) -> Result<SaliencyMap, SaliencyError> {
    let grid = average_heads(attn, heads)?;
    upsample_bilinear(&grid, target_h, target_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_head_is_identity() {
        let data = vec![0.1, 0.2, 0.3, 0.4];
        let attn = AttentionStack::new(1, 2, 2, data.clone()).unwrap();
        assert_eq!(average_heads(&attn, None).unwrap().data, data);
    }

    #[test]
    fn two_constant_heads_average() {
        let mut data = vec![0.2f32; 4];
        data.extend(vec![0.6f32; 4]);
        let attn = AttentionStack::new(2, 2, 2, data).unwrap();
        let g = average_heads(&attn, None).unwrap();
        assert!(g.data.iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn three_heads_match_scalar_loop() {
        let vals: Vec<f32> = (0..12).map(|i| ((i * 37 + 11) % 17) as f32 / 17.0 + 0.01).collect();
        let attn = AttentionStack::new(3, 2, 2, vals.clone()).unwrap();
        let g = average_heads(&attn, None).unwrap();
        for cell in 0..4 {
            let mut s = 0.0f64;
            for h in 0..3 {
                s += vals[h * 4 + cell] as f64;
            }
            assert!((g.data[cell] as f64 - s / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_subset() {
        let attn = AttentionStack::new(2, 1, 2, vec![1.0, 1.0, 3.0, 5.0]).unwrap();
        assert_eq!(average_heads(&attn, Some(&[1])).unwrap().data, vec![3.0, 5.0]);
        assert!(matches!(
            average_heads(&attn, Some(&[2])),
            Err(SaliencyError::HeadIndex { .. })
        ));
        assert!(matches!(
            average_heads(&attn, Some(&[])),
            Err(SaliencyError::NoHeads)
        ));
    }

    #[test]
    fn upsample_hand_evaluated_row() {
        let g = PatchGrid::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = upsample_bilinear(&g, 2, 4).unwrap();
        for y in 0..2 {
            let row: Vec<f32> = (0..4).map(|x| s.get(y, x)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn degenerate_grid_and_constant() {
        let g = PatchGrid::new(1, 1, vec![0.7]).unwrap();
        let s = upsample_bilinear(&g, 5, 3).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.7));
        let g = PatchGrid::new(3, 2, vec![0.25; 6]).unwrap();
        let s = upsample_bilinear(&g, 7, 9).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn shrinking_rejected() {
        let g = PatchGrid::new(4, 4, vec![1.0; 16]).unwrap();
        assert!(matches!(
            upsample_bilinear(&g, 3, 8),
            Err(SaliencyError::Shrink { .. })
        ));
    }

    #[test]
    fn hot_cell_argmax_stays_in_block() {
        for hot in 0..16 {
            let mut data = vec![1e-3f32; 16];
            data[hot] = 1.0;
            let attn = AttentionStack::new(1, 4, 4, data).unwrap();
            let s = compute_saliency(&attn, 32, 32, None).unwrap();
            let (mut best, mut best_v) = (0, f32::MIN);
            for (i, &v) in s.data().iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            let (y, x) = (best / 32, best % 32);
            assert_eq!((y / 8, x / 8), (hot / 4, hot % 4));
        }
    }

    #[test]
    fn composition_is_definitional() {
        let attn = AttentionStack::new(2, 3, 3, (1..=18).map(|v| v as f32).collect()).unwrap();
        let direct = compute_saliency(&attn, 10, 7, None).unwrap();
        let staged = upsample_bilinear(&average_heads(&attn, None).unwrap(), 10, 7).unwrap();
        let bits = |s: &SaliencyMap| s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&direct), bits(&staged));
    }

    proptest! {
        #[test]
        fn output_within_grid_range(
            rows in 1usize..6, cols in 1usize..6, up_h in 0usize..20, up_w in 0usize..20,
            vals in proptest::collection::vec(0.0f32..10.0, 36),
        ) {
            let data = vals[..rows * cols].to_vec();
            let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let g = PatchGrid::new(rows, cols, data).unwrap();
            let s = upsample_bilinear(&g, rows + up_h, cols + up_w).unwrap();
            for &v in s.data() {
                prop_assert!(v >= lo && v <= hi);
            }
        }

        #[test]
        fn head_scaling_scales_map(
            vals in proptest::collection::vec(0.01f32..1.0, 8),
            c in 0.5f32..4.0,
        ) {
            let attn = AttentionStack::new(2, 2, 2, vals.clone()).unwrap();
            let scaled = AttentionStack::new(2, 2, 2, vals.iter().map(|v| v * c).collect()).unwrap();
            let a = compute_saliency(&attn, 6, 6, None).unwrap();
            let b = compute_saliency(&scaled, 6, 6, None).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x * c - y).abs() <= 1e-5 * (1.0 + y.abs()));
            }
        }
    }
}
