//! Attention heatmaps: where the CLS token looks, rendered over the image.

use crate::vit::{AttentionStack, ModelError};

/// CLS-row attention over patch tokens for one layer, averaged across heads.
/// Returns grid² weights in patch-grid row-major order.
pub fn cls_attention_map(stack: &AttentionStack, layer: usize) -> Result<Vec<f64>, ModelError> {
    if layer >= stack.num_layers() {
        return Err(ModelError::LayerOutOfRange {
            layer,
            layers: stack.num_layers(),
        });
    }
    let n = stack.num_tokens();
    let heads = stack.layer(layer);
    let mut map = vec![0.0; n - 1];
    for head in heads {
        // Row 0 is the CLS query; skip its attention to itself (column 0).
        let row = &head.values()[0..n];
        for (m, &v) in map.iter_mut().zip(&row[1..]) {
            *m += v;
        }
    }
    for m in &mut map {
        *m /= heads.len() as f64;
    }
    Ok(map)
}

/// Nearest-neighbor upsample of a grid×grid map to out_size×out_size bytes,
/// min-max normalized to 0..=255. A constant map renders as all zeros.
pub fn render_heatmap(map: &[f64], grid: usize, out_size: usize) -> Vec<u8> {
    assert_eq!(map.len(), grid * grid, "map must be grid²");
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let cell = out_size / grid;
    let mut out = vec![0u8; out_size * out_size];
    if range <= 0.0 {
        return out;
    }
    for y in 0..out_size {
        for x in 0..out_size {
            let gy = (y / cell).min(grid - 1);
            let gx = (x / cell).min(grid - 1);
            let v = (map[gy * grid + gx] - min) / range;
            out[y * out_size + x] = (v * 255.0).round() as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use crate::vit::{forward, init_params, ViTConfig};

    #[test]
    fn uniform_attention_renders_constant_zero() {
        let map = vec![0.25; 16];
        let bytes = render_heatmap(&map, 4, 32);
        assert_eq!(bytes.len(), 32 * 32);
        assert!(bytes.iter().all(|&b| b == 0));
    }

    #[test]
    fn heatmap_spans_full_byte_range() {
        let mut map = vec![0.1; 4];
        map[3] = 0.9;
        let bytes = render_heatmap(&map, 2, 4);
        assert_eq!(bytes.iter().copied().min().unwrap(), 0);
        assert_eq!(bytes.iter().copied().max().unwrap(), 255);
        // Top-left 2×2 block comes from cell 0.
        assert_eq!(bytes[0], bytes[1]);
        assert_eq!(bytes[0], bytes[4]);
    }

    #[test]
    fn cls_map_has_grid_len_and_unit_scale() {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            num_classes: None,
            ..ViTConfig::default()
        };
        let params = init_params(&cfg, 4).unwrap();
        let image = Tensor::filled(cfg.image_shape(), 0.6);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &image, &params, &cfg, true).unwrap();
        let stack = out.attention.unwrap();
        let map = cls_attention_map(&stack, 1).unwrap();
        assert_eq!(map.len(), cfg.num_patches());
        assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(cls_attention_map(&stack, 2).is_err());
    }
}
