use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and temporal-window settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub feature_channels: usize,
    /// Number of 3×3 backbone conv layers; the first `log2(head_stride)` use stride 2.
    pub backbone_depth: usize,
    pub head_stride: usize,
    /// Supporting frames on each side of the reference frame.
    pub support_frames: usize,
    pub temporal_stride: usize,
    pub num_classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Output channels of the three embedding layers (1×1, 3×3, 1×1).
    pub embed_channels: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            feature_channels: 32,
            backbone_depth: 4,
            head_stride: 4,
            support_frames: 1,
            temporal_stride: 1,
            num_classes: 3,
            image_h: 64,
            image_w: 64,
            embed_channels: [16, 16, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_stride == 0 {
            return Err(Error::invalid("temporal_stride must be at least 1"));
        }
        if self.feature_channels == 0 || self.feature_channels % 2 != 0 {
            return Err(Error::invalid("feature_channels must be positive and even"));
        }
        if !self.head_stride.is_power_of_two() {
            return Err(Error::invalid("head_stride must be a power of two"));
        }
        if self.downsampling_layers() > self.backbone_depth || self.backbone_depth == 0 {
            return Err(Error::invalid(format!(
                "backbone_depth {} cannot reach head_stride {}",
                self.backbone_depth, self.head_stride
            )));
        }
        if self.image_h == 0
            || self.image_w == 0
            || self.image_h % self.head_stride != 0
            || self.image_w % self.head_stride != 0
        {
            return Err(Error::invalid("image dims must be positive multiples of head_stride"));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.embed_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("channel and class counts must be positive"));
        }
        Ok(())
    }

    pub fn downsampling_layers(&self) -> usize {
        self.head_stride.trailing_zeros() as usize
    }

    /// Feature grid `(h, w)` after the backbone.
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.image_h / self.head_stride, self.image_w / self.head_stride)
    }

    /// Frames in the temporal window, `2K + 1`.
    pub fn window(&self) -> usize {
        2 * self.support_frames + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_dims(), (16, 16));
        assert_eq!(c.window(), 3);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let bad = [
            ModelConfig { temporal_stride: 0, ..Default::default() },
            ModelConfig { feature_channels: 7, ..Default::default() },
            ModelConfig { head_stride: 3, ..Default::default() },
            ModelConfig { head_stride: 32, ..Default::default() },
            ModelConfig { image_h: 62, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
