//! Tiny convolutional backbone: a stride-4 patch embedding followed by
//! one 3x3 stage per scale, halving resolution between scales. Each stage
//! output is a tap feeding the decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ParamSink, PatchEmbed};
use crate::tape::{Tape, Value};

pub const STRIDE: usize = 4;

pub struct Backbone {
    pub channels: usize,
    embed: PatchEmbed,
    stages: Vec<Conv2d>,
    downs: Vec<PatchEmbed>,
}

impl Backbone {
    pub fn new(channels: usize, scales: usize, rng: &mut ChaCha8Rng) -> Backbone {
        Backbone {
            channels,
            embed: PatchEmbed::new(STRIDE, 3, channels, rng),
            stages: (0..scales).map(|_| Conv2d::new(3, channels, channels, rng)).collect(),
            downs: (0..scales.saturating_sub(1))
                .map(|_| PatchEmbed::new(2, channels, channels, rng))
                .collect(),
        }
    }

    /// Feature size of every scale tap for an `image_h x image_w` input.
    pub fn feature_dims(image_h: usize, image_w: usize, scales: usize) -> Result<Vec<(usize, usize)>> {
        let mut dims = Vec::with_capacity(scales);
        let (mut h, mut w) = (image_h, image_w);
        for i in 0..=scales.saturating_sub(1) {
            let div = if i == 0 { STRIDE } else { 2 };
            if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
                return Err(Error::Config(format!(
                    "image {image_h}x{image_w} does not divide into {scales} scales"
                )));
            }
            h /= div;
            w /= div;
            dims.push((h, w));
        }
        Ok(dims)
    }

    /// One tap per scale, coarsening left to right.
    pub fn forward(&self, tape: &mut Tape, images: Value) -> Result<Vec<Value>> {
        let embedded = self.embed.forward(tape, images)?;
        let mut x = tape.gelu(embedded);
        let mut taps = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let down = self.downs[i - 1].forward(tape, x)?;
                x = tape.gelu(down);
            }
            let conv = stage.forward(tape, x)?;
            taps.push(tape.gelu(conv));
        }
        Ok(taps)
    }

    pub fn collect(&self, sink: &mut ParamSink) {
        self.embed.collect("backbone.embed", sink);
        for (i, s) in self.stages.iter().enumerate() {
            s.collect(&format!("backbone.stage{i}"), sink);
        }
        for (i, d) in self.downs.iter().enumerate() {
            d.collect(&format!("backbone.down{i}"), sink);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::shape::Shape4;
    use crate::tensor::Tensor4;

    #[test]
    fn dims_follow_the_stride_schedule() {
        assert_eq!(
            Backbone::feature_dims(64, 64, 3).unwrap(),
            vec![(16, 16), (8, 8), (4, 4)]
        );
        assert!(Backbone::feature_dims(50, 50, 2).is_err());
        assert!(Backbone::feature_dims(8, 8, 3).is_err());
    }

    #[test]
    fn taps_match_declared_dims() {
        let mut rng = rng::substream(1, "backbone-test");
        let bb = Backbone::new(8, 2, &mut rng);
        let mut tape = Tape::default();
        let x = tape.constant(Tensor4::zeros(Shape4::new(2, 3, 32, 32)));
        let taps = bb.forward(&mut tape, x).unwrap();
        let dims = Backbone::feature_dims(32, 32, 2).unwrap();
        assert_eq!(taps.len(), 2);
        for (tap, (h, w)) in taps.iter().zip(dims) {
            assert_eq!(tape.shape(*tap), Shape4::new(2, 8, h, w));
        }
    }

    #[test]
    fn parameters_are_collected_once_each() {
        let mut rng = rng::substream(2, "backbone-test");
        let bb = Backbone::new(4, 3, &mut rng);
        let mut sink = ParamSink::default();
        bb.collect(&mut sink);
        // embed + 3 stages + 2 downs, each weight + bias.
        assert_eq!(sink.params.len(), 12);
        let mut names: Vec<&str> = sink.params.iter().map(|(n, _)| n.as_str()).collect();
        names.dedup();
        assert_eq!(names.len(), 12);
    }
}
