use crate::autograd::{ParamId, ParamStore, Tape, VarId};
use crate::blocks::layers::ConvBnAct;
use crate::blocks::LayerRow;
use crate::error::{Error, Result};
use crate::tensor::{BnMode, ConvSpec, Scalar, Shape};

/// Strided 3x3 conv, `convs` further 3x3 convs at full width, then the
/// half-resolution image appended as extra channels.
#[derive(Clone, Debug)]
pub struct InitialModule {
    pub image_channels: usize,
    pub channels: usize,
    down: ConvBnAct,
    convs: Vec<ConvBnAct>,
}

impl InitialModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        image_channels: usize,
        channels: usize,
        convs: usize,
    ) -> Result<Self> {
        let down = ConvBnAct::new(
            store,
            &format!("{name}.down"),
            ConvSpec::same(image_channels, channels, 3, 3, 1).with_stride(2),
        )?;
        let convs = (0..convs)
            .map(|i| ConvBnAct::new(store, &format!("{name}.conv{i}"), ConvSpec::same(channels, channels, 3, 3, 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(InitialModule {
            image_channels,
            channels,
            down,
            convs,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.channels + self.image_channels
    }

    /// `half_image` is the image average-pooled once.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: VarId,
        half_image: VarId,
        mode: BnMode,
    ) -> Result<VarId> {
        let c = tape.shape(image).c;
        if c != self.image_channels {
            return Err(Error::ShapeMismatch {
                op: "initial_module",
                dim: "image channels",
                expected: self.image_channels,
                actual: c,
            });
        }
        let mut x = self.down.forward(tape, store, image, mode)?;
        for conv in &self.convs {
            x = conv.forward(tape, store, x, mode)?;
        }
        tape.concat(&[x, half_image])
    }

    pub fn rows(&self, input: Shape) -> Result<Vec<LayerRow>> {
        let mut shape = self.down.output_shape(input)?;
        let mut rows = vec![LayerRow::new("Downsample (Conv-3)", shape, self.down.param_ids(), vec![self.down.conv.rf_step()])];
        for conv in &self.convs {
            shape = conv.output_shape(shape)?;
            rows.push(LayerRow::new("Conv-3", shape, conv.param_ids(), vec![conv.conv.rf_step()]));
        }
        rows.push(LayerRow::new("Concatenation", shape.with_c(self.out_channels()), vec![], vec![]));
        Ok(rows)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.down.param_ids();
        for c in &self.convs {
            ids.extend(c.param_ids());
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn table_rows_at_full_resolution() {
        let mut store = ParamStore::<f32>::new(0);
        let m = InitialModule::new(&mut store, "init", 3, 32, 2).unwrap();
        let rows = m.rows(Shape::new(1, 3, 512, 1024)).unwrap();
        let got: Vec<_> = rows.iter().map(|r| (r.op.as_str(), r.shape.c, r.shape.h, r.shape.w)).collect();
        assert_eq!(
            got,
            vec![
                ("Downsample (Conv-3)", 32, 256, 512),
                ("Conv-3", 32, 256, 512),
                ("Conv-3", 32, 256, 512),
                ("Concatenation", 35, 256, 512),
            ]
        );
    }

    #[test]
    fn forward_concatenates_image() {
        let mut store = ParamStore::<f32>::new(0);
        let m = InitialModule::new(&mut store, "init", 3, 4, 2).unwrap();
        let mut tape = Tape::new();
        let img = tape.input(Tensor::full(Shape::new(1, 3, 8, 16), 0.5));
        let half = tape.avg_pool2(img).unwrap();
        let y = m.forward(&mut tape, &store, img, half, BnMode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 7, 4, 8));
        let v = tape.value(y);
        assert!((4..7).all(|c| v.plane(0, c).iter().all(|&p| p == 0.5)));
    }
}
