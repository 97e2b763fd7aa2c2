use super::nets::Generator;
use crate::error::Result;
use crate::numerics::{Tape, Tensor};
use crate::volumes::HuWindow;

/// Everything produced by one synthesis call.
#[derive(Clone, Debug)]
pub struct SynthesisRecord {
    /// Generator output in `[0, 1]`, `[C, H, W]`.
    pub image_norm: Tensor,
    /// Same image mapped back through the HU window.
    pub image_hu: Tensor,
    /// Post-activation decoder features, deepest first.
    pub decoder_features: Vec<Tensor>,
    pub guidance: Tensor,
    pub reference: Tensor,
}

/// Generator inference; `guidance` and `reference` are normalized `[C, H, W]`.
pub fn synthesize(
    gen: &Generator,
    guidance: &Tensor,
    reference: &Tensor,
    window: HuWindow,
) -> Result<SynthesisRecord> {
    window.validate()?;
    let mut tape = Tape::new();
    let vars = gen.params.bind_frozen(&mut tape);
    let g = tape.leaf(guidance.clone());
    let r = tape.leaf(reference.clone());
    let fwd = gen.forward(&mut tape, &vars, g, r)?;
    let image_norm = tape.value(fwd.output).clone();
    let image_hu = Tensor::new(
        image_norm.shape().to_vec(),
        window.denormalize_slice(image_norm.data()),
    )?;
    Ok(SynthesisRecord {
        decoder_features: fwd
            .decoder_features
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        image_norm,
        image_hu,
        guidance: guidance.clone(),
        reference: reference.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GeneratorArch;
    use crate::seed;

    #[test]
    fn record_shapes_and_determinism() {
        let gen = Generator::new(
            GeneratorArch {
                channels: 2,
                encoder_widths: vec![4, 8],
                n_resblocks: 1,
            },
            5,
        )
        .unwrap();
        let mut rng = seed::rng(0);
        let g = Tensor::uniform(&[2, 16, 16], 0.0, 1.0, &mut rng);
        let r = Tensor::uniform(&[2, 16, 16], 0.0, 1.0, &mut rng);
        let w = HuWindow::default();
        let a = synthesize(&gen, &g, &r, w).unwrap();
        let b = synthesize(&gen, &g, &r, w).unwrap();
        assert_eq!(a.image_norm, b.image_norm);
        assert_eq!(a.image_hu.shape(), &[2, 16, 16]);
        assert!(a.image_hu.data().iter().all(|&v| (w.lo..=w.hi).contains(&v)));
        let shapes: Vec<_> = a.decoder_features.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 8, 8], vec![4, 16, 16]]);
    }
}
