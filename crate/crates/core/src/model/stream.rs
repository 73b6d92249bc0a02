use super::KwsModel;
use crate::error::{KwsError, Result};
use crate::layers::SvdfState;
use crate::numerics::{softmax_rows, Tensor};

/// Frame-by-frame inference state for one audio stream.
///
/// The FiLM modulation is resolved once from the session's embedding and
/// stays fixed until the session is dropped.
#[derive(Debug, Clone)]
pub struct StreamSession {
    encoder: Vec<SvdfState>,
    decoder: Vec<SvdfState>,
    modulation: Option<(Vec<f64>, Vec<f64>)>,
    frames: u64,
}

impl StreamSession {
    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn modulation(&self) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.modulation.as_ref()
    }

    pub fn reset(&mut self) {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).for_each(SvdfState::reset);
        self.frames = 0;
    }
}

impl KwsModel {
    pub fn new_session(&self, embedding: Option<&[f64]>) -> Result<StreamSession> {
        Ok(StreamSession {
            encoder: self.encoder.iter().map(|b| b.svdf.new_state()).collect(),
            decoder: self.decoder.iter().map(|l| l.new_state()).collect(),
            modulation: self.modulation(embedding)?,
            frames: 0,
        })
    }

    /// Consumes one input frame and returns its class posteriors.
    pub fn stream_step(&self, session: &mut StreamSession, frame: &[f64]) -> Result<Vec<f64>> {
        if session.encoder.len() != self.encoder.len()
            || session.decoder.len() != self.decoder.len()
            || session.modulation.is_some() != self.film.is_some()
        {
            return Err(KwsError::Usage("stream session was built for a different model".into()));
        }
        if frame.len() != self.config().input_dim {
            return Err(KwsError::dim("stream_step", &[frame.len()], &[self.config().input_dim]));
        }
        let mut h = frame.to_vec();
        for (block, state) in self.encoder.iter().zip(&mut session.encoder) {
            h = block.svdf.forward_stream(state, &h)?;
            h = block.bottleneck.forward_frame(&h)?;
        }
        if let Some((gamma, beta)) = &session.modulation {
            if gamma.len() != h.len() {
                return Err(KwsError::dim("stream_step", &[gamma.len()], &[h.len()]));
            }
            h = h.iter().zip(gamma.iter().zip(beta)).map(|(l, (g, b))| g * l + b).collect();
        }
        for (layer, state) in self.decoder.iter().zip(&mut session.decoder) {
            h = layer.forward_stream(state, &h)?;
        }
        let logits = self.head.forward_frame(&h)?;
        session.frames += 1;
        Ok(softmax_rows(&Tensor::vector(logits)).into_data())
    }
}
