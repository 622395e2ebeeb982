//! A network paired with the segments its output channels stand for.

use std::collections::BTreeMap;

use netseg_core::extraction::{PredictError, SegmentPredictor};
use netseg_core::labels::Segment;
use netseg_core::metrics::ProbabilityMaps;
use netseg_core::volume::{Grid, MultiModalRecord};

use crate::graph::Tensor;
use crate::network::{Network, NetworkConfig};
use crate::train::record_input;
use crate::NeuralError;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub network: Network,
    pub segments: Vec<Segment>,
}

/// Alias kept for callers that think of the model as a predictor.
pub type NetPredictor = SegmentationModel;

impl SegmentationModel {
    pub fn new(config: NetworkConfig, segments: Vec<Segment>, seed: u64) -> Result<Self, NeuralError> {
        if config.out_segments != segments.len() {
            return Err(NeuralError::BadConfig(format!(
                "{} output channels for {} segments",
                config.out_segments,
                segments.len()
            )));
        }
        Ok(Self { network: Network::new(config, seed)?, segments })
    }

    /// Probability maps for a raw (un-normalized) record, at the network's
    /// output resolution.
    pub fn predict_record(&self, record: &MultiModalRecord) -> Result<ProbabilityMaps, NeuralError> {
        let input = record_input(&record.normalized()?);
        let out = self.network.predict(&input)?;
        Ok(self.to_maps(&out))
    }

    fn to_maps(&self, out: &Tensor) -> ProbabilityMaps {
        let shape = [out.shape[2], out.shape[3], out.shape[4]];
        let plane: usize = shape.iter().product();
        let maps = self
            .segments
            .iter()
            .zip(out.data.chunks(plane))
            .map(|(&seg, chunk)| (seg, Grid::new(shape, chunk.to_vec()).expect("plane matches shape")))
            .collect::<BTreeMap<_, _>>();
        ProbabilityMaps { maps, resolution_factor: self.network.config.resolution_factor() }
    }
}

impl SegmentPredictor for SegmentationModel {
    fn segments(&self) -> Vec<Segment> {
        self.segments.clone()
    }

    fn predict(&self, record: &MultiModalRecord) -> Result<ProbabilityMaps, PredictError> {
        Ok(self.predict_record(record)?)
    }
}
