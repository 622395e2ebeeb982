use clap::Args;
use netseg_core::phantom::{generate_cohort, write_cohort, CohortManifest, GammaLaw, PhantomSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io::triple;
use crate::{Common, Params};

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Number of records.
    #[arg(long)]
    count: Option<usize>,
    /// Grid shape D,H,W.
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    /// Draw NET volumes (voxels) from a gamma law with this shape...
    #[arg(long, requires = "gamma_theta")]
    gamma_k: Option<f64>,
    /// ...and this scale.
    #[arg(long, requires = "gamma_k")]
    gamma_theta: Option<f64>,
    /// Multiplies the NET rim thickness.
    #[arg(long)]
    net_volume_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub count: usize,
    pub volume_law: Option<GammaLaw>,
    /// Base spec; per-record seeds are derived from the run seed.
    pub spec: PhantomSpec,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self { count: 20, volume_law: None, spec: PhantomSpec::default() }
    }
}

impl Params for PhantomParams {
    type Args = PhantomArgs;
    const NAME: &'static str = "phantom";

    fn apply(&mut self, a: &PhantomArgs) -> Result<(), CliError> {
        if let Some(n) = a.count {
            self.count = n;
        }
        if let Some(s) = &a.shape {
            self.spec.shape = triple(s, "shape")?;
        }
        if let (Some(k), Some(t)) = (a.gamma_k, a.gamma_theta) {
            self.volume_law = Some(GammaLaw { shape_k: k, scale_theta: t });
        }
        if let Some(v) = a.net_volume_scale {
            self.spec.net_volume_scale = v;
        }
        Ok(())
    }

    fn validate(&self, _: &Common) -> Result<(), CliError> {
        if self.count == 0 {
            return Err(CliError::usage("--count must be at least 1"));
        }
        Ok(self.spec.validate()?)
    }

    fn run(&self, common: &Common) -> Result<(), CliError> {
        let cohort = generate_cohort(self.count, &self.spec, self.volume_law, common.seed)?;
        let manifest = CohortManifest {
            base_spec: self.spec.clone(),
            cohort_seed: common.seed,
            volume_law: self.volume_law,
            records: cohort.iter().map(|p| p.truth.clone()).collect(),
        };
        write_cohort(&common.out, &cohort, &manifest)?;
        log::info!("wrote {} records to {}", cohort.len(), common.out.display());
        Ok(())
    }
}
