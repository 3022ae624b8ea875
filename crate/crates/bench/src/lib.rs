//! Shared setup for the pipeline benchmarks.

use compseg_core::pipeline::{fit, Fixture};
use compseg_core::{ModelSet, Result, RunConfig};

/// A fitted model on the world of `cfg`, ready to segment its benchmark.
pub struct Fitted {
    pub cfg: RunConfig,
    pub fixture: Fixture,
    pub models: ModelSet,
}

pub fn fitted(cfg: RunConfig) -> Result<Fitted> {
    let fixture = Fixture::build(&cfg)?;
    let (models, _, _) = fit(&fixture.examples, &fixture.class_ids, &fixture.backgrounds, &cfg)?;
    Ok(Fitted { cfg, fixture, models })
}
