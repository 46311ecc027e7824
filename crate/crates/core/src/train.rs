//! Training loop and the loss-log CSV.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, TripletSampler};
use crate::error::Result;
use crate::network::{lr_at, LossReport, RepNet};
use crate::par::Exec;

pub const LOSS_LOG_HEADER: &str = "iteration,lr,triplet_loss,color_loss,model_loss,total";

/// Offset separating the triplet-sampling stream from weight initialization.
const SAMPLER_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLogRow {
    pub iteration: u64,
    pub lr: f64,
    pub losses: LossReport,
}

/// Runs `steps` SGD steps on batches drawn from `dataset`, seeded from the
/// network config.
pub fn train(net: &mut RepNet, dataset: &Dataset, steps: u64, exec: Exec) -> Result<Vec<LossLogRow>> {
    let sampler = TripletSampler::new(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(net.config().seed.wrapping_add(SAMPLER_SEED_OFFSET));
    let batch_size = net.config().batch_size;
    let mut log = Vec::with_capacity(steps as usize);
    for iteration in 0..steps {
        let batch = sampler.sample(batch_size, &mut rng);
        let lr = lr_at(iteration, net.config());
        let losses = net.train_step(dataset, &batch, iteration, exec)?;
        log.push(LossLogRow { iteration, lr, losses });
    }
    if net.zero_embeddings() > 0 {
        log::warn!("{} forward passes produced a zero embedding", net.zero_embeddings());
    }
    Ok(log)
}

/// Mean of one loss over a window of rows.
pub fn mean_loss(rows: &[LossLogRow], pick: impl Fn(&LossReport) -> f64) -> f64 {
    rows.iter().map(|r| pick(&r.losses)).sum::<f64>() / rows.len().max(1) as f64
}

pub fn write_loss_log(rows: &[LossLogRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{LOSS_LOG_HEADER}")?;
    for r in rows {
        let l = &r.losses;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.lr, l.triplet, l.color, l.model, l.total
        )?;
    }
    out.flush()?;
    Ok(())
}
