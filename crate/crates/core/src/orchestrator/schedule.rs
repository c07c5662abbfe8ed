use std::future::Future;
use std::time::Duration;

use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

#[derive(Debug, Clone, Default)]
pub struct ScheduleSummary {
    /// Start time of every sweep that ran.
    pub starts: Vec<Instant>,
    /// Start times skipped because a sweep was still running.
    pub skipped: usize,
}

/// Calls `sweep` now and then on every multiple of `interval` after the
/// first start, until `stop` fires. Sweeps never overlap: start times that
/// pass while a sweep runs are skipped and counted. With `once`, returns
/// after the first sweep. A sweep error ends the schedule.
pub async fn run_schedule<F, Fut, E>(
    interval: Duration,
    once: bool,
    stop: CancellationToken,
    mut sweep: F,
) -> Result<ScheduleSummary, E>
where
    F: FnMut() -> Fut,
    Fut: Future<Output = Result<(), E>>,
{
    let mut summary = ScheduleSummary::default();
    let mut next = Instant::now();
    loop {
        if stop.is_cancelled() {
            break;
        }
        summary.starts.push(Instant::now());
        sweep().await?;
        if once {
            break;
        }
        next += interval;
        let now = Instant::now();
        while next <= now {
            summary.skipped += 1;
            tracing::warn!(
                skipped = summary.skipped,
                "previous sweep overran its interval; skipping a start"
            );
            next += interval;
        }
        tokio::select! {
            _ = tokio::time::sleep_until(next) => {}
            _ = stop.cancelled() => break,
        }
    }
    Ok(summary)
}
