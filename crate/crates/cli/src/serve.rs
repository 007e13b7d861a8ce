use std::path::Path;
use std::time::Duration;

use anyhow::Context;

use coalfake::pipeline::session::{Session, SessionOptions};
use coalfake::pipeline::RunConfig;

use crate::run::{log_header, prepare, METRICS_FILE, STATE_FILE};

/// Runs the pipeline on a worker thread behind the review service until
/// interrupted. An existing state file in `out` is resumed.
pub fn serve(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    log_header("serve", config);
    let state_path = out.join(STATE_FILE);
    let (pipeline, state) = prepare(config, out, state_path.is_file())?;
    let session = Session::spawn(
        pipeline,
        state,
        SessionOptions {
            autostart: true,
            state_path: Some(state_path),
            human_timeout: config.human.timeout_s.map(Duration::from_secs),
        },
    );
    let handle = session.handle();
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    let served = runtime.block_on(coalfake_service::serve(
        vec![(config.run_id.clone(), handle.clone())],
        &config.service,
        async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        },
    ));
    handle.shutdown();
    let (state, error) = session.join();
    std::fs::write(out.join(METRICS_FILE), state.metrics_json() + "\n")?;
    served.with_context(|| format!("serving on {}:{}", config.service.host, config.service.port))?;
    if let Some(e) = error {
        return Err(e.into());
    }
    Ok(())
}
