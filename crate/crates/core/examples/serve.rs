//! Serves the HTTP API. With a checkpoint and config it loads them,
//! otherwise it serves an untrained tiny model (useful for wiring a client).
//!
//! cargo run --release --example serve -- [model.ntck model.json]

use nailtrace::model::{Model, ModelConfig};
use nailtrace::render::RenderParams;
use nailtrace::service::router;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = match &args[..] {
        [ckpt, cfg] => Model::load(ckpt.as_ref(), cfg.as_ref())?,
        _ => Model::build(ModelConfig::tiny(128, 128), 0)?,
    };
    let app = router(model, 1024, RenderParams::default(), None)?;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:8080").await?;
    log::info!("listening on http://{}/api/v1", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
