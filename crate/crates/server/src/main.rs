use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use mrp_server::{app, ServerConfig};

#[derive(Parser)]
#[command(name = "mrp-server", version, about = "HTTP service for uploads, fits and estimates")]
struct Args {
    #[arg(long, env = "MRP_PORT", default_value_t = 8080)]
    port: u16,
    /// Jobs that may run at once.
    #[arg(long, env = "MRP_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long, env = "MRP_DATA_ROOT", default_value = "mrp-data")]
    data_root: PathBuf,
    /// Largest request body in bytes.
    #[arg(long, env = "MRP_MAX_UPLOAD", default_value_t = 64 * 1024 * 1024)]
    max_upload: usize,
    /// Directory served under /ui (the browser demo, for instance).
    #[arg(long, env = "MRP_STATIC_DIR")]
    static_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let (router, _state) = app(ServerConfig {
        data_root: args.data_root,
        workers: args.workers,
        max_upload: args.max_upload,
        static_dir: args.static_dir,
    })?;
    let addr = SocketAddr::from(([0, 0, 0, 0], args.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {addr}");
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
