//! Host daemon: serves cloud objects for one manager.
//!
//! Exits when its standard input reaches end of file or the manager's
//! callback connection closes.

use std::io::Read;
use std::net::TcpListener;
use std::process::ExitCode;
use std::sync::{mpsc, Arc};

use clap::Parser;
use elastikit::fixtures::default_registry;
use elastikit::hostd::{serve, DetachedUplink, HostDaemon, HostUplink, TcpUplink};
use elastikit::value::{CloudHostId, IdGenerator};

#[derive(Parser, Debug)]
#[command(name = "elastikit-hostd", about = "Cloud host daemon")]
struct Args {
    /// Address to serve on, e.g. 127.0.0.1:7000.
    #[arg(long)]
    listen: String,
    /// Manager callback endpoint. Without it the daemon runs detached.
    #[arg(long)]
    callback: Option<String>,
    /// Host id in hex; random if omitted.
    #[arg(long = "host-id")]
    host_id: Option<String>,
    /// Artifact cache budget in bytes.
    #[arg(long = "cache-budget")]
    cache_budget: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let host = match &args.host_id {
        Some(h) => match CloudHostId::parse_hex(h) {
            Some(id) => id,
            None => {
                eprintln!("elastikit-hostd: bad --host-id '{h}'");
                return ExitCode::from(2);
            }
        },
        None => IdGenerator::new().next_host(),
    };
    let registry = Arc::new(default_registry());
    let (stop_tx, stop_rx) = mpsc::channel::<&'static str>();

    let (uplink, tcp): (Arc<dyn HostUplink>, Option<Arc<TcpUplink>>) = match &args.callback {
        Some(cb) => {
            let tx = stop_tx.clone();
            match TcpUplink::connect(cb, registry.digest(), move || {
                let _ = tx.send("callback closed");
            }) {
                Ok(up) => {
                    let up = Arc::new(up);
                    (up.clone(), Some(up))
                }
                Err(e) => {
                    eprintln!("elastikit-hostd: cannot reach manager at {cb}: {e}");
                    return ExitCode::FAILURE;
                }
            }
        }
        None => (Arc::new(DetachedUplink::new()), None),
    };

    let daemon = match args.cache_budget {
        Some(b) => HostDaemon::with_cache_budget(host, registry, uplink, b),
        None => HostDaemon::new(host, registry, uplink),
    };
    let listener = match TcpListener::bind(&args.listen) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("elastikit-hostd: cannot listen on {}: {e}", args.listen);
            return ExitCode::FAILURE;
        }
    };
    let server = match serve(listener, daemon) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("elastikit-hostd: {e}");
            return ExitCode::FAILURE;
        }
    };
    log::info!("host {host} serving on {}", server.addr());

    std::thread::spawn(move || {
        let mut sink = [0u8; 256];
        let mut stdin = std::io::stdin();
        while matches!(stdin.read(&mut sink), Ok(n) if n > 0) {}
        let _ = stop_tx.send("stdin closed");
    });

    let reason = stop_rx.recv().unwrap_or("stopped");
    log::info!("host {host} shutting down: {reason}");
    server.shutdown();
    if let Some(up) = tcp {
        up.close();
    }
    ExitCode::SUCCESS
}
