//! Start the watchdog daemon on a loopback port and talk to it over TCP.

use std::path::Path;
use std::sync::Arc;

use cps::daemon::{serve, Daemon, DaemonConfig};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let config = DaemonConfig::parse("[daemon]\nport = 7816\nseed = 7\npolicy = strict\n", Path::new("."))?;
    let daemon = Arc::new(Daemon::from_config(&config)?);
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, daemon, async {
        let _ = stopped.await;
    }));

    let stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    let (r, mut w) = stream.into_split();
    let mut lines = BufReader::new(r).lines();
    for request in [
        "SESSION incrypto-0 incrypto_P1",
        "APDU 00 A4 00 00 FF",
        "APDU 00 A4 00 00 02 14 00 FF",
        "APDU 00 22 F4 03",
        "APDU 00 22 F3 03 00",
        "RESET",
        "FROB",
        "CLOSE",
    ] {
        w.write_all(format!("{request}\n").as_bytes()).await?;
        let reply = lines.next_line().await?.unwrap_or_default();
        println!("{request:<32} {reply}");
    }
    stop.send(()).ok();
    server.await?;
    Ok(())
}
