//! TCP transport: a listening server that turns incoming connections into
//! client proxies, and the client-side serve loop.
//!
//! The accept path registers a proxy *before* acking the handshake, so a
//! duplicate id is turned away while the second client still considers the
//! connection tentative. After the handshake, the server end of a
//! connection is owned by its proxy and speaks strict request/response;
//! the client end sits in [`run_client`] answering one message at a time.

use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::client::{Handled, LocalClient, Shard};
use crate::config::ConfigMap;
use crate::protocol::{
    handshake_client, handshake_server, read_frame, write_frame, DisconnectReason, EvaluateIns,
    EvaluateRes, FitIns, FitRes, Message, ProtocolError,
};
use crate::server::{ClientManager, ClientProxy, ProxyError};
use crate::tensor::Parameters;

/// How often the accept loop checks for a stop request.
const ACCEPT_POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("only {got} of {want} clients registered within {waited:?}")]
    StartupTimeout {
        want: usize,
        got: usize,
        waited: Duration,
    },
}

/// Server-side handle for one TCP-connected client. One request at a time:
/// the stream lock serializes write-then-read exchanges.
struct TcpClientProxy {
    client_id: String,
    stream: Mutex<TcpStream>,
    request_timeout: Option<Duration>,
}

impl TcpClientProxy {
    fn request(&self, msg: &Message) -> Result<Message, ProxyError> {
        let mut stream = self.stream.lock().expect("stream lock");
        stream
            .set_read_timeout(self.request_timeout)
            .map_err(ProtocolError::Io)?;
        write_frame(&mut *stream, msg)?;
        Ok(read_frame(&mut *stream)?)
    }
}

impl ClientProxy for TcpClientProxy {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn get_parameters(&self) -> Result<Parameters, ProxyError> {
        match self.request(&Message::GetParametersIns)? {
            Message::GetParametersRes(p) => Ok(p),
            other => Err(ProxyError::UnexpectedReply {
                expected: "GetParametersRes",
                got: other.kind_name(),
            }),
        }
    }

    fn fit(&self, ins: &FitIns) -> Result<FitRes, ProxyError> {
        match self.request(&Message::FitIns(ins.clone()))? {
            Message::FitRes(res) => Ok(res),
            other => Err(ProxyError::UnexpectedReply {
                expected: "FitRes",
                got: other.kind_name(),
            }),
        }
    }

    fn evaluate(&self, ins: &EvaluateIns) -> Result<EvaluateRes, ProxyError> {
        match self.request(&Message::EvaluateIns(ins.clone()))? {
            Message::EvaluateRes(res) => Ok(res),
            other => Err(ProxyError::UnexpectedReply {
                expected: "EvaluateRes",
                got: other.kind_name(),
            }),
        }
    }

    fn disconnect(&self) {
        if let Ok(mut stream) = self.stream.lock() {
            let _ = write_frame(
                &mut *stream,
                &Message::Disconnect {
                    reason: DisconnectReason::Shutdown,
                },
            );
            let _ = stream.shutdown(Shutdown::Both);
        }
    }
}

/// A running TCP federation server: background accept loop feeding a
/// [`ClientManager`]. Dropping the handle stops the loop and disconnects
/// every registered client.
pub struct TcpServerHandle {
    manager: Arc<ClientManager>,
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

/// Bind `addr` (e.g. `"127.0.0.1:0"`) and start accepting clients.
/// `request_timeout` bounds each server→client exchange; `None` waits
/// indefinitely.
pub fn start_tcp_server(
    addr: &str,
    request_timeout: Option<Duration>,
) -> Result<TcpServerHandle, NetError> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let manager = Arc::new(ClientManager::new());
    let stop = Arc::new(AtomicBool::new(false));
    let accept_thread = {
        let manager = Arc::clone(&manager);
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || accept_loop(listener, manager, stop, request_timeout))
    };
    Ok(TcpServerHandle {
        manager,
        local_addr,
        stop,
        accept_thread: Some(accept_thread),
    })
}

impl TcpServerHandle {
    pub fn manager(&self) -> &Arc<ClientManager> {
        &self.manager
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Block until `want` clients are registered, or time out.
    pub fn wait_for_clients(&self, want: usize, timeout: Duration) -> Result<(), NetError> {
        let start = Instant::now();
        while self.manager.len() < want {
            if start.elapsed() > timeout {
                return Err(NetError::StartupTimeout {
                    want,
                    got: self.manager.len(),
                    waited: start.elapsed(),
                });
            }
            std::thread::sleep(ACCEPT_POLL);
        }
        Ok(())
    }

    /// Stop accepting, tell every client to disconnect, join the loop.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for proxy in self.manager.snapshot().values() {
            proxy.disconnect();
        }
        if let Some(thread) = self.accept_thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for TcpServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn accept_loop(
    listener: TcpListener,
    manager: Arc<ClientManager>,
    stop: Arc<AtomicBool>,
    request_timeout: Option<Duration>,
) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let manager = Arc::clone(&manager);
                std::thread::spawn(move || {
                    if let Err(e) = admit(stream, &manager, request_timeout) {
                        log::warn!("connection from {peer} not admitted: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn admit(
    mut stream: TcpStream,
    manager: &ClientManager,
    request_timeout: Option<Duration>,
) -> Result<(), ProtocolError> {
    let _ = stream.set_nodelay(true);
    let proxy_stream = stream.try_clone()?;
    let hello = handshake_server(&mut stream, |hello| {
        let proxy = Arc::new(TcpClientProxy {
            client_id: hello.client_id.clone(),
            stream: Mutex::new(proxy_stream),
            request_timeout,
        });
        manager
            .register(proxy)
            .map_err(|_| DisconnectReason::DuplicateClientId)
    })?;
    log::info!("client {} registered", hello.client_id);
    Ok(())
}

/// Connect to a server, introduce ourselves, then answer instructions
/// until the server disconnects us or closes the stream.
pub fn run_client(server: &str, client_id: &str, shard: Shard) -> Result<(), NetError> {
    let mut stream = TcpStream::connect(server)?;
    let _ = stream.set_nodelay(true);
    handshake_client(&mut stream, client_id, ConfigMap::new())?;
    let mut client = LocalClient::new(client_id, shard);
    loop {
        let msg = match read_frame(&mut stream) {
            Ok(m) => m,
            // Stream closed between requests: orderly end of service.
            Err(ProtocolError::ConnectionClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        match client.handle(&msg) {
            Handled::Reply(reply) => write_frame(&mut stream, &reply)?,
            Handled::ReplyThenStop(reply) => {
                let _ = write_frame(&mut stream, &reply);
                return Ok(());
            }
            Handled::Stop => return Ok(()),
        }
    }
}
