//! Packet-level builders for simulated TCP exchanges.

use std::net::SocketAddr;

use crate::model::{Direction, HttpExchange, PacketEvent, TcpFlags};

pub(crate) fn http_response(status: u16, body: &[u8]) -> Vec<u8> {
    let reason = match status {
        200 => "OK",
        302 => "Found",
        403 => "Forbidden",
        451 => "Unavailable For Legal Reasons",
        _ => "Status",
    };
    let mut out = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: text/html\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )
    .into_bytes();
    out.extend_from_slice(body);
    out
}

pub(crate) fn exchange(status: u16, body: Vec<u8>, url: &str) -> HttpExchange {
    HttpExchange {
        status: Some(status),
        headers: vec![
            ("Content-Type".into(), "text/html".into()),
            ("Content-Length".into(), body.len().to_string()),
        ],
        body,
        final_url: url.to_string(),
    }
}

/// Emits one TCP connection's packets with increasing timestamps.
pub(crate) struct FlowBuilder {
    client: SocketAddr,
    server: SocketAddr,
    t: u64,
    rtt: u64,
    cseq: u32,
    sseq: u32,
    out: Vec<PacketEvent>,
}

impl FlowBuilder {
    pub(crate) fn new(client: SocketAddr, server: SocketAddr, t0: u64, rtt: u64, cisn: u32, sisn: u32) -> Self {
        Self {
            client,
            server,
            t: t0,
            rtt: rtt.max(2),
            cseq: cisn,
            sseq: sisn,
            out: Vec::new(),
        }
    }

    fn push(&mut self, dir: Direction, flags: TcpFlags, seq: u32, payload: &[u8], dt: u64) {
        self.t += dt;
        let (src, dst) = match dir {
            Direction::Outbound => (self.client, self.server),
            Direction::Inbound => (self.server, self.client),
        };
        let ack = match dir {
            Direction::Outbound => self.sseq,
            Direction::Inbound => self.cseq,
        };
        self.out.push(PacketEvent {
            ts_ms: self.t,
            dir,
            src,
            dst,
            flags,
            seq,
            ack,
            payload: payload.to_vec(),
            checksum_valid: true,
            icmp_unreachable: false,
        });
    }

    pub(crate) fn syn(&mut self) {
        self.push(Direction::Outbound, TcpFlags::SYN, self.cseq, b"", 0);
        self.cseq = self.cseq.wrapping_add(1);
    }

    pub(crate) fn handshake(&mut self) {
        self.syn();
        let half = self.rtt;
        self.push(Direction::Inbound, TcpFlags::SYN | TcpFlags::ACK, self.sseq, b"", half);
        self.sseq = self.sseq.wrapping_add(1);
        self.push(Direction::Outbound, TcpFlags::ACK, self.cseq, b"", 1);
    }

    pub(crate) fn request(&mut self, host: &str, path: &str) {
        let req = format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: Mozilla/5.0\r\nAccept: */*\r\n\r\n");
        self.push(Direction::Outbound, TcpFlags::PSH | TcpFlags::ACK, self.cseq, req.as_bytes(), 1);
        self.cseq = self.cseq.wrapping_add(req.len() as u32);
    }

    /// Sequence number the server's next byte will carry.
    pub(crate) fn server_seq(&self) -> u32 {
        self.sseq
    }

    /// An inbound packet at an explicit sequence number; does not advance
    /// the server's sequence space (used for forged packets).
    pub(crate) fn inject(&mut self, seq: u32, flags: TcpFlags, payload: &[u8], dt: u64) {
        self.push(Direction::Inbound, flags, seq, payload, dt);
    }

    /// Legitimate server data, advancing the server sequence number.
    pub(crate) fn server_data(&mut self, payload: &[u8], dt: u64) {
        self.push(Direction::Inbound, TcpFlags::PSH | TcpFlags::ACK, self.sseq, payload, dt);
        self.sseq = self.sseq.wrapping_add(payload.len() as u32);
    }

    /// Re-sends the previous server data packet byte for byte.
    pub(crate) fn retransmit_last_inbound(&mut self, dt: u64) {
        let last = self
            .out
            .iter()
            .rev()
            .find(|p| p.dir == Direction::Inbound && !p.payload.is_empty())
            .cloned()
            .expect("a data packet to retransmit");
        self.t += dt;
        self.out.push(PacketEvent {
            ts_ms: self.t,
            ..last
        });
    }

    pub(crate) fn client_ack(&mut self) {
        self.push(Direction::Outbound, TcpFlags::ACK, self.cseq, b"", 1);
    }

    /// Orderly close: server FIN, client FIN.
    pub(crate) fn close(&mut self) {
        self.push(Direction::Inbound, TcpFlags::FIN | TcpFlags::ACK, self.sseq, b"", 1);
        self.sseq = self.sseq.wrapping_add(1);
        self.push(Direction::Outbound, TcpFlags::FIN | TcpFlags::ACK, self.cseq, b"", 1);
    }

    /// Inbound RST answering the SYN.
    pub(crate) fn refuse(&mut self) {
        let rtt = self.rtt;
        self.push(Direction::Inbound, TcpFlags::RST | TcpFlags::ACK, 0, b"", rtt);
    }

    /// ICMP destination unreachable answering the SYN.
    pub(crate) fn unreachable(&mut self) {
        let rtt = self.rtt;
        self.push(Direction::Inbound, TcpFlags::empty(), 0, b"", rtt);
        self.out.last_mut().expect("just pushed").icmp_unreachable = true;
    }

    /// Client gives up after retransmitting its SYN.
    pub(crate) fn syn_retry(&mut self) {
        let seq = self.cseq.wrapping_sub(1);
        self.push(Direction::Outbound, TcpFlags::SYN, seq, b"", 1000);
    }

    pub(crate) fn finish(self) -> Vec<PacketEvent> {
        self.out
    }
}

/// Handshake, request, one response packet, orderly close.
pub(crate) fn normal_fetch(mut f: FlowBuilder, host: &str, path: &str, response: &[u8]) -> Vec<PacketEvent> {
    f.handshake();
    f.request(host, path);
    let rtt = f.rtt;
    f.server_data(response, rtt);
    f.client_ack();
    f.close();
    f.finish()
}
