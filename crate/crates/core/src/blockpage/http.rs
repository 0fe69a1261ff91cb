//! Recognizing a complete HTTP response inside a single TCP payload.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    /// Body after removing any chunked transfer coding.
    pub body: Vec<u8>,
}

impl ParsedResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn split_head(payload: &[u8]) -> Option<(&[u8], &[u8])> {
    let crlf = find(payload, b"\r\n\r\n").map(|i| (i, 4));
    let lf = find(payload, b"\n\n").map(|i| (i, 2));
    let (end, sep) = match (crlf, lf) {
        (Some(a), Some(b)) => {
            if a.0 <= b.0 {
                a
            } else {
                b
            }
        }
        (a, b) => a.or(b)?,
    };
    Some((&payload[..end], &payload[end + sep..]))
}

fn parse_status_line(line: &str) -> Option<u16> {
    let mut parts = line.splitn(3, ' ');
    let version = parts.next()?;
    if !(version == "HTTP/1.0" || version == "HTTP/1.1") {
        return None;
    }
    let code = parts.next()?;
    if code.len() != 3 || !code.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let status: u16 = code.parse().ok()?;
    (100..=599).contains(&status).then_some(status)
}

/// Decodes a chunked body that must terminate (zero-size chunk and final
/// CRLF) within `data`. Trailing bytes after the terminator are rejected.
fn dechunk(mut data: &[u8]) -> Option<Vec<u8>> {
    let mut body = Vec::new();
    loop {
        let line_end = find(data, b"\r\n")?;
        let size_field = std::str::from_utf8(&data[..line_end]).ok()?;
        let size_hex = size_field.split(';').next()?.trim();
        let size = usize::from_str_radix(size_hex, 16).ok()?;
        data = &data[line_end + 2..];
        if size == 0 {
            // Optional trailer fields, then an empty line.
            loop {
                let end = find(data, b"\r\n")?;
                let is_blank = end == 0;
                data = &data[end + 2..];
                if is_blank {
                    return data.is_empty().then_some(body);
                }
            }
        }
        if data.len() < size + 2 || &data[size..size + 2] != b"\r\n" {
            return None;
        }
        body.extend_from_slice(&data[..size]);
        data = &data[size + 2..];
    }
}

/// Parses `payload` as exactly one complete HTTP response: status line,
/// headers and the full body according to its framing. A body delimited only
/// by connection close counts as complete when the packet itself carries FIN.
pub fn parse_self_contained_response(payload: &[u8], fin: bool) -> Option<ParsedResponse> {
    let (head, rest) = split_head(payload)?;
    let head = std::str::from_utf8(head).ok()?;
    let mut lines = head.lines();
    let status = parse_status_line(lines.next()?.trim_end_matches('\r'))?;
    let mut headers = Vec::new();
    for line in lines {
        let (k, v) = line.split_once(':')?;
        let k = k.trim();
        if k.is_empty() || k.contains(' ') {
            return None;
        }
        headers.push((k.to_string(), v.trim().to_string()));
    }
    let mut resp = ParsedResponse {
        status,
        headers,
        body: Vec::new(),
    };

    if matches!(status, 100..=199 | 204 | 304) {
        return rest.is_empty().then_some(resp);
    }
    let chunked = resp
        .header("transfer-encoding")
        .is_some_and(|v| v.to_ascii_lowercase().contains("chunked"));
    if chunked {
        resp.body = dechunk(rest)?;
        return Some(resp);
    }
    if let Some(cl) = resp.header("content-length") {
        let len: usize = cl.trim().parse().ok()?;
        if rest.len() != len {
            return None;
        }
        resp.body = rest.to_vec();
        return Some(resp);
    }
    if fin {
        resp.body = rest.to_vec();
        return Some(resp);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_length_must_match() {
        let ok = b"HTTP/1.1 403 Forbidden\r\nContent-Length: 20\r\n\r\n<html>blocked</html>";
        let r = parse_self_contained_response(ok, false).unwrap();
        assert_eq!(r.status, 403);
        assert_eq!(r.body, b"<html>blocked</html>");
        let short = b"HTTP/1.1 200 OK\r\nContent-Length: 500\r\n\r\n<html>";
        assert!(parse_self_contained_response(short, false).is_none());
    }

    #[test]
    fn body_fragment_is_not_a_response() {
        assert!(parse_self_contained_response(b"<p>middle of a page</p>", true).is_none());
        assert!(parse_self_contained_response(b"", true).is_none());
    }

    #[test]
    fn chunked_must_terminate() {
        let done = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n5\r\nhello\r\n0\r\n\r\n";
        assert_eq!(parse_self_contained_response(done, false).unwrap().body, b"hello");
        let open = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n5\r\nhello\r\n";
        assert!(parse_self_contained_response(open, true).is_none());
    }

    #[test]
    fn close_delimited_needs_fin() {
        let p = b"HTTP/1.0 200 OK\r\nContent-Type: text/html\r\n\r\n<html>x</html>";
        assert!(parse_self_contained_response(p, false).is_none());
        assert_eq!(parse_self_contained_response(p, true).unwrap().body, b"<html>x</html>");
    }

    #[test]
    fn bare_lf_headers_accepted() {
        let p = b"HTTP/1.1 302 Found\nLocation: http://10.10.34.34/\nContent-Length: 0\n\n";
        let r = parse_self_contained_response(p, false).unwrap();
        assert_eq!(r.header("location"), Some("http://10.10.34.34/"));
    }
}
