//! Binary PGM (P5), 8-bit.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmError(pub String);

impl fmt::Display for PgmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed PGM: {}", self.0)
    }
}

impl std::error::Error for PgmError {}

/// Encodes a `width × height` plane. `comment` goes on its own `#` line in
/// the header and must not contain line breaks.
pub fn encode(width: usize, height: usize, pixels: &[u8], comment: Option<&str>) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "plane size");
    let mut out = b"P5\n".to_vec();
    if let Some(c) = comment {
        debug_assert!(!c.contains('\n'));
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    out
}

/// A decoded plane with the first header comment, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub comment: Option<String>,
}

pub fn decode(bytes: &[u8]) -> Result<Pgm, PgmError> {
    if !bytes.starts_with(b"P5") {
        return Err(PgmError("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut comment = None;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
                    if comment.is_none() {
                        comment = Some(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
                    }
                    pos = end;
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError("expected a header number".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError("header number out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PgmError(format!("only maxval 255 is supported, found {maxval}")));
    }
    // Exactly one whitespace byte ends the header.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError("header not terminated".into()));
    }
    pos += 1;
    let n = width * height;
    let pixels = bytes.get(pos..pos + n).ok_or_else(|| PgmError(format!("expected {n} pixel bytes")))?;
    if bytes.len() != pos + n {
        return Err(PgmError("trailing bytes after the raster".into()));
    }
    Ok(Pgm { width, height, pixels: pixels.to_vec(), comment })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(2, 1, &[0, 255], Some("run abc"));
        assert_eq!(bytes, b"P5\n# run abc\n2 1\n255\n\x00\xff");
        let bytes = encode(1, 1, &[7], None);
        assert_eq!(bytes, b"P5\n1 1\n255\n\x07");
    }

    #[test]
    fn round_trip() {
        let px: Vec<u8> = (0..12).collect();
        let p = decode(&encode(4, 3, &px, Some("x"))).unwrap();
        assert_eq!((p.width, p.height, p.pixels, p.comment.as_deref()), (4, 3, px, Some("x")));
    }

    #[test]
    fn comments_between_fields_and_errors() {
        let p = decode(b"P5 # a\n 2 # b\n1\n255 \x01\x02").unwrap();
        assert_eq!((p.width, p.height, p.pixels.clone()), (2, 1, vec![1, 2]));
        assert_eq!(p.comment.as_deref(), Some("a"));
        assert!(decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"P5\n1 1\n255\n\x00\x00").is_err());
    }
}
