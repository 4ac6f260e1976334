//! Minimal deterministic PNG writer (8-bit RGB, stored deflate blocks).
//! No compression: sample grids are small and the bytes must be identical
//! across builds forever.

fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, t) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *t = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFFFFFF
}

fn adler32(data: &[u8]) -> u32 {
    let mut a = 1u32;
    let mut b = 0u32;
    for &x in data {
        a = (a + x as u32) % 65521;
        b = (b + a) % 65521;
    }
    (b << 16) | a
}

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    let mut body = kind.to_vec();
    body.extend_from_slice(payload);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32(&body).to_be_bytes());
}

/// Encode interleaved RGB rows (len = 3 * w * h) as a PNG byte vector.
pub fn encode_rgb_png(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * w * h);
    let mut out = Vec::new();
    out.extend_from_slice(&[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
    let mut ihdr = Vec::new();
    ihdr.extend_from_slice(&(w as u32).to_be_bytes());
    ihdr.extend_from_slice(&(h as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]); // 8-bit, truecolor
    chunk(&mut out, b"IHDR", &ihdr);

    // raw scanlines with filter byte 0
    let mut raw = Vec::with_capacity(h * (1 + 3 * w));
    for y in 0..h {
        raw.push(0);
        raw.extend_from_slice(&rgb[y * 3 * w..(y + 1) * 3 * w]);
    }
    // zlib: header + stored deflate blocks (max 65535 bytes each) + adler
    let mut z = vec![0x78, 0x01];
    let mut off = 0;
    while off < raw.len() {
        let n = (raw.len() - off).min(65535);
        let last = if off + n == raw.len() { 1u8 } else { 0 };
        z.push(last);
        z.extend_from_slice(&(n as u16).to_le_bytes());
        z.extend_from_slice(&(!(n as u16)).to_le_bytes());
        z.extend_from_slice(&raw[off..off + n]);
        off += n;
    }
    z.extend_from_slice(&adler32(&raw).to_be_bytes());
    chunk(&mut out, b"IDAT", &z);
    chunk(&mut out, b"IEND", &[]);
    out
}

/// [-1, 1] -> u8 with rounding.
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0) + 0.5) as u8
}

/// Channel-major [3, H, W] field in [-1, 1] -> interleaved RGB bytes.
pub fn field_to_rgb(field: &[f32], h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    let mut out = vec![0u8; 3 * plane];
    for p in 0..plane {
        out[3 * p] = to_u8(field[p]);
        out[3 * p + 1] = to_u8(field[plane + p]);
        out[3 * p + 2] = to_u8(field[2 * plane + p]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_structure_is_valid_and_deterministic() {
        let w = 5;
        let h = 3;
        let rgb: Vec<u8> = (0..3 * w * h).map(|i| (i * 7 % 256) as u8).collect();
        let a = encode_rgb_png(w, h, &rgb);
        let b = encode_rgb_png(w, h, &rgb);
        assert_eq!(a, b);
        assert_eq!(&a[..8], &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
        assert_eq!(&a[12..16], b"IHDR");
        assert!(a.windows(4).any(|w| w == b"IDAT"));
        assert_eq!(&a[a.len() - 8..a.len() - 4], b"IEND");
    }

    #[test]
    fn crc_known_vector() {
        // standard CRC-32 of "123456789"
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
        assert_eq!(adler32(b"123456789"), 0x091E01DE);
    }

    #[test]
    fn u8_mapping_endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 127);
    }
}
