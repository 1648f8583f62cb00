//! Minimal PNG writer: 8-bit indexed or RGB, non-interlaced, deflate stored blocks.

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Image {
    /// One palette index per pixel, row-major.
    Indexed {
        width: u32,
        height: u32,
        indices: Vec<u8>,
        palette: Vec<[u8; 3]>,
    },
    /// Three bytes per pixel, row-major.
    Rgb {
        width: u32,
        height: u32,
        pixels: Vec<u8>,
    },
}

impl Image {
    pub fn dimensions(&self) -> (u32, u32) {
        match self {
            Image::Indexed { width, height, .. } | Image::Rgb { width, height, .. } => {
                (*width, *height)
            }
        }
    }

    /// RGB triple of pixel `(row, col)`.
    pub fn pixel(&self, row: u32, col: u32) -> [u8; 3] {
        match self {
            Image::Indexed {
                width,
                indices,
                palette,
                ..
            } => palette[indices[(row * width + col) as usize] as usize],
            Image::Rgb { width, pixels, .. } => {
                let o = 3 * (row * width + col) as usize;
                [pixels[o], pixels[o + 1], pixels[o + 2]]
            }
        }
    }
}

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let mut h = crc32fast::Hasher::new();
    h.update(kind);
    h.update(data);
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    out.extend_from_slice(&h.finalize().to_be_bytes());
}

fn adler32(data: &[u8]) -> u32 {
    const MOD: u32 = 65521;
    let (mut a, mut b) = (1u32, 0u32);
    // 5552 is the largest run that cannot overflow before reduction.
    for block in data.chunks(5552) {
        for &byte in block {
            a += byte as u32;
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (b << 16) | a
}

/// zlib stream made of stored (uncompressed) deflate blocks.
fn zlib_stored(data: &[u8]) -> Vec<u8> {
    let mut out = vec![0x78, 0x01];
    let blocks: Vec<&[u8]> = if data.is_empty() {
        vec![&[]]
    } else {
        data.chunks(0xffff).collect()
    };
    for (i, block) in blocks.iter().enumerate() {
        out.push((i + 1 == blocks.len()) as u8);
        let len = block.len() as u16;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&(!len).to_le_bytes());
        out.extend_from_slice(block);
    }
    out.extend_from_slice(&adler32(data).to_be_bytes());
    out
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let (width, height) = img.dimensions();
    let (color_type, bpp, rows): (u8, usize, &[u8]) = match img {
        Image::Indexed { indices, .. } => (3, 1, indices),
        Image::Rgb { pixels, .. } => (2, 3, pixels),
    };
    let stride = width as usize * bpp;
    let mut raw = Vec::with_capacity((stride + 1) * height as usize);
    for row in rows.chunks(stride.max(1)).take(height as usize) {
        raw.push(0);
        raw.extend_from_slice(row);
    }
    let mut out = SIGNATURE.to_vec();
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&width.to_be_bytes());
    ihdr.extend_from_slice(&height.to_be_bytes());
    ihdr.extend_from_slice(&[8, color_type, 0, 0, 0]);
    chunk(&mut out, b"IHDR", &ihdr);
    if let Image::Indexed { palette, .. } = img {
        let plte: Vec<u8> = palette.iter().flatten().copied().collect();
        chunk(&mut out, b"PLTE", &plte);
    }
    chunk(&mut out, b"IDAT", &zlib_stored(&raw));
    chunk(&mut out, b"IEND", &[]);
    out
}
