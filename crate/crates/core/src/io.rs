//! File formats.
//!
//! - Tensor text: line 1 `tensor v1`; line 2 the rank followed by the
//!   extents; then whitespace-separated values in row-major order. Values
//!   are printed with Rust's shortest-round-trip formatting, so write/read
//!   is bit-exact.
//! - ASCII PGM (P2, maxval 65535) for scalar maps linearly mapped from [0, 1].
//! - ASCII PPM (P3) for color images and normal maps; normals use the
//!   channel mapping `n = 2 * (v / maxval) - 1`.
//! - `key = value` config grammar: `#` comments, UTF-8, LF line endings.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &str = "tensor v1";

pub fn format_tensor(t: &Tensor) -> String {
    let mut s = String::new();
    s.push_str(TENSOR_MAGIC);
    s.push('\n');
    let _ = write!(s, "{}", t.rank());
    for e in t.shape() {
        let _ = write!(s, " {e}");
    }
    s.push('\n');
    // one row per line for rank >= 2, otherwise everything on one line
    let row = if t.rank() >= 2 {
        *t.shape().last().unwrap()
    } else {
        t.len().max(1)
    };
    for (i, v) in t.data().iter().enumerate() {
        let _ = write!(s, "{v}");
        if (i + 1) % row == 0 {
            s.push('\n');
        } else {
            s.push(' ');
        }
    }
    if t.len() % row != 0 {
        s.push('\n');
    }
    s
}

pub fn parse_tensor(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default().trim();
    if magic != TENSOR_MAGIC {
        return Err(Error::Parse(format!(
            "expected `{TENSOR_MAGIC}` header, got `{magic}`"
        )));
    }
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("missing shape line".into()))?;
    let mut fields = header.split_whitespace();
    let rank: usize = fields
        .next()
        .ok_or_else(|| Error::Parse("missing rank".into()))?
        .parse()
        .map_err(|e| Error::Parse(format!("bad rank: {e}")))?;
    let shape: Vec<usize> = fields
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(format!("bad extent: {e}")))?;
    if shape.len() != rank {
        return Err(Error::Parse(format!(
            "rank {rank} but {} extents",
            shape.len()
        )));
    }
    let expected: usize = shape.iter().product();
    let mut data = Vec::with_capacity(expected);
    for line in lines {
        for field in line.split_whitespace() {
            let v: f64 = field
                .parse()
                .map_err(|e| Error::Parse(format!("bad value `{field}`: {e}")))?;
            data.push(v);
        }
    }
    if data.len() != expected {
        return Err(Error::Parse(format!(
            "expected {expected} values, got {}",
            data.len()
        )));
    }
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, format_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    parse_tensor(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub const PNM_MAXVAL: u32 = 65535;

/// Scalar `[H, W]` map to ASCII PGM; values are clamped to [0, 1].
pub fn format_pgm(t: &Tensor) -> Result<String> {
    let (h, w) = t.dims2("format_pgm")?;
    let mut s = format!("P2\n{w} {h}\n{PNM_MAXVAL}\n");
    for r in 0..h {
        let row = t.row(r);
        for (i, v) in row.iter().enumerate() {
            let q = (v.clamp(0.0, 1.0) * PNM_MAXVAL as f64).round() as u32;
            let _ = write!(s, "{q}");
            s.push(if i + 1 == w { '\n' } else { ' ' });
        }
    }
    Ok(s)
}

pub fn parse_pgm(text: &str) -> Result<Tensor> {
    let mut tokens = pnm_tokens(text);
    expect_token(&mut tokens, "P2")?;
    let w = next_usize(&mut tokens, "width")?;
    let h = next_usize(&mut tokens, "height")?;
    let maxval = next_usize(&mut tokens, "maxval")? as f64;
    if maxval <= 0.0 {
        return Err(Error::Parse("PGM maxval must be positive".into()));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        data.push(next_usize(&mut tokens, "pixel")? as f64 / maxval);
    }
    Tensor::from_vec(vec![h, w], data)
}

/// Color `[3, H, W]` image to ASCII PPM; values are clamped to [0, 1].
pub fn format_ppm(t: &Tensor) -> Result<String> {
    let (h, w) = color_dims(t, "format_ppm")?;
    let mut s = format!("P3\n{w} {h}\n{PNM_MAXVAL}\n");
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            let v = t.data()[c * plane + p];
            let q = (v.clamp(0.0, 1.0) * PNM_MAXVAL as f64).round() as u32;
            let _ = write!(s, "{q}");
            s.push(if c == 2 { '\n' } else { ' ' });
        }
    }
    Ok(s)
}

pub fn parse_ppm(text: &str) -> Result<Tensor> {
    let mut tokens = pnm_tokens(text);
    expect_token(&mut tokens, "P3")?;
    let w = next_usize(&mut tokens, "width")?;
    let h = next_usize(&mut tokens, "height")?;
    let maxval = next_usize(&mut tokens, "maxval")? as f64;
    if maxval <= 0.0 {
        return Err(Error::Parse("PPM maxval must be positive".into()));
    }
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = next_usize(&mut tokens, "pixel")? as f64 / maxval;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Normal map `[3, H, W]` with per-pixel unit vectors in [-1, 1] to PPM via
/// `v = (n + 1) / 2`.
pub fn format_normals_ppm(t: &Tensor) -> Result<String> {
    let shifted = t.map(|n| (n + 1.0) / 2.0);
    format_ppm(&shifted)
}

/// Inverse of [`format_normals_ppm`]: `n = 2 * (v / maxval) - 1`.
pub fn parse_normals_ppm(text: &str) -> Result<Tensor> {
    let raw = parse_ppm(text)?;
    Ok(raw.map(|v| 2.0 * v - 1.0))
}

fn color_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] => Ok((*h, *w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            detail: "expected [3, H, W]".into(),
        }),
    }
}

fn pnm_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace().collect::<Vec<_>>())
}

fn expect_token<'a>(tokens: &mut impl Iterator<Item = &'a str>, want: &str) -> Result<()> {
    match tokens.next() {
        Some(t) if t == want => Ok(()),
        other => Err(Error::Parse(format!("expected `{want}`, got {other:?}"))),
    }
}

fn next_usize<'a>(tokens: &mut impl Iterator<Item = &'a str>, what: &str) -> Result<usize> {
    tokens
        .next()
        .ok_or_else(|| Error::Parse(format!("missing {what}")))?
        .parse()
        .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
/// Returns pairs in file order.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub fn format_key_values(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Read a scalar map from tensor text or PGM, keyed by extension.
pub fn read_scalar_map(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let t = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => parse_pgm(&text),
        _ => parse_tensor(&text),
    };
    t.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Read a normal map from tensor text or PPM, keyed by extension.
pub fn read_normal_map(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let t = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => parse_normals_ppm(&text),
        _ => parse_tensor(&text),
    };
    t.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
