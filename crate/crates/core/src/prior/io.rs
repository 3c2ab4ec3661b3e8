use std::fs;
use std::path::Path;

use super::{PairwisePrior, PriorBundle, PriorError};
use crate::geometry::CameraIntrinsics;

pub const MAGIC: &[u8; 4] = b"VLPR";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub const MANIFEST: &str = "manifest.txt";

fn pair_filename(a: u32, b: u32) -> String {
    format!("pair_{a:05}_{b:05}.bin")
}

pub fn pair_file_bytes(pair: &PairwisePrior) -> Vec<u8> {
    let n = pair.pixel_count();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (8 * n + 4 * pair.matches.len()));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        pair.height as u32,
        pair.width as u32,
        pair.matches.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let floats = pair
        .pointmap_a
        .iter()
        .chain(&pair.pointmap_b)
        .chain(&pair.confidence_a)
        .chain(&pair.confidence_b)
        .chain(pair.matches.iter().flatten());
    for f in floats {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

/// Parses one pair file. `expected` is the image size `(width, height)` from
/// the manifest.
pub fn parse_pair_file(
    bytes: &[u8],
    name: &str,
    view_a: u32,
    view_b: u32,
    expected: (usize, usize),
) -> Result<PairwisePrior, PriorError> {
    if bytes.len() < 4 {
        return Err(PriorError::TruncatedFile(name.to_string()));
    }
    if &bytes[..4] != MAGIC {
        return Err(PriorError::BadMagic(name.to_string()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(PriorError::TruncatedFile(name.to_string()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(PriorError::VersionMismatch {
            file: name.to_string(),
            found: version,
            expected: VERSION,
        });
    }
    let (height, width, m) = (word(1) as usize, word(2) as usize, word(3) as usize);
    if (width, height) != expected {
        return Err(PriorError::DimensionMismatch {
            file: name.to_string(),
            message: format!(
                "header says {width}x{height}, manifest says {}x{}",
                expected.0, expected.1
            ),
        });
    }
    let n = width * height;
    let floats = 8 * n + 4 * m;
    let body = &bytes[HEADER_LEN..];
    if body.len() < 4 * floats {
        return Err(PriorError::TruncatedFile(name.to_string()));
    }
    if body.len() > 4 * floats {
        return Err(PriorError::DimensionMismatch {
            file: name.to_string(),
            message: format!(
                "{} trailing bytes after the declared arrays",
                body.len() - 4 * floats
            ),
        });
    }
    let vals: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut at = 0;
    let mut take = |len: usize| {
        let s = vals[at..at + len].to_vec();
        at += len;
        s
    };
    let pointmap_a = take(3 * n);
    let pointmap_b = take(3 * n);
    let confidence_a = take(n);
    let confidence_b = take(n);
    let matches = take(4 * m)
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let pair = PairwisePrior {
        view_a,
        view_b,
        width,
        height,
        pointmap_a,
        pointmap_b,
        confidence_a,
        confidence_b,
        matches,
    };
    pair.validate(name)?;
    Ok(pair)
}

fn manifest_text(bundle: &PriorBundle) -> String {
    let k = &bundle.intrinsics;
    let mut s = format!(
        "intrinsics {} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    for (a, b) in bundle.keys() {
        s.push_str(&format!("pair {a} {b} {}\n", pair_filename(a, b)));
    }
    s
}

pub fn save_bundle(bundle: &PriorBundle, dir: &Path) -> Result<(), PriorError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for pair in bundle.pairs() {
        let path = dir.join(pair_filename(pair.view_a, pair.view_b));
        fs::write(&path, pair_file_bytes(pair)).map_err(|e| io_err(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_text(bundle)).map_err(|e| io_err(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<PriorBundle, PriorError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut intrinsics = None;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        let bad = |m: &str| PriorError::Manifest(format!("line {}: {m}", lineno + 1));
        match fields[0] {
            "intrinsics" => {
                if fields.len() != 7 {
                    return Err(bad("intrinsics needs fx fy cx cy W H"));
                }
                if intrinsics.is_some() {
                    return Err(bad("more than one intrinsics line"));
                }
                let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad("bad number"));
                let u = |i: usize| fields[i].parse::<usize>().map_err(|_| bad("bad size"));
                let k = CameraIntrinsics::new(f(1)?, f(2)?, f(3)?, f(4)?, u(5)?, u(6)?)
                    .map_err(|e| bad(&e.to_string()))?;
                intrinsics = Some(k);
            }
            "pair" => {
                if fields.len() != 4 {
                    return Err(bad("pair needs a b filename"));
                }
                let a = fields[1].parse::<u32>().map_err(|_| bad("bad frame index"))?;
                let b = fields[2].parse::<u32>().map_err(|_| bad("bad frame index"))?;
                pairs.push((a, b, fields[3].to_string()));
            }
            other => return Err(bad(&format!("unknown record {other}"))),
        }
    }
    let intrinsics = intrinsics.ok_or_else(|| PriorError::Manifest("no intrinsics line".into()))?;
    let mut bundle = PriorBundle::new(intrinsics);
    for (a, b, name) in pairs {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let pair = parse_pair_file(
            &bytes,
            &name,
            a,
            b,
            (intrinsics.width, intrinsics.height),
        )?;
        bundle.insert(pair)?;
    }
    Ok(bundle)
}

fn io_err(path: &Path, e: std::io::Error) -> PriorError {
    PriorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_pair() -> PairwisePrior {
        let n = 6;
        PairwisePrior {
            view_a: 1,
            view_b: 2,
            width: 3,
            height: 2,
            pointmap_a: (0..3 * n).map(|i| i as f32 * 0.5).collect(),
            pointmap_b: (0..3 * n).map(|i| 1.0 + i as f32).collect(),
            confidence_a: vec![1.0; n],
            confidence_b: vec![0.01; n],
            matches: vec![[0.0, 0.0, 1.5, 1.0], [2.0, 1.0, 0.25, 0.75]],
        }
    }

    #[test]
    fn pair_file_layout() {
        let bytes = pair_file_bytes(&tiny_pair());
        assert_eq!(&bytes[..4], b"VLPR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 20 + 4 * (8 * 6 + 8));
        // first matches float sits after the four dense arrays
        let off = 20 + 4 * 8 * 6;
        assert_eq!(f32::from_le_bytes(bytes[off + 8..off + 12].try_into().unwrap()), 1.5);
    }

    #[test]
    fn parse_errors() {
        let good = pair_file_bytes(&tiny_pair());
        let parse = |b: &[u8]| parse_pair_file(b, "t", 1, 2, (3, 2));
        assert_eq!(parse(&good).unwrap(), tiny_pair());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(parse(&bad), Err(PriorError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(parse(&bad), Err(PriorError::VersionMismatch { found: 2, .. })));

        assert!(matches!(parse(&good[..good.len() - 4]), Err(PriorError::TruncatedFile(_))));
        assert!(matches!(parse(&good[..10]), Err(PriorError::TruncatedFile(_))));

        let mut long = good.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(parse(&long), Err(PriorError::DimensionMismatch { .. })));
        assert!(matches!(
            parse_pair_file(&good, "t", 1, 2, (4, 2)),
            Err(PriorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_negative_confidence_and_out_of_bounds_matches() {
        let mut p = tiny_pair();
        p.confidence_a[0] = -1.0;
        assert!(matches!(p.validate("t"), Err(PriorError::InvalidValue { .. })));
        let mut p = tiny_pair();
        p.matches[0][2] = 3.0;
        assert!(matches!(p.validate("t"), Err(PriorError::InvalidValue { .. })));
    }
}
