//! Label color coding.

use crate::error::{Error, Result};
use crate::layers::loss::IGNORE;

pub const CLASS_NAMES: [&str; 6] = ["impervious", "building", "low_vegetation", "tree", "car", "clutter"];

/// Colors of classes 0..5.
pub const PALETTE: [[u8; 3]; 6] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

/// Color written for ignored pixels.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

/// Class index treated as background for the "no background" regimes.
pub const BACKGROUND: u8 = 5;

pub fn class_of(rgb: [u8; 3]) -> Option<u8> {
    PALETTE.iter().position(|&p| p == rgb).map(|c| c as u8)
}

/// Decodes packed RGB triples. [`IGNORE_COLOR`] decodes to [`IGNORE`]; other
/// unknown colors are an error unless `lenient`.
pub fn decode_labels(rgb: &[u8], lenient: bool) -> Result<Vec<u8>> {
    if rgb.len() % 3 != 0 {
        return Err(Error::Data(format!("{} bytes is not a whole number of RGB pixels", rgb.len())));
    }
    rgb.chunks_exact(3)
        .enumerate()
        .map(|(i, px)| {
            let c = [px[0], px[1], px[2]];
            match class_of(c) {
                Some(k) => Ok(k),
                None if c == IGNORE_COLOR || lenient => Ok(IGNORE),
                None => Err(Error::Data(format!("pixel {i}: color {c:?} is not in the palette"))),
            }
        })
        .collect()
}

/// Packed RGB for class indices; [`IGNORE`] maps to black.
pub fn encode_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * 3);
    for &l in labels {
        let c = match l {
            IGNORE => IGNORE_COLOR,
            k if (k as usize) < PALETTE.len() => PALETTE[k as usize],
            k => return Err(Error::Data(format!("class {k} has no color"))),
        };
        out.extend_from_slice(&c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legend() {
        assert_eq!(class_of([255, 255, 255]), Some(0));
        assert_eq!(class_of([0, 255, 0]), Some(3));
        assert_eq!(class_of([255, 0, 0]), Some(BACKGROUND));
        assert_eq!(class_of([1, 2, 3]), None);
    }

    #[test]
    fn round_trip_and_errors() {
        let labels: Vec<u8> = vec![0, 1, 2, 3, 4, 5, 5, 0];
        let rgb = encode_labels(&labels).unwrap();
        assert_eq!(decode_labels(&rgb, false).unwrap(), labels);
        assert!(decode_labels(&[9, 9, 9], false).is_err());
        assert_eq!(decode_labels(&[9, 9, 9], true).unwrap(), vec![IGNORE]);
        assert!(encode_labels(&[6]).is_err());
        assert_eq!(decode_labels(&encode_labels(&[IGNORE, 2]).unwrap(), false).unwrap(), vec![IGNORE, 2]);
    }
}
