//! Pixel-wise semantic similarity: the fraction of co-located pixels whose
//! class IDs agree.

use crate::error::{Error, Result};
use crate::maskio::SemanticMask;

/// Fraction of pixels where `q` and `d` carry the same class, in `[0, 1]`.
///
/// Both masks must have identical dimensions and palette; callers resize to a
/// common comparison resolution first.
pub fn pixelwise_similarity(q: &SemanticMask, d: &SemanticMask) -> Result<f64> {
    if q.width() != d.width() || q.height() != d.height() {
        return Err(Error::Dimension(format!(
            "pixel-wise similarity needs equal sizes, got {}x{} and {}x{}",
            q.width(),
            q.height(),
            d.width(),
            d.height()
        )));
    }
    if !q.same_palette(d) {
        return Err(Error::Palette(format!(
            "palette mismatch: {} vs {}",
            q.palette_id(),
            d.palette_id()
        )));
    }
    let matches = q
        .classes()
        .iter()
        .zip(d.classes())
        .filter(|(a, b)| a == b)
        .count();
    Ok(matches as f64 / q.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskio::ClassPalette;
    use proptest::prelude::*;

    fn pal(n: usize) -> ClassPalette {
        ClassPalette::new((0..n).map(|i| format!("k{i}"))).unwrap()
    }

    #[test]
    fn identity_and_half_match() {
        let p = pal(4);
        let a = SemanticMask::new(2, 2, vec![1, 1, 2, 2], &p).unwrap();
        let b = SemanticMask::new(2, 2, vec![1, 1, 3, 3], &p).unwrap();
        assert_eq!(pixelwise_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(pixelwise_similarity(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn mismatches_are_errors() {
        let a = SemanticMask::new(2, 2, vec![0; 4], &pal(4)).unwrap();
        let b = SemanticMask::new(4, 1, vec![0; 4], &pal(4)).unwrap();
        let c = SemanticMask::new(2, 2, vec![0; 4], &pal(5)).unwrap();
        assert!(matches!(pixelwise_similarity(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(pixelwise_similarity(&a, &c), Err(Error::Palette(_))));
    }

    proptest! {
        #[test]
        fn range_symmetry_and_extremes(data in proptest::collection::vec((0u8..5, 0u8..5), 12)) {
            let p = pal(5);
            let a = SemanticMask::new(4, 3, data.iter().map(|d| d.0).collect(), &p).unwrap();
            let b = SemanticMask::new(4, 3, data.iter().map(|d| d.1).collect(), &p).unwrap();
            let s = pixelwise_similarity(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, pixelwise_similarity(&b, &a).unwrap());
            prop_assert_eq!(s == 1.0, a == b);
            prop_assert_eq!(s == 0.0, data.iter().all(|d| d.0 != d.1));
        }
    }
}
