/// Derives an independent stream seed from a tuple of identifiers
/// (SplitMix64 finalizer folded over the parts).
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = mix(h ^ mix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matters() {
        assert_ne!(stream_seed(&[1, 2]), stream_seed(&[2, 1]));
        assert_ne!(stream_seed(&[1]), stream_seed(&[1, 0]));
        assert_eq!(stream_seed(&[5, 6, 7]), stream_seed(&[5, 6, 7]));
    }
}
