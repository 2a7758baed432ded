//! Keystream cipher for bytecode and metadata sections.

const MUL: u64 = 6364136223846793005;
const INC: u64 = 1442695040888963407;

/// LCG state after `k` steps from `x`, in O(log k).
fn lcg_skip(mut x: u64, mut k: u64) -> u64 {
    let (mut a, mut c) = (MUL, INC);
    let (mut acc_a, mut acc_c) = (1u64, 0u64);
    while k > 0 {
        if k & 1 == 1 {
            acc_a = acc_a.wrapping_mul(a);
            acc_c = acc_c.wrapping_mul(a).wrapping_add(c);
        }
        c = c.wrapping_mul(a).wrapping_add(c);
        a = a.wrapping_mul(a);
        k >>= 1;
    }
    x = x.wrapping_mul(acc_a).wrapping_add(acc_c);
    x
}

/// XOR `data` in place with the keystream starting at stream position `offset`.
pub fn crypt_window(key: &[u8; 16], nonce: u64, offset: u64, data: &mut [u8]) {
    if data.is_empty() {
        return;
    }
    let x0 = u64::from_le_bytes(key[..8].try_into().unwrap()) ^ nonce;
    let mut block = offset / 8;
    let mut x = lcg_skip(x0, block + 1);
    for (j, b) in data.iter_mut().enumerate() {
        let i = offset + j as u64;
        if i / 8 != block {
            block = i / 8;
            x = x.wrapping_mul(MUL).wrapping_add(INC);
        }
        *b ^= x.to_le_bytes()[(i % 8) as usize] ^ key[(i % 16) as usize];
    }
}

/// Encrypts or decrypts (the operation is an involution).
pub fn crypt_stream(key: &[u8; 16], nonce: u64, data: &[u8]) -> Vec<u8> {
    let mut out = data.to_vec();
    crypt_window(key, nonce, 0, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // straight-line reference keystream
    fn reference(key: &[u8; 16], nonce: u64, n: usize) -> Vec<u8> {
        let mut x = u64::from_le_bytes(key[..8].try_into().unwrap()) ^ nonce;
        let mut ks = vec![];
        while ks.len() < n {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ks.extend_from_slice(&x.to_le_bytes());
        }
        ks.truncate(n);
        ks.iter().enumerate().map(|(i, b)| b ^ key[i % 16]).collect()
    }

    #[test]
    fn zero_key_first_block() {
        let out = crypt_stream(&[0; 16], 0, &[0; 8]);
        assert_eq!(out, 1442695040888963407u64.to_le_bytes());
    }

    #[test]
    fn empty_input() {
        assert!(crypt_stream(&[7; 16], 9, &[]).is_empty());
    }

    proptest! {
        #[test]
        fn involution(key: [u8; 16], nonce: u64, data in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(crypt_stream(&key, nonce, &crypt_stream(&key, nonce, &data)), data);
        }

        #[test]
        fn matches_reference(key: [u8; 16], nonce: u64, n in 0usize..100) {
            prop_assert_eq!(crypt_stream(&key, nonce, &vec![0; n]), reference(&key, nonce, n));
        }

        #[test]
        fn window_agrees_with_stream(key: [u8; 16], nonce: u64, off in 0usize..300, len in 0usize..40) {
            let full = reference(&key, nonce, off + len);
            let mut w = vec![0u8; len];
            crypt_window(&key, nonce, off as u64, &mut w);
            prop_assert_eq!(&w[..], &full[off..]);
        }
    }
}
