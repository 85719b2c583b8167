//! ISO 3779 vehicle identification numbers.

const WEIGHTS: [u32; 17] = [8, 7, 6, 5, 4, 3, 2, 10, 0, 9, 8, 7, 6, 5, 4, 3, 2];

fn transliterate(c: char) -> Option<u32> {
    Some(match c {
        '0'..='9' => c as u32 - '0' as u32,
        'A' | 'J' => 1,
        'B' | 'K' | 'S' => 2,
        'C' | 'L' | 'T' => 3,
        'D' | 'M' | 'U' => 4,
        'E' | 'N' | 'V' => 5,
        'F' | 'W' => 6,
        'G' | 'P' | 'X' => 7,
        'H' | 'Y' => 8,
        'R' | 'Z' => 9,
        // I, O and Q are excluded from VINs
        _ => return None,
    })
}

/// Computes the check character (position 9) for a 17-character VIN.
pub fn check_digit(vin: &str) -> Option<char> {
    let chars: Vec<char> = vin.chars().collect();
    if chars.len() != 17 {
        return None;
    }
    let mut sum = 0u32;
    for (c, w) in chars.iter().zip(WEIGHTS) {
        sum += transliterate(*c)? * w;
    }
    Some(match sum % 11 {
        10 => 'X',
        d => char::from_digit(d, 10).expect("remainder below 10"),
    })
}

/// 17 characters from the VIN alphabet with a correct check digit.
pub fn is_valid_vin(vin: &str) -> bool {
    match check_digit(vin) {
        Some(expected) => vin.chars().nth(8) == Some(expected),
        None => false,
    }
}

/// Builds a valid VIN from a 16-character body by inserting the check digit.
pub fn complete_vin(body16: &str) -> Option<String> {
    if body16.chars().count() != 16 {
        return None;
    }
    let mut chars: Vec<char> = body16.chars().collect();
    chars.insert(8, '0');
    let provisional: String = chars.iter().collect();
    let cd = check_digit(&provisional)?;
    chars[8] = cd;
    Some(chars.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent reference: position in this table mod 10 is the
    /// transliteration value; '.' marks excluded letters.
    fn oracle_valid(vin: &str) -> bool {
        const TABLE: &str = "0123456789.ABCDEFGH..JKLMN.P.R..STUVWXYZ";
        let bytes = vin.as_bytes();
        if bytes.len() != 17 {
            return false;
        }
        let mut total = 0usize;
        for (i, b) in bytes.iter().enumerate() {
            let Some(pos) = TABLE.find(*b as char) else {
                return false;
            };
            if *b == b'.' {
                return false;
            }
            let weight = match i {
                0..=6 => 8 - i,
                7 => 10,
                8 => 0,
                _ => 18 - i,
            };
            total += (pos % 10) * weight;
        }
        let expected = match total % 11 {
            10 => b'X',
            d => b'0' + d as u8,
        };
        bytes[8] == expected
    }

    #[test]
    fn known_good_vin() {
        assert!(oracle_valid("1HGCM82633A004352"));
        assert!(is_valid_vin("1HGCM82633A004352"));
    }

    #[test]
    fn wrong_check_digit() {
        assert!(!oracle_valid("1HGCM82643A004352"));
        assert!(!is_valid_vin("1HGCM82643A004352"));
    }

    #[test]
    fn excluded_letters_and_lengths() {
        assert!(!is_valid_vin("1HGCM82633A00435"));
        assert!(!is_valid_vin("1HGCM82633A0043521"));
        assert!(!is_valid_vin("1HGCM8263IA004352"));
        assert!(!is_valid_vin("1hgcm82633a004352"));
        assert!(!is_valid_vin(""));
    }

    #[test]
    fn agrees_with_oracle_on_generated_vins() {
        use rand::{Rng, SeedableRng};
        let alphabet: Vec<char> = "0123456789ABCDEFGHJKLMNPRSTUVWXYZIOQ".chars().collect();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3779);
        let mut valid = 0;
        for _ in 0..20_000 {
            let s: String = (0..17)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect();
            assert_eq!(is_valid_vin(&s), oracle_valid(&s), "{s}");
            valid += is_valid_vin(&s) as u32;
        }
        // roughly 1/11 of well-formed strings carry a matching check digit
        assert!(valid > 0);
    }

    #[test]
    fn completion_produces_valid_vins() {
        let v = complete_vin("1HGCM8263A004352").unwrap();
        assert_eq!(v, "1HGCM82633A004352");
        assert!(oracle_valid(&v));
    }
}
