//! Hexadecimal float text, compatible with C's `%a` and Python's `float.hex`.

/// Formats `x` the way Python's `float.hex` does, e.g. `0x1.8000000000000p+1`.
pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && frac == 0 {
        return format!("{sign}0x0.0p+0");
    }
    let (lead, exp) = if exp_bits == 0 { (0, -1022) } else { (1, exp_bits - 1023) };
    let exp_sign = if exp < 0 { '-' } else { '+' };
    format!("{sign}0x{lead}.{frac:013x}p{exp_sign}{}", exp.abs())
}

/// Parses hexadecimal float text. Decimal text, `inf` and `nan` are rejected
/// except for the exact spellings `inf`, `-inf`, `nan` produced by [`format`].
pub fn parse(s: &str) -> Option<f64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let signed = |v: f64| if neg { -v } else { v };
    match body {
        "inf" => return Some(signed(f64::INFINITY)),
        "nan" => return Some(f64::NAN),
        _ => {}
    }
    let body = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X"))?;
    let (mantissa, exp) = match body.find(['p', 'P']) {
        Some(i) => (&body[..i], body[i + 1..].parse::<i64>().ok()?),
        None => (body, 0),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((a, b)) => (a, b),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let digits: Vec<u32> = int_part
        .chars()
        .chain(frac_part.chars())
        .map(|c| c.to_digit(16))
        .collect::<Option<_>>()?;
    // skip leading zeros so long zero-padded inputs still fit
    let first = digits.iter().position(|&d| d != 0);
    let Some(first) = first else {
        return Some(signed(0.0));
    };
    let significant = &digits[first..];
    if significant.len() > 30 {
        return None;
    }
    let mut m: u128 = 0;
    for &d in significant {
        m = (m << 4) | d as u128;
    }
    let scale = exp - 4 * frac_part.len() as i64;
    Some(signed(ldexp(m as f64, scale)))
}

fn ldexp(mut x: f64, mut e: i64) -> f64 {
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
    }
    x * 2f64.powi(e as i32)
}
