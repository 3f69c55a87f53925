use moec::Error;

/// Parses `2-3` (inclusive), `0..4` (exclusive) or a comma list like `1,3`;
/// the forms can be mixed: `0,2-3`.
pub fn parse(text: &str) -> Result<Vec<usize>, Error> {
    let bad = || Error::Config(format!("cannot parse layer range {text:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let mut out = Vec::new();
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            out.extend(num(a)?..num(b)?);
        } else if let Some((a, b)) = part.split_once('-') {
            out.extend(num(a)?..=num(b)?);
        } else {
            out.push(num(part)?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
